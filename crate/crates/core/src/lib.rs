//! Adaptive retrieval-augmented question answering.
//!
//! A question is answered by iterating retrieve, filter, and note-taking
//! steps until a memory note is judged sufficient, then generating the
//! answer from that note alone. See the `book/` directory for a guided tour.

pub mod agents;
pub mod config;
pub mod eval;
pub mod filter;
pub mod llm;
pub mod model;
pub mod pipeline;
pub mod prompt;
pub mod reply;
pub mod retriever;
pub mod text;

use llm::{LanguageModel, LlmError};
use prompt::{PromptError, TemplateName, TemplateSet};

/// Error from one templated model call.
#[derive(Debug, thiserror::Error)]
pub enum CallError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

/// The model and templates every stage talks through.
#[derive(Clone, Copy)]
pub struct Context<'a> {
    pub llm: &'a dyn LanguageModel,
    pub prompts: &'a TemplateSet,
}

impl<'a> Context<'a> {
    pub fn new(llm: &'a dyn LanguageModel, prompts: &'a TemplateSet) -> Self {
        Self { llm, prompts }
    }

    /// Renders `template` with `bindings` and returns the model's reply.
    pub fn ask(
        &self,
        template: TemplateName,
        bindings: &[(&str, &str)],
    ) -> Result<String, CallError> {
        let prompt = self.prompts.render(template, bindings)?;
        Ok(self.llm.generate(template, prompt)?)
    }
}

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/retrieval.md")]
    mod retrieval {}
    #[doc = include_str!("../../../book/src/prompts.md")]
    mod prompts {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/filtering.md")]
    mod filtering {}
    #[doc = include_str!("../../../book/src/memory.md")]
    mod memory {}
    #[doc = include_str!("../../../book/src/loop.md")]
    mod adaptive_loop {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
}
