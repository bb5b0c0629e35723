use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};

use amber_core::config::RunConfig;
use amber_core::eval::load_dataset;
use amber_core::llm::MockMode;
use amber_core::model::Query;
use amber_core::pipeline::{run_question, RunError, StopReason, TraceLine};
use amber_core::retriever::{index_corpus, load_index, Bm25Params, DEFAULT_WINDOW};
use amber_core::Context;
use anyhow::Context as _;

use crate::commands::{gateway, templates};
use crate::{Failure, RunArgs};

/// Path of the effective-config file written next to a trace.
pub fn config_echo_path(trace: &Path) -> PathBuf {
    let mut name = trace.as_os_str().to_owned();
    name.push(".config");
    PathBuf::from(name)
}

fn file_stem_for(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub fn run(args: RunArgs) -> Result<(), Failure> {
    let map = args.model.config_map(&[
        ("index", &args.index),
        ("corpus", &args.corpus),
        ("dataset", &args.dataset),
        ("kind", &args.kind),
        ("max_iter", &args.max_iter),
        ("top_k", &args.top_k),
        ("stop_on_no_improvement", &args.stop_on_no_improvement),
        ("trace", &args.trace),
        ("trace_dir", &args.trace_dir),
    ])?;
    let cfg = RunConfig::from_map(&map)?;

    let index = match (&cfg.index, &cfg.corpus) {
        (Some(path), _) => load_index(path)?,
        (None, Some(corpus)) => index_corpus(corpus, DEFAULT_WINDOW, Bm25Params::default())?,
        (None, None) => unreachable!("RunConfig requires an index or a corpus"),
    };
    let dataset = load_dataset(&cfg.dataset, cfg.kind)?;
    let prompts = templates(&cfg.model)?;
    let (gw, mode) = gateway(&cfg.model)?;
    let workers = if mode == Some(MockMode::Sequential) {
        if cfg.model.concurrency > 1 {
            tracing::warn!("sequential mock script: answering one question at a time");
        }
        1
    } else {
        cfg.model.concurrency
    };

    fs::write(config_echo_path(&cfg.trace), map.to_text())
        .with_context(|| format!("cannot write {}", config_echo_path(&cfg.trace).display()))?;
    let file = File::create(&cfg.trace)
        .with_context(|| format!("cannot create {}", cfg.trace.display()))?;
    let mut trace = BufWriter::new(file);
    if let Some(dir) = &cfg.trace_dir {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }

    let interrupted = Arc::new(AtomicBool::new(false));
    {
        let flag = interrupted.clone();
        let installed = ctrlc::set_handler(move || {
            if flag.swap(true, Ordering::SeqCst) {
                std::process::exit(130);
            }
            eprintln!("interrupted: finishing questions in progress, press Ctrl-C again to abort");
        });
        if let Err(e) = installed {
            tracing::warn!("cannot install interrupt handler: {e}");
        }
    }

    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, TraceLine)>();
    let ctx = Context::new(&gw, &prompts);
    let mut histogram: BTreeMap<&'static str, usize> = BTreeMap::new();
    let mut written = 0usize;
    let mut question_calls = 0u64;

    let write_result: std::io::Result<()> = std::thread::scope(|scope| {
        for _ in 0..workers.min(dataset.len().max(1)) {
            let tx = tx.clone();
            let (next, interrupted, dataset, index, cfg) =
                (&next, &interrupted, &dataset, &index, &cfg);
            scope.spawn(move || loop {
                if interrupted.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(ex) = dataset.get(i) else { break };
                let outcome = match Query::new(ex.id.clone(), ex.question.clone()) {
                    Ok(q) => run_question(&ctx, index, &cfg.loop_config, &q),
                    Err(e) => Err(RunError::InitFailed(e.to_string())),
                };
                if tx.send((i, TraceLine::new(&ex.id, outcome))).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        // Lines are written in dataset order as soon as every earlier one is in.
        let mut pending: BTreeMap<usize, TraceLine> = BTreeMap::new();
        let mut expect = 0usize;
        let mut emit = |line: &TraceLine| -> std::io::Result<()> {
            serde_json::to_writer(&mut trace, line)?;
            trace.write_all(b"\n")?;
            trace.flush()?;
            if let Some(dir) = &cfg.trace_dir {
                let path = dir.join(format!("{}.json", file_stem_for(&line.id)));
                fs::write(path, serde_json::to_string_pretty(line)? + "\n")?;
            }
            match &line.result {
                Some(r) => {
                    *histogram.entry(r.stopped_because.as_str()).or_default() += 1;
                    question_calls += r.llm_calls;
                }
                None => {
                    tracing::warn!(
                        "question {} failed: {}",
                        line.id,
                        line.error.as_deref().unwrap_or("")
                    );
                    *histogram.entry("error").or_default() += 1;
                }
            }
            written += 1;
            Ok(())
        };
        for (i, line) in rx {
            pending.insert(i, line);
            while let Some(line) = pending.remove(&expect) {
                emit(&line)?;
                expect += 1;
            }
        }
        // After an interrupt, flush whatever finished out of order.
        for line in pending.into_values() {
            emit(&line)?;
        }
        Ok(())
    });
    write_result.with_context(|| format!("cannot write trace {}", cfg.trace.display()))?;

    println!(
        "questions: {written}/{} answered or recorded",
        dataset.len()
    );
    println!(
        "llm calls: {} requested, {} to backend, {} from cache (per-question total {question_calls})",
        gw.requests(),
        gw.backend_calls(),
        gw.cache_hits()
    );
    println!("stopped because:");
    for reason in StopReason::ALL.iter().map(|r| r.as_str()).chain(["error"]) {
        println!(
            "  {reason}: {}",
            histogram.get(reason).copied().unwrap_or(0)
        );
    }
    println!("trace: {}", cfg.trace.display());
    if interrupted.load(Ordering::SeqCst) {
        eprintln!("run interrupted; trace holds the completed questions only");
    }
    Ok(())
}
