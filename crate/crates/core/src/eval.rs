//! QA datasets and answer metrics.
//!
//! Short-form datasets are scored with `acc` (gold contained in the
//! prediction) and token F1; long-form datasets with `str_em` (fraction of
//! sub-questions covered) and `str_hit` (all covered). Aggregates are means
//! scaled to percentages and rounded to two decimals.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::pipeline::RunResult;
use crate::text::{answer_tokens, contains_run};

fn contains_answer(prediction: &[String], gold: &str) -> bool {
    contains_run(prediction, &answer_tokens(gold))
}

/// 1 when any gold answer occurs as a contiguous run of normalized tokens.
pub fn metric_acc(prediction: &str, golds: &[String]) -> f64 {
    let pred = answer_tokens(prediction);
    golds.iter().any(|g| contains_answer(&pred, g)) as u8 as f64
}

fn f1_tokens(pred: &[String], gold: &[String]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return (pred.is_empty() && gold.is_empty()) as u8 as f64;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in pred {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / pred.len() as f64;
    let r = overlap as f64 / gold.len() as f64;
    2.0 * p * r / (p + r)
}

/// Best multiset token F1 over the gold answers.
pub fn metric_token_f1(prediction: &str, golds: &[String]) -> f64 {
    let pred = answer_tokens(prediction);
    golds
        .iter()
        .map(|g| f1_tokens(&pred, &answer_tokens(g)))
        .fold(0.0, f64::max)
}

/// Acceptable short answers for one disambiguated sub-question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub short_answers: Vec<String>,
}

/// Fraction of sub-questions with at least one short answer contained in
/// the prediction.
pub fn metric_str_em(prediction: &str, qa_pairs: &[QaPair]) -> f64 {
    if qa_pairs.is_empty() {
        return 0.0;
    }
    let pred = answer_tokens(prediction);
    let covered = qa_pairs
        .iter()
        .filter(|pair| pair.short_answers.iter().any(|a| contains_answer(&pred, a)))
        .count();
    covered as f64 / qa_pairs.len() as f64
}

pub fn metric_str_hit(prediction: &str, qa_pairs: &[QaPair]) -> f64 {
    (metric_str_em(prediction, qa_pairs) == 1.0) as u8 as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Shortform,
    Longform,
}

impl std::str::FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "shortform" => Ok(DatasetKind::Shortform),
            "longform" => Ok(DatasetKind::Longform),
            other => Err(format!(
                "unknown dataset kind {other:?}, expected shortform or longform"
            )),
        }
    }
}

impl DatasetKind {
    pub fn metric_names(self) -> [&'static str; 2] {
        match self {
            DatasetKind::Shortform => ["acc", "f1"],
            DatasetKind::Longform => ["str_em", "str_hit"],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaExample {
    pub id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub qa_pairs: Vec<QaPair>,
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("cannot read dataset: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("dataset line {line}: field `{field}`: {message}")]
    Schema {
        line: usize,
        field: &'static str,
        message: String,
    },
}

#[derive(Deserialize)]
struct RawExample {
    id: Option<String>,
    question: Option<String>,
    answers: Option<Vec<String>>,
    qa_pairs: Option<Vec<QaPair>>,
}

/// Parses a JSON-lines dataset. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn parse_dataset(source: &str, kind: DatasetKind) -> Result<Vec<QaExample>, DatasetError> {
    let mut examples = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in source.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawExample = serde_json::from_str(line).map_err(|e| DatasetError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let schema = |field, message: &str| DatasetError::Schema {
            line: line_no,
            field,
            message: message.to_string(),
        };
        let id = raw
            .id
            .filter(|s| !s.is_empty())
            .ok_or_else(|| schema("id", "missing or empty"))?;
        if !seen.insert(id.clone()) {
            return Err(schema("id", "duplicate id"));
        }
        let question = raw
            .question
            .filter(|s| !s.trim().is_empty())
            .ok_or_else(|| schema("question", "missing or empty"))?;
        let example = match kind {
            DatasetKind::Shortform => {
                let answers = raw
                    .answers
                    .ok_or_else(|| schema("answers", "required for shortform"))?;
                if answers.is_empty() || answers.iter().any(|a| a.trim().is_empty()) {
                    return Err(schema(
                        "answers",
                        "must be a non-empty list of non-empty strings",
                    ));
                }
                QaExample {
                    id,
                    question,
                    answers,
                    qa_pairs: Vec::new(),
                }
            }
            DatasetKind::Longform => {
                let qa_pairs = raw
                    .qa_pairs
                    .ok_or_else(|| schema("qa_pairs", "required for longform"))?;
                let valid = !qa_pairs.is_empty()
                    && qa_pairs.iter().all(|p| {
                        !p.short_answers.is_empty()
                            && p.short_answers.iter().all(|a| !a.trim().is_empty())
                    });
                if !valid {
                    return Err(schema(
                        "qa_pairs",
                        "every pair needs non-empty short_answers",
                    ));
                }
                QaExample {
                    id,
                    question,
                    answers: Vec::new(),
                    qa_pairs,
                }
            }
        };
        examples.push(example);
    }
    Ok(examples)
}

pub fn load_dataset(path: &Path, kind: DatasetKind) -> Result<Vec<QaExample>, DatasetError> {
    parse_dataset(&std::fs::read_to_string(path)?, kind)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub id: String,
    /// Absent when the run produced no result for this example.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction: Option<String>,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub kind: DatasetKind,
    pub count: usize,
    pub missing: Vec<String>,
    /// Means over all examples, as percentages rounded to two decimals.
    pub aggregates: BTreeMap<String, f64>,
    pub examples: Vec<ExampleScore>,
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("result for unknown id {0:?}")]
    UnknownId(String),
    #[error("more than one result for id {0:?}")]
    DuplicateResult(String),
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Scores `results` against `dataset` by id. Examples without a result
/// score 0 on every metric and are listed in `missing`.
pub fn evaluate_run(
    results: &[RunResult],
    dataset: &[QaExample],
    kind: DatasetKind,
) -> Result<MetricReport, EvalError> {
    let known: HashSet<&str> = dataset.iter().map(|e| e.id.as_str()).collect();
    let mut predictions: HashMap<&str, &str> = HashMap::new();
    for r in results {
        let id = r.query.id.as_str();
        if !known.contains(id) {
            return Err(EvalError::UnknownId(id.to_string()));
        }
        if predictions.insert(id, &r.answer.text).is_some() {
            return Err(EvalError::DuplicateResult(id.to_string()));
        }
    }

    let names = kind.metric_names();
    let mut missing = Vec::new();
    let mut examples = Vec::with_capacity(dataset.len());
    for ex in dataset {
        let prediction = predictions.get(ex.id.as_str()).copied();
        let values = match (prediction, kind) {
            (None, _) => {
                missing.push(ex.id.clone());
                [0.0, 0.0]
            }
            (Some(p), DatasetKind::Shortform) => {
                [metric_acc(p, &ex.answers), metric_token_f1(p, &ex.answers)]
            }
            (Some(p), DatasetKind::Longform) => [
                metric_str_em(p, &ex.qa_pairs),
                metric_str_hit(p, &ex.qa_pairs),
            ],
        };
        examples.push(ExampleScore {
            id: ex.id.clone(),
            prediction: prediction.map(str::to_string),
            metrics: names.iter().map(|n| n.to_string()).zip(values).collect(),
        });
    }
    if !missing.is_empty() {
        tracing::warn!(
            count = missing.len(),
            "examples without a result scored as 0"
        );
    }

    // Summed in id order so the aggregate does not depend on input order.
    let mut by_id: Vec<&ExampleScore> = examples.iter().collect();
    by_id.sort_by(|a, b| a.id.cmp(&b.id));
    let aggregates = names
        .iter()
        .map(|&n| {
            let mean = if by_id.is_empty() {
                0.0
            } else {
                by_id.iter().map(|e| e.metrics[n]).sum::<f64>() / by_id.len() as f64
            };
            (n.to_string(), round2(mean * 100.0))
        })
        .collect();

    Ok(MetricReport {
        kind,
        count: dataset.len(),
        missing,
        aggregates,
        examples,
    })
}

impl MetricReport {
    /// Aligned plain-text table: one row per example, then the means.
    pub fn to_table(&self) -> String {
        let names = self.kind.metric_names();
        let id_width = self
            .examples
            .iter()
            .map(|e| e.id.len())
            .chain([4])
            .max()
            .unwrap_or(4);
        let mut out = String::new();
        let _ = write!(out, "{:<id_width$}", "id");
        for n in names {
            let _ = write!(out, "  {n:>8}");
        }
        out.push('\n');
        for e in &self.examples {
            let _ = write!(out, "{:<id_width$}", e.id);
            for n in names {
                let _ = write!(out, "  {:>8.4}", e.metrics[n]);
            }
            if e.prediction.is_none() {
                out.push_str("  (missing)");
            }
            out.push('\n');
        }
        let _ = write!(out, "{:<id_width$}", "mean");
        for n in names {
            let _ = write!(out, "  {:>8.2}", self.aggregates[n]);
        }
        out.push('\n');
        let _ = writeln!(
            out,
            "{} examples, {} missing",
            self.count,
            self.missing.len()
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Answer, MemoryNote, Query};
    use crate::pipeline::StopReason;
    use proptest::prelude::*;

    fn golds(g: &[&str]) -> Vec<String> {
        g.iter().map(|s| s.to_string()).collect()
    }

    fn pairs(p: &[&[&str]]) -> Vec<QaPair> {
        p.iter()
            .map(|a| QaPair {
                short_answers: golds(a),
            })
            .collect()
    }

    fn result(id: &str, answer: &str) -> RunResult {
        RunResult {
            query: Query::new(id, "q").unwrap(),
            final_note: MemoryNote::initialized("n"),
            answer: Answer {
                text: answer.into(),
            },
            iterations: Vec::new(),
            query_log: Vec::new(),
            llm_calls: 0,
            stopped_because: StopReason::Sufficient,
        }
    }

    fn short(id: &str, answers: &[&str]) -> QaExample {
        QaExample {
            id: id.into(),
            question: "q".into(),
            answers: golds(answers),
            qa_pairs: Vec::new(),
        }
    }

    #[test]
    fn acc_examples() {
        assert_eq!(metric_acc("It was Paris, France.", &golds(&["Paris"])), 1.0);
        assert_eq!(metric_acc("London", &golds(&["Paris"])), 0.0);
        assert_eq!(metric_acc("the answer", &golds(&["The Answer"])), 1.0);
        assert_eq!(metric_acc("Parisian", &golds(&["Paris"])), 0.0);
    }

    #[test]
    fn f1_examples() {
        assert_eq!(metric_token_f1("blue whale", &golds(&["blue whale"])), 1.0);
        assert_eq!(
            metric_token_f1("the blue whale", &golds(&["blue whale"])),
            1.0
        );
        assert!((metric_token_f1("big blue whale", &golds(&["blue whale"])) - 0.8).abs() < 1e-9);
        assert_eq!(metric_token_f1("red fox", &golds(&["blue whale"])), 0.0);
        assert_eq!(metric_token_f1("", &golds(&["the"])), 1.0);
        assert_eq!(metric_token_f1("", &golds(&["x"])), 0.0);
        assert_eq!(metric_token_f1("x y", &golds(&["z", "y"])), 2.0 / 3.0);
    }

    #[test]
    fn str_metrics() {
        let p = pairs(&[&["Paris"], &["London"]]);
        assert_eq!(metric_str_em("It is Paris.", &p), 0.5);
        assert_eq!(metric_str_hit("It is Paris.", &p), 0.0);
        assert_eq!(metric_str_em("Paris and London", &p), 1.0);
        assert_eq!(metric_str_hit("Paris and London", &p), 1.0);
        assert_eq!(metric_str_em("Rome", &p), 0.0);
        assert_eq!(
            metric_str_hit("Paris", &pairs(&[&["Paris", "City of Light"]])),
            1.0
        );
    }

    proptest! {
        #[test]
        fn f1_of_self_is_one(a in "[a-z]{1,6}( [a-z]{1,6}){0,5}") {
            prop_assume!(!answer_tokens(&a).is_empty());
            prop_assert_eq!(metric_token_f1(&a, std::slice::from_ref(&a)), 1.0);
        }

        #[test]
        fn hit_never_exceeds_em(pred in "[a-c ]{0,12}", answers in prop::collection::vec("[a-c]{1,2}", 1..4)) {
            let p: Vec<QaPair> = answers.into_iter().map(|a| QaPair { short_answers: vec![a] }).collect();
            let em = metric_str_em(&pred, &p);
            prop_assert!((0.0..=1.0).contains(&em));
            prop_assert!(metric_str_hit(&pred, &p) <= em.ceil());
        }
    }

    #[test]
    fn dataset_parsing() {
        let src = "{\"id\":\"a\",\"question\":\"Q?\",\"answers\":[\"x\"]}\n\n{\"id\":\"b\",\"question\":\"R?\",\"answers\":[\"y\",\"z\"],\"extra\":1}\n";
        let ds = parse_dataset(src, DatasetKind::Shortform).unwrap();
        assert_eq!(ds.len(), 2);
        assert!(parse_dataset("", DatasetKind::Shortform)
            .unwrap()
            .is_empty());
        assert!(matches!(
            parse_dataset(src, DatasetKind::Longform),
            Err(DatasetError::Schema {
                field: "qa_pairs",
                line: 1,
                ..
            })
        ));
        assert!(matches!(
            parse_dataset("{\"id\":\"a\",\"question\":\"Q\"}", DatasetKind::Shortform),
            Err(DatasetError::Schema {
                field: "answers",
                ..
            })
        ));
        assert!(matches!(
            parse_dataset("ok\n{", DatasetKind::Shortform),
            Err(DatasetError::Parse { line: 1, .. })
        ));
        let long = "{\"id\":\"a\",\"question\":\"Q\",\"qa_pairs\":[{\"short_answers\":[\"p\"]}]}";
        assert_eq!(
            parse_dataset(long, DatasetKind::Longform).unwrap()[0]
                .qa_pairs
                .len(),
            1
        );
    }

    #[test]
    fn aggregates_are_percent_means() {
        let ds = [short("a", &["Paris"]), short("b", &["Rome"])];
        let report = evaluate_run(
            &[result("a", "Paris"), result("b", "Milan")],
            &ds,
            DatasetKind::Shortform,
        )
        .unwrap();
        assert_eq!(report.aggregates["acc"], 50.0);
        assert_eq!(report.aggregates["f1"], 50.0);
        let all = evaluate_run(
            &[result("a", "Paris"), result("b", "Rome")],
            &ds,
            DatasetKind::Shortform,
        )
        .unwrap();
        assert_eq!(all.aggregates["acc"], 100.0);
    }

    #[test]
    fn missing_results_score_zero_and_unknown_ids_fail() {
        let ds = [
            short("a", &["Paris"]),
            short("b", &["Rome"]),
            short("c", &["Oslo"]),
        ];
        let report = evaluate_run(&[result("a", "Paris")], &ds, DatasetKind::Shortform).unwrap();
        assert_eq!(report.missing, ["b", "c"]);
        assert_eq!(report.aggregates["acc"], 33.33);
        assert!(matches!(
            evaluate_run(&[result("zz", "x")], &ds, DatasetKind::Shortform),
            Err(EvalError::UnknownId(id)) if id == "zz"
        ));
        let table = report.to_table();
        assert!(table.contains("(missing)"));
        assert!(table.contains("mean"));
    }

    #[test]
    fn order_does_not_change_aggregates() {
        let ds = vec![
            short("a", &["big cat"]),
            short("b", &["dog"]),
            short("c", &["red fox jumps"]),
        ];
        let rs = vec![
            result("a", "a big black cat"),
            result("b", "dog"),
            result("c", "the fox"),
        ];
        let forward = evaluate_run(&rs, &ds, DatasetKind::Shortform).unwrap();
        let mut ds_rev = ds.clone();
        ds_rev.reverse();
        let mut rs_rev = rs.clone();
        rs_rev.reverse();
        let backward = evaluate_run(&rs_rev, &ds_rev, DatasetKind::Shortform).unwrap();
        assert_eq!(forward.aggregates, backward.aggregates);
    }
}
