use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use amber_core::config::{BackendConfig, ConfigError, ModelConfig};
use amber_core::eval::{evaluate_run, load_dataset, DatasetKind};
use amber_core::filter::{build_training_set, pass_rates, ExampleKind, Measure, TrainingItem};
use amber_core::llm::{
    Backend, Gateway, HttpBackend, MockBackend, MockMode, MockScript, ResponseCache,
};
use amber_core::model::Query;
use amber_core::pipeline::{StopReason, TraceLine};
use amber_core::prompt::TemplateSet;
use amber_core::retriever::{
    index_corpus, load_index, save_index, Bm25Index, Bm25Params, DEFAULT_TOP_K,
};
use amber_core::Context;
use anyhow::{anyhow, Context as _};

use crate::{EvalArgs, Failure, FiltergenArgs, IndexArgs, TraceArgs};

pub fn index(args: IndexArgs) -> Result<(), Failure> {
    let params = Bm25Params {
        k1: args.k1,
        b: args.b,
    };
    let index = index_corpus(&args.corpus, args.window, params)?;
    save_index(&index, &args.out)?;
    println!(
        "indexed {} passages, avgdl {:.2}, vocabulary {} -> {}",
        index.len(),
        index.avgdl(),
        index.vocabulary_len(),
        args.out.display()
    );
    Ok(())
}

pub fn templates(cfg: &ModelConfig) -> Result<TemplateSet, Failure> {
    Ok(match &cfg.prompts {
        Some(dir) => TemplateSet::load_dir(dir)?,
        None => TemplateSet::builtin(),
    })
}

/// The configured backend behind a gateway, plus the mock's mode when the
/// backend is a script.
pub fn gateway(cfg: &ModelConfig) -> Result<(Gateway, Option<MockMode>), Failure> {
    let (backend, mode): (Arc<dyn Backend>, _) = match &cfg.backend {
        BackendConfig::Mock { script } => {
            let script = MockScript::load(script).map_err(|e| anyhow!(e))?;
            let mock = MockBackend::new(script);
            let mode = mock.mode();
            (Arc::new(mock), Some(mode))
        }
        BackendConfig::Http {
            endpoint,
            score_endpoint,
        } => {
            let mut http = HttpBackend::new(endpoint.clone())
                .with_retry(cfg.retry)
                .with_timeout(cfg.timeout);
            if let Some(url) = score_endpoint {
                http = http.with_score_endpoint(url.clone());
            }
            (Arc::new(http), None)
        }
    };
    let in_flight = if mode == Some(MockMode::Sequential) {
        1
    } else {
        cfg.concurrency
    };
    let mut gw = Gateway::new(backend, cfg.generation.clone()).with_concurrency(in_flight);
    if let Some(dir) = &cfg.cache_dir {
        let cache = ResponseCache::open(dir)
            .with_context(|| format!("cannot open cache {}", dir.display()))?;
        gw = gw.with_cache(cache);
    }
    Ok((gw, mode))
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceLine>, Failure> {
    let source = fs::read_to_string(path)
        .with_context(|| format!("cannot read trace {}", path.display()))?;
    let mut lines = Vec::new();
    for (i, line) in source.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TraceLine = serde_json::from_str(line)
            .with_context(|| format!("{}: line {}", path.display(), i + 1))?;
        lines.push(parsed);
    }
    Ok(lines)
}

pub fn eval(args: EvalArgs) -> Result<(), Failure> {
    let kind: DatasetKind = args.kind.parse().map_err(|e: String| anyhow!(e))?;
    let dataset = load_dataset(&args.dataset, kind)?;
    let lines = read_trace(&args.trace)?;
    if lines.is_empty() {
        tracing::warn!("trace {} is empty", args.trace.display());
    }
    let results: Vec<_> = lines.into_iter().filter_map(|l| l.result).collect();
    let report = evaluate_run(&results, &dataset, kind)?;
    print!("{}", report.to_table());
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    match &args.report {
        Some(path) => {
            fs::write(path, json).with_context(|| format!("cannot write {}", path.display()))?
        }
        None => print!("{json}"),
    }
    Ok(())
}

pub fn filtergen(args: FiltergenArgs) -> Result<(), Failure> {
    let map = args.model.config_map(&[
        ("dataset", &args.dataset),
        ("index", &args.index),
        ("measure", &args.measure),
        ("threshold", &args.threshold),
        ("top_k", &args.top_k),
        ("out", &args.out),
    ])?;
    let measure: Measure = map.parsed("measure", Measure::Strinc)?;
    let thresholds: Vec<f64> = map
        .get("threshold")
        .unwrap_or("0")
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| ConfigError::Invalid {
            key: "threshold".into(),
            message: e.to_string(),
        })?;
    let top_k: usize = map.parsed("top_k", DEFAULT_TOP_K)?;
    let out = map.path("out").ok_or(ConfigError::Missing("out"))?;
    let dataset = load_dataset(&map.required_path("dataset")?, DatasetKind::Shortform)?;
    let index = load_index(&map.required_path("index")?)?;
    let cfg = ModelConfig::from_map(&map)?;
    if measure == Measure::Cxmi {
        if let BackendConfig::Http {
            score_endpoint: None,
            ..
        } = cfg.backend
        {
            return Err(Failure::Config(anyhow!(
                "unsupported: cxmi needs continuation scoring; set `score_endpoint`"
            )));
        }
    }
    let prompts = templates(&cfg)?;
    let (gw, _) = gateway(&cfg)?;
    let ctx = Context::new(&gw, &prompts);

    let items = training_items(&index, &dataset, top_k)?;
    let report = build_training_set(&ctx, &items, measure, thresholds[0]);
    fs::write(&out, report.to_jsonl())
        .with_context(|| format!("cannot write {}", out.display()))?;

    for f in &report.failures {
        tracing::warn!("{f}");
    }
    println!(
        "chunk_nli: {} (useful {}, useless {})",
        report.count(ExampleKind::ChunkNli),
        report.label_count(amber_core::filter::Verdict::Useful),
        report.label_count(amber_core::filter::Verdict::Useless),
    );
    println!(
        "sentence_filter: {} ({} low-signal)",
        report.count(ExampleKind::SentenceFilter),
        report.low_signal()
    );
    println!("failures: {}", report.failures.len());
    if thresholds.len() > 1 || measure == Measure::Cxmi {
        for (t, rate) in pass_rates(&report.examples, measure, &thresholds) {
            println!("threshold {t}: pass rate {:.4}", rate);
        }
    }
    Ok(())
}

fn training_items(
    index: &Bm25Index,
    dataset: &[amber_core::eval::QaExample],
    top_k: usize,
) -> Result<Vec<TrainingItem>, Failure> {
    dataset
        .iter()
        .map(|ex| {
            let query = Query::new(ex.id.clone(), ex.question.clone())?;
            Ok(TrainingItem {
                chunks: index.search(&query.text, top_k),
                gold_answer: ex.answers[0].clone(),
                query,
            })
        })
        .collect()
}

pub fn trace(args: TraceArgs) -> Result<(), Failure> {
    let lines = read_trace(&args.trace)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match args.id {
        Some(id) => {
            let line = lines.iter().find(|l| l.id == id).ok_or_else(|| {
                Failure::NotFound(format!("question {id:?} in {}", args.trace.display()))
            })?;
            write_detail(&mut out, line)?;
        }
        None => {
            let mut histogram: BTreeMap<&str, usize> = BTreeMap::new();
            for line in &lines {
                match &line.result {
                    Some(r) => {
                        *histogram.entry(r.stopped_because.as_str()).or_default() += 1;
                        writeln!(
                            out,
                            "{}\t{} iterations\t{} calls\t{}\t{}",
                            line.id,
                            r.iterations.len(),
                            r.llm_calls,
                            r.stopped_because.as_str(),
                            r.answer.text
                        )?;
                    }
                    None => {
                        *histogram.entry("error").or_default() += 1;
                        writeln!(
                            out,
                            "{}\terror\t{}",
                            line.id,
                            line.error.as_deref().unwrap_or("")
                        )?;
                    }
                }
            }
            writeln!(out, "{} questions", lines.len())?;
            for reason in StopReason::ALL.iter().map(|r| r.as_str()).chain(["error"]) {
                if let Some(n) = histogram.get(reason) {
                    writeln!(out, "  {reason}: {n}")?;
                }
            }
        }
    }
    Ok(())
}

fn write_detail(out: &mut impl Write, line: &TraceLine) -> std::io::Result<()> {
    writeln!(out, "question {}", line.id)?;
    let Some(r) = &line.result else {
        return writeln!(
            out,
            "  failed: {}",
            line.error.as_deref().unwrap_or("unknown error")
        );
    };
    writeln!(out, "  text: {}", r.query.text)?;
    for it in &r.iterations {
        let useful = it
            .verdicts
            .iter()
            .filter(|v| v.verdict == Some(amber_core::filter::Verdict::Useful))
            .count();
        let useless = it
            .verdicts
            .iter()
            .filter(|v| v.verdict == Some(amber_core::filter::Verdict::Useless))
            .count();
        let failed = it.verdicts.iter().filter(|v| v.verdict.is_none()).count();
        writeln!(out, "  step {}: {}", it.step, it.issued_query)?;
        writeln!(
            out,
            "    retrieved {}, useful {useful}, useless {useless}, unparsed {failed}, kept {}",
            it.retrieved.len(),
            it.passages.len()
        )?;
        let before = it.note_before.map_or("-".to_string(), |v| v.to_string());
        writeln!(out, "    note v{before} -> v{}", it.note_after)?;
        if let Some(c) = it.compare_result {
            writeln!(out, "    candidate accepted: {c}")?;
        }
        if let Some(s) = it.sufficiency {
            writeln!(out, "    sufficient: {s}")?;
        }
        for f in &it.flags {
            writeln!(out, "    flag: {f}")?;
        }
    }
    writeln!(out, "  stopped: {}", r.stopped_because.as_str())?;
    writeln!(out, "  calls: {}", r.llm_calls)?;
    writeln!(
        out,
        "  note (v{}): {}",
        r.final_note.version, r.final_note.text
    )?;
    writeln!(out, "  answer: {}", r.answer.text)
}
