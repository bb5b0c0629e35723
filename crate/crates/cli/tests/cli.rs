use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures/smoke")
        .join(name)
}

fn amber(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_amber"))
        .args(args)
        .env_remove("AMBER_CACHE_DIR")
        .env_remove("AMBER_LLM_API_KEY")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn build_index(dir: &Path) -> PathBuf {
    let out = dir.join("i.abix");
    let r = amber(&[
        "index",
        "--corpus",
        s(&fixture("corpus.jsonl")),
        "--out",
        s(&out),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    out
}

#[test]
fn index_reports_passages_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = build_index(dir.path());
    let index = amber_core::retriever::load_index(&path).unwrap();
    assert_eq!(index.len(), 20);
}

#[test]
fn index_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("i.abix");
    let missing = amber(&[
        "index",
        "--corpus",
        "/nonexistent/corpus.jsonl",
        "--out",
        s(&out),
    ]);
    assert_eq!(missing.status.code(), Some(2));
    let zero = amber(&[
        "index",
        "--corpus",
        s(&fixture("corpus.jsonl")),
        "--out",
        s(&out),
        "--window",
        "0",
    ]);
    assert_eq!(zero.status.code(), Some(2));
}

#[test]
fn run_writes_one_line_per_question_and_config_echo() {
    let dir = tempfile::tempdir().unwrap();
    let index = build_index(dir.path());
    let conf = dir.path().join("run.conf");
    fs::write(
        &conf,
        format!(
            "# smoke run\nindex = {}\ndataset = {}\nmock = {}\ntop_k = 9\n",
            s(&index),
            s(&fixture("dataset.jsonl")),
            s(&fixture("mock.jsonl"))
        ),
    )
    .unwrap();
    let trace = dir.path().join("t.jsonl");
    let r = amber(&[
        "run",
        "--config",
        s(&conf),
        "--top-k",
        "5",
        "--trace",
        s(&trace),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let stdout = String::from_utf8_lossy(&r.stdout);
    assert!(stdout.contains("max_iter: 1"), "{stdout}");
    let lines = fs::read_to_string(&trace).unwrap();
    assert_eq!(lines.lines().count(), 5);
    let first: serde_json::Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    assert_eq!(first["trace_version"], 1);
    assert_eq!(first["id"], "q1");
    let echo = fs::read_to_string(dir.path().join("t.jsonl.config")).unwrap();
    assert!(echo.contains("top_k=5\n"), "flag overrides file: {echo}");
}

#[test]
fn run_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let index = build_index(dir.path());
    let trace = dir.path().join("t.jsonl");
    let (dataset, mock) = (fixture("dataset.jsonl"), fixture("mock.jsonl"));
    let base = [
        "run",
        "--index",
        s(&index),
        "--dataset",
        s(&dataset),
        "--trace",
        s(&trace),
    ];
    assert_eq!(amber(&base).status.code(), Some(2), "no backend");
    let mut both = base.to_vec();
    both.extend(["--mock", s(&mock), "--endpoint", "http://x", "--model", "m"]);
    assert_eq!(amber(&both).status.code(), Some(2), "two backends");
}

#[test]
fn unreachable_endpoint_records_failures_and_exits_0() {
    let dir = tempfile::tempdir().unwrap();
    let index = build_index(dir.path());
    let trace = dir.path().join("t.jsonl");
    let r = amber(&[
        "run",
        "--index",
        s(&index),
        "--dataset",
        s(&fixture("dataset.jsonl")),
        "--endpoint",
        "http://127.0.0.1:9/v1/chat/completions",
        "--model",
        "m",
        "--retries",
        "0",
        "--trace",
        s(&trace),
    ]);
    assert_eq!(r.status.code(), Some(0));
    let text = fs::read_to_string(&trace).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.lines().all(|l| l.contains("\"error\"")));
}

#[test]
fn eval_and_trace_commands() {
    let dir = tempfile::tempdir().unwrap();
    let index = build_index(dir.path());
    let trace = dir.path().join("t.jsonl");
    let r = amber(&[
        "run",
        "--index",
        s(&index),
        "--dataset",
        s(&fixture("dataset.jsonl")),
        "--mock",
        s(&fixture("mock.jsonl")),
        "--trace",
        s(&trace),
    ]);
    assert!(r.status.success());

    let eval = amber(&[
        "eval",
        "--trace",
        s(&trace),
        "--dataset",
        s(&fixture("dataset.jsonl")),
    ]);
    assert!(eval.status.success());
    assert!(String::from_utf8_lossy(&eval.stdout).contains("mean     60.00     61.43"));
    let mismatch = amber(&[
        "eval",
        "--trace",
        s(&trace),
        "--dataset",
        s(&fixture("dataset.jsonl")),
        "--kind",
        "longform",
    ]);
    assert_eq!(mismatch.status.code(), Some(2));

    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let e = amber(&[
        "eval",
        "--trace",
        s(&empty),
        "--dataset",
        s(&fixture("dataset.jsonl")),
    ]);
    assert!(e.status.success());
    assert!(String::from_utf8_lossy(&e.stderr).contains("empty"));

    let one = amber(&["trace", "--trace", s(&trace), "--id", "q2"]);
    let text = String::from_utf8_lossy(&one.stdout);
    assert!(
        text.contains("step 2: Which river flows through Osterby?"),
        "{text}"
    );
    assert!(text.contains("stopped: sufficient"));
    assert_eq!(
        amber(&["trace", "--trace", s(&trace), "--id", "nope"])
            .status
            .code(),
        Some(3)
    );
    let all = amber(&["trace", "--trace", s(&trace)]);
    assert!(String::from_utf8_lossy(&all.stdout).contains("5 questions"));
}

#[test]
fn filtergen_cxmi_needs_scoring() {
    let dir = tempfile::tempdir().unwrap();
    let index = build_index(dir.path());
    let out = dir.path().join("f.jsonl");
    let r = amber(&[
        "filtergen",
        "--dataset",
        s(&fixture("dataset.jsonl")),
        "--index",
        s(&index),
        "--measure",
        "cxmi",
        "--endpoint",
        "http://127.0.0.1:9/v1/chat/completions",
        "--model",
        "m",
        "--out",
        s(&out),
    ]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("unsupported"));
}

#[test]
fn filtergen_threshold_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let index = build_index(dir.path());
    let script = dir.path().join("score.jsonl");
    fs::write(
        &script,
        "{\"mode\":\"matched\"}\n{\"template\":\"chunk_filter\",\"text\":\"{\\\"NLI result\\\":\\\"useful\\\"}\"}\n{\"template\":\"score_continuation\",\"logprobs\":[-1.0]}\n{\"template\":\"sentence_filter\",\"text\":\"\"}\n",
    )
    .unwrap();
    let out = dir.path().join("f.jsonl");
    let r = amber(&[
        "filtergen",
        "--dataset",
        s(&fixture("dataset.jsonl")),
        "--index",
        s(&index),
        "--measure",
        "cxmi",
        "--threshold",
        "0,0.5",
        "--mock",
        s(&script),
        "--out",
        s(&out),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let stdout = String::from_utf8_lossy(&r.stdout);
    assert!(stdout.contains("threshold 0: pass rate 1.0000"), "{stdout}");
    assert!(
        stdout.contains("threshold 0.5: pass rate 0.0000"),
        "{stdout}"
    );
}
