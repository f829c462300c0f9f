use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const ALICE: &str = "Which papers did Alice Smith write?";

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn skbf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skbf"))
        .args(args)
        .env_remove("SKBF_LLM_PROVIDER")
        .output()
        .unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn query_replays_the_bundled_transcript() {
    let (desk, t1) = (fixtures().join("desk"), fixtures().join("t1.jsonl"));
    let out = skbf(&[
        "query",
        "--skb",
        path(&desk),
        "--question",
        ALICE,
        "--replay",
        path(&t1),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(
        text.contains("   1. Attention Basics (n1)  [filtered]"),
        "{text}"
    );
    assert!(text.contains("Alice Smith (n2) --writes--> Attention Basics (n1)"));
}

#[test]
fn eval_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("report.csv");
    let traces = dir.path().join("traces");
    let out = skbf(&[
        "eval",
        "--skb",
        path(&fixtures().join("desk")),
        "--dataset",
        path(&fixtures().join("qa.jsonl")),
        "--replay",
        path(&fixtures().join("eval.jsonl")),
        "--out",
        path(&csv),
        "--traces",
        path(&traces),
        "--parallel",
        "3",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report = std::fs::read_to_string(&csv).unwrap();
    assert!(
        report.contains("overall,20,1.0000,1.0000,1.0000,1.0000"),
        "{report}"
    );
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap())
            .unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 20);
    assert_eq!(std::fs::read_dir(&traces).unwrap().count(), 20);

    let shown = skbf(&["trace-show", path(&traces.join("q18.json"))]);
    assert!(shown.status.success());
    assert!(stdout(&shown).contains("Prefilter skipped (extraction_failed)"));
}

#[test]
fn usage_errors_exit_2() {
    let out = skbf(&["query", "--skb", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--question"));
    assert_eq!(skbf(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        skbf(&["query", "--skb", "x", "--question", "q", "--k-max", "0"])
            .status
            .code(),
        Some(2)
    );
    let both = skbf(&[
        "query",
        "--skb",
        "x",
        "--question",
        "q",
        "--replay",
        "a",
        "--record",
        "b",
    ]);
    assert_eq!(both.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1_and_name_the_module() {
    let out = skbf(&["ingest", "--skb", "/nonexistent/desk"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("skb_store"), "{}", stderr(&out));

    let desk = fixtures().join("desk");
    let t1 = fixtures().join("t1.jsonl");
    let out = skbf(&[
        "query",
        "--skb",
        path(&desk),
        "--question",
        "Who wrote Attention Basics?",
        "--replay",
        path(&t1),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("llm_gateway"), "{}", stderr(&out));
}

#[test]
fn replay_never_opens_a_socket() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    listener.set_nonblocking(true).unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let (desk, t1) = (fixtures().join("desk"), fixtures().join("t1.jsonl"));
    let out = Command::new(env!("CARGO_BIN_EXE_skbf"))
        .args([
            "query",
            "--skb",
            path(&desk),
            "--question",
            ALICE,
            "--replay",
            path(&t1),
        ])
        .env("SKBF_LLM_PROVIDER", "http")
        .env("SKBF_LLM_BASE_URL", &url)
        .env("SKBF_EMBED_BASE_URL", &url)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let err = listener.accept().unwrap_err();
    assert_eq!(err.kind(), std::io::ErrorKind::WouldBlock);
}

#[test]
fn ingest_embed_query_and_record() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    let out = skbf(&[
        "ingest",
        "--skb",
        path(&fixtures().join("desk")),
        "--out",
        path(&store),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("5 nodes, 4 edges, 5 candidates"));
    assert!(store.join("schema.json").exists());

    let out = skbf(&["embed", "--skb", path(&store)]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(store.join("embeddings.jsonl").exists());

    let recorded = dir.path().join("t1.jsonl");
    let trace = dir.path().join("trace.json");
    let out = Command::new(env!("CARGO_BIN_EXE_skbf"))
        .args([
            "query",
            "--skb",
            path(&store),
            "--question",
            ALICE,
            "--no-timings",
        ])
        .args(["--record", path(&recorded), "--out", path(&trace)])
        .env("SKBF_LLM_PROVIDER", "scripted")
        .env("SKBF_LLM_SCRIPT", fixtures().join("script.jsonl"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let digests = |p: &Path| -> Vec<String> {
        std::fs::read_to_string(p)
            .unwrap()
            .lines()
            .map(|l| {
                serde_json::from_str::<serde_json::Value>(l).unwrap()["digest"]
                    .as_str()
                    .unwrap()
                    .to_owned()
            })
            .collect()
    };
    assert_eq!(digests(&recorded), digests(&fixtures().join("t1.jsonl")));

    let shown = skbf(&["trace-show", path(&trace), "--skb", path(&store)]);
    assert!(stdout(&shown).contains("Prefilter kept 1 candidate(s): Attention Basics (n1)"));
    let raw = skbf(&["trace-show", path(&trace), "--json"]);
    assert!(stdout(&raw).contains("\"version\": \"trace v1\""));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("skbf.toml");
    std::fs::write(&cfg, "k_max = 2\nedge_type_mode_out = \"relaxed\"\n").unwrap();
    let trace = dir.path().join("t.json");
    let out = skbf(&[
        "query",
        "--skb",
        path(&fixtures().join("desk")),
        "--question",
        ALICE,
        "--replay",
        path(&fixtures().join("t1.jsonl")),
        "--config",
        path(&cfg),
        "--k-max",
        "3",
        "--edge-type-mode-out",
        "strict",
        "--out",
        path(&trace),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let t: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&trace).unwrap()).unwrap();
    assert_eq!(t["config"]["k_max"], 3);
    assert_eq!(t["config"]["edge_type_mode_out"], "strict");
    assert_eq!(t["rerank"].as_array().unwrap().len(), 3);

    std::fs::write(&cfg, "k_maximum = 2\n").unwrap();
    let out = skbf(&[
        "query",
        "--skb",
        "x",
        "--question",
        "q",
        "--config",
        path(&cfg),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("config"));
}
