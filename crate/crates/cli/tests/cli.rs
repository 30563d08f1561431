use std::path::Path;
use std::process::Command;

use webguard_cli::run;

fn webguard(args: &[&str]) -> (String, Result<(), webguard_cli::CliError>) {
    let mut out = Vec::new();
    let argv = std::iter::once("webguard").chain(args.iter().copied());
    let r = run(argv, None, &mut out);
    (String::from_utf8(out).unwrap(), r)
}

fn ok(args: &[&str]) -> String {
    let (out, r) = webguard(args);
    r.unwrap_or_else(|e| panic!("{args:?}: {e}"));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_corpus(dir: &Path, seed: &str) {
    ok(&[
        "simulate",
        "--classes",
        "humanlike,scanner,random_naive",
        "--per-class",
        "3",
        "--duration",
        "3",
        "--seed",
        seed,
        "--out",
        p(dir),
    ]);
}

#[test]
fn pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    small_corpus(&corpus, "7");
    let labels = std::fs::read_to_string(corpus.join("labels.csv")).unwrap();
    assert_eq!(labels.lines().count(), 1 + 9);
    assert!(labels.starts_with("sid,label\n"));

    let clusters = tmp.path().join("clusters");
    let summary = ok(&[
        "cluster",
        "--in",
        p(&corpus),
        "--k",
        "3",
        "--s",
        "4",
        "--t",
        "4",
        "--method",
        "spectral",
        "--sigma",
        "9",
        "--out",
        p(&clusters),
    ]);
    assert!(summary.contains("ARI"), "{summary}");
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(clusters.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["metrics"]["ari"].is_number());
    assert_eq!(metrics["result"]["labels"].as_array().unwrap().len(), 9);
    let table = std::fs::read_to_string(clusters.join("assignments.csv")).unwrap();
    assert_eq!(table.lines().next(), Some("sid,cluster,label"));
    assert_eq!(table.lines().count(), 10);

    let bank = tmp.path().join("bank.json");
    ok(&[
        "train-bank",
        "--in",
        p(&corpus),
        "--states",
        "3",
        "--restarts",
        "1",
        "--out",
        p(&bank),
    ]);
    let decisions = ok(&[
        "classify",
        "--bank",
        p(&bank),
        "--in",
        p(&corpus.join("traces.jsonl")),
        "--rule",
        "margin",
        "--gamma",
        "5",
    ]);
    assert_eq!(decisions.lines().count(), 9);
    let first: serde_json::Value = serde_json::from_str(decisions.lines().next().unwrap()).unwrap();
    for key in ["sid", "label", "stop_symbol_index", "stop_time", "margin", "timeout"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }

    let eval = tmp.path().join("eval.csv");
    ok(&[
        "evaluate",
        "--bank",
        p(&bank),
        "--in",
        p(&corpus),
        "--grid",
        "0,5",
        "--out",
        p(&eval),
    ]);
    let csv = std::fs::read_to_string(&eval).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("rule,parameter,traces,accuracy"));

    let symbols = tmp.path().join("symbols.jsonl");
    ok(&[
        "preprocess",
        "--in",
        p(&corpus),
        "--preset",
        "detection",
        "--out",
        p(&symbols),
    ]);
    assert_eq!(std::fs::read_to_string(&symbols).unwrap().lines().count(), 9);
}

#[test]
fn outputs_are_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let mut seen = Vec::new();
    for run in ["a", "b"] {
        let dir = tmp.path().join(run);
        small_corpus(&dir.join("corpus"), "3");
        ok(&[
            "cluster",
            "--in",
            p(&dir.join("corpus")),
            "--k",
            "3",
            "--t",
            "4",
            "--out",
            p(&dir.join("c")),
        ]);
        ok(&[
            "train-bank",
            "--in",
            p(&dir.join("corpus")),
            "--states",
            "3",
            "--out",
            p(&dir.join("bank.json")),
        ]);
        let files = [
            "corpus/traces.jsonl",
            "corpus/labels.csv",
            "c/metrics.json",
            "c/assignments.csv",
            "bank.json",
        ];
        seen.push(files.map(|f| std::fs::read(dir.join(f)).unwrap()));
    }
    assert!(seen[0] == seen[1]);
}

#[test]
fn dump_config_reflects_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("run.json");
    std::fs::write(
        &file,
        r#"{"seed": 5, "attribute": {"cluster": {"sigma": 3.0, "k": 4}}}"#,
    )
    .unwrap();
    let dump = |args: &[&str], env: Option<&str>| {
        let mut out = Vec::new();
        let argv = ["webguard", "--dump-config"].into_iter().chain(args.iter().copied());
        run(argv, env, &mut out).unwrap();
        serde_json::from_slice::<serde_json::Value>(&out).unwrap()
    };
    let base = ["cluster", "--in", "x", "--out", "y"];
    assert_eq!(dump(&base, None)["seed"], 42);
    assert_eq!(dump(&base, Some("8"))["seed"], 8);
    let with_file = ["--config", p(&file), "cluster", "--in", "x", "--out", "y"];
    let c = dump(&with_file, Some("8"));
    assert_eq!(
        (c["seed"].clone(), c["attribute"]["cluster"]["sigma"].clone()),
        (5.into(), 3.0.into())
    );
    assert_eq!(c["attribute"]["cluster"]["k"], 4);
    let mut flagged = with_file.to_vec();
    flagged.extend(["--k", "6", "--seed", "1"]);
    let c = dump(&flagged, Some("8"));
    assert_eq!(c["attribute"]["cluster"]["k"], 6);
    assert_eq!(c["attribute"]["cluster"]["sigma"], 3.0);
    assert_eq!(c["seed"], 1);
    // The dump is itself a valid config file.
    std::fs::write(&file, serde_json::to_string(&c).unwrap()).unwrap();
    assert_eq!(dump(&["--config", p(&file), "lemma-check"], None)["seed"], 1);
}

#[test]
fn exit_codes_follow_error_kind() {
    let bin = env!("CARGO_BIN_EXE_webguard");
    let tmp = tempfile::tempdir().unwrap();
    let status = |args: &[&str]| {
        let o = Command::new(bin)
            .args(args)
            .env_remove("WEBGUARD_SEED")
            .output()
            .unwrap();
        (o.status.code().unwrap(), String::from_utf8(o.stderr).unwrap())
    };
    assert_eq!(status(&["--help"]).0, 0);
    let (code, err) = status(&["cluster", "--bogus"]);
    assert_eq!(code, 2);
    let err: serde_json::Value = serde_json::from_str(err.lines().last().unwrap()).unwrap();
    assert_eq!(err["error"]["kind"], "usage");
    assert_eq!(
        status(&["simulate", "--classes", "robots", "--out", p(tmp.path())]).0,
        2
    );
    assert_eq!(
        status(&["classify", "--bank", "/nonexistent/bank.json", "--in", "x"]).0,
        3
    );

    let bad = tmp.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"sid\":\"a\",\"i\":99,\"t\":0}\n").unwrap();
    let (code, err) = status(&["cluster", "--in", p(&bad), "--k", "1", "--out", p(tmp.path())]);
    assert_eq!(code, 4, "{err}");
    let o = Command::new(bin)
        .args(["--dump-config", "lemma-check"])
        .env("WEBGUARD_SEED", "77")
        .output()
        .unwrap();
    let c: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(c["seed"], 77);
}

#[test]
fn overhead_bench_writes_a_consistent_report() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("overhead.json");
    let summary = ok(&["overhead-bench", "--out", p(&path)]);
    assert!(summary.contains("280 events"), "{summary}");
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(r["consistent"], true);
    assert_eq!(r["events"], 280);
}

#[test]
fn serve_replay_and_export_through_the_binary() {
    use std::io::{BufRead, BufReader};
    let bin = env!("CARGO_BIN_EXE_webguard");
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    small_corpus(&corpus, "11");
    let store = tmp.path().join("store");
    let mut child = Command::new(bin)
        .args(["serve", "--bind", "127.0.0.1:0", "--store", p(&store)])
        .stdout(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();
    let first = lines.next().unwrap().unwrap();
    let url = first.strip_prefix("listening on ").unwrap().to_string();

    let summary = ok(&[
        "replay",
        "--target",
        &url,
        "--in",
        p(&corpus),
        "--transport",
        "websocket",
    ]);
    assert!(summary.starts_with("replayed 9 traces"), "{summary}");

    let pid = child.id().to_string();
    assert!(Command::new("kill").args(["-INT", &pid]).status().unwrap().success());
    assert!(child.wait().unwrap().success());
    let exported = webguard_core::trace::parse_trace_file(BufReader::new(
        std::fs::File::open(store.join("sessions.jsonl")).unwrap(),
    ))
    .unwrap();
    let original = webguard_core::trace::parse_trace_file(BufReader::new(
        std::fs::File::open(corpus.join("traces.jsonl")).unwrap(),
    ))
    .unwrap();
    assert_eq!(exported, original);
}
