use std::path::Path;
use std::process::{Command, Output};

use have_core::trace::{TraceFile, TraceHeader};
use have_core::{
    read_trace, write_trace, AttentionRow, ContextToken, ModelDims, StepSnapshot, ValueNorms,
};

fn have(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_have"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn generate_validate_decode() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("run.trace");
    let o = have(&[
        "generate",
        "--prompt-ids",
        "0,5,9,12,2,7",
        "--steps",
        "5",
        "--seed",
        "4",
        "--policy",
        "have",
        "--trace-out",
        p(&trace),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ids_line = stdout(&o).lines().next().unwrap().to_string();
    assert_eq!(ids_line.split(',').count(), 5);

    let manifest = std::fs::read_to_string(dir.path().join("run.trace.manifest")).unwrap();
    assert!(manifest.contains("steps = 5"));
    assert!(manifest.contains("tokenizer = toy-words-v1"));
    assert_eq!(
        read_trace(std::fs::File::open(&trace).unwrap())
            .unwrap()
            .snapshots
            .len(),
        5
    );

    let o = have(&["validate-trace", "--trace", p(&trace)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("0 violation(s)"));

    // replaying the recorded run under the same policy reproduces the ids
    let report = dir.path().join("decode.jsonl");
    let o = have(&["decode", "--trace", p(&trace), "--out", p(&report)]);
    assert_eq!(o.status.code(), Some(0));
    let text = std::fs::read_to_string(&report).unwrap();
    assert_eq!(text.lines().count(), 6);
    assert!(text
        .lines()
        .last()
        .unwrap()
        .contains(&format!("\"ids\":[{ids_line}]")));

    // greedy replay agrees with greedy on every step
    let o = have(&["decode", "--trace", p(&trace), "--policy", "greedy"]);
    assert!(stdout(&o).contains("\"changed_vs_greedy\":0"));
}

#[test]
fn input_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.trace");
    assert_eq!(
        have(&["validate-trace", "--trace", p(&missing)])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(have(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(have(&["decode"]).status.code(), Some(1));
    assert_eq!(have(&["--help"]).status.code(), Some(0));

    let junk = dir.path().join("junk.trace");
    std::fs::write(&junk, b"NOTATRACE").unwrap();
    let o = have(&["decode", "--trace", p(&junk)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("magic"));

    let o = have(&["decode", "--trace", p(&junk), "--alpha", "-1"]);
    assert_eq!(o.status.code(), Some(1));

    let cfg = dir.path().join("model.toml");
    std::fs::write(&cfg, "vocab = 64\nheads = 3\nkv_heads = 2\n").unwrap();
    let o = have(&["generate", "--model-config", p(&cfg), "--prompt-ids", "0"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn validate_reports_violations() {
    let dir = tempfile::tempdir().unwrap();
    let dims = ModelDims::new(4, 1, 1, 1);
    let snap = StepSnapshot {
        step: 0,
        dims,
        context: vec![
            ContextToken::new(0, 0, "<s>", true),
            ContextToken::new(1, 3, "a", false),
        ],
        attention: vec![AttentionRow {
            layer: 0,
            head: 0,
            weights: vec![0.25, 0.25],
        }],
        value_norms: vec![ValueNorms {
            layer: 0,
            kv_head: 0,
            norms: vec![1.0, 1.0],
        }],
        logits: vec![0.0; 4],
    };
    let mut t = TraceFile::new(TraceHeader::new(dims, 1, "test"));
    t.snapshots.push(snap.clone());
    t.snapshots.push(snap);
    let path = dir.path().join("bad.trace");
    write_trace(&t, std::fs::File::create(&path).unwrap()).unwrap();
    let o = have(&["validate-trace", "--trace", p(&path)]);
    assert_eq!(o.status.code(), Some(1));
    let out = stdout(&o);
    assert!(out.contains("3 violation(s)"), "{out}");
}

#[test]
fn sweep_prints_two_columns() {
    let o = have(&[
        "sweep", "--axis", "alpha", "--values", "0,1", "--count", "40",
    ]);
    assert!(o.status.success());
    let rows: Vec<Vec<f64>> = stdout(&o)
        .lines()
        .map(|l| l.split_whitespace().map(|x| x.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.len() == 2));
    assert!(rows[1][1] >= 95.0);
    assert!(rows[1][1] > rows[0][1]);
}

#[test]
fn eval_on_toy_model() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("qa.jsonl");
    std::fs::write(
        &data,
        "{\"id\":\"a\",\"context\":\"kaka loka\",\"question\":\"mi\",\"answers\":[\"kaka\"]}\nbroken\n",
    )
    .unwrap();
    let model = dir.path().join("toy.toml");
    std::fs::write(&model, "vocab = 64\n").unwrap();
    let grid = dir.path().join("grid.toml");
    std::fs::write(
        &grid,
        "max_len = 2\n[[config]]\nname = \"greedy\"\ngreedy = true\n[[config]]\nname = \"HAVE\"\n[sweep]\nalpha = [0.0, 2.0]\n",
    )
    .unwrap();
    let out = dir.path().join("report.jsonl");
    let series = dir.path().join("series");
    let o = have(&[
        "eval",
        "--dataset",
        p(&data),
        "--grid",
        p(&grid),
        "--model-config",
        p(&model),
        "--out",
        p(&out),
        "--series-dir",
        p(&series),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = std::fs::read_to_string(&out).unwrap();
    assert_eq!(
        report
            .lines()
            .filter(|l| l.contains("\"kind\":\"config\""))
            .count(),
        2
    );
    assert_eq!(
        report
            .lines()
            .filter(|l| l.contains("\"kind\":\"error\""))
            .count(),
        1
    );
    assert_eq!(
        std::fs::read_to_string(series.join("alpha.dat"))
            .unwrap()
            .lines()
            .count(),
        2
    );
}
