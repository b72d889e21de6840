use std::process::{Command, Output};

fn run(dir: &std::path::Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attnshort")).current_dir(dir).args(args).output().unwrap()
}

fn error_line(out: &Output) -> serde_json::Value {
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    serde_json::from_str(stderr.lines().last().unwrap()).unwrap()
}

#[test]
fn help_lists_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let help = String::from_utf8(run(dir.path(), &["--help"]).stdout).unwrap();
    for cmd in [
        "train", "filter", "simfilter", "eval", "sweep", "topbottom", "curve", "score", "genbuild", "gentrain", "gensample",
        "genfideval",
    ] {
        assert!(help.lines().any(|l| l.trim_start().starts_with(cmd)), "{cmd} missing");
    }
}

#[test]
fn failures_print_a_json_error_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["eval", "--model", "missing.ckpt", "--vocab", "v.txt", "--input", "d.jsonl"]);
    let err = error_line(&out);
    assert_eq!(err["error"], "io");
    assert!(err["message"].as_str().unwrap().contains("missing.ckpt"));

    std::fs::write(dir.path().join("bad.ckpt"), b"NOTACKPT....").unwrap();
    let out = run(dir.path(), &["eval", "--model", "bad.ckpt", "--vocab", "v.txt", "--input", "d.jsonl"]);
    assert_eq!(error_line(&out)["error"], "bad_magic");

    let out = run(dir.path(), &["--set", "encoder.depth=3", "synth", "--output", "x.jsonl"]);
    assert_eq!(error_line(&out)["error"], "cli");

    let out = run(dir.path(), &["--keep-fraction", "0", "--dataset", "synthetic", "sweep"]);
    assert_eq!(error_line(&out)["error"], "invalid_argument");
}

#[test]
fn synth_respects_overrides_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"synthetic": {"num_records": 7, "noise_len": 3}}"#).unwrap();
    for name in ["a.jsonl", "b.jsonl"] {
        let out = run(dir.path(), &["--config", "cfg.json", "--set", "synthetic.keywords_per_class=1", "synth", "--output", name]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let a = std::fs::read_to_string(dir.path().join("a.jsonl")).unwrap();
    assert_eq!(a, std::fs::read_to_string(dir.path().join("b.jsonl")).unwrap());
    assert_eq!(a.lines().count(), 7);
    let first: serde_json::Value = serde_json::from_str(a.lines().next().unwrap()).unwrap();
    assert_eq!(first["text"].as_str().unwrap().split_whitespace().count(), 4);
}
