use std::path::Path;
use std::process::{Command, Output};

fn escape(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_escape"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn synth(dir: &Path) {
    let o = escape(dir, &["--seed", "4", "synth", "--out-dir", "data", "--train-size", "600", "--test-size", "120"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

fn train(dir: &Path, which: &str, extra: &[&str]) -> Output {
    let out = format!("{which}.ckpt");
    let mut args = vec![
        "train", "--data", "data/train.jsonl", "--which", which, "--out", &out, "--epochs", "3", "--batch-size", "64",
        "--lr", "1e-3", "--hidden", "16",
    ];
    args.extend_from_slice(extra);
    escape(dir, &args)
}

#[test]
fn end_to_end_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d);
    assert_eq!(std::fs::read_to_string(d.join("data/train.jsonl")).unwrap().lines().count(), 601);

    // rcnet needs a cnet checkpoint
    let o = train(d, "rcnet", &[]);
    assert_eq!(code(&o), 4);
    let o = train(d, "rcnet", &["--cnet", "missing.ckpt"]);
    assert_eq!(code(&o), 4);

    assert_eq!(code(&train(d, "cnet", &[])), 0);
    assert_eq!(code(&train(d, "rcnet", &["--cnet", "cnet.ckpt"])), 0);
    let log = std::fs::read_to_string(d.join("cnet.loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);

    let nets = ["--data", "data/test.jsonl", "--cnet", "cnet.ckpt", "--rcnet", "rcnet.ckpt"];
    let mut eval = vec!["--seed", "4", "eval"];
    eval.extend_from_slice(&nets);
    eval.extend_from_slice(&["--out", "escape.csv", "--mode", "escape"]);
    let o = escape(d, &eval);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = std::fs::read_to_string(d.join("escape.csv")).unwrap();
    assert!(report.lines().any(|l| l.starts_with("# seed: 4")));
    assert_eq!(report.lines().filter(|l| !l.starts_with('#')).count(), 121);

    let mut corr = vec!["correlation"];
    corr.extend_from_slice(&nets);
    corr.extend_from_slice(&["--out", "corr.csv"]);
    assert_eq!(code(&escape(d, &corr)), 0);
    assert_eq!(std::fs::read_to_string(d.join("corr.csv")).unwrap().lines().count(), 1 + 120 + 21);

    let mut bench = vec!["bench"];
    bench.extend_from_slice(&nets);
    bench.extend_from_slice(&["--out", "bench.csv", "--arms", "baseline,escape"]);
    let o = escape(d, &bench);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(d.join("bench.csv")).unwrap();
    assert!(table.lines().any(|l| l.starts_with("baseline,fast,")));

    // a checkpoint with the wrong input width
    let o = escape(d, &["--schema", "h36m17", "train", "--data", "data/train.jsonl", "--which", "cnet", "--out", "wide.ckpt", "--epochs", "1", "--hidden", "8"]);
    assert_eq!(code(&o), 0);
    let mut bad = vec!["eval", "--data", "data/test.jsonl", "--cnet", "wide.ckpt", "--rcnet", "nope.ckpt", "--out", "x.csv"];
    assert_eq!(code(&escape(d, &bad)), 4);
    bad[4] = "cnet.ckpt";
    bad[6] = "rcnet.ckpt";
    bad.extend_from_slice(&["--energy-threshold", "-1", "--mode", "nonsense"]);
    assert_eq!(code(&escape(d, &bad)), 2);
}

#[test]
fn argument_and_data_errors_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(code(&escape(d, &["synth", "--out-dir", "x", "--train-size", "0"])), 2);
    assert_eq!(code(&escape(d, &["--schema", "coco", "synth", "--out-dir", "x"])), 2);
    assert_eq!(code(&escape(d, &["frobnicate"])), 2);
    std::fs::write(d.join("bad.jsonl"), "{\"format\":\"escape-poses\",\"version\":1,\"schema\":\"h36m17\",\"joints\":17}\nnot json\n").unwrap();
    let o = escape(d, &["train", "--data", "bad.jsonl", "--which", "cnet", "--out", "c.ckpt"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
    let o = escape(d, &["train", "--data", "absent.jsonl", "--which", "cnet", "--out", "c.ckpt"]);
    assert_eq!(code(&o), 3);
}
