use std::path::Path;
use std::process::{Command, Output};

use goal_align::checkpoint;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_goal-align"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn error_line(o: &Output) -> String {
    let err = String::from_utf8_lossy(&o.stderr).to_string();
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "stderr: {err}");
    assert!(lines[0].starts_with("{\"error\":\""), "{}", lines[0]);
    lines[0].to_string()
}

#[test]
fn missing_seed_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let o = bin(&["gen-data", "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_line(&o).contains("\"usage\""));
}

#[test]
fn missing_input_file_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = bin(&[
        "surgery",
        "--seed",
        "0",
        "--out",
        out.to_str().unwrap(),
        "--encoders",
        tmp.path().join("nope.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_line(&o).contains("nope.ckpt"));
}

#[test]
fn corrupt_checkpoint_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.ckpt");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    let o = bin(&[
        "surgery",
        "--seed",
        "0",
        "--out",
        tmp.path().join("o").to_str().unwrap(),
        "--encoders",
        bad.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(error_line(&o).contains("bad_magic"));
}

const SMOKE: &str = "\
data.n_labeled = 64
data.n_unlabeled = 64
data.n_eval = 64
pretrain.n_scenes = 64
pretrain.steps = 3
align.steps = 3
align.batch = 16
pretrain.batch = 16
policy.batch = 16
eval.retrieval_batch = 16
policy.steps = 3
eval.trials = 1
eval.in_distribution_tasks = 2
eval.in_distribution_trials = 1
";

fn run_ok(args: &[&str]) {
    let o = bin(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn full_pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |s: &str| tmp.path().join(s).to_str().unwrap().to_string();
    std::fs::write(p("smoke.conf"), SMOKE).unwrap();
    let conf = p("smoke.conf");
    let common = |out: &str| vec!["--config".to_string(), conf.clone(), "--seed".into(), "1".into(), "--out".into(), p(out)];
    let with = |cmd: &str, out: &str, extra: &[(&str, String)]| {
        let mut a = vec![cmd.to_string()];
        a.extend(common(out));
        for (k, v) in extra {
            a.push(format!("--{k}"));
            a.push(v.clone());
        }
        a
    };
    let call = |a: Vec<String>| run_ok(&a.iter().map(String::as_str).collect::<Vec<_>>());
    call(with("gen-data", "data", &[]));
    call(with("pretrain", "pre", &[]));
    call(with("surgery", "post", &[("encoders", p("pre/encoders.ckpt"))]));
    let pre = checkpoint::load(p("pre/encoders.ckpt")).unwrap();
    let post = checkpoint::load(p("post/encoders.ckpt")).unwrap();
    let wi = pre.get("image.patch_embed.weight").unwrap().shape().to_vec();
    let wt = post.get("transition.patch_embed.weight").unwrap().shape().to_vec();
    assert_eq!(wt, vec![2 * wi[0], wi[1]]);
    call(with("train-align", "align", &[("data", p("data")), ("encoders", p("post/encoders.ckpt"))]));
    call(with("train-policy", "policy", &[("data", p("data")), ("encoders", p("align/encoders.ckpt"))]));
    call(with("eval-retrieval", "ret", &[("data", p("data")), ("encoders", p("align/encoders.ckpt"))]));
    call(with("eval-rollout", "roll", &[("policy", p("policy/policy.ckpt"))]));
    for f in ["ret/retrieval.tsv", "roll/rollout.tsv", "policy/config.txt"] {
        assert!(Path::new(&p(f)).exists(), "{f}");
    }
    // Inputs are never modified.
    assert_eq!(checkpoint::load(p("pre/encoders.ckpt")).unwrap(), pre);
}
