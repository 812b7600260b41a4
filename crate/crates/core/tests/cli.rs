use std::path::Path;
use std::process::{Command, Output};

fn moelab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moelab")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// `train` arguments on a small preset; `overrides` replace or add flags.
fn train_args<'a>(out_dir: &'a str, overrides: &[(&'a str, &'a str)]) -> Vec<&'a str> {
    let mut flags = vec![
        ("--preset", "small-cartesian"),
        ("--data", "synthetic:text"),
        ("--steps", "3"),
        ("--batch-size", "2"),
        ("--seq-len", "16"),
        ("--out-dir", out_dir),
    ];
    for &(k, v) in overrides {
        match flags.iter_mut().find(|(f, _)| *f == k) {
            Some(slot) => slot.1 = v,
            None => flags.push((k, v)),
        }
    }
    std::iter::once("train").chain(flags.into_iter().flat_map(|(k, v)| [k, v])).collect()
}

#[test]
fn count_params_reports_reference_scales() {
    let out = moelab(&["count-params", "--preset", "moe-base-smoe-share"]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).starts_with("842.0M / 247.4M"), "{}", stdout(&out));
    let out = moelab(&["count-params", "--preset", "cartesian-7b"]);
    assert!(stdout(&out).starts_with("7.246B / 1.609B"), "{}", stdout(&out));
    let out = moelab(&["count-params", "--list"]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).lines().count() > 30);
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&moelab(&[])), 1);
    assert_eq!(code(&moelab(&["train", "--no-such-flag"])), 1);
    assert_eq!(code(&moelab(&["count-params", "--preset", "no-such-preset"])), 1);
    assert_eq!(code(&moelab(&["count-params"])), 1);
    assert_eq!(code(&moelab(&["--help"])), 0);
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = moelab(&train_args(out_dir.to_str().unwrap(), &[("--seq-len", "100000")]));
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    let cfg = dir.path().join("bad.txt");
    std::fs::write(&cfg, "model.d_model = 30\nmodel.n_heads = 4\n").unwrap();
    assert_eq!(code(&moelab(&["count-params", "--config", cfg.to_str().unwrap()])), 2);
}

#[test]
fn numeric_failures_exit_with_three() {
    let out = moelab(&["grad-check", "--preset", "toy-smoe", "--tol", "1e-300"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn io_failures_exit_with_four() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.txt");
    let out_dir = dir.path().join("run");
    let out = moelab(&train_args(out_dir.to_str().unwrap(), &[("--data", missing.to_str().unwrap())]));
    assert_eq!(code(&out), 4);
    let ck = dir.path().join("junk.ckpt");
    std::fs::write(&ck, b"not a checkpoint").unwrap();
    let out = moelab(&["eval-ppl", "--checkpoint", ck.to_str().unwrap(), "--out-dir", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 4);
}

#[test]
fn grad_check_passes_on_the_cartesian_toy() {
    let out = moelab(&["grad-check"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert!(stdout(&out).contains("worst_param="));
}

#[test]
fn train_eval_resume_and_robustness_share_one_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    let out = moelab(&train_args(run_s, &[]));
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["checkpoint.bin", "metrics.log", "summary.tsv", "config.txt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert!(!run.join(".lock").exists());
    let ck = run.join("checkpoint.bin");
    let ck_s = ck.to_str().unwrap();

    let resumed = dir.path().join("resumed");
    let out = moelab(&train_args(resumed.to_str().unwrap(), &[("--steps", "5"), ("--resume", ck_s)]));
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let summary = std::fs::read_to_string(resumed.join("summary.tsv")).unwrap();
    assert!(summary.lines().nth(1).unwrap().starts_with("cartesian\t5\t3\t"), "{summary}");

    let eval = dir.path().join("eval");
    let out = moelab(&["eval-ppl", "--checkpoint", ck_s, "--seq-len", "32", "--out-dir", eval.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("ppl"));

    let rob = dir.path().join("rob");
    let out = moelab(&[
        "robustness", "--preset", "small-cartesian", "--data", "synthetic:text", "--seq-len", "16", "--checkpoint", ck_s,
        "--out-dir", rob.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("sublayer_a_frequency"));
}

#[test]
fn a_locked_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    std::fs::create_dir_all(&run).unwrap();
    std::fs::write(run.join(".lock"), "12345\n").unwrap();
    let out = moelab(&train_args(run.to_str().unwrap(), &[]));
    assert_eq!(code(&out), 4);
    assert!(Path::new(&run.join(".lock")).exists());
    assert!(!run.join("metrics.log").exists());
}
