//! Black-box checks of the command-line driver: exit codes for the
//! documented failure classes, a small end-to-end run, and byte-level
//! determinism of a repeated invocation.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dnr-lab"))
}

fn tmp(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("dnr-cli-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("process was killed by a signal")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Overrides that shrink the synthetic world to seconds of work.
fn small_world(dir: &Path) -> Vec<String> {
    [
        "--data.synthetic.users=32",
        "--data.synthetic.items=64",
        "--data.synthetic.latent_dim=4",
        "--data.synthetic.density=0.5",
        "--data.min_interactions=1",
        "--data.n=8",
        "--data.k=4",
        "--data.history_len=4",
        "--retriever.latent_dim=4",
        "--retriever.epochs=2",
        "--reranker.hidden=8",
        "--dnr.epochs=2",
        "--dnr.lambda_e=1",
        "--dnr.batch_size=16",
    ]
    .iter()
    .map(|s| s.to_string())
    .chain([format!("--output-dir={}", dir.display())])
    .collect()
}

#[test]
fn unknown_override_field_exits_2() {
    let dir = tmp("unknown");
    let out = bin()
        .args(["gen-data", "--data.synthetic.userz=10"])
        .arg(format!("--output-dir={}", dir.display()))
        .output()
        .unwrap();
    assert_eq!(code(&out), 2, "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("userz"), "stderr: {}", stderr(&out));
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn training_without_data_exits_3() {
    let dir = tmp("nodata");
    let out = bin()
        .arg("train-baseline")
        .arg(format!("--output-dir={}", dir.display()))
        .output()
        .unwrap();
    assert_eq!(code(&out), 3, "stderr: {}", stderr(&out));
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn bad_sweep_axis_exits_2() {
    let dir = tmp("axis");
    let out = bin()
        .args(["sweep", "--axis", "gamma", "--values", "0.5"])
        .arg(format!("--output-dir={}", dir.display()))
        .output()
        .unwrap();
    assert_eq!(code(&out), 2, "stderr: {}", stderr(&out));
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn theory_check_passes_clean_and_fails_tampered() {
    let clean = bin().args(["verify-theory", "--worlds", "20"]).output().unwrap();
    assert_eq!(code(&clean), 0, "stderr: {}", stderr(&clean));

    // hidden negative control: one model is corrupted on purpose, the
    // verifier has to notice and use the oracle-failure exit code
    let tampered = bin()
        .args(["verify-theory", "--worlds", "20", "--inject-unnormalized"])
        .output()
        .unwrap();
    assert_eq!(code(&tampered), 5, "stderr: {}", stderr(&tampered));
}

#[test]
fn small_run_covers_the_whole_artifact_chain() {
    let dir = tmp("chain");
    let world = small_world(&dir);

    let gen = bin().arg("gen-data").args(&world).output().unwrap();
    assert_eq!(code(&gen), 0, "stderr: {}", stderr(&gen));
    for name in ["log.csv", "truth.json", "retriever.ckpt", "samples.jsonl"] {
        assert!(dir.join(name).exists(), "{name} missing after gen-data");
    }

    let base = bin().arg("train-baseline").args(&world).output().unwrap();
    assert_eq!(code(&base), 0, "stderr: {}", stderr(&base));

    let dnr = bin()
        .arg("train-dnr")
        .args(&world)
        .arg("--reranker.integration=denoise")
        .output()
        .unwrap();
    assert_eq!(code(&dnr), 0, "stderr: {}", stderr(&dnr));
    assert!(dir.join("dnr_generator.ckpt").exists());

    let eval = bin()
        .args(["eval", "--identity", "--dump-per-sample"])
        .args(&world)
        .output()
        .unwrap();
    assert_eq!(code(&eval), 0, "stderr: {}", stderr(&eval));
    assert!(dir.join("eval_identity.json").exists());
    assert!(dir.join("eval_identity_per_sample.csv").exists());

    let diag = bin().arg("noise-diag").args(&world).output().unwrap();
    assert_eq!(code(&diag), 0, "stderr: {}", stderr(&diag));
    assert!(dir.join("noise_diag.json").exists());

    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn repeated_invocations_write_identical_bytes() {
    let dir_a = tmp("rerun-a");
    let dir_b = tmp("rerun-b");
    for dir in [&dir_a, &dir_b] {
        let world = small_world(dir);
        let gen = bin().arg("gen-data").args(&world).output().unwrap();
        assert_eq!(code(&gen), 0, "stderr: {}", stderr(&gen));
        let train = bin().arg("train-baseline").args(&world).output().unwrap();
        assert_eq!(code(&train), 0, "stderr: {}", stderr(&train));
    }
    // config.json records the differing output_dir and is exempt
    for name in [
        "log.csv",
        "truth.json",
        "samples.jsonl",
        "retriever.ckpt",
        "data_summary.json",
        "baseline_reranker.ckpt",
        "baseline_history.csv",
        "baseline_summary.json",
    ] {
        let a = std::fs::read(dir_a.join(name)).unwrap();
        let b = std::fs::read(dir_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical invocations");
    }
    let _ = std::fs::remove_dir_all(&dir_a);
    let _ = std::fs::remove_dir_all(&dir_b);
}
