//! End-to-end runs of the `metamirror` binary on tiny configs.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "hidden = [6]\niterations = 1\neval_tasks = 8\nsteps = 2\n";

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metamirror"))
        .args(args)
        .current_dir(dir)
        .env_remove("RUST_LOG")
        .output()
        .unwrap()
}

fn data_rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(str::to_string)
        .collect()
}

#[test]
fn train_with_one_iteration_writes_one_row_and_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("run.toml"),
        format!("{TINY}method = \"mirror\"\n"),
    )
    .unwrap();
    let out = run(&["train", "--config", "run.toml", "--out", "o"], dir.path());
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(dir.path().join("o/mirror.ckpt").is_file());
    let header = fs::read_to_string(dir.path().join("o/mirror_train.csv")).unwrap();
    assert!(header.starts_with("r,mean_val_loss\n"));
    assert_eq!(data_rows(&dir.path().join("o/mirror_train.csv")).len(), 1);
}

#[test]
fn missing_config_exits_nonzero_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["train", "--config", "nowhere.toml"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.toml"));
}

#[test]
fn config_errors_carry_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), "steps = 2\nbogus = 1\n").unwrap();
    let out = run(&["train", "--config", "run.toml"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2") && err.contains("bogus"), "{err}");
}

#[test]
fn same_seed_gives_byte_identical_csvs() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("run.toml"),
        "hidden = [6]\niterations = 3\nmethod = \"maml\"\n",
    )
    .unwrap();
    for out in ["a", "b"] {
        let o = run(
            &["train", "--config", "run.toml", "--seed", "7", "--out", out],
            dir.path(),
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = fs::read(dir.path().join("a/maml_train.csv")).unwrap();
    let b = fs::read(dir.path().join("b/maml_train.csv")).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        fs::read(dir.path().join("a/maml.ckpt")).unwrap(),
        fs::read(dir.path().join("b/maml.ckpt")).unwrap()
    );
}

#[test]
fn eval_and_diagnose_on_trained_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    for m in ["maml", "mirror"] {
        fs::write(
            dir.path().join("run.toml"),
            format!("{TINY}method = \"{m}\"\n"),
        )
        .unwrap();
        assert!(
            run(&["train", "--config", "run.toml", "--out", "o"], dir.path())
                .status
                .success()
        );
    }
    let out = run(
        &[
            "eval",
            "--config",
            "run.toml",
            "--checkpoint",
            "o/mirror.ckpt",
            "--out",
            "o",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("alpha = 0.01"), "{stdout}");
    let line = stdout.lines().find(|l| l.starts_with("mse ")).unwrap();
    let mean = line.split_whitespace().nth(1).unwrap();
    assert_eq!(mean.split('.').nth(1).unwrap().len(), 6, "{line}");
    assert_eq!(data_rows(&dir.path().join("o/mirror_eval.csv")).len(), 1);

    let out = run(
        &[
            "diagnose",
            "--config",
            "run.toml",
            "--checkpoint",
            "o/maml.ckpt",
            "--checkpoint",
            "o/mirror.ckpt",
            "--out",
            "d",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for label in ["maml", "mirror"] {
        for kind in ["trace_loss", "trace_grad_norm"] {
            let rows = data_rows(&dir.path().join(format!("d/{label}_{kind}.csv")));
            assert_eq!(rows.len(), 3, "{label} {kind}");
        }
    }
    let timing = data_rows(&dir.path().join("d/timing.csv"));
    assert_eq!(timing.len(), 2);
    for row in timing {
        let ratio: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
        assert!(ratio.is_finite() && ratio > 0.0);
    }
}

#[test]
fn checkpoint_from_another_model_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("run.toml"),
        format!("{TINY}method = \"maml\"\n"),
    )
    .unwrap();
    assert!(
        run(&["train", "--config", "run.toml", "--out", "o"], dir.path())
            .status
            .success()
    );
    fs::write(dir.path().join("other.toml"), "hidden = [7]\n").unwrap();
    let out = run(
        &[
            "eval",
            "--config",
            "other.toml",
            "--checkpoint",
            "o/maml.ckpt",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not match"));
}

#[test]
fn environment_overrides_reach_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_metamirror"))
        .args(["train", "--out", "o"])
        .current_dir(dir.path())
        .env("METAMIRROR_ITERATIONS", "2")
        .env("METAMIRROR_HIDDEN", "[5]")
        .env("METAMIRROR_METHOD", "metasgd")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(data_rows(&dir.path().join("o/metasgd_train.csv")).len(), 2);
}
