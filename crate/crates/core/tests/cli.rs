use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cajscc(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cajscc"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn cajscc")
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

#[test]
fn train_writes_checkpoint_metrics_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = cajscc(&["train", "--set", "train.epochs=2", "--set", "data.count=64"], &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("checkpoint.cajs").is_file());
    let rows = csv_rows(&out.join("metrics.csv"));
    assert_eq!(rows[0], ["epoch", "train_loss", "val_psnr"]);
    assert_eq!(rows.len(), 3);
    let resolved = fs::read_to_string(out.join("resolved_config.txt")).unwrap();
    assert!(resolved.contains("train.epochs = 2"));
    assert!(resolved.contains("data.count = 64"));

    let ckpt = format!("eval.checkpoint={}", out.join("checkpoint.cajs").display());
    let common = ["--set", "data.count=64", "--set", "eval.realizations=1", "--set", ckpt.as_str()];
    for (cmd, file, header) in [
        ("eval", "eval.csv", "mu_db,estimator,psnr_mean,psnr_stderr,n,realizations"),
        ("sweep", "sweep.csv", "mu_db,psnr_mean,psnr_stderr,n"),
        ("report-power", "power.csv", "subcarrier_idx,mean_gain,mean_power"),
    ] {
        let eval_out = dir.path().join(cmd);
        let mut args = vec![cmd];
        args.extend(common);
        let o = cajscc(&args, &eval_out);
        assert_eq!(o.status.code(), Some(0), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
        let text = fs::read_to_string(eval_out.join(file)).unwrap();
        assert_eq!(text.lines().next(), Some(header), "{cmd}");
    }
    assert_eq!(csv_rows(&dir.path().join("report-power/power.csv")).len(), 17);

    let mm = dir.path().join("matrix");
    let ck = out.join("checkpoint.cajs");
    let p = format!("matrix.ckpt_perfect={}", ck.display());
    let m = format!("matrix.ckpt_mmse={}", ck.display());
    let o = cajscc(&["csi-matrix", "--set", "data.count=64", "--set", "eval.realizations=1", "--set", &p, "--set", &m], &mm);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&mm.join("mismatch.csv"));
    assert_eq!(rows[0], ["train_csi", "test_csi", "mu_db", "psnr_mean", "psnr_stderr"]);
    assert_eq!(rows.len(), 7);
}

#[test]
fn short_cyclic_prefix_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = cajscc(
        &["train", "--set", "ofdm.channel=taps", "--set", "ofdm.l_t=8", "--set", "ofdm.cp_len=4"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("cp_len"), "{err}");
    assert!(!dir.path().join("checkpoint.cajs").exists());
}

#[test]
fn usage_and_config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cajscc(&["nonsense"], dir.path()).status.code(), Some(1));
    assert_eq!(cajscc(&["train", "--set", "no.such.key=1"], dir.path()).status.code(), Some(1));
    assert_eq!(cajscc(&["train", "--set", "train.batch=0"], dir.path()).status.code(), Some(1));
    assert_eq!(cajscc(&["eval"], dir.path()).status.code(), Some(1));
    assert_eq!(cajscc(&["sweep", "--config", "/nonexistent/run.cfg"], dir.path()).status.code(), Some(1));
    let help = Command::new(env!("CARGO_BIN_EXE_cajscc")).arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("estimator-bench"));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = cajscc(&["eval", "--set", "eval.checkpoint=/nonexistent/model.cajs"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_file_and_flags_combine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bench.cfg");
    fs::write(&cfg, "# estimator sweep\nbench.trials = 400\neval.snrs = 0, 10\nseed = 5\n").unwrap();
    let out = dir.path().join("bench");
    let o = cajscc(&["estimator-bench", "--config", cfg.to_str().unwrap(), "--seed", "6"], &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&out.join("estimator_bench.csv"));
    assert_eq!(rows[0], ["mu_db", "mse_ls", "mse_mmse", "n"]);
    assert_eq!(rows.len(), 3);
    for r in &rows[1..] {
        let (ls, mmse): (f64, f64) = (r[1].parse().unwrap(), r[2].parse().unwrap());
        assert!(mmse < ls, "{r:?}");
        assert_eq!(r[3], "400");
    }
    let resolved = fs::read_to_string(out.join("resolved_config.txt")).unwrap();
    assert!(resolved.contains("seed = 6"));
}

#[test]
fn estimator_bench_matches_ls_variance() {
    let dir = tempfile::tempdir().unwrap();
    let o = cajscc(&["estimator-bench", "--set", "eval.snrs=5"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&dir.path().join("estimator_bench.csv"));
    let ls: f64 = rows[1][1].parse().unwrap();
    assert!((0.15..=0.17).contains(&ls), "mse_ls = {ls}");
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = cajscc(&["gradcheck"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&dir.path().join("gradcheck.csv"));
    assert_eq!(rows[0], ["name", "max_rel_error", "worst_index", "pass"]);
    assert!(rows[1..].iter().all(|r| r[3] == "true"));
}
