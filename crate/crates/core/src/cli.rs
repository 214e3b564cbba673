//! The `cajscc` command line.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 when a
//! run fails after validation (including a failing `gradcheck`).

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::info;

use crate::config::{DataSource, RunConfig};
use crate::csi::EstimatorKind;
use crate::data::{self, ImageSet};
use crate::diagnostics::{gradient_suite, GRADCHECK_TOL};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::SeedStream;
use crate::train::{self, Trainer};

pub const RESOLVED_CONFIG: &str = "resolved_config.txt";

#[derive(Debug, Parser)]
#[command(name = "cajscc", version, about = "Channel-adaptive deep JSCC over simulated OFDM")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Key-value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (overrides `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Master seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override one key, e.g. `--set ofdm.l_f=64`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Train a model and write checkpoint.cajs and metrics.csv.
    Train,
    /// PSNR of `eval.checkpoint` at `eval.mu` with `eval.estimator`.
    Eval,
    /// PSNR of `eval.checkpoint` at every SNR in `eval.snrs`.
    Sweep,
    /// Mean allocated power per sorted subcarrier at `eval.mu`.
    ReportPower,
    /// Train-CSI × test-CSI PSNR matrix from two checkpoints.
    CsiMatrix,
    /// Finite-difference checks of every differentiable operation.
    Gradcheck,
    /// Monte-Carlo MSE of the LS and MMSE estimators over `eval.snrs`.
    EstimatorBench,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let cfg = match resolve(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    match execute(cli.command, &cfg) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::Config(_)) {
                1
            } else {
                2
            }
        }
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    for pair in &cli.set {
        cfg.apply_override(pair)?;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn execute(command: Command, cfg: &RunConfig) -> Result<i32> {
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join(RESOLVED_CONFIG), cfg.resolved())?;
    let seeds = SeedStream::new(cfg.seed);
    let out = cfg.out.as_path();
    match command {
        Command::Train => train_command(cfg, &seeds, out)?,
        Command::Eval => {
            let (_, val) = load_data(cfg, &seeds)?;
            let model = load_model(cfg, cfg.eval.checkpoint.as_deref(), "eval.checkpoint")?;
            let r = train::evaluate(&model, &cfg.ofdm, &val, cfg.eval.mu, cfg.eval.estimator, cfg.eval.realizations, &seeds)?;
            let mut w = create(out, "eval.csv")?;
            writeln!(w, "mu_db,estimator,psnr_mean,psnr_stderr,n,realizations")?;
            writeln!(w, "{},{},{},{},{},{}", r.mu_db, r.estimator, r.psnr_mean, r.psnr_stderr, r.n, r.realizations)?;
            w.flush()?;
            println!("PSNR at {} dB ({}): {:.3} ± {:.3} dB", r.mu_db, r.estimator, r.psnr_mean, r.psnr_stderr);
        }
        Command::Sweep => {
            let (_, val) = load_data(cfg, &seeds)?;
            let model = load_model(cfg, cfg.eval.checkpoint.as_deref(), "eval.checkpoint")?;
            let reports = train::sweep_snr(&model, &cfg.ofdm, &val, &cfg.eval.snrs, cfg.eval.estimator, cfg.eval.realizations, &seeds)?;
            let mut w = create(out, "sweep.csv")?;
            train::write_sweep_csv(&mut w, &reports)?;
            w.flush()?;
            for r in &reports {
                println!("{:>6} dB  {:.3} dB", r.mu_db, r.psnr_mean);
            }
        }
        Command::ReportPower => {
            let (_, val) = load_data(cfg, &seeds)?;
            let model = load_model(cfg, cfg.eval.checkpoint.as_deref(), "eval.checkpoint")?;
            let report = train::power_allocation_report(
                &model,
                &cfg.ofdm,
                &val,
                cfg.eval.mu,
                cfg.eval.estimator,
                cfg.eval.realizations,
                &seeds,
            )?;
            let mut w = create(out, "power.csv")?;
            train::write_power_csv(&mut w, &report)?;
            w.flush()?;
            println!("spearman(gain, power) = {:.4}", report.spearman);
        }
        Command::CsiMatrix => {
            let (_, val) = load_data(cfg, &seeds)?;
            let perfect = load_model(cfg, cfg.ckpt_perfect.as_deref(), "matrix.ckpt_perfect")?;
            let mmse = load_model(cfg, cfg.ckpt_mmse.as_deref(), "matrix.ckpt_mmse")?;
            let models = [(EstimatorKind::Perfect, &perfect), (EstimatorKind::Mmse, &mmse)];
            let entries = train::csi_mismatch_eval(&models, &cfg.ofdm, &val, cfg.eval.mu, cfg.eval.realizations, &seeds)?;
            let mut w = create(out, "mismatch.csv")?;
            train::write_mismatch_csv(&mut w, &entries)?;
            w.flush()?;
            for e in &entries {
                println!("train={:<8} test={:<8} {:.3} dB", e.train_csi, e.report.estimator, e.report.psnr_mean);
            }
        }
        Command::Gradcheck => {
            let suite = gradient_suite(cfg.seed)?;
            let mut w = create(out, "gradcheck.csv")?;
            writeln!(w, "name,max_rel_error,worst_index,pass")?;
            for e in &suite {
                writeln!(w, "{},{:e},{},{}", e.name, e.check.max_rel_error, e.check.worst_index, e.passes())?;
            }
            w.flush()?;
            let failed: Vec<&str> = suite.iter().filter(|e| !e.passes()).map(|e| e.name.as_str()).collect();
            if !failed.is_empty() {
                eprintln!("gradient check failed (tol {GRADCHECK_TOL:e}): {}", failed.join(", "));
                return Ok(2);
            }
            println!("all {} gradient checks pass (tol {GRADCHECK_TOL:e})", suite.len());
        }
        Command::EstimatorBench => {
            let rows = train::estimator_bench(&cfg.ofdm, &cfg.eval.snrs, cfg.bench_trials, &seeds.child("bench"))?;
            let mut w = create(out, "estimator_bench.csv")?;
            train::write_bench_csv(&mut w, &rows)?;
            w.flush()?;
            for r in &rows {
                println!("{:>6} dB  ls {:.5}  mmse {:.5}", r.mu_db, r.mse_ls, r.mse_mmse);
            }
        }
    }
    Ok(0)
}

fn train_command(cfg: &RunConfig, seeds: &SeedStream, out: &Path) -> Result<()> {
    let (train_set, val) = load_data(cfg, seeds)?;
    let model = Model::<f32>::new(cfg.model_config(), &mut seeds.rng("init", 0))?;
    info!(
        "training {} variant, {} parameters, {} train / {} val images",
        cfg.model.variant,
        model.num_parameters(),
        train_set.len(),
        val.len()
    );
    let mut trainer = Trainer::new(model, cfg.ofdm.clone(), cfg.train.clone(), seeds.child("train"))?;
    let result = train::fit(&mut trainer, &train_set, &val, |_| {})?;
    result.best.save(&out.join("checkpoint.cajs"))?;
    let mut w = create(out, "metrics.csv")?;
    writeln!(w, "epoch,train_loss,val_psnr")?;
    for r in &result.history {
        writeln!(w, "{},{},{}", r.epoch, r.train_loss, r.val_psnr)?;
    }
    w.flush()?;
    println!(
        "best validation PSNR {:.3} dB at epoch {} (untrained {:.3} dB)",
        result.best_psnr, result.best_epoch, result.initial_psnr
    );
    Ok(())
}

fn load_model(cfg: &RunConfig, path: Option<&Path>, key: &str) -> Result<Model<f32>> {
    let path = path.ok_or_else(|| Error::Config(format!("{key} must name a checkpoint")))?;
    Model::load(path, cfg.model_config())
}

/// Loads or synthesizes the images, applies the crop and splits off the
/// validation set. All randomness comes from the "data" stream.
pub fn load_data(cfg: &RunConfig, seeds: &SeedStream) -> Result<(ImageSet, ImageSet)> {
    let d = &cfg.data;
    let mut set = match d.source {
        DataSource::Synthetic => data::synthetic_set(d.count, cfg.model.image_shape(), &mut seeds.rng("data", 0)),
        DataSource::Cifar10 => data::load_cifar10(&d.paths)?,
        DataSource::Raw => {
            let mut shape = None;
            let mut pixels = Vec::new();
            for p in &d.paths {
                let part = data::read_raw(&fs::read(p)?)?;
                if *shape.get_or_insert(part.shape()) != part.shape() {
                    return Err(Error::Config(format!("{} has a different image shape", p.display())));
                }
                pixels.extend((0..part.len()).flat_map(|i| part.image(i).iter().copied()));
            }
            ImageSet::new(shape.unwrap_or(cfg.model.image_shape()), pixels, None)?
        }
    };
    if d.source != DataSource::Synthetic && d.count > 0 && set.len() > d.count {
        set = set.truncate(d.count);
    }
    if d.crop > 0 {
        set = data::random_crop(&set, d.crop, &mut seeds.rng("data", 1))?.0;
    }
    if set.shape() != cfg.model.image_shape() {
        let [c, h, w] = set.shape();
        return Err(Error::Config(format!(
            "images are {c}x{h}x{w} but model.image is {}x{}x{}",
            cfg.model.channels, cfg.model.height, cfg.model.width
        )));
    }
    data::split(&set, d.val_fraction, &mut seeds.rng("data", 2))
}
