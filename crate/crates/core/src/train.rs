//! End-to-end training through the differentiable OFDM link, PSNR
//! evaluation and the experiment harnesses built on it.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use num_complex::Complex;
use rand::Rng;
use rayon::prelude::*;

use crate::csi::{equalizer_coefficients, estimate, ls_estimate, mmse_equalize, mmse_estimate, EstimatorKind};
use crate::data::ImageSet;
use crate::error::{Error, Result};
use crate::model::{Mode, Model, Pass, SideInfo};
use crate::ofdm::{
    apply_channel_freq, apply_channel_time, pilot_block, sample_channel, sample_noise, ChannelMode,
    ChannelRealization, ComplexGrid, NoiseSpec, OfdmConfig,
};
use crate::rng::SeedStream;
use crate::scalar::Scalar;
use crate::tensor::{Adam, Tape, Tensor, Var};

pub const PSNR_CAP_DB: f64 = 100.0;

/// Mean squared error over all elements.
pub fn mse(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::shape("mse operands", x.len(), y.len()));
    }
    Ok(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64)
}

/// `10·log10(max² / mse)`, capped at [`PSNR_CAP_DB`].
pub fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP_DB)
}

pub fn psnr(x: &[f64], y: &[f64], max_val: f64) -> Result<f64> {
    if !(max_val > 0.0) {
        return Err(Error::Config(format!("max_val must be positive, got {max_val}")));
    }
    Ok(psnr_from_mse(mse(x, y)?, max_val))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SnrMode {
    Fixed(f64),
    /// μ drawn uniformly from `[lo, hi]` dB for each batch.
    Uniform { lo: f64, hi: f64 },
}

impl SnrMode {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            SnrMode::Fixed(mu) => mu,
            SnrMode::Uniform { lo, hi } if lo == hi => lo,
            SnrMode::Uniform { lo, hi } => rng.gen_range(lo..=hi),
        }
    }

    /// SNR points of the validation protocol.
    pub fn validation_points(&self) -> Vec<f64> {
        match *self {
            SnrMode::Fixed(mu) => vec![mu],
            SnrMode::Uniform { lo, hi } => vec![lo, (lo + hi) / 2.0, hi],
        }
    }
}

impl FromStr for SnrMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("train.snr must be fixed:MU or uniform:LO:HI, got {s:?}"));
        let num = |v: &str| v.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(bad);
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["fixed", mu] => Ok(SnrMode::Fixed(num(mu)?)),
            ["uniform", lo, hi] => {
                let (lo, hi) = (num(lo)?, num(hi)?);
                if lo > hi {
                    return Err(Error::Config(format!("train.snr range has lo {lo} > hi {hi}")));
                }
                Ok(SnrMode::Uniform { lo, hi })
            }
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for SnrMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SnrMode::Fixed(mu) => write!(f, "fixed:{mu}"),
            SnrMode::Uniform { lo, hi } => write!(f, "uniform:{lo}:{hi}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub snr: SnrMode,
    pub batch: usize,
    pub epochs: usize,
    pub patience: usize,
    pub estimator: EstimatorKind,
    pub lr: f64,
    /// Channel realizations per validation image at each validation SNR.
    pub val_realizations: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            snr: SnrMode::Uniform { lo: 0.0, hi: 20.0 },
            batch: 32,
            epochs: 200,
            patience: 10,
            estimator: EstimatorKind::Mmse,
            lr: 1e-3,
            val_realizations: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("train.batch must be positive".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("train.patience must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        if self.val_realizations == 0 {
            return Err(Error::Config("train.val_realizations must be positive".into()));
        }
        Ok(())
    }
}

/// Channel, noise level and the receiver's view of the channel for one
/// transmission.
#[derive(Debug, Clone)]
pub struct LinkState<T> {
    pub channel: ChannelRealization<T>,
    pub noise: NoiseSpec,
    pub estimate: Vec<Complex<T>>,
    pub side: SideInfo<T>,
}

/// Passes a grid through the configured channel model.
pub fn transmit<T: Scalar, R: Rng + ?Sized>(
    ofdm: &OfdmConfig,
    grid: &ComplexGrid<T>,
    channel: &ChannelRealization<T>,
    noise: &NoiseSpec,
    rng: &mut R,
) -> Result<ComplexGrid<T>> {
    match ofdm.channel {
        ChannelMode::Frequency => apply_channel_freq(grid, channel, noise, rng),
        ChannelMode::Taps => apply_channel_time(grid, channel, ofdm.cp_len, noise, rng),
    }
}

/// Samples a channel, sends the pilot block through it and estimates the
/// gains.
pub fn sound_channel<T: Scalar, R: Rng + ?Sized>(
    ofdm: &OfdmConfig,
    pilots: &ComplexGrid<T>,
    kind: EstimatorKind,
    mu_db: f64,
    rng: &mut R,
) -> Result<LinkState<T>> {
    let noise = NoiseSpec::from_snr_db(mu_db, ofdm.power);
    let channel = sample_channel::<T, R>(ofdm, rng)?;
    let rx = transmit(ofdm, pilots, &channel, &noise, rng)?;
    let est = estimate(kind, &rx, pilots, noise.sigma2, &channel)?;
    let side = SideInfo::new(&est, mu_db);
    Ok(LinkState {
        channel,
        noise,
        estimate: est,
        side,
    })
}

/// Records encode, channel, equalizer, decode and MSE against `target` for
/// the images in `x`. Channel gains, noise and equalizer taps are constants.
pub fn chain_loss<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    pass: &mut Pass,
    x: Var,
    target: &Tensor<T>,
    links: &[LinkState<T>],
    data_noise: &[ComplexGrid<T>],
) -> Result<Var> {
    if links.len() != data_noise.len() {
        return Err(Error::shape("noise grids", links.len(), data_noise.len()));
    }
    let n = links.len();
    let cfg = model.config();
    let (ns, lf) = (cfg.symbols, cfg.subcarriers);
    let side: Vec<SideInfo<T>> = links.iter().map(|l| l.side.clone()).collect();
    let mut gains = Vec::with_capacity(n * lf);
    let mut eq = Vec::with_capacity(n * lf);
    let mut offset = Vec::with_capacity(n * 2 * ns * lf);
    for (l, w) in links.iter().zip(data_noise) {
        gains.extend_from_slice(&l.channel.freq_response);
        eq.extend(equalizer_coefficients(&l.estimate, l.noise.sigma2)?);
        offset.extend(w.to_packed());
    }
    let y = model.encode_graph(tape, pass, x, &side)?;
    let rx = tape.complex_affine(y, &gains, Some(&offset))?;
    let ye = tape.complex_affine(rx, &eq, None)?;
    let xh = model.decode_graph(tape, pass, ye, &side)?;
    tape.mse(xh, target)
}

/// Owns the model being trained with its optimizer and random streams.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub model: Model<T>,
    pub ofdm: OfdmConfig,
    pub config: TrainConfig,
    adam: Adam,
    seeds: SeedStream,
    pilots: ComplexGrid<T>,
    step: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, ofdm: OfdmConfig, config: TrainConfig, seeds: SeedStream) -> Result<Self> {
        ofdm.validate()?;
        config.validate()?;
        let mc = model.config();
        if mc.subcarriers != ofdm.subcarriers || mc.symbols != ofdm.symbols {
            return Err(Error::Config(format!(
                "model expects l_f={} n_s={}, ofdm config has l_f={} n_s={}",
                mc.subcarriers, mc.symbols, ofdm.subcarriers, ofdm.symbols
            )));
        }
        let pilots = pilot_block(ofdm.pilots, ofdm.subcarriers)?;
        Ok(Self {
            adam: Adam::with_lr(config.lr),
            model,
            ofdm,
            config,
            seeds,
            pilots,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Builds the full differentiable chain for a batch and returns the tape
    /// with the loss node.
    pub fn batch_loss(
        &self,
        images: &Tensor<T>,
        links: &[LinkState<T>],
        data_noise: &[ComplexGrid<T>],
        mode: Mode,
    ) -> Result<(Tape<T>, Pass, Var)> {
        let mut tape = Tape::new();
        let mut pass = self.model.begin(&mut tape, mode);
        let x = tape.constant(images.clone());
        let loss = chain_loss(&self.model, &mut tape, &mut pass, x, images, links, data_noise)?;
        Ok((tape, pass, loss))
    }

    /// Draws the per-image channel state and data-symbol noise for one step.
    pub fn draw_links(&self, step: u64, n: usize, mu_db: f64) -> Result<(Vec<LinkState<T>>, Vec<ComplexGrid<T>>)> {
        let mut links = Vec::with_capacity(n);
        let mut noise = Vec::with_capacity(n);
        for b in 0..n {
            let mut rng = self.seeds.rng("channel", step * self.config.batch as u64 + b as u64);
            let link = sound_channel(&self.ofdm, &self.pilots, self.config.estimator, mu_db, &mut rng)?;
            noise.push(sample_noise(self.ofdm.symbols, self.ofdm.subcarriers, link.noise.sigma2, &mut rng));
            links.push(link);
        }
        Ok((links, noise))
    }

    /// One Adam step on the mean MSE of `images` (`[n,c,h,w]`).
    pub fn train_step(&mut self, images: &Tensor<T>) -> Result<f64> {
        let n = images.shape()[0];
        let mu_db = self.config.snr.sample(&mut self.seeds.rng("snr", self.step));
        let (links, noise) = self.draw_links(self.step, n, mu_db)?;
        let (mut tape, pass, loss) = self.batch_loss(images, &links, &noise, Mode::Train)?;
        let value = tape.value(loss).data()[0].as_f64();
        if !value.is_finite() {
            return Err(Error::Training(format!(
                "non-finite loss at step {} (mu = {mu_db} dB, channel stream \"channel\" from index {})",
                self.step,
                self.step * self.config.batch as u64
            )));
        }
        tape.backward(loss)?;
        self.model.params_mut().collect_grads(&tape, pass.bindings())?;
        self.adam.step(self.model.params_mut())?;
        self.model.absorb_statistics(&tape, &pass);
        self.step += 1;
        Ok(value)
    }

    /// One pass over `set` in a shuffled order; returns per-step losses.
    pub fn train_epoch(&mut self, set: &ImageSet, epoch: u64) -> Result<Vec<f64>> {
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..set.len()).collect();
        order.shuffle(&mut self.seeds.rng("shuffle", epoch));
        order
            .chunks(self.config.batch)
            .map(|idx| self.train_step(&set.batch(idx)))
            .collect()
    }
}

/// Stops after `patience` consecutive epochs without improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    best: Option<f64>,
    best_epoch: usize,
    stale: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: 0,
            stale: 0,
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best.map(|b| (self.best_epoch, b))
    }

    /// Records a validation score (higher is better).
    pub fn observe(&mut self, epoch: usize, score: f64) -> Verdict {
        match self.best {
            Some(b) if score <= b => {
                self.stale += 1;
                if self.stale >= self.patience {
                    Verdict::Stop
                } else {
                    Verdict::Continue
                }
            }
            _ => {
                self.best = Some(score);
                self.best_epoch = epoch;
                self.stale = 0;
                Verdict::Improved
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_psnr: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult<T> {
    pub best: Model<T>,
    pub best_epoch: usize,
    pub best_psnr: f64,
    pub initial_psnr: f64,
    pub history: Vec<EpochRecord>,
    pub losses: Vec<f64>,
}

/// Mean validation PSNR over the SNR points of the training mode.
pub fn validation_psnr<T: Scalar>(
    model: &Model<T>,
    ofdm: &OfdmConfig,
    config: &TrainConfig,
    set: &ImageSet,
    seeds: &SeedStream,
) -> Result<f64> {
    let points = config.snr.validation_points();
    let mut total = 0.0;
    for &mu in &points {
        let r = evaluate(model, ofdm, set, mu, config.estimator, config.val_realizations, seeds)?;
        total += r.psnr_mean;
    }
    Ok(total / points.len() as f64)
}

/// Trains until validation PSNR stops improving for `patience` epochs and
/// returns the best-validation model.
pub fn fit<T: Scalar>(
    trainer: &mut Trainer<T>,
    train: &ImageSet,
    val: &ImageSet,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitResult<T>> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("training and validation sets must be non-empty".into()));
    }
    let val_seeds = trainer.seeds.child("validation");
    let score = |t: &Trainer<T>| validation_psnr(&t.model, &t.ofdm, &t.config, val, &val_seeds);
    let initial_psnr = score(trainer)?;
    let mut stopper = EarlyStopping::new(trainer.config.patience);
    let mut best = trainer.model.clone();
    let mut history = Vec::new();
    let mut losses = Vec::new();
    for epoch in 1..=trainer.config.epochs {
        let l = trainer.train_epoch(train, epoch as u64)?;
        let train_loss = l.iter().sum::<f64>() / l.len() as f64;
        losses.extend(l);
        let val_psnr = score(trainer)?;
        let record = EpochRecord {
            epoch,
            train_loss,
            val_psnr,
        };
        log::info!("epoch {epoch}: loss {train_loss:.6}, validation PSNR {val_psnr:.3} dB");
        on_epoch(&record);
        history.push(record);
        match stopper.observe(epoch, val_psnr) {
            Verdict::Improved => best = trainer.model.clone(),
            Verdict::Continue => {}
            Verdict::Stop => break,
        }
    }
    let (best_epoch, best_psnr) = stopper.best().expect("at least one epoch ran");
    Ok(FitResult {
        best,
        best_epoch,
        best_psnr,
        initial_psnr,
        history,
        losses,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mu_db: f64,
    pub estimator: EstimatorKind,
    pub psnr_mean: f64,
    pub psnr_stderr: f64,
    /// Images × realizations.
    pub n: usize,
    pub realizations: usize,
}

fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// One image sent over `realizations` independent channels; returns the
/// PSNR of each reconstruction.
fn transmit_image<T: Scalar>(
    model: &Model<T>,
    ofdm: &OfdmConfig,
    pilots: &ComplexGrid<T>,
    image: &Tensor<T>,
    mu_db: f64,
    kind: EstimatorKind,
    realizations: usize,
    rngs: &mut [crate::rng::Rng],
) -> Result<Vec<f64>> {
    let links = rngs
        .iter_mut()
        .map(|rng| sound_channel(ofdm, pilots, kind, mu_db, rng))
        .collect::<Result<Vec<_>>>()?;
    let side: Vec<SideInfo<T>> = links.iter().map(|l| l.side.clone()).collect();
    let [c, h, w] = model.config().image_shape();
    let copies = Tensor::from_fn(&[realizations, c, h, w], |i| image.data()[i % (c * h * w)]);
    let grids = model.encode(&copies, &side)?;
    let mut received = Vec::with_capacity(realizations);
    for ((g, l), rng) in grids.iter().zip(&links).zip(rngs.iter_mut()) {
        let rx = transmit(ofdm, g, &l.channel, &l.noise, rng)?;
        received.push(mmse_equalize(&rx, &l.estimate, l.noise.sigma2)?);
    }
    let out = model.decode(&received, &side)?;
    let reference: Vec<f64> = image.data().iter().map(|v| v.as_f64()).collect();
    out.data()
        .chunks(c * h * w)
        .map(|x| psnr(&reference, &x.iter().map(|v| v.as_f64()).collect::<Vec<_>>(), 1.0))
        .collect()
}

/// Mean PSNR over images × channel realizations at SNR `mu_db`. Each
/// `(image, realization)` pair owns a random stream, so the result does not
/// depend on scheduling.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    ofdm: &OfdmConfig,
    set: &ImageSet,
    mu_db: f64,
    kind: EstimatorKind,
    realizations: usize,
    seeds: &SeedStream,
) -> Result<EvalReport> {
    if realizations == 0 {
        return Err(Error::Config("eval.realizations must be at least 1".into()));
    }
    if set.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let pilots = pilot_block(ofdm.pilots, ofdm.subcarriers)?;
    let stream = seeds.child(&format!("eval:{mu_db}:{kind}"));
    let per_image = (0..set.len())
        .into_par_iter()
        .map(|i| {
            let mut rngs: Vec<_> = (0..realizations)
                .map(|r| stream.rng("link", (i * realizations + r) as u64))
                .collect();
            let image = set.batch::<T>(&[i]);
            transmit_image(model, ofdm, &pilots, &image, mu_db, kind, realizations, &mut rngs)
        })
        .collect::<Result<Vec<_>>>()?;
    let all: Vec<f64> = per_image.into_iter().flatten().collect();
    if let Some(bad) = all.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("PSNR {bad} at mu = {mu_db} dB")));
    }
    let (psnr_mean, psnr_stderr) = mean_stderr(&all);
    Ok(EvalReport {
        mu_db,
        estimator: kind,
        psnr_mean,
        psnr_stderr,
        n: all.len(),
        realizations,
    })
}

pub fn sweep_snr<T: Scalar>(
    model: &Model<T>,
    ofdm: &OfdmConfig,
    set: &ImageSet,
    mus: &[f64],
    kind: EstimatorKind,
    realizations: usize,
    seeds: &SeedStream,
) -> Result<Vec<EvalReport>> {
    mus.iter()
        .map(|&mu| evaluate(model, ofdm, set, mu, kind, realizations, seeds))
        .collect()
}

pub fn write_sweep_csv<W: Write>(mut w: W, reports: &[EvalReport]) -> Result<()> {
    writeln!(w, "mu_db,psnr_mean,psnr_stderr,n")?;
    for r in reports {
        writeln!(w, "{},{},{},{}", r.mu_db, r.psnr_mean, r.psnr_stderr, r.n)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerRow {
    /// Rank of the subcarrier after sorting by estimated gain.
    pub subcarrier_idx: usize,
    pub mean_gain: f64,
    pub mean_power: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerReport {
    pub mu_db: f64,
    pub rows: Vec<PowerRow>,
    /// Spearman rank correlation between `mean_gain` and `mean_power`.
    pub spearman: f64,
}

/// Average allocated power and estimated gain per sorted subcarrier rank.
pub fn power_allocation_report<T: Scalar>(
    model: &Model<T>,
    ofdm: &OfdmConfig,
    set: &ImageSet,
    mu_db: f64,
    kind: EstimatorKind,
    realizations: usize,
    seeds: &SeedStream,
) -> Result<PowerReport> {
    let pilots = pilot_block::<T>(ofdm.pilots, ofdm.subcarriers)?;
    let lf = ofdm.subcarriers;
    let stream = seeds.child(&format!("power:{mu_db}:{kind}"));
    let per_image = (0..set.len())
        .into_par_iter()
        .map(|i| {
            let links = (0..realizations)
                .map(|r| sound_channel(ofdm, &pilots, kind, mu_db, &mut stream.rng("link", (i * realizations + r) as u64)))
                .collect::<Result<Vec<_>>>()?;
            let side: Vec<SideInfo<T>> = links.iter().map(|l| l.side.clone()).collect();
            let copies = set.batch::<T>(&vec![i; realizations]);
            let grids = model.encode(&copies, &side)?;
            let mut gain = vec![0.0; lf];
            let mut power = vec![0.0; lf];
            for (g, s) in grids.iter().zip(&side) {
                for (p, &k) in s.perm.forward().iter().enumerate() {
                    gain[p] += s.csi.gains[k].as_f64();
                    power[p] += (0..g.rows()).map(|r| g.get(r, k).norm_sqr().as_f64()).sum::<f64>() / g.rows() as f64;
                }
            }
            Ok((gain, power))
        })
        .collect::<Result<Vec<_>>>()?;
    let count = (set.len() * realizations) as f64;
    let mut gain = vec![0.0; lf];
    let mut power = vec![0.0; lf];
    for (g, p) in per_image {
        gain.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        power.iter_mut().zip(p).for_each(|(a, b)| *a += b);
    }
    let rows: Vec<PowerRow> = (0..lf)
        .map(|k| PowerRow {
            subcarrier_idx: k,
            mean_gain: gain[k] / count,
            mean_power: power[k] / count,
        })
        .collect();
    let spearman = spearman(
        &rows.iter().map(|r| r.mean_gain).collect::<Vec<_>>(),
        &rows.iter().map(|r| r.mean_power).collect::<Vec<_>>(),
    );
    Ok(PowerReport { mu_db, rows, spearman })
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Pearson correlation of the ranks (ties share the average rank).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum::<f64>().sqrt();
    let sy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum::<f64>().sqrt();
    if sx == 0.0 || sy == 0.0 {
        0.0
    } else {
        cov / (sx * sy)
    }
}

pub fn write_power_csv<W: Write>(mut w: W, report: &PowerReport) -> Result<()> {
    writeln!(w, "subcarrier_idx,mean_gain,mean_power")?;
    for r in &report.rows {
        writeln!(w, "{},{},{}", r.subcarrier_idx, r.mean_gain, r.mean_power)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MismatchEntry {
    pub train_csi: EstimatorKind,
    pub report: EvalReport,
}

/// Every (training estimator, test estimator) combination at one SNR.
pub fn csi_mismatch_eval<T: Scalar>(
    models: &[(EstimatorKind, &Model<T>)],
    ofdm: &OfdmConfig,
    set: &ImageSet,
    mu_db: f64,
    realizations: usize,
    seeds: &SeedStream,
) -> Result<Vec<MismatchEntry>> {
    let mut out = Vec::new();
    for &(train_csi, model) in models {
        for test in EstimatorKind::ALL {
            out.push(MismatchEntry {
                train_csi,
                report: evaluate(model, ofdm, set, mu_db, test, realizations, seeds)?,
            });
        }
    }
    Ok(out)
}

pub fn write_mismatch_csv<W: Write>(mut w: W, entries: &[MismatchEntry]) -> Result<()> {
    writeln!(w, "train_csi,test_csi,mu_db,psnr_mean,psnr_stderr")?;
    for e in entries {
        let r = &e.report;
        writeln!(w, "{},{},{},{},{}", e.train_csi, r.estimator, r.mu_db, r.psnr_mean, r.psnr_stderr)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub mu_db: f64,
    pub mse_ls: f64,
    pub mse_mmse: f64,
    pub n: usize,
}

/// Monte-Carlo per-subcarrier MSE of the LS and MMSE estimates.
pub fn estimator_bench(ofdm: &OfdmConfig, mus: &[f64], trials: usize, seeds: &SeedStream) -> Result<Vec<BenchRow>> {
    let pilots = pilot_block::<f64>(ofdm.pilots, ofdm.subcarriers)?;
    mus.iter()
        .map(|&mu| {
            let mut rng = seeds.rng(&format!("bench:{mu}"), 0);
            let noise = NoiseSpec::from_snr_db(mu, ofdm.power);
            let (mut e_ls, mut e_mmse) = (0.0, 0.0);
            for _ in 0..trials {
                let chan = sample_channel::<f64, _>(ofdm, &mut rng)?;
                let rx = transmit(ofdm, &pilots, &chan, &noise, &mut rng)?;
                let ls = ls_estimate(&rx, &pilots)?;
                let mm = mmse_estimate(&rx, &pilots, noise.sigma2)?;
                for (k, h) in chan.freq_response.iter().enumerate() {
                    e_ls += (ls[k] - h).norm_sqr();
                    e_mmse += (mm[k] - h).norm_sqr();
                }
            }
            let denom = (trials * ofdm.subcarriers) as f64;
            Ok(BenchRow {
                mu_db: mu,
                mse_ls: e_ls / denom,
                mse_mmse: e_mmse / denom,
                n: trials,
            })
        })
        .collect()
}

pub fn write_bench_csv<W: Write>(mut w: W, rows: &[BenchRow]) -> Result<()> {
    writeln!(w, "mu_db,mse_ls,mse_mmse,n")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.mu_db, r.mse_ls, r.mse_mmse, r.n)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_set;
    use crate::model::ModelConfig;

    #[test]
    fn psnr_cases() {
        let x = vec![0.0; 4];
        let y = vec![0.1; 4];
        assert!((psnr(&x, &y, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), PSNR_CAP_DB);
        assert_eq!(psnr(&x, &[1.0; 4], 1.0).unwrap(), 0.0);
        assert!(psnr(&x, &[0.0; 3], 1.0).is_err());
        assert!(psnr(&x, &y, 0.0).is_err());
    }

    #[test]
    fn snr_mode_parsing() {
        assert_eq!("fixed:10".parse::<SnrMode>().unwrap(), SnrMode::Fixed(10.0));
        assert_eq!(
            "uniform:0:20".parse::<SnrMode>().unwrap(),
            SnrMode::Uniform { lo: 0.0, hi: 20.0 }
        );
        assert!("uniform:5:1".parse::<SnrMode>().is_err());
        assert!("gauss:1".parse::<SnrMode>().is_err());
        let m = SnrMode::Uniform { lo: 0.0, hi: 20.0 };
        assert_eq!(m.to_string().parse::<SnrMode>().unwrap(), m);
    }

    #[test]
    fn early_stopping_counts_stale_epochs() {
        let mut s = EarlyStopping::new(3);
        assert_eq!(s.observe(1, 10.0), Verdict::Improved);
        assert_eq!(s.observe(2, 9.0), Verdict::Continue);
        assert_eq!(s.observe(3, 8.0), Verdict::Continue);
        assert_eq!(s.observe(4, 7.0), Verdict::Stop);
        assert_eq!(s.best(), Some((1, 10.0)));
    }

    #[test]
    fn spearman_extremes() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    }

    fn toy_trainer(seed: u64) -> (Trainer<f64>, ImageSet) {
        let seeds = SeedStream::new(seed);
        let model = Model::new(ModelConfig::toy(), &mut seeds.rng("init", 0)).unwrap();
        let ofdm = OfdmConfig {
            subcarriers: 16,
            symbols: 2,
            ..OfdmConfig::default()
        };
        let cfg = TrainConfig {
            batch: 4,
            ..TrainConfig::default()
        };
        let set = synthetic_set(8, [1, 8, 8], &mut seeds.rng("data", 0));
        (Trainer::new(model, ofdm, cfg, seeds).unwrap(), set)
    }

    #[test]
    fn identical_seeds_give_identical_losses() {
        let (mut a, set) = toy_trainer(11);
        let (mut b, _) = toy_trainer(11);
        let la = a.train_epoch(&set, 0).unwrap();
        let lb = b.train_epoch(&set, 0).unwrap();
        assert_eq!(la.len(), 2);
        assert_eq!(la.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), lb.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(a.model.params(), b.model.params());
    }

    #[test]
    fn evaluation_is_deterministic() {
        let (t, set) = toy_trainer(12);
        let seeds = SeedStream::new(3);
        let r1 = evaluate(&t.model, &t.ofdm, &set, 10.0, EstimatorKind::Mmse, 3, &seeds).unwrap();
        let r2 = evaluate(&t.model, &t.ofdm, &set, 10.0, EstimatorKind::Mmse, 3, &seeds).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(r1.n, 24);
        assert!(r1.psnr_mean.is_finite() && r1.psnr_mean > 0.0);
    }

    #[test]
    fn csv_schemas() {
        let reports = vec![EvalReport {
            mu_db: 5.0,
            estimator: EstimatorKind::Ls,
            psnr_mean: 21.123456789012345,
            psnr_stderr: 0.1,
            n: 10,
            realizations: 1,
        }];
        let mut buf = Vec::new();
        write_sweep_csv(&mut buf, &reports).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
        assert_eq!(text.lines().next().unwrap(), "mu_db,psnr_mean,psnr_stderr,n");
        assert_eq!(row[1].parse::<f64>().unwrap(), 21.123456789012345);
    }

    #[test]
    fn bench_orders_estimators() {
        let ofdm = OfdmConfig {
            subcarriers: 16,
            ..OfdmConfig::default()
        };
        let rows = estimator_bench(&ofdm, &[0.0, 10.0], 200, &SeedStream::new(1)).unwrap();
        assert!(rows.iter().all(|r| r.mse_mmse < r.mse_ls));
    }
}
