//! OFDM physical layer: symbol grids, power normalization, Zadoff-Chu
//! pilots, multipath channels in the frequency and time domains, and AWGN.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex;
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// How channel realizations are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ChannelMode {
    /// iid CN(0,1) gain per subcarrier.
    #[default]
    Frequency,
    /// `taps` iid CN(0, 1/taps) time-domain paths; gains are their DFT.
    Taps,
}

impl FromStr for ChannelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "freq" | "frequency" => Ok(ChannelMode::Frequency),
            "taps" | "time" => Ok(ChannelMode::Taps),
            other => Err(Error::Config(format!("unknown channel mode {other:?} (expected freq|taps)"))),
        }
    }
}

impl fmt::Display for ChannelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChannelMode::Frequency => "freq",
            ChannelMode::Taps => "taps",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfdmConfig {
    /// Subcarriers per OFDM symbol (L_f).
    pub subcarriers: usize,
    /// Data OFDM symbols per image (N_s).
    pub symbols: usize,
    /// Pilot OFDM symbols per frame (N_p).
    pub pilots: usize,
    pub cp_len: usize,
    /// Time-domain paths (L_t); used in tap mode.
    pub taps: usize,
    pub channel: ChannelMode,
    /// Average power budget P_s.
    pub power: f64,
}

impl Default for OfdmConfig {
    fn default() -> Self {
        Self {
            subcarriers: 64,
            symbols: 8,
            pilots: 2,
            cp_len: 16,
            taps: 8,
            channel: ChannelMode::Frequency,
            power: 1.0,
        }
    }
}

impl OfdmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subcarriers == 0 || !self.subcarriers.is_power_of_two() {
            return Err(Error::Config(format!(
                "ofdm.l_f must be a positive power of two, got {}",
                self.subcarriers
            )));
        }
        if self.symbols == 0 {
            return Err(Error::Config("ofdm.n_s must be positive".into()));
        }
        if self.pilots == 0 {
            return Err(Error::Config("ofdm.n_p must be at least 1; channel estimation needs pilots".into()));
        }
        if self.taps == 0 {
            return Err(Error::Config("ofdm.l_t must be positive".into()));
        }
        if self.channel == ChannelMode::Taps {
            check_cp(self.cp_len, self.taps)?;
            if self.taps > self.subcarriers {
                return Err(Error::Config(format!(
                    "ofdm.l_t ({}) exceeds ofdm.l_f ({})",
                    self.taps, self.subcarriers
                )));
            }
        }
        if !(self.power > 0.0) {
            return Err(Error::Config("ofdm.power must be positive".into()));
        }
        Ok(())
    }

    /// Energy of one normalized data grid, `P_s · N_s · L_f`.
    pub fn grid_energy(&self) -> f64 {
        self.power * (self.symbols * self.subcarriers) as f64
    }
}

fn check_cp(cp_len: usize, taps: usize) -> Result<()> {
    if cp_len + 1 < taps {
        return Err(Error::Config(format!(
            "cp_len ({cp_len}) < l_t - 1 ({}); the cyclic prefix must cover the channel memory",
            taps.saturating_sub(1)
        )));
    }
    Ok(())
}

/// Row-major `rows × cols` complex grid: rows are OFDM symbols, columns
/// subcarriers.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexGrid<T> {
    rows: usize,
    cols: usize,
    data: Vec<Complex<T>>,
}

impl<T: Scalar> ComplexGrid<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<Complex<T>>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("grid data", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, Complex::new(T::zero(), T::zero()))
    }

    pub fn filled(rows: usize, cols: usize, value: Complex<T>) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex<T>) -> Self {
        let data = (0..rows * cols).map(|p| f(p / cols, p % cols)).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[Complex<T>] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> Complex<T> {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[Complex<T>] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn frobenius_sq(&self) -> T {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }

    pub fn mean_power(&self) -> T {
        self.frobenius_sq() / T::of(self.data.len() as f64)
    }

    /// Stacked real plane then imaginary plane, each row-major.
    pub fn to_packed(&self) -> Vec<T> {
        self.data.iter().map(|c| c.re).chain(self.data.iter().map(|c| c.im)).collect()
    }

    /// Inverse of [`ComplexGrid::to_packed`].
    pub fn from_packed(rows: usize, cols: usize, packed: &[T]) -> Result<Self> {
        let n = rows * cols;
        if packed.len() != 2 * n {
            return Err(Error::shape("packed grid", 2 * n, packed.len()));
        }
        Ok(Self {
            rows,
            cols,
            data: (0..n).map(|i| Complex::new(packed[i], packed[n + i])).collect(),
        })
    }

    /// Rows `[start, end)` as a new grid.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub sigma2: f64,
    pub mu_db: f64,
}

impl NoiseSpec {
    pub fn from_snr_db(mu_db: f64, power: f64) -> Self {
        Self {
            sigma2: snr_to_sigma2(mu_db, power),
            mu_db,
        }
    }

    pub fn noiseless() -> Self {
        Self {
            sigma2: 0.0,
            mu_db: f64::INFINITY,
        }
    }
}

/// `σ² = P_s · 10^(−μ/10)`.
pub fn snr_to_sigma2(mu_db: f64, power: f64) -> f64 {
    power * 10f64.powf(-mu_db / 10.0)
}

/// Scales the grid to mean power `power` exactly.
pub fn power_normalize<T: Scalar>(grid: &ComplexGrid<T>, power: f64) -> Result<ComplexGrid<T>> {
    let energy = grid.frobenius_sq();
    if energy <= T::zero() {
        return Err(Error::Degenerate("cannot power-normalize an all-zero grid".into()));
    }
    let target = T::of(power * grid.data.len() as f64);
    let scale = (target / energy).sqrt();
    Ok(ComplexGrid {
        rows: grid.rows,
        cols: grid.cols,
        data: grid.data.iter().map(|c| c * scale).collect(),
    })
}

fn gcd(mut a: usize, mut b: usize) -> usize {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Zadoff-Chu sequence of length `n` and root `root` (coprime to `n`).
pub fn zadoff_chu<T: Scalar>(root: usize, n: usize) -> Result<Vec<Complex<T>>> {
    if n == 0 || gcd(root, n) != 1 {
        return Err(Error::Config(format!("zadoff-chu root {root} is not coprime to length {n}")));
    }
    let (u, len) = (root as u128, n as u128);
    Ok((0..len)
        .map(|k| {
            // Reduce the exponent modulo 2N in exact integer arithmetic so
            // the phase stays accurate for long sequences.
            let num = if n.is_multiple_of(2) { u * k * k } else { u * k * (k + 1) };
            let phase = -std::f64::consts::PI * (num % (2 * len)) as f64 / n as f64;
            Complex::new(T::of(phase.cos()), T::of(phase.sin()))
        })
        .collect())
}

/// `n_p × l_f` pilot block: row `i` is the Zadoff-Chu sequence with the
/// `i`-th root coprime to `l_f`.
pub fn pilot_block<T: Scalar>(n_p: usize, l_f: usize) -> Result<ComplexGrid<T>> {
    if n_p == 0 {
        return Err(Error::Config("at least one pilot symbol is required".into()));
    }
    let mut data = Vec::with_capacity(n_p * l_f);
    let mut roots = (1..).filter(|&r| gcd(r, l_f) == 1);
    for _ in 0..n_p {
        data.extend(zadoff_chu::<T>(roots.next().expect("infinite"), l_f)?);
    }
    ComplexGrid::new(n_p, l_f, data)
}

/// One CN(0, var) draw: independent N(0, var/2) real and imaginary parts.
pub fn complex_normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R, var: f64) -> Complex<T> {
    let s = (var / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex::new(T::of(re * s), T::of(im * s))
}

/// A per-frame multipath channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization<T> {
    pub freq_response: Vec<Complex<T>>,
    /// Time-domain impulse response when tap-derived.
    pub taps: Option<Vec<Complex<T>>>,
}

impl<T: Scalar> ChannelRealization<T> {
    /// Unit gain on every subcarrier (single unit tap).
    pub fn identity(l_f: usize) -> Self {
        Self::from_taps(vec![Complex::new(T::one(), T::zero())], l_f).expect("single tap fits")
    }

    pub fn from_freq(freq_response: Vec<Complex<T>>) -> Self {
        Self {
            freq_response,
            taps: None,
        }
    }

    /// Derives the frequency response as the `l_f`-point DFT of the
    /// zero-padded taps.
    pub fn from_taps(taps: Vec<Complex<T>>, l_f: usize) -> Result<Self> {
        if taps.is_empty() || taps.len() > l_f {
            return Err(Error::Config(format!("{} taps do not fit {l_f} subcarriers", taps.len())));
        }
        let mut buf = taps.clone();
        buf.resize(l_f, Complex::new(T::zero(), T::zero()));
        FftPlanner::new().plan_fft_forward(l_f).process(&mut buf);
        Ok(Self {
            freq_response: buf,
            taps: Some(taps),
        })
    }

    pub fn subcarriers(&self) -> usize {
        self.freq_response.len()
    }

    pub fn is_tap_derived(&self) -> bool {
        self.taps.is_some()
    }
}

pub fn sample_channel_freq<T: Scalar, R: Rng + ?Sized>(l_f: usize, rng: &mut R) -> ChannelRealization<T> {
    ChannelRealization::from_freq((0..l_f).map(|_| complex_normal(rng, 1.0)).collect())
}

/// `l_t` iid CN(0, 1/l_t) taps, so `E|H[k]|² = 1`.
pub fn sample_channel_taps<T: Scalar, R: Rng + ?Sized>(l_t: usize, l_f: usize, rng: &mut R) -> Result<ChannelRealization<T>> {
    if l_t == 0 {
        return Err(Error::Config("l_t must be positive".into()));
    }
    let var = 1.0 / l_t as f64;
    let taps = (0..l_t).map(|_| complex_normal(rng, var)).collect();
    ChannelRealization::from_taps(taps, l_f)
}

/// Draws a channel according to the configured mode.
pub fn sample_channel<T: Scalar, R: Rng + ?Sized>(cfg: &OfdmConfig, rng: &mut R) -> Result<ChannelRealization<T>> {
    match cfg.channel {
        ChannelMode::Frequency => Ok(sample_channel_freq(cfg.subcarriers, rng)),
        ChannelMode::Taps => sample_channel_taps(cfg.taps, cfg.subcarriers, rng),
    }
}

/// iid CN(0, σ²) grid, drawn row-major.
pub fn sample_noise<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, sigma2: f64, rng: &mut R) -> ComplexGrid<T> {
    if sigma2 == 0.0 {
        return ComplexGrid::zeros(rows, cols);
    }
    ComplexGrid::from_fn(rows, cols, |_, _| complex_normal(rng, sigma2))
}

/// `Ŷ[i,k] = H[k]·Ȳ[i,k] + W[i,k]` with `W ~ CN(0, σ²)`.
pub fn apply_channel_freq<T: Scalar, R: Rng + ?Sized>(
    grid: &ComplexGrid<T>,
    chan: &ChannelRealization<T>,
    noise: &NoiseSpec,
    rng: &mut R,
) -> Result<ComplexGrid<T>> {
    if chan.subcarriers() != grid.cols {
        return Err(Error::shape("channel subcarriers", grid.cols, chan.subcarriers()));
    }
    if noise.sigma2 < 0.0 {
        return Err(Error::Config(format!("negative noise variance {}", noise.sigma2)));
    }
    let w = sample_noise::<T, R>(grid.rows, grid.cols, noise.sigma2, rng);
    Ok(ComplexGrid::from_fn(grid.rows, grid.cols, |i, k| {
        chan.freq_response[k] * grid.get(i, k) + w.get(i, k)
    }))
}

/// Baseband time-domain path: per-symbol IFFT and cyclic prefix, serial
/// linear convolution of the whole frame with the taps, AWGN, CP removal
/// and FFT. Time-domain noise has variance `σ²/L_f` so that each
/// frequency bin sees `σ²`.
pub fn apply_channel_time<T: Scalar, R: Rng + ?Sized>(
    grid: &ComplexGrid<T>,
    chan: &ChannelRealization<T>,
    cp_len: usize,
    noise: &NoiseSpec,
    rng: &mut R,
) -> Result<ComplexGrid<T>> {
    let taps = chan
        .taps
        .as_ref()
        .ok_or_else(|| Error::Config("time-domain channel needs a tap-derived realization".into()))?;
    check_cp(cp_len, taps.len())?;
    let l = grid.cols;
    if chan.subcarriers() != l {
        return Err(Error::shape("channel subcarriers", l, chan.subcarriers()));
    }
    if noise.sigma2 < 0.0 {
        return Err(Error::Config(format!("negative noise variance {}", noise.sigma2)));
    }
    let zero = Complex::new(T::zero(), T::zero());
    let mut planner = FftPlanner::new();
    let ifft = planner.plan_fft_inverse(l);
    let fft = planner.plan_fft_forward(l);
    let inv_l = T::of(1.0 / l as f64);

    let sym_len = l + cp_len;
    let mut stream = Vec::with_capacity(grid.rows * sym_len);
    for i in 0..grid.rows {
        let mut buf = grid.row(i).to_vec();
        ifft.process(&mut buf);
        buf.iter_mut().for_each(|v| *v = *v * inv_l);
        stream.extend_from_slice(&buf[l - cp_len..]);
        stream.extend_from_slice(&buf);
    }

    let mut rx: Vec<Complex<T>> = (0..stream.len())
        .map(|n| {
            taps.iter()
                .enumerate()
                .take_while(|(t, _)| *t <= n)
                .fold(zero, |acc, (t, h)| acc + h * stream[n - t])
        })
        .collect();
    if noise.sigma2 > 0.0 {
        let var = noise.sigma2 / l as f64;
        rx.iter_mut().for_each(|v| *v = *v + complex_normal::<T, R>(rng, var));
    }

    let mut out = Vec::with_capacity(grid.rows * l);
    for i in 0..grid.rows {
        let start = i * sym_len + cp_len;
        let mut buf = rx[start..start + l].to_vec();
        fft.process(&mut buf);
        out.extend(buf);
    }
    ComplexGrid::new(grid.rows, l, out)
}

/// A transmitted frame: pilot rows followed by data rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame<T> {
    pub pilots: usize,
    pub symbols: ComplexGrid<T>,
}

impl<T: Scalar> Frame<T> {
    pub fn total_symbols(&self) -> usize {
        self.symbols.rows
    }

    /// Splits a received frame back into `(pilot rows, data rows)`.
    pub fn split(&self) -> (ComplexGrid<T>, ComplexGrid<T>) {
        (
            self.symbols.slice_rows(0, self.pilots),
            self.symbols.slice_rows(self.pilots, self.symbols.rows),
        )
    }
}

/// Prepends the pilot block to the data symbols.
pub fn insert_pilots<T: Scalar>(grid: &ComplexGrid<T>, pilots: &ComplexGrid<T>) -> Result<Frame<T>> {
    if pilots.rows == 0 {
        return Err(Error::Config("at least one pilot symbol is required".into()));
    }
    if pilots.cols != grid.cols {
        return Err(Error::shape("pilot subcarriers", grid.cols, pilots.cols));
    }
    let mut data = pilots.data.clone();
    data.extend_from_slice(&grid.data);
    Ok(Frame {
        pilots: pilots.rows,
        symbols: ComplexGrid::new(pilots.rows + grid.rows, grid.cols, data)?,
    })
}
