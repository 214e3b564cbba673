//! Pilot-based channel estimation, MMSE equalization, CSI vectors and
//! subcarrier ordering.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::ofdm::{ChannelRealization, ComplexGrid};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum EstimatorKind {
    /// The true realization, bypassing pilots.
    Perfect,
    #[default]
    Mmse,
    Ls,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 3] = [EstimatorKind::Perfect, EstimatorKind::Mmse, EstimatorKind::Ls];
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "perfect" => Ok(EstimatorKind::Perfect),
            "mmse" => Ok(EstimatorKind::Mmse),
            "ls" => Ok(EstimatorKind::Ls),
            other => Err(Error::Config(format!("unknown estimator {other:?} (expected perfect|mmse|ls)"))),
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EstimatorKind::Perfect => "perfect",
            EstimatorKind::Mmse => "mmse",
            EstimatorKind::Ls => "ls",
        })
    }
}

/// `ĥ[k] = (1/N_p) Σ_i rx[i,k] / pilot[i,k]`.
pub fn ls_estimate<T: Scalar>(rx_pilots: &ComplexGrid<T>, pilots: &ComplexGrid<T>) -> Result<Vec<Complex<T>>> {
    if rx_pilots.rows() != pilots.rows() || rx_pilots.cols() != pilots.cols() {
        return Err(Error::shape(
            "received pilots",
            format!("{}x{}", pilots.rows(), pilots.cols()),
            format!("{}x{}", rx_pilots.rows(), rx_pilots.cols()),
        ));
    }
    if pilots.rows() == 0 {
        return Err(Error::Estimation("no pilot symbols".into()));
    }
    let np = T::of(pilots.rows() as f64);
    (0..pilots.cols())
        .map(|k| {
            let mut acc = Complex::new(T::zero(), T::zero());
            for i in 0..pilots.rows() {
                let p = pilots.get(i, k);
                if p.norm_sqr() == T::zero() {
                    return Err(Error::Estimation(format!("zero pilot at symbol {i}, subcarrier {k}")));
                }
                acc = acc + rx_pilots.get(i, k) / p;
            }
            Ok(acc / np)
        })
        .collect()
}

/// Per-subcarrier LMMSE shrinkage of the LS estimate under a CN(0,1) prior
/// with unit-power pilots: `ĥ_ls / (1 + σ²/N_p)`.
pub fn mmse_estimate<T: Scalar>(rx_pilots: &ComplexGrid<T>, pilots: &ComplexGrid<T>, sigma2: f64) -> Result<Vec<Complex<T>>> {
    if sigma2 < 0.0 || sigma2.is_nan() {
        return Err(Error::Estimation(format!("noise variance must be non-negative, got {sigma2}")));
    }
    let shrink = T::of(1.0 / (1.0 + sigma2 / pilots.rows() as f64));
    Ok(ls_estimate(rx_pilots, pilots)?.into_iter().map(|h| h * shrink).collect())
}

/// Dispatches on the estimator kind; `Perfect` copies the true gains.
pub fn estimate<T: Scalar>(
    kind: EstimatorKind,
    rx_pilots: &ComplexGrid<T>,
    pilots: &ComplexGrid<T>,
    sigma2: f64,
    truth: &ChannelRealization<T>,
) -> Result<Vec<Complex<T>>> {
    match kind {
        EstimatorKind::Perfect => Ok(truth.freq_response.clone()),
        EstimatorKind::Ls => ls_estimate(rx_pilots, pilots),
        EstimatorKind::Mmse => mmse_estimate(rx_pilots, pilots, sigma2),
    }
}

/// Per-subcarrier equalizer taps `conj(ĥ) / (|ĥ|² + σ²)`.
pub fn equalizer_coefficients<T: Scalar>(gains: &[Complex<T>], sigma2: f64) -> Result<Vec<Complex<T>>> {
    let s2 = T::of(sigma2);
    gains
        .iter()
        .enumerate()
        .map(|(k, g)| {
            let den = g.norm_sqr() + s2;
            if den <= T::zero() {
                return Err(Error::Degenerate(format!(
                    "equalizer division by zero at subcarrier {k} (zero gain and zero noise)"
                )));
            }
            Ok(g.conj() / den)
        })
        .collect()
}

/// `Ŷ_e[i,k] = conj(ĥ[k])·Ŷ[i,k] / (|ĥ[k]|² + σ²)`.
pub fn mmse_equalize<T: Scalar>(rx: &ComplexGrid<T>, gains: &[Complex<T>], sigma2: f64) -> Result<ComplexGrid<T>> {
    if gains.len() != rx.cols() {
        return Err(Error::shape("equalizer gains", rx.cols(), gains.len()));
    }
    let coef = equalizer_coefficients(gains, sigma2)?;
    Ok(ComplexGrid::from_fn(rx.rows(), rx.cols(), |i, k| coef[k] * rx.get(i, k)))
}

/// Gain magnitudes followed by the average SNR in dB.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiVector<T> {
    pub gains: Vec<T>,
    pub mu_db: T,
}

impl<T: Scalar> CsiVector<T> {
    pub fn len(&self) -> usize {
        self.gains.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `[|ĥ_1|, …, |ĥ_L|, μ]`.
    pub fn flatten(&self) -> Vec<T> {
        let mut v = self.gains.clone();
        v.push(self.mu_db);
        v
    }

    /// Gains reordered into sorted-rank order.
    pub fn permuted(&self, perm: &SubcarrierPermutation) -> Self {
        Self {
            gains: perm.apply(&self.gains),
            mu_db: self.mu_db,
        }
    }
}

pub fn build_csi_vector<T: Scalar>(gains: &[Complex<T>], mu_db: f64) -> CsiVector<T> {
    CsiVector {
        gains: gains.iter().map(|g| g.norm()).collect(),
        mu_db: T::of(mu_db),
    }
}

/// `forward[p]` is the subcarrier holding rank `p` (rank 0 = strongest);
/// `inverse[k]` is the rank of subcarrier `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubcarrierPermutation {
    forward: Vec<usize>,
    inverse: Vec<usize>,
}

impl SubcarrierPermutation {
    pub fn identity(n: usize) -> Self {
        Self {
            forward: (0..n).collect(),
            inverse: (0..n).collect(),
        }
    }

    pub fn from_forward(forward: Vec<usize>) -> Result<Self> {
        let n = forward.len();
        let mut inverse = vec![usize::MAX; n];
        for (p, &k) in forward.iter().enumerate() {
            if k >= n || inverse[k] != usize::MAX {
                return Err(Error::Config(format!("not a permutation of 0..{n}: {forward:?}")));
            }
            inverse[k] = p;
        }
        Ok(Self { forward, inverse })
    }

    pub fn forward(&self) -> &[usize] {
        &self.forward
    }

    pub fn inverse(&self) -> &[usize] {
        &self.inverse
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    /// `out[p] = x[forward[p]]`: subcarrier order to rank order.
    pub fn apply<V: Copy>(&self, x: &[V]) -> Vec<V> {
        self.forward.iter().map(|&k| x[k]).collect()
    }

    /// `out[k] = x[inverse[k]]`: rank order back to subcarrier order.
    pub fn apply_inverse<V: Copy>(&self, x: &[V]) -> Vec<V> {
        self.inverse.iter().map(|&p| x[p]).collect()
    }
}

/// Orders subcarriers by descending `|ĥ|²`, ties by ascending index.
pub fn sort_subcarriers<T: Scalar>(gains: &[Complex<T>]) -> SubcarrierPermutation {
    let power: Vec<T> = gains.iter().map(|g| g.norm_sqr()).collect();
    let mut forward: Vec<usize> = (0..gains.len()).collect();
    forward.sort_by(|&a, &b| {
        power[b]
            .partial_cmp(&power[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    SubcarrierPermutation::from_forward(forward).expect("sorted indices form a permutation")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ofdm::{complex_normal, pilot_block, sample_noise};
    use crate::rng::SeedStream;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> Complex<f64> {
        Complex::new(re, im)
    }

    fn observe(h: &[Complex<f64>], pilots: &ComplexGrid<f64>, noise: Option<&ComplexGrid<f64>>) -> ComplexGrid<f64> {
        ComplexGrid::from_fn(pilots.rows(), pilots.cols(), |i, k| {
            h[k] * pilots.get(i, k) + noise.map_or(c(0.0, 0.0), |w| w.get(i, k))
        })
    }

    #[test]
    fn noiseless_ls_is_exact() {
        let mut rng = SeedStream::new(1).rng("h", 0);
        let pilots = pilot_block::<f64>(2, 64).unwrap();
        let h: Vec<Complex<f64>> = (0..64).map(|_| complex_normal(&mut rng, 1.0)).collect();
        let est = ls_estimate(&observe(&h, &pilots, None), &pilots).unwrap();
        for (a, b) in est.iter().zip(&h) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn single_unit_pilot_passes_noise_through() {
        let pilots = ComplexGrid::filled(1, 4, c(1.0, 0.0));
        let rx = ComplexGrid::new(1, 4, vec![c(1.0, 2.0), c(0.5, 0.0), c(-1.0, 1.0), c(0.0, 0.0)]).unwrap();
        assert_eq!(ls_estimate(&rx, &pilots).unwrap(), rx.data().to_vec());
    }

    #[test]
    fn zero_pilot_rejected() {
        let pilots = ComplexGrid::<f64>::zeros(1, 4);
        assert!(matches!(ls_estimate(&pilots, &pilots), Err(Error::Estimation(_))));
    }

    #[test]
    fn mmse_shrinkage() {
        let pilots = ComplexGrid::filled(2, 1, c(1.0, 0.0));
        let rx = ComplexGrid::filled(2, 1, c(1.0, 0.0));
        let est = mmse_estimate(&rx, &pilots, 1.0).unwrap();
        assert!((est[0] - c(2.0 / 3.0, 0.0)).norm() < 1e-15);
        assert_eq!(mmse_estimate(&rx, &pilots, 0.0).unwrap(), ls_estimate(&rx, &pilots).unwrap());
        assert!(mmse_estimate(&rx, &pilots, -1.0).is_err());
    }

    #[test]
    fn ls_variance_monte_carlo() {
        // σ² = 0.1, N_p = 2 ⇒ E|ĥ_ls − H|² = σ²/N_p = 0.05.
        let s = SeedStream::new(99);
        let pilots = pilot_block::<f64>(2, 1).unwrap();
        let mut rng = s.rng("mc", 0);
        let trials = 10_000;
        let mut err = 0.0;
        for _ in 0..trials {
            let h = vec![complex_normal(&mut rng, 1.0)];
            let w = sample_noise(2, 1, 0.1, &mut rng);
            let est = ls_estimate(&observe(&h, &pilots, Some(&w)), &pilots).unwrap();
            err += (est[0] - h[0]).norm_sqr();
        }
        let mse = err / trials as f64;
        assert!((0.045..=0.055).contains(&mse), "{mse}");
    }

    #[test]
    fn mmse_beats_ls_at_5db() {
        let sigma2 = crate::ofdm::snr_to_sigma2(5.0, 1.0);
        let pilots = pilot_block::<f64>(2, 1).unwrap();
        let mut rng = SeedStream::new(5).rng("mc", 0);
        let (mut e_ls, mut e_mmse) = (0.0, 0.0);
        for _ in 0..10_000 {
            let h = vec![complex_normal(&mut rng, 1.0)];
            let w = sample_noise(2, 1, sigma2, &mut rng);
            let rx = observe(&h, &pilots, Some(&w));
            e_ls += (ls_estimate(&rx, &pilots).unwrap()[0] - h[0]).norm_sqr();
            e_mmse += (mmse_estimate(&rx, &pilots, sigma2).unwrap()[0] - h[0]).norm_sqr();
        }
        assert!(e_mmse / e_ls < 0.95, "{}", e_mmse / e_ls);
    }

    #[test]
    fn equalizer_cases() {
        let h = vec![c(0.5, -1.0), c(2.0, 0.3)];
        let y = ComplexGrid::from_fn(3, 2, |i, k| c(i as f64 + 1.0, -(k as f64)));
        let rx = ComplexGrid::from_fn(3, 2, |i, k| h[k] * y.get(i, k));
        let eq = mmse_equalize(&rx, &h, 0.0).unwrap();
        for (a, b) in eq.data().iter().zip(y.data()) {
            assert!((a - b).norm() < 1e-12);
        }

        let rx = ComplexGrid::filled(1, 1, c(2.0, 0.0));
        assert_eq!(mmse_equalize(&rx, &[c(1.0, 0.0)], 1.0).unwrap().get(0, 0), c(1.0, 0.0));
        assert!(matches!(mmse_equalize(&rx, &[c(0.0, 0.0)], 0.0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn csi_vector_layout() {
        let v = build_csi_vector(&[c(1.0, 0.0); 4], 10.0);
        assert_eq!(v.flatten(), vec![1.0, 1.0, 1.0, 1.0, 10.0]);
        assert_eq!(v.len(), 5);
        let z = build_csi_vector(&[c(0.0, 0.0); 3], 0.0);
        assert_eq!(z.flatten(), vec![0.0; 4]);
        assert_eq!(build_csi_vector(&[c(3.0, 4.0)], 0.0).gains[0], 5.0);
    }

    #[test]
    fn sorting_cases() {
        let desc = [c(3.0, 0.0), c(2.0, 0.0), c(1.0, 0.0)];
        assert_eq!(sort_subcarriers(&desc), SubcarrierPermutation::identity(3));
        let asc = [c(1.0, 0.0), c(2.0, 0.0), c(3.0, 0.0)];
        assert_eq!(sort_subcarriers(&asc).forward(), &[2, 1, 0]);
        let ties = [c(1.0, 0.0), c(0.0, 1.0), c(2.0, 0.0)];
        assert_eq!(sort_subcarriers(&ties).forward(), &[2, 0, 1]);
    }

    proptest! {
        #[test]
        fn sorted_gains_non_increasing(seed in any::<u64>(), n in 1usize..80) {
            let mut rng = SeedStream::new(seed).rng("g", 0);
            let gains: Vec<Complex<f64>> = (0..n).map(|_| complex_normal(&mut rng, 1.0)).collect();
            let perm = sort_subcarriers(&gains);
            let sorted = perm.apply(&gains.iter().map(|g| g.norm_sqr()).collect::<Vec<_>>());
            let mut oracle: Vec<f64> = gains.iter().map(|g| g.norm_sqr()).collect();
            oracle.sort_by(|a, b| b.partial_cmp(a).unwrap());
            prop_assert_eq!(sorted, oracle);
        }

        #[test]
        fn permutation_roundtrip(seed in any::<u64>(), n in 1usize..80) {
            let mut rng = SeedStream::new(seed).rng("g", 1);
            let gains: Vec<Complex<f64>> = (0..n).map(|_| complex_normal(&mut rng, 1.0)).collect();
            let perm = sort_subcarriers(&gains);
            let x: Vec<usize> = (0..n).map(|i| i * 7 + 1).collect();
            prop_assert_eq!(perm.apply_inverse(&perm.apply(&x)), x.clone());
            prop_assert_eq!(perm.apply(&perm.apply_inverse(&x)), x);
        }
    }
}
