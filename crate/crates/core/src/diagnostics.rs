//! Finite-difference gradient suite over every tape operation and the full
//! encode, channel, equalize, decode, MSE chain.

use num_complex::Complex;
use rand::Rng;

use crate::csi::EstimatorKind;
use crate::error::Result;
use crate::model::{channel_attention, spatial_attention, AttentionVars, Mode, Model, ModelConfig};
use crate::ofdm::{pilot_block, sample_noise, OfdmConfig};
use crate::rng::SeedStream;
use crate::tensor::{
    central_difference, finite_difference_check, max_relative_error, BatchNormMode, GradCheck, Tape, Tensor, Var,
};
use crate::train::{chain_loss, sound_channel};

pub const GRADCHECK_EPS: f64 = 1e-6;
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: String,
    pub check: GradCheck,
}

impl SuiteEntry {
    pub fn passes(&self) -> bool {
        self.check.passes(GRADCHECK_TOL)
    }
}

struct Suite {
    seeds: SeedStream,
    counter: u64,
    entries: Vec<SuiteEntry>,
}

impl Suite {
    fn random(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        self.counter += 1;
        let mut rng = self.seeds.rng("tensor", self.counter);
        Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
    }

    /// Projects onto random weights so that every output coordinate matters.
    fn run<F>(&mut self, name: &str, point: Tensor<f64>, f: F) -> Result<()>
    where
        F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
    {
        self.counter += 1;
        let mut rng = self.seeds.rng("projection", self.counter);
        let weights: Vec<f64> = (0..4096).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let check = finite_difference_check(
            |tape, x| {
                let y = f(tape, x)?;
                let n = tape.value(y).numel();
                if n == 1 {
                    Ok(y)
                } else {
                    tape.weighted_sum(y, &weights[..n])
                }
            },
            &point,
            GRADCHECK_EPS,
        )?;
        self.entries.push(SuiteEntry {
            name: name.to_string(),
            check,
        });
        Ok(())
    }
}

/// Runs every check; the caller decides what to do with failures.
pub fn gradient_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut s = Suite {
        seeds: SeedStream::new(seed),
        counter: 0,
        entries: Vec::new(),
    };

    let x = s.random(&[3, 5], -1.0, 1.0);
    let w = s.random(&[4, 5], -1.0, 1.0);
    let b = s.random(&[4], -1.0, 1.0);
    s.run("fully_connected/x", x.clone(), |t, v| {
        let (w, b) = (t.constant(w.clone()), t.constant(b.clone()));
        t.fully_connected(v, w, b)
    })?;
    s.run("fully_connected/w", w.clone(), |t, v| {
        let (x, b) = (t.constant(x.clone()), t.constant(b.clone()));
        t.fully_connected(x, v, b)
    })?;
    s.run("fully_connected/b", b.clone(), |t, v| {
        let (x, w) = (t.constant(x.clone()), t.constant(w.clone()));
        t.fully_connected(x, w, v)
    })?;

    let x = s.random(&[2, 2, 5, 5], -1.0, 1.0);
    let w = s.random(&[3, 2, 3, 3], -1.0, 1.0);
    let b = s.random(&[3], -1.0, 1.0);
    s.run("conv2d/x", x.clone(), |t, v| {
        let (w, b) = (t.constant(w.clone()), t.constant(b.clone()));
        t.conv2d(v, w, b, 2, 1)
    })?;
    s.run("conv2d/w", w.clone(), |t, v| {
        let (x, b) = (t.constant(x.clone()), t.constant(b.clone()));
        t.conv2d(x, v, b, 2, 1)
    })?;
    s.run("conv2d/b", b.clone(), |t, v| {
        let (x, w) = (t.constant(x.clone()), t.constant(w.clone()));
        t.conv2d(x, w, v, 2, 1)
    })?;

    let x = s.random(&[2, 3, 3, 3], -1.0, 1.0);
    let w = s.random(&[3, 2, 3, 3], -1.0, 1.0);
    let b = s.random(&[2], -1.0, 1.0);
    s.run("conv_transpose2d/x", x.clone(), |t, v| {
        let (w, b) = (t.constant(w.clone()), t.constant(b.clone()));
        t.conv_transpose2d(v, w, b, 2, 1, 1)
    })?;
    s.run("conv_transpose2d/w", w.clone(), |t, v| {
        let (x, b) = (t.constant(x.clone()), t.constant(b.clone()));
        t.conv_transpose2d(x, v, b, 2, 1, 1)
    })?;
    s.run("conv_transpose2d/b", b.clone(), |t, v| {
        let (x, w) = (t.constant(x.clone()), t.constant(w.clone()));
        t.conv_transpose2d(x, w, v, 2, 1, 1)
    })?;

    let x = s.random(&[3, 2, 2, 2], -2.0, 2.0);
    let g = s.random(&[2], 0.5, 1.5);
    let be = s.random(&[2], -0.5, 0.5);
    let (mean, var) = (vec![0.1, -0.2], vec![0.8, 1.3]);
    s.run("batch_norm_train/x", x.clone(), |t, v| {
        let (g, be) = (t.constant(g.clone()), t.constant(be.clone()));
        t.batch_norm(v, g, be, BatchNormMode::Train)
    })?;
    s.run("batch_norm_train/gamma", g.clone(), |t, v| {
        let (x, be) = (t.constant(x.clone()), t.constant(be.clone()));
        t.batch_norm(x, v, be, BatchNormMode::Train)
    })?;
    s.run("batch_norm_train/beta", be.clone(), |t, v| {
        let (x, g) = (t.constant(x.clone()), t.constant(g.clone()));
        t.batch_norm(x, g, v, BatchNormMode::Train)
    })?;
    s.run("batch_norm_eval/x", x.clone(), |t, v| {
        let (g, be) = (t.constant(g.clone()), t.constant(be.clone()));
        t.batch_norm(v, g, be, BatchNormMode::Eval { mean: &mean, var: &var })
    })?;

    let x = s.random(&[2, 3, 2, 2], -1.0, 1.0);
    let a = Tensor::full(&[1], 0.25);
    s.run("prelu/x", x.clone(), |t, v| {
        let a = t.constant(a.clone());
        t.prelu(v, a)
    })?;
    s.run("prelu/slope", a.clone(), |t, v| {
        let x = t.constant(x.clone());
        t.prelu(x, v)
    })?;
    s.run("avg_pool_channelwise", x.clone(), |t, v| t.avg_pool_channelwise(v))?;
    s.run("avg_pool_spatial", x.clone(), |t, v| t.avg_pool_spatial(v))?;
    s.run("sigmoid", x.clone(), |t, v| t.sigmoid(v))?;
    s.run("reshape", x.clone(), |t, v| t.reshape(v, &[2, 12]))?;

    let ca = s.random(&[2, 3], -1.0, 1.0);
    let sa = s.random(&[2, 2, 2], -1.0, 1.0);
    s.run("mul_mask_channel/x", x.clone(), |t, v| {
        let m = t.constant(ca.clone());
        t.mul_mask(v, m)
    })?;
    s.run("mul_mask_channel/mask", ca.clone(), |t, v| {
        let f = t.constant(x.clone());
        t.mul_mask(f, v)
    })?;
    s.run("mul_mask_spatial/x", x.clone(), |t, v| {
        let m = t.constant(sa.clone());
        t.mul_mask(v, m)
    })?;
    s.run("mul_mask_spatial/mask", sa.clone(), |t, v| {
        let f = t.constant(x.clone());
        t.mul_mask(f, v)
    })?;

    let p = s.random(&[2, 4], -1.0, 1.0);
    let q = s.random(&[2, 3], -1.0, 1.0);
    s.run("concat/a", p.clone(), |t, v| {
        let q = t.constant(q.clone());
        t.concat(v, q, 1)
    })?;
    s.run("concat/b", q.clone(), |t, v| {
        let p = t.constant(p.clone());
        t.concat(p, v, 1)
    })?;

    let z = s.random(&[2, 2, 3, 4], -1.0, 1.0);
    let index = vec![vec![2, 0, 3, 1], vec![1, 3, 0, 2]];
    s.run("gather_last", z.clone(), |t, v| t.gather_last(v, &index))?;
    s.run("power_normalize", z.clone(), |t, v| t.power_normalize(v, 12.0))?;
    let coef: Vec<Complex<f64>> = (0..8)
        .map(|i| Complex::new((i as f64 * 0.7).cos(), (i as f64 * 1.3).sin()))
        .collect();
    let offset = s.random(&[48], -0.3, 0.3).into_data();
    s.run("complex_affine", z.clone(), |t, v| t.complex_affine(v, &coef, Some(&offset)))?;
    let target = s.random(&[2, 2, 3, 4], 0.0, 1.0);
    s.run("mse", z.clone(), |t, v| t.mse(v, &target))?;
    s.run("weighted_sum", z.clone(), |t, v| t.weighted_sum(v, &[0.5; 48]))?;

    attention_checks(&mut s)?;
    full_chain_checks(&mut s, seed)?;
    Ok(s.entries)
}

fn attention_checks(s: &mut Suite) -> Result<()> {
    let x = s.random(&[2, 3, 2, 2], -1.0, 1.0);
    let csi = s.random(&[2, 5], 0.0, 2.0);
    let ca: Vec<Tensor<f64>> = vec![
        s.random(&[4, 8], -0.5, 0.5),
        s.random(&[4], -0.5, 0.5),
        Tensor::full(&[1], 0.25),
        s.random(&[3, 4], -0.5, 0.5),
        s.random(&[3], 0.5, 1.5),
    ];
    let sa: Vec<Tensor<f64>> = vec![
        s.random(&[5, 9], -0.5, 0.5),
        s.random(&[5], -0.5, 0.5),
        Tensor::full(&[1], 0.25),
        s.random(&[4, 5], -0.5, 0.5),
        s.random(&[4], 0.5, 1.5),
    ];
    let vars = |t: &mut Tape<f64>, p: &[Tensor<f64>]| AttentionVars {
        w1: t.constant(p[0].clone()),
        b1: t.constant(p[1].clone()),
        slope: t.constant(p[2].clone()),
        w2: t.constant(p[3].clone()),
        b2: t.constant(p[4].clone()),
    };
    s.run("channel_attention/x", x.clone(), |t, v| {
        let c = t.constant(csi.clone());
        let a = vars(t, &ca);
        channel_attention(t, v, c, a)
    })?;
    s.run("spatial_attention/x", x.clone(), |t, v| {
        let c = t.constant(csi.clone());
        let a = vars(t, &sa);
        spatial_attention(t, v, c, a)
    })?;
    s.run("channel_attention/w1", ca[0].clone(), |t, v| {
        let (f, c) = (t.constant(x.clone()), t.constant(csi.clone()));
        let a = AttentionVars { w1: v, ..vars(t, &ca) };
        channel_attention(t, f, c, a)
    })?;
    s.run("spatial_attention/w2", sa[3].clone(), |t, v| {
        let (f, c) = (t.constant(x.clone()), t.constant(csi.clone()));
        let a = AttentionVars { w2: v, ..vars(t, &sa) };
        spatial_attention(t, f, c, a)
    })?;
    Ok(())
}

/// Tiny model (1×8×8 images, L_f = 16, N_s = 2), batch of two, MMSE
/// estimation at 10 dB.
fn full_chain_checks(s: &mut Suite, seed: u64) -> Result<()> {
    let seeds = SeedStream::new(seed).child("chain");
    let model = Model::<f64>::new(ModelConfig::tiny(), &mut seeds.rng("init", 0))?;
    let ofdm = OfdmConfig {
        subcarriers: 16,
        symbols: 2,
        ..OfdmConfig::default()
    };
    let pilots = pilot_block::<f64>(ofdm.pilots, ofdm.subcarriers)?;
    let mut links = Vec::new();
    let mut noise = Vec::new();
    for b in 0..2 {
        let mut rng = seeds.rng("channel", b);
        let link = sound_channel(&ofdm, &pilots, EstimatorKind::Mmse, 10.0, &mut rng)?;
        noise.push(sample_noise(ofdm.symbols, ofdm.subcarriers, link.noise.sigma2, &mut rng));
        links.push(link);
    }
    let image = s.random(&[2, 1, 8, 8], 0.0, 1.0);

    s.run("full_chain/image", image.clone(), |t, v| {
        let mut pass = model.begin(t, Mode::Train);
        chain_loss(&model, t, &mut pass, v, &image, &links, &noise)
    })?;

    // Parameters: a spread of coordinates from every tensor.
    let loss_at = |m: &Model<f64>| -> Result<(f64, Option<Vec<f64>>)> {
        let mut tape = Tape::new();
        let mut pass = m.begin(&mut tape, Mode::Train);
        let x = tape.constant(image.clone());
        let loss = chain_loss(m, &mut tape, &mut pass, x, &image, &links, &noise)?;
        let value = tape.value(loss).data()[0];
        tape.backward(loss)?;
        let mut grads = m.params().clone();
        grads.collect_grads(&tape, pass.bindings())?;
        Ok((value, grads.flat_grads()))
    };
    let (_, grads) = loss_at(&model)?;
    let grads = grads.ok_or_else(|| crate::error::Error::Training("a parameter received no gradient".into()))?;
    let mut coords = Vec::new();
    let mut offset = 0;
    for p in model.params().iter() {
        let n = p.tensor.numel();
        coords.extend([0, n / 2, n - 1].into_iter().map(|i| offset + i));
        offset += n;
    }
    coords.dedup();
    let base = model.params().flatten();
    let point: Vec<f64> = coords.iter().map(|&c| base[c]).collect();
    let numeric = central_difference(
        |vals| {
            let mut flat = base.clone();
            for (&c, &v) in coords.iter().zip(vals) {
                flat[c] = v;
            }
            let mut m = model.clone();
            m.params_mut().assign_flat(&flat)?;
            Ok(loss_at(&m)?.0)
        },
        &point,
        GRADCHECK_EPS,
    )?;
    let analytic: Vec<f64> = coords.iter().map(|&c| grads[c]).collect();
    let (max_rel_error, worst_index) = max_relative_error(&analytic, &numeric);
    s.entries.push(SuiteEntry {
        name: "full_chain/parameters".into(),
        check: GradCheck {
            max_rel_error,
            worst_index,
            analytic,
            numeric,
        },
    });
    Ok(())
}
