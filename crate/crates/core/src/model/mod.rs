//! Channel-adaptive encoder/decoder: five FL stages interleaved with four CL
//! (attention) modules on each side, plus the symbol-to-subcarrier mapping.

mod blocks;

pub use blocks::{channel_attention, fl_block, spatial_attention, AttentionVars, Direction, FlOutput, FlVars};

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::str::FromStr;

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use sha2::{Digest, Sha256};

use crate::csi::{build_csi_vector, sort_subcarriers, CsiVector, SubcarrierPermutation};
use crate::error::{Error, Result};
use crate::ofdm::ComplexGrid;
use crate::scalar::Scalar;
use crate::tensor::{
    read_checkpoint, write_checkpoint, BatchNormMode, BatchNormState, Bindings, Checkpoint, ConvGeometry,
    NamedArray, ParameterSet, Tape, Tensor, Var,
};

/// Number of FL stages per side; there is one CL module fewer.
pub const STAGES: usize = 5;

const PRELU_INIT: f64 = 0.25;
const MU_SCALE: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Variant {
    /// Channel-wise then spatial attention in every CL module.
    #[default]
    Dual,
    /// Channel-wise attention only.
    ChannelOnly,
    /// CL modules are identities and no subcarrier sorting happens; the
    /// transmitter is blind to CSI.
    None,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dual" => Ok(Variant::Dual),
            "channel-only" => Ok(Variant::ChannelOnly),
            "none" => Ok(Variant::None),
            other => Err(Error::Config(format!(
                "unknown model variant {other:?} (expected dual|channel-only|none)"
            ))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Dual => "dual",
            Variant::ChannelOnly => "channel-only",
            Variant::None => "none",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// L_f; must be a perfect square so the last feature map tiles it.
    pub subcarriers: usize,
    /// N_s.
    pub symbols: usize,
    /// Output channels of the five encoder stages; the last is `2·N_s`.
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
    pub padding: usize,
    /// Hidden width of each attention stack is `ceil(input / reduction)`.
    pub attention_reduction: usize,
    pub variant: Variant,
    /// Per-symbol power after normalization.
    pub power: f64,
}

impl ModelConfig {
    /// 3×32×32 images on 64 subcarriers.
    pub fn cifar(symbols: usize) -> Self {
        Self {
            channels: 3,
            height: 32,
            width: 32,
            subcarriers: 64,
            symbols,
            widths: vec![64, 128, 128, 128, 2 * symbols],
            strides: vec![2, 2, 1, 1, 1],
            kernel: 3,
            padding: 1,
            attention_reduction: 2,
            variant: Variant::Dual,
            power: 1.0,
        }
    }

    /// 1×8×8 images on 16 subcarriers with two symbols.
    pub fn toy() -> Self {
        Self {
            channels: 1,
            height: 8,
            width: 8,
            subcarriers: 16,
            symbols: 2,
            widths: vec![16, 16, 16, 16, 4],
            strides: vec![2, 1, 1, 1, 1],
            kernel: 3,
            padding: 1,
            attention_reduction: 2,
            variant: Variant::Dual,
            power: 1.0,
        }
    }

    /// The toy geometry with four channels per stage, small enough for
    /// whole-model gradient checks.
    pub fn tiny() -> Self {
        Self {
            widths: vec![4, 4, 4, 4, 4],
            ..Self::toy()
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn pixels(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// `R = N_s·L_f / (c·h·w)`.
    pub fn bandwidth_ratio(&self) -> f64 {
        (self.symbols * self.subcarriers) as f64 / self.pixels() as f64
    }

    /// `√L_f`, the side of the last encoder feature map.
    pub fn grid_side(&self) -> Option<usize> {
        let s = (self.subcarriers as f64).sqrt().round() as usize;
        (s * s == self.subcarriers).then_some(s)
    }

    /// `(c,h,w)` at the input and after each encoder stage.
    pub fn stage_shapes(&self) -> Result<Vec<[usize; 3]>> {
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("model.image dimensions must be positive".into()));
        }
        if self.widths.len() != STAGES || self.strides.len() != STAGES {
            return Err(Error::Config(format!(
                "model.widths and model.strides need {STAGES} entries, got {} and {}",
                self.widths.len(),
                self.strides.len()
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config("model.widths entries must be positive".into()));
        }
        let mut shapes = vec![self.image_shape()];
        for (&c, &s) in self.widths.iter().zip(&self.strides) {
            let [_, h, w] = *shapes.last().expect("non-empty");
            let h = ConvGeometry::conv_output_len(h, self.kernel, s, self.padding)?;
            let w = ConvGeometry::conv_output_len(w, self.kernel, s, self.padding)?;
            shapes.push([c, h, w]);
        }
        Ok(shapes)
    }

    /// Output padding of the decoder stage mirroring each encoder stage.
    pub fn output_paddings(&self) -> Result<Vec<usize>> {
        let shapes = self.stage_shapes()?;
        (0..STAGES)
            .map(|i| {
                let [_, h_in, w_in] = shapes[i];
                let [_, h_out, w_out] = shapes[i + 1];
                let s = self.strides[i];
                let pad = |src: usize, dst: usize| -> Result<usize> {
                    let base = ConvGeometry::conv_transpose_output_len(dst, self.kernel, s, self.padding, 0)?;
                    match src.checked_sub(base) {
                        Some(op) if op < s => Ok(op),
                        _ => Err(Error::Config(format!(
                            "decoder stage mirroring encoder stage {} cannot restore size {src} from {dst}",
                            i + 1
                        ))),
                    }
                };
                let (ph, pw) = (pad(h_in, h_out)?, pad(w_in, w_out)?);
                if ph != pw {
                    return Err(Error::Config("non-square stages need distinct output paddings".into()));
                }
                Ok(ph)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.symbols == 0 || self.subcarriers == 0 {
            return Err(Error::Config("ofdm.n_s and ofdm.l_f must be positive".into()));
        }
        if self.kernel == 0 {
            return Err(Error::Config("model.kernel must be positive".into()));
        }
        if self.attention_reduction == 0 {
            return Err(Error::Config("attention reduction must be positive".into()));
        }
        if !(self.power > 0.0) {
            return Err(Error::Config("ofdm.power must be positive".into()));
        }
        let side = self
            .grid_side()
            .ok_or_else(|| Error::Config(format!("ofdm.l_f = {} is not a perfect square", self.subcarriers)))?;
        let shapes = self.stage_shapes()?;
        let last = shapes[STAGES];
        if last[0] != 2 * self.symbols {
            return Err(Error::Config(format!(
                "last model.widths entry must be 2·n_s = {}, got {}",
                2 * self.symbols,
                last[0]
            )));
        }
        if last[1] != side || last[2] != side {
            return Err(Error::Config(format!(
                "encoder output is {}x{} but ofdm.l_f = {} needs {side}x{side}",
                last[1], last[2], self.subcarriers
            )));
        }
        self.output_paddings()?;
        Ok(())
    }

    /// Stable text form of every architecture-determining field.
    pub fn canonical(&self) -> String {
        format!(
            "image={}x{}x{};l_f={};n_s={};widths={:?};strides={:?};kernel={};padding={};reduction={};variant={};power={}",
            self.channels,
            self.height,
            self.width,
            self.subcarriers,
            self.symbols,
            self.widths,
            self.strides,
            self.kernel,
            self.padding,
            self.attention_reduction,
            self.variant,
            self.power
        )
    }

    /// First eight bytes (little-endian) of the SHA-256 of [`Self::canonical`].
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.canonical().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

/// Estimated CSI for one transmission together with its subcarrier order.
#[derive(Debug, Clone, PartialEq)]
pub struct SideInfo<T> {
    pub csi: CsiVector<T>,
    pub perm: SubcarrierPermutation,
}

impl<T: Scalar> SideInfo<T> {
    pub fn new(gains: &[Complex<T>], mu_db: f64) -> Self {
        Self {
            csi: build_csi_vector(gains, mu_db),
            perm: sort_subcarriers(gains),
        }
    }

    /// Input to the attention stacks: gains in sorted order, then `μ/20`.
    pub fn features(&self) -> Vec<T> {
        let mut v = self.perm.apply(&self.csi.gains);
        v.push(self.csi.mu_db / T::of(MU_SCALE));
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; they are recorded for the running averages.
    Train,
    /// Running statistics.
    Eval,
}

/// One forward pass in progress: parameter bindings plus the batch-norm
/// nodes whose statistics are folded in afterwards.
#[derive(Debug, Clone)]
pub struct Pass {
    mode: Mode,
    bindings: Bindings,
    bn_nodes: Vec<(usize, Var, usize)>,
}

impl Pass {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn bindings(&self) -> &Bindings {
        &self.bindings
    }
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: usize,
    beta: usize,
    slope: usize,
    bn: usize,
}

#[derive(Debug, Clone, Copy)]
struct Stage {
    weight: usize,
    bias: usize,
    norm: Option<Norm>,
    stride: usize,
    direction: Direction,
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    w1: usize,
    b1: usize,
    slope: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, Copy, Default)]
struct ClModule {
    channel: Option<Attention>,
    spatial: Option<Attention>,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParameterSet<T>,
    bn: Vec<(String, BatchNormState<T>)>,
    encoder: Vec<Stage>,
    decoder: Vec<Stage>,
    enc_cl: Vec<ClModule>,
    dec_cl: Vec<ClModule>,
}

struct Builder<'r, T, R: ?Sized> {
    rng: &'r mut R,
    params: ParameterSet<T>,
    bn: Vec<(String, BatchNormState<T>)>,
}

impl<T: Scalar, R: Rng + ?Sized> Builder<'_, T, R> {
    /// Kaiming-uniform with the gain of a PReLU at its initial slope.
    fn kaiming(&mut self, name: String, shape: &[usize], fan_in: usize) -> Result<usize> {
        let gain = (2.0 / (1.0 + PRELU_INIT * PRELU_INIT)).sqrt();
        let bound = gain * (3.0 / fan_in as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| T::of(self.rng.gen_range(-bound..=bound)));
        self.params.add(name, t)
    }

    fn filled(&mut self, name: String, shape: &[usize], value: f64) -> Result<usize> {
        self.params.add(name, Tensor::full(shape, T::of(value)))
    }

    fn norm(&mut self, prefix: &str, c: usize) -> Result<Norm> {
        let gamma = self.filled(format!("{prefix}.bn.gamma"), &[c], 1.0)?;
        let beta = self.filled(format!("{prefix}.bn.beta"), &[c], 0.0)?;
        let slope = self.filled(format!("{prefix}.prelu"), &[1], PRELU_INIT)?;
        self.bn.push((format!("{prefix}.bn"), BatchNormState::identity(c)));
        Ok(Norm {
            gamma,
            beta,
            slope,
            bn: self.bn.len() - 1,
        })
    }

    fn attention(&mut self, prefix: &str, n_in: usize, n_out: usize, reduction: usize) -> Result<Attention> {
        let hidden = n_in.div_ceil(reduction);
        Ok(Attention {
            w1: self.kaiming(format!("{prefix}.fc1.w"), &[hidden, n_in], n_in)?,
            b1: self.filled(format!("{prefix}.fc1.b"), &[hidden], 0.0)?,
            slope: self.filled(format!("{prefix}.prelu"), &[1], PRELU_INIT)?,
            w2: self.kaiming(format!("{prefix}.fc2.w"), &[n_out, hidden], hidden)?,
            b2: self.filled(format!("{prefix}.fc2.b"), &[n_out], 1.0)?,
        })
    }

    fn cl(&mut self, prefix: &str, shape: [usize; 3], csi_len: usize, cfg: &ModelConfig) -> Result<ClModule> {
        let [c, h, w] = shape;
        let r = cfg.attention_reduction;
        Ok(match cfg.variant {
            Variant::Dual => ClModule {
                channel: Some(self.attention(&format!("{prefix}.ca"), c + csi_len, c, r)?),
                spatial: Some(self.attention(&format!("{prefix}.sa"), h * w + csi_len, h * w, r)?),
            },
            Variant::ChannelOnly => ClModule {
                channel: Some(self.attention(&format!("{prefix}.ca"), c + csi_len, c, r)?),
                spatial: None,
            },
            Variant::None => ClModule::default(),
        })
    }
}

impl<T: Scalar> Model<T> {
    /// Builds and randomly initializes a model.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let shapes = config.stage_shapes()?;
        let paddings = config.output_paddings()?;
        let k = config.kernel;
        let csi_len = config.subcarriers + 1;
        let mut b = Builder {
            rng,
            params: ParameterSet::new(),
            bn: Vec::new(),
        };

        let mut encoder = Vec::new();
        let mut enc_cl = Vec::new();
        for i in 0..STAGES {
            let prefix = format!("enc.fl{}", i + 1);
            let (c_in, c_out) = (shapes[i][0], shapes[i + 1][0]);
            let weight = b.kaiming(format!("{prefix}.conv.w"), &[c_out, c_in, k, k], c_in * k * k)?;
            let bias = b.filled(format!("{prefix}.conv.b"), &[c_out], 0.0)?;
            let norm = Some(b.norm(&prefix, c_out)?);
            encoder.push(Stage {
                weight,
                bias,
                norm,
                stride: config.strides[i],
                direction: Direction::Down,
            });
            if i + 1 < STAGES {
                enc_cl.push(b.cl(&format!("enc.cl{}", i + 1), shapes[i + 1], csi_len, &config)?);
            }
        }

        let mut decoder = Vec::new();
        let mut dec_cl = Vec::new();
        for j in 0..STAGES {
            let mirror = STAGES - 1 - j;
            let prefix = format!("dec.fl{}", j + 1);
            let (c_in, c_out) = (shapes[mirror + 1][0], shapes[mirror][0]);
            let weight = b.kaiming(format!("{prefix}.tconv.w"), &[c_in, c_out, k, k], c_out * k * k)?;
            let bias = b.filled(format!("{prefix}.tconv.b"), &[c_out], 0.0)?;
            let norm = if j + 1 < STAGES { Some(b.norm(&prefix, c_out)?) } else { None };
            decoder.push(Stage {
                weight,
                bias,
                norm,
                stride: config.strides[mirror],
                direction: Direction::Up {
                    output_padding: paddings[mirror],
                },
            });
            if j + 1 < STAGES {
                dec_cl.push(b.cl(&format!("dec.cl{}", j + 1), shapes[mirror], csi_len, &config)?);
            }
        }

        Ok(Self {
            config,
            params: b.params,
            bn: b.bn,
            encoder,
            decoder,
            enc_cl,
            dec_cl,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet<T> {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.numel()
    }

    pub fn batch_norms(&self) -> impl Iterator<Item = (&str, &BatchNormState<T>)> {
        self.bn.iter().map(|(n, s)| (n.as_str(), s))
    }

    /// Sets every attention output layer to weight 0, bias 1, so all masks
    /// are exactly one.
    pub fn force_identity_attention(&mut self) {
        let layers: Vec<Attention> = self
            .enc_cl
            .iter()
            .chain(&self.dec_cl)
            .flat_map(|m| m.channel.into_iter().chain(m.spatial))
            .collect();
        for a in layers {
            self.params.get_mut(a.w2).tensor.data_mut().fill(T::zero());
            self.params.get_mut(a.b2).tensor.data_mut().fill(T::one());
        }
    }

    /// Copies every parameter and batch-norm state whose name also exists in
    /// `other`. Returns the number of parameters copied.
    pub fn copy_matching(&mut self, other: &Model<T>) -> Result<usize> {
        let mut copied = 0;
        for p in self.params.iter_mut() {
            if let Some(src) = other.params.by_name(&p.name) {
                if src.tensor.shape() != p.tensor.shape() {
                    return Err(Error::shape(
                        format!("parameter {}", p.name),
                        format!("{:?}", p.tensor.shape()),
                        format!("{:?}", src.tensor.shape()),
                    ));
                }
                p.tensor.data_mut().copy_from_slice(src.tensor.data());
                copied += 1;
            }
        }
        for (name, state) in &mut self.bn {
            if let Some((_, src)) = other.bn.iter().find(|(n, _)| n == name) {
                *state = src.clone();
            }
        }
        Ok(copied)
    }

    pub fn begin(&self, tape: &mut Tape<T>, mode: Mode) -> Pass {
        Pass {
            mode,
            bindings: self.params.bind(tape),
            bn_nodes: Vec::new(),
        }
    }

    fn run_stage(&self, tape: &mut Tape<T>, pass: &mut Pass, x: Var, st: &Stage) -> Result<Var> {
        let b = &pass.bindings;
        let vars = FlVars {
            weight: b.get(st.weight),
            bias: b.get(st.bias),
            norm: st.norm.map(|n| (b.get(n.gamma), b.get(n.beta), b.get(n.slope))),
        };
        let mode = match (pass.mode, st.norm) {
            (Mode::Eval, Some(n)) => {
                let (mean, var) = self.bn[n.bn].1.eval_stats()?;
                BatchNormMode::Eval { mean, var }
            }
            _ => BatchNormMode::Train,
        };
        let out = fl_block(tape, x, vars, st.direction, st.stride, self.config.padding, mode)?;
        if let (Mode::Train, Some(n), Some(node)) = (pass.mode, st.norm, out.normalized) {
            let s = tape.shape(node);
            pass.bn_nodes.push((n.bn, node, s[0] * s[2] * s[3]));
        }
        Ok(out.output)
    }

    fn run_cl(&self, tape: &mut Tape<T>, pass: &Pass, x: Var, csi: Var, m: &ClModule) -> Result<Var> {
        let b = &pass.bindings;
        let vars = |a: Attention| AttentionVars {
            w1: b.get(a.w1),
            b1: b.get(a.b1),
            slope: b.get(a.slope),
            w2: b.get(a.w2),
            b2: b.get(a.b2),
        };
        let mut y = x;
        if let Some(a) = m.channel {
            y = channel_attention(tape, y, csi, vars(a))?;
        }
        if let Some(a) = m.spatial {
            y = spatial_attention(tape, y, csi, vars(a))?;
        }
        Ok(y)
    }

    fn check_side(&self, side: &[SideInfo<T>], batch: usize) -> Result<()> {
        if side.len() != batch {
            return Err(Error::shape("side information count", batch, side.len()));
        }
        for s in side {
            if s.csi.gains.len() != self.config.subcarriers || s.perm.len() != self.config.subcarriers {
                return Err(Error::shape("csi length", self.config.subcarriers + 1, s.csi.len()));
            }
        }
        Ok(())
    }

    fn csi_input(&self, tape: &mut Tape<T>, side: &[SideInfo<T>]) -> Result<Var> {
        let data: Vec<T> = side.iter().flat_map(|s| s.features()).collect();
        Ok(tape.constant(Tensor::new(&[side.len(), self.config.subcarriers + 1], data)?))
    }

    fn sorts(&self) -> bool {
        self.config.variant != Variant::None
    }

    /// Images `[n,c,h,w]` to normalized channel symbols `[n,2,N_s,L_f]` in
    /// subcarrier order (`[:,0]` real, `[:,1]` imaginary).
    pub fn encode_graph(&self, tape: &mut Tape<T>, pass: &mut Pass, x: Var, side: &[SideInfo<T>]) -> Result<Var> {
        let cfg = &self.config;
        let xs = tape.shape(x).to_vec();
        if xs.len() != 4 || xs[1..] != cfg.image_shape() {
            return Err(Error::shape(
                "encoder input",
                format!("[n,{},{},{}]", cfg.channels, cfg.height, cfg.width),
                format!("{xs:?}"),
            ));
        }
        let n = xs[0];
        self.check_side(side, n)?;
        let csi = self.csi_input(tape, side)?;
        let mut y = x;
        for i in 0..STAGES {
            y = self.run_stage(tape, pass, y, &self.encoder[i])?;
            if i + 1 < STAGES {
                y = self.run_cl(tape, pass, y, csi, &self.enc_cl[i])?;
            }
        }
        let mut y = tape.reshape(y, &[n, 2, cfg.symbols, cfg.subcarriers])?;
        if self.sorts() {
            let index: Vec<Vec<usize>> = side.iter().map(|s| s.perm.inverse().to_vec()).collect();
            y = tape.gather_last(y, &index)?;
        }
        let energy = T::of(cfg.power * (cfg.symbols * cfg.subcarriers) as f64);
        tape.power_normalize(y, energy)
    }

    /// Equalized symbols `[n,2,N_s,L_f]` in subcarrier order back to images.
    pub fn decode_graph(&self, tape: &mut Tape<T>, pass: &mut Pass, y: Var, side: &[SideInfo<T>]) -> Result<Var> {
        let cfg = &self.config;
        let ys = tape.shape(y).to_vec();
        if ys.len() != 4 || ys[1..] != [2, cfg.symbols, cfg.subcarriers] {
            return Err(Error::shape(
                "decoder input",
                format!("[n,2,{},{}]", cfg.symbols, cfg.subcarriers),
                format!("{ys:?}"),
            ));
        }
        let n = ys[0];
        self.check_side(side, n)?;
        let csi = self.csi_input(tape, side)?;
        let mut z = y;
        if self.sorts() {
            let index: Vec<Vec<usize>> = side.iter().map(|s| s.perm.forward().to_vec()).collect();
            z = tape.gather_last(z, &index)?;
        }
        let s = cfg.grid_side().expect("validated");
        let mut z = tape.reshape(z, &[n, 2 * cfg.symbols, s, s])?;
        for j in 0..STAGES {
            z = self.run_stage(tape, pass, z, &self.decoder[j])?;
            if j + 1 < STAGES {
                z = self.run_cl(tape, pass, z, csi, &self.dec_cl[j])?;
            }
        }
        Ok(z)
    }

    /// Folds the batch statistics recorded during a training pass into the
    /// running averages.
    pub fn absorb_statistics(&mut self, tape: &Tape<T>, pass: &Pass) {
        for &(bn, node, count) in &pass.bn_nodes {
            if let Some((mean, var)) = tape.batch_statistics(node) {
                self.bn[bn].1.update(mean, var, count);
            }
        }
    }

    fn batch_images(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let [c, h, w] = self.config.image_shape();
        match images.shape() {
            [n, ..] if images.rank() == 4 => images.clone().reshape(&[*n, c, h, w]),
            _ if images.rank() == 3 => images.clone().reshape(&[1, c, h, w]),
            s => Err(Error::shape("image rank", "3 or 4", s.len())),
        }
    }

    /// Inference-mode encoding, one grid per image.
    pub fn encode(&self, images: &Tensor<T>, side: &[SideInfo<T>]) -> Result<Vec<ComplexGrid<T>>> {
        let mut tape = Tape::new();
        let mut pass = self.begin(&mut tape, Mode::Eval);
        let x = tape.constant(self.batch_images(images)?);
        let y = self.encode_graph(&mut tape, &mut pass, x, side)?;
        let (ns, lf) = (self.config.symbols, self.config.subcarriers);
        tape.value(y)
            .data()
            .chunks(2 * ns * lf)
            .map(|chunk| ComplexGrid::from_packed(ns, lf, chunk))
            .collect()
    }

    /// Inference-mode decoding to `[n,c,h,w]`.
    pub fn decode(&self, grids: &[ComplexGrid<T>], side: &[SideInfo<T>]) -> Result<Tensor<T>> {
        let (ns, lf) = (self.config.symbols, self.config.subcarriers);
        let mut data = Vec::with_capacity(grids.len() * 2 * ns * lf);
        for g in grids {
            if g.rows() != ns || g.cols() != lf {
                return Err(Error::shape(
                    "received grid",
                    format!("{ns}x{lf}"),
                    format!("{}x{}", g.rows(), g.cols()),
                ));
            }
            data.extend(g.to_packed());
        }
        let mut tape = Tape::new();
        let mut pass = self.begin(&mut tape, Mode::Eval);
        let y = tape.constant(Tensor::new(&[grids.len(), 2, ns, lf], data)?);
        let out = self.decode_graph(&mut tape, &mut pass, y, side)?;
        Ok(tape.value(out).clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let arr = |name: &str, shape: &[usize], data: &[T]| NamedArray {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: data.iter().map(|v| v.as_f64() as f32).collect(),
        };
        let mut ckpt = Checkpoint {
            config_hash: self.config.hash(),
            ..Default::default()
        };
        for p in self.params.iter() {
            let shape = p.tensor.shape();
            ckpt.params.push(arr(&p.name, shape, p.tensor.data()));
            ckpt.adam_m.push(arr(&p.name, shape, &p.adam.m));
            ckpt.adam_v.push(arr(&p.name, shape, &p.adam.v));
            ckpt.adam_steps.push(p.adam.step);
        }
        for (name, state) in &self.bn {
            if let Some((mean, var)) = state.running() {
                ckpt.buffers.push(arr(&format!("{name}.running_mean"), &[mean.len()], mean));
                ckpt.buffers.push(arr(&format!("{name}.running_var"), &[var.len()], var));
            }
        }
        ckpt
    }

    /// Rebuilds a model from a checkpoint written for the same architecture.
    pub fn from_checkpoint(config: ModelConfig, ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.config_hash != config.hash() {
            return Err(Error::Checkpoint(format!(
                "architecture mismatch: checkpoint hash {:016x}, configuration hash {:016x}",
                ckpt.config_hash,
                config.hash()
            )));
        }
        let mut model = Self::new(config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        if ckpt.params.len() != model.params.len()
            || ckpt.adam_m.len() != ckpt.params.len()
            || ckpt.adam_v.len() != ckpt.params.len()
            || ckpt.adam_steps.len() != ckpt.params.len()
        {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters with optimizer state, found {}",
                model.params.len(),
                ckpt.params.len()
            )));
        }
        let values = |a: &NamedArray| a.data.iter().map(|&v| T::of(v as f64)).collect::<Vec<T>>();
        for (i, entry) in ckpt.params.iter().enumerate() {
            let id = model
                .params
                .id(&entry.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {:?}", entry.name)))?;
            let p = model.params.get_mut(id);
            if p.tensor.shape() != entry.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {:?} has shape {:?}, expected {:?}",
                    entry.name,
                    entry.shape,
                    p.tensor.shape()
                )));
            }
            p.tensor.data_mut().copy_from_slice(&values(entry));
            p.adam.m = values(&ckpt.adam_m[i]);
            p.adam.v = values(&ckpt.adam_v[i]);
            p.adam.step = ckpt.adam_steps[i];
            if p.adam.m.len() != p.tensor.numel() || p.adam.v.len() != p.tensor.numel() {
                return Err(Error::Checkpoint(format!("optimizer state size mismatch for {:?}", entry.name)));
            }
        }
        for (name, state) in &mut model.bn {
            let find = |suffix: &str| {
                let key = format!("{name}.{suffix}");
                ckpt.buffers
                    .iter()
                    .find(|b| b.name == key)
                    .map(values)
                    .ok_or_else(|| Error::Checkpoint(format!("missing buffer {key:?}")))
            };
            *state = BatchNormState::from_parts(find("running_mean")?, find("running_var")?)?;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(BufWriter::new(File::create(path)?), &self.to_checkpoint())
    }

    pub fn load(path: &Path, config: ModelConfig) -> Result<Self> {
        let ckpt = read_checkpoint(BufReader::new(File::open(path)?))?;
        Self::from_checkpoint(config, &ckpt)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            bn: self.bn.iter().map(|(n, s)| (n.clone(), s.cast())).collect(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            enc_cl: self.enc_cl.clone(),
            dec_cl: self.dec_cl.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ofdm::complex_normal;
    use crate::rng::SeedStream;

    fn side_for(seed: u64, n: usize, l_f: usize, mu: f64) -> Vec<SideInfo<f64>> {
        let mut rng = SeedStream::new(seed).rng("csi", 0);
        (0..n)
            .map(|_| {
                let g: Vec<Complex<f64>> = (0..l_f).map(|_| complex_normal(&mut rng, 1.0)).collect();
                SideInfo::new(&g, mu)
            })
            .collect()
    }

    fn images(cfg: &ModelConfig, n: usize, seed: u64) -> Tensor<f64> {
        let mut rng = SeedStream::new(seed).rng("img", 0);
        let [c, h, w] = cfg.image_shape();
        Tensor::from_fn(&[n, c, h, w], |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn default_shapes_and_ratios() {
        let cfg = ModelConfig::cifar(8);
        let shapes = cfg.stage_shapes().unwrap();
        assert_eq!(shapes[1], [64, 16, 16]);
        assert_eq!(shapes[5], [16, 8, 8]);
        assert_eq!(cfg.output_paddings().unwrap(), vec![1, 1, 0, 0, 0]);
        assert!((cfg.bandwidth_ratio() - 1.0 / 6.0).abs() < 1e-15);
        assert!((ModelConfig::cifar(4).bandwidth_ratio() - 1.0 / 12.0).abs() < 1e-15);
        cfg.validate().unwrap();
        ModelConfig::toy().validate().unwrap();
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = ModelConfig::toy();
        cfg.widths[4] = 6;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = ModelConfig::toy();
        cfg.strides = vec![1, 1, 1, 1, 1];
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::toy();
        cfg.subcarriers = 8;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn variants_differ_in_size() {
        let mut rng = SeedStream::new(1).rng("init", 0);
        let dual = Model::<f64>::new(ModelConfig::toy(), &mut rng).unwrap();
        let ch = Model::<f64>::new(ModelConfig::toy().with_variant(Variant::ChannelOnly), &mut rng).unwrap();
        let none = Model::<f64>::new(ModelConfig::toy().with_variant(Variant::None), &mut rng).unwrap();
        assert!(ch.num_parameters() < dual.num_parameters());
        assert!(none.num_parameters() < ch.num_parameters());
        assert!(dual.params().by_name("enc.cl1.sa.fc2.b").is_some());
        assert!(ch.params().by_name("enc.cl1.sa.fc2.b").is_none());
    }

    #[test]
    fn encode_decode_shapes_and_power() {
        for cfg in [ModelConfig::toy(), ModelConfig::tiny()] {
            let model = Model::<f64>::new(cfg.clone(), &mut SeedStream::new(3).rng("init", 0)).unwrap();
            let x = images(&cfg, 3, 4);
            let side = side_for(5, 3, cfg.subcarriers, 10.0);
            let grids = model.encode(&x, &side).unwrap();
            assert_eq!(grids.len(), 3);
            for g in &grids {
                assert_eq!((g.rows(), g.cols()), (cfg.symbols, cfg.subcarriers));
                assert!((g.mean_power() - 1.0).abs() < 1e-9);
            }
            let out = model.decode(&grids, &side).unwrap();
            assert_eq!(out.shape(), x.shape());
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn identity_masks_match_none_variant() {
        let mut rng = SeedStream::new(8).rng("init", 0);
        let mut dual = Model::<f64>::new(ModelConfig::toy(), &mut rng).unwrap();
        dual.force_identity_attention();
        let mut none = Model::<f64>::new(ModelConfig::toy().with_variant(Variant::None), &mut rng).unwrap();
        assert_eq!(none.copy_matching(&dual).unwrap(), none.params().len());

        // Sorting is the one remaining difference, so use ordered gains.
        let gains: Vec<Complex<f64>> = (0..16).map(|k| Complex::new(2.0 - k as f64 * 0.1, 0.0)).collect();
        let side = vec![SideInfo::new(&gains, 7.0); 2];
        let x = images(dual.config(), 2, 9);
        let a = dual.encode(&x, &side).unwrap();
        let b = none.encode(&x, &side).unwrap();
        for (ga, gb) in a.iter().zip(&b) {
            for (u, v) in ga.data().iter().zip(gb.data()) {
                assert!((u - v).norm() < 1e-6);
            }
        }
        let da = dual.decode(&a, &side).unwrap();
        let db = none.decode(&a, &side).unwrap();
        for (u, v) in da.data().iter().zip(db.data()) {
            assert!((u - v).abs() < 1e-6);
        }
    }

    #[test]
    fn none_variant_ignores_csi() {
        let cfg = ModelConfig::toy().with_variant(Variant::None);
        let model = Model::<f64>::new(cfg.clone(), &mut SeedStream::new(2).rng("init", 0)).unwrap();
        let x = images(&cfg, 1, 1);
        let a = model.encode(&x, &side_for(1, 1, 16, 0.0)).unwrap();
        let b = model.encode(&x, &side_for(2, 1, 16, 20.0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_roundtrip_and_hash_guard() {
        let cfg = ModelConfig::toy();
        let model = Model::<f32>::new(cfg.clone(), &mut SeedStream::new(4).rng("init", 0)).unwrap();
        let ckpt = model.to_checkpoint();
        let back = Model::<f32>::from_checkpoint(cfg.clone(), &ckpt).unwrap();
        assert_eq!(back.params(), model.params());
        let other = cfg.with_variant(Variant::ChannelOnly);
        assert!(matches!(Model::<f32>::from_checkpoint(other, &ckpt), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn decoder_mirrors_every_stage() {
        let cfg = ModelConfig::cifar(8);
        let paddings = cfg.output_paddings().unwrap();
        let shapes = cfg.stage_shapes().unwrap();
        for i in 0..STAGES {
            let up = ConvGeometry::conv_transpose_output_len(shapes[i + 1][1], 3, cfg.strides[i], 1, paddings[i]).unwrap();
            assert_eq!(up, shapes[i][1]);
        }
    }
}
