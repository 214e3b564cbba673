use num_complex::Complex;

use super::ops::{self, BackwardCtx, BatchNormMode, ConvGeometry, MaskKind, Op};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Wengert list of executed operations. Nodes are appended in execution
/// order; [`Tape::backward`] walks them in exact reverse.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Splits a feature tensor into `(batch, channels, spatial)` and reports
/// whether it carried an explicit batch axis.
fn feature_dims(shape: &[usize], what: &str) -> Result<((usize, usize, usize), bool)> {
    match shape {
        [n, c, h, w] => Ok(((*n, *c, h * w), true)),
        [c, h, w] => Ok(((1, *c, h * w), false)),
        _ => Err(Error::shape(format!("{what} rank"), "3 (c,h,w) or 4 (n,c,h,w)", shape.len())),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let needs_grad = match &op {
            Op::Leaf => value.requires_grad(),
            other => other.inputs().iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records an input. Gradients are retained for it when
    /// `tensor.requires_grad()` is set.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor, Op::Leaf)
    }

    /// Records a constant input.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` loss with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    /// Batch mean and (biased) variance saved by a train-mode batch norm.
    pub fn batch_statistics(&self, v: Var) -> Option<(&[T], &[T])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm {
                mean, var, train: true, ..
            } => Some((mean, var)),
            _ => None,
        }
    }

    /// `y = W·x + b` for `x` of shape `[n_in]` or `[batch, n_in]`.
    pub fn fully_connected(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        let (batch, n_in, batched) = match xs.as_slice() {
            [n_in] => (1, *n_in, false),
            [batch, n_in] => (*batch, *n_in, true),
            _ => return Err(Error::shape("fc input rank", "1 or 2", xs.len())),
        };
        let [n_out, w_in] = ws.as_slice() else {
            return Err(Error::shape("fc weight rank", 2, ws.len()));
        };
        if *w_in != n_in {
            return Err(Error::shape("fc weight axis 1 (n_in)", n_in, w_in));
        }
        if bs.as_slice() != [*n_out] {
            return Err(Error::shape("fc bias axis 0 (n_out)", n_out, format!("{bs:?}")));
        }
        let n_out = *n_out;
        let y = ops::fc_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), batch, n_in, n_out);
        let shape = if batched { vec![batch, n_out] } else { vec![n_out] };
        Ok(self.push(
            Tensor::new(&shape, y)?,
            Op::FullyConnected {
                x,
                w,
                b,
                batch,
                n_in,
                n_out,
            },
        ))
    }

    fn conv_common(&mut self, x: Var, w: Var, b: Var, transposed: bool) -> Result<(ConvGeometry, bool)> {
        let ((batch, c_in, _), batched) = feature_dims(self.shape(x), "conv input")?;
        let xs = self.shape(x);
        let (h_in, w_in) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        let ws = self.shape(w).to_vec();
        let [a0, a1, k0, k1] = ws.as_slice() else {
            return Err(Error::shape("conv kernel rank", 4, ws.len()));
        };
        if k0 != k1 {
            return Err(Error::shape("conv kernel width", k0, k1));
        }
        let (c_out, kin) = if transposed { (*a1, *a0) } else { (*a0, *a1) };
        if kin != c_in {
            return Err(Error::shape(
                if transposed { "conv_transpose kernel axis 0 (c_in)" } else { "conv kernel axis 1 (c_in)" },
                c_in,
                kin,
            ));
        }
        if self.shape(b) != [c_out] {
            return Err(Error::shape("conv bias axis 0 (c_out)", c_out, format!("{:?}", self.shape(b))));
        }
        Ok((
            ConvGeometry {
                batch,
                c_in,
                c_out,
                h_in,
                w_in,
                h_out: 0,
                w_out: 0,
                kernel: *k0,
                stride: 0,
                padding: 0,
            },
            batched,
        ))
    }

    /// Cross-correlation of `x` (`[c_in,h,w]` or `[n,c_in,h,w]`) with kernels
    /// `[c_out,c_in,k,k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (mut g, batched) = self.conv_common(x, w, b, false)?;
        g.stride = stride;
        g.padding = padding;
        g.h_out = ConvGeometry::conv_output_len(g.h_in, g.kernel, stride, padding)?;
        g.w_out = ConvGeometry::conv_output_len(g.w_in, g.kernel, stride, padding)?;
        let y = ops::conv2d_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), &g);
        let shape = if batched {
            vec![g.batch, g.c_out, g.h_out, g.w_out]
        } else {
            vec![g.c_out, g.h_out, g.w_out]
        };
        Ok(self.push(Tensor::new(&shape, y)?, Op::Conv2d { x, w, b, geom: g }))
    }

    /// Transposed convolution (the input-gradient of [`Tape::conv2d`]) with
    /// kernels `[c_in,c_out,k,k]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let (mut g, batched) = self.conv_common(x, w, b, true)?;
        if output_padding >= stride {
            return Err(Error::Config(format!(
                "output padding {output_padding} must be smaller than stride {stride}"
            )));
        }
        g.stride = stride;
        g.padding = padding;
        g.h_out = ConvGeometry::conv_transpose_output_len(g.h_in, g.kernel, stride, padding, output_padding)?;
        g.w_out = ConvGeometry::conv_transpose_output_len(g.w_in, g.kernel, stride, padding, output_padding)?;
        let y = ops::conv_transpose2d_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), &g);
        let shape = if batched {
            vec![g.batch, g.c_out, g.h_out, g.w_out]
        } else {
            vec![g.c_out, g.h_out, g.w_out]
        };
        Ok(self.push(Tensor::new(&shape, y)?, Op::ConvTranspose2d { x, w, b, geom: g }))
    }

    /// Per-channel normalization over batch and spatial axes followed by the
    /// affine `gamma·x̂ + beta`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: BatchNormMode<'_, T>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let dims = match xs.as_slice() {
            [n, c] => (*n, *c, 1),
            _ => feature_dims(&xs, "batch norm input")?.0,
        };
        let c = dims.1;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(Error::shape(format!("batch norm {name} axis 0"), c, format!("{:?}", self.shape(v))));
            }
        }
        if let BatchNormMode::Eval { mean, var } = mode {
            if mean.len() != c || var.len() != c {
                return Err(Error::shape("batch norm running statistics", c, mean.len().min(var.len())));
            }
        }
        let out = ops::batch_norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            dims,
            mode,
        );
        Ok(self.push(
            Tensor::new(&xs, out.y)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat: out.xhat,
                inv_std: out.inv_std,
                mean: out.mean,
                var: out.var,
                train: matches!(mode, BatchNormMode::Train),
                dims,
            },
        ))
    }

    /// `x` where `x ≥ 0`, `slope·x` elsewhere; `slope` is a one-element tensor.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        if self.value(slope).numel() != 1 {
            return Err(Error::shape("prelu slope", 1, self.value(slope).numel()));
        }
        let a = self.value(slope).data()[0];
        let y = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v >= T::zero() { v } else { a * v })
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(&shape, y)?, Op::Prelu { x, slope }))
    }

    /// Mean over the spatial axes: `[n,c,h,w] → [n,c]` (or `[c,h,w] → [c]`).
    pub fn avg_pool_channelwise(&mut self, x: Var) -> Result<Var> {
        let (dims, batched) = feature_dims(self.shape(x), "avg_pool_channelwise input")?;
        let y = ops::avg_pool_channel_forward(self.value(x).data(), dims);
        let shape = if batched { vec![dims.0, dims.1] } else { vec![dims.1] };
        Ok(self.push(Tensor::new(&shape, y)?, Op::AvgPoolChannel { x, dims }))
    }

    /// Mean over the channel axis: `[n,c,h,w] → [n,h,w]` (or `[c,h,w] → [h,w]`).
    pub fn avg_pool_spatial(&mut self, x: Var) -> Result<Var> {
        let (dims, batched) = feature_dims(self.shape(x), "avg_pool_spatial input")?;
        let xs = self.shape(x);
        let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        let y = ops::avg_pool_spatial_forward(self.value(x).data(), dims);
        let shape = if batched { vec![dims.0, h, w] } else { vec![h, w] };
        Ok(self.push(Tensor::new(&shape, y)?, Op::AvgPoolSpatial { x, dims }))
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || axis >= sa.len() {
            return Err(Error::shape("concat rank", sa.len(), sb.len()));
        }
        for (i, (x, y)) in sa.iter().zip(&sb).enumerate() {
            if i != axis && x != y {
                return Err(Error::shape(format!("concat axis {i}"), x, y));
            }
        }
        let outer: usize = sa[..axis].iter().product();
        let a_inner: usize = sa[axis..].iter().product();
        let b_inner: usize = sb[axis..].iter().product();
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut y = Vec::with_capacity(da.len() + db.len());
        for o in 0..outer {
            y.extend_from_slice(&da[o * a_inner..(o + 1) * a_inner]);
            y.extend_from_slice(&db[o * b_inner..(o + 1) * b_inner]);
        }
        let mut shape = sa.clone();
        shape[axis] += sb[axis];
        Ok(self.push(
            Tensor::new(&shape, y)?,
            Op::Concat {
                a,
                b,
                outer,
                a_inner,
                b_inner,
            },
        ))
    }

    /// Scales features by a broadcast mask. A `[n,c]` (or `[c]`) mask scales
    /// whole channel planes; a `[n,h,w]` (or `[h,w]`) mask scales positions
    /// across all channels.
    pub fn mul_mask(&mut self, features: Var, mask: Var) -> Result<Var> {
        let fs = self.shape(features).to_vec();
        let ms = self.shape(mask).to_vec();
        let (dims, batched) = feature_dims(&fs, "masked features")?;
        let (n, c) = (dims.0, dims.1);
        let (h, w) = (fs[fs.len() - 2], fs[fs.len() - 1]);
        let kind = match (batched, ms.as_slice()) {
            (true, [mn, mc]) if *mn == n && *mc == c => MaskKind::Channel,
            (true, [mn, mh, mw]) if *mn == n && *mh == h && *mw == w => MaskKind::Spatial,
            (false, [mc]) if *mc == c => MaskKind::Channel,
            (false, [mh, mw]) if *mh == h && *mw == w => MaskKind::Spatial,
            _ => {
                return Err(Error::shape(
                    "mask",
                    if batched {
                        format!("[{n},{c}] or [{n},{h},{w}]")
                    } else {
                        format!("[{c}] or [{h},{w}]")
                    },
                    format!("{ms:?}"),
                ))
            }
        };
        let y = ops::mask_forward(self.value(features).data(), self.value(mask).data(), kind, dims);
        Ok(self.push(
            Tensor::new(&fs, y)?,
            Op::Mask {
                x: features,
                mask,
                kind,
                dims,
            },
        ))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).data().iter().map(|&v| ops::sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(&shape, y)?, Op::Sigmoid { x }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().with_requires_grad(false);
        let mut t = t.reshape(shape)?;
        t.clear_grad();
        Ok(self.push(t, Op::Reshape { x }))
    }

    /// `out[b, .., i] = x[b, .., index[b][i]]` along the last axis, one index
    /// list per batch item.
    pub fn gather_last(&mut self, x: Var, index: &[Vec<usize>]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::shape("gather input rank", ">= 2", xs.len()));
        }
        let (batch, len) = (xs[0], xs[xs.len() - 1]);
        if index.len() != batch {
            return Err(Error::shape("gather index batch", batch, index.len()));
        }
        if let Some(bad) = index.iter().find(|ix| ix.len() != len || ix.iter().any(|&i| i >= len)) {
            return Err(Error::shape("gather index", format!("{len} entries < {len}"), format!("{bad:?}")));
        }
        let rows = xs[1..xs.len() - 1].iter().product::<usize>();
        let flat: Vec<usize> = index.iter().flatten().copied().collect();
        let data = self.value(x).data();
        let y: Vec<T> = (0..data.len())
            .map(|p| {
                let row = p / len;
                let n = row / rows;
                data[row * len + flat[n * len + p % len]]
            })
            .collect();
        Ok(self.push(
            Tensor::new(&xs, y)?,
            Op::Gather {
                x,
                index: flat,
                rows,
                len,
            },
        ))
    }

    /// Rescales each batch item so its squared norm equals `energy`.
    pub fn power_normalize(&mut self, x: Var, energy: T) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let batch = *xs.first().ok_or_else(|| Error::shape("power_normalize rank", ">= 1", 0))?;
        let data = self.value(x).data();
        let per = data.len() / batch.max(1);
        let mut scale = Vec::with_capacity(batch);
        let mut sumsq = Vec::with_capacity(batch);
        for n in 0..batch {
            let s: T = data[n * per..(n + 1) * per].iter().map(|&v| v * v).sum();
            if s <= T::zero() {
                return Err(Error::Degenerate(format!("batch item {n} is all zero; cannot normalize power")));
            }
            sumsq.push(s);
            scale.push((energy / s).sqrt());
        }
        let y = data
            .iter()
            .enumerate()
            .map(|(i, &v)| v * scale[i / per])
            .collect();
        Ok(self.push(Tensor::new(&xs, y)?, Op::PowerNormalize { x, scale, sumsq }))
    }

    /// Complex per-column multiply plus optional additive term on a packed
    /// `[n, 2, rows, len]` tensor (`[:,0]` real, `[:,1]` imaginary). `coef`
    /// holds `n·len` values; `offset` matches `x`.
    pub fn complex_affine(&mut self, x: Var, coef: &[Complex<T>], offset: Option<&[T]>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let [batch, two, rows, len] = xs.as_slice() else {
            return Err(Error::shape("complex tensor rank", 4, xs.len()));
        };
        if *two != 2 {
            return Err(Error::shape("complex tensor axis 1 (re/im)", 2, two));
        }
        let (batch, rows, len) = (*batch, *rows, *len);
        if coef.len() != batch * len {
            return Err(Error::shape("complex coefficients", batch * len, coef.len()));
        }
        let data = self.value(x).data();
        if let Some(off) = offset {
            if off.len() != data.len() {
                return Err(Error::shape("complex offset", data.len(), off.len()));
            }
        }
        let plane = rows * len;
        let mut y = vec![T::zero(); data.len()];
        for n in 0..batch {
            let base = n * 2 * plane;
            for r in 0..rows {
                for k in 0..len {
                    let re = base + r * len + k;
                    let im = re + plane;
                    let v = coef[n * len + k] * Complex::new(data[re], data[im]);
                    y[re] = v.re;
                    y[im] = v.im;
                }
            }
        }
        if let Some(off) = offset {
            y.iter_mut().zip(off).for_each(|(a, &b)| *a = *a + b);
        }
        Ok(self.push(
            Tensor::new(&xs, y)?,
            Op::ComplexAffine {
                x,
                coef: coef.to_vec(),
                rows,
                len,
            },
        ))
    }

    /// Mean squared error against a constant target; a scalar.
    pub fn mse(&mut self, x: Var, target: &Tensor<T>) -> Result<Var> {
        if self.shape(x) != target.shape() {
            return Err(Error::shape("mse target", format!("{:?}", self.shape(x)), format!("{:?}", target.shape())));
        }
        let d = self.value(x).data();
        let s: T = d.iter().zip(target.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let v = s / T::of(d.len() as f64);
        Ok(self.push(
            Tensor::new(&[], vec![v])?,
            Op::Mse {
                x,
                target: target.data().to_vec(),
            },
        ))
    }

    /// `Σ weights ⊙ x`; a scalar. Used to project outputs for gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: &[T]) -> Result<Var> {
        if weights.len() != self.value(x).numel() {
            return Err(Error::shape("weighted_sum weights", self.value(x).numel(), weights.len()));
        }
        let v: T = self.value(x).data().iter().zip(weights).map(|(&a, &b)| a * b).sum();
        Ok(self.push(
            Tensor::new(&[], vec![v])?,
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ones = vec![T::one(); self.value(x).numel()];
        self.weighted_sum(x, &ones)
    }

    /// Reverse sweep from a scalar `loss`. Gradients land on every leaf that
    /// requires them and is reachable from `loss`; previous leaf gradients
    /// are replaced.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward loss", "scalar", format!("{:?}", self.shape(loss))));
        }
        if !self.value(loss).is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[idx] = Some(gy);
                continue;
            }
            let inputs = node.op.inputs();
            let ctx = BackwardCtx {
                value: &node.value,
                gy: &gy,
                input_values: inputs.iter().map(|v| &self.nodes[v.0].value).collect(),
                needs: inputs.iter().map(|v| self.nodes[v.0].needs_grad).collect(),
            };
            let input_grads = ops::backward(&node.op, &ctx);
            for (v, g) in inputs.into_iter().zip(input_grads) {
                let Some(g) = g else { continue };
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        for (idx, g) in grads.into_iter().enumerate() {
            if let (Some(g), Op::Leaf) = (g, &self.nodes[idx].op) {
                self.nodes[idx].value.set_grad(g)?;
            }
        }
        Ok(())
    }
}
