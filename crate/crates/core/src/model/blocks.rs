//! Feature-learning and channel-learning building blocks recorded on a tape.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{BatchNormMode, Tape, Var};

/// Tape handles for one FL block.
#[derive(Debug, Clone, Copy)]
pub struct FlVars {
    pub weight: Var,
    pub bias: Var,
    /// `(gamma, beta, prelu slope)`; absent for the decoder output stage.
    pub norm: Option<(Var, Var, Var)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Strided convolution.
    Down,
    /// Transposed convolution with the given output padding.
    Up { output_padding: usize },
}

/// Result of an FL block: the activation and, when present, the batch-norm
/// node whose batch statistics feed the running averages.
#[derive(Debug, Clone, Copy)]
pub struct FlOutput {
    pub output: Var,
    pub normalized: Option<Var>,
}

/// Convolution (or transposed convolution), batch norm and PReLU. Without
/// `norm` the block ends in a sigmoid instead.
pub fn fl_block<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    vars: FlVars,
    direction: Direction,
    stride: usize,
    padding: usize,
    bn: BatchNormMode<'_, T>,
) -> Result<FlOutput> {
    let y = match direction {
        Direction::Down => tape.conv2d(x, vars.weight, vars.bias, stride, padding)?,
        Direction::Up { output_padding } => {
            tape.conv_transpose2d(x, vars.weight, vars.bias, stride, padding, output_padding)?
        }
    };
    match vars.norm {
        Some((gamma, beta, slope)) => {
            let normalized = tape.batch_norm(y, gamma, beta, bn)?;
            Ok(FlOutput {
                output: tape.prelu(normalized, slope)?,
                normalized: Some(normalized),
            })
        }
        None => Ok(FlOutput {
            output: tape.sigmoid(y)?,
            normalized: None,
        }),
    }
}

/// Two fully connected layers with a PReLU between them and a linear output.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub w1: Var,
    pub b1: Var,
    pub slope: Var,
    pub w2: Var,
    pub b2: Var,
}

fn mask_network<T: Scalar>(tape: &mut Tape<T>, input: Var, vars: AttentionVars) -> Result<Var> {
    let h = tape.fully_connected(input, vars.w1, vars.b1)?;
    let h = tape.prelu(h, vars.slope)?;
    tape.fully_connected(h, vars.w2, vars.b2)
}

fn check_csi<T: Scalar>(tape: &Tape<T>, features: Var, csi: Var) -> Result<usize> {
    let fs = tape.shape(features);
    let cs = tape.shape(csi);
    if fs.len() != 4 || cs.len() != 2 || cs[0] != fs[0] {
        return Err(Error::shape(
            "attention inputs",
            format!("features [n,c,h,w] with csi [n,L_f+1], n = {}", fs.first().copied().unwrap_or(0)),
            format!("features {fs:?}, csi {cs:?}"),
        ));
    }
    Ok(cs[1])
}

/// Channel-wise stage: `S_c = f_c([Ave_c(F), ĥ])`, output `S_c[i]·F[i]`.
pub fn channel_attention<T: Scalar>(tape: &mut Tape<T>, features: Var, csi: Var, vars: AttentionVars) -> Result<Var> {
    let csi_len = check_csi(tape, features, csi)?;
    let c = tape.shape(features)[1];
    let expected = c + csi_len;
    if tape.shape(vars.w1)[1] != expected {
        return Err(Error::shape("channel attention input (c + L_f + 1)", expected, tape.shape(vars.w1)[1]));
    }
    let pooled = tape.avg_pool_channelwise(features)?;
    let input = tape.concat(pooled, csi, 1)?;
    let mask = mask_network(tape, input, vars)?;
    tape.mul_mask(features, mask)
}

/// Spatial stage: `S_s = f_s([Ave_s(F), ĥ])` reshaped to `h×w`, output
/// `S_s[j,k]·F[·,j,k]`.
pub fn spatial_attention<T: Scalar>(tape: &mut Tape<T>, features: Var, csi: Var, vars: AttentionVars) -> Result<Var> {
    let csi_len = check_csi(tape, features, csi)?;
    let (n, h, w) = {
        let s = tape.shape(features);
        (s[0], s[2], s[3])
    };
    let expected = h * w + csi_len;
    if tape.shape(vars.w1)[1] != expected {
        return Err(Error::shape("spatial attention input (hw + L_f + 1)", expected, tape.shape(vars.w1)[1]));
    }
    let pooled = tape.avg_pool_spatial(features)?;
    let pooled = tape.reshape(pooled, &[n, h * w])?;
    let input = tape.concat(pooled, csi, 1)?;
    let mask = mask_network(tape, input, vars)?;
    let mask = tape.reshape(mask, &[n, h, w])?;
    tape.mul_mask(features, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference_check, Tensor};

    fn attention_vars(tape: &mut Tape<f64>, n_in: usize, n_out: usize, seed: f64, force_ones: bool) -> AttentionVars {
        let hidden = n_in / 2;
        let val = |i: usize, s: f64| ((i as f64 + 1.0) * s).sin() * 0.3;
        let w1 = tape.leaf(Tensor::from_fn(&[hidden, n_in], |i| val(i, seed)));
        let b1 = tape.leaf(Tensor::from_fn(&[hidden], |i| val(i, seed + 1.0)));
        let slope = tape.leaf(Tensor::full(&[1], 0.25));
        let w2 = tape.leaf(Tensor::from_fn(&[n_out, hidden], |i| if force_ones { 0.0 } else { val(i, seed + 2.0) }));
        let b2 = tape.leaf(Tensor::from_fn(&[n_out], |i| if force_ones { 1.0 } else { 1.0 + val(i, seed + 3.0) }));
        AttentionVars { w1, b1, slope, w2, b2 }
    }

    fn features(shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| ((i * 7 % 11) as f64 - 5.0) / 4.0)
    }

    #[test]
    fn forced_ones_is_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(features(&[2, 3, 2, 2]));
        let csi = tape.constant(Tensor::from_fn(&[2, 5], |i| i as f64 * 0.1));
        let cv = attention_vars(&mut tape, 3 + 5, 3, 0.7, true);
        let sv = attention_vars(&mut tape, 4 + 5, 4, 1.3, true);
        let y = channel_attention(&mut tape, x, csi, cv).unwrap();
        let y = spatial_attention(&mut tape, y, csi, sv).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn input_lengths_follow_stage_shape() {
        // c = 64 and h = w = 8 with L_f = 64: both stacks see 129 inputs.
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 64, 8, 8], 0.5));
        let csi = tape.constant(Tensor::full(&[1, 65], 1.0));
        let cv = attention_vars(&mut tape, 129, 64, 0.1, false);
        let sv = attention_vars(&mut tape, 129, 64, 0.2, false);
        assert!(channel_attention(&mut tape, x, csi, cv).is_ok());
        assert!(spatial_attention(&mut tape, x, csi, sv).is_ok());

        let short = tape.constant(Tensor::full(&[1, 64], 1.0));
        assert!(matches!(channel_attention(&mut tape, x, short, cv), Err(Error::Shape { .. })));
    }

    #[test]
    fn constant_input_gets_one_spatial_pattern() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 3, 2, 2], 2.0));
        let csi = tape.constant(Tensor::from_fn(&[1, 3], |i| i as f64));
        let sv = attention_vars(&mut tape, 4 + 3, 4, 0.9, false);
        let y = spatial_attention(&mut tape, x, csi, sv).unwrap();
        let out = tape.value(y).data().to_vec();
        for ch in 1..3 {
            assert_eq!(&out[ch * 4..ch * 4 + 4], &out[0..4]);
        }
        let pattern: Vec<f64> = out[0..4].iter().map(|v| v / 2.0).collect();
        // Direct evaluation of f_s on the constant pooled map.
        let input: Vec<f64> = [2.0; 4].iter().copied().chain([0.0, 1.0, 2.0]).collect();
        let w1 = tape.value(sv.w1).data().to_vec();
        let b1 = tape.value(sv.b1).data().to_vec();
        let w2 = tape.value(sv.w2).data().to_vec();
        let b2 = tape.value(sv.b2).data().to_vec();
        let hidden: Vec<f64> = (0..3)
            .map(|j| {
                let z = b1[j] + (0..7).map(|i| w1[j * 7 + i] * input[i]).sum::<f64>();
                if z >= 0.0 {
                    z
                } else {
                    0.25 * z
                }
            })
            .collect();
        for p in 0..4 {
            let m = b2[p] + (0..3).map(|j| w2[p * 3 + j] * hidden[j]).sum::<f64>();
            assert!((m - pattern[p]).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let x0 = features(&[2, 3, 2, 2]);
        let check = finite_difference_check(
            |tape, x| {
                let csi = tape.constant(Tensor::from_fn(&[2, 5], |i| 0.2 * i as f64 - 0.3));
                let cv = attention_vars(tape, 8, 3, 0.4, false);
                let sv = attention_vars(tape, 9, 4, 0.8, false);
                let y = channel_attention(tape, x, csi, cv)?;
                let y = spatial_attention(tape, y, csi, sv)?;
                let weights: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).cos()).collect();
                tape.weighted_sum(y, &weights)
            },
            &x0,
            1e-6,
        )
        .unwrap();
        assert!(check.passes(1e-4), "{check:?}");
    }

    #[test]
    fn fl_block_shapes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[1, 3, 32, 32], 0.5));
        let vars = FlVars {
            weight: tape.leaf(Tensor::full(&[8, 3, 3, 3], 0.1)),
            bias: tape.leaf(Tensor::zeros(&[8])),
            norm: Some((
                tape.leaf(Tensor::full(&[8], 1.0)),
                tape.leaf(Tensor::zeros(&[8])),
                tape.leaf(Tensor::full(&[1], 0.25)),
            )),
        };
        let y = fl_block(&mut tape, x, vars, Direction::Down, 2, 1, BatchNormMode::Train).unwrap().output;
        assert_eq!(tape.shape(y), &[1, 8, 16, 16]);

        let up = FlVars {
            weight: tape.leaf(Tensor::full(&[8, 3, 3, 3], 0.1)),
            bias: tape.leaf(Tensor::zeros(&[3])),
            norm: None,
        };
        let z = fl_block(&mut tape, y, up, Direction::Up { output_padding: 1 }, 2, 1, BatchNormMode::Train).unwrap().output;
        assert_eq!(tape.shape(z), &[1, 3, 32, 32]);
        assert!(tape.value(z).data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
