use std::collections::HashMap;

use super::ops::BATCH_NORM_MOMENTUM;
use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// First/second moment estimates and step count for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub adam: AdamState<T>,
}

/// Named trainable tensors with their optimizer state.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet<T> {
    entries: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

/// Tape handles for every parameter, in registration order.
#[derive(Debug, Clone)]
pub struct Bindings(Vec<Var>);

impl Bindings {
    pub fn get(&self, id: usize) -> Var {
        self.0[id]
    }
}

impl<T: Scalar> ParameterSet<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a parameter and returns its id. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        let n = tensor.numel();
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(Parameter {
            name,
            tensor: tensor.with_requires_grad(true),
            adam: AdamState {
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
                step: 0,
            },
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: usize) -> &Parameter<T> {
        &self.entries[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Parameter<T> {
        &mut self.entries[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|i| &self.entries[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.entries.iter_mut()
    }

    /// Records every parameter as a gradient-tracked leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bindings {
        Bindings(self.entries.iter().map(|p| tape.leaf(p.tensor.clone())).collect())
    }

    /// Copies leaf gradients from the tape after `backward`. Parameters not
    /// reachable from the loss are left without a gradient.
    pub fn collect_grads(&mut self, tape: &Tape<T>, bindings: &Bindings) -> Result<()> {
        for (p, &v) in self.entries.iter_mut().zip(&bindings.0) {
            match tape.grad(v) {
                Some(g) => p.tensor.set_grad(g.to_vec())?,
                None => p.tensor.clear_grad(),
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.entries.iter_mut().for_each(|p| p.tensor.clear_grad());
    }

    /// All parameter values concatenated in registration order.
    pub fn flatten(&self) -> Vec<T> {
        self.entries.iter().flat_map(|p| p.tensor.data().iter().copied()).collect()
    }

    /// Inverse of [`ParameterSet::flatten`].
    pub fn assign_flat(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(Error::shape("flat parameter vector", self.numel(), values.len()));
        }
        let mut off = 0;
        for p in &mut self.entries {
            let n = p.tensor.numel();
            p.tensor.data_mut().copy_from_slice(&values[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Gradients concatenated in registration order; `None` if any is missing.
    pub fn flat_grads(&self) -> Option<Vec<T>> {
        let mut out = Vec::with_capacity(self.numel());
        for p in &self.entries {
            out.extend_from_slice(p.tensor.grad()?);
        }
        Some(out)
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    adam: AdamState {
                        m: p.adam.m.iter().map(|v| U::of(v.as_f64())).collect(),
                        v: p.adam.v.iter().map(|v| U::of(v.as_f64())).collect(),
                        step: p.adam.step,
                    },
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    /// One update of every parameter from its stored gradient. Gradients are
    /// consumed.
    pub fn step<T: Scalar>(&self, params: &mut ParameterSet<T>) -> Result<()> {
        if let Some(p) = params.iter().find(|p| p.tensor.grad().is_none()) {
            return Err(Error::Training(format!("missing gradient for parameter {:?}", p.name)));
        }
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (lr, eps) = (T::of(self.lr), T::of(self.eps));
        for p in params.iter_mut() {
            let grad = p.tensor.take_grad().expect("checked above");
            let st = &mut p.adam;
            st.step += 1;
            let bc1 = T::one() - b1.powi(st.step as i32);
            let bc2 = T::one() - b2.powi(st.step as i32);
            for (((w, &g), m), v) in p.tensor.data_mut().iter_mut().zip(&grad).zip(&mut st.m).zip(&mut st.v) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Running statistics for one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T> {
    pub channels: usize,
    running: Option<(Vec<T>, Vec<T>)>,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        Self { channels, running: None }
    }

    /// Zero mean, unit variance: eval mode then reduces to the affine map.
    pub fn identity(channels: usize) -> Self {
        Self {
            channels,
            running: Some((vec![T::zero(); channels], vec![T::one(); channels])),
        }
    }

    pub fn from_parts(mean: Vec<T>, var: Vec<T>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::shape("running statistics", mean.len(), var.len()));
        }
        Ok(Self {
            channels: mean.len(),
            running: Some((mean, var)),
        })
    }

    pub fn is_initialized(&self) -> bool {
        self.running.is_some()
    }

    pub fn running(&self) -> Option<(&[T], &[T])> {
        self.running.as_ref().map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// Statistics for eval mode; an error before any training step.
    pub fn eval_stats(&self) -> Result<(&[T], &[T])> {
        self.running().ok_or_else(|| {
            Error::Training("batch norm running statistics uninitialized; train first or seed identity statistics".into())
        })
    }

    /// Folds in batch statistics (biased variance over `count` values) with
    /// momentum 0.1; the running variance uses the unbiased estimate.
    pub fn update(&mut self, mean: &[T], var: &[T], count: usize) {
        let mom = T::of(BATCH_NORM_MOMENTUM);
        let unbias = if count > 1 {
            T::of(count as f64 / (count - 1) as f64)
        } else {
            T::one()
        };
        match &mut self.running {
            None => {
                self.running = Some((mean.to_vec(), var.iter().map(|&v| v * unbias).collect()));
            }
            Some((rm, rv)) => {
                for (r, &m) in rm.iter_mut().zip(mean) {
                    *r = (T::one() - mom) * *r + mom * m;
                }
                for (r, &v) in rv.iter_mut().zip(var) {
                    *r = (T::one() - mom) * *r + mom * v * unbias;
                }
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> BatchNormState<U> {
        BatchNormState {
            channels: self.channels,
            running: self.running.as_ref().map(|(m, v)| {
                (
                    m.iter().map(|x| U::of(x.as_f64())).collect(),
                    v.iter().map(|x| U::of(x.as_f64())).collect(),
                )
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(value: f64) -> ParameterSet<f64> {
        let mut ps = ParameterSet::new();
        ps.add("w", Tensor::from_f64(&[1], &[value]).unwrap()).unwrap();
        ps
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = scalar_set(0.0);
        assert!(ps.add("w", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut ps = scalar_set(0.7);
        ps.get_mut(0).tensor.set_grad(vec![0.0]).unwrap();
        Adam::default().step(&mut ps).unwrap();
        assert_eq!(ps.get(0).tensor.data(), &[0.7]);
        assert_eq!(ps.get(0).adam.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = 1, v̂ = 1 after bias correction ⇒ Δ = −lr / (1 + eps).
        let mut ps = scalar_set(0.0);
        ps.get_mut(0).tensor.set_grad(vec![1.0]).unwrap();
        let adam = Adam {
            lr: 0.001,
            ..Adam::default()
        };
        adam.step(&mut ps).unwrap();
        let expected = -0.001 / (1.0 + 1e-8);
        assert!((ps.get(0).tensor.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut ps = scalar_set(0.0);
        let err = Adam::default().step(&mut ps).unwrap_err();
        assert!(err.to_string().contains("\"w\""), "{err}");
    }

    #[test]
    fn flatten_roundtrip() {
        let mut ps = ParameterSet::<f64>::new();
        ps.add("a", Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap()).unwrap();
        ps.add("b", Tensor::from_f64(&[1], &[3.0]).unwrap()).unwrap();
        let flat = ps.flatten();
        assert_eq!(flat, vec![1.0, 2.0, 3.0]);
        ps.assign_flat(&[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(ps.by_name("b").unwrap().tensor.data(), &[6.0]);
    }

    #[test]
    fn batch_norm_state_lifecycle() {
        let mut st = BatchNormState::<f64>::new(1);
        assert!(st.eval_stats().is_err());
        st.update(&[2.0], &[1.0], 2);
        let (m, v) = st.eval_stats().unwrap();
        assert_eq!((m[0], v[0]), (2.0, 2.0));
        st.update(&[0.0], &[0.5], 2);
        let (m, v) = st.eval_stats().unwrap();
        assert!((m[0] - 1.8).abs() < 1e-12);
        assert!((v[0] - 1.9).abs() < 1e-12);
        assert!(BatchNormState::<f32>::identity(3).eval_stats().is_ok());
    }
}
