//! Named parameter storage, freeze masks, and optimizers.

use std::collections::HashMap;

use crate::error::{EvccError, Result};
use crate::tensor::{Scalar, Tape, Tensor, TensorId};

/// Handle to a parameter inside a [`ParamStore`]. Stable across forwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub frozen: bool,
}

/// Ordered collection of named parameters. Insertion order is the canonical
/// order used for checkpoints and optimizer state, so it must be
/// deterministic.
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id.0);
        self.params.push(Param { name, value, frozen: false });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total scalar count, optionally restricted to trainable parameters.
    pub fn count_scalars(&self, trainable_only: bool) -> usize {
        self.params
            .iter()
            .filter(|p| !trainable_only || !p.frozen)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Freeze every parameter whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.frozen = true;
                n += 1;
            }
        }
        n
    }

    /// Register every parameter on a tape (frozen ones as no-grad leaves)
    /// and return the tape ids in parameter order.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<TensorId> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), !p.frozen))
            .collect()
    }

    /// Convert every parameter to another scalar type (used to lift an f32
    /// model into f64 for gradient checking).
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            let id = out.push(p.name.clone(), p.value.cast::<U>());
            out.get_mut(id).frozen = p.frozen;
        }
        out
    }
}

/// Optimizer choice, selected by `train.optimizer`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimKind {
    /// Plain SGD. No state; resume is trivially exact.
    Sgd,
    /// First/second-moment adaptive optimizer (Adam).
    Adam,
}

impl std::str::FromStr for OptimKind {
    type Err = EvccError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimKind::Sgd),
            "adam" => Ok(OptimKind::Adam),
            other => Err(EvccError::Config(format!(
                "unknown optimizer {other:?} (expected sgd|adam)"
            ))),
        }
    }
}

/// Cosine-annealed step size: lr(t) = lr0 * 0.5 * (1 + cos(pi * t / total)).
pub fn cosine_lr(lr0: f64, step: u64, total_steps: u64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let t = (step.min(total_steps)) as f64 / total_steps as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

pub struct Optimizer<T> {
    kind: OptimKind,
    lr0: f64,
    total_steps: u64,
    /// Adam moments per parameter, allocated lazily; empty for SGD.
    moments: Vec<Option<(Vec<T>, Vec<T>)>>,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimKind, lr0: f64, total_steps: u64, n_params: usize) -> Self {
        Optimizer {
            kind,
            lr0,
            total_steps,
            moments: (0..n_params).map(|_| None).collect(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn kind(&self) -> OptimKind {
        self.kind
    }

    /// Apply one update. `step` is the 0-based step index about to be taken;
    /// `grads[i]` must align with the store order (None for frozen params).
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Vec<T>>], step: u64) {
        let lr = cosine_lr(self.lr0, step, self.total_steps);
        let lr_t = T::from_f64(lr);
        for (i, grad) in grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            let p = &mut store.params[i];
            if p.frozen {
                continue;
            }
            match self.kind {
                OptimKind::Sgd => {
                    for (w, &gv) in p.value.data_mut().iter_mut().zip(g) {
                        *w = *w - lr_t * gv;
                    }
                }
                OptimKind::Adam => {
                    let n = p.value.numel();
                    let (m, v) = self.moments[i]
                        .get_or_insert_with(|| (vec![T::ZERO; n], vec![T::ZERO; n]));
                    let b1 = T::from_f64(self.beta1);
                    let b2 = T::from_f64(self.beta2);
                    let one_m_b1 = T::from_f64(1.0 - self.beta1);
                    let one_m_b2 = T::from_f64(1.0 - self.beta2);
                    // bias correction uses the 1-based update count
                    let t = (step + 1) as i32;
                    let c1 = T::from_f64(1.0 / (1.0 - self.beta1.powi(t)));
                    let c2 = T::from_f64(1.0 / (1.0 - self.beta2.powi(t)));
                    let eps = T::from_f64(self.eps);
                    for (j, (w, &gv)) in p.value.data_mut().iter_mut().zip(g).enumerate() {
                        m[j] = b1 * m[j] + one_m_b1 * gv;
                        v[j] = b2 * v[j] + one_m_b2 * gv * gv;
                        let mhat = m[j] * c1;
                        let vhat = v[j] * c2;
                        *w = *w - lr_t * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
    }

    /// Adam moment tensors for checkpointing, in (name, tensor) pairs.
    pub fn state_tensors(&self, store: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (i, mom) in self.moments.iter().enumerate() {
            if let Some((m, v)) = mom {
                let shape = store.params[i].value.shape();
                let name = &store.params[i].name;
                out.push((format!("optim.m.{name}"), Tensor::new(shape, m.clone()).unwrap()));
                out.push((format!("optim.v.{name}"), Tensor::new(shape, v.clone()).unwrap()));
            }
        }
        out
    }

    /// Restore Adam moments saved by `state_tensors`.
    pub fn load_state(&mut self, store: &ParamStore<T>, tensors: &HashMap<String, Tensor<T>>) {
        for (i, p) in store.params.iter().enumerate() {
            let m = tensors.get(&format!("optim.m.{}", p.name));
            let v = tensors.get(&format!("optim.v.{}", p.name));
            if let (Some(m), Some(v)) = (m, v) {
                self.moments[i] = Some((m.data().to_vec(), v.data().to_vec()));
            }
        }
    }
}
