//! Named parameter storage and the SGD optimizer.

use super::tensor::{Shape, Tensor};
use super::Scalar;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// How a parameter participates in optimization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Regular weight: trained, weight decay applies.
    Weight,
    /// Bias or normalization scale/shift: trained, no weight decay.
    NoDecay,
    /// Running statistic: serialized but never stepped.
    Buffer,
}

pub struct ParamStore<S: Scalar> {
    names: Vec<String>,
    values: Vec<Tensor<S>>,
    kinds: Vec<ParamKind>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            kinds: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<S>, kind: ParamKind) -> ParamId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name}"
        );
        self.names.push(name.to_string());
        self.values.push(value);
        self.kinds.push(kind);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.kinds[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<S>, ParamKind)> {
        (0..self.values.len())
            .map(|i| (ParamId(i), self.names[i].as_str(), &self.values[i], self.kinds[i]))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters (all kinds).
    pub fn numel(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }
}

/// He-style normal initialization for a conv/dense weight with the given
/// fan-in, drawn from the provided stream.
pub fn he_init<S: Scalar>(shape: Shape, fan_in: usize, rng: &mut Rng) -> Tensor<S> {
    let std = (2.0 / fan_in as f64).sqrt();
    let data = (0..shape.numel())
        .map(|_| S::from_f64(rng.normal() * std))
        .collect();
    Tensor::from_vec(shape, data)
}

/// SGD with momentum and decoupled-per-kind weight decay. Velocity buffers
/// are part of the training state and serialize with checkpoints.
pub struct Sgd<S: Scalar> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor<S>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(store: &ParamStore<S>, momentum: f64, weight_decay: f64) -> Self {
        let velocity = store
            .iter()
            .map(|(_, _, v, _)| Tensor::zeros(v.shape))
            .collect();
        Sgd {
            momentum,
            weight_decay,
            velocity,
        }
    }

    /// v ← μ·v + g + λ·w (λ only on Weight params); w ← w − lr·v
    pub fn step(
        &mut self,
        store: &mut ParamStore<S>,
        grads: &[Option<Tensor<S>>],
        lr: f64,
    ) {
        let mu = S::from_f64(self.momentum);
        let lr_s = S::from_f64(lr);
        for i in 0..store.len() {
            let id = ParamId(i);
            match store.kind(id) {
                ParamKind::Buffer => continue,
                kind => {
                    let Some(g) = grads[i].as_ref() else { continue };
                    let decay = if kind == ParamKind::Weight {
                        S::from_f64(self.weight_decay)
                    } else {
                        S::ZERO
                    };
                    let w = store.value_mut(id);
                    let v = &mut self.velocity[i];
                    for j in 0..w.data.len() {
                        v.data[j] = v.data[j] * mu + g.data[j] + w.data[j] * decay;
                        w.data[j] -= lr_s * v.data[j];
                    }
                }
            }
        }
    }

    pub fn velocity(&self) -> &[Tensor<S>] {
        &self.velocity
    }

    pub fn velocity_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.velocity
    }
}

/// Global L2 clipping over all gradients; returns the pre-clip norm.
pub fn clip_grad_norm<S: Scalar>(grads: &mut [Option<Tensor<S>>], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter().flatten() {
        for &v in &g.data {
            let f = v.to_f64();
            sq += f * f;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = S::from_f64(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            for v in &mut g.data {
                *v *= scale;
            }
        }
    }
    norm
}
