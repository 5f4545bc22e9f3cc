//! Named parameter storage and the Adam update rule.

use super::{Array, TapeError};

/// An ordered collection of named parameter arrays. Order is part of the
/// contract: gradients are passed back in the same order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Array) -> usize {
        self.names.push(name.to_string());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn value(&self, idx: usize) -> &Array {
        &self.values[idx]
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut Array {
        &mut self.values[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Bytewise fingerprint of all values; used to assert that a training
    /// phase left a player untouched.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.values {
            for x in v.data() {
                h ^= x.to_bits();
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

/// Bias-corrected Adam state for one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamState {
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    m: Vec<Array>,
    v: Vec<Array>,
}

impl AdamState {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        Self::with_betas(params, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(params: &ParamStore, lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        AdamState {
            step: 0,
            lr,
            beta1,
            beta2,
            epsilon,
            m: (0..params.len())
                .map(|i| Array::zeros(params.value(i).shape()))
                .collect(),
            v: (0..params.len())
                .map(|i| Array::zeros(params.value(i).shape()))
                .collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update of every parameter in `params` against
    /// `grads` (same order and shapes as the store).
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Array]) -> Result<(), TapeError> {
        if grads.len() != params.len() {
            return Err(TapeError::BadArg {
                op: "adam_step",
                what: format!("{} grads for {} params", grads.len(), params.len()),
            });
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != params.value(i).shape() {
                return Err(TapeError::ShapeMismatch {
                    op: "adam_step",
                    lhs: g.shape().to_vec(),
                    rhs: params.value(i).shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (i, g) in grads.iter().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.value_mut(i).data_mut();
            for k in 0..g.len() {
                let gk = g.data()[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                p[k] -= self.lr * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// Standalone Adam update matching [`AdamState::step`]; exposed for
/// callers that manage raw parameter slices.
pub fn adam_step(state: &mut AdamState, params: &mut ParamStore, grads: &[Array]) -> Result<(), TapeError> {
    state.step(params, grads)
}
