//! Adam with global gradient-norm clipping. Moments live outside the
//! parameter store so the optimizer state can be checkpointed next to the
//! weights it belongs to.

use rnf_core::nets::{BoundParams, ParamId, ParamStore};
use rnf_core::{Tape, Tensor};

use crate::{HarnessError, Result};

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    /// Global gradient-norm ceiling; gradients are rescaled when the norm
    /// across all trainable parameters exceeds it.
    clip: f64,
    /// Update count (the `t` in the bias corrections).
    t: u64,
    ids: Vec<ParamId>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// How many steps triggered clipping so far (for logging).
    pub clip_events: u64,
}

impl Adam {
    /// Optimizer over every trainable parameter of `store`, in registration
    /// order. `lr` and `clip` come from the run config; betas and epsilon
    /// are the customary defaults.
    pub fn new(store: &ParamStore, lr: f64, clip: f64) -> Adam {
        let ids = store.trainable_ids();
        let sizes: Vec<usize> = ids.iter().map(|&id| store.get(id).data().len()).collect();
        Adam {
            lr,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS,
            clip,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            ids,
            clip_events: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Moments in trainable-id order, for checkpointing.
    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// Restore checkpointed state. Lengths must match the store this
    /// optimizer was built over.
    pub fn restore(&mut self, t: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>, clip_events: u64) -> Result<()> {
        let shapes_match = m.len() == self.m.len()
            && v.len() == self.v.len()
            && m.iter().zip(&self.m).all(|(a, b)| a.len() == b.len())
            && v.iter().zip(&self.v).all(|(a, b)| a.len() == b.len());
        if !shapes_match {
            return Err(HarnessError::Config(
                "checkpointed optimizer state does not match the model".into(),
            ));
        }
        self.t = t;
        self.m = m;
        self.v = v;
        self.clip_events = clip_events;
        Ok(())
    }

    /// One update from the gradients accumulated on `tape`. Parameters the
    /// tape never touched get a zero gradient (their moments keep decaying).
    /// Returns whether clipping fired. A non-finite gradient norm is a
    /// numerical abort before any parameter is modified.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        tape: &Tape,
        bound: &BoundParams,
    ) -> Result<bool> {
        let mut grads: Vec<Vec<f64>> = Vec::with_capacity(self.ids.len());
        for (slot, &id) in self.ids.iter().enumerate() {
            match tape.grad(bound.var(id)) {
                Some(g) => grads.push(g.to_vec()),
                None => grads.push(vec![0.0; self.m[slot].len()]),
            }
        }
        let norm = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|&g| g * g)
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(HarnessError::Numerical(format!(
                "gradient norm is not finite ({norm})"
            )));
        }
        let clipped = norm > self.clip;
        if clipped {
            let scale = self.clip / norm;
            for g in &mut grads {
                for gi in g.iter_mut() {
                    *gi *= scale;
                }
            }
            self.clip_events += 1;
        }

        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (slot, &id) in self.ids.iter().enumerate() {
            let g = &grads[slot];
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            let old = store.get(id);
            let mut data = old.data().to_vec();
            for i in 0..data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            let shape = (old.rows(), old.cols());
            let updated = Tensor::matrix(shape.0, shape.1, data)?;
            store.set(id, updated)?;
        }
        Ok(clipped)
    }
}
