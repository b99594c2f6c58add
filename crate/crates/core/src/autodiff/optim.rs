use super::params::{Gradients, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Noam-style warmup: `factor * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoamSchedule {
    /// The transformer-learning factor.
    pub factor: f64,
    pub d_model: usize,
    pub warmup: usize,
}

impl NoamSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup.max(1) as f64;
        self.factor * (self.d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd { lr: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64, schedule: NoamSchedule },
}

impl OptimizerKind {
    /// Adam with the usual transformer betas.
    pub fn adam_noam(factor: f64, d_model: usize, warmup: usize) -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.98, eps: 1e-9, schedule: NoamSchedule { factor, d_model, warmup } }
    }
}

pub struct Optimizer<S> {
    pub kind: OptimizerKind,
    step: usize,
    m: Vec<Option<Tensor<S>>>,
    v: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Optimizer<S> {
    pub fn new(kind: OptimizerKind) -> Self {
        Self { kind, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Learning rate the next call to [`Optimizer::step`] will use.
    pub fn current_lr(&self) -> f64 {
        match self.kind {
            OptimizerKind::Sgd { lr } => lr,
            OptimizerKind::Adam { schedule, .. } => schedule.lr(self.step + 1),
        }
    }

    /// Applies one update to every trainable parameter that has a gradient.
    /// All gradients are checked before any parameter is touched.
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &Gradients<S>) -> Result<()> {
        for (id, g) in grads.iter() {
            if g.shape() != store.value(id).shape() {
                return Err(Error::shape(
                    "optimizer_step",
                    format!("`{}` gradient {:?} vs {:?}", store.name(id), g.shape(), store.value(id).shape()),
                ));
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(store.name(id).to_string()));
            }
        }
        let lr = S::lit(self.current_lr());
        self.step += 1;
        if lr <= S::zero() {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        let n = store.len();
        self.m.resize(n, None);
        self.v.resize(n, None);
        for (id, g) in grads.iter() {
            if !store.is_trainable(id) {
                continue;
            }
            match self.kind {
                OptimizerKind::Sgd { .. } => {
                    for (p, &gv) in store.value_mut(id).data_mut().iter_mut().zip(g.data()) {
                        *p -= lr * gv;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps, .. } => {
                    let (b1, b2, e) = (S::lit(beta1), S::lit(beta2), S::lit(eps));
                    let m = self.m[id.index()].get_or_insert_with(|| Tensor::zeros(g.shape()));
                    let v = self.v[id.index()].get_or_insert_with(|| Tensor::zeros(g.shape()));
                    let t = self.step as i32;
                    let c1 = S::one() - b1.powi(t);
                    let c2 = S::one() - b2.powi(t);
                    let p = store.value_mut(id).data_mut();
                    for k in 0..p.len() {
                        let gv = g.data()[k];
                        let mk = &mut m.data_mut()[k];
                        *mk = b1 * *mk + (S::one() - b1) * gv;
                        let vk = &mut v.data_mut()[k];
                        *vk = b2 * *vk + (S::one() - b2) * gv * gv;
                        let mhat = m.data()[k] / c1;
                        let vhat = v.data()[k] / c2;
                        p[k] -= lr * mhat / (vhat.sqrt() + e);
                    }
                }
            }
        }
        Ok(())
    }
}
