//! Nesterov-momentum SGD and Adam.

use indexmap::IndexMap;

use crate::error::{invalid, Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    SgdNesterov { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    /// Adam with the segmentation settings `β1 = 0.9`, `β2 = 0.999`.
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// SGD with Nesterov momentum `ρ = 0.9`.
    pub fn nesterov() -> Self {
        OptimizerKind::SgdNesterov { momentum: 0.9 }
    }
}

#[derive(Clone, Debug)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    steps: u64,
    state: IndexMap<String, Slot>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            steps: 0,
            state: IndexMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update. All gradients are validated before any parameter
    /// changes; a non-finite gradient rejects the whole step.
    pub fn step<'a, I>(&mut self, params: &mut ParamStore, grads: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, Tensor)>,
    {
        self.step_scaled(params, grads, |_| 1.0)
    }

    /// [`Optimizer::step`] with the learning rate of each parameter multiplied
    /// by `scale(name)`.
    pub fn step_scaled<'a, I>(&mut self, params: &mut ParamStore, grads: I, scale: impl Fn(&str) -> f64) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, Tensor)>,
    {
        let grads: Vec<(&str, Tensor)> = grads.into_iter().collect();
        for (name, g) in &grads {
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(Error::ParameterShape {
                    name: name.to_string(),
                    expected: p.shape(),
                    actual: g.shape(),
                });
            }
            if params.kind(name) != Some(ParamKind::Trainable) {
                return Err(invalid("optimizer_step", format!("`{name}` is not trainable")));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        for (name, g) in grads {
            let lr = self.lr * scale(name);
            let p = params.get_mut(name)?;
            let slot = self.state.entry(name.to_string()).or_insert_with(|| Slot {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            match self.kind {
                OptimizerKind::SgdNesterov { momentum } => {
                    for ((w, &gv), buf) in p.data_mut().iter_mut().zip(g.data()).zip(slot.m.iter_mut()) {
                        *buf = momentum * *buf + gv;
                        *w -= lr * (gv + momentum * *buf);
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for (i, (w, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        slot.m[i] = beta1 * slot.m[i] + (1.0 - beta1) * gv;
                        slot.v[i] = beta2 * slot.v[i] + (1.0 - beta2) * gv * gv;
                        let mh = slot.m[i] / c1;
                        let vh = slot.v[i] / c2;
                        *w -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
