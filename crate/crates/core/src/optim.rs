use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{Error, Result};

/// RMSProp without momentum: `v = a v + (1 - a) g^2`,
/// `p -= lr g / (sqrt(v) + eps)`.
pub struct RmsProp {
    params: Vec<(Var, Option<Tensor>)>,
    lr: f64,
    alpha: f64,
    eps: f64,
}

impl RmsProp {
    pub const ALPHA: f64 = 0.99;
    pub const EPS: f64 = 1e-8;

    pub fn new(vars: Vec<Var>, lr: f64) -> Result<Self> {
        Self::with_params(vars, lr, Self::ALPHA, Self::EPS)
    }

    pub fn with_params(vars: Vec<Var>, lr: f64, alpha: f64, eps: f64) -> Result<Self> {
        if !(lr > 0.0) || !(0.0..1.0).contains(&alpha) || !(eps > 0.0) {
            return Err(Error::Config(format!(
                "invalid RMSProp settings lr={lr} alpha={alpha} eps={eps}"
            )));
        }
        Ok(Self {
            params: vars.into_iter().map(|v| (v, None)).collect(),
            lr,
            alpha,
            eps,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Applies one update. Variables absent from `grads` are left untouched
    /// and keep their running average.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        for (var, avg) in self.params.iter_mut() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // Gradients carry the backward graph; keeping them would pin it.
            let g = g.detach();
            let g2 = g.sqr()?;
            let v = match avg.as_ref() {
                Some(prev) => ((prev * self.alpha)? + (g2 * (1.0 - self.alpha))?)?,
                None => (g2 * (1.0 - self.alpha))?,
            };
            let denom = (v.sqrt()? + self.eps)?;
            let update = (g.div(&denom)? * self.lr)?;
            var.set(&var.as_tensor().sub(&update)?)?;
            *avg = Some(v.detach());
        }
        Ok(())
    }

    pub fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        let grads = loss.backward()?;
        self.step(&grads)
    }
}
