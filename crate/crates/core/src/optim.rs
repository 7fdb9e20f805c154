//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Moment estimates for one group of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<S> {
    pub lr: f64,
    pub step: u64,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Descends along `grads`.
    pub fn step(&mut self, params: Vec<&mut Tensor<S>>, grads: &[Option<&Tensor<S>>]) -> Result<()> {
        self.step_signed(params, grads, 1.0)
    }

    /// `sign = -1` ascends instead of descending.
    pub fn step_signed(&mut self, params: Vec<&mut Tensor<S>>, grads: &[Option<&Tensor<S>>], sign: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Config(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let g = g.ok_or(Error::MissingGradient(i))?;
            if g.shape() != p.shape() || self.m[i].shape() != p.shape() {
                return Err(Error::Config(format!(
                    "parameter {i}: shape {:?}, gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for (i, p) in params.into_iter().enumerate() {
            let g = grads[i].expect("checked above").data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = sign * g[j].to_f64();
                let mj = BETA1 * m[j].to_f64() + (1.0 - BETA1) * gj;
                let vj = BETA2 * v[j].to_f64() + (1.0 - BETA2) * gj * gj;
                m[j] = S::from_f64(mj);
                v[j] = S::from_f64(vj);
                let update = self.lr * (mj / c1) / ((vj / c2).sqrt() + ADAM_EPS);
                *w = S::from_f64(w.to_f64() - update);
            }
        }
        Ok(())
    }
}
