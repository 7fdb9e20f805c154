//! MINE used on its own: fit a statistics network to paired samples and read
//! off the Donsker–Varadhan bound.

use rand::seq::SliceRandom;

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::losses::mine_loss;
use crate::nn::{derive_seed, seeded_rng, MiNetwork, Module};
use crate::optim::Adam;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MineEstimator {
    /// Full-batch ascent steps, each with a fresh marginal shuffle.
    pub steps: usize,
    pub lr: f64,
    /// Shuffles averaged for the final estimate.
    pub eval_shuffles: usize,
    pub seed: u64,
}

impl Default for MineEstimator {
    fn default() -> Self {
        Self {
            steps: 600,
            lr: 1e-3,
            eval_shuffles: 8,
            seed: 0,
        }
    }
}

impl MineEstimator {
    /// Estimated mutual information (nats) between the rows of `x` and `y`,
    /// both shaped `(n, d)`.
    pub fn estimate(&self, x: &Tensor<f64>, y: &Tensor<f64>) -> Result<f64> {
        let (xs, ys) = (x.shape(), y.shape());
        if xs.len() != 2 || ys.len() != 2 || xs[0] != ys[0] {
            return Err(Error::Config(format!("paired samples need (n, d) shapes, got {xs:?} and {ys:?}")));
        }
        let n = xs[0];
        let mut rng = seeded_rng(derive_seed(self.seed, &[1]));
        let mut m: MiNetwork<f64> = MiNetwork::new(xs[1], ys[1], &mut rng)?;
        let mut adam = Adam::new(self.lr);
        let mut perm: Vec<usize> = (0..n).collect();
        for _ in 0..self.steps {
            perm.shuffle(&mut rng);
            let mut tape = Tape::new();
            let p = m.bind(&mut tape, true);
            let (a, b) = (tape.constant(x.clone()), tape.constant(y.clone()));
            let bound = mine_loss(&mut tape, &m, p.vars(), a, b, &perm)?;
            tape.backward(bound)?;
            let grads: Vec<_> = p.vars().iter().map(|&v| tape.grad(v)).collect();
            adam.step_signed(m.params_mut(), &grads, -1.0)?;
        }
        let mut total = 0.0;
        for _ in 0..self.eval_shuffles.max(1) {
            perm.shuffle(&mut rng);
            let mut tape = Tape::new();
            let p = m.bind(&mut tape, false);
            let (a, b) = (tape.constant(x.clone()), tape.constant(y.clone()));
            let bound = mine_loss(&mut tape, &m, p.vars(), a, b, &perm)?;
            total += tape.value(bound).item();
        }
        Ok(total / self.eval_shuffles.max(1) as f64)
    }
}
