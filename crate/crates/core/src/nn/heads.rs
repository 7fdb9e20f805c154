use rand_chacha::ChaCha8Rng;

use super::layers::{BatchNorm1d, Linear, Module};
use super::Mode;
use crate::autograd::{BatchStats, Tape, Var};
use crate::error::TensorError;
use crate::tensor::{Scalar, Tensor};

type Result<T> = std::result::Result<T, TensorError>;

pub const CLASSIFIER_HIDDEN: usize = 128;
pub const MI_HIDDEN: usize = 128;

/// `D` / `D'`: dense layer followed by batch normalisation, no activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Disentangler<S> {
    pub fc: Linear<S>,
    pub norm: BatchNorm1d<S>,
}

impl<S: Scalar> Disentangler<S> {
    pub fn new(latent_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            fc: Linear::new(latent_dim, latent_dim, rng)?,
            norm: BatchNorm1d::new(latent_dim),
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        p: &[Var],
        x: Var,
        train: bool,
    ) -> Result<(Var, Option<BatchStats<f64>>)> {
        let h = self.fc.forward(tape, &p[0..2], x)?;
        self.norm.forward(tape, &p[2..4], h, train)
    }
}

impl<S: Scalar> Module<S> for Disentangler<S> {
    fn params(&self) -> Vec<(String, &Tensor<S>)> {
        let mut v = self.fc.named("fc");
        v.extend(self.norm.named("bn"));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut v = self.fc.tensors_mut();
        v.extend(self.norm.tensors_mut());
        v
    }

    fn buffers(&self) -> Vec<(String, &Tensor<S>)> {
        self.norm.named_buffers("bn")
    }

    fn buffers_mut(&mut self) -> Vec<&mut Tensor<S>> {
        self.norm.buffers_mut()
    }
}

/// `C` / `C'`: dense, ReLU, dropout, dense, softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier<S> {
    pub fc1: Linear<S>,
    pub fc2: Linear<S>,
    pub dropout: f64,
}

impl<S: Scalar> Classifier<S> {
    pub fn new(input: usize, classes: usize, dropout: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        if classes < 2 {
            return Err(TensorError::InvalidArgument(format!("need at least 2 classes, got {classes}")));
        }
        Ok(Self {
            fc1: Linear::new(input, CLASSIFIER_HIDDEN, rng)?,
            fc2: Linear::new(CLASSIFIER_HIDDEN, classes, rng)?,
            dropout,
        })
    }

    pub fn classes(&self) -> usize {
        self.fc2.output_dim()
    }

    /// Pre-softmax scores.
    pub fn logits(&self, tape: &mut Tape<S>, p: &[Var], x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        let h = self.fc1.forward(tape, &p[0..2], x)?;
        let mut h = tape.relu(h)?;
        if let Mode::Train(rng) = mode {
            h = tape.dropout(h, self.dropout, &mut **rng)?;
        }
        self.fc2.forward(tape, &p[2..4], h)
    }

    /// Class probabilities, one row per sample.
    pub fn forward(&self, tape: &mut Tape<S>, p: &[Var], x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        let z = self.logits(tape, p, x, mode)?;
        tape.softmax(z)
    }
}

impl<S: Scalar> Module<S> for Classifier<S> {
    fn params(&self) -> Vec<(String, &Tensor<S>)> {
        let mut v = self.fc1.named("fc1");
        v.extend(self.fc2.named("fc2"));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut v = self.fc1.tensors_mut();
        v.extend(self.fc2.tensors_mut());
        v
    }
}

/// `R`: one dense layer from `[z_sig | z_red]` back to the encoder width.
#[derive(Clone, Debug, PartialEq)]
pub struct Reconstructor<S> {
    pub fc: Linear<S>,
}

impl<S: Scalar> Reconstructor<S> {
    pub fn new(latent_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            fc: Linear::new(2 * latent_dim, latent_dim, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<S>, p: &[Var], z_sig: Var, z_red: Var) -> Result<Var> {
        let joined = tape.concat(&[z_sig, z_red])?;
        self.fc.forward(tape, p, joined)
    }
}

impl<S: Scalar> Module<S> for Reconstructor<S> {
    fn params(&self) -> Vec<(String, &Tensor<S>)> {
        self.fc.named("fc")
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        self.fc.tensors_mut()
    }
}

/// `M`: statistics network scoring `(z_sig, z_red)` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct MiNetwork<S> {
    pub fc1: Linear<S>,
    pub fc2: Linear<S>,
}

impl<S: Scalar> MiNetwork<S> {
    pub fn new(sig_dim: usize, red_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(sig_dim + red_dim, MI_HIDDEN, rng)?,
            fc2: Linear::new(MI_HIDDEN, 1, rng)?,
        })
    }

    /// `(n, d_sig), (n, d_red) → (n, 1)`.
    pub fn forward(&self, tape: &mut Tape<S>, p: &[Var], z_sig: Var, z_red: Var) -> Result<Var> {
        let joined = tape.concat(&[z_sig, z_red])?;
        let h = self.fc1.forward(tape, &p[0..2], joined)?;
        let h = tape.relu(h)?;
        self.fc2.forward(tape, &p[2..4], h)
    }
}

impl<S: Scalar> Module<S> for MiNetwork<S> {
    fn params(&self) -> Vec<(String, &Tensor<S>)> {
        let mut v = self.fc1.named("fc1");
        v.extend(self.fc2.named("fc2"));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut v = self.fc1.tensors_mut();
        v.extend(self.fc2.tensors_mut());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded_rng;

    #[test]
    fn classifier_uniform_logits_give_uniform_probabilities() {
        let mut rng = seeded_rng(1);
        let mut c: Classifier<f64> = Classifier::new(4, 12, 0.5, &mut rng).unwrap();
        // zero second layer -> all logits equal
        c.fc2.weight = Tensor::zeros(&[CLASSIFIER_HIDDEN, 12]);
        let mut tape = Tape::new();
        let p = c.bind(&mut tape, false);
        let x = tape.constant(Tensor::from_f64(&[3, 4], &[0.3; 12]).unwrap());
        let y = c.forward(&mut tape, p.vars(), x, &mut Mode::Eval).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 12.0).abs() < 1e-12);
        }
    }

    #[test]
    fn reconstructor_dimensions() {
        let r: Reconstructor<f32> = Reconstructor::new(592, &mut seeded_rng(2)).unwrap();
        assert_eq!(r.fc.input_dim(), 1184);
        assert_eq!(r.fc.output_dim(), 592);
    }

    #[test]
    fn mi_network_scores_each_pair() {
        let m: MiNetwork<f32> = MiNetwork::new(3, 3, &mut seeded_rng(3)).unwrap();
        let mut tape = Tape::new();
        let p = m.bind(&mut tape, false);
        let a = tape.constant(Tensor::ones(&[64, 3]));
        let b = tape.constant(Tensor::ones(&[64, 3]));
        let t = m.forward(&mut tape, p.vars(), a, b).unwrap();
        assert_eq!(tape.shape(t), &[64, 1]);
    }

    #[test]
    fn head_dimension_mismatch_is_an_error() {
        let c: Classifier<f32> = Classifier::new(8, 3, 0.5, &mut seeded_rng(4)).unwrap();
        let mut tape = Tape::new();
        let p = c.bind(&mut tape, false);
        let x = tape.constant(Tensor::ones(&[2, 7]));
        assert!(matches!(
            c.forward(&mut tape, p.vars(), x, &mut Mode::Eval),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn parameter_counts_are_fixed_by_widths() {
        let mut rng = seeded_rng(5);
        let d: Disentangler<f32> = Disentangler::new(32, &mut rng).unwrap();
        assert_eq!(d.param_count(), 32 * 32 + 32 + 2 * 32);
        let c: Classifier<f32> = Classifier::new(32, 6, 0.5, &mut rng).unwrap();
        assert_eq!(c.param_count(), 32 * 128 + 128 + 128 * 6 + 6);
        let r: Reconstructor<f32> = Reconstructor::new(32, &mut rng).unwrap();
        assert_eq!(r.param_count(), 64 * 32 + 32);
        let m: MiNetwork<f32> = MiNetwork::new(32, 32, &mut rng).unwrap();
        assert_eq!(m.param_count(), 64 * 128 + 128 + 128 + 1);
    }
}
