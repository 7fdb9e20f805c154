//! Parameterised layers, the two encoder architectures and the BPD heads.

mod encoder;
mod heads;
mod init;
mod layers;

pub use encoder::{CnnEncoder, ConvLstmEncoder, Encoder, EncoderKind, EncoderSpec};
pub use heads::{Classifier, Disentangler, MiNetwork, Reconstructor, CLASSIFIER_HIDDEN, MI_HIDDEN};
pub use init::{derive_seed, seeded_rng, xavier_normal, xavier_std};
pub use layers::{BatchNorm1d, Bound, Conv1d, Linear, Lstm, Module};

use rand::RngCore;

use crate::autograd::BatchStats;

/// Whether a forward pass trains (dropout active, batch statistics) or
/// evaluates (identity dropout, running statistics).
pub enum Mode<'a> {
    Train(&'a mut dyn RngCore),
    Eval,
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Per-forward bookkeeping: the mode, which components ran, and batch
/// statistics waiting to be folded into running averages.
pub struct Session<'a> {
    pub mode: Mode<'a>,
    pub(crate) trace: Vec<&'static str>,
    pub(crate) norm_updates: Vec<(&'static str, BatchStats<f64>)>,
}

impl<'a> Session<'a> {
    pub fn train(rng: &'a mut dyn RngCore) -> Self {
        Self {
            mode: Mode::Train(rng),
            trace: Vec::new(),
            norm_updates: Vec::new(),
        }
    }

    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            trace: Vec::new(),
            norm_updates: Vec::new(),
        }
    }

    /// Names of the components run in this session, in call order.
    pub fn trace(&self) -> &[&'static str] {
        &self.trace
    }

    pub(crate) fn touch(&mut self, component: &'static str) {
        self.trace.push(component);
    }
}
