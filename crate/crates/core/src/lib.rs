//! Behaviour pattern disentanglement for sensor-based human activity
//! recognition.
//!
//! An encoder's representation is split into activity features and
//! redundant (subject/environment) features by two disentanglers trained
//! with a dual cross-entropy objective, an adversarial negative-entropy
//! objective, a mutual-information penalty and a reconstruction constraint.
//! The crate carries its own reverse-mode differentiation engine, the
//! network components, the alternating trainer, a leave-one-subject-out
//! evaluation harness and the file formats used by the `bpd` CLI.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kv;
pub mod losses;
pub mod metrics;
pub mod mine;
pub mod model;
pub mod nn;
pub mod optim;
pub mod protocol;
pub mod tensor;
pub mod trainer;

pub use autograd::{Tape, Var};
pub use error::{Error, ParseError, Result, TensorError};
pub use tensor::{DType, Scalar, Tensor};
