use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Conv1d, Linear, Lstm, Module};
use crate::autograd::{Tape, Var};
use crate::error::TensorError;
use crate::tensor::{Scalar, Tensor};

type Result<T> = std::result::Result<T, TensorError>;

pub const CONV_FILTERS: usize = 64;
pub const CONV_KERNEL: usize = 5;
pub const CNN_BLOCKS: usize = 3;
pub const CNN_POOL: usize = 2;
pub const CONVLSTM_CONVS: usize = 4;
pub const LSTM_HIDDEN: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Cnn,
    ConvLstm,
}

impl EncoderKind {
    pub fn default_latent_dim(self) -> usize {
        match self {
            EncoderKind::Cnn => 592,
            EncoderKind::ConvLstm => 32,
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            EncoderKind::Cnn => "CNN",
            EncoderKind::ConvLstm => "DeepConvLSTM",
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderKind::Cnn => "cnn",
            EncoderKind::ConvLstm => "convlstm",
        })
    }
}

impl FromStr for EncoderKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cnn" => Ok(EncoderKind::Cnn),
            "convlstm" | "deepconvlstm" => Ok(EncoderKind::ConvLstm),
            other => Err(format!("unknown encoder `{other}` (expected cnn or convlstm)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub input_channels: usize,
    pub window_length: usize,
    pub latent_dim: usize,
}

impl EncoderSpec {
    /// Spec with the default latent width for `kind`.
    pub fn new(kind: EncoderKind, input_channels: usize, window_length: usize) -> Self {
        Self {
            kind,
            input_channels,
            window_length,
            latent_dim: kind.default_latent_dim(),
        }
    }
}

/// Three conv/ReLU/max-pool blocks, flatten, then a dense projection.
#[derive(Clone, Debug, PartialEq)]
pub struct CnnEncoder<S> {
    pub convs: Vec<Conv1d<S>>,
    pub fc: Linear<S>,
}

impl<S: Scalar> CnnEncoder<S> {
    fn pooled_len(window: usize) -> usize {
        (0..CNN_BLOCKS).fold(window, |t, _| t / CNN_POOL)
    }

    pub fn new(spec: &EncoderSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        let steps = Self::pooled_len(spec.window_length);
        if steps == 0 {
            return Err(TensorError::InvalidArgument(format!(
                "window of {} samples is too short for {CNN_BLOCKS} pooling blocks",
                spec.window_length
            )));
        }
        let mut convs = Vec::with_capacity(CNN_BLOCKS);
        let mut channels = spec.input_channels;
        for _ in 0..CNN_BLOCKS {
            convs.push(Conv1d::new(channels, CONV_FILTERS, CONV_KERNEL, CONV_KERNEL / 2, rng)?);
            channels = CONV_FILTERS;
        }
        let fc = Linear::new(CONV_FILTERS * steps, spec.latent_dim, rng)?;
        Ok(Self { convs, fc })
    }

    fn forward(&self, tape: &mut Tape<S>, p: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(tape, &p[2 * i..2 * i + 2], h)?;
            h = tape.relu(h)?;
            h = tape.max_pool1d(h, CNN_POOL)?;
        }
        let h = tape.flatten(h)?;
        let off = 2 * self.convs.len();
        let h = self.fc.forward(tape, &p[off..off + 2], h)?;
        tape.relu(h)
    }
}

/// Four valid-padded convolutions, two stacked LSTMs, and a projection of
/// the last hidden state.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLstmEncoder<S> {
    pub convs: Vec<Conv1d<S>>,
    pub lstms: Vec<Lstm<S>>,
    pub fc: Linear<S>,
}

impl<S: Scalar> ConvLstmEncoder<S> {
    pub fn new(spec: &EncoderSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        let shrink = CONVLSTM_CONVS * (CONV_KERNEL - 1);
        if spec.window_length <= shrink {
            return Err(TensorError::InvalidArgument(format!(
                "window of {} samples is too short for {CONVLSTM_CONVS} valid convolutions",
                spec.window_length
            )));
        }
        let mut convs = Vec::with_capacity(CONVLSTM_CONVS);
        let mut channels = spec.input_channels;
        for _ in 0..CONVLSTM_CONVS {
            convs.push(Conv1d::new(channels, CONV_FILTERS, CONV_KERNEL, 0, rng)?);
            channels = CONV_FILTERS;
        }
        let lstms = vec![
            Lstm::new(CONV_FILTERS, LSTM_HIDDEN, rng)?,
            Lstm::new(LSTM_HIDDEN, LSTM_HIDDEN, rng)?,
        ];
        let fc = Linear::new(LSTM_HIDDEN, spec.latent_dim, rng)?;
        Ok(Self { convs, lstms, fc })
    }

    fn forward(&self, tape: &mut Tape<S>, p: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(tape, &p[2 * i..2 * i + 2], h)?;
            h = tape.relu(h)?;
        }
        let steps = tape.try_value(h)?.shape()[2];
        let mut seq = (0..steps)
            .map(|t| tape.select_time(h, t))
            .collect::<Result<Vec<_>>>()?;
        let mut off = 2 * self.convs.len();
        for lstm in &self.lstms {
            seq = lstm.forward_seq(tape, &p[off..off + 3], &seq)?;
            off += 3;
        }
        let last = *seq.last().expect("at least one step");
        let h = self.fc.forward(tape, &p[off..off + 2], last)?;
        tape.relu(h)
    }
}

/// The feature extractor `E`.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<S> {
    spec: EncoderSpec,
    net: EncoderNet<S>,
}

#[derive(Clone, Debug, PartialEq)]
enum EncoderNet<S> {
    Cnn(CnnEncoder<S>),
    ConvLstm(ConvLstmEncoder<S>),
}

impl<S: Scalar> Encoder<S> {
    pub fn new(spec: EncoderSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        if spec.input_channels == 0 || spec.latent_dim == 0 {
            return Err(TensorError::InvalidArgument(format!(
                "encoder needs positive channels and latent width, got {spec:?}"
            )));
        }
        let net = match spec.kind {
            EncoderKind::Cnn => EncoderNet::Cnn(CnnEncoder::new(&spec, rng)?),
            EncoderKind::ConvLstm => EncoderNet::ConvLstm(ConvLstmEncoder::new(&spec, rng)?),
        };
        Ok(Self { spec, net })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    /// `(n, channels, window) → (n, latent_dim)`.
    pub fn forward(&self, tape: &mut Tape<S>, p: &[Var], x: Var) -> Result<Var> {
        let s = tape.try_value(x)?.shape();
        if s.len() != 3 || s[1] != self.spec.input_channels || s[2] != self.spec.window_length {
            return Err(TensorError::ShapeMismatch {
                op: "encoder",
                detail: format!(
                    "expected (n, {}, {}), got {s:?}",
                    self.spec.input_channels, self.spec.window_length
                ),
            });
        }
        match &self.net {
            EncoderNet::Cnn(e) => e.forward(tape, p, x),
            EncoderNet::ConvLstm(e) => e.forward(tape, p, x),
        }
    }
}

impl<S: Scalar> Module<S> for Encoder<S> {
    fn params(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        match &self.net {
            EncoderNet::Cnn(e) => {
                for (i, c) in e.convs.iter().enumerate() {
                    out.extend(c.named(&format!("conv{i}")));
                }
                out.extend(e.fc.named("fc"));
            }
            EncoderNet::ConvLstm(e) => {
                for (i, c) in e.convs.iter().enumerate() {
                    out.extend(c.named(&format!("conv{i}")));
                }
                for (i, l) in e.lstms.iter().enumerate() {
                    out.extend(l.named(&format!("lstm{i}")));
                }
                out.extend(e.fc.named("fc"));
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = Vec::new();
        match &mut self.net {
            EncoderNet::Cnn(e) => {
                for c in &mut e.convs {
                    out.extend(c.tensors_mut());
                }
                out.extend(e.fc.tensors_mut());
            }
            EncoderNet::ConvLstm(e) => {
                for c in &mut e.convs {
                    out.extend(c.tensors_mut());
                }
                for l in &mut e.lstms {
                    out.extend(l.tensors_mut());
                }
                out.extend(e.fc.tensors_mut());
            }
        }
        out
    }
}
