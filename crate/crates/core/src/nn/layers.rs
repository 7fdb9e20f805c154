use rand_chacha::ChaCha8Rng;

use super::init::xavier_normal;
use crate::autograd::{BatchStats, NormStats, Tape, Var};
use crate::error::TensorError;
use crate::tensor::{Scalar, Tensor};

type Result<T> = std::result::Result<T, TensorError>;

/// Running-average momentum of batch normalisation.
pub const BN_MOMENTUM: f64 = 0.1;

/// Anything owning trainable tensors.
///
/// `params` and `params_mut` must list tensors in the same order; that order
/// is the binding order used by [`Module::bind`] and by the optimisers.
pub trait Module<S: Scalar> {
    fn params(&self) -> Vec<(String, &Tensor<S>)>;
    fn params_mut(&mut self) -> Vec<&mut Tensor<S>>;

    /// Non-trainable state (normalisation statistics).
    fn buffers(&self) -> Vec<(String, &Tensor<S>)> {
        Vec::new()
    }

    fn buffers_mut(&mut self) -> Vec<&mut Tensor<S>> {
        Vec::new()
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Copies every parameter onto `tape` as a leaf.
    fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> Bound {
        Bound {
            vars: self
                .params()
                .into_iter()
                .map(|(_, t)| tape.leaf(t.clone(), trainable))
                .collect(),
        }
    }
}

/// Parameters of one module as bound to a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn grads<'t, S: Scalar>(&self, tape: &'t Tape<S>) -> Vec<Option<&'t Tensor<S>>> {
        self.vars.iter().map(|&v| tape.grad(v)).collect()
    }
}

fn prefixed<'a, S>(prefix: &str, items: Vec<(&str, &'a Tensor<S>)>) -> Vec<(String, &'a Tensor<S>)> {
    items
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}

/// Fully-connected layer `y = x·W + b` with `W: (in, out)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<S> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn new(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            weight: xavier_normal(&[input.max(1), output.max(1)], input, output, rng)?,
            bias: Tensor::zeros(&[output]),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape<S>, p: &[Var], x: Var) -> Result<Var> {
        let s = tape.try_value(x)?.shape();
        if s.len() != 2 || s[1] != self.input_dim() {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                detail: format!("expected (n, {}), got {s:?}", self.input_dim()),
            });
        }
        let y = tape.matmul(x, p[0])?;
        tape.add(y, p[1])
    }

    pub(crate) fn named(&self, prefix: &str) -> Vec<(String, &Tensor<S>)> {
        prefixed(prefix, vec![("weight", &self.weight), ("bias", &self.bias)])
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// 1-D convolution over time, stride 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv1d<S> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
    pub pad: usize,
}

impl<S: Scalar> Conv1d<S> {
    pub fn new(
        in_channels: usize,
        filters: usize,
        kernel: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            weight: xavier_normal(
                &[filters.max(1), in_channels.max(1), kernel.max(1)],
                in_channels * kernel,
                filters * kernel,
                rng,
            )?,
            bias: Tensor::zeros(&[filters]),
            pad,
        })
    }

    pub fn forward(&self, tape: &mut Tape<S>, p: &[Var], x: Var) -> Result<Var> {
        tape.conv1d(x, p[0], p[1], self.pad)
    }

    pub(crate) fn named(&self, prefix: &str) -> Vec<(String, &Tensor<S>)> {
        prefixed(prefix, vec![("weight", &self.weight), ("bias", &self.bias)])
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Batch normalisation over the batch axis of `(n, d)` features.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm1d<S> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
}

impl<S: Scalar> BatchNorm1d<S> {
    pub fn new(features: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[features]),
            beta: Tensor::zeros(&[features]),
            running_mean: Tensor::zeros(&[features]),
            running_var: Tensor::ones(&[features]),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        p: &[Var],
        x: Var,
        train: bool,
    ) -> Result<(Var, Option<BatchStats<f64>>)> {
        let stats = if train {
            NormStats::Batch
        } else {
            NormStats::Running {
                mean: self.running_mean.data(),
                var: self.running_var.data(),
            }
        };
        let (y, batch) = tape.batch_norm(x, p[0], p[1], stats)?;
        let batch = batch.map(|b| BatchStats {
            mean: b.mean.iter().map(|v| v.to_f64()).collect(),
            var: b.var.iter().map(|v| v.to_f64()).collect(),
        });
        Ok((y, batch))
    }

    /// Exponential moving average with momentum [`BN_MOMENTUM`].
    pub fn update_running(&mut self, stats: &BatchStats<f64>) {
        let m = BN_MOMENTUM;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = S::from_f64((1.0 - m) * r.to_f64() + m * b);
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = S::from_f64((1.0 - m) * r.to_f64() + m * b);
        }
    }

    pub(crate) fn named(&self, prefix: &str) -> Vec<(String, &Tensor<S>)> {
        prefixed(prefix, vec![("gamma", &self.gamma), ("beta", &self.beta)])
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        vec![&mut self.gamma, &mut self.beta]
    }

    pub(crate) fn named_buffers(&self, prefix: &str) -> Vec<(String, &Tensor<S>)> {
        prefixed(
            prefix,
            vec![("running_mean", &self.running_mean), ("running_var", &self.running_var)],
        )
    }

    pub(crate) fn buffers_mut(&mut self) -> Vec<&mut Tensor<S>> {
        vec![&mut self.running_mean, &mut self.running_var]
    }
}

/// Single-layer LSTM unrolled over a sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Lstm<S> {
    pub w_ih: Tensor<S>,
    pub w_hh: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> Lstm<S> {
    pub fn new(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            w_ih: xavier_normal(&[input.max(1), 4 * hidden.max(1)], input, 4 * hidden, rng)?,
            w_hh: xavier_normal(&[hidden.max(1), 4 * hidden.max(1)], hidden, 4 * hidden, rng)?,
            bias: Tensor::zeros(&[4 * hidden]),
        })
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.shape()[0]
    }

    /// Runs the cell over `steps` (each `(n, input)`) from zero state and
    /// returns the hidden state after every step.
    pub fn forward_seq(&self, tape: &mut Tape<S>, p: &[Var], steps: &[Var]) -> Result<Vec<Var>> {
        let hid = self.hidden();
        let n = tape.try_value(steps[0])?.shape()[0];
        let mut h = tape.constant(Tensor::zeros(&[n, hid]));
        let mut c = tape.constant(Tensor::zeros(&[n, hid]));
        let mut out = Vec::with_capacity(steps.len());
        for &x in steps {
            let hc = tape.lstm_cell(x, h, c, p[0], p[1], p[2])?;
            h = tape.slice_last(hc, 0, hid)?;
            c = tape.slice_last(hc, hid, hid)?;
            out.push(h);
        }
        Ok(out)
    }

    pub(crate) fn named(&self, prefix: &str) -> Vec<(String, &Tensor<S>)> {
        prefixed(
            prefix,
            vec![("w_ih", &self.w_ih), ("w_hh", &self.w_hh), ("bias", &self.bias)],
        )
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        vec![&mut self.w_ih, &mut self.w_hh, &mut self.bias]
    }
}
