//! Finite-difference verification of analytic gradients.
//!
//! A check evaluates a function of some input tensors, projects a
//! non-scalar output onto a fixed random direction, back-propagates, and
//! compares every input gradient element with a central difference
//! `(f(x+ε) − f(x−ε)) / 2ε`. The error measure is
//! `|analytic − numeric| / max(1, |numeric|)`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{NormStats, Tape, Var};
use crate::error::TensorError;
use crate::losses::{ce_loss, mine_loss, ne_loss, recon_loss, NeForm};
use crate::nn::{seeded_rng, MiNetwork};
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-4;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;

/// Outcome of checking one function.
#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    /// Largest relative error per input tensor.
    pub max_rel_errors: Vec<f64>,
    pub tolerance: f64,
    /// Set when the function itself failed to evaluate.
    pub error: Option<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.max_rel_errors.iter().all(|&e| e < self.tolerance)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.max_rel_errors.iter().fold(0.0, |a, &b| a.max(b))
    }
}

/// Checker settings. `fault` adds a constant to the first analytic gradient
/// element, which must make any check fail.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub epsilon: f64,
    pub tolerance: f64,
    pub fault: Option<f64>,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            tolerance: DEFAULT_TOLERANCE,
            fault: None,
        }
    }
}

type CheckFn<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError> + 'a;

impl GradCheck {
    pub fn with_tolerance(tolerance: f64) -> Self {
        Self {
            tolerance,
            ..Self::default()
        }
    }

    pub fn run<F>(&self, name: &str, inputs: &[Tensor<f64>], f: F) -> GradCheckReport
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
    {
        match self.try_run(inputs, &f) {
            Ok(errs) => GradCheckReport {
                name: name.to_string(),
                max_rel_errors: errs,
                tolerance: self.tolerance,
                error: None,
            },
            Err(e) => GradCheckReport {
                name: name.to_string(),
                max_rel_errors: Vec::new(),
                tolerance: self.tolerance,
                error: Some(e.to_string()),
            },
        }
    }

    fn evaluate(&self, inputs: &[Tensor<f64>], f: &CheckFn<'_>, probe: Option<&Tensor<f64>>) -> Result<(f64, Tape<f64>, Vec<Var>, Var), TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let root = match probe {
            Some(p) if tape.value(out).numel() > 1 => {
                let w = tape.constant(p.clone().reshape(tape.shape(out))?);
                let prod = tape.mul(out, w)?;
                tape.sum(prod)?
            }
            _ => out,
        };
        let v = tape.value(root).item();
        Ok((v, tape, vars, root))
    }

    fn try_run(&self, inputs: &[Tensor<f64>], f: &CheckFn<'_>) -> Result<Vec<f64>, TensorError> {
        // First pass only to learn the output size for the projection.
        let numel = {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
            let out = f(&mut tape, &vars)?;
            tape.value(out).numel()
        };
        let mut rng = seeded_rng(0x9C0F_FEE);
        let probe = Tensor::from_vec((0..numel).map(|_| rng.random_range(-1.0..1.0)).collect());
        let (_, mut tape, vars, root) = self.evaluate(inputs, f, Some(&probe))?;
        tape.backward(root)?;
        let mut errors = Vec::with_capacity(inputs.len());
        for (idx, input) in inputs.iter().enumerate() {
            let mut analytic = tape
                .grad(vars[idx])
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(input.shape()));
            if let (Some(delta), 0) = (self.fault, idx) {
                analytic.data_mut()[0] += delta;
            }
            let mut worst: f64 = 0.0;
            for j in 0..input.numel() {
                let mut plus = inputs.to_vec();
                plus[idx].data_mut()[j] += self.epsilon;
                let mut minus = inputs.to_vec();
                minus[idx].data_mut()[j] -= self.epsilon;
                let fp = self.evaluate(&plus, f, Some(&probe))?.0;
                let fm = self.evaluate(&minus, f, Some(&probe))?.0;
                let numeric = (fp - fm) / (2.0 * self.epsilon);
                let err = (analytic.data()[j] - numeric).abs() / numeric.abs().max(1.0);
                worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
            }
            errors.push(worst);
        }
        Ok(errors)
    }
}

/// Convenience wrapper with the default step size.
pub fn grad_check<F>(name: &str, inputs: &[Tensor<f64>], tolerance: f64, f: F) -> GradCheckReport
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    GradCheck::with_tolerance(tolerance).run(name, inputs, f)
}

// ---------------------------------------------------------------- the suite

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero, so kinks (ReLU, clamp) are not straddled.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = normal(rng, shape);
    for v in t.data_mut() {
        *v += 0.1 * v.signum();
    }
    t
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(0.2..2.0)).collect()).unwrap()
}

fn prob_rows(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Tensor<f64> {
    let mut t = positive(rng, &[n, k]);
    for row in t.data_mut().chunks_mut(k) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    t
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// Names of every case in [`run_case`].
pub const SUITE: &[&str] = &[
    "matmul",
    "add",
    "add_broadcast",
    "sub",
    "mul",
    "mul_broadcast",
    "scale",
    "relu",
    "softmax",
    "log",
    "exp",
    "clamp_min",
    "square",
    "sqrt",
    "sum",
    "mean",
    "sum_last",
    "concat",
    "reshape",
    "slice_last",
    "select_time",
    "pick",
    "gather_rows",
    "conv1d",
    "max_pool1d",
    "batch_norm_train",
    "batch_norm_eval",
    "dropout",
    "lstm_cell",
    "softmax_cross_entropy",
    "ce_loss",
    "ne_loss_entropy",
    "ne_loss_true_class",
    "recon_loss",
    "mine_loss",
];

/// Runs one named case with randomised shapes drawn from `seed`.
pub fn run_case(check: &GradCheck, name: &str, seed: u64) -> GradCheckReport {
    let mut rng = seeded_rng(seed);
    let r = &mut rng;
    let n = dim(r, 2, 5);
    let d = dim(r, 2, 5);
    let tag = format!("{name}[seed={seed}]");
    match name {
        "matmul" => {
            let k = dim(r, 2, 5);
            let inputs = [normal(r, &[n, k]), normal(r, &[k, d])];
            check.run(&tag, &inputs, |t, v| t.matmul(v[0], v[1]))
        }
        "add" => {
            let inputs = [normal(r, &[n, d]), normal(r, &[n, d])];
            check.run(&tag, &inputs, |t, v| t.add(v[0], v[1]))
        }
        "add_broadcast" => {
            let inputs = [normal(r, &[n, d]), normal(r, &[d])];
            check.run(&tag, &inputs, |t, v| t.add(v[0], v[1]))
        }
        "sub" => {
            let inputs = [normal(r, &[n, d]), normal(r, &[1])];
            check.run(&tag, &inputs, |t, v| {
                let a = t.sub(v[0], v[1])?;
                t.sub(a, v[0])
            })
        }
        "mul" => {
            let inputs = [normal(r, &[n, d]), normal(r, &[n, d])];
            check.run(&tag, &inputs, |t, v| t.mul(v[0], v[1]))
        }
        "mul_broadcast" => {
            let c = dim(r, 1, 3);
            let inputs = [normal(r, &[n, c, d]), normal(r, &[c, d])];
            check.run(&tag, &inputs, |t, v| t.mul(v[0], v[1]))
        }
        "scale" => {
            let inputs = [normal(r, &[n, d])];
            check.run(&tag, &inputs, |t, v| {
                let a = t.scale(v[0], -2.5)?;
                t.shift(a, 0.75)
            })
        }
        "relu" => {
            let inputs = [off_zero(r, &[n, d])];
            check.run(&tag, &inputs, |t, v| t.relu(v[0]))
        }
        "softmax" => {
            let inputs = [normal(r, &[n, d])];
            check.run(&tag, &inputs, |t, v| t.softmax(v[0]))
        }
        "log" => {
            let inputs = [positive(r, &[n, d])];
            check.run(&tag, &inputs, |t, v| t.log(v[0]))
        }
        "exp" => {
            let inputs = [normal(r, &[n, d])];
            check.run(&tag, &inputs, |t, v| t.exp(v[0]))
        }
        "clamp_min" => {
            let inputs = [off_zero(r, &[n, d])];
            check.run(&tag, &inputs, |t, v| t.clamp_min(v[0], 0.0))
        }
        "square" => {
            let inputs = [normal(r, &[n, d])];
            check.run(&tag, &inputs, |t, v| t.square(v[0]))
        }
        "sqrt" => {
            let inputs = [positive(r, &[n, d])];
            check.run(&tag, &inputs, |t, v| t.sqrt(v[0]))
        }
        "sum" => {
            let inputs = [normal(r, &[n, d])];
            check.run(&tag, &inputs, |t, v| t.sum(v[0]))
        }
        "mean" => {
            let inputs = [normal(r, &[n, d])];
            check.run(&tag, &inputs, |t, v| t.mean(v[0]))
        }
        "sum_last" => {
            let inputs = [normal(r, &[n, d])];
            check.run(&tag, &inputs, |t, v| t.sum_last(v[0]))
        }
        "concat" => {
            let e = dim(r, 1, 4);
            let inputs = [normal(r, &[n, d]), normal(r, &[n, e])];
            check.run(&tag, &inputs, |t, v| t.concat(&[v[0], v[1], v[0]]))
        }
        "reshape" => {
            let inputs = [normal(r, &[n, 2, d])];
            check.run(&tag, &inputs, |t, v| {
                let f = t.flatten(v[0])?;
                t.square(f)
            })
        }
        "slice_last" => {
            let inputs = [normal(r, &[n, d + 2])];
            check.run(&tag, &inputs, move |t, v| t.slice_last(v[0], 1, d))
        }
        "select_time" => {
            let steps = dim(r, 2, 6);
            let at = r.random_range(0..steps);
            let inputs = [normal(r, &[n, d, steps])];
            check.run(&tag, &inputs, move |t, v| t.select_time(v[0], at))
        }
        "pick" => {
            let idx: Vec<usize> = (0..n).map(|_| r.random_range(0..d)).collect();
            let inputs = [normal(r, &[n, d])];
            check.run(&tag, &inputs, move |t, v| t.pick(v[0], &idx))
        }
        "gather_rows" => {
            let idx: Vec<usize> = (0..n + 1).map(|_| r.random_range(0..n)).collect();
            let inputs = [normal(r, &[n, d])];
            check.run(&tag, &inputs, move |t, v| t.gather_rows(v[0], &idx))
        }
        "conv1d" => {
            let c = dim(r, 1, 3);
            let f = dim(r, 1, 4);
            let k = dim(r, 1, 5);
            let steps = dim(r, k.max(3), 9);
            let pad = r.random_range(0..=k / 2);
            let inputs = [normal(r, &[n, c, steps]), normal(r, &[f, c, k]), normal(r, &[f])];
            check.run(&tag, &inputs, move |t, v| t.conv1d(v[0], v[1], v[2], pad))
        }
        "max_pool1d" => {
            let c = dim(r, 1, 3);
            let steps = dim(r, 2, 9);
            let inputs = [normal(r, &[n, c, steps])];
            check.run(&tag, &inputs, |t, v| t.max_pool1d(v[0], 2))
        }
        "batch_norm_train" => {
            let inputs = [normal(r, &[n, d]), positive(r, &[d]), normal(r, &[d])];
            check.run(&tag, &inputs, |t, v| Ok(t.batch_norm(v[0], v[1], v[2], NormStats::Batch)?.0))
        }
        "batch_norm_eval" => {
            let mean: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
            let var: Vec<f64> = (0..d).map(|_| r.random_range(0.5..2.0)).collect();
            let inputs = [normal(r, &[n, d]), positive(r, &[d]), normal(r, &[d])];
            check.run(&tag, &inputs, move |t, v| {
                let stats = NormStats::Running { mean: &mean, var: &var };
                Ok(t.batch_norm(v[0], v[1], v[2], stats)?.0)
            })
        }
        "dropout" => {
            let mask_seed = r.random::<u64>();
            let inputs = [normal(r, &[n, d])];
            check.run(&tag, &inputs, move |t, v| t.dropout(v[0], 0.5, &mut seeded_rng(mask_seed)))
        }
        "lstm_cell" => {
            let h = dim(r, 1, 3);
            let inputs = [
                normal(r, &[n, d]),
                normal(r, &[n, h]),
                normal(r, &[n, h]),
                normal(r, &[d, 4 * h]),
                normal(r, &[h, 4 * h]),
                normal(r, &[4 * h]),
            ];
            check.run(&tag, &inputs, |t, v| t.lstm_cell(v[0], v[1], v[2], v[3], v[4], v[5]))
        }
        "softmax_cross_entropy" => {
            let k = dim(r, 2, 5);
            let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
            let inputs = [normal(r, &[n, k]), normal(r, &[n, k])];
            check.run(&tag, &inputs, move |t, v| {
                let a = t.softmax(v[0])?;
                let b = t.softmax(v[1])?;
                ce_loss(t, a, b, &labels)
            })
        }
        "ce_loss" => {
            let k = dim(r, 2, 5);
            let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
            let inputs = [prob_rows(r, n, k), prob_rows(r, n, k)];
            check.run(&tag, &inputs, move |t, v| ce_loss(t, v[0], v[1], &labels))
        }
        "ne_loss_entropy" => {
            let k = dim(r, 2, 5);
            let inputs = [normal(r, &[n, k])];
            check.run(&tag, &inputs, |t, v| {
                let p = t.softmax(v[0])?;
                ne_loss(t, p, NeForm::Entropy, &[])
            })
        }
        "ne_loss_true_class" => {
            let k = dim(r, 2, 5);
            let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
            let inputs = [normal(r, &[n, k])];
            check.run(&tag, &inputs, move |t, v| {
                let p = t.softmax(v[0])?;
                ne_loss(t, p, NeForm::TrueClass, &labels)
            })
        }
        "recon_loss" => {
            let inputs = [normal(r, &[n, d]), normal(r, &[n, d])];
            check.run(&tag, &inputs, |t, v| recon_loss(t, v[0], v[1]))
        }
        "mine_loss" => {
            let e = dim(r, 1, 3);
            let mut perm: Vec<usize> = (0..n).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), r);
            let template: MiNetwork<f64> = MiNetwork::new(d, e, &mut seeded_rng(seed ^ 0xA5)).unwrap();
            let hid = crate::nn::MI_HIDDEN;
            let z_sig = normal(r, &[n, d]);
            let z_red = normal(r, &[n, e]);
            let mut b1 = normal(r, &[hid]);
            keep_off_relu_kinks(&z_sig, &z_red, &perm, &template.fc1.weight, &mut b1);
            // Inputs: z_sig, z_red, then the network's own parameters.
            let inputs = [z_sig, z_red, template.fc1.weight.clone(), b1, template.fc2.weight.clone(), normal(r, &[1])];
            check.run(&tag, &inputs, move |t, v| mine_loss(t, &template, &v[2..6], v[0], v[1], &perm))
        }
        other => GradCheckReport {
            name: other.to_string(),
            max_rel_errors: Vec::new(),
            tolerance: check.tolerance,
            error: Some(format!("unknown gradient check case `{other}`")),
        },
    }
}

/// Finite differences are meaningless across a ReLU kink, so shift hidden
/// biases until no pre-activation of the statistics network is near zero.
fn keep_off_relu_kinks(z_sig: &Tensor<f64>, z_red: &Tensor<f64>, perm: &[usize], w1: &Tensor<f64>, b1: &mut Tensor<f64>) {
    let (n, d, e) = (z_sig.shape()[0], z_sig.shape()[1], z_red.shape()[1]);
    let hid = b1.numel();
    for j in 0..hid {
        for _ in 0..100 {
            let near = (0..n).any(|i| {
                [i, perm[i]].iter().any(|&k| {
                    let mut pre = b1.data()[j];
                    for a in 0..d {
                        pre += z_sig.data()[i * d + a] * w1.data()[a * hid + j];
                    }
                    for a in 0..e {
                        pre += z_red.data()[k * e + a] * w1.data()[(d + a) * hid + j];
                    }
                    pre.abs() < 1e-2
                })
            });
            if !near {
                break;
            }
            b1.data_mut()[j] += 0.037;
        }
    }
}

/// Every case in [`SUITE`] over `seeds` randomised shapes.
pub fn run_suite(check: &GradCheck, seeds: u64) -> Vec<GradCheckReport> {
    SUITE
        .iter()
        .flat_map(|name| (0..seeds).map(move |s| run_case(check, name, s + 1)))
        .collect()
}

/// Collapses per-seed reports to one line per case: (name, worst error, all passed).
pub fn summarise(reports: &[GradCheckReport]) -> Vec<(String, f64, bool)> {
    let mut out: Vec<(String, f64, bool)> = Vec::new();
    for r in reports {
        let base = r.name.split('[').next().unwrap_or(&r.name).to_string();
        let err = if r.error.is_some() { f64::INFINITY } else { r.max_rel_error() };
        match out.iter_mut().find(|(n, _, _)| *n == base) {
            Some(entry) => {
                entry.1 = entry.1.max(err);
                entry.2 &= r.passed();
            }
            None => out.push((base, err, r.passed())),
        }
    }
    out
}
