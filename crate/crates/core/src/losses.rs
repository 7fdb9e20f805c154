//! The four BPD training objectives as differentiable scalars.
//!
//! * dual cross-entropy over both classifier branches,
//! * negative entropy of the adversarial classifier's output,
//! * per-sample L2 reconstruction error of the encoder output,
//! * the Donsker–Varadhan mutual-information lower bound (MINE).
//!
//! All logarithms are natural; probabilities are floored at
//! [`PROB_FLOOR`] before every log.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::TensorError;
use crate::nn::MiNetwork;
use crate::tensor::{Scalar, Tensor};

type Result<T> = std::result::Result<T, TensorError>;

pub const PROB_FLOOR: f64 = 1e-12;

/// Reading of the negative-entropy objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeForm {
    /// Mean of `Σ_k p log p`: minimised by uniform rows.
    #[default]
    Entropy,
    /// Mean of `-log p[y]` on the adversarial branch.
    TrueClass,
}

impl fmt::Display for NeForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NeForm::Entropy => "entropy",
            NeForm::TrueClass => "true_class",
        })
    }
}

impl FromStr for NeForm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "entropy" => Ok(NeForm::Entropy),
            "true_class" => Ok(NeForm::TrueClass),
            other => Err(format!("unknown ne_form `{other}` (expected entropy or true_class)")),
        }
    }
}

/// Scalar values of the four objectives for one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub ce: f64,
    pub ne: f64,
    pub recon: f64,
    pub mine: f64,
}

fn check_probs<S: Scalar>(tape: &Tape<S>, p: Var, labels: Option<&[usize]>, op: &'static str) -> Result<(usize, usize)> {
    let s = tape.try_value(p)?.shape();
    if s.len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("expected (n, K) probabilities, got {s:?}"),
        });
    }
    let (n, k) = (s[0], s[1]);
    if let Some(labels) = labels {
        if labels.len() != n {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("{} labels for {n} rows", labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(TensorError::InvalidArgument(format!(
                "{op}: class index {bad} outside 0..{k}"
            )));
        }
    }
    Ok((n, k))
}

/// `-(1/N) Σ log p[i, y_i]` with `y` as 0-based class indices.
fn mean_nll<S: Scalar>(tape: &mut Tape<S>, p: Var, labels: &[usize]) -> Result<Var> {
    let safe = tape.clamp_min(p, PROB_FLOOR)?;
    let logp = tape.log(safe)?;
    let picked = tape.pick(logp, labels)?;
    let m = tape.mean(picked)?;
    tape.neg(m)
}

/// Dual cross-entropy: both branches are supervised by the activity label.
pub fn ce_loss<S: Scalar>(tape: &mut Tape<S>, p_sig: Var, p_red: Var, labels: &[usize]) -> Result<Var> {
    let (n, k) = check_probs(tape, p_sig, Some(labels), "ce_loss")?;
    let (n2, k2) = check_probs(tape, p_red, None, "ce_loss")?;
    if (n, k) != (n2, k2) {
        return Err(TensorError::ShapeMismatch {
            op: "ce_loss",
            detail: format!("branches ({n}, {k}) vs ({n2}, {k2})"),
        });
    }
    let a = mean_nll(tape, p_sig, labels)?;
    let b = mean_nll(tape, p_red, labels)?;
    tape.add(a, b)
}

/// Adversarial negative-entropy objective on the redundant branch.
///
/// `labels` is only read for [`NeForm::TrueClass`].
pub fn ne_loss<S: Scalar>(tape: &mut Tape<S>, p_red: Var, form: NeForm, labels: &[usize]) -> Result<Var> {
    match form {
        NeForm::Entropy => {
            let (n, _) = check_probs(tape, p_red, None, "ne_loss")?;
            let safe = tape.clamp_min(p_red, PROB_FLOOR)?;
            let logp = tape.log(safe)?;
            let plogp = tape.mul(p_red, logp)?;
            let total = tape.sum(plogp)?;
            tape.scale(total, 1.0 / n as f64)
        }
        NeForm::TrueClass => {
            check_probs(tape, p_red, Some(labels), "ne_loss")?;
            mean_nll(tape, p_red, labels)
        }
    }
}

/// `(1/N) Σ_i ‖enc_i − recon_i‖₂`.
pub fn recon_loss<S: Scalar>(tape: &mut Tape<S>, enc: Var, recon: Var) -> Result<Var> {
    let (se, sr) = (tape.try_value(enc)?.shape(), tape.try_value(recon)?.shape());
    if se != sr || se.len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "recon_loss",
            detail: format!("{se:?} vs {sr:?}"),
        });
    }
    let diff = tape.sub(enc, recon)?;
    let sq = tape.square(diff)?;
    let per_row = tape.sum_last(sq)?;
    let norms = tape.sqrt(per_row)?;
    tape.mean(norms)
}

/// Donsker–Varadhan bound from statistics on joint and marginal pairs:
/// `mean(t_joint) − log(mean(exp(t_marg)))`, with the log-mean-exp shifted
/// by its maximum.
pub fn dv_bound<S: Scalar>(tape: &mut Tape<S>, t_joint: Var, t_marg: Var) -> Result<Var> {
    let m = tape
        .try_value(t_marg)?
        .data()
        .iter()
        .fold(f64::NEG_INFINITY, |a, v| a.max(v.to_f64()));
    if !m.is_finite() {
        return Err(TensorError::Domain {
            op: "mine_loss",
            detail: "non-finite statistic on marginal pairs".into(),
        });
    }
    let joint = tape.mean(t_joint)?;
    let shifted = tape.shift(t_marg, -m)?;
    let e = tape.exp(shifted)?;
    let me = tape.mean(e)?;
    let lme = tape.log(me)?;
    let lse = tape.shift(lme, m)?;
    tape.sub(joint, lse)
}

/// MINE objective with marginal samples `ẑ_red[i] = z_red[perm[i]]`.
pub fn mine_loss<S: Scalar>(
    tape: &mut Tape<S>,
    mi: &MiNetwork<S>,
    p: &[Var],
    z_sig: Var,
    z_red: Var,
    perm: &[usize],
) -> Result<Var> {
    let n = tape.try_value(z_sig)?.shape()[0];
    if n < 2 {
        return Err(TensorError::InvalidArgument(format!(
            "mine_loss needs at least 2 pairs, got {n}"
        )));
    }
    if tape.try_value(z_red)?.shape()[0] != n || perm.len() != n {
        return Err(TensorError::ShapeMismatch {
            op: "mine_loss",
            detail: format!(
                "{n} activity rows, {} redundant rows, {} permutation entries",
                tape.try_value(z_red)?.shape()[0],
                perm.len()
            ),
        });
    }
    let joint = mi.forward(tape, p, z_sig, z_red)?;
    let shuffled = tape.gather_rows(z_red, perm)?;
    let marg = mi.forward(tape, p, z_sig, shuffled)?;
    dv_bound(tape, joint, marg)
}

/// Mean Shannon entropy (nats) of probability rows.
pub fn mean_entropy<S: Scalar>(probs: &Tensor<S>) -> f64 {
    let k = *probs.shape().last().unwrap();
    let rows = probs.numel() / k;
    let total: f64 = probs
        .data()
        .chunks(k)
        .map(|r| {
            r.iter()
                .map(|&p| {
                    let p = p.to_f64();
                    -p * p.max(PROB_FLOOR).ln()
                })
                .sum::<f64>()
        })
        .sum();
    total / rows as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{seeded_rng, Module};

    fn eval<F>(f: F) -> f64
    where
        F: FnOnce(&mut Tape<f64>) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let v = f(&mut tape).unwrap();
        tape.value(v).item()
    }

    fn probs(tape: &mut Tape<f64>, n: usize, k: usize, v: &[f64]) -> Var {
        tape.constant(Tensor::from_f64(&[n, k], v).unwrap())
    }

    #[test]
    fn ce_perfect_and_uniform() {
        let perfect = eval(|t| {
            let p = probs(t, 2, 3, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
            ce_loss(t, p, p, &[0, 2])
        });
        assert_eq!(perfect, 0.0);
        let uniform = eval(|t| {
            let p = probs(t, 3, 12, &[1.0 / 12.0; 36]);
            ce_loss(t, p, p, &[0, 5, 11])
        });
        assert!((uniform - 2.0 * 12f64.ln()).abs() < 1e-12);
        assert!((uniform - 4.9698).abs() < 1e-4);
    }

    #[test]
    fn ce_hand_evaluated() {
        // -(ln .9 + ln .8)/2 - (ln .5 + ln .5)/2
        let expected = -(0.9f64.ln() + 0.8f64.ln()) / 2.0 + 2f64.ln();
        let v = eval(|t| {
            let ps = probs(t, 2, 2, &[0.9, 0.1, 0.2, 0.8]);
            let pr = probs(t, 2, 2, &[0.5, 0.5, 0.5, 0.5]);
            ce_loss(t, ps, pr, &[0, 1])
        });
        assert!((v - expected).abs() < 1e-12);
    }

    #[test]
    fn ce_clamps_zero_probability() {
        let v = eval(|t| {
            let p = probs(t, 1, 2, &[0.0, 1.0]);
            ce_loss(t, p, p, &[0])
        });
        assert!((v + 2.0 * PROB_FLOOR.ln()).abs() < 1e-6);
    }

    #[test]
    fn ne_uniform_one_hot_and_ordering() {
        let u = eval(|t| {
            let p = probs(t, 2, 12, &[1.0 / 12.0; 24]);
            ne_loss(t, p, NeForm::Entropy, &[])
        });
        assert!((u + 12f64.ln()).abs() < 1e-12);
        assert!((u + 2.4849).abs() < 1e-4);
        let one_hot = eval(|t| {
            let p = probs(t, 1, 3, &[0.0, 1.0, 0.0]);
            ne_loss(t, p, NeForm::Entropy, &[])
        });
        assert_eq!(one_hot, 0.0);
        let even = eval(|t| {
            let p = probs(t, 1, 2, &[0.5, 0.5]);
            ne_loss(t, p, NeForm::Entropy, &[])
        });
        let skewed = eval(|t| {
            let p = probs(t, 1, 2, &[0.9, 0.1]);
            ne_loss(t, p, NeForm::Entropy, &[])
        });
        assert!(even < skewed);
    }

    #[test]
    fn ne_true_class_form() {
        let v = eval(|t| {
            let p = probs(t, 2, 2, &[0.25, 0.75, 0.5, 0.5]);
            ne_loss(t, p, NeForm::TrueClass, &[1, 0])
        });
        assert!((v + (0.75f64.ln() + 0.5f64.ln()) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn recon_identity_and_triangle() {
        let zero = eval(|t| {
            let a = t.constant(Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
            recon_loss(t, a, a)
        });
        assert_eq!(zero, 0.0);
        let five = eval(|t| {
            let a = t.constant(Tensor::from_f64(&[1, 2], &[3.0, 4.0]).unwrap());
            let b = t.constant(Tensor::zeros(&[1, 2]));
            recon_loss(t, a, b)
        });
        assert!((five - 5.0).abs() < 1e-12);
    }

    #[test]
    fn recon_zero_gradient_is_finite() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.param(Tensor::from_f64(&[1, 2], &[1.0, 1.0]).unwrap());
        let b = t.constant(Tensor::from_f64(&[1, 2], &[1.0, 1.0]).unwrap());
        let l = recon_loss(&mut t, a, b).unwrap();
        t.backward(l).unwrap();
        assert!(t.grad(a).unwrap().all_finite());
    }

    #[test]
    fn recon_shape_mismatch() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[3]));
        assert!(recon_loss(&mut t, a, b).is_err());
    }

    #[test]
    fn dv_of_constant_statistic_is_zero() {
        let v = eval(|t| {
            let j = t.constant(Tensor::full(&[5, 1], 3.7));
            let m = t.constant(Tensor::full(&[5, 1], 3.7));
            dv_bound(t, j, m)
        });
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn mine_constant_network_is_zero() {
        let mut mi: MiNetwork<f64> = MiNetwork::new(2, 2, &mut seeded_rng(0)).unwrap();
        mi.fc2.weight = Tensor::zeros(&[crate::nn::MI_HIDDEN, 1]);
        mi.fc2.bias = Tensor::scalar(1.5);
        let mut t = Tape::new();
        let p = mi.bind(&mut t, false);
        let zs = t.constant(Tensor::from_f64(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let zr = t.constant(Tensor::from_f64(&[3, 2], &[0.5, 0.1, -1.0, 2.0, 0.0, 0.3]).unwrap());
        let l = mine_loss(&mut t, &mi, p.vars(), zs, zr, &[2, 0, 1]).unwrap();
        assert!(t.value(l).item().abs() < 1e-12);
    }

    #[test]
    fn mine_rejects_single_pair() {
        let mi: MiNetwork<f64> = MiNetwork::new(1, 1, &mut seeded_rng(0)).unwrap();
        let mut t = Tape::new();
        let p = mi.bind(&mut t, false);
        let z = t.constant(Tensor::zeros(&[1, 1]));
        assert!(mine_loss(&mut t, &mi, p.vars(), z, z, &[0]).is_err());
    }

    #[test]
    fn entropy_diagnostic() {
        let u: Tensor<f64> = Tensor::full(&[4, 4], 0.25);
        assert!((mean_entropy(&u) - 4f64.ln()).abs() < 1e-12);
        let h: Tensor<f64> = Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap();
        assert_eq!(mean_entropy(&h), 0.0);
    }
}
