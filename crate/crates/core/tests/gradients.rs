//! Finite-difference checks of every primitive and loss composite.

use bpd::autograd::Tape;
use bpd::gradcheck::{grad_check, run_case, run_suite, summarise, GradCheck, SUITE};
use bpd::{Tensor, TensorError};

#[test]
fn every_primitive_and_loss_passes_at_f64() {
    let check = GradCheck::default();
    let reports = run_suite(&check, 5);
    assert_eq!(reports.len(), SUITE.len() * 5);
    for (name, err, ok) in summarise(&reports) {
        println!("{name:<24} max rel err {err:.3e} {}", if ok { "ok" } else { "FAIL" });
    }
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed()).collect();
    assert!(failed.is_empty(), "failed: {failed:#?}");
}

#[test]
fn matmul_named_example() {
    let a = Tensor::from_f64(&[3, 4], &(0..12).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>()).unwrap();
    let b = Tensor::from_f64(&[4, 2], &(0..8).map(|i| (i as f64 * 0.91).cos()).collect::<Vec<_>>()).unwrap();
    let report = grad_check("matmul", &[a, b], 1e-3, |t, v| t.matmul(v[0], v[1]));
    assert!(report.passed(), "{report:?}");
}

#[test]
fn softmax_cross_entropy_batch5_k4() {
    let logits = Tensor::from_f64(&[5, 4], &(0..20).map(|i| (i as f64 * 1.3).sin()).collect::<Vec<_>>()).unwrap();
    let labels = [0usize, 3, 1, 2, 3];
    let report = grad_check("softmax-ce", &[logits], 1e-3, |t, v| {
        let p = t.softmax(v[0])?;
        bpd::losses::ce_loss(t, p, p, &labels)
    });
    assert!(report.passed(), "{report:?}");
}

#[test]
fn checker_detects_injected_fault() {
    let check = GradCheck {
        fault: Some(0.05),
        ..GradCheck::default()
    };
    for name in ["matmul", "softmax", "ce_loss", "mine_loss"] {
        let report = run_case(&check, name, 1);
        assert!(!report.passed(), "{name} should fail with an injected fault");
    }
}

#[test]
fn evaluation_errors_are_reported_not_raised() {
    let report = grad_check("bad", &[Tensor::<f64>::zeros(&[2, 3])], 1e-3, |t, v| {
        let w = t.constant(Tensor::zeros(&[4, 1]));
        t.matmul(v[0], w)
    });
    assert!(!report.passed());
    assert!(report.error.unwrap().contains("matmul"));
}

#[test]
fn backward_examples() {
    let mut t: Tape<f64> = Tape::new();
    let w = t.param(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
    let sq = t.mul(w, w).unwrap();
    let root = t.sum(sq).unwrap();
    t.backward(root).unwrap();
    assert_eq!(t.grad(w).unwrap().data(), &[2.0, 4.0]);
    // accumulation on a second call
    t.backward(root).unwrap();
    assert_eq!(t.grad(w).unwrap().data(), &[4.0, 8.0]);

    let mut t = Tape::new();
    let x = t.param(Tensor::<f64>::from_f64(&[4], &[3.0, -1.0, 2.0, 7.0]).unwrap());
    let m = t.mean(x).unwrap();
    t.backward(m).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[0.25; 4]);
}

#[test]
fn backward_errors() {
    let mut t: Tape<f64> = Tape::new();
    let x = t.param(Tensor::zeros(&[3]));
    assert!(matches!(t.backward(x), Err(TensorError::NotScalar(_))));

    let mut other: Tape<f64> = Tape::new();
    let y = other.param(Tensor::zeros(&[1]));
    assert!(matches!(t.backward(y), Err(TensorError::NoActiveRecord)));
}

#[test]
fn linearity_of_backward() {
    let mut t = Tape::new();
    let a = t.param(Tensor::<f64>::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap());
    let b = t.param(Tensor::<f64>::from_f64(&[3], &[1.5, 0.2, -0.3]).unwrap());
    let ea = t.exp(a).unwrap();
    let fa = t.sum(ea).unwrap();
    let sb = t.square(b).unwrap();
    let fb = t.mean(sb).unwrap();
    let total = t.add(fa, fb).unwrap();
    t.backward(total).unwrap();
    let joint = (t.grad(a).unwrap().clone(), t.grad(b).unwrap().clone());

    t.zero_grad();
    t.backward(fa).unwrap();
    t.backward(fb).unwrap();
    assert_eq!(t.grad(a).unwrap(), &joint.0);
    assert_eq!(t.grad(b).unwrap(), &joint.1);
}
