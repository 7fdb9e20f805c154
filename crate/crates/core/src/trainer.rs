//! The four-phase alternating optimisation and the training loop.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::SegmentDataset;
use crate::error::{Error, Result};
use crate::losses::{ce_loss, mean_entropy, ne_loss, recon_loss, NeForm};
use crate::metrics::{macro_f1, ConfusionMatrix};
use crate::model::{BaselineNetwork, BpdNetworks, Component};
use crate::nn::{derive_seed, seeded_rng, EncoderKind, EncoderSpec, Module, Session};
use crate::optim::Adam;
use crate::tensor::Tensor;

const EPOCH_TAG: u64 = 0x5348_5546;
const STEP_TAG: u64 = 0x5354_4550;

/// How phase 3 treats the statistics network `M`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MineMode {
    /// `D`, `D'` and `M` all descend the MINE objective.
    #[default]
    Literal,
    /// `M` ascends the objective while `D` and `D'` descend it.
    Minimax,
}

impl fmt::Display for MineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MineMode::Literal => "literal",
            MineMode::Minimax => "minimax",
        })
    }
}

impl FromStr for MineMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "literal" => Ok(MineMode::Literal),
            "minimax" => Ok(MineMode::Minimax),
            other => Err(format!("unknown mine_mode `{other}` (expected literal or minimax)")),
        }
    }
}

/// Every hyperparameter of the training loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epoch: usize,
    pub seed: u64,
    pub encoder: EncoderKind,
    /// `None` picks the encoder's default width.
    pub latent_dim: Option<usize>,
    pub dropout: f64,
    pub mine_mode: MineMode,
    pub ne_form: NeForm,
    pub convergence_patience: usize,
    pub convergence_delta: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 64,
            max_epoch: 300,
            seed: 0,
            encoder: EncoderKind::Cnn,
            latent_dim: None,
            dropout: 0.5,
            mine_mode: MineMode::Literal,
            ne_form: NeForm::Entropy,
            convergence_patience: 20,
            convergence_delta: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if self.max_epoch == 0 {
            return Err(Error::Config("max_epoch must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if self.latent_dim == Some(0) {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        if !(self.convergence_delta >= 0.0) {
            return Err(Error::Config("convergence_delta must be non-negative".into()));
        }
        Ok(())
    }

    pub fn encoder_spec(&self, channels: usize, window: usize) -> EncoderSpec {
        let mut spec = EncoderSpec::new(self.encoder, channels, window);
        if let Some(d) = self.latent_dim {
            spec.latent_dim = d;
        }
        spec
    }
}

/// Per-epoch means over batches. Baseline runs only fill `ce`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub ce: f64,
    pub ne: Option<f64>,
    pub recon: Option<f64>,
    pub mine: Option<f64>,
    /// Mean Shannon entropy of `C'` outputs, in nats.
    pub entropy: Option<f64>,
    pub val_f1: Option<f64>,
}

/// Loss values of one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub ce: f64,
    pub ne: f64,
    pub recon: f64,
    pub mine: f64,
    pub entropy: f64,
}

/// Position of a step, for diagnostics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepAt {
    pub epoch: usize,
    pub batch: usize,
}

fn finite(v: f64, phase: &'static str, loss: &'static str, at: StepAt) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            phase,
            loss,
            epoch: at.epoch,
            batch: at.batch,
        })
    }
}

/// One Adam state per component.
#[derive(Clone, Debug, PartialEq)]
pub struct BpdOptimizers {
    pub groups: Vec<Adam<f32>>,
}

impl BpdOptimizers {
    pub fn new(lr: f64) -> Self {
        Self {
            groups: Component::ALL.iter().map(|_| Adam::new(lr)).collect(),
        }
    }

    pub fn group_mut(&mut self, c: Component) -> &mut Adam<f32> {
        &mut self.groups[c as usize]
    }
}

/// Applies an Adam step to each listed component from the gradients on
/// `tape`.
fn update(
    nets: &mut BpdNetworks<f32>,
    opts: &mut BpdOptimizers,
    tape: &Tape<f32>,
    bound: &[(Component, crate::nn::Bound)],
    sign_of: impl Fn(Component) -> f64,
) -> Result<()> {
    for (c, b) in bound {
        let grads: Vec<Option<Tensor<f32>>> = b.grads(tape).into_iter().map(|g| g.cloned()).collect();
        let refs: Vec<Option<&Tensor<f32>>> = grads.iter().map(Option::as_ref).collect();
        let params = nets.module_mut(*c).params_mut();
        opts.group_mut(*c).step_signed(params, &refs, sign_of(*c))?;
    }
    Ok(())
}

fn bind_all(nets: &BpdNetworks<f32>, tape: &mut Tape<f32>, trainable: &[Component]) -> Vec<(Component, crate::nn::Bound)> {
    Component::ALL
        .iter()
        .map(|&c| (c, nets.bind(tape, c, trainable.contains(&c))))
        .collect()
}

fn bound(b: &[(Component, crate::nn::Bound)], c: Component) -> &crate::nn::Bound {
    &b[c as usize].1
}

fn only(b: Vec<(Component, crate::nn::Bound)>, keep: &[Component]) -> Vec<(Component, crate::nn::Bound)> {
    b.into_iter().filter(|(c, _)| keep.contains(c)).collect()
}

/// Phase identifiers in execution order.
pub const PHASES: [&str; 4] = ["ce", "ne", "mine", "recon"];

/// Components each phase updates.
pub fn phase_components(phase: usize) -> &'static [Component] {
    use Component::*;
    match phase {
        0 => &[Encoder, DisentanglerSig, DisentanglerRed, ClassifierSig, ClassifierRed],
        1 => &[Encoder, DisentanglerRed],
        2 => &[DisentanglerSig, DisentanglerRed, MiNetwork],
        3 => &[DisentanglerSig, DisentanglerRed, Reconstructor],
        _ => &[],
    }
}

/// Runs one phase on `batch`; returns the loss value (and the `C'` output
/// entropy for the negative-entropy phase).
pub fn run_phase(
    phase: usize,
    nets: &mut BpdNetworks<f32>,
    opts: &mut BpdOptimizers,
    batch: &Tensor<f32>,
    labels: &[usize],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    at: StepAt,
) -> Result<(f64, Option<f64>)> {
    use Component::*;
    let trainable = phase_components(phase);
    let mut tape = Tape::new();
    let x = tape.constant(batch.clone());
    let b = bind_all(nets, &mut tape, trainable);
    let mut sess = Session::train(rng);
    let mut entropy = None;
    let (loss, name) = match phase {
        0 => {
            let enc = nets.encode(&mut tape, bound(&b, Encoder), x, &mut sess)?;
            let zs = nets.disentangle(DisentanglerSig, &mut tape, bound(&b, DisentanglerSig), enc, &mut sess)?;
            let zr = nets.disentangle(DisentanglerRed, &mut tape, bound(&b, DisentanglerRed), enc, &mut sess)?;
            let ps = nets.classify(ClassifierSig, &mut tape, bound(&b, ClassifierSig), zs, &mut sess)?;
            let pr = nets.classify(ClassifierRed, &mut tape, bound(&b, ClassifierRed), zr, &mut sess)?;
            (ce_loss(&mut tape, ps, pr, labels)?, "ce")
        }
        1 => {
            let enc = nets.encode(&mut tape, bound(&b, Encoder), x, &mut sess)?;
            let zr = nets.disentangle(DisentanglerRed, &mut tape, bound(&b, DisentanglerRed), enc, &mut sess)?;
            let pr = nets.classify(ClassifierRed, &mut tape, bound(&b, ClassifierRed), zr, &mut sess)?;
            entropy = Some(mean_entropy(tape.value(pr)));
            (ne_loss(&mut tape, pr, cfg.ne_form, labels)?, "ne")
        }
        2 => {
            let enc = nets.encode(&mut tape, bound(&b, Encoder), x, &mut sess)?;
            let zs = nets.disentangle(DisentanglerSig, &mut tape, bound(&b, DisentanglerSig), enc, &mut sess)?;
            let zr = nets.disentangle(DisentanglerRed, &mut tape, bound(&b, DisentanglerRed), enc, &mut sess)?;
            let mut perm: Vec<usize> = (0..labels.len()).collect();
            if let crate::nn::Mode::Train(r) = &mut sess.mode {
                perm.shuffle(&mut **r);
            }
            (nets.mine(&mut tape, bound(&b, MiNetwork), zs, zr, &perm, &mut sess)?, "mine")
        }
        3 => {
            let enc = nets.encode(&mut tape, bound(&b, Encoder), x, &mut sess)?;
            let zs = nets.disentangle(DisentanglerSig, &mut tape, bound(&b, DisentanglerSig), enc, &mut sess)?;
            let zr = nets.disentangle(DisentanglerRed, &mut tape, bound(&b, DisentanglerRed), enc, &mut sess)?;
            let r = nets.reconstruct(&mut tape, bound(&b, Reconstructor), zs, zr, &mut sess)?;
            (recon_loss(&mut tape, enc, r)?, "recon")
        }
        _ => return Err(Error::Config(format!("no phase {phase}"))),
    };
    let value = finite(tape.value(loss).item().into(), PHASES[phase], name, at)?;
    tape.backward(loss)?;
    let minimax = cfg.mine_mode == MineMode::Minimax;
    update(nets, opts, &tape, &only(b, trainable), |c| {
        if minimax && c == MiNetwork {
            -1.0
        } else {
            1.0
        }
    })?;
    // running statistics follow the supervised pass only
    if phase == 0 {
        nets.commit_norm_stats(&mut sess);
    }
    Ok((value, entropy))
}

/// The four phases in order on the same mini-batch, each recomputing its
/// forward pass. `labels` are 0-based.
pub fn train_step(
    nets: &mut BpdNetworks<f32>,
    opts: &mut BpdOptimizers,
    batch: &Tensor<f32>,
    labels: &[usize],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    at: StepAt,
) -> Result<StepLosses> {
    let (ce, _) = run_phase(0, nets, opts, batch, labels, cfg, rng, at)?;
    let (ne, entropy) = run_phase(1, nets, opts, batch, labels, cfg, rng, at)?;
    let (mine, _) = run_phase(2, nets, opts, batch, labels, cfg, rng, at)?;
    let (recon, _) = run_phase(3, nets, opts, batch, labels, cfg, rng, at)?;
    Ok(StepLosses {
        ce,
        ne,
        recon,
        mine,
        entropy: entropy.unwrap_or(f64::NAN),
    })
}

/// A model the training loop can drive.
pub trait Trainable {
    fn step(&mut self, batch: &Tensor<f32>, labels: &[usize], rng: &mut ChaCha8Rng, at: StepAt) -> Result<StepLosses>;
    fn predict(&self, data: &SegmentDataset) -> Result<Vec<usize>>;
    /// Whether the step produces the auxiliary losses.
    fn full_losses(&self) -> bool;
}

/// BPD networks with their optimizer states.
#[derive(Clone, Debug, PartialEq)]
pub struct BpdModel {
    pub nets: BpdNetworks<f32>,
    pub opts: BpdOptimizers,
    pub config: TrainConfig,
}

impl BpdModel {
    pub fn new(cfg: &TrainConfig, channels: usize, window: usize, classes: usize) -> Result<Self> {
        cfg.validate()?;
        let nets = BpdNetworks::new(cfg.encoder_spec(channels, window), classes, cfg.dropout, cfg.seed)?;
        Ok(Self {
            nets,
            opts: BpdOptimizers::new(cfg.lr),
            config: cfg.clone(),
        })
    }
}

impl Trainable for BpdModel {
    fn step(&mut self, batch: &Tensor<f32>, labels: &[usize], rng: &mut ChaCha8Rng, at: StepAt) -> Result<StepLosses> {
        train_step(&mut self.nets, &mut self.opts, batch, labels, &self.config, rng, at)
    }

    fn predict(&self, data: &SegmentDataset) -> Result<Vec<usize>> {
        self.nets.predict(data)
    }

    fn full_losses(&self) -> bool {
        true
    }
}

/// Encoder plus classifier trained with single-branch cross-entropy.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineModel {
    pub net: BaselineNetwork<f32>,
    pub encoder_opt: Adam<f32>,
    pub classifier_opt: Adam<f32>,
    pub config: TrainConfig,
}

impl BaselineModel {
    pub fn new(cfg: &TrainConfig, channels: usize, window: usize, classes: usize) -> Result<Self> {
        cfg.validate()?;
        let net = BaselineNetwork::new(cfg.encoder_spec(channels, window), classes, cfg.dropout, cfg.seed)?;
        Ok(Self {
            net,
            encoder_opt: Adam::new(cfg.lr),
            classifier_opt: Adam::new(cfg.lr),
            config: cfg.clone(),
        })
    }
}

impl Trainable for BaselineModel {
    fn step(&mut self, batch: &Tensor<f32>, labels: &[usize], rng: &mut ChaCha8Rng, at: StepAt) -> Result<StepLosses> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let be = self.net.encoder.bind(&mut tape, true);
        let bc = self.net.classifier.bind(&mut tape, true);
        let mut sess = Session::train(rng);
        let p = self.net.probabilities(&mut tape, &be, &bc, x, &mut sess)?;
        let picked = tape.pick(p, labels)?;
        let safe = tape.clamp_min(picked, crate::losses::PROB_FLOOR)?;
        let logp = tape.log(safe)?;
        let mean = tape.mean(logp)?;
        let loss = tape.neg(mean)?;
        let ce = finite(tape.value(loss).item().into(), "ce", "ce", at)?;
        tape.backward(loss)?;
        for (b, opt, m) in [
            (&be, &mut self.encoder_opt, &mut self.net.encoder as &mut dyn Module<f32>),
            (&bc, &mut self.classifier_opt, &mut self.net.classifier),
        ] {
            let grads: Vec<Option<Tensor<f32>>> = b.grads(&tape).into_iter().map(|g| g.cloned()).collect();
            let refs: Vec<Option<&Tensor<f32>>> = grads.iter().map(Option::as_ref).collect();
            opt.step(m.params_mut(), &refs)?;
        }
        Ok(StepLosses {
            ce,
            ..StepLosses::default()
        })
    }

    fn predict(&self, data: &SegmentDataset) -> Result<Vec<usize>> {
        self.net.predict(data)
    }

    fn full_losses(&self) -> bool {
        false
    }
}

/// Mini-batches of one epoch: a seeded shuffle cut into `batch_size`
/// pieces; a final piece shorter than 2 is dropped.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded_rng(derive_seed(seed, &[EPOCH_TAG, epoch as u64])));
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Tracks the early-stopping rule.
#[derive(Clone, Debug)]
pub struct Convergence {
    patience: usize,
    delta: f64,
    best: Option<f64>,
    stale: usize,
}

impl Convergence {
    pub fn new(patience: usize, delta: f64) -> Self {
        Self {
            patience,
            delta,
            best: None,
            stale: 0,
        }
    }

    /// Feeds a score where larger is better; returns true once it has
    /// failed to improve by `delta` for `patience` consecutive epochs.
    pub fn observe(&mut self, score: f64) -> bool {
        match self.best {
            Some(b) if score <= b + self.delta => self.stale += 1,
            _ => {
                self.best = Some(score);
                self.stale = 0;
            }
        }
        self.patience > 0 && self.stale >= self.patience
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOutcome {
    pub logs: Vec<EpochLog>,
    pub stopped_early: bool,
}

/// Trains until `max_epoch` or convergence. The monitored score is the
/// validation macro-F1 when `validation` is given, otherwise the negated
/// training `ce + recon`.
pub fn fit<M: Trainable>(
    model: &mut M,
    train: &SegmentDataset,
    cfg: &TrainConfig,
    validation: Option<&SegmentDataset>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<FitOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if let Some(v) = validation {
        if (v.channels(), v.window(), v.classes()) != (train.channels(), train.window(), train.classes()) {
            return Err(Error::Data("validation set geometry differs from the training set".into()));
        }
    }
    let mut conv = Convergence::new(cfg.convergence_patience, cfg.convergence_delta);
    let mut logs = Vec::new();
    let mut stopped_early = false;
    for epoch in 1..=cfg.max_epoch {
        let batches = epoch_batches(train.len(), cfg.batch_size, cfg.seed, epoch);
        if batches.is_empty() {
            return Err(Error::Data(format!("{} segment(s) cannot form a batch of 2", train.len())));
        }
        let mut sum = StepLosses::default();
        for (bi, idx) in batches.iter().enumerate() {
            let x = train.batch::<f32>(idx)?;
            let y = train.batch_labels(idx);
            let mut rng = seeded_rng(derive_seed(cfg.seed, &[STEP_TAG, epoch as u64, bi as u64]));
            let s = model.step(&x, &y, &mut rng, StepAt { epoch, batch: bi + 1 })?;
            sum.ce += s.ce;
            sum.ne += s.ne;
            sum.recon += s.recon;
            sum.mine += s.mine;
            sum.entropy += s.entropy;
        }
        let n = batches.len() as f64;
        let full = model.full_losses();
        let aux = |v: f64| full.then_some(v / n);
        let val_f1 = match validation {
            Some(v) if !v.is_empty() => {
                let pred = model.predict(v)?;
                Some(macro_f1(&ConfusionMatrix::from_labels(train.classes(), v.labels(), &pred)?)?)
            }
            _ => None,
        };
        let log = EpochLog {
            epoch,
            ce: sum.ce / n,
            ne: aux(sum.ne),
            recon: aux(sum.recon),
            mine: aux(sum.mine),
            entropy: aux(sum.entropy),
            val_f1,
        };
        on_epoch(&log);
        let score = log.val_f1.unwrap_or(-(log.ce + log.recon.unwrap_or(0.0)));
        logs.push(log);
        if conv.observe(score) {
            stopped_early = epoch < cfg.max_epoch;
            break;
        }
    }
    Ok(FitOutcome { logs, stopped_early })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_batches() {
        let b = epoch_batches(130, 64, 1, 1);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![64, 64, 2]);
        let b = epoch_batches(129, 64, 1, 1);
        assert_eq!(b.len(), 2);
        let mut all: Vec<usize> = epoch_batches(130, 64, 1, 1).concat();
        all.sort();
        assert_eq!(all, (0..130).collect::<Vec<_>>());
        assert_ne!(epoch_batches(130, 64, 1, 1), epoch_batches(130, 64, 1, 2));
    }

    #[test]
    fn convergence_waits_for_patience() {
        let mut c = Convergence::new(2, 0.1);
        assert!(!c.observe(1.0));
        assert!(!c.observe(1.05));
        assert!(c.observe(1.1));
        let mut c = Convergence::new(2, 0.1);
        assert!(!c.observe(1.0));
        assert!(!c.observe(1.2));
        assert!(!c.observe(1.25));
        assert!(c.observe(1.0));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { lr: 0.0, ..Default::default() },
            TrainConfig { batch_size: 1, ..Default::default() },
            TrainConfig { max_epoch: 0, ..Default::default() },
            TrainConfig { dropout: 1.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
