//! The seven BPD components and the paths through them.
//!
//! ```text
//!            ┌─ D  → z_sig ─┬─ C  → p_sig
//!  x → E(x) ─┤              ├─ R([z_sig|z_red]) → recon
//!            └─ D' → z_red ─┴─ C' → p_red
//!                  (z_sig, z_red) → M
//! ```
//!
//! Inference only runs `E → D → C`.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;
use std::io::Write;

use crate::autograd::{Tape, Var};
use crate::data::SegmentDataset;
use crate::error::{Error, Result};
use crate::nn::{
    derive_seed, seeded_rng, Bound, Classifier, Disentangler, Encoder, EncoderSpec, MiNetwork, Module, Reconstructor,
    Session,
};
use crate::tensor::{Scalar, Tensor};

/// Segments per forward pass when predicting or exporting.
pub const INFERENCE_CHUNK: usize = 256;

/// Identifies one trainable component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    Encoder,
    DisentanglerSig,
    DisentanglerRed,
    ClassifierSig,
    ClassifierRed,
    Reconstructor,
    MiNetwork,
}

impl Component {
    pub const ALL: [Component; 7] = [
        Component::Encoder,
        Component::DisentanglerSig,
        Component::DisentanglerRed,
        Component::ClassifierSig,
        Component::ClassifierRed,
        Component::Reconstructor,
        Component::MiNetwork,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Encoder => "encoder",
            Component::DisentanglerSig => "disentangler_sig",
            Component::DisentanglerRed => "disentangler_red",
            Component::ClassifierSig => "classifier_sig",
            Component::ClassifierRed => "classifier_red",
            Component::Reconstructor => "reconstructor",
            Component::MiNetwork => "mi_network",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }

    fn seed_tag(self) -> u64 {
        self as u64 + 1
    }
}

/// Output of [`BpdNetworks::full_forward`].
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardBundle<S> {
    pub enc: Tensor<S>,
    pub z_sig: Tensor<S>,
    pub z_red: Tensor<S>,
    pub p_sig: Tensor<S>,
    pub p_red: Tensor<S>,
    pub recon: Tensor<S>,
}

/// Tape handles for a forward pass through every component.
#[derive(Clone, Copy, Debug)]
pub struct BundleVars {
    pub enc: Var,
    pub z_sig: Var,
    pub z_red: Var,
    pub p_sig: Var,
    pub p_red: Var,
    pub recon: Var,
}

/// All BPD components.
#[derive(Clone, Debug, PartialEq)]
pub struct BpdNetworks<S> {
    pub encoder: Encoder<S>,
    pub d_sig: Disentangler<S>,
    pub d_red: Disentangler<S>,
    pub c_sig: Classifier<S>,
    pub c_red: Classifier<S>,
    pub recon: Reconstructor<S>,
    pub mi: MiNetwork<S>,
}

/// Hash of the exact bit patterns of a module's parameters.
pub fn param_digest<S: Scalar>(m: &dyn Module<S>) -> u64 {
    let mut h = DefaultHasher::new();
    for (name, t) in m.params() {
        h.write(name.as_bytes());
        let mut buf = Vec::with_capacity(t.numel() * 8);
        for &v in t.data() {
            v.write_le(&mut buf);
        }
        h.write(&buf);
    }
    h.finish()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl<S: Scalar> BpdNetworks<S> {
    /// Initialises every component from its own seed derived from `seed`.
    pub fn new(spec: EncoderSpec, classes: usize, dropout: f64, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
        }
        let rng = |c: Component| seeded_rng(derive_seed(seed, &[c.seed_tag()]));
        let latent = spec.latent_dim;
        Ok(Self {
            encoder: Encoder::new(spec, &mut rng(Component::Encoder))?,
            d_sig: Disentangler::new(latent, &mut rng(Component::DisentanglerSig))?,
            d_red: Disentangler::new(latent, &mut rng(Component::DisentanglerRed))?,
            c_sig: Classifier::new(latent, classes, dropout, &mut rng(Component::ClassifierSig))?,
            c_red: Classifier::new(latent, classes, dropout, &mut rng(Component::ClassifierRed))?,
            recon: Reconstructor::new(latent, &mut rng(Component::Reconstructor))?,
            mi: MiNetwork::new(latent, latent, &mut rng(Component::MiNetwork))?,
        })
    }

    pub fn classes(&self) -> usize {
        self.c_sig.classes()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.latent_dim()
    }

    pub fn spec(&self) -> &EncoderSpec {
        self.encoder.spec()
    }

    pub fn module(&self, c: Component) -> &dyn Module<S> {
        match c {
            Component::Encoder => &self.encoder,
            Component::DisentanglerSig => &self.d_sig,
            Component::DisentanglerRed => &self.d_red,
            Component::ClassifierSig => &self.c_sig,
            Component::ClassifierRed => &self.c_red,
            Component::Reconstructor => &self.recon,
            Component::MiNetwork => &self.mi,
        }
    }

    pub fn module_mut(&mut self, c: Component) -> &mut dyn Module<S> {
        match c {
            Component::Encoder => &mut self.encoder,
            Component::DisentanglerSig => &mut self.d_sig,
            Component::DisentanglerRed => &mut self.d_red,
            Component::ClassifierSig => &mut self.c_sig,
            Component::ClassifierRed => &mut self.c_red,
            Component::Reconstructor => &mut self.recon,
            Component::MiNetwork => &mut self.mi,
        }
    }

    pub fn param_count(&self) -> usize {
        Component::ALL.iter().map(|&c| self.module(c).param_count()).sum()
    }

    pub fn digest(&self, c: Component) -> u64 {
        param_digest(self.module(c))
    }

    pub fn bind(&self, tape: &mut Tape<S>, c: Component, trainable: bool) -> Bound {
        self.module(c).bind(tape, trainable)
    }

    // ---------------------------------------------------------- path pieces

    pub fn encode(&self, tape: &mut Tape<S>, b: &Bound, x: Var, sess: &mut Session<'_>) -> Result<Var> {
        sess.touch(Component::Encoder.name());
        Ok(self.encoder.forward(tape, b.vars(), x)?)
    }

    /// `which` is [`Component::DisentanglerSig`] or [`Component::DisentanglerRed`].
    pub fn disentangle(
        &self,
        which: Component,
        tape: &mut Tape<S>,
        b: &Bound,
        enc: Var,
        sess: &mut Session<'_>,
    ) -> Result<Var> {
        let d = match which {
            Component::DisentanglerSig => &self.d_sig,
            Component::DisentanglerRed => &self.d_red,
            other => return Err(Error::Config(format!("{} is not a disentangler", other.name()))),
        };
        sess.touch(which.name());
        let (z, stats) = d.forward(tape, b.vars(), enc, sess.mode.is_train())?;
        if let Some(stats) = stats {
            sess.norm_updates.push((which.name(), stats));
        }
        Ok(z)
    }

    /// `which` is [`Component::ClassifierSig`] or [`Component::ClassifierRed`].
    pub fn classify(
        &self,
        which: Component,
        tape: &mut Tape<S>,
        b: &Bound,
        z: Var,
        sess: &mut Session<'_>,
    ) -> Result<Var> {
        let c = match which {
            Component::ClassifierSig => &self.c_sig,
            Component::ClassifierRed => &self.c_red,
            other => return Err(Error::Config(format!("{} is not a classifier", other.name()))),
        };
        sess.touch(which.name());
        Ok(c.forward(tape, b.vars(), z, &mut sess.mode)?)
    }

    pub fn reconstruct(
        &self,
        tape: &mut Tape<S>,
        b: &Bound,
        z_sig: Var,
        z_red: Var,
        sess: &mut Session<'_>,
    ) -> Result<Var> {
        sess.touch(Component::Reconstructor.name());
        Ok(self.recon.forward(tape, b.vars(), z_sig, z_red)?)
    }

    pub fn mine(
        &self,
        tape: &mut Tape<S>,
        b: &Bound,
        z_sig: Var,
        z_red: Var,
        perm: &[usize],
        sess: &mut Session<'_>,
    ) -> Result<Var> {
        sess.touch(Component::MiNetwork.name());
        Ok(crate::losses::mine_loss(tape, &self.mi, b.vars(), z_sig, z_red, perm)?)
    }

    /// Folds batch statistics gathered in `sess` into the running averages.
    pub fn commit_norm_stats(&mut self, sess: &mut Session<'_>) {
        for (name, stats) in sess.norm_updates.drain(..) {
            match Component::from_name(name) {
                Some(Component::DisentanglerSig) => self.d_sig.norm.update_running(&stats),
                Some(Component::DisentanglerRed) => self.d_red.norm.update_running(&stats),
                _ => unreachable!("only disentanglers normalise"),
            }
        }
    }

    /// Builds the whole forward graph on `tape` with all parameters frozen.
    pub fn forward_vars(&self, tape: &mut Tape<S>, x: Var, sess: &mut Session<'_>) -> Result<BundleVars> {
        let b: Vec<Bound> = Component::ALL.iter().map(|&c| self.bind(tape, c, false)).collect();
        let enc = self.encode(tape, &b[0], x, sess)?;
        let z_sig = self.disentangle(Component::DisentanglerSig, tape, &b[1], enc, sess)?;
        let z_red = self.disentangle(Component::DisentanglerRed, tape, &b[2], enc, sess)?;
        let p_sig = self.classify(Component::ClassifierSig, tape, &b[3], z_sig, sess)?;
        let p_red = self.classify(Component::ClassifierRed, tape, &b[4], z_red, sess)?;
        let recon = self.reconstruct(tape, &b[5], z_sig, z_red, sess)?;
        Ok(BundleVars {
            enc,
            z_sig,
            z_red,
            p_sig,
            p_red,
            recon,
        })
    }

    /// Every intermediate of the BPD graph for one batch `(n, channels, window)`.
    pub fn full_forward(&self, batch: &Tensor<S>, sess: &mut Session<'_>) -> Result<ForwardBundle<S>> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let v = self.forward_vars(&mut tape, x, sess)?;
        Ok(ForwardBundle {
            enc: tape.value(v.enc).clone(),
            z_sig: tape.value(v.z_sig).clone(),
            z_red: tape.value(v.z_red).clone(),
            p_sig: tape.value(v.p_sig).clone(),
            p_red: tape.value(v.p_red).clone(),
            recon: tape.value(v.recon).clone(),
        })
    }

    /// `E(x)`, `D(E(x))` and optionally `D'(E(x))` in evaluation mode.
    fn eval_features(&self, batch: &Tensor<S>, with_red: bool) -> Result<(Tensor<S>, Tensor<S>, Option<Tensor<S>>)> {
        let mut sess = Session::eval();
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let be = self.bind(&mut tape, Component::Encoder, false);
        let bd = self.bind(&mut tape, Component::DisentanglerSig, false);
        let enc = self.encode(&mut tape, &be, x, &mut sess)?;
        let z_sig = self.disentangle(Component::DisentanglerSig, &mut tape, &bd, enc, &mut sess)?;
        let z_red = if with_red {
            let br = self.bind(&mut tape, Component::DisentanglerRed, false);
            let z = self.disentangle(Component::DisentanglerRed, &mut tape, &br, enc, &mut sess)?;
            Some(tape.value(z).clone())
        } else {
            None
        };
        Ok((tape.value(enc).clone(), tape.value(z_sig).clone(), z_red))
    }

    /// Predicted labels in `1..=K` via `argmax C(D(E(x)))`, plus the names of
    /// the components that were evaluated.
    pub fn infer_traced(&self, batch: &Tensor<S>) -> Result<(Vec<usize>, Vec<&'static str>)> {
        let mut sess = Session::eval();
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let be = self.bind(&mut tape, Component::Encoder, false);
        let bd = self.bind(&mut tape, Component::DisentanglerSig, false);
        let bc = self.bind(&mut tape, Component::ClassifierSig, false);
        let enc = self.encode(&mut tape, &be, x, &mut sess)?;
        let z = self.disentangle(Component::DisentanglerSig, &mut tape, &bd, enc, &mut sess)?;
        let p = self.classify(Component::ClassifierSig, &mut tape, &bc, z, &mut sess)?;
        let k = self.classes();
        let labels = tape.value(p).data().chunks(k).map(|r| argmax(r) + 1).collect();
        Ok((labels, sess.trace))
    }

    pub fn infer(&self, batch: &Tensor<S>) -> Result<Vec<usize>> {
        Ok(self.infer_traced(batch)?.0)
    }

    /// Predictions for every segment of `data`, in chunks.
    pub fn predict(&self, data: &SegmentDataset) -> Result<Vec<usize>> {
        predict_chunked(data, |b| self.infer(b))
    }

    /// One row per segment with the selected latent blocks.
    pub fn feature_table(&self, data: &SegmentDataset, select: FeatureSelection) -> Result<FeatureTable> {
        let mut rows = Vec::with_capacity(data.len());
        let indices: Vec<usize> = (0..data.len()).collect();
        for chunk in indices.chunks(INFERENCE_CHUNK) {
            let batch = data.batch::<S>(chunk)?;
            let (enc, z_sig, z_red) = self.eval_features(&batch, select.z_red)?;
            for (r, &i) in chunk.iter().enumerate() {
                let mut values = Vec::new();
                if select.z_sig {
                    values.extend(z_sig.row(r).iter().map(|v| v.to_f64()));
                }
                if let Some(z) = &z_red {
                    values.extend(z.row(r).iter().map(|v| v.to_f64()));
                }
                if select.enc {
                    values.extend(enc.row(r).iter().map(|v| v.to_f64()));
                }
                rows.push(FeatureRow {
                    segment_id: i,
                    subject: data.subjects()[i].clone(),
                    label: data.labels()[i],
                    values,
                });
            }
        }
        Ok(FeatureTable {
            width: select.width(self.latent_dim()),
            rows,
        })
    }
}

pub(crate) fn predict_chunked<S: Scalar>(
    data: &SegmentDataset,
    mut infer: impl FnMut(&Tensor<S>) -> Result<Vec<usize>>,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(data.len());
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(INFERENCE_CHUNK) {
        out.extend(infer(&data.batch::<S>(chunk)?)?);
    }
    Ok(out)
}

/// Encoder followed directly by a classifier, trained with cross-entropy
/// only. This is the comparison model for BPD.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineNetwork<S> {
    pub encoder: Encoder<S>,
    pub classifier: Classifier<S>,
}

impl<S: Scalar> BaselineNetwork<S> {
    /// Uses the same per-component seeds as [`BpdNetworks::new`], so both
    /// models start from an identical encoder.
    pub fn new(spec: EncoderSpec, classes: usize, dropout: f64, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
        }
        let rng = |c: Component| seeded_rng(derive_seed(seed, &[c.seed_tag()]));
        Ok(Self {
            encoder: Encoder::new(spec, &mut rng(Component::Encoder))?,
            classifier: Classifier::new(spec.latent_dim, classes, dropout, &mut rng(Component::ClassifierSig))?,
        })
    }

    pub fn classes(&self) -> usize {
        self.classifier.classes()
    }

    pub fn spec(&self) -> &EncoderSpec {
        self.encoder.spec()
    }

    pub fn probabilities(&self, tape: &mut Tape<S>, be: &Bound, bc: &Bound, x: Var, sess: &mut Session<'_>) -> Result<Var> {
        sess.touch(Component::Encoder.name());
        let enc = self.encoder.forward(tape, be.vars(), x)?;
        sess.touch(Component::ClassifierSig.name());
        Ok(self.classifier.forward(tape, bc.vars(), enc, &mut sess.mode)?)
    }

    pub fn infer(&self, batch: &Tensor<S>) -> Result<Vec<usize>> {
        let mut sess = Session::eval();
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let be = self.encoder.bind(&mut tape, false);
        let bc = self.classifier.bind(&mut tape, false);
        let p = self.probabilities(&mut tape, &be, &bc, x, &mut sess)?;
        let k = self.classes();
        Ok(tape.value(p).data().chunks(k).map(|r| argmax(r) + 1).collect())
    }

    pub fn predict(&self, data: &SegmentDataset) -> Result<Vec<usize>> {
        predict_chunked(data, |b| self.infer(b))
    }
}

/// Which latent blocks a feature export carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureSelection {
    pub z_sig: bool,
    pub z_red: bool,
    pub enc: bool,
}

impl Default for FeatureSelection {
    fn default() -> Self {
        Self {
            z_sig: true,
            z_red: false,
            enc: false,
        }
    }
}

impl FeatureSelection {
    pub fn all() -> Self {
        Self {
            z_sig: true,
            z_red: true,
            enc: true,
        }
    }

    pub fn width(self, latent: usize) -> usize {
        latent * (self.z_sig as usize + self.z_red as usize + self.enc as usize)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRow {
    pub segment_id: usize,
    pub subject: String,
    pub label: usize,
    /// Selected blocks in the order `z_sig`, `z_red`, `E(x)`.
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    pub width: usize,
    pub rows: Vec<FeatureRow>,
}

impl FeatureTable {
    pub fn header(&self) -> String {
        let mut h = String::from("segment_id,subject,label");
        for i in 0..self.width {
            h.push_str(&format!(",f{i}"));
        }
        h
    }

    /// Comma-separated text, values at 6 significant digits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{}", self.header())?;
        for r in &self.rows {
            write!(out, "{},{},{}", r.segment_id, r.subject, r.label)?;
            for &v in &r.values {
                write!(out, ",{}", format_sig6(v))?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// `printf("%.6g")` formatting.
pub fn format_sig6(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let sci = format!("{:.5e}", v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(format!("{:.*}", decimals, v))
    } else {
        let m = trim_zeros(mantissa.to_string());
        format!("{m}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.1f32, 0.7, 0.2]), 1);
        assert_eq!(argmax(&[0.5f64, 0.5]), 0);
        assert_eq!(argmax(&[0.2f64, 0.4, 0.4]), 1);
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(format_sig6(0.0), "0");
        assert_eq!(format_sig6(1.0), "1");
        assert_eq!(format_sig6(3.14159265), "3.14159");
        assert_eq!(format_sig6(-123456.7), "-123457");
        assert_eq!(format_sig6(1234567.0), "1.23457e+06");
        assert_eq!(format_sig6(0.0001234567), "0.000123457");
        assert_eq!(format_sig6(0.00001234567), "1.23457e-05");
        assert_eq!(format_sig6(0.5), "0.5");
    }

    #[test]
    fn component_names_round_trip() {
        for c in Component::ALL {
            assert_eq!(Component::from_name(c.name()), Some(c));
        }
    }
}
