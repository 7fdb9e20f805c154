//! Run configuration files.
//!
//! ```text
//! [data]
//! manifest = pamap2/manifest.ini
//! window = 168
//! overlap = 0.5
//!
//! [train]
//! learning_rate = 0.0001
//! encoder = cnn
//!
//! [protocol]
//! kind = loso
//! ```
//!
//! A `[synth]` section (or `synth = spec.ini` under `[data]`) replaces the
//! manifest with a generated dataset.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::data::{generate_synthetic, load_manifest, SegmentDataset, SplitKind, SynthSpec};
use crate::error::{Error, Result};
use crate::kv::{nearest_key, KvDocument};
use crate::losses::NeForm;
use crate::nn::EncoderKind;
use crate::protocol::ModelKind;
use crate::trainer::{MineMode, TrainConfig};

pub const DEFAULT_WINDOW: usize = 168;
pub const DEFAULT_OVERLAP: f64 = 0.5;

const SECTIONS: [&str; 4] = ["data", "train", "protocol", "synth"];
const DATA_KEYS: [&str; 5] = ["manifest", "synth", "window", "overlap", "normalize"];
const TRAIN_KEYS: [&str; 11] = [
    "learning_rate",
    "batch_size",
    "max_epoch",
    "seed",
    "encoder",
    "latent_dim",
    "dropout",
    "mine_mode",
    "ne_form",
    "convergence_patience",
    "convergence_delta",
];
const PROTOCOL_KEYS: [&str; 3] = ["kind", "test_subjects", "model"];

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Manifest(PathBuf),
    Synth(SynthSpec),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub window: usize,
    pub overlap: f64,
    pub normalize: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolConfig {
    pub kind: SplitKind,
    pub test_subjects: Vec<String>,
    pub model: ModelKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    pub protocol: ProtocolConfig,
}

fn check_keys(doc: &KvDocument, section: &str, allowed: &[&str]) -> Result<()> {
    for e in doc.section(section).unwrap_or(&[]) {
        if !allowed.contains(&e.key.as_str()) {
            let everywhere = DATA_KEYS.iter().chain(&TRAIN_KEYS).chain(&PROTOCOL_KEYS).copied();
            return Err(Error::UnknownKey {
                section: section.to_string(),
                key: e.key.clone(),
                suggestion: nearest_key(&e.key, allowed.iter().copied()).or_else(|| nearest_key(&e.key, everywhere)),
            });
        }
    }
    Ok(())
}

fn parse_bool(doc: &KvDocument, section: &str, key: &str) -> Result<Option<bool>> {
    match doc.get(section, key) {
        None => Ok(None),
        Some(e) => match e.value.as_str() {
            "true" | "yes" | "1" => Ok(Some(true)),
            "false" | "no" | "0" => Ok(Some(false)),
            other => Err(doc.error(e.line, format!("`{key}` expects true or false, got `{other}`")).into()),
        },
    }
}

impl RunConfig {
    /// Parses config text; relative paths resolve against `base`.
    pub fn parse(source: &str, text: &str, base: &Path) -> Result<Self> {
        let doc = KvDocument::parse(source, text)?;
        for (name, entries) in &doc.sections {
            if name.is_empty() {
                if let Some(e) = entries.first() {
                    return Err(doc
                        .error(e.line, format!("key `{}` must sit inside a section", e.key))
                        .into());
                }
            } else if !SECTIONS.contains(&name.as_str()) {
                return Err(Error::UnknownKey {
                    section: "sections".into(),
                    key: name.clone(),
                    suggestion: nearest_key(name, SECTIONS),
                });
            }
        }
        check_keys(&doc, "data", &DATA_KEYS)?;
        check_keys(&doc, "train", &TRAIN_KEYS)?;
        check_keys(&doc, "protocol", &PROTOCOL_KEYS)?;

        let manifest = doc.get("data", "manifest").map(|e| base.join(&e.value));
        let synth_file = doc.get("data", "synth");
        let has_inline = doc.section("synth").is_some();
        let source = match (manifest, synth_file, has_inline) {
            (Some(m), None, false) => DataSource::Manifest(m),
            (None, Some(e), false) => {
                let path = base.join(&e.value);
                let text = std::fs::read_to_string(&path).map_err(|err| Error::io(&path, err))?;
                DataSource::Synth(SynthSpec::parse(&path.display().to_string(), &text)?)
            }
            (None, None, true) => DataSource::Synth(SynthSpec::from_kv(&doc, "synth")?),
            (None, None, false) => {
                return Err(Error::Config(format!(
                    "{source}: [data] needs `manifest`, `synth`, or a [synth] section"
                )))
            }
            _ => {
                return Err(Error::Config(format!(
                    "{source}: give exactly one of `manifest`, `synth` or a [synth] section"
                )))
            }
        };
        let window: Option<usize> = doc.parse_value("data", "window")?;
        let window = match &source {
            DataSource::Synth(s) => match window {
                Some(w) if w != s.window => {
                    return Err(Error::Config(format!(
                        "[data] window {w} differs from the synthetic window {}",
                        s.window
                    )))
                }
                _ => s.window,
            },
            DataSource::Manifest(_) => window.unwrap_or(DEFAULT_WINDOW),
        };
        let default_overlap = match source {
            DataSource::Synth(_) => 0.0,
            DataSource::Manifest(_) => DEFAULT_OVERLAP,
        };
        let data = DataConfig {
            source,
            window,
            overlap: doc.parse_value("data", "overlap")?.unwrap_or(default_overlap),
            normalize: parse_bool(&doc, "data", "normalize")?.unwrap_or(true),
        };
        crate::data::stride(data.window, data.overlap)?;

        let d = TrainConfig::default();
        let train = TrainConfig {
            lr: doc.parse_value("train", "learning_rate")?.unwrap_or(d.lr),
            batch_size: doc.parse_value("train", "batch_size")?.unwrap_or(d.batch_size),
            max_epoch: doc.parse_value("train", "max_epoch")?.unwrap_or(d.max_epoch),
            seed: doc.parse_value("train", "seed")?.unwrap_or(d.seed),
            encoder: doc.parse_value::<EncoderKind>("train", "encoder")?.unwrap_or(d.encoder),
            latent_dim: doc.parse_value("train", "latent_dim")?,
            dropout: doc.parse_value("train", "dropout")?.unwrap_or(d.dropout),
            mine_mode: doc.parse_value::<MineMode>("train", "mine_mode")?.unwrap_or(d.mine_mode),
            ne_form: doc.parse_value::<NeForm>("train", "ne_form")?.unwrap_or(d.ne_form),
            convergence_patience: doc
                .parse_value("train", "convergence_patience")?
                .unwrap_or(d.convergence_patience),
            convergence_delta: doc.parse_value("train", "convergence_delta")?.unwrap_or(d.convergence_delta),
        };
        train.validate()?;

        let protocol = ProtocolConfig {
            kind: doc.parse_value::<SplitKind>("protocol", "kind")?.unwrap_or(SplitKind::Loso),
            test_subjects: doc
                .get("protocol", "test_subjects")
                .map(|e| {
                    e.value
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(String::from)
                        .collect()
                })
                .unwrap_or_default(),
            model: doc.parse_value::<ModelKind>("protocol", "model")?.unwrap_or(ModelKind::Bpd),
        };
        if protocol.kind == SplitKind::Holdout && protocol.test_subjects.is_empty() {
            return Err(Error::Config("holdout protocol needs `test_subjects`".into()));
        }
        Ok(Self { data, train, protocol })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&path.display().to_string(), &text, base)
    }

    /// A configuration on the shipped synthetic benchmark.
    pub fn synthetic(spec: SynthSpec, train: TrainConfig) -> Self {
        Self {
            data: DataConfig {
                window: spec.window,
                source: DataSource::Synth(spec),
                overlap: 0.0,
                normalize: true,
            },
            train,
            protocol: ProtocolConfig {
                kind: SplitKind::Loso,
                test_subjects: Vec::new(),
                model: ModelKind::Bpd,
            },
        }
    }

    /// Every key with its effective value. Parsing this text gives back an
    /// equal config (manifest paths become absolute).
    pub fn resolved(&self) -> String {
        let mut s = String::from("[data]\n");
        match &self.data.source {
            DataSource::Manifest(p) => s.push_str(&format!("manifest = {}\n", p.display())),
            DataSource::Synth(_) => {}
        }
        s.push_str(&format!(
            "window = {}\noverlap = {}\nnormalize = {}\n",
            self.data.window, self.data.overlap, self.data.normalize
        ));
        let t = &self.train;
        s.push_str(&format!(
            "\n[train]\nlearning_rate = {}\nbatch_size = {}\nmax_epoch = {}\nseed = {}\nencoder = {}\n",
            t.lr, t.batch_size, t.max_epoch, t.seed, t.encoder
        ));
        if let Some(d) = t.latent_dim {
            s.push_str(&format!("latent_dim = {d}\n"));
        }
        s.push_str(&format!(
            "dropout = {}\nmine_mode = {}\nne_form = {}\nconvergence_patience = {}\nconvergence_delta = {}\n",
            t.dropout, t.mine_mode, t.ne_form, t.convergence_patience, t.convergence_delta
        ));
        s.push_str(&format!("\n[protocol]\nkind = {}\n", self.protocol.kind));
        if !self.protocol.test_subjects.is_empty() {
            s.push_str(&format!("test_subjects = {}\n", self.protocol.test_subjects.join(", ")));
        }
        s.push_str(&format!("model = {}\n", self.protocol.model));
        if let DataSource::Synth(spec) = &self.data.source {
            s.push_str("\n[synth]\n");
            s.push_str(&spec.to_kv());
        }
        s
    }

    /// SHA-256 of the resolved text, hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.resolved().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Loads or generates the dataset; returns its name too.
    pub fn load_data(&self) -> Result<(String, SegmentDataset)> {
        match &self.data.source {
            DataSource::Manifest(p) => {
                let (m, d) = load_manifest(p, self.data.window, self.data.overlap)?;
                Ok((m.name, d))
            }
            DataSource::Synth(spec) => Ok(("synthetic".into(), generate_synthetic(spec)?)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_apply() {
        let c = RunConfig::parse("c", "[data]\nmanifest = m.ini\n", Path::new("/x")).unwrap();
        assert_eq!(c.data.source, DataSource::Manifest(PathBuf::from("/x/m.ini")));
        assert_eq!(c.data.window, 168);
        assert_eq!(c.data.overlap, 0.5);
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.protocol.kind, SplitKind::Loso);
        assert_eq!(c.protocol.model, ModelKind::Bpd);
    }

    #[test]
    fn unknown_key_suggests_nearest() {
        let e = RunConfig::parse("c", "[data]\nmanifest = m\n[train]\nlearningrate = 0.1\n", Path::new(".")).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("`learningrate`"), "{msg}");
        assert!(msg.contains("did you mean `learning_rate`"), "{msg}");
        let e = RunConfig::parse("c", "[trian]\n", Path::new(".")).unwrap_err();
        assert!(e.to_string().contains("did you mean `train`"));
    }

    #[test]
    fn resolved_round_trips() {
        let c = RunConfig::parse(
            "c",
            "[train]\nlearning_rate = 0.001\nmine_mode = minimax\n[protocol]\nkind = holdout\ntest_subjects = s1, s2\n[synth]\nwindow = 32\nnoise_std = 0.5\n",
            Path::new("."),
        )
        .unwrap();
        let again = RunConfig::parse("r", &c.resolved(), Path::new(".")).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.hash(), c.hash());
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn invalid_values() {
        assert!(RunConfig::parse("c", "[data]\nmanifest = m\n[train]\nbatch_size = 1\n", Path::new(".")).is_err());
        assert!(RunConfig::parse("c", "[data]\nmanifest = m\n[train]\nencoder = rnn\n", Path::new(".")).is_err());
        assert!(RunConfig::parse("c", "[data]\n", Path::new(".")).is_err());
        assert!(RunConfig::parse("c", "[protocol]\nkind = holdout\n[synth]\n", Path::new(".")).is_err());
        assert!(RunConfig::parse("c", "seed = 1\n", Path::new(".")).is_err());
    }
}
