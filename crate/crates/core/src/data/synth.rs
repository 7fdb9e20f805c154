use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, LabelMap};
use super::SegmentDataset;
use crate::error::{Error, Result};
use crate::kv::{nearest_key, KvDocument};
use crate::nn::{derive_seed, seeded_rng};

/// Parameters of the synthetic benchmark.
///
/// Each segment is a class waveform, distorted by a per-subject nuisance
/// (gain, channel offsets, frequency and phase shift, and an additive
/// subject-specific pattern), plus white noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub subjects: usize,
    pub channels: usize,
    pub window: usize,
    pub segments_per_subject_per_class: usize,
    /// Cycles per window of class 1; class `k` adds `(k - 1) * frequency_step`.
    pub base_frequency: f64,
    pub frequency_step: f64,
    /// Std of the log gain per subject.
    pub amplitude_jitter: f64,
    pub offset_std: f64,
    /// Std of the relative frequency shift per subject.
    pub frequency_jitter: f64,
    /// Std of the phase shift per subject, in radians.
    pub phase_jitter: f64,
    /// Amplitude of the subject-specific additive waveform.
    pub subject_pattern: f64,
    pub noise_std: f64,
    pub sampling_rate: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            subjects: 8,
            channels: 3,
            window: 64,
            segments_per_subject_per_class: 16,
            base_frequency: 2.0,
            frequency_step: 1.0,
            amplitude_jitter: 0.3,
            offset_std: 0.5,
            frequency_jitter: 0.1,
            phase_jitter: 0.5,
            subject_pattern: 0.8,
            noise_std: 0.3,
            sampling_rate: 50.0,
            seed: 7,
        }
    }
}

const SYNTH_KEYS: [&str; 15] = [
    "classes",
    "subjects",
    "channels",
    "window",
    "segments_per_subject_per_class",
    "base_frequency",
    "frequency_step",
    "amplitude_jitter",
    "offset_std",
    "frequency_jitter",
    "phase_jitter",
    "subject_pattern",
    "noise_std",
    "sampling_rate",
    "seed",
];

impl SynthSpec {
    /// Reads keys from `section` of `doc`; absent keys keep their defaults.
    pub fn from_kv(doc: &KvDocument, section: &str) -> Result<Self> {
        let mut s = Self::default();
        for e in doc.section(section).unwrap_or(&[]) {
            if !SYNTH_KEYS.contains(&e.key.as_str()) {
                return Err(Error::UnknownKey {
                    section: section.to_string(),
                    key: e.key.clone(),
                    suggestion: nearest_key(&e.key, SYNTH_KEYS),
                });
            }
        }
        macro_rules! take {
            ($($f:ident),*) => {$(
                if let Some(v) = doc.parse_value(section, stringify!($f))? {
                    s.$f = v;
                }
            )*};
        }
        take!(
            classes,
            subjects,
            channels,
            window,
            segments_per_subject_per_class,
            base_frequency,
            frequency_step,
            amplitude_jitter,
            offset_std,
            frequency_jitter,
            phase_jitter,
            subject_pattern,
            noise_std,
            sampling_rate,
            seed
        );
        s.validate()?;
        Ok(s)
    }

    pub fn parse(source: &str, text: &str) -> Result<Self> {
        let doc = KvDocument::parse(source, text)?;
        if let Some((name, _)) = doc.sections.iter().find(|(n, e)| !n.is_empty() && !e.is_empty()) {
            return Err(Error::Config(format!("{source}: unexpected section [{name}] in a synth spec")));
        }
        Self::from_kv(&doc, "")
    }

    pub fn to_kv(&self) -> String {
        format!(
            "classes = {}\nsubjects = {}\nchannels = {}\nwindow = {}\nsegments_per_subject_per_class = {}\n\
             base_frequency = {}\nfrequency_step = {}\namplitude_jitter = {}\noffset_std = {}\n\
             frequency_jitter = {}\nphase_jitter = {}\nsubject_pattern = {}\nnoise_std = {}\n\
             sampling_rate = {}\nseed = {}\n",
            self.classes,
            self.subjects,
            self.channels,
            self.window,
            self.segments_per_subject_per_class,
            self.base_frequency,
            self.frequency_step,
            self.amplitude_jitter,
            self.offset_std,
            self.frequency_jitter,
            self.phase_jitter,
            self.subject_pattern,
            self.noise_std,
            self.sampling_rate,
            self.seed
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("synthetic data needs at least 2 classes".into()));
        }
        if self.subjects == 0 || self.channels == 0 || self.window == 0 || self.segments_per_subject_per_class == 0 {
            return Err(Error::Config("synthetic counts must be positive".into()));
        }
        let reals = [
            self.base_frequency,
            self.frequency_step,
            self.amplitude_jitter,
            self.offset_std,
            self.frequency_jitter,
            self.phase_jitter,
            self.subject_pattern,
            self.noise_std,
        ];
        if reals.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("synthetic parameters must be finite and non-negative".into()));
        }
        if !(self.sampling_rate > 0.0 && self.sampling_rate.is_finite()) {
            return Err(Error::Config("sampling_rate must be positive".into()));
        }
        Ok(())
    }

    pub fn total_segments(&self) -> usize {
        self.classes * self.subjects * self.segments_per_subject_per_class
    }

    pub fn subject_id(s: usize) -> String {
        format!("s{}", s + 1)
    }
}

struct Nuisance {
    gain: f64,
    freq_scale: f64,
    phase: f64,
    offsets: Vec<f64>,
    pattern_freq: f64,
    pattern_phase: Vec<f64>,
}

fn nuisance(spec: &SynthSpec, subject: usize) -> Nuisance {
    let mut rng = seeded_rng(derive_seed(spec.seed, &[1, subject as u64]));
    let mut n = || -> f64 { rng.sample(StandardNormal) };
    let gain = (spec.amplitude_jitter * n()).exp();
    let freq_scale = (1.0 + spec.frequency_jitter * n()).max(0.1);
    let phase = spec.phase_jitter * n();
    let offsets = (0..spec.channels).map(|_| spec.offset_std * n()).collect();
    let pattern_freq = 0.5 + 2.0 * n().abs();
    let pattern_phase = (0..spec.channels).map(|_| PI * n()).collect();
    Nuisance {
        gain,
        freq_scale,
        phase,
        offsets,
        pattern_freq,
        pattern_phase,
    }
}

/// Noise-free class `k` (0-based) waveform on channel `c` at sample `t`.
fn class_wave(spec: &SynthSpec, k: usize, c: usize, t: usize, nz: &Nuisance) -> f64 {
    let f = (spec.base_frequency + k as f64 * spec.frequency_step) * nz.freq_scale;
    let theta = 0.9 * ((k + 1) * (c + 1)) as f64 + nz.phase;
    let w = 2.0 * PI * f * t as f64 / spec.window as f64;
    let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
    (w + theta).sin() + 0.4 * sign * (2.0 * w + 2.0 * theta).sin()
}

/// Segments ordered by subject, then repetition, then class.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<SegmentDataset> {
    spec.validate()?;
    let names = (1..=spec.classes).map(|k| (k, format!("class{k}"))).collect();
    let mut data = SegmentDataset::new(spec.channels, spec.window, spec.classes)?.with_label_names(names);
    let mut seg = vec![0.0f32; spec.channels * spec.window];
    for s in 0..spec.subjects {
        let nz = nuisance(spec, s);
        let mut noise = seeded_rng(derive_seed(spec.seed, &[2, s as u64]));
        let id = SynthSpec::subject_id(s);
        for _ in 0..spec.segments_per_subject_per_class {
            for k in 0..spec.classes {
                for c in 0..spec.channels {
                    for t in 0..spec.window {
                        let pattern = spec.subject_pattern
                            * (2.0 * PI * nz.pattern_freq * t as f64 / spec.window as f64 + nz.pattern_phase[c]).sin();
                        let eps: f64 = noise.sample(StandardNormal);
                        let v = nz.gain * class_wave(spec, k, c, t, &nz) + pattern + nz.offsets[c] + spec.noise_std * eps;
                        seg[c * spec.window + t] = v as f32;
                    }
                }
                data.push(&seg, k + 1, &id)?;
            }
        }
    }
    Ok(data)
}

/// Writes one comma-separated sensor file per subject plus `manifest.ini`
/// into `dir`. Segments are laid end to end, so loading with the spec's
/// window and zero overlap recovers them exactly. Returns the manifest path.
pub fn write_synthetic(spec: &SynthSpec, dir: &Path) -> Result<PathBuf> {
    let data = generate_synthetic(spec)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (c, w) = (spec.channels, spec.window);
    let mut files = Vec::new();
    for id in data.subject_ids() {
        let mut text = String::new();
        let mut t = 0usize;
        for i in (0..data.len()).filter(|&i| data.subjects()[i] == id) {
            let seg = data.segment(i);
            for j in 0..w {
                text.push_str(&format!("{}", t as f64 / spec.sampling_rate));
                for ch in 0..c {
                    text.push_str(&format!(",{}", seg[ch * w + j]));
                }
                text.push_str(&format!(",{}\n", data.labels()[i]));
                t += 1;
            }
        }
        let name = format!("{id}.csv");
        let path = dir.join(&name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        files.push((id, name));
    }
    let labels = LabelMap {
        entries: (1..=spec.classes).map(|k| (k.to_string(), format!("class{k}"))).collect(),
    };
    let manifest = DatasetManifest {
        name: "synthetic".into(),
        sampling_rate: spec.sampling_rate,
        channels: c,
        labels,
        null_label: Some("0".into()),
        label_column: None,
        missing: Vec::new(),
        subjects: files.iter().map(|(id, n)| (id.clone(), dir.join(n))).collect(),
    };
    let rel: Vec<String> = files.into_iter().map(|(_, n)| n).collect();
    let path = dir.join("manifest.ini");
    std::fs::write(&path, manifest.to_text(&rel)).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segment_count_is_the_product() {
        let spec = SynthSpec {
            segments_per_subject_per_class: 30,
            window: 16,
            ..SynthSpec::default()
        };
        assert_eq!(generate_synthetic(&spec).unwrap().len(), 960);
    }

    #[test]
    fn zero_nuisance_makes_classes_subject_invariant() {
        let spec = SynthSpec {
            amplitude_jitter: 0.0,
            offset_std: 0.0,
            frequency_jitter: 0.0,
            phase_jitter: 0.0,
            subject_pattern: 0.0,
            noise_std: 0.0,
            subjects: 3,
            segments_per_subject_per_class: 2,
            window: 16,
            ..SynthSpec::default()
        };
        let d = generate_synthetic(&spec).unwrap();
        for k in 1..=spec.classes {
            let idx: Vec<usize> = (0..d.len()).filter(|&i| d.labels()[i] == k).collect();
            for &i in &idx[1..] {
                assert_eq!(d.segment(i), d.segment(idx[0]));
            }
        }
        assert_ne!(d.segment(0), d.segment(1));
    }

    #[test]
    fn deterministic() {
        let spec = SynthSpec {
            window: 16,
            segments_per_subject_per_class: 2,
            ..SynthSpec::default()
        };
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
        let other = SynthSpec { seed: 8, ..spec.clone() };
        assert_ne!(generate_synthetic(&spec).unwrap(), generate_synthetic(&other).unwrap());
    }

    #[test]
    fn kv_round_trip() {
        let spec = SynthSpec {
            noise_std: 0.125,
            seed: 99,
            ..SynthSpec::default()
        };
        assert_eq!(SynthSpec::parse("s", &spec.to_kv()).unwrap(), spec);
        let e = SynthSpec::parse("s", "noise = 1\n").unwrap_err();
        assert!(e.to_string().contains("noise_std"), "{e}");
    }
}
