//! Segments, segmentation, normalisation, subject splits, manifests and the
//! synthetic benchmark.

mod manifest;
mod normalize;
mod segment;
mod split;
mod synth;

pub use manifest::{load_manifest, parse_sensor_file, DatasetManifest, LabelMap, SensorStream};
pub use normalize::{normalize, NormStats, STD_FLOOR};
pub use segment::{majority_label, segment_stream, stride, window_count, Window};
pub use split::{plan_splits, Fold, SplitKind, SplitPlan};
pub use synth::{generate_synthetic, write_synthetic, SynthSpec};

use std::collections::{BTreeMap, HashSet};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Fixed-length multichannel segments with a 1-based label and a subject id
/// each. Values are stored row-major as `(segment, channel, time)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentDataset {
    channels: usize,
    window: usize,
    classes: usize,
    values: Vec<f32>,
    labels: Vec<usize>,
    subjects: Vec<String>,
    label_names: BTreeMap<usize, String>,
}

impl SegmentDataset {
    pub fn new(channels: usize, window: usize, classes: usize) -> Result<Self> {
        if channels == 0 || window == 0 || classes == 0 {
            return Err(Error::Data(format!(
                "channels, window and class count must be positive (got {channels}, {window}, {classes})"
            )));
        }
        Ok(Self {
            channels,
            window,
            classes,
            values: Vec::new(),
            labels: Vec::new(),
            subjects: Vec::new(),
            label_names: BTreeMap::new(),
        })
    }

    pub fn with_label_names(mut self, names: BTreeMap<usize, String>) -> Self {
        self.label_names = names;
        self
    }

    /// Appends one segment laid out as `(channel, time)`.
    pub fn push(&mut self, segment: &[f32], label: usize, subject: &str) -> Result<()> {
        if segment.len() != self.channels * self.window {
            return Err(Error::Data(format!(
                "segment has {} values, expected {}x{}",
                segment.len(),
                self.channels,
                self.window
            )));
        }
        if label == 0 || label > self.classes {
            return Err(Error::Data(format!("label {label} outside [1, {}]", self.classes)));
        }
        self.values.extend_from_slice(segment);
        self.labels.push(label);
        self.subjects.push(subject.to_string());
        Ok(())
    }

    /// Appends every segment of `other`.
    pub fn extend(&mut self, other: &SegmentDataset) -> Result<()> {
        if (other.channels, other.window, other.classes) != (self.channels, self.window, self.classes) {
            return Err(Error::Data("cannot merge datasets of different geometry".into()));
        }
        self.values.extend_from_slice(&other.values);
        self.labels.extend_from_slice(&other.labels);
        self.subjects.extend(other.subjects.iter().cloned());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn subjects(&self) -> &[String] {
        &self.subjects
    }

    pub fn label_names(&self) -> &BTreeMap<usize, String> {
        &self.label_names
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn segment(&self, i: usize) -> &[f32] {
        let n = self.channels * self.window;
        &self.values[i * n..(i + 1) * n]
    }

    /// Subject ids in order of first appearance.
    pub fn subject_ids(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.subjects
            .iter()
            .filter(|s| seen.insert(s.as_str()))
            .cloned()
            .collect()
    }

    /// Segments belonging to any of `subjects`, in dataset order.
    pub fn select_subjects(&self, subjects: &[String]) -> SegmentDataset {
        let keep: HashSet<&str> = subjects.iter().map(String::as_str).collect();
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep.contains(self.subjects[i].as_str())).collect();
        self.subset(&idx)
    }

    pub fn subset(&self, indices: &[usize]) -> SegmentDataset {
        let mut out = SegmentDataset {
            values: Vec::with_capacity(indices.len() * self.channels * self.window),
            labels: Vec::with_capacity(indices.len()),
            subjects: Vec::with_capacity(indices.len()),
            ..self.empty_like()
        };
        for &i in indices {
            out.values.extend_from_slice(self.segment(i));
            out.labels.push(self.labels[i]);
            out.subjects.push(self.subjects[i].clone());
        }
        out
    }

    fn empty_like(&self) -> SegmentDataset {
        SegmentDataset {
            channels: self.channels,
            window: self.window,
            classes: self.classes,
            values: Vec::new(),
            labels: Vec::new(),
            subjects: Vec::new(),
            label_names: self.label_names.clone(),
        }
    }

    /// `(n, channels, window)` tensor of the chosen segments.
    pub fn batch<S: Scalar>(&self, indices: &[usize]) -> Result<Tensor<S>> {
        let per = self.channels * self.window;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Data(format!("segment index {i} out of range ({})", self.len())));
            }
            data.extend(self.segment(i).iter().map(|&v| S::from_f64(v as f64)));
        }
        Ok(Tensor::new(vec![indices.len(), self.channels, self.window], data)?)
    }

    /// 0-based labels of the chosen segments.
    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i] - 1).collect()
    }

    /// Segment count per class, index 0 holding class 1.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.labels {
            c[l - 1] += 1;
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> SegmentDataset {
        let mut d = SegmentDataset::new(2, 3, 2).unwrap();
        d.push(&[1., 2., 3., 4., 5., 6.], 1, "a").unwrap();
        d.push(&[7., 8., 9., 10., 11., 12.], 2, "b").unwrap();
        d.push(&[0.; 6], 2, "a").unwrap();
        d
    }

    #[test]
    fn push_validates() {
        let mut d = toy();
        assert!(d.push(&[0.; 5], 1, "a").is_err());
        assert!(d.push(&[0.; 6], 0, "a").is_err());
        assert!(d.push(&[0.; 6], 3, "a").is_err());
        assert_eq!(d.len(), 3);
    }

    #[test]
    fn subjects_and_batches() {
        let d = toy();
        assert_eq!(d.subject_ids(), vec!["a".to_string(), "b".to_string()]);
        let a = d.select_subjects(&["a".into()]);
        assert_eq!(a.labels(), &[1, 2]);
        let b: Tensor<f64> = d.batch(&[1]).unwrap();
        assert_eq!(b.shape(), &[1, 2, 3]);
        assert_eq!(b.data()[5], 12.0);
        assert_eq!(d.batch_labels(&[0, 1]), vec![0, 1]);
        assert_eq!(d.class_counts(), vec![1, 2]);
    }
}
