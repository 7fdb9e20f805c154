use serde::{Deserialize, Serialize};

use super::SegmentDataset;
use crate::error::{Error, Result};

pub const STD_FLOOR: f64 = 1e-8;

/// Per-channel mean and (population) standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Statistics over every sample of every segment in `train`.
    pub fn fit(train: &SegmentDataset) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Data("cannot normalise with an empty training set".into()));
        }
        let (c, w) = (train.channels(), train.window());
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for i in 0..train.len() {
            for (ch, row) in train.segment(i).chunks(w).enumerate() {
                for &v in row {
                    sum[ch] += v as f64;
                }
            }
        }
        let count = (train.len() * w) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        for i in 0..train.len() {
            for (ch, row) in train.segment(i).chunks(w).enumerate() {
                for &v in row {
                    let d = v as f64 - mean[ch];
                    sq[ch] += d * d;
                }
            }
        }
        let std = sq.iter().map(|s| (s / count).sqrt().max(STD_FLOOR)).collect();
        Ok(Self { mean, std })
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn apply(&self, data: &mut SegmentDataset) -> Result<()> {
        if self.mean.len() != data.channels() {
            return Err(Error::Data(format!(
                "normalisation has {} channels, dataset has {}",
                self.mean.len(),
                data.channels()
            )));
        }
        let w = data.window();
        let c = data.channels();
        for seg in data.values_mut().chunks_mut(c * w) {
            for (ch, row) in seg.chunks_mut(w).enumerate() {
                for v in row {
                    *v = ((*v as f64 - self.mean[ch]) / self.std[ch]) as f32;
                }
            }
        }
        Ok(())
    }
}

/// Fits statistics on `train` and applies them to each of `apply_to`.
pub fn normalize(train: &SegmentDataset, apply_to: &mut [&mut SegmentDataset]) -> Result<NormStats> {
    let stats = NormStats::fit(train)?;
    for d in apply_to.iter_mut() {
        stats.apply(d)?;
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_channel_maps_to_zero() {
        let mut d = SegmentDataset::new(1, 4, 1).unwrap();
        d.push(&[3.0; 4], 1, "a").unwrap();
        let mut copy = d.clone();
        let s = normalize(&d, &mut [&mut copy]).unwrap();
        assert_eq!(s.std[0], STD_FLOOR);
        assert!(copy.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn applies_train_statistics() {
        let s = NormStats {
            mean: vec![5.0],
            std: vec![2.0],
        };
        let mut d = SegmentDataset::new(1, 1, 1).unwrap();
        d.push(&[9.0], 1, "a").unwrap();
        s.apply(&mut d).unwrap();
        assert_eq!(d.values(), &[2.0]);
    }
}
