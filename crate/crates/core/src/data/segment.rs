use crate::error::{Error, Result};

/// One sliding window over a stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    /// Majority class, `None` when the null label wins.
    pub label: Option<usize>,
}

/// `round(window * (1 - overlap))`.
pub fn stride(window: usize, overlap: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Config(format!("overlap must lie in [0, 1), got {overlap}")));
    }
    let s = (window as f64 * (1.0 - overlap)).round() as usize;
    if s == 0 {
        return Err(Error::Config(format!(
            "window {window} with overlap {overlap} gives a zero stride"
        )));
    }
    Ok(s)
}

/// `floor((T - window) / stride) + 1`.
pub fn window_count(samples: usize, window: usize, overlap: f64) -> Result<usize> {
    if window == 0 || samples < window {
        return Err(Error::Data(format!("stream of {samples} samples is shorter than the window {window}")));
    }
    Ok((samples - window) / stride(window, overlap)? + 1)
}

/// Most frequent label; ties go to the lowest class, and null (`None`) only
/// wins with a strict majority over every class.
pub fn majority_label(labels: &[Option<usize>]) -> Option<usize> {
    let mut counts: Vec<usize> = Vec::new();
    let mut null = 0;
    for l in labels {
        match *l {
            None => null += 1,
            Some(k) => {
                if counts.len() <= k {
                    counts.resize(k + 1, 0);
                }
                counts[k] += 1;
            }
        }
    }
    let mut best: Option<(usize, usize)> = None;
    for (k, &c) in counts.iter().enumerate() {
        if c > 0 && best.map_or(true, |(_, bc)| c > bc) {
            best = Some((k, c));
        }
    }
    match best {
        Some((k, c)) if c >= null => Some(k),
        _ => None,
    }
}

/// Windows over a stream of `labels.len()` samples. Null windows are kept
/// here with `label: None`; callers drop them.
pub fn segment_stream(labels: &[Option<usize>], window: usize, overlap: f64) -> Result<Vec<Window>> {
    let count = window_count(labels.len(), window, overlap)?;
    let step = stride(window, overlap)?;
    Ok((0..count)
        .map(|i| {
            let start = i * step;
            Window {
                start,
                label: majority_label(&labels[start..start + window]),
            }
        })
        .collect())
}
