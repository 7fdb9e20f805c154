use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::segment::segment_stream;
use super::SegmentDataset;
use crate::error::{Error, ParseError, Result};
use crate::kv::{nearest_key, KvDocument};

const MANIFEST_KEYS: [&str; 8] = [
    "name",
    "sampling_rate",
    "channels",
    "labels",
    "null_label",
    "label_column",
    "missing",
    "description",
];

/// External label codes in declaration order; code `i` maps to class `i + 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub entries: Vec<(String, String)>,
}

impl LabelMap {
    /// `code=name, code=name, ...`
    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut entries: Vec<(String, String)> = Vec::new();
        for pair in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (code, name) = pair
                .split_once('=')
                .ok_or_else(|| format!("label entry `{pair}` is not code=name"))?;
            let (code, name) = (code.trim(), name.trim());
            if code.is_empty() || name.is_empty() {
                return Err(format!("label entry `{pair}` has an empty side"));
            }
            if entries.iter().any(|(c, _)| c == code) {
                return Err(format!("label code `{code}` listed twice"));
            }
            if entries.iter().any(|(_, n)| n == name) {
                return Err(format!("label name `{name}` listed twice"));
            }
            entries.push((code.to_string(), name.to_string()));
        }
        if entries.len() < 2 {
            return Err("at least two labels are required".into());
        }
        Ok(Self { entries })
    }

    pub fn classes(&self) -> usize {
        self.entries.len()
    }

    /// 1-based class of an external code.
    pub fn class_of(&self, code: &str) -> Option<usize> {
        self.entries.iter().position(|(c, _)| c == code).map(|i| i + 1)
    }

    pub fn names(&self) -> std::collections::BTreeMap<usize, String> {
        self.entries.iter().enumerate().map(|(i, (_, n))| (i + 1, n.clone())).collect()
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(c, n)| format!("{c}={n}"))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub sampling_rate: f64,
    pub channels: usize,
    pub labels: LabelMap,
    pub null_label: Option<String>,
    /// Column holding the label code; defaults to the last one.
    pub label_column: Option<usize>,
    /// Cell values treated as missing, besides empty cells and NaN.
    pub missing: Vec<String>,
    /// Subject id and resolved file path, in manifest order.
    pub subjects: Vec<(String, PathBuf)>,
}

impl DatasetManifest {
    /// Parses manifest text; relative subject paths resolve against `base`.
    pub fn parse(source: &str, text: &str, base: &Path) -> Result<Self> {
        let doc = KvDocument::parse(source, text)?;
        for (section, entries) in &doc.sections {
            match section.as_str() {
                "" => {
                    for e in entries {
                        if !MANIFEST_KEYS.contains(&e.key.as_str()) {
                            return Err(Error::UnknownKey {
                                section: "manifest".into(),
                                key: e.key.clone(),
                                suggestion: nearest_key(&e.key, MANIFEST_KEYS),
                            });
                        }
                    }
                }
                "subjects" => {}
                other => {
                    return Err(ParseError::new(source, 0, format!("unknown section [{other}]")).into());
                }
            }
        }
        let missing = |key: &str| Error::from(ParseError::new(source, 0, format!("missing key `{key}`")));
        let required = |key: &str| doc.get("", key).ok_or_else(|| missing(key));
        let name = required("name")?.value.clone();
        let sampling_rate: f64 = doc.parse_value("", "sampling_rate")?.ok_or_else(|| missing("sampling_rate"))?;
        if !(sampling_rate > 0.0 && sampling_rate.is_finite()) {
            return Err(doc.error(required("sampling_rate")?.line, "sampling_rate must be positive").into());
        }
        let channels: usize = doc.parse_value("", "channels")?.ok_or_else(|| missing("channels"))?;
        if channels == 0 {
            return Err(doc.error(required("channels")?.line, "channels must be positive").into());
        }
        let le = required("labels")?;
        let labels = LabelMap::parse(&le.value).map_err(|m| doc.error(le.line, m))?;
        let null_label = doc.get("", "null_label").map(|e| e.value.clone());
        if let Some(n) = &null_label {
            if labels.class_of(n).is_some() {
                return Err(doc
                    .error(doc.get("", "null_label").unwrap().line, format!("null label `{n}` is also a class"))
                    .into());
            }
        }
        let label_column: Option<usize> = doc.parse_value("", "label_column")?;
        if let Some(c) = label_column {
            if c == 0 || c > channels + 1 {
                return Err(doc
                    .error(
                        doc.get("", "label_column").unwrap().line,
                        format!("label_column must lie in [1, {}]", channels + 1),
                    )
                    .into());
            }
        }
        let missing_cells = doc
            .get("", "missing")
            .map(|e| e.value.split(',').map(|s| s.trim().to_string()).collect())
            .unwrap_or_default();
        let subjects: Vec<(String, PathBuf)> = doc
            .section("subjects")
            .unwrap_or(&[])
            .iter()
            .map(|e| (e.key.clone(), base.join(&e.value)))
            .collect();
        if subjects.is_empty() {
            return Err(ParseError::new(source, 0, "manifest lists no subjects").into());
        }
        Ok(Self {
            name,
            sampling_rate,
            channels,
            labels,
            null_label,
            label_column,
            missing: missing_cells,
            subjects,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&path.display().to_string(), &text, base)
    }

    /// Canonical text form, with subject paths relative to the manifest.
    pub fn to_text(&self, relative_paths: &[String]) -> String {
        let mut s = format!(
            "name = {}\nsampling_rate = {}\nchannels = {}\nlabels = {}\n",
            self.name,
            self.sampling_rate,
            self.channels,
            self.labels.to_text()
        );
        if let Some(n) = &self.null_label {
            s.push_str(&format!("null_label = {n}\n"));
        }
        if let Some(c) = self.label_column {
            s.push_str(&format!("label_column = {c}\n"));
        }
        if !self.missing.is_empty() {
            s.push_str(&format!("missing = {}\n", self.missing.join(", ")));
        }
        s.push_str("\n[subjects]\n");
        for ((id, _), p) in self.subjects.iter().zip(relative_paths) {
            s.push_str(&format!("{id} = {p}\n"));
        }
        s
    }

    fn label_column_index(&self) -> usize {
        self.label_column.unwrap_or(self.channels + 1)
    }
}

/// One subject's recording, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorStream {
    pub channels: usize,
    /// `channels x samples` values.
    pub values: Vec<f32>,
    /// 1-based class per sample, `None` for the null label.
    pub labels: Vec<Option<usize>>,
}

impl SensorStream {
    pub fn samples(&self) -> usize {
        self.labels.len()
    }
}

/// Parses a delimited sensor file: one sample per row, `timestamp,
/// channel_1..channel_C, label_code` unless the manifest moves the label.
/// Commas are used when the first data row has one, whitespace otherwise.
/// Missing cells are forward-filled, leading gaps back-filled.
pub fn parse_sensor_file(source: &str, text: &str, manifest: &DatasetManifest) -> Result<SensorStream> {
    let c = manifest.channels;
    let label_col = manifest.label_column_index();
    let width = c + 2;
    let mut comma: Option<bool> = None;
    let mut cols: Vec<Vec<Option<f32>>> = vec![Vec::new(); c];
    let mut labels = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let lineno = i + 1;
        let comma = *comma.get_or_insert_with(|| line.contains(','));
        let cells: Vec<&str> = if comma {
            line.split(',').map(str::trim).collect()
        } else {
            line.split_whitespace().collect()
        };
        if cells.len() != width {
            return Err(ParseError::new(
                source,
                lineno,
                format!(
                    "expected {width} columns (timestamp, {c} channels, label), found {}",
                    cells.len()
                ),
            )
            .into());
        }
        let code = cells[label_col];
        let label = if manifest.null_label.as_deref() == Some(code) {
            None
        } else {
            Some(
                manifest
                    .labels
                    .class_of(code)
                    .ok_or_else(|| ParseError::new(source, lineno, format!("unknown label code `{code}`")))?,
            )
        };
        labels.push(label);
        let mut ch = 0;
        for (j, cell) in cells.iter().enumerate() {
            if j == 0 || j == label_col {
                continue;
            }
            let v = if cell.is_empty() || manifest.missing.iter().any(|m| m == cell) {
                None
            } else {
                let v: f32 = cell
                    .parse()
                    .map_err(|_| ParseError::new(source, lineno, format!("bad number `{cell}` in column {}", j + 1)))?;
                (!v.is_nan()).then_some(v)
            };
            cols[ch].push(v);
            ch += 1;
        }
    }
    if labels.is_empty() {
        return Err(ParseError::new(source, 0, "no samples").into());
    }
    let mut values = Vec::with_capacity(c * labels.len());
    for (ch, col) in cols.iter().enumerate() {
        let first = col
            .iter()
            .flatten()
            .next()
            .copied()
            .ok_or_else(|| Error::Data(format!("{source}: channel {} has no values", ch + 1)))?;
        let mut last = first;
        for v in col {
            if let Some(v) = v {
                last = *v;
            }
            values.push(last);
        }
    }
    Ok(SensorStream { channels: c, values, labels })
}

fn stream_segments(subject: &str, stream: &SensorStream, out: &mut SegmentDataset, window: usize, overlap: f64) -> Result<()> {
    let t = stream.samples();
    let windows = segment_stream(&stream.labels, window, overlap)
        .map_err(|e| Error::Data(format!("subject {subject}: {e}")))?;
    let mut seg = vec![0.0f32; stream.channels * window];
    for w in windows {
        let Some(label) = w.label else { continue };
        for ch in 0..stream.channels {
            let src = &stream.values[ch * t + w.start..ch * t + w.start + window];
            seg[ch * window..(ch + 1) * window].copy_from_slice(src);
        }
        out.push(&seg, label, subject)?;
    }
    Ok(())
}

/// Reads the manifest and every subject file, then segments each subject's
/// stream separately and concatenates in manifest order.
pub fn load_manifest(path: &Path, window: usize, overlap: f64) -> Result<(DatasetManifest, SegmentDataset)> {
    let manifest = DatasetManifest::read(path)?;
    let per_subject: Vec<SegmentDataset> = manifest
        .subjects
        .par_iter()
        .map(|(id, file)| {
            let text = std::fs::read_to_string(file).map_err(|e| Error::io(file, e))?;
            let stream = parse_sensor_file(&file.display().to_string(), &text, &manifest)?;
            let mut d = SegmentDataset::new(manifest.channels, window, manifest.labels.classes())?;
            stream_segments(id, &stream, &mut d, window, overlap)?;
            Ok(d)
        })
        .collect::<Result<_>>()?;
    let mut all = SegmentDataset::new(manifest.channels, window, manifest.labels.classes())?
        .with_label_names(manifest.labels.names());
    for d in &per_subject {
        all.extend(d)?;
    }
    if all.is_empty() {
        return Err(Error::Data(format!("{}: no labelled windows", path.display())));
    }
    Ok((manifest, all))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest() -> DatasetManifest {
        DatasetManifest::parse(
            "m",
            "name = t\nsampling_rate = 100\nchannels = 2\nlabels = 1=walk, 2=run\nnull_label = 0\n[subjects]\na = a.csv\n",
            Path::new("/data"),
        )
        .unwrap()
    }

    #[test]
    fn manifest_fields() {
        let m = manifest();
        assert_eq!(m.labels.class_of("2"), Some(2));
        assert_eq!(m.subjects[0].1, PathBuf::from("/data/a.csv"));
        assert_eq!(m.null_label.as_deref(), Some("0"));
    }

    #[test]
    fn manifest_rejects_unknown_keys_and_bad_labels() {
        let e = DatasetManifest::parse("m", "nmae = x\n", Path::new(".")).unwrap_err();
        assert!(e.to_string().contains("did you mean `name`"), "{e}");
        let e = DatasetManifest::parse(
            "m",
            "name=x\nsampling_rate=1\nchannels=1\nlabels=1=a,1=b\n[subjects]\na=a\n",
            Path::new("."),
        )
        .unwrap_err();
        assert!(e.to_string().contains("twice"));
    }

    #[test]
    fn whitespace_and_fill() {
        let m = manifest();
        let s = parse_sensor_file("f", "0 NaN 1 1\n1 2 NaN 1\n2 3 5 0\n", &m).unwrap();
        assert_eq!(s.values, vec![2.0, 2.0, 3.0, 1.0, 1.0, 5.0]);
        assert_eq!(s.labels, vec![Some(1), Some(1), None]);
    }

    #[test]
    fn comma_empty_cells() {
        let m = manifest();
        let s = parse_sensor_file("f", "0,,7,2\n1,4,,2\n", &m).unwrap();
        assert_eq!(s.values, vec![4.0, 4.0, 7.0, 7.0]);
    }

    #[test]
    fn errors_name_file_line_and_code() {
        let m = manifest();
        let e = parse_sensor_file("f.csv", "0,1,1,1\n1,1,1,9\n", &m).unwrap_err();
        assert_eq!(e.to_string(), "f.csv:2: unknown label code `9`");
        let e = parse_sensor_file("f.csv", "0,1,1\n", &m).unwrap_err();
        assert!(e.to_string().starts_with("f.csv:1: expected 4 columns"));
        let e = parse_sensor_file("f.csv", "0,,1,1\n", &m).unwrap_err();
        assert!(e.to_string().contains("channel 1 has no values"));
    }
}
