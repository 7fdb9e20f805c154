//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   b"BPDCKPT\0"
//! version u32
//! meta    u32 length + JSON
//! count   u32
//! tensor* u32 name length, name, u32 ndim, u64 dims, f32 values
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::NormStats;
use crate::error::{Error, ParseError, Result};
use crate::model::Component;
use crate::nn::{EncoderSpec, Module};
use crate::optim::Adam;
use crate::protocol::ModelKind;
use crate::tensor::{Scalar, Tensor};
use crate::trainer::{BaselineModel, BpdModel, BpdOptimizers, TrainConfig};

pub const MAGIC: &[u8; 8] = b"BPDCKPT\0";
pub const VERSION: u32 = 1;

/// Everything besides the tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelKind,
    pub spec: EncoderSpec,
    pub classes: usize,
    pub train: TrainConfig,
    pub norm: Option<NormStats>,
    pub label_names: BTreeMap<usize, String>,
    /// Adam step count per optimizer group.
    pub optimizer_steps: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn push_module(out: &mut Vec<(String, Tensor<f32>)>, prefix: &str, m: &dyn Module<f32>) {
    for (n, t) in m.params().into_iter().chain(m.buffers()) {
        out.push((format!("{prefix}.{n}"), t.clone()));
    }
}

fn push_adam(out: &mut Vec<(String, Tensor<f32>)>, prefix: &str, a: &Adam<f32>) {
    for (i, (m, v)) in a.m.iter().zip(&a.v).enumerate() {
        out.push((format!("opt.{prefix}.m{i}"), m.clone()));
        out.push((format!("opt.{prefix}.v{i}"), v.clone()));
    }
}

/// Looks tensors up by name and checks their shapes.
struct Lookup {
    map: BTreeMap<String, Tensor<f32>>,
}

impl Lookup {
    fn take(&mut self, name: &str, shape: &[usize]) -> Result<Tensor<f32>> {
        let t = self
            .map
            .remove(name)
            .ok_or_else(|| Error::Mismatch(format!("tensor `{name}` missing")))?;
        if t.shape() != shape {
            return Err(Error::Mismatch(format!(
                "tensor `{name}` has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    }

    fn fill_module(&mut self, prefix: &str, m: &mut dyn Module<f32>) -> Result<()> {
        let names: Vec<(String, Vec<usize>)> = m.params().iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
        for ((n, shape), slot) in names.iter().zip(m.params_mut()) {
            *slot = self.take(&format!("{prefix}.{n}"), shape)?;
        }
        let names: Vec<(String, Vec<usize>)> = m.buffers().iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
        for ((n, shape), slot) in names.iter().zip(m.buffers_mut()) {
            *slot = self.take(&format!("{prefix}.{n}"), shape)?;
        }
        Ok(())
    }

    fn fill_adam(&mut self, prefix: &str, m: &dyn Module<f32>, a: &mut Adam<f32>, step: u64) -> Result<()> {
        a.step = step;
        a.m.clear();
        a.v.clear();
        if step == 0 {
            return Ok(());
        }
        for (i, (_, p)) in m.params().iter().enumerate() {
            a.m.push(self.take(&format!("opt.{prefix}.m{i}"), p.shape())?);
            a.v.push(self.take(&format!("opt.{prefix}.v{i}"), p.shape())?);
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        match self.map.keys().next() {
            Some(k) => Err(Error::Mismatch(format!("unexpected tensor `{k}`"))),
            None => Ok(()),
        }
    }
}

impl Checkpoint {
    pub fn from_bpd(model: &BpdModel, norm: Option<NormStats>, label_names: BTreeMap<usize, String>) -> Self {
        let mut tensors = Vec::new();
        for c in Component::ALL {
            push_module(&mut tensors, c.name(), model.nets.module(c));
        }
        for (c, a) in Component::ALL.iter().zip(&model.opts.groups) {
            push_adam(&mut tensors, c.name(), a);
        }
        Self {
            meta: CheckpointMeta {
                model: ModelKind::Bpd,
                spec: *model.nets.spec(),
                classes: model.nets.classes(),
                train: model.config.clone(),
                norm,
                label_names,
                optimizer_steps: model.opts.groups.iter().map(|a| a.step).collect(),
            },
            tensors,
        }
    }

    pub fn from_baseline(model: &BaselineModel, norm: Option<NormStats>, label_names: BTreeMap<usize, String>) -> Self {
        let mut tensors = Vec::new();
        push_module(&mut tensors, "encoder", &model.net.encoder);
        push_module(&mut tensors, "classifier", &model.net.classifier);
        push_adam(&mut tensors, "encoder", &model.encoder_opt);
        push_adam(&mut tensors, "classifier", &model.classifier_opt);
        Self {
            meta: CheckpointMeta {
                model: ModelKind::Baseline,
                spec: *model.net.spec(),
                classes: model.net.classes(),
                train: model.config.clone(),
                norm,
                label_names,
                optimizer_steps: vec![model.encoder_opt.step, model.classifier_opt.step],
            },
            tensors,
        }
    }

    fn lookup(&self) -> Result<Lookup> {
        let mut map = BTreeMap::new();
        for (n, t) in &self.tensors {
            if map.insert(n.clone(), t.clone()).is_some() {
                return Err(Error::Mismatch(format!("tensor `{n}` stored twice")));
            }
        }
        Ok(Lookup { map })
    }

    fn check_kind(&self, want: ModelKind, groups: usize) -> Result<()> {
        if self.meta.model != want {
            return Err(Error::Mismatch(format!(
                "checkpoint holds a {} model, expected {want}",
                self.meta.model
            )));
        }
        if self.meta.optimizer_steps.len() != groups {
            return Err(Error::Mismatch(format!(
                "{} optimizer groups, expected {groups}",
                self.meta.optimizer_steps.len()
            )));
        }
        Ok(())
    }

    pub fn to_bpd(&self) -> Result<BpdModel> {
        self.check_kind(ModelKind::Bpd, Component::ALL.len())?;
        let cfg = &self.meta.train;
        let mut nets = crate::model::BpdNetworks::new(self.meta.spec, self.meta.classes, cfg.dropout, cfg.seed)?;
        let mut opts = BpdOptimizers::new(cfg.lr);
        let mut l = self.lookup()?;
        for c in Component::ALL {
            l.fill_module(c.name(), nets.module_mut(c))?;
        }
        for (i, c) in Component::ALL.iter().enumerate() {
            l.fill_adam(c.name(), nets.module(*c), &mut opts.groups[i], self.meta.optimizer_steps[i])?;
        }
        l.finish()?;
        Ok(BpdModel {
            nets,
            opts,
            config: cfg.clone(),
        })
    }

    pub fn to_baseline(&self) -> Result<BaselineModel> {
        self.check_kind(ModelKind::Baseline, 2)?;
        let cfg = &self.meta.train;
        let mut model = BaselineModel::new(cfg, self.meta.spec.input_channels, self.meta.spec.window_length, self.meta.classes)?;
        let mut l = self.lookup()?;
        l.fill_module("encoder", &mut model.net.encoder)?;
        l.fill_module("classifier", &mut model.net.classifier)?;
        l.fill_adam("encoder", &model.net.encoder, &mut model.encoder_opt, self.meta.optimizer_steps[0])?;
        l.fill_adam("classifier", &model.net.classifier, &mut model.classifier_opt, self.meta.optimizer_steps[1])?;
        l.finish()?;
        Ok(model)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).expect("meta serialises");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(r.error("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.error(&format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| r.error(&format!("bad metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| r.error("tensor name is not UTF-8"))?
                .to_string();
            let ndim = r.u32()? as usize;
            if ndim > 8 {
                return Err(r.error(&format!("tensor `{name}` has {ndim} dimensions")));
            }
            let mut shape = Vec::with_capacity(ndim);
            let mut numel: usize = 1;
            for _ in 0..ndim {
                let d = usize::try_from(r.u64()?).map_err(|_| r.error("dimension overflow"))?;
                numel = numel.checked_mul(d).ok_or_else(|| r.error("dimension overflow"))?;
                shape.push(d);
            }
            let nbytes = numel.checked_mul(4).ok_or_else(|| r.error("dimension overflow"))?;
            let raw = r.take(nbytes)?;
            let data: Vec<f32> = raw.chunks_exact(4).map(f32::read_le).collect();
            let t = Tensor::new(shape, data).map_err(|e| r.error(&format!("tensor `{name}`: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(r.error("trailing bytes"));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Parse(p) => Error::Parse(ParseError::new(path.display().to_string(), p.line, p.message)),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error(&self, msg: &str) -> Error {
        Error::Parse(ParseError::new("checkpoint", 0, format!("byte {}: {msg}", self.pos)))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error(&format!("truncated: wanted {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
