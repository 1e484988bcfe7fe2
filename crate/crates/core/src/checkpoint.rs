//! Named-tensor container.
//!
//! ```text
//! "DTV1" | manifest length: u64 LE | manifest (JSON) | payload
//! ```
//!
//! The manifest lists every tensor as `{name, dtype, shape, offset}`, where
//! `offset` is a byte offset into the payload and `dtype` is always `"f32"`
//! (little-endian). It may also carry the model config, an RNG state and
//! optimizer settings. Optimizer moments are stored as ordinary tensors
//! named `optim.m.<param>` and `optim.v.<param>`.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{init_tensor, Dtvit, DtvitConfig};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{ParamStore, ShapeManifest};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DTV1";
const HEADER_LEN: usize = 12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

impl TensorEntry {
    pub fn numel(&self) -> u64 {
        self.shape.iter().map(|&d| d as u64).product()
    }

    pub fn byte_len(&self) -> u64 {
        4 * self.numel()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub config: AdamWConfig,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub config: Option<DtvitConfig>,
    #[serde(default)]
    pub rng_state: Option<u64>,
    #[serde(default)]
    pub optimizer: Option<OptimizerMeta>,
}

impl Manifest {
    /// Entries laid out back to back in the given order.
    pub fn from_shapes(shapes: &ShapeManifest) -> Self {
        let mut offset = 0;
        let tensors = shapes
            .iter()
            .map(|(name, shape)| {
                let e = TensorEntry {
                    name: name.clone(),
                    dtype: "f32".into(),
                    shape: shape.clone(),
                    offset,
                };
                offset += e.byte_len();
                e
            })
            .collect();
        Manifest {
            tensors,
            ..Default::default()
        }
    }

    pub fn find(&self, name: &str) -> Option<&TensorEntry> {
        self.tensors.iter().find(|e| e.name == name)
    }

    pub fn payload_len(&self) -> u64 {
        self.tensors.iter().map(|e| e.offset + e.byte_len()).max().unwrap_or(0)
    }

    /// Unique names, supported dtype, non-overlapping in-bounds ranges.
    pub fn validate(&self, payload_len: u64) -> Result<()> {
        let mut names = BTreeSet::new();
        let mut ranges = Vec::with_capacity(self.tensors.len());
        for e in &self.tensors {
            if !names.insert(e.name.as_str()) {
                return Err(Error::format("checkpoint", format!("tensor `{}` listed twice", e.name)));
            }
            if e.dtype != "f32" {
                return Err(Error::format("checkpoint", format!("tensor `{}` has dtype {}", e.name, e.dtype)));
            }
            if e.shape.is_empty() || e.shape.contains(&0) {
                return Err(Error::format("checkpoint", format!("tensor `{}` has empty shape", e.name)));
            }
            let end = e.offset + e.byte_len();
            if end > payload_len {
                return Err(Error::format(
                    "checkpoint",
                    format!(
                        "truncated payload: tensor `{}` needs bytes {}..{end}, payload has {payload_len}",
                        e.name, e.offset
                    ),
                ));
            }
            ranges.push((e.offset, end, e.name.as_str()));
        }
        ranges.sort();
        for w in ranges.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(Error::format(
                    "checkpoint",
                    format!("tensors `{}` and `{}` overlap", w[0].2, w[1].2),
                ));
            }
        }
        Ok(())
    }
}

/// Manifest plus decoded tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub manifest: Manifest,
    pub tensors: ParamStore<f32>,
}

impl Container {
    pub fn new(tensors: ParamStore<f32>) -> Self {
        let manifest = Manifest::from_shapes(&tensors.manifest());
        Container { manifest, tensors }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut manifest = Manifest::from_shapes(&self.tensors.manifest());
        manifest.config = self.manifest.config;
        manifest.rng_state = self.manifest.rng_state;
        manifest.optimizer = self.manifest.optimizer;
        let header = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(HEADER_LEN + header.len() + manifest.payload_len() as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in self.tensors.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (manifest, start) = decode_manifest(bytes)?;
        let payload = &bytes[start..];
        manifest.validate(payload.len() as u64)?;
        let mut tensors = ParamStore::new();
        for e in &manifest.tensors {
            let raw = &payload[e.offset as usize..(e.offset + e.byte_len()) as usize];
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(e.name.clone(), Tensor::new(&e.shape, data)?)?;
        }
        Ok(Container { manifest, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

fn decode_manifest(bytes: &[u8]) -> Result<(Manifest, usize)> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(Error::format("checkpoint", "missing DTV1 header"));
    }
    let len = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
    let end = (HEADER_LEN as u64).checked_add(len).filter(|&e| e <= bytes.len() as u64);
    let Some(end) = end else {
        return Err(Error::format("checkpoint", "truncated manifest"));
    };
    let manifest = serde_json::from_slice(&bytes[HEADER_LEN..end as usize])?;
    Ok((manifest, end as usize))
}

/// Reads only the header and manifest of a container file.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let mut f = File::open(path)?;
    let mut head = [0u8; HEADER_LEN];
    f.read_exact(&mut head)
        .map_err(|_| Error::format("checkpoint", "missing DTV1 header"))?;
    let len = u64::from_le_bytes(head[4..12].try_into().unwrap());
    let mut body = Vec::new();
    f.take(len).read_to_end(&mut body)?;
    let mut bytes = head.to_vec();
    bytes.extend_from_slice(&body);
    Ok(decode_manifest(&bytes)?.0)
}

fn moment_name(kind: char, param: &str) -> String {
    format!("optim.{kind}.{param}")
}

/// Everything restored from a training checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Dtvit<f32>,
    pub optimizer: Option<AdamW<f32>>,
    pub rng_state: Option<u64>,
}

pub fn save_checkpoint(
    path: &Path,
    model: &Dtvit<f32>,
    optimizer: Option<&AdamW<f32>>,
    rng_state: Option<u64>,
) -> Result<()> {
    let mut tensors = model.params().clone();
    if let Some(opt) = optimizer {
        let (m, v) = opt.moments();
        for ((name, _), (m, v)) in model.params().iter().zip(m.iter().zip(v)) {
            tensors.insert(moment_name('m', name), m.clone())?;
            tensors.insert(moment_name('v', name), v.clone())?;
        }
    }
    let mut c = Container::new(tensors);
    c.manifest.config = Some(*model.config());
    c.manifest.rng_state = rng_state;
    c.manifest.optimizer = optimizer.map(|o| OptimizerMeta {
        config: *o.config(),
        step: o.step_count(),
    });
    let bytes = c.encode()?;
    let mut f = File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let c = Container::read(path)?;
    let config = c
        .manifest
        .config
        .ok_or_else(|| Error::format("checkpoint", "no model config recorded"))?;
    let mut params = ParamStore::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for (name, t) in c.tensors.iter() {
        if name.starts_with("optim.") {
            continue;
        }
        params.insert(name, t.clone())?;
    }
    let model = Dtvit::from_params(config, params)?;
    let optimizer = match c.manifest.optimizer {
        None => None,
        Some(meta) => {
            for (name, _) in model.params().iter() {
                m.push(c.tensors.require(&moment_name('m', name))?.clone());
                v.push(c.tensors.require(&moment_name('v', name))?.clone());
            }
            Some(AdamW::from_state(meta.config, meta.step, m, v, model.params())?)
        }
    };
    Ok(Checkpoint {
        model,
        optimizer,
        rng_state: c.manifest.rng_state,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HeadPolicy {
    /// Always draw fresh head weights.
    #[default]
    Reinitialize,
    /// Reuse head tensors whose names and shapes match; initialize the rest.
    ReuseMatching,
}

/// Name mapping between a pretrained container and the model.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PretrainedReport {
    pub loaded: Vec<String>,
    pub initialized: Vec<String>,
    pub ignored: Vec<String>,
}

impl PretrainedReport {
    /// Distinct encoder block indices among the loaded tensors.
    pub fn loaded_blocks(&self) -> usize {
        self.loaded
            .iter()
            .filter_map(|n| n.strip_prefix("blocks.")?.split('.').next()?.parse::<usize>().ok())
            .collect::<BTreeSet<_>>()
            .len()
    }
}

fn is_head(name: &str) -> bool {
    name.starts_with("head1.") || name.starts_with("head2.")
}

/// Decides what to do with every tensor, using the manifest alone.
pub fn plan_pretrained(manifest: &Manifest, config: &DtvitConfig, policy: HeadPolicy) -> Result<PretrainedReport> {
    let wanted = config.manifest();
    let encoder_hits = wanted
        .iter()
        .filter(|(n, _)| !is_head(n) && manifest.find(n).is_some())
        .count();
    if encoder_hits == 0 {
        return Err(Error::MissingParameter("no encoder parameters found".into()));
    }
    let mut report = PretrainedReport::default();
    for (name, shape) in &wanted {
        let entry = manifest.find(name);
        if is_head(name) {
            match entry {
                Some(e) if policy == HeadPolicy::ReuseMatching && &e.shape == shape => {
                    report.loaded.push(name.clone())
                }
                _ => report.initialized.push(name.clone()),
            }
            continue;
        }
        let e = entry.ok_or_else(|| Error::MissingParameter(name.clone()))?;
        if &e.shape != shape {
            return Err(Error::ParameterShape {
                name: name.clone(),
                expected: shape.clone(),
                found: e.shape.clone(),
            });
        }
        report.loaded.push(name.clone());
    }
    for e in &manifest.tensors {
        if !report.loaded.contains(&e.name) {
            report.ignored.push(e.name.clone());
        }
    }
    Ok(report)
}

/// Builds a model from a pretrained container: encoder tensors by name,
/// heads per `policy` with fresh values drawn from `seed`.
pub fn load_pretrained(path: &Path, config: DtvitConfig, policy: HeadPolicy, seed: u64) -> Result<(Dtvit<f32>, PretrainedReport)> {
    config.validate()?;
    let c = Container::read(path)?;
    let report = plan_pretrained(&c.manifest, &config, policy)?;
    let mut rng = SplitMix64::stream(seed, "init");
    let mut params = ParamStore::new();
    for (name, shape) in config.manifest() {
        let t = if report.loaded.contains(&name) {
            c.tensors.require(&name)?.clone()
        } else {
            init_tensor(&name, &shape, &mut rng)
        };
        params.insert(name, t)?;
    }
    Ok((Dtvit::from_params(config, params)?, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::EncoderConfig;

    fn tiny() -> Dtvit<f32> {
        Dtvit::init(DtvitConfig::tiny(), 3).unwrap()
    }

    #[test]
    fn container_round_trip_is_bitwise() {
        let m = tiny();
        let c = Container::new(m.params().clone());
        let back = Container::decode(&c.encode().unwrap()).unwrap();
        assert_eq!(back.tensors, *m.params());
    }

    #[test]
    fn truncated_and_overlapping_payloads() {
        let c = Container::new(tiny().params().clone());
        let mut bytes = c.encode().unwrap();
        bytes.truncate(bytes.len() - 3);
        let err = Container::decode(&bytes).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
        assert!(Container::decode(b"DTV1").is_err());
        assert!(Container::decode(b"NOPE\0\0\0\0\0\0\0\0").is_err());

        let mut man = Manifest::from_shapes(&vec![("a".into(), vec![2]), ("b".into(), vec![2])]);
        man.tensors[1].offset = 4;
        assert!(man.validate(16).unwrap_err().to_string().contains("overlap"));
    }

    #[test]
    fn checkpoint_with_optimizer_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.dtv");
        let m = tiny();
        let opt = AdamW::new(AdamWConfig::default(), m.params()).unwrap();
        save_checkpoint(&path, &m, Some(&opt), Some(42)).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.model, m);
        assert_eq!(ck.optimizer.unwrap(), opt);
        assert_eq!(ck.rng_state, Some(42));
    }

    fn renamed_container(rename: Option<(&str, &str)>, reshape: Option<(&str, Vec<usize>)>) -> Vec<u8> {
        let m = tiny();
        let mut store = ParamStore::new();
        for (name, t) in m.params().iter() {
            let mut name = name.to_string();
            let mut t = t.clone();
            if let Some((from, to)) = rename {
                if name == from {
                    name = to.to_string();
                }
            }
            if let Some((target, shape)) = &reshape {
                if name == *target {
                    t = Tensor::zeros(shape);
                }
            }
            store.insert(name, t).unwrap();
        }
        let mut c = Container::new(store);
        c.manifest.config = Some(*m.config());
        c.encode().unwrap()
    }

    #[test]
    fn descriptive_load_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.dtv");
        std::fs::write(&path, renamed_container(Some(("norm.bias", "norm.beta")), None)).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(&err, Error::MissingParameter(n) if n == "norm.bias"), "{err}");

        std::fs::write(&path, renamed_container(None, Some(("cls_token", vec![63])))).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, Error::ParameterShape { .. }));
    }

    fn large_manifest_with_reference_head() -> Manifest {
        let enc = EncoderConfig::large();
        let mut shapes = enc.manifest();
        shapes.push(("head.weight".into(), vec![1000, enc.dim]));
        shapes.push(("head.bias".into(), vec![1000]));
        Manifest::from_shapes(&shapes)
    }

    #[test]
    fn pretrained_plan_for_the_large_preset() {
        let man = large_manifest_with_reference_head();
        let report = plan_pretrained(&man, &DtvitConfig::large(), HeadPolicy::Reinitialize).unwrap();
        assert_eq!(report.loaded_blocks(), 24);
        assert_eq!(report.ignored, vec!["head.weight".to_string(), "head.bias".to_string()]);
        assert_eq!(report.initialized.len(), 8);
        assert!(report.initialized.iter().all(|n| is_head(n)));
        let entries: u64 = man.tensors.iter().map(TensorEntry::numel).sum();
        assert_eq!(entries, 304_326_632);
    }

    #[test]
    fn pretrained_plan_errors() {
        let mut small = EncoderConfig::large();
        small.dim = 512;
        small.heads = 8;
        let man = Manifest::from_shapes(&small.manifest());
        assert!(matches!(
            plan_pretrained(&man, &DtvitConfig::large(), HeadPolicy::Reinitialize),
            Err(Error::ParameterShape { .. })
        ));
        let err = plan_pretrained(&Manifest::default(), &DtvitConfig::large(), HeadPolicy::Reinitialize).unwrap_err();
        assert!(err.to_string().contains("no encoder parameters found"));
    }

    #[test]
    fn load_pretrained_reuses_encoder() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pre.dtv");
        let src = tiny();
        let mut store = ParamStore::new();
        for (name, t) in src.params().iter().filter(|(n, _)| !is_head(n)) {
            store.insert(name, t.clone()).unwrap();
        }
        store.insert("head.weight", Tensor::zeros(&[1000, 64])).unwrap();
        Container::new(store).write(&path).unwrap();
        assert_eq!(read_manifest(&path).unwrap().tensors.len(), src.params().len() - 8 + 1);
        let (m, report) = load_pretrained(&path, DtvitConfig::tiny(), HeadPolicy::Reinitialize, 11).unwrap();
        assert_eq!(report.ignored, vec!["head.weight".to_string()]);
        assert_eq!(m.params().get("pos_embed"), src.params().get("pos_embed"));
        assert_ne!(m.params().get("head1.fc1.weight"), src.params().get("head1.fc1.weight"));
    }
}
