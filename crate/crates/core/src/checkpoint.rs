//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DAUG" | u32 version | u32 tensor_count
//! per tensor: u32 name_len | name (UTF-8) | u8 dtype (0 = f32) | u32 rank | rank x u32 dims | payload
//! u32 manifest_len | manifest (UTF-8 JSON)
//! ```

use std::path::Path;

use daug_nn::{Adam, AdamConfig, Tensor4};
use serde::{Deserialize, Serialize};

use crate::error::{DaugError, Result};
use crate::networks::{Discriminator, Generator, StyleModel};
use crate::style::{DomainRegistry, DomainRole, StyleCode, STYLE_DIM};

pub const MAGIC: &[u8; 4] = b"DAUG";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl StoredTensor {
    pub fn vector(data: &[f32]) -> Self {
        Self {
            dims: vec![data.len()],
            data: data.to_vec(),
        }
    }

    pub fn from_tensor(t: &Tensor4) -> Self {
        Self {
            dims: t.shape().dims().to_vec(),
            data: t.data().to_vec(),
        }
    }

    pub fn into_tensor(self, name: &str) -> Result<Tensor4> {
        let dims: [usize; 4] = self
            .dims
            .as_slice()
            .try_into()
            .map_err(|_| DaugError::Format(format!("tensor {name:?} has rank {}, expected 4", self.dims.len())))?;
        Ok(Tensor4::from_vec(dims, self.data)?)
    }
}

/// Ordered named tensors plus a JSON manifest.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub tensors: Vec<(String, StoredTensor)>,
    pub manifest: String,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(DaugError::Truncated(what))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn string(&mut self, what: &'static str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let b = self.bytes(len, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| DaugError::Format(format!("{what} is not UTF-8")))
    }
}

impl Archive {
    pub fn push(&mut self, name: impl Into<String>, t: StoredTensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for &d in &t.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(self.manifest.as_bytes());
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.bytes(4, "magic")? != MAGIC {
            return Err(DaugError::Format("bad magic bytes".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(DaugError::Version {
                found: version,
                expected: VERSION,
            });
        }
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string("tensor name")?;
            let dtype = r.bytes(1, "dtype")?[0];
            if dtype != DTYPE_F32 {
                return Err(DaugError::Format(format!("tensor {name:?} has unsupported dtype {dtype}")));
            }
            let rank = r.u32("rank")? as usize;
            let mut dims = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                dims.push(r.u32("dims")? as usize);
            }
            let numel = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let numel = numel.ok_or_else(|| DaugError::Format(format!("tensor {name:?} is too large")))?;
            let bytes_len = numel.checked_mul(4).ok_or(DaugError::Truncated("payload"))?;
            let payload = r.bytes(bytes_len, "payload")?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((name, StoredTensor { dims, data }));
        }
        let manifest = r.string("manifest")?;
        if r.pos != buf.len() {
            return Err(DaugError::Format(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self { tensors, manifest })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| DaugError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = std::fs::read(path).map_err(|e| DaugError::io(path, e))?;
        Self::from_bytes(&buf)
    }

    /// Removes and returns the tensor called `name`.
    pub fn take(&mut self, name: &str) -> Result<StoredTensor> {
        let i = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| DaugError::MissingTensor(name.to_string()))?;
        Ok(self.tensors.remove(i).1)
    }

    /// Takes a tensor and checks it against the shape of `like`.
    pub fn take_like(&mut self, name: &str, like: &Tensor4) -> Result<Tensor4> {
        let t = self.take(name)?.into_tensor(name)?;
        if t.shape() != like.shape() {
            return Err(DaugError::Format(format!(
                "tensor {name:?} has shape {}, expected {}",
                t.shape(),
                like.shape()
            )));
        }
        Ok(t)
    }

    /// Errors if any tensor was not consumed.
    pub fn finish(self) -> Result<()> {
        match self.tensors.into_iter().next() {
            Some((name, _)) => Err(DaugError::UnknownTensor(name)),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainRecord {
    pub name: String,
    pub role: DomainRole,
    pub gamma: String,
    pub beta: String,
    pub head_id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerRecord {
    pub name: String,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub step: u64,
    pub counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub epoch: usize,
    pub domains: Vec<DomainRecord>,
    pub optimizers: Vec<OptimizerRecord>,
    /// Head ids of domains added by the latest life-long extension.
    #[serde(default)]
    pub new_domains: Vec<usize>,
}

pub(crate) fn put_layers(archive: &mut Archive, names: &[String], tensors: &[&Tensor4]) {
    for (n, t) in names.iter().zip(tensors) {
        archive.push(n.clone(), StoredTensor::from_tensor(t));
    }
}

pub(crate) fn take_layers(archive: &mut Archive, names: &[String], tensors: Vec<&mut Tensor4>) -> Result<()> {
    for (n, t) in names.iter().zip(tensors) {
        *t = archive.take_like(n, t)?;
    }
    Ok(())
}

pub(crate) fn put_adam(archive: &mut Archive, name: &str, opt: &Adam) -> OptimizerRecord {
    let (m, v) = opt.moments();
    for (i, (mi, vi)) in m.iter().zip(v).enumerate() {
        archive.push(format!("{name}/m.{i}"), StoredTensor::from_tensor(mi));
        archive.push(format!("{name}/v.{i}"), StoredTensor::from_tensor(vi));
    }
    OptimizerRecord {
        name: name.to_string(),
        lr: opt.config.lr,
        beta1: opt.config.beta1,
        beta2: opt.config.beta2,
        eps: opt.config.eps,
        step: opt.step_count(),
        counts: opt.counts().to_vec(),
    }
}

pub(crate) fn take_adam(archive: &mut Archive, rec: &OptimizerRecord, params: &[&Tensor4]) -> Result<Adam> {
    if rec.counts.len() != params.len() {
        return Err(DaugError::Format(format!(
            "optimizer {:?} tracks {} tensors, model has {}",
            rec.name,
            rec.counts.len(),
            params.len()
        )));
    }
    let mut m = Vec::with_capacity(params.len());
    let mut v = Vec::with_capacity(params.len());
    for (i, p) in params.iter().enumerate() {
        m.push(archive.take_like(&format!("{}/m.{i}", rec.name), p)?);
        v.push(archive.take_like(&format!("{}/v.{i}", rec.name), p)?);
    }
    let config = AdamConfig {
        lr: rec.lr,
        beta1: rec.beta1,
        beta2: rec.beta2,
        eps: rec.eps,
    };
    Ok(Adam::from_state(config, rec.step, rec.counts.clone(), m, v)?)
}

fn find_optimizer<'a>(manifest: &'a Manifest, name: &str) -> Result<&'a OptimizerRecord> {
    manifest
        .optimizers
        .iter()
        .find(|o| o.name == name)
        .ok_or_else(|| DaugError::Format(format!("manifest lacks optimizer {name:?}")))
}

/// Everything stage 1 persists: model, both optimizers and progress.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleCheckpoint {
    pub model: StyleModel,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub epoch: usize,
    pub new_domains: Vec<usize>,
}

pub const STYLE_KIND: &str = "daugnet-style";

impl StyleCheckpoint {
    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::default();
        let gen = &self.model.generator;
        let disc = &self.model.discriminator;
        put_layers(&mut a, &gen.tensor_names(), &gen.tensors());
        put_layers(&mut a, &disc.tensor_names(), &disc.tensors());
        let mut domains = Vec::new();
        for e in self.model.registry.entries() {
            let gamma = format!("style/{}.gamma", e.head_id);
            let beta = format!("style/{}.beta", e.head_id);
            a.push(gamma.clone(), StoredTensor::vector(e.code.gamma()));
            a.push(beta.clone(), StoredTensor::vector(e.code.beta()));
            domains.push(DomainRecord {
                name: e.name.clone(),
                role: e.role,
                gamma,
                beta,
                head_id: e.head_id,
            });
        }
        let optimizers = vec![
            put_adam(&mut a, "adam_g", &self.opt_g),
            put_adam(&mut a, "adam_d", &self.opt_d),
        ];
        let manifest = Manifest {
            kind: STYLE_KIND.into(),
            epoch: self.epoch,
            domains,
            optimizers,
            new_domains: self.new_domains.clone(),
        };
        a.manifest = serde_json::to_string_pretty(&manifest)?;
        Ok(a)
    }

    pub fn from_archive(mut a: Archive) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&a.manifest)?;
        if manifest.kind != STYLE_KIND {
            return Err(DaugError::Format(format!("expected a {STYLE_KIND} checkpoint, found {:?}", manifest.kind)));
        }
        let mut registry = DomainRegistry::new();
        for (i, d) in manifest.domains.iter().enumerate() {
            if d.head_id != i {
                return Err(DaugError::Format(format!("domain {:?} has head_id {}, expected {i}", d.name, d.head_id)));
            }
            let gamma = a.take(&d.gamma)?;
            let beta = a.take(&d.beta)?;
            if gamma.dims != [STYLE_DIM] || beta.dims != [STYLE_DIM] {
                return Err(DaugError::Format(format!("style code of {:?} is not {STYLE_DIM} wide", d.name)));
            }
            registry.push(&d.name, d.role, StyleCode::from_parts(gamma.data, beta.data)?)?;
        }
        let mut generator = Generator::init(0);
        let names = generator.tensor_names();
        take_layers(&mut a, &names, generator.tensors_mut())?;
        let mut discriminator = Discriminator::init(0, 0);
        discriminator.heads = (0..registry.len()).map(|_| Discriminator::new_head(0)).collect();
        let names = discriminator.tensor_names();
        take_layers(&mut a, &names, discriminator.tensors_mut())?;
        let opt_g = take_adam(&mut a, find_optimizer(&manifest, "adam_g")?, &generator.tensors())?;
        let opt_d = take_adam(&mut a, find_optimizer(&manifest, "adam_d")?, &discriminator.tensors())?;
        a.finish()?;
        Ok(Self {
            model: StyleModel {
                registry,
                generator,
                discriminator,
            },
            opt_g,
            opt_d,
            epoch: manifest.epoch,
            new_domains: manifest.new_domains,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(Archive::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> StyleCheckpoint {
        let mut r = DomainRegistry::new();
        r.register("a", DomainRole::Source, 1).unwrap();
        r.register("b", DomainRole::Target, 2).unwrap();
        let model = StyleModel::init(3, r);
        let opt_g = Adam::new(AdamConfig::default(), model.generator.tensors().iter().map(|t| t.shape()));
        let opt_d = Adam::new(AdamConfig::default(), model.discriminator.tensors().iter().map(|t| t.shape()));
        StyleCheckpoint {
            model,
            opt_g,
            opt_d,
            epoch: 4,
            new_domains: vec![1],
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.to_archive().unwrap().to_bytes();
        let back = StyleCheckpoint::from_archive(Archive::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_archive().unwrap().to_bytes(), bytes);
    }

    #[test]
    fn distinct_error_kinds() {
        let bytes = sample().to_archive().unwrap().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Archive::from_bytes(&bad), Err(DaugError::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(Archive::from_bytes(&bad), Err(DaugError::Version { found: 2, .. })));
        assert!(matches!(
            Archive::from_bytes(&bytes[..bytes.len() / 2]),
            Err(DaugError::Truncated(_))
        ));
        let mut a = sample().to_archive().unwrap();
        a.push("mystery", StoredTensor::vector(&[1.0]));
        assert!(matches!(StyleCheckpoint::from_archive(a), Err(DaugError::UnknownTensor(n)) if n == "mystery"));
        let mut a = sample().to_archive().unwrap();
        a.tensors.retain(|(n, _)| n != "generator/decoder.1.bias");
        assert!(matches!(StyleCheckpoint::from_archive(a), Err(DaugError::MissingTensor(_))));
    }

    #[test]
    fn manifest_lists_domains_in_registry_order() {
        let a = sample().to_archive().unwrap();
        let m: Manifest = serde_json::from_str(&a.manifest).unwrap();
        let names: Vec<_> = m.domains.iter().map(|d| d.name.as_str()).collect();
        assert_eq!(names, vec!["a", "b"]);
        assert_eq!(m.domains[1].head_id, 1);
    }
}
