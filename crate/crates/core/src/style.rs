//! Fixed random style codes and the ordered domain registry.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DaugError, Result};

/// Width of the generator embedding and of each style vector.
pub const STYLE_DIM: usize = 128;

/// Per-domain constant (gamma, beta) pair consumed by AdaIN. Never trained.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleCode {
    gamma: Vec<f32>,
    beta: Vec<f32>,
}

impl StyleCode {
    /// Draws gamma then beta, each `STYLE_DIM` i.i.d. samples from U[0, 1).
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gamma = (0..STYLE_DIM).map(|_| rng.gen::<f32>()).collect();
        let beta = (0..STYLE_DIM).map(|_| rng.gen::<f32>()).collect();
        Self { gamma, beta }
    }

    pub fn from_parts(gamma: Vec<f32>, beta: Vec<f32>) -> Result<Self> {
        for (name, v) in [("gamma", &gamma), ("beta", &beta)] {
            if v.len() != STYLE_DIM {
                return Err(DaugError::Precondition(format!(
                    "style {name} has {} values, expected {STYLE_DIM}",
                    v.len()
                )));
            }
        }
        Ok(Self { gamma, beta })
    }

    pub fn gamma(&self) -> &[f32] {
        &self.gamma
    }

    pub fn beta(&self) -> &[f32] {
        &self.beta
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainRole {
    Source,
    Target,
}

impl std::str::FromStr for DomainRole {
    type Err = DaugError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Self::Source),
            "target" => Ok(Self::Target),
            other => Err(DaugError::Config(format!("unknown domain role {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainEntry {
    pub name: String,
    pub role: DomainRole,
    pub code: StyleCode,
    /// Index of this domain's discriminator head; equals its registry position.
    pub head_id: usize,
}

/// Ordered set of domains. Head ids are dense `0..len`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DomainRegistry {
    entries: Vec<DomainEntry>,
}

impl DomainRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a domain with a fresh style code drawn from `code_seed`.
    pub fn register(&mut self, name: &str, role: DomainRole, code_seed: u64) -> Result<usize> {
        self.push(name, role, StyleCode::random(code_seed))
    }

    /// Appends a domain with a given style code.
    pub fn push(&mut self, name: &str, role: DomainRole, code: StyleCode) -> Result<usize> {
        if self.index_of(name).is_some() {
            return Err(DaugError::DuplicateDomain(name.to_string()));
        }
        let head_id = self.entries.len();
        self.entries.push(DomainEntry {
            name: name.to_string(),
            role,
            code,
            head_id,
        });
        Ok(head_id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[DomainEntry] {
        &self.entries
    }

    pub fn get(&self, head_id: usize) -> Result<&DomainEntry> {
        self.entries.get(head_id).ok_or(DaugError::UnknownHead {
            head_id,
            len: self.entries.len(),
        })
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn by_name(&self, name: &str) -> Result<&DomainEntry> {
        self.index_of(name)
            .map(|i| &self.entries[i])
            .ok_or_else(|| DaugError::UnknownDomain(name.to_string()))
    }

    pub fn count(&self, role: DomainRole) -> usize {
        self.entries.iter().filter(|e| e.role == role).count()
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.name.as_str()).collect()
    }
}

/// Mixes a base seed with a tag and index into an independent stream seed.
pub fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD6E8_FEB8_6659_FD93));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn style_code_shape_range_and_determinism() {
        let a = StyleCode::random(42);
        assert_eq!(a.gamma().len(), 128);
        assert_eq!(a.beta().len(), 128);
        assert!(a.gamma().iter().chain(a.beta()).all(|v| (0.0..1.0).contains(v)));
        assert_eq!(a, StyleCode::random(42));
        assert_ne!(a, StyleCode::random(43));
    }

    #[test]
    fn registry_rejects_duplicates_and_keeps_dense_heads() {
        let mut r = DomainRegistry::new();
        assert_eq!(r.register("a", DomainRole::Source, 1).unwrap(), 0);
        assert_eq!(r.register("b", DomainRole::Target, 2).unwrap(), 1);
        assert!(matches!(
            r.register("a", DomainRole::Target, 3),
            Err(DaugError::DuplicateDomain(_))
        ));
        assert_eq!(r.count(DomainRole::Source), 1);
        assert_eq!(r.count(DomainRole::Target), 1);
        assert!(r.get(2).is_err());
        assert_eq!(r.by_name("b").unwrap().head_id, 1);
    }
}
