//! Named parameter tensors, their gradients, and checkpoints.
//!
//! A checkpoint is two files: `<stem>.bin` holding every tensor as
//! little-endian `f64` values back to back, and `<stem>.json` listing each
//! tensor's name, shape and offset into the binary.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Zero tensors shaped like every parameter.
    pub fn zeros_like(&self) -> ParamGrads {
        ParamGrads(self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect())
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.scalar_count() * 8);
        let mut entries = Vec::with_capacity(self.len());
        for (name, t) in self.names.iter().zip(&self.tensors) {
            entries.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: bytes.len() / 8,
            });
            for x in t.data() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        let manifest = CheckpointManifest { dtype: "f64-le".into(), tensors: entries };
        fs::write(with_ext(stem, "bin"), bytes)?;
        fs::write(with_ext(stem, "json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(with_ext(stem, "json"))?)?;
        if manifest.dtype != "f64-le" {
            return Err(NnError::Format(format!("unsupported dtype {}", manifest.dtype)));
        }
        let bytes = fs::read(with_ext(stem, "bin"))?;
        if bytes.len() % 8 != 0 {
            return Err(NnError::Format("binary length is not a multiple of 8".into()));
        }
        let values: Vec<Real> = bytes
            .chunks_exact(8)
            .map(|c| Real::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let mut store = ParamStore::new();
        let mut expected = 0;
        for e in manifest.tensors {
            let n: usize = e.shape.iter().product();
            if e.offset != expected || e.offset + n > values.len() {
                return Err(NnError::Format(format!("tensor {} out of bounds", e.name)));
            }
            store.add(e.name, Tensor::new(e.shape, values[e.offset..e.offset + n].to_vec()));
            expected += n;
        }
        if expected != values.len() {
            return Err(NnError::Format(format!(
                "manifest covers {expected} values, binary holds {}",
                values.len()
            )));
        }
        Ok(store)
    }
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut p = stem.as_os_str().to_owned();
    p.push(".");
    p.push(ext);
    PathBuf::from(p)
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    dtype: String,
    tensors: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

/// One gradient tensor per parameter, indexed by [`ParamId`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads(pub Vec<Tensor>);

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.0[id.0]
    }

    pub fn global_norm(&self) -> Real {
        self.0.iter().map(Tensor::norm_sq).sum::<Real>().sqrt()
    }

    pub fn scale(&mut self, s: Real) {
        for t in &mut self.0 {
            t.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }
}

/// Normal samples with `std`, redrawn until they fall within two standard
/// deviations.
pub fn truncated_normal(shape: &[usize], std: Real, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: Real = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        store.add("w", truncated_normal(&[3, 4], 0.02, &mut rng));
        store.add("b", Tensor::vector(vec![1.5, -2.0]));
        store.add("s", Tensor::scalar(std::f64::consts::PI));
        let stem = dir.path().join("ckpt");
        store.save(&stem).unwrap();
        assert_eq!(std::fs::metadata(dir.path().join("ckpt.bin")).unwrap().len(), 15 * 8);
        assert_eq!(ParamStore::load(&stem).unwrap(), store);
    }

    #[test]
    fn truncated_binary_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(vec![1.0, 2.0, 3.0]));
        let stem = dir.path().join("c");
        store.save(&stem).unwrap();
        let bin = dir.path().join("c.bin");
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..16]).unwrap();
        assert!(matches!(ParamStore::load(&stem), Err(NnError::Format(_))));
    }

    #[test]
    fn truncated_normal_stays_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = truncated_normal(&[10_000], 0.02, &mut rng);
        assert!(t.data().iter().all(|x| x.abs() <= 0.04));
        let mean = t.data().iter().sum::<Real>() / 10_000.0;
        assert!(mean.abs() < 1e-3);
    }
}
