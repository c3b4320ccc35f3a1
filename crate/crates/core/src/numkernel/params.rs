use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::tensor::Tensor;
use crate::scalar::Scalar;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

/// Transformer dimensions shared by every network in the crate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Maximum number of knowledge slots in a latent block.
    pub max_slots: usize,
    /// Maximum token sequence length.
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { d: 64, n_layers: 2, n_heads: 4, d_ff: 256, max_slots: 16, max_len: 64, dropout: 0.1 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_heads == 0 || !self.d.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!("d={} not divisible by n_heads={}", self.d, self.n_heads)));
        }
        if !self.d.is_multiple_of(2) {
            return Err(Error::Config("d must be even for sinusoidal embeddings".into()));
        }
        if self.max_slots == 0 {
            return Err(Error::Config("max_slots must be at least 1".into()));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }
}

/// Adaptive-moment state for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

/// Named parameters plus optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
    pub(crate) moments: BTreeMap<String, Moments<T>>,
    pub step: u64,
    pub skipped_updates: u64,
}

impl<T: Scalar> Default for ParameterStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: ModelConfig,
    #[serde(default)]
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new(), moments: BTreeMap::new(), step: 0, skipped_updates: 0 }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.get(name).ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors.get_mut(name).ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn n_values(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Moves every tensor of `other` into `self` (names must not collide).
    pub fn merge(&mut self, other: ParameterStore<T>) -> Result<()> {
        for (k, v) in other.tensors {
            if self.tensors.contains_key(&k) {
                return Err(Error::Config(format!("duplicate parameter `{k}`")));
            }
            self.tensors.insert(k, v);
        }
        Ok(())
    }

    /// Sub-store of every tensor whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParameterStore<T> {
        let mut out = ParameterStore::new();
        for (k, v) in &self.tensors {
            if k.starts_with(prefix) {
                out.insert(k.clone(), v.clone());
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> ParameterStore<U> {
        let mut out = ParameterStore::new();
        for (k, v) in &self.tensors {
            out.insert(k.clone(), v.cast());
        }
        out.step = self.step;
        out
    }

    pub fn init_normal<R: Rng>(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut R) {
        let normal = Normal::new(0.0, std).expect("valid std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(normal.sample(rng))).collect();
        self.insert(name, Tensor::from_vec(shape, data).expect("sized"));
    }

    /// Xavier-uniform weight, zero bias.
    pub fn init_linear<R: Rng>(&mut self, prefix: &str, fan_in: usize, fan_out: usize, gain: f64, rng: &mut R) {
        let bound = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
        self.insert(format!("{prefix}.w"), Tensor::matrix(fan_in, fan_out, data).expect("sized"));
        self.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
    }

    pub fn init_layer_norm(&mut self, prefix: &str, width: usize) {
        self.insert(format!("{prefix}.g"), Tensor::filled(&[width], T::one()));
        self.insert(format!("{prefix}.b"), Tensor::zeros(&[width]));
    }

    /// Writes `manifest.json` + `weights.bin` (little-endian f32) into `dir`.
    pub fn save(&self, dir: &Path, config: &ModelConfig, meta: serde_json::Value) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut blob = Vec::with_capacity(self.n_values() * 4);
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            entries.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset });
            for v in t.data() {
                blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
            offset += t.len();
        }
        let manifest = Manifest {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: config.clone(),
            meta,
            tensors: entries,
        };
        let text = serde_json::to_string_pretty(&manifest)?;
        let mpath = dir.join(MANIFEST_FILE);
        fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
        let wpath = dir.join(WEIGHTS_FILE);
        fs::write(&wpath, blob).map_err(|e| Error::io(&wpath, e))?;
        Ok(())
    }

    /// Reads a checkpoint written by [`ParameterStore::save`].
    pub fn load(dir: &Path) -> Result<(ParameterStore<T>, ModelConfig, serde_json::Value)> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint format {} unsupported",
                manifest.format_version
            )));
        }
        let wpath = dir.join(WEIGHTS_FILE);
        let blob = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
        let mut store = ParameterStore::new();
        for entry in manifest.tensors {
            let n: usize = entry.shape.iter().product();
            let start = entry.offset * 4;
            let end = start + n * 4;
            if end > blob.len() {
                return Err(Error::Shape(format!("tensor `{}` exceeds weight blob", entry.name)));
            }
            let data = blob[start..end]
                .chunks_exact(4)
                .map(|b| T::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
                .collect();
            store.insert(entry.name, Tensor::from_vec(&entry.shape, data)?);
        }
        Ok((store, manifest.config, manifest.meta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn resave_is_byte_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParameterStore::<f32>::new();
        store.init_linear("a", 4, 3, 1.0, &mut rng);
        store.init_normal("emb", &[5, 4], 0.3, &mut rng);
        let cfg = ModelConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let first = dir.path().join("one");
        let second = dir.path().join("two");
        store.save(&first, &cfg, serde_json::json!({"k": 1})).unwrap();
        let (loaded, lcfg, meta) = ParameterStore::<f32>::load(&first).unwrap();
        assert_eq!(lcfg, cfg);
        assert_eq!(loaded.get("a.w").unwrap(), store.get("a.w").unwrap());
        loaded.save(&second, &lcfg, meta).unwrap();
        for f in [MANIFEST_FILE, WEIGHTS_FILE] {
            assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(second.join(f)).unwrap());
        }
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::default();
        assert!(c.validate().is_ok());
        c.n_heads = 3;
        assert!(c.validate().is_err());
        c = ModelConfig { dropout: 1.0, ..ModelConfig::default() };
        assert!(c.validate().is_err());
        c = ModelConfig { max_slots: 0, ..ModelConfig::default() };
        assert!(c.validate().is_err());
    }
}
