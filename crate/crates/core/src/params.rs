//! Named parameter storage, per-pass binding onto a graph, and the weight
//! file format (little-endian f32 blob plus a JSON manifest).

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    /// Names starting with `prefix`.
    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a String> + 'a {
        self.map.keys().filter(move |k| k.starts_with(prefix))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Zero every tensor whose name starts with `prefix`.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (k, t) in &mut self.map {
            if k.starts_with(prefix) {
                t.fill(0.0);
            }
        }
    }

    /// Copy all `from.*` entries to `to.*`.
    pub fn copy_prefix(&mut self, from: &str, to: &str) {
        let copies: Vec<(String, Tensor)> = self
            .map
            .iter()
            .filter_map(|(k, t)| k.strip_prefix(from).map(|rest| (format!("{to}{rest}"), t.clone())))
            .collect();
        self.map.extend(copies);
    }

    /// Writes `<path>` (blob) and `<path>.json` (manifest).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut blob = Vec::with_capacity(self.num_elements() * 4);
        let mut entries = Vec::with_capacity(self.map.len());
        for (name, t) in &self.map {
            entries.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: blob.len(),
            });
            for &v in t.data() {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let manifest = Manifest {
            dtype: "f32".into(),
            endian: "little".into(),
            total_bytes: blob.len(),
            params: entries,
        };
        fs::write(path, &blob).map_err(|e| Error::io(path, e))?;
        let mpath = manifest_path(path);
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&mpath, e))?;
        fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mpath = manifest_path(path);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&mpath, e))?;
        if manifest.dtype != "f32" || manifest.endian != "little" {
            return Err(Error::Weights(format!(
                "unsupported encoding {}/{}",
                manifest.dtype, manifest.endian
            )));
        }
        let blob = fs::read(path).map_err(|e| Error::io(path, e))?;
        let expected: usize = manifest
            .params
            .iter()
            .map(|e| e.shape.iter().product::<usize>() * 4)
            .sum();
        if blob.len() != manifest.total_bytes || expected != manifest.total_bytes {
            return Err(Error::Weights(format!(
                "blob holds {} bytes, manifest declares {} and its entries need {expected}",
                blob.len(),
                manifest.total_bytes
            )));
        }
        let mut store = ParamStore::new();
        for e in manifest.params {
            let n: usize = e.shape.iter().product();
            let end = e.offset + n * 4;
            if end > blob.len() {
                return Err(Error::Weights(format!("entry {} runs past the blob", e.name)));
            }
            let data = blob[e.offset..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            store.insert(e.name, Tensor::new(e.shape, data)?);
        }
        Ok(store)
    }
}

pub fn manifest_path(blob: &Path) -> PathBuf {
    let mut s = blob.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub dtype: String,
    pub endian: String,
    pub total_bytes: usize,
    pub params: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

/// Parameters bound onto one forward graph.
///
/// Each named parameter becomes a single leaf on first use; `trainable`
/// sessions make those leaves differentiable.
pub struct Session<'p> {
    pub g: Graph,
    store: &'p ParamStore,
    bound: HashMap<String, Var>,
    trainable: bool,
}

impl<'p> Session<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Session {
            g: Graph::new(),
            store,
            bound: HashMap::new(),
            trainable: false,
        }
    }

    pub fn trainable(store: &'p ParamStore) -> Self {
        Session {
            trainable: true,
            ..Session::new(store)
        }
    }

    pub fn with_precision(mut self, p: Precision) -> Self {
        self.g = Graph::with_precision(p);
        self.bound.clear();
        self
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?.clone();
        let v = if self.trainable {
            self.g.param(t)
        } else {
            self.g.constant(t)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// `x · {prefix}.w (+ {prefix}.b when present)`.
    pub fn linear(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"))?;
        let y = self.g.matmul(x, w)?;
        let bname = format!("{prefix}.b");
        if self.store.contains(&bname) {
            let b = self.p(&bname)?;
            self.g.add_row(y, b)
        } else {
            Ok(y)
        }
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.g.constant(t)
    }

    /// Gradients of every bound parameter after `g.backward`.
    pub fn grads(&self) -> BTreeMap<String, Tensor> {
        self.bound
            .iter()
            .filter_map(|(k, &v)| self.g.grad_tensor(v).map(|t| (k.clone(), t)))
            .collect()
    }
}

/// Helpers for building initial parameter sets.
pub struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    /// Weight `[fan_in, fan_out]` with std `1/sqrt(fan_in)`, optional zero bias.
    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, bias: bool) {
        self.linear_std(prefix, fan_in, fan_out, bias, 1.0 / (fan_in as f64).sqrt());
    }

    pub fn linear_std(&mut self, prefix: &str, fan_in: usize, fan_out: usize, bias: bool, std: f64) {
        self.store
            .insert(format!("{prefix}.w"), Tensor::randn(&[fan_in, fan_out], std, self.rng));
        if bias {
            self.store.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
        }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) {
        self.store.insert(name, Tensor::randn(shape, std, self.rng));
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], v: f64) {
        self.store.insert(name, Tensor::full(shape, v));
    }

    pub fn layer_norm(&mut self, prefix: &str, dim: usize) {
        self.constant(&format!("{prefix}.g"), &[dim], 1.0);
        self.constant(&format!("{prefix}.b"), &[dim], 0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_store() -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        Init {
            store: &mut s,
            rng: &mut rng,
        }
        .linear("a", 3, 2, true);
        s.insert("z", Tensor::from_vec(vec![0.25, -1.5]));
        s
    }

    #[test]
    fn save_load_round_trips_at_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let s = sample_store();
        s.save(&path).unwrap();
        let back = ParamStore::load(&path).unwrap();
        assert_eq!(back.len(), s.len());
        for (k, t) in s.iter() {
            let b = back.get(k).unwrap();
            assert_eq!(b.shape(), t.shape());
            for (x, y) in t.data().iter().zip(b.data()) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
        let manifest: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(manifest_path(&path)).unwrap()).unwrap();
        assert_eq!(manifest["total_bytes"], 4 * s.num_elements());
    }

    #[test]
    fn load_rejects_truncated_blob() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        sample_store().save(&path).unwrap();
        let mut blob = fs::read(&path).unwrap();
        blob.pop();
        fs::write(&path, blob).unwrap();
        assert!(matches!(ParamStore::load(&path), Err(Error::Weights(_))));
    }

    #[test]
    fn session_binds_each_name_once() {
        let s = sample_store();
        let mut sess = Session::trainable(&s);
        let a = sess.p("a.w").unwrap();
        let b = sess.p("a.w").unwrap();
        assert_eq!(a, b);
        assert!(sess.p("missing").is_err());
    }
}
