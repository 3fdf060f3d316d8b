//! Named parameter groups, Adam, and on-disk checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{CcrsError, Result};
use crate::tensor::Matrix;

/// Parameter groups keyed by name, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    groups: BTreeMap<String, Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.groups.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.groups.get(name).ok_or_else(|| CcrsError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Matrix> {
        self.groups.get_mut(name).ok_or_else(|| CcrsError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.groups.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.groups.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.groups.iter()
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.groups.values().map(|m| m.len()).sum()
    }

    /// `self += scale * delta` over the groups present in `delta`.
    pub fn axpy(&mut self, scale: f64, delta: &Gradients) {
        for (name, d) in delta {
            if let Some(p) = self.groups.get_mut(name) {
                p.scaled_add(scale, d);
            }
        }
    }

    /// Copy restricted to `names`.
    pub fn subset<'a>(&self, names: impl IntoIterator<Item = &'a String>) -> ParamStore {
        let mut out = ParamStore::new();
        for n in names {
            if let Some(v) = self.groups.get(n) {
                out.insert(n.clone(), v.clone());
            }
        }
        out
    }

    /// Overwrites groups with those of `other`.
    pub fn overlay(&mut self, other: &ParamStore) {
        for (n, v) in &other.groups {
            self.groups.insert(n.clone(), v.clone());
        }
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, m) in &self.groups {
            h.update(name.as_bytes());
            h.update((m.nrows() as u64).to_le_bytes());
            h.update((m.ncols() as u64).to_le_bytes());
            for v in m.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn all_finite(&self) -> bool {
        self.groups.values().all(crate::tensor::all_finite)
    }
}

/// Lazily registers parameter groups on a tape, once per name.
pub struct Bound<'t, 'p> {
    tape: &'t Tape,
    store: &'p ParamStore,
    cache: std::cell::RefCell<BTreeMap<String, Var<'t>>>,
    /// Groups to register as constants (no gradient).
    frozen: Option<&'p std::collections::BTreeSet<String>>,
}

impl<'t, 'p> Bound<'t, 'p> {
    pub fn new(tape: &'t Tape, store: &'p ParamStore) -> Self {
        Self { tape, store, cache: Default::default(), frozen: None }
    }

    pub fn with_frozen(mut self, frozen: &'p std::collections::BTreeSet<String>) -> Self {
        self.frozen = Some(frozen);
        self
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn get(&self, name: &str) -> Var<'t> {
        if let Some(v) = self.cache.borrow().get(name) {
            return *v;
        }
        let value = self
            .store
            .get(name)
            .unwrap_or_else(|_| panic!("parameter group `{name}` missing from store"))
            .clone();
        let v = if self.frozen.is_some_and(|f| f.contains(name)) {
            self.tape.constant(value)
        } else {
            self.tape.param(name, value)
        };
        self.cache.borrow_mut().insert(name.to_string(), v);
        v
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }
}

/// Adam with the usual defaults (β₁ = 0.9, β₂ = 0.999, ε = 1e-8).
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Matrix>,
    v: BTreeMap<String, Matrix>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let Ok(p) = params.get_mut(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| Array2::zeros(g.dim()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Array2::zeros(g.dim()));
            m.zip_mut_with(g, |mi, gi| *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi);
            v.zip_mut_with(g, |vi, gi| *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi);
            let (lr, eps) = (self.lr, self.eps);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|pi, &mi, &vi| {
                *pi -= lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
            });
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub file: String,
}

/// Checkpoint manifest: parameter shapes plus caller-supplied metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub groups: Vec<GroupEntry>,
    pub checksum: String,
    pub meta: serde_json::Value,
}

/// Writes `manifest.json` and one little-endian `f64` blob per group into
/// `dir`. Files are written to a temporary directory first and renamed into
/// place.
pub fn save_checkpoint(dir: &Path, params: &ParamStore, meta: serde_json::Value) -> Result<()> {
    let parent = dir.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| CcrsError::io(parent, e))?;
    let tmp = parent.join(format!(
        ".{}.tmp-{}",
        dir.file_name().and_then(|s| s.to_str()).unwrap_or("ckpt"),
        std::process::id()
    ));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| CcrsError::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| CcrsError::io(&tmp, e))?;
    let mut groups = Vec::new();
    for (name, m) in params.iter() {
        let file = format!("{}.bin", name.replace('/', "_"));
        let mut bytes = Vec::with_capacity(m.len() * 8);
        for v in m.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let path = tmp.join(&file);
        fs::write(&path, bytes).map_err(|e| CcrsError::io(&path, e))?;
        groups.push(GroupEntry { name: name.clone(), rows: m.nrows(), cols: m.ncols(), file });
    }
    let manifest = CheckpointManifest { groups, checksum: params.checksum(), meta };
    let mpath = tmp.join("manifest.json");
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(|e| CcrsError::io(&mpath, e))?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| CcrsError::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| CcrsError::io(dir, e))?;
    Ok(())
}

/// Loads a checkpoint, validating every blob against the manifest.
pub fn load_checkpoint(dir: &Path) -> Result<(ParamStore, CheckpointManifest)> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| CcrsError::io(&mpath, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    let mut params = ParamStore::new();
    for g in &manifest.groups {
        let path = dir.join(&g.file);
        let bytes = fs::read(&path).map_err(|e| CcrsError::io(&path, e))?;
        if bytes.len() != g.rows * g.cols * 8 {
            return Err(CcrsError::Checkpoint(format!(
                "{}: expected {}×{} values, blob holds {} bytes",
                g.name,
                g.rows,
                g.cols,
                bytes.len()
            )));
        }
        let vals: Vec<f64> =
            bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
        params.insert(g.name.clone(), Array2::from_shape_vec((g.rows, g.cols), vals).expect("checked length"));
    }
    if params.checksum() != manifest.checksum {
        return Err(CcrsError::Checkpoint(format!("checksum mismatch in {}", dir.display())));
    }
    Ok((params, manifest))
}

/// Ensures every group in `expected` exists in `params` with the same shape.
pub fn validate_shapes(params: &ParamStore, expected: &ParamStore) -> Result<()> {
    for (name, m) in expected.iter() {
        let got = params.get(name).map_err(|_| CcrsError::Checkpoint(format!("missing group {name}")))?;
        if got.dim() != m.dim() {
            return Err(CcrsError::Checkpoint(format!(
                "{name}: checkpoint shape {:?}, model expects {:?}",
                got.dim(),
                m.dim()
            )));
        }
    }
    Ok(())
}
