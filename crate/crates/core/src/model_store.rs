//! In-memory model snapshots and the on-disk checkpoint format.
//!
//! A checkpoint is a directory holding `manifest.json` plus one raw binary
//! file per layer:
//!
//! ```json
//! {"version": 1,
//!  "layers": [{"name": "q_proj", "shape": [2, 2], "dtype": "f32",
//!              "file": "q_proj.bin", "tunable": true}]}
//! ```
//!
//! Layer files are little-endian, row-major and carry no header. Values are
//! widened to `f64` on load.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{GemError, Result};
use crate::num::Real;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

/// A named, shaped, flat row-major array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<T>) -> Result<Self> {
        let name = name.into();
        let count = shape_len(&name, &shape)?;
        if values.len() != count {
            return Err(GemError::InvalidShape { layer: name, shape });
        }
        Ok(Self {
            name,
            shape,
            values,
        })
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Result<Self> {
        let name = name.into();
        let count = shape_len(&name, &shape)?;
        Ok(Self {
            name,
            shape,
            values: vec![T::zero(); count],
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            name: self.name.clone(),
            shape: self.shape.clone(),
            values: vec![T::zero(); self.values.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// First non-finite entry, if any.
    pub fn check_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(GemError::NonFinite {
                layer: self.name.clone(),
                index,
                value: self.values[index].as_f64(),
            }),
            None => Ok(()),
        }
    }

    pub fn ensure_same_shape(&self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape || self.values.len() != other.values.len() {
            return Err(GemError::ShapeMismatch {
                layer: self.name.clone(),
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            name: self.name.clone(),
            shape: self.shape.clone(),
            values: self
                .values
                .iter()
                .map(|v| U::from(*v).unwrap_or_else(U::nan))
                .collect(),
        }
    }
}

fn shape_len(name: &str, shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(GemError::InvalidShape {
            layer: name.to_string(),
            shape: shape.to_vec(),
        });
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| GemError::InvalidShape {
            layer: name.to_string(),
            shape: shape.to_vec(),
        })
}

/// Ordered layers plus a tunability flag per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot<T> {
    layers: Vec<Tensor<T>>,
    tunable: Vec<bool>,
}

impl<T: Real> Snapshot<T> {
    pub fn new(layers: Vec<Tensor<T>>, tunable: Vec<bool>) -> Result<Self> {
        if layers.len() != tunable.len() {
            return Err(GemError::InvalidArgument(format!(
                "{} layers but {} tunable flags",
                layers.len(),
                tunable.len()
            )));
        }
        let mut seen = HashSet::new();
        for layer in &layers {
            if !seen.insert(layer.name.as_str()) {
                return Err(GemError::DuplicateLayer(layer.name.clone()));
            }
        }
        Ok(Self { layers, tunable })
    }

    /// Every layer marked tunable.
    pub fn all_tunable(layers: Vec<Tensor<T>>) -> Result<Self> {
        let n = layers.len();
        Self::new(layers, vec![true; n])
    }

    pub fn layers(&self) -> &[Tensor<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.layers
    }

    pub fn tunable_flags(&self) -> &[bool] {
        &self.tunable
    }

    pub fn is_tunable(&self, index: usize) -> bool {
        self.tunable[index]
    }

    pub fn set_tunable(&mut self, index: usize, tunable: bool) {
        self.tunable[index] = tunable;
    }

    /// Marks as tunable exactly the layers whose name contains any of the
    /// patterns. An empty pattern list marks every layer.
    pub fn set_tunable_by_patterns<S: AsRef<str>>(&mut self, patterns: &[S]) {
        for (layer, flag) in self.layers.iter().zip(self.tunable.iter_mut()) {
            *flag = patterns.is_empty() || patterns.iter().any(|p| layer.name.contains(p.as_ref()));
        }
    }

    pub fn tunable_layers(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.layers
            .iter()
            .zip(&self.tunable)
            .filter(|(_, &t)| t)
            .map(|(l, _)| l)
    }

    /// Number of tunable parameters `N`.
    pub fn total_params(&self) -> usize {
        self.tunable_layers().map(Tensor::len).sum()
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.layers.iter_mut().find(|l| l.name == name)
    }

    pub fn cast<U: Real>(&self) -> Snapshot<U> {
        Snapshot {
            layers: self.layers.iter().map(Tensor::cast).collect(),
            tunable: self.tunable.clone(),
        }
    }

    /// Same layers and flags, all values zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(Tensor::zeros_like).collect(),
            tunable: self.tunable.clone(),
        }
    }
}

/// Matches the tunable layers of `weights` with those of `grads`, in order.
///
/// Both snapshots must expose the same tunable layer names in the same order
/// with identical shapes.
pub fn pair_tunable<'a, T: Real>(
    weights: &'a Snapshot<T>,
    grads: &'a Snapshot<T>,
) -> Result<Vec<(&'a Tensor<T>, &'a Tensor<T>)>> {
    let w: Vec<_> = weights.tunable_layers().collect();
    let g: Vec<_> = grads.tunable_layers().collect();
    if w.len() != g.len() {
        return Err(GemError::Pairing(format!(
            "{} tunable weight layers vs {} gradient layers",
            w.len(),
            g.len()
        )));
    }
    w.into_iter()
        .zip(g)
        .map(|(wl, gl)| {
            if wl.name != gl.name {
                return Err(GemError::Pairing(format!(
                    "layer order differs: `{}` vs `{}`",
                    wl.name, gl.name
                )));
            }
            if wl.shape != gl.shape {
                return Err(GemError::ShapeMismatch {
                    layer: wl.name.clone(),
                    left: wl.shape.clone(),
                    right: gl.shape.clone(),
                });
            }
            Ok((wl, gl))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub layers: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub file: String,
    pub tunable: bool,
}

fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Loads a checkpoint. `path` may name the manifest itself or the directory
/// containing `manifest.json`.
pub fn load_snapshot(path: impl AsRef<Path>) -> Result<Snapshot<f64>> {
    let manifest_path = manifest_path(path.as_ref());
    let text = fs::read_to_string(&manifest_path).map_err(|e| GemError::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| GemError::Manifest {
        path: manifest_path.clone(),
        message: e.to_string(),
    })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(GemError::Manifest {
            path: manifest_path,
            message: format!("unsupported version {}", manifest.version),
        });
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));

    let mut seen = HashSet::new();
    let mut layers = Vec::with_capacity(manifest.layers.len());
    let mut tunable = Vec::with_capacity(manifest.layers.len());
    for entry in &manifest.layers {
        if !seen.insert(entry.name.as_str()) {
            return Err(GemError::DuplicateLayer(entry.name.clone()));
        }
        let count = shape_len(&entry.name, &entry.shape)?;
        let file = base.join(&entry.file);
        let bytes = fs::read(&file).map_err(|e| GemError::io(&file, e))?;
        let expected = (count * entry.dtype.width()) as u64;
        if bytes.len() as u64 != expected {
            return Err(GemError::ByteLength {
                layer: entry.name.clone(),
                shape: entry.shape.clone(),
                expected,
                found: bytes.len() as u64,
            });
        }
        let values = decode_le(&bytes, entry.dtype);
        let tensor = Tensor {
            name: entry.name.clone(),
            shape: entry.shape.clone(),
            values,
        };
        tensor.check_finite()?;
        layers.push(tensor);
        tunable.push(entry.tunable);
    }
    Snapshot::new(layers, tunable)
}

fn decode_le(bytes: &[u8], dtype: Dtype) -> Vec<f64> {
    match dtype {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    }
}

/// Writes `snapshot` at 64-bit precision; returns the manifest path.
pub fn save_snapshot(snapshot: &Snapshot<f64>, out_dir: impl AsRef<Path>) -> Result<PathBuf> {
    save_snapshot_as(snapshot, out_dir, Dtype::F64)
}

/// Writes `snapshot` with every layer stored as `dtype`. Storing as `f32`
/// rounds each value to nearest.
pub fn save_snapshot_as(
    snapshot: &Snapshot<f64>,
    out_dir: impl AsRef<Path>,
    dtype: Dtype,
) -> Result<PathBuf> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| GemError::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(snapshot.len());
    for (i, (layer, &tunable)) in snapshot
        .layers()
        .iter()
        .zip(snapshot.tunable_flags())
        .enumerate()
    {
        let file = format!("layer_{i:05}.bin");
        let mut bytes = Vec::with_capacity(layer.len() * dtype.width());
        match dtype {
            Dtype::F32 => layer
                .values
                .iter()
                .for_each(|v| bytes.extend_from_slice(&(*v as f32).to_le_bytes())),
            Dtype::F64 => layer
                .values
                .iter()
                .for_each(|v| bytes.extend_from_slice(&v.to_le_bytes())),
        }
        let path = out_dir.join(&file);
        fs::write(&path, bytes).map_err(|e| GemError::io(&path, e))?;
        entries.push(ManifestEntry {
            name: layer.name.clone(),
            shape: layer.shape.clone(),
            dtype,
            file,
            tunable,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        layers: entries,
    };
    let path = out_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| GemError::io(&path, e))?;
    Ok(path)
}
