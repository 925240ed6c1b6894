//! The linear classifier head, the only trained object.
//!
//! `W` is stored row-major as `d x D` (one row per feature dimension, one
//! column per logit node) and `z = W^T h + b`. All arithmetic is f64;
//! features arrive widened from their 32-bit on-disk form.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::gauss::standard_normal;

use crate::catalog::GroupPartition;
use crate::error::{Error, Result};

/// Standard deviation of the Gaussian weight init.
pub const INIT_STD: f64 = 0.01;

/// Which classifier columns the head carries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadLayout {
    /// One column per category: background at 0, foreground 1..=C.
    Plain { num_foreground: usize },
    /// Group-softmax columns laid out by the partition.
    Bags { partition: GroupPartition },
}

impl HeadLayout {
    pub fn logit_dim(&self) -> usize {
        match self {
            HeadLayout::Plain { num_foreground } => num_foreground + 1,
            HeadLayout::Bags { partition } => partition.logit_dim(),
        }
    }

    pub fn num_foreground(&self) -> usize {
        match self {
            HeadLayout::Plain { num_foreground } => *num_foreground,
            HeadLayout::Bags { partition } => partition.num_foreground(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    layout: HeadLayout,
    feature_dim: usize,
    /// d * D entries, row-major over feature dimensions.
    weight: Vec<f64>,
    /// D entries.
    bias: Vec<f64>,
}

/// Per-column Euclidean norms keyed by what the column predicts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightNorms {
    /// Indexed by category id 0..=C (0 = background).
    pub per_category: Vec<f64>,
    /// Norms of others columns (background-group others first when present),
    /// reported separately from the per-category map.
    pub others: Vec<f64>,
}

impl HeadParams {
    /// Gaussian(0, 0.01) weights, zero bias, deterministic per seed.
    pub fn init(layout: HeadLayout, feature_dim: usize, seed: u64) -> Self {
        let dim = layout.logit_dim();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let weight =
            (0..feature_dim * dim).map(|_| standard_normal(&mut rng) * INIT_STD).collect();
        HeadParams { layout, feature_dim, weight, bias: vec![0.0; dim] }
    }

    pub fn layout(&self) -> &HeadLayout {
        &self.layout
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn logit_dim(&self) -> usize {
        self.bias.len()
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub(crate) fn weight_mut(&mut self) -> &mut [f64] {
        &mut self.weight
    }

    pub(crate) fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    /// Replace column `j` of `W`.
    pub(crate) fn set_column(&mut self, j: usize, column: &[f64]) {
        let dim = self.logit_dim();
        for (i, &v) in column.iter().enumerate() {
            self.weight[i * dim + j] = v;
        }
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        let dim = self.logit_dim();
        (0..self.feature_dim).map(|i| self.weight[i * dim + j]).collect()
    }

    pub fn column_norm(&self, j: usize) -> f64 {
        let dim = self.logit_dim();
        (0..self.feature_dim).map(|i| self.weight[i * dim + j].powi(2)).sum::<f64>().sqrt()
    }

    /// z = W^T h + b.
    pub fn forward(&self, feature: &[f64]) -> Result<Vec<f64>> {
        if feature.len() != self.feature_dim {
            return Err(Error::shape(format!(
                "feature has {} dims, head expects {}",
                feature.len(),
                self.feature_dim
            )));
        }
        let dim = self.logit_dim();
        let mut z = self.bias.clone();
        for (i, &h) in feature.iter().enumerate() {
            let row = &self.weight[i * dim..(i + 1) * dim];
            for (zj, &w) in z.iter_mut().zip(row) {
                *zj += w * h;
            }
        }
        Ok(z)
    }

    /// Row-wise forward over a flat batch of `n` features.
    pub fn forward_batch(&self, features: &[f64], n: usize) -> Result<Vec<f64>> {
        if features.len() != n * self.feature_dim {
            return Err(Error::shape("batch feature buffer has the wrong size"));
        }
        let dim = self.logit_dim();
        let mut out = Vec::with_capacity(n * dim);
        for k in 0..n {
            let z = self.forward(&features[k * self.feature_dim..(k + 1) * self.feature_dim])?;
            out.extend_from_slice(&z);
        }
        Ok(out)
    }

    /// Per-category column norms; others-node columns are reported
    /// separately.
    pub fn weight_norms(&self) -> WeightNorms {
        match &self.layout {
            HeadLayout::Plain { num_foreground } => WeightNorms {
                per_category: (0..=*num_foreground).map(|j| self.column_norm(j)).collect(),
                others: Vec::new(),
            },
            HeadLayout::Bags { partition } => {
                let per_category = (0..=partition.num_foreground() as u32)
                    .map(|j| self.column_norm(partition.category_index(j)))
                    .collect();
                let mut others = Vec::new();
                if let Some(idx) = partition.g0_others_index() {
                    others.push(self.column_norm(idx));
                }
                for n in 0..partition.num_fg_groups() {
                    if let Some(idx) = partition.others_index(n) {
                        others.push(self.column_norm(idx));
                    }
                }
                WeightNorms { per_category, others }
            }
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    layout: HeadLayout,
    feature_dim: usize,
    logit_dim: usize,
    seed: u64,
    method: String,
}

/// Write a checkpoint: one compact JSON header line, then `W` (row-major)
/// and `b` as little-endian f64.
pub fn save_checkpoint(params: &HeadParams, seed: u64, method: &str, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        layout: params.layout.clone(),
        feature_dim: params.feature_dim,
        logit_dim: params.logit_dim(),
        seed,
        method: method.to_string(),
    };
    let mut buf = serde_json::to_vec(&header)?;
    buf.push(b'\n');
    for &v in params.weight.iter().chain(params.bias.iter()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Load a checkpoint, returning the parameters plus (seed, method) metadata.
pub fn load_checkpoint(path: &Path) -> Result<(HeadParams, u64, String)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::data("checkpoint missing header line"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..newline])?;
    if header.logit_dim != header.layout.logit_dim() {
        return Err(Error::data("checkpoint header dimension disagrees with its layout"));
    }
    let blob = &bytes[newline + 1..];
    let n_weights = header.feature_dim * header.logit_dim;
    let expected = (n_weights + header.logit_dim) * 8;
    if blob.len() != expected {
        return Err(Error::data(format!(
            "checkpoint blob holds {} bytes, expected {expected}",
            blob.len()
        )));
    }
    let mut values = Vec::with_capacity(n_weights + header.logit_dim);
    for chunk in blob.chunks_exact(8) {
        let v = f64::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::data("checkpoint contains a non-finite parameter"));
        }
        values.push(v);
    }
    let bias = values.split_off(n_weights);
    Ok((
        HeadParams { layout: header.layout, feature_dim: header.feature_dim, weight: values, bias },
        header.seed,
        header.method,
    ))
}
