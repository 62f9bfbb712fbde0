//! Per-batch `(n, μ, Σ)` update in its literal form:
//!
//! ```text
//! μ' = (n·μ + Σp) / (n + n')
//! Σ' = (n·Σ + Σ(p − μ')(p − μ')ᵀ) / (n + n')
//! ```
//!
//! The old covariance stays centered at the old mean, so this drifts from the
//! exact moments as soon as the mean moves. Kept only for benchmarking against
//! [`super::GmmMap`].

use std::collections::HashMap;

use nalgebra::{Matrix3, Vector3};

use super::{Estimator, GmmMap, VoxelKey};

#[derive(Debug, Clone, PartialEq)]
pub struct LiteralVoxel {
    pub n: u64,
    pub mean: Vector3<f64>,
    pub cov: Matrix3<f64>,
}

#[derive(Debug, Clone)]
pub struct LiteralVoxelMap {
    voxel_size: f64,
    table: HashMap<VoxelKey, LiteralVoxel>,
}

impl LiteralVoxelMap {
    pub fn new(voxel_size: f64) -> Self {
        Self {
            voxel_size,
            table: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn get(&self, key: &VoxelKey) -> Option<&LiteralVoxel> {
        self.table.get(key)
    }

    /// Applies one frame as a batch: the points falling in each voxel form `V'`.
    pub fn insert_frame(&mut self, points: &[Vector3<f64>]) {
        let mut groups: HashMap<VoxelKey, Vec<Vector3<f64>>> = HashMap::new();
        for p in points {
            if let Some(key) = VoxelKey::of(p, self.voxel_size) {
                groups.entry(key).or_default().push(*p);
            }
        }
        for (key, batch) in groups {
            let voxel = self.table.entry(key).or_insert(LiteralVoxel {
                n: 0,
                mean: Vector3::zeros(),
                cov: Matrix3::zeros(),
            });
            let n_old = voxel.n as f64;
            let n_new = n_old + batch.len() as f64;
            let sum: Vector3<f64> = batch.iter().sum();
            let mean = (voxel.mean * n_old + sum) / n_new;
            let mut scatter = Matrix3::zeros();
            for p in &batch {
                let d = p - mean;
                scatter += d * d.transpose();
            }
            voxel.cov = (voxel.cov * n_old + scatter) / n_new;
            voxel.mean = mean;
            voxel.n += batch.len() as u64;
        }
    }

    /// Largest Frobenius gap between this map's covariances and the exact
    /// population covariances of `exact`, over voxels present in both.
    pub fn max_covariance_divergence(&self, exact: &GmmMap) -> f64 {
        self.table
            .iter()
            .filter_map(|(key, lit)| {
                let stats = exact.get(key)?;
                let (_, cov) = stats.gaussian(Estimator::Population).ok()?;
                Some((lit.cov - cov).norm())
            })
            .fold(0.0, f64::max)
    }
}
