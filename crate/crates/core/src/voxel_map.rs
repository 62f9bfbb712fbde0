//! Voxel-hashed Gaussian map with exact incremental statistics.
//!
//! Each voxel stores sufficient statistics `(n, Σx, Σxxᵀ)` of its points,
//! accumulated relative to the voxel center to keep the second moment well
//! conditioned far from the origin. Mean and covariance are derived on demand.

use std::collections::{BTreeSet, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

pub mod literal;

/// Default voxel edge length, meters.
pub const DEFAULT_VOXEL_SIZE: f64 = 4.0;

static NEXT_MAP_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VoxelMapError {
    #[error("voxel size must be positive and finite, got {0}")]
    InvalidVoxelSize(f64),
    #[error("non-finite point rejected")]
    NonFinitePoint,
    #[error("insufficient points: voxel has {have}, estimator needs {need}")]
    InsufficientPoints { have: u64, need: u64 },
    #[error("stale stage: staged against map {stage_map} v{stage_version}, map is {map} v{map_version}")]
    StaleStage {
        stage_map: u64,
        stage_version: u64,
        map: u64,
        map_version: u64,
    },
    #[error("pruning radius must be positive, got {0}")]
    InvalidRadius(f64),
}

/// Covariance normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Estimator {
    /// Divide by `n − 1`.
    #[default]
    Sample,
    /// Divide by `n`.
    Population,
}

impl Estimator {
    pub fn min_points(self) -> u64 {
        match self {
            Estimator::Sample => 2,
            Estimator::Population => 1,
        }
    }
}

impl std::str::FromStr for Estimator {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sample" => Ok(Self::Sample),
            "population" => Ok(Self::Population),
            other => Err(format!("unknown estimator '{other}' (sample|population)")),
        }
    }
}

impl std::fmt::Display for Estimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Estimator::Sample => "sample",
            Estimator::Population => "population",
        })
    }
}

/// Integer voxel grid coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoxelKey {
    pub i: i64,
    pub j: i64,
    pub k: i64,
}

impl VoxelKey {
    pub const fn new(i: i64, j: i64, k: i64) -> Self {
        Self { i, j, k }
    }

    /// Half-open cell index `⌊p / l⌋` per axis. `None` for non-finite input.
    pub fn of(p: &Vector3<f64>, voxel_size: f64) -> Option<Self> {
        if !p.iter().all(|c| c.is_finite()) {
            return None;
        }
        Some(Self {
            i: (p.x / voxel_size).floor() as i64,
            j: (p.y / voxel_size).floor() as i64,
            k: (p.z / voxel_size).floor() as i64,
        })
    }

    pub fn center(&self, voxel_size: f64) -> Vector3<f64> {
        Vector3::new(
            (self.i as f64 + 0.5) * voxel_size,
            (self.j as f64 + 0.5) * voxel_size,
            (self.k as f64 + 0.5) * voxel_size,
        )
    }
}

/// `voxel_index(p, l)`; errors on non-finite coordinates.
pub fn voxel_index(p: &Vector3<f64>, voxel_size: f64) -> Result<VoxelKey, VoxelMapError> {
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(VoxelMapError::InvalidVoxelSize(voxel_size));
    }
    VoxelKey::of(p, voxel_size).ok_or(VoxelMapError::NonFinitePoint)
}

/// Sufficient statistics of one voxel, accumulated about `origin`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelStats {
    origin: Vector3<f64>,
    n: u64,
    sum: Vector3<f64>,
    outer: Matrix3<f64>,
}

impl VoxelStats {
    pub fn new(origin: Vector3<f64>) -> Self {
        Self {
            origin,
            n: 0,
            sum: Vector3::zeros(),
            outer: Matrix3::zeros(),
        }
    }

    pub fn from_points<'a>(
        origin: Vector3<f64>,
        points: impl IntoIterator<Item = &'a Vector3<f64>>,
    ) -> Self {
        let mut s = Self::new(origin);
        for p in points {
            s.add(p);
        }
        s
    }

    #[inline]
    pub fn add(&mut self, p: &Vector3<f64>) {
        let d = p - self.origin;
        self.n += 1;
        self.sum += d;
        self.outer += d * d.transpose();
    }

    /// Field-wise accumulation of another voxel's statistics.
    ///
    /// # Panics
    /// If the two share no common origin.
    pub fn merge(&mut self, other: &VoxelStats) {
        assert_eq!(self.origin, other.origin, "merging stats with different origins");
        self.n += other.n;
        self.sum += other.sum;
        self.outer += other.outer;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn origin(&self) -> &Vector3<f64> {
        &self.origin
    }

    /// Point sum relative to the origin.
    pub fn sum(&self) -> &Vector3<f64> {
        &self.sum
    }

    /// Outer-product sum relative to the origin.
    pub fn outer(&self) -> &Matrix3<f64> {
        &self.outer
    }

    pub fn mean(&self) -> Vector3<f64> {
        self.origin + self.sum / self.n as f64
    }

    /// Mean and covariance of the voxel.
    pub fn gaussian(
        &self,
        estimator: Estimator,
    ) -> Result<(Vector3<f64>, Matrix3<f64>), VoxelMapError> {
        voxel_gaussian(self, estimator)
    }
}

/// `μ = s/n`, `Σ = (q − n·μμᵀ) / (n − 1)` (sample) or `/ n` (population),
/// symmetrized.
pub fn voxel_gaussian(
    stats: &VoxelStats,
    estimator: Estimator,
) -> Result<(Vector3<f64>, Matrix3<f64>), VoxelMapError> {
    let need = estimator.min_points();
    if stats.n < need {
        return Err(VoxelMapError::InsufficientPoints {
            have: stats.n,
            need,
        });
    }
    let n = stats.n as f64;
    let m = stats.sum / n;
    let scatter = stats.outer - m * stats.sum.transpose();
    let denom = match estimator {
        Estimator::Sample => n - 1.0,
        Estimator::Population => n,
    };
    let cov = scatter / denom;
    Ok((stats.origin + m, (cov + cov.transpose()) * 0.5))
}

/// Voxel Gaussian mixture map.
///
/// Clones receive a fresh identity, so stages taken from one copy cannot be
/// committed to another.
#[derive(Debug)]
pub struct GmmMap {
    id: u64,
    version: u64,
    voxel_size: f64,
    table: HashMap<VoxelKey, VoxelStats>,
    total_points: u64,
    rejected_points: u64,
}

impl Clone for GmmMap {
    fn clone(&self) -> Self {
        Self {
            id: NEXT_MAP_ID.fetch_add(1, Ordering::Relaxed),
            version: self.version,
            voxel_size: self.voxel_size,
            table: self.table.clone(),
            total_points: self.total_points,
            rejected_points: self.rejected_points,
        }
    }
}

impl GmmMap {
    pub fn new(voxel_size: f64) -> Result<Self, VoxelMapError> {
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(VoxelMapError::InvalidVoxelSize(voxel_size));
        }
        Ok(Self {
            id: NEXT_MAP_ID.fetch_add(1, Ordering::Relaxed),
            version: 0,
            voxel_size,
            table: HashMap::new(),
            total_points: 0,
            rejected_points: 0,
        })
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    /// Number of stored voxels (mixture components).
    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn total_points(&self) -> u64 {
        self.total_points
    }

    /// Non-finite points dropped by `insert_point` / `build_map`.
    pub fn rejected_points(&self) -> u64 {
        self.rejected_points
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn get(&self, key: &VoxelKey) -> Option<&VoxelStats> {
        self.table.get(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&VoxelKey, &VoxelStats)> {
        self.table.iter()
    }

    pub fn sorted_keys(&self) -> Vec<VoxelKey> {
        let mut keys: Vec<_> = self.table.keys().copied().collect();
        keys.sort_unstable();
        keys
    }

    pub fn key_of(&self, p: &Vector3<f64>) -> Option<VoxelKey> {
        VoxelKey::of(p, self.voxel_size)
    }

    pub fn insert_point(&mut self, p: &Vector3<f64>) -> Result<(), VoxelMapError> {
        let Some(key) = self.key_of(p) else {
            self.rejected_points += 1;
            return Err(VoxelMapError::NonFinitePoint);
        };
        let l = self.voxel_size;
        self.table
            .entry(key)
            .or_insert_with(|| VoxelStats::new(key.center(l)))
            .add(p);
        self.total_points += 1;
        self.version += 1;
        Ok(())
    }

    /// Stages `points` (already in the map frame) as a copy-on-write overlay.
    pub fn stage_frame(&self, points: &[Vector3<f64>]) -> StagedUpdate {
        let mut overlay: HashMap<VoxelKey, VoxelStats> = HashMap::new();
        let mut new_voxel_keys = BTreeSet::new();
        let mut accepted = 0;
        let mut rejected = 0;
        for p in points {
            let Some(key) = self.key_of(p) else {
                rejected += 1;
                continue;
            };
            overlay
                .entry(key)
                .or_insert_with(|| match self.table.get(&key) {
                    Some(stats) => stats.clone(),
                    None => {
                        new_voxel_keys.insert(key);
                        VoxelStats::new(key.center(self.voxel_size))
                    }
                })
                .add(p);
            accepted += 1;
        }
        StagedUpdate {
            map_id: self.id,
            base_version: self.version,
            overlay,
            new_voxel_keys,
            accepted,
            rejected,
        }
    }

    pub fn commit(&mut self, stage: StagedUpdate) -> Result<(), VoxelMapError> {
        if stage.map_id != self.id || stage.base_version != self.version {
            return Err(VoxelMapError::StaleStage {
                stage_map: stage.map_id,
                stage_version: stage.base_version,
                map: self.id,
                map_version: self.version,
            });
        }
        if stage.overlay.is_empty() {
            self.rejected_points += stage.rejected;
            return Ok(());
        }
        self.table.extend(stage.overlay);
        self.total_points += stage.accepted;
        self.rejected_points += stage.rejected;
        self.version += 1;
        Ok(())
    }

    /// Removes voxels whose center lies farther than `radius` from `center`.
    pub fn prune_outside(
        &mut self,
        center: &Vector3<f64>,
        radius: f64,
    ) -> Result<usize, VoxelMapError> {
        if !(radius > 0.0) {
            return Err(VoxelMapError::InvalidRadius(radius));
        }
        let l = self.voxel_size;
        let before = self.table.len();
        let mut dropped = 0;
        self.table.retain(|key, stats| {
            let keep = (key.center(l) - center).norm() <= radius;
            if !keep {
                dropped += stats.n;
            }
            keep
        });
        let removed = before - self.table.len();
        if removed > 0 {
            self.total_points -= dropped;
            self.version += 1;
        }
        Ok(removed)
    }
}

/// Builds a map by inserting every point; non-finite points are counted in
/// [`GmmMap::rejected_points`].
pub fn build_map(points: &[Vector3<f64>], voxel_size: f64) -> Result<GmmMap, VoxelMapError> {
    let mut map = GmmMap::new(voxel_size)?;
    for p in points {
        // rejection is recorded on the map
        let _ = map.insert_point(p);
    }
    Ok(map)
}

/// Candidate post-insertion state of the voxels a frame touches.
#[derive(Debug, Clone)]
pub struct StagedUpdate {
    map_id: u64,
    base_version: u64,
    overlay: HashMap<VoxelKey, VoxelStats>,
    new_voxel_keys: BTreeSet<VoxelKey>,
    accepted: u64,
    rejected: u64,
}

impl StagedUpdate {
    /// Whether this stage was produced from `map` at its current version.
    pub fn belongs_to(&self, map: &GmmMap) -> bool {
        self.map_id == map.id && self.base_version == map.version
    }

    pub fn overlay(&self) -> &HashMap<VoxelKey, VoxelStats> {
        &self.overlay
    }

    pub fn sorted_keys(&self) -> Vec<VoxelKey> {
        let mut keys: Vec<_> = self.overlay.keys().copied().collect();
        keys.sort_unstable();
        keys
    }

    pub fn new_voxel_keys(&self) -> &BTreeSet<VoxelKey> {
        &self.new_voxel_keys
    }

    pub fn is_new(&self, key: &VoxelKey) -> bool {
        self.new_voxel_keys.contains(key)
    }

    pub fn accepted_points(&self) -> u64 {
        self.accepted
    }

    pub fn rejected_points(&self) -> u64 {
        self.rejected
    }

    pub fn len(&self) -> usize {
        self.overlay.len()
    }

    pub fn is_empty(&self) -> bool {
        self.overlay.is_empty()
    }
}
