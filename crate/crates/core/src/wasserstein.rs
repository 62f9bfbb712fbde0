//! Closed-form 2-Wasserstein distance between Gaussians and its aggregation
//! over the voxels a staged frame touches.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::voxel_map::{Estimator, GmmMap, StagedUpdate, VoxelKey};

/// Eigenvalues with magnitude below `EIGEN_CLAMP·max(1, ‖Σ‖_max)` are treated
/// as zero; anything more negative is an invalid covariance.
pub const EIGEN_CLAMP: f64 = 1e-9;

const SYMMETRY_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WassersteinError {
    #[error("invalid covariance: {0}")]
    InvalidCovariance(String),
    #[error("no comparable voxels ({new_count} new, {skipped_count} below the point minimum)")]
    NoComparableVoxels { new_count: usize, skipped_count: usize },
    #[error("stage was not produced from this map")]
    ForeignStage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianComponent {
    pub mean: Vector3<f64>,
    pub cov: Matrix3<f64>,
    /// Point count backing the component.
    pub mass: u64,
}

impl GaussianComponent {
    pub fn new(mean: Vector3<f64>, cov: Matrix3<f64>) -> Self {
        Self { mean, cov, mass: 1 }
    }
}

fn scale_of(m: &Matrix3<f64>) -> f64 {
    m.amax().max(1.0)
}

fn check_symmetric(m: &Matrix3<f64>) -> Result<(), WassersteinError> {
    if !m.iter().all(|v| v.is_finite()) {
        return Err(WassersteinError::InvalidCovariance("non-finite entry".into()));
    }
    let asym = (m - m.transpose()).amax();
    if asym > SYMMETRY_TOL * scale_of(m) {
        return Err(WassersteinError::InvalidCovariance(format!(
            "asymmetry {asym:.3e}"
        )));
    }
    Ok(())
}

/// Principal square root of a symmetric PSD 3×3 matrix via eigendecomposition.
pub fn sym_sqrt(m: &Matrix3<f64>) -> Result<Matrix3<f64>, WassersteinError> {
    check_symmetric(m)?;
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let clamp = EIGEN_CLAMP * scale_of(m);
    let mut roots = Vector3::zeros();
    for (r, &lambda) in roots.iter_mut().zip(eig.eigenvalues.iter()) {
        if lambda < -clamp {
            return Err(WassersteinError::InvalidCovariance(format!(
                "negative eigenvalue {lambda:.3e}"
            )));
        }
        *r = if lambda < clamp { 0.0 } else { lambda.sqrt() };
    }
    let v = eig.eigenvectors;
    let root = v * Matrix3::from_diagonal(&roots) * v.transpose();
    Ok((root + root.transpose()) * 0.5)
}

/// Covariance part of the squared distance,
/// `tr(Σ1 + Σ2 − 2(Σ1^½ Σ2 Σ1^½)^½)`.
///
/// Evaluated as `‖Σ1^½ − Σ2^½·U‖²_F` with `U` the orthogonal polar factor of
/// `Σ1^½Σ2^½`. Both expressions are equal; this one squares rounding errors
/// instead of cancelling large traces, so near-identical covariances give
/// values near machine precision squared.
fn covariance_term(a: &Matrix3<f64>, b: &Matrix3<f64>) -> Result<f64, WassersteinError> {
    let sa = sym_sqrt(a)?;
    let sb = sym_sqrt(b)?;
    let svd = (sa * sb).svd(true, true);
    let (Some(w), Some(vt)) = (svd.u, svd.v_t) else {
        return Err(WassersteinError::InvalidCovariance("svd did not converge".into()));
    };
    let polar = vt.transpose() * w.transpose();
    Ok((sa - sb * polar).norm_squared())
}

/// `W2(N1, N2) = √(‖μ1 − μ2‖² + tr(Σ1 + Σ2 − 2(Σ1^½ Σ2 Σ1^½)^½))`.
pub fn w2(g1: &GaussianComponent, g2: &GaussianComponent) -> Result<f64, WassersteinError> {
    let mean_term = (g1.mean - g2.mean).norm_squared();
    Ok((mean_term + covariance_term(&g1.cov, &g2.cov)?).sqrt())
}

/// Same distance evaluated through the nested square root and traces as
/// written. Loses precision to cancellation when the covariances are close.
pub fn w2_trace_form(
    g1: &GaussianComponent,
    g2: &GaussianComponent,
) -> Result<f64, WassersteinError> {
    let s1 = sym_sqrt(&g1.cov)?;
    check_symmetric(&g2.cov)?;
    let inner = s1 * g2.cov * s1;
    let cross = sym_sqrt(&((inner + inner.transpose()) * 0.5))?;
    let trace = g1.cov.trace() + g2.cov.trace() - 2.0 * cross.trace();
    let value = (g1.mean - g2.mean).norm_squared() + trace;
    let tol = EIGEN_CLAMP * (g1.cov.trace() + g2.cov.trace()).max(1.0);
    if value < -tol {
        return Err(WassersteinError::InvalidCovariance(format!(
            "negative squared distance {value:.3e}"
        )));
    }
    Ok(value.max(0.0).sqrt())
}

/// How per-voxel distances are reduced to one score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AggregationPolicy {
    /// Mean over compared voxels.
    #[default]
    AffectedMean,
    /// Sum over compared voxels divided by the number of voxels in the base map.
    AllVoxelsMean,
    /// Mean weighted by post-update point count.
    MassWeightedMean,
}

impl std::str::FromStr for AggregationPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "affected" => Ok(Self::AffectedMean),
            "all" => Ok(Self::AllVoxelsMean),
            "mass" => Ok(Self::MassWeightedMean),
            other => Err(format!("unknown aggregation '{other}' (affected|all|mass)")),
        }
    }
}

impl std::fmt::Display for AggregationPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::AffectedMean => "affected",
            Self::AllVoxelsMean => "all",
            Self::MassWeightedMean => "mass",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompareOptions {
    pub estimator: Estimator,
    /// Minimum point count on both sides; raised to the estimator's own minimum.
    pub min_points: u64,
    pub policy: AggregationPolicy,
}

impl Default for CompareOptions {
    fn default() -> Self {
        Self {
            estimator: Estimator::Sample,
            min_points: 5,
            policy: AggregationPolicy::AffectedMean,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DissimilarityReport {
    /// Aggregated distance, meters.
    pub d_w: f64,
    /// `(key, w2)` for every compared voxel, sorted by key.
    pub per_voxel: Vec<(VoxelKey, f64)>,
    pub affected_count: usize,
    pub new_count: usize,
    pub skipped_count: usize,
}

enum Outcome {
    Compared(f64, u64),
    New,
    Skipped,
}

/// Scores a staged frame against its base map.
pub fn map_dissimilarity(
    base: &GmmMap,
    stage: &StagedUpdate,
    opts: &CompareOptions,
) -> Result<DissimilarityReport, WassersteinError> {
    if !stage.belongs_to(base) {
        return Err(WassersteinError::ForeignStage);
    }
    let min_points = opts.min_points.max(opts.estimator.min_points());
    let keys = stage.sorted_keys();
    let outcomes: Vec<Result<Outcome, WassersteinError>> = keys
        .par_iter()
        .map(|key| {
            let after = &stage.overlay()[key];
            let Some(before) = base.get(key) else {
                return Ok(Outcome::New);
            };
            if before.count() < min_points || after.count() < min_points {
                return Ok(Outcome::Skipped);
            }
            let component = |s: &crate::voxel_map::VoxelStats| {
                s.gaussian(opts.estimator).map(|(mean, cov)| GaussianComponent {
                    mean,
                    cov,
                    mass: s.count(),
                })
            };
            let (Ok(g1), Ok(g2)) = (component(before), component(after)) else {
                return Ok(Outcome::Skipped);
            };
            Ok(Outcome::Compared(w2(&g1, &g2)?, after.count()))
        })
        .collect();

    let mut per_voxel = Vec::new();
    let mut masses = Vec::new();
    let (mut new_count, mut skipped_count) = (0, 0);
    for (key, outcome) in keys.iter().zip(outcomes) {
        match outcome? {
            Outcome::Compared(d, mass) => {
                per_voxel.push((*key, d));
                masses.push(mass);
            }
            Outcome::New => new_count += 1,
            Outcome::Skipped => skipped_count += 1,
        }
    }
    if per_voxel.is_empty() {
        return Err(WassersteinError::NoComparableVoxels {
            new_count,
            skipped_count,
        });
    }
    let sum: f64 = per_voxel.iter().map(|(_, d)| d).sum();
    let d_w = match opts.policy {
        AggregationPolicy::AffectedMean => sum / per_voxel.len() as f64,
        AggregationPolicy::AllVoxelsMean => sum / base.len() as f64,
        AggregationPolicy::MassWeightedMean => {
            let weighted: f64 = per_voxel
                .iter()
                .zip(&masses)
                .map(|((_, d), &m)| d * m as f64)
                .sum();
            weighted / masses.iter().sum::<u64>() as f64
        }
    };
    Ok(DissimilarityReport {
        d_w,
        affected_count: per_voxel.len(),
        per_voxel,
        new_count,
        skipped_count,
    })
}
