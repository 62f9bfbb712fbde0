//! Throughput harness: per-frame selector timing against a large map, and a
//! comparison of three ways to keep voxel statistics current.

use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::Pose;
use crate::keyframe::{CommitPolicy, KeyframeError, KeyframeSelector, SelectorConfig, StageTimings};
use crate::voxel_map::literal::LiteralVoxelMap;
use crate::voxel_map::{build_map, GmmMap, VoxelMapError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchSpec {
    /// Voxels per axis of the prebuilt map; the product is the map size.
    pub grid: [usize; 3],
    pub points_per_voxel: usize,
    pub points_per_frame: usize,
    pub frames: usize,
    /// Sensor displacement between frames, meters.
    pub step: f64,
    /// Half-extent of the per-frame point box in the sensor frame, meters.
    pub frame_half_extent: [f64; 3],
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            grid: [25, 25, 16],
            points_per_voxel: 8,
            points_per_frame: 50_000,
            frames: 20,
            step: 1.0,
            frame_half_extent: [30.0, 30.0, 20.0],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub frames: usize,
    pub points_per_frame: usize,
    pub initial_voxels: usize,
    pub peak_voxels: usize,
    /// Wall time of each selector frame, milliseconds.
    pub frame_ms: Vec<f64>,
    pub median_ms: f64,
    pub frames_per_second: f64,
    /// Mean per-frame time of each selector stage, milliseconds.
    pub mean_stages: StageTimings,
    /// Mean per-frame update cost of each strategy, milliseconds.
    pub incremental_ms: f64,
    pub literal_ms: f64,
    pub batch_ms: f64,
    /// Largest per-voxel `‖Σ_literal − Σ_exact‖_F` after the sequence.
    pub literal_divergence: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Selector(#[from] KeyframeError),
    #[error(transparent)]
    Map(#[from] VoxelMapError),
    #[error("invalid bench spec: {0}")]
    Invalid(String),
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Map points: `points_per_voxel` uniform samples in every cell of the grid,
/// which is centered on the origin.
fn map_points(spec: &BenchSpec, voxel_size: f64, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    let [nx, ny, nz] = spec.grid;
    let half = |n: usize| (n / 2) as i64;
    let mut points = Vec::with_capacity(nx * ny * nz * spec.points_per_voxel);
    for i in 0..nx as i64 {
        for j in 0..ny as i64 {
            for k in 0..nz as i64 {
                let corner = Vector3::new(
                    (i - half(nx)) as f64,
                    (j - half(ny)) as f64,
                    (k - half(nz)) as f64,
                ) * voxel_size;
                for _ in 0..spec.points_per_voxel {
                    let u = Vector3::new(rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>());
                    points.push(corner + u * voxel_size);
                }
            }
        }
    }
    points
}

fn frame_points(spec: &BenchSpec, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    let [hx, hy, hz] = spec.frame_half_extent;
    (0..spec.points_per_frame)
        .map(|_| Vector3::new(rng.random_range(-hx..hx), rng.random_range(-hy..hy), rng.random_range(-hz..hz)))
        .collect()
}

/// Runs the selector (commit on every frame) over a moving sequence, then
/// replays the same world points through the three update strategies.
pub fn run_bench(spec: &BenchSpec, config: &SelectorConfig) -> Result<BenchReport, BenchError> {
    if spec.frames == 0 || spec.points_per_frame == 0 || spec.points_per_voxel < 2 {
        return Err(BenchError::Invalid(format!("{spec:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let base = map_points(spec, config.voxel_size, &mut rng);
    let config = SelectorConfig {
        commit_policy: CommitPolicy::Always,
        ..*config
    };
    let mut selector = KeyframeSelector::new(config)?;
    selector.bootstrap(&base, &Pose::identity(), 0.0)?;
    let initial_voxels = selector.map().map_or(0, GmmMap::len);

    let start_x = -(spec.frames as f64) * spec.step / 2.0;
    let mut frames = Vec::with_capacity(spec.frames);
    let mut frame_ms = Vec::with_capacity(spec.frames);
    let mut stage_sum = StageTimings::default();
    let mut peak_voxels = initial_voxels;
    for f in 0..spec.frames {
        let pose = Pose::from_yaw(0.05 * f as f64, Vector3::new(start_x + f as f64 * spec.step, 0.0, 0.0));
        let points = frame_points(spec, &mut rng);
        let t = Instant::now();
        let decision = selector.process_frame(&points, &pose, (f + 1) as f64)?;
        frame_ms.push(t.elapsed().as_secs_f64() * 1e3);
        let s = decision.timings;
        stage_sum.transform += s.transform;
        stage_sum.stage += s.stage;
        stage_sum.distance += s.distance;
        stage_sum.commit += s.commit;
        stage_sum.prune += s.prune;
        peak_voxels = peak_voxels.max(decision.voxels_after);
        frames.push(points.iter().map(|p| pose.transform_point(p)).collect::<Vec<_>>());
    }
    let n = spec.frames as f64;
    let mean_stages = StageTimings {
        transform: stage_sum.transform / n,
        stage: stage_sum.stage / n,
        distance: stage_sum.distance / n,
        commit: stage_sum.commit / n,
        prune: stage_sum.prune / n,
    };

    // exact incremental
    let mut exact = build_map(&base, config.voxel_size)?;
    let t = Instant::now();
    for world in &frames {
        let stage = exact.stage_frame(world);
        exact.commit(stage)?;
    }
    let incremental_ms = t.elapsed().as_secs_f64() * 1e3 / n;

    // per-batch literal update
    let mut literal = LiteralVoxelMap::new(config.voxel_size);
    literal.insert_frame(&base);
    let t = Instant::now();
    for world in &frames {
        literal.insert_frame(world);
    }
    let literal_ms = t.elapsed().as_secs_f64() * 1e3 / n;
    let literal_divergence = literal.max_covariance_divergence(&exact);

    // full recompute from every point seen so far
    let mut all = base;
    let t = Instant::now();
    for world in &frames {
        all.extend_from_slice(world);
        let rebuilt = build_map(&all, config.voxel_size)?;
        std::hint::black_box(rebuilt.len());
    }
    let batch_ms = t.elapsed().as_secs_f64() * 1e3 / n;

    let median_ms = median(&frame_ms);
    Ok(BenchReport {
        frames: spec.frames,
        points_per_frame: spec.points_per_frame,
        initial_voxels,
        peak_voxels,
        frames_per_second: 1e3 * n / frame_ms.iter().sum::<f64>(),
        frame_ms,
        median_ms,
        mean_stages,
        incremental_ms,
        literal_ms,
        batch_ms,
        literal_divergence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_bench_runs() {
        let spec = BenchSpec {
            grid: [6, 6, 4],
            points_per_frame: 2000,
            frames: 4,
            frame_half_extent: [8.0, 8.0, 6.0],
            ..Default::default()
        };
        let report = run_bench(&spec, &SelectorConfig::default()).unwrap();
        assert_eq!(report.initial_voxels, 144);
        assert_eq!(report.frame_ms.len(), 4);
        assert!(report.peak_voxels >= report.initial_voxels);
        assert!(report.literal_divergence > 0.0);
        assert!(report.median_ms > 0.0);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn rejects_empty_spec() {
        let spec = BenchSpec { frames: 0, ..Default::default() };
        assert!(run_bench(&spec, &SelectorConfig::default()).is_err());
    }
}
