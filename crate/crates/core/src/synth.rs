//! Deterministic synthetic scenes, scans and two-session datasets.
//!
//! Scenes are sets of axis-aligned rectangles. Scans sample a fixed world
//! lattice on every rectangle within range of the sensor (no occlusion), then
//! subsample to the per-frame budget and add isotropic Gaussian noise.

use nalgebra::Vector3;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::geometry::{Pose, Twist};
use crate::io::CloudFrame;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("dimensions must be positive: {0}")]
    InvalidDimensions(String),
    #[error("invalid scan spec: {0}")]
    InvalidScanSpec(String),
}

/// Axis-aligned rectangle with normal along `axis` at `offset`; `lo`/`hi`
/// bound the two remaining axes in increasing axis order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Patch {
    pub axis: usize,
    pub offset: f64,
    pub lo: [f64; 2],
    pub hi: [f64; 2],
}

impl Patch {
    fn new(axis: usize, offset: f64, lo: [f64; 2], hi: [f64; 2]) -> Self {
        Self { axis, offset, lo, hi }
    }

    pub fn in_plane_axes(&self) -> [usize; 2] {
        match self.axis {
            0 => [1, 2],
            1 => [0, 2],
            _ => [0, 1],
        }
    }

    pub fn area(&self) -> f64 {
        (self.hi[0] - self.lo[0]) * (self.hi[1] - self.lo[1])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub patches: Vec<Patch>,
    /// Surface sampling density, points per square meter.
    pub density: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneKind {
    Corridor,
    Room,
    LoopCourse,
}

impl std::str::FromStr for SceneKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "corridor" => Ok(Self::Corridor),
            "room" => Ok(Self::Room),
            "loop_course" | "loop-course" => Ok(Self::LoopCourse),
            other => Err(format!("unknown scene '{other}' (corridor|room|loop_course)")),
        }
    }
}

/// Scene extents, meters. For the loop course `length`×`width` is the outer
/// footprint and `corridor_width` the width of the ring.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneDims {
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub corridor_width: f64,
}

impl SceneDims {
    pub fn corridor() -> Self {
        Self { length: 40.0, width: 4.0, height: 3.0, corridor_width: 4.0 }
    }

    pub fn room() -> Self {
        Self { length: 10.0, width: 10.0, height: 3.0, corridor_width: 10.0 }
    }

    pub fn loop_course() -> Self {
        Self { length: 40.0, width: 30.0, height: 3.0, corridor_width: 4.0 }
    }

    pub fn default_for(kind: SceneKind) -> Self {
        match kind {
            SceneKind::Corridor => Self::corridor(),
            SceneKind::Room => Self::room(),
            SceneKind::LoopCourse => Self::loop_course(),
        }
    }
}

/// Floor height relative to the sensor path (which runs at z = 0).
pub const FLOOR_Z: f64 = -1.3;

/// Corner of the loop course footprint. Keeps its walls off the lattice of
/// any power-of-two voxel size.
pub const LOOP_ORIGIN: f64 = 1.0;

/// Box with all six faces.
fn closed_box(x: [f64; 2], y: [f64; 2], z: [f64; 2]) -> Vec<Patch> {
    vec![
        Patch::new(1, y[0], [x[0], z[0]], [x[1], z[1]]),
        Patch::new(1, y[1], [x[0], z[0]], [x[1], z[1]]),
        Patch::new(0, x[0], [y[0], z[0]], [y[1], z[1]]),
        Patch::new(0, x[1], [y[0], z[0]], [y[1], z[1]]),
        Patch::new(2, z[0], [x[0], y[0]], [x[1], y[1]]),
        Patch::new(2, z[1], [x[0], y[0]], [x[1], y[1]]),
    ]
}

pub fn generate_scene(kind: SceneKind, dims: SceneDims, density: f64) -> Result<Scene, SynthError> {
    let SceneDims { length, width, height, corridor_width } = dims;
    if !(length > 0.0 && width > 0.0 && height > 0.0 && density > 0.0) {
        return Err(SynthError::InvalidDimensions(format!("{dims:?}, density {density}")));
    }
    let z = [FLOOR_Z, FLOOR_Z + height];
    let patches = match kind {
        // corridor along +x starting at the origin, centered on y = 0
        SceneKind::Corridor => closed_box([-1.0, length - 1.0], [-width / 2.0, width / 2.0], z),
        SceneKind::Room => closed_box([-length / 2.0, length / 2.0], [-width / 2.0, width / 2.0], z),
        SceneKind::LoopCourse => {
            let (w, a, b, o) = (corridor_width, length, width, LOOP_ORIGIN);
            if !(w > 0.0 && 2.0 * w < length && 2.0 * w < width) {
                return Err(SynthError::InvalidDimensions(format!(
                    "corridor width {w} does not fit in {length}x{width}"
                )));
            }
            let mut p = vec![
                // outer walls
                Patch::new(1, o, [o, z[0]], [o + a, z[1]]),
                Patch::new(1, o + b, [o, z[0]], [o + a, z[1]]),
                Patch::new(0, o, [o, z[0]], [o + b, z[1]]),
                Patch::new(0, o + a, [o, z[0]], [o + b, z[1]]),
                // inner block
                Patch::new(1, o + w, [o + w, z[0]], [o + a - w, z[1]]),
                Patch::new(1, o + b - w, [o + w, z[0]], [o + a - w, z[1]]),
                Patch::new(0, o + w, [o + w, z[0]], [o + b - w, z[1]]),
                Patch::new(0, o + a - w, [o + w, z[0]], [o + b - w, z[1]]),
            ];
            // floor and ceiling as four strips around the block
            for &h in &z {
                p.push(Patch::new(2, h, [o, o], [o + a, o + w]));
                p.push(Patch::new(2, h, [o, o + b - w], [o + a, o + b]));
                p.push(Patch::new(2, h, [o, o + w], [o + w, o + b - w]));
                p.push(Patch::new(2, h, [o + a - w, o + w], [o + a, o + b - w]));
            }
            p
        }
    };
    Ok(Scene { patches, density })
}

/// Poses along the corridor centerline, heading +x.
pub fn corridor_path(length: f64, step: f64) -> Vec<Pose> {
    let n = ((length - 2.0) / step).floor() as usize + 1;
    (0..n)
        .map(|i| Pose::from_translation(i as f64 * step, 0.0, 0.0))
        .collect()
}

/// Poses along the loop-course centerline, counter-clockwise from the
/// middle of the bottom edge, heading along the direction of travel.
/// `start` is an arc-length offset, meters.
pub fn loop_course_path(dims: SceneDims, step: f64, count: usize, start: f64) -> Vec<Pose> {
    let lo = LOOP_ORIGIN + dims.corridor_width / 2.0;
    let (hx, hy) = (lo + dims.length - dims.corridor_width, lo + dims.width - dims.corridor_width);
    let corners = [
        Vector3::new(lo, lo, 0.0),
        Vector3::new(hx, lo, 0.0),
        Vector3::new(hx, hy, 0.0),
        Vector3::new(lo, hy, 0.0),
    ];
    let sides: Vec<(Vector3<f64>, Vector3<f64>, f64)> = (0..4)
        .map(|i| {
            let a = corners[i];
            let b = corners[(i + 1) % 4];
            (a, (b - a).normalize(), (b - a).norm())
        })
        .collect();
    let perimeter: f64 = sides.iter().map(|s| s.2).sum();
    let begin = sides[0].2 / 2.0 + start;
    (0..count)
        .map(|i| {
            let mut s = (begin + i as f64 * step).rem_euclid(perimeter);
            for &(a, dir, len) in &sides {
                if s < len {
                    let yaw = dir.y.atan2(dir.x);
                    return Pose::from_yaw(yaw, a + dir * s);
                }
                s -= len;
            }
            unreachable!("arc length within perimeter")
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanSpec {
    pub max_range: f64,
    /// Per-coordinate Gaussian noise, meters.
    pub noise_sigma: f64,
    pub points_per_frame: usize,
    pub seed: u64,
}

impl Default for ScanSpec {
    fn default() -> Self {
        Self {
            max_range: 20.0,
            noise_sigma: 0.01,
            points_per_frame: 20_000,
            seed: 0,
        }
    }
}

/// One scan from `pose`, points expressed in the sensor frame.
pub fn simulate_scan(scene: &Scene, pose: &Pose, spec: &ScanSpec) -> Result<CloudFrame, SynthError> {
    simulate_scan_stream(scene, pose, spec, 0)
}

/// As [`simulate_scan`] but on an independent random stream, so the frames
/// of a sequence get distinct noise from a single seed.
pub fn simulate_scan_stream(
    scene: &Scene,
    pose: &Pose,
    spec: &ScanSpec,
    stream: u64,
) -> Result<CloudFrame, SynthError> {
    if !(spec.max_range > 0.0) || !(spec.noise_sigma >= 0.0) {
        return Err(SynthError::InvalidScanSpec(format!("{spec:?}")));
    }
    let spacing = 1.0 / scene.density.sqrt();
    let center = pose.translation;
    let r2 = spec.max_range * spec.max_range;
    let mut visible = Vec::new();
    for patch in &scene.patches {
        let d = center[patch.axis] - patch.offset;
        if d.abs() > spec.max_range {
            continue;
        }
        let [ua, va] = patch.in_plane_axes();
        let range_of = |k: usize, axis: usize| {
            let lo = patch.lo[k];
            let first = ((center[axis] - spec.max_range - lo) / spacing - 0.5).ceil().max(0.0) as usize;
            let count = ((patch.hi[k] - lo) / spacing).floor() as usize;
            let last = (((center[axis] + spec.max_range - lo) / spacing - 0.5).floor() as isize)
                .min(count as isize - 1);
            (first, last)
        };
        let (u0, u1) = range_of(0, ua);
        let (v0, v1) = range_of(1, va);
        if (u1 as isize) < u0 as isize || (v1 as isize) < v0 as isize {
            continue;
        }
        for iu in u0..=(u1 as usize) {
            for iv in v0..=(v1 as usize) {
                let mut p = Vector3::zeros();
                p[patch.axis] = patch.offset;
                p[ua] = patch.lo[0] + (iu as f64 + 0.5) * spacing;
                p[va] = patch.lo[1] + (iv as f64 + 0.5) * spacing;
                if (p - center).norm_squared() <= r2 {
                    visible.push(p);
                }
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    if visible.len() > spec.points_per_frame {
        let mut picked = sample(&mut rng, visible.len(), spec.points_per_frame).into_vec();
        picked.sort_unstable();
        visible = picked.into_iter().map(|i| visible[i]).collect();
    }
    let inv = pose.inverse();
    let noise = Normal::new(0.0, spec.noise_sigma).expect("sigma checked above");
    let points = visible
        .into_iter()
        .map(|p| {
            let jitter = if spec.noise_sigma > 0.0 {
                Vector3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng))
            } else {
                Vector3::zeros()
            };
            inv.transform_point(&(p + jitter))
        })
        .collect();
    Ok(CloudFrame {
        frame_index: 0,
        timestamp: 0.0,
        points,
        dropped: 0,
    })
}

/// Scans for every pose, with frame index `i` and timestamp `i·dt`.
pub fn simulate_sequence(
    scene: &Scene,
    poses: &[Pose],
    spec: &ScanSpec,
    dt: f64,
) -> Result<Vec<CloudFrame>, SynthError> {
    poses
        .iter()
        .enumerate()
        .map(|(i, pose)| {
            let mut frame = simulate_scan_stream(scene, pose, spec, i as u64)?;
            frame.frame_index = i;
            frame.timestamp = i as f64 * dt;
            Ok(frame)
        })
        .collect()
}

/// Odometry noise, applied as a right perturbation `Z = T·exp(ξ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    pub sigma_trans: f64,
    /// Radians.
    pub sigma_rot: f64,
}

impl NoiseModel {
    pub fn zero() -> Self {
        Self { sigma_trans: 0.0, sigma_rot: 0.0 }
    }

    fn perturbation(&self, rng: &mut ChaCha8Rng) -> Twist {
        let mut draw = |sigma: f64| {
            if sigma > 0.0 {
                Normal::new(0.0, sigma).expect("positive sigma").sample(rng)
            } else {
                0.0
            }
        };
        let w = Vector3::new(draw(self.sigma_rot), draw(self.sigma_rot), draw(self.sigma_rot));
        let t = Vector3::new(draw(self.sigma_trans), draw(self.sigma_trans), draw(self.sigma_trans));
        Twist::new(w, t)
    }

    pub fn perturb(&self, pose: &Pose, rng: &mut ChaCha8Rng) -> Pose {
        pose.compose(&Pose::exp(&self.perturbation(rng)))
    }
}

#[derive(Debug, Clone)]
pub struct TwoSessionSpec {
    /// Ground-truth world poses of session 1.
    pub path1: Vec<Pose>,
    /// Ground-truth world poses of session 2.
    pub path2: Vec<Pose>,
    /// True pose of session 2's own world frame in session 1's world.
    pub session2_origin: Pose,
    pub odometry_noise: NoiseModel,
    pub loop_noise: NoiseModel,
    pub loop_count: usize,
    pub scans: Option<ScanSpec>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct LoopPair {
    pub session1_index: usize,
    pub session2_index: usize,
    /// Noisy `T1(i)⁻¹·T2(j)`.
    pub measurement: Pose,
}

#[derive(Debug, Clone)]
pub struct TwoSessionData {
    pub truth1: Vec<Pose>,
    pub truth2: Vec<Pose>,
    pub session2_origin: Pose,
    /// Noisy relative poses `i → i+1`.
    pub odometry1: Vec<Pose>,
    pub odometry2: Vec<Pose>,
    /// Session 2 dead-reckoned from its odometry, in its own world frame.
    pub trajectory2_local: Vec<Pose>,
    pub loops: Vec<LoopPair>,
    pub scans1: Vec<CloudFrame>,
    pub scans2: Vec<CloudFrame>,
}

/// Composes a chain of relative poses from `start`.
pub fn dead_reckon(start: Pose, steps: &[Pose]) -> Vec<Pose> {
    let mut out = Vec::with_capacity(steps.len() + 1);
    out.push(start);
    for step in steps {
        let next = out.last().expect("non-empty").compose(step);
        out.push(next);
    }
    out
}

pub fn generate_two_session(scene: &Scene, spec: &TwoSessionSpec) -> Result<TwoSessionData, SynthError> {
    if spec.path1.is_empty() || spec.path2.is_empty() {
        return Err(SynthError::InvalidDimensions("empty path".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let odometry = |path: &[Pose], rng: &mut ChaCha8Rng| -> Vec<Pose> {
        path.windows(2)
            .map(|w| spec.odometry_noise.perturb(&w[0].between(&w[1]), rng))
            .collect()
    };
    let odometry1 = odometry(&spec.path1, &mut rng);
    let odometry2 = odometry(&spec.path2, &mut rng);

    let start_local = spec.session2_origin.between(&spec.path2[0]);
    let trajectory2_local = dead_reckon(start_local, &odometry2);

    let m = spec.path2.len();
    let mut loops = Vec::new();
    for k in 0..spec.loop_count.min(m) {
        let j = ((k as f64 + 0.5) * m as f64 / spec.loop_count as f64) as usize;
        let target = spec.path2[j].translation;
        let i = spec
            .path1
            .iter()
            .enumerate()
            .min_by(|a, b| {
                let da = (a.1.translation - target).norm_squared();
                let db = (b.1.translation - target).norm_squared();
                da.total_cmp(&db)
            })
            .map(|(i, _)| i)
            .expect("non-empty path");
        let measurement = spec.loop_noise.perturb(&spec.path1[i].between(&spec.path2[j]), &mut rng);
        loops.push(LoopPair {
            session1_index: i,
            session2_index: j,
            measurement,
        });
    }

    let (scans1, scans2) = match &spec.scans {
        Some(scan) => {
            let second = ScanSpec { seed: scan.seed.wrapping_add(1), ..*scan };
            (
                simulate_sequence(scene, &spec.path1, scan, 0.1)?,
                simulate_sequence(scene, &spec.path2, &second, 0.1)?,
            )
        }
        None => (Vec::new(), Vec::new()),
    };

    Ok(TwoSessionData {
        truth1: spec.path1.clone(),
        truth2: spec.path2.clone(),
        session2_origin: spec.session2_origin,
        odometry1,
        odometry2,
        trajectory2_local,
        loops,
        scans1,
        scans2,
    })
}
