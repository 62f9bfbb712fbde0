//! Streaming keyframe selection.
//!
//! Every incoming frame is moved into the map frame, staged against the
//! current voxel map, and scored by the aggregated 2-Wasserstein distance
//! between the touched voxels before and after the update. A frame whose
//! score exceeds `tau` is a keyframe. The map then absorbs the stage according
//! to [`CommitPolicy`], and voxels beyond `radius` of the sensor are dropped.

use std::time::Instant;

use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::Pose;
use crate::voxel_map::{Estimator, GmmMap, VoxelMapError, DEFAULT_VOXEL_SIZE};
use crate::wasserstein::{map_dissimilarity, AggregationPolicy, CompareOptions, WassersteinError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KeyframeError {
    #[error("invalid selector config: {0}")]
    InvalidConfig(String),
    #[error("empty frame")]
    EmptyFrame,
    #[error("selector already bootstrapped")]
    AlreadyBootstrapped,
    #[error("selector has no map yet; bootstrap first")]
    NotBootstrapped,
    #[error("pose is not finite")]
    NonFinitePose,
    #[error(transparent)]
    Map(#[from] VoxelMapError),
    #[error(transparent)]
    Distance(#[from] WassersteinError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CommitPolicy {
    /// Only keyframes are merged into the map.
    #[default]
    KeyframesOnly,
    /// Every scored frame is merged.
    Always,
}

impl std::str::FromStr for CommitPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "keyframes" => Ok(Self::KeyframesOnly),
            "always" => Ok(Self::Always),
            other => Err(format!("unknown commit policy '{other}' (keyframes|always)")),
        }
    }
}

impl std::fmt::Display for CommitPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::KeyframesOnly => "keyframes",
            Self::Always => "always",
        })
    }
}

/// Decision for frames that share no comparable voxel with the map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoComparablePolicy {
    #[default]
    Keyframe,
    NonKeyframe,
}

impl std::str::FromStr for NoComparablePolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "keyframe" => Ok(Self::Keyframe),
            "non-keyframe" => Ok(Self::NonKeyframe),
            other => Err(format!("unknown no-comparable policy '{other}' (keyframe|non-keyframe)")),
        }
    }
}

impl std::fmt::Display for NoComparablePolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Keyframe => "keyframe",
            Self::NonKeyframe => "non-keyframe",
        })
    }
}

pub const DEFAULT_TAU: f64 = 0.02;
pub const DEFAULT_RADIUS: f64 = 100.0;
pub const DEFAULT_MIN_POINTS: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectorConfig {
    /// Keyframe threshold on the aggregated distance, meters.
    pub tau: f64,
    pub voxel_size: f64,
    /// Local map radius around the current pose, meters.
    pub radius: f64,
    pub estimator: Estimator,
    pub min_points: u64,
    pub aggregation: AggregationPolicy,
    pub commit_policy: CommitPolicy,
    pub no_comparable_policy: NoComparablePolicy,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            voxel_size: DEFAULT_VOXEL_SIZE,
            radius: DEFAULT_RADIUS,
            estimator: Estimator::Sample,
            min_points: DEFAULT_MIN_POINTS,
            aggregation: AggregationPolicy::AffectedMean,
            commit_policy: CommitPolicy::KeyframesOnly,
            no_comparable_policy: NoComparablePolicy::Keyframe,
        }
    }
}

impl SelectorConfig {
    pub fn validate(&self) -> Result<(), KeyframeError> {
        let bad = |msg: String| Err(KeyframeError::InvalidConfig(msg));
        if !(self.tau >= 0.0) {
            return bad(format!("tau must be >= 0, got {}", self.tau));
        }
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return bad(format!("voxel size must be > 0, got {}", self.voxel_size));
        }
        if !(self.radius > 0.0) {
            return bad(format!("radius must be > 0, got {}", self.radius));
        }
        if self.min_points < self.estimator.min_points() {
            return bad(format!(
                "min_points must be >= {} for the {} estimator",
                self.estimator.min_points(),
                self.estimator
            ));
        }
        Ok(())
    }

    fn compare_options(&self) -> CompareOptions {
        CompareOptions {
            estimator: self.estimator,
            min_points: self.min_points,
            policy: self.aggregation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecisionKind {
    /// First frame; builds the initial map.
    Bootstrap,
    /// Thresholded score.
    Scored,
    /// No voxel could be compared; resolved by [`NoComparablePolicy`].
    NoComparable,
}

/// Wall-clock breakdown of one frame, milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StageTimings {
    pub transform: f64,
    pub stage: f64,
    pub distance: f64,
    pub commit: f64,
    pub prune: f64,
}

impl StageTimings {
    pub fn total(&self) -> f64 {
        self.transform + self.stage + self.distance + self.commit + self.prune
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameDecision {
    pub frame_index: usize,
    pub timestamp: f64,
    pub pose: Pose,
    /// Aggregated distance; `+∞` for the bootstrap frame, `NaN` when nothing
    /// was comparable.
    pub d_w: f64,
    pub keyframe: bool,
    pub kind: DecisionKind,
    pub affected: usize,
    pub new: usize,
    pub skipped: usize,
    /// Points dropped for being non-finite.
    pub rejected_points: u64,
    pub voxels_after: usize,
    pub elapsed_ms: f64,
    pub timings: StageTimings,
}

/// Threshold rule shared by live selection and replay.
pub fn decide(kind: DecisionKind, d_w: f64, tau: f64, policy: NoComparablePolicy) -> bool {
    match kind {
        DecisionKind::Bootstrap => true,
        DecisionKind::NoComparable => policy == NoComparablePolicy::Keyframe,
        DecisionKind::Scored => d_w > tau,
    }
}

/// Re-thresholds recorded decisions at a different `tau` without touching
/// the map; commits are not re-simulated.
pub fn replay(decisions: &[FrameDecision], tau: f64, policy: NoComparablePolicy) -> Vec<bool> {
    decisions
        .iter()
        .map(|d| decide(d.kind, d.d_w, tau, policy))
        .collect()
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Single-owner selector state.
#[derive(Debug, Clone)]
pub struct KeyframeSelector {
    config: SelectorConfig,
    map: Option<GmmMap>,
    next_index: usize,
}

impl KeyframeSelector {
    pub fn new(config: SelectorConfig) -> Result<Self, KeyframeError> {
        config.validate()?;
        Ok(Self {
            config,
            map: None,
            next_index: 0,
        })
    }

    pub fn config(&self) -> &SelectorConfig {
        &self.config
    }

    pub fn set_tau(&mut self, tau: f64) -> Result<(), KeyframeError> {
        let mut next = self.config;
        next.tau = tau;
        next.validate()?;
        self.config = next;
        Ok(())
    }

    pub fn map(&self) -> Option<&GmmMap> {
        self.map.as_ref()
    }

    pub fn is_bootstrapped(&self) -> bool {
        self.map.is_some()
    }

    fn transform(points: &[Vector3<f64>], pose: &Pose) -> Vec<Vector3<f64>> {
        points.iter().map(|p| pose.transform_point(p)).collect()
    }

    /// Builds the initial map from the first frame; always a keyframe.
    pub fn bootstrap(
        &mut self,
        points: &[Vector3<f64>],
        pose: &Pose,
        timestamp: f64,
    ) -> Result<FrameDecision, KeyframeError> {
        if self.map.is_some() {
            return Err(KeyframeError::AlreadyBootstrapped);
        }
        if !pose.is_finite() {
            return Err(KeyframeError::NonFinitePose);
        }
        let start = Instant::now();
        let mut timings = StageTimings::default();

        let t = Instant::now();
        let world = Self::transform(points, pose);
        timings.transform = ms_since(t);

        let t = Instant::now();
        let mut map = GmmMap::new(self.config.voxel_size)?;
        let stage = map.stage_frame(&world);
        timings.stage = ms_since(t);
        if stage.is_empty() {
            return Err(KeyframeError::EmptyFrame);
        }
        let rejected = stage.rejected_points();

        let t = Instant::now();
        map.commit(stage)?;
        timings.commit = ms_since(t);

        let t = Instant::now();
        map.prune_outside(&pose.translation, self.config.radius)?;
        timings.prune = ms_since(t);

        let decision = FrameDecision {
            frame_index: self.next_index,
            timestamp,
            pose: *pose,
            d_w: f64::INFINITY,
            keyframe: true,
            kind: DecisionKind::Bootstrap,
            affected: 0,
            new: map.len(),
            skipped: 0,
            rejected_points: rejected,
            voxels_after: map.len(),
            elapsed_ms: ms_since(start),
            timings,
        };
        self.map = Some(map);
        self.next_index += 1;
        Ok(decision)
    }

    /// Scores one frame against the current map and applies the commit and
    /// prune policy.
    pub fn process_frame(
        &mut self,
        points: &[Vector3<f64>],
        pose: &Pose,
        timestamp: f64,
    ) -> Result<FrameDecision, KeyframeError> {
        if !pose.is_finite() {
            return Err(KeyframeError::NonFinitePose);
        }
        let config = self.config;
        let map = self.map.as_mut().ok_or(KeyframeError::NotBootstrapped)?;
        let start = Instant::now();
        let mut timings = StageTimings::default();

        let t = Instant::now();
        let world = Self::transform(points, pose);
        timings.transform = ms_since(t);

        let t = Instant::now();
        let stage = map.stage_frame(&world);
        timings.stage = ms_since(t);

        let t = Instant::now();
        let scored = map_dissimilarity(map, &stage, &config.compare_options());
        timings.distance = ms_since(t);

        let (kind, d_w, affected, new, skipped) = match scored {
            Ok(r) => (DecisionKind::Scored, r.d_w, r.affected_count, r.new_count, r.skipped_count),
            Err(WassersteinError::NoComparableVoxels {
                new_count,
                skipped_count,
            }) => (DecisionKind::NoComparable, f64::NAN, 0, new_count, skipped_count),
            Err(e) => return Err(e.into()),
        };
        let keyframe = decide(kind, d_w, config.tau, config.no_comparable_policy);
        let rejected = stage.rejected_points();

        let t = Instant::now();
        if keyframe || config.commit_policy == CommitPolicy::Always {
            map.commit(stage)?;
        }
        timings.commit = ms_since(t);

        let t = Instant::now();
        map.prune_outside(&pose.translation, config.radius)?;
        timings.prune = ms_since(t);

        let decision = FrameDecision {
            frame_index: self.next_index,
            timestamp,
            pose: *pose,
            d_w,
            keyframe,
            kind,
            affected,
            new,
            skipped,
            rejected_points: rejected,
            voxels_after: map.len(),
            elapsed_ms: ms_since(start),
            timings,
        };
        self.next_index += 1;
        Ok(decision)
    }

    /// Bootstraps on the first usable frame when needed, otherwise scores.
    pub fn push(
        &mut self,
        points: &[Vector3<f64>],
        pose: &Pose,
        timestamp: f64,
    ) -> Result<FrameDecision, KeyframeError> {
        if self.map.is_none() {
            self.bootstrap(points, pose, timestamp)
        } else {
            self.process_frame(points, pose, timestamp)
        }
    }

    /// Runs a whole ordered sequence. A failing frame is logged, recorded in
    /// [`SequenceRun::failures`], and skipped.
    pub fn run_sequence<'a, I>(&mut self, frames: I) -> SequenceRun
    where
        I: IntoIterator<Item = (&'a [Vector3<f64>], Pose, f64)>,
    {
        let mut run = SequenceRun::default();
        for (position, (points, pose, timestamp)) in frames.into_iter().enumerate() {
            self.next_index = position;
            match self.push(points, &pose, timestamp) {
                Ok(d) => run.decisions.push(d),
                Err(e) => {
                    log::warn!("frame {position} skipped: {e}");
                    run.failures.push((position, e));
                }
            }
        }
        run
    }
}

#[derive(Debug, Clone, Default)]
pub struct SequenceRun {
    pub decisions: Vec<FrameDecision>,
    pub failures: Vec<(usize, KeyframeError)>,
}

impl SequenceRun {
    pub fn keyframe_indices(&self) -> Vec<usize> {
        self.decisions
            .iter()
            .filter(|d| d.keyframe)
            .map(|d| d.frame_index)
            .collect()
    }
}
