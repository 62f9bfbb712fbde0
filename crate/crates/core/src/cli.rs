//! Command-line front end. `run` parses arguments, executes one subcommand
//! and returns the process exit code: 0 success, 1 usage or I/O error,
//! 2 numerical failure.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;

use crate::bench::{run_bench, BenchError, BenchSpec};
use crate::geometry::{Pose, Rotation};
use crate::io::{
    fmt_g9, pair_frames, read_cloud_dir, read_tum, write_decisions_csv, write_pcd, write_tum, IoError, PcdEncoding,
    TrajectoryEntry, DEFAULT_MAX_DT,
};
use crate::keyframe::{
    CommitPolicy, DecisionKind, FrameDecision, KeyframeError, KeyframeSelector, NoComparablePolicy, SelectorConfig,
};
use crate::pose_graph::g2o::{read_edge_list, read_g2o, write_edge_list, write_g2o, EdgeRecord, G2oError};
use crate::pose_graph::{
    evaluate_ate, information_from_sigmas, merge_sessions, optimize, EdgeKind, GraphEdge, LoopMeasurement,
    MergeOptions, OptimizerParams, PoseGraph, PoseGraphError, RelativeMeasurement,
};
use crate::synth::{
    corridor_path, generate_scene, generate_two_session, loop_course_path, simulate_sequence, NoiseModel, ScanSpec,
    SceneDims, SceneKind, SynthError, TwoSessionSpec,
};
use crate::voxel_map::Estimator;
use crate::wasserstein::AggregationPolicy;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Io(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<G2oError> for CliError {
    fn from(e: G2oError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<KeyframeError> for CliError {
    fn from(e: KeyframeError) -> Self {
        match e {
            KeyframeError::InvalidConfig(m) => CliError::Usage(m),
            KeyframeError::Map(_) | KeyframeError::Distance(_) | KeyframeError::NonFinitePose => {
                CliError::Numerical(e.to_string())
            }
            other => CliError::Io(other.to_string()),
        }
    }
}

impl From<PoseGraphError> for CliError {
    fn from(e: PoseGraphError) -> Self {
        match e {
            PoseGraphError::GaugeUnderdetermined(_) | PoseGraphError::InvalidInformation => {
                CliError::Numerical(e.to_string())
            }
            other => CliError::Io(other.to_string()),
        }
    }
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::Invalid(m) => CliError::Usage(m),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Parser, Debug)]
#[command(name = "wskf", version, about = "Wasserstein keyframe selection and multi-session pose-graph merging")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Select keyframes from a directory of PCD frames and a TUM trajectory.
    Keyframes(KeyframesArgs),
    /// Score every frame with commits on each frame and suggest a threshold.
    Calibrate(CalibrateArgs),
    /// Merge a second session into a session-1 pose graph and optimize.
    Merge(MergeArgs),
    /// Write a seeded synthetic dataset.
    Synth(SynthArgs),
    /// Time the selector and compare map update strategies.
    Bench(BenchArgs),
}

/// Flags shared by every subcommand. Unset flags fall back to the config
/// file, then to built-in defaults.
#[derive(Args, Debug, Clone, Default)]
pub struct SharedArgs {
    /// Voxel edge length, meters [default: 4.0]
    #[arg(long)]
    pub voxel_size: Option<f64>,
    /// Keyframe threshold on the map distance, meters
    #[arg(long)]
    pub tau: Option<f64>,
    /// Local map radius, meters [default: 100.0]
    #[arg(long)]
    pub radius: Option<f64>,
    /// Covariance estimator: sample | population
    #[arg(long)]
    pub estimator: Option<Estimator>,
    /// Minimum points for a voxel to be compared [default: 5]
    #[arg(long)]
    pub min_points: Option<u64>,
    /// Aggregation over voxels: affected | all | mass
    #[arg(long)]
    pub agg: Option<AggregationPolicy>,
    /// Commit policy: keyframes | always
    #[arg(long)]
    pub commit: Option<CommitPolicy>,
    /// Decision when no voxel is comparable: keyframe | non-keyframe
    #[arg(long)]
    pub no_comparable: Option<NoComparablePolicy>,
    /// Worker threads; 0 uses all cores
    #[arg(long)]
    pub threads: Option<usize>,
    /// Random seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// key = value config file
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory [default: wskf_out]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Log progress at info level
    #[arg(short, long)]
    pub verbose: bool,
}

#[derive(Args, Debug)]
pub struct KeyframesArgs {
    #[command(flatten)]
    pub shared: SharedArgs,
    /// Directory of `<timestamp>.pcd` files
    #[arg(long)]
    pub clouds: PathBuf,
    /// TUM trajectory of sensor poses
    #[arg(long)]
    pub trajectory: PathBuf,
    /// Largest cloud/pose time offset, seconds [default: 0.05]
    #[arg(long)]
    pub max_dt: Option<f64>,
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub frames: KeyframesArgs,
    /// Quantile of the scores suggested as threshold
    #[arg(long, default_value_t = 0.9)]
    pub quantile: f64,
}

#[derive(Args, Debug)]
pub struct MergeArgs {
    #[command(flatten)]
    pub shared: SharedArgs,
    /// Session-1 graph (g2o text)
    #[arg(long)]
    pub graph1: PathBuf,
    /// Session-2 trajectory in its own frame (TUM)
    #[arg(long)]
    pub trajectory2: PathBuf,
    /// Session-2 odometry edges indexed by trajectory row; derived from the
    /// trajectory when absent
    #[arg(long)]
    pub odometry2: Option<PathBuf>,
    /// Inter-session loop edges `EDGE_SE3:QUAT <session-1 id> <session-2 row> ...`
    #[arg(long)]
    pub loops: Option<PathBuf>,
    /// Session-2 frame in session-1 world: `x y z qx qy qz qw`, or a file
    /// holding that line [default: identity]
    #[arg(long, allow_hyphen_values = true)]
    pub t_init: Option<String>,
    /// Also constrain the first session-2 node by a prior at T_init
    #[arg(long)]
    pub t_init_prior: bool,
    /// Rotation sigma for derived odometry and priors, radians
    #[arg(long, default_value_t = 0.1f64.to_radians())]
    pub sigma_rot: f64,
    /// Translation sigma for derived odometry and priors, meters
    #[arg(long, default_value_t = 0.01)]
    pub sigma_trans: f64,
    /// Ground-truth session-2 trajectory in session-1 world, for ATE
    #[arg(long)]
    pub truth2: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub max_iterations: usize,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub shared: SharedArgs,
    /// corridor | room | loop_course
    #[arg(long, default_value = "corridor")]
    pub scene: SceneKind,
    /// Frame count; defaults to the full corridor, one lap, or 60 in the room
    #[arg(long)]
    pub frames: Option<usize>,
    /// Distance between consecutive poses, meters
    #[arg(long, default_value_t = 0.5)]
    pub step: f64,
    /// Extra frames repeated at the final pose
    #[arg(long, default_value_t = 0)]
    pub stationary: usize,
    /// Surface sampling density, points per square meter
    #[arg(long, default_value_t = 25.0)]
    pub density: f64,
    #[arg(long, default_value_t = 20.0)]
    pub max_range: f64,
    #[arg(long, default_value_t = 20_000)]
    pub points_per_frame: usize,
    /// Per-point noise sigma, meters
    #[arg(long, default_value_t = 0.01)]
    pub noise: f64,
    /// Time between frames, seconds
    #[arg(long, default_value_t = 0.1)]
    pub dt: f64,
    /// Also write a two-session merge dataset on the loop course
    #[arg(long)]
    pub two_session: bool,
    /// Nodes per session
    #[arg(long, default_value_t = 200)]
    pub nodes: usize,
    #[arg(long, default_value_t = 10)]
    pub loops: usize,
    /// Odometry translation sigma, meters
    #[arg(long, default_value_t = 0.01)]
    pub odo_sigma_trans: f64,
    /// Odometry rotation sigma, degrees
    #[arg(long, default_value_t = 0.1)]
    pub odo_sigma_rot_deg: f64,
    /// Translation error of the written T_init, meters
    #[arg(long, default_value_t = 0.5)]
    pub init_error_trans: f64,
    /// Rotation error of the written T_init, degrees
    #[arg(long, default_value_t = 5.0)]
    pub init_error_rot_deg: f64,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub shared: SharedArgs,
    #[arg(long, default_value_t = 50_000)]
    pub points: usize,
    #[arg(long, default_value_t = 20)]
    pub frames: usize,
    /// Map size in voxels per axis
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [25, 25, 16])]
    pub grid: Vec<usize>,
}

/// Effective settings after merging defaults, config file and flags.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub selector: SelectorConfig,
    /// 0 means all cores.
    pub threads: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub max_dt: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            selector: SelectorConfig::default(),
            threads: 0,
            seed: 0,
            out: PathBuf::from("wskf_out"),
            max_dt: DEFAULT_MAX_DT,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| CliError::Usage(format!("config key '{key}': invalid value '{value}': {e}")))
}

impl RunConfig {
    /// Applies one `key = value` setting. Keys accept `-` or `_`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let key = key.replace('-', "_");
        let s = &mut self.selector;
        match key.as_str() {
            "voxel_size" => s.voxel_size = parse_value(&key, value)?,
            "tau" => s.tau = parse_value(&key, value)?,
            "radius" => s.radius = parse_value(&key, value)?,
            "estimator" => s.estimator = parse_value(&key, value)?,
            "min_points" => s.min_points = parse_value(&key, value)?,
            "agg" => s.aggregation = parse_value(&key, value)?,
            "commit" => s.commit_policy = parse_value(&key, value)?,
            "no_comparable" => s.no_comparable_policy = parse_value(&key, value)?,
            "threads" => self.threads = parse_value(&key, value)?,
            "seed" => self.seed = parse_value(&key, value)?,
            "out" => self.out = PathBuf::from(value),
            "max_dt" => self.max_dt = parse_value(&key, value)?,
            other => return Err(CliError::Usage(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!("{}:{}: expected key = value", path.display(), n + 1))
            })?;
            self.set(key.trim(), value.trim())
                .map_err(|e| CliError::Usage(format!("{}:{}: {e}", path.display(), n + 1)))?;
        }
        Ok(())
    }

    pub fn resolve(shared: &SharedArgs, max_dt: Option<f64>) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &shared.config {
            cfg.load_file(path)?;
        }
        let s = &mut cfg.selector;
        if let Some(v) = shared.voxel_size {
            s.voxel_size = v;
        }
        if let Some(v) = shared.tau {
            s.tau = v;
        }
        if let Some(v) = shared.radius {
            s.radius = v;
        }
        if let Some(v) = shared.estimator {
            s.estimator = v;
        }
        if let Some(v) = shared.min_points {
            s.min_points = v;
        }
        if let Some(v) = shared.agg {
            s.aggregation = v;
        }
        if let Some(v) = shared.commit {
            s.commit_policy = v;
        }
        if let Some(v) = shared.no_comparable {
            s.no_comparable_policy = v;
        }
        if let Some(v) = shared.threads {
            cfg.threads = v;
        }
        if let Some(v) = shared.seed {
            cfg.seed = v;
        }
        if let Some(v) = &shared.out {
            cfg.out = v.clone();
        }
        if let Some(v) = max_dt {
            cfg.max_dt = v;
        }
        if !(cfg.max_dt >= 0.0) {
            return Err(CliError::Usage(format!("max_dt must be >= 0, got {}", cfg.max_dt)));
        }
        cfg.selector.validate()?;
        Ok(cfg)
    }

    /// `key = value` lines loadable with `--config`. The output directory is
    /// left out so echoes of identical runs are identical.
    pub fn echo(&self) -> String {
        let s = &self.selector;
        let mut text = String::new();
        let _ = writeln!(text, "voxel_size = {}", s.voxel_size);
        let _ = writeln!(text, "tau = {}", s.tau);
        let _ = writeln!(text, "radius = {}", s.radius);
        let _ = writeln!(text, "estimator = {}", s.estimator);
        let _ = writeln!(text, "min_points = {}", s.min_points);
        let _ = writeln!(text, "agg = {}", s.aggregation);
        let _ = writeln!(text, "commit = {}", s.commit_policy);
        let _ = writeln!(text, "no_comparable = {}", s.no_comparable_policy);
        let _ = writeln!(text, "threads = {}", self.threads);
        let _ = writeln!(text, "seed = {}", self.seed);
        let _ = writeln!(text, "max_dt = {}", self.max_dt);
        text
    }

    fn prepare_out(&self) -> Result<(), CliError> {
        fs::create_dir_all(&self.out).map_err(|e| io_err(&self.out, e))?;
        write_text(&self.out.join("config.txt"), &self.echo())
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = (n - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Parses arguments and runs one command; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let verbose = match &cli.command {
        Command::Keyframes(a) => a.shared.verbose,
        Command::Calibrate(a) => a.frames.shared.verbose,
        Command::Merge(a) => a.shared.verbose,
        Command::Synth(a) => a.shared.verbose,
        Command::Bench(a) => a.shared.verbose,
    };
    let level = if verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(command: Command) -> Result<(), CliError> {
    let (cfg, bench_default_single) = match &command {
        Command::Keyframes(a) => (RunConfig::resolve(&a.shared, a.max_dt)?, false),
        Command::Calibrate(a) => (RunConfig::resolve(&a.frames.shared, a.frames.max_dt)?, false),
        Command::Merge(a) => (RunConfig::resolve(&a.shared, None)?, false),
        Command::Synth(a) => (RunConfig::resolve(&a.shared, None)?, false),
        Command::Bench(a) => (RunConfig::resolve(&a.shared, None)?, a.shared.threads.is_none()),
    };
    let mut cfg = cfg;
    if bench_default_single {
        cfg.threads = 1;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    pool.install(|| match command {
        Command::Keyframes(a) => cmd_keyframes(&a, &cfg),
        Command::Calibrate(a) => cmd_calibrate(&a, &cfg),
        Command::Merge(a) => cmd_merge(&a, &cfg),
        Command::Synth(a) => cmd_synth(&a, &cfg),
        Command::Bench(a) => cmd_bench(&a, &cfg),
    })
}

/// Reads, pairs and runs the selector; returns decisions with the input
/// frame indices and the number of paired frames.
fn select(args: &KeyframesArgs, selector: SelectorConfig, max_dt: f64) -> Result<(Vec<FrameDecision>, usize), CliError> {
    let clouds = read_cloud_dir(&args.clouds)?;
    let trajectory = read_tum(&args.trajectory)?;
    let pairing = pair_frames(clouds, &trajectory, max_dt)?;
    if pairing.dropped > 0 {
        eprintln!("warning: {} frames had no pose within {} s and were skipped", pairing.dropped, max_dt);
    }
    let paired = pairing.pairs.len();
    let mut selector = KeyframeSelector::new(selector)?;
    let run = selector.run_sequence(
        pairing
            .pairs
            .iter()
            .map(|p| (p.frame.points.as_slice(), p.pose, p.frame.timestamp)),
    );
    for (i, e) in &run.failures {
        eprintln!("warning: frame {} skipped: {e}", pairing.pairs[*i].frame.frame_index);
    }
    let mut decisions = run.decisions;
    for d in &mut decisions {
        d.frame_index = pairing.pairs[d.frame_index].frame.frame_index;
    }
    if decisions.is_empty() {
        return Err(CliError::Io("no frame could be processed".into()));
    }
    Ok((decisions, paired))
}

fn write_scores(path: &Path, decisions: &[FrameDecision], tau: f64) -> Result<(), CliError> {
    let mut text = String::from("frame,timestamp,dw,tau,keyframe,voxels\n");
    for d in decisions {
        let _ = writeln!(
            text,
            "{},{},{},{},{},{}",
            d.frame_index,
            fmt_g9(d.timestamp),
            fmt_g9(d.d_w),
            fmt_g9(tau),
            u8::from(d.keyframe),
            d.voxels_after
        );
    }
    write_text(path, &text)
}

fn cmd_keyframes(args: &KeyframesArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let (decisions, paired) = select(args, cfg.selector, cfg.max_dt)?;
    cfg.prepare_out()?;
    write_decisions_csv(&cfg.out.join("decisions.csv"), &decisions)?;
    write_scores(&cfg.out.join("scores.csv"), &decisions, cfg.selector.tau)?;
    let mut ids = String::from("# frame timestamp\n");
    let mut keyframes = Vec::new();
    for d in decisions.iter().filter(|d| d.keyframe) {
        let _ = writeln!(ids, "{} {}", d.frame_index, d.timestamp);
        keyframes.push(TrajectoryEntry {
            timestamp: d.timestamp,
            pose: d.pose,
        });
    }
    write_text(&cfg.out.join("keyframes.txt"), &ids)?;
    write_tum(&cfg.out.join("keyframes.tum"), &keyframes)?;
    println!(
        "{} frames paired, {} processed, {} keyframes; outputs in {}",
        paired,
        decisions.len(),
        keyframes.len(),
        cfg.out.display()
    );
    Ok(())
}

fn cmd_calibrate(args: &CalibrateArgs, cfg: &RunConfig) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&args.quantile) {
        return Err(CliError::Usage(format!("quantile must be in [0, 1], got {}", args.quantile)));
    }
    let selector = SelectorConfig {
        commit_policy: CommitPolicy::Always,
        ..cfg.selector
    };
    let (decisions, paired) = select(&args.frames, selector, cfg.max_dt)?;
    let mut scores: Vec<f64> = decisions
        .iter()
        .filter(|d| d.kind == DecisionKind::Scored && d.d_w.is_finite())
        .map(|d| d.d_w)
        .collect();
    if paired < 2 || scores.is_empty() {
        return Err(CliError::Usage(format!(
            "insufficient frames: {paired} paired, {} scored; need at least two frames with overlap",
            scores.len()
        )));
    }
    scores.sort_by(f64::total_cmp);
    let rows = [
        ("frames", paired as f64),
        ("scored", scores.len() as f64),
        ("min", scores[0]),
        ("p10", quantile(&scores, 0.10)),
        ("p25", quantile(&scores, 0.25)),
        ("median", quantile(&scores, 0.50)),
        ("p75", quantile(&scores, 0.75)),
        ("p90", quantile(&scores, 0.90)),
        ("p95", quantile(&scores, 0.95)),
        ("max", scores[scores.len() - 1]),
        ("suggested_tau", quantile(&scores, args.quantile)),
    ];
    let mut text = String::new();
    for (k, v) in rows {
        let _ = writeln!(text, "{k} = {}", fmt_g9(v));
    }
    cfg.prepare_out()?;
    write_text(&cfg.out.join("calibration.txt"), &text)?;
    write_scores(&cfg.out.join("scores.csv"), &decisions, f64::NAN)?;
    print!("{text}");
    Ok(())
}

fn parse_pose_line(text: &str) -> Result<Pose, CliError> {
    let values: Vec<f64> = text
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Usage(format!("T_init: {e}")))?;
    if values.len() != 7 || values.iter().any(|v| !v.is_finite()) {
        return Err(CliError::Usage(format!(
            "T_init needs 7 finite numbers 'x y z qx qy qz qw', got {}",
            values.len()
        )));
    }
    let rotation = Rotation::from_wxyz(values[6], values[3], values[4], values[5])
        .ok_or_else(|| CliError::Usage("T_init quaternion has zero norm".into()))?;
    Ok(Pose::new(rotation, Vector3::new(values[0], values[1], values[2])))
}

fn format_pose_line(pose: &Pose) -> String {
    let t = pose.translation;
    let [w, x, y, z] = pose.rotation.wxyz();
    format!("{} {} {} {} {} {} {}\n", t.x, t.y, t.z, x, y, z, w)
}

fn read_edges(path: &Path) -> Result<Vec<EdgeRecord>, CliError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    read_edge_list(BufReader::new(file)).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn cmd_merge(args: &MergeArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let file = fs::File::open(&args.graph1).map_err(|e| io_err(&args.graph1, e))?;
    let graph1 = read_g2o(BufReader::new(file)).map_err(|e| CliError::Io(format!("{}: {e}", args.graph1.display())))?;
    let trajectory2 = read_tum(&args.trajectory2)?;
    if trajectory2.is_empty() {
        return Err(CliError::Io(format!("{}: empty trajectory", args.trajectory2.display())));
    }
    let poses2: Vec<Pose> = trajectory2.iter().map(|e| e.pose).collect();
    if !(args.sigma_rot > 0.0 && args.sigma_trans > 0.0) {
        return Err(CliError::Usage("sigmas must be positive".into()));
    }
    let info = information_from_sigmas(args.sigma_rot, args.sigma_trans);

    let odometry: Vec<RelativeMeasurement> = match &args.odometry2 {
        Some(path) => read_edges(path)?
            .into_iter()
            .map(|r| RelativeMeasurement {
                from: r.from,
                to: r.to,
                measurement: r.measurement,
                information: r.information,
            })
            .collect(),
        None => {
            eprintln!("warning: no odometry file; using consecutive trajectory poses");
            poses2
                .windows(2)
                .enumerate()
                .map(|(i, w)| RelativeMeasurement {
                    from: i,
                    to: i + 1,
                    measurement: w[0].between(&w[1]),
                    information: info,
                })
                .collect()
        }
    };
    let loops: Vec<LoopMeasurement> = match &args.loops {
        Some(path) if path.exists() => read_edges(path)?
            .into_iter()
            .map(|r| LoopMeasurement {
                session1_id: r.from,
                session2_index: r.to,
                measurement: r.measurement,
                information: r.information,
            })
            .collect(),
        Some(path) => {
            eprintln!("warning: loop file {} not found; merging without loops", path.display());
            Vec::new()
        }
        None => {
            eprintln!("warning: no loop file given; merging without loops");
            Vec::new()
        }
    };
    let t_init = match &args.t_init {
        Some(arg) if Path::new(arg).is_file() => {
            let text = fs::read_to_string(arg).map_err(|e| io_err(Path::new(arg), e))?;
            let line = text
                .lines()
                .map(str::trim)
                .find(|l| !l.is_empty() && !l.starts_with('#'))
                .unwrap_or_default();
            parse_pose_line(line)?
        }
        Some(arg) => parse_pose_line(arg)?,
        None => Pose::identity(),
    };
    // without loops the second session would float free; T_init anchors it
    let use_prior = args.t_init_prior || loops.is_empty();
    if loops.is_empty() && !args.t_init_prior {
        eprintln!("warning: anchoring session 2 with a prior at T_init");
    }
    let options = MergeOptions {
        init_prior: use_prior.then_some(info),
        ..Default::default()
    };
    let merged = merge_sessions(&graph1, &poses2, &odometry, &loops, &t_init, &options)?;
    for w in &merged.warnings {
        eprintln!("warning: {w}");
    }
    let mut graph = merged.graph;
    let ids = merged.session2_ids;
    let collect = |g: &PoseGraph| -> Vec<Pose> { ids.iter().map(|id| *g.pose(*id).expect("merged node")).collect() };
    let before = collect(&graph);
    let params = OptimizerParams {
        max_iterations: args.max_iterations,
        ..Default::default()
    };
    let report = optimize(&mut graph, &params)?;
    let after = collect(&graph);

    cfg.prepare_out()?;
    let merged_path = cfg.out.join("merged.g2o");
    let mut buf = Vec::new();
    write_g2o(&graph, &mut buf).map_err(|e| io_err(&merged_path, e))?;
    fs::write(&merged_path, buf).map_err(|e| io_err(&merged_path, e))?;
    let entries: Vec<TrajectoryEntry> = trajectory2
        .iter()
        .zip(&after)
        .map(|(e, p)| TrajectoryEntry {
            timestamp: e.timestamp,
            pose: *p,
        })
        .collect();
    write_tum(&cfg.out.join("session2.tum"), &entries)?;

    let mut trace = String::from("iteration,cost,lambda,accepted\n");
    for r in &report.records {
        let _ = writeln!(
            trace,
            "{},{},{},{}",
            r.iteration,
            fmt_g9(r.cost),
            fmt_g9(r.lambda),
            u8::from(r.accepted)
        );
    }
    write_text(&cfg.out.join("report.csv"), &trace)?;

    let mut summary = String::new();
    let _ = writeln!(summary, "nodes = {}", graph.len());
    let _ = writeln!(summary, "edges = {}", graph.edges().len());
    let _ = writeln!(
        summary,
        "loops = {}",
        graph.edges().iter().filter(|e| e.kind == EdgeKind::Loop).count()
    );
    let _ = writeln!(summary, "iterations = {}", report.iterations);
    let _ = writeln!(summary, "initial_cost = {}", fmt_g9(report.initial_cost));
    let _ = writeln!(summary, "final_cost = {}", fmt_g9(report.final_cost));
    let _ = writeln!(summary, "stop = {}", report.reason);
    if let Some(path) = &args.truth2 {
        let truth: Vec<Pose> = read_tum(path)?.into_iter().map(|e| e.pose).collect();
        let ate0 = evaluate_ate(&before, &truth)?;
        let ate1 = evaluate_ate(&after, &truth)?;
        let _ = writeln!(summary, "ate_before = {}", fmt_g9(ate0));
        let _ = writeln!(summary, "ate_after = {}", fmt_g9(ate1));
    }
    write_text(&cfg.out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn timestamp(i: usize, dt: f64) -> f64 {
    // microsecond grid so file names and trajectory rows agree exactly
    (i as f64 * dt * 1e6).round() / 1e6
}

fn room_path(dims: SceneDims, count: usize) -> Vec<Pose> {
    let r = 0.25 * dims.length.min(dims.width);
    (0..count)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / count as f64;
            Pose::from_yaw(a + std::f64::consts::FRAC_PI_2, Vector3::new(r * a.cos(), r * a.sin(), 0.0))
        })
        .collect()
}

fn cmd_synth(args: &SynthArgs, cfg: &RunConfig) -> Result<(), CliError> {
    if !(args.step > 0.0 && args.dt > 0.0) {
        return Err(CliError::Usage("step and dt must be positive".into()));
    }
    let dims = SceneDims::default_for(args.scene);
    let scene = generate_scene(args.scene, dims, args.density)?;
    let mut poses = match args.scene {
        SceneKind::Corridor => {
            let mut p = corridor_path(dims.length, args.step);
            if let Some(n) = args.frames {
                p.truncate(n);
            }
            p
        }
        SceneKind::LoopCourse => {
            let lap = 2.0 * (dims.length + dims.width - 2.0 * dims.corridor_width);
            let n = args.frames.unwrap_or((lap / args.step).round() as usize);
            loop_course_path(dims, args.step, n, 0.0)
        }
        SceneKind::Room => room_path(dims, args.frames.unwrap_or(60)),
    };
    if let Some(&last) = poses.last() {
        poses.extend(std::iter::repeat(last).take(args.stationary));
    }
    let spec = ScanSpec {
        max_range: args.max_range,
        noise_sigma: args.noise,
        points_per_frame: args.points_per_frame,
        seed: cfg.seed,
    };
    let frames = simulate_sequence(&scene, &poses, &spec, args.dt)?;

    cfg.prepare_out()?;
    let clouds = cfg.out.join("clouds");
    fs::create_dir_all(&clouds).map_err(|e| io_err(&clouds, e))?;
    let mut entries = Vec::with_capacity(poses.len());
    for (i, (frame, pose)) in frames.iter().zip(&poses).enumerate() {
        let t = timestamp(i, args.dt);
        write_pcd(&clouds.join(format!("{t:.6}.pcd")), &frame.points, PcdEncoding::Binary)?;
        entries.push(TrajectoryEntry { timestamp: t, pose: *pose });
    }
    write_tum(&cfg.out.join("trajectory.tum"), &entries)?;
    println!("{} frames written to {}", frames.len(), clouds.display());

    if args.two_session {
        write_two_session(args, cfg)?;
    }
    Ok(())
}

fn write_two_session(args: &SynthArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let dims = SceneDims::loop_course();
    let scene = generate_scene(SceneKind::LoopCourse, dims, args.density)?;
    let noise = NoiseModel {
        sigma_trans: args.odo_sigma_trans,
        sigma_rot: args.odo_sigma_rot_deg.to_radians(),
    };
    let spec = TwoSessionSpec {
        path1: loop_course_path(dims, args.step, args.nodes, 0.0),
        path2: loop_course_path(dims, args.step, args.nodes, 7.25),
        session2_origin: Pose::from_yaw(0.3, Vector3::new(5.0, -3.0, 0.2)),
        odometry_noise: noise,
        loop_noise: noise,
        loop_count: args.loops,
        scans: None,
        seed: cfg.seed,
    };
    let data = generate_two_session(&scene, &spec)?;
    // information for noise-free data uses the default sigmas
    let info = information_from_sigmas(
        if noise.sigma_rot > 0.0 { noise.sigma_rot } else { 0.1f64.to_radians() },
        if noise.sigma_trans > 0.0 { noise.sigma_trans } else { 0.01 },
    );

    let dir = cfg.out.join("merge");
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let mut g1 = PoseGraph::new();
    for (i, p) in data.truth1.iter().enumerate() {
        g1.add_node(i, 1, *p)?;
    }
    g1.fix(0)?;
    for (i, z) in data.odometry1.iter().enumerate() {
        g1.add_edge(GraphEdge::between(EdgeKind::Odometry, i, i + 1, *z, info)?)?;
    }
    let mut buf = Vec::new();
    write_g2o(&g1, &mut buf).map_err(|e| io_err(&dir, e))?;
    fs::write(dir.join("session1.g2o"), buf).map_err(|e| io_err(&dir, e))?;

    let tum = |poses: &[Pose]| -> Vec<TrajectoryEntry> {
        poses
            .iter()
            .enumerate()
            .map(|(i, p)| TrajectoryEntry {
                timestamp: timestamp(i, args.dt),
                pose: *p,
            })
            .collect()
    };
    write_tum(&dir.join("session2.tum"), &tum(&data.trajectory2_local))?;
    write_tum(&dir.join("session2_truth.tum"), &tum(&data.truth2))?;

    let odometry: Vec<EdgeRecord> = data
        .odometry2
        .iter()
        .enumerate()
        .map(|(i, z)| EdgeRecord {
            from: i,
            to: i + 1,
            measurement: *z,
            information: info,
        })
        .collect();
    let loops: Vec<EdgeRecord> = data
        .loops
        .iter()
        .map(|l| EdgeRecord {
            from: l.session1_index,
            to: l.session2_index,
            measurement: l.measurement,
            information: info,
        })
        .collect();
    for (name, records) in [("odometry2.g2o", &odometry), ("loops.g2o", &loops)] {
        let path = dir.join(name);
        let mut buf = Vec::new();
        write_edge_list(records, &mut buf).map_err(|e| io_err(&path, e))?;
        fs::write(&path, buf).map_err(|e| io_err(&path, e))?;
    }

    let error = Pose::new(
        Rotation::from_axis_angle(&Vector3::new(0.3, -0.2, 1.0), args.init_error_rot_deg.to_radians()),
        Vector3::new(0.6, 0.8, 0.0) * args.init_error_trans,
    );
    let t_init = data.session2_origin.compose(&error);
    write_text(&dir.join("t_init.txt"), &format_pose_line(&t_init))?;
    write_text(&dir.join("t_init_truth.txt"), &format_pose_line(&data.session2_origin))?;
    println!("two-session dataset written to {}", dir.display());
    Ok(())
}

fn cmd_bench(args: &BenchArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let grid: [usize; 3] = args
        .grid
        .as_slice()
        .try_into()
        .map_err(|_| CliError::Usage("--grid takes three values".into()))?;
    let spec = BenchSpec {
        grid,
        points_per_frame: args.points,
        frames: args.frames,
        seed: cfg.seed,
        ..Default::default()
    };
    let report = run_bench(&spec, &cfg.selector)?;
    cfg.prepare_out()?;

    let mut csv = String::from("frame,ms\n");
    for (i, ms) in report.frame_ms.iter().enumerate() {
        let _ = writeln!(csv, "{i},{}", fmt_g9(*ms));
    }
    write_text(&cfg.out.join("bench_frames.csv"), &csv)?;

    let s = &report.mean_stages;
    let mut text = String::new();
    let _ = writeln!(text, "threads = {}", rayon::current_num_threads());
    let _ = writeln!(text, "frames = {}", report.frames);
    let _ = writeln!(text, "points_per_frame = {}", report.points_per_frame);
    let _ = writeln!(text, "initial_voxels = {}", report.initial_voxels);
    let _ = writeln!(text, "peak_voxels = {}", report.peak_voxels);
    let _ = writeln!(text, "median_frame_ms = {}", fmt_g9(report.median_ms));
    let _ = writeln!(text, "frames_per_second = {}", fmt_g9(report.frames_per_second));
    let _ = writeln!(text, "stage_transform_ms = {}", fmt_g9(s.transform));
    let _ = writeln!(text, "stage_stage_ms = {}", fmt_g9(s.stage));
    let _ = writeln!(text, "stage_distance_ms = {}", fmt_g9(s.distance));
    let _ = writeln!(text, "stage_commit_ms = {}", fmt_g9(s.commit));
    let _ = writeln!(text, "stage_prune_ms = {}", fmt_g9(s.prune));
    let _ = writeln!(text, "update_incremental_ms = {}", fmt_g9(report.incremental_ms));
    let _ = writeln!(text, "update_literal_ms = {}", fmt_g9(report.literal_ms));
    let _ = writeln!(text, "update_batch_ms = {}", fmt_g9(report.batch_ms));
    let _ = writeln!(text, "literal_max_cov_divergence = {}", fmt_g9(report.literal_divergence));
    let _ = writeln!(text, "batch_slower_than_incremental = {}", report.batch_ms > report.incremental_ms);
    let _ = writeln!(text, "median_under_100ms = {}", report.median_ms < 100.0);
    write_text(&cfg.out.join("bench.txt"), &text)?;
    print!("{text}");
    std::io::stdout().flush().map_err(|e| CliError::Io(e.to_string()))?;
    Ok(())
}
