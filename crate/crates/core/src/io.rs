//! Readers and writers for point clouds, trajectories and decision reports.
//! Graph text lives in [`crate::pose_graph::g2o`].

mod pcd;
mod tum;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::Pose;
use crate::keyframe::FrameDecision;

pub use pcd::{parse_pcd, read_cloud_dir, read_pcd, write_pcd, write_pcd_to, PcdEncoding};
pub use tum::{parse_tum, read_tum, write_tum, write_tum_to, TrajectoryEntry};

pub const DEFAULT_MAX_DT: f64 = 0.05;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("PCD parse error at byte {offset}: {message}")]
    Pcd { offset: usize, message: String },
    #[error("trajectory parse error at line {line}: {message}")]
    Tum { line: usize, message: String },
    #[error("no cloud/pose pairs within {max_dt} s ({clouds} clouds, {poses} poses)")]
    NoPairs { clouds: usize, poses: usize, max_dt: f64 },
    #[error("empty input: {0}")]
    Empty(String),
}

impl IoError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// One point-cloud frame. All points are finite; rows that were not are
/// counted in `dropped`.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudFrame {
    pub frame_index: usize,
    pub timestamp: f64,
    pub points: Vec<Vector3<f64>>,
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FramePair {
    pub frame: CloudFrame,
    pub pose: Pose,
    /// Pose timestamp minus cloud timestamp.
    pub dt: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pairing {
    pub pairs: Vec<FramePair>,
    pub dropped: usize,
}

/// Associates every cloud with the pose nearest in time, dropping clouds
/// whose nearest pose is more than `max_dt` away. Ties go to the earlier pose.
pub fn pair_frames(
    clouds: Vec<CloudFrame>,
    trajectory: &[TrajectoryEntry],
    max_dt: f64,
) -> Result<Pairing, IoError> {
    if clouds.is_empty() {
        return Err(IoError::Empty("no point-cloud frames".into()));
    }
    if trajectory.is_empty() {
        return Err(IoError::Empty("no trajectory entries".into()));
    }
    let (n_clouds, n_poses) = (clouds.len(), trajectory.len());
    let mut pairs = Vec::new();
    let mut dropped = 0;
    for frame in clouds {
        let t = frame.timestamp;
        let split = trajectory.partition_point(|e| e.timestamp < t);
        let candidates = [split.checked_sub(1), (split < n_poses).then_some(split)];
        let nearest = candidates
            .into_iter()
            .flatten()
            .min_by(|&a, &b| {
                let da = (trajectory[a].timestamp - t).abs();
                let db = (trajectory[b].timestamp - t).abs();
                da.total_cmp(&db).then(a.cmp(&b))
            })
            .expect("trajectory is non-empty");
        let dt = trajectory[nearest].timestamp - t;
        if dt.abs() <= max_dt {
            pairs.push(FramePair {
                pose: trajectory[nearest].pose,
                frame,
                dt,
            });
        } else {
            dropped += 1;
        }
    }
    if pairs.is_empty() {
        return Err(IoError::NoPairs {
            clouds: n_clouds,
            poses: n_poses,
            max_dt,
        });
    }
    if dropped > 0 {
        log::warn!("{dropped} of {n_clouds} clouds had no pose within {max_dt} s");
    }
    Ok(Pairing { pairs, dropped })
}

/// C-style `%.9g`.
pub fn fmt_g9(x: f64) -> String {
    fmt_g(x, 9)
}

/// C-style `%.{digits}g`: shortest of fixed or scientific, trailing zeros
/// stripped.
pub fn fmt_g(x: f64, digits: usize) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let p = digits.max(1);
    let sci = format!("{:.*e}", p - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -4 || exp >= p as i32 {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (p as i32 - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub const DECISIONS_HEADER: &str = "frame,timestamp,dw,keyframe,affected,new,skipped,ms";

pub fn write_decisions<W: Write>(out: &mut W, decisions: &[FrameDecision]) -> std::io::Result<()> {
    writeln!(out, "{DECISIONS_HEADER}")?;
    for d in decisions {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            d.frame_index,
            fmt_g9(d.timestamp),
            fmt_g9(d.d_w),
            u8::from(d.keyframe),
            d.affected,
            d.new,
            d.skipped,
            fmt_g9(d.elapsed_ms)
        )?;
    }
    Ok(())
}

pub fn write_decisions_csv(path: &Path, decisions: &[FrameDecision]) -> Result<(), IoError> {
    let file = File::create(path).map_err(|e| IoError::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_decisions(&mut out, decisions)
        .and_then(|_| out.flush())
        .map_err(|e| IoError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose;
    use crate::keyframe::{DecisionKind, StageTimings};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn entry(t: f64) -> TrajectoryEntry {
        TrajectoryEntry {
            timestamp: t,
            pose: Pose::from_translation(t, 0.0, 0.0),
        }
    }

    fn cloud(i: usize, t: f64) -> CloudFrame {
        CloudFrame {
            frame_index: i,
            timestamp: t,
            points: vec![Vector3::new(1.0, 2.0, 3.0)],
            dropped: 0,
        }
    }

    #[test]
    fn identical_timestamps_pair_exactly() {
        let traj: Vec<_> = (0..10).map(|i| entry(i as f64 * 0.1)).collect();
        let clouds: Vec<_> = (0..10).map(|i| cloud(i, i as f64 * 0.1)).collect();
        let pairing = pair_frames(clouds, &traj, DEFAULT_MAX_DT).unwrap();
        assert_eq!(pairing.pairs.len(), 10);
        assert_eq!(pairing.dropped, 0);
        assert!(pairing.pairs.iter().all(|p| p.dt == 0.0));
    }

    #[test]
    fn distant_pose_is_dropped() {
        let traj = vec![entry(9.0), entry(10.2)];
        let clouds = vec![cloud(0, 9.0), cloud(1, 10.0)];
        let pairing = pair_frames(clouds, &traj, 0.05).unwrap();
        assert_eq!(pairing.pairs.len(), 1);
        assert_eq!(pairing.dropped, 1);
        let err = pair_frames(vec![cloud(0, 10.0)], &[entry(10.2)], 0.05).unwrap_err();
        assert!(matches!(err, IoError::NoPairs { .. }));
        assert!(pair_frames(vec![], &traj, 0.05).is_err());
        assert!(pair_frames(vec![cloud(0, 1.0)], &[], 0.05).is_err());
    }

    #[test]
    fn jittered_pairing_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let traj: Vec<_> = (0..200)
            .map(|i| entry(i as f64 * 0.1 + rng.random_range(-0.02..0.02)))
            .collect();
        let clouds: Vec<_> = (0..180)
            .map(|i| cloud(i, i as f64 * 0.1 + 0.05 + rng.random_range(-0.04..0.04)))
            .collect();
        let pairing = pair_frames(clouds.clone(), &traj, 0.04).unwrap();
        let mut expected = Vec::new();
        for c in &clouds {
            let best = traj
                .iter()
                .min_by(|a, b| (a.timestamp - c.timestamp).abs().total_cmp(&(b.timestamp - c.timestamp).abs()))
                .unwrap();
            if (best.timestamp - c.timestamp).abs() <= 0.04 {
                expected.push((c.frame_index, best.timestamp));
            }
        }
        let got: Vec<_> = pairing
            .pairs
            .iter()
            .map(|p| (p.frame.frame_index, p.frame.timestamp + p.dt))
            .collect();
        assert_eq!(got.len(), expected.len());
        for ((gi, gt), (ei, et)) in got.iter().zip(&expected) {
            assert_eq!(gi, ei);
            assert!((gt - et).abs() < 1e-12);
        }
        assert_eq!(pairing.dropped, clouds.len() - expected.len());
    }

    #[test]
    fn g9_matches_printf() {
        let cases = [
            (0.0, "0"),
            (1.0, "1"),
            (-2.5, "-2.5"),
            (0.1, "0.1"),
            (1.0 / 3.0, "0.333333333"),
            (123456789.0, "123456789"),
            (1234567891.0, "1.23456789e+09"),
            (0.0001, "0.0001"),
            (0.00001234, "1.234e-05"),
            (f64::INFINITY, "inf"),
            (f64::NAN, "nan"),
            (99.9999999999, "100"),
        ];
        for (x, s) in cases {
            assert_eq!(fmt_g9(x), s, "{x}");
        }
    }

    fn decision(i: usize) -> FrameDecision {
        FrameDecision {
            frame_index: i,
            timestamp: 0.1 * i as f64,
            pose: Pose::identity(),
            d_w: 0.012345678912,
            keyframe: i % 2 == 0,
            kind: DecisionKind::Scored,
            affected: 10,
            new: 1,
            skipped: 2,
            rejected_points: 0,
            voxels_after: 20,
            elapsed_ms: 3.25,
            timings: StageTimings::default(),
        }
    }

    #[test]
    fn decisions_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        write_decisions_csv(&path, &[]).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), format!("{DECISIONS_HEADER}\n"));

        write_decisions_csv(&path, &[decision(3)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let cols: Vec<_> = lines[1].split(',').collect();
        assert_eq!(cols[0], "3");
        assert!((cols[1].parse::<f64>().unwrap() - 0.3).abs() < 1e-9);
        assert!((cols[2].parse::<f64>().unwrap() - 0.012345678912).abs() < 1e-10);
        assert_eq!(cols[3], "0");
        assert_eq!(&cols[4..7], &["10", "1", "2"]);
        assert_eq!(cols[7], "3.25");

        let again = dir.path().join("e.csv");
        write_decisions_csv(&again, &[decision(3)]).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }

    #[test]
    fn unwritable_path_is_an_error() {
        let err = write_decisions_csv(Path::new("/nonexistent-dir/x/d.csv"), &[]).unwrap_err();
        assert!(matches!(err, IoError::Io { .. }));
    }

    proptest! {
        #[test]
        fn g9_round_trips_to_nine_digits(x in -1e12f64..1e12) {
            let back: f64 = fmt_g9(x).parse().unwrap();
            let tol = x.abs() * 1e-8 + 1e-300;
            prop_assert!((back - x).abs() <= tol);
        }
    }
}
