//! TUM trajectory text: `timestamp tx ty tz qx qy qz qw` per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::Vector3;

use super::IoError;
use crate::geometry::{Pose, Rotation};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryEntry {
    pub timestamp: f64,
    pub pose: Pose,
}

const QUAT_WARN: f64 = 1e-3;

fn err(line: usize, message: impl Into<String>) -> IoError {
    IoError::Tum {
        line,
        message: message.into(),
    }
}

/// Parses a trajectory; timestamps must increase strictly. Quaternions are
/// normalized, with a warning when the norm is off by more than 1e-3.
pub fn parse_tum<R: BufRead>(reader: R) -> Result<Vec<TrajectoryEntry>, IoError> {
    let mut entries: Vec<TrajectoryEntry> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let number = i + 1;
        let line = line.map_err(|e| err(number, e.to_string()))?;
        let text = line.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = text.split_whitespace().collect();
        if cols.len() != 8 {
            return Err(err(number, format!("expected 8 columns, found {}", cols.len())));
        }
        let mut v = [0.0f64; 8];
        for (slot, col) in v.iter_mut().zip(&cols) {
            *slot = col
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| err(number, format!("bad number '{col}'")))?;
        }
        let [t, tx, ty, tz, qx, qy, qz, qw] = v;
        let norm = (qx * qx + qy * qy + qz * qz + qw * qw).sqrt();
        if (norm - 1.0).abs() > QUAT_WARN {
            log::warn!("line {number}: quaternion norm {norm} normalized");
        }
        let rotation = Rotation::from_wxyz(qw, qx, qy, qz)
            .ok_or_else(|| err(number, "quaternion has zero norm"))?;
        if let Some(prev) = entries.last() {
            if t <= prev.timestamp {
                return Err(err(
                    number,
                    format!("timestamp {t} does not increase past {}", prev.timestamp),
                ));
            }
        }
        entries.push(TrajectoryEntry {
            timestamp: t,
            pose: Pose::new(rotation, Vector3::new(tx, ty, tz)),
        });
    }
    Ok(entries)
}

pub fn read_tum(path: &Path) -> Result<Vec<TrajectoryEntry>, IoError> {
    let file = File::open(path).map_err(|e| IoError::io(path, e))?;
    parse_tum(BufReader::new(file))
}

/// Shortest round-trip float formatting, so reading back is exact.
pub fn write_tum_to<W: Write>(out: &mut W, entries: &[TrajectoryEntry]) -> std::io::Result<()> {
    writeln!(out, "# timestamp tx ty tz qx qy qz qw")?;
    for e in entries {
        let t = e.pose.translation;
        let [w, x, y, z] = e.pose.rotation.wxyz();
        writeln!(out, "{} {} {} {} {} {} {} {}", e.timestamp, t.x, t.y, t.z, x, y, z, w)?;
    }
    Ok(())
}

pub fn write_tum(path: &Path, entries: &[TrajectoryEntry]) -> Result<(), IoError> {
    let file = File::create(path).map_err(|e| IoError::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_tum_to(&mut out, entries)
        .and_then(|_| out.flush())
        .map_err(|e| IoError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_line_one_entry() {
        let entries = parse_tum("1.5 1 2 3 0 0 0 1\n".as_bytes()).unwrap();
        assert_eq!(entries.len(), 1);
        assert_eq!(entries[0].timestamp, 1.5);
        assert_eq!(entries[0].pose.translation, Vector3::new(1.0, 2.0, 3.0));
        assert!(entries[0].pose.rotation.angle() == 0.0);
    }

    #[test]
    fn comments_only_is_empty() {
        assert!(parse_tum("# header\n\n   # more\n".as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn wrong_column_count_names_line() {
        let e = parse_tum("# c\n0 0 0 0 0 0 0 1\n1 0 0 0 0 0 1\n".as_bytes()).unwrap_err();
        assert!(matches!(e, IoError::Tum { line: 3, .. }), "{e}");
    }

    #[test]
    fn non_monotonic_timestamps_rejected() {
        let e = parse_tum("1 0 0 0 0 0 0 1\n1 0 0 0 0 0 0 1\n".as_bytes()).unwrap_err();
        assert!(matches!(e, IoError::Tum { line: 2, .. }), "{e}");
        assert!(parse_tum("2 0 0 0 0 0 0 1\n1 0 0 0 0 0 0 1\n".as_bytes()).is_err());
    }

    #[test]
    fn quaternions_are_normalized() {
        let entries = parse_tum("0 0 0 0 0 0 0 2\n".as_bytes()).unwrap();
        let [w, ..] = entries[0].pose.rotation.wxyz();
        assert_eq!(w, 1.0);
        assert!(parse_tum("0 0 0 0 0 0 0 0\n".as_bytes()).is_err());
        assert!(parse_tum("0 0 0 nan 0 0 0 1\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn write_read_identity(
            rows in proptest::collection::vec(
                (0.001f64..10.0, -1e3f64..1e3, -1e3f64..1e3, -1e3f64..1e3,
                 -1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, 0.1f64..1.0),
                1..30)
        ) {
            let mut t = 0.0;
            let entries: Vec<_> = rows
                .into_iter()
                .map(|(dt, x, y, z, qx, qy, qz, qw)| {
                    t += dt;
                    TrajectoryEntry {
                        timestamp: t,
                        pose: Pose::new(Rotation::from_wxyz(qw, qx, qy, qz).unwrap(), Vector3::new(x, y, z)),
                    }
                })
                .collect();
            let mut buf = Vec::new();
            write_tum_to(&mut buf, &entries).unwrap();
            let back = parse_tum(buf.as_slice()).unwrap();
            prop_assert_eq!(back.len(), entries.len());
            for (a, b) in back.iter().zip(&entries) {
                prop_assert_eq!(a.timestamp, b.timestamp);
                prop_assert_eq!(a.pose.translation, b.pose.translation);
                let (qa, qb) = (a.pose.rotation.wxyz(), b.pose.rotation.wxyz());
                for k in 0..4 {
                    prop_assert!((qa[k] - qb[k]).abs() <= 2.0 * f64::EPSILON);
                }
            }
        }

        #[test]
        fn fuzzed_text_never_panics(text in "[0-9a-z .#\\-\\n\\te+]{0,300}") {
            let _ = parse_tum(text.as_bytes());
        }

        #[test]
        fn fuzzed_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..300)) {
            let _ = parse_tum(bytes.as_slice());
        }
    }
}
