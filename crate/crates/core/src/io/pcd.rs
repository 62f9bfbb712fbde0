//! PCD v0.7, `ascii` and little-endian `binary` data sections.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rayon::prelude::*;

use super::{CloudFrame, IoError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcdEncoding {
    Ascii,
    Binary,
}

struct PcdField {
    name: String,
    size: usize,
    kind: char,
    count: usize,
}

#[derive(Debug, Default)]
struct Header {
    fields: Vec<String>,
    sizes: Vec<usize>,
    kinds: Vec<char>,
    counts: Option<Vec<usize>>,
    width: Option<usize>,
    height: Option<usize>,
    points: Option<usize>,
}

fn err(offset: usize, message: impl Into<String>) -> IoError {
    IoError::Pcd {
        offset,
        message: message.into(),
    }
}

fn parse_list<T: std::str::FromStr>(values: &[&str], offset: usize, key: &str) -> Result<Vec<T>, IoError> {
    values
        .iter()
        .map(|v| v.parse::<T>().map_err(|_| err(offset, format!("bad {key} value '{v}'"))))
        .collect()
}

fn parse_one(values: &[&str], offset: usize, key: &str) -> Result<usize, IoError> {
    match values {
        [v] => v.parse().map_err(|_| err(offset, format!("bad {key} value '{v}'"))),
        _ => Err(err(offset, format!("{key} takes exactly one value"))),
    }
}

/// Bounds the row width so offset arithmetic cannot overflow.
const MAX_FIELD_COUNT: usize = 1 << 20;

/// Byte position of x, y, z inside a row, with their element sizes.
struct Layout {
    xyz: [(usize, usize); 3],
    /// Token index of x, y, z for ASCII rows.
    xyz_token: [usize; 3],
    tokens: usize,
    stride: usize,
}

impl Header {
    fn layout(self, offset: usize) -> Result<(Layout, usize), IoError> {
        let n = self.fields.len();
        if n == 0 {
            return Err(err(offset, "missing FIELDS"));
        }
        if n > MAX_FIELD_COUNT {
            return Err(err(offset, "too many FIELDS"));
        }
        let counts = self.counts.unwrap_or_else(|| vec![1; n]);
        if self.sizes.len() != n || self.kinds.len() != n || counts.len() != n {
            return Err(err(
                offset,
                format!(
                    "FIELDS/SIZE/TYPE/COUNT lengths differ: {}/{}/{}/{}",
                    n,
                    self.sizes.len(),
                    self.kinds.len(),
                    counts.len()
                ),
            ));
        }
        let mut fields = Vec::with_capacity(n);
        for i in 0..n {
            let (size, kind, count) = (self.sizes[i], self.kinds[i], counts[i]);
            if ![1, 2, 4, 8].contains(&size) {
                return Err(err(offset, format!("field '{}' has unsupported SIZE {size}", self.fields[i])));
            }
            if !['F', 'I', 'U'].contains(&kind) {
                return Err(err(offset, format!("field '{}' has unknown TYPE {kind}", self.fields[i])));
            }
            if count == 0 {
                return Err(err(offset, format!("field '{}' has COUNT 0", self.fields[i])));
            }
            if count > MAX_FIELD_COUNT {
                return Err(err(offset, format!("field '{}' has COUNT {count} above {MAX_FIELD_COUNT}", self.fields[i])));
            }
            fields.push(PcdField {
                name: self.fields[i].clone(),
                size,
                kind,
                count,
            });
        }
        let mut xyz = [(0, 0); 3];
        let mut xyz_token = [0; 3];
        for (slot, name) in ["x", "y", "z"].iter().enumerate() {
            let mut byte = 0usize;
            let mut token = 0usize;
            let mut found = false;
            for f in &fields {
                if f.name == *name {
                    if f.kind != 'F' || !(f.size == 4 || f.size == 8) || f.count != 1 {
                        return Err(err(offset, format!("field '{name}' must be a single F4 or F8")));
                    }
                    xyz[slot] = (byte, f.size);
                    xyz_token[slot] = token;
                    found = true;
                    break;
                }
                byte += f.size * f.count;
                token += f.count;
            }
            if !found {
                return Err(err(offset, format!("missing field '{name}'")));
            }
        }
        let stride = fields.iter().map(|f| f.size * f.count).sum();
        let tokens = fields.iter().map(|f| f.count).sum();

        let width = self.width.ok_or_else(|| err(offset, "missing WIDTH"))?;
        let height = self.height.ok_or_else(|| err(offset, "missing HEIGHT"))?;
        let area = width
            .checked_mul(height)
            .ok_or_else(|| err(offset, "WIDTH*HEIGHT overflows"))?;
        let points = self.points.unwrap_or(area);
        if points != area {
            return Err(err(
                offset,
                format!("POINTS={points} disagrees with WIDTH*HEIGHT={area}"),
            ));
        }
        Ok((
            Layout {
                xyz,
                xyz_token,
                tokens,
                stride,
            },
            points,
        ))
    }
}

/// Parses a PCD file image. Timestamp and frame index are left at zero.
pub fn parse_pcd(bytes: &[u8]) -> Result<CloudFrame, IoError> {
    let mut header = Header::default();
    let mut pos = 0usize;
    let (encoding, data_start, header_end) = loop {
        if pos >= bytes.len() {
            return Err(err(pos, "header ended before DATA"));
        }
        let line_end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .map_or(bytes.len(), |i| pos + i);
        let line = std::str::from_utf8(&bytes[pos..line_end])
            .map_err(|_| err(pos, "header line is not valid text"))?
            .trim();
        let line_start = pos;
        pos = line_end + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let key = parts.next().unwrap_or_default();
        let values: Vec<&str> = parts.collect();
        match key {
            "VERSION" => match values.as_slice() {
                ["0.7"] | [".7"] => {}
                _ => return Err(err(line_start, format!("unsupported VERSION '{}'", values.join(" ")))),
            },
            "FIELDS" => header.fields = values.iter().map(|s| s.to_string()).collect(),
            "SIZE" => header.sizes = parse_list(&values, line_start, key)?,
            "TYPE" => {
                header.kinds = values
                    .iter()
                    .map(|v| {
                        let mut c = v.chars();
                        match (c.next(), c.next()) {
                            (Some(k), None) => Ok(k),
                            _ => Err(err(line_start, format!("bad TYPE value '{v}'"))),
                        }
                    })
                    .collect::<Result<_, _>>()?
            }
            "COUNT" => header.counts = Some(parse_list(&values, line_start, key)?),
            "WIDTH" => header.width = Some(parse_one(&values, line_start, key)?),
            "HEIGHT" => header.height = Some(parse_one(&values, line_start, key)?),
            "POINTS" => header.points = Some(parse_one(&values, line_start, key)?),
            "VIEWPOINT" => {
                if values.len() != 7 {
                    return Err(err(line_start, "VIEWPOINT takes 7 values"));
                }
                parse_list::<f64>(&values, line_start, key)?;
            }
            "DATA" => {
                let encoding = match values.as_slice() {
                    ["ascii"] => PcdEncoding::Ascii,
                    ["binary"] => PcdEncoding::Binary,
                    [other] => return Err(err(line_start, format!("unsupported DATA mode '{other}'"))),
                    _ => return Err(err(line_start, "DATA takes exactly one value")),
                };
                break (encoding, pos.min(bytes.len()), line_start);
            }
            other => return Err(err(line_start, format!("unknown header keyword '{other}'"))),
        }
    };
    let (layout, declared) = header.layout(header_end)?;
    let body = &bytes[data_start..];
    match encoding {
        PcdEncoding::Binary => parse_binary(body, data_start, &layout, declared),
        PcdEncoding::Ascii => parse_ascii(body, data_start, &layout, declared),
    }
}

fn finish(raw: Vec<Vector3<f64>>) -> CloudFrame {
    let total = raw.len();
    let points: Vec<_> = raw.into_iter().filter(|p| p.iter().all(|v| v.is_finite())).collect();
    CloudFrame {
        frame_index: 0,
        timestamp: 0.0,
        dropped: total - points.len(),
        points,
    }
}

fn read_float(row: &[u8], (at, size): (usize, usize)) -> f64 {
    if size == 4 {
        f32::from_le_bytes(row[at..at + 4].try_into().expect("4 bytes")) as f64
    } else {
        f64::from_le_bytes(row[at..at + 8].try_into().expect("8 bytes"))
    }
}

fn parse_binary(body: &[u8], start: usize, layout: &Layout, declared: usize) -> Result<CloudFrame, IoError> {
    let needed = declared
        .checked_mul(layout.stride)
        .ok_or_else(|| err(start, "payload size overflows"))?;
    if body.len() < needed {
        let complete = body.len() / layout.stride.max(1);
        return Err(err(
            start + body.len(),
            format!(
                "truncated binary payload: POINTS={declared} needs {needed} bytes, found {} ({complete} complete points)",
                body.len()
            ),
        ));
    }
    if body.len() > needed {
        log::warn!("{} trailing bytes after binary payload ignored", body.len() - needed);
    }
    let raw = body[..needed]
        .chunks_exact(layout.stride)
        .map(|row| {
            Vector3::new(
                read_float(row, layout.xyz[0]),
                read_float(row, layout.xyz[1]),
                read_float(row, layout.xyz[2]),
            )
        })
        .collect();
    Ok(finish(raw))
}

fn parse_ascii(body: &[u8], start: usize, layout: &Layout, declared: usize) -> Result<CloudFrame, IoError> {
    let text = std::str::from_utf8(body).map_err(|e| err(start + e.valid_up_to(), "ASCII data is not valid text"))?;
    let mut raw = Vec::new();
    let mut offset = start;
    for line in text.split_inclusive('\n') {
        let line_start = offset;
        offset += line.len();
        let row = line.trim();
        if row.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = row.split_whitespace().collect();
        if tokens.len() != layout.tokens {
            return Err(err(
                line_start,
                format!("row {} has {} values, expected {}", raw.len(), tokens.len(), layout.tokens),
            ));
        }
        if raw.len() == declared {
            return Err(err(line_start, format!("header POINTS={declared} but more data rows follow")));
        }
        let mut p = Vector3::zeros();
        for (slot, &t) in layout.xyz_token.iter().enumerate() {
            let token = tokens[t];
            // F4 values go through f32 so ASCII and binary agree
            p[slot] = if layout.xyz[slot].1 == 4 {
                token.parse::<f32>().map(f64::from).ok()
            } else {
                token.parse::<f64>().ok()
            }
            .ok_or_else(|| err(line_start, format!("bad number '{token}' in row {}", raw.len())))?;
        }
        raw.push(p);
    }
    if raw.len() != declared {
        return Err(err(
            offset,
            format!("header POINTS={declared} but {} data rows", raw.len()),
        ));
    }
    Ok(finish(raw))
}

pub fn read_pcd(path: &Path) -> Result<CloudFrame, IoError> {
    let bytes = fs::read(path).map_err(|e| IoError::io(path, e))?;
    let mut frame = parse_pcd(&bytes).map_err(|e| match e {
        IoError::Pcd { offset, message } => IoError::Pcd {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })?;
    if let Some(t) = stem_timestamp(path) {
        frame.timestamp = t;
    }
    Ok(frame)
}

fn stem_timestamp(path: &Path) -> Option<f64> {
    path.file_stem()?.to_str()?.parse::<f64>().ok().filter(|t| t.is_finite())
}

/// Reads every `*.pcd` in `dir`. File stems must be timestamps in seconds;
/// frames come back in time order with `frame_index` set to that order.
pub fn read_cloud_dir(dir: &Path) -> Result<Vec<CloudFrame>, IoError> {
    let mut files: Vec<(f64, PathBuf)> = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| IoError::io(dir, e))? {
        let path = entry.map_err(|e| IoError::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("pcd") {
            continue;
        }
        let t = stem_timestamp(&path).ok_or_else(|| IoError::Pcd {
            offset: 0,
            message: format!("{}: file name is not a timestamp", path.display()),
        })?;
        files.push((t, path));
    }
    if files.is_empty() {
        return Err(IoError::Empty(format!("no .pcd files in {}", dir.display())));
    }
    files.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
    let mut frames = files
        .par_iter()
        .map(|(_, path)| read_pcd(path))
        .collect::<Result<Vec<_>, _>>()?;
    for (i, f) in frames.iter_mut().enumerate() {
        f.frame_index = i;
    }
    Ok(frames)
}

/// Writes `x y z` as F4; values are rounded to `f32`.
pub fn write_pcd_to<W: Write>(out: &mut W, points: &[Vector3<f64>], encoding: PcdEncoding) -> std::io::Result<()> {
    let n = points.len();
    write!(
        out,
        "# .PCD v0.7 - Point Cloud Data file format\nVERSION 0.7\nFIELDS x y z\nSIZE 4 4 4\nTYPE F F F\nCOUNT 1 1 1\nWIDTH {n}\nHEIGHT 1\nVIEWPOINT 0 0 0 1 0 0 0\nPOINTS {n}\n"
    )?;
    match encoding {
        PcdEncoding::Ascii => {
            writeln!(out, "DATA ascii")?;
            for p in points {
                writeln!(out, "{} {} {}", p.x as f32, p.y as f32, p.z as f32)?;
            }
        }
        PcdEncoding::Binary => {
            writeln!(out, "DATA binary")?;
            let mut buf = Vec::with_capacity(n * 12);
            for p in points {
                for v in p.iter() {
                    buf.extend_from_slice(&(*v as f32).to_le_bytes());
                }
            }
            out.write_all(&buf)?;
        }
    }
    Ok(())
}

pub fn write_pcd(path: &Path, points: &[Vector3<f64>], encoding: PcdEncoding) -> Result<(), IoError> {
    let file = fs::File::create(path).map_err(|e| IoError::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_pcd_to(&mut out, points, encoding)
        .and_then(|_| out.flush())
        .map_err(|e| IoError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const ASCII3: &str = "# .PCD v0.7\nVERSION 0.7\nFIELDS x y z intensity\nSIZE 4 4 4 4\nTYPE F F F F\nCOUNT 1 1 1 1\nWIDTH 3\nHEIGHT 1\nVIEWPOINT 0 0 0 1 0 0 0\nPOINTS 3\nDATA ascii\n1.5 -2 3.25 7\n0 0 0 1\n-0.5 100 1e-3 0\n";

    #[test]
    fn ascii_golden_file() {
        let frame = parse_pcd(ASCII3.as_bytes()).unwrap();
        assert_eq!(frame.points.len(), 3);
        assert_eq!(frame.points[0], Vector3::new(1.5, -2.0, 3.25));
        assert_eq!(frame.points[2], Vector3::new(-0.5, 100.0, 1e-3f32 as f64));
        assert_eq!(frame.dropped, 0);
    }

    #[test]
    fn short_ascii_names_discrepancy() {
        let text = ASCII3.replace("WIDTH 3", "WIDTH 4").replace("POINTS 3", "POINTS 4");
        let e = parse_pcd(text.as_bytes()).unwrap_err();
        assert!(e.to_string().contains("POINTS=4 but 3 data rows"), "{e}");
    }

    #[test]
    fn binary_round_trip_is_bit_identical() {
        let points: Vec<_> = (0..500)
            .map(|i| {
                let f = i as f64;
                Vector3::new((f * 0.37).sin() as f32 as f64, (f * 1e-3) as f32 as f64, -(f * 7.1) as f32 as f64)
            })
            .collect();
        let mut buf = Vec::new();
        write_pcd_to(&mut buf, &points, PcdEncoding::Binary).unwrap();
        let frame = parse_pcd(&buf).unwrap();
        assert_eq!(frame.points.len(), points.len());
        for (a, b) in frame.points.iter().zip(&points) {
            for k in 0..3 {
                assert_eq!(a[k].to_bits(), b[k].to_bits());
            }
        }
        let mut again = Vec::new();
        write_pcd_to(&mut again, &frame.points, PcdEncoding::Binary).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn ascii_round_trip_matches_binary() {
        let points = vec![Vector3::new(0.1, 0.2, 0.3), Vector3::new(-1e5, 3.0e-7, 42.0)];
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_pcd_to(&mut a, &points, PcdEncoding::Ascii).unwrap();
        write_pcd_to(&mut b, &points, PcdEncoding::Binary).unwrap();
        assert_eq!(parse_pcd(&a).unwrap().points, parse_pcd(&b).unwrap().points);
    }

    #[test]
    fn truncated_binary_reports_offset() {
        let points = vec![Vector3::new(1.0, 2.0, 3.0); 100];
        let mut buf = Vec::new();
        write_pcd_to(&mut buf, &points, PcdEncoding::Binary).unwrap();
        buf.truncate(buf.len() - 5);
        match parse_pcd(&buf).unwrap_err() {
            IoError::Pcd { offset, message } => {
                assert_eq!(offset, buf.len());
                assert!(message.contains("truncated"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn non_finite_rows_are_dropped_and_counted() {
        let text = ASCII3.replace("0 0 0 1", "nan 0 0 1");
        let frame = parse_pcd(text.as_bytes()).unwrap();
        assert_eq!(frame.points.len(), 2);
        assert_eq!(frame.dropped, 1);
    }

    #[test]
    fn f8_and_padding_fields() {
        let mut buf = b"VERSION .7\nFIELDS pad x y z\nSIZE 2 8 8 8\nTYPE U F F F\nCOUNT 3 1 1 1\nWIDTH 1\nHEIGHT 1\nPOINTS 1\nDATA binary\n".to_vec();
        buf.extend_from_slice(&[0u8; 6]);
        for v in [0.1f64, 0.2, 0.3] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let frame = parse_pcd(&buf).unwrap();
        assert_eq!(frame.points, vec![Vector3::new(0.1, 0.2, 0.3)]);
    }

    #[test]
    fn header_errors() {
        let compressed = ASCII3.replace("DATA ascii", "DATA binary_compressed");
        assert!(parse_pcd(compressed.as_bytes()).unwrap_err().to_string().contains("unsupported DATA mode"));
        let no_z = ASCII3.replace("FIELDS x y z intensity", "FIELDS x y w intensity");
        assert!(parse_pcd(no_z.as_bytes()).unwrap_err().to_string().contains("missing field 'z'"));
        let mismatch = ASCII3.replace("POINTS 3", "POINTS 5");
        assert!(parse_pcd(mismatch.as_bytes()).is_err());
        assert!(parse_pcd(b"").is_err());
        let e = parse_pcd(b"VERSION 0.7\nBOGUS 1\n").unwrap_err();
        assert!(matches!(e, IoError::Pcd { offset: 12, .. }), "{e}");
    }

    #[test]
    fn directory_is_read_in_time_order() {
        let dir = tempfile::tempdir().unwrap();
        for (name, x) in [("10.5", 2.0), ("2.25", 1.0), ("100", 3.0)] {
            write_pcd(&dir.path().join(format!("{name}.pcd")), &[Vector3::new(x, 0.0, 0.0)], PcdEncoding::Binary).unwrap();
        }
        std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let frames = read_cloud_dir(dir.path()).unwrap();
        let ts: Vec<_> = frames.iter().map(|f| f.timestamp).collect();
        assert_eq!(ts, vec![2.25, 10.5, 100.0]);
        assert_eq!(frames.iter().map(|f| f.frame_index).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(frames[0].points[0].x, 1.0);
    }

    proptest! {
        #[test]
        fn fuzzed_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..512)) {
            let _ = parse_pcd(&bytes);
        }

        #[test]
        fn mutated_headers_never_panic(pos in 0usize..ASCII3.len(), byte in any::<u8>(), cut in 0usize..ASCII3.len()) {
            let mut bytes = ASCII3.as_bytes().to_vec();
            bytes[pos] = byte;
            let _ = parse_pcd(&bytes);
            let _ = parse_pcd(&bytes[..cut]);
        }

        #[test]
        fn mutated_binary_never_panics(pos in 0usize..200, byte in any::<u8>(), cut in 0usize..200) {
            let mut buf = Vec::new();
            write_pcd_to(&mut buf, &[Vector3::new(1.0, 2.0, 3.0); 4], PcdEncoding::Binary).unwrap();
            let pos = pos % buf.len();
            buf[pos] = byte;
            let _ = parse_pcd(&buf);
            let _ = parse_pcd(&buf[..cut.min(buf.len())]);
        }
    }
}
