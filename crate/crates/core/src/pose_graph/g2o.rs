//! g2o-style plain-text graph files.
//!
//! ```text
//! # SESSION <id> <session>
//! # FIX <id>
//! # EDGE_META <edge ordinal> <odometry|loop|prior> <none|huber δ>
//! VERTEX_SE3:QUAT id x y z qx qy qz qw
//! EDGE_SE3:QUAT i j x y z qx qy qz qw <21 upper-triangular information entries>
//! EDGE_SE3_PRIOR:QUAT i x y z qx qy qz qw <21 entries>
//! ```
//!
//! Information entries are row-major upper triangle in g2o's `[t, r]`
//! ordering and are permuted to and from the internal `[ω, ρ]` ordering.
//! Edges without an `EDGE_META` line get their kind inferred: a prior is a
//! prior, an edge across sessions or between non-consecutive ids is a loop,
//! anything else is odometry.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use nalgebra::{Matrix6, Vector3};
use thiserror::Error;

use super::{EdgeKind, Endpoints, GraphEdge, Kernel, NodeId, PoseGraph, PoseGraphError};
use crate::geometry::{Pose, Rotation};

#[derive(Debug, Error)]
pub enum G2oError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("graph: {0}")]
    Graph(#[from] PoseGraphError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn parse_err(line: usize, message: impl Into<String>) -> G2oError {
    G2oError::Parse {
        line,
        message: message.into(),
    }
}

/// Swaps the rotational and translational 3×3 blocks.
fn swap_blocks(m: &Matrix6<f64>) -> Matrix6<f64> {
    Matrix6::from_fn(|r, c| m[((r + 3) % 6, (c + 3) % 6)])
}

fn write_pose(out: &mut impl Write, pose: &Pose) -> std::io::Result<()> {
    let t = pose.translation;
    let [w, x, y, z] = pose.rotation.wxyz();
    write!(out, "{} {} {} {} {} {} {}", t.x, t.y, t.z, x, y, z, w)
}

fn write_information(out: &mut impl Write, info: &Matrix6<f64>) -> std::io::Result<()> {
    let g = swap_blocks(info);
    for r in 0..6 {
        for c in r..6 {
            write!(out, " {}", g[(r, c)])?;
        }
    }
    Ok(())
}

fn kind_name(kind: EdgeKind) -> &'static str {
    match kind {
        EdgeKind::Odometry => "odometry",
        EdgeKind::Loop => "loop",
        EdgeKind::Prior => "prior",
    }
}

pub fn write_g2o(graph: &PoseGraph, out: &mut impl Write) -> std::io::Result<()> {
    for node in graph.nodes() {
        writeln!(out, "# SESSION {} {}", node.id, node.session)?;
    }
    for id in graph.fixed() {
        writeln!(out, "# FIX {id}")?;
    }
    for (ordinal, edge) in graph.edges().iter().enumerate() {
        let kernel = match edge.kernel {
            Kernel::None => "none".to_string(),
            Kernel::Huber(d) => format!("huber {d}"),
        };
        writeln!(out, "# EDGE_META {ordinal} {} {kernel}", kind_name(edge.kind))?;
    }
    for node in graph.nodes() {
        write!(out, "VERTEX_SE3:QUAT {} ", node.id)?;
        write_pose(out, &node.pose)?;
        writeln!(out)?;
    }
    for edge in graph.edges() {
        match edge.endpoints {
            Endpoints::Binary(a, b) => write!(out, "EDGE_SE3:QUAT {a} {b} ")?,
            Endpoints::Unary(a) => write!(out, "EDGE_SE3_PRIOR:QUAT {a} ")?,
        }
        write_pose(out, &edge.measurement)?;
        write_information(out, edge.information())?;
        writeln!(out)?;
    }
    Ok(())
}

fn parse_f64s(line: usize, tokens: &[&str]) -> Result<Vec<f64>, G2oError> {
    tokens
        .iter()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| parse_err(line, format!("invalid number '{t}'")))
        })
        .collect()
}

fn parse_id(line: usize, token: &str) -> Result<NodeId, G2oError> {
    token
        .parse::<NodeId>()
        .map_err(|_| parse_err(line, format!("invalid node id '{token}'")))
}

fn pose_from(line: usize, v: &[f64]) -> Result<Pose, G2oError> {
    let rotation = Rotation::from_wxyz(v[6], v[3], v[4], v[5])
        .ok_or_else(|| parse_err(line, "degenerate quaternion"))?;
    Ok(Pose::new(rotation, Vector3::new(v[0], v[1], v[2])))
}

fn information_from(v: &[f64]) -> Matrix6<f64> {
    let mut g = Matrix6::zeros();
    let mut k = 0;
    for r in 0..6 {
        for c in r..6 {
            g[(r, c)] = v[k];
            g[(c, r)] = v[k];
            k += 1;
        }
    }
    swap_blocks(&g)
}

struct PendingEdge {
    line: usize,
    endpoints: Endpoints,
    measurement: Pose,
    information: Matrix6<f64>,
}

pub fn read_g2o(input: impl BufRead) -> Result<PoseGraph, G2oError> {
    let mut vertices: Vec<(usize, NodeId, Pose)> = Vec::new();
    let mut sessions: HashMap<NodeId, u8> = HashMap::new();
    let mut fixed: Vec<(usize, NodeId)> = Vec::new();
    let mut meta: HashMap<usize, (EdgeKind, Kernel)> = HashMap::new();
    let mut edges: Vec<PendingEdge> = Vec::new();

    for (n, text) in input.lines().enumerate() {
        let line = n + 1;
        let text = text?;
        let tokens: Vec<&str> = text.split_whitespace().collect();
        let Some(&head) = tokens.first() else { continue };
        if head == "#" || head.starts_with('#') {
            let body: Vec<&str> = if head == "#" {
                tokens[1..].to_vec()
            } else {
                std::iter::once(&head[1..]).chain(tokens[1..].iter().copied()).collect()
            };
            match body.as_slice() {
                ["SESSION", id, s] => {
                    let s = s
                        .parse::<u8>()
                        .map_err(|_| parse_err(line, format!("invalid session '{s}'")))?;
                    sessions.insert(parse_id(line, id)?, s);
                }
                ["FIX", id] => fixed.push((line, parse_id(line, id)?)),
                ["EDGE_META", ordinal, kind, kernel @ ..] => {
                    let ordinal = parse_id(line, ordinal)?;
                    let kind = match *kind {
                        "odometry" => EdgeKind::Odometry,
                        "loop" => EdgeKind::Loop,
                        "prior" => EdgeKind::Prior,
                        other => return Err(parse_err(line, format!("unknown edge kind '{other}'"))),
                    };
                    let kernel = match kernel {
                        ["none"] => Kernel::None,
                        ["huber", d] => Kernel::Huber(parse_f64s(line, &[d])?[0]),
                        _ => return Err(parse_err(line, "kernel must be 'none' or 'huber <delta>'")),
                    };
                    meta.insert(ordinal, (kind, kernel));
                }
                _ => {}
            }
            continue;
        }
        match head {
            "VERTEX_SE3:QUAT" => {
                if tokens.len() != 9 {
                    return Err(parse_err(line, format!("VERTEX_SE3:QUAT needs 8 values, got {}", tokens.len() - 1)));
                }
                let id = parse_id(line, tokens[1])?;
                let v = parse_f64s(line, &tokens[2..])?;
                vertices.push((line, id, pose_from(line, &v)?));
            }
            "EDGE_SE3:QUAT" => {
                if tokens.len() != 31 {
                    return Err(parse_err(line, format!("EDGE_SE3:QUAT needs 30 values, got {}", tokens.len() - 1)));
                }
                let (a, b) = (parse_id(line, tokens[1])?, parse_id(line, tokens[2])?);
                let v = parse_f64s(line, &tokens[3..])?;
                edges.push(PendingEdge {
                    line,
                    endpoints: Endpoints::Binary(a, b),
                    measurement: pose_from(line, &v[..7])?,
                    information: information_from(&v[7..]),
                });
            }
            "EDGE_SE3_PRIOR:QUAT" => {
                if tokens.len() != 30 {
                    return Err(parse_err(line, format!("EDGE_SE3_PRIOR:QUAT needs 29 values, got {}", tokens.len() - 1)));
                }
                let a = parse_id(line, tokens[1])?;
                let v = parse_f64s(line, &tokens[2..])?;
                edges.push(PendingEdge {
                    line,
                    endpoints: Endpoints::Unary(a),
                    measurement: pose_from(line, &v[..7])?,
                    information: information_from(&v[7..]),
                });
            }
            other => return Err(parse_err(line, format!("unknown record '{other}'"))),
        }
    }

    let mut graph = PoseGraph::new();
    for (line, id, pose) in vertices {
        let session = sessions.get(&id).copied().unwrap_or(1);
        graph
            .add_node(id, session, pose)
            .map_err(|e| parse_err(line, e.to_string()))?;
    }
    for (line, id) in fixed {
        graph.fix(id).map_err(|e| parse_err(line, e.to_string()))?;
    }
    for (ordinal, e) in edges.into_iter().enumerate() {
        let (kind, kernel) = match meta.get(&ordinal) {
            Some(&m) => m,
            None => {
                let kind = match e.endpoints {
                    Endpoints::Unary(_) => EdgeKind::Prior,
                    Endpoints::Binary(a, b) => {
                        let sa = graph.node(a).map(|n| n.session);
                        let sb = graph.node(b).map(|n| n.session);
                        if sa == sb && a.abs_diff(b) == 1 {
                            EdgeKind::Odometry
                        } else {
                            EdgeKind::Loop
                        }
                    }
                };
                (kind, Kernel::default_for(kind))
            }
        };
        let edge = GraphEdge::new(kind, e.endpoints, e.measurement, e.information, kernel)
            .map_err(|err| parse_err(e.line, err.to_string()))?;
        graph
            .add_edge(edge)
            .map_err(|err| parse_err(e.line, err.to_string()))?;
    }
    Ok(graph)
}

/// A bare `EDGE_SE3:QUAT` record whose endpoints are plain indices, used
/// for measurement lists that are not yet attached to a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeRecord {
    pub from: usize,
    pub to: usize,
    pub measurement: Pose,
    pub information: Matrix6<f64>,
}

pub fn write_edge_list(records: &[EdgeRecord], out: &mut impl Write) -> std::io::Result<()> {
    for r in records {
        write!(out, "EDGE_SE3:QUAT {} {} ", r.from, r.to)?;
        write_pose(out, &r.measurement)?;
        write_information(out, &r.information)?;
        writeln!(out)?;
    }
    Ok(())
}

/// Reads `EDGE_SE3:QUAT` lines; comments and blank lines are skipped and any
/// other record is an error.
pub fn read_edge_list(input: impl BufRead) -> Result<Vec<EdgeRecord>, G2oError> {
    let mut records = Vec::new();
    for (n, text) in input.lines().enumerate() {
        let line = n + 1;
        let text = text?;
        let tokens: Vec<&str> = text.split_whitespace().collect();
        let Some(&head) = tokens.first() else { continue };
        if head.starts_with('#') {
            continue;
        }
        if head != "EDGE_SE3:QUAT" {
            return Err(parse_err(line, format!("expected EDGE_SE3:QUAT, found '{head}'")));
        }
        if tokens.len() != 31 {
            return Err(parse_err(line, format!("EDGE_SE3:QUAT needs 30 values, got {}", tokens.len() - 1)));
        }
        let v = parse_f64s(line, &tokens[3..])?;
        records.push(EdgeRecord {
            from: parse_id(line, tokens[1])?,
            to: parse_id(line, tokens[2])?,
            measurement: pose_from(line, &v[..7])?,
            information: information_from(&v[7..]),
        });
    }
    Ok(records)
}
