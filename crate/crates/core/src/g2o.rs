//! Reader and writer for the g2o text format (`VERTEX_SE3:QUAT`,
//! `EDGE_SE3:QUAT`, `FIX`).
//!
//! Information matrices are stored row-major upper triangular, 21 entries,
//! in `(x, y, z, rx, ry, rz)` order, which is the crate's tangent ordering.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;
use nalgebra::{Quaternion, Vector3};

use crate::error::{Error, Result};
use crate::graph::{Edge, Information, PoseGraph, VariableId};
use crate::se3::Pose;

const VERTEX_TAG: &str = "VERTEX_SE3:QUAT";
const EDGE_TAG: &str = "EDGE_SE3:QUAT";
const FIX_TAG: &str = "FIX";

fn parse_err(line: usize, reason: impl Into<String>) -> Error {
    Error::Parse {
        line,
        reason: reason.into(),
    }
}

fn parse_id(tok: &str, line: usize) -> Result<VariableId> {
    tok.parse()
        .map_err(|_| parse_err(line, format!("invalid id '{tok}'")))
}

fn parse_numbers(toks: &[&str], line: usize) -> Result<Vec<f64>> {
    toks.iter()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| parse_err(line, format!("non-numeric field '{t}'")))
        })
        .collect()
}

fn parse_pose(v: &[f64], line: usize) -> Result<Pose> {
    let t = Vector3::new(v[0], v[1], v[2]);
    // g2o order is qx qy qz qw; nalgebra wants w first.
    let q = Quaternion::new(v[6], v[3], v[4], v[5]);
    let norm = q.norm();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(parse_err(line, "degenerate quaternion"));
    }
    if (norm - 1.0).abs() > 1e-3 {
        warn!("line {line}: quaternion norm {norm:.6} renormalized");
    }
    Ok(Pose::from_quaternion(t, q))
}

fn expand_information(upper: &[f64]) -> Information {
    let mut info = Information::zeros();
    let mut k = 0;
    for r in 0..6 {
        for c in r..6 {
            info[(r, c)] = upper[k];
            info[(c, r)] = upper[k];
            k += 1;
        }
    }
    info
}

pub fn parse_g2o<R: BufRead>(reader: R) -> Result<PoseGraph> {
    let mut graph = PoseGraph::new();
    let mut pending_edges: Vec<(usize, Edge)> = Vec::new();
    let mut fixes: Vec<(usize, VariableId)> = Vec::new();

    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = trimmed.split_whitespace().collect();
        match toks[0] {
            VERTEX_TAG => {
                if toks.len() != 9 {
                    return Err(parse_err(
                        lineno,
                        format!("{VERTEX_TAG} expects 8 fields, found {}", toks.len() - 1),
                    ));
                }
                let id = parse_id(toks[1], lineno)?;
                let v = parse_numbers(&toks[2..], lineno)?;
                let pose = parse_pose(&v, lineno)?;
                if graph.contains(id) {
                    return Err(parse_err(lineno, format!("duplicate vertex id {id}")));
                }
                graph.add_variable(id, pose)?;
            }
            EDGE_TAG => {
                if toks.len() != 31 {
                    return Err(parse_err(
                        lineno,
                        format!("{EDGE_TAG} expects 30 fields, found {}", toks.len() - 1),
                    ));
                }
                let from = parse_id(toks[1], lineno)?;
                let to = parse_id(toks[2], lineno)?;
                if from == to {
                    return Err(parse_err(lineno, format!("self-loop on vertex {from}")));
                }
                let v = parse_numbers(&toks[3..], lineno)?;
                let measurement = parse_pose(&v[..7], lineno)?;
                let information = expand_information(&v[7..]);
                pending_edges.push((lineno, Edge::new(from, to, measurement, information)));
            }
            FIX_TAG => {
                if toks.len() < 2 {
                    return Err(parse_err(lineno, "FIX expects at least one id"));
                }
                for t in &toks[1..] {
                    fixes.push((lineno, parse_id(t, lineno)?));
                }
            }
            other => warn!("line {lineno}: skipping unsupported tag '{other}'"),
        }
    }

    // Edges may precede their vertices in some files, so resolve them last.
    for (lineno, edge) in pending_edges {
        for id in [edge.from, edge.to] {
            if !graph.contains(id) {
                warn!("line {lineno}: edge references missing vertex {id}, created at identity");
                graph.add_variable(id, Pose::identity())?;
            }
        }
        graph.add_edge(edge)?;
    }
    for (lineno, id) in fixes {
        if !graph.contains(id) {
            warn!("line {lineno}: FIX references missing vertex {id}, ignored");
            continue;
        }
        graph.set_fixed(id, true);
    }
    for finding in graph.validate() {
        warn!("{finding}");
    }
    Ok(graph)
}

pub fn parse_g2o_str(text: &str) -> Result<PoseGraph> {
    parse_g2o(text.as_bytes())
}

pub fn read_g2o(path: impl AsRef<Path>) -> Result<PoseGraph> {
    let file = File::open(path)?;
    parse_g2o(BufReader::new(file))
}

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_pose(out: &mut impl Write, p: &Pose) -> std::io::Result<()> {
    let t = &p.translation;
    let mut q = p.quaternion().into_inner();
    if q.w < 0.0 {
        q = -q;
    }
    write!(
        out,
        "{} {} {} {} {} {} {}",
        num(t.x),
        num(t.y),
        num(t.z),
        num(q.i),
        num(q.j),
        num(q.k),
        num(q.w)
    )
}

/// Writes vertices in ascending id, then `FIX` lines, then edges in stored order.
pub fn write_g2o<W: Write>(graph: &PoseGraph, out: W) -> Result<()> {
    let mut out = BufWriter::new(out);
    for v in graph.variables() {
        write!(out, "{VERTEX_TAG} {} ", v.id)?;
        write_pose(&mut out, &v.estimate)?;
        writeln!(out)?;
    }
    for v in graph.variables().filter(|v| v.fixed) {
        writeln!(out, "{FIX_TAG} {}", v.id)?;
    }
    for e in graph.edges() {
        write!(out, "{EDGE_TAG} {} {} ", e.from, e.to)?;
        write_pose(&mut out, &e.measurement)?;
        for r in 0..6 {
            for c in r..6 {
                write!(out, " {}", num(e.information[(r, c)]))?;
            }
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

pub fn to_g2o_string(graph: &PoseGraph) -> String {
    let mut buf = Vec::new();
    write_g2o(graph, &mut buf).expect("writing to memory cannot fail");
    String::from_utf8(buf).expect("g2o output is ascii")
}

pub fn write_g2o_file(graph: &PoseGraph, path: impl AsRef<Path>) -> Result<()> {
    write_g2o(graph, File::create(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use crate::se3::{exp_se3, Tangent};

    const IDENTITY_UPPER: &str =
        "1 0 0 0 0 0 1 0 0 0 0 1 0 0 0 1 0 0 1 0 1";

    #[test]
    fn single_vertex_at_identity() {
        let g = parse_g2o_str("VERTEX_SE3:QUAT 0 0 0 0 0 0 0 1\n").unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.estimate(0), &Pose::identity());
        assert!(!g.is_fixed(0));
    }

    #[test]
    fn edge_with_identity_information() {
        let text = format!(
            "VERTEX_SE3:QUAT 0 0 0 0 0 0 0 1\nVERTEX_SE3:QUAT 1 1 0 0 0 0 0 1\n\
             EDGE_SE3:QUAT 0 1 1 0 0 0 0 0 1 {IDENTITY_UPPER}\n"
        );
        let g = parse_g2o_str(&text).unwrap();
        let e = &g.edges()[0];
        assert_eq!((e.from, e.to), (0, 1));
        assert_eq!(e.measurement.translation, Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(e.measurement.rotation, crate::se3::Rotation::identity());
        assert_eq!(e.information, Information::identity());
    }

    #[test]
    fn information_blocks_follow_translation_rotation_order() {
        // Distinct diagonal entries: translation 10, 11, 12; rotation 20, 21, 22.
        // Off-diagonal (0, 3) couples x with rx.
        let upper = "10 0 0 0.5 0 0 11 0 0 0 0 12 0 0 0 20 0 0 21 0 22";
        let text = format!(
            "VERTEX_SE3:QUAT 0 0 0 0 0 0 0 1\nVERTEX_SE3:QUAT 1 0 0 0 0 0 0 1\n\
             EDGE_SE3:QUAT 0 1 0 0 0 0 0 0 1 {upper}\n"
        );
        let info = parse_g2o_str(&text).unwrap().edges()[0].information;
        assert_eq!(
            [info[(0, 0)], info[(1, 1)], info[(2, 2)]],
            [10.0, 11.0, 12.0]
        );
        assert_eq!(
            [info[(3, 3)], info[(4, 4)], info[(5, 5)]],
            [20.0, 21.0, 22.0]
        );
        assert_eq!(info[(0, 3)], 0.5);
        assert_eq!(info[(3, 0)], 0.5);
    }

    #[test]
    fn comments_unknown_tags_and_fix() {
        let text = "# header\nVERTEX_SE2 0 1 2 3\nVERTEX_SE3:QUAT 4 0 0 0 0 0 0 1\nFIX 4\n";
        let g = parse_g2o_str(text).unwrap();
        assert_eq!(g.len(), 1);
        assert!(g.is_fixed(4));
    }

    #[test]
    fn missing_vertex_is_created() {
        let text = format!(
            "VERTEX_SE3:QUAT 0 0 0 0 0 0 0 1\nEDGE_SE3:QUAT 0 3 1 0 0 0 0 0 1 {IDENTITY_UPPER}\n"
        );
        let g = parse_g2o_str(&text).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.estimate(3), &Pose::identity());
    }

    #[test]
    fn quaternion_is_normalized() {
        let g = parse_g2o_str("VERTEX_SE3:QUAT 0 0 0 0 0 0 0 2\n").unwrap();
        assert_relative_eq!(g.estimate(0).rotation, crate::se3::Rotation::identity());
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let err = parse_g2o_str("\nVERTEX_SE3:QUAT 0 0 0 0\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = parse_g2o_str("VERTEX_SE3:QUAT 0 a 0 0 0 0 0 1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = parse_g2o_str(
            "VERTEX_SE3:QUAT 0 0 0 0 0 0 0 1\nVERTEX_SE3:QUAT 0 0 0 0 0 0 0 1\n",
        )
        .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = parse_g2o_str("VERTEX_SE3:QUAT -1 0 0 0 0 0 0 1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn empty_graph_writes_nothing() {
        assert_eq!(to_g2o_string(&PoseGraph::new()), "");
    }

    #[test]
    fn single_vertex_written_with_unit_qw() {
        let mut g = PoseGraph::new();
        g.add_variable(0, Pose::identity()).unwrap();
        let text = to_g2o_string(&g);
        assert_eq!(text.lines().count(), 1);
        let toks: Vec<&str> = text.split_whitespace().collect();
        assert_eq!(toks[0], VERTEX_TAG);
        assert_eq!(toks[8].parse::<f64>().unwrap(), 1.0);
    }

    #[test]
    fn write_then_parse_reproduces_graph() {
        let mut g = PoseGraph::new();
        for i in 0..4 {
            let xi = Tangent::new(i as f64, 0.5, -1.0, 0.1 * i as f64, 0.3, -0.2);
            g.add_variable(i, exp_se3(&xi)).unwrap();
        }
        g.set_fixed(0, true);
        let mut info = Information::identity() * 3.0;
        info[(1, 4)] = 0.25;
        info[(4, 1)] = 0.25;
        for i in 1..4 {
            let z = g.estimate(i - 1).between(g.estimate(i));
            g.add_edge(Edge::new(i - 1, i, z, info)).unwrap();
        }
        let back = parse_g2o_str(&to_g2o_string(&g)).unwrap();
        assert_eq!(back.len(), g.len());
        assert_eq!(back.fixed_ids(), g.fixed_ids());
        for (a, b) in g.variables().zip(back.variables()) {
            assert_eq!(a.id, b.id);
            assert_relative_eq!(
                a.estimate.to_homogeneous(),
                b.estimate.to_homogeneous(),
                epsilon = 1e-9
            );
        }
        for (a, b) in g.edges().iter().zip(back.edges()) {
            assert_eq!((a.from, a.to), (b.from, b.to));
            assert_relative_eq!(a.information, b.information, epsilon = 1e-12);
        }
    }
}
