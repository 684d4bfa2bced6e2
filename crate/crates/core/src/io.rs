//! File formats: JSON documents for tracks, models and run configs, a
//! compact binary track format, and CSV exports.
//!
//! JSON numbers are written in shortest round-trip form, so loading a saved
//! document reproduces every `f64` bit for bit.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::motion::{BasisSet, MotionBasis, MotionNode, MotionTree, NodeId, OrientedPoint};
use crate::optim::HistoryRow;
use crate::se3::{Quat, Vec3, SE3};
use crate::tracks::TrackSet;

pub const BINARY_MAGIC: &[u8; 8] = b"HIMORTRK";
const BINARY_HEADER: usize = 16;

#[derive(Deserialize)]
struct VersionProbe {
    format_version: Option<u32>,
}

/// Parses `text`, checking `format_version` before the full schema so that
/// documents from other versions report a version error.
fn from_versioned_str<T: DeserializeOwned>(text: &str) -> Result<T> {
    let probe: VersionProbe = serde_json::from_str(text)?;
    match probe.format_version {
        Some(FORMAT_VERSION) => Ok(serde_json::from_str(text)?),
        Some(found) => Err(Error::Version {
            found,
            expected: FORMAT_VERSION,
        }),
        None => Err(Error::parse("missing field `format_version`")),
    }
}

fn read_text(path: &Path) -> Result<String> {
    let mut s = String::new();
    File::open(path)?.read_to_string(&mut s)?;
    Ok(s)
}

fn write_json<T: Serialize>(path: &Path, value: &T, pretty: bool) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    if pretty {
        serde_json::to_writer_pretty(&mut w, value)?;
    } else {
        serde_json::to_writer(&mut w, value)?;
    }
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------- tracks

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrackDoc {
    format_version: u32,
    num_tracks: usize,
    num_frames: usize,
    positions: Vec<Vec<[f64; 3]>>,
    visibility: Vec<Vec<bool>>,
}

pub fn tracks_to_json(tracks: &TrackSet) -> Result<String> {
    let doc = TrackDoc {
        format_version: FORMAT_VERSION,
        num_tracks: tracks.num_tracks(),
        num_frames: tracks.frame_count(),
        positions: tracks
            .positions()
            .iter()
            .map(|p| p.iter().map(|v| v.to_array()).collect())
            .collect(),
        visibility: tracks.visibility().to_vec(),
    };
    Ok(serde_json::to_string(&doc)?)
}

pub fn tracks_from_json(text: &str) -> Result<TrackSet> {
    let doc: TrackDoc = from_versioned_str(text)?;
    if doc.positions.len() != doc.num_tracks || doc.positions.iter().any(|p| p.len() != doc.num_frames) {
        return Err(Error::ShapeMismatch(format!(
            "positions do not match the declared {} x {}",
            doc.num_tracks, doc.num_frames
        )));
    }
    let positions = doc
        .positions
        .into_iter()
        .map(|p| p.into_iter().map(Vec3::from).collect())
        .collect();
    TrackSet::new(positions, doc.visibility)
}

/// Binary layout: magic, `u32` N, `u32` T, then N*T*3 `f32` positions
/// (track-major) and N*T visibility bytes, all little-endian.
pub fn tracks_to_binary(tracks: &TrackSet) -> Vec<u8> {
    let (n, t) = (tracks.num_tracks(), tracks.frame_count());
    let mut out = Vec::with_capacity(BINARY_HEADER + n * t * 13);
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    for track in tracks.positions() {
        for p in track {
            for c in p.to_array() {
                out.extend_from_slice(&(c as f32).to_le_bytes());
            }
        }
    }
    for vis in tracks.visibility() {
        out.extend(vis.iter().map(|&v| v as u8));
    }
    out
}

pub fn tracks_from_binary(bytes: &[u8]) -> Result<TrackSet> {
    if bytes.len() < BINARY_HEADER || &bytes[..8] != BINARY_MAGIC {
        return Err(Error::parse("missing HIMORTRK header"));
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (n, t) = (word(8), word(12));
    let floats = n
        .checked_mul(t)
        .and_then(|nt| nt.checked_mul(3))
        .ok_or_else(|| Error::parse("track dimensions overflow"))?;
    let expected = BINARY_HEADER + floats * 4 + n * t;
    if bytes.len() != expected {
        return Err(Error::parse(format!(
            "binary track file is {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let f = |k: usize| {
        let o = BINARY_HEADER + 4 * k;
        f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as f64
    };
    let positions = (0..n)
        .map(|i| {
            (0..t)
                .map(|j| {
                    let k = 3 * (i * t + j);
                    Vec3::new(f(k), f(k + 1), f(k + 2))
                })
                .collect()
        })
        .collect();
    let vis_start = BINARY_HEADER + floats * 4;
    let visibility = (0..n)
        .map(|i| bytes[vis_start + i * t..vis_start + (i + 1) * t].iter().map(|&b| b != 0).collect())
        .collect();
    TrackSet::new(positions, visibility)
}

pub fn save_tracks(path: &Path, tracks: &TrackSet) -> Result<()> {
    let mut text = tracks_to_json(tracks)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn save_tracks_binary(path: &Path, tracks: &TrackSet) -> Result<()> {
    std::fs::write(path, tracks_to_binary(tracks))?;
    Ok(())
}

/// Loads either format, recognizing binary files by their magic.
pub fn load_tracks(path: &Path) -> Result<TrackSet> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(BINARY_MAGIC) {
        return tracks_from_binary(&bytes);
    }
    let text = String::from_utf8(bytes).map_err(|e| Error::parse(e.to_string()))?;
    tracks_from_json(&text)
}

// ---------------------------------------------------------------- models

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeDoc {
    id: u32,
    parent: Option<u32>,
    level: u32,
    position: [f64; 3],
    radius: f64,
    coefficients: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TransformDoc {
    q: [f64; 4],
    t: [f64; 3],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BasisSetDoc {
    owner: u32,
    bases: Vec<Vec<TransformDoc>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    format_version: u32,
    frame_count: usize,
    canonical_frame: usize,
    nodes: Vec<NodeDoc>,
    basis_sets: Vec<BasisSetDoc>,
}

fn model_doc(tree: &MotionTree) -> ModelDoc {
    ModelDoc {
        format_version: FORMAT_VERSION,
        frame_count: tree.frame_count(),
        canonical_frame: tree.canonical_frame(),
        nodes: tree
            .nodes()
            .iter()
            .map(|n| NodeDoc {
                id: n.id.0,
                parent: n.parent.map(|p| p.0),
                level: n.level,
                position: n.position.to_array(),
                radius: n.radius,
                coefficients: n.coefficients.clone(),
            })
            .collect(),
        basis_sets: tree
            .basis_sets()
            .map(|s| BasisSetDoc {
                owner: s.owner.0,
                bases: s
                    .bases
                    .iter()
                    .map(|b| {
                        b.transforms
                            .iter()
                            .map(|m| TransformDoc {
                                q: m.rotation.to_array(),
                                t: m.translation.to_array(),
                            })
                            .collect()
                    })
                    .collect(),
            })
            .collect(),
    }
}

pub fn model_to_json(tree: &MotionTree) -> Result<String> {
    Ok(serde_json::to_string_pretty(&model_doc(tree))?)
}

/// Stored rotations are used as written; a quaternion that is not unit
/// length to 1e-9 is rejected rather than silently renormalized.
pub fn model_from_json(text: &str) -> Result<MotionTree> {
    let doc: ModelDoc = from_versioned_str(text)?;
    let nodes = doc
        .nodes
        .into_iter()
        .map(|n| MotionNode {
            id: NodeId(n.id),
            parent: n.parent.map(NodeId),
            level: n.level,
            position: n.position.into(),
            radius: n.radius,
            coefficients: n.coefficients,
        })
        .collect();
    let mut sets = Vec::with_capacity(doc.basis_sets.len());
    for s in doc.basis_sets {
        let mut bases = Vec::with_capacity(s.bases.len());
        for b in s.bases {
            let mut transforms = Vec::with_capacity(b.len());
            for m in b {
                let q = Quat::new(m.q[0], m.q[1], m.q[2], m.q[3]);
                if !((q.norm() - 1.0).abs() <= 1e-9) {
                    return Err(Error::InvalidTree(format!(
                        "basis of node {} has a non-unit rotation",
                        s.owner
                    )));
                }
                transforms.push(SE3::from_unit(q, m.t.into()));
            }
            bases.push(MotionBasis { transforms });
        }
        sets.push(BasisSet {
            owner: NodeId(s.owner),
            bases,
        });
    }
    MotionTree::from_parts(doc.frame_count, doc.canonical_frame, nodes, sets)
}

pub fn save_model(path: &Path, tree: &MotionTree) -> Result<()> {
    write_json(path, &model_doc(tree), true)
}

pub fn load_model(path: &Path) -> Result<MotionTree> {
    model_from_json(&read_text(path)?)
}

// ---------------------------------------------------------------- configs

pub fn config_from_json(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = from_versioned_str(text)?;
    cfg.fit.validate()?;
    cfg.weights.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    config_from_json(&read_text(path)?)
}

pub fn save_config(path: &Path, config: &RunConfig) -> Result<()> {
    write_json(path, config, true)
}

// ---------------------------------------------------------------- points

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PointsDoc {
    format_version: u32,
    points: Vec<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    orientations: Option<Vec<[f64; 4]>>,
}

/// Canonical points to deform: `{format_version, points: [[x,y,z]],
/// orientations?: [[w,x,y,z]]}`.
pub fn points_from_json(text: &str) -> Result<Vec<OrientedPoint>> {
    let doc: PointsDoc = from_versioned_str(text)?;
    match doc.orientations {
        None => Ok(doc.points.into_iter().map(|p| OrientedPoint::at(p.into())).collect()),
        Some(q) if q.len() == doc.points.len() => Ok(doc
            .points
            .into_iter()
            .zip(q)
            .map(|(p, q)| OrientedPoint {
                position: p.into(),
                orientation: Quat::new(q[0], q[1], q[2], q[3]).normalize(),
            })
            .collect()),
        Some(q) => Err(Error::ShapeMismatch(format!(
            "{} points but {} orientations",
            doc.points.len(),
            q.len()
        ))),
    }
}

pub fn points_to_json(points: &[Vec3]) -> Result<String> {
    Ok(serde_json::to_string(&PointsDoc {
        format_version: FORMAT_VERSION,
        points: points.iter().map(|p| p.to_array()).collect(),
        orientations: None,
    })?)
}

pub fn save_points(path: &Path, points: &[Vec3]) -> Result<()> {
    let mut text = points_to_json(points)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_points(path: &Path) -> Result<Vec<OrientedPoint>> {
    points_from_json(&read_text(path)?)
}

// ---------------------------------------------------------------- exports

/// One row per (point, frame): `point_id,frame,x,y,z`.
pub fn write_trajectories_csv<W: Write>(writer: W, trajectories: &[Vec<Vec3>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["point_id", "frame", "x", "y", "z"])?;
    for (i, traj) in trajectories.iter().enumerate() {
        for (t, p) in traj.iter().enumerate() {
            w.write_record([
                i.to_string(),
                t.to_string(),
                p.x.to_string(),
                p.y.to_string(),
                p.z.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectories_csv<R: Read>(reader: R) -> Result<Vec<Vec<Vec3>>> {
    #[derive(Deserialize)]
    struct Row {
        point_id: usize,
        frame: usize,
        x: f64,
        y: f64,
        z: f64,
    }
    let mut out: Vec<Vec<Vec3>> = Vec::new();
    for (line, rec) in csv::Reader::from_reader(reader).deserialize().enumerate() {
        let r: Row = rec.map_err(|e| Error::Parse {
            line: line + 2,
            column: 0,
            message: e.to_string(),
        })?;
        if r.point_id > out.len() || (r.point_id == out.len()) != (r.frame == 0) {
            return Err(Error::Parse {
                line: line + 2,
                column: 0,
                message: "rows are not ordered by point and frame".into(),
            });
        }
        if r.point_id == out.len() {
            out.push(Vec::new());
        }
        let traj = &mut out[r.point_id];
        if r.frame != traj.len() {
            return Err(Error::Parse {
                line: line + 2,
                column: 0,
                message: format!("expected frame {} of point {}", traj.len(), r.point_id),
            });
        }
        traj.push(Vec3::new(r.x, r.y, r.z));
    }
    Ok(out)
}

/// Deforms `points` with `tree` and writes them as CSV.
pub fn export_trajectories(tree: &MotionTree, points: &[OrientedPoint], k: usize, path: &Path) -> Result<()> {
    let traj = crate::motion::trajectories(tree, points, k)?;
    write_trajectories_csv(BufWriter::new(File::create(path)?), &traj)
}

/// `step,total,<terms>,stage,nodes`.
pub fn write_history_csv<W: Write>(writer: W, history: &[HistoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["step"];
    header.extend(crate::optim::LossBreakdown::COLUMNS);
    header.extend(["stage", "nodes"]);
    w.write_record(&header)?;
    for row in history {
        let mut rec = vec![row.step.to_string()];
        rec.extend(row.loss.columns().iter().map(|v| v.to_string()));
        rec.push(row.stage.to_string());
        rec.push(row.nodes.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_history(path: &Path, history: &[HistoryRow]) -> Result<()> {
    write_history_csv(BufWriter::new(File::create(path)?), history)
}

// ---------------------------------------------------------------- embeddings

/// Per-frame embedding vectors, `{dim, frames: [[...]]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Embeddings {
    pub dim: usize,
    pub frames: Vec<Vec<f64>>,
}

pub fn embeddings_from_json(text: &str) -> Result<Embeddings> {
    let e: Embeddings = serde_json::from_str(text)?;
    if let Some((t, f)) = e.frames.iter().enumerate().find(|(_, f)| f.len() != e.dim) {
        return Err(Error::ShapeMismatch(format!(
            "frame {t} has {} entries, dim is {}",
            f.len(),
            e.dim
        )));
    }
    Ok(e)
}

pub fn load_embeddings(path: &Path) -> Result<Embeddings> {
    embeddings_from_json(&read_text(path)?)
}
