//! Loss terms, written once over [`Real`] so the same code yields values
//! and gradients.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use crate::ad::Real;
use crate::config::LossWeights;
use crate::densify::curve_distance;
use crate::error::{Error, Result};
use crate::motion::{frame_globals, knn_leaves, node_trajectories, skin_weights, MotionSource, MotionTree};
use crate::se3::{dq_blend, DualQuat, Quat, Vec3, SE3};
use crate::tracks::TrackSet;

/// A supervised point: its canonical position and the track it follows.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Binding {
    pub point: Vec3,
    pub track: usize,
}

/// One binding per track, at the track's canonical-frame position.
pub fn canonical_bindings(tracks: &TrackSet, canonical: usize) -> Vec<Binding> {
    (0..tracks.num_tracks())
        .map(|i| Binding {
            point: tracks.position(i, canonical),
            track: i,
        })
        .collect()
}

/// Frames evaluated in one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Sorted, distinct.
    pub frames: Vec<usize>,
    /// Ordered pairs `(t, u)` of batch frames with `0 < u - t <= max_delta`.
    pub pairs: Vec<(usize, usize)>,
    /// `(t - 1, t, t + 1)` around every batch frame with both neighbours.
    pub triples: Vec<[usize; 3]>,
}

impl Batch {
    pub fn new(mut frames: Vec<usize>, frame_count: usize, max_delta: usize) -> Result<Self> {
        frames.sort_unstable();
        frames.dedup();
        if let Some(&t) = frames.iter().find(|&&t| t >= frame_count) {
            return Err(Error::InvalidArgument(format!(
                "batch frame {t} outside {frame_count} frames"
            )));
        }
        let mut pairs = Vec::new();
        for (a, &t) in frames.iter().enumerate() {
            for &u in &frames[a + 1..] {
                if u - t <= max_delta {
                    pairs.push((t, u));
                }
            }
        }
        let triples = frames
            .iter()
            .filter(|&&t| t >= 1 && t + 1 < frame_count)
            .map(|&t| [t - 1, t, t + 1])
            .collect();
        Ok(Batch {
            frames,
            pairs,
            triples,
        })
    }

    pub fn full(frame_count: usize, max_delta: usize) -> Self {
        Batch::new((0..frame_count).collect(), frame_count, max_delta).expect("frames in range")
    }

    /// `size` distinct frames drawn uniformly (all frames if `size` covers them).
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, frame_count: usize, size: usize, max_delta: usize) -> Self {
        let frames = if size >= frame_count {
            (0..frame_count).collect()
        } else {
            rand::seq::index::sample(rng, frame_count, size).into_vec()
        };
        Batch::new(frames, frame_count, max_delta).expect("frames in range")
    }
}

/// Same-level neighbours of each node by curve distance.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct RigidGraph {
    pub edges: Vec<RigidEdges>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RigidEdges {
    /// Dense node index.
    pub node: usize,
    pub level: u32,
    pub neighbors: Vec<usize>,
}

impl RigidGraph {
    /// Links every non-root node to its `k` nearest same-level nodes by
    /// curve distance of their node trajectories (ties by index).
    pub fn build(tree: &MotionTree, k: usize) -> Result<Self> {
        let trajs = node_trajectories(tree)?;
        let mut edges = Vec::new();
        for level in 1..=tree.max_level() {
            let idx = tree.level_indices(level);
            for &i in &idx {
                let mut d: Vec<(f64, usize)> = idx
                    .iter()
                    .filter(|&&j| j != i)
                    .map(|&j| Ok((curve_distance(&trajs[i], &trajs[j])?, j)))
                    .collect::<Result<_>>()?;
                d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                d.truncate(k);
                if !d.is_empty() {
                    edges.push(RigidEdges {
                        node: i,
                        level,
                        neighbors: d.into_iter().map(|(_, j)| j).collect(),
                    });
                }
            }
        }
        Ok(RigidGraph { edges })
    }
}

/// Everything a loss evaluation needs besides the parameters.
#[derive(Clone, Debug)]
pub struct Problem<'a> {
    pub tracks: &'a TrackSet,
    pub bindings: Vec<Binding>,
    /// Skinning neighbourhood of each binding, fixed between structural
    /// updates.
    pub neighbors: Vec<Vec<usize>>,
    pub graph: RigidGraph,
    pub weights: LossWeights,
}

impl<'a> Problem<'a> {
    pub fn new(
        tree: &MotionTree,
        tracks: &'a TrackSet,
        bindings: Vec<Binding>,
        knn: usize,
        rigidity_knn: usize,
        weights: LossWeights,
    ) -> Result<Self> {
        check_bindings(tracks, &bindings)?;
        weights.validate()?;
        let mut p = Problem {
            tracks,
            bindings,
            neighbors: Vec::new(),
            graph: RigidGraph::default(),
            weights,
        };
        p.rebuild(tree, knn, rigidity_knn)?;
        Ok(p)
    }

    /// Recomputes neighbourhoods after the tree structure changed.
    pub fn rebuild(&mut self, tree: &MotionTree, knn: usize, rigidity_knn: usize) -> Result<()> {
        if tree.frame_count() != self.tracks.frame_count() {
            return Err(Error::ShapeMismatch(format!(
                "tree has {} frames, tracks have {}",
                tree.frame_count(),
                self.tracks.frame_count()
            )));
        }
        self.neighbors = self
            .bindings
            .iter()
            .map(|b| knn_leaves(tree, &b.point, knn))
            .collect();
        self.graph = RigidGraph::build(tree, rigidity_knn)?;
        Ok(())
    }
}

fn check_bindings(tracks: &TrackSet, bindings: &[Binding]) -> Result<()> {
    match bindings.iter().position(|b| b.track >= tracks.num_tracks()) {
        Some(point) => Err(Error::InvalidBinding {
            point,
            track: bindings[point].track,
        }),
        None => Ok(()),
    }
}

/// Unweighted track, acceleration and radius terms; `rigidity` already
/// carries its per-level weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms<S = f64> {
    pub total: S,
    pub track: S,
    pub rigidity: S,
    pub accel_bases: S,
    pub accel_tracks: S,
    pub radius: S,
}

pub type LossBreakdown = LossTerms<f64>;

impl<S: Real> LossTerms<S> {
    pub fn value(&self) -> LossBreakdown {
        LossTerms {
            total: self.total.value(),
            track: self.track.value(),
            rigidity: self.rigidity.value(),
            accel_bases: self.accel_bases.value(),
            accel_tracks: self.accel_tracks.value(),
            radius: self.radius.value(),
        }
    }
}

impl LossBreakdown {
    pub const COLUMNS: [&'static str; 6] =
        ["total", "track", "rigidity", "accel_bases", "accel_tracks", "radius"];

    pub fn columns(&self) -> [f64; 6] {
        [
            self.total,
            self.track,
            self.rigidity,
            self.accel_bases,
            self.accel_tracks,
            self.radius,
        ]
    }
}

fn mean<S: Real>(sum: S, count: usize) -> S {
    if count == 0 {
        S::zero()
    } else {
        sum / count as f64
    }
}

/// Deformed binding positions at each requested frame.
fn deform_bindings<S: Real, M: MotionSource<S> + ?Sized>(
    src: &M,
    bindings: &[Binding],
    neighbors: &[Vec<usize>],
    globals: &BTreeMap<usize, Vec<SE3<S>>>,
) -> Result<BTreeMap<usize, Vec<Vec3<S>>>> {
    let points: Vec<Vec3<S>> = bindings.iter().map(|b| Vec3::from_f64(b.point)).collect();
    let weights: Vec<Vec<S>> = points
        .iter()
        .zip(neighbors)
        .map(|(p, nb)| skin_weights(src, p, nb))
        .collect();
    let mut out = BTreeMap::new();
    for (&t, g) in globals {
        let dqs: Vec<DualQuat<S>> = g.iter().map(SE3::to_dual_quat).collect();
        let mut at_t = Vec::with_capacity(points.len());
        for ((p, nb), w) in points.iter().zip(neighbors).zip(&weights) {
            let parts: Vec<DualQuat<S>> = nb.iter().map(|&k| dqs[k]).collect();
            at_t.push(dq_blend(w, &parts)?.to_se3()?.apply(p));
        }
        out.insert(t, at_t);
    }
    Ok(out)
}

fn globals_at<S: Real, M: MotionSource<S> + ?Sized>(
    src: &M,
    frames: impl IntoIterator<Item = usize>,
) -> Result<BTreeMap<usize, Vec<SE3<S>>>> {
    frames
        .into_iter()
        .collect::<BTreeSet<usize>>()
        .into_iter()
        .map(|t| Ok((t, frame_globals(src, t)?)))
        .collect()
}

fn track_term<S: Real>(
    deformed: &BTreeMap<usize, Vec<Vec3<S>>>,
    tracks: &TrackSet,
    bindings: &[Binding],
    frames: &[usize],
) -> S {
    let mut sum = S::zero();
    let mut count = 0;
    for &t in frames {
        let x = &deformed[&t];
        for (i, b) in bindings.iter().enumerate() {
            if tracks.visible(b.track, t) {
                sum += (x[i] - Vec3::from_f64(tracks.position(b.track, t))).norm_squared();
                count += 1;
            }
        }
    }
    mean(sum, count)
}

fn track_accel_term<S: Real>(
    deformed: &BTreeMap<usize, Vec<Vec3<S>>>,
    points: usize,
    triples: &[[usize; 3]],
) -> S {
    let mut sum = S::zero();
    for [a, b, c] in triples {
        let (xa, xb, xc) = (&deformed[a], &deformed[b], &deformed[c]);
        for i in 0..points {
            sum += (xc[i] - xb[i] * 2.0 + xa[i]).norm_squared();
        }
    }
    mean(sum, points * triples.len())
}

fn rigidity_term<S: Real, M: MotionSource<S> + ?Sized>(
    src: &M,
    globals: &BTreeMap<usize, Vec<SE3<S>>>,
    graph: &RigidGraph,
    weights: &LossWeights,
    pairs: &[(usize, usize)],
) -> S {
    if pairs.is_empty() || graph.edges.is_empty() {
        return S::zero();
    }
    let n = src.tree().len();
    let mut x: BTreeMap<usize, Vec<Vec3<S>>> = BTreeMap::new();
    let mut inv: BTreeMap<usize, Vec<SE3<S>>> = BTreeMap::new();
    for &(t, u) in pairs {
        for f in [t, u] {
            if x.contains_key(&f) {
                continue;
            }
            let g = &globals[&f];
            x.insert(f, (0..n).map(|i| g[i].apply(&src.position(i))).collect());
            inv.insert(f, g.iter().map(SE3::inverse).collect());
        }
    }
    let mut sum = S::zero();
    for &(t, u) in pairs {
        let (xt, xu, it, iu) = (&x[&t], &x[&u], &inv[&t], &inv[&u]);
        for e in &graph.edges {
            let w = weights.rigid_weight(e.level);
            if w == 0.0 {
                continue;
            }
            let i = e.node;
            let mut level_sum = S::zero();
            for &j in &e.neighbors {
                let a = ((xt[i] - xt[j]).norm() - (xu[i] - xu[j]).norm()).abs();
                let b = (it[j].apply(&xt[i]) - iu[j].apply(&xu[i])).norm();
                level_sum += a + b;
            }
            sum += level_sum * w;
        }
    }
    sum / pairs.len() as f64
}

fn basis_accel_term<S: Real, M: MotionSource<S> + ?Sized>(src: &M) -> S {
    let tree = src.tree();
    let frames = tree.frame_count();
    let mut sum = S::zero();
    let mut count = 0;
    if frames < 3 {
        return sum;
    }
    for set in tree.basis_sets() {
        let owner = tree.index_of(set.owner).expect("basis owners exist");
        for m in 0..set.bases.len() {
            for t in 1..frames - 1 {
                let [a, b, c] = [t - 1, t, t + 1].map(|f| src.basis(owner, m, f));
                let qb = b.rotation;
                let flip = |q: Quat<S>| if q.value().dot(&qb.value()) < 0.0 { -q } else { q };
                let (qa, qc) = (flip(a.rotation), flip(c.rotation));
                let dq = qc - qb.scale(S::cst(2.0)) + qa;
                let dt = c.translation - b.translation * 2.0 + a.translation;
                sum += dt.norm_squared() + dq.dot(&dq);
                count += 1;
            }
        }
    }
    mean(sum, count)
}

/// Minimum number of nodes on a level for the radius term to apply.
const RADIUS_REG_MIN_NODES: usize = 4;
const RADIUS_REG_NEIGHBOURS: usize = 3;

fn radius_term<S: Real, M: MotionSource<S> + ?Sized>(src: &M) -> S {
    let tree = src.tree();
    let mut sum = S::zero();
    let mut count = 0;
    for level in 1..=tree.max_level() {
        let idx = tree.level_indices(level);
        if idx.len() < RADIUS_REG_MIN_NODES {
            continue;
        }
        let pos: Vec<Vec3<S>> = idx.iter().map(|&i| src.position(i)).collect();
        for (a, &i) in idx.iter().enumerate() {
            let mut near: Vec<(f64, usize)> = (0..idx.len())
                .filter(|&b| b != a)
                .map(|b| ((pos[b].value() - pos[a].value()).norm(), b))
                .collect();
            near.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            let mut avg = S::zero();
            for &(_, b) in &near[..RADIUS_REG_NEIGHBOURS] {
                avg += (pos[b] - pos[a]).norm();
            }
            let excess = (src.radius(i) - avg / RADIUS_REG_NEIGHBOURS as f64).max0();
            sum += excess * excess;
            count += 1;
        }
    }
    mean(sum, count)
}

/// Every loss term and their weighted total.
pub fn evaluate<S: Real, M: MotionSource<S> + ?Sized>(
    src: &M,
    problem: &Problem,
    batch: &Batch,
) -> Result<LossTerms<S>> {
    let w = &problem.weights;
    let frames = batch
        .frames
        .iter()
        .copied()
        .chain(batch.triples.iter().flatten().copied());
    let globals = globals_at(src, frames)?;
    let deformed = deform_bindings(src, &problem.bindings, &problem.neighbors, &globals)?;
    let track = track_term(&deformed, problem.tracks, &problem.bindings, &batch.frames);
    let accel_tracks = track_accel_term(&deformed, problem.bindings.len(), &batch.triples);
    let rigidity = rigidity_term(src, &globals, &problem.graph, w, &batch.pairs);
    let accel_bases = basis_accel_term(src);
    let radius = radius_term(src);
    let total = track * w.track
        + rigidity
        + accel_bases * w.accel_bases
        + accel_tracks * w.accel_tracks
        + radius * w.radius_reg;
    Ok(LossTerms {
        total,
        track,
        rigidity,
        accel_bases,
        accel_tracks,
        radius,
    })
}

/// Weighted loss of a tree with its current parameters.
pub fn total_loss(tree: &MotionTree, problem: &Problem, batch: &Batch) -> Result<LossBreakdown> {
    evaluate(tree, problem, batch)
}

/// Mean squared error between deformed bindings and their visible
/// observations over `frames`, with `k`-leaf skinning.
pub fn loss_track(
    tree: &MotionTree,
    tracks: &TrackSet,
    bindings: &[Binding],
    k: usize,
    frames: &[usize],
) -> Result<f64> {
    check_bindings(tracks, bindings)?;
    let neighbors: Vec<Vec<usize>> = bindings.iter().map(|b| knn_leaves(tree, &b.point, k)).collect();
    let globals = globals_at(tree, frames.iter().copied())?;
    let deformed = deform_bindings(tree, bindings, &neighbors, &globals)?;
    Ok(track_term(&deformed, tracks, bindings, frames))
}

/// Rigidity over `graph` with per-level weights, averaged over frame pairs.
pub fn loss_rigidity(
    tree: &MotionTree,
    graph: &RigidGraph,
    weights: &LossWeights,
    pairs: &[(usize, usize)],
) -> Result<f64> {
    let globals = globals_at(tree, pairs.iter().flat_map(|&(t, u)| [t, u]))?;
    Ok(rigidity_term(tree, &globals, graph, weights, pairs))
}

/// Mean squared second difference of basis translations and
/// hemisphere-aligned quaternions; zero with fewer than three frames.
pub fn reg_basis_acceleration(tree: &MotionTree) -> f64 {
    basis_accel_term(tree)
}

/// Mean squared second difference of deformed point positions over
/// `triples`.
pub fn reg_track_acceleration(
    tree: &MotionTree,
    points: &[Vec3],
    k: usize,
    triples: &[[usize; 3]],
) -> Result<f64> {
    let bindings: Vec<Binding> = points.iter().map(|&point| Binding { point, track: 0 }).collect();
    let neighbors: Vec<Vec<usize>> = points.iter().map(|p| knn_leaves(tree, p, k)).collect();
    let globals = globals_at(tree, triples.iter().flatten().copied())?;
    let deformed = deform_bindings(tree, &bindings, &neighbors, &globals)?;
    Ok(track_accel_term(&deformed, points.len(), triples))
}

/// Mean squared excess of each radius over its average distance to the
/// three nearest same-level nodes, on levels with at least four nodes.
pub fn reg_radius(tree: &MotionTree) -> f64 {
    radius_term(tree)
}
