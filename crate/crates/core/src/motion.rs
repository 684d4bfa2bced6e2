//! The hierarchical motion tree.
//!
//! Every non-root node carries coefficients over its parent's basis set; its
//! local motion at frame `t` is the dual-quaternion blend of the parent's
//! bases at `t`. Global motion follows the kinematic chain from the root,
//! whose motion is the identity at every frame. Points are deformed by
//! blending the global motions of their nearest leaves.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ad::Real;
use crate::error::{Error, Result};
use crate::se3::{dq_blend, DualQuat, Quat, Vec3, SE3};

/// Default number of leaves a point is skinned to.
pub const DEFAULT_KNN: usize = 4;

/// Raw skinning weights below this value are treated as underflow.
const WEIGHT_UNDERFLOW: f64 = 1e-300;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    pub const ROOT: NodeId = NodeId(0);
}

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One rigid transform per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionBasis {
    pub transforms: Vec<SE3>,
}

impl MotionBasis {
    pub fn identity(frame_count: usize) -> Self {
        MotionBasis {
            transforms: vec![SE3::identity(); frame_count],
        }
    }
}

/// The bases a parent node shares with its children.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisSet {
    pub owner: NodeId,
    pub bases: Vec<MotionBasis>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionNode {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    pub level: u32,
    /// Canonical-frame position.
    pub position: Vec3,
    pub radius: f64,
    /// Weights over the parent's bases; empty for the root.
    pub coefficients: Vec<f64>,
}

/// A point with an orientation, deformed as a rigid frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrientedPoint {
    pub position: Vec3,
    pub orientation: Quat,
}

impl OrientedPoint {
    pub fn at(position: Vec3) -> Self {
        OrientedPoint {
            position,
            orientation: Quat::identity(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionTree {
    frame_count: usize,
    canonical_frame: usize,
    /// Ascending by id. Parents always have smaller ids than their children,
    /// so this order is also topological.
    nodes: Vec<MotionNode>,
    basis_sets: BTreeMap<NodeId, BasisSet>,
    next_id: u32,
}

impl MotionTree {
    /// A tree holding only the stationary root.
    pub fn new(frame_count: usize, canonical_frame: usize) -> Result<Self> {
        if frame_count == 0 || canonical_frame >= frame_count {
            return Err(Error::InvalidTree(format!(
                "canonical frame {canonical_frame} outside {frame_count} frames"
            )));
        }
        Ok(MotionTree {
            frame_count,
            canonical_frame,
            nodes: vec![MotionNode {
                id: NodeId::ROOT,
                parent: None,
                level: 0,
                position: Vec3::ZERO,
                radius: 1.0,
                coefficients: Vec::new(),
            }],
            basis_sets: BTreeMap::new(),
            next_id: 1,
        })
    }

    /// Rebuilds a tree from raw parts, validating every invariant.
    pub fn from_parts(
        frame_count: usize,
        canonical_frame: usize,
        mut nodes: Vec<MotionNode>,
        basis_sets: Vec<BasisSet>,
    ) -> Result<Self> {
        nodes.sort_by_key(|n| n.id);
        let next_id = nodes.last().map_or(1, |n| n.id.0 + 1);
        let mut map = BTreeMap::new();
        for set in basis_sets {
            if map.insert(set.owner, set).is_some() {
                return Err(Error::InvalidTree("duplicate basis set owner".into()));
            }
        }
        let tree = MotionTree {
            frame_count,
            canonical_frame,
            nodes,
            basis_sets: map,
            next_id,
        };
        tree.validate()?;
        Ok(tree)
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    pub fn canonical_frame(&self) -> usize {
        self.canonical_frame
    }

    pub fn nodes(&self) -> &[MotionNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn index_of(&self, id: NodeId) -> Option<usize> {
        self.nodes.binary_search_by_key(&id, |n| n.id).ok()
    }

    pub fn node(&self, id: NodeId) -> Option<&MotionNode> {
        self.index_of(id).map(|i| &self.nodes[i])
    }

    pub fn node_mut(&mut self, id: NodeId) -> Option<&mut MotionNode> {
        self.index_of(id).map(move |i| &mut self.nodes[i])
    }

    pub fn parent_index(&self, i: usize) -> Option<usize> {
        self.nodes[i].parent.and_then(|p| self.index_of(p))
    }

    pub fn basis_set(&self, owner: NodeId) -> Option<&BasisSet> {
        self.basis_sets.get(&owner)
    }

    pub fn basis_set_mut(&mut self, owner: NodeId) -> Option<&mut BasisSet> {
        self.basis_sets.get_mut(&owner)
    }

    pub fn basis_sets(&self) -> impl Iterator<Item = &BasisSet> {
        self.basis_sets.values()
    }

    pub fn basis_count(&self, owner: NodeId) -> usize {
        self.basis_sets.get(&owner).map_or(0, |s| s.bases.len())
    }

    pub fn children(&self, id: NodeId) -> impl Iterator<Item = &MotionNode> {
        self.nodes.iter().filter(move |n| n.parent == Some(id))
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        self.children(id).next().is_none()
    }

    /// Dense indices of leaf nodes, ascending by id.
    pub fn leaf_indices(&self) -> Vec<usize> {
        let mut has_child = vec![false; self.nodes.len()];
        for i in 0..self.nodes.len() {
            if let Some(p) = self.parent_index(i) {
                has_child[p] = true;
            }
        }
        (0..self.nodes.len()).filter(|&i| !has_child[i]).collect()
    }

    pub fn leaves(&self) -> Vec<NodeId> {
        self.leaf_indices()
            .into_iter()
            .map(|i| self.nodes[i].id)
            .collect()
    }

    pub fn max_level(&self) -> u32 {
        self.nodes.iter().map(|n| n.level).max().unwrap_or(0)
    }

    pub fn level_indices(&self, level: u32) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].level == level)
            .collect()
    }

    /// Installs the basis set a node shares with its (future) children.
    pub fn set_basis_set(&mut self, owner: NodeId, bases: Vec<MotionBasis>) -> Result<()> {
        if self.index_of(owner).is_none() {
            return Err(Error::InvalidTree(format!("no node {owner}")));
        }
        if bases.is_empty() {
            return Err(Error::InvalidTree("basis set needs at least one basis".into()));
        }
        if bases.iter().any(|b| b.transforms.len() != self.frame_count) {
            return Err(Error::InvalidTree(format!(
                "basis length differs from frame count {}",
                self.frame_count
            )));
        }
        self.basis_sets.insert(owner, BasisSet { owner, bases });
        Ok(())
    }

    /// Appends a node under `parent` and returns its id.
    pub fn add_node(
        &mut self,
        parent: NodeId,
        position: Vec3,
        radius: f64,
        coefficients: Vec<f64>,
    ) -> Result<NodeId> {
        let p = self
            .node(parent)
            .ok_or_else(|| Error::InvalidTree(format!("no parent {parent}")))?;
        let level = p.level + 1;
        let m = self.basis_count(parent);
        if m == 0 {
            return Err(Error::InvalidTree(format!("parent {parent} owns no basis set")));
        }
        if coefficients.len() != m {
            return Err(Error::InvalidTree(format!(
                "{} coefficients for {m} bases",
                coefficients.len()
            )));
        }
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::InvalidTree(format!("radius {radius} must be positive")));
        }
        let id = NodeId(self.next_id);
        self.next_id += 1;
        self.nodes.push(MotionNode {
            id,
            parent: Some(parent),
            level,
            position,
            radius,
            coefficients,
        });
        Ok(id)
    }

    /// Removes a leaf. The root cannot be removed.
    pub fn remove_leaf(&mut self, id: NodeId) -> Result<()> {
        if id == NodeId::ROOT {
            return Err(Error::InvalidTree("the root cannot be removed".into()));
        }
        if !self.is_leaf(id) {
            return Err(Error::InvalidTree(format!("node {id} is not a leaf")));
        }
        let i = self
            .index_of(id)
            .ok_or_else(|| Error::InvalidTree(format!("no node {id}")))?;
        self.nodes.remove(i);
        self.basis_sets.remove(&id);
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidTree(msg));
        if self.frame_count == 0 || self.canonical_frame >= self.frame_count {
            return bad("canonical frame outside the frame range".into());
        }
        let Some(root) = self.nodes.first() else {
            return bad("tree has no nodes".into());
        };
        if root.id != NodeId::ROOT || root.parent.is_some() || root.level != 0 {
            return bad("node 0 must be the parentless level-0 root".into());
        }
        if !root.coefficients.is_empty() {
            return bad("root carries coefficients".into());
        }
        for w in self.nodes.windows(2) {
            if w[0].id >= w[1].id {
                return bad("node ids must be unique and ascending".into());
            }
        }
        for n in &self.nodes[1..] {
            let Some(pid) = n.parent else {
                return bad(format!("node {} has no parent", n.id));
            };
            if pid >= n.id {
                return bad(format!("node {} has parent {} with a larger id", n.id, pid));
            }
            let Some(p) = self.node(pid) else {
                return bad(format!("node {} has missing parent {}", n.id, pid));
            };
            if n.level != p.level + 1 {
                return bad(format!("node {} level {} under level {}", n.id, n.level, p.level));
            }
            if !(n.radius > 0.0 && n.radius.is_finite()) {
                return bad(format!("node {} radius {} is not positive", n.id, n.radius));
            }
            if n.coefficients.len() != self.basis_count(pid) {
                return bad(format!(
                    "node {} has {} coefficients, parent owns {} bases",
                    n.id,
                    n.coefficients.len(),
                    self.basis_count(pid)
                ));
            }
        }
        for (owner, set) in &self.basis_sets {
            if self.node(*owner).is_none() || set.owner != *owner {
                return bad(format!("basis set owned by missing node {owner}"));
            }
            if set.bases.is_empty() {
                return bad(format!("basis set of {owner} is empty"));
            }
            if set.bases.iter().any(|b| b.transforms.len() != self.frame_count) {
                return bad(format!("basis set of {owner} has the wrong length"));
            }
        }
        for n in &self.nodes {
            if !self.is_leaf(n.id) && !self.basis_sets.contains_key(&n.id) {
                return bad(format!("non-leaf node {} owns no basis set", n.id));
            }
        }
        Ok(())
    }

    pub fn node_local_motion(&self, id: NodeId, t: usize) -> Result<SE3> {
        let i = self.require(id, t)?;
        local_motion(self, i, t)
    }

    pub fn node_global_motion(&self, id: NodeId, t: usize) -> Result<SE3> {
        let i = self.require(id, t)?;
        global_motion(self, i, t)
    }

    /// A view of this tree in which levels outside `active_levels` hold their
    /// canonical-frame local motion at every frame.
    pub fn freeze_levels(&self, active_levels: &BTreeSet<u32>) -> FrozenView<'_> {
        FrozenView {
            tree: self,
            active: active_levels.clone(),
        }
    }

    fn require(&self, id: NodeId, t: usize) -> Result<usize> {
        if t >= self.frame_count {
            return Err(Error::InvalidArgument(format!(
                "frame {t} outside {} frames",
                self.frame_count
            )));
        }
        self.index_of(id)
            .ok_or_else(|| Error::InvalidArgument(format!("no node {id}")))
    }
}

/// Read access to tree parameters for evaluation, either as plain values
/// or as differentiable scalars. Indices are dense node indices.
pub trait MotionSource<S: Real> {
    fn tree(&self) -> &MotionTree;
    fn position(&self, i: usize) -> Vec3<S>;
    fn radius(&self, i: usize) -> S;
    fn coefficients(&self, i: usize) -> &[S];
    fn basis(&self, owner: usize, m: usize, t: usize) -> SE3<S>;

    /// Whether nodes at `level` hold their canonical local motion.
    fn frozen(&self, _level: u32) -> bool {
        false
    }
}

impl MotionSource<f64> for MotionTree {
    fn tree(&self) -> &MotionTree {
        self
    }
    fn position(&self, i: usize) -> Vec3 {
        self.nodes[i].position
    }
    fn radius(&self, i: usize) -> f64 {
        self.nodes[i].radius
    }
    fn coefficients(&self, i: usize) -> &[f64] {
        &self.nodes[i].coefficients
    }
    fn basis(&self, owner: usize, m: usize, t: usize) -> SE3 {
        self.basis_sets[&self.nodes[owner].id].bases[m].transforms[t]
    }
}

/// Level-frozen view returned by [`MotionTree::freeze_levels`].
#[derive(Clone, Debug)]
pub struct FrozenView<'a> {
    tree: &'a MotionTree,
    active: BTreeSet<u32>,
}

impl MotionSource<f64> for FrozenView<'_> {
    fn tree(&self) -> &MotionTree {
        self.tree
    }
    fn position(&self, i: usize) -> Vec3 {
        self.tree.position(i)
    }
    fn radius(&self, i: usize) -> f64 {
        self.tree.radius(i)
    }
    fn coefficients(&self, i: usize) -> &[f64] {
        self.tree.coefficients(i)
    }
    fn basis(&self, owner: usize, m: usize, t: usize) -> SE3 {
        self.tree.basis(owner, m, t)
    }
    fn frozen(&self, level: u32) -> bool {
        !self.active.contains(&level)
    }
}

impl FrozenView<'_> {
    pub fn node_global_motion(&self, id: NodeId, t: usize) -> Result<SE3> {
        let i = self.tree.require(id, t)?;
        global_motion(self, i, t)
    }
}

/// Blend of the parent's bases at frame `t` (or the canonical frame when
/// the node's level is frozen).
pub fn local_motion<S: Real, M: MotionSource<S> + ?Sized>(
    src: &M,
    i: usize,
    t: usize,
) -> Result<SE3<S>> {
    let tree = src.tree();
    let node = &tree.nodes[i];
    let Some(p) = tree.parent_index(i) else {
        return Ok(SE3::identity());
    };
    let t = if src.frozen(node.level) {
        tree.canonical_frame
    } else {
        t
    };
    let coeffs = src.coefficients(i);
    let dqs: Vec<DualQuat<S>> = (0..coeffs.len())
        .map(|m| src.basis(p, m, t).to_dual_quat())
        .collect();
    dq_blend(coeffs, &dqs)?.to_se3()
}

/// Composition of local motions from the root down to node `i`.
pub fn global_motion<S: Real, M: MotionSource<S> + ?Sized>(
    src: &M,
    i: usize,
    t: usize,
) -> Result<SE3<S>> {
    let tree = src.tree();
    let mut chain = vec![i];
    while let Some(p) = tree.parent_index(*chain.last().unwrap()) {
        chain.push(p);
    }
    let mut g = SE3::identity();
    for &j in chain.iter().rev().skip(1) {
        g = g.compose(&local_motion(src, j, t)?);
    }
    Ok(g)
}

/// Global motion of every node at frame `t`, indexed densely.
pub fn frame_globals<S: Real, M: MotionSource<S> + ?Sized>(src: &M, t: usize) -> Result<Vec<SE3<S>>> {
    let tree = src.tree();
    let mut out: Vec<SE3<S>> = Vec::with_capacity(tree.len());
    out.push(SE3::identity());
    for i in 1..tree.len() {
        let p = tree
            .parent_index(i)
            .expect("non-root nodes have parents");
        let g = out[p].compose(&local_motion(src, i, t)?);
        out.push(g);
    }
    Ok(out)
}

/// The `k` nearest leaves to `point` in the canonical frame, as dense
/// indices ordered by distance then id.
pub fn knn_leaves(tree: &MotionTree, point: &Vec3, k: usize) -> Vec<usize> {
    let mut cands: Vec<(f64, usize)> = tree
        .leaf_indices()
        .into_iter()
        .map(|i| ((tree.nodes[i].position - *point).norm_squared(), i))
        .collect();
    cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    cands.truncate(k.max(1));
    cands.into_iter().map(|(_, i)| i).collect()
}

/// Normalized Gaussian-kernel weights of `point` over `neighbors`, which
/// must be ordered nearest first.
pub fn skin_weights<S: Real, M: MotionSource<S> + ?Sized>(
    src: &M,
    point: &Vec3<S>,
    neighbors: &[usize],
) -> Vec<S> {
    let raw: Vec<S> = neighbors
        .iter()
        .map(|&k| {
            let d2 = (*point - src.position(k)).norm_squared();
            (-(d2 / (src.radius(k) * 2.0))).exp()
        })
        .collect();
    if raw.iter().all(|w| !(w.value() >= WEIGHT_UNDERFLOW)) {
        let mut one_hot = vec![S::zero(); raw.len()];
        one_hot[0] = S::one();
        return one_hot;
    }
    let mut z = S::zero();
    for w in &raw {
        z += *w;
    }
    raw.into_iter().map(|w| w / z).collect()
}

/// Blended deformation of `point` given precomputed per-node global motions.
pub fn blend_deformation<S: Real, M: MotionSource<S> + ?Sized>(
    src: &M,
    globals: &[SE3<S>],
    point: &Vec3<S>,
    neighbors: &[usize],
) -> Result<SE3<S>> {
    let weights = skin_weights(src, point, neighbors);
    let dqs: Vec<DualQuat<S>> = neighbors.iter().map(|&k| globals[k].to_dual_quat()).collect();
    dq_blend(&weights, &dqs)?.to_se3()
}

/// Skinning weights of `point` over its `k` nearest leaves.
pub fn skinning_weights(point: &Vec3, tree: &MotionTree, k: usize) -> Vec<(NodeId, f64)> {
    let nb = knn_leaves(tree, point, k);
    let w = skin_weights(tree, point, &nb);
    nb.into_iter().map(|i| tree.nodes[i].id).zip(w).collect()
}

pub fn deform_point<M: MotionSource<f64> + ?Sized>(
    src: &M,
    p: &OrientedPoint,
    t: usize,
    k: usize,
) -> Result<OrientedPoint> {
    let tree = src.tree();
    if t >= tree.frame_count {
        return Err(Error::InvalidArgument(format!("frame {t} outside range")));
    }
    let nb = knn_leaves(tree, &p.position, k);
    let globals = frame_globals(src, t)?;
    let d = blend_deformation(src, &globals, &p.position, &nb)?;
    Ok(apply_to_point(&d, p))
}

fn apply_to_point(d: &SE3, p: &OrientedPoint) -> OrientedPoint {
    OrientedPoint {
        position: d.apply(&p.position),
        orientation: (d.rotation * p.orientation).normalize(),
    }
}

pub fn point_trajectory<M: MotionSource<f64> + Sync + ?Sized>(
    src: &M,
    p: &OrientedPoint,
    k: usize,
) -> Result<Vec<Vec3>> {
    Ok(trajectories(src, std::slice::from_ref(p), k)?.remove(0))
}

/// Deformed positions of many points over every frame (`[point][frame]`).
/// Points are processed in parallel; the output order is fixed.
pub fn trajectories<M: MotionSource<f64> + Sync + ?Sized>(
    src: &M,
    points: &[OrientedPoint],
    k: usize,
) -> Result<Vec<Vec<Vec3>>> {
    let tree = src.tree();
    let globals = (0..tree.frame_count)
        .map(|t| frame_globals(src, t))
        .collect::<Result<Vec<_>>>()?;
    points
        .par_iter()
        .map(|p| {
            let nb = knn_leaves(tree, &p.position, k);
            globals
                .iter()
                .map(|g| Ok(blend_deformation(src, g, &p.position, &nb)?.apply(&p.position)))
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

/// Trajectory of each node's own canonical position under its global motion
/// (`[node][frame]`, dense order).
pub fn node_trajectories<S: Real, M: MotionSource<S> + ?Sized>(src: &M) -> Result<Vec<Vec<Vec3<S>>>> {
    let tree = src.tree();
    let mut out = vec![Vec::with_capacity(tree.frame_count); tree.len()];
    for t in 0..tree.frame_count {
        let g = frame_globals(src, t)?;
        for (i, traj) in out.iter_mut().enumerate() {
            traj.push(g[i].apply(&src.position(i)));
        }
    }
    Ok(out)
}
