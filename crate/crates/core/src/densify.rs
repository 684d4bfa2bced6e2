//! Growing the tree where its nodes fail to explain nearby point motion, and
//! gradient-driven splitting and pruning of leaves.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::init::median_neighbour_distance;
use crate::motion::{knn_leaves, node_trajectories, trajectories, MotionTree, NodeId, OrientedPoint};
use crate::se3::Vec3;

/// Candidates per new node.
pub const DEFAULT_POINTS_PER_NODE: usize = 20;
/// Densification threshold as a fraction of the scene's bounding-box diagonal.
pub const DEFAULT_THRESHOLD_RATIO: f64 = 0.05;
/// Detect-and-add rounds within a single densification call.
const MAX_ROUNDS: usize = 4;

/// Largest pointwise distance between two equally long trajectories.
pub fn curve_distance(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "curves of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(p, q)| p.distance(q))
        .fold(0.0, f64::max))
}

/// Points whose deformed trajectory is farther than `threshold` (in curve
/// distance) from the trajectories of all of its `k` nearest leaves.
pub fn densify_candidates(
    tree: &MotionTree,
    points: &[OrientedPoint],
    k: usize,
    threshold: f64,
) -> Result<Vec<usize>> {
    let nodes = node_trajectories(tree)?;
    let paths = trajectories(tree, points, k)?;
    let flags: Vec<bool> = points
        .par_iter()
        .zip(&paths)
        .map(|(p, path)| {
            knn_leaves(tree, &p.position, k)
                .into_iter()
                .map(|leaf| curve_distance(path, &nodes[leaf]).unwrap_or(f64::INFINITY))
                .fold(f64::INFINITY, f64::min)
                > threshold
        })
        .collect();
    Ok((0..points.len()).filter(|&i| flags[i]).collect())
}

/// Adds leaves among points that no nearby node explains.
///
/// Each round takes the current candidates and places
/// `ceil(candidates / points_per_node)` new nodes by farthest-point sampling,
/// continuing until every candidate lies within `threshold` of a new node in
/// the canonical frame. A new node joins the parent of its nearest leaf and
/// copies that leaf's coefficients. Rounds repeat while the candidate count
/// keeps falling.
pub fn densify_by_curve_distance(
    tree: &MotionTree,
    points: &[OrientedPoint],
    k: usize,
    threshold: f64,
    seed: u64,
) -> Result<MotionTree> {
    densify_with(tree, points, k, threshold, DEFAULT_POINTS_PER_NODE, seed)
}

pub fn densify_with(
    tree: &MotionTree,
    points: &[OrientedPoint],
    k: usize,
    threshold: f64,
    points_per_node: usize,
    seed: u64,
) -> Result<MotionTree> {
    if !(threshold > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "densification threshold {threshold} must be positive"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = tree.clone();
    let mut last = usize::MAX;
    for _ in 0..MAX_ROUNDS {
        if threshold.is_infinite() {
            break;
        }
        let cands = densify_candidates(&out, points, k, threshold)?;
        if cands.is_empty() || cands.len() >= last {
            break;
        }
        last = cands.len();
        let pos: Vec<Vec3> = cands.iter().map(|&i| points[i].position).collect();
        let picked = covering_sample(&pos, cands.len().div_ceil(points_per_node.max(1)), threshold, &mut rng);
        if !add_near_leaves(&mut out, picked.iter().map(|&i| pos[i]))? {
            break;
        }
    }
    Ok(out)
}

/// Farthest-point sampling that keeps going past `min_count` until every
/// point is within `radius` of a sample.
fn covering_sample(points: &[Vec3], min_count: usize, radius: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut chosen = crate::init::farthest_point_sampling(points, 1, rng);
    let mut d: Vec<f64> = points.iter().map(|p| p.distance(&points[chosen[0]])).collect();
    loop {
        let mut best = 0;
        for i in 1..points.len() {
            if d[i] > d[best] {
                best = i;
            }
        }
        if chosen.len() >= min_count && d[best] <= radius {
            return chosen;
        }
        chosen.push(best);
        for (di, p) in d.iter_mut().zip(points) {
            *di = di.min(p.distance(&points[best]));
        }
    }
}

/// Attaches one node per position next to its nearest current leaf.
/// Returns false when the tree has no leaf to copy from.
fn add_near_leaves(tree: &mut MotionTree, positions: impl Iterator<Item = Vec3>) -> Result<bool> {
    let leaves: Vec<usize> = tree
        .leaf_indices()
        .into_iter()
        .filter(|&i| tree.nodes()[i].parent.is_some())
        .collect();
    let mut added = Vec::new();
    for p in positions {
        let template = leaves.iter().copied().min_by(|&a, &b| {
            let (na, nb) = (&tree.nodes()[a], &tree.nodes()[b]);
            na.position
                .distance(&p)
                .total_cmp(&nb.position.distance(&p))
                .then(na.id.cmp(&nb.id))
        });
        let (parent, coefficients, radius) = match template {
            Some(i) => {
                let n = &tree.nodes()[i];
                (n.parent.expect("filtered"), n.coefficients.clone(), n.radius)
            }
            None => {
                let m = tree.basis_count(NodeId::ROOT);
                if m == 0 {
                    log::warn!("densification skipped: the root owns no basis set");
                    return Ok(false);
                }
                (NodeId::ROOT, vec![1.0 / m as f64; m], 1.0)
            }
        };
        added.push(tree.add_node(parent, p, radius, coefficients)?);
    }
    // Radii from the median distance to the three nearest same-level nodes.
    for id in added {
        let level = tree.node(id).expect("just added").level;
        let idx = tree.level_indices(level);
        let pos: Vec<Vec3> = idx.iter().map(|&i| tree.nodes()[i].position).collect();
        let me = idx
            .iter()
            .position(|&i| tree.nodes()[i].id == id)
            .expect("node is on its own level");
        if let Some(r) = median_neighbour_distance(&pos, me) {
            tree.node_mut(id).expect("just added").radius = r;
        }
    }
    Ok(true)
}

/// Splits leaves with large accumulated coefficient gradients and prunes
/// leaves whose gradients vanished.
///
/// A point is assigned to every leaf among its `k` nearest. A split adds a
/// sibling at the mean of the leaf's assigned points with the same
/// coefficients and radius; leaves without assigned points are not split.
/// A leaf is pruned only if each of its assigned points keeps another leaf
/// in its neighbourhood and its parent keeps another child. Leaves missing
/// from `grad_stats` are left alone.
pub fn refine_by_gradient(
    tree: &MotionTree,
    grad_stats: &BTreeMap<NodeId, f64>,
    points: &[OrientedPoint],
    k: usize,
    add_thresh: f64,
    prune_thresh: f64,
) -> Result<MotionTree> {
    let leaves = tree.leaf_indices();
    let neighborhoods: Vec<Vec<usize>> = points
        .iter()
        .map(|p| knn_leaves(tree, &p.position, k))
        .collect();
    let mut assigned: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (pi, nb) in neighborhoods.iter().enumerate() {
        for &leaf in nb {
            assigned.entry(leaf).or_default().push(pi);
        }
    }

    let mut out = tree.clone();
    let mut removed: BTreeSet<usize> = BTreeSet::new();
    let mut child_count: BTreeMap<NodeId, usize> = BTreeMap::new();
    for n in tree.nodes() {
        if let Some(p) = n.parent {
            *child_count.entry(p).or_default() += 1;
        }
    }
    for &leaf in &leaves {
        let node = &tree.nodes()[leaf];
        let (Some(parent), Some(&g)) = (node.parent, grad_stats.get(&node.id)) else {
            continue;
        };
        let members = assigned.get(&leaf).map_or(&[][..], Vec::as_slice);
        if g > add_thresh {
            if members.is_empty() {
                continue;
            }
            let mean = members
                .iter()
                .fold(Vec3::ZERO, |a, &pi| a + points[pi].position)
                * (1.0 / members.len() as f64);
            out.add_node(parent, mean, node.radius, node.coefficients.clone())?;
        } else if g < prune_thresh {
            let keeps_cover = members.iter().all(|&pi| {
                neighborhoods[pi]
                    .iter()
                    .any(|&j| j != leaf && !removed.contains(&j))
            });
            let siblings = child_count.get(&parent).copied().unwrap_or(0);
            if keeps_cover && siblings > 1 {
                removed.insert(leaf);
                *child_count.get_mut(&parent).expect("counted") -= 1;
                out.remove_leaf(node.id)?;
            }
        }
    }
    out.validate()?;
    Ok(out)
}
