//! Building the first level of a motion tree from tracks, and spawning finer
//! levels from the relative motion of points around each leaf.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kmeans::{kmeans, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::motion::{
    blend_deformation, frame_globals, knn_leaves, MotionBasis, MotionTree, NodeId, OrientedPoint,
    DEFAULT_KNN,
};
use crate::se3::{kabsch_se3, Quat, Vec3, SE3};
use crate::tracks::{bbox_diagonal, select_canonical_frame, TrackSet};

/// Offset added to distances in inverse-distance weighting.
pub const IDW_EPSILON: f64 = 1e-8;
/// Tracks visible in at least this fraction of frames feed first-level clustering.
pub const FEATURE_VISIBILITY: f64 = 0.9;
/// Neighbour count behind the median-distance radius rule.
const RADIUS_NEIGHBOURS: usize = 3;

/// Result of solving per-cluster rigid motion.
#[derive(Clone, Debug)]
pub struct ClusterBases {
    pub bases: Vec<MotionBasis>,
    /// Cluster index behind each basis.
    pub clusters: Vec<usize>,
    /// Clusters dropped for degenerate geometry.
    pub dropped: usize,
}

/// One rigid motion per cluster: Kabsch from the members' canonical
/// positions to their positions at every frame.
///
/// Frames with fewer than three co-visible members copy the nearest solved
/// frame. Clusters with fewer than three canonical-visible members, or with
/// degenerate canonical geometry, are dropped.
pub fn bases_from_clusters(
    tracks: &TrackSet,
    assignments: &[usize],
    canonical: usize,
) -> Result<ClusterBases> {
    if assignments.len() != tracks.num_tracks() {
        return Err(Error::ShapeMismatch(format!(
            "{} assignments for {} tracks",
            assignments.len(),
            tracks.num_tracks()
        )));
    }
    let frames = tracks.frame_count();
    let clusters = assignments.iter().max().map_or(0, |m| m + 1);
    let mut out = ClusterBases {
        bases: Vec::new(),
        clusters: Vec::new(),
        dropped: 0,
    };
    for c in 0..clusters {
        let members: Vec<usize> = (0..tracks.num_tracks())
            .filter(|&i| assignments[i] == c && tracks.visible(i, canonical))
            .collect();
        let canon: Vec<Vec3> = members.iter().map(|&i| tracks.position(i, canonical)).collect();
        if kabsch_se3(&canon, &canon).is_err() {
            out.dropped += 1;
            continue;
        }
        let mut solved: Vec<Option<SE3>> = vec![None; frames];
        for (t, slot) in solved.iter_mut().enumerate() {
            if t == canonical {
                *slot = Some(SE3::identity());
                continue;
            }
            let covis: Vec<usize> = members.iter().copied().filter(|&i| tracks.visible(i, t)).collect();
            if covis.len() < 3 {
                continue;
            }
            let src: Vec<Vec3> = covis.iter().map(|&i| tracks.position(i, canonical)).collect();
            let dst: Vec<Vec3> = covis.iter().map(|&i| tracks.position(i, t)).collect();
            *slot = kabsch_se3(&src, &dst).ok();
        }
        let known: Vec<usize> = (0..frames).filter(|&t| solved[t].is_some()).collect();
        let transforms = (0..frames)
            .map(|t| {
                let k = *known
                    .iter()
                    .min_by_key(|&&k| (k.abs_diff(t), k))
                    .expect("canonical frame is always solved");
                solved[k].expect("known")
            })
            .collect();
        out.bases.push(MotionBasis { transforms });
        out.clusters.push(c);
    }
    Ok(out)
}

/// Farthest-point sampling of up to `count` indices. The first index is
/// drawn from `rng`; the rest are deterministic (ties to the lower index).
pub fn farthest_point_sampling<R: Rng + ?Sized>(points: &[Vec3], count: usize, rng: &mut R) -> Vec<usize> {
    let count = count.min(points.len());
    if count == 0 {
        return Vec::new();
    }
    let mut chosen = vec![rng.random_range(0..points.len())];
    let mut d: Vec<f64> = points.iter().map(|p| p.distance(&points[chosen[0]])).collect();
    while chosen.len() < count {
        let mut best = 0;
        for i in 1..points.len() {
            if d[i] > d[best] {
                best = i;
            }
        }
        chosen.push(best);
        for (di, p) in d.iter_mut().zip(points) {
            *di = di.min(p.distance(&points[best]));
        }
    }
    chosen
}

/// Normalized inverse-distance weights of `position` over `centers`.
pub fn idw_coefficients(position: &Vec3, centers: &[Vec3]) -> Vec<f64> {
    let raw: Vec<f64> = centers
        .iter()
        .map(|c| 1.0 / (position.distance(c) + IDW_EPSILON))
        .collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / z).collect()
}

/// Median distance from `positions[i]` to its three nearest neighbours in
/// `positions`, or `None` when it has no neighbour at a positive distance.
pub fn median_neighbour_distance(positions: &[Vec3], i: usize) -> Option<f64> {
    let mut d: Vec<f64> = positions
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, p)| p.distance(&positions[i]))
        .collect();
    d.sort_by(f64::total_cmp);
    d.truncate(RADIUS_NEIGHBOURS);
    if d.is_empty() {
        return None;
    }
    let m = if d.len() % 2 == 1 {
        d[d.len() / 2]
    } else {
        0.5 * (d[d.len() / 2 - 1] + d[d.len() / 2])
    };
    (m > 0.0).then_some(m)
}

fn radius_or(positions: &[Vec3], i: usize, fallback: f64) -> f64 {
    median_neighbour_distance(positions, i).unwrap_or(fallback)
}

fn fallback_radius(scene: &[Vec3]) -> f64 {
    let d = bbox_diagonal(scene);
    if d > 0.0 {
        0.1 * d
    } else {
        1.0
    }
}

/// Builds a one-level tree: `bases` rigid motions from clustered tracks and
/// `node_count` nodes blending them by inverse distance.
pub fn init_first_level(
    tracks: &TrackSet,
    bases: usize,
    node_count: usize,
    seed: u64,
) -> Result<MotionTree> {
    let frames = tracks.frame_count();
    let canonical = select_canonical_frame(tracks);

    let mut feature_tracks: Vec<usize> = (0..tracks.num_tracks())
        .filter(|&i| {
            let seen = (0..frames).filter(|&t| tracks.visible(i, t)).count();
            seen as f64 >= FEATURE_VISIBILITY * frames as f64
        })
        .collect();
    if feature_tracks.len() < bases {
        feature_tracks = (0..tracks.num_tracks()).collect();
    }
    let features: Vec<Vec<f64>> = feature_tracks
        .iter()
        .map(|&i| tracks.track(i).iter().flat_map(|p| p.to_array()).collect())
        .collect();
    let clustering = kmeans(&features, bases, seed, DEFAULT_MAX_ITER, DEFAULT_TOL)?;
    let subset = tracks.select(&feature_tracks)?;
    let solved = bases_from_clusters(&subset, &clustering.assignments, canonical)?;
    if solved.bases.is_empty() {
        return Err(Error::DegenerateGeometry(
            "every cluster was dropped while solving bases".into(),
        ));
    }
    if solved.dropped > 0 {
        log::warn!("dropped {} degenerate clusters", solved.dropped);
    }
    let centers: Vec<Vec3> = solved
        .clusters
        .iter()
        .map(|&c| {
            let members: Vec<Vec3> = (0..subset.num_tracks())
                .filter(|&i| clustering.assignments[i] == c && subset.visible(i, canonical))
                .map(|i| subset.position(i, canonical))
                .collect();
            members.iter().fold(Vec3::ZERO, |a, p| a + *p) * (1.0 / members.len() as f64)
        })
        .collect();

    let candidates: Vec<Vec3> = (0..tracks.num_tracks())
        .filter(|&i| tracks.visible(i, canonical))
        .map(|i| tracks.position(i, canonical))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = farthest_point_sampling(&candidates, node_count.max(1), &mut rng);
    let positions: Vec<Vec3> = picked.iter().map(|&i| candidates[i]).collect();
    let fallback = fallback_radius(&candidates);

    let mut tree = MotionTree::new(frames, canonical)?;
    tree.set_basis_set(NodeId::ROOT, solved.bases)?;
    for (i, p) in positions.iter().enumerate() {
        tree.add_node(
            NodeId::ROOT,
            *p,
            radius_or(&positions, i, fallback),
            idw_coefficients(p, &centers),
        )?;
    }
    Ok(tree)
}

/// Parameters for [`spawn_children`].
#[derive(Clone, Debug)]
pub struct SpawnOptions {
    pub children_per_node: usize,
    pub child_bases: usize,
    /// Skinning neighbourhood used to deform the points.
    pub knn: usize,
    /// Points within `radius_mult * radius` of a leaf join its neighbourhood.
    pub radius_mult: f64,
    pub seed: u64,
}

impl Default for SpawnOptions {
    fn default() -> Self {
        SpawnOptions {
            children_per_node: 10,
            child_bases: 5,
            knn: DEFAULT_KNN,
            radius_mult: 3.0,
            seed: 0,
        }
    }
}

fn hemisphere(q: Quat) -> Quat {
    if q.w < 0.0 {
        -q
    } else {
        q
    }
}

/// Adds one level below every current leaf that has enough nearby points.
///
/// Each leaf clusters the motion of its neighbourhood relative to itself;
/// cluster centers become its basis set and children are placed among the
/// neighbourhood points.
pub fn spawn_children(
    tree: &MotionTree,
    points: &[OrientedPoint],
    opts: &SpawnOptions,
) -> Result<MotionTree> {
    if opts.child_bases == 0 || opts.children_per_node == 0 {
        return Err(Error::InvalidArgument(
            "children and child bases must be positive".into(),
        ));
    }
    let frames = tree.frame_count();
    let canonical = tree.canonical_frame();
    let globals = (0..frames)
        .map(|t| frame_globals(tree, t))
        .collect::<Result<Vec<_>>>()?;
    let positions: Vec<Vec3> = points.iter().map(|p| p.position).collect();
    let diag = bbox_diagonal(&positions);
    let lambda = if diag > 0.0 { 0.5 * diag } else { 1.0 };

    let deformations: Vec<Vec<SE3>> = points
        .iter()
        .map(|p| {
            let nb = knn_leaves(tree, &p.position, opts.knn);
            globals
                .iter()
                .map(|g| blend_deformation(tree, g, &p.position, &nb))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut out = tree.clone();
    for leaf in tree.leaf_indices() {
        let node = &tree.nodes()[leaf];
        let reach = opts.radius_mult * node.radius;
        let members: Vec<usize> = (0..points.len())
            .filter(|&i| positions[i].distance(&node.position) <= reach)
            .collect();
        if members.len() < opts.child_bases {
            continue;
        }
        let features: Vec<Vec<f64>> = members
            .iter()
            .map(|&i| {
                let mut f = Vec::with_capacity(frames * 7);
                for t in 0..frames {
                    let rel = globals[t][leaf].inverse().compose(&deformations[i][t]);
                    let q = hemisphere(rel.rotation);
                    f.extend(rel.translation.to_array());
                    f.extend(q.to_array().map(|v| v * lambda));
                }
                f
            })
            .collect();
        let seed = opts
            .seed
            .wrapping_add(u64::from(node.id.0).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let clustering = kmeans(&features, opts.child_bases, seed, DEFAULT_MAX_ITER, DEFAULT_TOL)?;
        let bases: Vec<MotionBasis> = clustering
            .centers
            .iter()
            .map(|center| {
                let transforms = (0..frames)
                    .map(|t| {
                        if t == canonical {
                            return SE3::identity();
                        }
                        let c = &center[t * 7..t * 7 + 7];
                        let q = Quat::new(c[3], c[4], c[5], c[6]).scale(1.0 / lambda);
                        let q = if q.norm() > 1e-12 { q } else { Quat::identity() };
                        SE3::new(q, Vec3::new(c[0], c[1], c[2]))
                    })
                    .collect();
                MotionBasis { transforms }
            })
            .collect();
        let centroids: Vec<Vec3> = (0..opts.child_bases)
            .map(|c| {
                let m = clustering.members(c);
                m.iter().fold(Vec3::ZERO, |a, &j| a + positions[members[j]])
                    * (1.0 / m.len() as f64)
            })
            .collect();

        let member_pos: Vec<Vec3> = members.iter().map(|&i| positions[i]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picked = farthest_point_sampling(&member_pos, opts.children_per_node, &mut rng);
        let child_pos: Vec<Vec3> = picked.iter().map(|&i| member_pos[i]).collect();

        out.set_basis_set(node.id, bases)?;
        for (j, p) in child_pos.iter().enumerate() {
            out.add_node(
                node.id,
                *p,
                radius_or(&child_pos, j, node.radius),
                idw_coefficients(p, &centroids),
            )?;
        }
    }
    Ok(out)
}
