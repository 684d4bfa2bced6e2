//! Reverse-mode gradients of the total loss and their finite-difference
//! verification.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ad::{Tape, Var};
use crate::config::LossWeights;
use crate::error::Result;
use crate::motion::{MotionBasis, MotionTree, NodeId};
use crate::optim::loss::{canonical_bindings, evaluate, Batch, LossBreakdown, Problem};
use crate::optim::params::{ParamKey, ParamLayout, ParamStore, TreeState};
use crate::se3::{Vec3, SE3};
use crate::tracks::TrackSet;

/// Loss at `values` laid out by `layout` over the structure of `tree`.
pub fn loss_at(
    tree: &MotionTree,
    layout: &ParamLayout,
    values: &[f64],
    problem: &Problem,
    batch: &Batch,
) -> Result<LossBreakdown> {
    let state = TreeState::new(tree, layout, values);
    evaluate(&state, problem, batch)
}

/// Loss and its gradient with respect to every entry of `values`.
pub fn gradients_at(
    tree: &MotionTree,
    layout: &ParamLayout,
    values: &[f64],
    problem: &Problem,
    batch: &Batch,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let tape = Tape::new();
    let vars: Vec<Var> = values.iter().map(|&v| tape.var(v)).collect();
    let state = TreeState::new(tree, layout, &vars);
    let terms = evaluate(&state, problem, batch)?;
    let grads = tape.gradient_wrt(terms.total, &vars);
    Ok((terms.value(), grads))
}

/// Gradient of the total loss in [`ParamLayout`] order of `tree`.
pub fn compute_gradients(
    tree: &MotionTree,
    problem: &Problem,
    batch: &Batch,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let store = ParamStore::from_tree(tree);
    gradients_at(tree, &store.layout, &store.values, problem, batch)
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_RELATIVE_TOLERANCE: f64 = 1e-4;
pub const FD_ABSOLUTE_TOLERANCE: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckFailure {
    pub trial: usize,
    pub key: ParamKey,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradcheckReport {
    pub trials: usize,
    pub parameters: usize,
    /// Largest relative error among entries above the absolute floor.
    pub max_relative_error: f64,
    pub failures: Vec<GradcheckFailure>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// A small random fitting problem with every loss term active.
#[derive(Clone, Debug)]
pub struct GradInstance {
    pub tree: MotionTree,
    pub tracks: TrackSet,
    pub weights: LossWeights,
    pub knn: usize,
    pub rigidity_knn: usize,
    pub batch: Batch,
}

impl GradInstance {
    pub fn problem(&self) -> Result<Problem<'_>> {
        Problem::new(
            &self.tree,
            &self.tracks,
            canonical_bindings(&self.tracks, self.tree.canonical_frame()),
            self.knn,
            self.rigidity_knn,
            self.weights.clone(),
        )
    }
}

fn random_point<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    Vec3::new(rng.random(), rng.random(), rng.random())
}

fn random_bases<R: Rng + ?Sized>(rng: &mut R, frames: usize) -> Vec<MotionBasis> {
    let m = rng.random_range(1..=3);
    (0..m)
        .map(|_| MotionBasis {
            transforms: (0..frames).map(|_| SE3::random(rng, 0.5)).collect(),
        })
        .collect()
}

/// Two-level tree with at most ten non-root nodes and three bases per set,
/// up to five frames, and tracks that it does not explain.
pub fn random_instance<R: Rng + ?Sized>(rng: &mut R) -> Result<GradInstance> {
    let frames = rng.random_range(3..=5);
    let mut tree = MotionTree::new(frames, rng.random_range(0..frames))?;
    tree.set_basis_set(NodeId::ROOT, random_bases(rng, frames))?;
    let first = rng.random_range(4..=6);
    let mut level1 = Vec::new();
    for _ in 0..first {
        let m = tree.basis_count(NodeId::ROOT);
        let c = (0..m).map(|_| rng.random_range(0.2..1.0)).collect();
        level1.push(tree.add_node(NodeId::ROOT, random_point(rng), rng.random_range(0.2..1.2), c)?);
    }
    let parents = rng.random_range(1..=2);
    for &p in &level1[..parents] {
        tree.set_basis_set(p, random_bases(rng, frames))?;
        for _ in 0..rng.random_range(1..=2) {
            let m = tree.basis_count(p);
            let c = (0..m).map(|_| rng.random_range(0.2..1.0)).collect();
            tree.add_node(p, random_point(rng), rng.random_range(0.2..1.2), c)?;
        }
    }
    let n = 6;
    let positions: Vec<Vec<Vec3>> = (0..n)
        .map(|_| (0..frames).map(|_| random_point(rng)).collect())
        .collect();
    let visibility: Vec<Vec<bool>> = (0..n)
        .map(|_| {
            let mut v: Vec<bool> = (0..frames).map(|_| rng.random_bool(0.8)).collect();
            v[rng.random_range(0..frames)] = true;
            v
        })
        .collect();
    let tracks = TrackSet::new(positions, visibility)?;
    let mut w = || rng.random_range(0.5..2.0);
    let weights = LossWeights {
        track: w(),
        track_depth: 0.0,
        rigid_per_level: vec![w(), w()],
        rigid_level1_activated: 0.0,
        accel_bases: w(),
        accel_tracks: w(),
        radius_reg: w(),
    };
    Ok(GradInstance {
        tree,
        tracks,
        weights,
        knn: 3,
        rigidity_knn: 2,
        batch: Batch::full(frames, 4),
    })
}

/// Compares the analytic gradient with central differences on every
/// parameter of `instance`, appending disagreements to `report`.
pub fn check_instance(instance: &GradInstance, trial: usize, report: &mut GradcheckReport) -> Result<()> {
    let problem = instance.problem()?;
    let store = ParamStore::from_tree(&instance.tree);
    let (_, analytic) = gradients_at(&instance.tree, &store.layout, &store.values, &problem, &instance.batch)?;
    let mut probe = store.values.clone();
    for (k, &a) in analytic.iter().enumerate() {
        let x = probe[k];
        probe[k] = x + FD_STEP;
        let up = loss_at(&instance.tree, &store.layout, &probe, &problem, &instance.batch)?.total;
        probe[k] = x - FD_STEP;
        let down = loss_at(&instance.tree, &store.layout, &probe, &problem, &instance.batch)?.total;
        probe[k] = x;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let err = (a - numeric).abs();
        report.parameters += 1;
        if err <= FD_ABSOLUTE_TOLERANCE {
            continue;
        }
        let rel = err / a.abs().max(numeric.abs());
        report.max_relative_error = report.max_relative_error.max(rel);
        if !(rel < FD_RELATIVE_TOLERANCE) {
            report.failures.push(GradcheckFailure {
                trial,
                key: store.layout.keys()[k],
                analytic: a,
                numeric,
            });
        }
    }
    report.trials += 1;
    Ok(())
}

/// Runs `trials` random instances drawn from `seed`.
pub fn gradcheck(seed: u64, trials: usize) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradcheckReport::default();
    for trial in 0..trials {
        let instance = random_instance(&mut rng)?;
        check_instance(&instance, trial, &mut report)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::tests::one_level;
    use crate::optim::loss::Binding;

    #[test]
    fn zero_weights_give_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut inst = random_instance(&mut rng).unwrap();
        inst.weights = LossWeights::zero();
        let p = inst.problem().unwrap();
        let (l, g) = compute_gradients(&inst.tree, &p, &inst.batch).unwrap();
        assert_eq!(l.total, 0.0);
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn translation_gradient_is_twice_the_residual() {
        let b = MotionBasis {
            transforms: vec![SE3::identity(), SE3::translation_xyz(0.2, -0.1, 0.4)],
        };
        let tree = one_level(2, vec![b], &[(Vec3::ZERO, 1.0, vec![1.0])]);
        let p = Vec3::new(0.5, 0.5, 0.0);
        let obs = Vec3::new(1.0, 0.0, 0.0);
        let tracks = TrackSet::fully_visible(vec![vec![p, obs]]).unwrap();
        let weights = LossWeights {
            track: 1.0,
            ..LossWeights::zero()
        };
        let problem = Problem::new(&tree, &tracks, vec![Binding { point: p, track: 0 }], 4, 5, weights).unwrap();
        let batch = Batch::new(vec![1], 2, 4).unwrap();
        let (l, g) = compute_gradients(&tree, &problem, &batch).unwrap();
        let residual = p + Vec3::new(0.2, -0.1, 0.4) - obs;
        assert!((l.total - residual.norm_squared()).abs() < 1e-15);
        let layout = ParamLayout::new(&tree);
        for (axis, r) in residual.to_array().iter().enumerate() {
            let key = ParamKey::Basis {
                owner: NodeId::ROOT,
                basis: 0,
                frame: 1,
                component: 4 + axis as u8,
            };
            let k = layout.keys().iter().position(|x| *x == key).unwrap();
            assert!((g[k] - 2.0 * r).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let report = gradcheck(7, 10).unwrap();
        assert_eq!(report.trials, 10);
        assert!(report.passed(), "{:?}", &report.failures[..report.failures.len().min(5)]);
    }
}
