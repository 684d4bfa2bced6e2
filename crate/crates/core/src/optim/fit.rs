//! The staged fitting schedule.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{FitConfig, LossWeights};
use crate::densify::{densify_with, refine_by_gradient};
use crate::error::{Error, Result};
use crate::init::{init_first_level, spawn_children, SpawnOptions};
use crate::motion::{MotionTree, NodeId, OrientedPoint};
use crate::optim::adam::{adam_step, AdamState};
use crate::optim::grad::gradients_at;
use crate::optim::loss::{canonical_bindings, Batch, Binding, LossBreakdown, Problem};
use crate::optim::params::{ParamKey, ParamLayout, ParamStore};
use crate::tracks::{bbox_diagonal, TrackSet};

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    /// Global step index across stages.
    pub step: usize,
    pub stage: u8,
    pub nodes: usize,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub tree: MotionTree,
    pub history: Vec<HistoryRow>,
}

/// Initializes a one-level tree from `tracks` and fits it.
pub fn fit(tracks: &TrackSet, config: &FitConfig, weights: &LossWeights, seed: u64) -> Result<FitResult> {
    config.validate()?;
    weights.validate()?;
    let tree = init_first_level(tracks, config.bases, config.nodes, seed)?;
    fit_from(tree, tracks, config, weights, seed)
}

/// Fits an existing tree. A one-level tree goes through both stages; a
/// tree that already has a second level only through the second.
pub fn fit_from(
    mut tree: MotionTree,
    tracks: &TrackSet,
    config: &FitConfig,
    weights: &LossWeights,
    seed: u64,
) -> Result<FitResult> {
    config.validate()?;
    weights.validate()?;
    if tree.frame_count() != tracks.frame_count() {
        return Err(Error::ShapeMismatch(format!(
            "model has {} frames, tracks have {}",
            tree.frame_count(),
            tracks.frame_count()
        )));
    }
    tree.validate()?;
    let bindings = canonical_bindings(tracks, tree.canonical_frame());
    let points: Vec<OrientedPoint> = bindings.iter().map(|b| OrientedPoint::at(b.point)).collect();
    let positions: Vec<_> = bindings.iter().map(|b| b.point).collect();
    let mut run = Run {
        tracks,
        bindings,
        points,
        config,
        seed,
        threshold: config.densify_threshold_ratio * bbox_diagonal(&positions).max(f64::MIN_POSITIVE),
        rng: ChaCha8Rng::seed_from_u64(seed),
        step: 0,
        history: Vec::new(),
    };
    run.rng.set_stream(1);

    if tree.max_level() <= 1 && config.stage1_steps > 0 {
        run.stage(&mut tree, 1, config.stage1_steps, weights)?;
    }
    if config.stage2_steps > 0 && config.max_levels >= 2 {
        if tree.max_level() < 2 {
            let opts = SpawnOptions {
                children_per_node: config.children_per_node,
                child_bases: config.child_bases,
                knn: config.knn,
                radius_mult: config.spawn_radius_mult,
                seed,
            };
            tree = spawn_children(&tree, &run.points, &opts)?;
            log::info!("spawned second level: {} nodes", tree.len());
        }
        run.stage(&mut tree, 2, config.stage2_steps, &weights.activated())?;
    }
    Ok(FitResult {
        tree,
        history: run.history,
    })
}

struct Run<'a> {
    tracks: &'a TrackSet,
    bindings: Vec<Binding>,
    points: Vec<OrientedPoint>,
    config: &'a FitConfig,
    seed: u64,
    threshold: f64,
    rng: ChaCha8Rng,
    step: usize,
    history: Vec<HistoryRow>,
}

/// Which parameters a stage trains. Bases are trained with the level of the
/// children that blend them; canonical-frame bases stay fixed.
fn trainable_mask(tree: &MotionTree, layout: &ParamLayout, stage: u8) -> Vec<bool> {
    let active = |level: u32| stage >= 2 || level == 1;
    let level_of = |id: NodeId| tree.node(id).map_or(0, |n| n.level);
    layout
        .keys()
        .iter()
        .map(|k| match *k {
            ParamKey::Basis { owner, frame, .. } => {
                frame as usize != tree.canonical_frame() && active(level_of(owner) + 1)
            }
            _ => active(level_of(k.node())),
        })
        .collect()
}

impl Run<'_> {
    fn stage(&mut self, tree: &mut MotionTree, stage: u8, steps: usize, weights: &LossWeights) -> Result<()> {
        let cfg = self.config;
        let frames = tree.frame_count();
        let mut problem = Problem::new(
            tree,
            self.tracks,
            self.bindings.clone(),
            cfg.knn,
            cfg.rigidity_knn,
            weights.clone(),
        )?;
        let mut store = ParamStore::from_tree(tree);
        let mut adam = AdamState::new(store.values.len());
        let mut mask = trainable_mask(tree, &store.layout, stage);
        let mut grad_norms: BTreeMap<NodeId, (f64, usize)> = BTreeMap::new();

        for s in 0..steps {
            if s > 0 && cfg.densify_every > 0 && s % cfg.densify_every == 0 {
                store.write_to(tree);
                let updated = if stage == 1 {
                    densify_with(
                        tree,
                        &self.points,
                        cfg.knn,
                        self.threshold,
                        cfg.points_per_node,
                        self.seed.wrapping_add(self.step as u64),
                    )?
                } else {
                    let stats: BTreeMap<NodeId, f64> = grad_norms
                        .iter()
                        .map(|(&id, &(sum, n))| (id, sum / n.max(1) as f64))
                        .collect();
                    refine_by_gradient(
                        tree,
                        &stats,
                        &self.points,
                        cfg.knn,
                        cfg.refine_add_threshold,
                        cfg.refine_prune_threshold,
                    )?
                };
                grad_norms.clear();
                if updated != *tree {
                    log::info!("step {}: {} -> {} nodes", self.step, tree.len(), updated.len());
                    *tree = updated;
                    let next = ParamStore::from_tree(tree);
                    adam = adam.remap(&store.layout, &next.layout);
                    store = next;
                    mask = trainable_mask(tree, &store.layout, stage);
                    problem.rebuild(tree, cfg.knn, cfg.rigidity_knn)?;
                }
            }

            let batch = Batch::sample(&mut self.rng, frames, cfg.batch_frames, cfg.rigidity_max_delta);
            let (loss, grads) = gradients_at(tree, &store.layout, &store.values, &problem, &batch)?;
            if !loss.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { step: self.step });
            }
            if stage >= 2 {
                accumulate_coefficient_norms(tree, &store.layout, &grads, &mut grad_norms);
            }
            if self.step.is_multiple_of(100) {
                log::debug!("step {} loss {:.6e} track {:.6e}", self.step, loss.total, loss.track);
            }
            self.history.push(HistoryRow {
                step: self.step,
                stage,
                nodes: tree.len(),
                loss,
            });
            adam_step(&mut store, &grads, &mut adam, cfg, Some(&mask))?;
            self.step += 1;
        }
        store.write_to(tree);
        Ok(())
    }
}

fn accumulate_coefficient_norms(
    tree: &MotionTree,
    layout: &ParamLayout,
    grads: &[f64],
    acc: &mut BTreeMap<NodeId, (f64, usize)>,
) {
    for i in tree.leaf_indices() {
        let id = tree.nodes()[i].id;
        if id == NodeId::ROOT {
            continue;
        }
        let norm = grads[layout.coefficient_range(i)]
            .iter()
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        let e = acc.entry(id).or_insert((0.0, 0));
        e.0 += norm;
        e.1 += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{trajectories, MotionBasis};
    use crate::se3::{Vec3, SE3};
    use crate::motion::tests::one_level;
    use rand::Rng;

    fn quick(stage1: usize, stage2: usize) -> FitConfig {
        FitConfig {
            stage1_steps: stage1,
            stage2_steps: stage2,
            nodes: 8,
            bases: 2,
            children_per_node: 3,
            child_bases: 2,
            densify_every: 20,
            ..FitConfig::default()
        }
    }

    fn two_body_tracks(frames: usize) -> TrackSet {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut pos = Vec::new();
        for body in 0..2 {
            for _ in 0..30 {
                let p = Vec3::new(
                    body as f64 * 3.0 + rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                );
                pos.push(
                    (0..frames)
                        .map(|t| {
                            let s = t as f64 / frames as f64;
                            let m = if body == 0 {
                                SE3::rot_z(0.5 * s)
                            } else {
                                SE3::translation_xyz(0.0, s, 0.2 * s)
                            };
                            m.apply(&p)
                        })
                        .collect(),
                );
            }
        }
        TrackSet::fully_visible(pos).unwrap()
    }

    #[test]
    fn zero_steps_return_the_initial_tree() {
        let tracks = two_body_tracks(6);
        let cfg = quick(0, 0);
        let res = fit(&tracks, &cfg, &LossWeights::default(), 3).unwrap();
        assert_eq!(res.tree, init_first_level(&tracks, 2, 8, 3).unwrap());
        assert!(res.history.is_empty());
    }

    #[test]
    fn both_stages_run_and_are_deterministic() {
        let tracks = two_body_tracks(6);
        let cfg = quick(30, 30);
        let a = fit(&tracks, &cfg, &LossWeights::default(), 5).unwrap();
        a.tree.validate().unwrap();
        assert_eq!(a.tree.max_level(), 2);
        assert_eq!(a.history.len(), 60);
        assert_eq!(a.history[0].stage, 1);
        assert_eq!(a.history[59].stage, 2);
        let b = fit(&tracks, &cfg, &LossWeights::default(), 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn self_consistent_fit_drives_the_loss_down() {
        // Tracks produced by a known tree, refit from a perturbed copy with
        // the same topology.
        let frames = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let basis = MotionBasis {
            transforms: (0..frames)
                .map(|t| {
                    SE3::rot_z(0.1 * t as f64).compose(&SE3::translation_xyz(0.1 * t as f64, 0.0, 0.0))
                })
                .collect(),
        };
        let nodes: Vec<(Vec3, f64, Vec<f64>)> = (0..6)
            .map(|_| (Vec3::new(rng.random(), rng.random(), rng.random()), 0.4, vec![1.0]))
            .collect();
        let truth = one_level(frames, vec![basis.clone()], &nodes);
        let pts: Vec<OrientedPoint> = (0..40)
            .map(|_| OrientedPoint::at(Vec3::new(rng.random(), rng.random(), rng.random())))
            .collect();
        let tracks = TrackSet::fully_visible(trajectories(&truth, &pts, 4).unwrap()).unwrap();

        let mut start = truth.clone();
        let b = &mut start.basis_set_mut(NodeId::ROOT).unwrap().bases[0];
        for t in 1..frames {
            b.transforms[t] = b.transforms[t].compose(&SE3::translation_xyz(0.02, -0.01, 0.015));
        }
        let cfg = FitConfig {
            stage1_steps: 1500,
            stage2_steps: 0,
            densify_every: 0,
            batch_frames: frames,
            learning_rates: crate::config::LearningRates {
                basis: 1e-3,
                ..Default::default()
            },
            ..FitConfig::default()
        };
        let w = LossWeights {
            track: 1.0,
            ..LossWeights::zero()
        };
        let res = fit_from(start, &tracks, &cfg, &w, 1).unwrap();
        let first = res.history.first().unwrap().loss.track;
        let last = res.history.last().unwrap().loss.track;
        assert!(last < 1e-6 * first, "{first} -> {last}");
    }
}
