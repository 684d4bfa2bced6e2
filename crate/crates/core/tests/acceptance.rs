//! One test per acceptance criterion. Each prints a `PASS`/`FAIL` line to
//! stderr (uncaptured) and then asserts.

use std::collections::BTreeSet;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use himor::config::{FitConfig, LossWeights};
use himor::densify::{densify_by_curve_distance, densify_candidates};
use himor::io::{model_to_json, write_history_csv};
use himor::metrics::{clip_i, epe, pck_t};
use himor::motion::{trajectories, DEFAULT_KNN};
use himor::optim::{fit, gradcheck, loss_rigidity, Batch, FitResult, RigidGraph};
use himor::synth::{gen_synthetic, SceneSpec, SyntheticScene};
use himor::{dq_blend, kabsch_se3, MotionBasis, MotionTree, NodeId, OrientedPoint, Quat, TrackSet, Vec3, SE3};

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr().lock(), "{verdict} criterion {id} ({name}): {detail}");
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

fn canonical_points(tracks: &TrackSet, tree: &MotionTree) -> Vec<OrientedPoint> {
    tracks
        .frame_positions(tree.canonical_frame())
        .into_iter()
        .map(OrientedPoint::at)
        .collect()
}

fn fit_epe(scene: &SyntheticScene, result: &FitResult) -> f64 {
    let points = canonical_points(&scene.tracks, &result.tree);
    epe(&trajectories(&result.tree, &points, DEFAULT_KNN).unwrap(), &scene.tracks).unwrap()
}

/// Mean track loss over the last `window` steps against the first step.
fn smoothed_track_ratio(result: &FitResult, window: usize) -> f64 {
    let h = &result.history;
    let tail = &h[h.len().saturating_sub(window)..];
    let mean = tail.iter().map(|r| r.loss.track).sum::<f64>() / tail.len() as f64;
    mean / h[0].loss.track
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<Vec3> {
    (0..n)
        .map(|_| Vec3::new(rng.random_range(-scale..scale), rng.random_range(-scale..scale), rng.random_range(-scale..scale)))
        .collect()
}

#[test]
fn criterion_01_gradient_fidelity() {
    let start = Instant::now();
    let r = gradcheck(2024, 100).unwrap();
    let secs = start.elapsed().as_secs_f64();
    report(
        1,
        "gradient fidelity",
        r.trials == 100 && r.passed() && secs < 120.0,
        &format!(
            "{} trials, {} parameters, {} failures, max relative error {:.2e}, {secs:.1}s",
            r.trials,
            r.parameters,
            r.failures.len(),
            r.max_relative_error
        ),
    );
}

#[test]
fn criterion_02_rigid_body_recovery() {
    let start = Instant::now();
    let scene = gen_synthetic(&SceneSpec::rigid_body(), 0).unwrap();
    let config = FitConfig {
        nodes: 50,
        bases: 1,
        max_levels: 1,
        ..FitConfig::default()
    };
    let result = fit(&scene.tracks, &config, &LossWeights::default(), 0).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let diag = scene.tracks.bbox_diagonal(result.tree.canonical_frame());
    let e = fit_epe(&scene, &result);
    let _ = writeln!(
        std::io::stderr().lock(),
        "note: rigid body smoothed track loss / initial = {:.3e} (initial {:.3e})",
        smoothed_track_ratio(&result, 100),
        result.history[0].loss.track
    );
    report(
        2,
        "rigid-body recovery",
        e < 1e-3 * diag && secs < 300.0,
        &format!(
            "EPE {e:.3e} vs bound {:.3e} (diagonal {diag:.3}), {} nodes, {secs:.1}s",
            1e-3 * diag,
            result.tree.len() - 1
        ),
    );
}

#[test]
fn criterion_03_hierarchy_benefit() {
    let spec = SceneSpec::two_link();
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let scene = gen_synthetic(&spec, seed).unwrap();
        let two_cfg = FitConfig {
            nodes: 10,
            bases: 4,
            children_per_node: 4,
            child_bases: 2,
            stage1_steps: 400,
            stage2_steps: 400,
            densify_every: 0,
            ..FitConfig::default()
        };
        let two = fit(&scene.tracks, &two_cfg, &LossWeights::default(), seed).unwrap();
        let nodes = two.tree.len() - 1;
        let bases: usize = two.tree.basis_sets().map(|b| b.bases.len()).sum();
        let flat_cfg = FitConfig {
            nodes,
            bases,
            max_levels: 1,
            stage1_steps: two_cfg.stage1_steps + two_cfg.stage2_steps,
            stage2_steps: 0,
            densify_every: 0,
            ..FitConfig::default()
        };
        let flat = fit(&scene.tracks, &flat_cfg, &LossWeights::default(), seed).unwrap();
        assert_eq!(flat.tree.len() - 1, nodes);
        assert_eq!(flat.tree.basis_sets().map(|b| b.bases.len()).sum::<usize>(), bases);
        let (e2, e1) = (fit_epe(&scene, &two), fit_epe(&scene, &flat));
        if e2 <= e1 {
            wins += 1;
        }
        lines.push(format!("seed {seed}: two-level {e2:.4} flat {e1:.4}"));
        let _ = writeln!(
            std::io::stderr().lock(),
            "note: two-link seed {seed} smoothed track loss / initial: two-level {:.3}, flat {:.3}",
            smoothed_track_ratio(&two, 100),
            smoothed_track_ratio(&flat, 100)
        );
    }
    report(
        3,
        "hierarchy benefit",
        wins >= 4,
        &format!("two-level wins {wins}/5 at equal budgets; {}", lines.join("; ")),
    );
}

#[test]
fn criterion_04_rigidity_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let frames = rng.random_range(3..=8);
        let mut tree = MotionTree::new(frames, 0).unwrap();
        let common = MotionBasis {
            transforms: (0..frames).map(|_| SE3::random(&mut rng, 2.0)).collect(),
        };
        tree.set_basis_set(NodeId::ROOT, vec![common]).unwrap();
        let mut level1 = Vec::new();
        let n = rng.random_range(3..=12);
        for p in random_points(&mut rng, n, 1.0) {
            level1.push(tree.add_node(NodeId::ROOT, p, rng.random_range(0.2..1.0), vec![1.0]).unwrap());
        }
        // Children under identity bases move with their parent.
        let parent = level1[0];
        tree.set_basis_set(parent, vec![MotionBasis::identity(frames)]).unwrap();
        for p in random_points(&mut rng, 4, 1.0) {
            tree.add_node(parent, p, 0.5, vec![1.0]).unwrap();
        }
        let graph = RigidGraph::build(&tree, 5).unwrap();
        let weights = LossWeights {
            rigid_per_level: vec![rng.random_range(0.1..3.0), rng.random_range(0.1..3.0)],
            ..LossWeights::default()
        };
        let pairs = Batch::full(frames, frames).pairs;
        worst = worst.max(loss_rigidity(&tree, &graph, &weights, &pairs).unwrap().abs());
    }
    report(
        4,
        "rigidity invariance",
        worst <= 1e-10,
        &format!("largest rigidity loss over 50 common-motion trees {worst:.2e}"),
    );
}

#[test]
fn criterion_05_kabsch_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut rot, mut trans) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let n = rng.random_range(3..=40);
        let src = random_points(&mut rng, n, 1.0);
        let truth = SE3::random(&mut rng, 3.0);
        let dst: Vec<Vec3> = src.iter().map(|p| truth.apply(p)).collect();
        let got = kabsch_se3(&src, &dst).unwrap();
        let (r, t) = got.distance(&truth);
        rot = rot.max(r);
        trans = trans.max(t);
    }
    report(
        5,
        "Kabsch oracle",
        rot <= 1e-9 && trans <= 1e-9,
        &format!("worst rotation error {rot:.2e} rad, translation error {trans:.2e} over 1000 cases"),
    );
}

#[test]
fn criterion_06_dual_quaternion_blend() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut unit, mut perm, mut cover, mut avg) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let se3_gap = |a: &SE3, b: &SE3| {
        let (r, t) = a.distance(b);
        r.max(t)
    };
    for _ in 0..1000 {
        let k = rng.random_range(1..=6);
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
        let sum: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|x| x / sum).collect();
        // Keep rotations within a half-turn of each other so the blend is well conditioned.
        let base = SE3::random(&mut rng, 2.0);
        let ts: Vec<SE3> = (0..k)
            .map(|_| {
                let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                let q = Quat::from_axis_angle(axis, rng.random_range(-1.5..1.5));
                let t = random_points(&mut rng, 1, 1.0)[0];
                base.compose(&SE3::new(q, t))
            })
            .collect();
        let dqs: Vec<_> = ts.iter().map(SE3::to_dual_quat).collect();
        let b = dq_blend(&w, &dqs).unwrap();
        unit = unit.max((b.real.norm() - 1.0).abs()).max(b.real.dot(&b.dual).abs());
        let blended = b.to_se3().unwrap();

        let mut order: Vec<usize> = (0..k).collect();
        order.shuffle(&mut rng);
        let pw: Vec<f64> = order.iter().map(|&i| w[i]).collect();
        let pd: Vec<_> = order.iter().map(|&i| dqs[i]).collect();
        perm = perm.max(se3_gap(&dq_blend(&pw, &pd).unwrap().to_se3().unwrap(), &blended));

        let flipped: Vec<_> = dqs.iter().map(|d| if rng.random_bool(0.5) { d.negate() } else { *d }).collect();
        cover = cover.max(se3_gap(&dq_blend(&w, &flipped).unwrap().to_se3().unwrap(), &blended));

        let shifts = random_points(&mut rng, k, 2.0);
        let pure: Vec<_> = shifts.iter().map(|s| SE3::from_translation(*s).to_dual_quat()).collect();
        let expect = shifts.iter().zip(&w).fold(Vec3::ZERO, |acc, (s, wi)| acc + s.scale(*wi));
        let got = dq_blend(&w, &pure).unwrap().to_se3().unwrap();
        avg = avg.max(got.translation.distance(&expect)).max(got.rotation.angle_to(&Quat::identity()));
    }
    report(
        6,
        "dual-quaternion blend",
        unit <= 1e-9 && perm <= 1e-9 && cover <= 1e-9 && avg <= 1e-9,
        &format!(
            "worst over 1000 cases: unit/orthogonality {unit:.1e}, permutation {perm:.1e}, double cover {cover:.1e}, translation average {avg:.1e}"
        ),
    );
}

#[test]
fn criterion_07_densification_coverage() {
    let frames = 6;
    let mut tree = MotionTree::new(frames, 0).unwrap();
    let swing = MotionBasis {
        transforms: (0..frames)
            .map(|t| SE3::rot_z(0.25 * t as f64).compose(&SE3::translation_xyz(0.1 * t as f64, 0.0, 0.05 * t as f64)))
            .collect(),
    };
    tree.set_basis_set(NodeId::ROOT, vec![swing]).unwrap();
    let mut points = Vec::new();
    // 70 points on a 7x10 patch covered by nodes, 30 on a distant 5x6 patch.
    for i in 0..7 {
        for j in 0..10 {
            let p = Vec3::new(0.1 * i as f64, 0.1 * j as f64, 0.0);
            points.push(OrientedPoint::at(p));
            if i % 2 == 0 && j % 2 == 0 {
                tree.add_node(NodeId::ROOT, p, 0.2, vec![1.0]).unwrap();
            }
        }
    }
    for i in 0..5 {
        for j in 0..6 {
            points.push(OrientedPoint::at(Vec3::new(3.0 + 0.1 * i as f64, 2.0 + 0.1 * j as f64, 0.5)));
        }
    }
    let threshold = 0.15;
    let before = densify_candidates(&tree, &points, DEFAULT_KNN, threshold).unwrap().len();
    let grown = densify_by_curve_distance(&tree, &points, DEFAULT_KNN, threshold, 7).unwrap();
    let after = densify_candidates(&grown, &points, DEFAULT_KNN, threshold).unwrap().len();
    let covered = 1.0 - after as f64 / points.len() as f64;
    report(
        7,
        "densification coverage",
        before * 10 == points.len() * 3 && after == 0,
        &format!(
            "{before}/{} points beyond threshold before, {after} after one pass ({:.0}% covered), {} nodes added",
            points.len(),
            100.0 * covered,
            grown.len() - tree.len()
        ),
    );
}

#[test]
fn criterion_08_decomposition_consistency() {
    let scene = gen_synthetic(&SceneSpec::pendulum_on_cart(), 0).unwrap();
    let config = FitConfig {
        nodes: 20,
        bases: 2,
        children_per_node: 4,
        child_bases: 2,
        stage1_steps: 300,
        stage2_steps: 300,
        densify_every: 0,
        ..FitConfig::default()
    };
    let result = fit(&scene.tracks, &config, &LossWeights::default(), 0).unwrap();
    let tree = &result.tree;
    assert_eq!(tree.max_level(), 2);
    let points = canonical_points(&scene.tracks, tree);
    let full = trajectories(tree, &points, DEFAULT_KNN).unwrap();

    let all: BTreeSet<u32> = (1..=tree.max_level()).collect();
    let exact_all = trajectories(&tree.freeze_levels(&all), &points, DEFAULT_KNN).unwrap() == full;
    let still = trajectories(&tree.freeze_levels(&BTreeSet::new()), &points, DEFAULT_KNN).unwrap();
    let exact_none = still
        .iter()
        .zip(&points)
        .all(|(traj, p)| traj.iter().all(|x| *x == p.position));

    let coarse = trajectories(&tree.freeze_levels(&BTreeSet::from([1])), &points, DEFAULT_KNN).unwrap();
    let mean_gap = |select: &dyn Fn(usize) -> bool| {
        let (mut sum, mut n) = (0.0, 0usize);
        for (i, traj) in coarse.iter().enumerate().filter(|(i, _)| select(*i)) {
            for (t, x) in traj.iter().enumerate() {
                sum += x.distance(&scene.coarse[i][t]);
                n += 1;
            }
        }
        sum / n as f64
    };
    let link_length = 1.0;
    let gap = mean_gap(&|_| true);
    let pendulum_gap = mean_gap(&|i| scene.labels[i] == 1);
    report(
        8,
        "decomposition consistency",
        exact_all && exact_none && gap <= 0.05 * link_length,
        &format!(
            "all levels exact: {exact_all}; no levels exact: {exact_none}; coarse-component error {gap:.4} vs bound {:.4} \
             (pendulum points only {pendulum_gap:.4}; full-fit EPE {:.4})",
            0.05 * link_length,
            epe(&full, &scene.tracks).unwrap()
        ),
    );
}

fn serialized_fit(tracks: &TrackSet, threads: usize) -> (String, Vec<u8>) {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    let config = FitConfig {
        nodes: 10,
        bases: 3,
        children_per_node: 2,
        child_bases: 2,
        stage1_steps: 30,
        stage2_steps: 30,
        densify_every: 10,
        ..FitConfig::default()
    };
    let result = pool.install(|| fit(tracks, &config, &LossWeights::default(), 9).unwrap());
    let mut csv = Vec::new();
    write_history_csv(&mut csv, &result.history).unwrap();
    (model_to_json(&result.tree).unwrap(), csv)
}

#[test]
fn criterion_09_determinism() {
    let scene = gen_synthetic(&SceneSpec::two_link(), 3).unwrap();
    let one = serialized_fit(&scene.tracks, 1);
    let again = serialized_fit(&scene.tracks, 1);
    let eight = serialized_fit(&scene.tracks, 8);
    let same_model = one.0 == again.0 && one.0 == eight.0;
    let same_history = one.1 == again.1 && one.1 == eight.1;
    report(
        9,
        "determinism",
        same_model && same_history,
        &format!("model JSON identical: {same_model}; history CSV identical: {same_history} (1, 1 and 8 threads)"),
    );
}

#[test]
fn criterion_10_metric_sanity() {
    let gt = TrackSet::fully_visible(
        (0..5)
            .map(|i| (0..4).map(|t| Vec3::new(i as f64, t as f64, 0.5 * (i * t) as f64)).collect())
            .collect(),
    )
    .unwrap();
    let same = gt.positions().to_vec();
    let shifted: Vec<Vec<Vec3>> = same
        .iter()
        .map(|tr| tr.iter().map(|p| *p + Vec3::new(0.0, 0.0, 1.0)).collect())
        .collect();
    let far: Vec<Vec<Vec3>> = same
        .iter()
        .map(|tr| tr.iter().map(|p| *p + Vec3::new(1e3, 0.0, 0.0)).collect())
        .collect();
    let emb = vec![vec![1.0, 0.0, 2.0], vec![0.5, -1.0, 0.0]];
    let ortho = vec![vec![0.0, 3.0, 0.0], vec![2.0, 1.0, 7.0]];
    let checks = [
        ("epe(gt, gt) = 0", epe(&same, &gt).unwrap() == 0.0),
        ("epe under unit shift = 1", epe(&shifted, &gt).unwrap() == 1.0),
        ("pck_t(gt, gt) = 1", pck_t(&same, &gt, 0.05).unwrap() == 1.0),
        ("pck_t far = 0", pck_t(&far, &gt, 0.05).unwrap() == 0.0),
        ("clip_i identical = 1", clip_i(&emb, &emb).unwrap() == 1.0),
        ("clip_i orthogonal = 0", clip_i(&emb, &ortho).unwrap() == 0.0),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    report(
        10,
        "metric sanity",
        failed.is_empty(),
        &if failed.is_empty() {
            format!("{} exact cases hold", checks.len())
        } else {
            format!("failed: {}", failed.join(", "))
        },
    );
}
