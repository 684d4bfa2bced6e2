use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use himor::io;
use himor::metrics::epe;
use himor::{MotionTree, TrackSet, Vec3};
use tempfile::TempDir;

fn himor(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_himor"))
        .args(args)
        .output()
        .expect("spawn himor")
}

fn ok(args: &[&str]) -> Output {
    let out = himor(args);
    assert!(
        out.status.success(),
        "himor {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

fn s(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

fn static_tracks() -> TrackSet {
    let positions = (0..6)
        .map(|i| {
            let x = Vec3::new(i as f64, (i * i) as f64 * 0.1, 0.3);
            vec![x; 4]
        })
        .collect();
    TrackSet::fully_visible(positions).unwrap()
}

#[test]
fn eval_of_a_perfect_model_is_exact() {
    let dir = TempDir::new().unwrap();
    let tracks = p(&dir, "tracks.json");
    let model = p(&dir, "model.json");
    io::save_tracks(&tracks, &static_tracks()).unwrap();
    io::save_model(&model, &MotionTree::new(4, 0).unwrap()).unwrap();
    let out = ok(&["eval", "--model", s(&model), "--tracks", s(&tracks), "--metrics", "epe,pck"]);
    let v = stdout_json(&out);
    assert_eq!(v["epe"], 0.0);
    assert_eq!(v["pck_t"], 1.0);
    assert!(String::from_utf8_lossy(&out.stderr).contains("resolved config"));
}

#[test]
fn gradcheck_passes() {
    let out = ok(&["gradcheck", "--seed", "3", "--trials", "20"]);
    let v = stdout_json(&out);
    assert_eq!(v["trials"], 20);
    assert_eq!(v["failures"], 0);
}

#[test]
fn usage_errors_exit_1() {
    let out = himor(&["fit", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
    assert_eq!(himor(&[]).status.code(), Some(1));
    assert_eq!(himor(&["--help"]).status.code(), Some(0));
}

#[test]
fn data_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let missing = p(&dir, "missing.json");
    let out = himor(&["init", "--tracks", s(&missing), "--out", s(&p(&dir, "m.json"))]);
    assert_eq!(out.status.code(), Some(2));

    let bad = p(&dir, "bad.json");
    std::fs::write(&bad, "{\n  \"format_version\": 1,\n  oops\n}").unwrap();
    let out = himor(&["init", "--tracks", s(&bad), "--out", s(&p(&dir, "m.json"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
}

#[test]
fn bad_pck_ratio_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let tracks = p(&dir, "tracks.json");
    let model = p(&dir, "model.json");
    io::save_tracks(&tracks, &static_tracks()).unwrap();
    io::save_model(&model, &MotionTree::new(4, 0).unwrap()).unwrap();
    let out = himor(&["eval", "--model", s(&model), "--tracks", s(&tracks), "--pck-ratio", "0"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn rigid_pipeline_recovers_the_motion() {
    let dir = TempDir::new().unwrap();
    let tracks = p(&dir, "tracks.bin");
    let model = p(&dir, "init.json");
    let fitted = p(&dir, "fit.json");
    let history = p(&dir, "history.csv");
    let config = p(&dir, "config.json");
    std::fs::write(
        &config,
        r#"{"format_version":1,"seed":2,"fit":{"bases":1,"nodes":20,"max_levels":1,"stage1_steps":100,"densify_every":50}}"#,
    )
    .unwrap();
    ok(&["generate", "--preset", "rigid-body", "--seed", "1", "--binary", "--out", s(&tracks)]);
    ok(&["init", "--tracks", s(&tracks), "--nodes", "20", "--bases", "1", "--out", s(&model)]);
    ok(&[
        "fit", "--tracks", s(&tracks), "--config", s(&config), "--model", s(&model), "--out", s(&fitted),
        "--history", s(&history),
    ]);
    let rows = std::fs::read_to_string(&history).unwrap();
    assert_eq!(rows.lines().count(), 101);

    let out = ok(&["eval", "--model", s(&fitted), "--tracks", s(&tracks), "--metrics", "epe"]);
    let v = stdout_json(&out);
    let gt = io::load_tracks(&tracks).unwrap();
    let diag = gt.bbox_diagonal(himor::select_canonical_frame(&gt));
    let e = v["epe"].as_f64().unwrap();
    assert!(e < 1e-3 * diag, "epe {e} vs diagonal {diag}");
    assert!(v.get("pck_t").is_none());

    // Export through the tracks file agrees with eval.
    let csv = p(&dir, "traj.csv");
    ok(&["export", "--model", s(&fitted), "--points", s(&tracks), "--out", s(&csv)]);
    let traj = io::read_trajectories_csv(std::fs::File::open(&csv).unwrap()).unwrap();
    assert_eq!(epe(&traj, &gt).unwrap(), e);
}

#[test]
fn decompose_extremes_match_export_and_canonical() {
    let dir = TempDir::new().unwrap();
    let tracks = p(&dir, "tracks.json");
    let model = p(&dir, "model.json");
    ok(&["generate", "--preset", "two-link", "--seed", "0", "--out", s(&tracks)]);
    ok(&["init", "--tracks", s(&tracks), "--nodes", "12", "--bases", "3", "--out", s(&model)]);

    let full = p(&dir, "full.csv");
    let all = p(&dir, "all.csv");
    let none = p(&dir, "none.csv");
    ok(&["export", "--model", s(&model), "--points", s(&tracks), "--out", s(&full)]);
    ok(&["decompose", "--model", s(&model), "--active-levels", "1", "--points", s(&tracks), "--out", s(&all)]);
    ok(&["decompose", "--model", s(&model), "--active-levels", "--points", s(&tracks), "--out", s(&none)]);
    assert_eq!(std::fs::read(&full).unwrap(), std::fs::read(&all).unwrap());

    let tree = io::load_model(&model).unwrap();
    let gt = io::load_tracks(&tracks).unwrap();
    let still = io::read_trajectories_csv(std::fs::File::open(&none).unwrap()).unwrap();
    for (i, traj) in still.iter().enumerate() {
        for x in traj {
            assert_eq!(*x, gt.position(i, tree.canonical_frame()));
        }
    }
}

#[test]
fn fit_is_bitwise_identical_across_thread_counts() {
    let dir = TempDir::new().unwrap();
    let tracks = p(&dir, "tracks.json");
    let config = p(&dir, "config.json");
    std::fs::write(
        &config,
        r#"{"format_version":1,"seed":5,"fit":{"bases":3,"nodes":10,"stage1_steps":12,"stage2_steps":12,"densify_every":6,"children_per_node":2,"child_bases":2}}"#,
    )
    .unwrap();
    ok(&["generate", "--preset", "two-link", "--seed", "4", "--out", s(&tracks)]);
    let mut outputs = Vec::new();
    for threads in ["1", "8"] {
        let model = p(&dir, &format!("model{threads}.json"));
        let history = p(&dir, &format!("history{threads}.csv"));
        ok(&[
            "--threads", threads, "fit", "--tracks", s(&tracks), "--config", s(&config), "--out", s(&model),
            "--history", s(&history),
        ]);
        outputs.push((std::fs::read(&model).unwrap(), std::fs::read(&history).unwrap()));
    }
    assert!(outputs[0].0 == outputs[1].0, "model JSON differs");
    assert!(outputs[0].1 == outputs[1].1, "history CSV differs");
}

#[test]
fn embed_sim_prints_both_scores() {
    let dir = TempDir::new().unwrap();
    let pred = p(&dir, "pred.json");
    let gt = p(&dir, "gt.json");
    let doc = r#"{"dim":2,"frames":[[1,0],[0,1],[1,0]]}"#;
    std::fs::write(&pred, doc).unwrap();
    std::fs::write(&gt, doc).unwrap();
    let out = ok(&["embed-sim", "--pred", s(&pred), "--gt", s(&gt), "--interval", "2"]);
    let v = stdout_json(&out);
    assert_eq!(v["clip_i"], 1.0);
    assert_eq!(v["clip_t"], 1.0);
    let out = himor(&["embed-sim", "--pred", s(&pred), "--gt", s(&gt), "--interval", "3"]);
    assert_eq!(out.status.code(), Some(1));
}
