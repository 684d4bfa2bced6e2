use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::{json, Value};

use himor::config::RunConfig;
use himor::io;
use himor::metrics::{self, DEFAULT_PCK_RATIO};
use himor::motion::{trajectories, DEFAULT_KNN};
use himor::optim::{self, HistoryRow};
use himor::synth::{self, SceneSpec};
use himor::{Error, MotionTree, OrientedPoint, TrackSet};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

/// Hierarchical SE(3) motion trees fitted to 3D point tracks.
#[derive(Parser, Debug)]
#[command(name = "himor", version)]
struct Cli {
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// Log progress to stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic tracks from an articulated scene.
    Generate(GenerateArgs),
    /// Build a one-level tree from tracks.
    Init(InitArgs),
    /// Fit a tree to tracks.
    Fit(FitArgs),
    /// Score a fitted tree against tracks.
    Eval(EvalArgs),
    /// Trajectories with only some tree levels moving.
    Decompose(DecomposeArgs),
    /// Trajectories of points under the full tree.
    Export(ExportArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Embedding similarity scores.
    EmbedSim(EmbedSimArgs),
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Preset {
    RigidBody,
    PendulumOnCart,
    TwoLink,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Scene description (JSON).
    #[arg(long, required_unless_present = "preset", conflicts_with = "preset")]
    spec: Option<PathBuf>,
    /// Built-in scene.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output tracks.
    #[arg(long)]
    out: PathBuf,
    /// Write tracks in the binary layout instead of JSON.
    #[arg(long)]
    binary: bool,
    /// Also write the coarse component (non-root joints held still) as CSV.
    #[arg(long)]
    coarse: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InitArgs {
    #[arg(long)]
    tracks: PathBuf,
    #[arg(long, default_value_t = 50)]
    nodes: usize,
    #[arg(long, default_value_t = 10)]
    bases: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output model.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    tracks: PathBuf,
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Start from this model instead of initializing one.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Output model.
    #[arg(long)]
    out: PathBuf,
    /// Per-step loss history (CSV).
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    tracks: PathBuf,
    /// Comma-separated: epe, pck.
    #[arg(long, value_delimiter = ',', default_value = "epe,pck")]
    metrics: Vec<MetricName>,
    #[arg(long, default_value_t = DEFAULT_PCK_RATIO)]
    pck_ratio: f64,
    /// Leaves per point in skinning.
    #[arg(long, default_value_t = DEFAULT_KNN)]
    knn: usize,
}

#[derive(Copy, Clone, Debug, PartialEq, ValueEnum)]
enum MetricName {
    Epe,
    Pck,
}

#[derive(Args, Debug)]
struct DecomposeArgs {
    #[arg(long)]
    model: PathBuf,
    /// Comma-separated levels whose motion stays on; empty freezes all.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    active_levels: Vec<u32>,
    /// Canonical points (points JSON, or a tracks file sampled at the
    /// model's canonical frame).
    #[arg(long)]
    points: PathBuf,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_KNN)]
    knn: usize,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    model: PathBuf,
    /// Canonical points (points JSON, or a tracks file sampled at the
    /// model's canonical frame).
    #[arg(long)]
    points: PathBuf,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_KNN)]
    knn: usize,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    trials: usize,
}

#[derive(Args, Debug)]
struct EmbedSimArgs {
    /// Embeddings of rendered frames.
    #[arg(long)]
    pred: PathBuf,
    /// Embeddings of reference frames.
    #[arg(long)]
    gt: PathBuf,
    /// Frame gap for the temporal score.
    #[arg(long)]
    interval: usize,
}

enum Failure {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        let msg = err.to_string();
        match err {
            Error::NonFiniteLoss { .. } | Error::DegenerateBlend { .. } => Failure::Numerical(msg),
            Error::InvalidArgument(_) => Failure::Usage(msg),
            _ => Failure::Data(msg),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn resolved(command: &str, threads: usize, args: Value) {
    let doc = json!({ "command": command, "threads": threads, "args": args });
    eprintln!("resolved config: {doc}");
}

fn path(p: &Path) -> Value {
    Value::String(p.display().to_string())
}

fn opt_path(p: &Option<PathBuf>) -> Value {
    p.as_deref().map_or(Value::Null, path)
}

fn generate(a: &GenerateArgs, threads: usize) -> CmdResult {
    let spec = match (&a.spec, a.preset) {
        (Some(p), _) => synth::spec_from_json(&std::fs::read_to_string(p).map_err(Error::from)?)?,
        (None, Some(Preset::RigidBody)) => SceneSpec::rigid_body(),
        (None, Some(Preset::PendulumOnCart)) => SceneSpec::pendulum_on_cart(),
        (None, Some(Preset::TwoLink)) => SceneSpec::two_link(),
        (None, None) => return Err(Failure::Usage("one of --spec or --preset is required".into())),
    };
    resolved(
        "generate",
        threads,
        json!({
            "spec": serde_json::to_value(&spec).map_err(Error::from)?,
            "seed": a.seed,
            "out": path(&a.out),
            "binary": a.binary,
            "coarse": opt_path(&a.coarse),
        }),
    );
    let scene = synth::gen_synthetic(&spec, a.seed)?;
    if a.binary {
        io::save_tracks_binary(&a.out, &scene.tracks)?;
    } else {
        io::save_tracks(&a.out, &scene.tracks)?;
    }
    if let Some(p) = &a.coarse {
        let file = std::fs::File::create(p).map_err(Error::from)?;
        io::write_trajectories_csv(std::io::BufWriter::new(file), &scene.coarse)?;
    }
    info!("wrote {} tracks over {} frames", scene.tracks.num_tracks(), scene.tracks.frame_count());
    Ok(())
}

fn init(a: &InitArgs, threads: usize) -> CmdResult {
    resolved(
        "init",
        threads,
        json!({
            "tracks": path(&a.tracks),
            "nodes": a.nodes,
            "bases": a.bases,
            "seed": a.seed,
            "out": path(&a.out),
        }),
    );
    let tracks = io::load_tracks(&a.tracks)?;
    let tree = himor::init::init_first_level(&tracks, a.bases, a.nodes, a.seed)?;
    io::save_model(&a.out, &tree)?;
    info!("initialized {} nodes", tree.len() - 1);
    Ok(())
}

fn fit(a: &FitArgs, threads: usize) -> CmdResult {
    let config: RunConfig = io::load_config(&a.config)?;
    resolved(
        "fit",
        threads,
        json!({
            "tracks": path(&a.tracks),
            "config": serde_json::to_value(&config).map_err(Error::from)?,
            "model": opt_path(&a.model),
            "out": path(&a.out),
            "history": opt_path(&a.history),
        }),
    );
    let tracks = io::load_tracks(&a.tracks)?;
    let result = match &a.model {
        Some(m) => optim::fit_from(io::load_model(m)?, &tracks, &config.fit, &config.weights, config.seed)?,
        None => optim::fit(&tracks, &config.fit, &config.weights, config.seed)?,
    };
    io::save_model(&a.out, &result.tree)?;
    if let Some(h) = &a.history {
        io::save_history(h, &result.history)?;
    }
    if let Some(HistoryRow { loss, .. }) = result.history.last() {
        info!("final loss {:.6e} with {} nodes", loss.total, result.tree.len() - 1);
    }
    Ok(())
}

fn eval(a: &EvalArgs, threads: usize) -> CmdResult {
    resolved(
        "eval",
        threads,
        json!({
            "model": path(&a.model),
            "tracks": path(&a.tracks),
            "metrics": a.metrics.iter().map(|m| format!("{m:?}").to_lowercase()).collect::<Vec<_>>(),
            "pck_ratio": a.pck_ratio,
            "knn": a.knn,
        }),
    );
    if !(a.pck_ratio > 0.0) {
        return Err(Failure::Usage(format!("--pck-ratio must be positive, got {}", a.pck_ratio)));
    }
    let tree = io::load_model(&a.model)?;
    let gt = io::load_tracks(&a.tracks)?;
    let points = canonical_points(&gt, &tree)?;
    let pred = trajectories(&tree, &points, a.knn)?;
    let mut out = serde_json::Map::new();
    if a.metrics.contains(&MetricName::Epe) {
        out.insert("epe".into(), json!(metrics::epe(&pred, &gt)?));
    }
    if a.metrics.contains(&MetricName::Pck) {
        out.insert("pck_t".into(), json!(metrics::pck_t(&pred, &gt, a.pck_ratio)?));
    }
    println!("{}", Value::Object(out));
    Ok(())
}

fn canonical_points(tracks: &TrackSet, tree: &MotionTree) -> Result<Vec<OrientedPoint>, Error> {
    if tracks.frame_count() != tree.frame_count() {
        return Err(Error::ShapeMismatch(format!(
            "model has {} frames, tracks have {}",
            tree.frame_count(),
            tracks.frame_count()
        )));
    }
    let c = tree.canonical_frame();
    Ok(tracks.frame_positions(c).into_iter().map(OrientedPoint::at).collect())
}

/// Points JSON, or tracks (JSON or binary) read at the canonical frame.
fn load_points_or_tracks(p: &Path, tree: &MotionTree) -> Result<Vec<OrientedPoint>, Error> {
    let bytes = std::fs::read(p)?;
    if bytes.starts_with(io::BINARY_MAGIC) {
        return canonical_points(&io::tracks_from_binary(&bytes)?, tree);
    }
    let text = String::from_utf8(bytes).map_err(|e| Error::InvalidArgument(format!("{}: {e}", p.display())))?;
    let is_tracks = serde_json::from_str::<Value>(&text)
        .ok()
        .is_some_and(|v| v.get("positions").is_some());
    if is_tracks {
        canonical_points(&io::tracks_from_json(&text)?, tree)
    } else {
        io::points_from_json(&text)
    }
}

fn write_csv(out: &Path, traj: &[Vec<himor::Vec3>]) -> Result<(), Error> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(out)?);
    io::write_trajectories_csv(&mut w, traj)?;
    w.flush()?;
    Ok(())
}

fn decompose(a: &DecomposeArgs, threads: usize) -> CmdResult {
    let active: BTreeSet<u32> = a.active_levels.iter().copied().collect();
    resolved(
        "decompose",
        threads,
        json!({
            "model": path(&a.model),
            "active_levels": active,
            "points": path(&a.points),
            "out": path(&a.out),
            "knn": a.knn,
        }),
    );
    let tree = io::load_model(&a.model)?;
    let points = load_points_or_tracks(&a.points, &tree)?;
    let view = tree.freeze_levels(&active);
    write_csv(&a.out, &trajectories(&view, &points, a.knn)?)?;
    Ok(())
}

fn export(a: &ExportArgs, threads: usize) -> CmdResult {
    resolved(
        "export",
        threads,
        json!({
            "model": path(&a.model),
            "points": path(&a.points),
            "out": path(&a.out),
            "knn": a.knn,
        }),
    );
    let tree = io::load_model(&a.model)?;
    let points = load_points_or_tracks(&a.points, &tree)?;
    write_csv(&a.out, &trajectories(&tree, &points, a.knn)?)?;
    Ok(())
}

fn gradcheck(a: &GradcheckArgs, threads: usize) -> CmdResult {
    resolved("gradcheck", threads, json!({ "seed": a.seed, "trials": a.trials }));
    let report = optim::gradcheck(a.seed, a.trials)?;
    println!(
        "{}",
        json!({
            "trials": report.trials,
            "parameters": report.parameters,
            "max_relative_error": report.max_relative_error,
            "failures": report.failures.len(),
        })
    );
    if report.passed() {
        Ok(())
    } else {
        let f = &report.failures[0];
        Err(Failure::Numerical(format!(
            "{} gradient entries disagree; first at trial {} {:?}: analytic {:e}, numeric {:e}",
            report.failures.len(),
            f.trial,
            f.key,
            f.analytic,
            f.numeric
        )))
    }
}

fn embed_sim(a: &EmbedSimArgs, threads: usize) -> CmdResult {
    resolved(
        "embed-sim",
        threads,
        json!({ "pred": path(&a.pred), "gt": path(&a.gt), "interval": a.interval }),
    );
    let pred = io::load_embeddings(&a.pred)?;
    let gt = io::load_embeddings(&a.gt)?;
    let clip_i = metrics::clip_i(&pred.frames, &gt.frames)?;
    let clip_t = metrics::clip_t(&pred.frames, a.interval)?;
    println!("{}", json!({ "clip_i": clip_i, "clip_t": clip_t }));
    Ok(())
}

fn run(cli: &Cli) -> CmdResult {
    let t = cli.threads;
    match &cli.command {
        Command::Generate(a) => generate(a, t),
        Command::Init(a) => init(a, t),
        Command::Fit(a) => fit(a, t),
        Command::Eval(a) => eval(a, t),
        Command::Decompose(a) => decompose(a, t),
        Command::Export(a) => export(a, t),
        Command::Gradcheck(a) => gradcheck(a, t),
        Command::EmbedSim(a) => embed_sim(a, t),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();

    let pool = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build();
    let result = match pool {
        Ok(pool) => pool.install(|| run(&cli)),
        Err(e) => Err(Failure::Usage(format!("cannot start {} threads: {e}", cli.threads))),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_DATA)
        }
        Err(Failure::Numerical(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_NUMERICAL)
        }
    }
}
