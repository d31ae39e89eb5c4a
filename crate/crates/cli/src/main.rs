use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use kinemaforge::error::{Error, Result};
use kinemaforge::pipeline::{
    evaluate_bundle, read_json, run_stages, write_json, Bundle, PipelineConfig, SegmentationReport, Stage,
};
use kinemaforge::pointcloud::{read_manifest, write_sequence};
use kinemaforge::synthgen::{
    random_chain, random_trajectory, render_sequence, Branching, NoiseSpec, RenderOptions, DEFAULT_MAX_STEP,
};

const SEED_VAR: &str = "KINEMAFORGE_SEED";

#[derive(Parser)]
#[command(name = "kinemaforge", version, about = "Build URDF robot descriptions from point cloud sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic robot and render point cloud sequences of it.
    Synthgen(SynthgenArgs),
    /// Track point clusters through the sequences.
    Register(PipelineArgs),
    /// Group tracked clusters into rigid parts (needs a registered bundle).
    Segment(PipelineArgs),
    /// Run the whole pipeline and write the URDF bundle.
    Build(BuildArgs),
    /// Compare a bundle against generator ground truth.
    Eval(EvalArgs),
    /// Write silhouette and correlation data as CSV.
    Plot(PlotArgs),
}

#[derive(Args)]
struct SynthgenArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    dof: usize,
    /// serial, star or mixed.
    #[arg(long, default_value = "serial")]
    branching: String,
    #[arg(long, default_value_t = 10)]
    frames: usize,
    #[arg(long, default_value_t = 5000)]
    points: usize,
    /// Number of sequences, all starting from the zero configuration.
    #[arg(long, default_value_t = 1)]
    sequences: usize,
    /// Per-point Gaussian noise (m).
    #[arg(long)]
    point_sigma: Option<f64>,
    /// Per-frame rigid jitter (m).
    #[arg(long)]
    global_sigma: Option<f64>,
    /// Disable all noise.
    #[arg(long)]
    noiseless: bool,
    /// Keep only points visible from this many random directions.
    #[arg(long)]
    occlusion: Option<usize>,
    /// Largest per-frame joint step (rad).
    #[arg(long, default_value_t = DEFAULT_MAX_STEP)]
    max_step: f64,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PipelineArgs {
    /// Bundle directory.
    #[arg(long)]
    out: PathBuf,
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Frame directory; repeat for several sequences.
    #[arg(long = "sequence")]
    sequences: Vec<PathBuf>,
    /// File listing one sequence directory per line.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of point clusters.
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    k_min: Option<usize>,
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long)]
    mesh_resolution: Option<usize>,
    /// Position weight of the correlation distance.
    #[arg(long)]
    alpha: Option<f64>,
    /// Drop the position term of the correlation distance.
    #[arg(long)]
    no_pos: bool,
    /// Drop the orientation term of the correlation distance.
    #[arg(long)]
    no_ori: bool,
    /// Robot name in the URDF.
    #[arg(long)]
    name: Option<String>,
    /// Sequences registered at once.
    #[arg(long)]
    jobs: Option<usize>,
    /// Any configuration key, as KEY=VALUE.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct BuildArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Resume from this stage, reading earlier results from the bundle:
    /// register, segment, topology, joints or build.
    #[arg(long, default_value = "register")]
    from_stage: String,
}

#[derive(Args)]
struct EvalArgs {
    /// Bundle directory.
    #[arg(long)]
    pred: PathBuf,
    /// ground_truth.json written by synthgen.
    #[arg(long)]
    truth: PathBuf,
    /// Report path; defaults to eval_report.json in the bundle.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PlotArgs {
    /// Report directory of a bundle.
    #[arg(long)]
    report: PathBuf,
    /// Where to write the CSV files; defaults to the report directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_VAR) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_VAR} must be an unsigned integer, got `{v}`"))),
        Err(_) => Ok(None),
    }
}

fn seed_or_env(seed: Option<u64>) -> Result<u64> {
    Ok(match seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    })
}

/// Environment seed, then config file (or the bundle's saved config when
/// resuming), then flags.
fn resolve_config(a: &PipelineArgs, resuming: bool) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::default();
    if let Some(seed) = env_seed()? {
        cfg.seed = seed;
    }
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        cfg.apply_text(&text, path.parent())?;
    } else if resuming && a.sequences.is_empty() && a.manifest.is_none() {
        let saved = Bundle::new(&a.out).report("config.json");
        if saved.exists() {
            cfg = read_json(&saved)?;
        }
    }
    if let Some(m) = &a.manifest {
        cfg.sequences.extend(read_manifest(m)?);
    }
    cfg.sequences.extend(a.sequences.iter().cloned());
    let mut set = |key: &str, value: String| cfg.set(key, &value);
    if let Some(v) = a.seed {
        set("seed", v.to_string())?;
    }
    if let Some(v) = a.clusters {
        set("clusters", v.to_string())?;
    }
    if let Some(v) = a.k_min {
        set("k_min", v.to_string())?;
    }
    if let Some(v) = a.k_max {
        set("k_max", v.to_string())?;
    }
    if let Some(v) = a.mesh_resolution {
        set("mesh_resolution", v.to_string())?;
    }
    if let Some(v) = a.alpha {
        set("alpha", v.to_string())?;
    }
    if a.no_pos {
        set("no_pos", "true".into())?;
    }
    if a.no_ori {
        set("no_ori", "true".into())?;
    }
    if let Some(v) = &a.name {
        set("name", v.clone())?;
    }
    if let Some(v) = a.jobs {
        set("jobs", v.to_string())?;
    }
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        set(k.trim(), v.trim().to_string())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn synthgen(a: &SynthgenArgs) -> Result<()> {
    let seed = seed_or_env(a.seed)?;
    let branching: Branching = a.branching.parse()?;
    if a.sequences == 0 {
        return Err(Error::Config("at least one sequence is required".into()));
    }
    if a.frames < 2 {
        return Err(Error::EmptySequence(a.frames));
    }
    let noise = if a.noiseless {
        NoiseSpec::NONE
    } else {
        let d = NoiseSpec::default();
        NoiseSpec {
            global_sigma: a.global_sigma.unwrap_or(d.global_sigma),
            point_sigma: a.point_sigma.unwrap_or(d.point_sigma),
        }
    };
    let options = RenderOptions {
        points_per_frame: a.points,
        noise,
        occlusion: a.occlusion,
    };
    let spec = random_chain(a.dof, branching, seed)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut manifest = String::new();
    for k in 0..a.sequences {
        let name = format!("seq_{k:03}");
        let dir = a.out.join(&name);
        let s = seed.wrapping_add(k as u64);
        let trajectory = random_trajectory(&spec, a.frames, a.max_step, s);
        let (seq, truth) = render_sequence(&spec, &trajectory, &options, s)?;
        write_sequence(&dir, &seq)?;
        truth.save(&dir.join("ground_truth.json"))?;
        writeln!(manifest, "{name}").unwrap();
        info!("wrote {} frames to {}", seq.len(), dir.display());
    }
    let path = a.out.join("sequences.txt");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    println!(
        "{} sequence(s) of a {}-DoF robot in {}",
        a.sequences,
        spec.dof(),
        a.out.display()
    );
    Ok(())
}

fn run(a: &PipelineArgs, from: Stage, until: Stage) -> Result<()> {
    let cfg = resolve_config(a, from > Stage::Register)?;
    match run_stages(&cfg, &a.out, from, until)? {
        Some(summary) => {
            for link in &summary.missing_meshes {
                warn!("link {link} has no mesh");
            }
            println!(
                "{}: {} links, {} joints",
                Bundle::new(&summary.path).urdf().display(),
                summary.links,
                summary.joints
            );
        }
        None => println!("{} stage done in {}", until.name(), a.out.display()),
    }
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let truth = kinemaforge::synthgen::GroundTruth::load(&a.truth)?;
    let report = evaluate_bundle(&a.pred, &truth, seed_or_env(a.seed)?)?;
    let out = a.out.clone().unwrap_or_else(|| a.pred.join("eval_report.json"));
    write_json(&out, &report)?;
    print!("{}", report.table());
    Ok(())
}

fn plot(a: &PlotArgs) -> Result<()> {
    let seg: SegmentationReport = read_json(&a.report.join("segmentation_report.json"))?;
    let out = a.out.clone().unwrap_or_else(|| a.report.clone());
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut matrix = String::new();
    for row in &seg.correlation {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(matrix, "{}", cells.join(",")).unwrap();
    }
    let mut curve = String::from("k,silhouette\n");
    for (k, s) in &seg.silhouette {
        writeln!(curve, "{k},{s}").unwrap();
    }
    for (name, text) in [("correlation_matrix.csv", matrix), ("silhouette.csv", curve)] {
        let path = out.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        println!("{}", path.display());
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synthgen(a) => synthgen(a),
        Command::Register(a) => run(a, Stage::Register, Stage::Register),
        Command::Segment(a) => run(a, Stage::Segment, Stage::Segment),
        Command::Build(a) => {
            let from: Stage = a.from_stage.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
            run(&a.pipeline, from, Stage::Build)
        }
        Command::Eval(a) => eval(a),
        Command::Plot(a) => plot(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(usage_or_pipeline(&e))
        }
    }
}

/// Bad configuration is a usage error; everything else failed in the pipeline.
fn usage_or_pipeline(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        _ => 1,
    }
}
