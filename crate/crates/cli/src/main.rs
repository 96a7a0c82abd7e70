use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use flytrack::ba::PriorKind;
use flytrack::eval::evaluate_trajectory;
use flytrack::io::{export_results, load_scene, load_trajectory, to_json, write_simulation, ProjectConfig};
use flytrack::pipeline::{run_full_reconstruction, PipelineConfig};
use flytrack::synth::{generate, SceneSpec};

/// Trajectory, camera pose and clock recovery from unsynchronized
/// multi-camera detection tracks.
#[derive(Parser, Debug)]
#[command(name = "flytrack", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a scene and write tracks, intrinsics, a project file and ground truth.
    Simulate(SimulateArgs),
    /// Reconstruct the trajectory, cameras and clocks of a project.
    Reconstruct(ReconstructArgs),
    /// Score an estimated trajectory against a reference.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Scene description (TOML); the built-in four-camera scene when absent.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Seed of the built-in scene and of the noise.
    #[arg(long)]
    seed: Option<u64>,
    /// Keep only the first N cameras.
    #[arg(long)]
    cameras: Option<usize>,
    /// Simulated duration in anchor frames.
    #[arg(long)]
    duration: Option<f64>,
    /// Detection noise standard deviation, pixels.
    #[arg(long)]
    noise_px: Option<f64>,
    #[arg(long)]
    outlier_rate: Option<f64>,
    #[arg(long)]
    dropout_rate: Option<f64>,
    /// Clock offsets in anchor frames, one per camera.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    betas: Option<Vec<f64>>,
    #[arg(long, env = "FLYTRACK_OUTPUT_DIR")]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct ReconstructArgs {
    /// Project file (TOML).
    config: PathBuf,
    /// Output directory; defaults to the project's `output_dir`.
    #[arg(long, env = "FLYTRACK_OUTPUT_DIR")]
    output: Option<PathBuf>,
    #[arg(long)]
    anchor: Option<usize>,
    /// Inlier threshold, pixels.
    #[arg(long)]
    pixel_threshold: Option<f64>,
    #[arg(long)]
    ransac_confidence: Option<f64>,
    #[arg(long)]
    ransac_max_iterations: Option<usize>,
    /// Largest searched clock offset, anchor frames.
    #[arg(long)]
    max_clock_offset: Option<f64>,
    /// Spline knot spacing, anchor frames.
    #[arg(long)]
    knot_spacing: Option<f64>,
    /// Motion prior: none, kinetic, force or force-squared.
    #[arg(long)]
    prior: Option<PriorKind>,
    /// Motion prior weight; automatic when absent.
    #[arg(long)]
    prior_weight: Option<f64>,
    /// Estimate rolling-shutter readout speeds.
    #[arg(long)]
    rolling_shutter: bool,
    /// Skip clock estimation from two-view geometry.
    #[arg(long)]
    no_two_view_sync: bool,
    /// Keep clocks fixed in bundle adjustment.
    #[arg(long)]
    no_ba_sync: bool,
    #[arg(long)]
    seed: Option<u64>,
}

impl ReconstructArgs {
    fn apply(&self, cfg: &mut PipelineConfig) {
        fn set<T: Clone>(dst: &mut T, src: &Option<T>) {
            if let Some(v) = src {
                *dst = v.clone();
            }
        }
        set(&mut cfg.anchor, &self.anchor);
        set(&mut cfg.pixel_threshold, &self.pixel_threshold);
        set(&mut cfg.ransac_confidence, &self.ransac_confidence);
        set(&mut cfg.ransac_max_iterations, &self.ransac_max_iterations);
        set(&mut cfg.max_clock_offset, &self.max_clock_offset);
        set(&mut cfg.knot_spacing, &self.knot_spacing);
        set(&mut cfg.prior, &self.prior);
        set(&mut cfg.seed, &self.seed);
        if self.prior_weight.is_some() {
            cfg.prior_weight = self.prior_weight;
        }
        cfg.rolling_shutter |= self.rolling_shutter;
        cfg.two_view_sync &= !self.no_two_view_sync;
        cfg.ba_sync &= !self.no_ba_sync;
    }
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Estimated trajectory (`time,x,y,z`).
    estimate: PathBuf,
    /// Reference trajectory (`time,x,y,z`).
    reference: PathBuf,
    /// Compare without similarity alignment.
    #[arg(long)]
    no_align: bool,
    /// Also write `evaluation.json` here.
    #[arg(long, env = "FLYTRACK_OUTPUT_DIR")]
    output: Option<PathBuf>,
}

type Error = Box<dyn std::error::Error>;

fn simulate(args: &SimulateArgs) -> Result<(), Error> {
    let mut spec = match &args.scene {
        Some(path) => load_scene(path)?,
        None => SceneSpec::standard(args.seed.unwrap_or(0)),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if let Some(n) = args.cameras {
        if n == 0 || n > spec.cameras.len() {
            return Err(format!("--cameras must lie in 1..={}", spec.cameras.len()).into());
        }
        spec.cameras.truncate(n);
    }
    if let Some(d) = args.duration {
        spec.duration = d;
    }
    if let Some(x) = args.noise_px {
        spec.noise_px = x;
    }
    if let Some(x) = args.outlier_rate {
        spec.outlier_rate = x;
    }
    if let Some(x) = args.dropout_rate {
        spec.dropout_rate = x;
    }
    if let Some(betas) = &args.betas {
        if betas.len() != spec.cameras.len() {
            return Err(format!("--betas needs {} values", spec.cameras.len()).into());
        }
        for (c, b) in spec.cameras.iter_mut().zip(betas) {
            c.beta = *b;
        }
    }
    let (tracks, gt) = generate(&spec)?;
    let (mean, max) = gt.trajectory.speed_stats(spec.duration, spec.anchor_fps);
    info!("target speed mean {mean:.1} km/h, max {max:.1} km/h");
    let project = write_simulation(&args.output, &spec, &tracks, &gt, &PipelineConfig::default())?;
    println!("{}", project.display());
    Ok(())
}

fn reconstruct(args: &ReconstructArgs) -> Result<(), Error> {
    let mut project = ProjectConfig::load(&args.config)?;
    args.apply(&mut project.pipeline);
    let output = args
        .output
        .clone()
        .or(project.output_dir.clone())
        .ok_or("no output directory: pass --output or set output_dir in the project")?;
    let inputs = project.load_inputs()?;
    let state = run_full_reconstruction(inputs, project.pipeline.clone())?;
    let files = export_results(&state, &output)?;
    info!(
        "registered cameras {:?}, reprojection RMS {:.3} px",
        state.registered(),
        state.stats.reprojection_rms_px
    );
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

fn evaluate(args: &EvaluateArgs) -> Result<(), Error> {
    let est = load_trajectory(&args.estimate)?;
    let reference = load_trajectory(&args.reference)?;
    let report = evaluate_trajectory(&est, &reference, !args.no_align)?;
    let text = to_json(&report);
    print!("{text}");
    if let Some(dir) = &args.output {
        std::fs::create_dir_all(dir)?;
        std::fs::write(Path::new(dir).join("evaluation.json"), &text)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Evaluate(a) => evaluate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
