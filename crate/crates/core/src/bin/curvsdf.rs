use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use curvsdf::config::PipelineConfig;
use curvsdf::pipeline;
use curvsdf::Error;

/// Neural implicit surface reconstruction from depth images.
#[derive(Parser, Debug)]
#[command(name = "curvsdf", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON configuration file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Starting preset: sparse64 or dense256.
    #[arg(long)]
    preset: Option<String>,
    /// Override a config field, e.g. `--set training.epochs=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set output_dir=...`.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render synthetic depth frames with trajectory and intrinsics.
    Render(Common),
    /// Fuse depth frames into a voxel grid.
    Fuse(Common),
    /// Fuse with frame-to-model pose tracking.
    Track(Common),
    /// Write one training batch as CSV.
    SampleDump {
        #[command(flatten)]
        common: Common,
        /// Grid file (defaults to the fuse stage output).
        #[arg(long)]
        grid: Option<PathBuf>,
    },
    /// Train the neural field on a fused grid.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        grid: Option<PathBuf>,
    },
    /// Extract a mesh from a trained network.
    Extract {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        network: Option<PathBuf>,
    },
    /// Compare a mesh against the reference surface.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mesh: Option<PathBuf>,
    },
    /// fuse, train, extract and eval in one run.
    Pipeline(Common),
    /// Print the resolved configuration as JSON.
    ShowConfig(Common),
}

impl Command {
    fn stage(&self) -> &'static str {
        match self {
            Command::Render(_) => "render",
            Command::Fuse(_) => "fuse",
            Command::Track(_) => "track",
            Command::SampleDump { .. } => "sample-dump",
            Command::Train { .. } => "train",
            Command::Extract { .. } => "extract",
            Command::Eval { .. } => "eval",
            Command::Pipeline(_) => "pipeline",
            Command::ShowConfig(_) => "show-config",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Render(c) | Command::Fuse(c) | Command::Track(c) | Command::Pipeline(c) | Command::ShowConfig(c) => c,
            Command::SampleDump { common, .. }
            | Command::Train { common, .. }
            | Command::Extract { common, .. }
            | Command::Eval { common, .. } => common,
        }
    }
}

fn resolve(common: &Common) -> curvsdf::Result<PipelineConfig> {
    let mut overrides = common.overrides.clone();
    if let Some(o) = &common.output {
        overrides.push(format!("output_dir={}", serde_json::Value::String(o.display().to_string())));
    }
    PipelineConfig::resolve(common.preset.as_deref(), common.config.as_deref(), &overrides)
}

fn configure_threads() {
    if let Ok(v) = std::env::var("CURVSDF_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    log::warn!("could not size thread pool: {e}");
                }
            }
            _ => log::warn!("ignoring CURVSDF_THREADS={v}: expected a positive integer"),
        }
    }
}

fn run(command: &Command, cfg: &PipelineConfig) -> curvsdf::Result<()> {
    match command {
        Command::Render(_) => {
            let dir = pipeline::run_render(cfg)?;
            println!("{}", dir.display());
        }
        Command::Fuse(_) => {
            let grid = pipeline::run_fuse(cfg)?;
            println!("observed voxels: {}", grid.observed_count());
        }
        Command::Track(_) => {
            let grid = pipeline::run_track(cfg)?;
            println!("observed voxels: {}", grid.observed_count());
        }
        Command::SampleDump { grid, .. } => {
            let g = pipeline::load_grid(cfg, grid.as_deref())?;
            println!("{}", pipeline::run_sample_dump(cfg, &g)?.display());
        }
        Command::Train { grid, .. } => {
            let g = pipeline::load_grid(cfg, grid.as_deref())?;
            pipeline::run_train(cfg, &g)?;
        }
        Command::Extract { network, .. } => {
            let net = pipeline::load_network(cfg, network.as_deref())?;
            let mesh = pipeline::run_extract(cfg, &net)?;
            println!("triangles: {}", mesh.triangles.len());
        }
        Command::Eval { mesh, .. } => {
            let m = pipeline::load_mesh(cfg, mesh.as_deref())?;
            let row = pipeline::run_eval(cfg, &m)?;
            println!("cd {} hd {}", row.cd, row.hd);
        }
        Command::Pipeline(_) => {
            let out = pipeline::run_pipeline(cfg)?;
            println!("cd {} hd {}", out.metrics.cd, out.metrics.hd);
        }
        Command::ShowConfig(_) => {
            println!("{}", serde_json::to_string_pretty(cfg).expect("config serializes"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    configure_threads();
    let cfg = match resolve(cli.command.common()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };
    match run(&cli.command, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config { .. }) => {
            eprintln!("{e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("{} stage failed: {e}", cli.command.stage());
            ExitCode::from(3)
        }
    }
}
