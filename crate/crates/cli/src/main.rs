//! `polarstereo` command line: scene synthesis, the five reconstruction
//! stages as separate subcommands, and the end-to-end `pipeline`.

mod commands;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

/// Crate version plus the manifest/config schema version.
const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (schema 1)");

#[derive(Debug, Parser)]
#[command(name = "polarstereo", version = VERSION, about = "Dense depth and albedo from polarisation plus stereo")]
struct Cli {
    /// Worker threads; 0 or unset uses every core.
    #[arg(long, global = true, env = "POLARSTEREO_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic dataset with ground truth.
    Synth(SynthArgs),
    /// Stereo guide depth and normals.
    Stereo(StereoArgs),
    /// Candidate normals and MRF labelling.
    Disambiguate(DisambiguateArgs),
    /// Albedo from the disambiguated normals.
    Albedo(AlbedoArgs),
    /// Guide-anchored depth solve.
    Depth(DepthArgs),
    /// Depth and normal error against ground truth.
    Eval(EvalArgs),
    /// Every stage in order, writing all intermediates.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Scene configuration (JSON); defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Noise σ as a fraction of the full range, overriding the config.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

/// Options shared by the reconstruction stages.
#[derive(Debug, Args)]
struct StageArgs {
    /// Dataset directory holding `manifest.json`.
    #[arg(long)]
    dataset: PathBuf,
    /// Pipeline configuration (JSON); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Refractive index, overriding the dataset's.
    #[arg(long)]
    eta: Option<f64>,
    /// Light direction `x,y,z`, overriding the dataset's.
    #[arg(long, allow_hyphen_values = true)]
    light: Option<String>,
}

#[derive(Debug, Args)]
struct StereoArgs {
    #[command(flatten)]
    stage: StageArgs,
    #[arg(long, allow_hyphen_values = true)]
    min_disp: Option<i32>,
    #[arg(long)]
    max_disp: Option<i32>,
    /// External depth map (PFM, metres) used instead of stereo.
    #[arg(long)]
    guide_depth: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DisambiguateArgs {
    #[command(flatten)]
    stage: StageArgs,
    /// Guide directory written by `stereo`.
    #[arg(long)]
    guide: PathBuf,
    #[arg(long)]
    k: Option<f64>,
    #[arg(long)]
    w_pair: Option<f64>,
    #[arg(long)]
    w_tern: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AlbedoArgs {
    #[command(flatten)]
    stage: StageArgs,
    /// Disambiguated normals (PFM).
    #[arg(long)]
    normals: PathBuf,
    /// Specular mask (PNG).
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    lambda_i: Option<f64>,
    #[arg(short = 't', long = "threshold")]
    t: Option<f64>,
    /// Output albedo (PFM).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DepthArgs {
    #[command(flatten)]
    stage: StageArgs,
    #[arg(long)]
    normals: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    albedo: PathBuf,
    /// Guide directory written by `stereo`.
    #[arg(long)]
    guide: PathBuf,
    #[arg(long)]
    lambda: Option<f64>,
    /// Output directory for depth, normals and mesh.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    est: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    align_scale: bool,
    #[arg(long, requires = "normals_gt")]
    normals_est: Option<PathBuf>,
    #[arg(long, requires = "normals_est")]
    normals_gt: Option<PathBuf>,
    /// Metrics CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PipelineArgs {
    /// Dataset directory; mutually exclusive with `--scene`.
    #[arg(long, required_unless_present = "scene", conflicts_with = "scene")]
    dataset: Option<PathBuf>,
    /// Scene configuration rendered in memory, one run per noise level.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use `--guide-depth` instead of running stereo.
    #[arg(long, requires = "guide_depth")]
    skip_stereo: bool,
    #[arg(long)]
    guide_depth: Option<PathBuf>,
    /// Noise levels for `--scene`, e.g. `0,0.005,0.01`.
    #[arg(long, value_delimiter = ',', requires = "scene")]
    noise_sweep: Vec<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads.filter(|&n| n > 0) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Stereo(a) => commands::stereo(&a),
        Command::Disambiguate(a) => commands::disambiguate(&a),
        Command::Albedo(a) => commands::albedo(&a),
        Command::Depth(a) => commands::depth(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Pipeline(a) => commands::pipeline(&a),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_line_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn version_names_the_schema() {
        assert!(VERSION.ends_with(&format!("(schema {})", polarstereo::pipeline::SCHEMA_VERSION)));
    }
}
