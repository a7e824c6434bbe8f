//! Command-line driver for the matching pipeline.
//!
//! Subcommands: `gen` (synthesize an episode set), `prior` (emit FG/BG/Disc
//! prior masks for one query), `refine` (run iterative memory refinement and
//! dump per-iteration snapshots), `eval` (episodic evaluation with a metric
//! table and JSON report), `ablate` (the four-variant component ablation)
//! and `stats` (per-layer pre/post calibration score summary).

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use fssam::datagen;
use fssam::io::fssf::{read_feature_map, read_mask};
use fssam::io::{
    load_episodes, load_pipeline_config, load_synth_spec, render_ablation_table,
    render_calibration_table, render_metrics_table, save_episodes, write_feature_file, write_json,
    write_pgm, FssfValue,
};
use fssam::numerics::{FeatureMap, SoftMask};
use fssam::pipeline::{ablation_suite, calibration_stats, evaluate, Episode, PipelineConfig};
use fssam::prior::{average_priors, encode_memory, make_priors, Memory, PriorSet};
use fssam::refine::refine;
use fssam::{Error, Result};

#[derive(Parser)]
#[command(
    name = "fssam",
    version,
    about = "Few-shot segmentation matching over dense feature maps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic episode set from a spec file.
    Gen(GenArgs),
    /// Compute FG/BG/Disc prior masks for a query from support samples.
    Prior(PriorArgs),
    /// Run iterative memory refinement and dump per-iteration priors.
    Refine(RefineArgs),
    /// Evaluate an episode set: print metrics, write a JSON report.
    Eval(EvalArgs),
    /// Evaluate the four component combinations and tabulate the deltas.
    Ablate(AblateArgs),
    /// Per-layer pre/post calibration cross-attention score summary.
    Stats(StatsArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Synthetic set spec (JSON).
    #[arg(long)]
    spec: PathBuf,
    /// Output directory for the episode set.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SupportInputs {
    /// Query feature map (FSSF).
    #[arg(long)]
    query: PathBuf,
    /// Support feature map (FSSF); repeat for k-shot.
    #[arg(long, required = true)]
    support: Vec<PathBuf>,
    /// Support mask (FSSF); one per --support, in order.
    #[arg(long, required = true)]
    mask: Vec<PathBuf>,
}

#[derive(Args)]
struct PriorArgs {
    #[command(flatten)]
    inputs: SupportInputs,
    /// Output directory for fg/bg/disc masks (FSSF + PGM).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RefineArgs {
    #[command(flatten)]
    inputs: SupportInputs,
    /// Refinement pass count.
    #[arg(long, default_value_t = 3)]
    iters: usize,
    /// Memory encoder gain.
    #[arg(long, default_value_t = 0.0)]
    gain: f32,
    /// Output directory for per-iteration prior snapshots.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Episode set directory (as written by `gen`).
    #[arg(long)]
    episodes: PathBuf,
    /// Pipeline configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Disable iterative memory refinement.
    #[arg(long)]
    no_imr: bool,
    /// Disable support calibration in the attention stack.
    #[arg(long)]
    no_scma: bool,
    /// Override the refinement pass count.
    #[arg(long)]
    iters: Option<usize>,
    /// Override the calibration scale.
    #[arg(long)]
    alpha: Option<f64>,
    /// Use only the first k supports of every episode.
    #[arg(long)]
    shots: Option<usize>,
}

impl RunArgs {
    fn config(&self) -> Result<PipelineConfig> {
        let mut config = match &self.config {
            Some(path) => load_pipeline_config(path)?,
            None => PipelineConfig::default(),
        };
        if self.no_imr {
            config.use_imr = false;
        }
        if self.no_scma {
            config.use_scma_calibration = false;
        }
        if let Some(iters) = self.iters {
            config.imr_iterations = iters;
        }
        if let Some(alpha) = self.alpha {
            config.alpha = alpha;
        }
        config.validate()?;
        Ok(config)
    }

    fn episodes(&self) -> Result<Vec<Episode>> {
        let mut episodes = load_episodes(&self.episodes)?;
        if let Some(shots) = self.shots {
            episodes = episodes
                .iter()
                .map(|e| e.with_shots(shots))
                .collect::<Result<_>>()?;
        }
        Ok(episodes)
    }
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Where to write the JSON report.
    #[arg(long, default_value = "report.json")]
    report: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Where to write the JSON report.
    #[arg(long, default_value = "ablation.json")]
    report: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Optional JSON report path.
    #[arg(long)]
    report: Option<PathBuf>,
}

/// Run the CLI against the given arguments (without the binary name).
/// Returns the process exit code.
pub fn cli_main<I>(args: I) -> i32
where
    I: IntoIterator<Item = String>,
{
    let argv = std::iter::once("fssam".to_string()).chain(args);
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own message (also for --help / --version).
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Gen(args) => run_gen(args),
        Command::Prior(args) => run_prior(args),
        Command::Refine(args) => run_refine(args),
        Command::Eval(args) => run_eval(args),
        Command::Ablate(args) => run_ablate(args),
        Command::Stats(args) => run_stats(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn run_gen(args: GenArgs) -> Result<()> {
    let spec = load_synth_spec(&args.spec)?;
    let episodes = datagen::generate(&spec)?;
    save_episodes(&args.out, &episodes)?;
    println!(
        "wrote {} episodes ({}x{}x{}, k={}) to {}",
        episodes.len(),
        spec.height,
        spec.width,
        spec.channels,
        spec.shots,
        args.out.display()
    );
    Ok(())
}

struct LoadedInputs {
    query: FeatureMap,
    supports: Vec<(FeatureMap, SoftMask)>,
}

fn load_inputs(inputs: &SupportInputs) -> Result<LoadedInputs> {
    if inputs.support.len() != inputs.mask.len() {
        return Err(Error::InvalidConfig(format!(
            "{} --support files but {} --mask files; they pair up in order",
            inputs.support.len(),
            inputs.mask.len()
        )));
    }
    let query = read_feature_map(&inputs.query)?;
    let supports = inputs
        .support
        .iter()
        .zip(&inputs.mask)
        .map(|(s, m)| Ok((read_feature_map(s)?, read_mask(m)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(LoadedInputs { query, supports })
}

fn averaged_priors(loaded: &LoadedInputs, epsilon: f64) -> Result<(PriorSet, bool)> {
    let mut sets = Vec::with_capacity(loaded.supports.len());
    let mut fallback = false;
    for (features, mask) in &loaded.supports {
        let computed = make_priors(&loaded.query, features, mask, epsilon)?;
        fallback |= computed.bg_prototype_fallback;
        sets.push(computed.set);
    }
    Ok((average_priors(&sets)?, fallback))
}

fn write_mask_pair(dir: &Path, stem: &str, mask: &SoftMask) -> Result<()> {
    write_feature_file(
        dir.join(format!("{stem}.fssf")),
        &FssfValue::Mask(mask.clone()),
    )?;
    write_pgm(dir.join(format!("{stem}.pgm")), mask)?;
    Ok(())
}

fn run_prior(args: PriorArgs) -> Result<()> {
    let loaded = load_inputs(&args.inputs)?;
    let (priors, fallback) = averaged_priors(&loaded, fssam::numerics::DEFAULT_EPSILON)?;
    std::fs::create_dir_all(&args.out)?;
    write_mask_pair(&args.out, "fg_prior", &priors.fg)?;
    write_mask_pair(&args.out, "bg_prior", &priors.bg)?;
    write_mask_pair(&args.out, "disc_prior", &priors.disc)?;
    if fallback {
        eprintln!("note: a support had no background; its BG prototype fell back to zero");
    }
    println!("wrote fg/bg/disc priors to {}", args.out.display());
    Ok(())
}

fn run_refine(args: RefineArgs) -> Result<()> {
    let loaded = load_inputs(&args.inputs)?;
    let epsilon = fssam::numerics::DEFAULT_EPSILON;
    let (priors, _) = averaged_priors(&loaded, epsilon)?;
    let support_mems: Vec<Memory> = loaded
        .supports
        .iter()
        .map(|(features, mask)| encode_memory(features, mask, args.gain))
        .collect::<Result<_>>()?;
    let fg_mem = encode_memory(&loaded.query, &priors.fg, args.gain)?;
    let disc_mem = encode_memory(&loaded.query, &priors.disc, args.gain)?;
    let (_, refined, trace) = refine(
        &disc_mem,
        &priors.disc,
        &fg_mem,
        &support_mems,
        args.iters,
        epsilon,
    )?;

    std::fs::create_dir_all(&args.out)?;
    write_mask_pair(&args.out, "disc_initial", &priors.disc)?;
    for (i, record) in trace.iterations.iter().enumerate() {
        write_mask_pair(&args.out, &format!("iter_{:02}_prior", i + 1), &record.prior)?;
        if record.degenerate {
            eprintln!("note: pass {} short-circuited on an all-zero prior", i + 1);
        }
    }
    write_mask_pair(&args.out, "disc_refined", &refined)?;
    println!(
        "refined {} passes ({} cosine sweeps), snapshots in {}",
        trace.iterations.len(),
        trace.cosine_passes(),
        args.out.display()
    );
    Ok(())
}

fn first_channels(episodes: &[Episode]) -> Result<usize> {
    episodes
        .first()
        .map(|e| e.query_features().channels())
        .ok_or(Error::EmptyInput("no episodes in set"))
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let config = args.run.config()?;
    let episodes = args.run.episodes()?;
    let proj = config.projections_for(first_channels(&episodes)?);
    let report = evaluate(&episodes, &config, &proj)?;
    print!("{}", render_metrics_table(&report));
    write_json(&args.report, &report)?;
    println!("report written to {}", args.report.display());
    Ok(())
}

fn run_ablate(args: AblateArgs) -> Result<()> {
    let config = args.run.config()?;
    let episodes = args.run.episodes()?;
    let proj = config.projections_for(first_channels(&episodes)?);
    let report = ablation_suite(&episodes, &config, &proj)?;
    print!("{}", render_ablation_table(&report));
    write_json(&args.report, &report)?;
    println!("report written to {}", args.report.display());
    Ok(())
}

fn run_stats(args: StatsArgs) -> Result<()> {
    let config = args.run.config()?;
    let episodes = args.run.episodes()?;
    let proj = config.projections_for(first_channels(&episodes)?);
    let layers = calibration_stats(&episodes, &config, &proj)?;
    print!("{}", render_calibration_table(&layers));
    if let Some(path) = &args.report {
        write_json(path, &layers)?;
        println!("report written to {}", path.display());
    }
    Ok(())
}
