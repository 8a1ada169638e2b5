//! Command-line front end: dataset synthesis, training, rendering,
//! evaluation, and log analysis. Exit 0 on success, 1 on runtime failure
//! (one machine-parsable line on stderr), 2 on usage errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use duosplat::analysis;
use duosplat::checkpoint::Checkpoint;
use duosplat::config::TrainConfig;
use duosplat::synth::{self, DatasetSpec, IlluminationLevel, OcclusionLevel};
use duosplat::train;
use duosplat::{Error, Result};

#[derive(Parser)]
#[command(name = "duosplat", version, about = "Dual-view Gaussian splatting trainer")]
struct Cli {
    #[command(flatten)]
    globals: Globals,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Globals {
    /// RNG seed; overrides the config file's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Training config file (key = value lines); defaults apply otherwise.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one config value; repeatable, wins over --config.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Force deterministic execution on or off.
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true",
          value_name = "BOOL")]
    deterministic: Option<bool>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with ground-truth masks.
    Synth(SynthArgs),
    /// Optimize a Gaussian cloud on a dataset.
    Train(TrainArgs),
    /// Render one dataset view from a checkpoint to a PNG.
    Render(RenderArgs),
    /// Score a checkpoint on the dataset's held-out views.
    Eval(EvalArgs),
    /// Inspect training logs and view-pair coverage math.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    /// Training view count.
    #[arg(long, default_value_t = 8)]
    views: usize,
    /// Held-out clean view count.
    #[arg(long, default_value_t = 2)]
    heldout: usize,
    /// Transient density: none | low | medium | high.
    #[arg(long, default_value = "high")]
    occlusion: String,
    /// Per-view illumination drift: none | mild | strong.
    #[arg(long, default_value = "strong")]
    illumination: String,
    /// Also write lossless float sidecars next to the PNGs.
    #[arg(long)]
    float_sidecars: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory produced by `synth`.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Run directory for config, log, checkpoints, renders.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Shorthand for --set total_iters=N.
    #[arg(long)]
    iters: Option<u64>,
    /// Ablation: no masking at all.
    #[arg(long)]
    no_mask: bool,
    /// Ablation: binary prior mask only.
    #[arg(long)]
    bin_mask_only: bool,
    /// Ablation: learned consistency score only.
    #[arg(long)]
    score_mask_only: bool,
    /// Ablation: plain gradient summation across views.
    #[arg(long)]
    no_harmonize: bool,
    /// Ablation: no conflict-aware densification or pruning.
    #[arg(long)]
    no_conflict_structure: bool,
    /// Ablation: one view per iteration.
    #[arg(long)]
    single_view: bool,
}

#[derive(Args)]
struct RenderArgs {
    /// Checkpoint file (e.g. RUN/final.ckpt).
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Dataset directory holding the view.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// View id, e.g. view_000 or heldout_001.
    #[arg(long, value_name = "ID")]
    view: String,
    /// Output PNG path.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory from `train`; supplies final.ckpt and the run config.
    #[arg(long, value_name = "DIR", required_unless_present = "checkpoint")]
    run: Option<PathBuf>,
    /// Checkpoint file; overrides the run directory's final.ckpt.
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
    /// Dataset directory with held-out views.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Report label; defaults to the run's ablation tag.
    #[arg(long)]
    label: Option<String>,
    /// Report JSON path (default: RUN/report.json when --run is given).
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(subcommand)]
    what: AnalyzeCommand,
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Per-attribute conflict statistics from a training log.
    Conflicts {
        /// log.jsonl from a run directory.
        #[arg(long, value_name = "FILE")]
        log: PathBuf,
        /// Plot-data CSV path (default: conflicts.csv beside the log).
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Pair coverage numbers for N training views.
    Coverage {
        /// Training view count N; pairs M = N(N-1)/2.
        #[arg(long)]
        views: usize,
        /// Coverage target q in (0,1).
        #[arg(long)]
        target: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => cmd_synth(&cli.globals, &args),
        Command::Train(args) => cmd_train(&cli.globals, &args),
        Command::Render(args) => cmd_render(&args),
        Command::Eval(args) => cmd_eval(&cli.globals, &args),
        Command::Analyze(args) => match args.what {
            AnalyzeCommand::Conflicts { log, out } => cmd_conflicts(&log, out.as_deref()),
            AnalyzeCommand::Coverage { views, target } => cmd_coverage(views, target),
        },
    }
}

/// Defaults, then the config file, then --set pairs, then dedicated flags.
fn build_config(globals: &Globals) -> Result<TrainConfig> {
    let mut cfg = match &globals.config {
        Some(path) => TrainConfig::from_file(path)?,
        None => TrainConfig::default(),
    };
    for pair in &globals.set {
        let (key, value) = pair.split_once('=').ok_or_else(|| {
            Error::Config(format!("--set expects KEY=VALUE, got '{pair}'"))
        })?;
        cfg.set_key(key.trim(), value.trim())?;
    }
    if let Some(d) = globals.deterministic {
        cfg.deterministic = d;
    }
    if let Some(s) = globals.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn ablation_tag(cfg: &TrainConfig) -> String {
    let mut tags = Vec::new();
    if cfg.ablate_no_mask {
        tags.push("no-mask");
    }
    if cfg.ablate_bin_mask_only {
        tags.push("bin-mask-only");
    }
    if cfg.ablate_score_mask_only {
        tags.push("score-mask-only");
    }
    if cfg.ablate_no_harmonize {
        tags.push("no-harmonize");
    }
    if cfg.ablate_no_conflict_structure {
        tags.push("no-conflict-structure");
    }
    if cfg.ablate_single_view {
        tags.push("single-view");
    }
    if tags.is_empty() { "full".to_string() } else { tags.join("+") }
}

fn cmd_synth(globals: &Globals, args: &SynthArgs) -> Result<()> {
    let spec = DatasetSpec {
        resolution: args.resolution,
        num_views: args.views,
        num_heldout: args.heldout,
        occlusion: OcclusionLevel::parse(&args.occlusion)?,
        illumination: IlluminationLevel::parse(&args.illumination)?,
    };
    let seed = globals.seed.unwrap_or(0);
    let ds = synth::generate_views(seed, &spec)?;
    synth::write_dataset(&ds, &args.out, args.float_sidecars)?;
    println!(
        "dataset written to {} ({} views + {} held-out, {}x{}, seed {})",
        args.out.display(),
        spec.num_views,
        spec.num_heldout,
        spec.resolution,
        spec.resolution,
        seed
    );
    Ok(())
}

fn cmd_train(globals: &Globals, args: &TrainArgs) -> Result<()> {
    let mut cfg = build_config(globals)?;
    if let Some(iters) = args.iters {
        cfg.total_iters = iters;
    }
    cfg.ablate_no_mask |= args.no_mask;
    cfg.ablate_bin_mask_only |= args.bin_mask_only;
    cfg.ablate_score_mask_only |= args.score_mask_only;
    cfg.ablate_no_harmonize |= args.no_harmonize;
    cfg.ablate_no_conflict_structure |= args.no_conflict_structure;
    cfg.ablate_single_view |= args.single_view;

    let ds = synth::read_dataset(&args.data)?;
    let outcome = train::train(&ds, &cfg, cfg.seed, Some(&args.out))?;
    let last_loss = outcome.reports.last().map_or(f64::NAN, |r| r.loss_i);
    println!(
        "trained [{}] for {} iterations: {} gaussians, last loss {:.6}, run dir {}",
        ablation_tag(&cfg),
        cfg.total_iters,
        outcome.state.cloud.len(),
        last_loss,
        args.out.display()
    );
    Ok(())
}

fn cmd_render(args: &RenderArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let ds = synth::read_dataset(&args.data)?;
    let mut views = ds.training_views();
    views.extend(ds.heldout_views());
    let view = views.iter().find(|v| v.id == args.view).ok_or_else(|| {
        let ids: Vec<&str> = views.iter().map(|v| v.id.as_str()).collect();
        Error::Invalid(format!("view '{}' not in dataset (have: {})", args.view, ids.join(", ")))
    })?;
    let out = duosplat::render::render(&ckpt.cloud, view, TrainConfig::default().cutoff_sigmas);
    out.image.save_png(&args.out)?;
    println!("rendered {} to {}", view.id, args.out.display());
    Ok(())
}

fn cmd_eval(globals: &Globals, args: &EvalArgs) -> Result<()> {
    // The run directory's echoed config names the ablation that trained the
    // checkpoint; flags can still override it.
    let cfg = match (&globals.config, &args.run) {
        (None, Some(run)) if run.join("config.txt").exists() => {
            let with_run_config = Globals {
                config: Some(run.join("config.txt")),
                seed: globals.seed,
                set: globals.set.clone(),
                deterministic: globals.deterministic,
            };
            build_config(&with_run_config)?
        }
        _ => build_config(globals)?,
    };
    let ckpt_path = match (&args.checkpoint, &args.run) {
        (Some(p), _) => p.clone(),
        (None, Some(run)) => run.join("final.ckpt"),
        (None, None) => unreachable!("clap requires --run or --checkpoint"),
    };
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let ds = synth::read_dataset(&args.data)?;
    let heldout = ds.heldout_views();
    let label = args.label.clone().unwrap_or_else(|| ablation_tag(&cfg));
    let report = analysis::evaluate(&ckpt.cloud, &heldout, cfg.cutoff_sigmas, &label)?;
    print!("{}", report.table());
    let out_path = match (&args.out, &args.run) {
        (Some(p), _) => Some(p.clone()),
        (None, Some(run)) => Some(run.join("report.json")),
        (None, None) => None,
    };
    if let Some(path) = out_path {
        std::fs::write(&path, report.to_json()).map_err(|e| Error::io(path.clone(), e))?;
        println!("report written to {}", path.display());
    }
    Ok(())
}

fn cmd_conflicts(log: &Path, out: Option<&Path>) -> Result<()> {
    let reports = train::load_log(log)?;
    let stats = analysis::conflict_statistics(&reports);
    print!("{}", stats.table());
    let csv_path = out.map(Path::to_path_buf).unwrap_or_else(|| log.with_file_name("conflicts.csv"));
    std::fs::write(&csv_path, stats.plot_data()).map_err(|e| Error::io(csv_path.clone(), e))?;
    println!("plot data written to {}", csv_path.display());
    Ok(())
}

fn cmd_coverage(views: usize, target: f64) -> Result<()> {
    if views < 2 {
        return Err(Error::Invalid(format!("need at least 2 views, got {views}")));
    }
    let pairs = analysis::pair_count(views);
    let t = analysis::coverage_iterations(pairs, target)?;
    println!("M={pairs}");
    println!("exact T={}", t.exact);
    println!("approx T={}", t.approx);
    println!("rule-of-thumb multiples of M:");
    for (q, quoted, _) in analysis::COVERAGE_MILESTONES {
        println!("  q={:<6} ln(1/(1-q))={:.4}  quoted {}M", q, analysis::coverage_multiple(q), quoted);
    }
    Ok(())
}
