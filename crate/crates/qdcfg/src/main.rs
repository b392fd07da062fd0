use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use qdcfg::pipeline::{self, MergeWeights, Run, RunOptions};
use qdcfg::{CliError, ExperimentConfig, Stage};

#[derive(Parser)]
#[command(name = "qdcfg", version, about = "Diversity-rewarded CFG distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML); the bundled default when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the global seed (takes precedence over QD_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parent directory of run directories (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print the execution plan without writing anything.
    #[arg(long, global = true)]
    dry_run: bool,
    /// Skip stages whose manifest matches the current inputs.
    #[arg(long, global = true)]
    cache: bool,
    /// Suppress progress messages on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Args, Clone)]
struct MergeArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint files to merge instead of the run's distillation outputs.
    #[arg(long, num_args = 1.., requires = "output")]
    inputs: Vec<PathBuf>,
    /// Interpolation weight in [0, 1] for two inputs, or "uniform".
    #[arg(long, default_value = "uniform")]
    lambda: MergeWeights,
    /// Output checkpoint for `--inputs`.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the style corpus.
    GenCorpus(Common),
    /// Maximum-likelihood pretraining of the base model.
    Pretrain(Common),
    /// Contrastive training of the diversity embedding.
    TrainEmbed(Common),
    /// One distillation run per configured beta.
    Distill(Common),
    /// Interpolate the quality and diversity checkpoints, or merge explicit
    /// checkpoint files with `--inputs`.
    Merge(MergeArgs),
    /// Evaluate the beta, lambda, gamma and temperature fronts.
    Sweep(Common),
    /// Collate all fronts into one combined report.
    Report(Common),
    /// Every stage in order.
    Run(Common),
    /// Print the resolved configuration and its run directory.
    Config(Common),
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let (stage, common) = match cli.command {
        Command::GenCorpus(c) => (Some(Stage::GenCorpus), c),
        Command::Pretrain(c) => (Some(Stage::Pretrain), c),
        Command::TrainEmbed(c) => (Some(Stage::TrainEmbed), c),
        Command::Distill(c) => (Some(Stage::Distill), c),
        Command::Merge(m) if !m.inputs.is_empty() => {
            let output = m.output.expect("clap requires --output with --inputs");
            pipeline::merge_files(&m.inputs, m.lambda, &output)?;
            return Ok(());
        }
        Command::Merge(m) => (Some(Stage::Merge), m.common),
        Command::Sweep(c) => (Some(Stage::Sweep), c),
        Command::Report(c) => (Some(Stage::Report), c),
        Command::Run(c) => (None, c),
        Command::Config(c) => {
            let mut cfg = ExperimentConfig::load(c.config.as_deref())?;
            if let Some(s) = c.seed {
                cfg.seed = s;
            }
            let run = Run::new(cfg, c.out.as_deref(), RunOptions::default());
            println!("# run directory: {}", run.dir.display());
            println!("# config hash: {}", run.hash);
            print!("{}", toml::to_string(&run.config).expect("config serializes"));
            return Ok(());
        }
    };
    let mut cfg = ExperimentConfig::load(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let opts = RunOptions {
        dry_run: common.dry_run,
        cache: common.cache,
        quiet: common.quiet,
    };
    let run = Run::new(cfg, common.out.as_deref(), opts);
    if opts.dry_run {
        println!("run directory: {}", run.dir.display());
    }
    match stage {
        Some(Stage::GenCorpus) => pipeline::cmd_gen_corpus(&run)?,
        Some(Stage::Pretrain) => pipeline::cmd_pretrain(&run)?,
        Some(Stage::TrainEmbed) => pipeline::cmd_train_embed(&run)?,
        Some(Stage::Distill) => pipeline::cmd_distill(&run)?,
        Some(Stage::Merge) => pipeline::cmd_merge(&run)?,
        Some(Stage::Sweep) => pipeline::cmd_sweep(&run)?,
        Some(Stage::Report) => pipeline::cmd_report(&run)?,
        None => {
            run.all()?;
            pipeline::Outcome::Done
        }
    };
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
