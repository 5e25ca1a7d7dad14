use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use grappa::fusion::FusionVariant;
use grappa::pipeline::{exit_code, init_threads, PipelineConfig, Runner, Step};
use grappa::{GrappaError, Result};

#[derive(Parser)]
#[command(name = "grappa", version, about = "Adaptor fusion for multi-task image retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Cluster frozen features of the unlabeled pool at every granularity.
    Pseudolabels(Common),
    /// Train adaptor sets on pseudo-labels.
    TrainAdaptors {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "all", required_unless_present = "all")]
        granularity: Option<usize>,
        #[arg(long)]
        all: bool,
    },
    /// Train the fusion over all adaptor sets.
    TrainFusion {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "ac")]
        variant: FusionVariant,
        /// Train with task labels instead of the consistency loss.
        #[arg(long)]
        supervised: bool,
    },
    /// Retrieval evaluation; without --model, evaluates every artifact in the run.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Image folder `root/<task>/<class>/<image>`; defaults to the configured data.
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long, requires = "model")]
        baseline: Option<PathBuf>,
    },
    /// Every step in order, then evaluation.
    All(Common),
}

fn runner(common: &Common) -> Result<Runner> {
    let (mut config, text) = PipelineConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    let mut r = Runner::new(config, text, common.out.clone())?;
    r.verbose = !common.quiet;
    Ok(r)
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Pseudolabels(c) => runner(&c)?.run(Step::PseudoLabels),
        Command::TrainAdaptors {
            common,
            granularity,
            all,
        } => runner(&common)?.train_adaptors(if all { None } else { granularity }),
        Command::TrainFusion {
            common,
            variant,
            supervised,
        } => runner(&common)?.train_fusion(variant, supervised),
        Command::Evaluate {
            common,
            model: None,
            tasks: None,
            ..
        } => runner(&common)?.run(Step::Evaluate),
        Command::Evaluate { model: None, .. } => Err(GrappaError::Config("--tasks requires --model".into())),
        Command::Evaluate {
            common,
            model: Some(model),
            tasks,
            baseline,
        } => {
            let r = runner(&common)?;
            let report = r.evaluate(&model, baseline.as_deref(), tasks.as_deref())?;
            let stem = r.layout.report(&report.model);
            std::fs::create_dir_all(stem.parent().expect("report dir")).map_err(|e| GrappaError::io(&stem, e))?;
            report.write(&stem, r.config.eval.chart && report.baseline.is_some())?;
            for t in &report.tasks {
                println!("{:<24} RP {:.4}  MAP@R {:.4}", t.task, t.rp, t.map_at_r);
            }
            println!("{:<24} RP {:.4}  MAP@R {:.4}", "mean", report.mean_rp, report.mean_map_at_r);
            if let Some(b) = &report.baseline {
                println!("vs {:<21} RP {:+.4}  MAP@R {:+.4}", b.baseline, b.mean_rp, b.mean_map_at_r);
            }
            Ok(())
        }
        Command::All(c) => runner(&c)?.run(Step::All),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
