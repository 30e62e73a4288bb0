//! `reco-lab`: generate, partition, train and evaluate from one JSON config.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use reco_core::pipeline::{
    cmd_eval, cmd_generate, cmd_partition, cmd_train, configure_threads, exit_code, RunConfig, Split, TrainOptions,
};
use reco_core::Result;

#[derive(Parser)]
#[command(name = "reco-lab", version, about = "Regional contrast experiments on synthetic segmentation data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Overrides the global seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic train and validation splits.
    Generate(Common),
    /// Choose labelled data and record the partition in the manifest.
    Partition(Common),
    /// Train and write metrics.csv plus checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        /// Leave out the `# started` line of metrics.csv.
        #[arg(long)]
        no_timestamp: bool,
        /// Continue from a checkpoint.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
    },
    /// Report IoU, optionally with relation graph and dendrogram exports.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "train|val")]
        split: Option<Split>,
        #[arg(long)]
        relate: bool,
    },
}

fn load(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Generate(common) => {
            let cfg = load(&common)?;
            let ds = cmd_generate(&cfg)?;
            println!(
                "wrote {} train and {} val images to {}",
                ds.train.len(),
                ds.val.len(),
                cfg.dataset_dir().display()
            );
        }
        Command::Partition(common) => {
            let cfg = load(&common)?;
            let record = cmd_partition(&cfg)?;
            println!(
                "{} labelled, {} unlabelled train images",
                record.labelled.len(),
                record.unlabelled.len()
            );
        }
        Command::Train {
            common,
            no_timestamp,
            resume,
        } => {
            let cfg = load(&common)?;
            let summary = cmd_train(&cfg, &TrainOptions { no_timestamp, resume })?;
            if let Some(last) = summary.last {
                println!("iter {} total loss {:.6}", last.iter, last.loss.total);
            }
            println!("checkpoint {}", summary.final_checkpoint.display());
        }
        Command::Eval {
            common,
            checkpoint,
            split,
            relate,
        } => {
            let mut cfg = load(&common)?;
            if checkpoint.is_some() {
                cfg.eval.checkpoint = checkpoint;
            }
            if let Some(split) = split {
                cfg.eval.split = split;
            }
            cfg.eval.relate |= relate;
            let summary = cmd_eval(&cfg)?;
            for (c, iou) in summary.report.per_class.iter().enumerate() {
                match iou {
                    Some(v) => println!("class {c}: {v:.4}"),
                    None => println!("class {c}: -"),
                }
            }
            println!("mIoU {:.4}", summary.report.mean);
            for path in summary.written {
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}
