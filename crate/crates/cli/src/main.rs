use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use crater_cli::{
    cmd_eval, cmd_finetune, cmd_post, cmd_predict, cmd_synth, cmd_tl_experiment, cmd_train, exit_code, RunConfig,
};

#[derive(Parser)]
#[command(name = "crater", version, about = "Crater detection with a compact U-Net")]
struct Cli {
    /// Run configuration (key=value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `paths.out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Allow overwriting existing checkpoints.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the domain A and domain B datasets.
    Synth,
    /// Pretrain on domain A.
    Train,
    /// Fine-tune the pretrained network on domain B.
    Finetune {
        /// Number of domain B training tiles (default: all).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Write probability maps, detections and overlays for a directory of tiles.
    Predict {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory of tile PNGs (default: the domain B test split).
        #[arg(long)]
        tiles: Option<PathBuf>,
    },
    /// Detect craters in `<id>_prob.png` maps and write detections.csv.
    Post {
        /// Directory holding the maps (default: `<out>/predict`).
        #[arg(long)]
        pred: Option<PathBuf>,
    },
    /// Score probability maps against a truth CSV.
    Eval {
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Truth CSV (default: the domain B test split truth).
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Fine-tune at every configured size and tabulate domain B scores.
    TlExperiment,
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.out_dir = o;
    }
    let pred_default = cfg.out_dir.join("predict");
    match cli.command {
        Command::Synth => cmd_synth(&cfg)?,
        Command::Train => {
            let report = cmd_train(&cfg, cli.force)?;
            if let Some(last) = report.epochs.last() {
                println!("epoch {} train_loss {:.5} train_accuracy {:.4}", last.epoch, last.train_loss, last.train_accuracy);
            }
        }
        Command::Finetune { n } => {
            let path = cmd_finetune(&cfg, n, cli.force)?;
            println!("{}", path.display());
        }
        Command::Predict { checkpoint, tiles } => {
            let ckpt = checkpoint.unwrap_or_else(|| cfg.checkpoint());
            let tiles = tiles.unwrap_or_else(|| cfg.data_root().join("b").join("test"));
            cmd_predict(&cfg, &ckpt, &tiles, &pred_default)?;
        }
        Command::Post { pred } => {
            let dets = cmd_post(&cfg, &pred.unwrap_or(pred_default))?;
            println!("{} detections", dets.iter().map(|(_, d)| d.len()).sum::<usize>());
        }
        Command::Eval { pred, truth } => {
            let truth = truth.unwrap_or_else(|| cfg.data_root().join("b").join("test_truth.csv"));
            let report = cmd_eval(&cfg, &pred.unwrap_or(pred_default), &truth, &cfg.out_dir)?;
            print!("{}", report.to_key_values());
        }
        Command::TlExperiment => {
            for row in cmd_tl_experiment(&cfg)? {
                println!("{}", row.to_csv_row());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
