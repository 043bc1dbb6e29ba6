//! `lungrisk` command-line interface.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure, 1 anything else.

use clap::{Args, Parser, Subcommand};
use lungrisk::pipeline::checkpoint::{Checkpoint, final_dir};
use lungrisk::pipeline::config::{ExperimentConfig, Regime};
use lungrisk::pipeline::dataset::{Dataset, synth_data};
use lungrisk::pipeline::evaluate::{metric_table, predict, write_report};
use lungrisk::pipeline::experiment::{predict_scan, run_experiment};
use lungrisk::pipeline::io::Split;
use lungrisk::pipeline::train::{RunOptions, finetune, pretrain};
use lungrisk::{Error, Result};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "lungrisk",
    version,
    about = "Six-year lung cancer risk from chest CT volumes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Supervision regime: expert-anno, lobe-side or none.
    #[arg(long)]
    regime: Option<String>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(r) = &self.regime {
            cfg.regime = Regime::parse(r)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Writes a synthetic phantom dataset and its manifest.
    SynthData {
        #[command(flatten)]
        common: Common,
    },
    /// Masked-autoencoder pretraining.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Dataset directory written by `synth-data`.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Risk fine-tuning from a pretrained checkpoint.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Pretraining run or checkpoint directory.
        #[arg(long)]
        pretrained: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Per-year risks and an attention map for one scan.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Fine-tuning run or checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Volume file stem (`<stem>.hdr` and `<stem>.raw`).
        #[arg(long)]
        volume: PathBuf,
        /// Lobe mask file stem on the same grid as the volume.
        #[arg(long)]
        lobes: PathBuf,
    },
    /// Metric table with bootstrap intervals on a dataset split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Split to score: train, test or probe.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Synthesis, pretraining, fine-tuning per regime and evaluation.
    RunExperiment {
        #[command(flatten)]
        common: Common,
    },
}

/// Accepts a checkpoint directory or a run directory holding `final/`.
fn checkpoint_dir(p: &Path) -> PathBuf {
    if p.join("manifest.json").exists() {
        p.to_path_buf()
    } else {
        final_dir(p)
    }
}

fn parse_split(s: &str) -> Result<Split> {
    [Split::Train, Split::Test, Split::Probe]
        .into_iter()
        .find(|x| x.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown split `{s}` (train, test, probe)")))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData { common } => {
            let cfg = common.config()?;
            let rows = synth_data(&cfg, &common.out)?;
            eprintln!("wrote {} scans to {}", rows.len(), common.out.display());
        }
        Command::Pretrain { common, data, resume } => {
            let cfg = common.config()?;
            let ds = Dataset::load(&data, &cfg, &[Split::Train])?;
            let opts = RunOptions {
                out_dir: Some(&common.out),
                resume: resume.as_deref(),
                verbose: true,
                ..Default::default()
            };
            pretrain(&ds.split(Split::Train), &cfg, &opts)?;
        }
        Command::Finetune {
            common,
            data,
            pretrained,
            resume,
        } => {
            let cfg = common.config()?;
            let pre = Checkpoint::<f32>::load(&checkpoint_dir(&pretrained))?;
            let ds = Dataset::load(&data, &cfg, &[Split::Train])?;
            let opts = RunOptions {
                out_dir: Some(&common.out),
                resume: resume.as_deref(),
                verbose: true,
                ..Default::default()
            };
            finetune(&ds.split(Split::Train), &pre, &cfg, cfg.regime, &opts)?;
        }
        Command::Predict {
            common,
            checkpoint,
            volume,
            lobes,
        } => {
            let ck = Checkpoint::<f32>::load(&checkpoint_dir(&checkpoint))?;
            let mut cfg = match &common.config {
                Some(_) => common.config()?,
                None => ck.manifest.config.clone(),
            };
            // The model layout always comes from the checkpoint.
            cfg.model = ck.manifest.config.model.clone();
            let (pred, _) = predict_scan(&cfg, &ck, &volume, &lobes, &common.out)?;
            let risks: Vec<String> = pred.cum_probs.iter().map(|p| format!("{p:.6}")).collect();
            println!("{}", risks.join("\t"));
        }
        Command::Evaluate {
            common,
            checkpoint,
            data,
            split,
        } => {
            let ck = Checkpoint::<f32>::load(&checkpoint_dir(&checkpoint))?;
            let mut cfg = match &common.config {
                Some(_) => common.config()?,
                None => ck.manifest.config.clone(),
            };
            cfg.model = ck.manifest.config.model.clone();
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            let split = parse_split(&split)?;
            let ds = Dataset::load(&data, &cfg, &[split])?;
            let samples = ds.split(split);
            let preds = predict(&samples, &ck.params, &cfg.model)?;
            let records: Vec<_> = samples.iter().map(|s| s.record.clone()).collect();
            let rows = metric_table(&preds, &records, &cfg.evaluate, cfg.seed)?;
            write_report(&common.out, &preds, &records, &rows, &cfg.evaluate)?;
            print!(
                "{}",
                std::fs::read_to_string(common.out.join("metrics.tsv")).unwrap_or_default()
            );
        }
        Command::RunExperiment { common } => {
            let mut cfg = common.config()?;
            if common.regime.is_some() {
                cfg.regimes = vec![cfg.regime];
            }
            run_experiment(&cfg, &common.out, true)?;
            print!(
                "{}",
                std::fs::read_to_string(common.out.join("report.tsv")).unwrap_or_default()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
