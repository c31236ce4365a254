use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sqa_core::config::RunConfig;
use sqa_core::joint_embed::BoundarySource;
use sqa_core::pipeline::{run_grid, run_stage, Stage};

#[derive(Parser)]
#[command(name = "sqa", about = "End-to-end spoken question answering on a synthetic corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic spoken QA corpus
    GenData(Common),
    /// Masked-LM pre-training of the text encoder
    PretrainText(Common),
    /// Train the phonetic-semantic joint embedding
    TrainJointEmbed(Common),
    /// Mixed text/audio masked-LM pre-training
    PretrainSpeechbert(Common),
    /// Fine-tune the end-to-end span predictor on audio words
    FinetuneQa(Common),
    /// Train the text QA model on ASR transcripts
    TrainCascade(Common),
    /// Score the end-to-end and cascade systems
    Eval(Common),
    /// Score both systems and their ensemble
    EnsembleEval(Common),
    /// Frame F1 per WER bucket for both systems
    WerCurve(Common),
    /// Every stage plus the no-MLM and true-boundary variants
    Grid(Common),
}

#[derive(Args)]
struct Common {
    /// key = value configuration file; missing keys take defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory holding data, checkpoints and reports
    #[arg(long, default_value = "run")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Fine-tune from the text encoder, skipping mixed MLM
    #[arg(long)]
    skip_mlm: bool,
    /// Word segmentation used for audio words at evaluation time
    #[arg(long, value_name = "true|asr")]
    boundaries: Option<BoundarySource>,
    /// Override a configuration key, e.g. --set qa_epochs=4
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn config(&self) -> sqa_core::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| sqa_core::Error::config(o.as_str(), "expected KEY=VALUE"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if self.skip_mlm {
            cfg.skip_mlm = true;
        }
        if let Some(b) = self.boundaries {
            cfg.boundary_source = b;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> sqa_core::Result<()> {
    let (stage, common) = match cli.command {
        Command::GenData(c) => (Some(Stage::GenData), c),
        Command::PretrainText(c) => (Some(Stage::PretrainText), c),
        Command::TrainJointEmbed(c) => (Some(Stage::TrainJointEmbed), c),
        Command::PretrainSpeechbert(c) => (Some(Stage::PretrainSpeechbert), c),
        Command::FinetuneQa(c) => (Some(Stage::FinetuneQa), c),
        Command::TrainCascade(c) => (Some(Stage::TrainCascade), c),
        Command::Eval(c) => (Some(Stage::Eval), c),
        Command::EnsembleEval(c) => (Some(Stage::EnsembleEval), c),
        Command::WerCurve(c) => (Some(Stage::WerCurve), c),
        Command::Grid(c) => (None, c),
    };
    let cfg = common.config()?;
    eprintln!("config {} seed {}", cfg.hash(), cfg.seed);
    match stage {
        Some(stage) => {
            let out = run_stage(stage, &cfg, &common.out)?;
            for e in &out.trace {
                eprintln!("epoch {} loss {:.4}", e.epoch, e.loss);
            }
            if let Some(a) = &out.mlm_accuracy {
                println!("held-out masked accuracy {a:.4}");
            }
            if let Some(r) = &out.anchor {
                println!(
                    "anchor: nn accuracy {:.4}, L1 true/random {:.4}/{:.4}",
                    r.nn_accuracy, r.mean_l1_true, r.mean_l1_random
                );
            }
            if let Some(r) = &out.report {
                print!("{r}");
            }
            for f in &out.files {
                eprintln!("wrote {}", f.display());
            }
            eprintln!("{stage} finished in {:.1}s", out.seconds);
        }
        None => {
            let grid = run_grid(&cfg, &common.out, |line| eprintln!("{line}"))?;
            if let Some(r) = grid.report("ensemble-eval") {
                print!("{r}");
            }
            eprintln!("grid finished in {:.1}s", grid.seconds());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
