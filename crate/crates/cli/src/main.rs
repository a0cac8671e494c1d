//! Command-line driver: one subcommand per pipeline stage.
//!
//! Every stage reads an optional TOML config, applies repeatable
//! `--set a.b.c=value` overrides, and writes its outputs into a fresh run
//! directory under `--out-dir` containing the fully resolved config.

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use cliplab::config::load_config;
use cliplab::pipeline;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "cliplab", version, about = "Contrastive vision-language laboratory")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set train.optim.lr=1e-3` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Directory that receives run directories.
    #[arg(long, default_value = "runs")]
    out_dir: PathBuf,
    /// Root seed override (same as `--set seed=N`).
    #[arg(long)]
    seed: Option<u64>,
    /// Compute device; only `cpu` is supported.
    #[arg(long, default_value = "cpu")]
    device: String,
}

impl Common {
    fn config(&self) -> anyhow::Result<cliplab::config::RunConfig> {
        if self.device != "cpu" {
            bail!("unsupported device {:?}: only cpu is available", self.device);
        }
        let mut overrides = self.set.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        load_config(self.config.as_deref(), &overrides).context("loading configuration")
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the evaluation datasets (class folders, retrieval TSV, clip store).
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Contrastive pretraining from scratch.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Distill a frozen teacher checkpoint into a fresh student.
    Distill {
        #[command(flatten)]
        common: Common,
        /// Teacher checkpoint.
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Finetune a checkpoint on video clips with frame-averaged embeddings.
    VideoFt {
        #[command(flatten)]
        common: Common,
        /// Base checkpoint to finetune.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Align spatial features to a frozen teacher and a locality oracle.
    SpatialAlign {
        #[command(flatten)]
        common: Common,
        /// Base checkpoint to finetune.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Layerwise frozen-feature probes (kNN, linear, attention, seg, tracking).
    Probe {
        #[command(flatten)]
        common: Common,
        /// Checkpoint whose features are probed.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Zero-shot classification and retrieval over a gen-data directory.
    Zeroshot {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate.
        #[arg(long)]
        checkpoint: PathBuf,
        /// A gen-data run directory.
        #[arg(long)]
        data: PathBuf,
    },
    /// Render PCA color maps of token features.
    Viz {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to visualize.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Aggregate probe reports into per-layer curve plots.
    Report {
        #[command(flatten)]
        common: Common,
        /// Directory containing probe run directories.
        #[arg(long)]
        runs: PathBuf,
    },
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().cmd {
        Cmd::GenData { common } => {
            let cfg = common.config()?;
            let paths = pipeline::gen_data_stage(&cfg, &common.out_dir)?;
            println!("gen-data: {}", paths.root.display());
            println!("  classification: {}", paths.classification.display());
            println!("  retrieval: {}", paths.retrieval_tsv.display());
            println!("  video: {}", paths.video_store.display());
        }
        Cmd::Pretrain { common } => {
            let cfg = common.config()?;
            let (dir, art) = pipeline::pretrain_stage(&cfg, &common.out_dir)?;
            println!("pretrain: {}", dir.display());
            println!("  checkpoint: {}", art.checkpoint.display());
            println!("  metrics: {}", art.metrics.display());
        }
        Cmd::Distill { common, teacher } => {
            let cfg = common.config()?;
            let (dir, art) = pipeline::distill_stage(&cfg, &teacher, &common.out_dir)?;
            println!("distill: {}", dir.display());
            println!("  checkpoint: {}", art.stage.checkpoint.display());
            println!("  agreement: {:.4}", art.final_agreement);
        }
        Cmd::VideoFt { common, checkpoint } => {
            let cfg = common.config()?;
            let (dir, art) = pipeline::video_stage(&cfg, &checkpoint, &common.out_dir)?;
            println!("video-ft: {}", dir.display());
            println!("  checkpoint: {}", art.checkpoint.display());
        }
        Cmd::SpatialAlign { common, checkpoint } => {
            let cfg = common.config()?;
            let (dir, art) = pipeline::spatial_stage(&cfg, &checkpoint, &common.out_dir)?;
            println!("spatial-align: {}", dir.display());
            println!("  checkpoint: {}", art.checkpoint.display());
        }
        Cmd::Probe { common, checkpoint } => {
            let cfg = common.config()?;
            let (dir, reports) = pipeline::probe_stage(&cfg, &checkpoint, &common.out_dir)?;
            println!("probe: {}", dir.display());
            for r in &reports {
                println!(
                    "  {}: best {:.4} @ layer {} (last {:.4})",
                    r.task, r.best, r.best_layer, r.last
                );
            }
        }
        Cmd::Zeroshot { common, checkpoint, data } => {
            let cfg = common.config()?;
            let (dir, report) = pipeline::zeroshot_stage(&cfg, &checkpoint, &data, &common.out_dir)?;
            println!("zeroshot: {}", dir.display());
            println!("  accuracy: {:.4} over {} classes", report.accuracy, report.n_classes);
            println!(
                "  retrieval t2i R@1 {:.4}, i2t R@1 {:.4}",
                report.retrieval.t2i.r1, report.retrieval.i2t.r1
            );
            if let Some(r1) = report.video_r1 {
                println!("  video R@1 {r1:.4}");
            }
        }
        Cmd::Viz { common, checkpoint } => {
            let cfg = common.config()?;
            let (dir, pngs) = pipeline::viz_stage(&cfg, &checkpoint, &common.out_dir)?;
            println!("viz: {}", dir.display());
            println!("  images: {}", pngs.len());
        }
        Cmd::Report { common, runs } => {
            let cfg = common.config()?;
            let _ = cfg; // report consumes prior runs; config only sets out-dir conventions
            let (dir, plots) = pipeline::report_stage(&runs, &common.out_dir)?;
            println!("report: {}", dir.display());
            println!("  plots: {}", plots.len());
        }
    }
    Ok(())
}
