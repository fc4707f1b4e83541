//! Command-line front end.

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use stvsr_core::pipeline::Arm;

use crate::commands::{self, CliError, CliResult};
use crate::config::PipelineConfig;
use crate::rvid::Dtype;

#[derive(Parser, Debug)]
#[command(name = "stvsr", version, about = "Space-time video super-resolution toolkit")]
pub struct Cli {
    /// TOML config; every key has a default.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config's root seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Repeat for more detail.
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum DtypeArg {
    U8,
    F32,
}

impl From<DtypeArg> for Dtype {
    fn from(d: DtypeArg) -> Self {
        match d {
            DtypeArg::U8 => Dtype::U8,
            DtypeArg::F32 => Dtype::F32,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write random moving-shape clips and their true flows.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "f32")]
        dtype: DtypeArg,
    },
    /// Blur, add noise, downsample and temporally subsample a clip.
    Degrade {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "f32")]
        dtype: DtypeArg,
    },
    /// Estimate flow between two PNG frames.
    Flow {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Restore a low-resolution, low-frame-rate clip.
    Restore {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "f32")]
        dtype: DtypeArg,
    },
    /// Train end to end; without --data, clips are synthesised.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Start from this checkpoint instead of pretraining the autoencoder.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Metrics log, one JSON record per step [default: <out>.log.jsonl].
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score restored clips against references with matching ids.
    Evaluate {
        #[arg(long)]
        restored: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate each ablation arm under the same budget.
    Ablate {
        /// Comma-separated arms [default: all].
        #[arg(long, value_delimiter = ',')]
        arms: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn load_config(cli: &Cli) -> CliResult<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::SynthData { out, dtype } => commands::synth_data(&cfg, out, (*dtype).into()).map(|_| ()),
        Command::Degrade { input, out, dtype } => commands::degrade(&cfg, input, out, (*dtype).into()).map(|_| ()),
        Command::Flow { a, b, out } => commands::flow(&cfg, a, b, out),
        Command::Restore { input, checkpoint, out, dtype } => commands::restore(&cfg, input, checkpoint, out, (*dtype).into()).map(|_| ()),
        Command::Train { data, out, init, log } => commands::train(&cfg, data.as_deref(), out, init.as_deref(), log.as_deref()).map(|_| ()),
        Command::Evaluate { restored, reference, out } => {
            let r = commands::evaluate(&cfg, restored, reference, out)?;
            println!("psnr {:.4} ssim {:.4} tof {:.4} tlp {:.4}", r.mean.psnr, r.mean.ssim, r.mean.tof, r.mean.tlp);
            Ok(())
        }
        Command::Ablate { arms, out } => {
            let arms = if arms.is_empty() {
                Arm::ALL.to_vec()
            } else {
                arms.iter().map(|a| Arm::parse(a).ok_or_else(|| CliError::Invalid(format!("unknown arm `{a}`")))).collect::<CliResult<Vec<_>>>()?
            };
            let r = commands::ablate(&cfg, &arms, out)?;
            println!("baseline psnr {:.4}", r.baseline.mean.psnr);
            for a in &r.arms {
                println!("{:<10} psnr {:.4} ssim {:.4} tof {:.4} tlp {:.4}", a.arm, a.report.mean.psnr, a.report.mean.ssim, a.report.mean.tof, a.report.mean.tlp);
            }
            Ok(())
        }
    }
}
