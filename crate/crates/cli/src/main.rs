use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use mccl::data::{read_dataset, write_dataset, Dataset, DatasetSpec};
use mccl::harness::{self, Arm};
use mccl::trainer::{self, ExperimentConfig};

#[derive(Parser)]
#[command(name = "mccl", version, about = "Semi-supervised segmentation with similarity-driven consistency")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset described by a JSON spec.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model; writes metrics.csv, checkpoints and final.ckpt.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the run and split seeds.
        #[arg(long)]
        seed: Option<u64>,
        /// Dataset directory; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Validation mIoU of a checkpoint on a dataset's validation scenes.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Trains every toggle arm for each seed.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Subset of arms: baseline, +IP, +IP+IF, +IP+FP, full.
        #[arg(long, value_delimiter = ',')]
        arms: Option<Vec<String>>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Similarity histogram of a checkpoint as CSV on stdout.
    Analyze {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 10)]
        bins: usize,
    },
    /// Finite-difference check of every loss term; exits nonzero on failure.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
    },
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    ExperimentConfig::from_json(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_data(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<Dataset> {
    Ok(match dir {
        Some(d) => read_dataset(d)?,
        None => trainer::generate_data(cfg)?,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { spec, out } => {
            let text = fs::read_to_string(&spec).with_context(|| format!("reading {}", spec.display()))?;
            let spec: DatasetSpec = serde_json::from_str(&text)?;
            let data = Dataset::generate(&spec)?;
            write_dataset(&out, &data)?;
            eprintln!("wrote {} scenes to {}", data.len(), out.display());
        }
        Command::Train { config, out, seed, data } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seeds.run = s;
                cfg.seeds.split = s;
            }
            let data = load_data(&cfg, data.as_deref())?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            fs::write(out.join("config.json"), cfg.to_json())?;
            let run = trainer::train(&cfg, &data, Some(&out), &mut |m| {
                eprintln!(
                    "epoch {:>3}  L_total {:.4}  S_p2p {:.4}  val mIoU {:.4}",
                    m.epoch, m.l_total, m.mean_s_p2p, m.val_miou
                )
            })?;
            println!("{}", serde_json::json!({ "val_mIoU": run.val_miou, "config_hash": cfg.hash() }));
        }
        Command::Eval { ckpt, data } => {
            let ck = trainer::read_checkpoint(&ckpt)?;
            let data = read_dataset(&data)?;
            let part = trainer::partition(&ck.config, &data)?;
            let miou = harness::evaluate(&ck.state.net, part.val, ck.config.num_classes)?;
            println!("{}", serde_json::json!({ "epoch": ck.epoch, "val_mIoU": miou }));
        }
        Command::Ablate { config, seeds, out, arms, data } => {
            let cfg = load_config(&config)?;
            let arms = match arms {
                None => Arm::ALL.to_vec(),
                Some(names) => names
                    .iter()
                    .map(|n| Arm::parse(n).with_context(|| format!("unknown arm {n:?}")))
                    .collect::<Result<_>>()?,
            };
            let data = load_data(&cfg, data.as_deref())?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let report = harness::run_ablation(&cfg, &data, &arms, &seeds, Some(&out))?;
            fs::write(out.join("ablation.csv"), report.to_csv()?)?;
            print!("{}", report.to_table());
            let failed: usize = report.summaries.iter().map(|s| s.failed).sum();
            if failed > 0 {
                eprintln!("{failed} run(s) failed; see ablation.csv");
            }
        }
        Command::Analyze { ckpt, data, bins } => {
            let ck = trainer::read_checkpoint(&ckpt)?;
            let data = read_dataset(&data)?;
            let part = trainer::partition(&ck.config, &data)?;
            let h = harness::similarity_histogram(&ck.state.net, part.val, bins, ck.config.seeds.data)?;
            print!("{}", h.to_csv()?);
            if let Some(rho) = h.trend() {
                eprintln!("spearman(agreement, bin) = {rho:.4}");
            }
        }
        Command::Gradcheck { config } => {
            let cfg = load_config(&config)?;
            let report = harness::run_gradcheck(&cfg)?;
            print!("{}", report.to_csv()?);
            if !report.passed() {
                bail!("gradient check failed (tolerance {:e})", report.tolerance);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
