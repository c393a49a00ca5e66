//! Toggle ablation: every arm trained on the same data with the same seeds.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::analysis::mean_similarity;
use crate::data::Dataset;
use crate::error::{contract, Error, Result};
use crate::segnet::SegNet;
use crate::trainer::{self, ExperimentConfig, Toggles};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arm {
    Baseline,
    Ip,
    IpIf,
    IpFp,
    Full,
}

impl Arm {
    pub const ALL: [Arm; 5] = [Arm::Baseline, Arm::Ip, Arm::IpIf, Arm::IpFp, Arm::Full];

    pub fn label(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::Ip => "+IP",
            Arm::IpIf => "+IP+IF",
            Arm::IpFp => "+IP+FP",
            Arm::Full => "full",
        }
    }

    pub fn toggles(self) -> Toggles {
        let (ip_on, if_on, fp_on) = match self {
            Arm::Baseline => (false, false, false),
            Arm::Ip => (true, false, false),
            Arm::IpIf => (true, true, false),
            Arm::IpFp => (true, false, true),
            Arm::Full => (true, true, true),
        };
        Toggles { ip_on, if_on, fp_on }
    }

    pub fn parse(s: &str) -> Option<Arm> {
        Arm::ALL.into_iter().find(|a| a.label() == s)
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub arm: Arm,
    pub seed: u64,
    pub toggles: Toggles,
    pub val_miou: Option<f64>,
    /// Mean weak/strong similarity of the trained model on validation scenes.
    pub val_s_p2p: Option<f64>,
    pub error: Option<String>,
    pub model: Option<SegNet>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArmSummary {
    pub arm: Arm,
    pub mean_miou: f64,
    pub std_miou: f64,
    pub mean_s_p2p: f64,
    pub completed: usize,
    pub failed: usize,
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub summaries: Vec<ArmSummary>,
}

impl AblationReport {
    pub fn summary(&self, arm: Arm) -> Option<&ArmSummary> {
        self.summaries.iter().find(|s| s.arm == arm)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["arm", "seed", "ip_on", "if_on", "fp_on", "val_mIoU", "val_S_p2p", "status"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.arm.label().to_string(),
                r.seed.to_string(),
                r.toggles.ip_on.to_string(),
                r.toggles.if_on.to_string(),
                r.toggles.fp_on.to_string(),
                opt(r.val_miou),
                opt(r.val_s_p2p),
                match &r.error {
                    None => "ok".to_string(),
                    Some(e) => format!("failed: {e}"),
                },
            ])?;
        }
        super::finish_csv(w)
    }

    /// Fixed-width table of per-arm mIoU (in points) and similarity.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:>16} {:>10} {:>6}", "arm", "val mIoU", "S_p2p", "runs");
        for a in &self.summaries {
            let runs = if a.failed > 0 {
                format!("{}/{}", a.completed, a.completed + a.failed)
            } else {
                a.completed.to_string()
            };
            let _ = writeln!(
                s,
                "{:<10} {:>8.2} ± {:<5.2} {:>10.4} {:>6}",
                a.arm.label(),
                100.0 * a.mean_miou,
                100.0 * a.std_miou,
                a.mean_s_p2p,
                runs
            );
        }
        s
    }
}

/// Seed `s` sets both the run and the split seed; the data seed is shared.
pub fn arm_config(base: &ExperimentConfig, arm: Arm, seed: u64) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.toggles = arm.toggles();
    cfg.seeds.run = seed;
    cfg.seeds.split = seed;
    cfg
}

fn run_one(base: &ExperimentConfig, data: &Dataset, arm: Arm, seed: u64, out: Option<&Path>) -> AblationRow {
    let cfg = arm_config(base, arm, seed);
    let result = (|| -> Result<(f64, f64, SegNet)> {
        let dir = match out {
            Some(o) => {
                let d = o.join(format!("{}_seed{seed}", arm.label().replace('+', "p")));
                std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
                Some(d)
            }
            None => None,
        };
        let run = trainer::train(&cfg, data, dir.as_deref(), &mut |_| {})?;
        let part = trainer::partition(&cfg, data)?;
        let s = mean_similarity(&run.state.net, part.val, cfg.seeds.data)?;
        Ok((run.val_miou, s, run.state.net))
    })();
    match result {
        Ok((miou, s, net)) => AblationRow {
            arm,
            seed,
            toggles: cfg.toggles,
            val_miou: Some(miou),
            val_s_p2p: Some(s),
            error: None,
            model: Some(net),
        },
        Err(e) => AblationRow {
            arm,
            seed,
            toggles: cfg.toggles,
            val_miou: None,
            val_s_p2p: None,
            error: Some(e.to_string()),
            model: None,
        },
    }
}

/// Trains every `(arm, seed)` pair, in parallel when threads are available.
/// A failing run is recorded in its row and does not stop the others.
pub fn run_ablation(
    base: &ExperimentConfig,
    data: &Dataset,
    arms: &[Arm],
    seeds: &[u64],
    out_dir: Option<&Path>,
) -> Result<AblationReport> {
    if seeds.is_empty() || arms.is_empty() {
        contract!("ablation needs at least one arm and one seed");
    }
    base.validate()?;
    let jobs: Vec<(Arm, u64)> = arms
        .iter()
        .flat_map(|&a| seeds.iter().map(move |&s| (a, s)))
        .collect();
    let rows: Vec<AblationRow> = jobs
        .par_iter()
        .map(|&(arm, seed)| run_one(base, data, arm, seed, out_dir))
        .collect();
    let summaries = arms
        .iter()
        .map(|&arm| {
            let ok: Vec<&AblationRow> = rows.iter().filter(|r| r.arm == arm && r.error.is_none()).collect();
            let n = ok.len() as f64;
            let vals: Vec<f64> = ok.iter().filter_map(|r| r.val_miou).collect();
            let mean = if ok.is_empty() { f64::NAN } else { vals.iter().sum::<f64>() / n };
            let var = if ok.len() > 1 {
                vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            let s = ok.iter().filter_map(|r| r.val_s_p2p).sum::<f64>() / n;
            ArmSummary {
                arm,
                mean_miou: mean,
                std_miou: var.sqrt(),
                mean_s_p2p: s,
                completed: ok.len(),
                failed: rows.iter().filter(|r| r.arm == arm).count() - ok.len(),
            }
        })
        .collect();
    Ok(AblationReport { rows, summaries })
}
