//! Central-difference check of every objective term on a tiny instance.
//!
//! All decisions (weak branch, selections, masks, noise, pseudo-labels) are
//! taken once at the base parameters and reused for every perturbed
//! evaluation, so each term is a smooth function of the parameters apart
//! from ReLU kinks.

use serde::Serialize;

use crate::data::ViewPair;
use crate::data::{to_batch, Dataset, DatasetSpec};
use crate::error::Result;
use crate::fka::{self, PrototypeBank};
use crate::segnet::{SegNet, PARAM_NAMES};
use crate::tensor::{compare_gradients, Tape};
use crate::trainer::{record_objective, weak_branch, ExperimentConfig, StepInputs, StepSeeds, Terms, Toggles};

pub const GRADCHECK_TOL: f64 = 1e-4;
pub const GRADCHECK_TERMS: [&str; 7] = ["L_s", "L_ip", "L_p2p", "L_dt", "L_m", "L_n", "L_total"];
const STEP: f64 = 1e-6;
const BATCH: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckRow {
    pub term: &'static str,
    pub max_rel_error: f64,
    /// Parameter tensor and flat index of the worst entry.
    pub worst: String,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub rows: Vec<GradcheckRow>,
    pub tolerance: f64,
    /// Confidence threshold actually used for the pseudo-label term.
    pub tau_used: f64,
    pub parameters: usize,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["term", "max_rel_error", "worst", "status"])?;
        for r in &self.rows {
            w.write_record([
                r.term,
                &format!("{:e}", r.max_rel_error),
                &r.worst,
                if r.passed { "pass" } else { "FAIL" },
            ])?;
        }
        super::finish_csv(w)
    }
}

fn term_values(terms: &Terms, tape: &Tape) -> [f64; 7] {
    let c = terms.components(tape).values();
    [c[0], c[1], c[2], c[3], c[4], c[5], tape.value(terms.total).data()[0]]
}

fn term_vars(terms: &Terms) -> [Option<crate::tensor::Var>; 7] {
    let a = terms.all();
    [a[0], a[1], a[2], a[3], a[4], a[5], Some(terms.total)]
}

struct Instance {
    cfg: ExperimentConfig,
    net: SegNet,
    inputs: StepInputs,
    bank: PrototypeBank,
    seeds: StepSeeds,
}

/// Two labeled and two unlabeled scenes at the config's size, all terms on,
/// and a bank initialized from the instance's own weak features.
fn instance(base: &ExperimentConfig) -> Result<Instance> {
    let mut cfg = base.clone();
    cfg.toggles = Toggles::ALL;
    let spec = DatasetSpec::synthetic(cfg.image_size, cfg.num_classes, 2 * BATCH, cfg.seeds.data);
    let data = Dataset::generate(&spec)?;
    let net = SegNet::init(&cfg.architecture(), cfg.seeds.run, cfg.init_scale)?;
    let labeled: Vec<_> = data.scenes[..BATCH].iter().map(|s| &s.image).collect();
    let labels = data.scenes[..BATCH]
        .iter()
        .flat_map(|s| s.labels.data.iter().map(|&l| l as usize))
        .collect();
    let pairs = data.scenes[BATCH..]
        .iter()
        .enumerate()
        .map(|(i, s)| ViewPair::new(&s.image, cfg.seeds.run.wrapping_add(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let weak = to_batch(&pairs.iter().map(|p| &p.weak).collect::<Vec<_>>())?;
    let strong = to_batch(&pairs.iter().map(|p| &p.strong).collect::<Vec<_>>())?;

    let (f_w, p_w) = weak_branch(&net, &weak)?;
    // a random network is rarely confident; fall back to the median top
    // probability so the pseudo-label term is exercised
    let z = cfg.num_classes;
    let hw = cfg.image_size * cfg.image_size;
    let mut top: Vec<f64> = (0..BATCH * hw)
        .map(|pix| {
            let (b, j) = (pix / hw, pix % hw);
            (0..z).map(|k| p_w.data()[(b * z + k) * hw + j]).fold(0.0, f64::max)
        })
        .collect();
    if top.iter().all(|&t| t < cfg.tau) {
        top.sort_by(f64::total_cmp);
        cfg.tau = top[top.len() / 2];
    }
    let mut bank = PrototypeBank::new(cfg.num_classes, cfg.feature_channels, cfg.eta);
    bank.update(&fka::class_feature_sets(&f_w, &f_w, &p_w)?);

    Ok(Instance {
        seeds: StepSeeds::for_step(cfg.seeds.run, 0),
        cfg,
        net,
        inputs: StepInputs {
            labeled: to_batch(&labeled)?,
            labels,
            weak,
            strong,
        },
        bank,
    })
}

fn check(base: &ExperimentConfig, corrupt: Option<&str>) -> Result<GradcheckReport> {
    let inst = instance(base)?;
    let Instance {
        cfg,
        net,
        inputs,
        bank,
        seeds,
    } = &inst;

    let mut tape = Tape::new();
    let bound = net.bind(&mut tape);
    let (terms, decisions) = record_objective(&mut tape, &bound, net, inputs, bank, cfg, *seeds, None)?;
    tape.check_finite()?;
    let params = net.tensors();
    let total_len: usize = params.iter().map(|t| t.numel()).sum();

    // analytic[t] is the flat gradient of term t over all parameters
    let mut analytic = Vec::with_capacity(7);
    for v in term_vars(&terms) {
        let v = v.expect("every term is active");
        let g = tape.backward(v)?;
        let mut flat = Vec::with_capacity(total_len);
        for (&pv, p) in bound.vars.iter().zip(&params) {
            match g.get(pv) {
                Some(t) => flat.extend_from_slice(t.data()),
                None => flat.extend(std::iter::repeat_n(0.0, p.numel())),
            }
        }
        analytic.push(flat);
    }
    if let Some(name) = corrupt {
        if let Some(t) = GRADCHECK_TERMS.iter().position(|&n| n == name) {
            analytic[t][0] += 1.0;
        }
    }

    let base_flat = net.flatten().into_data();
    let eval = |flat: &[f64]| -> Result<[f64; 7]> {
        let shifted = net.unflatten(flat)?;
        let mut t = Tape::new();
        let b = shifted.bind_frozen(&mut t);
        let (terms, _) = record_objective(&mut t, &b, &shifted, inputs, bank, cfg, *seeds, Some(&decisions))?;
        Ok(term_values(&terms, &t))
    };
    let mut numeric = vec![vec![0.0; total_len]; 7];
    let mut flat = base_flat.clone();
    for i in 0..total_len {
        flat[i] = base_flat[i] + STEP;
        let up = eval(&flat)?;
        flat[i] = base_flat[i] - STEP;
        let down = eval(&flat)?;
        flat[i] = base_flat[i];
        for t in 0..7 {
            numeric[t][i] = (up[t] - down[t]) / (2.0 * STEP);
        }
    }

    let locate = |mut i: usize| -> String {
        for (name, p) in PARAM_NAMES.iter().zip(&params) {
            if i < p.numel() {
                return format!("{name}[{i}]");
            }
            i -= p.numel();
        }
        "-".to_string()
    };
    let rows = GRADCHECK_TERMS
        .iter()
        .enumerate()
        .map(|(t, &term)| {
            let r = compare_gradients(&analytic[t], &numeric[t])?;
            Ok(GradcheckRow {
                term,
                max_rel_error: r.max_rel_error,
                worst: locate(r.worst_index),
                passed: r.max_rel_error <= GRADCHECK_TOL,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradcheckReport {
        rows,
        tolerance: GRADCHECK_TOL,
        tau_used: cfg.tau,
        parameters: total_len,
    })
}

/// Checks all seven terms at the config's sizes with every toggle on.
pub fn run_gradcheck(cfg: &ExperimentConfig) -> Result<GradcheckReport> {
    check(cfg, None)
}

/// Negative control: the analytic gradient of `term` is perturbed by 1 in
/// its first entry before comparison.
pub fn run_gradcheck_corrupted(cfg: &ExperimentConfig, term: &str) -> Result<GradcheckReport> {
    check(cfg, Some(term))
}
