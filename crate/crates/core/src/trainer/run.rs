//! The epoch loop: batching, augmentation, evaluation, metrics and
//! periodic checkpoints.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::checkpoint::write_checkpoint;
use super::step::{train_step, StepInputs, TrainState};
use super::ExperimentConfig;
use crate::data::{weak_view, GeoTransform, ViewPair};
use crate::data::{make_split, to_batch, Dataset, Scene, SplitManifest};
use crate::error::{contract, Error, Result};
use crate::harness;
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::tensor::Tensor;

/// One row of the metrics CSV; losses are means over the epoch's steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    #[serde(rename = "L_s")]
    pub l_s: f64,
    #[serde(rename = "L_ip")]
    pub l_ip: f64,
    #[serde(rename = "L_p2p")]
    pub l_p2p: f64,
    #[serde(rename = "L_dt")]
    pub l_dt: f64,
    #[serde(rename = "L_m")]
    pub l_m: f64,
    #[serde(rename = "L_n")]
    pub l_n: f64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    #[serde(rename = "mean_S_p2p")]
    pub mean_s_p2p: f64,
    #[serde(rename = "val_mIoU")]
    pub val_miou: f64,
}

pub fn write_metrics(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record([
            "epoch", "L_s", "L_ip", "L_p2p", "L_dt", "L_m", "L_n", "L_total", "mean_S_p2p", "val_mIoU",
        ])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Training and validation scenes of a config's dataset.
pub struct Partition<'a> {
    pub train: &'a [Scene],
    pub val: &'a [Scene],
    pub split: SplitManifest,
}

pub fn partition<'a>(cfg: &ExperimentConfig, data: &'a Dataset) -> Result<Partition<'a>> {
    let need = cfg.n_train + cfg.n_val;
    if data.len() < need {
        contract!("dataset has {} scenes, config needs {need}", data.len());
    }
    let first = &data.scenes[0];
    if first.labels.height != cfg.image_size || first.labels.width != cfg.image_size {
        contract!("dataset images are not {0}×{0}", cfg.image_size);
    }
    Ok(Partition {
        train: &data.scenes[..cfg.n_train],
        val: &data.scenes[cfg.n_train..need],
        split: make_split(cfg.n_train, cfg.n_labeled, cfg.seeds.split)?,
    })
}

pub fn generate_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    Dataset::generate(&cfg.dataset_spec())
}

/// Seed of the augmentation of batch slot `slot` in `epoch`.
fn view_seed(run: u64, epoch: usize, slot: usize, labeled: bool) -> u64 {
    let e = derive_seed(run, Stream::Augment, epoch as u64);
    derive_seed(e, Stream::Augment, 2 * slot as u64 + labeled as u64)
}

fn shuffled(ids: &[usize], run: u64, index: u64) -> Vec<usize> {
    let mut v = ids.to_vec();
    v.shuffle(&mut stream_rng(run, Stream::Shuffle, index));
    v
}

/// Assembles the inputs of step `s` of `epoch`.
pub fn step_inputs(
    cfg: &ExperimentConfig,
    part: &Partition,
    epoch: usize,
    s: usize,
    order_l: &[usize],
    order_u: &[usize],
) -> Result<StepInputs> {
    let b = cfg.batch;
    let run = cfg.seeds.run;
    let mut labeled = Vec::with_capacity(b);
    let mut labels = Vec::new();
    for j in 0..b {
        let slot = s * b + j;
        let scene = &part.train[order_l[slot % order_l.len()]];
        let geo = GeoTransform::sample(&mut stream_rng(view_seed(run, epoch, slot, true), Stream::Augment, 0));
        labeled.push(weak_view(&scene.image, geo)?);
        labels.extend(geo.apply_labels(&scene.labels).data.iter().map(|&l| l as usize));
    }
    let (mut weak, mut strong) = (Vec::new(), Vec::new());
    let end = ((s + 1) * b).min(order_u.len());
    for (slot, &id) in order_u.iter().enumerate().take(end).skip(s * b) {
        let pair = ViewPair::new(&part.train[id].image, view_seed(run, epoch, slot, false))?;
        weak.push(pair.weak);
        strong.push(pair.strong);
    }
    let batch = |v: &[Tensor]| to_batch(&v.iter().collect::<Vec<_>>());
    Ok(StepInputs {
        labeled: batch(&labeled)?,
        labels,
        weak: batch(&weak)?,
        strong: batch(&strong)?,
    })
}

pub struct RunOutput {
    pub state: TrainState,
    pub metrics: Vec<EpochMetrics>,
    /// Validation mIoU of the final parameters.
    pub val_miou: f64,
}

/// Trains from scratch. With `out_dir`, the metrics CSV is rewritten after
/// every epoch and checkpoints are written every `ckpt_every` epochs.
pub fn train(
    cfg: &ExperimentConfig,
    data: &Dataset,
    out_dir: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<RunOutput> {
    cfg.validate()?;
    let part = partition(cfg, data)?;
    let mut state = TrainState::new(cfg)?;
    let run = cfg.seeds.run;
    let n_u = part.split.unlabeled.len();
    let steps = n_u.div_ceil(cfg.batch);
    let mut metrics = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let order_u = shuffled(&part.split.unlabeled, run, 2 * epoch as u64);
        let order_l = shuffled(&part.split.labeled, run, 2 * epoch as u64 + 1);
        let mut sums = [0.0; 7];
        let (mut sim_sum, mut sim_n) = (0.0, 0usize);
        for s in 0..steps {
            let inputs = step_inputs(cfg, &part, epoch, s, &order_l, &order_u)?;
            let rec = train_step(&mut state, &inputs, cfg)?;
            for (acc, v) in sums.iter_mut().zip(rec.components.values()) {
                *acc += v;
            }
            sums[6] += rec.total;
            sim_sum += rec.similarities.iter().sum::<f64>();
            sim_n += rec.similarities.len();
        }
        let m = |i: usize| sums[i] / steps as f64;
        let row = EpochMetrics {
            epoch,
            l_s: m(0),
            l_ip: m(1),
            l_p2p: m(2),
            l_dt: m(3),
            l_m: m(4),
            l_n: m(5),
            l_total: m(6),
            mean_s_p2p: sim_sum / sim_n as f64,
            val_miou: harness::evaluate(&state.net, part.val, cfg.num_classes)?,
        };
        on_epoch(&row);
        metrics.push(row);
        if let Some(dir) = out_dir {
            write_metrics(&dir.join("metrics.csv"), &metrics)?;
            if cfg.ckpt_every > 0 && epoch % cfg.ckpt_every == 0 {
                write_checkpoint(&dir.join(format!("ckpt_epoch_{epoch:04}")), cfg, &state, epoch)?;
            }
        }
    }

    let val_miou = match metrics.last() {
        Some(r) => r.val_miou,
        None => harness::evaluate(&state.net, part.val, cfg.num_classes)?,
    };
    if let Some(dir) = out_dir {
        write_metrics(&dir.join("metrics.csv"), &metrics)?;
        write_checkpoint(&dir.join("final.ckpt"), cfg, &state, cfg.epochs)?;
    }
    Ok(RunOutput {
        state,
        metrics,
        val_miou,
    })
}
