//! Evaluation, similarity analysis, ablation runs and gradient checks.

mod ablation;
mod analysis;
mod gradcheck;

pub use ablation::{run_ablation, AblationReport, AblationRow, Arm, ArmSummary};
pub use analysis::{analysis_views, histogram_of_views, mean_similarity, similarity_histogram, spearman, SimilarityHistogram};
pub use gradcheck::{run_gradcheck, run_gradcheck_corrupted, GradcheckReport, GradcheckRow, GRADCHECK_TERMS, GRADCHECK_TOL};

use crate::data::{to_batch, Scene};
use crate::error::{contract, Result};
use crate::segnet::SegNet;

/// Intersection and union pixel counts per class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IouCounts {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
}

impl IouCounts {
    pub fn new(num_classes: usize) -> Self {
        Self {
            intersection: vec![0; num_classes],
            union: vec![0; num_classes],
        }
    }

    pub fn add(&mut self, pred: &[usize], gt: &[usize]) -> Result<()> {
        let z = self.union.len();
        if pred.len() != gt.len() {
            contract!("{} predictions for {} labels", pred.len(), gt.len());
        }
        if let Some(&bad) = pred.iter().chain(gt).find(|&&l| l >= z) {
            contract!("label {bad} out of range for {z} classes");
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if p == g {
                self.intersection[p] += 1;
                self.union[p] += 1;
            } else {
                self.union[p] += 1;
                self.union[g] += 1;
            }
        }
        Ok(())
    }

    /// Mean IoU over classes with a non-empty union.
    pub fn miou(&self) -> Result<f64> {
        let ious: Vec<f64> = self
            .intersection
            .iter()
            .zip(&self.union)
            .filter(|(_, &u)| u > 0)
            .map(|(&i, &u)| i as f64 / u as f64)
            .collect();
        if ious.is_empty() {
            contract!("mIoU over zero pixels");
        }
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }
}

/// Dataset-level mean IoU in `[0, 1]`, classes absent from both maps excluded.
pub fn miou(pred: &[usize], gt: &[usize], num_classes: usize) -> Result<f64> {
    let mut c = IouCounts::new(num_classes);
    c.add(pred, gt)?;
    c.miou()
}

const EVAL_BATCH: usize = 16;

pub(crate) fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| csv::Error::from(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Validation mIoU of `net` on unaugmented scenes.
pub fn evaluate(net: &SegNet, scenes: &[Scene], num_classes: usize) -> Result<f64> {
    let mut counts = IouCounts::new(num_classes);
    for chunk in scenes.chunks(EVAL_BATCH) {
        let images = to_batch(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>())?;
        let pred = net.predict(&images)?;
        let gt: Vec<usize> = chunk
            .iter()
            .flat_map(|s| s.labels.data.iter().map(|&l| l as usize))
            .collect();
        counts.add(&pred, &gt)?;
    }
    counts.miou()
}
