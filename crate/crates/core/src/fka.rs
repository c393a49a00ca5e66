//! Feature alignment between weak and strong views: the point-to-point
//! similarity loss and the prototype-based outlier loss.
//!
//! Feature maps are batched `B×C×p×q`. A feature position is addressed by its
//! flat index `b·p·q + i`, which is also the tie-break order for selections.
//! Weak-view features, intra-cluster members and prototypes never receive
//! gradient; only strong-view features do.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::tensor::ops::{self, cosine_unchecked};
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_ETA: f64 = 0.99;
pub const DEFAULT_N_R: usize = 16;
pub const DEFAULT_N_D: usize = 256;

fn dims4(t: &Tensor, what: &str) -> Result<[usize; 4]> {
    match *t.shape() {
        [b, c, p, q] => Ok([b, c, p, q]),
        _ => contract!("{what}: expected B×C×p×q, got {:?}", t.shape()),
    }
}

/// Channel vector at flat position `pos` of a `B×C×p×q` map.
pub fn feature_at(t: &Tensor, pos: usize) -> Vec<f64> {
    let s = t.shape();
    let (c, pq) = (s[1], s[2] * s[3]);
    let (b, i) = (pos / pq, pos % pq);
    (0..c).map(|ci| t.data()[(b * c + ci) * pq + i]).collect()
}

/// Per-image mean over positions of the channel cosine between `f_s` and `f_w`.
pub fn p2p_similarities(f_s: &Tensor, f_w: &Tensor) -> Result<Vec<f64>> {
    let [b, _, p, q] = dims4(f_s, "p2p_similarity")?;
    if f_s.shape() != f_w.shape() {
        contract!("p2p_similarity shapes {:?} vs {:?}", f_s.shape(), f_w.shape());
    }
    let pq = p * q;
    Ok((0..b)
        .map(|bi| {
            let total: f64 = (0..pq)
                .map(|i| {
                    let pos = bi * pq + i;
                    cosine_unchecked(&feature_at(f_s, pos), &feature_at(f_w, pos))
                })
                .sum();
            total / pq as f64
        })
        .collect())
}

/// Similarity of one image's `C×p×q` feature maps.
pub fn p2p_similarity(f_s: &Tensor, f_w: &Tensor) -> Result<f64> {
    if f_s.rank() != 3 || f_s.shape() != f_w.shape() {
        contract!("p2p_similarity shapes {:?} vs {:?}", f_s.shape(), f_w.shape());
    }
    let mut shape = vec![1];
    shape.extend_from_slice(f_s.shape());
    let s = p2p_similarities(&f_s.reshape(&shape)?, &f_w.reshape(&shape)?)?;
    Ok(s[0])
}

/// `1 − mean(similarities)`.
pub fn p2p_loss(similarities: &[f64]) -> Result<f64> {
    if similarities.is_empty() {
        contract!("p2p_loss over an empty batch");
    }
    Ok(1.0 - similarities.iter().sum::<f64>() / similarities.len() as f64)
}

/// Records the point-to-point loss on `tape`; `f_w` enters as a constant.
/// Also returns the per-image similarities.
pub fn p2p_loss_on_tape(tape: &mut Tape, f_s: Var, f_w: &Tensor) -> Result<(Var, Vec<f64>)> {
    let sims = p2p_similarities(tape.value(f_s), f_w)?;
    let [b, _, p, q] = dims4(f_w, "p2p_loss")?;
    let n = b * p * q;
    let positions: Vec<usize> = (0..n).collect();
    let targets: Vec<f64> = positions.iter().flat_map(|&pos| feature_at(f_w, pos)).collect();
    let c = f_w.shape()[1];
    let rows = tape.gather_rows(f_s, &positions)?;
    let cos = tape.cosine_rows(rows, Tensor::new(vec![n, c], targets)?)?;
    // per-image means averaged over the batch equal the mean over all positions
    let s = tape.weighted_sum(cos, vec![1.0 / n as f64; n])?;
    Ok((tape.affine(s, -1.0, 1.0), sims))
}

/// Argmax class of `p_w` (`B×Z×H×W`) sampled at the nearest pixel of every
/// feature position of a `p×q` grid, indexed `b·p·q + i`.
pub fn feature_pseudo_labels(p_w: &Tensor, p: usize, q: usize) -> Result<Vec<usize>> {
    let [b, _, h, w] = dims4(p_w, "feature_pseudo_labels")?;
    if p == 0 || q == 0 || p > h || q > w {
        contract!("cannot sample a {p}×{q} grid from {h}×{w} predictions");
    }
    let full = ops::argmax(p_w, 1)?;
    let mut out = Vec::with_capacity(b * p * q);
    for bi in 0..b {
        for y in 0..p {
            for x in 0..q {
                let (sy, sx) = (y * h / p, x * w / q);
                out.push(full[bi * h * w + sy * w + sx]);
            }
        }
    }
    Ok(out)
}

/// Per-class weak and strong feature vectors at identical positions.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassFeatureSets {
    pub positions: Vec<Vec<usize>>,
    pub weak: Vec<Vec<Vec<f64>>>,
    pub strong: Vec<Vec<Vec<f64>>>,
}

impl ClassFeatureSets {
    pub fn num_classes(&self) -> usize {
        self.positions.len()
    }

    pub fn count(&self, k: usize) -> usize {
        self.positions[k].len()
    }
}

/// Partitions all feature positions of the batch by pseudo-label.
pub fn class_feature_sets(
    f_w: &Tensor,
    f_s: &Tensor,
    p_w: &Tensor,
) -> Result<ClassFeatureSets> {
    let [_, _, p, q] = dims4(f_w, "class_feature_sets")?;
    if f_w.shape() != f_s.shape() {
        contract!("class_feature_sets shapes {:?} vs {:?}", f_w.shape(), f_s.shape());
    }
    let z = dims4(p_w, "class_feature_sets")?[1];
    if p_w.shape()[0] != f_w.shape()[0] {
        contract!("class_feature_sets: batch sizes differ");
    }
    let labels = feature_pseudo_labels(p_w, p, q)?;
    let mut sets = ClassFeatureSets {
        positions: vec![Vec::new(); z],
        weak: vec![Vec::new(); z],
        strong: vec![Vec::new(); z],
    };
    for (pos, &k) in labels.iter().enumerate() {
        sets.positions[k].push(pos);
        sets.weak[k].push(feature_at(f_w, pos));
        sets.strong[k].push(feature_at(f_s, pos));
    }
    Ok(sets)
}

fn ranked(candidates: &[Vec<f64>], prototype: &[f64], descending: bool) -> Vec<usize> {
    let cos: Vec<f64> = candidates
        .iter()
        .map(|v| cosine_unchecked(v, prototype))
        .collect();
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    // stable sort: equal cosines stay in position order
    if descending {
        order.sort_by(|&a, &b| cos[b].total_cmp(&cos[a]));
    } else {
        order.sort_by(|&a, &b| cos[a].total_cmp(&cos[b]));
    }
    order
}

/// Indices of the `min(n_r, len)` candidates most similar to the prototype.
/// `None` when the prototype is not initialized.
pub fn select_intra(
    candidates: &[Vec<f64>],
    prototype: Option<&[f64]>,
    n_r: usize,
) -> Option<Vec<usize>> {
    let mut order = ranked(candidates, prototype?, true);
    order.truncate(n_r);
    Some(order)
}

/// Indices of the `min(n_d, len)` candidates least similar to the prototype.
/// `None` when the prototype is not initialized.
pub fn select_outliers(
    candidates: &[Vec<f64>],
    prototype: Option<&[f64]>,
    n_d: usize,
) -> Option<Vec<usize>> {
    let mut order = ranked(candidates, prototype?, false);
    order.truncate(n_d);
    Some(order)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassSelection {
    pub class: usize,
    pub intra: Vec<Vec<f64>>,
    pub outlier_positions: Vec<usize>,
    pub outliers: Vec<Vec<f64>>,
}

/// Selections of every class with an initialized prototype and non-empty
/// intra and outlier sets.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CompactnessSelection {
    pub classes: Vec<ClassSelection>,
}

pub fn compactness_selection(
    sets: &ClassFeatureSets,
    bank: &PrototypeBank,
    n_r: usize,
    n_d: usize,
) -> CompactnessSelection {
    let mut classes = Vec::new();
    for k in 0..sets.num_classes() {
        let proto = bank.prototype(k);
        let (Some(intra), Some(out)) = (
            select_intra(&sets.weak[k], proto, n_r),
            select_outliers(&sets.strong[k], proto, n_d),
        ) else {
            continue;
        };
        if intra.is_empty() || out.is_empty() {
            continue;
        }
        classes.push(ClassSelection {
            class: k,
            intra: intra.iter().map(|&i| sets.weak[k][i].clone()).collect(),
            outlier_positions: out.iter().map(|&i| sets.positions[k][i]).collect(),
            outliers: out.iter().map(|&i| sets.strong[k][i].clone()).collect(),
        });
    }
    CompactnessSelection { classes }
}

/// Most similar intra member for `h`; the first one on ties.
fn nearest<'a>(h: &[f64], intra: &'a [Vec<f64>]) -> &'a [f64] {
    let mut best = 0;
    let mut best_cos = f64::NEG_INFINITY;
    for (i, r) in intra.iter().enumerate() {
        let c = cosine_unchecked(h, r);
        if c > best_cos {
            best = i;
            best_cos = c;
        }
    }
    &intra[best]
}

/// Mean over eligible classes of the per-class mean of `1 − cos(h, r*)`.
pub fn outlier_loss(sel: &CompactnessSelection) -> f64 {
    if sel.classes.is_empty() {
        return 0.0;
    }
    let per_class: f64 = sel
        .classes
        .iter()
        .map(|c| {
            let s: f64 = c
                .outliers
                .iter()
                .map(|h| 1.0 - cosine_unchecked(h, nearest(h, &c.intra)))
                .sum();
            s / c.outliers.len() as f64
        })
        .sum();
    per_class / sel.classes.len() as f64
}

/// Records the outlier loss on `tape` with gradient into `f_s` only. The
/// nearest intra member of every outlier is fixed at the current values.
pub fn outlier_loss_on_tape(tape: &mut Tape, f_s: Var, sel: &CompactnessSelection) -> Result<Var> {
    if sel.classes.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let classes = sel.classes.len() as f64;
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    for c in &sel.classes {
        let w = 1.0 / (c.outliers.len() as f64 * classes);
        for (&pos, h) in c.outlier_positions.iter().zip(&c.outliers) {
            positions.push(pos);
            targets.extend_from_slice(nearest(h, &c.intra));
            weights.push(w);
        }
    }
    let n = positions.len();
    let rows = tape.gather_rows(f_s, &positions)?;
    let ch = tape.value(rows).shape()[1];
    let cos = tape.cosine_rows(rows, Tensor::new(vec![n, ch], targets)?)?;
    let total_weight: f64 = weights.iter().sum();
    let s = tape.weighted_sum(cos, weights)?;
    Ok(tape.affine(s, -1.0, total_weight))
}

/// Per-class EMA prototypes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    pub prototypes: Vec<Vec<f64>>,
    pub initialized: Vec<bool>,
    pub eta: f64,
}

impl PrototypeBank {
    pub fn new(num_classes: usize, channels: usize, eta: f64) -> Self {
        Self {
            prototypes: vec![vec![0.0; channels]; num_classes],
            initialized: vec![false; num_classes],
            eta,
        }
    }

    pub fn prototype(&self, k: usize) -> Option<&[f64]> {
        self.initialized
            .get(k)
            .copied()
            .unwrap_or(false)
            .then(|| self.prototypes[k].as_slice())
    }

    /// Folds one batch mean into class `k`.
    pub fn update_class(&mut self, k: usize, mean: &[f64]) {
        let eta = self.eta;
        let rho = &mut self.prototypes[k];
        if self.initialized[k] {
            for (r, &m) in rho.iter_mut().zip(mean) {
                *r = eta * *r + (1.0 - eta) * m;
            }
        } else {
            rho.copy_from_slice(mean);
            self.initialized[k] = true;
        }
    }

    /// Updates every class present in `sets` with the mean of its weak features.
    pub fn update(&mut self, sets: &ClassFeatureSets) {
        for k in 0..sets.num_classes().min(self.prototypes.len()) {
            let members = &sets.weak[k];
            if members.is_empty() {
                continue;
            }
            let mut mean = vec![0.0; self.prototypes[k].len()];
            for v in members {
                for (m, x) in mean.iter_mut().zip(v) {
                    *m += x;
                }
            }
            mean.iter_mut().for_each(|m| *m /= members.len() as f64);
            self.update_class(k, &mean);
        }
    }
}

pub fn update_prototypes(bank: &PrototypeBank, sets: &ClassFeatureSets) -> PrototypeBank {
    let mut next = bank.clone();
    next.update(sets);
    next
}
