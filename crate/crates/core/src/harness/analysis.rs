//! Per-pixel weak/strong feature similarity against prediction agreement.

use serde::{Deserialize, Serialize};

use crate::data::ViewPair;
use crate::data::{to_batch, Scene};
use crate::error::{contract, Result};
use crate::fka;
use crate::rng::{derive_seed, Stream};
use crate::segnet::{self, SegNet};
use crate::tensor::ops::{self, cosine_similarity};
use crate::tensor::Tensor;

const BATCH: usize = 16;

/// Spreads of the similarity population at or below this count as constant.
pub const DEGENERATE_SPREAD: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityHistogram {
    /// `bins + 1` edges over normalized similarity.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub pixel_ratio: Vec<f64>,
    /// Fraction of a bin's pixels whose weak and strong argmax agree; 0 for
    /// empty bins.
    pub agreement: Vec<f64>,
    pub raw_min: f64,
    pub raw_max: f64,
}

impl SimilarityHistogram {
    /// Spearman correlation of agreement against bin index over non-empty bins.
    pub fn trend(&self) -> Option<f64> {
        let (x, y): (Vec<f64>, Vec<f64>) = self
            .counts
            .iter()
            .zip(&self.agreement)
            .enumerate()
            .filter(|(_, (&c, _))| c > 0)
            .map(|(i, (_, &a))| (i as f64, a))
            .unzip();
        spearman(&x, &y)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["bin", "lo", "hi", "count", "pixel_ratio", "agreement"])?;
        for i in 0..self.counts.len() {
            w.write_record([
                i.to_string(),
                self.edges[i].to_string(),
                self.edges[i + 1].to_string(),
                self.counts[i].to_string(),
                self.pixel_ratio[i].to_string(),
                self.agreement[i].to_string(),
            ])?;
        }
        super::finish_csv(w)
    }
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        // ties share the mean of their 1-based ranks
        let mean = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = mean;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties; `None` for fewer
/// than two points or a constant input.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

struct ViewOutputs {
    f_w: Tensor,
    f_s: Tensor,
    pred_w: Vec<usize>,
    pred_s: Vec<usize>,
}

fn view_outputs(net: &SegNet, pairs: &[(Tensor, Tensor)]) -> Result<ViewOutputs> {
    let weak = to_batch(&pairs.iter().map(|p| &p.0).collect::<Vec<_>>())?;
    let strong = to_batch(&pairs.iter().map(|p| &p.1).collect::<Vec<_>>())?;
    let f_w = segnet::encode(&weak, &net.encoder)?;
    let f_s = segnet::encode(&strong, &net.encoder)?;
    let pred_w = ops::argmax(&segnet::decode_logits(&f_w, &net.decoder)?, 1)?;
    let pred_s = ops::argmax(&segnet::decode_logits(&f_s, &net.decoder)?, 1)?;
    Ok(ViewOutputs {
        f_w,
        f_s,
        pred_w,
        pred_s,
    })
}

/// Weak/strong view pairs of `scenes`, the i-th drawn from `(seed, i)`.
pub fn analysis_views(scenes: &[Scene], seed: u64) -> Result<Vec<(Tensor, Tensor)>> {
    scenes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let v = ViewPair::new(&s.image, derive_seed(seed, Stream::Analysis, i as u64))?;
            Ok((v.weak, v.strong))
        })
        .collect()
}

/// [`histogram_of_views`] on view pairs drawn from `seed`.
pub fn similarity_histogram(net: &SegNet, scenes: &[Scene], bins: usize, seed: u64) -> Result<SimilarityHistogram> {
    histogram_of_views(net, &analysis_views(scenes, seed)?, bins)
}

/// Every pixel takes the weak/strong feature cosine of the feature cell it
/// falls in. Cosines are min–max normalized over all evaluated pixels and
/// binned; a (numerically) constant population lands entirely in the top bin.
pub fn histogram_of_views(net: &SegNet, pairs: &[(Tensor, Tensor)], bins: usize) -> Result<SimilarityHistogram> {
    if pairs.is_empty() {
        contract!("similarity histogram over an empty sample set");
    }
    if bins == 0 {
        contract!("similarity histogram needs at least one bin");
    }
    let (h, w) = match *pairs[0].0.shape() {
        [h, w, 3] => (h, w),
        _ => contract!("expected H×W×3 views, got {:?}", pairs[0].0.shape()),
    };
    let mut sims = Vec::new();
    let mut agree = Vec::new();
    for chunk in pairs.chunks(BATCH) {
        let out = view_outputs(net, chunk)?;
        let s = out.f_w.shape();
        let (p, q) = (s[2], s[3]);
        for b in 0..chunk.len() {
            let cell: Vec<f64> = (0..p * q)
                .map(|i| {
                    let pos = b * p * q + i;
                    cosine_similarity(&fka::feature_at(&out.f_s, pos), &fka::feature_at(&out.f_w, pos))
                })
                .collect::<Result<_>>()?;
            for y in 0..h {
                for x in 0..w {
                    sims.push(cell[(y * p / h) * q + x * q / w]);
                    let j = b * h * w + y * w + x;
                    agree.push(out.pred_w[j] == out.pred_s[j]);
                }
            }
        }
    }
    let lo = sims.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut counts = vec![0u64; bins];
    let mut agreeing = vec![0u64; bins];
    for (&s, &a) in sims.iter().zip(&agree) {
        let k = if hi - lo > DEGENERATE_SPREAD {
            (((s - lo) / (hi - lo)) * bins as f64).floor().min(bins as f64 - 1.0) as usize
        } else {
            bins - 1
        };
        counts[k] += 1;
        agreeing[k] += a as u64;
    }
    let total = sims.len() as f64;
    Ok(SimilarityHistogram {
        edges: (0..=bins).map(|i| i as f64 / bins as f64).collect(),
        pixel_ratio: counts.iter().map(|&c| c as f64 / total).collect(),
        agreement: counts
            .iter()
            .zip(&agreeing)
            .map(|(&c, &a)| if c > 0 { a as f64 / c as f64 } else { 0.0 })
            .collect(),
        counts,
        raw_min: lo,
        raw_max: hi,
    })
}

/// Mean per-image weak/strong similarity over `scenes`.
pub fn mean_similarity(net: &SegNet, scenes: &[Scene], seed: u64) -> Result<f64> {
    if scenes.is_empty() {
        contract!("mean similarity over an empty sample set");
    }
    let mut total = 0.0;
    for chunk in analysis_views(scenes, seed)?.chunks(BATCH) {
        let out = view_outputs(net, chunk)?;
        total += fka::p2p_similarities(&out.f_s, &out.f_w)?.iter().sum::<f64>();
    }
    Ok(total / scenes.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_examples() {
        let x = [0.0, 1.0, 2.0, 3.0];
        assert!((spearman(&x, &[1.0, 2.0, 3.0, 10.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&x, &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(spearman(&x, &[1.0; 4]), None);
        assert_eq!(spearman(&x[..1], &[1.0]), None);
        // ties get averaged ranks: ranks of y are [1.5, 1.5, 3, 4]
        let r = spearman(&x, &[1.0, 1.0, 2.0, 3.0]).unwrap();
        let expect = 4.5 / (5.0f64 * 4.5).sqrt();
        assert!((r - expect).abs() < 1e-12);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }
}
