use serde::{Deserialize, Serialize};

use super::{LossWeights, Toggles};
use crate::error::{contract, Result};
use crate::tensor::{ops, Tape, Tensor, Var};

/// Unweighted values of every objective term for one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Components {
    pub l_s: f64,
    pub l_ip: f64,
    pub l_p2p: f64,
    pub l_dt: f64,
    pub l_m: f64,
    pub l_n: f64,
}

impl Components {
    pub const NAMES: [&'static str; 6] = ["L_s", "L_ip", "L_p2p", "L_dt", "L_m", "L_n"];

    pub fn values(&self) -> [f64; 6] {
        [self.l_s, self.l_ip, self.l_p2p, self.l_dt, self.l_m, self.l_n]
    }

    /// Name of the first non-finite component, in [`Components::NAMES`] order.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        Self::NAMES
            .iter()
            .zip(self.values())
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| *n)
    }
}

fn dims4(t: &Tensor, what: &str) -> Result<[usize; 4]> {
    match *t.shape() {
        [b, z, h, w] => Ok([b, z, h, w]),
        _ => contract!("{what}: expected B×Z×H×W, got {:?}", t.shape()),
    }
}

/// Mean pixelwise cross-entropy of `logits` against `labels` (`b·H·W + j`).
pub fn supervised_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let v = supervised_loss_on_tape(&mut tape, l, labels)?;
    tape.value(v).item()
}

pub fn supervised_loss_on_tape(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let [b, _, h, w] = dims4(tape.value(logits), "supervised_loss")?;
    let n = b * h * w;
    tape.cross_entropy(logits, labels.to_vec(), vec![1.0 / n as f64; n])
}

/// Hard pseudo-labels from `p_w` and per-pixel weights: `1/n` on the `n`
/// pixels whose top probability reaches `tau`, zero elsewhere.
pub fn ip_targets(p_w: &Tensor, tau: f64) -> Result<(Vec<usize>, Vec<f64>)> {
    let [b, z, h, w] = dims4(p_w, "ip_loss")?;
    let hw = h * w;
    let labels = ops::argmax(p_w, 1)?;
    let mut conf = vec![false; b * hw];
    for (pix, c) in conf.iter_mut().enumerate() {
        let (bi, j) = (pix / hw, pix % hw);
        *c = p_w.data()[(bi * z + labels[pix]) * hw + j] >= tau;
    }
    let n = conf.iter().filter(|&&c| c).count();
    let weights = conf
        .iter()
        .map(|&c| if c { 1.0 / n as f64 } else { 0.0 })
        .collect();
    Ok((labels, weights))
}

/// Cross-entropy of `p_s` against the confident pseudo-labels of `p_w`,
/// averaged over confident pixels; 0 when none is confident.
pub fn ip_loss(p_s: &Tensor, p_w: &Tensor, tau: f64) -> Result<f64> {
    if p_s.shape() != p_w.shape() {
        contract!("ip_loss shapes {:?} vs {:?}", p_s.shape(), p_w.shape());
    }
    let [_, z, h, w] = dims4(p_w, "ip_loss")?;
    let hw = h * w;
    let (labels, weights) = ip_targets(p_w, tau)?;
    let mut loss = 0.0;
    for (pix, (&y, &wt)) in labels.iter().zip(&weights).enumerate() {
        if wt > 0.0 {
            let (bi, j) = (pix / hw, pix % hw);
            loss -= wt * p_s.data()[(bi * z + y) * hw + j].ln();
        }
    }
    Ok(loss)
}

/// The pseudo-label term on strong-view `logits`; a constant 0 when no pixel
/// is confident.
pub fn ip_loss_on_tape(tape: &mut Tape, logits: Var, targets: &(Vec<usize>, Vec<f64>)) -> Result<Var> {
    if targets.1.iter().all(|&w| w == 0.0) {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    tape.cross_entropy(logits, targets.0.clone(), targets.1.clone())
}

/// Coefficient of every component in the total objective; disabled terms get 0.
pub fn coefficients(w: &LossWeights, t: Toggles) -> [f64; 6] {
    let on = |b: bool, v: f64| if b { v } else { 0.0 };
    [
        1.0,
        on(t.ip_on, w.ip_weight),
        on(t.if_on, w.alpha),
        on(t.if_on, w.omega),
        on(t.fp_on, w.beta),
        on(t.fp_on, w.beta),
    ]
}

/// `α·L_p2p + ω·L_dt + β·(L_m + L_n) + ip_weight·L_ip`, each group only when
/// its toggle is on.
pub fn unsup_loss(c: &Components, w: &LossWeights, t: Toggles) -> f64 {
    let k = coefficients(w, t);
    let v = c.values();
    // disabled groups are skipped rather than multiplied by zero
    (1..6).filter(|&i| k[i] != 0.0).map(|i| k[i] * v[i]).sum()
}
