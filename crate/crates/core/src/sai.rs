//! Similarity-conditioned interventions on strong-view features: spatial
//! masking and multiplicative uniform noise, each with a prediction
//! consistency loss against the weak-view probabilities.
//!
//! The higher an image's weak/strong similarity, the stronger the
//! intervention: more positions are masked and the noise range widens.

use rand::Rng;

use crate::error::{contract, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{ops, Tape, Tensor, Var};

pub const DEFAULT_LAMBDA: f64 = 0.15;

/// `λ(1 + S)`.
pub fn intervention_value(s_p2p: f64, lambda: f64) -> Result<f64> {
    if !(-1.0..=1.0).contains(&s_p2p) {
        contract!("similarity {s_p2p} outside [-1, 1]");
    }
    if !(lambda > 0.0) {
        contract!("lambda must be positive, got {lambda}");
    }
    Ok(lambda * (1.0 + s_p2p))
}

/// `(max(0, 0.9 − v), clamp(1.1 − v, 0, 1))`.
///
/// Evaluated in tenths, `(9 − 10v)/10`, so that decimal intervention values
/// land on the nearest representable boundary.
pub fn boundaries(v_u: f64) -> (f64, f64) {
    let t = 10.0 * v_u;
    let left = ((9.0 - t) / 10.0).max(0.0);
    let right = ((11.0 - t) / 10.0).clamp(0.0, 1.0);
    (left, right)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InterventionState {
    pub s_p2p: f64,
    pub lambda: f64,
    pub v_u: f64,
    pub b_l: f64,
    pub b_r: f64,
}

impl InterventionState {
    pub fn new(s_p2p: f64, lambda: f64) -> Result<Self> {
        let v_u = intervention_value(s_p2p, lambda)?;
        let (b_l, b_r) = boundaries(v_u);
        Ok(Self {
            s_p2p,
            lambda,
            v_u,
            b_l,
            b_r,
        })
    }
}

/// Binary `p×q` keep-map; 1 keeps a position, 0 zeroes it.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskMatrix {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl MaskMatrix {
    pub fn masked_fraction(&self) -> f64 {
        self.data.iter().filter(|&&g| g == 0.0).count() as f64 / self.data.len() as f64
    }
}

fn dims3(t: &Tensor, what: &str) -> Result<[usize; 3]> {
    match *t.shape() {
        [c, p, q] => Ok([c, p, q]),
        _ => contract!("{what}: expected C×p×q, got {:?}", t.shape()),
    }
}

/// Keeps positions whose channel mean is below `max(mean)·u`. An all-zero
/// (non-positive maximum) map is kept whole.
pub fn masking_matrix_at(f_s: &Tensor, u: f64) -> Result<MaskMatrix> {
    let [c, p, q] = dims3(f_s, "masking_matrix")?;
    let pq = p * q;
    let m: Vec<f64> = (0..pq)
        .map(|i| (0..c).map(|ci| f_s.data()[ci * pq + i]).sum::<f64>() / c as f64)
        .collect();
    let max = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let data = if max <= 0.0 {
        vec![1.0; pq]
    } else {
        let threshold = max * u;
        m.iter().map(|&v| if v < threshold { 1.0 } else { 0.0 }).collect()
    };
    Ok(MaskMatrix {
        height: p,
        width: q,
        data,
    })
}

/// Draws one threshold `u ~ U(b_l, b_r)` for the whole image.
pub fn masking_matrix<R: Rng>(f_s: &Tensor, b_l: f64, b_r: f64, rng: &mut R) -> Result<MaskMatrix> {
    if !(b_l <= b_r) {
        contract!("mask boundaries out of order: {b_l} > {b_r}");
    }
    let u = b_l + (b_r - b_l) * rng.gen::<f64>();
    masking_matrix_at(f_s, u)
}

/// `F_s ⊙ G` with `G` broadcast over channels.
pub fn apply_mask(f_s: &Tensor, g: &MaskMatrix) -> Result<Tensor> {
    ops::mul(f_s, &broadcast_mask(f_s.shape(), std::slice::from_ref(g))?)
}

/// Expands per-image masks to a `B×C×p×q` (or `C×p×q` for one image) tensor.
pub fn broadcast_mask(shape: &[usize], masks: &[MaskMatrix]) -> Result<Tensor> {
    let (b, c, p, q) = match *shape {
        [c, p, q] => (1, c, p, q),
        [b, c, p, q] => (b, c, p, q),
        _ => contract!("mask target must be C×p×q or B×C×p×q, got {shape:?}"),
    };
    if masks.len() != b || masks.iter().any(|g| g.height != p || g.width != q) {
        contract!("{} masks do not fit feature shape {shape:?}", masks.len());
    }
    let mut data = Vec::with_capacity(b * c * p * q);
    for g in masks {
        for _ in 0..c {
            data.extend_from_slice(&g.data);
        }
    }
    Tensor::new(shape.to_vec(), data)
}

fn consistency(pred: &Tensor, p_w: &Tensor) -> Result<f64> {
    if pred.shape() != p_w.shape() {
        contract!("consistency shapes {:?} vs {:?}", pred.shape(), p_w.shape());
    }
    let n = pred.numel() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(p_w.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Mean squared difference between masked-feature and weak-view probabilities.
pub fn masking_loss(p_m: &Tensor, p_w: &Tensor) -> Result<f64> {
    consistency(p_m, p_w)
}

/// Mean squared difference between noisy-feature and weak-view probabilities.
pub fn noise_loss(p_n: &Tensor, p_w: &Tensor) -> Result<f64> {
    consistency(p_n, p_w)
}

/// Records either consistency loss on `tape`; `p_w` enters as a constant.
pub fn consistency_on_tape(tape: &mut Tape, pred: Var, p_w: &Tensor) -> Result<Var> {
    tape.mse(pred, p_w.clone())
}

/// I.i.d. `U[−v, v]` entries drawn from `rng`.
pub fn sample_noise_with<R: Rng>(v_u: f64, shape: &[usize], rng: &mut R) -> Result<Tensor> {
    if !(v_u >= 0.0) {
        contract!("noise range must be non-negative, got {v_u}");
    }
    Ok(Tensor::from_fn(shape, |_| -v_u + 2.0 * v_u * rng.gen::<f64>()))
}

/// I.i.d. `U[−v, v]` entries, deterministic per seed.
pub fn sample_noise(v_u: f64, shape: &[usize], seed: u64) -> Result<Tensor> {
    sample_noise_with(v_u, shape, &mut stream_rng(seed, Stream::Noise, 0))
}

/// `F_s ⊙ N + F_s`.
pub fn inject_noise(f_s: &Tensor, noise: &Tensor) -> Result<Tensor> {
    ops::mul_add(f_s, noise, f_s)
}
