//! One optimization step: both views through the network, every active loss
//! term on a tape, an SGD-with-momentum update, then the prototype update.

use super::losses::{coefficients, ip_loss_on_tape, ip_targets, supervised_loss_on_tape, Components};
use super::ExperimentConfig;
use crate::error::{contract, Error, Result};
use crate::fka::{self, ClassFeatureSets, CompactnessSelection, PrototypeBank};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::sai::{self, InterventionState, MaskMatrix};
use crate::segnet::{self, BoundNet, SegNet};
use crate::tensor::{Tape, Tensor, Var};

/// Images of one step, all `B×3×H×W`. `labels` is indexed `b·H·W + j`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepInputs {
    pub labeled: Tensor,
    pub labels: Vec<usize>,
    pub weak: Tensor,
    pub strong: Tensor,
}

/// Seeds of the per-step random draws (mask thresholds and noise).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepSeeds {
    pub mask: u64,
    pub noise: u64,
}

impl StepSeeds {
    pub fn for_step(run_seed: u64, step: u64) -> Self {
        Self {
            mask: derive_seed(run_seed, Stream::Mask, step),
            noise: derive_seed(run_seed, Stream::Noise, step),
        }
    }
}

/// Quantities fixed before differentiation: the weak branch, detached
/// similarities, and every discrete choice (selections, masks, noise,
/// pseudo-labels).
#[derive(Clone, Debug)]
pub struct Decisions {
    pub f_w: Tensor,
    pub p_w: Tensor,
    pub similarities: Vec<f64>,
    pub sets: Option<ClassFeatureSets>,
    pub selection: Option<CompactnessSelection>,
    pub interventions: Vec<InterventionState>,
    pub masks: Option<Tensor>,
    pub noise: Option<Tensor>,
    pub ip_targets: Option<(Vec<usize>, Vec<f64>)>,
}

/// Weak-view features and probabilities, computed without a tape.
pub fn weak_branch(net: &SegNet, weak: &Tensor) -> Result<(Tensor, Tensor)> {
    let f_w = segnet::encode(weak, &net.encoder)?;
    let p_w = segnet::decode(&f_w, &net.decoder)?;
    Ok((f_w, p_w))
}

/// Takes every decision of a step given the strong-view features `f_s`.
pub fn decide(
    net: &SegNet,
    weak: &Tensor,
    f_s: &Tensor,
    bank: &PrototypeBank,
    cfg: &ExperimentConfig,
    seeds: StepSeeds,
) -> Result<Decisions> {
    let (f_w, p_w) = weak_branch(net, weak)?;
    let similarities = fka::p2p_similarities(f_s, &f_w)?;
    let t = cfg.toggles;

    let (sets, selection) = if t.if_on {
        let sets = fka::class_feature_sets(&f_w, f_s, &p_w)?;
        let sel = fka::compactness_selection(&sets, bank, cfg.n_r, cfg.n_d);
        (Some(sets), Some(sel))
    } else {
        (None, None)
    };

    let (mut interventions, mut masks, mut noise) = (Vec::new(), None, None);
    if t.fp_on {
        let mut gs: Vec<MaskMatrix> = Vec::with_capacity(similarities.len());
        let mut ns = Vec::with_capacity(similarities.len());
        for (i, &s) in similarities.iter().enumerate() {
            let st = InterventionState::new(s.clamp(-1.0, 1.0), cfg.lambda)?;
            let fi = f_s.select(i)?;
            let mut mrng = stream_rng(seeds.mask, Stream::Mask, i as u64);
            gs.push(sai::masking_matrix(&fi, st.b_l, st.b_r, &mut mrng)?);
            let mut nrng = stream_rng(seeds.noise, Stream::Noise, i as u64);
            ns.push(sai::sample_noise_with(st.v_u, fi.shape(), &mut nrng)?);
            interventions.push(st);
        }
        masks = Some(sai::broadcast_mask(f_s.shape(), &gs)?);
        noise = Some(Tensor::stack(&ns)?);
    }

    let ip = if t.ip_on {
        Some(ip_targets(&p_w, cfg.tau)?)
    } else {
        None
    };

    Ok(Decisions {
        f_w,
        p_w,
        similarities,
        sets,
        selection,
        interventions,
        masks,
        noise,
        ip_targets: ip,
    })
}

/// Handles of the recorded objective terms; disabled terms are `None`.
#[derive(Clone, Copy, Debug)]
pub struct Terms {
    pub l_s: Var,
    pub l_ip: Option<Var>,
    pub l_p2p: Option<Var>,
    pub l_dt: Option<Var>,
    pub l_m: Option<Var>,
    pub l_n: Option<Var>,
    pub total: Var,
}

impl Terms {
    pub fn all(&self) -> [Option<Var>; 6] {
        [Some(self.l_s), self.l_ip, self.l_p2p, self.l_dt, self.l_m, self.l_n]
    }

    /// Component values; disabled terms read as 0.
    pub fn components(&self, tape: &Tape) -> Components {
        let v = self
            .all()
            .map(|t| t.map_or(0.0, |v| tape.value(v).data()[0]));
        Components {
            l_s: v[0],
            l_ip: v[1],
            l_p2p: v[2],
            l_dt: v[3],
            l_m: v[4],
            l_n: v[5],
        }
    }
}

/// Records the full objective on `tape` for the network bound as `bound`,
/// whose values must equal `net`. With `frozen`, all decisions are reused
/// instead of being taken from the current values.
#[allow(clippy::too_many_arguments)]
pub fn record_objective(
    tape: &mut Tape,
    bound: &BoundNet,
    net: &SegNet,
    inputs: &StepInputs,
    bank: &PrototypeBank,
    cfg: &ExperimentConfig,
    seeds: StepSeeds,
    frozen: Option<&Decisions>,
) -> Result<(Terms, Decisions)> {
    let xl = tape.constant(inputs.labeled.clone());
    let fl = bound.encode(tape, xl)?;
    let ll = bound.decode_logits(tape, fl)?;
    let l_s = supervised_loss_on_tape(tape, ll, &inputs.labels)?;

    let xs = tape.constant(inputs.strong.clone());
    let fs = bound.encode(tape, xs)?;
    let d = match frozen {
        Some(d) => d.clone(),
        None => decide(net, &inputs.weak, tape.value(fs), bank, cfg, seeds)?,
    };

    let mut terms = Terms {
        l_s,
        l_ip: None,
        l_p2p: None,
        l_dt: None,
        l_m: None,
        l_n: None,
        total: l_s,
    };
    if let Some(targets) = &d.ip_targets {
        let logits = bound.decode_logits(tape, fs)?;
        terms.l_ip = Some(ip_loss_on_tape(tape, logits, targets)?);
    }
    if let Some(sel) = &d.selection {
        terms.l_p2p = Some(fka::p2p_loss_on_tape(tape, fs, &d.f_w)?.0);
        terms.l_dt = Some(fka::outlier_loss_on_tape(tape, fs, sel)?);
    }
    if let (Some(masks), Some(noise)) = (&d.masks, &d.noise) {
        let g = tape.constant(masks.clone());
        let f_mk = tape.mul(fs, g)?;
        let p_m = bound.decode(tape, f_mk)?;
        terms.l_m = Some(sai::consistency_on_tape(tape, p_m, &d.p_w)?);
        let n = tape.constant(noise.clone());
        let f_ne = tape.mul_add(fs, n, fs)?;
        let p_n = bound.decode(tape, f_ne)?;
        terms.l_n = Some(sai::consistency_on_tape(tape, p_n, &d.p_w)?);
    }

    let k = coefficients(&cfg.weights(), cfg.toggles);
    let parts: Vec<(Var, f64)> = terms
        .all()
        .iter()
        .zip(k)
        .filter_map(|(t, c)| t.map(|v| (v, c)))
        .collect();
    terms.total = tape.lincomb(&parts)?;
    Ok((terms, d))
}

/// `v' = μv + g`, `p' = p − lr·v'`, elementwise per tensor.
pub fn sgd_update(
    params: &[&Tensor],
    grads: &[Tensor],
    velocity: &mut [Tensor],
    lr: f64,
    momentum: f64,
) -> Result<Vec<Tensor>> {
    if !(lr > 0.0) || !(0.0..1.0).contains(&momentum) {
        contract!("need lr > 0 and momentum in [0, 1), got {lr} / {momentum}");
    }
    if params.len() != grads.len() || params.len() != velocity.len() {
        contract!("sgd_update: {} params, {} grads, {} velocities", params.len(), grads.len(), velocity.len());
    }
    let mut out = Vec::with_capacity(params.len());
    for ((p, g), v) in params.iter().zip(grads).zip(velocity.iter_mut()) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            contract!("sgd_update shape mismatch {:?}", p.shape());
        }
        let vel: Vec<f64> = v
            .data()
            .iter()
            .zip(g.data())
            .map(|(&vi, &gi)| momentum * vi + gi)
            .collect();
        let next: Vec<f64> = p
            .data()
            .iter()
            .zip(&vel)
            .map(|(&pi, &vi)| pi - lr * vi)
            .collect();
        *v = Tensor::new(v.shape().to_vec(), vel)?;
        out.push(Tensor::new(p.shape().to_vec(), next)?);
    }
    Ok(out)
}

/// Parameters, optimizer velocity, prototype bank and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub net: SegNet,
    pub velocity: Vec<Tensor>,
    pub bank: PrototypeBank,
    pub step: u64,
}

impl TrainState {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let net = SegNet::init(&cfg.architecture(), cfg.seeds.run, cfg.init_scale)?;
        Ok(Self::from_net(net, cfg))
    }

    pub fn from_net(net: SegNet, cfg: &ExperimentConfig) -> Self {
        let velocity = net.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            net,
            velocity,
            bank: PrototypeBank::new(cfg.num_classes, cfg.feature_channels, cfg.eta),
            step: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub components: Components,
    pub total: f64,
    pub similarities: Vec<f64>,
}

/// Runs one iteration and advances `state`. The loss uses the bank as it
/// was before this step; the bank is updated after the parameters.
pub fn train_step(state: &mut TrainState, inputs: &StepInputs, cfg: &ExperimentConfig) -> Result<StepRecord> {
    let seeds = StepSeeds::for_step(cfg.seeds.run, state.step);
    let mut tape = Tape::new();
    let bound = state.net.bind(&mut tape);
    let (terms, d) = record_objective(&mut tape, &bound, &state.net, inputs, &state.bank, cfg, seeds, None)?;
    let components = terms.components(&tape);
    if let Some(name) = components.first_non_finite() {
        return Err(Error::NonFinite(format!("{name} at step {}", state.step)));
    }
    let total = tape.value(terms.total).data()[0];
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("L_total at step {}", state.step)));
    }

    let grads = tape.backward(terms.total)?;
    let params = state.net.tensors();
    let g: Vec<Tensor> = bound
        .vars
        .iter()
        .zip(&params)
        .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    if let Some(i) = g.iter().position(|t| !t.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of {}", segnet::PARAM_NAMES[i])));
    }
    let next = sgd_update(&params, &g, &mut state.velocity, cfg.lr, cfg.momentum)?;
    state.net = SegNet::from_tensors(next)?;

    if let Some(sets) = &d.sets {
        state.bank.update(sets);
    }
    state.step += 1;
    Ok(StepRecord {
        components,
        total,
        similarities: d.similarities,
    })
}
