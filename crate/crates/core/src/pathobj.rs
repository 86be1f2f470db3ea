//! The path-space objective: step log-ratios, the twice-clipped path ratio,
//! the drift-gap path cost toward a mixed anchor, and the policy loss
//! `−mean(r̃ · (A − λ·C_η))`.

use diffcore::{Array, MlpVars, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::genpolicy::{DriftField, GenerationPath, NoiseSchedule, LN_2PI};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub c_step: f64,
    pub c_path: f64,
}

impl ClipConfig {
    pub fn validate(&self) -> Result<()> {
        for (what, v) in [("c_step", self.c_step), ("c_path", self.c_path)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::range(what, v));
            }
        }
        if self.c_step > self.c_path {
            log::warn!("c_step {} exceeds c_path {}", self.c_step, self.c_path);
        }
        Ok(())
    }
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            c_step: 0.1,
            c_path: 0.4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    /// λ, the weight on the anchored drift cost.
    pub kl_coef: f64,
    /// η, the share of the zero reference drift in the anchor.
    pub reference_mix: f64,
    pub normalize_advantages: bool,
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kl_coef.is_finite() && self.kl_coef >= 0.0) {
            return Err(Error::range("kl_coef", self.kl_coef));
        }
        if !(0.0..=1.0).contains(&self.reference_mix) {
            return Err(Error::range("reference_mix", self.reference_mix));
        }
        Ok(())
    }
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            kl_coef: 0.08,
            reference_mix: 0.02,
            normalize_advantages: true,
        }
    }
}

pub fn step_log_ratio(new_logp: f64, old_logp: f64) -> Result<f64> {
    if !(new_logp.is_finite() && old_logp.is_finite()) {
        return Err(Error::NonFinite("step log-likelihood".into()));
    }
    Ok(new_logp - old_logp)
}

/// Σ_n clip(Δℓ_n, ±c_step), clipped again to ±c_path. The log of r̃.
pub fn clipped_log_ratio(step_deltas: &[f64], cfg: &ClipConfig) -> Result<f64> {
    if step_deltas.is_empty() {
        return Err(Error::EmptyBatch("step log-ratios"));
    }
    if step_deltas.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite("step log-ratio".into()));
    }
    let s: f64 = step_deltas
        .iter()
        .map(|d| d.clamp(-cfg.c_step, cfg.c_step))
        .sum();
    Ok(s.clamp(-cfg.c_path, cfg.c_path))
}

pub fn clipped_path_ratio(step_deltas: &[f64], cfg: &ClipConfig) -> Result<f64> {
    Ok(clipped_log_ratio(step_deltas, cfg)?.exp())
}

/// KL between isotropic Gaussians sharing variance `v`.
pub fn gaussian_step_kl(mean_a: &[f64], mean_b: &[f64], v: f64) -> Result<f64> {
    if mean_a.len() != mean_b.len() {
        return Err(Error::len("gaussian means", mean_a.len(), mean_b.len()));
    }
    if !(v > 0.0) {
        return Err(Error::range("variance", v));
    }
    let sq: f64 = mean_a.iter().zip(mean_b).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sq / (2.0 * v))
}

/// Per-step weights Δt_n / (2σ(t_n)²).
pub fn cost_weights(sched: &NoiseSchedule) -> Result<Vec<f64>> {
    Ok(sched
        .step_sigmas()?
        .iter()
        .enumerate()
        .map(|(n, s)| sched.dt(n) / (2.0 * s * s))
        .collect())
}

fn check_drifts(new: &[f64], old: &[f64], sched: &NoiseSchedule) -> Result<usize> {
    if new.len() != old.len() {
        return Err(Error::len("drift lists", old.len(), new.len()));
    }
    if sched.steps == 0 || new.len() % sched.steps != 0 {
        return Err(Error::len("drift steps", sched.steps, new.len()));
    }
    Ok(new.len() / sched.steps)
}

/// Σ_n Δt_n/(2σ_n²)·‖f_new − f_old‖² over flat `N · d` drift lists.
pub fn drift_cost(new_drifts: &[f64], old_drifts: &[f64], sched: &NoiseSchedule) -> Result<f64> {
    let d = check_drifts(new_drifts, old_drifts, sched)?;
    let w = cost_weights(sched)?;
    Ok(w.iter()
        .enumerate()
        .map(|(n, wn)| {
            let gap: f64 = (n * d..(n + 1) * d)
                .map(|i| (new_drifts[i] - old_drifts[i]).powi(2))
                .sum();
            wn * gap
        })
        .sum())
}

/// `(1 − η)·old + η·reference`.
pub fn mixed_anchor(old_drift: &[f64], ref_drift: &[f64], eta: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::range("reference_mix", eta));
    }
    if old_drift.len() != ref_drift.len() {
        return Err(Error::len("anchor operands", old_drift.len(), ref_drift.len()));
    }
    Ok(old_drift
        .iter()
        .zip(ref_drift)
        .map(|(o, r)| (1.0 - eta) * o + eta * r)
        .collect())
}

/// Drift cost toward the anchor `(1 − η)·f_old`, i.e. with a zero reference
/// drift.
pub fn anchored_drift_cost(
    new_drifts: &[f64],
    old_drifts: &[f64],
    eta: f64,
    sched: &NoiseSchedule,
) -> Result<f64> {
    check_drifts(new_drifts, old_drifts, sched)?;
    let zeros = vec![0.0; old_drifts.len()];
    let anchor = mixed_anchor(old_drifts, &zeros, eta)?;
    drift_cost(new_drifts, &anchor, sched)
}

/// Mean 0, standard deviation 1 (population, ε = 1e-8). Batches of one
/// are only centred.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    adv.iter_mut().for_each(|a| *a -= mean);
    if adv.len() > 1 {
        let std = (adv.iter().map(|a| a * a).sum::<f64>() / n).sqrt();
        adv.iter_mut().for_each(|a| *a /= std + 1e-8);
    }
}

/// One path's inputs to the scalar loss.
#[derive(Clone, Debug)]
pub struct PathSample {
    pub step_deltas: Vec<f64>,
    pub advantage: f64,
    pub new_drifts: Vec<f64>,
    pub old_drifts: Vec<f64>,
}

/// Scalar evaluation of the policy loss. `clip = None` uses the exact path
/// ratio.
pub fn mdpo_loss(
    batch: &[PathSample],
    sched: &NoiseSchedule,
    obj: &ObjectiveConfig,
    clip: Option<&ClipConfig>,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("mdpo_loss"));
    }
    obj.validate()?;
    let mut total = 0.0;
    for s in batch {
        if !s.advantage.is_finite() {
            return Err(Error::NonFinite("advantage".into()));
        }
        let ratio = match clip {
            Some(c) => clipped_path_ratio(&s.step_deltas, c)?,
            None => s.step_deltas.iter().sum::<f64>().exp(),
        };
        let cost = anchored_drift_cost(&s.new_drifts, &s.old_drifts, obj.reference_mix, sched)?;
        total += -ratio * (s.advantage - obj.kl_coef * cost);
    }
    Ok(total / batch.len() as f64)
}

/// A minibatch of stored transitions: normalized observations, their
/// generation paths and (already normalized) advantages.
pub struct LossBatch<'a> {
    pub states: Vec<&'a [f64]>,
    pub paths: Vec<&'a GenerationPath>,
    pub advantages: Vec<f64>,
}

/// Batch statistics gathered while building the loss graph.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossStats {
    pub loss: f64,
    pub step_clip_frac: f64,
    pub path_clip_frac: f64,
    pub mean_abs_path_log_ratio: f64,
    pub mean_drift_cost: f64,
}

pub struct LossGraph {
    pub tape: Tape,
    pub loss: Var,
    pub vars: MlpVars,
    pub stats: LossStats,
}

/// Records the policy loss for `batch` under the current drift field.
/// Likelihoods and drifts are recomputed on the stored paths; the stored
/// old values form the ratio denominators and the anchor.
pub fn build_loss(
    field: &DriftField,
    batch: &LossBatch<'_>,
    sched: &NoiseSchedule,
    obj: &ObjectiveConfig,
    clip: Option<&ClipConfig>,
) -> Result<LossGraph> {
    let b = batch.paths.len();
    if b == 0 {
        return Err(Error::EmptyBatch("mdpo_loss"));
    }
    if batch.states.len() != b || batch.advantages.len() != b {
        return Err(Error::len("loss batch", b, batch.states.len().min(batch.advantages.len())));
    }
    obj.validate()?;
    if let Some(c) = clip {
        c.validate()?;
    }
    let n_steps = sched.steps;
    let d = field.action_dim();
    let rows = b * n_steps;
    let sigmas = sched.step_sigmas()?;
    let weights = cost_weights(sched)?;

    let mut x = Vec::with_capacity(rows * field.input_dim());
    let mut incr = Vec::with_capacity(rows * d);
    let mut dts = Vec::with_capacity(rows * d);
    let mut neg_half_inv_var = Vec::with_capacity(rows);
    let mut log_norm = Vec::with_capacity(rows);
    let mut old_logp = Vec::with_capacity(rows);
    let mut anchor = Vec::with_capacity(rows * d);
    let mut cost_w = Vec::with_capacity(rows * d);
    for (state, path) in batch.states.iter().zip(&batch.paths) {
        if path.steps() != n_steps || path.action_dim != d {
            return Err(Error::len("generation path steps", n_steps, path.steps()));
        }
        if state.len() != field.state_dim() {
            return Err(Error::len("state", field.state_dim(), state.len()));
        }
        for n in 0..n_steps {
            field.push_input(&mut x, state, path.node(n), sched.time(n));
            let (prev, next) = (path.node(n), path.node(n + 1));
            incr.extend(next.iter().zip(prev).map(|(x, p)| x - p));
            let dt = sched.dt(n);
            dts.extend(std::iter::repeat_n(dt, d));
            let var = sigmas[n] * sigmas[n] * dt;
            neg_half_inv_var.push(-0.5 / var);
            log_norm.push(-0.5 * d as f64 * (LN_2PI + var.ln()));
            old_logp.push(path.old_logp[n]);
            anchor.extend(path.old_drift(n).iter().map(|f| (1.0 - obj.reference_mix) * f));
            cost_w.extend(std::iter::repeat_n(weights[n], d));
        }
    }

    let mut tape = Tape::new();
    let xin = tape.constant(Array::matrix(rows, field.input_dim(), x));
    let (f, vars) = field.net.forward_tape(&mut tape, xin)?;

    // Step log-likelihoods under the current drift.
    let incr = tape.constant(Array::matrix(rows, d, incr));
    let dts = tape.constant(Array::matrix(rows, d, dts));
    let step = tape.mul(dts, f);
    let resid = tape.sub(incr, step);
    let sq = tape.square(resid);
    let sq = tape.sum_last(sq);
    let nhiv = tape.constant(Array::matrix(rows, 1, neg_half_inv_var));
    let quad = tape.mul(sq, nhiv);
    let log_norm = tape.constant(Array::matrix(rows, 1, log_norm));
    let logp = tape.add(quad, log_norm);
    let old = tape.constant(Array::matrix(rows, 1, old_logp));
    let delta = tape.sub(logp, old);

    let delta_vals = tape.value(delta).data().to_vec();
    let mut stats = LossStats::default();
    let log_ratio = match clip {
        Some(c) => {
            let clipped = tape.clip(delta, -c.c_step, c.c_step);
            let per_path = tape.reshape(clipped, &[b, n_steps]);
            let summed = tape.sum_last(per_path);
            stats.path_clip_frac = tape
                .value(summed)
                .data()
                .iter()
                .filter(|v| v.abs() > c.c_path)
                .count() as f64
                / b as f64;
            stats.step_clip_frac =
                delta_vals.iter().filter(|v| v.abs() > c.c_step).count() as f64 / rows as f64;
            tape.clip(summed, -c.c_path, c.c_path)
        }
        None => {
            let per_path = tape.reshape(delta, &[b, n_steps]);
            tape.sum_last(per_path)
        }
    };
    stats.mean_abs_path_log_ratio = delta_vals
        .chunks(n_steps)
        .map(|c| c.iter().sum::<f64>().abs())
        .sum::<f64>()
        / b as f64;
    let ratio = tape.exp(log_ratio);

    // Anchored drift cost per path.
    let anchor = tape.constant(Array::matrix(rows, d, anchor));
    let gap = tape.sub(f, anchor);
    let gap = tape.square(gap);
    let cost_w = tape.constant(Array::matrix(rows, d, cost_w));
    let cost = tape.mul(gap, cost_w);
    let cost = tape.reshape(cost, &[b, n_steps * d]);
    let cost = tape.sum_last(cost);
    stats.mean_drift_cost = tape.value(cost).sum() / b as f64;

    let adv = tape.constant(Array::matrix(b, 1, batch.advantages.clone()));
    let penalty = tape.scale(cost, obj.kl_coef);
    let eff = tape.sub(adv, penalty);
    let surrogate = tape.mul(ratio, eff);
    let mean = tape.mean(surrogate);
    let loss = tape.scale(mean, -1.0);
    stats.loss = tape.value(loss).item();
    if !stats.loss.is_finite() {
        return Err(Error::NonFinite("policy loss".into()));
    }
    Ok(LossGraph {
        tape,
        loss,
        vars,
        stats,
    })
}
