//! State-conditioned stochastic generative policy: Euler–Maruyama generation
//! paths from a standard-normal prior, their Gaussian transition densities,
//! and the noise-free evaluation mode.

use diffcore::{Activation, Array, Mlp};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::{Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Constant,
    Linear,
    Exponential,
}

/// σ over generation time on the uniform grid `t_n = n / steps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub steps: usize,
    /// When set, σ starts at `sigma_max` at t = 0 and ends at `sigma_min`.
    pub high_noise_first: bool,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, sigma_max: f64, sigma_min: f64, steps: usize) -> Result<Self> {
        let s = Self {
            kind,
            sigma_max,
            sigma_min,
            steps,
            high_noise_first: true,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn constant(sigma: f64, steps: usize) -> Result<Self> {
        Self::new(ScheduleKind::Constant, sigma, sigma, steps)
    }

    pub fn validate(&self) -> Result<()> {
        for (what, v) in [("sigma_max", self.sigma_max), ("sigma_min", self.sigma_min)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::range(what, v));
            }
        }
        if self.steps == 0 {
            return Err(Error::range("generation steps", 0.0));
        }
        Ok(())
    }

    pub fn sigma_at(&self, t: f64) -> Result<f64> {
        self.validate()?;
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::range("generation time", t));
        }
        let (start, end) = if self.high_noise_first {
            (self.sigma_max, self.sigma_min)
        } else {
            (self.sigma_min, self.sigma_max)
        };
        Ok(match self.kind {
            ScheduleKind::Constant => self.sigma_max,
            ScheduleKind::Linear => start + t * (end - start),
            ScheduleKind::Exponential => start * (end / start).powf(t),
        })
    }

    pub fn time(&self, n: usize) -> f64 {
        n as f64 / self.steps as f64
    }

    pub fn dt(&self, n: usize) -> f64 {
        self.time(n + 1) - self.time(n)
    }

    pub fn grid(&self) -> Vec<f64> {
        (0..=self.steps).map(|n| self.time(n)).collect()
    }

    /// σ(t_n) for n = 0..N−1, the noise level of each transition.
    pub fn step_sigmas(&self) -> Result<Vec<f64>> {
        (0..self.steps).map(|n| self.sigma_at(self.time(n))).collect()
    }
}

/// Sinusoidal features `[sin 2πkt, cos 2πkt]` for k = 1..dim/2.
pub fn time_embedding(t: f64, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    push_time_embedding(&mut out, t, dim);
    out
}

fn push_time_embedding(out: &mut Vec<f64>, t: f64, dim: usize) {
    for k in 1..=dim / 2 {
        let w = 2.0 * std::f64::consts::PI * k as f64 * t;
        out.push(w.sin());
        out.push(w.cos());
    }
}

/// Drift network `f(a, t, s)`; its input row is `[s, a, emb(t)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DriftField {
    pub net: Mlp,
    state_dim: usize,
    action_dim: usize,
    time_dim: usize,
}

impl DriftField {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        time_dim: usize,
        hidden: &[usize],
        activation: Activation,
        output_scale: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if time_dim % 2 != 0 {
            return Err(Error::range("time embedding dimension", time_dim as f64));
        }
        let mut widths = vec![state_dim + action_dim + time_dim];
        widths.extend_from_slice(hidden);
        widths.push(action_dim);
        let net = Mlp::new(&widths, activation, output_scale, rng);
        Self::from_net(net, state_dim, action_dim, time_dim)
    }

    pub fn from_net(net: Mlp, state_dim: usize, action_dim: usize, time_dim: usize) -> Result<Self> {
        if net.input_dim() != state_dim + action_dim + time_dim {
            return Err(Error::len("drift input width", state_dim + action_dim + time_dim, net.input_dim()));
        }
        if net.output_dim() != action_dim {
            return Err(Error::len("drift output width", action_dim, net.output_dim()));
        }
        Ok(Self {
            net,
            state_dim,
            action_dim,
            time_dim,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn time_dim(&self) -> usize {
        self.time_dim
    }

    pub fn input_dim(&self) -> usize {
        self.state_dim + self.action_dim + self.time_dim
    }

    pub fn push_input(&self, buf: &mut Vec<f64>, state: &[f64], action: &[f64], t: f64) {
        debug_assert_eq!(state.len(), self.state_dim);
        debug_assert_eq!(action.len(), self.action_dim);
        buf.extend_from_slice(state);
        buf.extend_from_slice(action);
        push_time_embedding(buf, t, self.time_dim);
    }

    pub fn eval(&self, state: &[f64], action: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_state(state)?;
        if action.len() != self.action_dim {
            return Err(Error::len("action", self.action_dim, action.len()));
        }
        let mut buf = Vec::with_capacity(self.input_dim());
        self.push_input(&mut buf, state, action, t);
        let out = self.net.forward(&Array::row(buf))?;
        Ok(out.into_data())
    }

    fn check_state(&self, state: &[f64]) -> Result<()> {
        if state.len() != self.state_dim {
            return Err(Error::len("state", self.state_dim, state.len()));
        }
        Ok(())
    }
}

/// One generation trajectory `a^(0..N)` with the drifts and transition
/// log-likelihoods of the policy that produced it, stored flat.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationPath {
    pub action_dim: usize,
    /// `(N + 1) · d`
    pub nodes: Vec<f64>,
    /// `N · d`
    pub old_drifts: Vec<f64>,
    /// `N`
    pub old_logp: Vec<f64>,
}

impl GenerationPath {
    pub fn steps(&self) -> usize {
        self.old_logp.len()
    }

    pub fn node(&self, n: usize) -> &[f64] {
        let d = self.action_dim;
        &self.nodes[n * d..(n + 1) * d]
    }

    pub fn prior(&self) -> &[f64] {
        self.node(0)
    }

    pub fn terminal(&self) -> &[f64] {
        self.node(self.steps())
    }

    pub fn old_drift(&self, n: usize) -> &[f64] {
        let d = self.action_dim;
        &self.old_drifts[n * d..(n + 1) * d]
    }

    pub fn old_path_logp(&self) -> f64 {
        self.old_logp.iter().sum()
    }
}

/// `a + Δt·drift + σ·√Δt·ε`.
pub fn euler_step(a: &[f64], dt: f64, drift: &[f64], sigma: f64, eps: &[f64]) -> Result<Vec<f64>> {
    if a.len() != drift.len() || a.len() != eps.len() {
        return Err(Error::len("euler step operands", a.len(), drift.len().max(eps.len())));
    }
    if !(dt > 0.0) {
        return Err(Error::range("step size", dt));
    }
    let sq = dt.sqrt();
    let out: Vec<f64> = a
        .iter()
        .zip(drift)
        .zip(eps)
        .map(|((&a, &f), &e)| a + dt * f + sigma * sq * e)
        .collect();
    if !(out.iter().all(|v| v.is_finite()) && sigma.is_finite()) {
        return Err(Error::NonFinite("euler step".into()));
    }
    Ok(out)
}

/// Log density of `N(prev + Δt·drift, σ²Δt·I)` at `next`.
///
/// The residual is formed as `(next − prev) − Δt·drift`, the same order the
/// training graph uses, so stored and recomputed values agree bit for bit.
pub fn gaussian_step_logp(prev: &[f64], next: &[f64], drift: &[f64], dt: f64, sigma: f64) -> f64 {
    let var = sigma * sigma * dt;
    let sq: f64 = prev
        .iter()
        .zip(next)
        .zip(drift)
        .map(|((&p, &x), &f)| {
            let r = (x - p) - dt * f;
            r * r
        })
        .sum();
    -0.5 * sq / var - 0.5 * prev.len() as f64 * (LN_2PI + var.ln())
}

/// Standard-normal prior log density, shared by every policy.
pub fn prior_logp(a: &[f64]) -> f64 {
    -0.5 * a.iter().map(|v| v * v).sum::<f64>() - 0.5 * a.len() as f64 * LN_2PI
}

#[allow(clippy::too_many_arguments)]
pub fn step_log_likelihood(
    field: &DriftField,
    a_n: &[f64],
    a_next: &[f64],
    t_n: f64,
    dt: f64,
    sigma: f64,
    state: &[f64],
) -> Result<f64> {
    if !(dt > 0.0) {
        return Err(Error::range("step size", dt));
    }
    if !(sigma > 0.0) {
        return Err(Error::range("sigma", sigma));
    }
    if a_next.len() != field.action_dim {
        return Err(Error::len("next action", field.action_dim, a_next.len()));
    }
    let f = field.eval(state, a_n, t_n)?;
    let lp = gaussian_step_logp(a_n, a_next, &f, dt, sigma);
    if !lp.is_finite() {
        return Err(Error::NonFinite("step log-likelihood".into()));
    }
    Ok(lp)
}

/// Per-step drifts (`N · d`) and log-likelihoods of `path` under `field`.
pub fn path_step_terms(
    field: &DriftField,
    path: &GenerationPath,
    sched: &NoiseSchedule,
    state: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n_steps = sched.steps;
    if path.steps() != n_steps || path.nodes.len() != (n_steps + 1) * field.action_dim {
        return Err(Error::len("generation path steps", n_steps, path.steps()));
    }
    field.check_state(state)?;
    let mut buf = Vec::with_capacity(n_steps * field.input_dim());
    for n in 0..n_steps {
        field.push_input(&mut buf, state, path.node(n), sched.time(n));
    }
    let drifts = field
        .net
        .forward(&Array::matrix(n_steps, field.input_dim(), buf))?
        .into_data();
    let sigmas = sched.step_sigmas()?;
    let d = field.action_dim;
    let logps: Vec<f64> = (0..n_steps)
        .map(|n| {
            gaussian_step_logp(
                path.node(n),
                path.node(n + 1),
                &drifts[n * d..(n + 1) * d],
                sched.dt(n),
                sigmas[n],
            )
        })
        .collect();
    if logps.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("path log-likelihood".into()));
    }
    Ok((drifts, logps))
}

/// Σ of step log-likelihoods; the shared prior term is left out.
pub fn path_log_likelihood(
    field: &DriftField,
    path: &GenerationPath,
    sched: &NoiseSchedule,
    state: &[f64],
) -> Result<f64> {
    Ok(path_step_terms(field, path, sched, state)?.1.iter().sum())
}

fn draw_normals(rng: &mut Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

/// Integrates every row of `states` from the given priors. With `noise`
/// absent the Euler steps use ε = 0. Rows whose nodes, drifts or
/// likelihoods turn non-finite come back as `None`.
fn integrate(
    field: &DriftField,
    sched: &NoiseSchedule,
    states: &Array,
    priors: Vec<Vec<f64>>,
    mut noise: Option<&mut [Rng]>,
) -> Result<Vec<Option<GenerationPath>>> {
    sched.validate()?;
    let b = states.rows();
    if states.cols() != field.state_dim {
        return Err(Error::len("state", field.state_dim, states.cols()));
    }
    let d = field.action_dim;
    let n_steps = sched.steps;
    let sigmas = sched.step_sigmas()?;
    let mut paths: Vec<Option<GenerationPath>> = priors
        .into_iter()
        .map(|a0| {
            let mut nodes = Vec::with_capacity((n_steps + 1) * d);
            nodes.extend_from_slice(&a0);
            Some(GenerationPath {
                action_dim: d,
                nodes,
                old_drifts: Vec::with_capacity(n_steps * d),
                old_logp: Vec::with_capacity(n_steps),
            })
        })
        .collect();
    let zeros = vec![0.0; d];
    let mut buf = Vec::with_capacity(b * field.input_dim());
    for n in 0..n_steps {
        let t = sched.time(n);
        let dt = sched.dt(n);
        buf.clear();
        for (i, p) in paths.iter().enumerate() {
            let a = p.as_ref().map_or(&zeros[..], |p| p.node(n));
            field.push_input(&mut buf, states.row_slice(i), a, t);
        }
        let drift = field
            .net
            .forward_unchecked(&Array::matrix(b, field.input_dim(), std::mem::take(&mut buf)))?;
        for (i, slot) in paths.iter_mut().enumerate() {
            let Some(p) = slot.as_mut() else { continue };
            let f = drift.row_slice(i);
            let eps = match noise.as_deref_mut() {
                Some(rngs) => draw_normals(&mut rngs[i], d),
                None => zeros.clone(),
            };
            let next = match euler_step(p.node(n), dt, f, sigmas[n], &eps) {
                Ok(next) if f.iter().all(|v| v.is_finite()) => next,
                _ => {
                    *slot = None;
                    continue;
                }
            };
            let lp = gaussian_step_logp(p.node(n), &next, f, dt, sigmas[n]);
            if !lp.is_finite() {
                *slot = None;
                continue;
            }
            p.old_drifts.extend_from_slice(f);
            p.old_logp.push(lp);
            p.nodes.extend_from_slice(&next);
        }
        buf = Vec::with_capacity(b * field.input_dim());
    }
    Ok(paths)
}

/// Samples one path per state row, row `i` drawing all its noise from
/// `rngs[i]`.
pub fn sample_paths(
    field: &DriftField,
    sched: &NoiseSchedule,
    states: &Array,
    rngs: &mut [Rng],
) -> Result<Vec<Option<GenerationPath>>> {
    if rngs.len() != states.rows() {
        return Err(Error::len("rng streams", states.rows(), rngs.len()));
    }
    let d = field.action_dim;
    let priors = rngs.iter_mut().map(|r| draw_normals(r, d)).collect();
    integrate(field, sched, states, priors, Some(rngs))
}

pub fn sample_path(
    field: &DriftField,
    sched: &NoiseSchedule,
    state: &[f64],
    rng: &mut Rng,
) -> Result<GenerationPath> {
    field.check_state(state)?;
    let states = Array::row(state.to_vec());
    sample_paths(field, sched, &states, std::slice::from_mut(rng))?
        .pop()
        .flatten()
        .ok_or_else(|| Error::NonFinite("generation path".into()))
}

/// Noise-free generation from given prior samples; returns `a^(N)` per row.
pub fn ode_from_priors(
    field: &DriftField,
    sched: &NoiseSchedule,
    states: &Array,
    priors: Vec<Vec<f64>>,
) -> Result<Vec<Option<Vec<f64>>>> {
    if priors.len() != states.rows() {
        return Err(Error::len("prior samples", states.rows(), priors.len()));
    }
    Ok(integrate(field, sched, states, priors, None)?
        .into_iter()
        .map(|p| p.map(|p| p.terminal().to_vec()))
        .collect())
}

/// Draws `a^(0)` from the prior, then follows the drift with ε = 0.
pub fn ode_actions(
    field: &DriftField,
    sched: &NoiseSchedule,
    states: &Array,
    rngs: &mut [Rng],
) -> Result<Vec<Option<Vec<f64>>>> {
    if rngs.len() != states.rows() {
        return Err(Error::len("rng streams", states.rows(), rngs.len()));
    }
    let d = field.action_dim;
    let priors = rngs.iter_mut().map(|r| draw_normals(r, d)).collect();
    ode_from_priors(field, sched, states, priors)
}

pub fn ode_action(
    field: &DriftField,
    sched: &NoiseSchedule,
    state: &[f64],
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    field.check_state(state)?;
    let states = Array::row(state.to_vec());
    ode_actions(field, sched, &states, std::slice::from_mut(rng))?
        .pop()
        .flatten()
        .ok_or_else(|| Error::NonFinite("deterministic action".into()))
}
