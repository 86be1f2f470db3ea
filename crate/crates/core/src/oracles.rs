//! Exact and Monte Carlo verifiers for the identities behind the method:
//! path vs terminal KL, the exponential-tilt optimum and its properties,
//! importance-sampling identities, the discrete Girsanov identity, and the
//! composite-KL identity.

use std::fmt;

use diffcore::{Activation, Array, Dense, Mlp};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::genpolicy::{path_step_terms, sample_paths, DriftField, NoiseSchedule, ScheduleKind};
use crate::pathobj::{drift_cost, gaussian_step_kl, mixed_anchor};
use crate::rng::{self, Rng};
use crate::{Error, Result};

/// Probability table over every state sequence `x_1..x_N` of an
/// `n_states`-state chain. Path `i` encodes its states in base `n_states`,
/// most significant first, so the terminal symbol is `i % n_states`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscretePathMeasure {
    pub n_states: usize,
    pub steps: usize,
    pub probs: Vec<f64>,
}

fn kl(p: &[f64], q: &[f64]) -> Result<f64> {
    let mut s = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(Error::Invalid("absolute continuity violated: Q = 0 where P > 0".into()));
            }
            s += pi * (pi / qi).ln();
        }
    }
    Ok(s)
}

fn normalized(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let z: f64 = v.iter().sum();
    if !(z.is_finite() && z > 0.0) {
        return Err(Error::Invalid(format!("degenerate normalizer {z}")));
    }
    v.iter_mut().for_each(|x| *x /= z);
    Ok(v)
}

impl DiscretePathMeasure {
    pub fn new(n_states: usize, steps: usize, probs: Vec<f64>) -> Result<Self> {
        let n = n_states.pow(steps as u32);
        if probs.len() != n {
            return Err(Error::len("path probabilities", n, probs.len()));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Invalid("path probabilities must be non-negative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Invalid(format!("path probabilities sum to {total}")));
        }
        Ok(Self {
            n_states,
            steps,
            probs,
        })
    }

    /// Markov chain with random initial and per-step transition tables.
    pub fn random_chain(n_states: usize, steps: usize, rng: &mut Rng) -> Self {
        let mut draw = |k: usize| -> Vec<f64> {
            let v: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
            let z: f64 = v.iter().sum();
            v.into_iter().map(|x| x / z).collect()
        };
        let init = draw(n_states);
        let trans: Vec<Vec<Vec<f64>>> = (1..steps)
            .map(|_| (0..n_states).map(|_| draw(n_states)).collect())
            .collect();
        let n = n_states.pow(steps as u32);
        let probs = (0..n)
            .map(|i| {
                let xs = Self::decode(i, n_states, steps);
                let mut p = init[xs[0]];
                for s in 1..steps {
                    p *= trans[s - 1][xs[s - 1]][xs[s]];
                }
                p
            })
            .collect();
        Self {
            n_states,
            steps,
            probs: normalized(probs).expect("positive chain"),
        }
    }

    fn decode(mut i: usize, n_states: usize, steps: usize) -> Vec<usize> {
        let mut xs = vec![0; steps];
        for s in (0..steps).rev() {
            xs[s] = i % n_states;
            i /= n_states;
        }
        xs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn states(&self, path: usize) -> Vec<usize> {
        Self::decode(path, self.n_states, self.steps)
    }

    pub fn terminal(&self, path: usize) -> usize {
        path % self.n_states
    }

    pub fn terminal_marginal(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.n_states];
        for (i, p) in self.probs.iter().enumerate() {
            m[self.terminal(i)] += p;
        }
        m
    }

    fn same_space(&self, other: &Self) -> Result<()> {
        if self.n_states != other.n_states || self.steps != other.steps {
            return Err(Error::Invalid("path measures live on different spaces".into()));
        }
        Ok(())
    }

    pub fn total_variation(&self, other: &Self) -> f64 {
        0.5 * self.probs.iter().zip(&other.probs).map(|(a, b)| (a - b).abs()).sum::<f64>()
    }

    pub fn expect_terminal(&self, a: &[f64]) -> f64 {
        self.probs.iter().enumerate().map(|(i, p)| p * a[self.terminal(i)]).sum()
    }
}

pub fn path_kl(p: &DiscretePathMeasure, q: &DiscretePathMeasure) -> Result<f64> {
    p.same_space(q)?;
    kl(&p.probs, &q.probs)
}

pub fn terminal_kl(p: &DiscretePathMeasure, q: &DiscretePathMeasure) -> Result<f64> {
    p.same_space(q)?;
    kl(&p.terminal_marginal(), &q.terminal_marginal())
}

/// `E_{x ~ P_N}[ KL(P(·|x) ‖ Q(·|x)) ]`, the gap between path and terminal KL.
pub fn expected_conditional_kl(p: &DiscretePathMeasure, q: &DiscretePathMeasure) -> Result<f64> {
    p.same_space(q)?;
    let (pm, qm) = (p.terminal_marginal(), q.terminal_marginal());
    let mut total = 0.0;
    for x in 0..p.n_states {
        if pm[x] == 0.0 {
            continue;
        }
        let idx: Vec<usize> = (0..p.len()).filter(|&i| p.terminal(i) == x).collect();
        let pc: Vec<f64> = idx.iter().map(|&i| p.probs[i] / pm[x]).collect();
        let qc: Vec<f64> = idx.iter().map(|&i| q.probs[i] / qm[x]).collect();
        total += pm[x] * kl(&pc, &qc)?;
    }
    Ok(total)
}

/// `P*(τ) ∝ P_k(τ)·exp(A(x_N)/α)`.
pub fn brute_force_tilt(pk: &DiscretePathMeasure, a: &[f64], alpha: f64) -> Result<DiscretePathMeasure> {
    if !(alpha > 0.0) {
        return Err(Error::range("alpha", alpha));
    }
    if a.len() != pk.n_states {
        return Err(Error::len("terminal advantages", pk.n_states, a.len()));
    }
    let amax = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = pk
        .probs
        .iter()
        .enumerate()
        .map(|(i, p)| p * ((a[pk.terminal(i)] - amax) / alpha).exp())
        .collect();
    Ok(DiscretePathMeasure {
        probs: normalized(w)?,
        ..pk.clone()
    })
}

/// Maximizes `E_P[A] − α·KL(P ‖ P_k)` over the path simplex by
/// exponentiated-gradient (mirror) ascent from `P_k`.
pub fn simplex_ascent(
    pk: &DiscretePathMeasure,
    a: &[f64],
    alpha: f64,
    iters: usize,
    step: f64,
) -> Result<DiscretePathMeasure> {
    let mut logp: Vec<f64> = pk.probs.iter().map(|p| p.ln()).collect();
    let logk = logp.clone();
    for _ in 0..iters {
        for (i, lp) in logp.iter_mut().enumerate() {
            let grad = a[pk.terminal(i)] - alpha * (*lp - logk[i] + 1.0);
            *lp += step * grad;
        }
        let m = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lz = m + logp.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        logp.iter_mut().for_each(|l| *l -= lz);
    }
    Ok(DiscretePathMeasure {
        probs: normalized(logp.iter().map(|l| l.exp()).collect())?,
        ..pk.clone()
    })
}

/// Largest gap between the two measures' path conditionals given the
/// terminal symbol; terminals without mass are skipped.
pub fn verify_conditional_preservation(pk: &DiscretePathMeasure, pstar: &DiscretePathMeasure) -> f64 {
    let (mk, ms) = (pk.terminal_marginal(), pstar.terminal_marginal());
    let mut worst: f64 = 0.0;
    for (i, (pki, psi)) in pk.probs.iter().zip(&pstar.probs).enumerate() {
        let x = pk.terminal(i);
        if mk[x] == 0.0 || ms[x] == 0.0 {
            continue;
        }
        worst = worst.max((psi / ms[x] - pki / mk[x]).abs());
    }
    worst
}

#[derive(Clone, Debug, PartialEq)]
pub struct Improvement {
    pub new_expected: f64,
    pub old_expected: f64,
    /// `α·KL(P* ‖ P_k)`
    pub proximal: f64,
}

impl Improvement {
    pub fn holds(&self) -> bool {
        self.new_expected >= self.old_expected + self.proximal - 1e-12
    }
}

pub fn verify_improvement(pk: &DiscretePathMeasure, a: &[f64], alpha: f64) -> Result<Improvement> {
    let ps = brute_force_tilt(pk, a, alpha)?;
    Ok(Improvement {
        new_expected: ps.expect_terminal(a),
        old_expected: pk.expect_terminal(a),
        proximal: alpha * path_kl(&ps, pk)?,
    })
}

/// Normalized geometric mixture `P_k^{1−η}·P_ref^η`.
pub fn geometric_mixture(
    pk: &DiscretePathMeasure,
    pref: &DiscretePathMeasure,
    eta: f64,
) -> Result<DiscretePathMeasure> {
    pk.same_space(pref)?;
    let w = pk
        .probs
        .iter()
        .zip(&pref.probs)
        .map(|(a, b)| a.powf(1.0 - eta) * b.powf(eta))
        .collect();
    Ok(DiscretePathMeasure {
        probs: normalized(w)?,
        ..pk.clone()
    })
}

/// `α·KL(P‖P_k) + β·KL(P‖P_ref) − (α+β)·KL(P‖P_η)` with `η = β/(α+β)`.
pub fn composite_residual(
    p: &DiscretePathMeasure,
    pk: &DiscretePathMeasure,
    pref: &DiscretePathMeasure,
    alpha: f64,
    beta: f64,
) -> Result<f64> {
    let peta = geometric_mixture(pk, pref, beta / (alpha + beta))?;
    Ok(alpha * path_kl(p, pk)? + beta * path_kl(p, pref)? - (alpha + beta) * path_kl(p, &peta)?)
}

/// Monte Carlo agreement report for one importance-sampling identity.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct McReport {
    pub is_estimate: f64,
    pub is_se: f64,
    pub direct_estimate: f64,
    pub direct_se: f64,
    pub analytic: f64,
}

impl McReport {
    fn from_samples(is_vals: &[f64], direct_vals: &[f64], analytic: f64) -> Self {
        let (im, is) = mean_se(is_vals);
        let (dm, ds) = mean_se(direct_vals);
        Self {
            is_estimate: im,
            is_se: is,
            direct_estimate: dm,
            direct_se: ds,
            analytic,
        }
    }

    /// Largest deviation in units of the relevant (combined) standard error.
    pub fn worst_z(&self) -> f64 {
        let pair = (self.is_estimate - self.direct_estimate).abs()
            / (self.is_se.powi(2) + self.direct_se.powi(2)).sqrt();
        let is = (self.is_estimate - self.analytic).abs() / self.is_se;
        let direct = (self.direct_estimate - self.analytic).abs() / self.direct_se;
        pair.max(is).max(direct)
    }

    pub fn passes(&self) -> bool {
        self.worst_z() < 3.0
    }
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt().max(1e-300))
}

/// Generic check: `E_θ[F]` directly from θ samples and via `P_k` samples
/// weighted by the exact ratio.
pub fn mc_is_check(
    sample_k: &mut dyn FnMut(&mut Rng) -> Vec<f64>,
    sample_theta: &mut dyn FnMut(&mut Rng) -> Vec<f64>,
    log_ratio: &dyn Fn(&[f64]) -> f64,
    f: &dyn Fn(&[f64]) -> f64,
    analytic: f64,
    n_samples: usize,
    seed: u64,
) -> Result<McReport> {
    if n_samples < 10_000 {
        return Err(Error::range("Monte Carlo sample count", n_samples as f64));
    }
    let mut rk = rng::stream(seed, 0);
    let mut rt = rng::stream(seed, 1);
    let is_vals: Vec<f64> = (0..n_samples)
        .map(|_| {
            let x = sample_k(&mut rk);
            log_ratio(&x).exp() * f(&x)
        })
        .collect();
    let direct: Vec<f64> = (0..n_samples).map(|_| f(&sample_theta(&mut rt))).collect();
    Ok(McReport::from_samples(&is_vals, &direct, analytic))
}

/// One-step Gaussian policies `N(μ, s²)`: expectation form with `F(a) = a²`
/// and KL form with `F = log ratio`.
pub fn gaussian_is_checks(mu_k: f64, mu_theta: f64, s: f64, n: usize, seed: u64) -> Result<(McReport, McReport)> {
    let lr = move |x: &[f64]| {
        let (a, b) = ((x[0] - mu_theta) / s, (x[0] - mu_k) / s);
        -0.5 * a * a + 0.5 * b * b
    };
    let mut sk = move |r: &mut Rng| vec![mu_k + s * r.sample::<f64, _>(StandardNormal)];
    let mut st = move |r: &mut Rng| vec![mu_theta + s * r.sample::<f64, _>(StandardNormal)];
    let expect = mc_is_check(&mut sk, &mut st, &lr, &|x| x[0] * x[0], mu_theta * mu_theta + s * s, n, seed)?;
    let kl_analytic = (mu_theta - mu_k).powi(2) / (2.0 * s * s);
    let kl = mc_is_check(&mut sk, &mut st, &lr, &lr, kl_analytic, n, seed + 1)?;
    Ok((expect, kl))
}

/// A drift field returning the constant `c` everywhere.
pub fn constant_field(state_dim: usize, time_dim: usize, c: &[f64]) -> DriftField {
    let d = c.len();
    let net = Mlp::from_layers(
        Activation::Identity,
        vec![Dense {
            weight: Array::zeros(&[state_dim + d + time_dim, d]),
            bias: Array::new(vec![d], c.to_vec()).expect("bias shape"),
        }],
    )
    .expect("single layer");
    DriftField::from_net(net, state_dim, d, time_dim).expect("field widths")
}

/// Path-level version on generation paths with constant drifts `c_k`, `c_θ`:
/// `E_θ[a^(N)]` and the path KL, via the policy's own sampler and
/// likelihoods.
pub fn path_is_checks(c_k: f64, c_theta: f64, sched: &NoiseSchedule, n: usize, seed: u64) -> Result<(McReport, McReport)> {
    let fk = constant_field(1, 2, &[c_k]);
    let ft = constant_field(1, 2, &[c_theta]);
    let draw = |field: &DriftField, stream: u64| -> Result<Vec<crate::genpolicy::GenerationPath>> {
        let states = Array::zeros(&[n, 1]);
        let mut rngs: Vec<Rng> = (0..n as u64).map(|i| rng::stream(seed ^ (stream << 40), i)).collect();
        sample_paths(field, sched, &states, &mut rngs)?
            .into_iter()
            .map(|p| p.ok_or_else(|| Error::NonFinite("oracle path".into())))
            .collect()
    };
    let pk_paths = draw(&fk, 1)?;
    let pt_paths = draw(&ft, 2)?;
    let log_ratio = |p: &crate::genpolicy::GenerationPath| -> Result<f64> {
        let (_, lt) = path_step_terms(&ft, p, sched, &[0.0])?;
        let (_, lk) = path_step_terms(&fk, p, sched, &[0.0])?;
        Ok(lt.iter().sum::<f64>() - lk.iter().sum::<f64>())
    };
    let mut is_e = Vec::with_capacity(n);
    let mut is_k = Vec::with_capacity(n);
    for p in &pk_paths {
        let l = log_ratio(p)?;
        is_e.push(l.exp() * p.terminal()[0]);
        is_k.push(l.exp() * l);
    }
    let mut d_e = Vec::with_capacity(n);
    let mut d_k = Vec::with_capacity(n);
    for p in &pt_paths {
        d_e.push(p.terminal()[0]);
        d_k.push(log_ratio(p)?);
    }
    let sig = sched.step_sigmas()?;
    let kl_analytic: f64 = (0..sched.steps)
        .map(|i| sched.dt(i) * (c_theta - c_k).powi(2) / (2.0 * sig[i] * sig[i]))
        .sum();
    Ok((
        McReport::from_samples(&is_e, &d_e, c_theta),
        McReport::from_samples(&is_k, &d_k, kl_analytic),
    ))
}

/// |drift cost − Σ per-step Gaussian KL| on `n_paths` paths, each with a
/// fresh random pair of drift fields.
pub fn verify_girsanov(n_paths: usize, sched: &NoiseSchedule, seed: u64) -> Result<f64> {
    let mut r = rng::stream(seed, 0);
    let sig = sched.step_sigmas()?;
    let mut worst: f64 = 0.0;
    for _ in 0..n_paths {
        let fa = DriftField::new(2, 2, 4, &[16], Activation::Silu, 1.0, &mut r)?;
        let fb = DriftField::new(2, 2, 4, &[16], Activation::Tanh, 1.0, &mut r)?;
        let state = [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
        let path = crate::genpolicy::sample_path(&fb, sched, &state, &mut r)?;
        let (da, _) = path_step_terms(&fa, &path, sched, &state)?;
        let db = &path.old_drifts;
        let cost = drift_cost(&da, db, sched)?;
        let mut kl = 0.0;
        for n in 0..sched.steps {
            let dt = sched.dt(n);
            let a = path.node(n);
            let ma: Vec<f64> = (0..2).map(|k| a[k] + dt * da[2 * n + k]).collect();
            let mb: Vec<f64> = (0..2).map(|k| a[k] + dt * db[2 * n + k]).collect();
            kl += gaussian_step_kl(&ma, &mb, sig[n] * sig[n] * dt)?;
        }
        worst = worst.max((cost - kl).abs());
    }
    Ok(worst)
}

/// Spread over random optimized means of the per-step Gaussian residual
/// `α·KL(p‖p_k) + β·KL(p‖p_ref) − (α+β)·KL(p‖p_η)`, where all three share
/// variance `v` and `p_η` has the mixed-anchor mean.
pub fn gaussian_composite_spread(alpha: f64, beta: f64, v: f64, trials: usize, rng: &mut Rng) -> Result<f64> {
    let d = 3;
    let mk: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mref: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let meta = mixed_anchor(&mk, &mref, beta / (alpha + beta))?;
    let mut vals = Vec::with_capacity(trials);
    for _ in 0..trials {
        let m: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        vals.push(
            alpha * gaussian_step_kl(&m, &mk, v)? + beta * gaussian_step_kl(&m, &mref, v)?
                - (alpha + beta) * gaussian_step_kl(&m, &meta, v)?,
        );
    }
    Ok(spread(&vals))
}

/// Completing the square: `α‖f−f_k‖² + β‖f−f_ref‖² − (α+β)‖f−f_η‖²`
/// equals `αβ/(α+β)·‖f_k − f_ref‖²` for every `f`. Returns the largest
/// deviation from that closed form.
pub fn completing_square_deviation(trials: usize, rng: &mut Rng) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let alpha = rng.random_range(0.1..3.0);
        let beta = rng.random_range(0.1..3.0);
        let d = 4;
        let fk: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let fr: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let f: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let fe = mixed_anchor(&fk, &fr, beta / (alpha + beta))?;
        let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        let lhs = alpha * sq(&f, &fk) + beta * sq(&f, &fr) - (alpha + beta) * sq(&f, &fe);
        let rhs = alpha * beta / (alpha + beta) * sq(&fk, &fr);
        worst = worst.max((lhs - rhs).abs());
    }
    Ok(worst)
}

fn spread(v: &[f64]) -> f64 {
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    hi - lo
}

fn random_measure(n_states: usize, steps: usize, rng: &mut Rng) -> DiscretePathMeasure {
    let n = n_states.pow(steps as u32);
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0f64).powi(2)).collect();
    DiscretePathMeasure {
        n_states,
        steps,
        probs: normalized(w).expect("positive weights"),
    }
}

fn random_advantage(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
}

/// `‖g_ad − g_fd‖ / ‖g_fd‖` with `g_fd` from central differences over
/// every parameter coordinate of `model`.
fn gradient_rel_error<M>(
    model: &mut M,
    params: impl for<'a> Fn(&'a mut M) -> Vec<&'a mut Array>,
    loss: impl Fn(&M) -> Result<f64>,
    analytic: &[f64],
    h: f64,
) -> Result<f64> {
    let sizes: Vec<usize> = params(model).iter().map(|a| a.len()).collect();
    if sizes.iter().sum::<usize>() != analytic.len() {
        return Err(Error::len("gradient entries", sizes.iter().sum(), analytic.len()));
    }
    let set = |m: &mut M, k: usize, j: usize, v: f64| params(m)[k].data_mut()[j] = v;
    let (mut num, mut den, mut i) = (0.0, 0.0, 0);
    for (k, &size) in sizes.iter().enumerate() {
        for j in 0..size {
            let x0 = params(model)[k].data()[j];
            set(model, k, j, x0 + h);
            let up = loss(model)?;
            set(model, k, j, x0 - h);
            let down = loss(model)?;
            set(model, k, j, x0);
            let fd = (up - down) / (2.0 * h);
            num += (analytic[i] - fd).powi(2);
            den += fd * fd;
            i += 1;
        }
    }
    Ok((num / den.max(1e-300)).sqrt())
}

/// Worst relative gradient error of the unclipped policy loss over `points`
/// random parameter points, each scored on paths drawn from a separate
/// random old policy.
pub fn policy_gradient_check(points: usize, seed: u64) -> Result<f64> {
    let sched = NoiseSchedule::new(ScheduleKind::Linear, 1.5, 0.5, 4)?;
    let obj = crate::pathobj::ObjectiveConfig {
        normalize_advantages: false,
        ..Default::default()
    };
    let mut r = rng::stream(seed, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let old = DriftField::new(2, 2, 4, &[8, 8], Activation::Silu, 1.0, &mut r)?;
        let mut field = DriftField::new(2, 2, 4, &[8, 8], Activation::Silu, 1.0, &mut r)?;
        let states: Vec<Vec<f64>> = (0..4).map(|_| vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]).collect();
        let paths: Vec<_> = states
            .iter()
            .map(|s| crate::genpolicy::sample_path(&old, &sched, s, &mut r))
            .collect::<Result<_>>()?;
        let adv: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
        let batch = crate::pathobj::LossBatch {
            states: states.iter().map(|s| s.as_slice()).collect(),
            paths: paths.iter().collect(),
            advantages: adv,
        };
        let mut g = crate::pathobj::build_loss(&field, &batch, &sched, &obj, None)?;
        let mut grads = g.tape.backward(g.loss)?;
        let analytic: Vec<f64> = g
            .vars
            .params
            .iter()
            .flat_map(|&v| grads.take(v).into_data())
            .collect();
        let err = gradient_rel_error(
            &mut field,
            |f| f.net.params_mut(),
            |f| Ok(crate::pathobj::build_loss(f, &batch, &sched, &obj, None)?.stats.loss),
            &analytic,
            1e-5,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Same check for the squared-error value loss.
pub fn value_gradient_check(points: usize, seed: u64) -> Result<f64> {
    let mut r = rng::stream(seed, 1);
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let mut net = crate::critic::ValueNet::new(3, &[8, 8], Activation::Elu, &mut r);
        let states = Array::matrix(6, 3, (0..18).map(|_| r.random_range(-2.0..2.0)).collect());
        let targets: Vec<f64> = (0..6).map(|_| r.random_range(-3.0..3.0)).collect();
        let (mut tape, loss, vars) = crate::critic::value_loss_graph(&net, &states, &targets)?;
        let mut grads = tape.backward(loss)?;
        let analytic: Vec<f64> = vars.params.iter().flat_map(|&v| grads.take(v).into_data()).collect();
        let err = gradient_rel_error(
            &mut net,
            |n| n.net.params_mut(),
            |n| crate::critic::value_loss(n, &states, &targets),
            &analytic,
            1e-5,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// One line of the verification table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    /// Worst observed deviation (or z-score for Monte Carlo checks).
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn push(&mut self, name: &str, value: f64, tolerance: f64) {
        self.checks.push(CheckResult {
            name: name.into(),
            value,
            tolerance,
            passed: value.is_finite() && value <= tolerance,
        });
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<44} {:>12} {:>10}  result", "check", "worst", "tolerance")?;
        for c in &self.checks {
            writeln!(
                f,
                "{:<44} {:>12.3e} {:>10.1e}  {}",
                c.name,
                c.value,
                c.tolerance,
                if c.passed { "pass" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// Prop-style checks on `count` random 3-state, 3-step chains: returns the
/// worst `terminal_kl − path_kl` and the worst decomposition residual.
pub fn path_terminal_kl_sweep(count: usize, rng: &mut Rng) -> Result<(f64, f64)> {
    let (mut worst_gap, mut worst_decomp): (f64, f64) = (f64::NEG_INFINITY, 0.0);
    for _ in 0..count {
        let p = DiscretePathMeasure::random_chain(3, 3, rng);
        let q = DiscretePathMeasure::random_chain(3, 3, rng);
        let (pk, tk) = (path_kl(&p, &q)?, terminal_kl(&p, &q)?);
        worst_gap = worst_gap.max(tk - pk);
        worst_decomp = worst_decomp.max((pk - tk - expected_conditional_kl(&p, &q)?).abs());
    }
    Ok((worst_gap, worst_decomp))
}

/// Simplex ascent vs closed-form tilt on `count` random instances: worst
/// total variation and worst conditional-preservation deviation.
pub fn tilt_sweep(count: usize, iters: usize, rng: &mut Rng) -> Result<(f64, f64)> {
    let (mut tv, mut cond): (f64, f64) = (0.0, 0.0);
    for _ in 0..count {
        let pk = DiscretePathMeasure::random_chain(3, 3, rng);
        let a = random_advantage(3, rng);
        let alpha = rng.random_range(0.5..2.0);
        let exact = brute_force_tilt(&pk, &a, alpha)?;
        let ascent = simplex_ascent(&pk, &a, alpha, iters, 0.01)?;
        tv = tv.max(exact.total_variation(&ascent));
        cond = cond.max(verify_conditional_preservation(&pk, &exact));
    }
    Ok((tv, cond))
}

/// Worst violation of `E_{P*}[A] ≥ E_{P_k}[A] + α·KL(P*‖P_k)` (negative
/// means the bound holds with room).
pub fn improvement_sweep(count: usize, rng: &mut Rng) -> Result<f64> {
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..count {
        let pk = DiscretePathMeasure::random_chain(3, 3, rng);
        let a = random_advantage(3, rng);
        let alpha = rng.random_range(0.2..3.0);
        let imp = verify_improvement(&pk, &a, alpha)?;
        worst = worst.max(imp.old_expected + imp.proximal - imp.new_expected);
    }
    Ok(worst)
}

/// Spread of the discrete composite-KL residual over `trials` random `P`.
pub fn discrete_composite_spread(trials: usize, rng: &mut Rng) -> Result<f64> {
    let pk = DiscretePathMeasure::random_chain(3, 3, rng);
    let pref = random_measure(3, 3, rng);
    let (alpha, beta) = (rng.random_range(0.2..2.0), rng.random_range(0.2..2.0));
    let vals: Result<Vec<f64>> = (0..trials)
        .map(|_| composite_residual(&random_measure(3, 3, rng), &pk, &pref, alpha, beta))
        .collect();
    Ok(spread(&vals?))
}

/// The full suite. Deterministic given `seed`.
pub fn run_verify(seed: u64) -> Result<VerifyReport> {
    let mut rep = VerifyReport::default();
    let mut r = rng::stream(seed, 0);

    let sched = NoiseSchedule::new(ScheduleKind::Linear, 3.0, 0.3, 16)?;
    rep.push("girsanov: drift cost vs step KLs", verify_girsanov(100, &sched, seed)?, 1e-10);

    let (gap, decomp) = path_terminal_kl_sweep(1000, &mut r)?;
    rep.push("path KL >= terminal KL (excess)", gap.max(0.0), 1e-12);
    rep.push("path KL decomposition residual", decomp, 1e-10);

    let (tv, cond) = tilt_sweep(20, 10_000, &mut r)?;
    rep.push("simplex ascent vs tilt (TV)", tv, 1e-6);
    rep.push("tilt preserves path conditionals", cond, 1e-10);

    let viol = improvement_sweep(100, &mut r)?;
    rep.push("advantage improvement bound (violation)", viol.max(0.0), 1e-12);

    let (ge, gk) = gaussian_is_checks(0.0, 0.4, 1.0, 100_000, seed.wrapping_add(11))?;
    rep.push("IS expectation, Gaussian step (z)", ge.worst_z(), 3.0);
    rep.push("IS KL form, Gaussian step (z)", gk.worst_z(), 3.0);
    let psched = NoiseSchedule::new(ScheduleKind::Linear, 1.0, 0.5, 4)?;
    let (pe, pk) = path_is_checks(0.0, 0.3, &psched, 100_000, seed.wrapping_add(12))?;
    rep.push("IS expectation, generation path (z)", pe.worst_z(), 3.0);
    rep.push("IS KL form, generation path (z)", pk.worst_z(), 3.0);

    rep.push("composite KL, discrete (spread)", discrete_composite_spread(10, &mut r)?, 1e-8);
    rep.push(
        "composite KL, Gaussian step (spread)",
        gaussian_composite_spread(0.7, 0.3, 0.05, 10, &mut r)?,
        1e-8,
    );
    rep.push("completing the square", completing_square_deviation(100, &mut r)?, 1e-10);
    rep.push("policy loss gradient vs finite differences", policy_gradient_check(20, seed)?, 1e-4);
    rep.push("value loss gradient vs finite differences", value_gradient_check(20, seed)?, 1e-4);
    Ok(rep)
}
