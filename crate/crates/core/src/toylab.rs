//! Four-mode Gaussian-mixture tilting toy: a state-less generative sampler
//! is pre-fit to the mixture by drift regression, then moved toward
//! `p_old(x)·exp(A(x)/β)` by mirror-descent updates on the path objective.

use std::fs;
use std::path::Path;

use diffcore::{clip_grad_norm, Activation, AdamState, Array, Tape};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::genpolicy::{sample_paths, DriftField, NoiseSchedule, ScheduleKind};
use crate::pathobj::{build_loss, ClipConfig, LossBatch, ObjectiveConfig};
use crate::rng::{self, Rng};
use crate::{Error, Result};

const TAG_PREFIT: u64 = 11;
const TAG_ITER: u64 = 12;
const TAG_EVAL: u64 = 13;
const TAG_INIT: u64 = 14;

/// Quadrant of a point, ordered QI (+,+), QII (−,+), QIII (−,−), QIV (+,−).
pub fn quadrant(x: &[f64]) -> usize {
    match (x[0] >= 0.0, x[1] >= 0.0) {
        (true, true) => 0,
        (false, true) => 1,
        (false, false) => 2,
        (true, false) => 3,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmOldPolicy {
    pub means: [[f64; 2]; 4],
    pub std: f64,
    pub weights: [f64; 4],
}

impl Default for GmmOldPolicy {
    fn default() -> Self {
        Self {
            means: [[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]],
            std: 0.2,
            weights: [0.25; 4],
        }
    }
}

impl GmmOldPolicy {
    pub fn validate(&self) -> Result<()> {
        check_simplex(&self.weights)?;
        if !(self.std > 0.0 && self.std.is_finite()) {
            return Err(Error::range("mixture std", self.std));
        }
        let mut seen = [false; 4];
        for m in &self.means {
            let q = quadrant(m);
            if seen[q] || m[0] == 0.0 || m[1] == 0.0 {
                return Err(Error::Invalid("mixture means must sit in distinct quadrants".into()));
            }
            seen[q] = true;
        }
        Ok(())
    }

    fn component_with_weights(&self, w: &[f64; 4], rng: &mut Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (k, wk) in w.iter().enumerate() {
            acc += wk;
            if u < acc {
                return k;
            }
        }
        3
    }

    /// Samples with component weights `w` (the mixture's own, or tilted).
    pub fn sample_weighted(&self, w: &[f64; 4], n: usize, rng: &mut Rng) -> Vec<[f64; 2]> {
        (0..n)
            .map(|_| {
                let m = self.means[self.component_with_weights(w, rng)];
                [
                    m[0] + self.std * rng.sample::<f64, _>(StandardNormal),
                    m[1] + self.std * rng.sample::<f64, _>(StandardNormal),
                ]
            })
            .collect()
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Vec<[f64; 2]> {
        self.sample_weighted(&self.weights, n, rng)
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        let v = self.std * self.std;
        self.means
            .iter()
            .zip(&self.weights)
            .map(|(m, w)| {
                let d2 = (x[0] - m[0]).powi(2) + (x[1] - m[1]).powi(2);
                w * (-0.5 * d2 / v).exp() / (2.0 * std::f64::consts::PI * v)
            })
            .sum()
    }
}

/// Quadrant-constant preference: `exp(A(x)/β) = weights[quadrant(x)]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadrantPreference {
    pub weights: [f64; 4],
    pub beta: f64,
}

impl Default for QuadrantPreference {
    fn default() -> Self {
        Self {
            weights: [1.2, 1.0, 3.0, 1.4],
            beta: 1.0,
        }
    }
}

impl QuadrantPreference {
    pub fn validate(&self) -> Result<()> {
        if self.weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::Invalid("preference weights must be positive".into()));
        }
        if !(self.beta > 0.0) {
            return Err(Error::range("beta", self.beta));
        }
        Ok(())
    }

    pub fn advantage(&self, x: &[f64]) -> f64 {
        self.beta * self.weights[quadrant(x)].ln()
    }
}

fn check_simplex(w: &[f64; 4]) -> Result<()> {
    if w.iter().any(|x| !(*x >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(format!("weights {w:?} are not on the simplex")));
    }
    Ok(())
}

/// Elementwise product renormalized; exact when each mode's mass sits in
/// its own quadrant.
pub fn tilted_quadrant_masses(old: &[f64; 4], pref: &[f64; 4]) -> Result<[f64; 4]> {
    check_simplex(old)?;
    if pref.iter().any(|w| !(*w > 0.0)) {
        return Err(Error::Invalid("preference weights must be positive".into()));
    }
    let mut m = [0.0; 4];
    for k in 0..4 {
        m[k] = old[k] * pref[k];
    }
    let z: f64 = m.iter().sum();
    if !(z > 0.0) {
        return Err(Error::Invalid("zero total tilted mass".into()));
    }
    m.iter_mut().for_each(|x| *x /= z);
    Ok(m)
}

pub fn quadrant_masses(samples: &[[f64; 2]]) -> [f64; 4] {
    let mut m = [0.0; 4];
    for s in samples {
        m[quadrant(s)] += 1.0;
    }
    m.iter_mut().for_each(|x| *x /= samples.len().max(1) as f64);
    m
}

pub fn l1(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Gaussian-kernel mean shift on `points`; returns modes that attract at
/// least `min_share` of the points.
pub fn mean_shift_modes(points: &[[f64; 2]], bandwidth: f64, min_share: f64) -> Vec<[f64; 2]> {
    let inv = -0.5 / (bandwidth * bandwidth);
    let mut ends = Vec::with_capacity(points.len());
    for p in points {
        let mut x = *p;
        for _ in 0..200 {
            let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
            for q in points {
                let w = (inv * ((q[0] - x[0]).powi(2) + (q[1] - x[1]).powi(2))).exp();
                sx += w * q[0];
                sy += w * q[1];
                sw += w;
            }
            let nx = [sx / sw, sy / sw];
            let moved = (nx[0] - x[0]).hypot(nx[1] - x[1]);
            x = nx;
            if moved < 1e-5 {
                break;
            }
        }
        ends.push(x);
    }
    let mut modes: Vec<([f64; 2], usize)> = Vec::new();
    for e in ends {
        match modes
            .iter_mut()
            .find(|(m, _)| (m[0] - e[0]).hypot(m[1] - e[1]) < bandwidth / 2.0)
        {
            Some((_, c)) => *c += 1,
            None => modes.push((e, 1)),
        }
    }
    let need = (min_share * points.len() as f64).ceil() as usize;
    modes.into_iter().filter(|(_, c)| *c >= need).map(|(m, _)| m).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub seed: u64,
    pub mixture: GmmOldPolicy,
    pub preference: QuadrantPreference,
    pub generation_steps: usize,
    /// Linear σ schedule of the sampler, high noise first.
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub hidden: Vec<usize>,
    pub time_embed_dim: usize,
    pub prefit_iters: usize,
    pub prefit_batch: usize,
    pub prefit_lr: f64,
    /// Number of mirror-descent iterations `K`; each applies a tilt of
    /// `exp(A/(Kβ))`, so their composition targets `exp(A/β)`.
    pub md_iters: usize,
    pub paths_per_iter: usize,
    pub epochs: usize,
    pub minibatch: usize,
    pub lr: f64,
    pub max_grad_norm: f64,
    pub c_step: f64,
    pub c_path: f64,
    pub eval_samples: usize,
    /// Points written per sample CSV.
    pub plot_samples: usize,
    pub mode_samples: usize,
    pub mode_bandwidth: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mixture: GmmOldPolicy::default(),
            preference: QuadrantPreference::default(),
            generation_steps: 16,
            sigma_max: 3.0,
            sigma_min: 0.3,
            hidden: vec![64, 64],
            time_embed_dim: 16,
            prefit_iters: 3000,
            prefit_batch: 512,
            prefit_lr: 1e-3,
            md_iters: 8,
            paths_per_iter: 4096,
            epochs: 16,
            minibatch: 1024,
            lr: 1e-3,
            max_grad_norm: 1.0,
            c_step: 0.1,
            c_path: 0.4,
            eval_samples: 100_000,
            plot_samples: 5000,
            mode_samples: 2000,
            mode_bandwidth: 0.3,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        self.mixture.validate()?;
        self.preference.validate()?;
        let positive = [
            ("generation_steps", self.generation_steps as f64),
            ("sigma_max", self.sigma_max),
            ("sigma_min", self.sigma_min),
            ("prefit_batch", self.prefit_batch as f64),
            ("prefit_lr", self.prefit_lr),
            ("md_iters", self.md_iters as f64),
            ("paths_per_iter", self.paths_per_iter as f64),
            ("minibatch", self.minibatch as f64),
            ("lr", self.lr),
            ("eval_samples", self.eval_samples as f64),
            ("mode_bandwidth", self.mode_bandwidth),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config {
                    key: key.into(),
                    msg: format!("must be positive, got {v}"),
                });
            }
        }
        Ok(())
    }

    fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(ScheduleKind::Linear, self.sigma_max, self.sigma_min, self.generation_steps)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ToyIteration {
    pub iteration: usize,
    pub policy_loss: f64,
    pub drift_cost: f64,
    pub path_clip_frac: f64,
    pub masses: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ToyReport {
    pub old_masses: [f64; 4],
    pub target_masses: [f64; 4],
    pub prefit_masses: [f64; 4],
    pub learned_masses: [f64; 4],
    pub prefit_l1: f64,
    pub l1_error: f64,
    pub modes: Vec<[f64; 2]>,
    pub eval_samples: usize,
    pub history: Vec<ToyIteration>,
    #[serde(skip)]
    pub old_samples: Vec<[f64; 2]>,
    #[serde(skip)]
    pub target_samples: Vec<[f64; 2]>,
    #[serde(skip)]
    pub prefit_samples: Vec<[f64; 2]>,
    #[serde(skip)]
    pub learned_samples: Vec<[f64; 2]>,
}

impl ToyReport {
    pub fn mode_count(&self) -> usize {
        self.modes.len()
    }
}

const DUMMY_STATE: [f64; 1] = [0.0];

/// Drift-regression pre-fit on discrete Gaussian bridges from
/// `a⁽⁰⁾ ~ N(0, I)` to mixture samples. With step variances
/// `v_m = σ_m²Δt` and `S_n = Σ_{m<n} v_m`, the bridge marginal at step `n`
/// has mean `a⁽⁰⁾ + (S_n/S_N)(x − a⁽⁰⁾)` and variance `S_n(S_N − S_n)/S_N`,
/// and the regression target is `σ_n²(x − a_n)/(S_N − S_n)`.
pub fn prefit(field: &mut DriftField, cfg: &ToyConfig, sched: &NoiseSchedule) -> Result<f64> {
    let mut r = rng::stream(rng::sub_seed(cfg.seed, TAG_PREFIT), 0);
    let mut opt = AdamState::new(field.net.params());
    let sig = sched.step_sigmas()?;
    let mut cum = vec![0.0; sched.steps + 1];
    for n in 0..sched.steps {
        cum[n + 1] = cum[n] + sig[n] * sig[n] * sched.dt(n);
    }
    let total = cum[sched.steps];
    let b = cfg.prefit_batch;
    let mut last = f64::NAN;
    for it in 0..cfg.prefit_iters {
        let targets = cfg.mixture.sample(b, &mut r);
        let mut x = Vec::with_capacity(b * field.input_dim());
        let mut y = Vec::with_capacity(b * 2);
        for x1 in &targets {
            let n = r.random_range(0..sched.steps);
            let frac = cum[n] / total;
            let bridge_sd = (cum[n] * (total - cum[n]) / total).sqrt();
            let mut a = [0.0; 2];
            for k in 0..2 {
                let a0: f64 = r.sample(StandardNormal);
                let z: f64 = r.sample(StandardNormal);
                a[k] = a0 + frac * (x1[k] - a0) + bridge_sd * z;
            }
            field.push_input(&mut x, &DUMMY_STATE, &a, sched.time(n));
            y.extend((0..2).map(|k| sig[n] * sig[n] * (x1[k] - a[k]) / (total - cum[n])));
        }
        let mut tape = Tape::new();
        let xin = tape.constant(Array::matrix(b, field.input_dim(), x));
        let (out, vars) = field.net.forward_tape(&mut tape, xin)?;
        let tgt = tape.constant(Array::matrix(b, 2, y));
        let err = tape.sub(out, tgt);
        let sq = tape.square(err);
        let loss = tape.mean(sq);
        last = tape.value(loss).item();
        if !last.is_finite() {
            return Err(Error::NonFinite("pre-fit loss".into()));
        }
        let mut g = tape.backward(loss)?;
        let mut grads: Vec<Array> = vars.params.iter().map(|&v| g.take(v)).collect();
        clip_grad_norm(&mut grads, 10.0);
        let lr = diffcore::cosine_lr(cfg.prefit_lr, it as f64 / cfg.prefit_iters as f64)?;
        opt.step(&mut field.net.params_mut(), &grads, lr)?;
    }
    Ok(last)
}

/// Terminal actions of `n` freshly sampled paths, drawn in chunks.
pub fn sample_terminals(field: &DriftField, sched: &NoiseSchedule, n: usize, seed: u64) -> Result<Vec<[f64; 2]>> {
    const CHUNK: usize = 8192;
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let m = CHUNK.min(n - start);
        let states = Array::zeros(&[m, 1]);
        let mut rngs: Vec<Rng> = (start..start + m).map(|i| rng::stream(seed, i as u64)).collect();
        for p in sample_paths(field, sched, &states, &mut rngs)?.into_iter().flatten() {
            let t = p.terminal();
            out.push([t[0], t[1]]);
        }
        start += m;
    }
    Ok(out)
}

/// Runs one mirror-descent iteration: sample from the frozen current
/// policy, then several epochs of minibatch steps on the path objective.
fn md_iteration(
    field: &mut DriftField,
    opt: &mut AdamState,
    cfg: &ToyConfig,
    sched: &NoiseSchedule,
    iteration: usize,
) -> Result<ToyIteration> {
    let seed = rng::sub_seed(cfg.seed, TAG_ITER + 100 * iteration as u64);
    let states = Array::zeros(&[cfg.paths_per_iter, 1]);
    let mut rngs: Vec<Rng> = (0..cfg.paths_per_iter as u64).map(|i| rng::stream(seed, i)).collect();
    let paths: Vec<_> = sample_paths(field, sched, &states, &mut rngs)?.into_iter().flatten().collect();
    if paths.is_empty() {
        return Err(Error::EmptyBatch("toy paths"));
    }
    let mut adv: Vec<f64> = paths.iter().map(|p| cfg.preference.advantage(p.terminal())).collect();
    let mean = adv.iter().sum::<f64>() / adv.len() as f64;
    adv.iter_mut().for_each(|a| *a -= mean);

    let obj = ObjectiveConfig {
        kl_coef: cfg.md_iters as f64 * cfg.preference.beta,
        reference_mix: 0.0,
        normalize_advantages: false,
    };
    let clip = ClipConfig {
        c_step: cfg.c_step,
        c_path: cfg.c_path,
    };
    let mut order: Vec<usize> = (0..paths.len()).collect();
    let mut shuffle = rng::stream(seed, u64::MAX);
    let mut last = ToyIteration {
        iteration,
        policy_loss: 0.0,
        drift_cost: 0.0,
        path_clip_frac: 0.0,
        masses: [0.0; 4],
    };
    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(cfg.minibatch) {
            let batch = LossBatch {
                states: vec![&DUMMY_STATE[..]; chunk.len()],
                paths: chunk.iter().map(|&j| &paths[j]).collect(),
                advantages: chunk.iter().map(|&j| adv[j]).collect(),
            };
            let mut g = build_loss(field, &batch, sched, &obj, Some(&clip))?;
            last.policy_loss = g.stats.loss;
            last.drift_cost = g.stats.mean_drift_cost;
            last.path_clip_frac = g.stats.path_clip_frac;
            let mut gr = g.tape.backward(g.loss)?;
            let mut grads: Vec<Array> = g.vars.params.iter().map(|&v| gr.take(v)).collect();
            clip_grad_norm(&mut grads, cfg.max_grad_norm);
            opt.step(&mut field.net.params_mut(), &grads, cfg.lr)?;
        }
    }
    Ok(last)
}

pub fn run_toy(cfg: &ToyConfig) -> Result<ToyReport> {
    cfg.validate()?;
    let sched = cfg.schedule()?;
    let mut init = rng::stream(rng::sub_seed(cfg.seed, TAG_INIT), 0);
    let mut field = DriftField::new(1, 2, cfg.time_embed_dim, &cfg.hidden, Activation::Silu, 1.0, &mut init)?;

    prefit(&mut field, cfg, &sched)?;
    let eval_seed = rng::sub_seed(cfg.seed, TAG_EVAL);
    let prefit_samples = sample_terminals(&field, &sched, cfg.eval_samples, eval_seed)?;
    let prefit_masses = quadrant_masses(&prefit_samples);
    let prefit_l1 = l1(&prefit_masses, &cfg.mixture.weights);
    if prefit_l1 > 0.1 {
        return Err(Error::Invalid(format!(
            "pre-fit failed: quadrant-mass l1 {prefit_l1:.3} against the mixture exceeds 0.1"
        )));
    }

    let mut opt = AdamState::new(field.net.params());
    let mut history = Vec::with_capacity(cfg.md_iters);
    for k in 0..cfg.md_iters {
        let mut it = md_iteration(&mut field, &mut opt, cfg, &sched, k)?;
        it.masses = quadrant_masses(&sample_terminals(&field, &sched, 4096, eval_seed ^ (k as u64 + 1))?);
        log::info!(
            "toy iteration {k}: loss {:.4} drift cost {:.4} masses {:?}",
            it.policy_loss,
            it.drift_cost,
            it.masses
        );
        history.push(it);
    }

    let learned = sample_terminals(&field, &sched, cfg.eval_samples, eval_seed.wrapping_add(1))?;
    if learned.len() < cfg.eval_samples {
        return Err(Error::NonFinite(format!(
            "{} of {} evaluation paths", cfg.eval_samples - learned.len(), cfg.eval_samples
        )));
    }
    let learned_masses = quadrant_masses(&learned);
    let target_masses = tilted_quadrant_masses(&cfg.mixture.weights, &cfg.preference.weights)?;
    let stride = (learned.len() / cfg.mode_samples.max(1)).max(1);
    let mode_points: Vec<[f64; 2]> = learned.iter().step_by(stride).cloned().collect();
    let modes = mean_shift_modes(&mode_points, cfg.mode_bandwidth, 0.02);

    let mut r = rng::stream(eval_seed, u64::MAX);
    let old_samples = cfg.mixture.sample(cfg.plot_samples, &mut r);
    let target_samples = cfg.mixture.sample_weighted(&target_masses, cfg.plot_samples, &mut r);
    let keep = |v: &[[f64; 2]]| v.iter().take(cfg.plot_samples).cloned().collect::<Vec<_>>();
    Ok(ToyReport {
        old_masses: cfg.mixture.weights,
        target_masses,
        prefit_masses,
        learned_masses,
        prefit_l1,
        l1_error: l1(&learned_masses, &target_masses),
        modes,
        eval_samples: learned.len(),
        history,
        old_samples,
        target_samples,
        prefit_samples: keep(&prefit_samples),
        learned_samples: keep(&learned),
    })
}

/// Writes `masses.json`, `config.json` and one `samples_<set>.csv` per
/// sample set into `dir`.
pub fn write_toy_outputs(dir: &Path, cfg: &ToyConfig, rep: &ToyReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("masses.json"), serde_json::to_string_pretty(rep)?)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    let sets: [(&str, &[[f64; 2]]); 4] = [
        ("old", &rep.old_samples),
        ("target", &rep.target_samples),
        ("prefit", &rep.prefit_samples),
        ("learned", &rep.learned_samples),
    ];
    for (name, pts) in sets {
        let mut w = csv::Writer::from_path(dir.join(format!("samples_{name}.csv")))?;
        w.write_record(["x", "y", "quadrant"])?;
        for p in pts {
            w.write_record(&[p[0].to_string(), p[1].to_string(), (quadrant(p) + 1).to_string()])?;
        }
        w.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tilt_arithmetic() {
        let m = tilted_quadrant_masses(&[0.25; 4], &[1.0, 1.0, 1.0, 3.0]).unwrap();
        let want = [1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0, 0.5];
        assert!(l1(&m, &want) < 1e-15);
        let old = [0.1, 0.2, 0.3, 0.4];
        assert!(l1(&tilted_quadrant_masses(&old, &[2.5; 4]).unwrap(), &old) < 1e-15);
        assert!(tilted_quadrant_masses(&[0.5, 0.6, 0.0, 0.0], &[1.0; 4]).is_err());
        assert!(tilted_quadrant_masses(&[0.25; 4], &[1.0, 0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn tilt_is_shift_invariant() {
        let old = [0.1, 0.2, 0.3, 0.4];
        let pref = [1.2, 1.0, 3.0, 1.4];
        let shifted = pref.map(|w| w * 7.5);
        assert!(l1(&tilted_quadrant_masses(&old, &pref).unwrap(), &tilted_quadrant_masses(&old, &shifted).unwrap()) < 1e-15);
    }

    #[test]
    fn tilt_matches_quadrature() {
        let mut r = rng::stream(9, 0);
        for _ in 0..5 {
            let raw: Vec<f64> = (0..4).map(|_| r.random_range(0.1..1.0)).collect();
            let z: f64 = raw.iter().sum();
            let gmm = GmmOldPolicy {
                weights: [raw[0] / z, raw[1] / z, raw[2] / z, raw[3] / z],
                std: r.random_range(0.1..0.25),
                ..Default::default()
            };
            let pref = QuadrantPreference {
                weights: [0, 1, 2, 3].map(|_| r.random_range(0.5..3.0)),
                beta: 0.7,
            };
            let (n, lo, hi) = (600, -3.0, 3.0);
            let h = (hi - lo) / n as f64;
            let mut m = [0.0; 4];
            for i in 0..n {
                for j in 0..n {
                    let x = [lo + (i as f64 + 0.5) * h, lo + (j as f64 + 0.5) * h];
                    m[quadrant(&x)] += gmm.density(&x) * (pref.advantage(&x) / pref.beta).exp() * h * h;
                }
            }
            let z: f64 = m.iter().sum();
            m.iter_mut().for_each(|x| *x /= z);
            let closed = tilted_quadrant_masses(&gmm.weights, &pref.weights).unwrap();
            for k in 0..4 {
                assert!((m[k] - closed[k]).abs() < 1e-3, "{m:?} vs {closed:?}");
            }
        }
    }

    #[test]
    fn defaults_favor_the_third_quadrant() {
        let p = QuadrantPreference::default();
        let best = (0..4).max_by(|&a, &b| p.weights[a].total_cmp(&p.weights[b])).unwrap();
        assert_eq!(best, 2);
        assert_eq!(quadrant(&[-1.0, -1.0]), 2);
        ToyConfig::default().validate().unwrap();
    }

    #[test]
    fn validation_rejects_bad_mixtures() {
        let mut g = GmmOldPolicy::default();
        g.means[1] = [2.0, 2.0];
        assert!(g.validate().is_err());
        let g = GmmOldPolicy {
            weights: [0.5; 4],
            ..Default::default()
        };
        assert!(g.validate().is_err());
        let cfg: std::result::Result<ToyConfig, _> = serde_json::from_str(r#"{"bogus": 1}"#);
        assert!(cfg.is_err());
    }

    #[test]
    fn mean_shift_finds_four_blobs() {
        let mut r = rng::stream(10, 0);
        let pts = GmmOldPolicy::default().sample(800, &mut r);
        assert_eq!(mean_shift_modes(&pts, 0.3, 0.02).len(), 4);
        let one: Vec<[f64; 2]> = pts.iter().filter(|p| quadrant(*p) == 2).cloned().collect();
        assert_eq!(mean_shift_modes(&one, 0.3, 0.02).len(), 1);
    }

    #[test]
    fn empirical_masses_track_weights() {
        let mut r = rng::stream(11, 0);
        let g = GmmOldPolicy {
            weights: [0.1, 0.2, 0.3, 0.4],
            ..Default::default()
        };
        let m = quadrant_masses(&g.sample(100_000, &mut r));
        assert!(l1(&m, &g.weights) < 0.02);
    }
}
