//! Diagonal Gaussian policy trained with the clipped PPO surrogate.

use diffcore::{Activation, Array, Mlp, Tape, Var};
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::genpolicy::LN_2PI;
use crate::rng::Rng;
use crate::{Error, Result};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// State-dependent mean, state-independent log standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianActor {
    pub mean: Mlp,
    /// `[1, d]`; clamped to `[LOG_STD_MIN, LOG_STD_MAX]` wherever it is used.
    pub log_std: Array,
}

impl GaussianActor {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        activation: Activation,
        output_scale: f64,
        rng: &mut Rng,
    ) -> Self {
        let mut widths = vec![state_dim];
        widths.extend_from_slice(hidden);
        widths.push(action_dim);
        Self {
            mean: Mlp::new(&widths, activation, output_scale, rng),
            log_std: Array::zeros(&[1, action_dim]),
        }
    }

    pub fn action_dim(&self) -> usize {
        self.mean.output_dim()
    }

    pub fn params(&self) -> Vec<&Array> {
        let mut p = self.mean.params();
        p.push(&self.log_std);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array> {
        let mut p = self.mean.params_mut();
        p.push(&mut self.log_std);
        p
    }

    pub fn clamped_log_std(&self) -> Vec<f64> {
        self.log_std
            .data()
            .iter()
            .map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX))
            .collect()
    }

    pub fn means(&self, states: &Array) -> Result<Array> {
        Ok(self.mean.forward(states)?)
    }

    /// One action per state row with its log density, row `i` drawing from
    /// `rngs[i]`.
    pub fn sample(&self, states: &Array, rngs: &mut [Rng]) -> Result<Vec<(Vec<f64>, f64)>> {
        if rngs.len() != states.rows() {
            return Err(Error::len("rng streams", states.rows(), rngs.len()));
        }
        let means = self.means(states)?;
        let ls = self.clamped_log_std();
        Ok(rngs
            .iter_mut()
            .enumerate()
            .map(|(i, r)| {
                let mu = means.row_slice(i);
                let a: Vec<f64> = mu
                    .iter()
                    .zip(&ls)
                    .map(|(m, l)| m + l.exp() * r.sample::<f64, _>(StandardNormal))
                    .collect();
                let lp = gaussian_logp(mu, &ls, &a);
                (a, lp)
            })
            .collect())
    }
}

/// Diagonal normal log density with the given mean and log std.
pub fn gaussian_logp(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(action)
        .map(|((m, l), a)| {
            let z = (a - m) * (-l).exp();
            -0.5 * z * z - l - 0.5 * LN_2PI
        })
        .sum()
}

/// `mean(−min(r·A, clip(r, 1 − ε, 1 + ε)·A))` with `r = exp(new − old)`.
pub fn ppo_loss(logp_new: &[f64], logp_old: &[f64], adv: &[f64], eps_clip: f64) -> Result<f64> {
    if adv.is_empty() {
        return Err(Error::EmptyBatch("ppo_loss"));
    }
    if logp_new.len() != adv.len() || logp_old.len() != adv.len() {
        return Err(Error::len("ppo batch", adv.len(), logp_new.len().min(logp_old.len())));
    }
    let total: f64 = logp_new
        .iter()
        .zip(logp_old)
        .zip(adv)
        .map(|((n, o), a)| {
            let r = (n - o).exp();
            -(r * a).min(r.clamp(1.0 - eps_clip, 1.0 + eps_clip) * a)
        })
        .sum();
    Ok(total / adv.len() as f64)
}

pub struct PpoGraph {
    pub tape: Tape,
    pub loss: Var,
    /// Mean-network parameters followed by the log std.
    pub params: Vec<Var>,
    pub loss_value: f64,
    pub clip_frac: f64,
    pub mean_abs_log_ratio: f64,
}

/// Records the log density of `actions` under `actor` as a `[B, 1]` node.
fn record_logp(
    tape: &mut Tape,
    actor: &GaussianActor,
    states: &Array,
    actions: &Array,
) -> Result<(Var, Vec<Var>)> {
    let b = states.rows();
    let d = actor.action_dim();
    let x = tape.constant(states.clone());
    let (mu, vars) = actor.mean.forward_tape(tape, x)?;
    let ls = tape.param(actor.log_std.clone());
    let lsc = tape.clip(ls, LOG_STD_MIN, LOG_STD_MAX);
    let lsb = tape.broadcast_rows(lsc, b);
    let neg = tape.scale(lsb, -1.0);
    let inv_std = tape.exp(neg);
    let a = tape.constant(actions.clone());
    let diff = tape.sub(a, mu);
    let z = tape.mul(diff, inv_std);
    let z2 = tape.square(z);
    let half = tape.scale(z2, -0.5);
    let terms = tape.sub(half, lsb);
    let summed = tape.sum_last(terms);
    let logp = tape.offset(summed, -0.5 * d as f64 * LN_2PI);
    let mut params = vars.params;
    params.push(ls);
    Ok((logp, params))
}

pub fn ppo_loss_graph(
    actor: &GaussianActor,
    states: &Array,
    actions: &Array,
    logp_old: &[f64],
    adv: &[f64],
    eps_clip: f64,
) -> Result<PpoGraph> {
    let b = states.rows();
    if b == 0 {
        return Err(Error::EmptyBatch("ppo_loss"));
    }
    if actions.rows() != b || logp_old.len() != b || adv.len() != b {
        return Err(Error::len("ppo batch", b, actions.rows().min(logp_old.len()).min(adv.len())));
    }
    let mut tape = Tape::new();
    let (logp, params) = record_logp(&mut tape, actor, states, actions)?;
    let old = tape.constant(Array::matrix(b, 1, logp_old.to_vec()));
    let log_ratio = tape.sub(logp, old);
    let lr_vals = tape.value(log_ratio).data().to_vec();
    let ratio = tape.exp(log_ratio);
    let adv_v = tape.constant(Array::matrix(b, 1, adv.to_vec()));
    let unclipped = tape.mul(ratio, adv_v);
    let clipped = tape.clip(ratio, 1.0 - eps_clip, 1.0 + eps_clip);
    let clipped = tape.mul(clipped, adv_v);
    let obj = tape.minimum(unclipped, clipped);
    let mean = tape.mean(obj);
    let loss = tape.scale(mean, -1.0);
    let loss_value = tape.value(loss).item();
    if !loss_value.is_finite() {
        return Err(Error::NonFinite("ppo loss".into()));
    }
    let clip_frac = lr_vals
        .iter()
        .filter(|l| (l.exp() - 1.0).abs() > eps_clip)
        .count() as f64
        / b as f64;
    let mean_abs_log_ratio = lr_vals.iter().map(|l| l.abs()).sum::<f64>() / b as f64;
    Ok(PpoGraph {
        tape,
        loss,
        params,
        loss_value,
        clip_frac,
        mean_abs_log_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn logp_reference_values() {
        let mode = gaussian_logp(&[0.3], &[0.0], &[0.3]);
        assert!((mode + 0.5 * LN_2PI).abs() < 1e-15);
        let one_sd = gaussian_logp(&[0.3], &[0.0], &[1.3]);
        assert!((one_sd - (mode - 0.5)).abs() < 1e-15);
    }

    #[test]
    fn logp_matches_direct_density() {
        let mean = [0.1, -0.4, 2.0];
        let ls = [-0.3, 0.2, -1.1];
        let a = [0.5, 0.0, 1.7];
        let direct: f64 = (0..3)
            .map(|i| {
                let s = f64::exp(ls[i]);
                let z = (a[i] - mean[i]) / s;
                (-(z * z) / 2.0).exp().ln() - (s * (2.0 * std::f64::consts::PI).sqrt()).ln()
            })
            .sum();
        assert!((gaussian_logp(&mean, &ls, &a) - direct).abs() < 1e-12);
    }

    #[test]
    fn ppo_loss_cases() {
        assert_eq!(ppo_loss(&[0.0], &[0.0], &[1.0], 0.2).unwrap(), -1.0);
        let r2 = 2f64.ln();
        assert!((ppo_loss(&[r2], &[0.0], &[1.0], 0.2).unwrap() + 1.2).abs() < 1e-12);
        let r05 = 0.5f64.ln();
        assert!((ppo_loss(&[r05], &[0.0], &[-1.0], 0.2).unwrap() - 0.8).abs() < 1e-12);
        assert!(ppo_loss(&[], &[], &[], 0.2).is_err());
    }

    #[test]
    fn ppo_loss_is_pessimistic() {
        use rand::Rng as _;
        let mut rng = stream(1, 0);
        for _ in 0..200 {
            let n: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let o: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
            let clipped = ppo_loss(&n, &o, &a, 0.2).unwrap();
            let plain: f64 = -(0..8).map(|i| (n[i] - o[i]).exp() * a[i]).sum::<f64>() / 8.0;
            assert!(clipped >= plain - 1e-12);
        }
    }

    #[test]
    fn graph_value_matches_scalar_loss_and_logp() {
        let mut rng = stream(2, 0);
        let mut actor = GaussianActor::new(3, 2, &[5], Activation::Tanh, 1.0, &mut rng);
        actor.log_std = Array::row(vec![-0.4, 0.3]);
        let states = Array::matrix(4, 3, (0..12).map(|i| (i as f64 * 0.37).sin()).collect());
        let sampled = actor.sample(&states, &mut (0..4).map(|i| stream(3, i)).collect::<Vec<_>>()).unwrap();
        let actions = Array::matrix(4, 2, sampled.iter().flat_map(|(a, _)| a.clone()).collect());
        let old: Vec<f64> = sampled.iter().map(|(_, l)| l - 0.1).collect();
        let adv = vec![1.0, -0.5, 0.2, 2.0];
        let g = ppo_loss_graph(&actor, &states, &actions, &old, &adv, 0.2).unwrap();
        let new: Vec<f64> = sampled.iter().map(|(_, l)| *l).collect();
        assert!((g.loss_value - ppo_loss(&new, &old, &adv, 0.2).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn wide_clip_gradient_equals_vanilla_policy_gradient() {
        let mut rng = stream(4, 0);
        let actor = GaussianActor::new(2, 2, &[6], Activation::Tanh, 1.0, &mut rng);
        let states = Array::matrix(5, 2, (0..10).map(|i| (i as f64).cos()).collect());
        let mut rngs: Vec<Rng> = (0..5).map(|i| stream(5, i)).collect();
        let sampled = actor.sample(&states, &mut rngs).unwrap();
        let actions = Array::matrix(5, 2, sampled.iter().flat_map(|(a, _)| a.clone()).collect());
        let old: Vec<f64> = sampled.iter().map(|(_, l)| *l).collect();
        let adv = vec![0.3, -1.0, 0.8, 1.5, -0.2];

        let mut g = ppo_loss_graph(&actor, &states, &actions, &old, &adv, 1e9).unwrap();
        let gr = g.tape.backward(g.loss).unwrap();
        let ppo: Vec<Array> = g.params.iter().map(|&v| gr.wrt(v)).collect();

        let mut tape = Tape::new();
        let (logp, params) = record_logp(&mut tape, &actor, &states, &actions).unwrap();
        let a = tape.constant(Array::matrix(5, 1, adv));
        let w = tape.mul(logp, a);
        let m = tape.mean(w);
        let loss = tape.scale(m, -1.0);
        let gv = tape.backward(loss).unwrap();
        for (p, &v) in ppo.iter().zip(&params) {
            let van = gv.wrt(v);
            for (x, y) in p.data().iter().zip(van.data()) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn log_std_is_clamped() {
        let mut rng = stream(6, 0);
        let mut actor = GaussianActor::new(1, 1, &[2], Activation::Tanh, 1.0, &mut rng);
        actor.log_std = Array::row(vec![9.0]);
        assert_eq!(actor.clamped_log_std(), vec![LOG_STD_MAX]);
    }
}
