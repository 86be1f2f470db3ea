//! Value function, generalized advantage estimation and running observation
//! statistics.

use diffcore::{Activation, Array, Mlp, MlpVars, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaeConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
}

impl GaeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::range("gamma", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::range("gae_lambda", self.gae_lambda));
        }
        Ok(())
    }
}

impl Default for GaeConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
        }
    }
}

/// Advantages and returns for one trajectory segment. `values` carries the
/// bootstrap value as its last entry; a terminal at step t stops both the
/// bootstrap and the credit flowing back past it.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    cfg: &GaeConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let t_len = rewards.len();
    if values.len() != t_len + 1 {
        return Err(Error::len("values", t_len + 1, values.len()));
    }
    if dones.len() != t_len {
        return Err(Error::len("terminal flags", t_len, dones.len()));
    }
    cfg.validate()?;
    let mut adv = vec![0.0; t_len];
    let mut next = 0.0;
    for t in (0..t_len).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + cfg.gamma * live * values[t + 1] - values[t];
        next = delta + cfg.gamma * cfg.gae_lambda * live * next;
        adv[t] = next;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValueNet {
    pub net: Mlp,
}

impl ValueNet {
    pub fn new(state_dim: usize, hidden: &[usize], activation: Activation, rng: &mut Rng) -> Self {
        let mut widths = vec![state_dim];
        widths.extend_from_slice(hidden);
        widths.push(1);
        Self {
            net: Mlp::new(&widths, activation, 1.0, rng),
        }
    }

    pub fn predict(&self, states: &Array) -> Result<Vec<f64>> {
        Ok(self.net.forward(states)?.into_data())
    }
}

/// Records `mean((V(s) − target)²)`.
pub fn value_loss_graph(
    net: &ValueNet,
    states: &Array,
    returns: &[f64],
) -> Result<(Tape, Var, MlpVars)> {
    if returns.is_empty() {
        return Err(Error::EmptyBatch("value_loss"));
    }
    if states.rows() != returns.len() {
        return Err(Error::len("value targets", states.rows(), returns.len()));
    }
    let mut tape = Tape::new();
    let x = tape.constant(states.clone());
    let (v, vars) = net.net.forward_tape(&mut tape, x)?;
    let target = tape.constant(Array::matrix(returns.len(), 1, returns.to_vec()));
    let err = tape.sub(v, target);
    let sq = tape.square(err);
    let loss = tape.mean(sq);
    if !tape.value(loss).is_finite() {
        return Err(Error::NonFinite("value loss".into()));
    }
    Ok((tape, loss, vars))
}

pub fn value_loss(net: &ValueNet, states: &Array, returns: &[f64]) -> Result<f64> {
    let (tape, loss, _) = value_loss_graph(net, states, returns)?;
    Ok(tape.value(loss).item())
}

/// Per-dimension streaming mean and population variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningNormalizer {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: f64,
}

impl RunningNormalizer {
    pub const CLIP: f64 = 10.0;

    pub fn new(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
            count: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Merges a batch of rows using the pairwise (Chan) moment update.
    pub fn update(&mut self, rows: &[&[f64]]) -> Result<()> {
        if rows.is_empty() {
            return Ok(());
        }
        let dim = self.dim();
        if let Some(r) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::len("observation", dim, r.len()));
        }
        let nb = rows.len() as f64;
        for k in 0..dim {
            let bm = rows.iter().map(|r| r[k]).sum::<f64>() / nb;
            let bv = rows.iter().map(|r| (r[k] - bm).powi(2)).sum::<f64>() / nb;
            if self.count == 0.0 {
                self.mean[k] = bm;
                self.var[k] = bv;
                continue;
            }
            let total = self.count + nb;
            let delta = bm - self.mean[k];
            let m2 = self.var[k] * self.count + bv * nb + delta * delta * self.count * nb / total;
            self.mean[k] += delta * nb / total;
            self.var[k] = m2 / total;
        }
        self.count += nb;
        Ok(())
    }

    pub fn normalize(&self, obs: &[f64]) -> Result<Vec<f64>> {
        if obs.len() != self.dim() {
            return Err(Error::len("observation", self.dim(), obs.len()));
        }
        if self.count == 0.0 {
            return Ok(obs.to_vec());
        }
        Ok(obs
            .iter()
            .zip(&self.mean)
            .zip(&self.var)
            .map(|((x, m), v)| ((x - m) / (v + 1e-8).sqrt()).clamp(-Self::CLIP, Self::CLIP))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng as _;

    fn cfg(gamma: f64, lam: f64) -> GaeConfig {
        GaeConfig {
            gamma,
            gae_lambda: lam,
        }
    }

    #[test]
    fn gae_cases() {
        let (a, _) = gae(&[0.0; 4], &[0.0; 5], &[false; 4], &cfg(0.99, 0.95)).unwrap();
        assert!(a.iter().all(|&v| v == 0.0));
        let (a, r) = gae(&[1.0, 1.0], &[0.0; 3], &[false; 2], &cfg(0.5, 1.0)).unwrap();
        assert_eq!(a, vec![1.5, 1.0]);
        assert_eq!(r, a);
        assert!(gae(&[1.0], &[0.0], &[false], &cfg(0.5, 1.0)).is_err());
    }

    #[test]
    fn gae_lambda_zero_is_td_error() {
        let rewards = [0.3, -1.0, 2.0];
        let values = [0.5, 0.1, -0.4, 0.9];
        let dones = [false, true, false];
        let c = cfg(0.9, 0.0);
        let (a, _) = gae(&rewards, &values, &dones, &c).unwrap();
        for t in 0..3 {
            let live = if dones[t] { 0.0 } else { 1.0 };
            assert_eq!(a[t], rewards[t] + 0.9 * live * values[t + 1] - values[t]);
        }
    }

    #[test]
    fn gae_reduces_to_discounted_reward_to_go() {
        let mut rng = stream(1, 0);
        let rewards: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (a, _) = gae(&rewards, &[0.0; 31], &[false; 30], &cfg(0.97, 1.0)).unwrap();
        for t in 0..30 {
            let direct: f64 = (t..30).map(|k| 0.97f64.powi((k - t) as i32) * rewards[k]).sum();
            assert!((a[t] - direct).abs() < 1e-10);
        }
    }

    #[test]
    fn terminals_block_credit() {
        let mut rewards = vec![1.0, 0.5, -0.2, 3.0, 1.0];
        let values = vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let dones = vec![false, false, true, false, false];
        let (a1, _) = gae(&rewards, &values, &dones, &cfg(0.99, 0.95)).unwrap();
        rewards[3] = -50.0;
        rewards[4] = 17.0;
        let (a2, _) = gae(&rewards, &values, &dones, &cfg(0.99, 0.95)).unwrap();
        assert_eq!(&a1[..3], &a2[..3]);
    }

    #[test]
    fn value_loss_cases() {
        let mut rng = stream(2, 0);
        let mut v = ValueNet::new(2, &[4], Activation::Elu, &mut rng);
        for p in v.net.params_mut() {
            p.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let s = Array::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(value_loss(&v, &s, &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(value_loss(&v, &s, &[1.0, -1.0]).unwrap(), 1.0);
        assert!(value_loss(&v, &Array::zeros(&[1, 2]), &[]).is_err());
    }

    #[test]
    fn value_gradient_matches_finite_differences() {
        let mut rng = stream(3, 0);
        let v = ValueNet::new(3, &[5, 5], Activation::Elu, &mut rng);
        let s = Array::matrix(4, 3, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect());
        let targets: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (mut tape, loss, vars) = value_loss_graph(&v, &s, &targets).unwrap();
        let g = tape.backward(loss).unwrap();
        let h = 1e-5;
        for (pi, &var) in vars.params.iter().enumerate() {
            let ga = g.wrt(var);
            for j in 0..ga.len() {
                let eval = |d: f64| {
                    let mut vv = v.clone();
                    vv.net.params_mut()[pi].data_mut()[j] += d;
                    value_loss(&vv, &s, &targets).unwrap()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let a = ga.data()[j];
                let err = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
                assert!(err < 1e-4 || (fd - a).abs() < 1e-9, "{a} vs {fd}");
            }
        }
    }

    #[test]
    fn normalizer_cases() {
        let fresh = RunningNormalizer::new(2);
        assert_eq!(fresh.normalize(&[3.0, -7.0]).unwrap(), vec![3.0, -7.0]);
        let mut n = RunningNormalizer::new(1);
        n.update(&[&[1.0], &[3.0]]).unwrap();
        assert_eq!((n.mean[0], n.var[0]), (2.0, 1.0));
        assert_eq!(n.normalize(&[2.0]).unwrap(), vec![0.0]);
        assert_eq!(n.normalize(&[1e6]).unwrap(), vec![10.0]);
        assert!(n.normalize(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn streaming_matches_two_pass() {
        let mut rng = stream(4, 0);
        let xs: Vec<f64> = (0..10_000).map(|_| rng.random_range(-3.0..5.0)).collect();
        let mut n = RunningNormalizer::new(1);
        for chunk in xs.chunks(97) {
            let rows: Vec<&[f64]> = chunk.iter().map(std::slice::from_ref).collect();
            n.update(&rows).unwrap();
        }
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!((n.mean[0] - mean).abs() < 1e-9);
        assert!((n.var[0] - var).abs() < 1e-9);
        assert_eq!(n.count, 10_000.0);
    }
}
