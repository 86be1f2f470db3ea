use sha2::{Digest, Sha256};

use crate::critic::{gae, GaeConfig};
use crate::genpolicy::GenerationPath;
use crate::pathobj::normalize_advantages;
use crate::Result;

/// One on-policy iteration of transitions, stored time-major
/// (`index = t · num_envs + env`).
#[derive(Clone, Debug)]
pub struct RolloutBuffer {
    /// Iteration that collected this data; an update only accepts the
    /// buffer of the current iteration, once.
    pub generation: u64,
    pub num_envs: usize,
    pub rollout_length: usize,
    /// Digest of the actor parameters that generated the data.
    pub policy_hash: String,
    /// Normalized observations, as seen by the policy when acting.
    pub obs: Vec<Vec<f64>>,
    /// Generation paths of the generative actor; `None` when the path turned
    /// non-finite or the actor is the Gaussian baseline.
    pub paths: Vec<Option<GenerationPath>>,
    /// Sampled actions before clipping to the action box.
    pub actions: Vec<Vec<f64>>,
    /// Gaussian baseline log densities of `actions`.
    pub logp_old: Vec<f64>,
    /// Rewards, with `γ·V(final obs)` added on time-limit truncations.
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub values: Vec<f64>,
    /// `V` of the observation following the last stored step, per env.
    pub last_values: Vec<f64>,
    /// Transitions usable for the actor loss.
    pub valid: Vec<bool>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub(crate) consumed: bool,
}

impl RolloutBuffer {
    pub fn new(generation: u64, num_envs: usize, rollout_length: usize, policy_hash: String) -> Self {
        let cap = num_envs * rollout_length;
        Self {
            generation,
            num_envs,
            rollout_length,
            policy_hash,
            obs: Vec::with_capacity(cap),
            paths: Vec::with_capacity(cap),
            actions: Vec::with_capacity(cap),
            logp_old: Vec::with_capacity(cap),
            rewards: Vec::with_capacity(cap),
            dones: Vec::with_capacity(cap),
            values: Vec::with_capacity(cap),
            last_values: Vec::new(),
            valid: Vec::with_capacity(cap),
            advantages: Vec::new(),
            returns: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.len() == self.num_envs * self.rollout_length
    }

    /// Per-env GAE, then (optionally) batch-wide advantage normalization
    /// over the valid transitions.
    pub fn compute_advantages(&mut self, cfg: &GaeConfig, normalize: bool) -> Result<()> {
        let (e, t_len) = (self.num_envs, self.rollout_length);
        let n = self.len();
        self.advantages = vec![0.0; n];
        self.returns = vec![0.0; n];
        for i in 0..e {
            let idx: Vec<usize> = (0..t_len).map(|t| t * e + i).collect();
            let r: Vec<f64> = idx.iter().map(|&j| self.rewards[j]).collect();
            let d: Vec<bool> = idx.iter().map(|&j| self.dones[j]).collect();
            let mut v: Vec<f64> = idx.iter().map(|&j| self.values[j]).collect();
            v.push(self.last_values[i]);
            let (adv, ret) = gae(&r, &v, &d, cfg)?;
            for (k, &j) in idx.iter().enumerate() {
                self.advantages[j] = adv[k];
                self.returns[j] = ret[k];
            }
        }
        if normalize {
            let mut a: Vec<f64> = (0..n).filter(|&j| self.valid[j]).map(|j| self.advantages[j]).collect();
            normalize_advantages(&mut a);
            let mut it = a.into_iter();
            for j in 0..n {
                if self.valid[j] {
                    self.advantages[j] = it.next().unwrap();
                }
            }
        }
        Ok(())
    }

    /// Digest of everything the ratio denominators and anchors depend on.
    pub fn old_policy_digest(&self) -> String {
        let mut h = Sha256::new();
        for p in self.paths.iter().flatten() {
            for v in p.nodes.iter().chain(&p.old_drifts).chain(&p.old_logp) {
                h.update(v.to_le_bytes());
            }
        }
        for v in &self.logp_old {
            h.update(v.to_le_bytes());
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
