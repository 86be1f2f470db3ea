//! The on-policy loop: collect generation paths under the current policy,
//! estimate advantages, run minibatched epochs over the stored paths, log
//! diagnostics, evaluate, checkpoint.

mod buffer;
mod metrics;

use std::path::{Path, PathBuf};
use std::time::Instant;

use diffcore::{clip_grad_norm, cosine_lr, AdamState, Array, Checkpoint, DiffError};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::baseline::{ppo_loss_graph, GaussianActor};
use crate::config::{Algo, LrSchedule, RunConfig};
use crate::critic::{value_loss_graph, RunningNormalizer, ValueNet};
use crate::envs::{multigoal_mode, EnvKind, VecEnv, VecEnvState};
use crate::genpolicy::{ode_actions, sample_paths, DriftField, NoiseSchedule};
use crate::pathobj::{build_loss, LossBatch};
use crate::rng::{self, sub_seed, Rng, RngState};
use crate::{Error, Result};

pub use buffer::RolloutBuffer;
pub use metrics::{read_csv, read_jsonl, MetricsRow, MetricsWriter, COLUMNS};

const TAG_POLICY: u64 = 2;
const TAG_INIT: u64 = 3;
const TAG_SHUFFLE: u64 = 4;
const TAG_EVAL: u64 = 5;

const BUNDLE_FORMAT: &str = "gsbmdpo-bundle-1";

/// The policy being trained.
#[derive(Clone, Debug, PartialEq)]
pub enum Actor {
    Gsb(DriftField),
    Ppo(GaussianActor),
}

impl Actor {
    pub fn new(cfg: &RunConfig, rng: &mut Rng) -> Result<Self> {
        let spec = cfg.env.spec();
        Ok(match cfg.algo {
            Algo::GsbMdpo => Actor::Gsb(DriftField::new(
                spec.state_dim,
                spec.action_dim,
                cfg.time_embed_dim,
                &cfg.actor_hidden,
                cfg.actor_activation(),
                cfg.output_scale,
                rng,
            )?),
            Algo::Ppo => Actor::Ppo(GaussianActor::new(
                spec.state_dim,
                spec.action_dim,
                &cfg.actor_hidden,
                cfg.actor_activation(),
                cfg.output_scale,
                rng,
            )),
        })
    }

    pub fn params(&self) -> Vec<&Array> {
        match self {
            Actor::Gsb(f) => f.net.params(),
            Actor::Ppo(g) => g.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array> {
        match self {
            Actor::Gsb(f) => f.net.params_mut(),
            Actor::Ppo(g) => g.params_mut(),
        }
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params() {
            for v in p.data() {
                h.update(v.to_le_bytes());
            }
        }
        buffer::hex(&h.finalize())
    }

    /// One action per row of normalized `states`; `None` where generation
    /// broke down numerically.
    pub fn act(
        &self,
        sched: &NoiseSchedule,
        states: &Array,
        rngs: &mut [Rng],
        deterministic: bool,
    ) -> Result<Vec<Option<Vec<f64>>>> {
        match self {
            Actor::Gsb(f) if deterministic => ode_actions(f, sched, states, rngs),
            Actor::Gsb(f) => Ok(sample_paths(f, sched, states, rngs)?
                .into_iter()
                .map(|p| p.map(|p| p.terminal().to_vec()))
                .collect()),
            Actor::Ppo(g) if deterministic => {
                let m = g.means(states)?;
                Ok((0..states.rows()).map(|i| Some(m.row_slice(i).to_vec())).collect())
            }
            Actor::Ppo(g) => Ok(g.sample(states, rngs)?.into_iter().map(|(a, _)| Some(a)).collect()),
        }
    }
}

fn rows_to_array(rows: &[Vec<f64>]) -> Array {
    let cols = rows.first().map_or(0, Vec::len);
    Array::matrix(rows.len(), cols, rows.concat())
}

fn normalize_rows(
    norm: &RunningNormalizer,
    rows: &[Vec<f64>],
    enabled: bool,
) -> Result<Vec<Vec<f64>>> {
    if !enabled {
        return Ok(rows.to_vec());
    }
    rows.iter().map(|r| norm.normalize(r)).collect()
}

fn is_numerical_breakdown(e: &Error) -> bool {
    matches!(e, Error::NonFinite(_) | Error::Diff(DiffError::NonFinite(_)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub mean_return: f64,
    pub mean_length: f64,
    /// Mean goal distance at episode end, for goal-reaching tasks.
    pub final_distance: Option<f64>,
    pub returns: Vec<f64>,
}

/// Runs one episode in each of `episodes` fresh instances seeded by `seed`.
pub fn evaluate(
    actor: &Actor,
    normalizer: &RunningNormalizer,
    normalize: bool,
    sched: &NoiseSchedule,
    kind: EnvKind,
    episodes: usize,
    deterministic: bool,
    seed: u64,
) -> Result<EvalResult> {
    if episodes == 0 {
        return Err(Error::range("evaluation episodes", 0.0));
    }
    let mut env = VecEnv::new(kind, episodes, seed);
    let mut rngs: Vec<Rng> = (0..episodes as u64)
        .map(|i| rng::stream(sub_seed(seed, TAG_POLICY), i))
        .collect();
    let d = kind.spec().action_dim;
    let mut ret = vec![0.0; episodes];
    let mut len = vec![0usize; episodes];
    let mut finished: Vec<Option<Option<f64>>> = vec![None; episodes];
    while finished.iter().any(Option::is_none) {
        let obs = normalize_rows(normalizer, &env.observations(), normalize)?;
        let actions: Vec<Vec<f64>> = actor
            .act(sched, &rows_to_array(&obs), &mut rngs, deterministic)?
            .into_iter()
            .map(|a| a.unwrap_or_else(|| vec![0.0; d]))
            .collect();
        let r = env.step(&actions)?;
        for i in 0..episodes {
            if finished[i].is_some() {
                continue;
            }
            ret[i] += r.rewards[i];
            len[i] += 1;
            if r.terminated[i] || r.truncated[i] {
                finished[i] = Some(r.final_distance[i]);
            }
        }
    }
    let n = episodes as f64;
    let dists: Vec<f64> = finished.iter().filter_map(|f| f.flatten()).collect();
    Ok(EvalResult {
        mean_return: ret.iter().sum::<f64>() / n,
        mean_length: len.iter().sum::<usize>() as f64 / n,
        final_distance: (!dists.is_empty()).then(|| dists.iter().sum::<f64>() / dists.len() as f64),
        returns: ret,
    })
}

/// `n` actions drawn for the same raw observation.
pub fn sample_actions_at(
    actor: &Actor,
    normalizer: &RunningNormalizer,
    normalize: bool,
    sched: &NoiseSchedule,
    obs: &[f64],
    n: usize,
    deterministic: bool,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let rows = normalize_rows(normalizer, &vec![obs.to_vec(); n], normalize)?;
    let mut rngs: Vec<Rng> = (0..n as u64).map(|i| rng::stream(seed, i)).collect();
    Ok(actor
        .act(sched, &rows_to_array(&rows), &mut rngs, deterministic)?
        .into_iter()
        .flatten()
        .collect())
}

/// Share of `n` stochastic actions at the MultiGoalReach start that land
/// within `radius` of each goal. From the origin the first action is the
/// displacement, so these are the goals the policy heads for.
pub fn goal_mode_shares(t: &Trainer, n: usize, radius: f64, seed: u64) -> Result<[f64; 4]> {
    if t.cfg.env != EnvKind::MultiGoalReach {
        return Err(Error::Invalid(format!("goal modes are defined for MultiGoalReach, not {}", t.cfg.env)));
    }
    let obs = VecEnv::new(EnvKind::MultiGoalReach, 1, seed).observations().remove(0);
    let actions = sample_actions_at(
        &t.actor,
        &t.normalizer,
        t.cfg.normalize_observations,
        &t.sched,
        &obs,
        n,
        false,
        seed,
    )?;
    let mut shares = [0.0; 4];
    for a in &actions {
        if let Some(k) = multigoal_mode(a, radius) {
            shares[k] += 1.0 / n as f64;
        }
    }
    Ok(shares)
}

/// Per-iteration rollout summary.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CollectStats {
    pub episode_returns: Vec<f64>,
    pub episode_lengths: Vec<usize>,
    pub final_distances: Vec<f64>,
    pub nonfinite_paths: u64,
    pub mean_step_reward: f64,
}

/// Averages over the minibatch steps of one update.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub drift_cost: f64,
    pub step_clip_frac: f64,
    pub path_clip_frac: f64,
    pub mean_abs_path_log_ratio: f64,
    pub actor_grad_norm: f64,
    /// Pre-clip actor gradient norm at the first minibatch.
    pub first_actor_grad_norm: f64,
    pub learning_rate: f64,
    pub minibatch_steps: usize,
    pub aborted: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct LoopState {
    env_steps: u64,
    iteration: u64,
    aborted_updates: u64,
    ep_return: Vec<f64>,
    ep_len: Vec<usize>,
    next_eval_at: u64,
    last_eval_iteration: Option<u64>,
    elapsed: f64,
    actor_adam_step: u64,
    critic_adam_step: u64,
    normalizer: RunningNormalizer,
    env: VecEnvState,
    policy_rngs: Vec<RngState>,
    shuffle_rng: RngState,
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub sched: NoiseSchedule,
    pub actor: Actor,
    pub critic: ValueNet,
    pub actor_opt: AdamState,
    pub critic_opt: AdamState,
    pub normalizer: RunningNormalizer,
    pub env: VecEnv,
    policy_rngs: Vec<Rng>,
    shuffle_rng: Rng,
    pub env_steps: u64,
    /// Completed updates.
    pub iteration: u64,
    pub aborted_updates: u64,
    ep_return: Vec<f64>,
    ep_len: Vec<usize>,
    next_eval_at: u64,
    last_eval_iteration: Option<u64>,
    elapsed: f64,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        let mut cfg = cfg;
        cfg.resolve();
        cfg.validate()?;
        let spec = cfg.env.spec();
        let mut init = rng::stream(sub_seed(cfg.seed, TAG_INIT), 0);
        let actor = Actor::new(&cfg, &mut init)?;
        let critic = ValueNet::new(spec.state_dim, &cfg.critic_hidden, cfg.critic_activation, &mut init);
        let actor_opt = AdamState::new(actor.params());
        let critic_opt = AdamState::new(critic.net.params());
        let env = VecEnv::new(cfg.env, cfg.num_envs, cfg.seed);
        let policy_rngs = (0..cfg.num_envs as u64)
            .map(|i| rng::stream(sub_seed(cfg.seed, TAG_POLICY), i))
            .collect();
        Ok(Self {
            sched: cfg.schedule()?,
            normalizer: RunningNormalizer::new(spec.state_dim),
            shuffle_rng: rng::stream(sub_seed(cfg.seed, TAG_SHUFFLE), 0),
            ep_return: vec![0.0; cfg.num_envs],
            ep_len: vec![0; cfg.num_envs],
            next_eval_at: cfg.eval_interval as u64,
            last_eval_iteration: None,
            elapsed: 0.0,
            env_steps: 0,
            iteration: 0,
            aborted_updates: 0,
            actor,
            critic,
            actor_opt,
            critic_opt,
            env,
            policy_rngs,
            cfg,
        })
    }

    pub fn eval_seed(&self) -> u64 {
        sub_seed(self.cfg.seed, TAG_EVAL)
    }

    pub fn is_done(&self) -> bool {
        self.env_steps >= self.cfg.total_env_steps as u64
    }

    /// Fills a buffer with `num_envs × rollout_length` transitions from the
    /// current policy, with advantages and returns computed.
    pub fn collect(&mut self) -> Result<(RolloutBuffer, CollectStats)> {
        let (e, t_len) = (self.cfg.num_envs, self.cfg.rollout_length);
        let norm_on = self.cfg.normalize_observations;
        let d = self.env.spec().action_dim;
        let mut buf = RolloutBuffer::new(self.iteration, e, t_len, self.actor.digest());
        let mut stats = CollectStats::default();
        let mut raw_seen: Vec<Vec<f64>> = Vec::with_capacity(e * t_len);
        let mut obs = normalize_rows(&self.normalizer, &self.env.observations(), norm_on)?;
        for _ in 0..t_len {
            let states = rows_to_array(&obs);
            let values = self.critic.predict(&states)?;
            let mut actions = Vec::with_capacity(e);
            match &self.actor {
                Actor::Gsb(f) => {
                    for p in sample_paths(f, &self.sched, &states, &mut self.policy_rngs)? {
                        match p {
                            Some(p) => {
                                actions.push(p.terminal().to_vec());
                                buf.paths.push(Some(p));
                                buf.valid.push(true);
                            }
                            None => {
                                stats.nonfinite_paths += 1;
                                actions.push(vec![0.0; d]);
                                buf.paths.push(None);
                                buf.valid.push(false);
                            }
                        }
                        buf.logp_old.push(0.0);
                    }
                }
                Actor::Ppo(g) => {
                    for (a, lp) in g.sample(&states, &mut self.policy_rngs)? {
                        actions.push(a);
                        buf.logp_old.push(lp);
                        buf.paths.push(None);
                        buf.valid.push(true);
                    }
                }
            }
            let step = self.env.step(&actions)?;
            raw_seen.extend(self.env.observations());
            let mut rewards = step.rewards.clone();
            let mut dones = vec![false; e];
            let truncated_idx: Vec<usize> = (0..e).filter(|&i| step.truncated[i]).collect();
            if !truncated_idx.is_empty() {
                let finals: Vec<Vec<f64>> = truncated_idx
                    .iter()
                    .map(|&i| step.final_obs[i].clone().expect("final observation"))
                    .collect();
                let fv = self
                    .critic
                    .predict(&rows_to_array(&normalize_rows(&self.normalizer, &finals, norm_on)?))?;
                for (k, &i) in truncated_idx.iter().enumerate() {
                    rewards[i] += self.cfg.gamma * fv[k];
                }
            }
            for i in 0..e {
                self.ep_return[i] += step.rewards[i];
                self.ep_len[i] += 1;
                if step.terminated[i] || step.truncated[i] {
                    dones[i] = true;
                    stats.episode_returns.push(self.ep_return[i]);
                    stats.episode_lengths.push(self.ep_len[i]);
                    if let Some(dist) = step.final_distance[i] {
                        stats.final_distances.push(dist);
                    }
                    self.ep_return[i] = 0.0;
                    self.ep_len[i] = 0;
                }
            }
            stats.mean_step_reward += step.rewards.iter().sum::<f64>();
            buf.obs.extend(obs);
            buf.actions.extend(actions);
            buf.rewards.extend(rewards);
            buf.dones.extend(dones);
            buf.values.extend(values);
            obs = normalize_rows(&self.normalizer, &step.obs, norm_on)?;
        }
        buf.last_values = self.critic.predict(&rows_to_array(&obs))?;
        stats.mean_step_reward /= (e * t_len) as f64;
        self.env_steps += (e * t_len) as u64;
        buf.compute_advantages(&self.cfg.gae(), self.cfg.normalize_advantages)?;
        // Statistics move only between iterations, after the data they
        // normalized has been stored.
        if norm_on {
            let rows: Vec<&[f64]> = raw_seen.iter().map(Vec::as_slice).collect();
            self.normalizer.update(&rows)?;
        }
        Ok((buf, stats))
    }

    fn actor_lr(&self, progress: f64) -> Result<f64> {
        Ok(match self.cfg.actor_lr_schedule() {
            LrSchedule::Cosine => cosine_lr(self.cfg.actor_lr(), progress.clamp(0.0, 1.0))?,
            LrSchedule::Constant => self.cfg.actor_lr(),
        })
    }

    /// Minibatched epochs over `buf`. A numerically broken loss or gradient
    /// aborts the rest of the update; the parameters keep the last good
    /// step.
    pub fn update(&mut self, buf: &mut RolloutBuffer) -> Result<UpdateStats> {
        if buf.consumed || buf.generation != self.iteration {
            return Err(Error::Invalid(format!(
                "rollout buffer of iteration {} cannot be used at iteration {}",
                buf.generation, self.iteration
            )));
        }
        if !buf.is_full() {
            return Err(Error::len("rollout buffer", buf.num_envs * buf.rollout_length, buf.len()));
        }
        if buf.policy_hash != self.actor.digest() {
            return Err(Error::Invalid("actor changed between collection and update".into()));
        }
        buf.consumed = true;
        let old_digest = buf.old_policy_digest();

        let collected_before = self.env_steps - buf.len() as u64;
        let lr = self.actor_lr(collected_before as f64 / self.cfg.total_env_steps as f64)?;
        let mut stats = UpdateStats {
            learning_rate: lr,
            ..Default::default()
        };
        let n = buf.len();
        let mb = n / self.cfg.minibatches;
        let obj = self.cfg.objective();
        let clip = self.cfg.clip();
        let mut order: Vec<usize> = (0..n).collect();
        'epochs: for _ in 0..self.cfg.epochs {
            order.shuffle(&mut self.shuffle_rng);
            for chunk in order.chunks(mb) {
                let valid: Vec<usize> = chunk.iter().copied().filter(|&j| buf.valid[j]).collect();
                if !valid.is_empty() {
                    match self.actor_step(buf, &valid, lr, &obj, clip.as_ref()) {
                        Ok(s) => {
                            if stats.minibatch_steps == 0 {
                                stats.first_actor_grad_norm = s.actor_grad_norm;
                            }
                            stats.policy_loss += s.policy_loss;
                            stats.drift_cost += s.drift_cost;
                            stats.step_clip_frac += s.step_clip_frac;
                            stats.path_clip_frac += s.path_clip_frac;
                            stats.mean_abs_path_log_ratio += s.mean_abs_path_log_ratio;
                            stats.actor_grad_norm += s.actor_grad_norm;
                        }
                        Err(e) if is_numerical_breakdown(&e) => {
                            log::warn!("update {} aborted: {e}", self.iteration);
                            stats.aborted = true;
                            break 'epochs;
                        }
                        Err(e) => return Err(e),
                    }
                }
                stats.value_loss += self.critic_step(buf, chunk)?;
                stats.minibatch_steps += 1;
            }
        }
        if stats.minibatch_steps > 0 {
            let k = stats.minibatch_steps as f64;
            for v in [
                &mut stats.policy_loss,
                &mut stats.value_loss,
                &mut stats.drift_cost,
                &mut stats.step_clip_frac,
                &mut stats.path_clip_frac,
                &mut stats.mean_abs_path_log_ratio,
                &mut stats.actor_grad_norm,
            ] {
                *v /= k;
            }
        }
        if stats.aborted {
            self.aborted_updates += 1;
        }
        if buf.old_policy_digest() != old_digest {
            return Err(Error::Invalid("stored old-policy values changed during the update".into()));
        }
        self.iteration += 1;
        Ok(stats)
    }

    fn actor_step(
        &mut self,
        buf: &RolloutBuffer,
        idx: &[usize],
        lr: f64,
        obj: &crate::pathobj::ObjectiveConfig,
        clip: Option<&crate::pathobj::ClipConfig>,
    ) -> Result<UpdateStats> {
        let mut s = UpdateStats::default();
        let mut grads: Vec<Array> = match &self.actor {
            Actor::Gsb(f) => {
                let batch = LossBatch {
                    states: idx.iter().map(|&j| buf.obs[j].as_slice()).collect(),
                    paths: idx.iter().map(|&j| buf.paths[j].as_ref().expect("valid path")).collect(),
                    advantages: idx.iter().map(|&j| buf.advantages[j]).collect(),
                };
                let mut g = build_loss(f, &batch, &self.sched, obj, clip)?;
                s.policy_loss = g.stats.loss;
                s.drift_cost = g.stats.mean_drift_cost;
                s.step_clip_frac = g.stats.step_clip_frac;
                s.path_clip_frac = g.stats.path_clip_frac;
                s.mean_abs_path_log_ratio = g.stats.mean_abs_path_log_ratio;
                let mut gr = g.tape.backward(g.loss)?;
                g.vars.params.iter().map(|&v| gr.take(v)).collect()
            }
            Actor::Ppo(a) => {
                let states = rows_to_array(&idx.iter().map(|&j| buf.obs[j].clone()).collect::<Vec<_>>());
                let actions = rows_to_array(&idx.iter().map(|&j| buf.actions[j].clone()).collect::<Vec<_>>());
                let old: Vec<f64> = idx.iter().map(|&j| buf.logp_old[j]).collect();
                let adv: Vec<f64> = idx.iter().map(|&j| buf.advantages[j]).collect();
                let mut g = ppo_loss_graph(a, &states, &actions, &old, &adv, self.cfg.ppo_clip)?;
                s.policy_loss = g.loss_value;
                s.step_clip_frac = g.clip_frac;
                s.mean_abs_path_log_ratio = g.mean_abs_log_ratio;
                let mut gr = g.tape.backward(g.loss)?;
                g.params.iter().map(|&v| gr.take(v)).collect()
            }
        };
        s.actor_grad_norm = clip_grad_norm(&mut grads, self.cfg.max_grad_norm);
        if !s.actor_grad_norm.is_finite() {
            return Err(Error::NonFinite("actor gradient".into()));
        }
        self.actor_opt.step(&mut self.actor.params_mut(), &grads, lr)?;
        Ok(s)
    }

    fn critic_step(&mut self, buf: &RolloutBuffer, idx: &[usize]) -> Result<f64> {
        let states = rows_to_array(&idx.iter().map(|&j| buf.obs[j].clone()).collect::<Vec<_>>());
        let targets: Vec<f64> = idx.iter().map(|&j| buf.returns[j]).collect();
        let (mut tape, loss, vars) = value_loss_graph(&self.critic, &states, &targets)?;
        let value = tape.value(loss).item();
        let mut gr = tape.backward(loss)?;
        let mut grads: Vec<Array> = vars.params.iter().map(|&v| gr.take(v)).collect();
        clip_grad_norm(&mut grads, self.cfg.max_grad_norm);
        self.critic_opt
            .step(&mut self.critic.net.params_mut(), &grads, self.cfg.critic_lr)?;
        Ok(value)
    }

    pub fn evaluate_now(&self) -> Result<EvalResult> {
        evaluate(
            &self.actor,
            &self.normalizer,
            self.cfg.normalize_observations,
            &self.sched,
            self.cfg.env,
            self.cfg.eval_episodes,
            self.cfg.deterministic_eval,
            self.eval_seed(),
        )
    }

    fn base_row(&self, kind: &str) -> MetricsRow {
        MetricsRow {
            kind: kind.into(),
            algo: self.cfg.algo.to_string(),
            env: self.cfg.env.to_string(),
            seed: self.cfg.seed,
            iteration: self.iteration,
            env_steps: self.env_steps,
            ..Default::default()
        }
    }

    pub fn eval_row(&mut self, clock: f64) -> Result<MetricsRow> {
        let ev = self.evaluate_now()?;
        self.last_eval_iteration = Some(self.iteration);
        Ok(MetricsRow {
            wall_clock: clock,
            mean_return: Some(ev.mean_return),
            episode_length: Some(ev.mean_length),
            final_distance: ev.final_distance,
            deterministic: Some(self.cfg.deterministic_eval),
            ..self.base_row("eval")
        })
    }

    /// One collect → update cycle plus a scheduled evaluation.
    pub fn iterate(&mut self, started: Instant) -> Result<Vec<MetricsRow>> {
        let (mut buf, cs) = self.collect()?;
        let us = self.update(&mut buf)?;
        let clock = self.elapsed + started.elapsed().as_secs_f64();
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        let lens: Vec<f64> = cs.episode_lengths.iter().map(|&l| l as f64).collect();
        let gsb = matches!(self.actor, Actor::Gsb(_));
        let mut rows = vec![MetricsRow {
            wall_clock: clock,
            mean_return: mean(&cs.episode_returns),
            episode_length: mean(&lens),
            final_distance: mean(&cs.final_distances),
            mean_step_reward: Some(cs.mean_step_reward),
            policy_loss: Some(us.policy_loss),
            value_loss: Some(us.value_loss),
            drift_cost: gsb.then_some(us.drift_cost),
            step_clip_frac: Some(us.step_clip_frac),
            path_clip_frac: gsb.then_some(us.path_clip_frac),
            mean_abs_path_log_ratio: Some(us.mean_abs_path_log_ratio),
            actor_grad_norm: Some(us.actor_grad_norm),
            learning_rate: Some(us.learning_rate),
            nonfinite_paths: Some(cs.nonfinite_paths),
            aborted_updates: Some(self.aborted_updates),
            ..self.base_row("update")
        }];
        if self.cfg.eval_interval > 0 && self.env_steps >= self.next_eval_at {
            while self.next_eval_at <= self.env_steps {
                self.next_eval_at += self.cfg.eval_interval as u64;
            }
            rows.push(self.eval_row(clock)?);
        }
        Ok(rows)
    }

    /// Trains until the step budget is spent, writing metrics and
    /// checkpoints under `out` when given. Ends with an evaluation row.
    pub fn run(&mut self, out: Option<&Path>) -> Result<Vec<MetricsRow>> {
        let started = Instant::now();
        let mut writer = match out {
            Some(dir) => {
                std::fs::create_dir_all(dir.join("checkpoints"))?;
                Some(MetricsWriter::open(dir)?)
            }
            None => None,
        };
        let mut rows = Vec::new();
        let mut emit = |r: MetricsRow, rows: &mut Vec<MetricsRow>| -> Result<()> {
            if let Some(w) = writer.as_mut() {
                w.write(&r)?;
            }
            rows.push(r);
            Ok(())
        };
        while !self.is_done() {
            for r in self.iterate(started)? {
                emit(r, &mut rows)?;
            }
            let k = self.cfg.checkpoint_interval as u64;
            if let Some(dir) = out {
                if k > 0 && self.iteration % k == 0 {
                    self.elapsed_snapshot(started)
                        .save_bundle(&dir.join("checkpoints").join(format!("update_{:06}.ckpt", self.iteration)))?;
                }
            }
        }
        if self.last_eval_iteration != Some(self.iteration) {
            let clock = self.elapsed + started.elapsed().as_secs_f64();
            let r = self.eval_row(clock)?;
            emit(r, &mut rows)?;
        }
        if let Some(dir) = out {
            self.elapsed_snapshot(started)
                .save_bundle(&dir.join("checkpoints").join("final.ckpt"))?;
        }
        Ok(rows)
    }

    fn elapsed_snapshot(&self, started: Instant) -> BundleView<'_> {
        BundleView {
            trainer: self,
            elapsed: self.elapsed + started.elapsed().as_secs_f64(),
        }
    }

    pub fn save_bundle(&self, path: &Path) -> Result<()> {
        BundleView {
            trainer: self,
            elapsed: self.elapsed,
        }
        .save_bundle(path)
    }

    pub fn load_bundle(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        if ck.meta["format"] != BUNDLE_FORMAT {
            return Err(Error::Invalid(format!("{} is not a training bundle", path.display())));
        }
        let cfg: RunConfig = serde_json::from_value(ck.meta["config"].clone())?;
        let st: LoopState = serde_json::from_value(ck.meta["state"].clone())?;
        let mut t = Trainer::new(cfg)?;
        fill(&mut t.actor.params_mut(), &ck.get_all("actor"), "actor")?;
        fill(&mut t.critic.net.params_mut(), &ck.get_all("critic"), "critic")?;
        for (opt, name, step) in [
            (&mut t.actor_opt, "actor", st.actor_adam_step),
            (&mut t.critic_opt, "critic", st.critic_adam_step),
        ] {
            fill(&mut opt.first.iter_mut().collect::<Vec<_>>(), &ck.get_all(&format!("{name}_adam_m")), name)?;
            fill(&mut opt.second.iter_mut().collect::<Vec<_>>(), &ck.get_all(&format!("{name}_adam_v")), name)?;
            opt.step = step;
        }
        t.normalizer = st.normalizer;
        t.env = VecEnv::restore(&st.env);
        t.policy_rngs = st.policy_rngs.iter().map(RngState::restore).collect();
        t.shuffle_rng = st.shuffle_rng.restore();
        t.env_steps = st.env_steps;
        t.iteration = st.iteration;
        t.aborted_updates = st.aborted_updates;
        t.ep_return = st.ep_return;
        t.ep_len = st.ep_len;
        t.next_eval_at = st.next_eval_at;
        t.last_eval_iteration = st.last_eval_iteration;
        t.elapsed = st.elapsed;
        Ok(t)
    }
}

fn fill(dst: &mut [&mut Array], src: &[&Array], what: &str) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::len(format!("{what} tensors in checkpoint"), dst.len(), src.len()));
    }
    for (d, s) in dst.iter_mut().zip(src) {
        if d.shape() != s.shape() {
            return Err(Error::Invalid(format!(
                "{what} tensor shape {:?} does not match {:?}",
                s.shape(),
                d.shape()
            )));
        }
        **d = (*s).clone();
    }
    Ok(())
}

struct BundleView<'a> {
    trainer: &'a Trainer,
    elapsed: f64,
}

impl BundleView<'_> {
    fn save_bundle(&self, path: &Path) -> Result<()> {
        let t = self.trainer;
        let state = LoopState {
            env_steps: t.env_steps,
            iteration: t.iteration,
            aborted_updates: t.aborted_updates,
            ep_return: t.ep_return.clone(),
            ep_len: t.ep_len.clone(),
            next_eval_at: t.next_eval_at,
            last_eval_iteration: t.last_eval_iteration,
            elapsed: self.elapsed,
            actor_adam_step: t.actor_opt.step,
            critic_adam_step: t.critic_opt.step,
            normalizer: t.normalizer.clone(),
            env: t.env.snapshot(),
            policy_rngs: t.policy_rngs.iter().map(RngState::capture).collect(),
            shuffle_rng: RngState::capture(&t.shuffle_rng),
        };
        let mut ck = Checkpoint::new(json!({
            "format": BUNDLE_FORMAT,
            "algo": t.cfg.algo,
            "actor_activation": t.cfg.actor_activation(),
            "critic_activation": t.cfg.critic_activation,
            "schedule": t.sched,
            "config": t.cfg,
            "state": state,
        }));
        ck.push_all("actor", t.actor.params());
        ck.push_all("critic", t.critic.net.params());
        ck.push_all("actor_adam_m", &t.actor_opt.first);
        ck.push_all("actor_adam_v", &t.actor_opt.second);
        ck.push_all("critic_adam_m", &t.critic_opt.first);
        ck.push_all("critic_adam_v", &t.critic_opt.second);
        Ok(ck.save(path)?)
    }
}

/// Output location of a run: `cfg.out_dir`, else `$RUN_OUT_DIR`, else
/// `runs/<algo>-<env>-seed<seed>`.
pub fn run_dir(cfg: &RunConfig) -> PathBuf {
    if let Some(d) = &cfg.out_dir {
        return PathBuf::from(d);
    }
    let base = std::env::var_os("RUN_OUT_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    base.join(format!("{}-{}-seed{}", cfg.algo, cfg.env, cfg.seed))
}

/// Writes the effective config and the seed record, then trains.
pub fn train(cfg: &RunConfig, out: &Path) -> Result<(Trainer, Vec<MetricsRow>)> {
    std::fs::create_dir_all(out)?;
    let mut cfg = cfg.clone();
    cfg.resolve();
    cfg.validate()?;
    std::fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    let seeds = json!({
        "seed": cfg.seed,
        "env_streams": format!("ChaCha8 seed {} streams 0..{}", cfg.seed, cfg.num_envs),
        "policy_seed": sub_seed(cfg.seed, TAG_POLICY),
        "init_seed": sub_seed(cfg.seed, TAG_INIT),
        "shuffle_seed": sub_seed(cfg.seed, TAG_SHUFFLE),
        "eval_seed": sub_seed(cfg.seed, TAG_EVAL),
    });
    std::fs::write(out.join("seed.json"), serde_json::to_string_pretty(&seeds)?)?;
    let mut t = Trainer::new(cfg)?;
    let rows = t.run(Some(out))?;
    Ok((t, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genpolicy::path_step_terms;

    fn small(algo: Algo) -> RunConfig {
        let mut c = RunConfig {
            algo,
            num_envs: 8,
            rollout_length: 8,
            total_env_steps: 256,
            actor_hidden: vec![16],
            critic_hidden: vec![16],
            generation_steps: 4,
            time_embed_dim: 4,
            eval_interval: 128,
            eval_episodes: 2,
            ..Default::default()
        };
        c.resolve();
        c
    }

    #[test]
    fn buffer_is_exactly_full_and_recomputable() {
        let mut t = Trainer::new(small(Algo::GsbMdpo)).unwrap();
        let (buf, _) = t.collect().unwrap();
        assert_eq!(buf.len(), 64);
        assert!(buf.is_full());
        let Actor::Gsb(f) = &t.actor else { unreachable!() };
        for (p, s) in buf.paths.iter().zip(&buf.obs) {
            let p = p.as_ref().unwrap();
            let (_, lp) = path_step_terms(f, p, &t.sched, s).unwrap();
            assert!(lp.iter().zip(&p.old_logp).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn collection_is_deterministic() {
        let mut a = Trainer::new(small(Algo::GsbMdpo)).unwrap();
        let mut b = Trainer::new(small(Algo::GsbMdpo)).unwrap();
        let (ba, _) = a.collect().unwrap();
        let (bb, _) = b.collect().unwrap();
        assert_eq!(ba.paths, bb.paths);
        assert_eq!(ba.rewards, bb.rewards);
    }

    #[test]
    fn buffers_are_single_use() {
        let mut t = Trainer::new(small(Algo::GsbMdpo)).unwrap();
        let (mut buf, _) = t.collect().unwrap();
        let mut copy = buf.clone();
        t.update(&mut buf).unwrap();
        assert!(t.update(&mut buf).is_err());
        assert!(t.update(&mut copy).is_err());
    }

    #[test]
    fn zero_advantage_gives_zero_actor_gradient() {
        let mut c = small(Algo::GsbMdpo);
        c.reference_mix = 0.0;
        let mut t = Trainer::new(c).unwrap();
        let (mut buf, _) = t.collect().unwrap();
        buf.advantages.iter_mut().for_each(|a| *a = 0.0);
        let s = t.update(&mut buf).unwrap();
        assert!(s.first_actor_grad_norm < 1e-8, "{}", s.first_actor_grad_norm);
    }

    #[test]
    fn training_loop_accounting() {
        for algo in [Algo::GsbMdpo, Algo::Ppo] {
            let mut t = Trainer::new(small(algo)).unwrap();
            let rows = t.run(None).unwrap();
            let updates = rows.iter().filter(|r| r.kind == "update").count();
            let evals = rows.iter().filter(|r| r.kind == "eval").count();
            assert_eq!(updates, 4);
            assert_eq!(evals, 2);
            assert!(t.env_steps >= 256 && t.env_steps < 256 + 64);
            for r in rows.iter().filter(|r| r.kind == "update") {
                let f = r.step_clip_frac.unwrap();
                assert!((0.0..=1.0).contains(&f));
            }
        }
    }

    #[test]
    fn deterministic_eval_repeats_exactly() {
        let t = Trainer::new(small(Algo::GsbMdpo)).unwrap();
        let a = t.evaluate_now().unwrap();
        let b = t.evaluate_now().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bundle_round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(small(Algo::GsbMdpo)).unwrap();
        t.iterate(Instant::now()).unwrap();
        let p = dir.path().join("b.ckpt");
        t.save_bundle(&p).unwrap();
        let back = Trainer::load_bundle(&p).unwrap();
        assert_eq!(back.actor, t.actor);
        assert_eq!(back.critic, t.critic);
        assert_eq!(back.actor_opt, t.actor_opt);
        assert_eq!(back.normalizer, t.normalizer);
        assert_eq!(back.env, t.env);
        assert_eq!(back.env_steps, t.env_steps);
    }
}
