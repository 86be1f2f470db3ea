//! Small vectorized continuous-control tasks with known structure.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::{self, Rng, RngState};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnvSpec {
    pub name: &'static str,
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub horizon: usize,
    /// Every per-step reward satisfies `|r| <= reward_bound`.
    pub reward_bound: f64,
    pub reward: &'static str,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnvKind {
    PointMass2D,
    MultiGoalReach,
    PendulumSwingup,
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.spec().name)
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EnvKind::ALL
            .into_iter()
            .find(|k| k.spec().name.eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Invalid(format!("unknown environment `{s}`")))
    }
}

pub const MULTIGOAL_GOALS: [[f64; 2]; 4] = [[0.6, 0.6], [-0.6, 0.6], [-0.6, -0.6], [0.6, -0.6]];
const MULTIGOAL_HORIZON: usize = 4;

const PM_DT: f64 = 0.05;
const PM_DAMPING: f64 = 0.9;

const PEND_G: f64 = 10.0;
const PEND_DT: f64 = 0.05;
const PEND_MAX_SPEED: f64 = 8.0;
const PEND_MAX_TORQUE: f64 = 2.0;

pub fn env_catalog() -> Vec<EnvSpec> {
    EnvKind::ALL.iter().map(|k| k.spec()).collect()
}

fn angle_normalize(x: f64) -> f64 {
    use std::f64::consts::PI;
    (x + PI).rem_euclid(2.0 * PI) - PI
}

impl EnvKind {
    pub const ALL: [EnvKind; 3] = [
        EnvKind::PointMass2D,
        EnvKind::MultiGoalReach,
        EnvKind::PendulumSwingup,
    ];

    pub fn spec(self) -> EnvSpec {
        match self {
            EnvKind::PointMass2D => EnvSpec {
                name: "PointMass2D",
                state_dim: 4,
                action_dim: 2,
                action_low: vec![-1.0; 2],
                action_high: vec![1.0; 2],
                horizon: 100,
                // |p| grows by at most 0.025 per step and axis from [-1, 1].
                reward_bound: 25.0,
                reward: "-|p - goal|^2 - 0.01 |a|^2",
            },
            EnvKind::MultiGoalReach => EnvSpec {
                name: "MultiGoalReach",
                state_dim: 3,
                action_dim: 2,
                action_low: vec![-1.0; 2],
                action_high: vec![1.0; 2],
                horizon: MULTIGOAL_HORIZON,
                reward_bound: 2.0 * (MULTIGOAL_HORIZON as f64 + 0.6).powi(2),
                reward: "-min_k |p - g_k|^2",
            },
            EnvKind::PendulumSwingup => EnvSpec {
                name: "PendulumSwingup",
                state_dim: 3,
                action_dim: 1,
                action_low: vec![-PEND_MAX_TORQUE],
                action_high: vec![PEND_MAX_TORQUE],
                horizon: 200,
                reward_bound: std::f64::consts::PI.powi(2)
                    + 0.1 * PEND_MAX_SPEED.powi(2)
                    + 0.001 * PEND_MAX_TORQUE.powi(2),
                reward: "-(theta^2 + 0.1 thetadot^2 + 0.001 a^2)",
            },
        }
    }

    /// Whether reaching the horizon ends the task (as opposed to a time-limit
    /// cut of an infinite-horizon task, which bootstraps).
    pub fn horizon_is_terminal(self) -> bool {
        matches!(self, EnvKind::MultiGoalReach)
    }

    fn initial_state(self, rng: &mut Rng) -> Vec<f64> {
        match self {
            EnvKind::PointMass2D => vec![
                rng.random_range(-1.0..=1.0),
                rng.random_range(-1.0..=1.0),
                0.0,
                0.0,
            ],
            EnvKind::MultiGoalReach => vec![0.0, 0.0],
            EnvKind::PendulumSwingup => vec![
                rng.random_range(-std::f64::consts::PI..=std::f64::consts::PI),
                rng.random_range(-1.0..=1.0),
            ],
        }
    }

    fn observe(self, state: &[f64], t: usize) -> Vec<f64> {
        match self {
            EnvKind::PointMass2D => state.to_vec(),
            EnvKind::MultiGoalReach => {
                vec![state[0], state[1], t as f64 / MULTIGOAL_HORIZON as f64]
            }
            EnvKind::PendulumSwingup => vec![state[0].cos(), state[0].sin(), state[1]],
        }
    }

    /// Advances `state` under an in-box action and returns the reward.
    fn advance(self, state: &mut [f64], a: &[f64]) -> f64 {
        match self {
            EnvKind::PointMass2D => {
                for k in 0..2 {
                    state[k] += PM_DT * state[2 + k];
                    state[2 + k] = PM_DAMPING * state[2 + k] + PM_DT * a[k];
                }
                let d2 = state[0] * state[0] + state[1] * state[1];
                -d2 - 0.01 * (a[0] * a[0] + a[1] * a[1])
            }
            EnvKind::MultiGoalReach => {
                state[0] += a[0];
                state[1] += a[1];
                -multigoal_cost(state)
            }
            EnvKind::PendulumSwingup => {
                let (th, thdot) = (state[0], state[1]);
                let u = a[0];
                let cost = angle_normalize(th).powi(2) + 0.1 * thdot * thdot + 0.001 * u * u;
                let new_thdot = (thdot + (3.0 * PEND_G / 2.0 * th.sin() + 3.0 * u) * PEND_DT)
                    .clamp(-PEND_MAX_SPEED, PEND_MAX_SPEED);
                state[0] = th + new_thdot * PEND_DT;
                state[1] = new_thdot;
                -cost
            }
        }
    }

    /// Distance to the goal for goal-reaching tasks.
    pub fn goal_distance(self, state: &[f64]) -> Option<f64> {
        match self {
            EnvKind::PointMass2D => Some(state[0].hypot(state[1])),
            EnvKind::MultiGoalReach => Some(multigoal_cost(state).sqrt()),
            EnvKind::PendulumSwingup => None,
        }
    }
}

fn multigoal_cost(p: &[f64]) -> f64 {
    MULTIGOAL_GOALS
        .iter()
        .map(|g| (p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2))
        .fold(f64::INFINITY, f64::min)
}

/// Index of the goal within `radius` of `a`, if any.
pub fn multigoal_mode(a: &[f64], radius: f64) -> Option<usize> {
    MULTIGOAL_GOALS
        .iter()
        .position(|g| (a[0] - g[0]).hypot(a[1] - g[1]) < radius)
}

pub struct StepResult {
    /// Observations after the step; finished instances are already reset.
    pub obs: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub terminated: Vec<bool>,
    pub truncated: Vec<bool>,
    /// Last observation of each episode that ended on this step.
    pub final_obs: Vec<Option<Vec<f64>>>,
    /// Goal distance at the end of each finished episode.
    pub final_distance: Vec<Option<f64>>,
}

/// Fixed number of independent instances, each with its own random stream,
/// auto-resetting when an episode ends.
#[derive(Clone, Debug, PartialEq)]
pub struct VecEnv {
    kind: EnvKind,
    spec: EnvSpec,
    states: Vec<Vec<f64>>,
    steps: Vec<usize>,
    rngs: Vec<Rng>,
}

/// Serializable snapshot of a [`VecEnv`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VecEnvState {
    pub kind: EnvKind,
    pub states: Vec<Vec<f64>>,
    pub steps: Vec<usize>,
    pub rngs: Vec<RngState>,
}

impl VecEnv {
    pub fn new(kind: EnvKind, num_envs: usize, seed: u64) -> Self {
        let mut env = Self {
            kind,
            spec: kind.spec(),
            states: Vec::new(),
            steps: Vec::new(),
            rngs: Vec::new(),
        };
        env.rngs = (0..num_envs as u64).map(|i| rng::stream(seed, i)).collect();
        env.reset_all();
        env
    }

    fn reset_all(&mut self) {
        self.states = self
            .rngs
            .iter_mut()
            .map(|r| self.kind.initial_state(r))
            .collect();
        self.steps = vec![0; self.rngs.len()];
    }

    pub fn reset(&mut self, seed: u64) -> Vec<Vec<f64>> {
        *self = Self::new(self.kind, self.len(), seed);
        self.observations()
    }

    pub fn kind(&self) -> EnvKind {
        self.kind
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn observations(&self) -> Vec<Vec<f64>> {
        self.states
            .iter()
            .zip(&self.steps)
            .map(|(s, &t)| self.kind.observe(s, t))
            .collect()
    }

    pub fn physical_states(&self) -> &[Vec<f64>] {
        &self.states
    }

    /// Clips each action into the box (non-finite entries become 0) and
    /// advances every instance.
    pub fn step(&mut self, actions: &[Vec<f64>]) -> Result<StepResult> {
        if actions.len() != self.len() {
            return Err(Error::len("actions", self.len(), actions.len()));
        }
        let n = self.len();
        let mut out = StepResult {
            obs: Vec::with_capacity(n),
            rewards: Vec::with_capacity(n),
            terminated: vec![false; n],
            truncated: vec![false; n],
            final_obs: vec![None; n],
            final_distance: vec![None; n],
        };
        for i in 0..n {
            let a = &actions[i];
            if a.len() != self.spec.action_dim {
                return Err(Error::len("action", self.spec.action_dim, a.len()));
            }
            let a: Vec<f64> = a
                .iter()
                .zip(self.spec.action_low.iter().zip(&self.spec.action_high))
                .map(|(&x, (&lo, &hi))| if x.is_finite() { x.clamp(lo, hi) } else { 0.0 })
                .collect();
            let r = self.kind.advance(&mut self.states[i], &a);
            if !(r.abs() <= self.spec.reward_bound) {
                return Err(Error::Invalid(format!(
                    "{} reward {r} exceeds its bound {}",
                    self.spec.name, self.spec.reward_bound
                )));
            }
            self.steps[i] += 1;
            out.rewards.push(r);
            if self.steps[i] >= self.spec.horizon {
                if self.kind.horizon_is_terminal() {
                    out.terminated[i] = true;
                } else {
                    out.truncated[i] = true;
                }
                out.final_obs[i] = Some(self.kind.observe(&self.states[i], self.steps[i]));
                out.final_distance[i] = self.kind.goal_distance(&self.states[i]);
                self.states[i] = self.kind.initial_state(&mut self.rngs[i]);
                self.steps[i] = 0;
            }
            out.obs.push(self.kind.observe(&self.states[i], self.steps[i]));
        }
        Ok(out)
    }

    pub fn snapshot(&self) -> VecEnvState {
        VecEnvState {
            kind: self.kind,
            states: self.states.clone(),
            steps: self.steps.clone(),
            rngs: self.rngs.iter().map(RngState::capture).collect(),
        }
    }

    pub fn restore(s: &VecEnvState) -> Self {
        Self {
            kind: s.kind,
            spec: s.kind.spec(),
            states: s.states.clone(),
            steps: s.steps.clone(),
            rngs: s.rngs.iter().map(RngState::restore).collect(),
        }
    }
}
