//! Run configuration: one flat JSON object whose keys double as kebab-case
//! command-line flags.

use std::fmt;
use std::str::FromStr;

use diffcore::Activation;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::critic::GaeConfig;
use crate::envs::EnvKind;
use crate::genpolicy::{NoiseSchedule, ScheduleKind};
use crate::pathobj::{ClipConfig, ObjectiveConfig};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Algo {
    #[serde(rename = "gsb-mdpo")]
    GsbMdpo,
    #[serde(rename = "ppo")]
    Ppo,
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algo::GsbMdpo => "gsb-mdpo",
            Algo::Ppo => "ppo",
        })
    }
}

impl FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gsb-mdpo" => Ok(Algo::GsbMdpo),
            "ppo" => Ok(Algo::Ppo),
            _ => Err(Error::Config {
                key: "algo".into(),
                msg: format!("unknown algorithm `{s}` (expected gsb-mdpo or ppo)"),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Cosine,
    Constant,
}

/// Every knob of a training run. Keys left unset in a config file take
/// these defaults; algorithm-dependent keys are filled by [`RunConfig::resolve`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub algo: Algo,
    pub env: EnvKind,
    pub seed: u64,
    pub out_dir: Option<String>,

    pub total_env_steps: usize,
    pub num_envs: usize,
    pub rollout_length: usize,
    pub epochs: usize,
    pub minibatches: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub normalize_observations: bool,
    pub normalize_advantages: bool,
    pub max_grad_norm: f64,

    pub kl_coef: f64,
    pub reference_mix: f64,
    pub c_step: f64,
    pub c_path: f64,
    /// When false the exact path ratio is used.
    pub ratio_clipping: bool,

    pub generation_steps: usize,
    pub sigma_schedule: ScheduleKind,
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub high_noise_first: bool,
    pub time_embed_dim: usize,
    pub output_scale: f64,

    pub actor_hidden: Vec<usize>,
    pub actor_activation: Option<Activation>,
    pub actor_lr: Option<f64>,
    pub actor_lr_schedule: Option<LrSchedule>,
    pub critic_hidden: Vec<usize>,
    pub critic_activation: Activation,
    pub critic_lr: f64,
    pub ppo_clip: f64,

    /// Env steps between evaluations; 0 disables periodic evaluation.
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub deterministic_eval: bool,
    /// Updates between periodic checkpoints; 0 keeps only the final one.
    pub checkpoint_interval: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            algo: Algo::GsbMdpo,
            env: EnvKind::PointMass2D,
            seed: 0,
            out_dir: None,
            total_env_steps: 200_000,
            num_envs: 64,
            rollout_length: 24,
            epochs: 4,
            minibatches: 4,
            gamma: 0.99,
            gae_lambda: 0.95,
            normalize_observations: true,
            normalize_advantages: true,
            max_grad_norm: 1.0,
            kl_coef: 0.08,
            reference_mix: 0.02,
            c_step: 0.1,
            c_path: 0.4,
            ratio_clipping: true,
            generation_steps: 16,
            sigma_schedule: ScheduleKind::Linear,
            sigma_max: 3.0,
            sigma_min: 0.3,
            high_noise_first: true,
            time_embed_dim: 16,
            output_scale: 0.25,
            actor_hidden: vec![64, 64],
            actor_activation: None,
            actor_lr: None,
            actor_lr_schedule: None,
            critic_hidden: vec![64, 64],
            critic_activation: Activation::Elu,
            critic_lr: 1e-3,
            ppo_clip: 0.2,
            eval_interval: 50_000,
            eval_episodes: 10,
            deterministic_eval: true,
            checkpoint_interval: 0,
        }
    }
}

fn bad(key: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        msg: msg.into(),
    }
}

impl RunConfig {
    /// Names of every accepted key.
    pub fn keys() -> Vec<String> {
        match serde_json::to_value(RunConfig::default()) {
            Ok(Value::Object(m)) => m.keys().cloned().collect(),
            _ => unreachable!("RunConfig serializes to an object"),
        }
    }

    /// Builds a config from a JSON object layered over the defaults.
    /// Errors name the offending key.
    pub fn from_value(v: Value) -> Result<Self> {
        let obj = match v {
            Value::Object(m) => m,
            Value::Null => Map::new(),
            _ => return Err(bad("<root>", "config must be a JSON object")),
        };
        let keys = Self::keys();
        for k in obj.keys() {
            if !keys.contains(k) {
                return Err(bad(k, "unknown key"));
            }
        }
        for (k, val) in &obj {
            let mut single = Map::new();
            single.insert(k.clone(), val.clone());
            if let Err(e) = serde_json::from_value::<RunConfig>(Value::Object(single)) {
                return Err(bad(k, format!("type mismatch: {e}")));
            }
        }
        let mut cfg: RunConfig =
            serde_json::from_value(Value::Object(obj)).map_err(|e| bad("<root>", e.to_string()))?;
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let v: Value = if s.trim().is_empty() {
            Value::Null
        } else {
            serde_json::from_str(s).map_err(|e| bad("<root>", format!("malformed JSON: {e}")))?
        };
        Self::from_value(v)
    }

    /// Fills the algorithm-dependent defaults: SiLU, 7.5e-4 and a cosine
    /// schedule for the generative actor; ELU, 1e-4 and a constant rate for
    /// the Gaussian baseline.
    pub fn resolve(&mut self) {
        let (act, lr, sched) = match self.algo {
            Algo::GsbMdpo => (Activation::Silu, 7.5e-4, LrSchedule::Cosine),
            Algo::Ppo => (Activation::Elu, 1e-4, LrSchedule::Constant),
        };
        self.actor_activation.get_or_insert(act);
        self.actor_lr.get_or_insert(lr);
        self.actor_lr_schedule.get_or_insert(sched);
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |key: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(bad(key, format!("must be positive and finite, got {v}")))
            }
        };
        let nonzero = |key: &str, v: usize| {
            if v > 0 {
                Ok(())
            } else {
                Err(bad(key, "must be at least 1"))
            }
        };
        nonzero("total_env_steps", self.total_env_steps)?;
        nonzero("num_envs", self.num_envs)?;
        nonzero("rollout_length", self.rollout_length)?;
        nonzero("epochs", self.epochs)?;
        nonzero("minibatches", self.minibatches)?;
        nonzero("generation_steps", self.generation_steps)?;
        nonzero("eval_episodes", self.eval_episodes)?;
        if (self.num_envs * self.rollout_length) % self.minibatches != 0 {
            return Err(bad(
                "minibatches",
                format!(
                    "must divide the buffer size {}",
                    self.num_envs * self.rollout_length
                ),
            ));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(bad("gamma", format!("must lie in (0, 1], got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(bad("gae_lambda", format!("must lie in [0, 1], got {}", self.gae_lambda)));
        }
        if !(self.kl_coef.is_finite() && self.kl_coef >= 0.0) {
            return Err(bad("kl_coef", format!("must be non-negative, got {}", self.kl_coef)));
        }
        if !(0.0..=1.0).contains(&self.reference_mix) {
            return Err(bad(
                "reference_mix",
                format!("must lie in [0, 1], got {}", self.reference_mix),
            ));
        }
        positive("c_step", self.c_step)?;
        positive("c_path", self.c_path)?;
        positive("sigma_max", self.sigma_max)?;
        positive("sigma_min", self.sigma_min)?;
        positive("output_scale", self.output_scale)?;
        positive("critic_lr", self.critic_lr)?;
        positive("max_grad_norm", self.max_grad_norm)?;
        positive("ppo_clip", self.ppo_clip)?;
        if let Some(lr) = self.actor_lr {
            positive("actor_lr", lr)?;
        }
        if self.time_embed_dim % 2 != 0 {
            return Err(bad("time_embed_dim", "must be even"));
        }
        for (key, h) in [("actor_hidden", &self.actor_hidden), ("critic_hidden", &self.critic_hidden)] {
            if h.iter().any(|&w| w == 0) {
                return Err(bad(key, "layer widths must be positive"));
            }
        }
        Ok(())
    }

    pub fn buffer_size(&self) -> usize {
        self.num_envs * self.rollout_length
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let mut s = NoiseSchedule::new(
            self.sigma_schedule,
            self.sigma_max,
            self.sigma_min,
            self.generation_steps,
        )?;
        s.high_noise_first = self.high_noise_first;
        Ok(s)
    }

    pub fn clip(&self) -> Option<ClipConfig> {
        self.ratio_clipping.then_some(ClipConfig {
            c_step: self.c_step,
            c_path: self.c_path,
        })
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            kl_coef: self.kl_coef,
            reference_mix: self.reference_mix,
            normalize_advantages: self.normalize_advantages,
        }
    }

    pub fn gae(&self) -> GaeConfig {
        GaeConfig {
            gamma: self.gamma,
            gae_lambda: self.gae_lambda,
        }
    }

    pub fn actor_activation(&self) -> Activation {
        self.actor_activation.unwrap_or(Activation::Silu)
    }

    pub fn actor_lr(&self) -> f64 {
        self.actor_lr.unwrap_or(7.5e-4)
    }

    pub fn actor_lr_schedule(&self) -> LrSchedule {
        self.actor_lr_schedule.unwrap_or(LrSchedule::Cosine)
    }

    /// Applies `key = value` overrides (snake- or kebab-case keys). Values
    /// are read as JSON when they parse, as plain strings otherwise.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let mut base = serde_json::to_value(self)?;
        let obj = base.as_object_mut().expect("object");
        let keys = Self::keys();
        for (k, raw) in overrides {
            let key = k.trim_start_matches("--").replace('-', "_");
            if !keys.contains(&key) {
                return Err(bad(&key, "unknown key"));
            }
            let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
            obj.insert(key, v);
        }
        // Re-derive algorithm-dependent defaults when only the algorithm
        // changed.
        let changed_algo = overrides.iter().any(|(k, _)| k.trim_start_matches("--") == "algo");
        if changed_algo {
            for dep in ["actor_activation", "actor_lr", "actor_lr_schedule"] {
                let overridden = overrides
                    .iter()
                    .any(|(k, _)| k.trim_start_matches("--").replace('-', "_") == dep);
                if !overridden && self.algo.to_string() != obj["algo"].as_str().unwrap_or("") {
                    obj.insert(dep.into(), Value::Null);
                }
            }
        }
        Self::from_value(base)
    }
}

/// Single-switch variants of the default configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Default,
    NoPathKl,
    NoReferenceMix,
    StochasticEval,
    NoClipping,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Default,
        Ablation::NoPathKl,
        Ablation::NoReferenceMix,
        Ablation::StochasticEval,
        Ablation::NoClipping,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Default => "default",
            Ablation::NoPathKl => "no-kl",
            Ablation::NoReferenceMix => "no-ref",
            Ablation::StochasticEval => "stochastic-eval",
            Ablation::NoClipping => "no-clip",
        }
    }

    pub fn apply(self, cfg: &RunConfig) -> RunConfig {
        let mut c = cfg.clone();
        match self {
            Ablation::Default => {}
            Ablation::NoPathKl => c.kl_coef = 0.0,
            Ablation::NoReferenceMix => c.reference_mix = 0.0,
            Ablation::StochasticEval => c.deterministic_eval = false,
            Ablation::NoClipping => c.ratio_clipping = false,
        }
        c
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|a| a.name()).collect();
            Error::Invalid(format!("unknown ablation `{s}` (expected one of {})", names.join(", ")))
        })
    }
}
