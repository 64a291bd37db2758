//! Experiment configuration: a single flat JSON document with strict key
//! checking, defaults for every field, and typed views onto the per-module
//! configs it assembles.

use std::path::PathBuf;

use serde::Deserialize;
use thiserror::Error;

use crate::driver::{ApdoConfig, PdoConfig};
use crate::envs::grid::GridGatherSpec;
use crate::offpolicy::OffPolicyConfig;
use crate::onpolicy::{GaeConfig, StepConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid config at `{path}`: {message}")]
    Invalid { path: String, message: String },
}

fn invalid(path: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { path: path.to_string(), message: message.into() }
}

/// Which environment a run trains on.
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EnvSpec {
    /// The 1-state, 2-action chain with a single discounted-cost limit.
    RiskyChain {
        #[serde(default = "default_chain_limit")]
        d: f64,
    },
    /// The item-gathering gridworld.
    Grid(GridGatherSpec),
    /// A tabular model loaded from a JSON document on disk.
    Tabular { path: PathBuf },
}

fn default_chain_limit() -> f64 {
    2.0
}

impl Default for EnvSpec {
    fn default() -> Self {
        Self::Grid(GridGatherSpec::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Pdo,
    Apdo,
    PdDdpg,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Pdo => "pdo",
            Self::Apdo => "apdo",
            Self::PdDdpg => "pd-ddpg",
        }
    }
}

fn deserialize_algorithms<'de, D>(deserializer: D) -> Result<Vec<Algorithm>, D::Error>
where
    D: serde::Deserializer<'de>,
{
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(Algorithm),
        Many(Vec<Algorithm>),
    }
    Ok(match OneOrMany::deserialize(deserializer)? {
        OneOrMany::One(a) => vec![a],
        OneOrMany::Many(v) => v,
    })
}

/// Full experiment description. Every field has a default, so `{}` is a
/// valid document; unknown keys are rejected.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub env: EnvSpec,
    #[serde(deserialize_with = "deserialize_algorithms")]
    pub algorithm: Vec<Algorithm>,
    pub seeds: Vec<u64>,
    pub output: PathBuf,
    pub parallelism: usize,

    pub alpha: f64,
    pub batch_size: usize,
    pub gae_lambda: f64,
    pub gamma: f64,
    pub normalize_advantages: bool,
    pub weight_decay: f64,
    pub init_logits: Option<Vec<f64>>,
    pub policy_hidden: Vec<usize>,

    pub beta: f64,
    pub epochs: usize,
    pub k_adj: usize,

    pub buffer_capacity: usize,
    pub minibatch: usize,
    pub tau: f64,
    pub critic_lr: f64,
    pub actor_lr: f64,
    pub dual_lr_off: f64,
    pub off_iterations: usize,
    pub explore_sigma: f64,
    pub critic_hidden: Vec<usize>,
    pub actor_hidden: Vec<usize>,
    pub actor_weight_decay: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let off = OffPolicyConfig::default();
        Self {
            env: EnvSpec::default(),
            algorithm: vec![Algorithm::Pdo],
            seeds: vec![0],
            output: PathBuf::from("results"),
            parallelism: 1,
            alpha: 0.5,
            batch_size: 3000,
            gae_lambda: 0.95,
            gamma: 0.995,
            normalize_advantages: true,
            weight_decay: 0.0,
            init_logits: None,
            policy_hidden: vec![64, 32],
            beta: 0.1,
            epochs: 300,
            k_adj: 5,
            buffer_capacity: off.buffer_capacity,
            minibatch: off.minibatch,
            tau: off.tau,
            critic_lr: off.critic_lr,
            actor_lr: off.actor_lr,
            dual_lr_off: off.dual_lr_off,
            off_iterations: off.off_iterations,
            explore_sigma: off.explore_sigma,
            critic_hidden: off.critic_hidden,
            actor_hidden: off.actor_hidden,
            actor_weight_decay: off.actor_weight_decay,
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates a JSON document.
    pub fn parse(json: &str) -> Result<Self, ConfigError> {
        let config: Self = serde_json::from_str(json)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.algorithm.is_empty() {
            return Err(invalid("algorithm", "at least one algorithm required"));
        }
        if self.seeds.is_empty() {
            return Err(invalid("seeds", "at least one seed required"));
        }
        if self.parallelism == 0 {
            return Err(invalid("parallelism", "must be at least 1"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(invalid("alpha", "must be a positive finite number"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(invalid("gamma", "must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(invalid("gae_lambda", "must lie in [0, 1]"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(invalid("weight_decay", "must be non-negative"));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(invalid("beta", "must be a positive finite number"));
        }
        if self.epochs == 0 {
            return Err(invalid("epochs", "must be at least 1"));
        }
        if self.buffer_capacity == 0 {
            return Err(invalid("buffer_capacity", "must be at least 1"));
        }
        if self.minibatch == 0 {
            return Err(invalid("minibatch", "must be at least 1"));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(invalid("tau", "must lie in (0, 1]"));
        }
        for (path, lr) in [
            ("critic_lr", self.critic_lr),
            ("actor_lr", self.actor_lr),
            ("dual_lr_off", self.dual_lr_off),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(invalid(path, "must be a positive finite number"));
            }
        }
        if !(self.explore_sigma >= 0.0) {
            return Err(invalid("explore_sigma", "must be non-negative"));
        }
        if !(self.actor_weight_decay >= 0.0) {
            return Err(invalid("actor_weight_decay", "must be non-negative"));
        }
        match &self.env {
            EnvSpec::RiskyChain { d } => {
                if !(d.is_finite() && *d >= 0.0) {
                    return Err(invalid("env.d", "must be a non-negative finite number"));
                }
            }
            EnvSpec::Grid(spec) => {
                spec.validate().map_err(|e| invalid("env", e.to_string()))?;
            }
            EnvSpec::Tabular { path } => {
                if path.as_os_str().is_empty() {
                    return Err(invalid("env.path", "must not be empty"));
                }
            }
        }
        Ok(())
    }

    pub fn step_config(&self) -> StepConfig {
        StepConfig { alpha: self.alpha, weight_decay: self.weight_decay, ..Default::default() }
    }

    pub fn gae_config(&self) -> GaeConfig {
        GaeConfig { gae_lambda: self.gae_lambda, gamma: self.gamma }
    }

    pub fn pdo_config(&self) -> PdoConfig {
        PdoConfig {
            step: self.step_config(),
            beta: self.beta,
            epochs: self.epochs,
            batch_size: self.batch_size,
            gae: self.gae_config(),
            normalize_advantages: self.normalize_advantages,
        }
    }

    pub fn off_config(&self) -> OffPolicyConfig {
        OffPolicyConfig {
            buffer_capacity: self.buffer_capacity,
            minibatch: self.minibatch,
            tau: self.tau,
            critic_lr: self.critic_lr,
            actor_lr: self.actor_lr,
            dual_lr_off: self.dual_lr_off,
            off_iterations: self.off_iterations,
            explore_sigma: self.explore_sigma,
            critic_hidden: self.critic_hidden.clone(),
            actor_hidden: self.actor_hidden.clone(),
            actor_weight_decay: self.actor_weight_decay,
        }
    }

    pub fn apdo_config(&self) -> ApdoConfig {
        ApdoConfig { pdo: self.pdo_config(), k_adj: self.k_adj, off: self.off_config() }
    }
}
