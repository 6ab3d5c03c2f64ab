//! Experiment configuration: built-in defaults, then a `key = value` file,
//! then command-line overrides. Unknown keys are rejected.
//!
//! ```text
//! # comments start with '#'
//! algorithm.name = vpg
//! algorithm.value_steps = 50
//! [normalize]
//! rewards = true        # same as normalize.rewards = true
//! ```

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::algorithms::{PpoConfig, VpgConfig};
use crate::envs::{EnvConfig, EnvKind};
use crate::error::{Error, Result};
use crate::rollout::GaeConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmKind {
    Vpg,
    Ppo,
}

/// Default per-run budget: 245 batches of 2048, the smallest whole number
/// of batches covering 500k environment steps.
pub const DEFAULT_TOTAL_ENV_STEPS: usize = 245 * 2048;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub num_envs: usize,
    pub algorithm: AlgorithmKind,
    pub value_steps: usize,
    policy_lr: Option<f64>,
    value_lr: Option<f64>,
    epochs: Option<usize>,
    minibatch_size: Option<usize>,
    pub clip_epsilon: f64,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
    /// `false` replaces every value estimate with zero in the advantage
    /// (REINFORCE when combined with `gae_lambda = 1`).
    pub baseline: bool,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub batch_size: usize,
    pub normalize_observations: bool,
    pub normalize_rewards: bool,
    pub normalize_advantages: bool,
    pub policy_hidden: Vec<usize>,
    pub value_hidden: Vec<usize>,
    pub total_env_steps: usize,
    /// Evaluate every this many iterations (and after the last one).
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            env: EnvConfig::new(EnvKind::PendulumSwingup),
            num_envs: 16,
            algorithm: AlgorithmKind::Vpg,
            value_steps: 1,
            policy_lr: None,
            value_lr: None,
            epochs: None,
            minibatch_size: None,
            clip_epsilon: 0.2,
            entropy_coef: 0.0,
            max_grad_norm: 1.0,
            baseline: true,
            gamma: 0.99,
            gae_lambda: 0.95,
            batch_size: 2048,
            normalize_observations: true,
            normalize_rewards: false,
            normalize_advantages: false,
            policy_hidden: vec![64, 64],
            value_hidden: vec![64, 64],
            total_env_steps: DEFAULT_TOTAL_ENV_STEPS,
            eval_interval: 5,
            eval_episodes: 20,
            seeds: vec![0, 1, 2, 3, 4],
            output_dir: PathBuf::from("runs"),
        }
    }
}

/// Every recognized key, for error messages and documentation.
pub const KEYS: &[&str] = &[
    "env.id",
    "env.horizon",
    "env.dt",
    "env.num_envs",
    "algorithm.name",
    "algorithm.value_steps",
    "algorithm.learning_rate",
    "algorithm.policy_lr",
    "algorithm.value_lr",
    "algorithm.epochs",
    "algorithm.minibatch_size",
    "algorithm.clip_epsilon",
    "algorithm.entropy_coef",
    "algorithm.max_grad_norm",
    "algorithm.baseline",
    "gamma",
    "gae_lambda",
    "batch_size",
    "normalize.observations",
    "normalize.rewards",
    "normalize.advantages",
    "network.policy_hidden",
    "network.value_hidden",
    "total_env_steps",
    "eval.interval",
    "eval.episodes",
    "seeds",
    "output_dir",
];

fn parse_value<T: std::str::FromStr>(key: &str, value: &str, expected: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(key, format!("expected {expected}, got `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(Error::config(key, format!("expected a boolean, got `{other}`"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str, expected: &str) -> Result<Vec<T>> {
    value
        .trim()
        .trim_start_matches('[')
        .trim_end_matches(']')
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_value(key, s, expected))
        .collect()
}

/// Resolves short forms such as `value_steps` to `algorithm.value_steps`.
pub fn canonical_key(key: &str) -> Option<&'static str> {
    let key = key.trim();
    KEYS.iter().copied().find(|k| *k == key).or_else(|| {
        ["algorithm.", "env.", "normalize.", "network.", "eval."]
            .iter()
            .find_map(|prefix| KEYS.iter().copied().find(|k| k.strip_prefix(prefix) == Some(key)))
    })
}

impl ExperimentConfig {
    pub fn policy_lr(&self) -> f64 {
        self.policy_lr.unwrap_or(match self.algorithm {
            AlgorithmKind::Vpg => VpgConfig::default().policy_lr,
            AlgorithmKind::Ppo => PpoConfig::default().policy_lr,
        })
    }

    pub fn value_lr(&self) -> f64 {
        self.value_lr.unwrap_or(match self.algorithm {
            AlgorithmKind::Vpg => VpgConfig::default().value_lr,
            AlgorithmKind::Ppo => PpoConfig::default().value_lr,
        })
    }

    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or(match self.algorithm {
            AlgorithmKind::Vpg => 1,
            AlgorithmKind::Ppo => PpoConfig::default().epochs,
        })
    }

    pub fn minibatch_size(&self) -> usize {
        self.minibatch_size.unwrap_or(match self.algorithm {
            AlgorithmKind::Vpg => self.batch_size,
            AlgorithmKind::Ppo => PpoConfig::default().minibatch_size,
        })
    }

    pub fn horizon_per_env(&self) -> usize {
        self.batch_size / self.num_envs
    }

    pub fn iterations(&self) -> usize {
        self.total_env_steps / self.batch_size
    }

    pub fn gae(&self) -> GaeConfig {
        GaeConfig {
            gamma: self.gamma,
            lambda: self.gae_lambda,
        }
    }

    pub fn vpg(&self) -> VpgConfig {
        VpgConfig {
            value_steps: self.value_steps,
            policy_lr: self.policy_lr(),
            value_lr: self.value_lr(),
            max_grad_norm: self.max_grad_norm,
            entropy_coef: self.entropy_coef,
        }
    }

    pub fn ppo(&self) -> PpoConfig {
        PpoConfig {
            clip_epsilon: self.clip_epsilon,
            epochs: self.epochs(),
            minibatch_size: self.minibatch_size(),
            policy_lr: self.policy_lr(),
            value_lr: self.value_lr(),
            max_grad_norm: self.max_grad_norm,
            entropy_coef: self.entropy_coef,
        }
    }

    /// Gradient steps each network takes per iteration.
    pub fn steps_per_iteration(&self) -> (usize, usize) {
        match self.algorithm {
            AlgorithmKind::Vpg => (1, self.value_steps),
            AlgorithmKind::Ppo => {
                let n = self.ppo().steps_per_iteration(self.batch_size);
                (n, n)
            }
        }
    }

    /// Applies one `key = value` setting without validating cross-field
    /// constraints (see [`ExperimentConfig::validate`]).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let canonical = canonical_key(key).ok_or_else(|| Error::config(key, "unknown key"))?;
        let k = canonical;
        let v = value.trim();
        match k {
            "env.id" => {
                let kind = EnvKind::parse(v)
                    .ok_or_else(|| Error::config(k, format!("unknown environment `{v}`")))?;
                self.env = EnvConfig::new(kind);
            }
            "env.horizon" => self.env.horizon = parse_value(k, v, "a positive integer")?,
            "env.dt" => self.env.dt = parse_value(k, v, "a real number")?,
            "env.num_envs" => self.num_envs = parse_value(k, v, "a positive integer")?,
            "algorithm.name" => {
                self.algorithm = match v {
                    "vpg" => AlgorithmKind::Vpg,
                    "ppo" => AlgorithmKind::Ppo,
                    other => return Err(Error::config(k, format!("expected vpg or ppo, got `{other}`"))),
                }
            }
            "algorithm.value_steps" => self.value_steps = parse_value(k, v, "a positive integer")?,
            "algorithm.learning_rate" => {
                let lr = parse_value(k, v, "a real number")?;
                self.policy_lr = Some(lr);
                self.value_lr = Some(lr);
            }
            "algorithm.policy_lr" => self.policy_lr = Some(parse_value(k, v, "a real number")?),
            "algorithm.value_lr" => self.value_lr = Some(parse_value(k, v, "a real number")?),
            "algorithm.epochs" => self.epochs = Some(parse_value(k, v, "a positive integer")?),
            "algorithm.minibatch_size" => {
                self.minibatch_size = Some(parse_value(k, v, "a positive integer")?)
            }
            "algorithm.clip_epsilon" => self.clip_epsilon = parse_value(k, v, "a real number")?,
            "algorithm.entropy_coef" => self.entropy_coef = parse_value(k, v, "a real number")?,
            "algorithm.max_grad_norm" => self.max_grad_norm = parse_value(k, v, "a real number")?,
            "algorithm.baseline" => self.baseline = parse_bool(k, v)?,
            "gamma" => self.gamma = parse_value(k, v, "a real number")?,
            "gae_lambda" => self.gae_lambda = parse_value(k, v, "a real number")?,
            "batch_size" => self.batch_size = parse_value(k, v, "a positive integer")?,
            "normalize.observations" => self.normalize_observations = parse_bool(k, v)?,
            "normalize.rewards" => self.normalize_rewards = parse_bool(k, v)?,
            "normalize.advantages" => self.normalize_advantages = parse_bool(k, v)?,
            "network.policy_hidden" => self.policy_hidden = parse_list(k, v, "a list of widths")?,
            "network.value_hidden" => self.value_hidden = parse_list(k, v, "a list of widths")?,
            "total_env_steps" => self.total_env_steps = parse_value(k, v, "a positive integer")?,
            "eval.interval" => self.eval_interval = parse_value(k, v, "a positive integer")?,
            "eval.episodes" => self.eval_episodes = parse_value(k, v, "a positive integer")?,
            "seeds" => self.seeds = parse_list(k, v, "a list of integer seeds")?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            _ => unreachable!("every canonical key is handled"),
        }
        Ok(())
    }

    /// Applies `key=value` override strings in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config(o, "override must look like key=value"))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Parses the text of a config file on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}", lineno + 1), "expected `key = value`")
            })?;
            let key = if section.is_empty() {
                k.trim().to_string()
            } else {
                format!("{section}.{}", k.trim())
            };
            self.set(&key, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |k: &str, m: &str| Err(Error::config(k, m));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return fail("gamma", "must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return fail("gae_lambda", "must lie in [0, 1]");
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return fail("algorithm.clip_epsilon", "must lie in (0, 1)");
        }
        if self.value_steps == 0 {
            return fail("algorithm.value_steps", "must be at least 1");
        }
        if !(self.policy_lr() >= 0.0 && self.policy_lr().is_finite()) {
            return fail("algorithm.policy_lr", "must be a non-negative real");
        }
        if !(self.value_lr() >= 0.0 && self.value_lr().is_finite()) {
            return fail("algorithm.value_lr", "must be a non-negative real");
        }
        if !(self.max_grad_norm > 0.0) {
            return fail("algorithm.max_grad_norm", "must be positive");
        }
        if self.epochs() == 0 {
            return fail("algorithm.epochs", "must be at least 1");
        }
        if self.minibatch_size() == 0 || self.minibatch_size() > self.batch_size {
            return fail("algorithm.minibatch_size", "must lie in [1, batch_size]");
        }
        if self.algorithm == AlgorithmKind::Vpg
            && (self.epochs() != 1 || self.minibatch_size() != self.batch_size)
        {
            return fail("algorithm.epochs", "vpg uses one full-batch epoch");
        }
        if self.num_envs == 0 {
            return fail("env.num_envs", "must be positive");
        }
        if self.env.horizon == 0 {
            return fail("env.horizon", "must be positive");
        }
        if !(self.env.dt > 0.0 && self.env.dt.is_finite()) {
            return fail("env.dt", "must be positive");
        }
        if self.batch_size == 0 || self.batch_size % self.num_envs != 0 {
            return fail("batch_size", "must be a positive multiple of env.num_envs");
        }
        if self.total_env_steps == 0 || self.total_env_steps % self.batch_size != 0 {
            return fail("total_env_steps", "must be a positive multiple of batch_size");
        }
        if self.eval_interval == 0 || self.eval_episodes == 0 {
            return fail("eval.interval", "evaluation interval and episodes must be positive");
        }
        if self.policy_hidden.iter().chain(&self.value_hidden).any(|&w| w == 0) {
            return fail("network.policy_hidden", "hidden widths must be positive");
        }
        if self.seeds.is_empty() {
            return fail("seeds", "must not be empty");
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return fail("seeds", "must be distinct");
        }
        Ok(())
    }

    /// Flat `key = value` rendering that [`parse_config`] reads back.
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut lines = vec![
            format!("env.id = {}", self.env.kind.name()),
            format!("env.horizon = {}", self.env.horizon),
            format!("env.dt = {}", self.env.dt),
            format!("env.num_envs = {}", self.num_envs),
            format!(
                "algorithm.name = {}",
                match self.algorithm {
                    AlgorithmKind::Vpg => "vpg",
                    AlgorithmKind::Ppo => "ppo",
                }
            ),
            format!("algorithm.value_steps = {}", self.value_steps),
            format!("algorithm.policy_lr = {}", self.policy_lr()),
            format!("algorithm.value_lr = {}", self.value_lr()),
            format!("algorithm.epochs = {}", self.epochs()),
            format!("algorithm.minibatch_size = {}", self.minibatch_size()),
            format!("algorithm.clip_epsilon = {}", self.clip_epsilon),
            format!("algorithm.entropy_coef = {}", self.entropy_coef),
            format!("algorithm.max_grad_norm = {}", self.max_grad_norm),
            format!("algorithm.baseline = {}", self.baseline),
            format!("gamma = {}", self.gamma),
            format!("gae_lambda = {}", self.gae_lambda),
            format!("batch_size = {}", self.batch_size),
            format!("normalize.observations = {}", self.normalize_observations),
            format!("normalize.rewards = {}", self.normalize_rewards),
            format!("normalize.advantages = {}", self.normalize_advantages),
            format!("network.policy_hidden = {}", list(&self.policy_hidden)),
            format!("network.value_hidden = {}", list(&self.value_hidden)),
            format!("total_env_steps = {}", self.total_env_steps),
            format!("eval.interval = {}", self.eval_interval),
            format!("eval.episodes = {}", self.eval_episodes),
            format!(
                "seeds = {}",
                self.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
            ),
        ];
        lines.push(format!("output_dir = {}", self.output_dir.display()));
        lines.join("\n") + "\n"
    }
}

/// Defaults, then the optional file, then overrides; validated.
pub fn parse_config<S: AsRef<str>>(path: Option<&Path>, overrides: &[S]) -> Result<ExperimentConfig> {
    parse_config_from(ExperimentConfig::default(), path, overrides)
}

/// [`parse_config`] starting from `base` instead of the built-in defaults.
pub fn parse_config_from<S: AsRef<str>>(
    mut cfg: ExperimentConfig,
    path: Option<&Path>,
    overrides: &[S],
) -> Result<ExperimentConfig> {
    if let Some(path) = path {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        cfg.apply_text(&text)?;
    }
    cfg.apply_overrides(overrides)?;
    cfg.validate()?;
    Ok(cfg)
}
