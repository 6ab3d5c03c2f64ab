//! On-policy batch collection, streaming normalizers and advantage
//! estimation.
//!
//! Batches are stored time-major: transition `(t, env)` lives at index
//! `t * num_envs + env`.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::VecEnv;
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::policy::GaussianPolicy;

pub const OBS_CLIP: f64 = 10.0;
pub const NORM_EPSILON: f64 = 1e-8;

/// Streaming count / mean / sum of squared deviations (Welford).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningMoments {
    pub count: f64,
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
}

impl RunningMoments {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn update(&mut self, sample: &[f64]) {
        debug_assert_eq!(sample.len(), self.dim());
        self.count += 1.0;
        for ((mean, m2), &x) in self.mean.iter_mut().zip(&mut self.m2).zip(sample) {
            let delta = x - *mean;
            *mean += delta / self.count;
            *m2 += delta * (x - *mean);
        }
    }

    /// Population variance; zero before any sample.
    pub fn variance(&self) -> Vec<f64> {
        if self.count == 0.0 {
            return vec![0.0; self.dim()];
        }
        self.m2.iter().map(|m2| (m2 / self.count).max(0.0)).collect()
    }

    /// Combine with the statistics of a disjoint stream.
    pub fn merge(&mut self, other: &RunningMoments) {
        if other.count == 0.0 {
            return;
        }
        if self.count == 0.0 {
            *self = other.clone();
            return;
        }
        let total = self.count + other.count;
        for i in 0..self.dim() {
            let delta = other.mean[i] - self.mean[i];
            self.mean[i] += delta * other.count / total;
            self.m2[i] += other.m2[i] + delta * delta * self.count * other.count / total;
        }
        self.count = total;
    }
}

/// `(obs - mean) / sqrt(var + eps)`, clipped to `[-10, 10]`.
pub fn normalize_observation(moments: &RunningMoments, obs: &[f64]) -> Vec<f64> {
    moments
        .mean
        .iter()
        .zip(moments.variance())
        .zip(obs)
        .map(|((m, v), x)| ((x - m) / (v + NORM_EPSILON).sqrt()).clamp(-OBS_CLIP, OBS_CLIP))
        .collect()
}

/// Scales rewards by the running standard deviation of a per-env discounted
/// reward sum. The mean is never subtracted.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardNormalizer {
    pub gamma: f64,
    pub accumulators: Vec<f64>,
    pub moments: RunningMoments,
}

impl RewardNormalizer {
    pub fn new(num_envs: usize, gamma: f64) -> Self {
        Self {
            gamma,
            accumulators: vec![0.0; num_envs],
            moments: RunningMoments::new(1),
        }
    }

    /// Current divisor `sqrt(var + eps)`.
    pub fn scale(&self) -> f64 {
        (self.moments.variance()[0] + NORM_EPSILON).sqrt()
    }

    /// Folds `reward` into env `env`'s accumulator and returns the scaled
    /// reward. `done` marks the last step of an episode; the accumulator
    /// restarts for the next one.
    pub fn normalize(&mut self, env: usize, reward: f64, done: bool) -> f64 {
        let acc = self.gamma * self.accumulators[env] + reward;
        self.moments.update(&[acc]);
        self.accumulators[env] = if done { 0.0 } else { acc };
        reward / self.scale()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaeConfig {
    pub gamma: f64,
    pub lambda: f64,
}

impl Default for GaeConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub num_envs: usize,
    pub horizon: usize,
    pub observations: Array2<f64>,
    pub raw_observations: Array2<f64>,
    pub actions: Array2<f64>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub raw_rewards: Vec<f64>,
    pub value_predictions: Vec<f64>,
    pub terminated: Vec<bool>,
    pub truncated: Vec<bool>,
    /// `V(s_{t+1})` for transitions that hit the time limit, zero elsewhere.
    pub truncation_values: Vec<f64>,
    /// `V(s_{T+1})` per env for the state after the last collected step.
    pub bootstrap_values: Vec<f64>,
    /// Undiscounted raw returns of episodes that finished in this batch.
    pub episode_returns: Vec<f64>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_probs.is_empty()
    }

    /// Same transitions with every value estimate replaced by zero, which
    /// turns the advantage into the plain discounted return.
    pub fn with_zero_baseline(&self) -> Self {
        let mut batch = self.clone();
        batch.value_predictions.iter_mut().for_each(|v| *v = 0.0);
        batch.truncation_values.iter_mut().for_each(|v| *v = 0.0);
        batch.bootstrap_values.iter_mut().for_each(|v| *v = 0.0);
        batch
    }

    fn next_value(&self, t: usize, env: usize) -> f64 {
        let i = t * self.num_envs + env;
        if self.terminated[i] {
            0.0
        } else if self.truncated[i] {
            self.truncation_values[i]
        } else if t + 1 == self.horizon {
            self.bootstrap_values[env]
        } else {
            self.value_predictions[i + self.num_envs]
        }
    }
}

/// GAE(lambda) advantages and `advantage + value` regression targets.
pub fn compute_gae(batch: &RolloutBatch, cfg: GaeConfig) -> (Vec<f64>, Vec<f64>) {
    let n = batch.num_envs;
    let mut advantages = vec![0.0; batch.len()];
    for env in 0..n {
        let mut next_adv = 0.0;
        for t in (0..batch.horizon).rev() {
            let i = t * n + env;
            let done = batch.terminated[i] || batch.truncated[i];
            let delta = batch.rewards[i] + cfg.gamma * batch.next_value(t, env)
                - batch.value_predictions[i];
            let carry = if done { 0.0 } else { next_adv };
            next_adv = delta + cfg.gamma * cfg.lambda * carry;
            advantages[i] = next_adv;
        }
    }
    let targets = advantages
        .iter()
        .zip(&batch.value_predictions)
        .map(|(a, v)| a + v)
        .collect();
    (advantages, targets)
}

/// Bootstrapped discounted-return targets, summed forward from each step to
/// its episode or batch boundary.
pub fn monte_carlo_targets(batch: &RolloutBatch, gamma: f64) -> Vec<f64> {
    let n = batch.num_envs;
    let mut targets = vec![0.0; batch.len()];
    for env in 0..n {
        for t in 0..batch.horizon {
            let mut total = 0.0;
            let mut discount = 1.0;
            for k in t..batch.horizon {
                let i = k * n + env;
                total += discount * batch.rewards[i];
                discount *= gamma;
                if batch.terminated[i] {
                    break;
                }
                if batch.truncated[i] {
                    total += discount * batch.truncation_values[i];
                    break;
                }
                if k + 1 == batch.horizon {
                    total += discount * batch.bootstrap_values[env];
                }
            }
            targets[t * n + env] = total;
        }
    }
    targets
}

/// Shift to zero batch mean and scale to unit (population) variance.
pub fn normalize_advantages(advantages: &[f64]) -> Vec<f64> {
    let n = advantages.len() as f64;
    let mean = advantages.iter().sum::<f64>() / n;
    let var = advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = (var + NORM_EPSILON).sqrt();
    advantages.iter().map(|a| (a - mean) / std).collect()
}

/// Persistent collection state: environments, normalizers and partial
/// episode returns carried from one batch into the next.
#[derive(Debug, Clone, PartialEq)]
pub struct Collector {
    pub venv: VecEnv,
    pub obs_moments: Option<RunningMoments>,
    pub reward_normalizer: Option<RewardNormalizer>,
    pub episode_accumulators: Vec<f64>,
}

impl Collector {
    /// The first observation of every env is folded into the observation
    /// statistics here.
    pub fn new(venv: VecEnv, normalize_obs: bool, normalize_rewards: bool, gamma: f64) -> Self {
        let n = venv.num_envs();
        let obs_moments = normalize_obs.then(|| {
            let mut m = RunningMoments::new(venv.config().obs_dim());
            for row in venv.observations().rows() {
                m.update(&row.to_vec());
            }
            m
        });
        Self {
            obs_moments,
            reward_normalizer: normalize_rewards.then(|| RewardNormalizer::new(n, gamma)),
            episode_accumulators: vec![0.0; n],
            venv,
        }
    }

    /// Observation as fed to the networks, using frozen statistics.
    pub fn normalize(&self, obs: &[f64]) -> Vec<f64> {
        match &self.obs_moments {
            Some(m) => normalize_observation(m, obs),
            None => obs.to_vec(),
        }
    }

    fn normalize_rows(&self, raw: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = raw.to_owned();
        if self.obs_moments.is_some() {
            for mut row in out.rows_mut() {
                let normalized = self.normalize(&row.to_vec());
                row.assign(&ArrayView1::from(&normalized));
            }
        }
        out
    }

    /// Divisor applied to rewards (1 when reward normalization is off).
    pub fn reward_scale(&self) -> f64 {
        self.reward_normalizer.as_ref().map_or(1.0, RewardNormalizer::scale)
    }

    /// Runs exactly `horizon` steps in every env.
    pub fn collect<R: Rng>(
        &mut self,
        policy: &GaussianPolicy,
        value: &Mlp,
        horizon: usize,
        rng: &mut R,
    ) -> Result<RolloutBatch> {
        let n = self.venv.num_envs();
        let obs_dim = self.venv.config().obs_dim();
        let act_dim = self.venv.config().action_dim();
        let total = n * horizon;
        let mut batch = RolloutBatch {
            num_envs: n,
            horizon,
            observations: Array2::zeros((total, obs_dim)),
            raw_observations: Array2::zeros((total, obs_dim)),
            actions: Array2::zeros((total, act_dim)),
            log_probs: Vec::with_capacity(total),
            rewards: Vec::with_capacity(total),
            raw_rewards: Vec::with_capacity(total),
            value_predictions: Vec::with_capacity(total),
            terminated: Vec::with_capacity(total),
            truncated: Vec::with_capacity(total),
            truncation_values: Vec::with_capacity(total),
            bootstrap_values: Vec::with_capacity(n),
            episode_returns: Vec::new(),
        };

        let mut raw = self.venv.observations();
        for t in 0..horizon {
            let obs = self.normalize_rows(raw.view());
            let values = value.forward_batch(obs.view())?;
            let (actions, log_probs) = policy.sample_batch(obs.view(), rng)?;
            if !values.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("value prediction at step {t}")));
            }
            let step = self.venv.step(actions.view())?;

            let rows = t * n..(t + 1) * n;
            batch.observations.slice_mut(ndarray::s![rows.clone(), ..]).assign(&obs);
            batch.raw_observations.slice_mut(ndarray::s![rows.clone(), ..]).assign(&raw);
            batch.actions.slice_mut(ndarray::s![rows, ..]).assign(&actions);
            batch.log_probs.extend_from_slice(&log_probs);
            batch.value_predictions.extend(values.iter().copied());

            for env in 0..n {
                let r = step.rewards[env];
                let done = step.terminated[env] || step.truncated[env];
                let scaled = match &mut self.reward_normalizer {
                    Some(norm) => norm.normalize(env, r, done),
                    None => r,
                };
                batch.raw_rewards.push(r);
                batch.rewards.push(scaled);
                batch.terminated.push(step.terminated[env]);
                batch.truncated.push(step.truncated[env]);
                self.episode_accumulators[env] += r;
                if done {
                    batch.episode_returns.push(self.episode_accumulators[env]);
                    self.episode_accumulators[env] = 0.0;
                }
                let trunc_value = match (&step.final_observations[env], step.truncated[env]) {
                    (Some(final_obs), true) => {
                        let v = value.forward(&self.normalize(final_obs))?[0];
                        if !v.is_finite() {
                            return Err(Error::NonFinite(format!("truncation value at step {t}")));
                        }
                        v
                    }
                    _ => 0.0,
                };
                batch.truncation_values.push(trunc_value);
            }

            if let Some(m) = &mut self.obs_moments {
                for row in step.observations.rows() {
                    m.update(&row.to_vec());
                }
            }
            raw = step.observations;
        }

        let last = self.normalize_rows(raw.view());
        let bootstrap = value.forward_batch(last.view())?;
        batch.bootstrap_values.extend(bootstrap.iter().copied());
        if !batch.bootstrap_values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("bootstrap value".into()));
        }
        Ok(batch)
    }
}
