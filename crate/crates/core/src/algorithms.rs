//! VPG with repeated value steps, PPO, and the value-step requirement
//! calculator.
//!
//! Losses follow the minimization convention: the policy objectives are
//! negated before differentiation.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::nn::{clip_grad_norm, AdamState, Gradient, Mlp};
use crate::policy::{kl_between, GaussianPolicy};
use crate::rollout::RolloutBatch;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VpgConfig {
    pub value_steps: usize,
    pub policy_lr: f64,
    pub value_lr: f64,
    pub max_grad_norm: f64,
    pub entropy_coef: f64,
}

impl Default for VpgConfig {
    fn default() -> Self {
        Self {
            value_steps: 1,
            policy_lr: 7e-4,
            value_lr: 7e-4,
            max_grad_norm: 1.0,
            entropy_coef: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub clip_epsilon: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub policy_lr: f64,
    pub value_lr: f64,
    pub max_grad_norm: f64,
    pub entropy_coef: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_epsilon: 0.2,
            epochs: 10,
            minibatch_size: 64,
            policy_lr: 3e-4,
            value_lr: 3e-4,
            max_grad_norm: 1.0,
            entropy_coef: 0.0,
        }
    }
}

impl PpoConfig {
    /// Gradient steps per network per iteration: `epochs * ceil(batch / minibatch)`.
    pub fn steps_per_iteration(&self, batch_size: usize) -> usize {
        self.epochs * batch_size.div_ceil(self.minibatch_size)
    }
}

/// Policy and value networks with their optimizers.
#[derive(Debug, Clone, PartialEq)]
pub struct Learner {
    pub policy: GaussianPolicy,
    pub value: Mlp,
    pub policy_adam: AdamState,
    pub value_adam: AdamState,
}

impl Learner {
    pub fn new(policy: GaussianPolicy, value: Mlp, policy_lr: f64, value_lr: f64) -> Self {
        Self {
            policy_adam: AdamState::new(policy.parameter_count(), policy_lr),
            value_adam: AdamState::new(value.parameter_count(), value_lr),
            policy,
            value,
        }
    }
}

/// Per-iteration training measurements.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub policy_loss: f64,
    pub value_loss_before: f64,
    pub value_loss_after: f64,
    pub policy_grad_norm: f64,
    pub value_grad_norm: f64,
    pub policy_steps: usize,
    pub value_steps: usize,
    pub max_ratio: f64,
    pub min_ratio: f64,
    pub clip_fraction: f64,
    pub policy_kl: f64,
    pub entropy: f64,
}

/// `(max r, min r, fraction with |r - 1| > eps)` for `r = exp(new - old)`.
pub fn ratio_stats(old_log_probs: &[f64], new_log_probs: &[f64], epsilon: f64) -> (f64, f64, f64) {
    debug_assert_eq!(old_log_probs.len(), new_log_probs.len());
    let mut max = f64::NEG_INFINITY;
    let mut min = f64::INFINITY;
    let mut clipped = 0usize;
    for (old, new) in old_log_probs.iter().zip(new_log_probs) {
        let r = (new - old).exp();
        max = max.max(r);
        min = min.min(r);
        if (r - 1.0).abs() > epsilon {
            clipped += 1;
        }
    }
    (max, min, clipped as f64 / old_log_probs.len().max(1) as f64)
}

fn select_rows(matrix: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    matrix.select(Axis(0), rows)
}

fn finite_or(context: &str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite(context.to_string()))
    }
}

/// `-mean(log pi(a|s) * A) - entropy_coef * entropy` and its gradient; the
/// advantages are constants.
pub fn vpg_policy_loss(
    policy: &GaussianPolicy,
    obs: &Array2<f64>,
    actions: &Array2<f64>,
    advantages: &[f64],
    entropy_coef: f64,
) -> Result<(f64, Gradient)> {
    check_len("vpg advantages", obs.nrows(), advantages.len())?;
    let eval = policy.evaluate(obs.view(), actions.view())?;
    let n = advantages.len() as f64;
    let objective: f64 = eval.log_probs.iter().zip(advantages).map(|(lp, a)| lp * a).sum::<f64>() / n;
    let weights: Vec<f64> = advantages.iter().map(|a| -a / n).collect();
    let mut grad = policy.log_prob_gradient(&eval, &weights)?;
    let mut loss = -objective;
    if entropy_coef != 0.0 {
        loss -= entropy_coef * policy.entropy();
        for (g, e) in grad.0.iter_mut().zip(policy.entropy_gradient().0) {
            *g -= entropy_coef * e;
        }
    }
    Ok((loss, grad))
}

/// Mean squared error between `V(obs)` and fixed targets, and its gradient.
pub fn value_loss(value: &Mlp, obs: &Array2<f64>, targets: &[f64]) -> Result<(f64, Gradient)> {
    check_len("value targets", obs.nrows(), targets.len())?;
    let tape = value.forward_tape(obs.view())?;
    let n = targets.len() as f64;
    let residuals: Vec<f64> = tape.output().iter().zip(targets).map(|(v, t)| v - t).collect();
    let loss = residuals.iter().map(|r| r * r).sum::<f64>() / n;
    let upstream = Array2::from_shape_vec((residuals.len(), 1), residuals.iter().map(|r| 2.0 * r / n).collect())
        .expect("column vector");
    let mut grad = Gradient::zeros(value.parameter_count());
    value.backward_batch(&tape, upstream.view(), &mut grad.0)?;
    Ok((loss, grad))
}

/// Value of the loss alone.
pub fn value_mse(value: &Mlp, obs: &Array2<f64>, targets: &[f64]) -> Result<f64> {
    check_len("value targets", obs.nrows(), targets.len())?;
    let out = value.forward_batch(obs.view())?;
    Ok(out.iter().zip(targets).map(|(v, t)| (v - t).powi(2)).sum::<f64>() / targets.len() as f64)
}

/// Clipped surrogate loss, `-mean min(r A, clip(r, 1-eps, 1+eps) A)`, with
/// its gradient. Samples where the clipped branch is the minimum contribute
/// no gradient.
pub fn ppo_clipped_loss(
    policy: &GaussianPolicy,
    obs: &Array2<f64>,
    actions: &Array2<f64>,
    advantages: &[f64],
    old_log_probs: &[f64],
    epsilon: f64,
    entropy_coef: f64,
) -> Result<(f64, Gradient)> {
    check_len("ppo advantages", obs.nrows(), advantages.len())?;
    check_len("ppo old log-probs", obs.nrows(), old_log_probs.len())?;
    let eval = policy.evaluate(obs.view(), actions.view())?;
    let n = advantages.len() as f64;
    let mut objective = 0.0;
    let weights: Vec<f64> = eval
        .log_probs
        .iter()
        .zip(old_log_probs)
        .zip(advantages)
        .map(|((new, old), &adv)| {
            let r = (new - old).exp();
            let unclipped = r * adv;
            let clipped = r.clamp(1.0 - epsilon, 1.0 + epsilon) * adv;
            if unclipped <= clipped {
                objective += unclipped;
                // d(r A)/d log pi = r A
                -unclipped / n
            } else {
                objective += clipped;
                0.0
            }
        })
        .collect();
    let mut grad = policy.log_prob_gradient(&eval, &weights)?;
    let mut loss = -objective / n;
    if entropy_coef != 0.0 {
        loss -= entropy_coef * policy.entropy();
        for (g, e) in grad.0.iter_mut().zip(policy.entropy_gradient().0) {
            *g -= entropy_coef * e;
        }
    }
    Ok((loss, grad))
}

fn policy_step(learner: &mut Learner, mut grad: Gradient, max_norm: f64) -> Result<f64> {
    let norm = clip_grad_norm(&mut grad, max_norm);
    learner.policy.apply_adam(&mut learner.policy_adam, &grad)?;
    Ok(norm)
}

fn value_step(learner: &mut Learner, mut grad: Gradient, max_norm: f64) -> Result<f64> {
    let norm = clip_grad_norm(&mut grad, max_norm);
    learner
        .value_adam
        .step(learner.value.params.as_mut_slice(), &grad)?;
    Ok(norm)
}

fn finish_stats(
    learner: &Learner,
    batch: &RolloutBatch,
    old_dist: &crate::policy::DistStats,
    epsilon: f64,
    stats: &mut IterationStats,
) -> Result<()> {
    let eval = learner
        .policy
        .evaluate(batch.observations.view(), batch.actions.view())?;
    let (max, min, frac) = ratio_stats(&batch.log_probs, &eval.log_probs, epsilon);
    stats.max_ratio = max;
    stats.min_ratio = min;
    stats.clip_fraction = frac;
    let new_dist = learner.policy.dist_stats(batch.observations.view())?;
    stats.policy_kl = kl_between(old_dist, &new_dist);
    stats.entropy = learner.policy.entropy();
    finite_or("policy after update", stats.max_ratio)?;
    Ok(())
}

/// One policy step on the advantage-weighted log-likelihood, then
/// `value_steps` full-batch steps on the value regression against targets
/// computed before the loop.
///
/// `ratio_epsilon` only sets the threshold used for the clip-fraction
/// statistic.
pub fn vpg_update(
    learner: &mut Learner,
    batch: &RolloutBatch,
    advantages: &[f64],
    targets: &[f64],
    cfg: &VpgConfig,
    ratio_epsilon: f64,
) -> Result<IterationStats> {
    let old_dist = learner.policy.dist_stats(batch.observations.view())?;
    let mut stats = IterationStats::default();

    let (loss, grad) = vpg_policy_loss(
        &learner.policy,
        &batch.observations,
        &batch.actions,
        advantages,
        cfg.entropy_coef,
    )?;
    stats.policy_loss = finite_or("vpg policy loss", loss)?;
    stats.policy_grad_norm = policy_step(learner, grad, cfg.max_grad_norm)?;
    stats.policy_steps = 1;

    for k in 0..cfg.value_steps {
        let (loss, grad) = value_loss(&learner.value, &batch.observations, targets)?;
        let loss = finite_or("vpg value loss", loss)?;
        if k == 0 {
            stats.value_loss_before = loss;
        }
        stats.value_grad_norm = value_step(learner, grad, cfg.max_grad_norm)?;
        stats.value_steps += 1;
    }
    stats.value_loss_after = finite_or(
        "vpg value loss",
        value_mse(&learner.value, &batch.observations, targets)?,
    )?;
    finish_stats(learner, batch, &old_dist, ratio_epsilon, &mut stats)?;
    Ok(stats)
}

/// `epochs` passes over seeded shuffles of the batch; each mini-batch takes
/// one clipped-surrogate policy step and one value step.
pub fn ppo_update<R: Rng>(
    learner: &mut Learner,
    batch: &RolloutBatch,
    advantages: &[f64],
    targets: &[f64],
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<IterationStats> {
    check_len("ppo advantages", batch.len(), advantages.len())?;
    check_len("ppo targets", batch.len(), targets.len())?;
    let old_dist = learner.policy.dist_stats(batch.observations.view())?;
    let mut stats = IterationStats {
        value_loss_before: value_mse(&learner.value, &batch.observations, targets)?,
        ..Default::default()
    };
    let mut indices: Vec<usize> = (0..batch.len()).collect();
    let mut loss_sum = 0.0;
    for _ in 0..cfg.epochs {
        indices.shuffle(rng);
        for chunk in indices.chunks(cfg.minibatch_size) {
            let obs = select_rows(&batch.observations, chunk);
            let actions = select_rows(&batch.actions, chunk);
            let adv: Vec<f64> = chunk.iter().map(|&i| advantages[i]).collect();
            let old: Vec<f64> = chunk.iter().map(|&i| batch.log_probs[i]).collect();
            let tgt: Vec<f64> = chunk.iter().map(|&i| targets[i]).collect();

            let (loss, grad) = ppo_clipped_loss(
                &learner.policy,
                &obs,
                &actions,
                &adv,
                &old,
                cfg.clip_epsilon,
                cfg.entropy_coef,
            )?;
            loss_sum += finite_or("ppo policy loss", loss)?;
            stats.policy_grad_norm = policy_step(learner, grad, cfg.max_grad_norm)?;
            stats.policy_steps += 1;

            let (vloss, vgrad) = value_loss(&learner.value, &obs, &tgt)?;
            finite_or("ppo value loss", vloss)?;
            stats.value_grad_norm = value_step(learner, vgrad, cfg.max_grad_norm)?;
            stats.value_steps += 1;
        }
    }
    stats.policy_loss = loss_sum / stats.policy_steps.max(1) as f64;
    stats.value_loss_after = finite_or(
        "ppo value loss",
        value_mse(&learner.value, &batch.observations, targets)?,
    )?;
    finish_stats(learner, batch, &old_dist, cfg.clip_epsilon, &mut stats)?;
    Ok(stats)
}

/// Hölder exponent of the objective, `min(1, -ln(gamma) / lyapunov)`;
/// non-positive exponents give the smooth case `1`.
pub fn holder_alpha(gamma: f64, lyapunov: f64) -> f64 {
    if lyapunov <= 0.0 {
        1.0
    } else {
        (-gamma.ln() / lyapunov).min(1.0)
    }
}

/// Lower bound on value steps per policy step,
/// `k1 * policy_lr^alpha / (k2 * value_lr)`.
pub fn required_value_steps(k1: f64, k2: f64, policy_lr: f64, value_lr: f64, gamma: f64, lyapunov: f64) -> f64 {
    let alpha = holder_alpha(gamma, lyapunov);
    k1 * policy_lr.powf(alpha) / (k2 * value_lr)
}
