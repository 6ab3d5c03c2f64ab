//! Diagonal Gaussian policy: an MLP mean head plus state-independent,
//! learnable log standard deviations. Actions are not squashed.

use std::f64::consts::{E, PI};

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_len, Error, Result};
use crate::nn::{AdamState, Gradient, Mlp, MlpSpec, Tape};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Output-layer gain for a fresh mean head; keeps initial actions near zero.
pub const MEAN_HEAD_GAIN: f64 = 0.01;

const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq)]
pub struct ActionSample {
    pub action: Vec<f64>,
    pub log_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    pub mean_net: Mlp,
    pub log_std: Vec<f64>,
}

/// Batched log-density evaluation, kept for a subsequent backward pass.
pub struct PolicyEval {
    tape: Tape,
    pub log_probs: Vec<f64>,
    actions: Array2<f64>,
}

impl PolicyEval {
    pub fn means(&self) -> &Array2<f64> {
        self.tape.output()
    }
}

/// Distribution parameters of a policy on a fixed observation batch,
/// used as the "old" side of KL measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct DistStats {
    pub means: Array2<f64>,
    pub log_std: Vec<f64>,
}

fn log_density_row(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(action)
        .map(|((&mu, &ls), &a)| {
            let z = (a - mu) * (-ls).exp();
            -0.5 * z * z - ls - HALF_LOG_2PI
        })
        .sum()
}

impl GaussianPolicy {
    pub fn new(spec: MlpSpec, seed: u64) -> Result<Self> {
        Self::with_head_gain(spec, seed, MEAN_HEAD_GAIN)
    }

    pub fn with_head_gain(spec: MlpSpec, seed: u64, head_gain: f64) -> Result<Self> {
        let action_dim = spec.output_dim;
        Ok(Self {
            mean_net: Mlp::init(spec, seed, head_gain)?,
            log_std: vec![0.0; action_dim],
        })
    }

    pub fn from_parts(mean_net: Mlp, log_std: Vec<f64>) -> Result<Self> {
        check_len("policy log_std", mean_net.output_dim(), log_std.len())?;
        let mut policy = Self { mean_net, log_std };
        policy.clamp_log_std();
        Ok(policy)
    }

    pub fn obs_dim(&self) -> usize {
        self.mean_net.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.log_std.len()
    }

    /// Number of trainable scalars: mean-net weights followed by log_std.
    pub fn parameter_count(&self) -> usize {
        self.mean_net.parameter_count() + self.log_std.len()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut flat = self.mean_net.params.0.clone();
        flat.extend_from_slice(&self.log_std);
        flat
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        check_len("policy flat parameters", self.parameter_count(), flat.len())?;
        let n = self.mean_net.parameter_count();
        self.mean_net.params.0.copy_from_slice(&flat[..n]);
        self.log_std.copy_from_slice(&flat[n..]);
        self.clamp_log_std();
        Ok(())
    }

    pub fn clamp_log_std(&mut self) {
        for ls in &mut self.log_std {
            *ls = ls.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
    }

    /// One Adam step on the joint (mean-net, log_std) vector, followed by the
    /// log_std clamp.
    pub fn apply_adam(&mut self, adam: &mut AdamState, grad: &Gradient) -> Result<()> {
        let mut flat = self.flat_params();
        adam.step(&mut flat, grad)?;
        self.set_flat_params(&flat)
    }

    pub fn deterministic_action(&self, obs: &[f64]) -> Result<Vec<f64>> {
        self.mean_net.forward(obs)
    }

    pub fn mean_batch(&self, obs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.mean_net.forward_batch(obs)
    }

    pub fn sample<R: Rng>(&self, obs: &[f64], rng: &mut R) -> Result<ActionSample> {
        let mean = self.deterministic_action(obs)?;
        Ok(self.sample_around(&mean, rng))
    }

    fn sample_around<R: Rng>(&self, mean: &[f64], rng: &mut R) -> ActionSample {
        let action: Vec<f64> = mean
            .iter()
            .zip(&self.log_std)
            .map(|(&mu, &ls)| {
                let z: f64 = StandardNormal.sample(rng);
                mu + ls.exp() * z
            })
            .collect();
        let log_prob = log_density_row(mean, &self.log_std, &action);
        ActionSample { action, log_prob }
    }

    /// Samples one action per row; noise is drawn row by row, in order.
    pub fn sample_batch<R: Rng>(
        &self,
        obs: ArrayView2<'_, f64>,
        rng: &mut R,
    ) -> Result<(Array2<f64>, Vec<f64>)> {
        let means = self.mean_batch(obs)?;
        let mut actions = Array2::zeros(means.raw_dim());
        let mut log_probs = Vec::with_capacity(means.nrows());
        for (mean, mut out) in means.rows().into_iter().zip(actions.rows_mut()) {
            let mean = mean.to_vec();
            if !mean.iter().all(|m| m.is_finite()) {
                return Err(Error::NonFinite("policy mean output".into()));
            }
            let s = self.sample_around(&mean, rng);
            out.assign(&ndarray::ArrayView1::from(&s.action));
            log_probs.push(s.log_prob);
        }
        Ok((actions, log_probs))
    }

    pub fn log_density(&self, obs: &[f64], action: &[f64]) -> Result<f64> {
        check_len("policy action", self.action_dim(), action.len())?;
        let mean = self.deterministic_action(obs)?;
        Ok(log_density_row(&mean, &self.log_std, action))
    }

    /// Log-densities of a batch of stored actions, with the forward tape
    /// retained for [`GaussianPolicy::log_prob_gradient`].
    pub fn evaluate(&self, obs: ArrayView2<'_, f64>, actions: ArrayView2<'_, f64>) -> Result<PolicyEval> {
        check_len("policy action batch rows", obs.nrows(), actions.nrows())?;
        check_len("policy action batch width", self.action_dim(), actions.ncols())?;
        let tape = self.mean_net.forward_tape(obs)?;
        let log_probs = tape
            .output()
            .rows()
            .into_iter()
            .zip(actions.rows())
            .map(|(mean, action)| {
                log_density_row(
                    mean.as_slice().expect("standard layout"),
                    &self.log_std,
                    &action.to_vec(),
                )
            })
            .collect();
        Ok(PolicyEval {
            tape,
            log_probs,
            actions: actions.to_owned(),
        })
    }

    /// Gradient of `sum_b weights[b] * log pi(a_b | s_b)` with respect to the
    /// flat (mean-net, log_std) parameters.
    pub fn log_prob_gradient(&self, eval: &PolicyEval, weights: &[f64]) -> Result<Gradient> {
        let means = eval.means();
        check_len("policy gradient weights", means.nrows(), weights.len())?;
        let inv_var: Vec<f64> = self.log_std.iter().map(|ls| (-2.0 * ls).exp()).collect();
        let mut upstream = Array2::zeros(means.raw_dim());
        let mut log_std_grad = vec![0.0; self.action_dim()];
        for (b, &w) in weights.iter().enumerate() {
            for i in 0..self.action_dim() {
                let diff = eval.actions[[b, i]] - means[[b, i]];
                upstream[[b, i]] = w * diff * inv_var[i];
                log_std_grad[i] += w * (diff * diff * inv_var[i] - 1.0);
            }
        }
        let mut grad = vec![0.0; self.parameter_count()];
        let n = self.mean_net.parameter_count();
        self.mean_net
            .backward_batch(&eval.tape, upstream.view(), &mut grad[..n])?;
        grad[n..].copy_from_slice(&log_std_grad);
        Ok(Gradient(grad))
    }

    pub fn entropy(&self) -> f64 {
        self.log_std
            .iter()
            .map(|ls| ls + 0.5 * (2.0 * PI * E).ln())
            .sum()
    }

    /// Gradient of [`GaussianPolicy::entropy`] in the flat parameter layout.
    pub fn entropy_gradient(&self) -> Gradient {
        let mut grad = vec![0.0; self.parameter_count()];
        let n = self.mean_net.parameter_count();
        grad[n..].iter_mut().for_each(|g| *g = 1.0);
        Gradient(grad)
    }

    pub fn dist_stats(&self, obs: ArrayView2<'_, f64>) -> Result<DistStats> {
        Ok(DistStats {
            means: self.mean_batch(obs)?,
            log_std: self.log_std.clone(),
        })
    }
}

/// Batch mean of the closed-form KL(old || new) between diagonal Gaussians.
pub fn gaussian_kl(old: &DistStats, new: &GaussianPolicy, obs: ArrayView2<'_, f64>) -> Result<f64> {
    check_len("kl observation rows", old.means.nrows(), obs.nrows())?;
    Ok(kl_between(old, &new.dist_stats(obs)?))
}

/// Batch mean of KL(p || q) for two sets of distribution parameters over the
/// same rows.
pub fn kl_between(p: &DistStats, q: &DistStats) -> f64 {
    let rows = p.means.nrows();
    if rows == 0 {
        return 0.0;
    }
    let total: f64 = p
        .means
        .axis_iter(Axis(0))
        .zip(q.means.axis_iter(Axis(0)))
        .map(|(mp, mq)| {
            (0..p.log_std.len())
                .map(|i| {
                    let (lp, lq) = (p.log_std[i], q.log_std[i]);
                    let diff = mp[i] - mq[i];
                    lq - lp + ((2.0 * lp).exp() + diff * diff) / (2.0 * (2.0 * lq).exp()) - 0.5
                })
                .sum::<f64>()
        })
        .sum();
    total / rows as f64
}
