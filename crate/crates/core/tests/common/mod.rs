//! Oracles shared by the focused tests and the acceptance suite.
#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vsrl_core::nn::{Gradient, Mlp, MlpSpec};
use vsrl_core::policy::GaussianPolicy;
use vsrl_core::rollout::RolloutBatch;

pub const FD_STEP: f64 = 1e-6;

/// A random small policy/value pair with a random batch of data.
pub struct Instance {
    pub policy: GaussianPolicy,
    pub value: Mlp,
    pub obs: Array2<f64>,
    pub actions: Array2<f64>,
    pub advantages: Vec<f64>,
    pub targets: Vec<f64>,
}

pub fn instance(case: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + case);
    let obs_dim = rng.random_range(1..=4);
    let act_dim = rng.random_range(1..=3);
    let hidden: Vec<usize> = (0..rng.random_range(1..=2)).map(|_| rng.random_range(2..=6)).collect();
    let spec = MlpSpec::new(obs_dim, &hidden, act_dim).unwrap();
    // A large head gain keeps the mean network far from linear.
    let mut policy = GaussianPolicy::with_head_gain(spec, case, 1.0).unwrap();
    for ls in &mut policy.log_std {
        *ls = rng.random_range(-1.0..0.5);
    }
    let value = Mlp::init(MlpSpec::new(obs_dim, &hidden, 1).unwrap(), case + 7, 1.0).unwrap();
    let batch = rng.random_range(3..=12);
    let obs = Array2::from_shape_fn((batch, obs_dim), |_| rng.random_range(-2.0..2.0));
    let actions = Array2::from_shape_fn((batch, act_dim), |_| rng.random_range(-2.0..2.0));
    let advantages = (0..batch).map(|_| rng.random_range(-3.0..3.0)).collect();
    let targets = (0..batch).map(|_| rng.random_range(-3.0..3.0)).collect();
    Instance {
        policy,
        value,
        obs,
        actions,
        advantages,
        targets,
    }
}

/// `|a - n| / max(|a|, |n|)` in the Euclidean norm.
pub fn relative_error(analytic: &Gradient, numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.0.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale = analytic.norm().max(numeric.iter().map(|n| n * n).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

pub fn central_difference(params: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + FD_STEP;
            let up = f(&p);
            p[i] = orig - FD_STEP;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Finite-difference gradient of `loss` over the policy's flat parameters.
pub fn policy_fd(policy: &GaussianPolicy, loss: impl Fn(&GaussianPolicy) -> f64) -> Vec<f64> {
    let mut probe = policy.clone();
    central_difference(&policy.flat_params(), |p| {
        probe.set_flat_params(p).unwrap();
        loss(&probe)
    })
}

pub fn mlp_fd(net: &Mlp, loss: impl Fn(&Mlp) -> f64) -> Vec<f64> {
    let spec = net.spec().clone();
    central_difference(net.params.as_slice(), |p| {
        loss(&Mlp::from_params(spec.clone(), vsrl_core::nn::ParamVector(p.to_vec())).unwrap())
    })
}

/// Old log-probabilities placing each ratio at one of `ratios`.
pub fn old_log_probs_for_ratios(current: &[f64], ratios: &[f64], seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    current
        .iter()
        .map(|lp| lp - ratios[rng.random_range(0..ratios.len())].ln())
        .collect()
}

/// Random batch with terminations, truncations and arbitrary values.
pub fn random_batch(seed: u64) -> RolloutBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let num_envs = rng.random_range(1..=5);
    let horizon = rng.random_range(1..=40);
    let total = num_envs * horizon;
    let mut terminated = vec![false; total];
    let mut truncated = vec![false; total];
    let mut truncation_values = vec![0.0; total];
    for i in 0..total {
        match rng.random_range(0..10) {
            0 => terminated[i] = true,
            1 => {
                truncated[i] = true;
                truncation_values[i] = rng.random_range(-5.0..5.0);
            }
            _ => {}
        }
    }
    RolloutBatch {
        num_envs,
        horizon,
        observations: Array2::zeros((total, 1)),
        raw_observations: Array2::zeros((total, 1)),
        actions: Array2::zeros((total, 1)),
        log_probs: vec![0.0; total],
        rewards: (0..total).map(|_| rng.random_range(-3.0..1.0)).collect(),
        raw_rewards: vec![0.0; total],
        value_predictions: (0..total).map(|_| rng.random_range(-5.0..5.0)).collect(),
        terminated,
        truncated,
        truncation_values,
        bootstrap_values: (0..num_envs).map(|_| rng.random_range(-5.0..5.0)).collect(),
        episode_returns: Vec::new(),
    }
}

/// Value that closes the return after step `t` of `env`, written out from
/// the boundary rules rather than shared with the library.
pub fn closing_value(b: &RolloutBatch, t: usize, env: usize) -> f64 {
    let i = t * b.num_envs + env;
    if b.terminated[i] {
        0.0
    } else if b.truncated[i] {
        b.truncation_values[i]
    } else if t + 1 == b.horizon {
        b.bootstrap_values[env]
    } else {
        b.value_predictions[i + b.num_envs]
    }
}

/// Backward recursion `G_t = r_t + gamma * (boundary ? closing : G_{t+1})`.
pub fn recursive_returns(b: &RolloutBatch, gamma: f64) -> Vec<f64> {
    let n = b.num_envs;
    let mut out = vec![0.0; b.len()];
    for env in 0..n {
        let mut next = 0.0;
        for t in (0..b.horizon).rev() {
            let i = t * n + env;
            let boundary = b.terminated[i] || b.truncated[i] || t + 1 == b.horizon;
            let tail = if boundary { closing_value(b, t, env) } else { next };
            next = b.rewards[i] + gamma * tail;
            out[i] = next;
        }
    }
    out
}

/// One-step TD error at every index.
pub fn td_errors(b: &RolloutBatch, gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; b.len()];
    for t in 0..b.horizon {
        for env in 0..b.num_envs {
            let i = t * b.num_envs + env;
            out[i] = b.rewards[i] + gamma * closing_value(b, t, env) - b.value_predictions[i];
        }
    }
    out
}

/// One-env, three-step batch of unit rewards with a tail bootstrap of 100.
pub fn crafted(terminated: Vec<bool>, truncated: Vec<bool>, truncation_values: Vec<f64>) -> RolloutBatch {
    let total = terminated.len();
    RolloutBatch {
        num_envs: 1,
        horizon: total,
        observations: Array2::zeros((total, 1)),
        raw_observations: Array2::zeros((total, 1)),
        actions: Array2::zeros((total, 1)),
        log_probs: vec![0.0; total],
        rewards: vec![1.0; total],
        raw_rewards: vec![1.0; total],
        value_predictions: vec![0.0; total],
        terminated,
        truncated,
        truncation_values,
        bootstrap_values: vec![100.0],
        episode_returns: Vec::new(),
    }
}
