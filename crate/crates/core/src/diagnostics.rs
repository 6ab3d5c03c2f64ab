//! Measurement instruments: value-estimation error, Lyapunov exponents,
//! Hölder-exponent fits and one-dimensional objective slices.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{wrap_angle, EnvConfig, EnvKind, MapKind};
use crate::error::{check_len, Error, Result};
use crate::nn::Mlp;
use crate::policy::GaussianPolicy;

pub use crate::algorithms::ratio_stats;

/// Horizon for discounted evaluation: `min(1000, ceil(ln(1e-3) / ln(gamma)))`,
/// so the ignored tail weighs at most 0.1% of the reward scale.
pub fn effective_horizon(gamma: f64) -> usize {
    let steps = (1e-3f64.ln() / gamma.ln()).ceil();
    if steps.is_finite() && steps > 0.0 {
        (steps as usize).min(1000)
    } else {
        1000
    }
}

/// Deterministic-policy rollouts from a batch of start states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    /// Discounted return from `s0` minus the value prediction at `s0`.
    pub etas: Vec<f64>,
    pub discounted_returns: Vec<f64>,
    /// Undiscounted return over the environment's own horizon.
    pub episode_returns: Vec<f64>,
}

impl EvalOutcome {
    pub fn eta_summary(&self) -> (f64, f64, f64) {
        let n = self.etas.len() as f64;
        let mean = self.etas.iter().sum::<f64>() / n;
        let abs_mean = self.etas.iter().map(|e| e.abs()).sum::<f64>() / n;
        let std = (self.etas.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n).sqrt();
        (mean, abs_mean, std)
    }

    pub fn mean_episode_return(&self) -> f64 {
        self.episode_returns.iter().sum::<f64>() / self.episode_returns.len() as f64
    }
}

/// How observations reach the networks during evaluation. Statistics are
/// frozen; `value_scale` maps value outputs back to raw reward units.
pub struct EvalContext<'a> {
    pub env: EnvConfig,
    pub gamma: f64,
    pub normalize: &'a dyn Fn(&[f64]) -> Vec<f64>,
    pub value_scale: f64,
}

/// Rolls out the deterministic policy from `starts` for `max_t` steps (or
/// until termination), ignoring the environment's time limit.
pub fn evaluate_from_states(
    policy: &GaussianPolicy,
    value: &Mlp,
    ctx: &EvalContext<'_>,
    starts: &[Vec<f64>],
    max_t: usize,
) -> Result<EvalOutcome> {
    let n = starts.len();
    let obs_dim = ctx.env.obs_dim();
    let mut states: Vec<Vec<f64>> = starts.to_vec();
    let mut alive = vec![true; n];
    let mut discounted = vec![0.0; n];
    let mut undiscounted = vec![0.0; n];
    let mut initial_values = vec![0.0; n];
    let mut discount = 1.0;

    let batch_obs = |states: &[Vec<f64>]| {
        let mut obs = Array2::zeros((states.len(), obs_dim));
        for (mut row, s) in obs.rows_mut().into_iter().zip(states) {
            let normalized = (ctx.normalize)(&ctx.env.observe(s));
            row.assign(&ndarray::ArrayView1::from(&normalized));
        }
        obs
    };

    let obs0 = batch_obs(&states);
    for (v, out) in initial_values.iter_mut().zip(value.forward_batch(obs0.view())?.iter()) {
        *v = ctx.value_scale * out;
    }

    for t in 0..max_t.max(ctx.env.horizon) {
        if !alive.iter().any(|&a| a) {
            break;
        }
        let obs = batch_obs(&states);
        let actions = policy.mean_batch(obs.view())?;
        for i in 0..n {
            if !alive[i] {
                continue;
            }
            let tr = ctx.env.transition(&states[i], &actions.row(i).to_vec())?;
            if !tr.reward.is_finite() {
                return Err(Error::Diverged { step: t });
            }
            if t < max_t {
                discounted[i] += discount * tr.reward;
            }
            if t < ctx.env.horizon {
                undiscounted[i] += tr.reward;
            }
            states[i] = tr.next_state;
            alive[i] = !tr.terminated;
        }
        discount *= ctx.gamma;
    }

    Ok(EvalOutcome {
        etas: discounted
            .iter()
            .zip(&initial_values)
            .map(|(g, v)| g - v)
            .collect(),
        discounted_returns: discounted,
        episode_returns: undiscounted,
    })
}

/// `eta(s0) = sum_k gamma^k R_k - V(s0)` for `num_starts` draws from the
/// initial-state distribution, following the deterministic policy.
pub fn value_estimation_error<R: Rng>(
    policy: &GaussianPolicy,
    value: &Mlp,
    ctx: &EvalContext<'_>,
    num_starts: usize,
    max_t: usize,
    rng: &mut R,
) -> Result<EvalOutcome> {
    let starts: Vec<Vec<f64>> = (0..num_starts).map(|_| ctx.env.initial_state(rng)).collect();
    evaluate_from_states(policy, value, ctx, &starts, max_t)
}

/// A deterministic map `s -> F(s)` with a metric that respects its topology.
pub trait DiscreteSystem {
    fn dim(&self) -> usize;
    fn step(&self, state: &[f64]) -> Result<Vec<f64>>;

    /// `a - b` in the system's tangent coordinates.
    fn difference(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x - y).collect()
    }
}

/// A 1-D map environment viewed as a dynamical system.
pub struct MapSystem {
    env: EnvConfig,
}

impl MapSystem {
    pub fn new(kind: MapKind) -> Self {
        Self {
            env: EnvConfig::new(EnvKind::Map1d(kind)),
        }
    }
}

impl DiscreteSystem for MapSystem {
    fn dim(&self) -> usize {
        1
    }

    fn step(&self, state: &[f64]) -> Result<Vec<f64>> {
        Ok(self.env.transition(state, &[0.0])?.next_state)
    }

    fn difference(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let d = a[0] - b[0];
        match self.env.kind {
            EnvKind::Map1d(MapKind::Doubling) => vec![d - d.round()],
            _ => vec![d],
        }
    }
}

/// Environment dynamics driven by the deterministic policy.
pub struct ClosedLoop<'a> {
    pub env: EnvConfig,
    pub policy: &'a GaussianPolicy,
    pub normalize: &'a dyn Fn(&[f64]) -> Vec<f64>,
}

impl DiscreteSystem for ClosedLoop<'_> {
    fn dim(&self) -> usize {
        self.env.state_dim()
    }

    fn step(&self, state: &[f64]) -> Result<Vec<f64>> {
        let obs = (self.normalize)(&self.env.observe(state));
        let action = self.policy.deterministic_action(&obs)?;
        Ok(self.env.transition(state, &action)?.next_state)
    }

    fn difference(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let angles = match self.env.kind {
            EnvKind::PendulumSwingup => 1,
            EnvKind::DoublePendulum => 2,
            EnvKind::Map1d(_) => 0,
        };
        a.iter()
            .zip(b)
            .enumerate()
            .map(|(i, (x, y))| if i < angles { wrap_angle(x - y) } else { x - y })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LyapunovConfig {
    pub steps: usize,
    pub renorm_interval: usize,
    pub perturbation: f64,
}

impl Default for LyapunovConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            renorm_interval: 1,
            perturbation: 1e-8,
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Maximal Lyapunov exponent in nats per step, by evolving a reference and a
/// perturbed trajectory and rescaling their separation back to
/// `perturbation` every `renorm_interval` steps.
pub fn lyapunov_exponent(system: &dyn DiscreteSystem, s0: &[f64], cfg: LyapunovConfig) -> Result<f64> {
    check_len("lyapunov start state", system.dim(), s0.len())?;
    if cfg.steps == 0 || cfg.renorm_interval == 0 || cfg.perturbation <= 0.0 {
        return Err(Error::Estimator(
            "steps, renorm_interval and perturbation must be positive".into(),
        ));
    }
    let unit = 1.0 / (system.dim() as f64).sqrt();
    let mut reference = s0.to_vec();
    let mut perturbed: Vec<f64> = s0.iter().map(|x| x + cfg.perturbation * unit).collect();
    let mut log_growth = 0.0;
    for t in 1..=cfg.steps {
        reference = system.step(&reference)?;
        perturbed = system.step(&perturbed)?;
        if !reference.iter().chain(&perturbed).all(|v| v.is_finite()) {
            return Err(Error::Diverged { step: t });
        }
        if t % cfg.renorm_interval == 0 || t == cfg.steps {
            let delta = system.difference(&perturbed, &reference);
            let dist = norm(&delta);
            if dist == 0.0 || !dist.is_finite() {
                return Err(Error::Estimator(format!(
                    "trajectory separation collapsed to {dist} at step {t}"
                )));
            }
            log_growth += (dist / cfg.perturbation).ln();
            let scale = cfg.perturbation / dist;
            perturbed = reference
                .iter()
                .zip(&delta)
                .map(|(r, d)| r + d * scale)
                .collect();
        }
    }
    Ok(log_growth / cfg.steps as f64)
}

/// Least-squares fit of `log |dJ|` against `log h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeEstimate {
    pub alpha: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Step sizes that survived (non-zero differences).
    pub scales: Vec<f64>,
}

pub const MIN_FIT_POINTS: usize = 4;

fn fit_log_log(points: &[(f64, f64)]) -> Result<SlopeEstimate> {
    let kept: Vec<(f64, f64)> = points
        .iter()
        .copied()
        .filter(|&(_, d)| d > 0.0 && d.is_finite())
        .collect();
    if kept.len() < MIN_FIT_POINTS {
        return Err(Error::Estimator(format!(
            "only {} non-zero differences; need at least {MIN_FIT_POINTS}",
            kept.len()
        )));
    }
    let xs: Vec<f64> = kept.iter().map(|(h, _)| h.ln()).collect();
    let ys: Vec<f64> = kept.iter().map(|(_, d)| d.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let alpha = sxy / sxx;
    let r_squared = if syy == 0.0 {
        1.0
    } else {
        (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0)
    };
    Ok(SlopeEstimate {
        alpha,
        intercept: my - alpha * mx,
        r_squared,
        scales: kept.iter().map(|(h, _)| *h).collect(),
    })
}

fn check_scales(scales: &[f64]) -> Result<()> {
    if scales.iter().any(|&h| !(h > 0.0 && h.is_finite())) {
        return Err(Error::Estimator("scales must be positive and finite".into()));
    }
    let (lo, hi) = scales
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &h| (lo.min(h), hi.max(h)));
    if hi / lo < 100.0 {
        return Err(Error::Estimator("scales must span at least two decades".into()));
    }
    Ok(())
}

/// Hölder exponent of `J` at `theta` along `direction`: the slope of
/// `log |J(theta + h d) - J(theta)|` against `log h`. The sampler should use
/// common random numbers so that sampling noise cancels across `h`.
pub fn holder_exponent(
    sampler: &mut dyn FnMut(&[f64]) -> Result<f64>,
    theta: &[f64],
    direction: &[f64],
    scales: &[f64],
) -> Result<SlopeEstimate> {
    holder_exponent_averaged(sampler, &[theta.to_vec()], direction, scales)
}

/// Like [`holder_exponent`], averaging `|dJ|` over several base points
/// before the fit.
pub fn holder_exponent_averaged(
    sampler: &mut dyn FnMut(&[f64]) -> Result<f64>,
    bases: &[Vec<f64>],
    direction: &[f64],
    scales: &[f64],
) -> Result<SlopeEstimate> {
    check_scales(scales)?;
    if bases.is_empty() {
        return Err(Error::Estimator("no base points".into()));
    }
    let mut points = Vec::with_capacity(scales.len());
    let base_values: Vec<f64> = bases
        .iter()
        .map(|b| {
            check_len("holder direction", b.len(), direction.len())?;
            sampler(b)
        })
        .collect::<Result<_>>()?;
    for &h in scales {
        let mut total = 0.0;
        for (base, j0) in bases.iter().zip(&base_values) {
            let moved: Vec<f64> = base.iter().zip(direction).map(|(t, d)| t + h * d).collect();
            total += (sampler(&moved)? - j0).abs();
        }
        points.push((h, total / bases.len() as f64));
    }
    fit_log_log(&points)
}

/// `n` log-spaced step sizes from `hi` down to `lo`.
pub fn log_spaced_scales(hi: f64, lo: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2 && hi > lo && lo > 0.0);
    let ratio = (lo / hi).ln() / (n - 1) as f64;
    (0..n).map(|i| hi * (ratio * i as f64).exp()).collect()
}

/// Setup for evaluating the policy objective along a parameter direction.
pub struct SliceConfig<'a> {
    pub env: EnvConfig,
    pub normalize: &'a dyn Fn(&[f64]) -> Vec<f64>,
    pub rollouts_per_point: usize,
    pub seed: u64,
    /// Discount for the return; `None` sums rewards undiscounted.
    pub gamma: Option<f64>,
}

/// Mean deterministic-policy return over the environment horizon for a
/// policy with mean-network parameters `params`, from starts drawn with
/// `cfg.seed` (identical for every call).
pub fn policy_return(policy: &GaussianPolicy, params: &[f64], cfg: &SliceConfig<'_>) -> Result<f64> {
    let mut candidate = policy.clone();
    check_len("slice parameters", candidate.mean_net.parameter_count(), params.len())?;
    candidate.mean_net.params.0.copy_from_slice(params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let starts: Vec<Vec<f64>> = (0..cfg.rollouts_per_point)
        .map(|_| cfg.env.initial_state(&mut rng))
        .collect();
    let mut total = 0.0;
    for start in starts {
        let mut state = start;
        let mut discount = 1.0;
        for _ in 0..cfg.env.horizon {
            let obs = (cfg.normalize)(&cfg.env.observe(&state));
            let action = candidate.deterministic_action(&obs)?;
            let tr = cfg.env.transition(&state, &action)?;
            total += discount * tr.reward;
            discount *= cfg.gamma.unwrap_or(1.0);
            state = tr.next_state;
            if tr.terminated {
                break;
            }
        }
    }
    Ok(total / cfg.rollouts_per_point as f64)
}

/// `(h, J(theta + h d))` over `h_grid`, with common random numbers.
pub fn objective_slice(
    policy: &GaussianPolicy,
    direction: &[f64],
    h_grid: &[f64],
    cfg: &SliceConfig<'_>,
) -> Result<Vec<(f64, f64)>> {
    let theta = policy.mean_net.params.as_slice();
    check_len("slice direction", theta.len(), direction.len())?;
    h_grid
        .iter()
        .map(|&h| {
            let moved: Vec<f64> = theta.iter().zip(direction).map(|(t, d)| t + h * d).collect();
            Ok((h, policy_return(policy, &moved, cfg)?))
        })
        .collect()
}

/// Unit vector with i.i.d. Gaussian direction.
pub fn random_direction<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let n = norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::MlpSpec;

    #[test]
    fn effective_horizon_for_default_discount() {
        assert_eq!(effective_horizon(0.99), 688);
        assert_eq!(effective_horizon(0.999), 1000);
        assert_eq!(effective_horizon(0.5), 10);
    }

    #[test]
    fn contraction_is_negative_log_two() {
        let lam = lyapunov_exponent(&MapSystem::new(MapKind::Contraction), &[0.3], LyapunovConfig::default()).unwrap();
        assert!((lam + 2f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn doubling_is_log_two_across_intervals() {
        for interval in [1, 5, 10] {
            let cfg = LyapunovConfig {
                renorm_interval: interval,
                ..Default::default()
            };
            let lam = lyapunov_exponent(&MapSystem::new(MapKind::Doubling), &[0.123], cfg).unwrap();
            assert!((lam - 2f64.ln()).abs() < 0.01 * 2f64.ln(), "interval {interval}: {lam}");
        }
    }

    #[test]
    fn bad_estimator_settings_are_rejected() {
        let sys = MapSystem::new(MapKind::Doubling);
        let cfg = LyapunovConfig {
            renorm_interval: 0,
            ..Default::default()
        };
        assert!(lyapunov_exponent(&sys, &[0.1], cfg).is_err());
        assert!(lyapunov_exponent(&sys, &[0.1, 0.2], LyapunovConfig::default()).is_err());
    }

    #[test]
    fn linear_objective_has_unit_exponent() {
        let d = [0.6, 0.8];
        let mut j = |t: &[f64]| Ok(3.0 * (t[0] * d[0] + t[1] * d[1]));
        let est = holder_exponent(&mut j, &[0.1, -0.2], &d, &log_spaced_scales(1.0, 1e-4, 9)).unwrap();
        assert!((est.alpha - 1.0).abs() < 1e-9);
        assert!(est.r_squared > 0.999);
    }

    #[test]
    fn too_few_nonzero_points_is_an_error() {
        let mut flat = |_: &[f64]| Ok(1.0);
        let err = holder_exponent(&mut flat, &[0.0], &[1.0], &log_spaced_scales(1.0, 1e-3, 6));
        assert!(matches!(err, Err(Error::Estimator(_))));
        let mut j = |t: &[f64]| Ok(t[0]);
        assert!(holder_exponent(&mut j, &[0.0], &[1.0], &[1.0, 0.5, 0.3, 0.2]).is_err());
    }

    #[test]
    fn eta_of_constant_reward_map() {
        // Contraction map from x = 0: stays at 0 with reward cos(0) = 1.
        let env = EnvConfig::new(EnvKind::Map1d(MapKind::Contraction));
        let identity = |o: &[f64]| o.to_vec();
        let ctx = EvalContext {
            env,
            gamma: 0.5,
            normalize: &identity,
            value_scale: 1.0,
        };
        let policy = GaussianPolicy::with_head_gain(MlpSpec::new(1, &[4], 1).unwrap(), 0, 0.0).unwrap();
        let value = Mlp::init(MlpSpec::new(1, &[4], 1).unwrap(), 0, 0.0).unwrap();
        let out = evaluate_from_states(&policy, &value, &ctx, &[vec![0.0]], 60).unwrap();
        assert!((out.etas[0] - 2.0).abs() < 1e-12);
    }
}
