//! Seeded training runs: collect, estimate advantages, update, evaluate.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use super::config::{AlgorithmKind, ExperimentConfig};
use super::metrics::{read_metrics, MetricsRecord, MetricsWriter};
use crate::algorithms::{ppo_update, vpg_update, Learner};
use crate::diagnostics::{effective_horizon, value_estimation_error, EvalContext, EvalOutcome};
use crate::envs::{Env, RngSnapshot, VecEnv};
use crate::error::{Error, Result};
use crate::nn::{AdamState, Mlp, MlpSpec, ParamVector};
use crate::policy::GaussianPolicy;
use crate::rollout::{compute_gae, normalize_advantages, Collector, RewardNormalizer, RunningMoments};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.vsrl";
pub const CONFIG_FILE: &str = "config.txt";
pub const STATUS_FILE: &str = "status.json";
pub const TIMING_FILE: &str = "timing.csv";

const VALUE_HEAD_GAIN: f64 = 1.0;

#[derive(Clone, Copy)]
enum Stream {
    Policy = 1,
    Value = 2,
    Env = 3,
    Train = 4,
    Eval = 5,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn derive_seed(seed: u64, stream: Stream) -> u64 {
    splitmix64(splitmix64(seed) ^ stream as u64)
}

/// Everything that evolves during a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub iteration: usize,
    pub env_steps: usize,
    pub policy_steps: usize,
    pub value_steps: usize,
    pub learner: Learner,
    pub collector: Collector,
    pub rng: ChaCha8Rng,
}

impl TrainingState {
    pub fn new(config: &ExperimentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let env = config.env;
        let policy_spec = MlpSpec::new(env.obs_dim(), &config.policy_hidden, env.action_dim())?;
        let value_spec = MlpSpec::new(env.obs_dim(), &config.value_hidden, 1)?;
        let policy = GaussianPolicy::new(policy_spec, derive_seed(seed, Stream::Policy))?;
        let value = Mlp::init(value_spec, derive_seed(seed, Stream::Value), VALUE_HEAD_GAIN)?;
        let venv = VecEnv::new(env, config.num_envs, derive_seed(seed, Stream::Env));
        Ok(Self {
            config: config.clone(),
            seed,
            iteration: 0,
            env_steps: 0,
            policy_steps: 0,
            value_steps: 0,
            learner: Learner::new(policy, value, config.policy_lr(), config.value_lr()),
            collector: Collector::new(
                venv,
                config.normalize_observations,
                config.normalize_rewards,
                config.gamma,
            ),
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, Stream::Train)),
        })
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.config.iterations()
    }

    fn eval_due(&self) -> bool {
        self.iteration % self.config.eval_interval == 0 || self.is_done()
    }

    /// Deterministic-policy evaluation from a fixed set of start states
    /// (the same starts at every evaluation of a run).
    pub fn evaluate(&self) -> Result<EvalOutcome> {
        let normalize = |o: &[f64]| self.collector.normalize(o);
        let ctx = EvalContext {
            env: self.config.env,
            gamma: self.config.gamma,
            normalize: &normalize,
            value_scale: self.collector.reward_scale(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, Stream::Eval));
        value_estimation_error(
            &self.learner.policy,
            &self.learner.value,
            &ctx,
            self.config.eval_episodes,
            effective_horizon(self.config.gamma),
            &mut rng,
        )
    }

    /// Runs one full iteration and returns its metrics record.
    pub fn iterate(&mut self) -> Result<MetricsRecord> {
        let cfg = &self.config;
        let batch = self.collector.collect(
            &self.learner.policy,
            &self.learner.value,
            cfg.horizon_per_env(),
            &mut self.rng,
        )?;
        let (mut advantages, targets) = if cfg.baseline {
            compute_gae(&batch, cfg.gae())
        } else {
            let (adv, _) = compute_gae(&batch.with_zero_baseline(), cfg.gae());
            let (_, targets) = compute_gae(&batch, cfg.gae());
            (adv, targets)
        };
        if cfg.normalize_advantages {
            advantages = normalize_advantages(&advantages);
        }
        let stats = match cfg.algorithm {
            AlgorithmKind::Vpg => vpg_update(
                &mut self.learner,
                &batch,
                &advantages,
                &targets,
                &cfg.vpg(),
                cfg.clip_epsilon,
            )?,
            AlgorithmKind::Ppo => ppo_update(
                &mut self.learner,
                &batch,
                &advantages,
                &targets,
                &cfg.ppo(),
                &mut self.rng,
            )?,
        };

        self.iteration += 1;
        self.env_steps += batch.len();
        self.policy_steps += stats.policy_steps;
        self.value_steps += stats.value_steps;

        let train_return = (!batch.episode_returns.is_empty()).then(|| {
            batch.episode_returns.iter().sum::<f64>() / batch.episode_returns.len() as f64
        });
        let mut record = MetricsRecord {
            iteration: self.iteration,
            env_steps: self.env_steps,
            policy_steps: self.policy_steps,
            value_steps: self.value_steps,
            train_return,
            policy_loss: stats.policy_loss,
            value_loss_before: stats.value_loss_before,
            value_loss_after: stats.value_loss_after,
            policy_grad_norm: stats.policy_grad_norm,
            value_grad_norm: stats.value_grad_norm,
            max_ratio: stats.max_ratio,
            min_ratio: stats.min_ratio,
            clip_fraction: stats.clip_fraction,
            policy_kl: stats.policy_kl,
            entropy: stats.entropy,
            reward_scale: self.collector.reward_scale(),
            mean_return: None,
            eta_mean: None,
            eta_abs_mean: None,
            eta_std: None,
        };
        if self.eval_due() {
            let eval = self.evaluate()?;
            let (mean, abs_mean, std) = eval.eta_summary();
            record.mean_return = Some(eval.mean_episode_return());
            record.eta_mean = Some(mean);
            record.eta_abs_mean = Some(abs_mean);
            record.eta_std = Some(std);
        }
        Ok(record)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::default();
        c.push_text("config", &self.config.to_text());
        c.push_int("seed", self.seed.into());
        c.push_int("iteration", self.iteration as u128);
        c.push_int("env_steps", self.env_steps as u128);
        c.push_int("policy_steps", self.policy_steps as u128);
        c.push_int("value_steps", self.value_steps as u128);
        c.push_vec("policy.mean", &self.learner.policy.mean_net.params.0);
        c.push_vec("policy.log_std", &self.learner.policy.log_std);
        c.push_vec("value", &self.learner.value.params.0);
        for (name, adam) in [("adam.policy", &self.learner.policy_adam), ("adam.value", &self.learner.value_adam)] {
            c.push_int(&format!("{name}.t"), adam.step_count.into());
            c.push_vec(&format!("{name}.m"), &adam.first_moment);
            c.push_vec(&format!("{name}.v"), &adam.second_moment);
        }
        for (i, env) in self.collector.venv.envs().iter().enumerate() {
            let snap = env.snapshot();
            c.push_vec(&format!("env.{i}.state"), &snap.state);
            c.push_int(&format!("env.{i}.steps"), snap.steps as u128);
            c.push_rng(&format!("env.{i}.rng"), snap.rng);
        }
        c.push_vec("episode_accumulators", &self.collector.episode_accumulators);
        if let Some(m) = &self.collector.obs_moments {
            push_moments(&mut c, "obs_moments", m);
        }
        if let Some(r) = &self.collector.reward_normalizer {
            c.push_vec("reward.accumulators", &r.accumulators);
            push_moments(&mut c, "reward.moments", &r.moments);
        }
        c.push_rng("train", RngSnapshot::capture(&self.rng));
        c
    }

    /// Rebuilds a state; `config` must match the checkpoint's own.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut config = ExperimentConfig::default();
        config.apply_text(ckpt.text("config")?)?;
        config.validate()?;
        let seed = u64::try_from(ckpt.int("seed")?)
            .map_err(|_| Error::Checkpoint("seed out of range".into()))?;
        let mut state = Self::new(&config, seed)?;

        let policy_spec = state.learner.policy.mean_net.spec().clone();
        let mean_net = Mlp::from_params(policy_spec, ParamVector(ckpt.vec("policy.mean")?.to_vec()))?;
        state.learner.policy = GaussianPolicy::from_parts(mean_net, ckpt.vec("policy.log_std")?.to_vec())?;
        let value_spec = state.learner.value.spec().clone();
        state.learner.value = Mlp::from_params(value_spec, ParamVector(ckpt.vec("value")?.to_vec()))?;
        for (name, adam) in [
            ("adam.policy", &mut state.learner.policy_adam),
            ("adam.value", &mut state.learner.value_adam),
        ] {
            let restored = AdamState {
                first_moment: ckpt.vec(&format!("{name}.m"))?.to_vec(),
                second_moment: ckpt.vec(&format!("{name}.v"))?.to_vec(),
                step_count: u64::try_from(ckpt.int(&format!("{name}.t"))?)
                    .map_err(|_| Error::Checkpoint(format!("{name}.t out of range")))?,
                ..adam.clone()
            };
            if restored.first_moment.len() != adam.first_moment.len()
                || restored.second_moment.len() != adam.second_moment.len()
            {
                return Err(Error::Checkpoint(format!("{name} has the wrong length")));
            }
            *adam = restored;
        }

        let mut envs = Vec::with_capacity(config.num_envs);
        for i in 0..config.num_envs {
            let snap = crate::envs::EnvSnapshot {
                state: ckpt.vec(&format!("env.{i}.state"))?.to_vec(),
                steps: ckpt.usize(&format!("env.{i}.steps"))?,
                rng: ckpt.rng(&format!("env.{i}.rng"))?.clone(),
            };
            envs.push(Env::restore(config.env, &snap)?);
        }
        state.collector.venv = VecEnv::from_envs(envs);
        state.collector.episode_accumulators = ckpt.vec("episode_accumulators")?.to_vec();
        state.collector.obs_moments = if config.normalize_observations {
            Some(read_moments(ckpt, "obs_moments")?)
        } else {
            None
        };
        state.collector.reward_normalizer = if config.normalize_rewards {
            Some(RewardNormalizer {
                gamma: config.gamma,
                accumulators: ckpt.vec("reward.accumulators")?.to_vec(),
                moments: read_moments(ckpt, "reward.moments")?,
            })
        } else {
            None
        };
        state.rng = ckpt.rng("train")?.restore();
        state.iteration = ckpt.usize("iteration")?;
        state.env_steps = ckpt.usize("env_steps")?;
        state.policy_steps = ckpt.usize("policy_steps")?;
        state.value_steps = ckpt.usize("value_steps")?;
        Ok(state)
    }
}

fn push_moments(c: &mut Checkpoint, name: &str, m: &RunningMoments) {
    c.push_vec(&format!("{name}.count"), &[m.count]);
    c.push_vec(&format!("{name}.mean"), &m.mean);
    c.push_vec(&format!("{name}.m2"), &m.m2);
}

fn read_moments(c: &Checkpoint, name: &str) -> Result<RunningMoments> {
    let count = c.vec(&format!("{name}.count"))?;
    let mean = c.vec(&format!("{name}.mean"))?.to_vec();
    let m2 = c.vec(&format!("{name}.m2"))?.to_vec();
    if count.len() != 1 || mean.len() != m2.len() {
        return Err(Error::Checkpoint(format!("malformed moments `{name}`")));
    }
    Ok(RunningMoments {
        count: count[0],
        mean,
        m2,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunStatus {
    pub status: &'static str,
    pub seed: u64,
    pub iterations: usize,
    pub error: Option<String>,
}

/// Result of a run that did not hit an I/O or configuration error.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub seed: u64,
    pub run_dir: PathBuf,
    pub metrics: Vec<MetricsRecord>,
    /// Set when the run stopped on a numerical failure.
    pub failure: Option<String>,
    pub checkpoint: Option<PathBuf>,
}

impl RunOutcome {
    pub fn succeeded(&self) -> bool {
        self.failure.is_none()
    }
}

fn write_status(dir: &Path, status: &RunStatus) -> Result<()> {
    let path = dir.join(STATUS_FILE);
    let text = serde_json::to_string_pretty(status).expect("status always serializes");
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Trains from scratch into `run_dir` (metrics, checkpoints, status).
pub fn run_training(config: &ExperimentConfig, seed: u64, run_dir: &Path) -> Result<RunOutcome> {
    run_training_until(config, seed, run_dir, None)
}

/// Like [`run_training`] but stops after `stop_after` iterations, leaving
/// the directory as an interrupted run would.
pub fn run_training_until(
    config: &ExperimentConfig,
    seed: u64,
    run_dir: &Path,
    stop_after: Option<usize>,
) -> Result<RunOutcome> {
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let config_path = run_dir.join(CONFIG_FILE);
    std::fs::write(&config_path, config.to_text()).map_err(|e| Error::io(&config_path, e))?;
    let state = TrainingState::new(config, seed)?;
    let writer = MetricsWriter::create(&run_dir.join(METRICS_FILE))?;
    drive(state, writer, run_dir, Vec::new(), stop_after)
}

/// Continues the run in `run_dir` from its checkpoint. Metrics written
/// after the checkpoint are discarded and regenerated.
pub fn resume_training(run_dir: &Path) -> Result<RunOutcome> {
    let ckpt = load_checkpoint(&run_dir.join(CHECKPOINT_FILE))?;
    let state = TrainingState::from_checkpoint(&ckpt)?;
    let metrics_path = run_dir.join(METRICS_FILE);
    let previous = read_metrics(&metrics_path)?;
    let writer = MetricsWriter::reopen(&metrics_path, state.iteration)?;
    let kept = previous[..state.iteration].to_vec();
    drive(state, writer, run_dir, kept, None)
}

fn drive(
    mut state: TrainingState,
    mut writer: MetricsWriter,
    run_dir: &Path,
    mut metrics: Vec<MetricsRecord>,
    stop_after: Option<usize>,
) -> Result<RunOutcome> {
    let checkpoint_path = run_dir.join(CHECKPOINT_FILE);
    let timing_path = run_dir.join(TIMING_FILE);
    let mut timing = String::from("iteration,seconds\n");
    let mut failure = None;
    let mut checkpoint = None;
    while !state.is_done() && stop_after.is_none_or(|n| state.iteration < n) {
        let started = Instant::now();
        match state.iterate() {
            Ok(record) => {
                writer.append(&record)?;
                let evaluated = record.mean_return.is_some();
                metrics.push(record);
                timing.push_str(&format!("{},{:.6}\n", state.iteration, started.elapsed().as_secs_f64()));
                if evaluated {
                    save_checkpoint(&state.to_checkpoint(), &checkpoint_path)?;
                    checkpoint = Some(checkpoint_path.clone());
                }
            }
            Err(e) if e.is_numerical() => {
                failure = Some(format!("iteration {}: {e}", state.iteration + 1));
                break;
            }
            Err(e) => return Err(e),
        }
    }
    std::fs::write(&timing_path, timing).map_err(|e| Error::io(&timing_path, e))?;
    let status = match (&failure, state.is_done()) {
        (Some(_), _) => "failed",
        (None, true) => "completed",
        (None, false) => "interrupted",
    };
    write_status(
        run_dir,
        &RunStatus {
            status,
            seed: state.seed,
            iterations: state.iteration,
            error: failure.clone(),
        },
    )?;
    Ok(RunOutcome {
        seed: state.seed,
        run_dir: run_dir.to_path_buf(),
        metrics,
        failure,
        checkpoint,
    })
}
