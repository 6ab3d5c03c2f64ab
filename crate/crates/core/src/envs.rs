//! Seeded continuous-control environments and 1-D maps.
//!
//! * `pendulum_swingup`: the classic-control pendulum (angle measured from
//!   upright, torque in `[-2, 2]`, `dt = 0.05`, horizon 200).
//! * `double_pendulum`: two unit point masses on unit links, torque on the
//!   shoulder, passive elbow, started near upright. Reward is the negated
//!   squared distance of the tip from its upright position. Chaotic.
//! * `map1d`: doubling, logistic (`r = 4`) or contraction maps on `[0, 1)`
//!   with reward `cos(2 pi x)`; the action is ignored.
//!
//! Each environment is a pure transition function plus a thin stateful
//! wrapper that counts steps and owns the RNG stream used for resets.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    Doubling,
    Logistic,
    Contraction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    PendulumSwingup,
    DoublePendulum,
    Map1d(MapKind),
}

impl EnvKind {
    pub fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "pendulum_swingup" | "pendulum" => EnvKind::PendulumSwingup,
            "double_pendulum" => EnvKind::DoublePendulum,
            "map1d" | "map1d_doubling" => EnvKind::Map1d(MapKind::Doubling),
            "map1d_logistic" => EnvKind::Map1d(MapKind::Logistic),
            "map1d_contraction" => EnvKind::Map1d(MapKind::Contraction),
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            EnvKind::PendulumSwingup => "pendulum_swingup",
            EnvKind::DoublePendulum => "double_pendulum",
            EnvKind::Map1d(MapKind::Doubling) => "map1d_doubling",
            EnvKind::Map1d(MapKind::Logistic) => "map1d_logistic",
            EnvKind::Map1d(MapKind::Contraction) => "map1d_contraction",
        }
    }
}

pub mod pendulum {
    pub const MAX_SPEED: f64 = 8.0;
    pub const MAX_TORQUE: f64 = 2.0;
    pub const GRAVITY: f64 = 10.0;
    pub const MASS: f64 = 1.0;
    pub const LENGTH: f64 = 1.0;
    pub const DT: f64 = 0.05;
    pub const HORIZON: usize = 200;
    /// Most negative single-step reward.
    pub const MIN_REWARD: f64 = -(std::f64::consts::PI * std::f64::consts::PI
        + 0.1 * MAX_SPEED * MAX_SPEED
        + 0.001 * MAX_TORQUE * MAX_TORQUE);
}

pub mod double_pendulum {
    pub const MAX_SPEED: f64 = 15.0;
    pub const MAX_TORQUE: f64 = 5.0;
    pub const GRAVITY: f64 = 10.0;
    pub const DT: f64 = 0.02;
    pub const HORIZON: usize = 400;
    pub const INIT_SPREAD: f64 = 0.1;
}

/// Static description of an environment instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub kind: EnvKind,
    pub horizon: usize,
    pub dt: f64,
}

/// Result of the pure transition function.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub terminated: bool,
}

pub fn wrap_angle(theta: f64) -> f64 {
    let wrapped = (theta + PI).rem_euclid(2.0 * PI) - PI;
    // rem_euclid can round up to exactly 2 pi for inputs just below -pi.
    if wrapped >= PI {
        wrapped - 2.0 * PI
    } else {
        wrapped
    }
}

impl EnvConfig {
    pub fn new(kind: EnvKind) -> Self {
        let (horizon, dt) = match kind {
            EnvKind::PendulumSwingup => (pendulum::HORIZON, pendulum::DT),
            EnvKind::DoublePendulum => (double_pendulum::HORIZON, double_pendulum::DT),
            EnvKind::Map1d(_) => (200, 1.0),
        };
        Self { kind, horizon, dt }
    }

    pub fn state_dim(&self) -> usize {
        match self.kind {
            EnvKind::PendulumSwingup => 2,
            EnvKind::DoublePendulum => 4,
            EnvKind::Map1d(_) => 1,
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self.kind {
            EnvKind::PendulumSwingup => 3,
            EnvKind::DoublePendulum => 6,
            EnvKind::Map1d(_) => 1,
        }
    }

    pub fn action_dim(&self) -> usize {
        1
    }

    pub fn action_bound(&self) -> f64 {
        match self.kind {
            EnvKind::PendulumSwingup => pendulum::MAX_TORQUE,
            EnvKind::DoublePendulum => double_pendulum::MAX_TORQUE,
            EnvKind::Map1d(_) => f64::INFINITY,
        }
    }

    /// Lipschitz constant of `state -> next_state` (for a fixed action) under
    /// [`EnvConfig::state_distance`], valid for the default `dt`.
    pub fn lipschitz_bound(&self) -> f64 {
        match self.kind {
            EnvKind::PendulumSwingup => 2.0,
            // Velocity coupling through the w^2 terms dominates at the speed cap.
            EnvKind::DoublePendulum => 30.0,
            EnvKind::Map1d(MapKind::Doubling) => 2.0,
            EnvKind::Map1d(MapKind::Logistic) => 4.0,
            EnvKind::Map1d(MapKind::Contraction) => 0.5,
        }
    }

    /// Draw from the initial-state distribution.
    pub fn initial_state<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        match self.kind {
            EnvKind::PendulumSwingup => {
                vec![rng.random_range(-PI..=PI), rng.random_range(-1.0..=1.0)]
            }
            EnvKind::DoublePendulum => {
                let s = double_pendulum::INIT_SPREAD;
                (0..4).map(|_| rng.random_range(-s..=s)).collect()
            }
            EnvKind::Map1d(_) => vec![rng.random_range(0.0..1.0)],
        }
    }

    pub fn observe(&self, state: &[f64]) -> Vec<f64> {
        match self.kind {
            EnvKind::PendulumSwingup => vec![state[0].cos(), state[0].sin(), state[1]],
            EnvKind::DoublePendulum => vec![
                state[0].cos(),
                state[0].sin(),
                state[1].cos(),
                state[1].sin(),
                state[2],
                state[3],
            ],
            EnvKind::Map1d(_) => vec![state[0]],
        }
    }

    /// Distance between states that respects angle wrapping (and the circle
    /// topology of the doubling map).
    pub fn state_distance(&self, a: &[f64], b: &[f64]) -> f64 {
        let sq = |d: f64| d * d;
        match self.kind {
            EnvKind::PendulumSwingup => (sq(wrap_angle(a[0] - b[0])) + sq(a[1] - b[1])).sqrt(),
            EnvKind::DoublePendulum => (sq(wrap_angle(a[0] - b[0]))
                + sq(wrap_angle(a[1] - b[1]))
                + sq(a[2] - b[2])
                + sq(a[3] - b[3]))
            .sqrt(),
            EnvKind::Map1d(MapKind::Doubling) => {
                let d = (a[0] - b[0]).rem_euclid(1.0);
                d.min(1.0 - d)
            }
            EnvKind::Map1d(_) => (a[0] - b[0]).abs(),
        }
    }

    /// One step of the dynamics. Actions are clipped to the torque bound.
    pub fn transition(&self, state: &[f64], action: &[f64]) -> Result<Transition> {
        check_len("environment state", self.state_dim(), state.len())?;
        check_len("environment action", self.action_dim(), action.len())?;
        if !action.iter().all(|a| a.is_finite()) {
            return Err(Error::NonFinite("environment action".into()));
        }
        let u = action[0].clamp(-self.action_bound(), self.action_bound());
        Ok(match self.kind {
            EnvKind::PendulumSwingup => self.pendulum_step(state, u),
            EnvKind::DoublePendulum => self.double_pendulum_step(state, u),
            EnvKind::Map1d(kind) => {
                let x = state[0];
                let next = match kind {
                    MapKind::Doubling => (2.0 * x).rem_euclid(1.0),
                    MapKind::Logistic => 4.0 * x * (1.0 - x),
                    MapKind::Contraction => 0.5 * x,
                };
                Transition {
                    next_state: vec![next],
                    reward: (2.0 * PI * x).cos(),
                    terminated: false,
                }
            }
        })
    }

    fn pendulum_step(&self, state: &[f64], u: f64) -> Transition {
        use pendulum::*;
        let (theta, speed) = (wrap_angle(state[0]), state[1]);
        let cost = theta * theta + 0.1 * speed * speed + 0.001 * u * u;
        let accel = 3.0 * GRAVITY / (2.0 * LENGTH) * theta.sin() + 3.0 / (MASS * LENGTH * LENGTH) * u;
        let next_speed = (speed + accel * self.dt).clamp(-MAX_SPEED, MAX_SPEED);
        let next_theta = wrap_angle(theta + next_speed * self.dt);
        Transition {
            next_state: vec![next_theta, next_speed],
            reward: -cost,
            terminated: false,
        }
    }

    /// Angles are measured from upright; the elbow is unactuated.
    fn double_pendulum_step(&self, state: &[f64], u: f64) -> Transition {
        use double_pendulum::*;
        let (p1, p2, w1, w2) = (state[0], state[1], state[2], state[3]);
        let tip_x = p1.sin() + p2.sin();
        let tip_drop = 2.0 - (p1.cos() + p2.cos());
        let reward = -(tip_x * tip_x + tip_drop * tip_drop);

        let (s12, c12) = (p1 - p2).sin_cos();
        // Mass matrix [[2, c12], [c12, 1]] for unit masses and links.
        let rhs1 = u - s12 * w2 * w2 + 2.0 * GRAVITY * p1.sin();
        let rhs2 = s12 * w1 * w1 + GRAVITY * p2.sin();
        let det = 2.0 - c12 * c12;
        let a1 = (rhs1 - c12 * rhs2) / det;
        let a2 = (2.0 * rhs2 - c12 * rhs1) / det;

        let nw1 = (w1 + a1 * self.dt).clamp(-MAX_SPEED, MAX_SPEED);
        let nw2 = (w2 + a2 * self.dt).clamp(-MAX_SPEED, MAX_SPEED);
        Transition {
            next_state: vec![
                wrap_angle(p1 + nw1 * self.dt),
                wrap_angle(p2 + nw2 * self.dt),
                nw1,
                nw2,
            ],
            reward,
            terminated: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
}

/// One environment instance: physical state, step counter and reset stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Env {
    config: EnvConfig,
    state: Vec<f64>,
    steps: usize,
    rng: ChaCha8Rng,
}

impl Env {
    pub fn reset(config: EnvConfig, seed: u64) -> (Self, Vec<f64>) {
        Self::from_rng(config, ChaCha8Rng::seed_from_u64(seed))
    }

    fn from_rng(config: EnvConfig, mut rng: ChaCha8Rng) -> (Self, Vec<f64>) {
        let state = config.initial_state(&mut rng);
        let obs = config.observe(&state);
        (
            Self {
                config,
                state,
                steps: 0,
                rng,
            },
            obs,
        )
    }

    /// Draws a fresh initial state from this environment's own stream.
    pub fn reset_in_place(&mut self) -> Vec<f64> {
        self.state = self.config.initial_state(&mut self.rng);
        self.steps = 0;
        self.config.observe(&self.state)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn observation(&self) -> Vec<f64> {
        self.config.observe(&self.state)
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        let t = self.config.transition(&self.state, action)?;
        self.state = t.next_state;
        self.steps += 1;
        Ok(StepResult {
            observation: self.config.observe(&self.state),
            reward: t.reward,
            terminated: t.terminated,
            truncated: !t.terminated && self.steps >= self.config.horizon,
        })
    }

    /// Flattened `(state, steps, rng seed/stream/word position)` for checkpoints.
    pub fn snapshot(&self) -> EnvSnapshot {
        EnvSnapshot {
            state: self.state.clone(),
            steps: self.steps,
            rng: RngSnapshot::capture(&self.rng),
        }
    }

    pub fn restore(config: EnvConfig, snap: &EnvSnapshot) -> Result<Self> {
        check_len("environment snapshot state", config.state_dim(), snap.state.len())?;
        Ok(Self {
            config,
            state: snap.state.clone(),
            steps: snap.steps,
            rng: snap.rng.restore(),
        })
    }
}

/// Exact position of a ChaCha stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngSnapshot {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngSnapshot {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSnapshot {
    pub state: Vec<f64>,
    pub steps: usize,
    pub rng: RngSnapshot,
}

/// Output of one synchronous step across all sub-environments.
#[derive(Debug, Clone, PartialEq)]
pub struct VecStep {
    /// Row `i` is the observation the policy should act on next: the fresh
    /// reset observation if env `i` just finished an episode.
    pub observations: Array2<f64>,
    pub rewards: Vec<f64>,
    pub terminated: Vec<bool>,
    pub truncated: Vec<bool>,
    /// The observation reached by the step itself, present only for envs
    /// whose episode ended (needed to bootstrap through truncations).
    pub final_observations: Vec<Option<Vec<f64>>>,
}

/// Independent copies of one environment, auto-reset on episode end.
#[derive(Debug, Clone, PartialEq)]
pub struct VecEnv {
    envs: Vec<Env>,
}

impl VecEnv {
    /// Sub-environment `i` uses ChaCha stream `i` of `seed`.
    pub fn new(config: EnvConfig, num_envs: usize, seed: u64) -> Self {
        assert!(num_envs > 0, "num_envs must be positive");
        let envs = (0..num_envs)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                Env::from_rng(config, rng).0
            })
            .collect();
        Self { envs }
    }

    pub fn from_envs(envs: Vec<Env>) -> Self {
        assert!(!envs.is_empty());
        Self { envs }
    }

    pub fn num_envs(&self) -> usize {
        self.envs.len()
    }

    pub fn config(&self) -> &EnvConfig {
        self.envs[0].config()
    }

    pub fn envs(&self) -> &[Env] {
        &self.envs
    }

    pub fn observations(&self) -> Array2<f64> {
        let dim = self.config().obs_dim();
        let mut obs = Array2::zeros((self.envs.len(), dim));
        for (mut row, env) in obs.rows_mut().into_iter().zip(&self.envs) {
            row.assign(&ndarray::ArrayView1::from(&env.observation()));
        }
        obs
    }

    pub fn step(&mut self, actions: ArrayView2<'_, f64>) -> Result<VecStep> {
        check_len("vec_step action rows", self.envs.len(), actions.nrows())?;
        check_len("vec_step action width", self.config().action_dim(), actions.ncols())?;
        let n = self.envs.len();
        let mut out = VecStep {
            observations: Array2::zeros((n, self.config().obs_dim())),
            rewards: Vec::with_capacity(n),
            terminated: Vec::with_capacity(n),
            truncated: Vec::with_capacity(n),
            final_observations: Vec::with_capacity(n),
        };
        for (i, env) in self.envs.iter_mut().enumerate() {
            let action = actions.row(i).to_vec();
            let result = env.step(&action)?;
            let obs = if result.terminated || result.truncated {
                out.final_observations.push(Some(result.observation));
                env.reset_in_place()
            } else {
                out.final_observations.push(None);
                result.observation
            };
            out.observations
                .row_mut(i)
                .assign(&ndarray::ArrayView1::from(&obs));
            out.rewards.push(result.reward);
            out.terminated.push(result.terminated);
            out.truncated.push(result.truncated);
        }
        Ok(out)
    }
}
