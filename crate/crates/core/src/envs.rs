//! Deterministic CartPole, Pendulum and chain environments.
//!
//! Every transition is a pure function of `(state, action)`. No function in
//! this module takes a message argument: the channel cannot reach the
//! dynamics or the reward.

use std::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Rng};

pub const CARTPOLE_HORIZON: u32 = 500;
pub const PENDULUM_HORIZON: u32 = 200;
pub const DEFAULT_CHAIN_CELLS: usize = 8;

const GRAVITY: f64 = 9.8;
const MASS_CART: f64 = 1.0;
const MASS_POLE: f64 = 0.1;
const TOTAL_MASS: f64 = MASS_CART + MASS_POLE;
const HALF_LENGTH: f64 = 0.5;
const POLE_MASS_LENGTH: f64 = MASS_POLE * HALF_LENGTH;
const FORCE_MAG: f64 = 10.0;
const CARTPOLE_DT: f64 = 0.02;
const X_THRESHOLD: f64 = 2.4;
const THETA_THRESHOLD: f64 = 12.0 * PI / 180.0;

const PENDULUM_MAX_SPEED: f64 = 8.0;
const PENDULUM_MAX_TORQUE: f64 = 2.0;
const PENDULUM_DT: f64 = 0.05;
const PENDULUM_G: f64 = 10.0;
const PENDULUM_M: f64 = 1.0;
const PENDULUM_L: f64 = 1.0;

/// Lowest possible per-step Pendulum reward.
pub const PENDULUM_MIN_REWARD: f64 =
    -(PI * PI + 0.1 * PENDULUM_MAX_SPEED * PENDULUM_MAX_SPEED + 0.001 * PENDULUM_MAX_TORQUE * PENDULUM_MAX_TORQUE);

pub const CARTPOLE_GOAL_RANGE: f64 = 1.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("action {action:?} is not valid for {kind:?}")]
    InvalidAction { kind: EnvKind, action: Action },
    #[error("goal {goal:?} does not match environment {kind:?}")]
    GoalMismatch { kind: EnvKind, goal: Goal },
    #[error("{kind:?} has no goal-conditioned variant")]
    NoGoals { kind: EnvKind },
    #[error("batch length mismatch: {states} states, {actions} actions")]
    LengthMismatch { states: usize, actions: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "name")]
pub enum EnvKind {
    CartPole,
    Pendulum,
    Chain { n_cells: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActionSpace {
    Discrete(usize),
    Continuous(usize),
}

impl ActionSpace {
    /// Width of the policy head that parameterizes this space.
    pub fn head_dim(&self) -> usize {
        match *self {
            ActionSpace::Discrete(n) | ActionSpace::Continuous(n) => n,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

impl EnvKind {
    pub fn obs_dim(&self) -> usize {
        match *self {
            EnvKind::CartPole => 4,
            EnvKind::Pendulum => 3,
            EnvKind::Chain { n_cells } => n_cells,
        }
    }

    pub fn action_space(&self) -> ActionSpace {
        match self {
            EnvKind::CartPole | EnvKind::Chain { .. } => ActionSpace::Discrete(2),
            EnvKind::Pendulum => ActionSpace::Continuous(1),
        }
    }

    pub fn horizon(&self) -> u32 {
        match *self {
            EnvKind::CartPole => CARTPOLE_HORIZON,
            EnvKind::Pendulum => PENDULUM_HORIZON,
            EnvKind::Chain { n_cells } => (n_cells * 4) as u32,
        }
    }

    /// Length of the goal encoding fed to goal-conditioned policies.
    pub fn goal_dim(&self) -> usize {
        match self {
            EnvKind::CartPole => 1,
            EnvKind::Pendulum => 2,
            EnvKind::Chain { .. } => 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CartPoleState {
    pub x: f64,
    pub x_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
    pub steps: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendulumState {
    pub theta: f64,
    pub theta_dot: f64,
    pub steps: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainState {
    pub cell: usize,
    pub n_cells: usize,
    pub steps: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum EnvState {
    CartPole(CartPoleState),
    Pendulum(PendulumState),
    Chain(ChainState),
}

impl EnvState {
    pub fn kind(&self) -> EnvKind {
        match self {
            EnvState::CartPole(_) => EnvKind::CartPole,
            EnvState::Pendulum(_) => EnvKind::Pendulum,
            EnvState::Chain(c) => EnvKind::Chain { n_cells: c.n_cells },
        }
    }

    pub fn steps(&self) -> u32 {
        match self {
            EnvState::CartPole(s) => s.steps,
            EnvState::Pendulum(s) => s.steps,
            EnvState::Chain(s) => s.steps,
        }
    }

    pub fn obs(&self) -> Vec<f64> {
        match *self {
            EnvState::CartPole(s) => vec![s.x, s.x_dot, s.theta, s.theta_dot],
            EnvState::Pendulum(s) => vec![s.theta.cos(), s.theta.sin(), s.theta_dot],
            EnvState::Chain(s) => {
                let mut v = vec![0.0; s.n_cells];
                v[s.cell] = 1.0;
                v
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub next_state: EnvState,
    pub obs: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// Target the test-time adversary tries to steer the victim toward.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Goal {
    CartPole { target_x: f64 },
    Pendulum { target_angle: f64 },
}

impl Goal {
    pub fn kind(&self) -> EnvKind {
        match self {
            Goal::CartPole { .. } => EnvKind::CartPole,
            Goal::Pendulum { .. } => EnvKind::Pendulum,
        }
    }

    /// Angles are encoded as (cos, sin) so the encoding has no wrap jump.
    pub fn encoding(&self) -> Vec<f64> {
        match *self {
            Goal::CartPole { target_x } => vec![target_x],
            Goal::Pendulum { target_angle } => vec![target_angle.cos(), target_angle.sin()],
        }
    }
}

/// Wraps an angle into (-π, π].
pub fn wrap_angle(theta: f64) -> f64 {
    let r = (theta + PI).rem_euclid(2.0 * PI) - PI;
    if r <= -PI {
        r + 2.0 * PI
    } else {
        r
    }
}

/// Uniform draw from (-π, π].
fn uniform_angle(rng: &mut Rng) -> f64 {
    // gen::<f64>() is in [0, 1), so PI - 2πu is in (-π, π].
    PI - 2.0 * PI * rng.gen::<f64>()
}

pub fn reset(kind: EnvKind, rng: &mut Rng) -> (EnvState, Vec<f64>) {
    let state = match kind {
        EnvKind::CartPole => {
            let mut u = || rng.gen_range(-0.05..=0.05);
            EnvState::CartPole(CartPoleState { x: u(), x_dot: u(), theta: u(), theta_dot: u(), steps: 0 })
        }
        EnvKind::Pendulum => {
            let theta = uniform_angle(rng);
            let theta_dot = rng.gen_range(-1.0..=1.0);
            EnvState::Pendulum(PendulumState { theta, theta_dot, steps: 0 })
        }
        EnvKind::Chain { n_cells } => EnvState::Chain(ChainState { cell: 0, n_cells, steps: 0 }),
    };
    let obs = state.obs();
    (state, obs)
}

pub fn sample_goal(kind: EnvKind, rng: &mut Rng) -> Result<Goal, EnvError> {
    match kind {
        EnvKind::CartPole => Ok(Goal::CartPole {
            target_x: rng.gen_range(-CARTPOLE_GOAL_RANGE..=CARTPOLE_GOAL_RANGE),
        }),
        EnvKind::Pendulum => Ok(Goal::Pendulum { target_angle: uniform_angle(rng) }),
        EnvKind::Chain { .. } => Err(EnvError::NoGoals { kind }),
    }
}

fn cartpole_step(s: &CartPoleState, action: usize) -> StepResult {
    let force = if action == 1 { FORCE_MAG } else { -FORCE_MAG };
    let (sin_t, cos_t) = s.theta.sin_cos();
    let temp = (force + POLE_MASS_LENGTH * s.theta_dot * s.theta_dot * sin_t) / TOTAL_MASS;
    let theta_acc = (GRAVITY * sin_t - cos_t * temp)
        / (HALF_LENGTH * (4.0 / 3.0 - MASS_POLE * cos_t * cos_t / TOTAL_MASS));
    let x_acc = temp - POLE_MASS_LENGTH * theta_acc * cos_t / TOTAL_MASS;
    let next = CartPoleState {
        x: s.x + CARTPOLE_DT * s.x_dot,
        x_dot: s.x_dot + CARTPOLE_DT * x_acc,
        theta: s.theta + CARTPOLE_DT * s.theta_dot,
        theta_dot: s.theta_dot + CARTPOLE_DT * theta_acc,
        steps: s.steps + 1,
    };
    let failed = next.x.abs() > X_THRESHOLD || next.theta.abs() > THETA_THRESHOLD;
    let state = EnvState::CartPole(next);
    StepResult {
        obs: state.obs(),
        next_state: state,
        reward: if failed { 0.0 } else { 1.0 },
        done: failed || next.steps >= CARTPOLE_HORIZON,
    }
}

fn pendulum_step(s: &PendulumState, torque: f64) -> StepResult {
    let u = torque.clamp(-PENDULUM_MAX_TORQUE, PENDULUM_MAX_TORQUE);
    let th = wrap_angle(s.theta);
    let cost = th * th + 0.1 * s.theta_dot * s.theta_dot + 0.001 * u * u;
    let theta_dot = (s.theta_dot
        + (3.0 * PENDULUM_G / (2.0 * PENDULUM_L) * s.theta.sin() + 3.0 / (PENDULUM_M * PENDULUM_L * PENDULUM_L) * u)
            * PENDULUM_DT)
        .clamp(-PENDULUM_MAX_SPEED, PENDULUM_MAX_SPEED);
    let next = PendulumState { theta: s.theta + theta_dot * PENDULUM_DT, theta_dot, steps: s.steps + 1 };
    let state = EnvState::Pendulum(next);
    StepResult { obs: state.obs(), next_state: state, reward: -cost, done: next.steps >= PENDULUM_HORIZON }
}

fn chain_step(s: &ChainState, action: usize) -> StepResult {
    let cell = if action == 1 { (s.cell + 1).min(s.n_cells - 1) } else { s.cell.saturating_sub(1) };
    let next = ChainState { cell, n_cells: s.n_cells, steps: s.steps + 1 };
    let reached = cell == s.n_cells - 1;
    let state = EnvState::Chain(next);
    StepResult {
        obs: state.obs(),
        next_state: state,
        reward: if reached { 1.0 } else { 0.0 },
        done: reached || next.steps >= (s.n_cells * 4) as u32,
    }
}

pub fn step(state: &EnvState, action: &Action) -> Result<StepResult, EnvError> {
    let invalid = || EnvError::InvalidAction { kind: state.kind(), action: action.clone() };
    match (state, action) {
        (EnvState::CartPole(s), Action::Discrete(a)) if *a < 2 => Ok(cartpole_step(s, *a)),
        (EnvState::Pendulum(s), Action::Continuous(u)) if u.len() == 1 && u[0].is_finite() => {
            Ok(pendulum_step(s, u[0]))
        }
        (EnvState::Chain(s), Action::Discrete(a)) if *a < 2 => Ok(chain_step(s, *a)),
        _ => Err(invalid()),
    }
}

/// Dense goal reward, maximal (zero) exactly at the goal.
pub fn goal_reward(state: &EnvState, _action: &Action, goal: &Goal) -> Result<f64, EnvError> {
    match (state, goal) {
        (EnvState::CartPole(s), Goal::CartPole { target_x }) => Ok(-(s.x - target_x).abs()),
        (EnvState::Pendulum(s), Goal::Pendulum { target_angle }) => {
            let d = wrap_angle(s.theta - target_angle);
            Ok(-d * d)
        }
        _ => Err(EnvError::GoalMismatch { kind: state.kind(), goal: *goal }),
    }
}

/// Elementwise [`step`] over a batch, without resets.
pub fn vec_step(states: &[EnvState], actions: &[Action]) -> Result<Vec<StepResult>, EnvError> {
    if states.len() != actions.len() {
        return Err(EnvError::LengthMismatch { states: states.len(), actions: actions.len() });
    }
    states.iter().zip(actions).map(|(s, a)| step(s, a)).collect()
}

/// A batch of environments that reset themselves on termination.
///
/// Each sub-environment owns a reset stream derived from the batch seed and
/// its index.
#[derive(Clone, Debug)]
pub struct VecEnv {
    kind: EnvKind,
    states: Vec<EnvState>,
    rngs: Vec<Rng>,
}

/// Output of one [`VecEnv::step`]: the raw step results (terminal obs and
/// done flags as produced, before any reset) plus the states the batch is in
/// afterwards.
#[derive(Clone, Debug)]
pub struct VecStep {
    pub results: Vec<StepResult>,
    pub states: Vec<EnvState>,
}

impl VecEnv {
    pub fn new(kind: EnvKind, n: usize, seed: u64) -> Self {
        let mut rngs: Vec<Rng> = (0..n).map(|i| rng::substream(seed, &[rng::tag::ENV, i as u64])).collect();
        let states = rngs.iter_mut().map(|r| reset(kind, r).0).collect();
        VecEnv { kind, states, rngs }
    }

    pub fn kind(&self) -> EnvKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> &[EnvState] {
        &self.states
    }

    pub fn step(&mut self, actions: &[Action]) -> Result<VecStep, EnvError> {
        let results = vec_step(&self.states, actions)?;
        for ((state, res), rng) in self.states.iter_mut().zip(&results).zip(&mut self.rngs) {
            *state = if res.done { reset(self.kind, rng).0 } else { res.next_state };
        }
        Ok(VecStep { results, states: self.states.clone() })
    }
}
