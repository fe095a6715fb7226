//! Meta-training pipelines.
//!
//! - Train-time: ES over the message network `φ`; a candidate's fitness is
//!   `c` times the mean per-step training reward of fresh victims trained
//!   next to it.
//! - Test-time: ES over `[φ | ψ]`. A victim is trained with `φ`, frozen,
//!   and then steered by the goal-conditioned messages of `ψ`.
//! - Oracles: a PPO message policy `ψ*` against a frozen victim, the same
//!   behind a random `φ`, and a PPO agent acting on the goal task directly.
//! - RARL: a stochastic message policy trained online by PPO on the negated
//!   victim reward, alternating with the victim.
//!
//! Adversaries only ever see raw environment observations (and goals). They
//! are handed neither victim parameters nor victim actions.

use std::sync::atomic::AtomicBool;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cheaptalk::{self, adversary_spec, augment, Adversary, ChannelConfig, ChannelError, DEFAULT_ADVERSARY_HIDDEN};
use crate::envs::{self, Action, ActionSpace, EnvError, EnvKind, EnvState, Goal, VecEnv};
use crate::es::{self, EsConfig, EsError, EsOutcome, EsState, GenerationRecord, OptimizeOptions};
use crate::nn::{self, FlatParams, InitScheme, MlpSpec, NnError};
use crate::ppo::{
    self, policy_sample, ActorCritic, Observation, PpoConfig, PpoError, PpoLearner, TaskStep, TrainOutput, VecTask,
};
use crate::rng::{self, tag, Rng};

#[derive(Debug, Error)]
pub enum MetaError {
    #[error("invalid meta config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Ppo(#[from] PpoError),
    #[error(transparent)]
    Es(#[from] EsError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Ally,
    Adversary,
}

impl Objective {
    /// `c`: +1 to maximize the victim's reward, -1 to minimize it.
    pub fn sign(self) -> f64 {
        match self {
            Objective::Ally => 1.0,
            Objective::Adversary => -1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestTimeConfig {
    /// `I`: goal episodes per evaluated victim.
    pub eval_episodes: usize,
    /// Seed of the goals used for post-training evaluation.
    pub goal_seed: u64,
    /// Independent victims in the post-training evaluation.
    pub eval_seeds: usize,
}

impl Default for TestTimeConfig {
    fn default() -> Self {
        TestTimeConfig { eval_episodes: 8, goal_seed: 0, eval_seeds: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RarlConfig {
    pub victim_steps_per_cycle: usize,
    pub adversary_steps_per_cycle: usize,
    /// Victim PPO updates over the whole run.
    pub total_victim_updates: usize,
}

impl Default for RarlConfig {
    fn default() -> Self {
        RarlConfig { victim_steps_per_cycle: 8, adversary_steps_per_cycle: 8, total_victim_updates: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    pub env: EnvKind,
    pub channel: ChannelConfig,
    pub ppo: PpoConfig,
    pub es: EsConfig,
    pub objective: Objective,
    /// Victim trainings averaged per fitness evaluation.
    pub rollouts_per_candidate: usize,
    pub adversary_hidden: Vec<usize>,
    pub test_time: Option<TestTimeConfig>,
    /// Fresh victims trained against the final adversary after meta-training.
    pub eval_victims: usize,
    pub rarl: RarlConfig,
    pub master_seed: u64,
}

impl MetaConfig {
    /// Small defaults for `kind`.
    pub fn desk(kind: EnvKind) -> Self {
        MetaConfig {
            env: kind,
            channel: ChannelConfig::default(),
            ppo: PpoConfig::for_env(kind),
            es: EsConfig::default(),
            objective: Objective::Adversary,
            rollouts_per_candidate: 2,
            adversary_hidden: DEFAULT_ADVERSARY_HIDDEN.to_vec(),
            test_time: None,
            eval_victims: 10,
            rarl: RarlConfig::default(),
            master_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), MetaError> {
        self.ppo.validate()?;
        self.es.validate()?;
        self.channel.validate(self.env.obs_dim())?;
        if self.rollouts_per_candidate == 0 {
            return Err(MetaError::InvalidConfig("rollouts_per_candidate must be >= 1".into()));
        }
        if self.adversary_hidden.is_empty() {
            return Err(MetaError::InvalidConfig("adversary_hidden needs at least one layer".into()));
        }
        if let Some(tt) = &self.test_time {
            if self.env.goal_dim() == 0 {
                return Err(MetaError::InvalidConfig(format!("{:?} has no goal-conditioned variant", self.env)));
            }
            if tt.eval_episodes == 0 {
                return Err(MetaError::InvalidConfig("eval_episodes must be >= 1".into()));
            }
        }
        Ok(())
    }

    /// Spec of the train-time message network `φ`.
    pub fn phi_spec(&self) -> Result<MlpSpec, MetaError> {
        Ok(adversary_spec(self.env.obs_dim(), self.channel.message_dim, &self.adversary_hidden)?)
    }

    /// Spec of the goal-conditioned message network `ψ`.
    pub fn psi_spec(&self) -> Result<MlpSpec, MetaError> {
        Ok(adversary_spec(self.env.obs_dim() + self.env.goal_dim(), self.channel.message_dim, &self.adversary_hidden)?)
    }

    pub fn seeds(&self) -> Seeds {
        Seeds::from_master(self.master_seed)
    }
}

/// Seeds derived from the master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub master: u64,
    pub es: u64,
    pub init: u64,
    pub eval: u64,
}

impl Seeds {
    pub fn from_master(master: u64) -> Self {
        Seeds {
            master,
            es: rng::derive_seed(master, &[tag::ES_NOISE]),
            init: rng::derive_seed(master, &[tag::INIT]),
            eval: rng::derive_seed(master, &[tag::EVAL]),
        }
    }

    /// Seed of the `i`-th evaluation victim. Baselines use the same seeds.
    pub fn eval_victim(&self, i: usize) -> u64 {
        rng::derive_seed(self.eval, &[i as u64])
    }
}

fn learned(spec: &MlpSpec, values: &[f64]) -> Result<Adversary, MetaError> {
    Ok(Adversary::Learned(FlatParams::from_values(spec.clone(), values.to_vec())?))
}

fn rollout_seed(seed: u64, r: usize) -> u64 {
    rng::derive_seed(seed, &[tag::ROLLOUT, r as u64])
}

/// Mean per-step training reward of one victim trained next to `phi`.
pub fn traintime_rollout_reward(phi: &[f64], config: &MetaConfig, victim_seed: u64) -> Result<f64, MetaError> {
    let adversary = learned(&config.phi_spec()?, phi)?;
    Ok(ppo::train_victim(config.env, &adversary, &config.channel, &config.ppo, victim_seed)?.mean_reward())
}

/// `c` times the victims' mean per-step training reward, averaged over
/// `rollouts_per_candidate` victims.
pub fn traintime_fitness(phi: &[f64], config: &MetaConfig, seed: u64) -> Result<f64, MetaError> {
    let n = config.rollouts_per_candidate;
    let mut total = 0.0;
    for r in 0..n {
        total += traintime_rollout_reward(phi, config, rollout_seed(seed, r))?;
    }
    Ok(config.objective.sign() * total / n as f64)
}

/// Hooks for long runs.
#[derive(Default)]
pub struct RunOptions<'a> {
    pub workers: Option<usize>,
    pub stop: Option<&'a AtomicBool>,
    #[allow(clippy::type_complexity)]
    pub on_generation: Option<Box<dyn FnMut(&EsState, &GenerationRecord) + 'a>>,
    /// Continue from a saved ES state instead of the initial mean.
    pub resume_from: Option<EsState>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestTimeEval {
    /// Mean goal score of the trained `(φ, ψ)` per evaluation victim.
    pub trained: Vec<f64>,
    /// The same victims steered by an all-zero `ψ`.
    pub zero_psi: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct MetaResult {
    pub phi_spec: MlpSpec,
    pub phi: Vec<f64>,
    pub psi_spec: Option<MlpSpec>,
    pub psi: Option<Vec<f64>>,
    pub history: Vec<GenerationRecord>,
    pub es_state: EsState,
    /// Per-update mean reward of each post-training evaluation victim.
    pub victim_traces: Vec<Vec<f64>>,
    pub testtime_eval: Option<TestTimeEval>,
    pub seeds: Seeds,
    pub interrupted: bool,
}

impl MetaResult {
    pub fn victim_mean_rewards(&self) -> Vec<f64> {
        self.victim_traces.iter().map(|t| t.iter().sum::<f64>() / t.len().max(1) as f64).collect()
    }
}

/// LeCun-uniform initial message-network parameters.
pub fn initial_params(spec: &MlpSpec, seed: u64) -> Vec<f64> {
    nn::init(spec, InitScheme::LecunUniform, &mut rng::stream(seed)).values
}

fn run_es<F>(fitness: F, config: &MetaConfig, init: Vec<f64>, options: RunOptions<'_>) -> Result<EsOutcome, MetaError>
where
    F: Fn(&[f64], u64) -> Result<f64, MetaError> + Sync,
{
    let seeds = config.seeds();
    let es_options = OptimizeOptions { workers: options.workers, stop: options.stop, on_generation: options.on_generation };
    let state = options.resume_from.unwrap_or_else(|| EsState::new(init, seeds.es));
    Ok(es::resume(fitness, &config.es, state, es_options)?)
}

/// Trains victims next to `adversary` with the evaluation seeds.
pub fn evaluation_victims(
    adversary: &Adversary,
    config: &MetaConfig,
    n: usize,
) -> Result<Vec<TrainOutput>, MetaError> {
    let seeds = config.seeds();
    (0..n)
        .into_par_iter()
        .map(|i| Ok(ppo::train_victim(config.env, adversary, &config.channel, &config.ppo, seeds.eval_victim(i))?))
        .collect()
}

/// Train-time ACT.
pub fn run_traintime(config: &MetaConfig, options: RunOptions<'_>) -> Result<MetaResult, MetaError> {
    config.validate()?;
    if config.test_time.is_some() {
        return Err(MetaError::InvalidConfig("run_traintime needs a config without test_time".into()));
    }
    let spec = config.phi_spec()?;
    let seeds = config.seeds();
    let init = initial_params(&spec, seeds.init);
    let outcome = run_es(|c, s| traintime_fitness(c, config, s), config, init, options)?;
    let phi = outcome.state.mean.clone();
    let victim_traces = if outcome.interrupted {
        Vec::new()
    } else {
        evaluation_victims(&learned(&spec, &phi)?, config, config.eval_victims)?
            .into_iter()
            .map(|o| o.reward_trace)
            .collect()
    };
    Ok(MetaResult {
        phi_spec: spec,
        phi,
        psi_spec: None,
        psi: None,
        history: outcome.history,
        es_state: outcome.state,
        victim_traces,
        testtime_eval: None,
        seeds,
        interrupted: outcome.interrupted,
    })
}

/// Splits a test-time candidate into `(φ, ψ)`.
pub fn split_candidate<'c>(candidate: &'c [f64], config: &MetaConfig) -> Result<(&'c [f64], &'c [f64]), MetaError> {
    let np = config.phi_spec()?.param_count();
    let nq = config.psi_spec()?.param_count();
    if candidate.len() != np + nq {
        return Err(MetaError::InvalidConfig(format!(
            "candidate has {} values, expected {} + {}",
            candidate.len(),
            np,
            nq
        )));
    }
    Ok(candidate.split_at(np))
}

/// A message source for goal episodes: `(raw obs, goal) -> message`.
pub type MessageFn<'a> = dyn Fn(&[f64], &Goal) -> Result<Vec<f64>, MetaError> + Sync + 'a;

/// Mean per-step goal reward of each of `episodes` single-shot episodes in
/// which the frozen `victim` acts on messages from `messages`. Episode `i`
/// draws its goal, start state and victim actions from streams keyed by
/// `(seed, i)`.
pub fn goal_episode_scores(
    victim: &ActorCritic,
    messages: &MessageFn<'_>,
    config: &MetaConfig,
    episodes: usize,
    seed: u64,
) -> Result<Vec<f64>, MetaError> {
    (0..episodes)
        .map(|i| {
            let i = i as u64;
            let goal = envs::sample_goal(config.env, &mut rng::substream(seed, &[tag::GOAL, i]))?;
            let (mut state, _) = envs::reset(config.env, &mut rng::substream(seed, &[tag::ENV, i]));
            let mut policy_rng = rng::substream(seed, &[tag::POLICY, i]);
            let (mut total, mut steps) = (0.0, 0usize);
            loop {
                let raw = state.obs();
                let msg = messages(&raw, &goal)?;
                let input = victim.obs_norm.normalize(&augment(&raw, &msg, &config.channel)?);
                let (action, _, _) = policy_sample(victim, &input, &mut policy_rng)?;
                let out = envs::step(&state, &action)?;
                total += envs::goal_reward(&out.next_state, &action, &goal)?;
                steps += 1;
                state = out.next_state;
                if out.done {
                    break;
                }
            }
            Ok(total / steps as f64)
        })
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

/// Messages from a goal-conditioned network.
pub fn network_messages<'a>(psi: &'a Adversary, scale: f64) -> impl Fn(&[f64], &Goal) -> Result<Vec<f64>, MetaError> + Sync + 'a {
    move |raw, goal| Ok(psi.message(raw, Some(goal), scale)?)
}

/// Trains the victim used by a test-time rollout. It depends on `φ` and the
/// rollout seed only.
pub fn train_testtime_victim(phi: &[f64], config: &MetaConfig, victim_seed: u64) -> Result<ActorCritic, MetaError> {
    let adversary = learned(&config.phi_spec()?, phi)?;
    Ok(ppo::train_victim(config.env, &adversary, &config.channel, &config.ppo, victim_seed)?.victim)
}

/// Mean goal score of `[φ | ψ]`: trains fresh victims with `φ`, then
/// steers each, frozen, with `ψ` for `I` goal episodes.
pub fn testtime_fitness(candidate: &[f64], config: &MetaConfig, seed: u64) -> Result<f64, MetaError> {
    let tt = config.test_time.as_ref().ok_or_else(|| MetaError::InvalidConfig("missing test_time".into()))?;
    let (phi, psi) = split_candidate(candidate, config)?;
    let psi = learned(&config.psi_spec()?, psi)?;
    let messages = network_messages(&psi, config.channel.message_scale);
    let n = config.rollouts_per_candidate;
    let mut total = 0.0;
    for r in 0..n {
        let rs = rollout_seed(seed, r);
        let victim = train_testtime_victim(phi, config, rs)?;
        let goal_seed = rng::derive_seed(rs, &[tag::GOAL]);
        total += mean(&goal_episode_scores(&victim, &messages, config, tt.eval_episodes, goal_seed)?);
    }
    Ok(total / n as f64)
}

/// Test-time ACT: co-evolves `φ` and `ψ`.
pub fn run_testtime(config: &MetaConfig, options: RunOptions<'_>) -> Result<MetaResult, MetaError> {
    config.validate()?;
    let tt = config.test_time.clone().ok_or_else(|| MetaError::InvalidConfig("run_testtime needs test_time".into()))?;
    let (phi_spec, psi_spec) = (config.phi_spec()?, config.psi_spec()?);
    let seeds = config.seeds();
    let mut init = initial_params(&phi_spec, seeds.init);
    init.extend(initial_params(&psi_spec, rng::derive_seed(seeds.init, &[tag::GOAL])));
    let outcome = run_es(|c, s| testtime_fitness(c, config, s), config, init, options)?;
    let (phi, psi) = split_candidate(&outcome.state.mean, config)?;
    let (phi, psi) = (phi.to_vec(), psi.to_vec());
    let testtime_eval = if outcome.interrupted { None } else { Some(evaluate_testtime(&phi, &psi, config, &tt)?) };
    Ok(MetaResult {
        phi_spec,
        phi,
        psi_spec: Some(psi_spec),
        psi: Some(psi),
        history: outcome.history,
        es_state: outcome.state,
        victim_traces: Vec::new(),
        testtime_eval,
        seeds,
        interrupted: outcome.interrupted,
    })
}

/// Goal seed of evaluation victim `k`.
pub fn eval_goal_seed(tt: &TestTimeConfig, k: usize) -> u64 {
    rng::derive_seed(tt.goal_seed, &[tag::EVAL, k as u64])
}

/// Scores `(φ, ψ)` and the zero-`ψ` control on the evaluation victims.
pub fn evaluate_testtime(phi: &[f64], psi: &[f64], config: &MetaConfig, tt: &TestTimeConfig) -> Result<TestTimeEval, MetaError> {
    let seeds = config.seeds();
    let psi = learned(&config.psi_spec()?, psi)?;
    let zero = Adversary::Zeroes(config.channel.message_dim);
    let scale = config.channel.message_scale;
    let rows: Vec<(f64, f64)> = (0..tt.eval_seeds)
        .into_par_iter()
        .map(|k| {
            let victim = train_testtime_victim(phi, config, seeds.eval_victim(k))?;
            let gs = eval_goal_seed(tt, k);
            let trained = mean(&goal_episode_scores(&victim, &network_messages(&psi, scale), config, tt.eval_episodes, gs)?);
            let control = mean(&goal_episode_scores(&victim, &network_messages(&zero, scale), config, tt.eval_episodes, gs)?);
            Ok((trained, control))
        })
        .collect::<Result<_, MetaError>>()?;
    Ok(TestTimeEval { trained: rows.iter().map(|r| r.0).collect(), zero_psi: rows.iter().map(|r| r.1).collect() })
}

fn goal_rngs(seed: u64, n: usize) -> Vec<Rng> {
    (0..n).map(|i| rng::substream(seed, &[tag::GOAL, i as u64])).collect()
}

fn learner_observation(state: &EnvState, goal: Option<&Goal>) -> Observation {
    let raw = state.obs();
    let mut augmented = raw.clone();
    if let Some(g) = goal {
        augmented.extend(g.encoding());
    }
    Observation { raw, message: Vec::new(), augmented, episode_step: state.steps() }
}

/// What a message-emitting learner is rewarded for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ControlReward {
    /// Goal reward of the state the victim reaches; goals resample on reset.
    Goal,
    /// Negated victim reward.
    NegatedVictimReward,
}

/// Environments seen through a frozen victim: the learner's actions are
/// messages (`scale · tanh(a)`), the victim picks the environment actions.
pub struct MessageControlTask<'a> {
    env: &'a mut VecEnv,
    victim: &'a ActorCritic,
    victim_rng: &'a mut Rng,
    channel: &'a ChannelConfig,
    reward: ControlReward,
    goals: Vec<Goal>,
    goal_rngs: Vec<Rng>,
    obs: Vec<Observation>,
}

impl<'a> MessageControlTask<'a> {
    pub fn new(
        env: &'a mut VecEnv,
        victim: &'a ActorCritic,
        victim_rng: &'a mut Rng,
        channel: &'a ChannelConfig,
        reward: ControlReward,
        goal_seed: u64,
    ) -> Result<Self, MetaError> {
        let mut goal_rngs = goal_rngs(goal_seed, env.len());
        let goals = match reward {
            ControlReward::Goal => {
                goal_rngs.iter_mut().map(|r| envs::sample_goal(env.kind(), r)).collect::<Result<_, _>>()?
            }
            ControlReward::NegatedVictimReward => Vec::new(),
        };
        let obs = env.states().iter().enumerate().map(|(i, s)| learner_observation(s, goals.get(i))).collect();
        Ok(MessageControlTask { env, victim, victim_rng, channel, reward, goals, goal_rngs, obs })
    }
}

/// `scale · tanh(a)` per component.
pub fn squash_message(a: &[f64], scale: f64) -> Vec<f64> {
    a.iter().map(|x| scale * x.tanh()).collect()
}

impl VecTask for MessageControlTask<'_> {
    fn n_envs(&self) -> usize {
        self.env.len()
    }

    fn input_dim(&self) -> usize {
        self.env.kind().obs_dim() + if self.reward == ControlReward::Goal { self.env.kind().goal_dim() } else { 0 }
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Continuous(self.channel.message_dim)
    }

    fn observations(&self) -> &[Observation] {
        &self.obs
    }

    fn step(&mut self, actions: &[Action]) -> Result<Vec<TaskStep>, PpoError> {
        let n = self.env.len();
        let d = self.victim.input_dim();
        let mut inputs = Vec::with_capacity(n * d);
        for (o, a) in self.obs.iter().zip(actions) {
            let Action::Continuous(a) = a else {
                return Err(PpoError::InvalidConfig("message actions must be continuous".into()));
            };
            let msg = squash_message(a, self.channel.message_scale);
            inputs.extend(self.victim.obs_norm.normalize(&augment(&o.raw, &msg, self.channel)?));
        }
        let victim_actions: Vec<Action> =
            self.victim.sample_batch(&inputs, n, self.victim_rng)?.into_iter().map(|(a, _, _)| a).collect();
        let out = self.env.step(&victim_actions)?;
        let mut steps = Vec::with_capacity(n);
        for (i, res) in out.results.iter().enumerate() {
            let reward = match self.reward {
                ControlReward::Goal => envs::goal_reward(&res.next_state, &victim_actions[i], &self.goals[i])?,
                ControlReward::NegatedVictimReward => -res.reward,
            };
            if res.done && self.reward == ControlReward::Goal {
                self.goals[i] = envs::sample_goal(self.env.kind(), &mut self.goal_rngs[i])?;
            }
            steps.push(TaskStep { reward, done: res.done });
        }
        self.obs = out.states.iter().enumerate().map(|(i, s)| learner_observation(s, self.goals.get(i))).collect();
        Ok(steps)
    }
}

/// A trained message policy and its per-update mean reward.
#[derive(Clone, Debug)]
pub struct OracleResult {
    pub policy: ActorCritic,
    pub reward_trace: Vec<f64>,
    /// Mean goal score of the final policy on `eval_episodes` goal episodes.
    pub eval_scores: Vec<f64>,
}

/// PPO config for message and direct oracles: the victim table with a
/// continuous head.
fn oracle_ppo(config: &MetaConfig) -> PpoConfig {
    config.ppo.clone()
}

/// Messages from a PPO message policy's mode.
pub fn policy_messages<'a>(policy: &'a ActorCritic, scale: f64) -> impl Fn(&[f64], &Goal) -> Result<Vec<f64>, MetaError> + Sync + 'a {
    move |raw, goal| {
        let mut x = raw.to_vec();
        x.extend(goal.encoding());
        let mode = policy.mode(&policy.obs_norm.normalize(&x), 1)?;
        Ok(squash_message(&mode[0], scale))
    }
}

/// `ψ*`: PPO on the message space against a frozen victim, rewarded with
/// the goal reward.
pub fn oracle_testtime_ppo(victim: &ActorCritic, config: &MetaConfig, seed: u64) -> Result<OracleResult, MetaError> {
    let tt = config.test_time.clone().unwrap_or_default();
    let cfg = oracle_ppo(config);
    let mut env = VecEnv::new(config.env, cfg.n_envs, rng::derive_seed(seed, &[tag::ENV]));
    let mut victim_rng = rng::substream(seed, &[tag::POLICY]);
    let mut task = MessageControlTask::new(
        &mut env,
        victim,
        &mut victim_rng,
        &config.channel,
        ControlReward::Goal,
        rng::derive_seed(seed, &[tag::GOAL]),
    )?;
    let mut learner =
        PpoLearner::new(task.input_dim(), task.action_space(), &cfg, rng::derive_seed(seed, &[tag::ORACLE]))?;
    let out = ppo::train_on(&mut learner, &mut task, None)?;
    let eval_scores = goal_episode_scores(
        victim,
        &policy_messages(&out.victim, config.channel.message_scale),
        config,
        tt.eval_episodes,
        rng::derive_seed(seed, &[tag::EVAL]),
    )?;
    Ok(OracleResult { policy: out.victim, reward_trace: out.reward_trace, eval_scores })
}

/// Random shaper: a frozen random `φ` during victim training, then `ψ*`.
pub fn random_shaper_oracle(config: &MetaConfig, seed: u64) -> Result<(ActorCritic, OracleResult), MetaError> {
    let phi = Adversary::random_fixed(&config.phi_spec()?, &mut rng::substream(seed, &[tag::ADVERSARY]));
    let victim = ppo::train_victim(config.env, &phi, &config.channel, &config.ppo, rng::derive_seed(seed, &[tag::ROLLOUT]))?.victim;
    let oracle = oracle_testtime_ppo(&victim, config, rng::derive_seed(seed, &[tag::ORACLE]))?;
    Ok((victim, oracle))
}

/// Goal-conditioned environments acted on directly.
pub struct DirectGoalTask {
    env: VecEnv,
    goals: Vec<Goal>,
    goal_rngs: Vec<Rng>,
    obs: Vec<Observation>,
}

impl DirectGoalTask {
    pub fn new(kind: EnvKind, n_envs: usize, seed: u64) -> Result<Self, MetaError> {
        let env = VecEnv::new(kind, n_envs, rng::derive_seed(seed, &[tag::ENV]));
        let mut goal_rngs = goal_rngs(rng::derive_seed(seed, &[tag::GOAL]), n_envs);
        let goals: Vec<Goal> = goal_rngs.iter_mut().map(|r| envs::sample_goal(kind, r)).collect::<Result<_, _>>()?;
        let obs = env.states().iter().zip(&goals).map(|(s, g)| learner_observation(s, Some(g))).collect();
        Ok(DirectGoalTask { env, goals, goal_rngs, obs })
    }
}

impl VecTask for DirectGoalTask {
    fn n_envs(&self) -> usize {
        self.env.len()
    }

    fn input_dim(&self) -> usize {
        self.env.kind().obs_dim() + self.env.kind().goal_dim()
    }

    fn action_space(&self) -> ActionSpace {
        self.env.kind().action_space()
    }

    fn observations(&self) -> &[Observation] {
        &self.obs
    }

    fn step(&mut self, actions: &[Action]) -> Result<Vec<TaskStep>, PpoError> {
        let out = self.env.step(actions)?;
        let mut steps = Vec::with_capacity(actions.len());
        for (i, res) in out.results.iter().enumerate() {
            let reward = envs::goal_reward(&res.next_state, &actions[i], &self.goals[i])?;
            if res.done {
                self.goals[i] = envs::sample_goal(self.env.kind(), &mut self.goal_rngs[i])?;
            }
            steps.push(TaskStep { reward, done: res.done });
        }
        self.obs = out.states.iter().zip(&self.goals).map(|(s, g)| learner_observation(s, Some(g))).collect();
        Ok(steps)
    }
}

/// Mean per-step goal reward of an agent acting on `(obs, goal)` directly,
/// over the same goal episodes as [`goal_episode_scores`].
pub fn direct_episode_scores(agent: &ActorCritic, config: &MetaConfig, episodes: usize, seed: u64) -> Result<Vec<f64>, MetaError> {
    (0..episodes)
        .map(|i| {
            let i = i as u64;
            let goal = envs::sample_goal(config.env, &mut rng::substream(seed, &[tag::GOAL, i]))?;
            let (mut state, _) = envs::reset(config.env, &mut rng::substream(seed, &[tag::ENV, i]));
            let mut policy_rng = rng::substream(seed, &[tag::POLICY, i]);
            let (mut total, mut steps) = (0.0, 0usize);
            loop {
                let mut x = state.obs();
                x.extend(goal.encoding());
                let (action, _, _) = policy_sample(agent, &agent.obs_norm.normalize(&x), &mut policy_rng)?;
                let out = envs::step(&state, &action)?;
                total += envs::goal_reward(&out.next_state, &action, &goal)?;
                steps += 1;
                state = out.next_state;
                if out.done {
                    break;
                }
            }
            Ok(total / steps as f64)
        })
        .collect()
}

/// PPO on the goal-conditioned task itself: the reference ceiling.
pub fn direct_oracle(config: &MetaConfig, seed: u64) -> Result<OracleResult, MetaError> {
    let tt = config.test_time.clone().unwrap_or_default();
    let cfg = config.ppo.clone();
    let mut task = DirectGoalTask::new(config.env, cfg.n_envs, seed)?;
    let mut learner = PpoLearner::new(task.input_dim(), task.action_space(), &cfg, rng::derive_seed(seed, &[tag::ORACLE]))?;
    let out = ppo::train_on(&mut learner, &mut task, None)?;
    let eval_scores = direct_episode_scores(&out.victim, config, tt.eval_episodes, rng::derive_seed(seed, &[tag::EVAL]))?;
    Ok(OracleResult { policy: out.victim, reward_trace: out.reward_trace, eval_scores })
}

/// Environments whose messages come from a stochastic message policy.
pub struct StochasticMessageTask<'a> {
    env: &'a mut VecEnv,
    adversary: &'a ActorCritic,
    adversary_rng: &'a mut Rng,
    channel: &'a ChannelConfig,
    obs: Vec<Observation>,
}

impl<'a> StochasticMessageTask<'a> {
    pub fn new(
        env: &'a mut VecEnv,
        adversary: &'a ActorCritic,
        adversary_rng: &'a mut Rng,
        channel: &'a ChannelConfig,
    ) -> Result<Self, MetaError> {
        let mut task = StochasticMessageTask { env, adversary, adversary_rng, channel, obs: Vec::new() };
        task.obs = task.observe(&task.env.states().to_vec())?;
        Ok(task)
    }

    fn observe(&mut self, states: &[EnvState]) -> Result<Vec<Observation>, PpoError> {
        let raws: Vec<Vec<f64>> = states.iter().map(EnvState::obs).collect();
        let inputs: Vec<f64> = raws.iter().flat_map(|r| self.adversary.obs_norm.normalize(r)).collect();
        let samples = self.adversary.sample_batch(&inputs, states.len(), self.adversary_rng)?;
        raws.into_iter()
            .zip(samples)
            .zip(states)
            .map(|((raw, (a, _, _)), s)| {
                let Action::Continuous(a) = a else { unreachable!("message policy is continuous") };
                let message = squash_message(&a, self.channel.message_scale);
                let augmented = augment(&raw, &message, self.channel)?;
                Ok(Observation { raw, message, augmented, episode_step: s.steps() })
            })
            .collect()
    }
}

impl VecTask for StochasticMessageTask<'_> {
    fn n_envs(&self) -> usize {
        self.env.len()
    }

    fn input_dim(&self) -> usize {
        self.channel.augmented_dim(self.env.kind().obs_dim())
    }

    fn action_space(&self) -> ActionSpace {
        self.env.kind().action_space()
    }

    fn observations(&self) -> &[Observation] {
        &self.obs
    }

    fn step(&mut self, actions: &[Action]) -> Result<Vec<TaskStep>, PpoError> {
        let out = self.env.step(actions)?;
        self.obs = self.observe(&out.states)?;
        Ok(out.results.iter().map(|r| TaskStep { reward: r.reward, done: r.done }).collect())
    }
}

#[derive(Clone, Debug)]
pub struct RarlResult {
    pub victim: ActorCritic,
    pub adversary: ActorCritic,
    /// Victim's mean per-step reward for each of its updates.
    pub victim_trace: Vec<f64>,
    /// Adversary's mean per-step reward (negated victim reward) per update.
    pub adversary_trace: Vec<f64>,
}

/// RARL on the cheap talk channel: cycles of victim PPO updates against a
/// frozen stochastic message policy, then message-policy PPO updates against
/// the frozen victim.
pub fn run_rarl(config: &MetaConfig, seed: u64) -> Result<RarlResult, MetaError> {
    config.validate()?;
    let rc = &config.rarl;
    if rc.victim_steps_per_cycle == 0 {
        return Err(MetaError::InvalidConfig("victim_steps_per_cycle must be >= 1".into()));
    }
    let cfg = &config.ppo;
    let mut env = VecEnv::new(config.env, cfg.n_envs, rng::derive_seed(seed, &[tag::ENV]));
    let mut victim = PpoLearner::new(
        config.channel.augmented_dim(config.env.obs_dim()),
        config.env.action_space(),
        cfg,
        seed,
    )?;
    let mut adversary = PpoLearner::new(
        config.env.obs_dim(),
        ActionSpace::Continuous(config.channel.message_dim),
        cfg,
        rng::derive_seed(seed, &[tag::ADVERSARY]),
    )?;
    let mut adversary_rng = rng::substream(seed, &[tag::ADVERSARY, tag::POLICY]);
    let mut victim_rng = rng::substream(seed, &[tag::POLICY, tag::ADVERSARY]);
    let mut victim_trace = Vec::new();
    let mut adversary_trace = Vec::new();
    while victim_trace.len() < rc.total_victim_updates {
        let frozen_adversary = adversary.params.clone();
        {
            let mut task = StochasticMessageTask::new(&mut env, &frozen_adversary, &mut adversary_rng, &config.channel)?;
            for _ in 0..rc.victim_steps_per_cycle {
                if victim_trace.len() >= rc.total_victim_updates {
                    break;
                }
                let (batch, stats) = victim.collect(&mut task)?;
                victim.update(&batch)?;
                victim_trace.push(stats.mean_reward);
            }
        }
        if rc.adversary_steps_per_cycle == 0 || victim_trace.len() >= rc.total_victim_updates {
            continue;
        }
        let frozen_victim = victim.params.clone();
        let mut task = MessageControlTask::new(
            &mut env,
            &frozen_victim,
            &mut victim_rng,
            &config.channel,
            ControlReward::NegatedVictimReward,
            0,
        )?;
        for _ in 0..rc.adversary_steps_per_cycle {
            let (batch, stats) = adversary.collect(&mut task)?;
            adversary.update(&batch)?;
            adversary_trace.push(stats.mean_reward);
        }
    }
    Ok(RarlResult { victim: victim.params, adversary: adversary.params, victim_trace, adversary_trace })
}

/// Writes a message network in the parameter file format.
pub fn write_adversary<W: std::io::Write>(w: W, spec: &MlpSpec, values: &[f64]) -> Result<(), MetaError> {
    Ok(nn::write_params(w, std::slice::from_ref(spec), Some(InitScheme::LecunUniform), values)?)
}

/// The message function exposed to the channel for a stored parameter set.
pub fn adversary_from(spec: &MlpSpec, values: &[f64]) -> Result<Adversary, MetaError> {
    learned(spec, values)
}

pub use cheaptalk::DEFAULT_MESSAGE_SCALE;
