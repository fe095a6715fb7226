//! Tabular victims on the chain gridworld.
//!
//! A Q-learner over augmented states `(s, m)` is trained next to a
//! deterministic message table `f: S -> M`. Exploration draws come from a
//! stream keyed by `(seed, episode, step)`, so two runs that visit the same
//! states consume identical random numbers whatever the messages are.
//!
//! Reward convention: entering the rightmost cell pays 1 and ends the
//! episode; every other transition pays 0. The terminal state has value 0.
//! Value iteration and the Q-learner both follow it, and the time limit is
//! treated as truncation (bootstrapped), not termination.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::envs::{self, Action, ChainState, EnvKind, EnvState};
use crate::nn::{self, Activation, FlatParams, InitScheme, MlpSpec};
use crate::rng::{self, tag};

pub const MESSAGE_ALPHABET: usize = 4;
pub const DEFAULT_CHAIN_CELLS: usize = 8;
const N_ACTIONS: usize = 2;

/// Deterministic message table over chain cells.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscreteAdversary {
    pub id: String,
    pub table: Vec<usize>,
    pub alphabet: usize,
}

impl DiscreteAdversary {
    pub fn constant(n_cells: usize, symbol: usize) -> Self {
        DiscreteAdversary { id: format!("constant-{symbol}"), table: vec![symbol; n_cells], alphabet: MESSAGE_ALPHABET }
    }

    /// `f(s) = s mod |M|`.
    pub fn identity_coded(n_cells: usize) -> Self {
        let table = (0..n_cells).map(|s| s % MESSAGE_ALPHABET).collect();
        DiscreteAdversary { id: "identity-coded".into(), table, alphabet: MESSAGE_ALPHABET }
    }

    pub fn random_table(n_cells: usize, seed: u64) -> Self {
        let mut r = rng::substream(seed, &[tag::ADVERSARY]);
        let table = (0..n_cells).map(|_| r.gen_range(0..MESSAGE_ALPHABET)).collect();
        DiscreteAdversary { id: format!("random-table-{seed}"), table, alphabet: MESSAGE_ALPHABET }
    }

    /// A one-symbol channel: the no-channel MDP in augmented form.
    pub fn no_channel(n_cells: usize) -> Self {
        DiscreteAdversary { id: "no-channel".into(), table: vec![0; n_cells], alphabet: 1 }
    }

    pub fn message(&self, cell: usize) -> usize {
        self.table[cell]
    }

    pub fn default_set(n_cells: usize) -> Vec<Self> {
        vec![Self::constant(n_cells, 0), Self::identity_coded(n_cells), Self::random_table(n_cells, 7)]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QConfig {
    pub learning_rate: f64,
    pub gamma: f64,
    /// Exploration rate at episode 0.
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Episodes over which epsilon decays linearly to `epsilon_end`.
    pub epsilon_decay_episodes: usize,
}

impl Default for QConfig {
    fn default() -> Self {
        QConfig { learning_rate: 0.5, gamma: 0.9, epsilon_start: 0.3, epsilon_end: 0.3, epsilon_decay_episodes: 1 }
    }
}

impl QConfig {
    pub fn epsilon(&self, episode: usize) -> f64 {
        let f = (episode as f64 / self.epsilon_decay_episodes.max(1) as f64).min(1.0);
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * f
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QInit {
    /// Zeros everywhere, hence uniform along the message axis.
    Uniform,
    /// Independent uniform draws per `(s, m, a)`; breaks the proposition's premise.
    NonUniform { seed: u64 },
}

/// `q[s][m][a]` with a record of which `(s, m)` rows were read or written.
#[derive(Clone, Debug, PartialEq)]
pub struct QTable {
    n_states: usize,
    n_messages: usize,
    values: Vec<f64>,
    touched: Vec<bool>,
}

impl QTable {
    pub fn new(n_states: usize, n_messages: usize, init: QInit) -> Self {
        let n = n_states * n_messages * N_ACTIONS;
        let values = match init {
            QInit::Uniform => vec![0.0; n],
            QInit::NonUniform { seed } => {
                let mut r = rng::substream(seed, &[tag::INIT]);
                (0..n).map(|_| r.gen_range(-0.1..0.1)).collect()
            }
        };
        QTable { n_states, n_messages, values, touched: vec![false; n_states * n_messages] }
    }

    fn row_index(&self, s: usize, m: usize) -> usize {
        s * self.n_messages + m
    }

    pub fn row(&mut self, s: usize, m: usize) -> [f64; N_ACTIONS] {
        let r = self.row_index(s, m);
        self.touched[r] = true;
        [self.values[r * N_ACTIONS], self.values[r * N_ACTIONS + 1]]
    }

    fn add(&mut self, s: usize, m: usize, a: usize, delta: f64) {
        let r = self.row_index(s, m);
        self.touched[r] = true;
        self.values[r * N_ACTIONS + a] += delta;
    }

    /// Reads without recording an access.
    pub fn peek(&self, s: usize, m: usize) -> [f64; N_ACTIONS] {
        let r = self.row_index(s, m);
        [self.values[r * N_ACTIONS], self.values[r * N_ACTIONS + 1]]
    }

    /// `(s, m)` rows accessed during training.
    pub fn touched_rows(&self) -> Vec<(usize, usize)> {
        (0..self.n_states)
            .flat_map(|s| (0..self.n_messages).map(move |m| (s, m)))
            .filter(|&(s, m)| self.touched[self.row_index(s, m)])
            .collect()
    }
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in q.iter().enumerate().skip(1) {
        if *v > q[best] {
            best = i;
        }
    }
    best
}

/// Common interface for the learners compared in the Proposition 1 check.
trait QLearner {
    fn q(&mut self, s: usize, m: usize) -> [f64; N_ACTIONS];
    fn learn(&mut self, s: usize, m: usize, a: usize, target: f64, lr: f64);
}

impl QLearner for QTable {
    fn q(&mut self, s: usize, m: usize) -> [f64; N_ACTIONS] {
        self.row(s, m)
    }

    fn learn(&mut self, s: usize, m: usize, a: usize, target: f64, lr: f64) {
        let q = self.row(s, m)[a];
        self.add(s, m, a, lr * (target - q));
    }
}

/// Two-layer tanh MLP over `[one_hot(s), one_hot(m)]`, trained by
/// semi-gradient Q-learning.
#[derive(Clone, Debug)]
pub struct MlpQ {
    params: FlatParams,
    n_states: usize,
    n_messages: usize,
}

impl MlpQ {
    pub fn new(n_states: usize, n_messages: usize, seed: u64) -> Self {
        let spec = MlpSpec::with_hidden(n_states + n_messages, &[16, 16], N_ACTIONS, Activation::Tanh, Activation::Identity)
            .expect("valid spec");
        let params = nn::init(&spec, InitScheme::LecunUniform, &mut rng::substream(seed, &[tag::INIT]));
        MlpQ { params, n_states, n_messages }
    }

    fn input(&self, s: usize, m: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.n_states + self.n_messages];
        x[s] = 1.0;
        x[self.n_states + m] = 1.0;
        x
    }
}

impl QLearner for MlpQ {
    fn q(&mut self, s: usize, m: usize) -> [f64; N_ACTIONS] {
        let out = nn::predict(&self.params.spec, &self.params.values, &self.input(s, m)).expect("dims fixed");
        [out[0], out[1]]
    }

    fn learn(&mut self, s: usize, m: usize, a: usize, target: f64, lr: f64) {
        let (out, cache) = nn::forward(&self.params, &self.input(s, m)).expect("dims fixed");
        let mut g = [0.0; N_ACTIONS];
        g[a] = out[a] - target;
        let (grads, _) = nn::backward(&self.params, &cache, &g).expect("dims fixed");
        self.params.values.iter_mut().zip(&grads).for_each(|(p, d)| *p -= lr * d);
    }
}

/// Per-episode greedy action for every cell, read under `f(s)`.
pub type GreedyTrace = Vec<Vec<u8>>;

#[derive(Clone, Debug, PartialEq)]
pub struct QTrainOutput {
    pub q: QTable,
    /// `trace[k]` is the greedy policy after episode `k`; `trace[0]` is the
    /// initial policy.
    pub greedy_trace: GreedyTrace,
    /// `q[s][f(s)]` for every cell after training.
    pub visited_rows: Vec<[f64; N_ACTIONS]>,
}

fn greedy_policy<L: QLearner>(learner: &mut L, adversary: &DiscreteAdversary) -> Vec<u8> {
    (0..adversary.table.len()).map(|s| argmax(&learner.q(s, adversary.message(s))) as u8).collect()
}

/// Epsilon-greedy action from the draws keyed by `(seed, episode, step)`.
fn explore_action(q: &[f64; N_ACTIONS], epsilon: f64, seed: u64, episode: usize, step: u32) -> usize {
    let mut r = rng::substream(seed, &[tag::EXPLORE, episode as u64, step as u64]);
    let u: f64 = r.gen();
    let random_action = r.gen_range(0..N_ACTIONS);
    let tie: usize = r.gen_range(0..N_ACTIONS);
    if u < epsilon {
        return random_action;
    }
    if q[0] == q[1] {
        tie
    } else {
        argmax(q)
    }
}

fn run_episodes<L: QLearner>(
    learner: &mut L,
    n_cells: usize,
    adversary: &DiscreteAdversary,
    config: &QConfig,
    episodes: std::ops::Range<usize>,
    seed: u64,
    trace: &mut GreedyTrace,
) {
    let kind = EnvKind::Chain { n_cells };
    for episode in episodes {
        let eps = config.epsilon(episode);
        let mut state = EnvState::Chain(ChainState { cell: 0, n_cells, steps: 0 });
        loop {
            let EnvState::Chain(c) = state else { unreachable!() };
            let m = adversary.message(c.cell);
            let q = learner.q(c.cell, m);
            let a = explore_action(&q, eps, seed, episode, c.steps);
            let out = envs::step(&state, &Action::Discrete(a)).expect("valid chain action");
            let EnvState::Chain(next) = out.next_state else { unreachable!() };
            let terminal = next.cell == n_cells - 1;
            let target = if terminal {
                out.reward
            } else {
                let q_next = learner.q(next.cell, adversary.message(next.cell));
                out.reward + config.gamma * q_next[argmax(&q_next)]
            };
            learner.learn(c.cell, m, a, target, config.learning_rate);
            state = out.next_state;
            if out.done {
                break;
            }
        }
        debug_assert_eq!(kind, state.kind());
        trace.push(greedy_policy(learner, adversary));
    }
}

/// Tabular Q-learning on the chain with messages from `adversary`.
pub fn q_train(
    n_cells: usize,
    adversary: &DiscreteAdversary,
    config: &QConfig,
    init: QInit,
    episodes: usize,
    seed: u64,
) -> QTrainOutput {
    let mut q = QTable::new(n_cells, adversary.alphabet, init);
    let mut trace = vec![greedy_policy(&mut q, adversary)];
    run_episodes(&mut q, n_cells, adversary, config, 0..episodes, seed, &mut trace);
    let visited_rows = (0..n_cells).map(|s| q.peek(s, adversary.message(s))).collect();
    QTrainOutput { q, greedy_trace: trace, visited_rows }
}

/// The same training loop with an MLP in place of the table.
pub fn q_train_mlp(
    n_cells: usize,
    adversary: &DiscreteAdversary,
    config: &QConfig,
    episodes: usize,
    seed: u64,
) -> GreedyTrace {
    let mut q = MlpQ::new(n_cells, MESSAGE_ALPHABET, seed);
    let mut trace = vec![greedy_policy(&mut q, adversary)];
    let lr = QConfig { learning_rate: 0.05, ..*config };
    run_episodes(&mut q, n_cells, adversary, &lr, 0..episodes, seed, &mut trace);
    trace
}

/// A finite deterministic MDP: `next[s][a] = (s', reward, terminal)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteMdp {
    pub next: Vec<Vec<(usize, f64, bool)>>,
    pub start: usize,
}

impl FiniteMdp {
    pub fn chain(n_cells: usize) -> Self {
        let next = (0..n_cells)
            .map(|cell| {
                (0..N_ACTIONS)
                    .map(|a| {
                        let s = EnvState::Chain(ChainState { cell, n_cells, steps: 0 });
                        let out = envs::step(&s, &Action::Discrete(a)).expect("valid chain action");
                        let EnvState::Chain(c) = out.next_state else { unreachable!() };
                        (c.cell, out.reward, c.cell == n_cells - 1)
                    })
                    .collect()
            })
            .collect();
        FiniteMdp { next, start: 0 }
    }

    pub fn n_states(&self) -> usize {
        self.next.len()
    }

    /// Relabels states: state `s` becomes `perm[s]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut next = vec![Vec::new(); self.n_states()];
        for (s, row) in self.next.iter().enumerate() {
            next[perm[s]] = row.iter().map(|&(t, r, d)| (perm[t], r, d)).collect();
        }
        FiniteMdp { next, start: perm[self.start] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValueIterationResult {
    pub values: Vec<f64>,
    pub optimal_return: f64,
    pub sweeps: usize,
}

/// Synchronous value iteration to sup-norm change below `tol`.
pub fn value_iteration(mdp: &FiniteMdp, gamma: f64, tol: f64) -> ValueIterationResult {
    let n = mdp.n_states();
    let mut v = vec![0.0; n];
    let mut sweeps = 0;
    loop {
        sweeps += 1;
        let new: Vec<f64> = mdp
            .next
            .iter()
            .map(|row| {
                row.iter()
                    .map(|&(t, r, d)| r + if d { 0.0 } else { gamma * v[t] })
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .map(|x| if x.is_finite() { x } else { 0.0 })
            .collect();
        let delta = new.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = new;
        if delta < tol || sweeps >= 100_000 {
            break;
        }
    }
    ValueIterationResult { optimal_return: v[mdp.start], values: v, sweeps }
}

/// Discounted return of following `policy` from the start cell for one
/// chain horizon.
pub fn greedy_return(n_cells: usize, policy: &[u8], gamma: f64) -> f64 {
    let mut state = EnvState::Chain(ChainState { cell: 0, n_cells, steps: 0 });
    let mut ret = 0.0;
    let mut discount = 1.0;
    loop {
        let EnvState::Chain(c) = state else { unreachable!() };
        let out = envs::step(&state, &Action::Discrete(policy[c.cell] as usize)).expect("valid chain action");
        ret += discount * out.reward;
        discount *= gamma;
        state = out.next_state;
        if out.done {
            return ret;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VictimKind {
    Tabular,
    TabularNonUniform,
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Divergence {
    pub seed: u64,
    pub adversary_a: String,
    pub adversary_b: String,
    /// First episode at which the greedy policies differ; `None` when only
    /// the final Q-entries differ.
    pub episode: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prop1Report {
    pub pass: bool,
    pub victim: VictimKind,
    pub n_cells: usize,
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub adversaries: Vec<String>,
    pub divergences: Vec<Divergence>,
    /// Q rows `(s, m)` with `m != f(s)` that training accessed.
    pub off_channel_reads: usize,
}

/// Trains one victim per adversary and seed and compares them against the
/// first adversary of the set.
pub fn verify_prop1(
    n_cells: usize,
    adversaries: &[DiscreteAdversary],
    seeds: &[u64],
    episodes: usize,
    config: &QConfig,
    victim: VictimKind,
) -> Prop1Report {
    let mut divergences = Vec::new();
    let mut off_channel_reads = 0;
    for &seed in seeds {
        let runs: Vec<(GreedyTrace, Option<Vec<[f64; N_ACTIONS]>>)> = adversaries
            .iter()
            .map(|adv| match victim {
                VictimKind::Tabular | VictimKind::TabularNonUniform => {
                    let init = if victim == VictimKind::Tabular {
                        QInit::Uniform
                    } else {
                        QInit::NonUniform { seed: rng::derive_seed(seed, &[tag::ADVERSARY]) }
                    };
                    let out = q_train(n_cells, adv, config, init, episodes, seed);
                    off_channel_reads += out.q.touched_rows().iter().filter(|&&(s, m)| adv.message(s) != m).count();
                    (out.greedy_trace, Some(out.visited_rows))
                }
                VictimKind::Mlp => (q_train_mlp(n_cells, adv, config, episodes, seed), None),
            })
            .collect();
        let (ref_trace, ref_rows) = &runs[0];
        for (adv, (trace, rows)) in adversaries.iter().zip(&runs).skip(1) {
            let episode = ref_trace.iter().zip(trace).position(|(a, b)| a != b);
            let rows_differ = match (ref_rows, rows) {
                (Some(a), Some(b)) => {
                    a.iter().flatten().zip(b.iter().flatten()).any(|(x, y)| x.to_bits() != y.to_bits())
                }
                _ => false,
            };
            if episode.is_some() || rows_differ {
                divergences.push(Divergence {
                    seed,
                    adversary_a: adversaries[0].id.clone(),
                    adversary_b: adv.id.clone(),
                    episode,
                });
            }
        }
    }
    Prop1Report {
        pass: divergences.is_empty() && off_channel_reads == 0,
        victim,
        n_cells,
        episodes,
        seeds: seeds.to_vec(),
        adversaries: adversaries.iter().map(|a| a.id.clone()).collect(),
        divergences,
        off_channel_reads,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Prop2Status {
    Pass,
    Fail,
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prop2Entry {
    pub adversary: String,
    pub converged: bool,
    pub episodes: usize,
    pub greedy_return: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prop2Report {
    pub status: Prop2Status,
    pub gamma: f64,
    pub optimal_return: f64,
    pub no_channel_return: f64,
    pub tolerance: f64,
    pub episode_budget: usize,
    pub entries: Vec<Prop2Entry>,
}

pub const PROP2_TOLERANCE: f64 = 1e-9;

/// Q-learning with decaying exploration until the greedy policy has been
/// unchanged for `stable_window` episodes, or the budget runs out.
pub fn train_until_stable(
    n_cells: usize,
    adversary: &DiscreteAdversary,
    config: &QConfig,
    budget: usize,
    stable_window: usize,
    seed: u64,
) -> (Vec<u8>, usize, bool) {
    let mut q = QTable::new(n_cells, adversary.alphabet, QInit::Uniform);
    let mut trace = vec![greedy_policy(&mut q, adversary)];
    let mut unchanged = 0;
    for episode in 0..budget {
        run_episodes(&mut q, n_cells, adversary, config, episode..episode + 1, seed, &mut trace);
        let k = trace.len();
        if trace[k - 1] == trace[k - 2] {
            unchanged += 1;
        } else {
            unchanged = 0;
        }
        if unchanged >= stable_window && episode + 1 >= config.epsilon_decay_episodes {
            return (trace.pop().unwrap(), episode + 1, true);
        }
    }
    (trace.pop().unwrap(), budget, false)
}

/// Checks that every adversary's converged greedy return matches the
/// optimum of the chain and of its no-channel version.
pub fn verify_prop2(
    n_cells: usize,
    adversaries: &[DiscreteAdversary],
    gamma: f64,
    budget: usize,
    seed: u64,
) -> Prop2Report {
    let config = QConfig {
        learning_rate: 0.5,
        gamma,
        epsilon_start: 1.0,
        epsilon_end: 0.05,
        epsilon_decay_episodes: budget / 4,
    };
    let optimum = value_iteration(&FiniteMdp::chain(n_cells), gamma, 1e-13).optimal_return;
    let baseline = DiscreteAdversary::no_channel(n_cells);
    let mut entries = Vec::new();
    let mut no_channel_return = f64::NAN;
    for adv in std::iter::once(&baseline).chain(adversaries) {
        let (policy, episodes, converged) = train_until_stable(n_cells, adv, &config, budget, 200, seed);
        let ret = greedy_return(n_cells, &policy, gamma);
        if adv.id == baseline.id && no_channel_return.is_nan() {
            no_channel_return = ret;
        }
        entries.push(Prop2Entry { adversary: adv.id.clone(), converged, episodes, greedy_return: ret });
    }
    let all_converged = entries.iter().all(|e| e.converged);
    let all_optimal = entries.iter().all(|e| (e.greedy_return - optimum).abs() <= PROP2_TOLERANCE);
    let status = if !all_converged {
        log::warn!("prop2: greedy policy did not stabilise within {budget} episodes");
        Prop2Status::Inconclusive
    } else if all_optimal && (no_channel_return - optimum).abs() <= PROP2_TOLERANCE {
        Prop2Status::Pass
    } else {
        Prop2Status::Fail
    };
    Prop2Report {
        status,
        gamma,
        optimal_return: optimum,
        no_channel_return,
        tolerance: PROP2_TOLERANCE,
        episode_budget: budget,
        entries,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_episodes_gives_argmax_of_init() {
        let adv = DiscreteAdversary::identity_coded(8);
        let out = q_train(8, &adv, &QConfig::default(), QInit::Uniform, 0, 3);
        assert_eq!(out.greedy_trace, vec![vec![0u8; 8]]);
        let init = QInit::NonUniform { seed: 4 };
        let out = q_train(8, &adv, &QConfig::default(), init, 0, 3);
        let q = QTable::new(8, MESSAGE_ALPHABET, init);
        let expected: Vec<u8> = (0..8).map(|s| argmax(&q.peek(s, adv.message(s))) as u8).collect();
        assert_eq!(out.greedy_trace[0], expected);
    }

    #[test]
    fn constant_and_arbitrary_tables_give_identical_traces() {
        let cfg = QConfig::default();
        for seed in 0..3 {
            let a = q_train(8, &DiscreteAdversary::constant(8, 0), &cfg, QInit::Uniform, 200, seed);
            let b = q_train(8, &DiscreteAdversary::random_table(8, seed + 11), &cfg, QInit::Uniform, 200, seed);
            assert_eq!(a.greedy_trace, b.greedy_trace);
            assert_eq!(a.visited_rows, b.visited_rows);
        }
    }

    #[test]
    fn training_reads_only_current_message() {
        let adv = DiscreteAdversary::random_table(8, 2);
        let out = q_train(8, &adv, &QConfig::default(), QInit::Uniform, 300, 1);
        let rows = out.q.touched_rows();
        assert!(!rows.is_empty());
        assert!(rows.iter().all(|&(s, m)| adv.message(s) == m));
    }

    #[test]
    fn non_uniform_init_breaks_equality() {
        let report = verify_prop1(8, &DiscreteAdversary::default_set(8), &[0, 1, 2, 3, 4], 200, &QConfig::default(), VictimKind::TabularNonUniform);
        assert!(!report.divergences.is_empty());
    }

    #[test]
    fn mlp_victim_is_flagged() {
        let report = verify_prop1(8, &DiscreteAdversary::default_set(8), &[0, 1, 2, 3, 4], 200, &QConfig::default(), VictimKind::Mlp);
        assert!(!report.pass);
    }

    #[test]
    fn single_adversary_is_vacuously_equal() {
        let report = verify_prop1(8, &[DiscreteAdversary::constant(8, 1)], &[0], 50, &QConfig::default(), VictimKind::Tabular);
        assert!(report.pass);
    }

    #[test]
    fn absorbing_zero_reward_state_has_zero_value() {
        let mdp = FiniteMdp { next: vec![vec![(0, 0.0, false), (0, 0.0, false)]], start: 0 };
        assert_eq!(value_iteration(&mdp, 0.9, 1e-12).values, vec![0.0]);
    }

    #[test]
    fn two_cell_chain_start_value() {
        // One step right enters the goal: V(start) = 1 + 0.
        let v = value_iteration(&FiniteMdp::chain(2), 0.9, 1e-12);
        assert_eq!(v.optimal_return, 1.0);
    }

    #[test]
    fn tolerances_agree() {
        let mdp = FiniteMdp::chain(8);
        let a = value_iteration(&mdp, 0.9, 1e-12);
        let b = value_iteration(&mdp, 0.9, 1e-6);
        assert!(a.values.iter().zip(&b.values).all(|(x, y)| (x - y).abs() < 1e-6));
        assert!((a.optimal_return - 0.9f64.powi(6)).abs() < 1e-12);
    }

    #[test]
    fn gamma_zero_optimum_is_best_immediate_reward() {
        let v = value_iteration(&FiniteMdp::chain(8), 0.0, 1e-12);
        assert_eq!(v.optimal_return, 0.0);
        let report = verify_prop2(8, &DiscreteAdversary::default_set(8), 0.0, 2000, 0);
        assert_eq!(report.optimal_return, 0.0);
        assert!(report.entries.iter().all(|e| e.greedy_return == 0.0));
    }

    #[test]
    fn greedy_right_policy_is_optimal() {
        let r = greedy_return(8, &[1; 8], 0.9);
        assert!((r - 0.9f64.powi(6)).abs() < 1e-15);
        assert_eq!(greedy_return(8, &[0; 8], 0.9), 0.0);
    }

    proptest! {
        #[test]
        fn value_iteration_ignores_state_labels(perm in Just((0..8usize).collect::<Vec<_>>()).prop_shuffle(), gamma in 0.0..0.99f64) {
            let mdp = FiniteMdp::chain(8);
            let a = value_iteration(&mdp, gamma, 1e-12);
            let b = value_iteration(&mdp.permuted(&perm), gamma, 1e-12);
            for s in 0..8 {
                prop_assert_eq!(a.values[s].to_bits(), b.values[perm[s]].to_bits());
            }
        }

        #[test]
        fn traces_independent_of_adversary(seed in 0u64..1000, table in prop::collection::vec(0..MESSAGE_ALPHABET, 8)) {
            let cfg = QConfig::default();
            let f = DiscreteAdversary { id: "f".into(), table, alphabet: MESSAGE_ALPHABET };
            let a = q_train(8, &DiscreteAdversary::constant(8, 3), &cfg, QInit::Uniform, 40, seed);
            let b = q_train(8, &f, &cfg, QInit::Uniform, 40, seed);
            prop_assert_eq!(a.greedy_trace, b.greedy_trace);
        }
    }
}
