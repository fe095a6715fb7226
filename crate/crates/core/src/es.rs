//! Evolution strategies with mirrored sampling, rank shaping and Adam on the
//! search-distribution mean.
//!
//! `ask` and `tell` are plain state transitions. [`optimize`] evaluates the
//! population between them on a rayon pool; the results are gathered in
//! candidate order, so the trajectory is identical for any worker count.

use std::fmt::Display;
use std::io::Write;
use std::sync::atomic::{AtomicBool, Ordering};

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::AdamState;
use crate::rng::{self, tag};

#[derive(Debug, Error)]
pub enum EsError {
    #[error("invalid ES config: {0}")]
    InvalidConfig(String),
    #[error("expected {expected} fitness values, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("tell called without a pending ask")]
    NoPendingAsk,
    #[error("every candidate of generation {generation} faulted; first error: {first}")]
    AllFaulted { generation: u64, first: String },
    #[error("failed to build worker pool: {0}")]
    Pool(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitnessShaping {
    CenteredRanks,
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EsConfig {
    /// Even; candidates come in ± pairs.
    pub population_size: usize,
    pub sigma: f64,
    pub learning_rate: f64,
    pub generations: usize,
    pub fitness_shaping: FitnessShaping,
}

impl Default for EsConfig {
    fn default() -> Self {
        EsConfig {
            population_size: 64,
            sigma: 0.03,
            learning_rate: 0.01,
            generations: 256,
            fitness_shaping: FitnessShaping::CenteredRanks,
        }
    }
}

impl EsConfig {
    pub fn validate(&self) -> Result<(), EsError> {
        if self.population_size == 0 || !self.population_size.is_multiple_of(2) {
            return Err(EsError::InvalidConfig(format!(
                "population_size must be even and >= 2, got {}",
                self.population_size
            )));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(EsError::InvalidConfig(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(EsError::InvalidConfig(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// Maps fitnesses to `rank / (N - 1) - 0.5`. Tied fitnesses share the mean
/// of the ranks they span, so equal fitnesses get equal weight.
pub fn centered_ranks(fitness: &[f64]) -> Vec<f64> {
    let n = fitness.len();
    if n < 2 {
        return vec![0.0; n];
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| fitness[a].total_cmp(&fitness[b]).then(a.cmp(&b)));
    let mut out = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && fitness[order[end]] == fitness[order[start]] {
            end += 1;
        }
        let rank = (start + end - 1) as f64 / 2.0;
        for &i in &order[start..end] {
            out[i] = rank / (n - 1) as f64 - 0.5;
        }
        start = end;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EsState {
    pub mean: Vec<f64>,
    pub adam: AdamState,
    pub generation: u64,
    pub seed: u64,
    #[serde(skip)]
    pending: Option<Vec<Vec<f64>>>,
}

/// One generation's candidates. `noises[k]` generates candidates `k`
/// (`+σε`) and `k + N/2` (`-σε`).
#[derive(Clone, Debug, PartialEq)]
pub struct Population {
    pub candidates: Vec<Vec<f64>>,
    pub noises: Vec<Vec<f64>>,
}

impl EsState {
    pub fn new(mean: Vec<f64>, seed: u64) -> Self {
        let adam = AdamState::new(mean.len());
        EsState { mean, adam, generation: 0, seed, pending: None }
    }

    pub fn ask(&mut self, config: &EsConfig) -> Population {
        let half = config.population_size / 2;
        let mut r = rng::substream(self.seed, &[tag::ES_NOISE, self.generation]);
        let noises: Vec<Vec<f64>> =
            (0..half).map(|_| (0..self.mean.len()).map(|_| StandardNormal.sample(&mut r)).collect()).collect();
        let shift = |sign: f64, eps: &Vec<f64>| -> Vec<f64> {
            self.mean.iter().zip(eps).map(|(m, e)| m + sign * config.sigma * e).collect()
        };
        let mut candidates: Vec<Vec<f64>> = noises.iter().map(|e| shift(1.0, e)).collect();
        candidates.extend(noises.iter().map(|e| shift(-1.0, e)));
        self.pending = Some(noises.clone());
        Population { candidates, noises }
    }

    /// Gradient estimate `(1/(Nσ)) Σ w_n ε_n` for the pending population.
    pub fn gradient(&self, config: &EsConfig, fitness: &[f64]) -> Result<Vec<f64>, EsError> {
        let noises = self.pending.as_ref().ok_or(EsError::NoPendingAsk)?;
        let n = config.population_size;
        if fitness.len() != n {
            return Err(EsError::LengthMismatch { expected: n, actual: fitness.len() });
        }
        let weights = match config.fitness_shaping {
            FitnessShaping::CenteredRanks => centered_ranks(fitness),
            FitnessShaping::Raw => fitness.to_vec(),
        };
        let half = n / 2;
        let mut grad = vec![0.0; self.mean.len()];
        for (k, eps) in noises.iter().enumerate() {
            let w = weights[k] - weights[k + half];
            if w != 0.0 {
                grad.iter_mut().zip(eps).for_each(|(g, e)| *g += w * e);
            }
        }
        let scale = 1.0 / (n as f64 * config.sigma);
        grad.iter_mut().for_each(|g| *g *= scale);
        Ok(grad)
    }

    /// Moves the mean along the estimated gradient (ascent) with Adam.
    pub fn tell(&mut self, config: &EsConfig, fitness: &[f64]) -> Result<(), EsError> {
        let grad = self.gradient(config, fitness)?;
        let descent: Vec<f64> = grad.iter().map(|g| -g).collect();
        self.adam.step(&mut self.mean, &descent, config.learning_rate).expect("adam state sized to mean");
        self.pending = None;
        self.generation += 1;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: u64,
    pub mean_fitness: f64,
    pub best_fitness: f64,
    pub faulted: usize,
}

#[derive(Clone, Debug)]
pub struct EsOutcome {
    pub state: EsState,
    pub history: Vec<GenerationRecord>,
    /// True when a stop flag ended the run early.
    pub interrupted: bool,
}

impl EsOutcome {
    pub fn mean(&self) -> &[f64] {
        &self.state.mean
    }
}

#[derive(Default)]
pub struct OptimizeOptions<'a> {
    /// Worker threads; `None` uses rayon's global pool.
    pub workers: Option<usize>,
    pub stop: Option<&'a AtomicBool>,
    #[allow(clippy::type_complexity)]
    pub on_generation: Option<Box<dyn FnMut(&EsState, &GenerationRecord) + 'a>>,
}

/// Evaluation seed for candidate `index`. Both members of a mirrored pair
/// share a seed so the pair differs only by the sign of its noise.
pub fn candidate_seed(es_seed: u64, generation: u64, index: usize, population_size: usize) -> u64 {
    let pair = (index % (population_size / 2)) as u64;
    rng::derive_seed(es_seed, &[tag::CANDIDATE, generation, pair])
}

/// Maximizes `fitness(candidate, seed)` starting from `init_mean`.
pub fn optimize<F, E>(
    fitness: F,
    config: &EsConfig,
    init_mean: Vec<f64>,
    seed: u64,
    options: OptimizeOptions<'_>,
) -> Result<EsOutcome, EsError>
where
    F: Fn(&[f64], u64) -> Result<f64, E> + Sync,
    E: Display + Send,
{
    let state = EsState::new(init_mean, seed);
    resume(fitness, config, state, options)
}

/// Continues optimization from an existing state up to `config.generations`.
pub fn resume<F, E>(fitness: F, config: &EsConfig, mut state: EsState, mut options: OptimizeOptions<'_>) -> Result<EsOutcome, EsError>
where
    F: Fn(&[f64], u64) -> Result<f64, E> + Sync,
    E: Display + Send,
{
    config.validate()?;
    let pool = match options.workers {
        Some(n) => Some(
            rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build().map_err(|e| EsError::Pool(e.to_string()))?,
        ),
        None => None,
    };
    let mut history = Vec::new();
    let mut interrupted = false;
    while (state.generation as usize) < config.generations {
        if options.stop.is_some_and(|s| s.load(Ordering::SeqCst)) {
            interrupted = true;
            break;
        }
        let generation = state.generation;
        let pop = state.ask(config);
        let evaluate = || -> Vec<Result<f64, String>> {
            pop.candidates
                .par_iter()
                .enumerate()
                .map(|(i, c)| {
                    let s = candidate_seed(state.seed, generation, i, config.population_size);
                    match fitness(c, s) {
                        Ok(f) if f.is_finite() => Ok(f),
                        Ok(f) => Err(format!("non-finite fitness {f}")),
                        Err(e) => Err(e.to_string()),
                    }
                })
                .collect()
        };
        let results = match &pool {
            Some(p) => p.install(evaluate),
            None => evaluate(),
        };
        let ok: Vec<f64> = results.iter().filter_map(|r| r.as_ref().ok().copied()).collect();
        let faulted = results.len() - ok.len();
        if ok.is_empty() {
            let first = results.into_iter().find_map(Result::err).unwrap_or_default();
            return Err(EsError::AllFaulted { generation, first });
        }
        let floor = ok.iter().cloned().fold(f64::INFINITY, f64::min);
        let fitnesses: Vec<f64> = results
            .iter()
            .enumerate()
            .map(|(i, r)| match r {
                Ok(f) => *f,
                Err(e) => {
                    log::warn!("generation {generation} candidate {i} faulted: {e}; assigned {floor}");
                    floor
                }
            })
            .collect();
        let record = GenerationRecord {
            generation,
            mean_fitness: fitnesses.iter().sum::<f64>() / fitnesses.len() as f64,
            best_fitness: fitnesses.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            faulted,
        };
        state.tell(config, &fitnesses)?;
        if let Some(cb) = options.on_generation.as_mut() {
            cb(&state, &record);
        }
        history.push(record);
    }
    Ok(EsOutcome { state, history, interrupted })
}

/// Writes `generation,mean_fitness,best_fitness` rows.
pub fn write_history_csv<W: Write>(w: W, history: &[GenerationRecord]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["generation", "mean_fitness", "best_fitness"])?;
    for h in history {
        out.write_record([h.generation.to_string(), h.mean_fitness.to_string(), h.best_fitness.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::convert::Infallible;

    fn cfg(n: usize) -> EsConfig {
        EsConfig { population_size: n, ..EsConfig::default() }
    }

    #[test]
    fn centered_rank_example() {
        let w = centered_ranks(&[3.0, 1.0, 2.0, 4.0]);
        let expected = [1.0 / 6.0, -0.5, -1.0 / 6.0, 0.5];
        for (a, b) in w.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn ties_share_ranks() {
        assert_eq!(centered_ranks(&[1.0, 1.0]), vec![0.0, 0.0]);
        assert_eq!(centered_ranks(&[2.0, 1.0, 2.0]), vec![0.25, -0.5, 0.25]);
    }

    #[test]
    fn tiny_sigma_collapses_population() {
        let c = EsConfig { sigma: 1e-300, ..cfg(8) };
        let mut st = EsState::new(vec![0.5, -1.0, 2.0], 1);
        for cand in st.ask(&c).candidates {
            assert_eq!(cand, vec![0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn mirrored_pairs_average_to_mean() {
        let c = cfg(10);
        let mut st = EsState::new(vec![0.3; 6], 2);
        let pop = st.ask(&c);
        for k in 0..5 {
            for j in 0..6 {
                let s = pop.candidates[k][j] + pop.candidates[k + 5][j];
                assert!((s - 0.6).abs() < 1e-15);
            }
        }
        // Each ± pair of noise vectors cancels exactly, so Σ ε over the
        // population is zero.
        for e in &pop.noises {
            assert!(e.iter().all(|&x| x + (-x) == 0.0));
        }
    }

    #[test]
    fn ask_is_reproducible() {
        let c = cfg(6);
        let a = EsState::new(vec![0.0; 4], 3).ask(&c);
        let b = EsState::new(vec![0.0; 4], 3).ask(&c);
        assert_eq!(a, b);
    }

    #[test]
    fn equal_fitness_leaves_mean() {
        let c = cfg(8);
        let mut st = EsState::new(vec![1.0, 2.0], 4);
        st.ask(&c);
        st.tell(&c, &[5.0; 8]).unwrap();
        assert_eq!(st.mean, vec![1.0, 2.0]);
        assert_eq!(st.generation, 1);
    }

    #[test]
    fn symmetric_pair_contributes_nothing() {
        let c = EsConfig { fitness_shaping: FitnessShaping::Raw, ..cfg(4) };
        let mut st = EsState::new(vec![0.0; 3], 5);
        st.ask(&c);
        // Pair 0 symmetric, pair 1 not.
        let g = st.gradient(&c, &[2.0, 1.0, 2.0, 0.0]).unwrap();
        let noises = st.pending.clone().unwrap();
        for (gj, e) in g.iter().zip(&noises[1]) {
            assert!((gj - (1.0 - 0.0) * e / (4.0 * c.sigma)).abs() < 1e-12);
        }
    }

    #[test]
    fn tell_checks_length_and_pending() {
        let c = cfg(4);
        let mut st = EsState::new(vec![0.0], 0);
        assert!(matches!(st.tell(&c, &[0.0; 4]), Err(EsError::NoPendingAsk)));
        st.ask(&c);
        assert!(matches!(st.tell(&c, &[0.0; 3]), Err(EsError::LengthMismatch { .. })));
        assert!(EsConfig { population_size: 3, ..c }.validate().is_err());
    }

    fn quadratic(target: &[f64]) -> impl Fn(&[f64], u64) -> Result<f64, Infallible> + Sync + '_ {
        move |x, _| Ok(-x.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
    }

    #[test]
    fn constant_fitness_never_moves() {
        let c = EsConfig { generations: 20, ..cfg(8) };
        let out = optimize(|_, _| Ok::<_, Infallible>(1.0), &c, vec![0.25; 5], 1, OptimizeOptions::default()).unwrap();
        assert_eq!(out.mean(), &[0.25; 5]);
    }

    #[test]
    fn faulted_candidates_get_generation_minimum() {
        let c = EsConfig { generations: 3, ..cfg(8) };
        let f = |x: &[f64], _| if x[0] > 0.0 { Err("boom") } else { Ok(x[0]) };
        let out = optimize(f, &c, vec![0.0; 2], 9, OptimizeOptions::default()).unwrap();
        assert!(out.history.iter().all(|h| h.faulted > 0 && h.faulted < 8));
        let all_bad = optimize(|_: &[f64], _| Err::<f64, _>("nope"), &c, vec![0.0], 9, OptimizeOptions::default());
        assert!(matches!(all_bad, Err(EsError::AllFaulted { .. })));
    }

    #[test]
    fn worker_count_does_not_change_history() {
        let target = vec![0.5; 4];
        let c = EsConfig { generations: 10, ..cfg(16) };
        let run = |w| {
            optimize(quadratic(&target), &c, vec![0.0; 4], 3, OptimizeOptions { workers: Some(w), ..Default::default() })
                .unwrap()
        };
        let (a, b) = (run(1), run(3));
        assert_eq!(a.history, b.history);
        assert_eq!(a.state.mean, b.state.mean);
    }

    #[test]
    fn stop_flag_interrupts() {
        let stop = AtomicBool::new(true);
        let c = EsConfig { generations: 10, ..cfg(4) };
        let out =
            optimize(quadratic(&[1.0]), &c, vec![0.0], 0, OptimizeOptions { stop: Some(&stop), ..Default::default() })
                .unwrap();
        assert!(out.interrupted);
        assert!(out.history.is_empty());
    }

    proptest! {
        #[test]
        fn rank_weights_sum_to_zero_and_ignore_monotone_maps(xs in prop::collection::vec(-1e3..1e3f64, 2..40)) {
            let w = centered_ranks(&xs);
            prop_assert!(w.iter().sum::<f64>().abs() < 1e-9);
            let mapped: Vec<f64> = xs.iter().map(|x| (x / 100.0).exp() * 3.0 - 7.0).collect();
            let w2 = centered_ranks(&mapped);
            // exp may merge nearly-equal values; only compare when order is strict.
            let strict = |v: &Vec<f64>| { let mut s = v.clone(); s.sort_by(f64::total_cmp); s.windows(2).all(|p| p[0] < p[1]) };
            if strict(&xs) && strict(&mapped) {
                prop_assert_eq!(w, w2);
            }
        }
    }
}
