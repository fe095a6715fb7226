use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;

use act_core::analysis::{self, aggregate_curves, Curves, GridSpec, INTERFERENCE_BINS};
use act_core::cheaptalk::{Adversary, ChannelMode};
use act_core::envs;
use act_core::es::{self, EsState, GenerationRecord};
use act_core::io::write_atomic;
use act_core::meta::{self, MetaConfig, RunOptions, TestTimeConfig};
use act_core::nn::{self, FlatParams, InitScheme, MlpSpec};
use act_core::ppo::{self, ActorCritic};
use act_core::rng::{self, tag};
use act_core::tabular::{self, DiscreteAdversary, QConfig, VictimKind};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::manifest::{unix_now, FileRecord, OutDir, RunManifest, RunStatus, MANIFEST_FILE, MANIFEST_FORMAT};
use crate::*;

pub const CHECKPOINT_FILE: &str = "es_checkpoint.json";

/// ES state plus the fitness history that led to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_hash: String,
    pub state: EsState,
    pub history: Vec<GenerationRecord>,
}

struct Run {
    command: Command,
    workers: usize,
    started: f64,
    config: Option<ExperimentConfig>,
    inputs: Vec<FileRecord>,
    out: OutDir,
}

impl Run {
    fn new(command: &Command, workers: usize, out: &Path, config: Option<ExperimentConfig>) -> Result<Self, CliError> {
        let mut out = OutDir::create(out)?;
        if let Some(c) = &config {
            out.write("config.toml", c.to_toml().as_bytes())?;
        }
        Ok(Run { command: command.clone(), workers, started: unix_now(), config, inputs: Vec::new(), out })
    }

    fn cfg(&self) -> &MetaConfig {
        &self.config.as_ref().expect("command has a config").meta
    }

    fn input(&mut self, path: &Path) -> Result<PathBuf, CliError> {
        let abs = fs::canonicalize(path).map_err(|e| CliError::Config(format!("missing input {}: {e}", path.display())))?;
        self.inputs.push(FileRecord::of(&abs)?);
        Ok(abs)
    }

    fn finish(mut self, status: RunStatus, summary: serde_json::Value) -> Result<(), CliError> {
        let manifest = RunManifest {
            format: MANIFEST_FORMAT.into(),
            code_version: env!("CARGO_PKG_VERSION").into(),
            command: self.command.clone(),
            config_toml: self.config.as_ref().map(ExperimentConfig::to_toml),
            config_hash: self.config.as_ref().map(ExperimentConfig::hash),
            seeds: self.config.as_ref().map(|c| c.meta.seeds()),
            workers: self.workers,
            inputs: self.inputs.clone(),
            outputs: self.out.files(),
            started_unix: self.started,
            finished_unix: unix_now(),
            status,
            summary,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Runtime(e.to_string()))?;
        self.out.write(MANIFEST_FILE, text.as_bytes())
    }
}

fn load(run: &RunArgs) -> Result<ExperimentConfig, CliError> {
    let cfg = ExperimentConfig::load(&run.config)?.with_seed(run.seed);
    if let envs::EnvKind::Chain { .. } = cfg.meta.env {
        return Err(CliError::Config(format!("{}: the chain environment is for `act verify` only", run.config.display())));
    }
    Ok(cfg)
}

fn num(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        format!("{x}")
    }
}

fn csv_bytes(header: &[&str], rows: Vec<Vec<String>>) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    act_core::io::write_csv(&mut buf, header, rows)?;
    Ok(buf)
}

fn curves_csv(c: &Curves) -> Result<Vec<u8>, CliError> {
    let rows = (0..c.mean.len()).map(|t| vec![t.to_string(), num(c.mean[t]), num(c.stderr[t])]).collect();
    csv_bytes(&["update", "mean", "stderr"], rows)
}

fn traces_csv(traces: &[Vec<f64>], prefix: &str) -> Result<Vec<u8>, CliError> {
    let names: Vec<String> = (0..traces.len()).map(|i| format!("{prefix}_{i}")).collect();
    let mut header = vec!["update"];
    header.extend(names.iter().map(String::as_str));
    let len = traces.iter().map(Vec::len).max().unwrap_or(0);
    let rows = (0..len)
        .map(|t| {
            let mut r = vec![t.to_string()];
            r.extend(traces.iter().map(|tr| tr.get(t).map_or(String::new(), |x| num(*x))));
            r
        })
        .collect();
    csv_bytes(&header, rows)
}

fn history_csv(history: &[GenerationRecord]) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    es::write_history_csv(&mut buf, history)?;
    Ok(buf)
}

fn history_curve(history: &[GenerationRecord]) -> Curves {
    Curves {
        mean: history.iter().map(|h| h.mean_fitness).collect(),
        stderr: vec![0.0; history.len()],
        n: 1,
    }
}

fn params_bytes(specs: &[MlpSpec], values: &[f64]) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    nn::write_params(&mut buf, specs, Some(InitScheme::LecunUniform), values).map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(buf)
}

/// The train-time message function stored as the first segment of `path`.
pub fn load_phi(path: &Path, cfg: &MetaConfig) -> Result<Vec<f64>, CliError> {
    let file = fs::File::open(path).map_err(|e| CliError::Config(format!("missing checkpoint {}: {e}", path.display())))?;
    let (header, values) =
        nn::read_params(std::io::BufReader::new(file)).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let expected = cfg.phi_spec()?;
    let actual = header.specs.first().ok_or_else(|| CliError::Config(format!("{}: no segments", path.display())))?;
    if *actual != expected {
        return Err(CliError::Config(format!(
            "{}: incompatible checkpoint: expected layers {:?} ({} params), found {:?} ({} params)",
            path.display(),
            expected.layer_sizes,
            expected.param_count(),
            actual.layer_sizes,
            actual.param_count()
        )));
    }
    Ok(values[..expected.param_count()].to_vec())
}

/// The random message function shared by every victim of a baseline run.
pub fn random_phi(cfg: &MetaConfig) -> Result<Adversary, CliError> {
    Ok(Adversary::random_fixed(&cfg.phi_spec()?, &mut rng::substream(cfg.master_seed, &[tag::ADVERSARY])))
}

fn checkpoint_writer<'a>(
    path: PathBuf,
    config_hash: String,
    mut history: Vec<GenerationRecord>,
    every: usize,
) -> Box<dyn FnMut(&EsState, &GenerationRecord) + 'a> {
    Box::new(move |state, record| {
        history.push(record.clone());
        if every > 0 && (state.generation as usize).is_multiple_of(every) {
            let cp = Checkpoint { config_hash: config_hash.clone(), state: state.clone(), history: history.clone() };
            let text = serde_json::to_vec(&cp).expect("checkpoint serializes");
            if let Err(e) = write_atomic(&path, &text) {
                log::warn!("checkpoint {}: {e}", path.display());
            }
        }
    })
}

/// Hash of everything but the generation count, so runs can be extended.
fn resume_key(cfg: &ExperimentConfig) -> String {
    let mut c = cfg.clone();
    c.meta.es.generations = 0;
    c.hash()
}

fn read_checkpoint(path: &Path, config_hash: &str) -> Result<Checkpoint, CliError> {
    let text = fs::read(path).map_err(|e| CliError::Config(format!("missing checkpoint {}: {e}", path.display())))?;
    let cp: Checkpoint =
        serde_json::from_slice(&text).map_err(|e| CliError::Config(format!("bad checkpoint {}: {e}", path.display())))?;
    if cp.config_hash != config_hash {
        return Err(CliError::Config(format!("{}: checkpoint was written for a different config", path.display())));
    }
    Ok(cp)
}

pub fn dispatch(command: &Command, workers: usize, stop: Option<&AtomicBool>) -> Result<(), CliError> {
    match command {
        Command::TrainTraintime(a) => train_traintime(command, a, workers, stop),
        Command::TrainTesttime(a) => train_testtime(command, a, workers, stop),
        Command::Baseline(a) => baseline(command, a, workers),
        Command::Oracle(a) => oracle(command, a, workers),
        Command::Analyze(AnalyzeCommand::Interference(a)) => interference(command, a, workers),
        Command::Analyze(AnalyzeCommand::Sweep(a)) => sweep(command, a, workers),
        Command::Analyze(AnalyzeCommand::Curves(a)) => curves(command, a, workers),
        Command::Verify(a) => verify(command, a, workers),
        Command::Rerun(a) => rerun(a, workers, stop),
    }
}

fn train_traintime(command: &Command, a: &TrainTraintimeArgs, workers: usize, stop: Option<&AtomicBool>) -> Result<(), CliError> {
    let mut cfg = load(&a.run)?;
    cfg.meta.objective = match a.mode {
        Mode::Ally => meta::Objective::Ally,
        Mode::Adversary => meta::Objective::Adversary,
    };
    cfg.meta.test_time = None;
    let mut run = Run::new(command, workers, &a.run.out, Some(cfg))?;
    let hash = resume_key(run.config.as_ref().unwrap());
    let prior = match &a.resume {
        Some(p) => {
            let p = run.input(p)?;
            Some(read_checkpoint(&p, &hash)?)
        }
        None => None,
    };
    let prior_history = prior.as_ref().map_or_else(Vec::new, |c| c.history.clone());
    let options = RunOptions {
        workers: None,
        stop,
        on_generation: Some(checkpoint_writer(run.out.path(CHECKPOINT_FILE), hash.clone(), prior_history.clone(), a.checkpoint_every)),
        resume_from: prior.map(|c| c.state),
    };
    let result = meta::run_traintime(run.cfg(), options)?;
    let mut history = prior_history;
    history.extend(result.history.iter().cloned());

    run.out.write("fitness_history.csv", &history_csv(&history)?)?;
    run.out.write("phi.params", &params_bytes(std::slice::from_ref(&result.phi_spec), &result.phi)?)?;
    let cp = Checkpoint { config_hash: hash, state: result.es_state.clone(), history: history.clone() };
    run.out.write(CHECKPOINT_FILE, &serde_json::to_vec(&cp).map_err(|e| CliError::Runtime(e.to_string()))?)?;
    let fitness_svg =
        analysis::svg_line_plot(&[("mean fitness".into(), history_curve(&history))], "ES fitness", "generation", "fitness");
    run.out.write("fitness.svg", fitness_svg.as_bytes())?;

    if result.interrupted {
        let g = result.es_state.generation;
        run.finish(RunStatus::Interrupted, json!({ "generation": g }))?;
        return Err(CliError::Interrupted(format!("stopped after generation {g}; resume with --resume")));
    }
    let mut summary = json!({ "generations": history.len() });
    if !result.victim_traces.is_empty() {
        let curves = aggregate_curves(&result.victim_traces)?;
        run.out.write("victim_curves.csv", &curves_csv(&curves)?)?;
        run.out.write("victim_traces.csv", &traces_csv(&result.victim_traces, "victim")?)?;
        let label = format!("{:?}", a.mode).to_lowercase();
        let svg = analysis::svg_line_plot(&[(label, curves)], "Victim training", "update", "mean reward");
        run.out.write("victim_curves.svg", svg.as_bytes())?;
        summary["victim_mean_rewards"] = json!(result.victim_mean_rewards());
    }
    run.finish(RunStatus::Ok, summary)
}

fn require_test_time(cfg: &MetaConfig) -> Result<TestTimeConfig, CliError> {
    cfg.test_time.clone().ok_or_else(|| CliError::Config("this command needs a [meta.test_time] section".into()))
}

fn train_testtime(command: &Command, a: &TrainTesttimeArgs, workers: usize, stop: Option<&AtomicBool>) -> Result<(), CliError> {
    let cfg = load(&a.run)?;
    require_test_time(&cfg.meta)?;
    let mut run = Run::new(command, workers, &a.run.out, Some(cfg))?;
    let hash = resume_key(run.config.as_ref().unwrap());
    let prior = match &a.resume {
        Some(p) => {
            let p = run.input(p)?;
            Some(read_checkpoint(&p, &hash)?)
        }
        None => None,
    };
    let prior_history = prior.as_ref().map_or_else(Vec::new, |c| c.history.clone());
    let options = RunOptions {
        workers: None,
        stop,
        on_generation: Some(checkpoint_writer(run.out.path(CHECKPOINT_FILE), hash.clone(), prior_history.clone(), a.checkpoint_every)),
        resume_from: prior.map(|c| c.state),
    };
    let result = meta::run_testtime(run.cfg(), options)?;
    let mut history = prior_history;
    history.extend(result.history.iter().cloned());

    run.out.write("fitness_history.csv", &history_csv(&history)?)?;
    let specs = [result.phi_spec.clone(), result.psi_spec.clone().expect("test-time result has psi")];
    let mut values = result.phi.clone();
    values.extend(result.psi.as_deref().unwrap_or_default());
    run.out.write("phi_psi.params", &params_bytes(&specs, &values)?)?;
    let cp = Checkpoint { config_hash: hash, state: result.es_state.clone(), history: history.clone() };
    run.out.write(CHECKPOINT_FILE, &serde_json::to_vec(&cp).map_err(|e| CliError::Runtime(e.to_string()))?)?;
    let fitness_svg =
        analysis::svg_line_plot(&[("mean fitness".into(), history_curve(&history))], "ES fitness", "generation", "goal score");
    run.out.write("fitness.svg", fitness_svg.as_bytes())?;

    if result.interrupted {
        let g = result.es_state.generation;
        run.finish(RunStatus::Interrupted, json!({ "generation": g }))?;
        return Err(CliError::Interrupted(format!("stopped after generation {g}; resume with --resume")));
    }
    let eval = result.testtime_eval.expect("finished test-time run is evaluated");
    let rows = (0..eval.trained.len())
        .map(|k| vec![k.to_string(), num(eval.trained[k]), num(eval.zero_psi[k])])
        .collect();
    run.out.write("testtime_eval.csv", &csv_bytes(&["eval_seed", "trained", "zero_psi"], rows)?)?;
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len().max(1) as f64;
    run.finish(
        RunStatus::Ok,
        json!({
            "generations": history.len(),
            "trained_goal_score": mean(&eval.trained),
            "control_goal_score": mean(&eval.zero_psi),
        }),
    )
}

struct VictimRun {
    trace: Vec<f64>,
    final_quarter_return: f64,
}

fn baseline(command: &Command, a: &BaselineArgs, workers: usize) -> Result<(), CliError> {
    let mut cfg = load(&a.run)?;
    if a.adversary == BaselineKind::Nochannel {
        cfg.meta.channel.mode = ChannelMode::NoChannel;
        cfg.meta.channel.mask = None;
    }
    let run = Run::new(command, workers, &a.run.out, Some(cfg))?;
    let c = run.cfg();
    let n = a.seeds.unwrap_or(c.eval_victims);
    if n == 0 {
        return Err(CliError::Config("--seeds must be >= 1".into()));
    }
    let seeds = c.seeds();
    let adversary = match a.adversary {
        BaselineKind::Zeroes | BaselineKind::Nochannel | BaselineKind::Rarl => Adversary::Zeroes(c.channel.message_dim),
        BaselineKind::Random => random_phi(c)?,
    };
    let runs: Vec<VictimRun> = (0..n)
        .into_par_iter()
        .map(|i| {
            let seed = seeds.eval_victim(i);
            Ok(match a.adversary {
                BaselineKind::Rarl => {
                    let r = meta::run_rarl(c, seed)?;
                    VictimRun { trace: r.victim_trace, final_quarter_return: f64::NAN }
                }
                _ => {
                    let o = ppo::train_victim(c.env, &adversary, &c.channel, &c.ppo, seed)?;
                    VictimRun { final_quarter_return: o.final_quarter_return(), trace: o.reward_trace }
                }
            })
        })
        .collect::<Result<_, CliError>>()?;
    baseline_outputs(run, a.adversary, runs)
}

fn baseline_outputs(mut run: Run, kind: BaselineKind, runs: Vec<VictimRun>) -> Result<(), CliError> {
    let seeds = run.cfg().seeds();
    let traces: Vec<Vec<f64>> = runs.iter().map(|r| r.trace.clone()).collect();
    let curves = aggregate_curves(&traces)?;
    run.out.write("victim_curves.csv", &curves_csv(&curves)?)?;
    run.out.write("victim_traces.csv", &traces_csv(&traces, "victim")?)?;
    let rows = runs
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mean = r.trace.iter().sum::<f64>() / r.trace.len().max(1) as f64;
            vec![i.to_string(), seeds.eval_victim(i).to_string(), num(mean), num(r.final_quarter_return)]
        })
        .collect();
    run.out.write("victim_summary.csv", &csv_bytes(&["victim", "seed", "mean_reward", "final_quarter_return"], rows)?)?;
    let label = format!("{kind:?}").to_lowercase();
    let svg = analysis::svg_line_plot(&[(label, curves)], "Victim training", "update", "mean reward");
    run.out.write("victim_curves.svg", svg.as_bytes())?;
    let means: Vec<f64> = traces.iter().map(|t| t.iter().sum::<f64>() / t.len().max(1) as f64).collect();
    run.finish(RunStatus::Ok, json!({ "victim_mean_rewards": means }))
}

fn pretty<T: Serialize>(v: &T) -> Result<String, CliError> {
    serde_json::to_string_pretty(v).map_err(|e| CliError::Runtime(e.to_string()))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

fn oracle(command: &Command, a: &OracleArgs, workers: usize) -> Result<(), CliError> {
    let cfg = load(&a.run)?;
    let tt = require_test_time(&cfg.meta)?;
    let mut run = Run::new(command, workers, &a.run.out, Some(cfg))?;
    let phi = match (a.kind, &a.phi) {
        (OracleKind::TesttimePpo, Some(p)) => {
            let p = run.input(p)?;
            Some(load_phi(&p, run.cfg())?)
        }
        (OracleKind::TesttimePpo, None) => return Err(CliError::Config("--kind testtime-ppo needs --phi".into())),
        _ => None,
    };
    let c = run.cfg().clone();
    let n = a.seeds.unwrap_or(tt.eval_seeds);
    let seeds = c.seeds();
    let scale = c.channel.message_scale;
    let zero = Adversary::Zeroes(c.channel.message_dim);
    let results: Vec<(Vec<f64>, f64, f64)> = (0..n)
        .into_par_iter()
        .map(|k| {
            let seed = seeds.eval_victim(k);
            let goals = meta::eval_goal_seed(&tt, k);
            let oracle_seed = rng::derive_seed(seed, &[tag::ORACLE]);
            if a.kind == OracleKind::Direct {
                let o = meta::direct_oracle(&c, oracle_seed)?;
                let score = mean(&meta::direct_episode_scores(&o.policy, &c, tt.eval_episodes, goals)?);
                return Ok((o.reward_trace, score, f64::NAN));
            }
            let victim: ActorCritic = match &phi {
                Some(phi) => meta::train_testtime_victim(phi, &c, seed)?,
                None => ppo::train_victim(c.env, &random_phi(&c)?, &c.channel, &c.ppo, seed)?.victim,
            };
            let o = meta::oracle_testtime_ppo(&victim, &c, oracle_seed)?;
            let score =
                mean(&meta::goal_episode_scores(&victim, &meta::policy_messages(&o.policy, scale), &c, tt.eval_episodes, goals)?);
            let control =
                mean(&meta::goal_episode_scores(&victim, &meta::network_messages(&zero, scale), &c, tt.eval_episodes, goals)?);
            Ok((o.reward_trace, score, control))
        })
        .collect::<Result<_, CliError>>()?;
    let traces: Vec<Vec<f64>> = results.iter().map(|r| r.0.clone()).collect();
    let curves = aggregate_curves(&traces)?;
    run.out.write("oracle_curves.csv", &curves_csv(&curves)?)?;
    let rows = results.iter().enumerate().map(|(k, r)| vec![k.to_string(), num(r.1), num(r.2)]).collect();
    run.out.write("oracle_scores.csv", &csv_bytes(&["eval_seed", "score", "zero_psi"], rows)?)?;
    let label = format!("{:?}", a.kind).to_lowercase();
    let svg = analysis::svg_line_plot(&[(label, curves)], "Oracle training", "update", "mean goal reward");
    run.out.write("oracle_curves.svg", svg.as_bytes())?;
    let scores: Vec<f64> = results.iter().map(|r| r.1).collect();
    run.finish(RunStatus::Ok, json!({ "mean_score": mean(&scores), "scores": scores }))
}

/// Resolves the message source of an analysis; may switch the channel off.
fn source_adversary(run: &mut Run, source: &SourceArgs) -> Result<Adversary, CliError> {
    match (&source.phi, source.adversary) {
        (Some(p), _) => {
            let p = run.input(p)?;
            let cfg = run.cfg();
            Ok(Adversary::Learned(FlatParams::from_values(cfg.phi_spec()?, load_phi(&p, cfg)?).map_err(|e| CliError::Runtime(e.to_string()))?))
        }
        (None, Some(BaselineKind::Random)) => random_phi(run.cfg()),
        (None, Some(BaselineKind::Zeroes)) => Ok(Adversary::Zeroes(run.cfg().channel.message_dim)),
        (None, Some(BaselineKind::Nochannel)) => {
            let cfg = &mut run.config.as_mut().unwrap().meta;
            cfg.channel.mode = ChannelMode::NoChannel;
            cfg.channel.mask = None;
            Ok(Adversary::Zeroes(cfg.channel.message_dim))
        }
        (None, Some(BaselineKind::Rarl)) => Err(CliError::Config("analyses take --phi or a fixed --adversary".into())),
        (None, None) => Err(CliError::Config("give --phi or --adversary".into())),
    }
}

fn interference(command: &Command, a: &InterferenceArgs, workers: usize) -> Result<(), CliError> {
    let cfg = load(&a.run)?;
    let mut run = Run::new(command, workers, &a.run.out, Some(cfg))?;
    let adversary = source_adversary(&mut run, &a.source)?;
    let c = run.cfg().clone();
    let seeds = c.seeds();
    let at = c.ppo.n_updates / 4;
    let matrices: Vec<analysis::InterferenceMatrix> = (0..a.victims)
        .into_par_iter()
        .map(|i| {
            let o = ppo::train_victim_with_snapshot(c.env, &adversary, &c.channel, &c.ppo, seeds.eval_victim(i), Some(at))?;
            let (victim, buffer) = o.snapshot.ok_or_else(|| CliError::Runtime("no training snapshot".into()))?;
            Ok(analysis::interference_matrix(&victim, &buffer, &c.ppo)?)
        })
        .collect::<Result<_, CliError>>()?;
    let b = INTERFERENCE_BINS;
    let mut avg = vec![vec![None; b]; b];
    for (r, row) in avg.iter_mut().enumerate() {
        for (col, cell) in row.iter_mut().enumerate() {
            let vals: Vec<f64> = matrices.iter().filter_map(|m| m.matrix[r][col]).collect();
            if !vals.is_empty() {
                *cell = Some(mean(&vals));
            }
        }
    }
    let mut rows = Vec::new();
    for (r, row) in avg.iter().enumerate() {
        for (col, cell) in row.iter().enumerate() {
            rows.push(vec![r.to_string(), col.to_string(), cell.map_or(String::new(), num)]);
        }
    }
    run.out.write("interference.csv", &csv_bytes(&["row_bin", "col_bin", "cosine_distance"], rows)?)?;
    let opt = |x: Option<f64>| x.map_or(String::new(), num);
    let rows = matrices
        .iter()
        .enumerate()
        .map(|(i, m)| vec![i.to_string(), opt(m.early_late(3)), opt(m.late_late(3))])
        .collect();
    run.out.write("interference_victims.csv", &csv_bytes(&["victim", "early_late", "late_late"], rows)?)?;
    let ticks: Vec<String> = (0..b).map(|i| i.to_string()).collect();
    let svg = analysis::svg_heatmap(&avg, &ticks, &ticks, "Gradient interference", "timestep bin", "timestep bin");
    run.out.write("interference.svg", svg.as_bytes())?;
    let el: Vec<f64> = matrices.iter().filter_map(|m| m.early_late(3)).collect();
    let ll: Vec<f64> = matrices.iter().filter_map(|m| m.late_late(3)).collect();
    run.finish(
        RunStatus::Ok,
        json!({
            "snapshot_update": at,
            "gradient": matrices.first().map(|m| m.gradient),
            "mean_early_late": mean(&el),
            "mean_late_late": mean(&ll),
        }),
    )
}

/// Start states used as sweep probes.
pub fn probe_states(cfg: &MetaConfig, n: usize) -> Vec<Vec<f64>> {
    let seeds = cfg.seeds();
    (0..n).map(|j| envs::reset(cfg.env, &mut rng::substream(seeds.eval, &[tag::ENV, j as u64])).1).collect()
}

fn sweep(command: &Command, a: &SweepArgs, workers: usize) -> Result<(), CliError> {
    let cfg = load(&a.run)?;
    let mut run = Run::new(command, workers, &a.run.out, Some(cfg))?;
    let adversary = source_adversary(&mut run, &a.source)?;
    let c = run.cfg().clone();
    if c.channel.message_dim < 2 {
        return Err(CliError::Config("sweeps need message_size >= 2".into()));
    }
    let victims: Vec<ActorCritic> =
        meta::evaluation_victims(&adversary, &c, a.victims)?.into_iter().map(|o| o.victim).collect();
    let s = c.channel.message_scale;
    let grid = GridSpec::square(-s, s, a.grid);
    let pts = grid.points();
    let sweeps: Vec<analysis::SweepGrid> = probe_states(&c, a.probes)
        .par_iter()
        .map(|p| Ok(analysis::message_sweep(&victims, p, &c.channel, &grid)?))
        .collect::<Result<_, CliError>>()?;
    let mut rows = Vec::new();
    for (p, sg) in sweeps.iter().enumerate() {
        for (i, x) in pts.iter().enumerate() {
            for (j, y) in pts.iter().enumerate() {
                rows.push(vec![p.to_string(), num(*x), num(*y), num(sg.mean[i][j]), num(sg.variance[i][j])]);
            }
        }
    }
    run.out.write("sweep.csv", &csv_bytes(&["probe", "message_0", "message_1", "mean", "variance"], rows)?)?;
    let rows = sweeps
        .iter()
        .enumerate()
        .map(|(p, sg)| vec![p.to_string(), num(sg.output_range()), num(sg.mean_variance())])
        .collect();
    run.out.write("sweep_summary.csv", &csv_bytes(&["probe", "output_range", "mean_variance"], rows)?)?;
    let ticks: Vec<String> = pts.iter().map(|x| format!("{x:.2}")).collect();
    for (name, field) in [("sweep_mean.svg", 0), ("sweep_variance.svg", 1)] {
        let g = if field == 0 { &sweeps[0].mean } else { &sweeps[0].variance };
        let cells: Vec<Vec<Option<f64>>> = g.iter().map(|r| r.iter().map(|v| Some(*v)).collect()).collect();
        let title = if field == 0 { "Mean policy output" } else { "Policy output variance" };
        run.out.write(name, analysis::svg_heatmap(&cells, &ticks, &ticks, title, "message 1", "message 0").as_bytes())?;
    }
    let ranges: Vec<f64> = sweeps.iter().map(|s| s.output_range()).collect();
    let vars: Vec<f64> = sweeps.iter().map(|s| s.mean_variance()).collect();
    run.finish(RunStatus::Ok, json!({ "mean_output_range": mean(&ranges), "mean_variance": mean(&vars) }))
}

fn curves(command: &Command, a: &CurvesArgs, workers: usize) -> Result<(), CliError> {
    let mut run = Run::new(command, workers, &a.out, None)?;
    let mut traces = Vec::new();
    for p in &a.inputs {
        let p = run.input(p)?;
        traces.push(act_core::io::read_csv_column(&p, &a.column).map_err(CliError::Config)?);
    }
    let curves = aggregate_curves(&traces).map_err(|e| CliError::Config(e.to_string()))?;
    run.out.write("curves.csv", &curves_csv(&curves)?)?;
    let svg = analysis::svg_line_plot(&[(a.column.clone(), curves.clone())], "Curves", "update", &a.column);
    run.out.write("curves.svg", svg.as_bytes())?;
    run.finish(RunStatus::Ok, json!({ "n": curves.n }))
}

fn verify(command: &Command, a: &VerifyArgs, workers: usize) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(&a.run.config)?.with_seed(a.run.seed);
    let n_cells = match cfg.meta.env {
        envs::EnvKind::Chain { n_cells } => n_cells,
        other => return Err(CliError::Config(format!("verify needs [env] name = \"chain\", got {other:?}"))),
    };
    let mut run = Run::new(command, workers, &a.run.out, Some(cfg))?;
    let seeds = run.cfg().seeds();
    let adversaries = DiscreteAdversary::default_set(n_cells);
    match a.proposition {
        Proposition::Prop1 => {
            let victim = match a.victim {
                TabularVictim::Tabular => VictimKind::Tabular,
                TabularVictim::TabularNonUniform => VictimKind::TabularNonUniform,
                TabularVictim::Mlp => VictimKind::Mlp,
            };
            let victim_seeds: Vec<u64> = (0..a.seeds).map(|i| seeds.eval_victim(i)).collect();
            let report = tabular::verify_prop1(n_cells, &adversaries, &victim_seeds, a.episodes, &QConfig::default(), victim);
            run.out.write("prop1.json", pretty(&report)?.as_bytes())?;
            let rows = report
                .divergences
                .iter()
                .map(|d| {
                    vec![d.seed.to_string(), d.adversary_a.clone(), d.adversary_b.clone(), d.episode.map_or(String::new(), |e| e.to_string())]
                })
                .collect();
            run.out.write("prop1.csv", &csv_bytes(&["seed", "adversary_a", "adversary_b", "first_divergent_episode"], rows)?)?;
            let summary = json!({ "pass": report.pass, "divergences": report.divergences.len(), "off_channel_reads": report.off_channel_reads });
            if report.pass {
                println!("prop1: PASS ({} adversaries x {} seeds)", adversaries.len(), a.seeds);
                run.finish(RunStatus::Ok, summary)
            } else {
                run.finish(RunStatus::VerificationFailed, summary)?;
                Err(CliError::Verification(format!("prop1: {} divergences", report.divergences.len())))
            }
        }
        Proposition::Prop2 => {
            let report = tabular::verify_prop2(n_cells, &adversaries, a.gamma, a.budget, seeds.eval_victim(0));
            run.out.write("prop2.json", pretty(&report)?.as_bytes())?;
            let rows = report
                .entries
                .iter()
                .map(|e| vec![e.adversary.clone(), e.converged.to_string(), e.episodes.to_string(), num(e.greedy_return)])
                .collect();
            run.out.write("prop2.csv", &csv_bytes(&["adversary", "converged", "episodes", "greedy_return"], rows)?)?;
            let summary = json!({ "status": report.status, "optimal_return": report.optimal_return });
            if report.status == tabular::Prop2Status::Pass {
                println!("prop2: PASS (optimal return {})", report.optimal_return);
                run.finish(RunStatus::Ok, summary)
            } else {
                run.finish(RunStatus::VerificationFailed, summary)?;
                Err(CliError::Verification(format!("prop2: {:?}", report.status)))
            }
        }
    }
}

impl Command {
    fn run_args_mut(&mut self) -> Option<&mut RunArgs> {
        match self {
            Command::TrainTraintime(a) => Some(&mut a.run),
            Command::TrainTesttime(a) => Some(&mut a.run),
            Command::Baseline(a) => Some(&mut a.run),
            Command::Oracle(a) => Some(&mut a.run),
            Command::Analyze(AnalyzeCommand::Interference(a)) => Some(&mut a.run),
            Command::Analyze(AnalyzeCommand::Sweep(a)) => Some(&mut a.run),
            Command::Verify(a) => Some(&mut a.run),
            Command::Analyze(AnalyzeCommand::Curves(_)) | Command::Rerun(_) => None,
        }
    }
}

fn rerun(a: &RerunArgs, workers: usize, stop: Option<&AtomicBool>) -> Result<(), CliError> {
    let m = RunManifest::read(&a.manifest)?;
    for input in &m.inputs {
        let now = FileRecord::of(&input.path)?;
        if now.sha256 != input.sha256 {
            return Err(CliError::Config(format!("input {} changed since the recorded run", input.path.display())));
        }
    }
    let mut command = m.command.clone();
    fs::create_dir_all(&a.out)?;
    match (command.run_args_mut(), &m.config_toml) {
        (Some(run), Some(text)) => {
            let path = a.out.join("config.toml");
            write_atomic(&path, text.as_bytes())?;
            run.config = path;
            run.out = a.out.clone();
            run.seed = None;
        }
        (None, _) => match &mut command {
            Command::Analyze(AnalyzeCommand::Curves(c)) => c.out = a.out.clone(),
            _ => return Err(CliError::Config("manifest records a rerun".into())),
        },
        (Some(_), None) => return Err(CliError::Config("manifest has no config".into())),
    }
    dispatch(&command, workers, stop)
}
