//! Experiment config files.
//!
//! A config is a TOML document with the sections `[env]`, `[channel]`,
//! `[ppo]`, `[es]` and `[meta]`. Every section must be present; keys left out
//! of a section take the environment's default. Unknown keys are rejected.

use std::path::Path;

use act_core::cheaptalk::{ChannelConfig, ChannelMode, DEFAULT_MESSAGE_SCALE};
use act_core::envs::{EnvKind, DEFAULT_CHAIN_CELLS};
use act_core::es::{EsConfig, FitnessShaping};
use act_core::meta::{MetaConfig, Objective, RarlConfig, TestTimeConfig};
use act_core::nn::Activation;
use act_core::ppo::PpoConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvName {
    Cartpole,
    Pendulum,
    Chain,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSection {
    pub name: Option<EnvName>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_cells: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSection {
    pub message_size: Option<usize>,
    /// Messages lie in `[-message_range, message_range]`.
    pub message_range: Option<f64>,
    pub mode: Option<ChannelMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask: Option<Vec<bool>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoSection {
    pub number_of_environments: Option<usize>,
    pub number_of_updates: Option<usize>,
    pub update_period: Option<usize>,
    pub epochs_per_update: Option<usize>,
    pub minibatches: Option<usize>,
    pub discount_factor: Option<f64>,
    pub gae_lambda: Option<f64>,
    pub ppo_clip_eps: Option<f64>,
    pub critic_coefficient: Option<f64>,
    pub entropy_coefficient: Option<f64>,
    pub learning_rate: Option<f64>,
    pub max_grad_norm: Option<f64>,
    pub actor_hidden_layers: Option<usize>,
    pub actor_hidden_size: Option<usize>,
    pub critic_hidden_layers: Option<usize>,
    pub critic_hidden_size: Option<usize>,
    pub activation: Option<Activation>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EsSection {
    pub population_size: Option<usize>,
    pub number_of_generations: Option<usize>,
    pub sigma: Option<f64>,
    pub learning_rate: Option<f64>,
    pub fitness_shaping: Option<FitnessShaping>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestTimeSection {
    pub eval_episodes: Option<usize>,
    pub goal_seed: Option<u64>,
    pub eval_seeds: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RarlSection {
    pub victim_steps: Option<usize>,
    pub adversary_steps: Option<usize>,
    pub total_victim_updates: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaSection {
    pub master_seed: Option<u64>,
    pub objective: Option<Objective>,
    pub number_of_rollouts: Option<usize>,
    pub oa_hidden_layers: Option<usize>,
    pub oa_hidden_size: Option<usize>,
    pub eval_victims: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_time: Option<TestTimeSection>,
    pub rarl: Option<RarlSection>,
}

/// The file as written.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub env: Option<EnvSection>,
    pub channel: Option<ChannelSection>,
    pub ppo: Option<PpoSection>,
    pub es: Option<EsSection>,
    pub meta: Option<MetaSection>,
}

/// A config with every default filled in.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub meta: MetaConfig,
}

fn hidden(layers: usize, size: usize) -> Vec<usize> {
    vec![size; layers]
}

fn uniform_hidden(name: &str, h: &[usize]) -> Result<(usize, usize), CliError> {
    match h.first() {
        Some(&s) if h.iter().all(|&x| x == s) => Ok((h.len(), s)),
        None => Ok((0, 0)),
        _ => Err(CliError::Config(format!("{name}: hidden layers must share one size, got {h:?}"))),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        Self::resolve(file)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn resolve(file: ConfigFile) -> Result<Self, CliError> {
        let missing = |s: &str| CliError::Config(format!("missing section [{s}]"));
        let env = file.env.ok_or_else(|| missing("env"))?;
        let ch = file.channel.ok_or_else(|| missing("channel"))?;
        let p = file.ppo.ok_or_else(|| missing("ppo"))?;
        let e = file.es.ok_or_else(|| missing("es"))?;
        let m = file.meta.ok_or_else(|| missing("meta"))?;

        let kind = match env.name.ok_or_else(|| CliError::Config("[env] needs a name".into()))? {
            EnvName::Cartpole => EnvKind::CartPole,
            EnvName::Pendulum => EnvKind::Pendulum,
            EnvName::Chain => EnvKind::Chain { n_cells: env.n_cells.unwrap_or(DEFAULT_CHAIN_CELLS) },
        };
        if env.n_cells.is_some() && !matches!(kind, EnvKind::Chain { .. }) {
            return Err(CliError::Config("[env] n_cells applies to the chain only".into()));
        }

        let mut meta = MetaConfig::desk(kind);
        meta.channel = ChannelConfig {
            message_dim: ch.message_size.unwrap_or(meta.channel.message_dim),
            message_scale: ch.message_range.unwrap_or(DEFAULT_MESSAGE_SCALE),
            mode: ch.mode.unwrap_or(ChannelMode::Append),
            mask: ch.mask.or_else(|| {
                matches!(ch.mode, Some(ChannelMode::AdditiveMasked)).then(|| ChannelConfig::default_mask(kind)).flatten()
            }),
        };

        let d = PpoConfig::for_env(kind);
        let (al, asz) = uniform_hidden("ppo actor", &d.actor_hidden)?;
        let (cl, csz) = uniform_hidden("ppo critic", &d.critic_hidden)?;
        meta.ppo = PpoConfig {
            n_envs: p.number_of_environments.unwrap_or(d.n_envs),
            rollout_len: p.update_period.unwrap_or(d.rollout_len),
            n_updates: p.number_of_updates.unwrap_or(d.n_updates),
            n_epochs: p.epochs_per_update.unwrap_or(d.n_epochs),
            n_minibatches: p.minibatches.unwrap_or(d.n_minibatches),
            gamma: p.discount_factor.unwrap_or(d.gamma),
            gae_lambda: p.gae_lambda.unwrap_or(d.gae_lambda),
            clip_eps: p.ppo_clip_eps.unwrap_or(d.clip_eps),
            critic_coef: p.critic_coefficient.unwrap_or(d.critic_coef),
            entropy_coef: p.entropy_coefficient.unwrap_or(d.entropy_coef),
            learning_rate: p.learning_rate.unwrap_or(d.learning_rate),
            max_grad_norm: p.max_grad_norm.unwrap_or(d.max_grad_norm),
            actor_hidden: hidden(p.actor_hidden_layers.unwrap_or(al), p.actor_hidden_size.unwrap_or(asz)),
            critic_hidden: hidden(p.critic_hidden_layers.unwrap_or(cl), p.critic_hidden_size.unwrap_or(csz)),
            activation: p.activation.unwrap_or(d.activation),
        };

        let de = EsConfig::default();
        meta.es = EsConfig {
            population_size: e.population_size.unwrap_or(de.population_size),
            sigma: e.sigma.unwrap_or(de.sigma),
            learning_rate: e.learning_rate.unwrap_or(de.learning_rate),
            generations: e.number_of_generations.unwrap_or(de.generations),
            fitness_shaping: e.fitness_shaping.unwrap_or(de.fitness_shaping),
        };

        let (ol, osz) = uniform_hidden("meta adversary", &meta.adversary_hidden)?;
        meta.master_seed = m.master_seed.unwrap_or(0);
        meta.objective = m.objective.unwrap_or(meta.objective);
        meta.rollouts_per_candidate = m.number_of_rollouts.unwrap_or(meta.rollouts_per_candidate);
        meta.adversary_hidden = hidden(m.oa_hidden_layers.unwrap_or(ol), m.oa_hidden_size.unwrap_or(osz));
        meta.eval_victims = m.eval_victims.unwrap_or(meta.eval_victims);
        meta.test_time = m.test_time.map(|t| {
            let d = TestTimeConfig::default();
            TestTimeConfig {
                eval_episodes: t.eval_episodes.unwrap_or(d.eval_episodes),
                goal_seed: t.goal_seed.unwrap_or(d.goal_seed),
                eval_seeds: t.eval_seeds.unwrap_or(d.eval_seeds),
            }
        });
        let r = m.rarl.unwrap_or_default();
        let dr = RarlConfig { total_victim_updates: meta.ppo.n_updates, ..RarlConfig::default() };
        meta.rarl = RarlConfig {
            victim_steps_per_cycle: r.victim_steps.unwrap_or(dr.victim_steps_per_cycle),
            adversary_steps_per_cycle: r.adversary_steps.unwrap_or(dr.adversary_steps_per_cycle),
            total_victim_updates: r.total_victim_updates.unwrap_or(dr.total_victim_updates),
        };

        if !matches!(kind, EnvKind::Chain { .. }) {
            meta.validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        Ok(ExperimentConfig { meta })
    }

    /// The fully resolved config as a config file.
    pub fn to_file(&self) -> ConfigFile {
        let m = &self.meta;
        let (name, n_cells) = match m.env {
            EnvKind::CartPole => (EnvName::Cartpole, None),
            EnvKind::Pendulum => (EnvName::Pendulum, None),
            EnvKind::Chain { n_cells } => (EnvName::Chain, Some(n_cells)),
        };
        let p = &m.ppo;
        ConfigFile {
            env: Some(EnvSection { name: Some(name), n_cells }),
            channel: Some(ChannelSection {
                message_size: Some(m.channel.message_dim),
                message_range: Some(m.channel.message_scale),
                mode: Some(m.channel.mode),
                mask: m.channel.mask.clone(),
            }),
            ppo: Some(PpoSection {
                number_of_environments: Some(p.n_envs),
                number_of_updates: Some(p.n_updates),
                update_period: Some(p.rollout_len),
                epochs_per_update: Some(p.n_epochs),
                minibatches: Some(p.n_minibatches),
                discount_factor: Some(p.gamma),
                gae_lambda: Some(p.gae_lambda),
                ppo_clip_eps: Some(p.clip_eps),
                critic_coefficient: Some(p.critic_coef),
                entropy_coefficient: Some(p.entropy_coef),
                learning_rate: Some(p.learning_rate),
                max_grad_norm: Some(p.max_grad_norm),
                actor_hidden_layers: Some(p.actor_hidden.len()),
                actor_hidden_size: Some(p.actor_hidden.first().copied().unwrap_or(0)),
                critic_hidden_layers: Some(p.critic_hidden.len()),
                critic_hidden_size: Some(p.critic_hidden.first().copied().unwrap_or(0)),
                activation: Some(p.activation),
            }),
            es: Some(EsSection {
                population_size: Some(m.es.population_size),
                number_of_generations: Some(m.es.generations),
                sigma: Some(m.es.sigma),
                learning_rate: Some(m.es.learning_rate),
                fitness_shaping: Some(m.es.fitness_shaping),
            }),
            meta: Some(MetaSection {
                master_seed: Some(m.master_seed),
                objective: Some(m.objective),
                number_of_rollouts: Some(m.rollouts_per_candidate),
                oa_hidden_layers: Some(m.adversary_hidden.len()),
                oa_hidden_size: Some(m.adversary_hidden.first().copied().unwrap_or(0)),
                eval_victims: Some(m.eval_victims),
                test_time: m.test_time.as_ref().map(|t| TestTimeSection {
                    eval_episodes: Some(t.eval_episodes),
                    goal_seed: Some(t.goal_seed),
                    eval_seeds: Some(t.eval_seeds),
                }),
                rarl: Some(RarlSection {
                    victim_steps: Some(m.rarl.victim_steps_per_cycle),
                    adversary_steps: Some(m.rarl.adversary_steps_per_cycle),
                    total_victim_updates: Some(m.rarl.total_victim_updates),
                }),
            }),
        }
    }

    /// Canonical TOML of the resolved config.
    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_file()).expect("resolved config serializes")
    }

    /// SHA-256 of the canonical TOML, in hex.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.meta.master_seed = s;
        }
        self
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[env]\nname = \"cartpole\"\n[channel]\n[ppo]\n[es]\n[meta]\n";

    #[test]
    fn empty_sections_take_env_defaults() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.meta.ppo, PpoConfig::cartpole());
        assert_eq!(c.meta.es, EsConfig::default());
        assert_eq!(c.meta.adversary_hidden, vec![64, 64]);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ExperimentConfig::parse(&MINIMAL.replace("[es]\n", "[es]\npopulation = 8\n")).unwrap_err();
        assert!(err.to_string().contains("population"), "{err}");
    }

    #[test]
    fn missing_section_is_named() {
        let err = ExperimentConfig::parse(&MINIMAL.replace("[es]\n", "")).unwrap_err();
        assert!(err.to_string().contains("[es]"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn invalid_value_is_a_config_error() {
        let err = ExperimentConfig::parse(&MINIMAL.replace("[ppo]\n", "[ppo]\ndiscount_factor = 1.0\n")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn resolved_toml_round_trips() {
        let text = MINIMAL.replace("[meta]\n", "[meta]\nmaster_seed = 7\n[meta.test_time]\neval_episodes = 3\n");
        let c = ExperimentConfig::parse(&text).unwrap();
        let back = ExperimentConfig::parse(&c.to_toml()).unwrap();
        assert_eq!(c, back);
        assert_eq!(c.hash(), back.hash());
        assert_ne!(c.hash(), c.clone().with_seed(Some(8)).hash());
    }
}
