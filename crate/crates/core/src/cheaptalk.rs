//! The cheap talk channel: deterministic message functions and the ways a
//! message is combined with the victim's observation.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{EnvKind, Goal};
use crate::nn::{self, Activation, FlatParams, InitScheme, MlpSpec, NnError};
use crate::rng::Rng;

pub const DEFAULT_MESSAGE_SCALE: f64 = 2.0 * PI;
pub const DEFAULT_ADVERSARY_HIDDEN: [usize; 2] = [64, 64];

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("{what}: expected dimension {expected}, got {actual}")]
    DimMismatch { what: &'static str, expected: usize, actual: usize },
    #[error("invalid channel config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMode {
    /// `[obs, msg]`.
    Append,
    /// `obs + msg`.
    Additive,
    /// `obs + msg` on the masked coordinates only.
    AdditiveMasked,
    /// The message is dropped.
    NoChannel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub message_dim: usize,
    pub message_scale: f64,
    pub mode: ChannelMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Vec<bool>>,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig { message_dim: 2, message_scale: DEFAULT_MESSAGE_SCALE, mode: ChannelMode::Append, mask: None }
    }
}

impl ChannelConfig {
    /// Velocity coordinates of CartPole are the perturbable features.
    pub fn default_mask(kind: EnvKind) -> Option<Vec<bool>> {
        match kind {
            EnvKind::CartPole => Some(vec![false, true, false, true]),
            _ => None,
        }
    }

    pub fn validate(&self, obs_dim: usize) -> Result<(), ChannelError> {
        if !(self.message_scale.is_finite() && self.message_scale > 0.0) {
            return Err(ChannelError::InvalidConfig(format!("message_scale must be > 0, got {}", self.message_scale)));
        }
        match self.mode {
            ChannelMode::Append | ChannelMode::NoChannel => Ok(()),
            ChannelMode::Additive if self.message_dim != obs_dim => Err(ChannelError::InvalidConfig(format!(
                "additive mode needs message_dim = obs dim {obs_dim}, got {}",
                self.message_dim
            ))),
            ChannelMode::Additive => Ok(()),
            ChannelMode::AdditiveMasked => {
                let mask = self
                    .mask
                    .as_ref()
                    .ok_or_else(|| ChannelError::InvalidConfig("additive_masked mode needs a mask".into()))?;
                if mask.len() != obs_dim {
                    return Err(ChannelError::InvalidConfig(format!(
                        "mask has {} entries, observation has {obs_dim}",
                        mask.len()
                    )));
                }
                let n = mask.iter().filter(|&&m| m).count();
                if n != self.message_dim {
                    return Err(ChannelError::InvalidConfig(format!(
                        "mask selects {n} features but message_dim is {}",
                        self.message_dim
                    )));
                }
                Ok(())
            }
        }
    }

    /// Dimension of what the victim actually sees.
    pub fn augmented_dim(&self, obs_dim: usize) -> usize {
        match self.mode {
            ChannelMode::Append => obs_dim + self.message_dim,
            _ => obs_dim,
        }
    }
}

/// A deterministic message function `f(s)` or `f(s, g)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Adversary {
    /// Trainable network; its output is scaled by the channel's message scale.
    Learned(FlatParams),
    /// Randomly initialized and frozen.
    RandomFixed(FlatParams),
    /// Emits zeros of the given width.
    Zeroes(usize),
}

/// Message network: ReLU hidden layers, tanh output.
pub fn adversary_spec(input_dim: usize, message_dim: usize, hidden: &[usize]) -> Result<MlpSpec, NnError> {
    MlpSpec::with_hidden(input_dim, hidden, message_dim, Activation::Relu, Activation::Tanh)
}

impl Adversary {
    pub fn random_fixed(spec: &MlpSpec, rng: &mut Rng) -> Self {
        Adversary::RandomFixed(nn::init(spec, InitScheme::LecunUniform, rng))
    }

    pub fn message_dim(&self) -> usize {
        match self {
            Adversary::Learned(p) | Adversary::RandomFixed(p) => p.spec.output_dim(),
            Adversary::Zeroes(d) => *d,
        }
    }

    pub fn params(&self) -> Option<&FlatParams> {
        match self {
            Adversary::Learned(p) | Adversary::RandomFixed(p) => Some(p),
            Adversary::Zeroes(_) => None,
        }
    }

    /// `scale · tanh(net(obs ⊕ goal))`, every component in `[-scale, scale]`.
    pub fn message(&self, state_obs: &[f64], goal: Option<&Goal>, scale: f64) -> Result<Vec<f64>, ChannelError> {
        let p = match self {
            Adversary::Zeroes(d) => return Ok(vec![0.0; *d]),
            Adversary::Learned(p) | Adversary::RandomFixed(p) => p,
        };
        let goal_enc = goal.map(Goal::encoding).unwrap_or_default();
        let actual = state_obs.len() + goal_enc.len();
        if actual != p.spec.input_dim() {
            return Err(ChannelError::DimMismatch { what: "adversary input", expected: p.spec.input_dim(), actual });
        }
        let mut input = Vec::with_capacity(actual);
        input.extend_from_slice(state_obs);
        input.extend_from_slice(&goal_enc);
        let mut out = nn::predict(&p.spec, &p.values, &input)?;
        out.iter_mut().for_each(|m| *m *= scale);
        Ok(out)
    }
}

/// Combines an observation with a message according to the channel mode.
pub fn augment(obs: &[f64], msg: &[f64], config: &ChannelConfig) -> Result<Vec<f64>, ChannelError> {
    let check = |expected: usize| {
        if msg.len() == expected {
            Ok(())
        } else {
            Err(ChannelError::DimMismatch { what: "message", expected, actual: msg.len() })
        }
    };
    match config.mode {
        ChannelMode::NoChannel => Ok(obs.to_vec()),
        ChannelMode::Append => {
            check(config.message_dim)?;
            let mut out = Vec::with_capacity(obs.len() + msg.len());
            out.extend_from_slice(obs);
            out.extend_from_slice(msg);
            Ok(out)
        }
        ChannelMode::Additive => {
            check(obs.len())?;
            Ok(obs.iter().zip(msg).map(|(o, m)| o + m).collect())
        }
        ChannelMode::AdditiveMasked => {
            let mask = config
                .mask
                .as_ref()
                .ok_or_else(|| ChannelError::InvalidConfig("additive_masked mode needs a mask".into()))?;
            if mask.len() != obs.len() {
                return Err(ChannelError::DimMismatch { what: "mask", expected: obs.len(), actual: mask.len() });
            }
            check(mask.iter().filter(|&&m| m).count())?;
            let mut msgs = msg.iter();
            Ok(obs
                .iter()
                .zip(mask)
                .map(|(o, &m)| if m { o + msgs.next().unwrap() } else { *o })
                .collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn append(dim: usize) -> ChannelConfig {
        ChannelConfig { message_dim: dim, ..ChannelConfig::default() }
    }

    #[test]
    fn zeroes_and_zero_params_emit_zero() {
        assert_eq!(Adversary::Zeroes(2).message(&[1.0, 2.0, 3.0, 4.0], None, 1.0).unwrap(), vec![0.0, 0.0]);
        let spec = adversary_spec(4, 2, &[64, 64]).unwrap();
        let adv = Adversary::Learned(FlatParams::zeros(spec));
        assert_eq!(adv.message(&[1.0, -1.0, 0.5, 9.0], None, DEFAULT_MESSAGE_SCALE).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn goal_conditioned_message_needs_goal_input() {
        let spec = adversary_spec(4 + 1, 2, &[8, 8]).unwrap();
        let adv = Adversary::random_fixed(&spec, &mut rng::stream(0));
        let obs = [0.0; 4];
        assert!(adv.message(&obs, None, 1.0).is_err());
        let g = Goal::CartPole { target_x: 0.3 };
        assert_eq!(adv.message(&obs, Some(&g), 1.0).unwrap().len(), 2);
    }

    #[test]
    fn augment_modes() {
        let obs = [1.0, 2.0, 3.0, 4.0];
        let a = augment(&obs, &[9.0, 8.0], &append(2)).unwrap();
        assert_eq!(a, vec![1.0, 2.0, 3.0, 4.0, 9.0, 8.0]);
        let add = ChannelConfig { message_dim: 4, mode: ChannelMode::Additive, ..ChannelConfig::default() };
        assert_eq!(augment(&obs, &[0.0; 4], &add).unwrap(), obs.to_vec());
        let none = ChannelConfig { mode: ChannelMode::NoChannel, ..ChannelConfig::default() };
        assert_eq!(augment(&obs, &[5.0, 5.0], &none).unwrap(), obs.to_vec());
        let masked = ChannelConfig {
            message_dim: 2,
            mode: ChannelMode::AdditiveMasked,
            mask: ChannelConfig::default_mask(EnvKind::CartPole),
            ..ChannelConfig::default()
        };
        masked.validate(4).unwrap();
        assert_eq!(augment(&obs, &[10.0, 20.0], &masked).unwrap(), vec![1.0, 12.0, 3.0, 24.0]);
        assert!(augment(&obs, &[1.0], &append(2)).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ChannelConfig { mode: ChannelMode::Additive, ..append(2) }.validate(4).is_err());
        assert!(ChannelConfig { mode: ChannelMode::AdditiveMasked, ..append(2) }.validate(4).is_err());
        assert!(ChannelConfig { message_scale: 0.0, ..append(2) }.validate(4).is_err());
        assert_eq!(append(3).augmented_dim(4), 7);
        assert_eq!(ChannelConfig { mode: ChannelMode::NoChannel, ..append(3) }.augmented_dim(4), 4);
    }

    proptest! {
        #[test]
        fn messages_bounded_deterministic_and_stationary(
            seed in 0u64..500,
            obs in prop::collection::vec(-50.0..50.0f64, 4),
            blow_up in 1.0..100.0f64,
        ) {
            let spec = adversary_spec(4, 3, &[16, 16]).unwrap();
            let mut r = rng::stream(seed);
            let values = (0..spec.param_count()).map(|_| blow_up * r.gen_range(-1.0..1.0)).collect();
            let adv = Adversary::Learned(FlatParams::from_values(spec, values).unwrap());
            let m1 = adv.message(&obs, None, DEFAULT_MESSAGE_SCALE).unwrap();
            let m2 = adv.message(&obs.clone(), None, DEFAULT_MESSAGE_SCALE).unwrap();
            prop_assert!(m1.iter().all(|m| m.abs() <= DEFAULT_MESSAGE_SCALE));
            prop_assert!(m1.iter().zip(&m2).all(|(a, b)| a.to_bits() == b.to_bits()));
        }

        #[test]
        fn append_never_occludes(obs in prop::collection::vec(-1e6..1e6f64, 1..10), msg in prop::collection::vec(-7.0..7.0f64, 0..5)) {
            let cfg = append(msg.len());
            let a = augment(&obs, &msg, &cfg).unwrap();
            prop_assert_eq!(&a[..obs.len()], obs.as_slice());
        }
    }
}
