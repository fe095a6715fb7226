//! Cheap talk channel attacks on reinforcement learners.
//!
//! A victim (PPO or tabular) observes the environment state with a bounded
//! message vector appended to it. The message is produced by a deterministic
//! function of the state whose parameters are meta-trained with evolution
//! strategies, across full victim training runs, to hurt, help or backdoor
//! the victim.
//!
//! Module map:
//! - [`envs`]: batched CartPole, Pendulum and a discrete chain.
//! - [`nn`]: MLP with manual backprop, initializers, Adam.
//! - [`cheaptalk`]: message functions and observation augmentation.
//! - [`ppo`]: the PPO victim and its training loop.
//! - [`es`]: mirrored-sampling evolution strategies.
//! - [`meta`]: train-time and test-time meta-training, oracles, RARL.
//! - [`tabular`]: exact checks that tabular victims ignore the channel.
//! - [`analysis`]: gradient interference, message sweeps, curve statistics.

pub mod analysis;
pub mod cheaptalk;
pub mod envs;
pub mod es;
pub mod io;
pub mod meta;
pub mod nn;
pub mod ppo;
pub mod rng;
pub mod tabular;
