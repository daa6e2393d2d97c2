//! Self-referencing agents for unsupervised reinforcement learning.
//!
//! The crate is organised bottom-up:
//!
//! * [`nn`] holds a small reverse-mode autodiff tape over dense `f64`
//!   matrices, layers, multi-head cross-attention, Adam and checkpoints.
//! * [`retrieval`] keeps the reference window of completed episodes and
//!   performs exact cosine k-NN search plus trajectory expansion.
//! * [`sr`] forms queries, aggregates retrieved trajectories into a
//!   reference vector and trains the query module with PPO.
//! * [`agents`] is the DDPG backbone with optional reference inputs,
//!   plus distillation into a retrieval-free student.
//! * [`envs`] provides the count bandit, the point-mass maze and the
//!   intrinsic reward generators.
//! * [`harness`] wires everything into pretrain / finetune / distill
//!   runs, the bandit study and the aggregate metrics.

pub mod agents;
pub mod envs;
mod error;
pub mod harness;
pub mod nn;
pub mod retrieval;
pub mod sr;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic RNG used everywhere in the crate.
pub type Rng = ChaCha8Rng;

/// Derives an independent stream from a base seed. Streams keep, for
/// example, exploration noise identical whether or not retrieval
/// consumes randomness.
pub fn rng_stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
