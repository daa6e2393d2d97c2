//! DDPG with optional reference inputs, its replay buffer, and
//! distillation into a plain student policy.

mod ddpg;
mod distill;
mod nets;
mod replay;

pub use ddpg::{apply_exploration, BatchRefs, Ddpg, DdpgConfig};
pub use distill::{cosine_lr, distill, policy_kl, DistillConfig, StudentPolicy, KL_SIGMA};
pub use nets::{ActorNet, CriticNet, RefInput, RefMlp, SR_PREFIX};
pub use replay::{Batch, Context, Entry, ReplayBuffer, RewardSource};
