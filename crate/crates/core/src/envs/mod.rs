//! Environments and intrinsic rewards.

pub mod bandit_agents;
pub mod intrinsic;
pub mod mab;
pub mod maze;

pub use bandit_agents::{BanditAgent, BanditAgentKind, CountRegression};
pub use intrinsic::{AptKnn, CountGrid, IntrinsicConfig, IntrinsicKind, IntrinsicReward, Rnd};
pub use mab::{cumulative_regret, CountMab};
pub use maze::{cell_of, reachable_cells, PointMassMaze, Task, EPISODE_LEN};
