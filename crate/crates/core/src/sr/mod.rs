//! Query selection, reference-vector aggregation and the query-module
//! objective.

mod aggregate;
mod query;

pub use aggregate::{noise_reference, Aggregator, AggregatorDims};
pub use query::{
    gae, make_query, query_actor_loss, query_reward_assignment, Phase, PpoBatch, QueryConfig, QueryDecision,
    QueryModule, QueryNets, QueryStats, QueryStrategy, Rollout, LOG_STD_MAX, LOG_STD_MIN,
};
