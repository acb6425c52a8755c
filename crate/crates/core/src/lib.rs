//! Reinforcement learning with a single parametric quadratic program that
//! models the policy, the value function and the Q-function at once.

pub mod diffqp;
pub mod envs;
pub mod lifting;
pub mod baseline;
pub mod unified;
pub mod algos;
pub mod harness;
