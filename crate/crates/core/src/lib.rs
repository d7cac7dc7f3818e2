pub mod augment;
pub mod bandit;
pub mod clients;
pub mod corpus;
pub mod elements;
pub mod fixture;
pub mod grpo;
pub mod metrics;
pub mod pipeline;
pub mod policy;
pub mod retrieve;
pub mod rewards;
pub mod seeds;
pub mod text;
