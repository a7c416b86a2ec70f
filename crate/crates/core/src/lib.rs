//! Deterministic simulator for exploration/exploitation federated learning
//! with cosine-similarity expulsion of poisoned clients.

pub mod nn;
pub mod seed;
pub mod data;
pub mod pool;
pub mod round;
pub mod detection;
pub mod orchestrator;
pub mod experiment;
