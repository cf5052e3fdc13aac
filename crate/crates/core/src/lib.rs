//! Forensic analytics for bilateral commodity-trade records.
//!
//! Layers: Benford digit conformity, an isolation forest, trade-network
//! structure, and an autoencoder, fused into a composite risk score with
//! mirror-statistics reconciliation, explanations and policy checks on top.

pub mod autoenc;
pub mod benford;
pub mod explain;
pub mod features;
pub mod iforest;
pub mod ingest;
pub mod mirror;
pub mod network;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod stats;
pub mod synth;
