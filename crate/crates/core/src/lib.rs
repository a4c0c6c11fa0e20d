//! Self-adaptive model-serving testbed: a managed inference system, an
//! adaptation loop over a shared knowledge store, and load generation.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod clock;
pub mod domain;
pub mod engine;
pub mod ingestion;
pub mod knowledge;
pub mod loadgen;
pub mod mape;
pub mod orchestrator;
pub mod report;
pub mod runtime;
