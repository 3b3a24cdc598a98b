//! Networked group-estimation experiments with partisan personas.
//!
//! This crate simulates the three-round "estimate, observe peers, revise"
//! protocol on politically homogeneous degree-4 networks and scores the
//! resulting transcripts with a human-alignment metric suite (group error
//! reduction, conditional partisan bias, extreme-response rate).
//!
//! The pieces:
//!
//! * [`model`] — domain types plus the bundled question, persona, and
//!   induced-bias banks.
//! * [`network`] — ring-lattice / random regular graph construction and
//!   peer-average feedback.
//! * [`prompting`] — round templates and numeric answer parsing.
//! * [`agents`] — the backend contract with synthetic, replay, and
//!   chat-endpoint implementations.
//! * [`engine`] — experiment orchestration and the on-disk transcript store.
//! * [`metrics`] — the full metric suite over a transcript set.
//! * [`humandata`] — ingestion of external human transcripts and fine-tune
//!   pair export.
//!
//! Numeric kernels are generic over [`scalar::Scalar`] (f32 or f64); the
//! record pipeline itself is pinned to [`Value`].

pub mod agents;
pub mod engine;
pub mod humandata;
pub mod metrics;
pub mod model;
pub mod network;
pub mod prompting;
pub mod scalar;

/// Scalar type used by records, stores, and reports.
pub type Value = f64;

pub use model::{
    BackendConfig, Condition, EstimateRecord, ExperimentConfig, Party, Persona, PersonaDetail,
    Question, QuestionBank, Topology,
};
