//! Core of a human-supervised, multi-turn privilege-escalation assistant.
//!
//! Everything here is synchronous and deterministic given its inputs. Network
//! backends (secure shell, chat completion over HTTP, the control API) live in
//! `privesc-net`.

pub mod approval;
pub mod config;
pub mod executor;
pub mod gateway;
pub mod guardrails;
pub mod money;
pub mod orchestrator;
pub mod prompt;
pub mod ptt;
pub mod rag;
pub mod response;
pub mod session;

pub use config::{load_config, FeatureFlags, SessionConfig};
pub use money::{TokenRate, Usd};

/// Default single-precision retrieval index.
pub type VectorIndex = rag::FlatIndex<f32>;
pub type VectorIndex64 = rag::FlatIndex<f64>;
pub type Vector = rag::Embedding<f32>;
