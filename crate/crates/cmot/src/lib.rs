//! Desk-scale toolkit for cross-modal (RGB/NIR) single-object tracking.
//!
//! The crate provides:
//!
//! - a data model for cross-modal sequences with on-disk ingestion and
//!   dataset statistics ([`data`]),
//! - the modality-aware representation block: two modality-specific branches
//!   fused by a normalized-weight ensemble, with verified gradients
//!   ([`marmot`]),
//! - a minimal classification-style tracker with a pluggable insertion point
//!   for the block ([`tracker`]),
//! - the three-stage training procedure with per-stage freeze masks
//!   ([`training`]),
//! - synthetic cross-modal sequence generation and dual-modality conversion
//!   ([`synthdata`]),
//! - PR/NPR/SR evaluation with curves and reports ([`evalkit`]),
//! - a CLI pipeline tying it all together ([`pipeline`], `cmot` binary).

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evalkit;
pub mod marmot;
pub mod nn;
pub mod pipeline;
pub mod synthdata;
pub mod tracker;
pub mod training;

pub use error::{Error, Result};
