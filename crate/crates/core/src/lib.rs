//! Coarse-to-fine video temporal grounding.
//!
//! The engine decides how many tokens each frame gets, builds
//! timestamp-interleaved prompts, drives a generative backend through
//! segment retrieval and fine localisation, and scores the results.

pub mod backend;
pub mod datagen;
pub mod error;
pub mod frames;
pub mod metrics;
pub mod manifest;
pub mod orchestrator;
pub mod perturb;
pub mod promptseq;
pub mod scaling;
pub mod templates;
pub mod timeline;
pub mod vqa;

pub use error::{Error, ParseFailure, Result};
pub use timeline::{FrameGrid, Moment};
