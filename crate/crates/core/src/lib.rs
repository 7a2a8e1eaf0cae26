//! Word-level end-to-end neural diarization.
//!
//! A transducer ASR model is extended with an auxiliary speaker network whose
//! output logits reuse the ASR blank logit, so every emitted wordpiece carries a
//! speaker label decided at the same lattice point. The crate also ships the
//! conversation simulator, the RTTM/CTM tooling, the WER/WDER metrics and the
//! overlap-based orchestration baseline used to evaluate it.

pub mod baseline;
pub mod datagen;
pub mod decode;
pub mod error;
pub mod formats;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod train;
pub mod transducer;

pub use error::{Error, Result};
