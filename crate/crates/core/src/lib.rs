//! Voice activity detection by fusing hand-crafted MFCC features with frame
//! features from frozen pre-trained speech encoders.
//!
//! The crate covers the whole pipeline: MFCC extraction ([`dsp`]), a small
//! reverse-mode tensor library ([`tensor`]), the fusion network
//! ([`model`]), feature/RTTM ingestion and a synthetic two-stream benchmark
//! ([`data`]), AUC-driven training ([`trainer`]) and detection-error scoring
//! ([`eval`]).

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub mod data;
pub mod dsp;
pub mod eval;
pub mod exec;
pub mod model;
pub mod trainer;
