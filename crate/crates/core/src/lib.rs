//! Numerical laboratory for token-reduction collapse in vision transformers.
//!
//! - [`recurrence`]: the distortion recurrence, its closed form and critical
//!   reduction rate.
//! - [`diagnostics`]: ranking consistency, Frobenius distortion, feature
//!   correlation and perturbation energy.
//! - [`scoring`], [`triage`], [`reduce`]: the fused unary score, the
//!   protect/merge/evict partition and the reduction operators.
//! - [`synth`]: synthetic populations and a toy transformer that writes
//!   traces.
//! - [`trc`]: the binary trace format; [`experiment`]: the command
//!   implementations behind the CLI.

pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod recurrence;
pub mod reduce;
pub mod rng;
pub mod scoring;
pub mod stats;
pub mod synth;
pub mod tokens;
pub mod triage;
pub mod trc;

pub use error::{Error, Result};
pub use tokens::{ImportanceScores, LayerTrace, TokenPopulation, TraceLayer};
