//! Auditory intention decoding at desk scale.
//!
//! The crate covers the whole offline/online loop of an auditory reactive BCI
//! in which a listener is primed with a three-digit number and then hears a
//! short sequence of spoken options, one of which matches the prime:
//!
//! * [`session`] lays out the experimental protocol as data,
//! * [`synthgen`] renders synthetic EEG with an N400-like deflection on targets,
//! * [`iostream`] persists recordings (AID1) and replays them as framed streams,
//! * [`epochs`] cuts labelled, baseline-corrected windows offline or online,
//! * [`nnet`] is a from-scratch EEGNet-style classifier with Adam,
//! * [`evalstats`] runs grouped k-fold CV and permutation tests,
//! * [`intent`] turns per-stimulus probabilities into option selections,
//! * [`pipeline`] wires the pieces into train / decode / replay workflows.

pub mod epochs;
pub mod evalstats;
pub mod intent;
pub mod iostream;
pub mod nnet;
pub mod pipeline;
pub mod seeds;
pub mod session;
pub mod synthgen;

mod error;

pub use error::{AidError, Result};
