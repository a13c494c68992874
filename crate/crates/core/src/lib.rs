//! Core engine for mixture-of-personas prompting.
//!
//! A population of responses is modelled as a two-level mixture of frozen
//! language-model agents. Each agent is prompted with a persona description
//! and an in-context exemplar; a contextual persona gate and a per-persona
//! exemplar gate decide which agent answers. Only the gates (three bilinear
//! projections and per-persona temperatures) are learned, by maximum
//! likelihood over an anonymous record set, using nothing but the model's
//! per-token logits.
//!
//! The crate is `no_std` (with `alloc`). File formats, caching, remote
//! clients and the command line live in the `mop` companion crate.

#![no_std]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod cluster;
pub mod corpus;
pub mod embed;
pub mod error;
pub mod gating;
pub mod lm;
pub mod math;
pub mod metrics;
pub mod optim;
pub mod persona;
pub mod prompt;
pub mod rng;
pub mod simulate;
pub mod train;

pub use error::{Error, Result};
