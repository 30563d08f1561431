//! Behavioral forensics over browser event traces.
//!
//! Traces are preprocessed into finite-alphabet symbol streams, modeled with
//! hidden Markov models, compared with the Jeffreys divergence for offline
//! clustering, and classified online with sequential likelihood tests.

pub mod cluster;
pub mod detect;
pub mod divergence;
pub mod hmm;
pub mod ingest;
pub mod preprocess;
pub mod rng;
pub mod simulate;
pub mod theory;
pub mod trace;
