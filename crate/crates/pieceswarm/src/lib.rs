//! Simulation and stability analysis for piece-exchange swarms.
//!
//! A file is split into `K` pieces. Peers arrive carrying a (possibly empty)
//! subset of pieces, exchange pieces through random pairwise contacts assisted
//! by a fixed seed, and leave once they hold everything (immediately when the
//! seed-departure rate is infinite, after an exponential lingering time
//! otherwise). The population is a continuous-time Markov chain on counts of
//! peers per piece collection.
//!
//! The crate provides:
//!
//! * [`model`] - the chain itself: states, transition rates, generator rows,
//!   and exact drift evaluation for arbitrary scalar functions of the state.
//! * [`policy`] - piece-selection rules used by uploaders (random useful,
//!   rarest first, sequential).
//! * [`coding`] - linear network coding over small finite fields, where a
//!   peer's knowledge is a subspace of `F_q^K` instead of a piece subset.
//! * [`simulate`] - an event-driven simulator over an explicit peer roster,
//!   including the infinite-contact-rate "watched" chain used to study the
//!   boundary regime, and parallel replication fan-out.
//! * [`analyze`] - exact classification of a parameter point as transient or
//!   positive recurrent, branching-process offspring moments for the early
//!   growth of a rare-piece population, and two closed-form tail bounds.
//! * [`lyapunov`] - numeric drift certificates for the stability region built
//!   from a weighted quadratic potential over collection counts.
//!
//! Simulation is deterministic given a seed. With the default `parallel`
//! feature, replications and certificate batches fan out over rayon; without
//! it everything runs sequentially with identical results.

// Rate validations negate comparisons on purpose: `!(x > 0.0)` also rejects
// NaN, which `x <= 0.0` lets through. Lookup tables keyed by bitmask or field
// exponent read clearest with explicit indices.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analyze;
pub mod coding;
pub mod error;
pub mod exec;
pub mod lyapunov;
pub mod model;
pub mod policy;
pub mod simulate;
pub mod stats;

pub use error::SwarmError;
