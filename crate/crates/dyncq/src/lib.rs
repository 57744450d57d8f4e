//! Incremental view maintenance for conjunctive queries with free access
//! patterns: the free variables of a query are split into input variables
//! (bound at request time) and output variables (enumerated on demand).
//!
//! The crate fractures and classifies queries, plans access-top variable
//! orders with exact width computation, materialises view trees, maintains
//! them under single-tuple updates, and enumerates output tuples with
//! constant delay for any input binding. Two extra evaluation modes are
//! provided: an epsilon-parameterised heavy/light trade-off for queries with
//! hierarchical fractures, and a probabilistic mode where payloads are
//! signed probabilities instead of integer multiplicities.

pub mod adaptive;
pub mod cli;
pub mod engine;
pub mod enumerate;
pub mod error;
pub mod naive;
pub mod payload;
pub mod planner;
pub mod prob;
pub mod qmodel;
pub mod store;

pub use error::Error;
pub use payload::Payload;

/// Exact rational used for widths, thresholds, and probabilities.
pub type Rat = num_rational::BigRational;

/// Integer multiplicity payload of the relational engine.
pub type Multiplicity = i64;

/// Engine over counting (multiplicity) payloads.
pub type CountEngine = engine::Engine<Multiplicity>;

/// Engine over probabilistic payloads (certain mass + signed probability).
pub type ProbEngine = engine::Engine<prob::ProbPayload>;

/// Relation storing integer multiplicities.
pub type CountRelation = store::Relation<Multiplicity>;

#[cfg(test)]
pub(crate) fn rat(n: i64, d: i64) -> Rat {
    Rat::new(num_bigint::BigInt::from(n), num_bigint::BigInt::from(d))
}
