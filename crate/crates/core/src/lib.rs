//! Multi-agent imitation learning with correlated policies.
//!
//! The crate is organised bottom-up: [`game`] defines Markov games and rollouts,
//! [`tabular`] and [`oracle`] give exact small-game computations, and the learning
//! modules build on those.

pub mod agents;
pub mod ail;
pub mod demonstrator;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod fixtures;
pub mod game;
pub mod nn;
pub mod oracle;
pub mod particle;
pub mod rng;
pub mod tabular;
pub mod verify;

pub use error::{Error, Result};
pub use game::{Choice, Episode, InteractionBatch, MarkovGame, Policy, Step};
pub use tabular::{JointIndexer, TabularGame};
