//! Individual Q-learning in polymatrix games where agents observe only part
//! of the population.
//!
//! The crate is organized bottom-up: [`game`] and [`graph`] describe the
//! interaction and observation structure, [`dynamics`] runs the learning
//! algorithm, [`analysis`] measures distance to equilibrium, [`ode`]
//! integrates the continuous-time flow, and [`experiment`] drives batches of
//! trials.

pub mod analysis;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod game;
pub mod graph;
pub mod ode;

pub use error::{Error, Result};
pub use game::{entropy, ActionProfile, GameKind, MixedStrategy, PayoffMatrix, PolymatrixGame};
pub use graph::DirectedGraph;
