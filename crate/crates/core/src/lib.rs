//! Simulation and analysis toolkit for a two-lane ring road in which a single
//! autonomous vehicle (AV) alternates between lanes, controlling whichever lane
//! it currently occupies while the other lane runs free.
//!
//! The crate is organized bottom-up:
//!
//! - [`ovm`]: the optimal velocity car-following model, its equilibria, and the
//!   linearized lane dynamics (controlled and uncontrolled ring systems).
//! - [`linalg`]: dense Lyapunov/Schur helpers used by gain synthesis.
//! - [`gain`]: full-state-feedback synthesis for the AV via the Riccati
//!   equation, with Lyapunov certificates and decay/growth rate constants.
//! - [`sim`]: the hybrid automaton itself: per-lane continuous flow, emergency
//!   braking, the lane-switch reset map, initial states, and the trajectory
//!   runner.
//! - [`control`]: lane-switch policies (fixed-duration, anticipatory,
//!   traffic-aware) and the AV's in-lane control input.
//! - [`analysis`]: the per-lane variance metric, exact closed forms for the
//!   variance jumps at lane switches, exponential variance envelopes with
//!   fitting, periodic-orbit detection, and regime classification.

pub mod analysis;
pub mod control;
pub mod error;
pub mod gain;
pub mod linalg;
pub mod ovm;
pub mod sim;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
