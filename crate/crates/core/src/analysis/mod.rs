//! Variance-based stability analysis of the two-lane hybrid system.
//!
//! The pieces, in the order a typical experiment uses them: the per-lane
//! variance metric and its relation to the error-state norm ([`variance`]),
//! exact closed forms for how the variance jumps when the AV switches lanes
//! ([`jumps`]), exponential envelopes for the continuous phases with fitting
//! and the per-round composed bound ([`envelope`]), decomposition of a
//! trajectory into rounds with jump statistics ([`rounds`]), and periodic
//! orbit detection plus regime classification ([`orbit`]).

pub mod envelope;
pub mod jumps;
pub mod orbit;
pub mod rounds;
pub mod variance;

pub use envelope::{
    fit_envelopes, fit_envelopes_with, round_bound, state_dependent_tube, BoundParams, FitOptions,
};
pub use jumps::{jump_delta_enter, jump_delta_exit};
pub use orbit::{
    classify_regime, detect_periodic_orbit, OrbitReport, RegimeLabel, RegimeReport,
    RegimeThresholds, ORBIT_THRESHOLD,
};
pub use rounds::{attach_bounds, extract_rounds, jump_statistics, JumpStats, RoundSummary};
pub use variance::{
    assumption1_check, lane_variance, system_variance, variance_norm_ratio, VarianceSample,
    VarianceTrace,
};
