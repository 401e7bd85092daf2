//! The variance metric: per-lane headway and velocity variance, the
//! two-lane sum, and its relation to the error-state norm.
//!
//! Headways on a well-formed ring sum to the circumference, so the headway
//! mean is pinned at C/m and the headway variance equals the mean square
//! headway error exactly. That makes the variance-to-norm ratio at most 1/m,
//! with equality when all the error sits in the headways.

use serde::{Deserialize, Serialize};

use crate::ovm::Equilibrium;
use crate::sim::{HybridState, LaneState, LaneTrajectory, Mode, VarSnapshot};

/// One lane's variance at one instant, in output-row form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceSample {
    pub time: f64,
    pub lane: Mode,
    pub var_s: f64,
    pub var_v: f64,
    pub var_total: f64,
    pub controlled: bool,
}

impl VarianceSample {
    pub fn from_lane(
        time: f64,
        lane_id: Mode,
        lane: &LaneState,
        controlled: bool,
        ring: f64,
    ) -> VarianceSample {
        let v = VarSnapshot::of(lane, ring);
        VarianceSample {
            time,
            lane: lane_id,
            var_s: v.headway,
            var_v: v.velocity,
            var_total: v.total(),
            controlled,
        }
    }
}

/// Population variance of headways and of velocities, all vehicles included.
pub fn lane_variance(lane: &LaneState, ring: f64) -> VarSnapshot {
    VarSnapshot::of(lane, ring)
}

/// Sum of both lanes' total variances.
pub fn system_variance(state: &HybridState, ring: f64) -> f64 {
    VarSnapshot::of(&state.lane_l, ring).total() + VarSnapshot::of(&state.lane_r, ring).total()
}

/// var / ||z - z*||² against a uniform reference; absent at the reference
/// itself. States within float residue of the reference (a non-representable
/// equilibrium spacing leaves coordinates a few ulps off) count as being at
/// it, since the ratio there is noise over noise.
pub fn variance_norm_ratio(lane: &LaneState, eq: &Equilibrium, ring: f64) -> Option<f64> {
    let x = lane.error_state(eq.headway, eq.velocity, ring);
    let norm_sq = x.norm_squared();
    let residue = x.len() as f64 * (f64::EPSILON * ring).powi(2) * 4.0;
    if norm_sq <= residue {
        return None;
    }
    Some(lane_variance(lane, ring).total() / norm_sq)
}

/// The velocity-split condition under which the variance-to-norm lower bound
/// holds: either every vehicle is exactly at the reference velocity, or the
/// reference separates the velocities (someone below, someone at-or-above).
pub fn assumption1_check(lane: &LaneState, eq: &Equilibrium) -> bool {
    let vs = &lane.velocities;
    vs.iter().all(|v| *v == eq.velocity)
        || (vs.iter().any(|v| *v < eq.velocity) && vs.iter().any(|v| *v >= eq.velocity))
}

/// A single-lane variance trace, the input to envelope fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceTrace {
    /// (time, total variance) samples, strictly increasing in time.
    pub points: Vec<(f64, f64)>,
}

impl VarianceTrace {
    pub fn from_lane_trajectory(traj: &LaneTrajectory) -> VarianceTrace {
        VarianceTrace {
            points: traj
                .variance
                .iter()
                .map(|s| (s.time, s.variance.total()))
                .collect(),
        }
    }

    /// Sample with the smallest variance.
    pub fn min_point(&self) -> Option<(f64, f64)> {
        self.points
            .iter()
            .copied()
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ovm::{equilibrium, OvmParams};
    use crate::sim::remove_av;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params() -> OvmParams {
        OvmParams::default()
    }

    #[test]
    fn uniform_lane_has_zero_variance() {
        let p = params();
        let lane = LaneState::equilibrium_lane(20, true, &p).unwrap();
        let v = lane_variance(&lane, p.ring_length);
        assert_abs_diff_eq!(v.headway, 0.0, epsilon = 1e-18);
        assert_abs_diff_eq!(v.velocity, 0.0, epsilon = 1e-18);
    }

    #[test]
    fn two_vehicle_hand_example() {
        // Ring of 40 m, positions 10 and 0: headways {30, 10}, velocities
        // equal, so var_s = 100 and var_v = 0.
        let p = OvmParams {
            ring_length: 40.0,
            ..params()
        };
        let lane = LaneState {
            positions: vec![10.0, 0.0],
            velocities: vec![5.0, 5.0],
            av_present: false,
            av_slot: None,
        };
        let v = lane_variance(&lane, p.ring_length);
        assert_relative_eq!(v.headway, 100.0, epsilon = 1e-12);
        assert_eq!(v.velocity, 0.0);
        assert_relative_eq!(v.total(), 100.0, epsilon = 1e-12);
    }

    #[test]
    fn variance_ignores_a_common_velocity_shift() {
        let p = params();
        let mut lane = LaneState::equilibrium_lane(19, false, &p).unwrap();
        for (i, v) in lane.velocities.iter_mut().enumerate() {
            *v += (i as f64 * 1.3).sin();
        }
        let before = lane_variance(&lane, p.ring_length);
        for v in lane.velocities.iter_mut() {
            *v += 4.25;
        }
        let after = lane_variance(&lane, p.ring_length);
        assert_relative_eq!(before.velocity, after.velocity, epsilon = 1e-12);
        assert_eq!(before.headway, after.headway);
    }

    #[test]
    fn system_variance_is_the_two_lane_sum_and_jumps_by_the_exit_delta() {
        let p = params();
        let state = HybridState {
            lane_l: LaneState::equilibrium_lane(20, true, &p).unwrap(),
            lane_r: LaneState::equilibrium_lane(19, false, &p).unwrap(),
            mode: Mode::L,
            time: 0.0,
            round_index: 0,
        };
        assert_abs_diff_eq!(system_variance(&state, p.ring_length), 0.0, epsilon = 1e-18);

        // The AV leaving the equilibrium lane adds exactly the closed-form
        // exit delta to the system variance.
        let (after, _, _) = remove_av(&state.lane_l, &p).unwrap();
        let grown = HybridState {
            lane_l: after,
            ..state
        };
        assert_relative_eq!(
            system_variance(&grown, p.ring_length),
            7200.0 / 361.0,
            epsilon = 1e-9
        );
    }

    #[test]
    fn ratio_is_exactly_one_over_m_for_pure_headway_error() {
        let p = params();
        let eq = equilibrium(20, &p).unwrap();
        let mut lane = LaneState::equilibrium_lane(20, true, &p).unwrap();
        // Shift positions, keeping order: headway errors appear, velocities
        // stay at the reference, and the headway errors sum to zero.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for pos in lane.positions.iter_mut() {
            *pos = (*pos + rng.gen_range(-3.0..3.0)).rem_euclid(p.ring_length);
        }
        let ratio = variance_norm_ratio(&lane, &eq, p.ring_length).unwrap();
        assert_relative_eq!(ratio, 1.0 / 20.0, epsilon = 1e-12);
    }

    #[test]
    fn ratio_is_absent_at_the_reference() {
        let p = params();
        let eq = equilibrium(20, &p).unwrap();
        let lane = LaneState::equilibrium_lane(20, true, &p).unwrap();
        assert!(variance_norm_ratio(&lane, &eq, p.ring_length).is_none());

        // 400/19 is not representable, so this equilibrium lane carries ulp
        // residue; it must still count as being at the reference.
        let eq19 = equilibrium(19, &p).unwrap();
        let lane19 = LaneState::equilibrium_lane(19, false, &p).unwrap();
        assert!(variance_norm_ratio(&lane19, &eq19, p.ring_length).is_none());
    }

    #[test]
    fn ratio_respects_the_upper_bound_on_split_velocity_states() {
        let p = params();
        let eq = equilibrium(19, &p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut checked = 0;
        for _ in 0..500 {
            let mut lane = LaneState::equilibrium_lane(19, false, &p).unwrap();
            for pos in lane.positions.iter_mut() {
                *pos = (*pos + rng.gen_range(-5.0..5.0)).rem_euclid(p.ring_length);
            }
            for v in lane.velocities.iter_mut() {
                *v += rng.gen_range(-6.0..6.0);
            }
            if !assumption1_check(&lane, &eq) {
                continue;
            }
            checked += 1;
            let ratio = variance_norm_ratio(&lane, &eq, p.ring_length).unwrap();
            assert!(ratio > 0.0);
            assert!(ratio <= 1.0 / 19.0 + 1e-9, "ratio {ratio}");
        }
        assert!(checked > 100, "only {checked} states passed the split check");
    }

    #[test]
    fn assumption1_examples() {
        let p = params();
        let eq = equilibrium(20, &p).unwrap();
        let lane = LaneState::equilibrium_lane(20, true, &p).unwrap();
        assert!(assumption1_check(&lane, &eq));

        let mut shifted = lane.clone();
        for v in shifted.velocities.iter_mut() {
            *v += 1.0;
        }
        assert!(!assumption1_check(&shifted, &eq));

        let mut mixed = lane.clone();
        mixed.velocities[0] -= 2.0;
        mixed.velocities[1] += 2.0;
        assert!(assumption1_check(&mixed, &eq));
    }

    #[test]
    fn trace_minimum_is_found() {
        let trace = VarianceTrace {
            points: vec![(0.0, 5.0), (1.0, 2.0), (2.0, 3.0)],
        };
        assert_eq!(trace.min_point(), Some((1.0, 2.0)));
    }
}
