//! Periodic-orbit detection and regime classification.
//!
//! The switching cycle has length 2T (one controlled phase per lane), so a
//! trajectory on an orbit repeats after 2T in vehicle-relative coordinates.
//! Lane states already keep the automated vehicle in the last slot and its
//! follower first, which is exactly the index normalization the comparison
//! needs; positions themselves drift around the ring and never repeat, so
//! the distance uses headways and velocities only.

use serde::{Deserialize, Serialize};

use crate::analysis::rounds::extract_rounds;
use crate::error::Error;
use crate::sim::{HybridState, Trajectory};
use crate::Result;

/// Default distance threshold below which the trajectory counts as being on
/// the orbit.
pub const ORBIT_THRESHOLD: f64 = 0.05;

/// Distance-to-previous-cycle trace and the convergence verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrbitReport {
    pub threshold: f64,
    /// (time, mean absolute per-coordinate gap to the state one cycle ago).
    pub distances: Vec<(f64, f64)>,
    pub converged: bool,
    /// Start of the first window of two full cycles that stays below the
    /// threshold.
    pub onset_time: Option<f64>,
}

fn stacked_gap(a: &HybridState, b: &HybridState, ring: f64) -> Option<f64> {
    if a.mode != b.mode
        || a.lane_l.len() != b.lane_l.len()
        || a.lane_r.len() != b.lane_r.len()
    {
        return None;
    }
    let mut sum = 0.0;
    let mut dim = 0usize;
    for (lane_a, lane_b) in [(&a.lane_l, &b.lane_l), (&a.lane_r, &b.lane_r)] {
        let ha = lane_a.headways(ring);
        let hb = lane_b.headways(ring);
        for (x, y) in ha.iter().zip(&hb) {
            sum += (x - y).abs();
        }
        for (x, y) in lane_a.velocities.iter().zip(&lane_b.velocities) {
            sum += (x - y).abs();
        }
        dim += 2 * lane_a.len();
    }
    Some(sum / dim as f64)
}

/// Compare each snapshot against the one a full switching cycle earlier and
/// report when the gap stays below the threshold for two cycles running.
pub fn detect_periodic_orbit(traj: &Trajectory, period: f64, ring: f64) -> Result<OrbitReport> {
    detect_periodic_orbit_with(traj, period, ring, ORBIT_THRESHOLD)
}

pub fn detect_periodic_orbit_with(
    traj: &Trajectory,
    period: f64,
    ring: f64,
    threshold: f64,
) -> Result<OrbitReport> {
    if !(period > 0.0) {
        return Err(Error::InvalidParameter(
            "orbit detection needs a positive period".into(),
        ));
    }
    if !(threshold > 0.0) {
        return Err(Error::InvalidParameter(
            "orbit threshold must be positive".into(),
        ));
    }
    let cycle = 2.0 * period;
    let snap_dt = traj.snapshot_stride as f64 * traj.dt;
    let lag_f = cycle / snap_dt;
    let lag = lag_f.round();
    if lag < 1.0 || (lag_f - lag).abs() > 1e-6 {
        return Err(Error::Analysis(format!(
            "snapshot spacing {snap_dt} s does not divide the switching cycle {cycle} s"
        )));
    }
    let lag = lag as usize;

    let samples = &traj.samples;
    let span = match (samples.first(), samples.last()) {
        (Some(first), Some(last)) => last.time - first.time,
        _ => 0.0,
    };
    if span + 1e-9 < 4.0 * cycle {
        return Err(Error::TrajectoryTooShort(format!(
            "orbit detection needs at least four cycles ({} s), trajectory spans {span} s",
            4.0 * cycle
        )));
    }

    let mut distances = Vec::new();
    for i in lag..samples.len() {
        let prev = &samples[i - lag];
        let cur = &samples[i];
        if ((cur.time - prev.time) - cycle).abs() > 1e-6 {
            continue;
        }
        if let Some(d) = stacked_gap(cur, prev, ring) {
            distances.push((cur.time, d));
        }
    }

    // Earliest time from which the distance stays below the threshold for a
    // full window of two cycles.
    let mut onset_time = None;
    'starts: for (i, &(t0, _)) in distances.iter().enumerate() {
        if t0 + 2.0 * cycle > distances.last().expect("distances is nonempty").0 + 1e-9 {
            break;
        }
        for &(t, d) in &distances[i..] {
            if t > t0 + 2.0 * cycle + 1e-9 {
                break;
            }
            if d >= threshold {
                continue 'starts;
            }
        }
        onset_time = Some(t0);
        break;
    }

    Ok(OrbitReport {
        threshold,
        distances,
        converged: onset_time.is_some(),
        onset_time,
    })
}

/// The long-run behavior a switching period settles into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeLabel {
    PhantomCar,
    InsufficientControl,
    SufficientControl,
    EventualBlowup,
    Unclassified,
}

/// Variance cutoffs for the regime labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegimeThresholds {
    /// A lane below this orbit-mean variance counts as settled.
    pub low_variance: f64,
    /// A lane ending its phase at or above this counts as destabilized.
    pub blowup_variance: f64,
    /// Periods at or below this with settled lanes read as the
    /// self-duplication regime rather than ordinary stabilization.
    pub t_phantom: f64,
}

impl Default for RegimeThresholds {
    fn default() -> RegimeThresholds {
        RegimeThresholds {
            low_variance: 5.0,
            blowup_variance: 20.0,
            t_phantom: 5.0,
        }
    }
}

impl RegimeThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.low_variance > 0.0) || !(self.blowup_variance > self.low_variance) {
            return Err(Error::InvalidParameter(
                "regime thresholds need 0 < low_variance < blowup_variance".into(),
            ));
        }
        if !(self.t_phantom >= 0.0) {
            return Err(Error::InvalidParameter(
                "t_phantom must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Classification result with the orbit-averaged lane variances it used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeReport {
    pub label: RegimeLabel,
    /// Mean variance of the controlled lane just before the exit jump.
    pub controlled_end_variance: Option<f64>,
    /// Mean variance of the uncontrolled lane just before the enter jump.
    pub uncontrolled_end_variance: Option<f64>,
    pub rounds_used: usize,
}

/// Label the regime from orbit-averaged end-of-phase variances.
///
/// `v_c` is the controlled lane's mean variance just before the AV exits and
/// `v_u` the uncontrolled lane's just before it enters, averaged over the
/// rounds after orbit onset. Destabilized `v_c` means the controlled period
/// never catches up; otherwise destabilized `v_u` means the abandoned lane
/// blows up between visits; otherwise a short period handing back a settled
/// lane is the self-duplication orbit, and anything else is ordinary
/// sufficient control. The pre-exit variance still carries whatever remains
/// of the enter jump, which within `t_phantom` of a switch is most of it
/// even on a settled orbit, so only `v_u` takes the settled test.
pub fn classify_regime(
    traj: &Trajectory,
    period: f64,
    ring: f64,
    thresholds: &RegimeThresholds,
) -> Result<RegimeReport> {
    thresholds.validate()?;
    let orbit = detect_periodic_orbit(traj, period, ring)?;
    let unclassified = RegimeReport {
        label: RegimeLabel::Unclassified,
        controlled_end_variance: None,
        uncontrolled_end_variance: None,
        rounds_used: 0,
    };
    let Some(onset) = orbit.onset_time else {
        return Ok(unclassified);
    };

    let rounds = extract_rounds(&traj.jumps);
    let used: Vec<_> = rounds
        .iter()
        .filter(|r| r.t_enter + 1e-9 >= onset)
        .collect();
    let used = if used.is_empty() {
        // Convergence so late that no complete round follows it: fall back to
        // the trailing rounds, which are the ones on or nearest the orbit.
        rounds.iter().rev().take(4).collect()
    } else {
        used
    };
    if used.is_empty() {
        return Ok(unclassified);
    }

    let count = used.len() as f64;
    let v_c = used.iter().map(|r| r.var_1).sum::<f64>() / count;
    let v_u = used.iter().map(|r| r.var_0).sum::<f64>() / count;

    let label = if v_c >= thresholds.blowup_variance {
        RegimeLabel::InsufficientControl
    } else if v_u >= thresholds.blowup_variance {
        RegimeLabel::EventualBlowup
    } else if v_u < thresholds.low_variance && period <= thresholds.t_phantom {
        RegimeLabel::PhantomCar
    } else {
        RegimeLabel::SufficientControl
    };

    Ok(RegimeReport {
        label,
        controlled_end_variance: Some(v_c),
        uncontrolled_end_variance: Some(v_u),
        rounds_used: used.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ovm::OvmParams;
    use crate::sim::{JumpDirection, JumpEvent, LaneState, Mode, VarSnapshot};

    fn base_state(p: &OvmParams) -> HybridState {
        HybridState {
            lane_l: LaneState::equilibrium_lane(20, true, p).unwrap(),
            lane_r: LaneState::equilibrium_lane(19, false, p).unwrap(),
            mode: Mode::L,
            time: 0.0,
            round_index: 0,
        }
    }

    /// Snapshots every second built by perturbing the base state; the
    /// perturbation at snapshot k is `wobble(k)` on the first velocity.
    fn synthetic_trajectory(
        p: &OvmParams,
        horizon: f64,
        jumps: Vec<JumpEvent>,
        wobble: impl Fn(usize) -> f64,
    ) -> Trajectory {
        let base = base_state(p);
        let count = horizon.round() as usize;
        let samples: Vec<HybridState> = (0..=count)
            .map(|k| {
                let mut s = base.clone();
                s.time = k as f64;
                s.lane_l.velocities[0] += wobble(k);
                s
            })
            .collect();
        let final_state = samples.last().unwrap().clone();
        Trajectory {
            dt: 0.01,
            snapshot_stride: 100,
            samples,
            jumps,
            variance: Vec::new(),
            collision_count: 0,
            first_collision: None,
            brake_count: 0,
            final_state,
        }
    }

    fn snap(total: f64) -> VarSnapshot {
        VarSnapshot {
            headway: total,
            velocity: 0.0,
        }
    }

    fn synth_jumps(period: f64, count: usize, v_c: f64, v_u: f64) -> Vec<JumpEvent> {
        (1..=count)
            .map(|k| JumpEvent {
                time: k as f64 * period,
                direction: if k % 2 == 1 {
                    JumpDirection::LToR
                } else {
                    JumpDirection::RToL
                },
                exit_a: 0.0,
                exit_b: 0.0,
                exit_c: 0.0,
                enter_a: 0.0,
                enter_b: 0.0,
                av_velocity: 0.0,
                degenerate_insertion: false,
                pre_exit_lane: snap(v_c),
                post_exit_lane: snap(v_c + 1.0),
                pre_enter_lane: snap(v_u),
                post_enter_lane: snap(v_u + 1.0),
            })
            .collect()
    }

    #[test]
    fn exactly_periodic_input_has_zero_distance() {
        let p = OvmParams::default();
        let traj = synthetic_trajectory(&p, 40.0, Vec::new(), |_| 0.0);
        let report = detect_periodic_orbit(&traj, 2.0, p.ring_length).unwrap();
        assert!(report.converged);
        assert_eq!(report.onset_time, Some(4.0));
        assert!(!report.distances.is_empty());
        assert!(report.distances.iter().all(|&(_, d)| d == 0.0));
    }

    #[test]
    fn decaying_wobble_converges_mid_trace() {
        let p = OvmParams::default();
        // Gap between snapshots k and k-4 is |w(k) - w(k-4)| / 78; make it
        // start far above the threshold and decay geometrically.
        let traj = synthetic_trajectory(&p, 60.0, Vec::new(), |k| 60.0 * 0.8_f64.powi(k as i32));
        let report = detect_periodic_orbit(&traj, 2.0, p.ring_length).unwrap();
        assert!(report.converged);
        let onset = report.onset_time.unwrap();
        assert!(onset > 4.0, "onset {onset} should be past the first window");
        let first = report.distances.first().unwrap();
        assert!(first.1 > report.threshold);
    }

    #[test]
    fn persistent_wobble_never_converges() {
        let p = OvmParams::default();
        // Period 8 in snapshots, out of phase with the lag of 4, so every
        // comparison straddles the square wave's edge.
        let traj = synthetic_trajectory(&p, 40.0, Vec::new(), |k| if k % 8 < 4 { 30.0 } else { 0.0 });
        let report = detect_periodic_orbit(&traj, 2.0, p.ring_length).unwrap();
        assert!(!report.converged);
        assert_eq!(report.onset_time, None);
    }

    #[test]
    fn short_trajectories_are_rejected() {
        let p = OvmParams::default();
        let traj = synthetic_trajectory(&p, 10.0, Vec::new(), |_| 0.0);
        let err = detect_periodic_orbit(&traj, 2.0, p.ring_length).unwrap_err();
        assert!(matches!(err, Error::TrajectoryTooShort(_)));
    }

    #[test]
    fn misaligned_snapshot_spacing_is_rejected() {
        let p = OvmParams::default();
        let traj = synthetic_trajectory(&p, 60.0, Vec::new(), |_| 0.0);
        let err = detect_periodic_orbit(&traj, 1.25, p.ring_length).unwrap_err();
        assert!(matches!(err, Error::Analysis(_)));
    }

    #[test]
    fn regime_labels_follow_the_thresholds() {
        let p = OvmParams::default();
        let th = RegimeThresholds::default();
        let cases = [
            (8.5, 25.0, 18.0, RegimeLabel::InsufficientControl),
            (120.0, 0.5, 40.0, RegimeLabel::EventualBlowup),
            // Pre-exit variance on a short period still holds most of the
            // enter jump; the settled hand-back is what marks the orbit.
            (3.0, 7.0, 2.0, RegimeLabel::PhantomCar),
            (30.0, 0.5, 15.0, RegimeLabel::SufficientControl),
            // A long period with settled lanes is ordinary stabilization,
            // not self-duplication.
            (30.0, 0.5, 2.0, RegimeLabel::SufficientControl),
            // A short period that never settles either lane is insufficient
            // control, not self-duplication.
            (3.0, 25.0, 30.0, RegimeLabel::InsufficientControl),
        ];
        for (period, v_c, v_u, expected) in cases {
            let jumps = synth_jumps(period, 9, v_c, v_u);
            let horizon = 10.0 * period;
            let traj = synthetic_trajectory(&p, horizon, jumps, |_| 0.0);
            let report = classify_regime(&traj, period, p.ring_length, &th).unwrap();
            assert_eq!(report.label, expected, "period {period}");
            assert_eq!(report.controlled_end_variance, Some(v_c));
            assert_eq!(report.uncontrolled_end_variance, Some(v_u));
            assert!(report.rounds_used > 0);
        }
    }

    #[test]
    fn no_orbit_means_no_label() {
        let p = OvmParams::default();
        let jumps = synth_jumps(2.0, 9, 1.0, 1.0);
        let traj =
            synthetic_trajectory(&p, 40.0, jumps, |k| if k % 8 < 4 { 30.0 } else { 0.0 });
        let report =
            classify_regime(&traj, 2.0, p.ring_length, &RegimeThresholds::default()).unwrap();
        assert_eq!(report.label, RegimeLabel::Unclassified);
        assert_eq!(report.rounds_used, 0);
    }
}
