//! Per-round bookkeeping between switch events.
//!
//! A round of one lane runs from the moment the automated vehicle enters it,
//! through the controlled phase, past its exit, to the moment it comes back.
//! Three consecutive jump events pin down one round, so a trajectory with
//! k jumps yields k-2 complete rounds, alternating lanes.

use serde::{Deserialize, Serialize};

use crate::analysis::envelope::{round_bound, BoundParams};
use crate::sim::{JumpDirection, JumpEvent, Mode};

/// The variances of one lane at the key instants of one round, with the
/// measured jump deltas and optional envelope values at the same points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round_index: usize,
    pub lane: Mode,
    pub t_enter: f64,
    pub t_exit: f64,
    pub t_next: f64,
    /// Lane variance just before the automated vehicle enters.
    pub var_0: f64,
    pub delta_enter: f64,
    pub delta_enter_s: f64,
    pub delta_enter_v: f64,
    /// Lane variance just before the automated vehicle exits.
    pub var_1: f64,
    pub delta_exit: f64,
    pub delta_exit_s: f64,
    pub delta_exit_v: f64,
    /// Lane variance just before the automated vehicle enters again.
    pub var_next: f64,
    pub bound_var_1: Option<f64>,
    pub bound_var_next: Option<f64>,
}

impl RoundSummary {
    pub fn controlled_duration(&self) -> f64 {
        self.t_exit - self.t_enter
    }

    pub fn uncontrolled_duration(&self) -> f64 {
        self.t_next - self.t_exit
    }
}

fn entered_lane(direction: JumpDirection) -> Mode {
    match direction {
        JumpDirection::LToR => Mode::R,
        JumpDirection::RToL => Mode::L,
    }
}

/// Assemble complete rounds from a trajectory's jump sequence. The leading
/// partial round (the phase before the first jump) has no enter event and is
/// skipped.
pub fn extract_rounds(jumps: &[JumpEvent]) -> Vec<RoundSummary> {
    let mut rounds = Vec::new();
    let mut count_l = 0usize;
    let mut count_r = 0usize;
    for window in jumps.windows(3) {
        let [enter, exit, next] = window else {
            continue;
        };
        let lane = entered_lane(enter.direction);
        let alternates = entered_lane(exit.direction) != lane
            && entered_lane(next.direction) == lane
            && enter.time <= exit.time
            && exit.time <= next.time;
        if !alternates {
            continue;
        }
        let index = match lane {
            Mode::L => &mut count_l,
            Mode::R => &mut count_r,
        };
        rounds.push(RoundSummary {
            round_index: *index,
            lane,
            t_enter: enter.time,
            t_exit: exit.time,
            t_next: next.time,
            var_0: enter.pre_enter_lane.total(),
            delta_enter: enter.post_enter_lane.total() - enter.pre_enter_lane.total(),
            delta_enter_s: enter.post_enter_lane.headway - enter.pre_enter_lane.headway,
            delta_enter_v: enter.post_enter_lane.velocity - enter.pre_enter_lane.velocity,
            var_1: exit.pre_exit_lane.total(),
            delta_exit: exit.post_exit_lane.total() - exit.pre_exit_lane.total(),
            delta_exit_s: exit.post_exit_lane.headway - exit.pre_exit_lane.headway,
            delta_exit_v: exit.post_exit_lane.velocity - exit.pre_exit_lane.velocity,
            var_next: next.pre_enter_lane.total(),
            bound_var_1: None,
            bound_var_next: None,
        });
        *index += 1;
    }
    rounds
}

/// Fill in the envelope values for each round, using fixed estimated jump
/// sizes. A lane's first round starts from its measured entry variance;
/// every later round starts from that lane's previous endpoint bound, so the
/// envelope is a running upper bound across rounds rather than a per-round
/// restart.
pub fn attach_bounds(
    rounds: &mut [RoundSummary],
    params: &BoundParams,
    jump_enter: f64,
    jump_exit: f64,
    use_state_dependent: bool,
) {
    let mut carried: [Option<f64>; 2] = [None, None];
    for round in rounds.iter_mut() {
        let slot = match round.lane {
            Mode::L => 0,
            Mode::R => 1,
        };
        let (b1, bn) = round_bound(
            params,
            carried[slot].unwrap_or(round.var_0),
            jump_enter,
            jump_exit,
            round.controlled_duration(),
            round.uncontrolled_duration(),
            use_state_dependent,
        );
        round.bound_var_1 = Some(b1);
        round.bound_var_next = Some(bn);
        carried[slot] = Some(bn);
    }
}

/// Mean and spread of the measured jump deltas, both directions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JumpStats {
    pub exit_mean: f64,
    pub exit_std: f64,
    pub exit_count: usize,
    pub enter_mean: f64,
    pub enter_std: f64,
    pub enter_count: usize,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Jump-delta statistics over events at or after `from_time`, so a transient
/// before orbit convergence can be excluded.
pub fn jump_statistics(jumps: &[JumpEvent], from_time: f64) -> JumpStats {
    let mut exits = Vec::new();
    let mut enters = Vec::new();
    for jump in jumps.iter().filter(|j| j.time >= from_time) {
        exits.push(jump.post_exit_lane.total() - jump.pre_exit_lane.total());
        enters.push(jump.post_enter_lane.total() - jump.pre_enter_lane.total());
    }
    let (exit_mean, exit_std) = mean_std(&exits);
    let (enter_mean, enter_std) = mean_std(&enters);
    JumpStats {
        exit_mean,
        exit_std,
        exit_count: exits.len(),
        enter_mean,
        enter_std,
        enter_count: enters.len(),
    }
}
