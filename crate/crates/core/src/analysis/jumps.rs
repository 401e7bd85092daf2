//! Closed forms for the variance change at a lane switch.
//!
//! Removing the automated vehicle from an m-vehicle lane merges its front
//! and rear gaps a and b into one; inserting it splits a gap the other way.
//! Both operations change the lane's headway and velocity variance by an
//! amount that depends only on the current variance, the two gaps, and the
//! velocity totals, never on the rest of the arrangement:
//!
//!   exit:  Δvar_s = var_s/(m-1) + 2ab/(m-1) - C²/((m-1)²·m)
//!          Δvar_v = var_v/(m-1) - (Σv_hv - (m-1)·v_av)²/((m-1)²·m)
//!   enter: Δvar_s = -var_s/(m+1) - 2ab/(m+1) + C²/((m+1)²·m)
//!          Δvar_v = -var_v/(m+1) + (Σv - m·v_av)²/((m+1)²·m)
//!
//! with m the lane size before the switch. The headway mean never appears
//! because headways on a ring always average to C/m.

use crate::error::Error;
use crate::sim::{insertion_gaps, LaneState, VarSnapshot};
use crate::Result;

/// Variance change (headway, velocity) if the automated vehicle left this
/// lane right now.
pub fn jump_delta_exit(lane: &LaneState, ring: f64) -> Result<(f64, f64)> {
    let slot = lane
        .av_slot
        .filter(|_| lane.av_present)
        .ok_or_else(|| Error::Analysis("exit delta needs a lane with the automated vehicle".into()))?;
    let m = lane.len();
    if m < 2 {
        return Err(Error::Analysis(
            "exit delta needs at least two vehicles".into(),
        ));
    }
    let mf = m as f64;
    let headways = lane.headways(ring);
    let a = headways[slot];
    let b = headways[(slot + 1) % m];
    let var = VarSnapshot::of(lane, ring);

    let delta_s = var.headway / (mf - 1.0) + 2.0 * a * b / (mf - 1.0)
        - ring * ring / ((mf - 1.0) * (mf - 1.0) * mf);

    let v_av = lane.velocities[slot];
    let sum_hv: f64 = lane.velocities.iter().sum::<f64>() - v_av;
    let spread = sum_hv - (mf - 1.0) * v_av;
    let delta_v = var.velocity / (mf - 1.0) - spread * spread / ((mf - 1.0) * (mf - 1.0) * mf);

    Ok((delta_s, delta_v))
}

/// Variance change (headway, velocity) if the automated vehicle entered this
/// lane at the given position and velocity.
pub fn jump_delta_enter(
    lane: &LaneState,
    av_position: f64,
    av_velocity: f64,
    ring: f64,
) -> Result<(f64, f64)> {
    if lane.av_present {
        return Err(Error::Analysis(
            "enter delta needs a lane without the automated vehicle".into(),
        ));
    }
    let m = lane.len();
    if m < 1 {
        return Err(Error::Analysis("enter delta needs a nonempty lane".into()));
    }
    let mf = m as f64;
    let (a, b, _) = insertion_gaps(lane, av_position, ring);
    let var = VarSnapshot::of(lane, ring);

    let delta_s = -var.headway / (mf + 1.0) - 2.0 * a * b / (mf + 1.0)
        + ring * ring / ((mf + 1.0) * (mf + 1.0) * mf);

    let sum_v: f64 = lane.velocities.iter().sum();
    let spread = sum_v - mf * av_velocity;
    let delta_v = -var.velocity / (mf + 1.0) + spread * spread / ((mf + 1.0) * (mf + 1.0) * mf);

    Ok((delta_s, delta_v))
}
