//! Lane-switch policies (the guard conditions of the hybrid automaton) and
//! the in-lane feedback laws they schedule.
//!
//! Three policies: switch on a fixed period; a fixed period whose tail
//! retargets a tighter AV headway so the gap torn open at exit is smaller
//! (anticipatory); and a switch window around the period inside which the AV
//! waits for safe insertion gaps and a small relative speed on the enter lane
//! (traffic-aware). The traffic-aware policy wraps a fixed or anticipatory
//! base law; it only moves the switch time.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::gain::{synthesize_gain, GainMatrix, WeightSpec};
use crate::ovm::{
    equilibrium, linearize, linearize_about, optimal_velocity, Equilibrium, LaneKind, OvmParams,
};
use crate::sim::{
    insertion_gaps, run_hybrid, HybridState, LaneState, SimOptions, Trajectory, ELAPSED_TOL,
};
use crate::{Error, Result};

/// Switch policy plus the control-law schedule inside each period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControllerSpec {
    /// Control each lane for exactly T seconds, then switch.
    FixedDuration {
        #[serde(rename = "T")]
        period: f64,
    },
    /// Fixed period; for the last (1 - p_ex) fraction of it the AV tracks a
    /// reference with its own headway squeezed to s_hat_av, so it exits
    /// tailgating and tears a smaller gap. `s_hat_av` defaults to half the
    /// uniform equilibrium headway.
    Anticipatory {
        #[serde(rename = "T")]
        period: f64,
        p_ex: f64,
        #[serde(default)]
        s_hat_av: Option<f64>,
    },
    /// Base policy with the switch time freed inside [T - dT, T + dT]: the AV
    /// leaves at the first step where the prospective enter gaps and the
    /// relative speed are acceptable, and is forced out at T + dT.
    TrafficAware {
        #[serde(rename = "T")]
        period: f64,
        #[serde(rename = "dT")]
        window: f64,
        p_en_s: f64,
        p_en_v: f64,
        base: Box<ControllerSpec>,
    },
}

impl ControllerSpec {
    /// Control period T.
    pub fn period(&self) -> f64 {
        match self {
            ControllerSpec::FixedDuration { period }
            | ControllerSpec::Anticipatory { period, .. }
            | ControllerSpec::TrafficAware { period, .. } => *period,
        }
    }

    /// Checks the policy parameters against the n-vehicle controlled lane
    /// they will drive.
    pub fn validate(&self, n: usize, p: &OvmParams) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.period() > 0.0) {
            return bad("controller period T must be > 0".into());
        }
        match self {
            ControllerSpec::FixedDuration { .. } => Ok(()),
            ControllerSpec::Anticipatory { p_ex, s_hat_av, .. } => {
                if !(0.0..=1.0).contains(p_ex) {
                    return bad(format!("p_ex must lie in [0, 1], got {p_ex}"));
                }
                if let Some(s_hat_av) = s_hat_av {
                    let s_star = equilibrium(n, p)?.headway;
                    if !(0.0..=s_star).contains(s_hat_av) {
                        return bad(format!(
                            "s_hat_av must lie in [0, {s_star}], got {s_hat_av}"
                        ));
                    }
                }
                Ok(())
            }
            ControllerSpec::TrafficAware {
                period,
                window,
                p_en_s,
                p_en_v,
                base,
            } => {
                if !(0.0..*period).contains(window) {
                    return bad(format!("dT must lie in [0, T), got {window}"));
                }
                if !(0.0..=1.0).contains(p_en_s) || !(0.0..=1.0).contains(p_en_v) {
                    return bad("p_en_s and p_en_v must lie in [0, 1]".into());
                }
                if matches!(**base, ControllerSpec::TrafficAware { .. }) {
                    return bad("traffic-aware base must be fixed-duration or anticipatory".into());
                }
                base.validate(n, p)
            }
        }
    }

    /// The in-lane law this policy runs (the traffic-aware wrapper defers to
    /// its base).
    fn law(&self) -> &ControllerSpec {
        match self {
            ControllerSpec::TrafficAware { base, .. } => base,
            other => other,
        }
    }
}

/// Non-uniform reference with the AV squeezed to `s_hat_av` and every human
/// vehicle at `s_hat_hv`, plus the feedback gain synthesized about it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnticipatoryEquilibrium {
    /// Shared human-vehicle headway (C - s_hat_av) / (n - 1).
    pub s_hat_hv: f64,
    /// AV target headway.
    pub s_hat_av: f64,
    /// Common velocity V(s_hat_hv).
    pub v_hat: f64,
    pub gain_hat: GainMatrix,
}

impl AnticipatoryEquilibrium {
    /// Error of a lane against this reference: human slots target s_hat_hv,
    /// the AV slot targets s_hat_av, all velocities target v_hat.
    pub fn error_state(&self, lane: &LaneState, ring: f64) -> DVector<f64> {
        let s = lane.headways(ring);
        let mut x = DVector::zeros(2 * lane.len());
        for i in 0..lane.len() {
            let s_ref = if lane.av_slot == Some(i) {
                self.s_hat_av
            } else {
                self.s_hat_hv
            };
            x[2 * i] = s[i] - s_ref;
            x[2 * i + 1] = lane.velocities[i] - self.v_hat;
        }
        x
    }
}

/// Builds the squeezed reference for an n-vehicle controlled lane and
/// synthesizes its gain. The human headway must stay inside the responsive
/// band of the velocity profile, otherwise the linearization about the
/// reference loses the headway coupling.
pub fn anticipatory_equilibrium(
    n: usize,
    s_hat_av: f64,
    p: &OvmParams,
    w: &WeightSpec,
) -> Result<AnticipatoryEquilibrium> {
    let s_star = equilibrium(n, p)?.headway;
    if !(0.0..=s_star).contains(&s_hat_av) {
        return Err(Error::InvalidParameter(format!(
            "s_hat_av must lie in [0, {s_star}], got {s_hat_av}"
        )));
    }
    let s_hat_hv = (p.ring_length - s_hat_av) / (n as f64 - 1.0);
    if s_hat_hv <= p.s_stop || s_hat_hv >= p.s_go {
        return Err(Error::InvalidParameter(format!(
            "anticipatory HV headway {s_hat_hv:.3} leaves the responsive band ({}, {})",
            p.s_stop, p.s_go
        )));
    }
    let v_hat = optimal_velocity(s_hat_hv, p);
    let reference = Equilibrium {
        n,
        headway: s_hat_hv,
        velocity: v_hat,
    };
    let sys = linearize_about(n, LaneKind::Controlled, reference, s_hat_hv, p)?;
    let gain_hat = synthesize_gain(&sys, w)?;
    Ok(AnticipatoryEquilibrium {
        s_hat_hv,
        s_hat_av,
        v_hat,
        gain_hat,
    })
}

/// The gains a policy needs at runtime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainSet {
    /// Feedback about the uniform n-vehicle equilibrium.
    pub base: GainMatrix,
    /// Squeezed reference and its gain; present iff the policy has an
    /// anticipatory phase.
    pub anticipatory: Option<AnticipatoryEquilibrium>,
}

impl GainSet {
    /// Synthesizes exactly the gains `spec` will ask for on an n-vehicle
    /// controlled lane.
    pub fn for_spec(
        spec: &ControllerSpec,
        n: usize,
        p: &OvmParams,
        w: &WeightSpec,
    ) -> Result<GainSet> {
        spec.validate(n, p)?;
        let sys = linearize(n, LaneKind::Controlled, p)?;
        let base = synthesize_gain(&sys, w)?;
        let anticipatory = match spec.law() {
            ControllerSpec::Anticipatory { s_hat_av, .. } => {
                let target = s_hat_av.unwrap_or(0.5 * sys.equilibrium.headway);
                Some(anticipatory_equilibrium(n, target, p, w)?)
            }
            _ => None,
        };
        Ok(GainSet { base, anticipatory })
    }
}

/// AV acceleration under `spec` given the time already spent in the current
/// mode: plain feedback about the uniform equilibrium, switching to the
/// squeezed reference for the anticipatory tail t >= p_ex T.
pub fn control_input(
    state: &HybridState,
    spec: &ControllerSpec,
    gains: &GainSet,
    elapsed: f64,
    p: &OvmParams,
) -> Result<f64> {
    let lane = state.controlled_lane();
    if !lane.av_present {
        return Err(Error::Simulation("AV missing from the controlled lane".into()));
    }
    let size_check = |g: &GainMatrix| -> Result<()> {
        if g.n != lane.len() {
            return Err(Error::Simulation(format!(
                "gain is sized for {} vehicles but the controlled lane has {}",
                g.n,
                lane.len()
            )));
        }
        Ok(())
    };
    let anticipatory_phase = match spec.law() {
        ControllerSpec::Anticipatory { period, p_ex, .. } => {
            elapsed + ELAPSED_TOL >= p_ex * period
        }
        _ => false,
    };
    if anticipatory_phase {
        let ae = gains
            .anticipatory
            .as_ref()
            .ok_or_else(|| Error::Simulation("anticipatory gain was not synthesized".into()))?;
        size_check(&ae.gain_hat)?;
        let x = ae.error_state(lane, p.ring_length);
        Ok(ae.gain_hat.feedback(x.as_slice()))
    } else {
        size_check(&gains.base)?;
        let eq = &gains.base.equilibrium;
        let x = lane.error_state(eq.headway, eq.velocity, p.ring_length);
        Ok(gains.base.feedback(x.as_slice()))
    }
}

/// Whether the AV should switch lanes now, given the time spent in the
/// current mode.
pub fn switch_decision(
    state: &HybridState,
    spec: &ControllerSpec,
    elapsed: f64,
    p: &OvmParams,
) -> bool {
    match spec {
        ControllerSpec::FixedDuration { period }
        | ControllerSpec::Anticipatory { period, .. } => elapsed + ELAPSED_TOL >= *period,
        ControllerSpec::TrafficAware {
            period,
            window,
            p_en_s,
            p_en_v,
            ..
        } => {
            if elapsed + ELAPSED_TOL < period - window {
                return false;
            }
            if elapsed + ELAPSED_TOL >= period + window {
                return true;
            }
            let exit_lane = state.controlled_lane();
            let Some(slot) = exit_lane.av_slot.filter(|_| exit_lane.av_present) else {
                return false;
            };
            let enter_lane = state.uncontrolled_lane();
            let m = enter_lane.len();
            let (a, b, _) =
                insertion_gaps(enter_lane, exit_lane.positions[slot], p.ring_length);
            let s_star_pre = p.ring_length / m as f64;
            let gaps_ok = a >= p_en_s * s_star_pre && b >= p_en_s * s_star_pre;
            let v_star_post = optimal_velocity(p.ring_length / (m + 1) as f64, p);
            let mean_v = enter_lane.velocities.iter().sum::<f64>() / m as f64;
            let speed_ok =
                (exit_lane.velocities[slot] - mean_v).abs() <= p_en_v * v_star_post;
            gaps_ok && speed_ok
        }
    }
}

/// Runs the full hybrid closed loop: `spec` decides the switches and the AV
/// input, the plant does the rest.
pub fn run_trajectory(
    initial: HybridState,
    spec: &ControllerSpec,
    gains: &GainSet,
    horizon: f64,
    opts: &SimOptions,
    p: &OvmParams,
) -> Result<Trajectory> {
    let n = initial.controlled_lane().len();
    spec.validate(n, p)?;
    if !initial.controlled_lane().av_present {
        return Err(Error::Simulation("AV missing from the controlled lane".into()));
    }
    // The reset map keeps lane sizes alternating between n and n - 1, so a
    // single size check up front covers every later step. The anticipatory
    // phase is probed too when the policy has one.
    control_input(&initial, spec, gains, 0.0, p)?;
    if matches!(spec.law(), ControllerSpec::Anticipatory { .. }) {
        control_input(&initial, spec, gains, spec.period(), p)?;
    }
    run_hybrid(
        initial,
        horizon,
        opts,
        p,
        |state, elapsed| switch_decision(state, spec, elapsed, p),
        |state, elapsed| {
            control_input(state, spec, gains, elapsed, p)
                .expect("gain sizes were validated before the run")
        },
    )
}
