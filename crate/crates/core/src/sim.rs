//! Two-lane hybrid plant: continuous car-following flow per mode and the
//! discrete lane-switch reset map.
//!
//! Indexing follows one convention everywhere: vehicle i follows vehicle i-1,
//! vehicle 0 follows the last vehicle, and positions decrease with index
//! around the ring (mod C). When the AV is present it occupies the last slot,
//! so the vehicle at index 0 is the AV's follower. The reset map re-rotates
//! the enter lane to keep that layout, which also makes stored state vectors
//! directly comparable across switches when looking for periodic orbits.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gain::GainMatrix;
use crate::ovm::{equilibrium, optimal_velocity_slope, ovm_acceleration, OvmParams};
use crate::{Error, Result};

/// Forward-Euler step size matching the reference experiments.
pub const DEFAULT_DT: f64 = 0.01;
/// Emergency braking deceleration a_min.
pub const BRAKE_DECEL: f64 = -5.0;
/// Emergency braking standstill margin s_d.
pub const BRAKE_MARGIN: f64 = 0.5;
/// Tolerance when comparing elapsed mode time against switch thresholds;
/// absorbs float accumulation so switches land on exact step multiples.
pub const ELAPSED_TOL: f64 = 1e-9;

const PREFILTER_HORIZON: f64 = 0.1;
const SAMPLING_RETRY_LIMIT: usize = 256;

/// Which lane currently hosts the AV.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    L,
    R,
}

impl Mode {
    pub fn other(self) -> Mode {
        match self {
            Mode::L => Mode::R,
            Mode::R => Mode::L,
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::L => write!(f, "L"),
            Mode::R => write!(f, "R"),
        }
    }
}

/// One ring road of point vehicles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneState {
    /// Positions reduced mod C, decreasing with index around the ring.
    pub positions: Vec<f64>,
    pub velocities: Vec<f64>,
    pub av_present: bool,
    /// Slot of the AV when present; the reset map keeps it at the last index.
    pub av_slot: Option<usize>,
}

impl LaneState {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn leader_of(&self, i: usize) -> usize {
        if i == 0 {
            self.len() - 1
        } else {
            i - 1
        }
    }

    /// Headways s_i = mod(p_{i-1} - p_i, C); they sum to C on a well-formed
    /// ring.
    pub fn headways(&self, ring: f64) -> Vec<f64> {
        (0..self.len())
            .map(|i| (self.positions[self.leader_of(i)] - self.positions[i]).rem_euclid(ring))
            .collect()
    }

    /// Population variance of the headways.
    pub fn headway_variance(&self, ring: f64) -> f64 {
        population_variance(&self.headways(ring))
    }

    /// Population variance of the velocities.
    pub fn velocity_variance(&self) -> f64 {
        population_variance(&self.velocities)
    }

    /// All vehicles at the m-vehicle equilibrium, vehicle 0 at position 0.
    pub fn equilibrium_lane(m: usize, av_present: bool, p: &OvmParams) -> Result<LaneState> {
        let eq = equilibrium(m, p)?;
        let positions = (0..m)
            .map(|i| (p.ring_length - i as f64 * eq.headway).rem_euclid(p.ring_length))
            .collect();
        Ok(LaneState {
            positions,
            velocities: vec![eq.velocity; m],
            av_present,
            av_slot: av_present.then(|| m - 1),
        })
    }

    /// Error state [s~_1, v~_1, ...] against a uniform (headway, velocity)
    /// reference.
    pub fn error_state(&self, s_ref: f64, v_ref: f64, ring: f64) -> DVector<f64> {
        let s = self.headways(ring);
        let mut x = DVector::zeros(2 * self.len());
        for i in 0..self.len() {
            x[2 * i] = s[i] - s_ref;
            x[2 * i + 1] = self.velocities[i] - v_ref;
        }
        x
    }
}

fn population_variance(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let m = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / m;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / m
}

/// Full two-lane configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridState {
    pub lane_l: LaneState,
    pub lane_r: LaneState,
    pub mode: Mode,
    pub time: f64,
    /// Completed returns of the AV to lane L.
    pub round_index: usize,
}

impl HybridState {
    pub fn lane(&self, mode: Mode) -> &LaneState {
        match mode {
            Mode::L => &self.lane_l,
            Mode::R => &self.lane_r,
        }
    }

    pub fn lane_mut(&mut self, mode: Mode) -> &mut LaneState {
        match mode {
            Mode::L => &mut self.lane_l,
            Mode::R => &mut self.lane_r,
        }
    }

    pub fn controlled_lane(&self) -> &LaneState {
        self.lane(self.mode)
    }

    pub fn uncontrolled_lane(&self) -> &LaneState {
        self.lane(self.mode.other())
    }
}

/// Plant model used for the continuous flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DynamicsMode {
    /// Clipped optimal-velocity accelerations for HVs.
    Nonlinear,
    /// Linear error dynamics about each lane's own equilibrium.
    Linearized,
}

/// Stepper configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimOptions {
    pub dt: f64,
    pub dynamics: DynamicsMode,
    pub emergency_braking: bool,
    /// Steps between stored state snapshots.
    pub snapshot_stride: usize,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            dt: DEFAULT_DT,
            dynamics: DynamicsMode::Nonlinear,
            emergency_braking: true,
            snapshot_stride: 100,
        }
    }
}

/// Outcome flags of one step.
#[derive(Debug, Clone, Default)]
pub struct StepReport {
    /// Vehicles whose headway closed to zero or below this step, per lane.
    pub collisions_l: Vec<usize>,
    pub collisions_r: Vec<usize>,
    /// Emergency-brake activations this step, per lane.
    pub brakes_l: usize,
    pub brakes_r: usize,
}

impl StepReport {
    pub fn collided(&self) -> bool {
        !self.collisions_l.is_empty() || !self.collisions_r.is_empty()
    }
}

/// Headway and velocity variance of one lane at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarSnapshot {
    pub headway: f64,
    pub velocity: f64,
}

impl VarSnapshot {
    pub fn of(lane: &LaneState, ring: f64) -> VarSnapshot {
        VarSnapshot {
            headway: lane.headway_variance(ring),
            velocity: lane.velocity_variance(),
        }
    }

    pub fn total(&self) -> f64 {
        self.headway + self.velocity
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JumpDirection {
    #[serde(rename = "L->R")]
    LToR,
    #[serde(rename = "R->L")]
    RToL,
}

impl std::fmt::Display for JumpDirection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            JumpDirection::LToR => write!(f, "L->R"),
            JumpDirection::RToL => write!(f, "R->L"),
        }
    }
}

/// Record of one lane switch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpEvent {
    pub time: f64,
    pub direction: JumpDirection,
    /// AV headway on the exit lane just before leaving.
    pub exit_a: f64,
    /// Headway of the AV's follower on the exit lane just before leaving.
    pub exit_b: f64,
    /// Merged gap left behind; exactly exit_a + exit_b.
    pub exit_c: f64,
    /// AV headway on the enter lane right after insertion.
    pub enter_a: f64,
    /// Headway of the AV's new follower right after insertion.
    pub enter_b: f64,
    pub av_velocity: f64,
    /// True when the AV landed exactly on an enter-lane vehicle.
    pub degenerate_insertion: bool,
    pub pre_exit_lane: VarSnapshot,
    pub post_exit_lane: VarSnapshot,
    pub pre_enter_lane: VarSnapshot,
    pub post_enter_lane: VarSnapshot,
}

/// Accelerations for every vehicle on a lane at its current state. The AV,
/// when present, takes the supplied input; in the prefilter it coasts at 0.
fn lane_accelerations(
    lane: &LaneState,
    av_input: f64,
    dynamics: DynamicsMode,
    p: &OvmParams,
) -> Result<Vec<f64>> {
    let m = lane.len();
    let headways = lane.headways(p.ring_length);
    let mut acc = vec![0.0; m];
    match dynamics {
        DynamicsMode::Nonlinear => {
            for i in 0..m {
                let lead = lane.leader_of(i);
                if lane.av_present && lane.av_slot == Some(i) {
                    acc[i] = av_input;
                } else {
                    let s_dot = lane.velocities[lead] - lane.velocities[i];
                    acc[i] = ovm_acceleration(headways[i], s_dot, lane.velocities[i], p);
                }
            }
        }
        DynamicsMode::Linearized => {
            let eq = equilibrium(m, p)?;
            let a1 = p.alpha * optimal_velocity_slope(eq.headway, p);
            let a2 = p.alpha + p.beta;
            let a3 = p.beta;
            for i in 0..m {
                let lead = lane.leader_of(i);
                if lane.av_present && lane.av_slot == Some(i) {
                    acc[i] = av_input;
                } else {
                    acc[i] = a1 * (headways[i] - eq.headway)
                        - a2 * (lane.velocities[i] - eq.velocity)
                        + a3 * (lane.velocities[lead] - eq.velocity);
                }
            }
        }
    }
    Ok(acc)
}

/// Emergency-brake override: a vehicle closing on its leader hard enough that
/// avoiding contact needs at least |a_min| of deceleration gets exactly a_min.
/// Returns the adjusted accelerations and which vehicles fired.
pub fn apply_emergency_brake(
    lane: &LaneState,
    accelerations: &[f64],
    p: &OvmParams,
) -> (Vec<f64>, Vec<bool>) {
    let m = lane.len();
    let headways = lane.headways(p.ring_length);
    let mut acc = accelerations.to_vec();
    let mut fired = vec![false; m];
    for i in 0..m {
        let lead = lane.leader_of(i);
        let v = lane.velocities[i];
        let v_lead = lane.velocities[lead];
        if v <= v_lead {
            continue;
        }
        // At or inside the standstill margin any closing speed triggers; the
        // quotient is the constant deceleration needed to stop the approach.
        let triggers = headways[i] <= BRAKE_MARGIN
            || (v * v - v_lead * v_lead) / (2.0 * (headways[i] - BRAKE_MARGIN))
                >= BRAKE_DECEL.abs();
        if triggers {
            acc[i] = BRAKE_DECEL;
            fired[i] = true;
        }
    }
    (acc, fired)
}

/// One forward-Euler step of a single lane: velocities and positions advance
/// simultaneously from current-state derivatives. Returns the new lane, the
/// vehicles that collided during the step, and the brake-activation count.
pub fn step_lane(
    lane: &LaneState,
    av_input: f64,
    opts: &SimOptions,
    p: &OvmParams,
) -> Result<(LaneState, Vec<usize>, usize)> {
    let mut acc = lane_accelerations(lane, av_input, opts.dynamics, p)?;
    let mut brakes = 0;
    if opts.emergency_braking {
        let (overridden, fired) = apply_emergency_brake(lane, &acc, p);
        acc = overridden;
        brakes = fired.iter().filter(|f| **f).count();
    }
    let m = lane.len();
    let headways = lane.headways(p.ring_length);
    let mut collisions = Vec::new();
    let mut next = lane.clone();
    for i in 0..m {
        let lead = lane.leader_of(i);
        // Collision check on the un-wrapped gap increment: the gap this step
        // shrinks by dt times the closing speed.
        let gap_after = headways[i] + opts.dt * (lane.velocities[lead] - lane.velocities[i]);
        if m > 1 && gap_after <= 0.0 {
            collisions.push(i);
        }
        next.positions[i] = (lane.positions[i] + opts.dt * lane.velocities[i])
            .rem_euclid(p.ring_length);
        next.velocities[i] = lane.velocities[i] + opts.dt * acc[i];
    }
    Ok((next, collisions, brakes))
}

/// One forward-Euler step of both lanes; the AV receives `av_input`, every HV
/// follows the car-following model.
pub fn step_hybrid(
    state: &HybridState,
    av_input: f64,
    opts: &SimOptions,
    p: &OvmParams,
) -> Result<(HybridState, StepReport)> {
    let (l_input, r_input) = match state.mode {
        Mode::L => (av_input, 0.0),
        Mode::R => (0.0, av_input),
    };
    let (lane_l, collisions_l, brakes_l) = step_lane(&state.lane_l, l_input, opts, p)?;
    let (lane_r, collisions_r, brakes_r) = step_lane(&state.lane_r, r_input, opts, p)?;
    let next = HybridState {
        lane_l,
        lane_r,
        mode: state.mode,
        time: state.time + opts.dt,
        round_index: state.round_index,
    };
    Ok((
        next,
        StepReport {
            collisions_l,
            collisions_r,
            brakes_l,
            brakes_r,
        },
    ))
}

/// One step with the AV under plain state feedback `u = -K x` against the
/// gain's own equilibrium.
pub fn step_continuous(
    state: &HybridState,
    gain: &GainMatrix,
    opts: &SimOptions,
    p: &OvmParams,
) -> Result<(HybridState, StepReport)> {
    let lane = state.controlled_lane();
    if lane.len() != gain.n {
        return Err(Error::Simulation(format!(
            "gain is sized for {} vehicles but the controlled lane has {}",
            gain.n,
            lane.len()
        )));
    }
    let x = lane.error_state(gain.equilibrium.headway, gain.equilibrium.velocity, p.ring_length);
    let u = gain.feedback(x.as_slice());
    step_hybrid(state, u, opts, p)
}

/// Removes the AV from a lane. Its neighbors' gaps merge on their own once
/// the position vanishes; returns (lane, a, b) with a the AV's headway and b
/// its follower's.
pub fn remove_av(lane: &LaneState, p: &OvmParams) -> Result<(LaneState, f64, f64)> {
    let slot = match (lane.av_present, lane.av_slot) {
        (true, Some(slot)) => slot,
        _ => return Err(Error::Simulation("no AV on the exit lane".into())),
    };
    let m = lane.len();
    if m < 2 {
        return Err(Error::Simulation("exit lane has no remaining vehicles".into()));
    }
    let headways = lane.headways(p.ring_length);
    let a = headways[slot];
    let follower = (slot + 1) % m;
    let b = headways[follower];
    let mut next = lane.clone();
    next.positions.remove(slot);
    next.velocities.remove(slot);
    next.av_present = false;
    next.av_slot = None;
    Ok((next, a, b))
}

/// Gaps the AV would see if dropped onto this lane at `position`: distance
/// `a` to the nearest vehicle ahead, distance `b` back to that vehicle's
/// follower, and the leader's index.
pub fn insertion_gaps(lane: &LaneState, position: f64, ring: f64) -> (f64, f64, usize) {
    let m = lane.len();
    let pos = position.rem_euclid(ring);
    let (leader, a) = (0..m)
        .map(|i| (i, (lane.positions[i] - pos).rem_euclid(ring)))
        .min_by(|x, y| x.1.total_cmp(&y.1))
        .expect("lane is non-empty");
    let follower = (leader + 1) % m;
    let b = (pos - lane.positions[follower]).rem_euclid(ring);
    (a, b, leader)
}

/// Inserts the AV at the given position and velocity, between the nearest
/// vehicle ahead (its new leader) and that vehicle's follower. The lane is
/// rotated so the new follower sits at index 0 and the AV at the last slot.
/// Returns (lane, a, b, degenerate) with a the AV's new headway and b its
/// follower's.
pub fn insert_av(
    lane: &LaneState,
    position: f64,
    velocity: f64,
    p: &OvmParams,
) -> Result<(LaneState, f64, f64, bool)> {
    if lane.av_present {
        return Err(Error::Simulation("enter lane already has an AV".into()));
    }
    let m = lane.len();
    if m == 0 {
        return Err(Error::Simulation("enter lane is empty".into()));
    }
    let pos = position.rem_euclid(p.ring_length);
    let (a, b, leader) = insertion_gaps(lane, pos, p.ring_length);
    let degenerate = a == 0.0;
    let follower = (leader + 1) % m;
    let mut positions = Vec::with_capacity(m + 1);
    let mut velocities = Vec::with_capacity(m + 1);
    for k in 0..m {
        let idx = (follower + k) % m;
        positions.push(lane.positions[idx]);
        velocities.push(lane.velocities[idx]);
    }
    positions.push(pos);
    velocities.push(velocity);
    Ok((
        LaneState {
            positions,
            velocities,
            av_present: true,
            av_slot: Some(m),
        },
        a,
        b,
        degenerate,
    ))
}

/// The discrete jump: the AV leaves its current lane and enters the other at
/// the same position and velocity. Time is unchanged; the round index
/// advances whenever the AV returns to lane L.
pub fn lane_switch(state: &HybridState, p: &OvmParams) -> Result<(HybridState, JumpEvent)> {
    let ring = p.ring_length;
    let exit_mode = state.mode;
    let enter_mode = exit_mode.other();
    let exit_lane = state.lane(exit_mode);
    let enter_lane = state.lane(enter_mode);

    let slot = exit_lane
        .av_slot
        .filter(|_| exit_lane.av_present)
        .ok_or_else(|| Error::Simulation("mode lane is missing the AV".into()))?;
    let av_position = exit_lane.positions[slot];
    let av_velocity = exit_lane.velocities[slot];

    let pre_exit_lane = VarSnapshot::of(exit_lane, ring);
    let pre_enter_lane = VarSnapshot::of(enter_lane, ring);

    let (exit_after, exit_a, exit_b) = remove_av(exit_lane, p)?;
    let (enter_after, enter_a, enter_b, degenerate_insertion) =
        insert_av(enter_lane, av_position, av_velocity, p)?;

    let post_exit_lane = VarSnapshot::of(&exit_after, ring);
    let post_enter_lane = VarSnapshot::of(&enter_after, ring);

    let event = JumpEvent {
        time: state.time,
        direction: match exit_mode {
            Mode::L => JumpDirection::LToR,
            Mode::R => JumpDirection::RToL,
        },
        exit_a,
        exit_b,
        exit_c: exit_a + exit_b,
        enter_a,
        enter_b,
        av_velocity,
        degenerate_insertion,
        pre_exit_lane,
        post_exit_lane,
        pre_enter_lane,
        post_enter_lane,
    };

    let (lane_l, lane_r) = match exit_mode {
        Mode::L => (exit_after, enter_after),
        Mode::R => (enter_after, exit_after),
    };
    let next = HybridState {
        lane_l,
        lane_r,
        mode: enter_mode,
        time: state.time,
        round_index: state.round_index + usize::from(enter_mode == Mode::L),
    };
    Ok((next, event))
}

/// Reference single-lane initial states: the controlled lane right after the
/// AV enters mid-gap into the (n-1)-vehicle equilibrium, and the uncontrolled
/// lane right after the AV exits the n-vehicle equilibrium (one doubled gap).
/// Both are built through the actual reset maps so their variances match the
/// closed-form jump deltas by construction.
pub fn nominal_initial_states(p: &OvmParams, n: usize) -> Result<(LaneState, LaneState)> {
    if n < 3 {
        return Err(Error::InvalidParameter(
            "nominal states need at least 3 vehicles".into(),
        ));
    }
    let full = LaneState::equilibrium_lane(n, true, p)?;
    let (uncontrolled, _, _) = remove_av(&full, p)?;

    let sparse = LaneState::equilibrium_lane(n - 1, false, p)?;
    let eq = equilibrium(n - 1, p)?;
    // Mid-gap behind vehicle 0: half an equilibrium headway back.
    let av_position = (sparse.positions[0] - eq.headway / 2.0).rem_euclid(p.ring_length);
    let (controlled, _, _, _) = insert_av(&sparse, av_position, eq.velocity, p)?;
    Ok((controlled, uncontrolled))
}

/// Random two-lane initial state: every vehicle's position and velocity is
/// perturbed uniformly (±12 m, ±7.5 m/s) around its equilibrium slot, which
/// keeps each lane's headways summing to the ring length. Candidates whose
/// vehicles start overlapped or collide within 0.1 s (AV coasting, emergency
/// braking active) are resampled.
pub fn random_initial_state(seed: u64, n: usize, p: &OvmParams) -> Result<HybridState> {
    if n < 3 {
        return Err(Error::InvalidParameter(
            "random states need at least 3 vehicles".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = SimOptions::default();
    let prefilter_steps = (PREFILTER_HORIZON / opts.dt).round() as usize;

    for _ in 0..SAMPLING_RETRY_LIMIT {
        let lane_l = sample_lane(&mut rng, n, true, p)?;
        let lane_r = sample_lane(&mut rng, n - 1, false, p)?;
        let (Some(lane_l), Some(lane_r)) = (lane_l, lane_r) else {
            continue;
        };
        let candidate = HybridState {
            lane_l,
            lane_r,
            mode: Mode::L,
            time: 0.0,
            round_index: 0,
        };
        let mut probe = candidate.clone();
        let mut collided = false;
        for _ in 0..prefilter_steps {
            let (next, report) = step_hybrid(&probe, 0.0, &opts, p)?;
            if report.collided() {
                collided = true;
                break;
            }
            probe = next;
        }
        if !collided {
            return Ok(candidate);
        }
    }
    Err(Error::SamplingExhausted(SAMPLING_RETRY_LIMIT))
}

/// One perturbed lane, or None when vehicles start out of order (an immediate
/// overlap, rejected before any simulation).
fn sample_lane(
    rng: &mut ChaCha8Rng,
    m: usize,
    av_present: bool,
    p: &OvmParams,
) -> Result<Option<LaneState>> {
    let eq = equilibrium(m, p)?;
    let mut raw = Vec::with_capacity(m);
    let mut velocities = Vec::with_capacity(m);
    for i in 0..m {
        let slot = p.ring_length - i as f64 * eq.headway;
        raw.push(slot + rng.gen_range(-12.0..=12.0));
        velocities.push(eq.velocity + rng.gen_range(-7.5..=7.5));
    }
    // Intended order has strictly decreasing raw positions; a violation means
    // two vehicles swapped at t = 0.
    for i in 1..m {
        if raw[i - 1] - raw[i] <= 0.0 {
            return Ok(None);
        }
    }
    if raw[m - 1] <= raw[0] - p.ring_length {
        return Ok(None);
    }
    let positions = raw.iter().map(|x| x.rem_euclid(p.ring_length)).collect();
    Ok(Some(LaneState {
        positions,
        velocities,
        av_present,
        av_slot: av_present.then(|| m - 1),
    }))
}

/// Variance of both lanes at one trajectory instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariancePoint {
    pub time: f64,
    pub lane_l: VarSnapshot,
    pub lane_r: VarSnapshot,
}

/// First collision on record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollisionNote {
    pub time: f64,
    pub mode: Mode,
    pub vehicle: usize,
}

/// Completed hybrid run.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub dt: f64,
    pub snapshot_stride: usize,
    /// States at every stride-th step, starting with the initial state.
    pub samples: Vec<HybridState>,
    pub jumps: Vec<JumpEvent>,
    /// Per-step variance trace, strictly increasing in time.
    pub variance: Vec<VariancePoint>,
    pub collision_count: u64,
    pub first_collision: Option<CollisionNote>,
    pub brake_count: u64,
    pub final_state: HybridState,
}

/// Advances the hybrid system for `horizon` seconds. `guard` decides, from
/// the state and the time elapsed in the current mode, whether to switch
/// lanes before the next step; `input` supplies the AV acceleration. Elapsed
/// time is tracked in whole steps so thresholds land exactly.
pub fn run_hybrid(
    initial: HybridState,
    horizon: f64,
    opts: &SimOptions,
    p: &OvmParams,
    mut guard: impl FnMut(&HybridState, f64) -> bool,
    mut input: impl FnMut(&HybridState, f64) -> f64,
) -> Result<Trajectory> {
    if horizon <= 0.0 || opts.dt <= 0.0 {
        return Err(Error::InvalidParameter(
            "horizon and dt must be positive".into(),
        ));
    }
    let total_steps = (horizon / opts.dt).round() as usize;
    let stride = opts.snapshot_stride.max(1);

    let mut state = initial;
    let mut samples = vec![state.clone()];
    let mut jumps = Vec::new();
    let mut variance = Vec::with_capacity(total_steps + 1);
    variance.push(VariancePoint {
        time: state.time,
        lane_l: VarSnapshot::of(&state.lane_l, p.ring_length),
        lane_r: VarSnapshot::of(&state.lane_r, p.ring_length),
    });
    let mut collision_count = 0u64;
    let mut first_collision = None;
    let mut brake_count = 0u64;
    let mut steps_in_mode = 0usize;

    for step in 0..total_steps {
        let elapsed = steps_in_mode as f64 * opts.dt;
        if guard(&state, elapsed) {
            let (next, event) = lane_switch(&state, p)?;
            jumps.push(event);
            state = next;
            steps_in_mode = 0;
        }
        let elapsed = steps_in_mode as f64 * opts.dt;
        let u = input(&state, elapsed);
        let (next, report) = step_hybrid(&state, u, opts, p)?;
        collision_count += (report.collisions_l.len() + report.collisions_r.len()) as u64;
        if first_collision.is_none() {
            if let Some(&vehicle) = report.collisions_l.first() {
                first_collision = Some(CollisionNote {
                    time: state.time,
                    mode: Mode::L,
                    vehicle,
                });
            } else if let Some(&vehicle) = report.collisions_r.first() {
                first_collision = Some(CollisionNote {
                    time: state.time,
                    mode: Mode::R,
                    vehicle,
                });
            }
        }
        brake_count += (report.brakes_l + report.brakes_r) as u64;
        state = next;
        steps_in_mode += 1;
        variance.push(VariancePoint {
            time: state.time,
            lane_l: VarSnapshot::of(&state.lane_l, p.ring_length),
            lane_r: VarSnapshot::of(&state.lane_r, p.ring_length),
        });
        if (step + 1) % stride == 0 {
            samples.push(state.clone());
        }
    }
    if total_steps % stride != 0 {
        samples.push(state.clone());
    }
    Ok(Trajectory {
        dt: opts.dt,
        snapshot_stride: stride,
        samples,
        jumps,
        variance,
        collision_count,
        first_collision,
        brake_count,
        final_state: state,
    })
}

/// Variance of a single lane at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaneVarianceSample {
    pub time: f64,
    pub variance: VarSnapshot,
}

/// Single-lane run (no switching): either a controlled lane under the given
/// gain or an uncontrolled lane coasting on the car-following model.
#[derive(Debug, Clone)]
pub struct LaneTrajectory {
    pub dt: f64,
    pub variance: Vec<LaneVarianceSample>,
    pub snapshots: Vec<LaneState>,
    pub collision_count: u64,
    pub brake_count: u64,
    pub final_state: LaneState,
}

/// Simulates one lane in isolation for `horizon` seconds.
pub fn simulate_lane(
    initial: LaneState,
    gain: Option<&GainMatrix>,
    horizon: f64,
    opts: &SimOptions,
    p: &OvmParams,
) -> Result<LaneTrajectory> {
    if horizon <= 0.0 || opts.dt <= 0.0 {
        return Err(Error::InvalidParameter(
            "horizon and dt must be positive".into(),
        ));
    }
    if let Some(gain) = gain {
        if !initial.av_present {
            return Err(Error::Simulation(
                "a gain was supplied but the lane has no AV".into(),
            ));
        }
        if initial.len() != gain.n {
            return Err(Error::Simulation(format!(
                "gain is sized for {} vehicles but the lane has {}",
                gain.n,
                initial.len()
            )));
        }
    }
    let total_steps = (horizon / opts.dt).round() as usize;
    let stride = opts.snapshot_stride.max(1);
    let mut lane = initial;
    let mut time = 0.0;
    let mut variance = Vec::with_capacity(total_steps + 1);
    let mut snapshots = vec![lane.clone()];
    variance.push(LaneVarianceSample {
        time,
        variance: VarSnapshot::of(&lane, p.ring_length),
    });
    let mut collision_count = 0u64;
    let mut brake_count = 0u64;
    for step in 0..total_steps {
        let u = match gain {
            Some(g) => {
                let x = lane.error_state(g.equilibrium.headway, g.equilibrium.velocity, p.ring_length);
                g.feedback(x.as_slice())
            }
            None => 0.0,
        };
        let (next, collisions, brakes) = step_lane(&lane, u, opts, p)?;
        collision_count += collisions.len() as u64;
        brake_count += brakes as u64;
        lane = next;
        time += opts.dt;
        variance.push(LaneVarianceSample {
            time,
            variance: VarSnapshot::of(&lane, p.ring_length),
        });
        if (step + 1) % stride == 0 {
            snapshots.push(lane.clone());
        }
    }
    if total_steps % stride != 0 {
        snapshots.push(lane.clone());
    }
    Ok(LaneTrajectory {
        dt: opts.dt,
        variance,
        snapshots,
        collision_count,
        brake_count,
        final_state: lane,
    })
}
