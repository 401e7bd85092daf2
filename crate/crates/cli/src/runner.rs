//! Scenario execution: build gains, pick the initial state, simulate, and
//! reduce the trajectory to a run summary.

use std::time::Instant;

use laneweave::analysis::{
    assumption1_check, attach_bounds, classify_regime, detect_periodic_orbit, extract_rounds,
    fit_envelopes_with, jump_delta_enter, jump_delta_exit, jump_statistics, variance_norm_ratio,
    BoundParams, JumpStats, OrbitReport, RegimeLabel, RoundSummary, VarianceTrace,
};
use laneweave::control::{run_trajectory, GainSet};
use laneweave::gain::synthesize_gain;
use laneweave::ovm::{equilibrium, linearize, LaneKind};
use laneweave::sim::{random_initial_state, HybridState, LaneState, Mode, Trajectory};
use serde::{Deserialize, Serialize};

use crate::config::{CliError, ScenarioConfig};

/// Everything a finished run reports, written as summary.json.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub period: f64,
    pub horizon: f64,
    pub seed: Option<u64>,
    pub regime: RegimeLabel,
    pub controlled_end_variance: Option<f64>,
    pub uncontrolled_end_variance: Option<f64>,
    pub rounds_used: usize,
    pub orbit_converged: bool,
    pub orbit_onset_time: Option<f64>,
    pub orbit_last_distance: Option<f64>,
    /// Jump-delta statistics over the post-onset tail of the run.
    pub jump_stats: JumpStats,
    pub jumps: usize,
    pub rounds: usize,
    /// Extrema of lane variance over squared error norm, scaled by the lane
    /// size so the theoretical ceiling is 1, across snapshot states passing
    /// the velocity-split check.
    pub ratio_min_scaled: Option<f64>,
    pub ratio_max_scaled: Option<f64>,
    pub ratio_samples: usize,
    pub collision_count: u64,
    pub first_collision_time: Option<f64>,
    pub brake_count: u64,
    pub wall_time_s: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug)]
pub struct ScenarioOutcome {
    pub summary: RunSummary,
    pub trajectory: Trajectory,
    pub rounds: Vec<RoundSummary>,
}

/// Both lanes at their uniform equilibrium, automated vehicle in lane L.
pub fn equilibrium_initial_state(config: &ScenarioConfig) -> Result<HybridState, CliError> {
    let p = &config.ovm;
    Ok(HybridState {
        lane_l: LaneState::equilibrium_lane(config.n, true, p).map_err(CliError::from_core)?,
        lane_r: LaneState::equilibrium_lane(config.n - 1, false, p)
            .map_err(CliError::from_core)?,
        mode: Mode::L,
        time: 0.0,
        round_index: 0,
    })
}

fn scan_variance_ratio(traj: &Trajectory, config: &ScenarioConfig) -> (Option<f64>, Option<f64>, usize) {
    let p = &config.ovm;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut count = 0usize;
    for sample in &traj.samples {
        for lane in [&sample.lane_l, &sample.lane_r] {
            let Ok(eq) = equilibrium(lane.len(), p) else {
                continue;
            };
            if !assumption1_check(lane, &eq) {
                continue;
            }
            let Some(ratio) = variance_norm_ratio(lane, &eq, p.ring_length) else {
                continue;
            };
            let scaled = ratio * lane.len() as f64;
            min = min.min(scaled);
            max = max.max(scaled);
            count += 1;
        }
    }
    if count == 0 {
        (None, None, 0)
    } else {
        (Some(min), Some(max), count)
    }
}

/// Run one scenario end to end. Envelope values are attached to the round
/// table when fitted parameters are supplied and the bounds toggle is on.
pub fn run_scenario(
    config: &ScenarioConfig,
    bound_params: Option<&BoundParams>,
) -> Result<ScenarioOutcome, CliError> {
    config.validate()?;
    let start = Instant::now();
    let p = &config.ovm;
    let period = config.controller.period();

    let gains = GainSet::for_spec(&config.controller, config.n, p, &config.weights)
        .map_err(CliError::from_core)?;
    let initial = match config.seed {
        Some(seed) => random_initial_state(seed, config.n, p).map_err(CliError::from_core)?,
        None => equilibrium_initial_state(config)?,
    };
    let opts = config.sim_options();
    let traj = run_trajectory(
        initial,
        &config.controller,
        &gains,
        config.horizon,
        &opts,
        p,
    )
    .map_err(CliError::from_core)?;

    let mut warnings = Vec::new();

    let orbit: Option<OrbitReport> = if config.analysis.orbit {
        match detect_periodic_orbit(&traj, period, p.ring_length) {
            Ok(report) => Some(report),
            Err(e) => {
                warnings.push(format!("orbit detection skipped: {e}"));
                None
            }
        }
    } else {
        None
    };

    let (regime, controlled_end, uncontrolled_end, rounds_used) = if config.analysis.regime {
        match classify_regime(&traj, period, p.ring_length, &config.regime_thresholds) {
            Ok(report) => (
                report.label,
                report.controlled_end_variance,
                report.uncontrolled_end_variance,
                report.rounds_used,
            ),
            Err(e) => {
                warnings.push(format!("regime classification skipped: {e}"));
                (RegimeLabel::Unclassified, None, None, 0)
            }
        }
    } else {
        (RegimeLabel::Unclassified, None, None, 0)
    };

    let from_time = match &orbit {
        Some(report) if report.converged => report.onset_time.expect("converged orbit has onset"),
        Some(_) => {
            warnings.push("no orbit found; jump statistics include the whole run".into());
            0.0
        }
        None => 0.0,
    };
    let jump_stats = jump_statistics(&traj.jumps, from_time);

    let mut rounds = extract_rounds(&traj.jumps);
    if config.analysis.bounds {
        if let Some(params) = bound_params {
            attach_bounds(
                &mut rounds,
                params,
                config.analysis.jump_enter_estimate,
                config.analysis.jump_exit_estimate,
                config.analysis.use_state_dependent,
            );
        }
    }

    let (ratio_min, ratio_max, ratio_samples) = scan_variance_ratio(&traj, config);

    let summary = RunSummary {
        period,
        horizon: config.horizon,
        seed: config.seed,
        regime,
        controlled_end_variance: controlled_end,
        uncontrolled_end_variance: uncontrolled_end,
        rounds_used,
        orbit_converged: orbit.as_ref().is_some_and(|o| o.converged),
        orbit_onset_time: orbit.as_ref().and_then(|o| o.onset_time),
        orbit_last_distance: orbit
            .as_ref()
            .and_then(|o| o.distances.last().map(|&(_, d)| d)),
        jump_stats,
        jumps: traj.jumps.len(),
        rounds: rounds.len(),
        ratio_min_scaled: ratio_min,
        ratio_max_scaled: ratio_max,
        ratio_samples,
        collision_count: traj.collision_count,
        first_collision_time: traj.first_collision.as_ref().map(|c| c.time),
        brake_count: traj.brake_count,
        wall_time_s: start.elapsed().as_secs_f64(),
        warnings,
    };

    Ok(ScenarioOutcome {
        summary,
        trajectory: traj,
        rounds,
    })
}

/// Fit envelope parameters from the nominal single-lane runs: the freshly
/// joined controlled lane under the base gain, and the freshly abandoned
/// lane coasting on its own.
pub fn fit_nominal(config: &ScenarioConfig) -> Result<BoundParams, CliError> {
    config.validate()?;
    let p = &config.ovm;
    let (controlled, uncontrolled) =
        laneweave::sim::nominal_initial_states(p, config.n).map_err(CliError::from_core)?;
    let sys = linearize(config.n, LaneKind::Controlled, p).map_err(CliError::from_core)?;
    let gain = synthesize_gain(&sys, &config.weights).map_err(CliError::from_core)?;
    let opts = config.sim_options();
    let controlled_run =
        laneweave::sim::simulate_lane(controlled, Some(&gain), config.horizon, &opts, p)
            .map_err(CliError::from_core)?;
    let uncontrolled_run =
        laneweave::sim::simulate_lane(uncontrolled, None, config.horizon, &opts, p)
            .map_err(CliError::from_core)?;
    let c_trace = VarianceTrace::from_lane_trajectory(&controlled_run);
    let u_trace = VarianceTrace::from_lane_trajectory(&uncontrolled_run);
    fit_envelopes_with(&c_trace, &u_trace, &config.fit).map_err(CliError::from_core)
}

/// Closed-form jump sizes at the uniform equilibria, the reference values
/// the jump table compares simulation against.
pub fn equilibrium_jump_estimates(config: &ScenarioConfig) -> Result<(f64, f64), CliError> {
    let p = &config.ovm;
    let with_av = LaneState::equilibrium_lane(config.n, true, p).map_err(CliError::from_core)?;
    let (exit_s, exit_v) =
        jump_delta_exit(&with_av, p.ring_length).map_err(CliError::from_core)?;

    let without = LaneState::equilibrium_lane(config.n - 1, false, p)
        .map_err(CliError::from_core)?;
    let gap = p.ring_length / (config.n - 1) as f64;
    let position = (without.positions[0] - 0.5 * gap).rem_euclid(p.ring_length);
    let arriving = equilibrium(config.n, p).map_err(CliError::from_core)?;
    let (enter_s, enter_v) =
        jump_delta_enter(&without, position, arriving.velocity, p.ring_length)
            .map_err(CliError::from_core)?;
    Ok((enter_s + enter_v, exit_s + exit_v))
}

/// One line of the sweep aggregate, copied from the run summary so the
/// aggregate cannot drift from the per-run files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub t: f64,
    pub regime: RegimeLabel,
    pub orbit_converged: bool,
    pub controlled_end_variance: Option<f64>,
    pub uncontrolled_end_variance: Option<f64>,
    pub delta_exit_mean: f64,
    pub delta_exit_std: f64,
    pub delta_enter_mean: f64,
    pub delta_enter_std: f64,
    pub rounds_used: usize,
    pub collisions: u64,
}

impl SweepRow {
    pub fn from_summary(t: f64, summary: &RunSummary) -> SweepRow {
        SweepRow {
            t,
            regime: summary.regime,
            orbit_converged: summary.orbit_converged,
            controlled_end_variance: summary.controlled_end_variance,
            uncontrolled_end_variance: summary.uncontrolled_end_variance,
            delta_exit_mean: summary.jump_stats.exit_mean,
            delta_exit_std: summary.jump_stats.exit_std,
            delta_enter_mean: summary.jump_stats.enter_mean,
            delta_enter_std: summary.jump_stats.enter_std,
            rounds_used: summary.rounds_used,
            collisions: summary.collision_count,
        }
    }
}

/// One line of the jump-size table: simulated post-onset statistics next to
/// the closed-form equilibrium estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JumpTableRow {
    pub t: f64,
    pub delta_exit_mean: f64,
    pub delta_exit_std: f64,
    pub delta_exit_estimate: f64,
    pub delta_enter_mean: f64,
    pub delta_enter_std: f64,
    pub delta_enter_estimate: f64,
    pub jumps_used: usize,
}

/// Orbit detection needs four full switching cycles, so per-period runs
/// stretch the horizon to ten periods when the configured one is shorter.
pub fn horizon_for_period(config: &ScenarioConfig, period: f64) -> f64 {
    config.horizon.max(10.0 * period)
}
