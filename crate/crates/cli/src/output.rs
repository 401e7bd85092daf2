//! File writers. Every CSV starts with a schema-version comment so readers
//! can detect column changes; bump the version when a schema changes.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use laneweave::analysis::{BoundParams, RoundSummary};
use laneweave::sim::{JumpEvent, Mode, Trajectory};
use serde::Serialize;

use crate::config::CliError;
use crate::runner::{JumpTableRow, RunSummary, SweepRow};

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn csv_writer(path: &Path, schema: &str) -> Result<csv::Writer<BufWriter<File>>, CliError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut buf = BufWriter::new(file);
    writeln!(buf, "# laneweave {schema} csv v1").map_err(|e| io_err(path, e))?;
    Ok(csv::Writer::from_writer(buf))
}

fn finish<W: Write>(mut w: csv::Writer<W>, path: &Path) -> Result<(), CliError> {
    w.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Runtime(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

#[derive(Serialize)]
struct TrajectoryRow {
    time_s: f64,
    lane: Mode,
    vehicle_index: usize,
    is_av: bool,
    position_m: f64,
    velocity_mps: f64,
}

/// Per-vehicle rows for every stored snapshot, lane L first.
pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<(), CliError> {
    let mut w = csv_writer(path, "trajectory")?;
    for sample in &traj.samples {
        for (lane, state) in [(Mode::L, &sample.lane_l), (Mode::R, &sample.lane_r)] {
            for i in 0..state.len() {
                w.serialize(TrajectoryRow {
                    time_s: sample.time,
                    lane,
                    vehicle_index: i,
                    is_av: state.av_slot == Some(i),
                    position_m: state.positions[i],
                    velocity_mps: state.velocities[i],
                })
                .map_err(|e| io_err(path, e))?;
            }
        }
    }
    finish(w, path)
}

#[derive(Serialize)]
struct VarianceRow {
    time_s: f64,
    var_s_l: f64,
    var_v_l: f64,
    var_total_l: f64,
    var_s_r: f64,
    var_v_r: f64,
    var_total_r: f64,
}

/// Per-step variance of both lanes.
pub fn write_variance(path: &Path, traj: &Trajectory) -> Result<(), CliError> {
    let mut w = csv_writer(path, "variance")?;
    for point in &traj.variance {
        w.serialize(VarianceRow {
            time_s: point.time,
            var_s_l: point.lane_l.headway,
            var_v_l: point.lane_l.velocity,
            var_total_l: point.lane_l.total(),
            var_s_r: point.lane_r.headway,
            var_v_r: point.lane_r.velocity,
            var_total_r: point.lane_r.total(),
        })
        .map_err(|e| io_err(path, e))?;
    }
    finish(w, path)
}

#[derive(Serialize)]
struct RoundRow {
    round: usize,
    lane: Mode,
    var_0: f64,
    delta_enter: f64,
    var_1: f64,
    delta_exit: f64,
    var_next: f64,
    bound_var_1: Option<f64>,
    bound_var_next: Option<f64>,
}

pub fn write_rounds(path: &Path, rounds: &[RoundSummary]) -> Result<(), CliError> {
    let mut w = csv_writer(path, "rounds")?;
    for r in rounds {
        w.serialize(RoundRow {
            round: r.round_index,
            lane: r.lane,
            var_0: r.var_0,
            delta_enter: r.delta_enter,
            var_1: r.var_1,
            delta_exit: r.delta_exit,
            var_next: r.var_next,
            bound_var_1: r.bound_var_1,
            bound_var_next: r.bound_var_next,
        })
        .map_err(|e| io_err(path, e))?;
    }
    finish(w, path)
}

#[derive(Serialize)]
struct BoundCheckRow {
    round: usize,
    lane: Mode,
    measured_var_1: f64,
    bound_var_1: f64,
    var_1_dominated: bool,
    measured_var_next: f64,
    bound_var_next: f64,
    var_next_dominated: bool,
}

/// Side-by-side comparison of measured round endpoints against their
/// envelope values. Rounds without attached bounds are skipped.
pub fn write_bound_checks(path: &Path, rounds: &[RoundSummary]) -> Result<(), CliError> {
    let mut w = csv_writer(path, "bounds")?;
    for r in rounds {
        let (Some(b1), Some(bn)) = (r.bound_var_1, r.bound_var_next) else {
            continue;
        };
        w.serialize(BoundCheckRow {
            round: r.round_index,
            lane: r.lane,
            measured_var_1: r.var_1,
            bound_var_1: b1,
            var_1_dominated: r.var_1 <= b1,
            measured_var_next: r.var_next,
            bound_var_next: bn,
            var_next_dominated: r.var_next <= bn,
        })
        .map_err(|e| io_err(path, e))?;
    }
    finish(w, path)
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<(), CliError> {
    let mut w = csv_writer(path, "sweep")?;
    for row in rows {
        w.serialize(row).map_err(|e| io_err(path, e))?;
    }
    finish(w, path)
}

pub fn write_jump_table(path: &Path, rows: &[JumpTableRow]) -> Result<(), CliError> {
    let mut w = csv_writer(path, "jump_table")?;
    for row in rows {
        w.serialize(row).map_err(|e| io_err(path, e))?;
    }
    finish(w, path)
}

pub fn write_jumps(path: &Path, jumps: &[JumpEvent]) -> Result<(), CliError> {
    write_json(path, &jumps)
}

pub fn write_summary(path: &Path, summary: &RunSummary) -> Result<(), CliError> {
    write_json(path, summary)
}

pub fn write_fit(path: &Path, params: &BoundParams) -> Result<(), CliError> {
    write_json(path, params)
}

pub fn read_fit(path: &Path) -> Result<BoundParams, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        CliError::Runtime(format!(
            "{}: {e}; run the fit command first to produce it",
            path.display()
        ))
    })?;
    let params: BoundParams = serde_json::from_str(&text)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    params.validate().map_err(CliError::from_core)?;
    Ok(params)
}
