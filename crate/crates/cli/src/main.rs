use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use laneweave::sim::DynamicsMode;
use laneweave_cli::config::{CliError, ScenarioConfig};
use laneweave_cli::output;
use laneweave_cli::runner::{
    self, equilibrium_jump_estimates, fit_nominal, horizon_for_period, run_scenario,
    JumpTableRow, SweepRow,
};
use rayon::prelude::*;

#[derive(Parser)]
#[command(
    name = "laneweave",
    version,
    about = "Two-lane ring-road simulator with a lane-switching automated vehicle"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Scenario configuration (JSON). Omit for the built-in reference setup.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory; overrides the config's output_dir. Default "out".
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Seed for a randomized initial state; overrides the config.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Integration model override: nonlinear or linearized.
    #[arg(long, global = true, value_name = "MODE", value_parser = parse_dynamics)]
    dynamics: Option<DynamicsMode>,
    /// Switching periods in seconds for sweep and jump-table.
    #[arg(
        long = "t-list",
        global = true,
        value_name = "SECONDS",
        value_delimiter = ','
    )]
    t_list: Vec<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario; write trajectory, variance, round, jump, and summary files.
    Simulate,
    /// Run one scenario per switching period concurrently; write an aggregate table.
    Sweep,
    /// Fit decay and growth envelopes from the nominal single-lane runs.
    Fit,
    /// Re-run the scenario and check the per-round envelope against measurements.
    Bounds,
    /// Tabulate measured jump deltas against closed-form equilibrium estimates.
    JumpTable,
}

fn regime_name(label: laneweave::analysis::RegimeLabel) -> &'static str {
    use laneweave::analysis::RegimeLabel::*;
    match label {
        PhantomCar => "phantom_car",
        InsufficientControl => "insufficient_control",
        SufficientControl => "sufficient_control",
        EventualBlowup => "eventual_blowup",
        Unclassified => "unclassified",
    }
}

fn parse_dynamics(s: &str) -> Result<DynamicsMode, String> {
    match s {
        "nonlinear" => Ok(DynamicsMode::Nonlinear),
        "linearized" => Ok(DynamicsMode::Linearized),
        other => Err(format!(
            "unknown dynamics mode {other:?}; expected nonlinear or linearized"
        )),
    }
}

fn load_config(cli: &Cli) -> Result<ScenarioConfig, CliError> {
    let mut config = match &cli.config {
        Some(path) => ScenarioConfig::load(path)?,
        None => ScenarioConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = Some(seed);
    }
    if let Some(dynamics) = cli.dynamics {
        config.dynamics = dynamics;
    }
    config.validate()?;
    Ok(config)
}

fn out_dir(cli: &Cli, config: &ScenarioConfig) -> Result<PathBuf, CliError> {
    let dir = cli
        .out
        .clone()
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn require_t_list(cli: &Cli) -> Result<Vec<f64>, CliError> {
    if cli.t_list.is_empty() {
        return Err(CliError::Config(
            "--t-list requires at least one switching period".into(),
        ));
    }
    for &t in &cli.t_list {
        if !t.is_finite() || t <= 0.0 {
            return Err(CliError::Config(format!(
                "--t-list: period {t} must be positive and finite"
            )));
        }
    }
    Ok(cli.t_list.clone())
}

fn write_run_files(
    dir: &Path,
    outcome: &runner::ScenarioOutcome,
    with_bound_checks: bool,
) -> Result<(), CliError> {
    output::write_trajectory(&dir.join("trajectory.csv"), &outcome.trajectory)?;
    output::write_variance(&dir.join("variance.csv"), &outcome.trajectory)?;
    output::write_rounds(&dir.join("rounds.csv"), &outcome.rounds)?;
    output::write_jumps(&dir.join("jumps.json"), &outcome.trajectory.jumps)?;
    output::write_summary(&dir.join("summary.json"), &outcome.summary)?;
    if with_bound_checks {
        output::write_bound_checks(&dir.join("bounds.csv"), &outcome.rounds)?;
    }
    Ok(())
}

fn print_summary(summary: &runner::RunSummary) {
    println!(
        "period {} s over {} s: regime {}, {} jumps, {} rounds",
        summary.period,
        summary.horizon,
        regime_name(summary.regime),
        summary.jumps,
        summary.rounds
    );
    match summary.orbit_onset_time {
        Some(t) => println!("periodic orbit from t = {t:.1} s"),
        None => println!("no periodic orbit found"),
    }
    println!(
        "jump deltas: exit {:.3} +/- {:.3} ({}), enter {:.3} +/- {:.3} ({})",
        summary.jump_stats.exit_mean,
        summary.jump_stats.exit_std,
        summary.jump_stats.exit_count,
        summary.jump_stats.enter_mean,
        summary.jump_stats.enter_std,
        summary.jump_stats.enter_count
    );
    if summary.collision_count > 0 {
        println!(
            "{} collision events, first at t = {:.2} s",
            summary.collision_count,
            summary.first_collision_time.unwrap_or(f64::NAN)
        );
    }
    for w in &summary.warnings {
        println!("warning: {w}");
    }
}

fn cmd_simulate(cli: &Cli) -> Result<(), CliError> {
    let config = load_config(cli)?;
    let dir = out_dir(cli, &config)?;
    let fit_path = dir.join("fit.json");
    let bound_params = if config.analysis.fit {
        let params = fit_nominal(&config)?;
        output::write_fit(&fit_path, &params)?;
        Some(params)
    } else if config.analysis.bounds && fit_path.exists() {
        Some(output::read_fit(&fit_path)?)
    } else {
        None
    };
    let outcome = run_scenario(&config, bound_params.as_ref())?;
    let with_checks = config.analysis.bounds && bound_params.is_some();
    write_run_files(&dir, &outcome, with_checks)?;
    print_summary(&outcome.summary);
    Ok(())
}

fn cmd_fit(cli: &Cli) -> Result<(), CliError> {
    let config = load_config(cli)?;
    let dir = out_dir(cli, &config)?;
    let params = fit_nominal(&config)?;
    output::write_fit(&dir.join("fit.json"), &params)?;
    println!(
        "decay rate {:.4}, growth rate {:.4}, handoff at t = {:.2} s, margin {}",
        params.alpha2, params.beta2, params.t_eps, params.eps
    );
    for w in &params.warnings {
        println!("warning: {w}");
    }
    Ok(())
}

fn cmd_bounds(cli: &Cli) -> Result<(), CliError> {
    let mut config = load_config(cli)?;
    config.analysis.bounds = true;
    let dir = out_dir(cli, &config)?;
    let params = output::read_fit(&dir.join("fit.json"))?;
    let outcome = run_scenario(&config, Some(&params))?;
    output::write_rounds(&dir.join("rounds.csv"), &outcome.rounds)?;
    output::write_bound_checks(&dir.join("bounds.csv"), &outcome.rounds)?;
    output::write_summary(&dir.join("summary.json"), &outcome.summary)?;
    let checked = outcome
        .rounds
        .iter()
        .filter(|r| r.bound_var_1.is_some())
        .count();
    let dominated = outcome
        .rounds
        .iter()
        .filter(|r| {
            r.bound_var_1.is_some_and(|b| r.var_1 <= b)
                && r.bound_var_next.is_some_and(|b| r.var_next <= b)
        })
        .count();
    println!("envelope holds on {dominated} of {checked} rounds");
    Ok(())
}

fn run_per_period<R, F>(
    t_list: &[f64],
    config: &ScenarioConfig,
    dir: &Path,
    bound_params: Option<&laneweave::analysis::BoundParams>,
    per_run: F,
) -> Result<Vec<R>, CliError>
where
    R: Send,
    F: Fn(f64, &runner::ScenarioOutcome) -> R + Sync,
{
    let results: Vec<(f64, Result<R, CliError>)> = t_list
        .par_iter()
        .map(|&t| {
            let run = (|| -> Result<R, CliError> {
                let mut sub = config.with_period(t);
                sub.horizon = horizon_for_period(config, t);
                sub.validate()?;
                let subdir = dir.join(format!("T_{t}"));
                std::fs::create_dir_all(&subdir)
                    .map_err(|e| CliError::Runtime(format!("{}: {e}", subdir.display())))?;
                let outcome = run_scenario(&sub, bound_params)?;
                write_run_files(&subdir, &outcome, bound_params.is_some())?;
                Ok(per_run(t, &outcome))
            })();
            (t, run)
        })
        .collect();

    let mut rows = Vec::new();
    let mut failures = 0usize;
    for (t, result) in results {
        match result {
            Ok(row) => rows.push(row),
            Err(e) => {
                failures += 1;
                eprintln!("period {t} s failed: {e}");
            }
        }
    }
    if failures > 0 {
        return Err(CliError::Runtime(format!(
            "{failures} of {} period runs failed",
            t_list.len()
        )));
    }
    Ok(rows)
}

fn cmd_sweep(cli: &Cli) -> Result<(), CliError> {
    let config = load_config(cli)?;
    let t_list = require_t_list(cli)?;
    let dir = out_dir(cli, &config)?;
    let bound_params = if config.analysis.fit {
        let params = fit_nominal(&config)?;
        output::write_fit(&dir.join("fit.json"), &params)?;
        Some(params)
    } else {
        None
    };
    let mut rows: Vec<SweepRow> = run_per_period(
        &t_list,
        &config,
        &dir,
        bound_params.as_ref(),
        |t, outcome| SweepRow::from_summary(t, &outcome.summary),
    )?;
    rows.sort_by(|a, b| a.t.total_cmp(&b.t));
    output::write_sweep(&dir.join("sweep.csv"), &rows)?;
    for row in &rows {
        println!(
            "T = {} s: {}, exit delta {:.2}, enter delta {:.2}",
            row.t,
            regime_name(row.regime),
            row.delta_exit_mean,
            row.delta_enter_mean
        );
    }
    Ok(())
}

fn cmd_jump_table(cli: &Cli) -> Result<(), CliError> {
    let config = load_config(cli)?;
    let t_list = require_t_list(cli)?;
    let dir = out_dir(cli, &config)?;
    let (enter_estimate, exit_estimate) = equilibrium_jump_estimates(&config)?;
    let mut rows: Vec<JumpTableRow> =
        run_per_period(&t_list, &config, &dir, None, |t, outcome| {
            let stats = &outcome.summary.jump_stats;
            JumpTableRow {
                t,
                delta_exit_mean: stats.exit_mean,
                delta_exit_std: stats.exit_std,
                delta_exit_estimate: exit_estimate,
                delta_enter_mean: stats.enter_mean,
                delta_enter_std: stats.enter_std,
                delta_enter_estimate: enter_estimate,
                jumps_used: stats.exit_count + stats.enter_count,
            }
        })?;
    rows.sort_by(|a, b| a.t.total_cmp(&b.t));
    output::write_jump_table(&dir.join("jump_table.csv"), &rows)?;
    for row in &rows {
        println!(
            "T = {} s: exit {:.2} (estimate {:.2}), enter {:.2} (estimate {:.2})",
            row.t,
            row.delta_exit_mean,
            row.delta_exit_estimate,
            row.delta_enter_mean,
            row.delta_enter_estimate
        );
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate => cmd_simulate(cli),
        Command::Sweep => cmd_sweep(cli),
        Command::Fit => cmd_fit(cli),
        Command::Bounds => cmd_bounds(cli),
        Command::JumpTable => cmd_jump_table(cli),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
