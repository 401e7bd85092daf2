//! Scenario configuration: a single JSON document whose defaults reproduce
//! the reference two-lane setup, so an empty config is a valid run.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use laneweave::analysis::{FitOptions, RegimeThresholds};
use laneweave::control::ControllerSpec;
use laneweave::gain::WeightSpec;
use laneweave::ovm::OvmParams;
use laneweave::sim::{DynamicsMode, SimOptions};
use serde::{Deserialize, Serialize};

/// CLI failure split by exit code: misconfiguration (2) versus a failure
/// during an otherwise valid run (1).
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    /// Core errors from value checks are configuration problems; everything
    /// else happened mid-run.
    pub fn from_core(err: laneweave::Error) -> CliError {
        match err {
            laneweave::Error::InvalidParameter(_) => CliError::Config(err.to_string()),
            _ => CliError::Runtime(err.to_string()),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::Runtime(msg) => write!(f, "{msg}"),
        }
    }
}

impl std::error::Error for CliError {}

/// Post-run analysis switches and the constants the envelope comparison
/// uses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisOptions {
    pub orbit: bool,
    pub regime: bool,
    pub bounds: bool,
    pub fit: bool,
    /// Estimated jump sizes fed to the per-round envelope, replacing the
    /// measured deltas so the bound stays a prediction.
    pub jump_enter_estimate: f64,
    pub jump_exit_estimate: f64,
    pub use_state_dependent: bool,
}

impl Default for AnalysisOptions {
    fn default() -> AnalysisOptions {
        AnalysisOptions {
            orbit: true,
            regime: true,
            bounds: true,
            fit: true,
            jump_enter_estimate: 15.0,
            jump_exit_estimate: 20.0,
            use_state_dependent: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub ovm: OvmParams,
    /// Vehicles in the lane that starts with the automated vehicle; the
    /// other lane starts with one fewer.
    pub n: usize,
    pub controller: ControllerSpec,
    pub horizon: f64,
    pub dt: f64,
    /// Random initial state when set; both lanes start at equilibrium
    /// otherwise.
    pub seed: Option<u64>,
    pub dynamics: DynamicsMode,
    pub output_dir: Option<PathBuf>,
    pub weights: WeightSpec,
    pub emergency_braking: bool,
    pub snapshot_stride: usize,
    pub analysis: AnalysisOptions,
    pub regime_thresholds: RegimeThresholds,
    pub fit: FitOptions,
}

impl Default for ScenarioConfig {
    fn default() -> ScenarioConfig {
        ScenarioConfig {
            ovm: OvmParams::default(),
            n: 20,
            controller: ControllerSpec::FixedDuration { period: 30.0 },
            horizon: 600.0,
            dt: 0.01,
            seed: None,
            dynamics: DynamicsMode::Nonlinear,
            output_dir: None,
            weights: WeightSpec::default(),
            emergency_braking: true,
            snapshot_stride: 100,
            analysis: AnalysisOptions::default(),
            regime_thresholds: RegimeThresholds::default(),
            fit: FitOptions::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<ScenarioConfig, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut de = serde_json::Deserializer::from_str(&text);
        let config: ScenarioConfig = serde_path_to_error::deserialize(&mut de)
            .map_err(|e| {
                CliError::Config(format!("{}: {}: {}", path.display(), e.path(), e.inner()))
            })?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let field = |name: &str, err: laneweave::Error| {
            CliError::Config(format!("{name}: {err}"))
        };
        self.ovm.validate().map_err(|e| field("ovm", e))?;
        if self.n < 3 {
            return Err(CliError::Config("n: need at least 3 vehicles".into()));
        }
        self.controller
            .validate(self.n, &self.ovm)
            .map_err(|e| field("controller", e))?;
        if !(self.horizon > 0.0) {
            return Err(CliError::Config("horizon: must be positive".into()));
        }
        if !(self.dt > 0.0) {
            return Err(CliError::Config("dt: must be positive".into()));
        }
        if self.snapshot_stride == 0 {
            return Err(CliError::Config(
                "snapshot_stride: must be at least 1".into(),
            ));
        }
        self.weights.validate().map_err(|e| field("weights", e))?;
        self.fit.validate().map_err(|e| field("fit", e))?;
        self.regime_thresholds
            .validate()
            .map_err(|e| field("regime_thresholds", e))?;
        if !(self.analysis.jump_enter_estimate >= 0.0)
            || !(self.analysis.jump_exit_estimate >= 0.0)
        {
            return Err(CliError::Config(
                "analysis.jump_enter_estimate/jump_exit_estimate: must be nonnegative".into(),
            ));
        }
        Ok(())
    }

    pub fn sim_options(&self) -> SimOptions {
        SimOptions {
            dt: self.dt,
            dynamics: self.dynamics,
            emergency_braking: self.emergency_braking,
            snapshot_stride: self.snapshot_stride,
        }
    }

    /// The same scenario with the switching period replaced, for sweeps.
    pub fn with_period(&self, period: f64) -> ScenarioConfig {
        let mut config = self.clone();
        config.controller = respec_period(&self.controller, period);
        config
    }
}

fn respec_period(spec: &ControllerSpec, new_period: f64) -> ControllerSpec {
    match spec.clone() {
        ControllerSpec::FixedDuration { .. } => ControllerSpec::FixedDuration {
            period: new_period,
        },
        ControllerSpec::Anticipatory {
            p_ex, s_hat_av, ..
        } => ControllerSpec::Anticipatory {
            period: new_period,
            p_ex,
            s_hat_av,
        },
        ControllerSpec::TrafficAware {
            period,
            window,
            p_en_s,
            p_en_v,
            base,
        } => ControllerSpec::TrafficAware {
            period: new_period,
            // Keep the window the same fraction of the period.
            window: window * new_period / period,
            p_en_s,
            p_en_v,
            base: Box::new(respec_period(&base, new_period)),
        },
    }
}
