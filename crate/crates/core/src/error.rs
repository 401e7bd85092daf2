use thiserror::Error;

/// Errors surfaced by model construction, synthesis, simulation, and analysis.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("gain synthesis failed: {0}")]
    Synthesis(String),

    #[error("closed loop is not stable: spectral abscissa {0}")]
    UnstableClosedLoop(f64),

    #[error("simulation error: {0}")]
    Simulation(String),

    #[error("initial-state sampling exhausted {0} retries without a collision-free state")]
    SamplingExhausted(usize),

    #[error("analysis error: {0}")]
    Analysis(String),

    #[error("trajectory too short: {0}")]
    TrajectoryTooShort(String),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}
