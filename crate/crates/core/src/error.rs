use thiserror::Error;

/// Errors raised anywhere in the simulation and estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("mode index {mode} out of range for {n_modes} modes")]
    ModeOutOfRange { mode: usize, n_modes: usize },

    #[error("cutoff {cutoff} too small: photon number {occupied} plus power {power} exceeds it")]
    CutoffTooSmall {
        cutoff: usize,
        occupied: usize,
        power: usize,
    },

    #[error("not a valid density matrix: {0}")]
    InvalidDensityMatrix(String),

    #[error("target state is not pure (purity {purity})")]
    TargetNotPure { purity: f64 },

    #[error("probability {0} outside [0, 1]")]
    ProbabilityOutOfRange(f64),

    #[error("{excited} excited qubits do not fit in cutoff {cutoff}")]
    TooManyExcitations { excited: usize, cutoff: usize },

    #[error("active qubit {0} is not resonant with the shared frequency")]
    NonResonant(usize),

    #[error("unsupported preparation: {0}")]
    UnsupportedPreparation(String),

    #[error("collective decay matrix is not positive semidefinite (eigenvalue {0})")]
    DecayNotPositive(f64),

    #[error("integrator step size underflow at t = {t}")]
    StepUnderflow { t: f64 },

    #[error("non-finite state encountered at t = {t}")]
    NonFinite { t: f64 },

    #[error("time {requested} exceeds integration horizon {horizon}")]
    HorizonExceeded { requested: f64, horizon: f64 },

    #[error("final time {final_time} shorter than required {required}")]
    InsufficientTime { final_time: f64, required: f64 },

    #[error("rejection bound search failed: {0}")]
    BoundSearch(String),

    #[error("acceptance rate {0:e} too low for rejection sampling")]
    AcceptanceTooLow(f64),

    #[error("empty record batch")]
    EmptyBatch,

    #[error("record batch has label {got}, expected {expected}")]
    WrongPrepLabel { expected: String, got: String },

    #[error("moment table incomplete to order {0}")]
    IncompleteTable(usize),

    #[error("H matrix diagonal entry {index} is {value}, expected 1")]
    NonUnitDiagonal { index: usize, value: String },

    #[error("no sign change of calibration function in [{lo:e}, {hi:e}]")]
    NoBracket { lo: f64, hi: f64 },

    #[error("optimizer did not converge: {0}")]
    NonConvergence(String),

    #[error("fit residual {residual:e} exceeds limit {limit:e}")]
    ResidualTooLarge { residual: f64, limit: f64 },

    #[error("noise data inconsistent with a thermal state: {0}")]
    NotThermal(String),

    #[error("ill-conditioned fit: {0}")]
    IllConditioned(String),

    #[error("thermal occupation must be positive for a finite temperature")]
    ZeroOccupation,

    #[error("file format error: {0}")]
    Format(String),

    #[error("stage {stage} failed (config {config_hash}): {source}")]
    Stage {
        stage: String,
        config_hash: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
