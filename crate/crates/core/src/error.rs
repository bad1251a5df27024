use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("switch position {0} outside [-1, 1]")]
    InvalidSwitchPosition(f64),

    #[error("time step must be positive, got {0}")]
    NonPositiveStep(f64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("even harmonic order {0} requested; quarter-wave patterns only carry odd orders")]
    EvenHarmonic(u32),

    #[error("modulation index {requested} not attainable (attainable range {min:.6}..{max:.6})")]
    Infeasible { requested: f64, min: f64, max: f64 },

    #[error("modulation index {m} outside table range [{lo}, {hi}]")]
    OutOfRange { m: f64, lo: f64, hi: f64 },

    #[error("neighbouring table rows are structurally incompatible: {0}")]
    IncompatibleRows(String),

    #[error("pattern is not periodic: phase {phase} nets a level change of {net}")]
    NonPeriodic { phase: usize, net: f64 },

    #[error("impedance denominator is singular at {freq_hz} Hz (|den| = {magnitude:e})")]
    Singular { freq_hz: f64, magnitude: f64 },

    #[error("no sign change of the resistance between {lo} Hz and {hi} Hz")]
    NoCrossing { lo: f64, hi: f64 },

    #[error("measurement window {window} s is not an integer number of periods of {freq_hz} Hz")]
    NonIntegerWindow { window: f64, freq_hz: f64 },

    #[error("current phasor at {freq_hz} Hz is below the numeric floor ({magnitude:e} A)")]
    Unmeasurable { freq_hz: f64, magnitude: f64 },

    #[error("frequency grids do not match: {0}")]
    GridMismatch(String),

    #[error("inconsistent configuration: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
