//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Event stream handed to `slice_stream` is not sorted by timestamp.
    #[error("events not sorted by timestamp: event {index} (t={t}) precedes t={prev}")]
    UnsortedEvents { index: usize, t: f64, prev: f64 },

    /// Volume with `t_end <= t_start` cannot be normalized.
    #[error("degenerate volume interval [{t_start}, {t_end}]")]
    DegenerateInterval { t_start: f64, t_end: f64 },

    /// Event coordinates outside the sensor.
    #[error("event {index} at ({x}, {y}) outside {h}x{w} sensor")]
    EventOutOfBounds {
        index: usize,
        x: u16,
        y: u16,
        h: usize,
        w: usize,
    },

    /// An operation that requires normalized timestamps got raw ones.
    #[error("operation requires a timestamp-normalized volume")]
    UnnormalizedVolume,

    /// Tensor shape disagreement; `context` names the offending dimension
    /// or decoder level.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    /// Bad configuration value (also covers config-file parse problems).
    #[error("configuration error: {0}")]
    Config(String),

    /// Synthetic particle leaves the sensor during the scene.
    #[error("particle {index} exits sensor bounds at t={t:.4}s (position {x:.2}, {y:.2})")]
    ParticleOutOfBounds { index: usize, t: f64, x: f64, y: f64 },

    /// Metric is undefined for the given inputs (empty mask, zero baseline).
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    /// Training aborted on a non-finite loss; the breakdown is included for
    /// diagnosis.
    #[error("non-finite loss at step {step}: {breakdown}")]
    NonFiniteLoss { step: usize, breakdown: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
