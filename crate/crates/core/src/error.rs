use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index {index:?} out of range for grid {dims:?}")]
    IndexOutOfRange { index: [usize; 4], dims: [usize; 4] },

    #[error("axis {axis} out of range (expected 0..4)")]
    AxisOutOfRange { axis: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("numerical instability: non-finite value at iteration {iteration}")]
    NumericalInstability { iteration: usize },

    #[error("all dissipation bounds are zero; the system is static and has no stable time step")]
    StaticSystem,

    #[error("cannot convert {0} to fixed point")]
    Conversion(f64),

    #[error("state outside the grid on axis {axis}: {value} not in [{min}, {max}]")]
    OutOfDomain {
        axis: usize,
        value: f64,
        min: f64,
        max: f64,
    },

    #[error("stream model: {0}")]
    Stream(String),

    #[error("value file: {0}")]
    Format(String),

    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
