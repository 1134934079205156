use thiserror::Error;

/// Errors raised by the numerical routines and the command-line driver.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("integration blew up at t = {time}: {detail}")]
    Integration { time: f64, detail: String },

    #[error("diffusion coefficient out of bounds at t = {time}: sigma_hat^2 = {value} not in [{lower}, {upper}]")]
    Ellipticity {
        time: f64,
        value: f64,
        lower: f64,
        upper: f64,
    },

    #[error("degenerate direction: coordinate x{coordinate} has empirical variance {variance:e}; use the x1 marginal or eps_reg > 0")]
    DegenerateDirection { coordinate: usize, variance: f64 },

    #[error("uncontrollable linearization: Gramian is singular along direction {direction:?} (eigenvalue {eigenvalue:e})")]
    Uncontrollable {
        direction: [f64; 3],
        eigenvalue: f64,
    },

    #[error("feedback undefined within {floor} of the horizon (t = {time})")]
    HorizonFloor { time: f64, floor: f64 },

    #[error("unreachable target at this noise level: mollified mean {mean:e} underflows")]
    Unreachable { mean: f64 },

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("{failed} of {total} trajectories failed (first: {first})")]
    Simulation {
        failed: usize,
        total: usize,
        first: String,
    },

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_finite(label: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Domain(format!("{label} has non-finite components: {values:?}")))
    }
}
