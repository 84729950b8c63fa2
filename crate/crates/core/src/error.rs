use thiserror::Error;

/// Location of a curve inside a [`crate::data::Dataset`], as (subject index, curve index).
pub type CurveRef = (usize, usize);

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid basis: {0}")]
    InvalidBasis(String),

    #[error("non-finite value for {0}")]
    NonFinite(&'static str),

    #[error("derivative order {order} exceeds spline degree {degree}")]
    DerivativeOrder { order: usize, degree: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("trajectory diverged{}: |X| exceeded {bound:e} at t = {t}", curve_label(.curve))]
    Diverged { curve: Option<CurveRef>, t: f64, bound: f64 },

    #[error("gradient function within floor {floor:e} along trajectory (|g| = {value:e})")]
    GradientFloor { floor: f64, value: f64 },

    #[error("trajectory is not strictly monotone; closed-form sensitivities unavailable")]
    NotMonotone,

    #[error("time {0} outside [0, 1]")]
    TimeOutOfRange(f64),

    #[error("data error: {0}")]
    Data(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("variance estimator unavailable: {0}")]
    Variance(String),

    #[error("no candidate converged")]
    NoConvergence,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn curve_label(curve: &Option<CurveRef>) -> String {
    match curve {
        Some((i, l)) => format!(" on subject {i}, curve {l}"),
        None => String::new(),
    }
}

pub type Result<T> = std::result::Result<T, Error>;
