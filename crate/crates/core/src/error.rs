use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition of an operation was not met by its inputs.
    #[error("contract violation in {op}: {msg}")]
    Contract { op: &'static str, msg: String },

    #[error("numerical failure in {op}: {msg} (relative residual {residual:.3e})")]
    Numerical {
        op: &'static str,
        msg: String,
        residual: f64,
    },

    #[error("law evaluation failed at z = {re}{im:+}i: {msg}")]
    LawEval { re: f64, im: f64, msg: String },

    #[error("solve failed at frequency xi = {xi}: {source}")]
    Frequency {
        xi: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("quadrature did not converge: {0}")]
    Quadrature(String),

    #[error("resolution: {0}")]
    Resolution(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(op: &'static str, msg: impl Into<String>) -> Error {
    Error::Contract {
        op,
        msg: msg.into(),
    }
}
