use thiserror::Error;

/// Unified error taxonomy for the crate.
///
/// `Shape` names both offending shapes, `Precondition` covers out-of-range
/// arguments, `Numeric` covers non-finite values where finiteness is a
/// contract, `Config` covers bad run configuration (unknown keys, missing
/// category list, invalid ranges), `Consistency` covers cross-file mismatches
/// such as predictions referencing unknown images.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    Shape {
        op: &'static str,
        lhs: String,
        rhs: String,
    },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("training diverged at step {step}: loss {loss}; last finite step {last_finite_step} had loss {last_finite_loss}")]
    Diverged {
        step: usize,
        loss: f64,
        last_finite_step: usize,
        last_finite_loss: f64,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: format!("{lhs:?}"),
            rhs: format!("{rhs:?}"),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
