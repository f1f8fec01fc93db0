use thiserror::Error;

/// Errors raised by the flow-matching laboratory.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain where the quantity is defined.
    #[error("domain error: {0}")]
    Domain(String),

    /// Inputs violate a structural requirement (shapes, weights, positivity).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A documented precondition of the operation does not hold.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Adaptive quadrature could not reach the requested tolerance.
    #[error("quadrature did not converge: achieved error {achieved:.3e}, requested {requested:.3e}")]
    Quadrature { achieved: f64, requested: f64 },

    /// A problem size exceeds a hard cap.
    #[error("{what}: size {size} exceeds cap {cap}{hint}")]
    SizeLimit {
        what: &'static str,
        size: usize,
        cap: usize,
        hint: &'static str,
    },

    /// The ODE step size collapsed below the underflow threshold.
    #[error("step size underflow (h = {h:.3e}) at t = {t:.9}")]
    Stiff { t: f64, h: f64 },

    /// Least-squares fit could not be formed.
    #[error("fit error: {0}")]
    Fit(String),

    /// Experiment configuration was rejected during validation.
    #[error("config error at `{path}`: {msg}")]
    Config { path: String, msg: String },

    /// A module error annotated with the config section being processed.
    #[error("in `{context}`: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Prefix the config path of a propagated error with `ctx`.
    pub fn with_context(self, ctx: &str) -> Self {
        match self {
            Error::Config { path, msg } => Error::Config {
                path: format!("{ctx}.{path}"),
                msg,
            },
            Error::Context { context, source } => Error::Context {
                context: format!("{ctx}.{context}"),
                source,
            },
            other => Error::Context {
                context: ctx.to_string(),
                source: Box::new(other),
            },
        }
    }

    /// True for configuration and validation failures, as opposed to
    /// failures during computation.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config { .. } => true,
            Error::Context { source, .. } => source.is_config(),
            _ => false,
        }
    }
}
