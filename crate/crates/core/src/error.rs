use thiserror::Error;

#[derive(Debug, Error)]
pub enum AmcError {
    #[error("dimension mismatch in {context}: expected {expected:?}, got {actual:?}")]
    Dimension {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// The sampler family cannot evaluate its own density.
    #[error("sampler family `{0}` has no tractable density")]
    UnsupportedDensity(String),

    #[error("kernel error at particle {particle}: {message} (z = {z:?})")]
    Kernel {
        particle: usize,
        message: String,
        z: Vec<f64>,
    },

    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<AmcError>,
    },

    #[error("parse error at row {row}, column '{column}': {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl AmcError {
    pub fn dimension(context: impl Into<String>, expected: &[usize], actual: &[usize]) -> Self {
        AmcError::Dimension {
            context: context.into(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    pub fn at_iteration(self, iteration: usize) -> Self {
        match self {
            e @ AmcError::AtIteration { .. } => e,
            other => AmcError::AtIteration {
                iteration,
                source: Box::new(other),
            },
        }
    }

    /// Strips iteration wrappers to get at the underlying failure.
    pub fn root(&self) -> &AmcError {
        match self {
            AmcError::AtIteration { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn is_numerical(&self) -> bool {
        matches!(
            self.root(),
            AmcError::NonFiniteGradient { .. } | AmcError::NonFinite(_) | AmcError::Kernel { .. }
        )
    }

    pub fn is_io(&self) -> bool {
        matches!(self.root(), AmcError::Io(_) | AmcError::Csv(_))
    }
}

pub type Result<T> = std::result::Result<T, AmcError>;
