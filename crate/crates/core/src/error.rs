use thiserror::Error;

/// Where a singular Gram matrix was encountered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GramScope {
    Unit(usize),
    Pooled,
}

impl std::fmt::Display for GramScope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GramScope::Unit(i) => write!(f, "unit {i}"),
            GramScope::Pooled => write!(f, "pooled design"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("panel is already demeaned")]
    AlreadyDemeaned,

    #[error("panel must be demeaned before estimation")]
    NotDemeaned,

    #[error("singular Gram matrix for {0}")]
    SingularGram(GramScope),

    #[error("empty unit subset")]
    EmptySubset,

    #[error("unit {0} has no group assignment")]
    UnassignedUnit(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("k = {k} exceeds the number of points ({n})")]
    KTooLarge { k: usize, n: usize },

    #[error("k grid up to {k_max} is too large for {n} points")]
    KGridTooLarge { k_max: usize, n: usize },

    #[error("index method needs k_max >= 2")]
    MethodNeedsK2,

    #[error("partitions have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),

    #[error("degenerate residuals for unit {0}")]
    DegenerateResiduals(usize),

    #[error("too few periods: T = {periods} cannot hold {folds} folds")]
    TooFewPeriods { periods: usize, folds: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed panel data: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
