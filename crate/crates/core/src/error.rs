use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: u64, msg: String },

    #[error("invalid value in row {row}: {msg}")]
    InvalidRow { row: usize, msg: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    #[error("column `{0}` is constant")]
    DegenerateColumn(String),

    #[error("singular design: column {index} (`{name}`) is linearly dependent on earlier columns")]
    SingularDesign { index: usize, name: String },

    #[error("logistic regression needs both classes present")]
    SingleClass,

    #[error("{0} arm is empty")]
    EmptyArm(&'static str),

    #[error("missing nuisance estimate `{0}`")]
    MissingNuisance(&'static str),

    #[error("propensity {value} of unit {index} is outside ({lo}, {hi})")]
    PropensityOutOfBounds {
        index: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("dataset has {0} missing covariate cells; impute first")]
    MissingValues(usize),

    #[error("column `{0}` has no observed values")]
    FullyMissing(String),

    #[error("need at least {needed} imputations, got {got}")]
    TooFewImputations { needed: usize, got: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
