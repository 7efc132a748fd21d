use thiserror::Error;

use crate::expr::ExprError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid coefficient `{what}`: {source}")]
    Coefficient {
        what: String,
        #[source]
        source: ExprError,
    },
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("trivial problem: alpha = {alpha} does not exceed phi(x0) = {phi0}")]
    Trivial { alpha: f64, phi0: f64 },
    #[error("unknown problem `{0}`")]
    UnknownProblem(String),
    #[error("invalid control: {0}")]
    Control(String),
    #[error("{invalid} of {total} paths hit a coefficient domain error")]
    InvalidPaths { invalid: usize, total: usize },
    #[error("non-finite mean-constraint curve at t = {0}")]
    NonFiniteCurve(f64),
    #[error("constraint rate |h(tau)| = {0:e} is below the reliability floor")]
    DegenerateRate(f64),
    #[error("backend precondition violated: {0}")]
    Backend(String),
    #[error("regression is rank deficient: {0}")]
    RankDeficient(String),
    #[error("combinatorial budget exceeded: {0} candidate controls")]
    Budget(u128),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
