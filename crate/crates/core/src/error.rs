use thiserror::Error;

/// Errors raised by the solvers and simulators.
#[derive(Debug, Error)]
pub enum QsdError {
    #[error("not a sub-generator: {0}")]
    NotSubGenerator(String),

    #[error("generator is reducible: states {unreachable:?} are not mutually reachable from state 0")]
    Reducible { unreachable: Vec<usize> },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{what} did not converge after {iterations} iterations (last change {last_change:e})")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
        last_change: f64,
    },

    #[error("survival probability underflows at t = {t}; use the log-space variant")]
    Underflow { t: f64 },

    #[error("birth-death rate table has {len} entries, index {index} requested")]
    TableTooShort { len: usize, index: usize },

    #[error("parameter {param} = {value} outside the admissible range {range}")]
    OutOfRange {
        param: &'static str,
        value: f64,
        range: String,
    },

    #[error("population exceeded cap {cap} at generation {generation}")]
    PopulationOverflow { cap: u64, generation: usize },

    #[error("step cap {cap} reached before t_max")]
    StepCap { cap: u64 },

    #[error("quadrature failed near x = {near} (local exponent {exponent:.3})")]
    Quadrature { near: f64, exponent: f64 },

    #[error("grid too coarse: h*|q| = {value:.3} >= 1 at x = {x} with {n_grid} points")]
    GridTooCoarse { x: f64, value: f64, n_grid: usize },

    #[error("all {particles} particles absorbed in one step at t = {t}")]
    EnsembleCollapse { particles: usize, t: f64 },

    #[error("inconclusive {what}: {detail}")]
    Inconclusive { what: &'static str, detail: String },

    #[error("measures are not comparable: {0}")]
    Mismatch(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, QsdError>;
