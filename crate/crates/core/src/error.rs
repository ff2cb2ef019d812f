use thiserror::Error;

/// Errors raised by model construction, solvers and diagnostics.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("step {step} infeasible: total jump probability {mass} exceeds 1")]
    InfeasibleStep { step: usize, mass: f64 },

    #[error("clock is not nondecreasing at index {index} ({prev} -> {next})")]
    NonMonotoneClock { index: usize, prev: f64, next: f64 },

    #[error("lattice would need {required} nodes, cap is {cap}")]
    NodeCapExceeded { required: u128, cap: usize },

    #[error("invalid law: {0}")]
    InvalidLaw(String),

    #[error("missing value for node {node} at step {step}")]
    MissingValue { step: usize, node: usize },

    #[error("driver `{driver}` returned non-finite value at step {step} (y = {y}, u = {u:?})")]
    NonFiniteDriver {
        driver: String,
        step: usize,
        y: f64,
        u: Vec<f64>,
    },

    #[error("exponential overflow in {context}; rescale (smaller lambda, p or payoff)")]
    ExponentialOverflow { context: String },

    #[error("implicit solve at step {step}, node {node} did not converge (residual {residual:e})")]
    ImplicitSolveFailed {
        step: usize,
        node: usize,
        residual: f64,
    },

    #[error("step {step} too coarse: Lipschitz constant times dA = {product} > 1/2; refine the grid")]
    StepTooCoarse { step: usize, product: f64 },

    #[error("driver `{0}` reads the law argument but no frozen laws were supplied")]
    MissingLaws(String),

    #[error("invalid stopping rule: {0}")]
    InvalidStoppingRule(String),

    #[error("terminal value below obstacle at {} terminal node(s): {nodes:?}", nodes.len())]
    TerminalInconsistent { nodes: Vec<usize> },

    #[error("lattice exceeds enumeration guard: {0}; use the dynamic-programming solver")]
    EnumerationGuard(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("Picard iteration cap {cap} reached; last gaps {gaps:?}")]
    PicardCap { cap: usize, gaps: Vec<f64> },

    #[error("exponential moment blow-up detected at iteration {iteration}: {detail}")]
    MomentBlowUp { iteration: usize, detail: String },

    #[error("no feasible horizon split within {max_windows} windows (largest window alpha {alpha})")]
    SplitInfeasible { max_windows: usize, alpha: f64 },

    #[error("fixed-point iteration diverged: {0}")]
    Divergence(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, Error>;
