use thiserror::Error;

/// Errors raised by the modeling, estimation and planning routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum DemandError {
    /// An argument lies outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Inputs disagree on dimensions or are otherwise misconfigured.
    #[error("configuration error: {0}")]
    Configuration(String),

    /// A covering leaves listeners without any segment.
    #[error("coverage gap at week {week}: uncovered listeners {uncovered:?}")]
    CoverageGap { week: usize, uncovered: Vec<usize> },

    /// An estimator failed to produce a usable fit.
    #[error("fit error: {message}")]
    Fit { message: String, trace: Vec<f64> },

    /// The change-point search could not find an interior optimum.
    #[error("degenerate envelope fit: {0}")]
    DegenerateFit(String),

    /// A phase of the envelope has too few weeks to estimate.
    #[error("phase {phase} has {weeks} week(s); at least 2 are required")]
    PhaseSupport { phase: &'static str, weeks: usize },

    /// The optimization problem has no feasible point.
    #[error("infeasible program: {0}")]
    Infeasible(String),
}

impl DemandError {
    pub(crate) fn fit(message: impl Into<String>) -> Self {
        DemandError::Fit {
            message: message.into(),
            trace: Vec::new(),
        }
    }
}

pub type Result<T> = std::result::Result<T, DemandError>;
