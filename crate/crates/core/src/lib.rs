//! Streaming-song demand as segment-wise counting processes.
//!
//! The crate simulates weekly demand over non-disjoint audience segments,
//! estimates covariate effects (logistic, Poisson and Negative-Binomial
//! regressions, and Bayesian hierarchies fit by Metropolis-within-Gibbs),
//! fits the four-phase attack/sustain/decay/release envelope, clusters
//! demand curves with DTW k-means, and plans weekly budget allocations.

pub mod bayes;
pub mod clustering;
pub mod dist;
pub mod envelope;
pub mod error;
pub mod estimation;
pub mod model;
pub mod optimizer;
pub mod rng;

pub use error::{DemandError, Result};
pub use model::{
    AffinityModel, CovariatePath, DemandCurve, Link, ListenerPopulation, Membership,
    SegmentCovering, Stratum,
};
pub use rng::DemandRng;
