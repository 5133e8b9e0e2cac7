//! Slow, independent reference implementations.
//!
//! Nothing here shares code with `songdemand-core`. Each oracle takes the
//! most literal route available (enumerating vertices, paths, sequences or
//! knot tuples) so that the fast implementations can be checked against it.

pub mod changepoints;
pub mod dtw;
pub mod linalg;
pub mod lp;
pub mod reallocation;
pub mod strata;
