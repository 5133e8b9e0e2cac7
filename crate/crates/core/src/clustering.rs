//! Listening-mode classification: DTW distance, DTW barycenter averaging
//! (DBA) and k-means over demand curves.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DemandError, Result};
use crate::rng::DemandRng;

/// Accumulated-cost matrix of the symmetric step pattern, optionally
/// restricted to a Sakoe-Chiba band of half-width `window`.
fn cost_matrix(a: &[f64], b: &[f64], window: Option<usize>) -> Vec<f64> {
    let (n, m) = (a.len(), b.len());
    let w = window.map(|w| w.max(n.abs_diff(m)));
    let mut acc = vec![f64::INFINITY; n * m];
    for i in 0..n {
        let (lo, hi) = match w {
            Some(w) => (i.saturating_sub(w), (i + w + 1).min(m)),
            None => (0, m),
        };
        for j in lo..hi {
            let d = a[i] - b[j];
            let cost = d * d;
            let prev = if i == 0 && j == 0 {
                0.0
            } else {
                let up = if i > 0 { acc[(i - 1) * m + j] } else { f64::INFINITY };
                let left = if j > 0 { acc[i * m + j - 1] } else { f64::INFINITY };
                let diag = if i > 0 && j > 0 { acc[(i - 1) * m + j - 1] } else { f64::INFINITY };
                up.min(left).min(diag)
            };
            acc[i * m + j] = prev + cost;
        }
    }
    acc
}

fn check_nonempty(a: &[f64], b: &[f64]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(DemandError::Domain("DTW needs nonempty series".into()));
    }
    Ok(())
}

/// Square root of the minimal accumulated squared cost over warping paths.
pub fn dtw_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    dtw_distance_windowed(a, b, None)
}

pub fn dtw_distance_windowed(a: &[f64], b: &[f64], window: Option<usize>) -> Result<f64> {
    check_nonempty(a, b)?;
    let acc = cost_matrix(a, b, window);
    Ok(acc[a.len() * b.len() - 1].sqrt())
}

/// Optimal warping path as `(i, j)` index pairs from `(0, 0)` to the end.
pub fn dtw_path(a: &[f64], b: &[f64]) -> Result<(f64, Vec<(usize, usize)>)> {
    check_nonempty(a, b)?;
    let (n, m) = (a.len(), b.len());
    let acc = cost_matrix(a, b, None);
    let mut path = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while i > 0 || j > 0 {
        // Prefer the diagonal on ties, then the vertical move.
        let candidates = [
            (i > 0 && j > 0).then(|| (i - 1, j - 1)),
            (i > 0).then(|| (i - 1, j)),
            (j > 0).then(|| (i, j - 1)),
        ];
        let (ni, nj) = candidates
            .into_iter()
            .flatten()
            .fold(None, |best: Option<(usize, usize)>, c| match best {
                Some(b) if acc[b.0 * m + b.1] <= acc[c.0 * m + c.1] => Some(b),
                _ => Some(c),
            })
            .expect("at least one predecessor exists");
        i = ni;
        j = nj;
        path.push((i, j));
    }
    path.reverse();
    Ok((acc[n * m - 1].sqrt(), path))
}

fn median_length(curves: &[&[f64]]) -> usize {
    let mut lengths: Vec<usize> = curves.iter().map(|c| c.len()).collect();
    lengths.sort_unstable();
    lengths[(lengths.len() - 1) / 2]
}

fn sum_squared_dtw(center: &[f64], curves: &[&[f64]]) -> f64 {
    curves
        .iter()
        .map(|c| dtw_distance(center, c).expect("nonempty").powi(2))
        .sum()
}

/// One DBA update: every center point becomes the mean of the points
/// aligned to it.
fn dba_step(center: &[f64], curves: &[&[f64]]) -> Vec<f64> {
    let mut sums = vec![0.0; center.len()];
    let mut counts = vec![0usize; center.len()];
    for curve in curves {
        let (_, path) = dtw_path(center, curve).expect("nonempty");
        for (i, j) in path {
            sums[i] += curve[j];
            counts[i] += 1;
        }
    }
    sums.iter()
        .zip(&counts)
        .zip(center)
        .map(|((s, &c), &old)| if c > 0 { s / c as f64 } else { old })
        .collect()
}

/// Barycenter and its inertia after each iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Barycenter {
    pub center: Vec<f64>,
    pub inertia_trace: Vec<f64>,
}

/// DTW barycenter averaging, starting from `init` or else from the first
/// curve whose length is the median length.
pub fn dba_barycenter_from(curves: &[&[f64]], init: Option<&[f64]>, iterations: usize) -> Result<Barycenter> {
    if curves.is_empty() {
        return Err(DemandError::Domain("DBA needs at least one curve".into()));
    }
    if curves.iter().any(|c| c.is_empty()) {
        return Err(DemandError::Domain("DBA needs nonempty curves".into()));
    }
    let mut center = match init {
        Some(c) if !c.is_empty() => c.to_vec(),
        _ => {
            let len = median_length(curves);
            curves.iter().find(|c| c.len() == len).expect("median is attained").to_vec()
        }
    };
    let mut inertia = sum_squared_dtw(&center, curves);
    let mut trace = vec![inertia];
    for _ in 0..iterations {
        let next = dba_step(&center, curves);
        let next_inertia = sum_squared_dtw(&next, curves);
        if next_inertia >= inertia {
            break;
        }
        center = next;
        inertia = next_inertia;
        trace.push(inertia);
    }
    Ok(Barycenter { center, inertia_trace: trace })
}

pub fn dba_barycenter(curves: &[&[f64]], iterations: usize) -> Result<Vec<f64>> {
    Ok(dba_barycenter_from(curves, None, iterations)?.center)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveCluster {
    pub centroid: Vec<f64>,
    pub members: Vec<String>,
    pub inertia: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub max_iterations: usize,
    pub dba_iterations: usize,
    pub z_normalize: bool,
    /// Independent seedings; the run with the lowest final inertia is kept.
    pub restarts: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self { max_iterations: 50, dba_iterations: 10, z_normalize: false, restarts: 5 }
    }
}

/// Result of [`kmeans_curves`]; `inertia_trace` has one entry per iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub clusters: Vec<CurveCluster>,
    pub assignments: Vec<usize>,
    pub inertia_trace: Vec<f64>,
}

pub const DEFAULT_K: usize = 7;

fn z_normalized(series: &[f64]) -> Vec<f64> {
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    let sd = (series.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sd == 0.0 {
        return vec![0.0; series.len()];
    }
    series.iter().map(|v| (v - mean) / sd).collect()
}

fn nearest(curve: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    centroids
        .iter()
        .enumerate()
        .map(|(k, c)| (k, dtw_distance(curve, c).expect("nonempty").powi(2)))
        .fold((0, f64::INFINITY), |best, cand| if cand.1 < best.1 { cand } else { best })
}

/// k-means over curves with DTW assignment and DBA centroids, seeded by
/// k-means++ on squared DTW distances.
pub fn kmeans_curves(
    curves: &[(String, Vec<f64>)],
    k: usize,
    seed: u64,
    config: &KMeansConfig,
) -> Result<Clustering> {
    let n = curves.len();
    if k == 0 || k > n {
        return Err(DemandError::Domain(format!("k = {k} must lie in 1..={n}")));
    }
    if curves.iter().any(|(_, c)| c.is_empty()) {
        return Err(DemandError::Domain("curves must be nonempty".into()));
    }
    let series: Vec<Vec<f64>> = curves
        .iter()
        .map(|(_, c)| if config.z_normalize { z_normalized(c) } else { c.clone() })
        .collect();
    let rng = DemandRng::seed_from(seed);
    let mut best: Option<(Vec<usize>, Vec<Vec<f64>>, Vec<f64>)> = None;
    for restart in 0..config.restarts.max(1) {
        let mut run_rng = rng.split(restart as u64);
        let run = single_run(&series, k, &mut run_rng, config);
        let better = match &best {
            None => true,
            Some(b) => run.2.last() < b.2.last(),
        };
        if better {
            best = Some(run);
        }
    }
    let (assignments, centroids, inertia_trace) = best.expect("at least one run");

    let clusters = (0..k)
        .map(|cluster| {
            let idx: Vec<usize> = (0..n).filter(|&i| assignments[i] == cluster).collect();
            CurveCluster {
                centroid: centroids[cluster].clone(),
                members: idx.iter().map(|&i| curves[i].0.clone()).collect(),
                inertia: idx
                    .iter()
                    .map(|&i| dtw_distance(&series[i], &centroids[cluster]).expect("nonempty").powi(2))
                    .sum(),
            }
        })
        .collect();
    Ok(Clustering { clusters, assignments, inertia_trace })
}

fn single_run(
    series: &[Vec<f64>],
    k: usize,
    rng: &mut DemandRng,
    config: &KMeansConfig,
) -> (Vec<usize>, Vec<Vec<f64>>, Vec<f64>) {
    let n = series.len();
    // k-means++ seeding; a single cluster starts where plain DBA would.
    let first = if k == 1 {
        let refs: Vec<&[f64]> = series.iter().map(Vec::as_slice).collect();
        let len = median_length(&refs);
        series.iter().position(|s| s.len() == len).expect("median is attained")
    } else {
        rng.below(n)
    };
    let mut chosen = vec![first];
    let mut d2: Vec<f64> = series
        .par_iter()
        .map(|s| dtw_distance(s, &series[chosen[0]]).expect("nonempty").powi(2))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.uniform() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.expect("positive total has a positive weight")
        } else {
            // Remaining curves duplicate the chosen ones.
            (0..n).find(|i| !chosen.contains(i)).expect("k <= n")
        };
        chosen.push(next);
        let fresh: Vec<f64> = series
            .par_iter()
            .map(|s| dtw_distance(s, &series[next]).expect("nonempty").powi(2))
            .collect();
        for (d, f) in d2.iter_mut().zip(fresh) {
            *d = d.min(f);
        }
    }
    let mut centroids: Vec<Vec<f64>> = chosen.iter().map(|&i| series[i].clone()).collect();

    let mut assignments = vec![usize::MAX; n];
    let mut inertia_trace = Vec::new();
    for _ in 0..config.max_iterations {
        let nearest_all: Vec<(usize, f64)> =
            series.par_iter().map(|s| nearest(s, &centroids)).collect();
        let mut new_assign: Vec<usize> = nearest_all.iter().map(|&(c, _)| c).collect();
        // An emptied cluster takes the curve farthest from its centroid.
        for cluster in 0..k {
            if !new_assign.contains(&cluster) {
                let far = (0..n)
                    .filter(|&i| new_assign.iter().filter(|&&a| a == new_assign[i]).count() > 1)
                    .max_by(|&a, &b| nearest_all[a].1.total_cmp(&nearest_all[b].1))
                    .expect("some cluster has two members");
                new_assign[far] = cluster;
                centroids[cluster] = series[far].clone();
            }
        }
        let stable = new_assign == assignments;
        assignments = new_assign;
        centroids = (0..k)
            .into_par_iter()
            .map(|cluster| {
                let members: Vec<&[f64]> = (0..n)
                    .filter(|&i| assignments[i] == cluster)
                    .map(|i| series[i].as_slice())
                    .collect();
                dba_barycenter_from(&members, Some(&centroids[cluster]), config.dba_iterations)
                    .expect("clusters are nonempty")
                    .center
            })
            .collect();
        let inertia: f64 = (0..n)
            .map(|i| dtw_distance(&series[i], &centroids[assignments[i]]).expect("nonempty").powi(2))
            .sum();
        inertia_trace.push(inertia);
        if stable {
            break;
        }
    }
    (assignments, centroids, inertia_trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dtw_examples() {
        assert_eq!(dtw_distance(&[1.0, 4.0, 2.0], &[1.0, 4.0, 2.0]).unwrap(), 0.0);
        assert!((dtw_distance(&[0.0; 3], &[1.0; 3]).unwrap() - 3f64.sqrt()).abs() < 1e-15);
        assert_eq!(dtw_distance(&[1.0, 2.0, 3.0], &[1.0, 2.0, 2.0, 3.0]).unwrap(), 0.0);
        assert!(dtw_distance(&[], &[1.0]).is_err());
    }

    #[test]
    fn window_never_beats_unconstrained() {
        let a = [0.0, 1.0, 5.0, 2.0, 0.0, 0.0];
        let b = [0.0, 0.0, 0.0, 1.0, 5.0, 2.0];
        let free = dtw_distance(&a, &b).unwrap();
        let banded = dtw_distance_windowed(&a, &b, Some(1)).unwrap();
        assert!(banded >= free);
    }

    #[test]
    fn path_cost_matches_distance() {
        let a = [0.0, 2.0, 3.0, 1.0];
        let b = [0.0, 1.0, 2.0, 3.0, 3.0, 0.0];
        let (dist, path) = dtw_path(&a, &b).unwrap();
        let cost: f64 = path.iter().map(|&(i, j)| (a[i] - b[j]).powi(2)).sum();
        assert!((cost.sqrt() - dist).abs() < 1e-12);
        assert_eq!(path.first(), Some(&(0, 0)));
        assert_eq!(path.last(), Some(&(3, 5)));
    }

    #[test]
    fn dba_fixed_points() {
        let c = [0.0, 3.0, 5.0, 2.0];
        assert_eq!(dba_barycenter(&[&c], 5).unwrap(), c.to_vec());
        assert_eq!(dba_barycenter(&[&c, &c], 5).unwrap(), c.to_vec());
    }

    #[test]
    fn dba_inertia_non_increasing() {
        let a = [0.0, 2.0, 6.0, 4.0, 1.0];
        let b = [0.0, 1.0, 3.0, 7.0, 3.0, 0.0];
        let c = [0.0, 5.0, 3.0, 1.0];
        let bary = dba_barycenter_from(&[&a, &b, &c], None, 20).unwrap();
        assert_eq!(bary.center.len(), 5);
        for w in bary.inertia_trace.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    fn labelled(n: usize) -> Vec<(String, Vec<f64>)> {
        (0..n)
            .map(|i| (format!("c{i}"), (0..8).map(|t| ((i * 7 + t * 3) % 11) as f64).collect()))
            .collect()
    }

    #[test]
    fn k_equals_n_has_zero_inertia() {
        let curves = labelled(6);
        let out = kmeans_curves(&curves, 6, 1, &KMeansConfig::default()).unwrap();
        assert!(out.clusters.iter().all(|c| c.members.len() == 1 && c.inertia == 0.0));
    }

    #[test]
    fn k_one_is_dba_of_all() {
        let curves = labelled(5);
        let config = KMeansConfig { dba_iterations: 200, ..KMeansConfig::default() };
        let out = kmeans_curves(&curves, 1, 3, &config).unwrap();
        assert_eq!(out.clusters[0].members.len(), 5);
        let refs: Vec<&[f64]> = curves.iter().map(|(_, c)| c.as_slice()).collect();
        let direct = dba_barycenter(&refs, 200).unwrap();
        assert_eq!(out.clusters[0].centroid, direct);
        assert!(kmeans_curves(&curves, 6, 3, &KMeansConfig::default()).is_err());
    }

    #[test]
    fn kmeans_is_deterministic() {
        let curves = labelled(9);
        let a = kmeans_curves(&curves, 3, 42, &KMeansConfig::default()).unwrap();
        let b = kmeans_curves(&curves, 3, 42, &KMeansConfig::default()).unwrap();
        assert_eq!(a, b);
        for w in a.inertia_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
    }
}
