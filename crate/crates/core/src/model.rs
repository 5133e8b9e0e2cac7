//! Counting-process demand model over a non-disjoint covering of listeners.
//!
//! Each listener `i` in segment `j` streams a song in week `t` with
//! probability `P_{t,j}` given by an [`AffinityModel`]. Segment demand is the
//! sum of those Bernoulli utilities; song demand sums segment curves.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{DemandError, Result};
use crate::rng::DemandRng;

/// Size and horizon of the listener population.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ListenerPopulation {
    size: usize,
    horizon: usize,
}

impl ListenerPopulation {
    pub fn new(size: usize, horizon: usize) -> Result<Self> {
        if size == 0 {
            return Err(DemandError::Domain("population must be nonempty".into()));
        }
        if horizon < 4 {
            return Err(DemandError::Domain(format!(
                "horizon must span at least 4 weeks, got {horizon}"
            )));
        }
        Ok(Self { size, horizon })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }
}

pub type Membership = BTreeSet<usize>;

/// Per-week audience segments `N_t^j` over listener ids `0..N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentCovering {
    population: usize,
    /// `weeks[t][j]` is the membership of segment `j` in week `t`.
    weeks: Vec<Vec<Membership>>,
}

/// Per-week union size against the sum of segment sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub union_sizes: Vec<usize>,
    pub segment_size_sums: Vec<usize>,
}

impl CoverageReport {
    /// True when no listener belongs to two segments in any week.
    pub fn is_partition(&self) -> bool {
        self.union_sizes == self.segment_size_sums
    }
}

impl SegmentCovering {
    /// A covering that may change from week to week. Validates shape only;
    /// call [`verify_covering`] for the coverage check.
    pub fn per_week(population: usize, weeks: Vec<Vec<Membership>>) -> Result<Self> {
        if weeks.is_empty() {
            return Err(DemandError::Configuration("covering has no weeks".into()));
        }
        let segments = weeks[0].len();
        if segments == 0 {
            return Err(DemandError::Configuration("covering has no segments".into()));
        }
        for (t, week) in weeks.iter().enumerate() {
            if week.len() != segments {
                return Err(DemandError::Configuration(format!(
                    "week {t} has {} segments, expected {segments}",
                    week.len()
                )));
            }
            for (j, members) in week.iter().enumerate() {
                if members.is_empty() {
                    return Err(DemandError::Configuration(format!(
                        "segment {j} is empty in week {t}"
                    )));
                }
                if let Some(&id) = members.iter().next_back() {
                    if id >= population {
                        return Err(DemandError::Configuration(format!(
                            "listener {id} outside population of {population}"
                        )));
                    }
                }
            }
        }
        Ok(Self { population, weeks })
    }

    /// The same segments in every week.
    pub fn constant(population: usize, horizon: usize, segments: Vec<Membership>) -> Result<Self> {
        Self::per_week(population, vec![segments; horizon])
    }

    pub fn population(&self) -> usize {
        self.population
    }

    pub fn horizon(&self) -> usize {
        self.weeks.len()
    }

    pub fn segment_count(&self) -> usize {
        self.weeks[0].len()
    }

    pub fn segment(&self, t: usize, j: usize) -> &Membership {
        &self.weeks[t][j]
    }

    pub fn week(&self, t: usize) -> &[Membership] {
        &self.weeks[t]
    }
}

/// Checks that the segments cover the population in every week.
pub fn verify_covering(covering: &SegmentCovering) -> Result<CoverageReport> {
    let mut union_sizes = Vec::with_capacity(covering.horizon());
    let mut segment_size_sums = Vec::with_capacity(covering.horizon());
    for (t, week) in covering.weeks.iter().enumerate() {
        let mut covered = vec![false; covering.population];
        let mut total = 0;
        for members in week {
            total += members.len();
            for &i in members {
                covered[i] = true;
            }
        }
        let uncovered: Vec<usize> = covered
            .iter()
            .enumerate()
            .filter_map(|(i, &c)| (!c).then_some(i))
            .collect();
        if !uncovered.is_empty() {
            return Err(DemandError::CoverageGap { week: t, uncovered });
        }
        union_sizes.push(covering.population);
        segment_size_sums.push(total);
    }
    Ok(CoverageReport {
        union_sizes,
        segment_size_sums,
    })
}

/// Listeners belonging to exactly one segment in week `t`.
pub fn sparse_audience(covering: &SegmentCovering, t: usize) -> Membership {
    let mut counts = vec![0u32; covering.population];
    for members in covering.week(t) {
        for &i in members {
            counts[i] += 1;
        }
    }
    counts
        .iter()
        .enumerate()
        .filter_map(|(i, &c)| (c == 1).then_some(i))
        .collect()
}

/// Endogenous (`x`, marketing) and exogenous (`z`, ambient) covariates per week.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariatePath {
    x: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
}

impl CovariatePath {
    pub fn new(x: Vec<Vec<f64>>, z: Vec<Vec<f64>>) -> Result<Self> {
        if x.len() != z.len() {
            return Err(DemandError::Configuration(format!(
                "x spans {} weeks but z spans {}",
                x.len(),
                z.len()
            )));
        }
        let c = x.first().map_or(0, Vec::len);
        let d = z.first().map_or(0, Vec::len);
        for (t, (xt, zt)) in x.iter().zip(&z).enumerate() {
            if xt.len() != c || zt.len() != d {
                return Err(DemandError::Configuration(format!(
                    "ragged covariates at week {t}"
                )));
            }
            if let Some(v) = xt.iter().chain(zt).find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(DemandError::Domain(format!(
                    "covariate {v} at week {t} outside [0, 1]"
                )));
            }
        }
        Ok(Self { x, z })
    }

    /// `horizon` weeks of identical covariates.
    pub fn constant(horizon: usize, x: Vec<f64>, z: Vec<f64>) -> Result<Self> {
        Self::new(vec![x; horizon], vec![z; horizon])
    }

    /// Covariate-free path (C = D = 0).
    pub fn empty(horizon: usize) -> Self {
        Self {
            x: vec![Vec::new(); horizon],
            z: vec![Vec::new(); horizon],
        }
    }

    pub fn horizon(&self) -> usize {
        self.x.len()
    }

    pub fn channels(&self) -> usize {
        self.x.first().map_or(0, Vec::len)
    }

    pub fn ambient(&self) -> usize {
        self.z.first().map_or(0, Vec::len)
    }

    pub fn x(&self, t: usize) -> &[f64] {
        &self.x[t]
    }

    pub fn z(&self, t: usize) -> &[f64] {
        &self.z[t]
    }

    /// Appends one week, validating it like the constructor does.
    pub fn push(&mut self, x: Vec<f64>, z: Vec<f64>) -> Result<()> {
        let mut probe = Self::new(vec![x], vec![z])?;
        if self.horizon() > 0
            && (probe.channels() != self.channels() || probe.ambient() != self.ambient())
        {
            return Err(DemandError::Configuration("appended week has wrong dimensions".into()));
        }
        self.x.append(&mut probe.x);
        self.z.append(&mut probe.z);
        Ok(())
    }

    pub fn truncate(&mut self, horizon: usize) {
        self.x.truncate(horizon);
        self.z.truncate(horizon);
    }
}

/// How the linear predictor maps to a listening probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Link {
    /// `clamp(θx + γz, 0, 1)`.
    IdentityClipped,
    /// `1 / (1 + exp(-(θx + γz)))`.
    #[default]
    Logit,
}

/// Per-segment effects `θ^j` (length C) and `γ^j` (length D).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinityModel {
    pub theta: Vec<Vec<f64>>,
    pub gamma: Vec<Vec<f64>>,
    pub link: Link,
}

impl AffinityModel {
    pub fn new(theta: Vec<Vec<f64>>, gamma: Vec<Vec<f64>>, link: Link) -> Result<Self> {
        if theta.len() != gamma.len() || theta.is_empty() {
            return Err(DemandError::Configuration(
                "theta and gamma must list the same, nonzero number of segments".into(),
            ));
        }
        let c = theta[0].len();
        let d = gamma[0].len();
        if theta.iter().any(|t| t.len() != c) || gamma.iter().any(|g| g.len() != d) {
            return Err(DemandError::Configuration("ragged effect vectors".into()));
        }
        Ok(Self { theta, gamma, link })
    }

    pub fn segments(&self) -> usize {
        self.theta.len()
    }

    pub fn channels(&self) -> usize {
        self.theta[0].len()
    }

    pub fn ambient(&self) -> usize {
        self.gamma[0].len()
    }

    /// `θ^j x + γ^j z`.
    pub fn linear_predictor(&self, segment: usize, x: &[f64], z: &[f64]) -> Result<f64> {
        let theta = self.theta.get(segment).ok_or_else(|| {
            DemandError::Configuration(format!("no segment {segment} in affinity model"))
        })?;
        let gamma = &self.gamma[segment];
        if theta.len() != x.len() || gamma.len() != z.len() {
            return Err(DemandError::Configuration(format!(
                "model expects C={} D={}, got C={} D={}",
                theta.len(),
                gamma.len(),
                x.len(),
                z.len()
            )));
        }
        Ok(dot(theta, x) + dot(gamma, z))
    }

    /// Listening probability of a member of `segment`.
    pub fn probability(&self, segment: usize, x: &[f64], z: &[f64]) -> Result<f64> {
        let eta = self.linear_predictor(segment, x, z)?;
        Ok(match self.link {
            Link::IdentityClipped => eta.clamp(0.0, 1.0),
            Link::Logit => inv_logit(eta),
        })
    }

    fn check_path(&self, covariates: &CovariatePath) -> Result<()> {
        if covariates.channels() != self.channels() || covariates.ambient() != self.ambient() {
            return Err(DemandError::Configuration(format!(
                "model expects C={} D={}, covariates have C={} D={}",
                self.channels(),
                self.ambient(),
                covariates.channels(),
                covariates.ambient()
            )));
        }
        Ok(())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn inv_logit(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// Which stratum a curve counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stratum {
    Segment(u32),
    Aggregate,
}

/// Weekly stream counts for one song and one stratum.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemandCurve {
    pub song_id: String,
    pub stratum: Stratum,
    pub values: Vec<u64>,
    /// Week 0 is the release week.
    pub origin: bool,
}

impl DemandCurve {
    pub fn new(song_id: impl Into<String>, stratum: Stratum, values: Vec<u64>) -> Self {
        Self {
            song_id: song_id.into(),
            stratum,
            values,
            origin: true,
        }
    }

    pub fn horizon(&self) -> usize {
        self.values.len()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }
}

/// One Bernoulli listening utility: `true` with probability `p`.
pub fn draw_utility(p: f64, rng: &mut DemandRng) -> Result<bool> {
    if !(0.0..=1.0).contains(&p) {
        return Err(DemandError::Domain(format!("probability {p} outside [0, 1]")));
    }
    // u in [0, 1): p = 0 never fires, p = 1 always fires.
    Ok(rng.uniform() < p)
}

fn bernoulli_sum(members: usize, p: f64, rng: &mut DemandRng) -> Result<u64> {
    let mut count = 0;
    for _ in 0..members {
        count += u64::from(draw_utility(p, rng)?);
    }
    Ok(count)
}

/// Demand of one segment in week `t`: the sum of its members' utilities.
pub fn simulate_segment_demand(
    segment: &Membership,
    segment_index: usize,
    model: &AffinityModel,
    covariates: &CovariatePath,
    t: usize,
    rng: &mut DemandRng,
) -> Result<u64> {
    if segment.is_empty() {
        return Err(DemandError::Configuration("segment is empty".into()));
    }
    model.check_path(covariates)?;
    if t >= covariates.horizon() {
        return Err(DemandError::Domain(format!("week {t} beyond covariate horizon")));
    }
    let p = model.probability(segment_index, covariates.x(t), covariates.z(t))?;
    bernoulli_sum(segment.len(), p, rng)
}

/// Simulates every segment's curve over the covering's horizon.
pub fn simulate_curves(
    song_id: &str,
    covering: &SegmentCovering,
    model: &AffinityModel,
    covariates: &CovariatePath,
    rng: &mut DemandRng,
) -> Result<Vec<DemandCurve>> {
    check_dimensions(covering, model, covariates)?;
    let mut curves: Vec<DemandCurve> = (0..covering.segment_count())
        .map(|j| DemandCurve::new(song_id, Stratum::Segment(j as u32), Vec::new()))
        .collect();
    for t in 0..covering.horizon() {
        for (j, curve) in curves.iter_mut().enumerate() {
            let y = simulate_segment_demand(covering.segment(t, j), j, model, covariates, t, rng)?;
            curve.values.push(y);
        }
    }
    Ok(curves)
}

fn check_dimensions(
    covering: &SegmentCovering,
    model: &AffinityModel,
    covariates: &CovariatePath,
) -> Result<()> {
    if covering.segment_count() != model.segments() {
        return Err(DemandError::Configuration(format!(
            "covering has {} segments, model has {}",
            covering.segment_count(),
            model.segments()
        )));
    }
    if covering.horizon() != covariates.horizon() {
        return Err(DemandError::Configuration(format!(
            "covering spans {} weeks, covariates {}",
            covering.horizon(),
            covariates.horizon()
        )));
    }
    model.check_path(covariates)
}

/// Pointwise sum of strata curves for one song.
pub fn aggregate_demand(curves: &[DemandCurve]) -> Result<DemandCurve> {
    let first = curves
        .first()
        .ok_or_else(|| DemandError::Domain("no curves to aggregate".into()))?;
    let mut values = vec![0u64; first.horizon()];
    for curve in curves {
        if curve.horizon() != first.horizon() {
            return Err(DemandError::Domain(format!(
                "horizon mismatch: {} vs {}",
                curve.horizon(),
                first.horizon()
            )));
        }
        if curve.song_id != first.song_id {
            return Err(DemandError::Domain(format!(
                "cannot aggregate songs {} and {}",
                first.song_id, curve.song_id
            )));
        }
        for (acc, v) in values.iter_mut().zip(&curve.values) {
            *acc += v;
        }
    }
    Ok(DemandCurve {
        song_id: first.song_id.clone(),
        stratum: Stratum::Aggregate,
        values,
        origin: curves.iter().all(|c| c.origin),
    })
}

/// Boundary processes: the whole population at the best (resp. worst)
/// segment-wise affinity of each week.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtremalCurves {
    pub upper: DemandCurve,
    pub lower: DemandCurve,
}

pub fn extremal_curves(
    song_id: &str,
    covering: &SegmentCovering,
    model: &AffinityModel,
    covariates: &CovariatePath,
    rng: &mut DemandRng,
) -> Result<ExtremalCurves> {
    check_dimensions(covering, model, covariates)?;
    let mut upper = Vec::with_capacity(covering.horizon());
    let mut lower = Vec::with_capacity(covering.horizon());
    for t in 0..covering.horizon() {
        let mut p_max = f64::NEG_INFINITY;
        let mut p_min = f64::INFINITY;
        for j in 0..model.segments() {
            let p = model.probability(j, covariates.x(t), covariates.z(t))?;
            p_max = p_max.max(p);
            p_min = p_min.min(p);
        }
        // One uniform per listener drives both boundaries, so lower <= upper pathwise.
        let mut u_upper = 0;
        let mut u_lower = 0;
        for _ in 0..covering.population() {
            let u = rng.uniform();
            u_upper += u64::from(u < p_max);
            u_lower += u64::from(u < p_min);
        }
        upper.push(u_upper);
        lower.push(u_lower);
    }
    Ok(ExtremalCurves {
        upper: DemandCurve::new(song_id, Stratum::Aggregate, upper),
        lower: DemandCurve::new(song_id, Stratum::Aggregate, lower),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(ids: &[usize]) -> Membership {
        ids.iter().copied().collect()
    }

    #[test]
    fn degenerate_utilities() {
        let mut rng = DemandRng::seed_from(1);
        for _ in 0..1000 {
            assert!(!draw_utility(0.0, &mut rng).unwrap());
            assert!(draw_utility(1.0, &mut rng).unwrap());
        }
        assert!(draw_utility(1.5, &mut rng).is_err());
        assert!(draw_utility(-0.1, &mut rng).is_err());
    }

    #[test]
    fn fair_coin_mean() {
        let mut rng = DemandRng::seed_from(2);
        let ones = (0..10_000)
            .filter(|_| draw_utility(0.5, &mut rng).unwrap())
            .count();
        let mean = ones as f64 / 10_000.0;
        assert!((0.485..=0.515).contains(&mean), "mean {mean}");
    }

    fn clipped_single(p: f64) -> AffinityModel {
        AffinityModel::new(vec![vec![]], vec![vec![p]], Link::IdentityClipped).unwrap()
    }

    #[test]
    fn segment_demand_edge_cases() {
        let mut rng = DemandRng::seed_from(3);
        let path = CovariatePath::constant(4, vec![], vec![1.0]).unwrap();
        let fifty = (0..50).collect();
        assert_eq!(
            simulate_segment_demand(&fifty, 0, &clipped_single(0.0), &path, 0, &mut rng).unwrap(),
            0
        );
        let one = set(&[0]);
        assert_eq!(
            simulate_segment_demand(&one, 0, &clipped_single(1.0), &path, 0, &mut rng).unwrap(),
            1
        );
        let bad_path = CovariatePath::constant(4, vec![0.5], vec![1.0]).unwrap();
        assert!(matches!(
            simulate_segment_demand(&one, 0, &clipped_single(1.0), &bad_path, 0, &mut rng),
            Err(DemandError::Configuration(_))
        ));
    }

    #[test]
    fn segment_demand_mean() {
        let mut rng = DemandRng::seed_from(4);
        let path = CovariatePath::constant(4, vec![], vec![1.0]).unwrap();
        let model = clipped_single(0.2);
        let hundred = (0..100).collect();
        let reps = 1000;
        let total: u64 = (0..reps)
            .map(|_| simulate_segment_demand(&hundred, 0, &model, &path, 0, &mut rng).unwrap())
            .sum();
        let mean = total as f64 / reps as f64;
        assert!((mean - 20.0).abs() <= 1.2, "mean {mean}");
    }

    #[test]
    fn aggregation() {
        let a = DemandCurve::new("s", Stratum::Segment(0), vec![10, 5]);
        let b = DemandCurve::new("s", Stratum::Segment(1), vec![15, 7]);
        let agg = aggregate_demand(&[a.clone(), b]).unwrap();
        assert_eq!(agg.values, vec![25, 12]);
        assert_eq!(agg.stratum, Stratum::Aggregate);
        assert_eq!(aggregate_demand(std::slice::from_ref(&a)).unwrap().values, a.values);
        let zeros: Vec<_> = (0..3)
            .map(|j| DemandCurve::new("s", Stratum::Segment(j), vec![0; 4]))
            .collect();
        assert_eq!(aggregate_demand(&zeros).unwrap().values, vec![0; 4]);
        let short = DemandCurve::new("s", Stratum::Segment(2), vec![1]);
        assert!(matches!(
            aggregate_demand(&[a, short]),
            Err(DemandError::Domain(_))
        ));
    }

    #[test]
    fn sparse_audience_set_algebra() {
        let cov = SegmentCovering::constant(5, 4, vec![set(&[1, 2, 3]), set(&[3, 4])]).unwrap();
        assert_eq!(sparse_audience(&cov, 0), set(&[1, 2, 4]));
        let disjoint = SegmentCovering::constant(4, 4, vec![set(&[0, 1]), set(&[2, 3])]).unwrap();
        assert_eq!(sparse_audience(&disjoint, 2), set(&[0, 1, 2, 3]));
        let same = SegmentCovering::constant(3, 4, vec![set(&[0, 1, 2]), set(&[0, 1, 2])]).unwrap();
        assert!(sparse_audience(&same, 0).is_empty());
    }

    #[test]
    fn covering_verification() {
        // Listener ids 1..=3 are shifted to 0..=2.
        let ok = SegmentCovering::constant(3, 4, vec![set(&[0, 1]), set(&[1, 2])]).unwrap();
        let report = verify_covering(&ok).unwrap();
        assert_eq!(report.union_sizes[0], 3);
        assert_eq!(report.segment_size_sums[0], 4);
        assert!(!report.is_partition());

        let gap = SegmentCovering::constant(3, 4, vec![set(&[0]), set(&[1])]).unwrap();
        assert_eq!(
            verify_covering(&gap),
            Err(DemandError::CoverageGap { week: 0, uncovered: vec![2] })
        );

        let full = SegmentCovering::constant(3, 4, vec![set(&[0, 1, 2])]).unwrap();
        assert!(verify_covering(&full).unwrap().is_partition());
    }

    #[test]
    fn covering_rejects_empty_segments() {
        assert!(SegmentCovering::constant(3, 4, vec![set(&[0, 1, 2]), set(&[])]).is_err());
        assert!(SegmentCovering::constant(3, 4, vec![set(&[5])]).is_err());
    }

    #[test]
    fn population_invariants() {
        assert!(ListenerPopulation::new(0, 10).is_err());
        assert!(ListenerPopulation::new(10, 3).is_err());
        assert!(ListenerPopulation::new(1, 4).is_ok());
    }

    #[test]
    fn covariates_must_be_unit_interval() {
        assert!(CovariatePath::new(vec![vec![1.2]], vec![vec![0.0]]).is_err());
        assert!(CovariatePath::new(vec![vec![0.2]], vec![]).is_err());
    }

    #[test]
    fn single_segment_extremals_coincide() {
        let cov = SegmentCovering::constant(200, 6, vec![(0..200).collect()]).unwrap();
        let model = clipped_single(0.3);
        let path = CovariatePath::constant(6, vec![], vec![1.0]).unwrap();
        let mut rng = DemandRng::seed_from(9);
        let ex = extremal_curves("s", &cov, &model, &path, &mut rng).unwrap();
        assert_eq!(ex.upper.values, ex.lower.values);
    }
}
