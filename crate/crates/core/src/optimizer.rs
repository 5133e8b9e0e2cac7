//! Budget allocation that maximizes expected listening.
//!
//! Within a segment the null-model program is
//!
//! ```text
//! max θx + γz   s.t.  0 ≤ θx + γz ≤ 1,  1ᵀx ≤ B_t,  x ≥ 0
//! ```
//!
//! which is solved exactly by concentrating spend on the strongest channel.
//! The pseudo-inverse closed form `min(B_t, 1 - γz) · θ / ‖θ‖²` is also
//! provided; it hits the probability target but can overspend the budget,
//! which [`compare_schemes`] reports.

use serde::{Deserialize, Serialize};

use crate::envelope::{EnvelopeFit, Phase};
use crate::error::{DemandError, Result};
use crate::model::dot;

const BUDGET_TOLERANCE: f64 = 1e-9;

/// Total and per-week endogenous budget plus the cap on ambient impulses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetPolicy {
    pub total: f64,
    pub weekly: Vec<f64>,
    pub social_cap: f64,
}

impl BudgetPolicy {
    pub fn new(weekly: Vec<f64>, social_cap: f64) -> Result<Self> {
        if weekly.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
            return Err(DemandError::Domain("weekly budgets must be non-negative".into()));
        }
        if !(social_cap >= 0.0) {
            return Err(DemandError::Domain("social cap must be non-negative".into()));
        }
        Ok(Self { total: weekly.iter().sum(), weekly, social_cap })
    }

    /// Splits `total` evenly over `horizon` weeks.
    pub fn uniform(total: f64, horizon: usize, social_cap: f64) -> Result<Self> {
        if horizon == 0 {
            return Err(DemandError::Domain("empty horizon".into()));
        }
        let mut weekly = vec![total / horizon as f64; horizon];
        // Put the rounding residue in the last week so the sum is exact.
        let head: f64 = weekly[..horizon - 1].iter().sum();
        weekly[horizon - 1] = total - head;
        let mut policy = Self::new(weekly, social_cap)?;
        policy.total = total;
        Ok(policy)
    }

    pub fn horizon(&self) -> usize {
        self.weekly.len()
    }

    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.weekly.iter().sum();
        if (sum - self.total).abs() > BUDGET_TOLERANCE * self.total.max(1.0) {
            return Err(DemandError::Domain(format!(
                "weekly budgets sum to {sum}, total is {}",
                self.total
            )));
        }
        Ok(())
    }
}

fn check_inputs(theta: &[f64], gamma: &[f64], z: &[f64], budget: f64) -> Result<f64> {
    if gamma.len() != z.len() {
        return Err(DemandError::Configuration(format!(
            "gamma has {} entries, z has {}",
            gamma.len(),
            z.len()
        )));
    }
    if theta.is_empty() {
        return Err(DemandError::Configuration("no marketing channels".into()));
    }
    if !(budget >= 0.0) {
        return Err(DemandError::Domain(format!("budget {budget} is negative")));
    }
    Ok(dot(gamma, z))
}

/// Pseudo-inverse allocation `min(B_t, 1 - γz) · θ / ‖θ‖²`.
pub fn closed_form_null(theta: &[f64], gamma: &[f64], z: &[f64], budget: f64) -> Result<Vec<f64>> {
    let ambient = check_inputs(theta, gamma, z, budget)?;
    let norm2 = dot(theta, theta);
    if norm2 == 0.0 {
        return Err(DemandError::Domain("theta is zero; no pseudo-inverse".into()));
    }
    if ambient > 1.0 {
        return Err(DemandError::Domain(format!("ambient affinity {ambient} exceeds 1")));
    }
    let target = budget.min(1.0 - ambient);
    Ok(theta.iter().map(|t| target * t / norm2).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpSolution {
    pub spend: Vec<f64>,
    /// `θx + γz` at the optimum.
    pub objective: f64,
}

/// Exact optimum of the per-segment null-model program.
pub fn lp_null_max(theta: &[f64], gamma: &[f64], z: &[f64], budget: f64) -> Result<LpSolution> {
    let ambient = check_inputs(theta, gamma, z, budget)?;
    if ambient > 1.0 {
        return Err(DemandError::Infeasible(format!(
            "ambient affinity {ambient} already exceeds 1"
        )));
    }
    let (best, best_theta) = strongest_channel(theta);
    let mut spend = vec![0.0; theta.len()];
    if best_theta <= 0.0 {
        if ambient < 0.0 {
            return Err(DemandError::Infeasible(
                "no channel can lift a negative affinity".into(),
            ));
        }
        return Ok(LpSolution { spend, objective: ambient });
    }
    if ambient + best_theta * budget < 0.0 {
        return Err(DemandError::Infeasible(
            "budget cannot lift affinity to zero".into(),
        ));
    }
    let amount = budget.min((1.0 - ambient) / best_theta);
    spend[best] = amount;
    Ok(LpSolution { spend, objective: ambient + best_theta * amount })
}

/// First index of the largest coefficient.
fn strongest_channel(theta: &[f64]) -> (usize, f64) {
    theta
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (c, &t)| if t > acc.1 { (c, t) } else { acc })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Dominance {
    Lp,
    ClosedForm,
    Tie,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeComparison {
    pub closed_form: Vec<f64>,
    pub closed_form_objective: f64,
    pub closed_form_spend: f64,
    /// `1ᵀx* > B_t`.
    pub budget_violated: bool,
    /// Some channel receives negative spend.
    pub negativity_violated: bool,
    pub lp: LpSolution,
    pub dominant: Dominance,
}

/// Both null-model allocations side by side.
pub fn compare_schemes(theta: &[f64], gamma: &[f64], z: &[f64], budget: f64) -> Result<SchemeComparison> {
    let closed = closed_form_null(theta, gamma, z, budget)?;
    let lp = lp_null_max(theta, gamma, z, budget)?;
    let closed_form_objective = dot(theta, &closed) + dot(gamma, z);
    let closed_form_spend: f64 = closed.iter().sum();
    let budget_violated = closed_form_spend > budget + BUDGET_TOLERANCE * budget.max(1.0);
    let negativity_violated = closed.iter().any(|&x| x < 0.0);
    let dominant = if budget_violated || negativity_violated {
        Dominance::Lp
    } else if (lp.objective - closed_form_objective).abs() <= 1e-12 {
        Dominance::Tie
    } else if lp.objective > closed_form_objective {
        Dominance::Lp
    } else {
        Dominance::ClosedForm
    };
    Ok(SchemeComparison {
        closed_form: closed,
        closed_form_objective,
        closed_form_spend,
        budget_violated,
        negativity_violated,
        lp,
        dominant,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseMaximum {
    pub phase: Phase,
    pub week: usize,
    pub value: f64,
}

/// Maximizer of the envelope on each closed phase interval. Rising phases
/// peak at their right end; flat and falling phases at their left end.
pub fn forced_phase_max(fit: &EnvelopeFit) -> [PhaseMaximum; 4] {
    let cp = &fit.changepoints;
    let n = &fit.nodes;
    let ends = [
        ((0, 0.0), (cp.attack, n.attack)),
        ((cp.attack, n.attack), (cp.sustain, n.sustain)),
        ((cp.sustain, n.sustain), (cp.decay, n.decay)),
        ((cp.decay, n.decay), (cp.release, 0.0)),
    ];
    let mut out = [PhaseMaximum { phase: Phase::Attack, week: 0, value: 0.0 }; 4];
    for (r, ((w0, v0), (w1, v1))) in ends.into_iter().enumerate() {
        let (v0, v1) = (v0.max(0.0), v1.max(0.0));
        let (week, value) = if v1 > v0 { (w1, v1) } else { (w0, v0) };
        out[r] = PhaseMaximum { phase: Phase::ALL[r], week, value };
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reallocation {
    pub split: Vec<f64>,
    /// Expected additional listeners, `Σ_j |N_j| · max_c θ_c^j · split_j`.
    pub gain: f64,
    pub unspent: f64,
    pub warning: Option<String>,
}

/// Greedy split of one week's budget across segments by marginal listener
/// gain, filling each segment up to its probability ceiling.
pub fn reallocate_across_segments(
    effects: &[Vec<f64>],
    sizes: &[f64],
    ambient: &[f64],
    budget: f64,
) -> Result<Reallocation> {
    if effects.is_empty() {
        return Err(DemandError::Configuration("no segments".into()));
    }
    if sizes.len() != effects.len() || ambient.len() != effects.len() {
        return Err(DemandError::Configuration(
            "effects, sizes and ambient affinities must align".into(),
        ));
    }
    if !(budget >= 0.0) {
        return Err(DemandError::Domain(format!("budget {budget} is negative")));
    }
    struct Candidate {
        segment: usize,
        rate: f64,
        capacity: f64,
    }
    let mut candidates: Vec<Candidate> = effects
        .iter()
        .enumerate()
        .filter_map(|(j, theta)| {
            let (_, best) = strongest_channel(theta);
            (best > 0.0 && sizes[j] > 0.0).then(|| Candidate {
                segment: j,
                rate: sizes[j] * best,
                capacity: ((1.0 - ambient[j]) / best).max(0.0),
            })
        })
        .collect();
    // Stable sort keeps the lower index first among equal rates.
    candidates.sort_by(|a, b| b.rate.total_cmp(&a.rate));

    let mut split = vec![0.0; effects.len()];
    let mut remaining = budget;
    let mut gain = 0.0;
    for cand in &candidates {
        if remaining <= 0.0 {
            break;
        }
        let amount = remaining.min(cand.capacity);
        split[cand.segment] = amount;
        gain += amount * cand.rate;
        remaining -= amount;
    }
    let unspent = remaining.max(0.0);
    let warning = (unspent > BUDGET_TOLERANCE * budget.max(1.0)).then(|| {
        format!("every segment is at its ceiling; {unspent} of the budget is unspent")
    });
    Ok(Reallocation { split, gain, unspent, warning })
}

/// Point-estimate inputs of the null-model planner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullPlanningModel {
    pub theta: Vec<Vec<f64>>,
    pub gamma: Vec<Vec<f64>>,
    /// `sizes[t][j]`: listeners in segment `j` during week `t`.
    pub sizes: Vec<Vec<f64>>,
    /// Ambient covariates per week.
    pub z: Vec<Vec<f64>>,
}

/// Per-segment fitted envelopes (with per-phase effects) for the forced planner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForcedPlanningModel {
    pub envelopes: Vec<EnvelopeFit>,
    pub channels: usize,
    pub z: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "lowercase")]
pub enum PlanningModel {
    Null(NullPlanningModel),
    Forced(ForcedPlanningModel),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Null,
    Forced,
}

/// Spend per week, segment and channel, with the model's prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationPath {
    pub scheme: Scheme,
    /// `spend[t][j][c]`.
    pub spend: Vec<Vec<Vec<f64>>>,
    /// Null scheme: listening probability; forced scheme: expected demand.
    pub predicted: Vec<Vec<f64>>,
    /// Expected listeners (null) or expected streams (forced) over the horizon.
    pub objective: f64,
    pub warnings: Vec<String>,
}

impl AllocationPath {
    pub fn weekly_spend(&self) -> Vec<f64> {
        self.spend
            .iter()
            .map(|week| week.iter().flatten().sum())
            .collect()
    }

    pub fn total_spend(&self) -> f64 {
        self.weekly_spend().iter().sum()
    }
}

/// Allocation over the whole horizon.
pub fn plan_horizon(policy: &BudgetPolicy, model: &PlanningModel) -> Result<AllocationPath> {
    policy.validate()?;
    match model {
        PlanningModel::Null(m) => plan_null(policy, m),
        PlanningModel::Forced(m) => plan_forced(policy, m),
    }
}

fn check_social(policy: &BudgetPolicy, z: &[Vec<f64>]) -> Result<()> {
    if z.len() != policy.horizon() {
        return Err(DemandError::Configuration(format!(
            "ambient path spans {} weeks, budget {}",
            z.len(),
            policy.horizon()
        )));
    }
    for (t, zt) in z.iter().enumerate() {
        let total: f64 = zt.iter().sum();
        if total > policy.social_cap + BUDGET_TOLERANCE {
            return Err(DemandError::Infeasible(format!(
                "ambient impulses {total} exceed the social cap {} in week {t}",
                policy.social_cap
            )));
        }
    }
    Ok(())
}

fn plan_null(policy: &BudgetPolicy, m: &NullPlanningModel) -> Result<AllocationPath> {
    check_social(policy, &m.z)?;
    let segments = m.theta.len();
    if m.gamma.len() != segments || m.sizes.len() != policy.horizon() {
        return Err(DemandError::Configuration("planning model dimensions disagree".into()));
    }
    let mut path = AllocationPath {
        scheme: Scheme::Null,
        spend: Vec::with_capacity(policy.horizon()),
        predicted: Vec::with_capacity(policy.horizon()),
        objective: 0.0,
        warnings: Vec::new(),
    };
    for (t, &budget) in policy.weekly.iter().enumerate() {
        let zt = &m.z[t];
        let ambient = m
            .gamma
            .iter()
            .map(|g| {
                if g.len() != zt.len() {
                    return Err(DemandError::Configuration("gamma and z disagree".into()));
                }
                let a = dot(g, zt);
                if a > 1.0 {
                    return Err(DemandError::Infeasible(format!(
                        "ambient affinity {a} exceeds 1 in week {t}"
                    )));
                }
                Ok(a)
            })
            .collect::<Result<Vec<f64>>>()?;
        let sizes = &m.sizes[t];
        let realloc = reallocate_across_segments(&m.theta, sizes, &ambient, budget)?;
        if let Some(w) = realloc.warning {
            path.warnings.push(format!("week {t}: {w}"));
        }
        let mut week_spend = Vec::with_capacity(segments);
        let mut week_pred = Vec::with_capacity(segments);
        for j in 0..segments {
            let lp = lp_null_max(&m.theta[j], &m.gamma[j], zt, realloc.split[j])?;
            path.objective += sizes[j] * lp.objective;
            week_pred.push(lp.objective);
            week_spend.push(lp.spend);
        }
        path.spend.push(week_spend);
        path.predicted.push(week_pred);
    }
    Ok(path)
}

fn plan_forced(policy: &BudgetPolicy, m: &ForcedPlanningModel) -> Result<AllocationPath> {
    check_social(policy, &m.z)?;
    let horizon = policy.horizon();
    let segments = m.envelopes.len();
    if segments == 0 {
        return Err(DemandError::Configuration("no fitted envelopes".into()));
    }
    let mut spend = vec![vec![vec![0.0; m.channels]; segments]; horizon];
    let mut warnings = Vec::new();
    for phase in Phase::ALL {
        // Phase membership comes from the first segment's change points.
        let cp = &m.envelopes[0].changepoints;
        let weeks: Vec<usize> = (0..horizon).filter(|&t| cp.phase_of(t) == phase).collect();
        if weeks.is_empty() {
            continue;
        }
        // Budgets are pooled within the phase so spend can be held constant.
        let per_week = weeks.iter().map(|&t| policy.weekly[t]).sum::<f64>() / weeks.len() as f64;
        let mut best: Option<(usize, usize, f64)> = None;
        for (j, env) in m.envelopes.iter().enumerate() {
            let theta = &env.effects[phase.index()].theta;
            if theta.len() != m.channels {
                continue;
            }
            let peak = forced_phase_max(env)[phase.index()].value;
            let (c, coef) = strongest_channel(theta);
            let rate = peak * coef;
            if coef > 0.0 && best.is_none_or(|(_, _, r)| rate > r) {
                best = Some((j, c, rate));
            }
        }
        match best {
            Some((j, c, _)) => {
                for &t in &weeks {
                    spend[t][j][c] = per_week;
                }
            }
            None if per_week > 0.0 => warnings.push(format!(
                "{} phase: no segment has a positive channel effect; budget unspent",
                phase.label()
            )),
            None => {}
        }
    }
    let mut predicted = Vec::with_capacity(horizon);
    let mut objective = 0.0;
    for t in 0..horizon {
        let row: Vec<f64> = m
            .envelopes
            .iter()
            .enumerate()
            .map(|(j, env)| {
                let x = &spend[t][j];
                let effects = &env.effects[env.changepoints.phase_of(t).index()];
                if effects.theta.len() == x.len() && effects.gamma.len() == m.z[t].len() {
                    env.mean_with_covariates(t, x, &m.z[t])
                } else {
                    env.level(t as f64)
                }
            })
            .collect();
        objective += row.iter().sum::<f64>();
        predicted.push(row);
    }
    Ok(AllocationPath { scheme: Scheme::Forced, spend, predicted, objective, warnings })
}
