//! Acceptance criteria 1-9. Each test prints one `criterion N ... PASS|FAIL`
//! line before asserting.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use statrs::distribution::{ChiSquared, ContinuousCDF};

use songdemand_core::bayes::{
    fit_null_model, sample_prior, simulate_null_data, McmcConfig, NullLayout, NullModelSpec,
};
use songdemand_core::clustering::{dtw_distance, kmeans_curves, KMeansConfig};
use songdemand_core::dist::{sample_negbin, sample_poisson};
use songdemand_core::envelope::{
    fit_changepoints, ChangePoints, ChangepointConfig, EnvelopeFit, NodeValues, Phase, PhaseEffects,
};
use songdemand_core::estimation::{fit_count_regression, negbin_strata_pmf, CountFamily};
use songdemand_core::model::simulate_segment_demand;
use songdemand_core::optimizer::{
    closed_form_null, compare_schemes, lp_null_max, plan_horizon, BudgetPolicy,
    ForcedPlanningModel, PlanningModel,
};
use songdemand_core::{
    AffinityModel, CovariatePath, DemandCurve, DemandRng, Link, Membership, Stratum,
};
use songdemand_oracles::changepoints::best_knots;
use songdemand_oracles::dtw::dtw_exhaustive;
use songdemand_oracles::lp::best_vertex;
use songdemand_oracles::strata::strata_pmf_by_sequences;

fn verdict(n: u32, name: &str, pass: bool, detail: String) {
    println!("criterion {n} {name} ... {} ({detail})", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} {name}: {detail}");
}

#[test]
fn criterion_1_counting_process_fidelity() {
    let start = Instant::now();
    let reps = 1000;
    let mut worst = 0.0f64;
    let mut rng = DemandRng::seed_from(1);
    for p in [0.1, 0.5, 0.9] {
        let model = AffinityModel::new(vec![vec![p]], vec![vec![]], Link::IdentityClipped).unwrap();
        let path = CovariatePath::constant(1, vec![1.0], vec![]).unwrap();
        for n in [10usize, 100, 1000] {
            let members: Membership = (0..n).collect();
            let total: u64 = (0..reps)
                .map(|_| simulate_segment_demand(&members, 0, &model, &path, 0, &mut rng).unwrap())
                .sum();
            let mean = total as f64 / reps as f64;
            let se = (n as f64 * p * (1.0 - p) / reps as f64).sqrt();
            worst = worst.max((mean - n as f64 * p).abs() / se);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(1, "counting-process fidelity", worst < 3.0 && secs < 10.0, format!("max |z| {worst:.2}, {secs:.2}s"));
}

#[test]
fn criterion_2_strata_pmf() {
    let mut worst_sum = 0.0f64;
    for y in [1u64, 3, 10] {
        for p in [0.2, 0.5, 0.8] {
            let mut total = 0.0;
            let mut n = y;
            loop {
                let v = negbin_strata_pmf(n, y, p).unwrap();
                total += v;
                if n > y + 50 && v < 1e-16 {
                    break;
                }
                n += 1;
            }
            worst_sum = worst_sum.max((total - 1.0).abs());
        }
    }
    let mut worst_oracle = 0.0f64;
    for p in [0.2, 0.5, 0.8] {
        for n in 1..=10u32 {
            for y in 1..=n {
                let fast = negbin_strata_pmf(n as u64, y as u64, p).unwrap();
                worst_oracle = worst_oracle.max((fast - strata_pmf_by_sequences(n, y, p)).abs());
            }
        }
    }
    verdict(
        2,
        "strata pmf",
        worst_sum <= 1e-6 && worst_oracle <= 1e-12,
        format!("sum error {worst_sum:.2e}, oracle error {worst_oracle:.2e}"),
    );
}

#[test]
fn criterion_3_regression_recovery() {
    let start = Instant::now();
    let truth = [0.8, 0.4, 2.0];
    let reps = 200;
    let mut covered = BTreeMap::new();
    for (family, label) in [(CountFamily::Poisson, "poisson"), (CountFamily::Negbin, "negbin")] {
        let mut hits = 0;
        for r in 0..reps {
            let mut rng = DemandRng::seed_from(300 + r);
            let x: Vec<Vec<f64>> = (0..200).map(|_| vec![rng.uniform()]).collect();
            let z: Vec<Vec<f64>> = (0..200).map(|_| vec![rng.uniform()]).collect();
            let y: Vec<u64> = x
                .iter()
                .zip(&z)
                .map(|(x, z)| {
                    let mu = (truth[2] + truth[0] * x[0] + truth[1] * z[0]).exp();
                    match family {
                        CountFamily::Poisson => sample_poisson(mu, &mut rng),
                        CountFamily::Negbin => sample_negbin(mu, 5.0, &mut rng),
                    }
                })
                .collect();
            let curve = DemandCurve::new("s", Stratum::Aggregate, y);
            let fit = fit_count_regression(&curve, &CovariatePath::new(x, z).unwrap(), family).unwrap();
            let est = [fit.theta[0], fit.gamma[0], fit.intercept];
            if est.iter().zip(&truth).zip(&fit.std_errors).all(|((e, t), se)| (e - t).abs() <= 3.0 * se) {
                hits += 1;
            }
        }
        covered.insert(label, hits as f64 / reps as f64);
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = covered.values().all(|&c| c >= 0.95) && secs < 60.0;
    verdict(3, "regression recovery", pass, format!("coverage {covered:?}, {secs:.1}s"));
}

/// Rank of `truth` among `draws`: the count of draws below it.
fn rank(truth: f64, draws: &[f64]) -> usize {
    draws.iter().filter(|&&d| d < truth).count()
}

fn chi2_uniform(counts: &[usize]) -> (f64, f64) {
    let n: usize = counts.iter().sum();
    let expected = n as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = ChiSquared::new((counts.len() - 1) as f64).unwrap().sf(stat);
    (stat, p)
}

#[test]
fn criterion_4_simulation_based_calibration() {
    let start = Instant::now();
    let reps = 50u64;
    let kept = 99;
    let bins = 10;
    let layout = NullLayout { segments: vec![2], channels: 1, ambient: 1, intercept: false };
    let spec = NullModelSpec::weakly_informative(1, 1, 1);
    let names = layout.names();
    let mut per_param: Vec<Vec<usize>> = vec![vec![0; bins]; names.len()];
    for r in 0..reps {
        let mut rng = DemandRng::seed_from(4_000 + r);
        let truth = sample_prior(&spec, &layout, &mut rng).unwrap();
        let paths: Vec<Vec<CovariatePath>> = vec![(0..2)
            .map(|_| {
                let x = (0..60).map(|_| vec![rng.uniform()]).collect();
                let z = (0..60).map(|_| vec![rng.uniform()]).collect();
                CovariatePath::new(x, z).unwrap()
            })
            .collect()];
        let data = simulate_null_data(&truth, &paths, &mut rng).unwrap();
        let config = McmcConfig { chains: 4, warmup: 1000, samples: 1000, thin: 1, seed: r, ..Default::default() };
        let draws = fit_null_model(&data, &spec, &config).unwrap();
        assert_eq!(draws.names, names);
        let values = layout.flatten(&truth);
        let pooled: Vec<&Vec<f64>> = draws.pooled().collect();
        let step = pooled.len() as f64 / kept as f64;
        let thinned: Vec<&Vec<f64>> = (0..kept).map(|i| pooled[(i as f64 * step) as usize]).collect();
        for (k, truth) in values.iter().enumerate() {
            let column: Vec<f64> = thinned.iter().map(|d| d[k]).collect();
            // Ranks 0..=99 fall evenly into 10 bins of 10.
            per_param[k][rank(*truth, &column) * bins / (kept + 1)] += 1;
        }
    }
    let mut pooled = vec![0; bins];
    for counts in &per_param {
        for (b, c) in counts.iter().enumerate() {
            pooled[b] += c;
        }
    }
    let (stat, p) = chi2_uniform(&pooled);
    let threshold = 0.01 / names.len() as f64;
    let mut worst = (String::new(), 1.0);
    for (name, counts) in names.iter().zip(&per_param) {
        let (_, pk) = chi2_uniform(counts);
        if pk < worst.1 {
            worst = (name.clone(), pk);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = p > 0.01 && worst.1 > threshold && secs < 900.0;
    verdict(
        4,
        "simulation-based calibration",
        pass,
        format!(
            "pooled chi2 {stat:.2} p {p:.3}; lowest per-parameter p {:.4} ({}) vs {threshold:.5}; {secs:.0}s",
            worst.1, worst.0
        ),
    );
}

fn knots(rng: &mut DemandRng, horizon: usize) -> [usize; 4] {
    loop {
        let mut k: Vec<usize> = (0..4).map(|_| 1 + rng.below(horizon - 1)).collect();
        k.sort_unstable();
        k.dedup();
        if k.len() == 4 {
            return [k[0], k[1], k[2], k[3]];
        }
    }
}

fn as_curve(y: &[f64]) -> DemandCurve {
    DemandCurve::new("s", Stratum::Aggregate, y.iter().map(|v| v.round().max(0.0) as u64).collect())
}

/// Knots and integer phase slopes whose nodes are non-negative integers and
/// whose slope changes at every knot.
fn integer_envelope(rng: &mut DemandRng, horizon: usize) -> (ChangePoints, Vec<f64>) {
    loop {
        let [a, s, d, r] = knots(rng, horizon);
        let k1 = 1 + rng.below(40) as i64;
        let k2 = rng.below(41) as i64 - 20;
        let k3 = rng.below(41) as i64 - 20;
        let na = k1 * a as i64;
        let ns = na + k2 * (s - a) as i64;
        let nd = ns + k3 * (d - s) as i64;
        if ns < 0 || nd <= 0 || nd % (r - d) as i64 != 0 {
            continue;
        }
        let k4 = -nd / (r - d) as i64;
        if k1 == k2 || k2 == k3 || k3 == k4 {
            continue;
        }
        let cp = ChangePoints::new(a, s, d, r).unwrap();
        let fit = EnvelopeFit::new(cp, NodeValues { attack: na as f64, sustain: ns as f64, decay: nd as f64 });
        let y = (0..horizon).map(|t| fit.level(t as f64)).collect();
        return (cp, y);
    }
}

#[test]
fn criterion_5_changepoint_recovery() {
    let config = ChangepointConfig::default();
    let mut rng = DemandRng::seed_from(5);
    let mut exact = 0;
    for _ in 0..20 {
        let (cp, y) = integer_envelope(&mut rng, 40);
        if fit_changepoints(&as_curve(&y), &config).unwrap() == cp {
            exact += 1;
        }
    }

    let template = ChangePoints::new(5, 15, 25, 39).unwrap();
    let mut within = 0;
    for _ in 0..100 {
        let nodes = NodeValues {
            attack: 1000.0 * (1.0 + 0.05 * rng.standard_normal()),
            sustain: 800.0 * (1.0 + 0.05 * rng.standard_normal()),
            decay: 200.0 * (1.0 + 0.05 * rng.standard_normal()),
        };
        let fit = EnvelopeFit::new(template, nodes);
        let y: Vec<f64> = (0..40)
            .map(|t| fit.level(t as f64) * (1.0 + 0.01 * rng.standard_normal()))
            .collect();
        let found = fit_changepoints(&as_curve(&y), &config).unwrap();
        if found.as_array().iter().zip(template.as_array()).all(|(f, t)| f.abs_diff(t) <= 1) {
            within += 1;
        }
    }

    let mut agree = 0;
    let mut cases = 0;
    for horizon in [8, 12, 20, 30, 40, 50, 60] {
        for _ in 0..3 {
            let y: Vec<f64> = (0..horizon).map(|_| (100.0 * rng.uniform()).round()).collect();
            let curve = as_curve(&y);
            cases += 1;
            if fit_changepoints(&curve, &config).unwrap().as_array() == best_knots(&y, config.tie_tolerance).unwrap().0 {
                agree += 1;
            }
        }
    }
    verdict(
        5,
        "change-point recovery",
        exact == 20 && within >= 95 && agree == cases,
        format!("noiseless exact {exact}/20, 1% noise within one week {within}/100, dp = exhaustive {agree}/{cases}"),
    );
}

#[test]
fn criterion_6_optimizer_correctness() {
    let mut rng = DemandRng::seed_from(6);
    let mut lp_mismatch = 0;
    let mut identity_err = 0.0f64;
    let mut flag_errors = 0;
    for _ in 0..1000 {
        let c = 1 + rng.below(5);
        let theta: Vec<f64> = (0..c).map(|_| 0.01 + rng.uniform()).collect();
        let gamma = [rng.uniform()];
        let z = [rng.uniform()];
        let ambient = gamma[0] * z[0];
        let budget = 2.0 * rng.uniform();
        let lp = lp_null_max(&theta, &gamma, &z, budget).unwrap();
        let oracle = best_vertex(&theta, ambient, budget).unwrap();
        if (lp.objective - oracle.objective).abs() > 1e-12 {
            lp_mismatch += 1;
        }
        if ambient <= 1.0 {
            let x = closed_form_null(&theta, &gamma, &z, budget).unwrap();
            let hit: f64 = theta.iter().zip(&x).map(|(t, x)| t * x).sum();
            identity_err = identity_err.max((hit - budget.min(1.0 - ambient)).abs());
            let cmp = compare_schemes(&theta, &gamma, &z, budget).unwrap();
            if cmp.budget_violated != (x.iter().sum::<f64>() > budget) {
                flag_errors += 1;
            }
        }
    }
    verdict(
        6,
        "optimizer correctness",
        lp_mismatch == 0 && identity_err <= 1e-12 && flag_errors == 0,
        format!("lp mismatches {lp_mismatch}/1000, closed-form error {identity_err:.1e}, flag errors {flag_errors}"),
    );
}

#[test]
fn criterion_7_forced_plan_constant_within_phase() {
    let mut rng = DemandRng::seed_from(7);
    let mut broken = 0;
    for _ in 0..300 {
        let [a, s, d, r] = knots(&mut rng, 40);
        let cp = ChangePoints::new(a, s, d, r).unwrap();
        let segments = 1 + rng.below(3);
        let channels = 1 + rng.below(3);
        let envelopes = (0..segments)
            .map(|_| {
                let nodes = NodeValues {
                    attack: 1000.0 * rng.uniform(),
                    sustain: 1000.0 * rng.uniform(),
                    decay: 1000.0 * rng.uniform(),
                };
                let effects: [PhaseEffects; 4] = std::array::from_fn(|_| PhaseEffects {
                    theta: (0..channels).map(|_| rng.uniform() - 0.2).collect(),
                    gamma: vec![],
                });
                EnvelopeFit::new(cp, nodes).with_effects(effects)
            })
            .collect();
        let horizon = 40;
        let weekly: Vec<f64> = (0..horizon).map(|_| 5.0 * rng.uniform()).collect();
        let policy = BudgetPolicy::new(weekly, 1.0).unwrap();
        let model = PlanningModel::Forced(ForcedPlanningModel { envelopes, channels, z: vec![vec![]; horizon] });
        let plan = plan_horizon(&policy, &model).unwrap();
        for phase in Phase::ALL {
            let weeks: Vec<usize> = (0..horizon).filter(|&t| cp.phase_of(t) == phase).collect();
            if weeks.windows(2).any(|w| plan.spend[w[0]] != plan.spend[w[1]]) {
                broken += 1;
            }
        }
    }
    verdict(7, "forced plan constant within phase", broken == 0, format!("{broken} phases with varying spend over 300 plans"));
}

fn labeled_curves(rng: &mut DemandRng) -> (Vec<(String, Vec<f64>)>, Vec<usize>) {
    let template = [4usize, 10, 20, 30];
    let mut curves = Vec::new();
    let mut labels = Vec::new();
    for (class, scale) in [1.0, 3.0, 9.0].iter().enumerate() {
        for i in 0..20 {
            let mut shift = |k: usize| k + rng.below(3) - 1;
            let cp = ChangePoints::new(shift(template[0]), shift(template[1]), shift(template[2]), shift(template[3])).unwrap();
            let nodes = NodeValues {
                attack: scale * 100.0 * (0.9 + 0.2 * rng.uniform()),
                sustain: scale * 80.0 * (0.9 + 0.2 * rng.uniform()),
                decay: scale * 30.0 * (0.9 + 0.2 * rng.uniform()),
            };
            let fit = EnvelopeFit::new(cp, nodes);
            let y = (0..36).map(|t| sample_poisson(fit.level(t as f64), rng) as f64).collect();
            curves.push((format!("c{class}-{i}"), y));
            labels.push(class);
        }
    }
    (curves, labels)
}

#[test]
fn criterion_8_clustering() {
    let mut purities = Vec::new();
    for seed in 0..5u64 {
        let mut rng = DemandRng::seed_from(800 + seed);
        let (curves, labels) = labeled_curves(&mut rng);
        let out = kmeans_curves(&curves, 3, seed, &KMeansConfig::default()).unwrap();
        let mut majority = 0;
        for k in 0..3 {
            let mut counts = [0; 3];
            for (a, l) in out.assignments.iter().zip(&labels) {
                if *a == k {
                    counts[*l] += 1;
                }
            }
            majority += counts.iter().max().unwrap();
        }
        purities.push(majority as f64 / curves.len() as f64);
    }
    let mut rng = DemandRng::seed_from(88);
    let mut dtw_mismatch = 0;
    for _ in 0..300 {
        let a: Vec<f64> = (0..1 + rng.below(6)).map(|_| 10.0 * rng.uniform()).collect();
        let b: Vec<f64> = (0..1 + rng.below(6)).map(|_| 10.0 * rng.uniform()).collect();
        let slow = dtw_exhaustive(&a, &b);
        if (dtw_distance(&a, &b).unwrap() - slow).abs() > 1e-12 * (1.0 + slow) {
            dtw_mismatch += 1;
        }
    }
    let pass = purities.iter().all(|&p| p >= 0.9) && dtw_mismatch == 0;
    verdict(8, "clustering", pass, format!("purity per seed {purities:?}, dtw mismatches {dtw_mismatch}/300"));
}

fn songdemand(store: &Path, args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_songdemand"))
        .arg("--store")
        .arg(store)
        .args(["--seed", "7"])
        .args(args)
        .current_dir(store.parent().unwrap())
        .env_remove("SONGDEMAND_STORE")
        .output()
        .unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Every JSON document under the store except the run log, keyed by path.
fn artifacts(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else if path.extension().is_some_and(|e| e == "json") {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn pipeline(dir: &Path) -> (BTreeMap<String, Vec<u8>>, Vec<String>) {
    let store = dir.join("store");
    let data = dir.join("data.csv");
    songdemand(&store, &["--output-format", "csv", "simulate", "--out", data.to_str().unwrap()]);
    let mut printed = vec![std::fs::read_to_string(&data).unwrap()];
    printed.push(songdemand(&store, &["ingest", data.to_str().unwrap()]));
    let fit = songdemand(&store, &["fit-adsr", "--song", "song-a"]);
    let fit_id = serde_json::from_str::<serde_json::Value>(&fit).unwrap()["fit_id"].as_str().unwrap().to_string();
    printed.push(fit);
    printed.push(songdemand(&store, &["optimize", "--fit", &fit_id, "--scheme", "forced", "--budget", "10"]));
    (artifacts(&store), printed)
}

#[test]
fn criterion_9_end_to_end_determinism() {
    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();
    let (a, printed_a) = pipeline(first.path());
    let (b, printed_b) = pipeline(second.path());
    let kinds = ["songs/", "fits/", "plans/"];
    let covered = kinds.iter().all(|k| a.keys().any(|p| p.starts_with(k)));
    let pass = covered && a == b && printed_a == printed_b;
    verdict(
        9,
        "end-to-end determinism",
        pass,
        format!("{} JSON artifacts compared, identical: {}", a.len(), a == b),
    );
}
