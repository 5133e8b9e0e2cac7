//! Grid search over two-segment budget splits.

/// Highest gain `Σ rate_j · min(split_j, capacity_j)` over splits of
/// `budget` between two segments on a grid of `steps + 1` points, plus the
/// capacity breakpoints. Returns `(split, gain)`.
pub fn two_segment_grid(rates: [f64; 2], capacities: [f64; 2], budget: f64, steps: usize) -> ([f64; 2], f64) {
    let mut candidates: Vec<f64> = (0..=steps).map(|i| budget * i as f64 / steps as f64).collect();
    candidates.extend([capacities[0], budget - capacities[1]]);
    let mut best = ([0.0, 0.0], f64::NEG_INFINITY);
    for s0 in candidates {
        if !(0.0..=budget).contains(&s0) {
            continue;
        }
        let split = [s0.min(capacities[0]), (budget - s0).min(capacities[1])];
        let gain = rates[0] * split[0] + rates[1] * split[1];
        if gain > best.1 {
            best = (split, gain);
        }
    }
    best
}
