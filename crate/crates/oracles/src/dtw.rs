//! DTW by listing every warping path.

/// Every monotone path from `(0,0)` to `(n-1,m-1)` using steps `(1,0)`,
/// `(0,1)` and `(1,1)`.
pub fn warping_paths(n: usize, m: usize) -> Vec<Vec<(usize, usize)>> {
    fn walk(
        i: usize,
        j: usize,
        n: usize,
        m: usize,
        cur: &mut Vec<(usize, usize)>,
        out: &mut Vec<Vec<(usize, usize)>>,
    ) {
        cur.push((i, j));
        if i == n - 1 && j == m - 1 {
            out.push(cur.clone());
        } else {
            if i + 1 < n {
                walk(i + 1, j, n, m, cur, out);
            }
            if j + 1 < m {
                walk(i, j + 1, n, m, cur, out);
            }
            if i + 1 < n && j + 1 < m {
                walk(i + 1, j + 1, n, m, cur, out);
            }
        }
        cur.pop();
    }
    let mut out = Vec::new();
    if n > 0 && m > 0 {
        walk(0, 0, n, m, &mut Vec::new(), &mut out);
    }
    out
}

/// `sqrt(min over paths of Σ (a_i - b_j)²)`.
pub fn dtw_exhaustive(a: &[f64], b: &[f64]) -> f64 {
    warping_paths(a.len(), b.len())
        .iter()
        .map(|p| p.iter().map(|&(i, j)| (a[i] - b[j]).powi(2)).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_counts_are_delannoy_numbers() {
        assert_eq!(warping_paths(1, 1).len(), 1);
        assert_eq!(warping_paths(2, 2).len(), 3);
        assert_eq!(warping_paths(3, 3).len(), 13);
        assert_eq!(warping_paths(4, 4).len(), 63);
    }

    #[test]
    fn hand_examples() {
        assert!((dtw_exhaustive(&[0.0; 3], &[1.0; 3]) - 3f64.sqrt()).abs() < 1e-15);
        assert_eq!(dtw_exhaustive(&[1.0, 2.0, 3.0], &[1.0, 2.0, 2.0, 3.0]), 0.0);
    }
}
