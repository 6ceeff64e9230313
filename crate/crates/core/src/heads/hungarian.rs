//! Minimum-cost one-to-one assignment.

/// Assignment of predictions (rows) to ground truths (columns).
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `pred_to_gt[p]` is the ground truth matched to prediction `p`.
    pub pred_to_gt: Vec<Option<usize>>,
    pub total_cost: f64,
}

impl Assignment {
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.pred_to_gt
            .iter()
            .enumerate()
            .filter_map(|(p, g)| g.map(|g| (p, g)))
    }
}

/// Optimal cost of assigning each of `rows` to a distinct one of `cols`
/// (`rows.len() <= cols.len()`). Shortest augmenting paths with potentials,
/// O(n^2 m).
fn solve_rows(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> (f64, Vec<usize>) {
    let n = rows.len();
    let m = cols.len();
    debug_assert!(n <= m);
    let c = |i: usize, j: usize| cost[rows[i - 1]][cols[j - 1]];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = c(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = cols[j - 1];
        }
    }
    let total = (0..n).map(|i| cost[rows[i]][row_to_col[i]]).sum();
    (total, row_to_col)
}

/// Optimal cost over the free rows/columns, matching `min(rows, cols)` pairs.
fn optimum(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> f64 {
    if rows.is_empty() || cols.is_empty() {
        return 0.0;
    }
    if rows.len() <= cols.len() {
        solve_rows(cost, rows, cols).0
    } else {
        let t: Vec<Vec<f64>> = (0..cost[0].len())
            .map(|j| (0..cost.len()).map(|i| cost[i][j]).collect())
            .collect();
        solve_rows(&t, cols, rows).0
    }
}

/// Minimum-total-cost matching of `min(n_pred, n_gt)` pairs. Among optimal
/// matchings the lexicographically smallest is returned: predictions are
/// fixed in index order, each taking the lowest ground-truth index (or, only
/// if no ground truth keeps the total optimal, no match) that still admits
/// an optimal completion.
pub fn hungarian_match(cost: &[Vec<f64>]) -> Assignment {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    assert!(cost.iter().all(|r| r.len() == m), "ragged cost matrix");
    assert!(cost.iter().flatten().all(|c| c.is_finite()), "non-finite cost");
    if n == 0 || m == 0 {
        return Assignment {
            pred_to_gt: vec![None; n],
            total_cost: 0.0,
        };
    }
    let all_rows: Vec<usize> = (0..n).collect();
    let all_cols: Vec<usize> = (0..m).collect();
    let best = optimum(cost, &all_rows, &all_cols);
    let scale: f64 = cost.iter().flatten().fold(1.0f64, |a, c| a.max(c.abs()));
    let tol = 1e-9 * scale * (n.max(m) as f64);

    let mut pred_to_gt = vec![None; n];
    let mut free_cols = all_cols;
    let mut fixed = 0.0;
    let mut matched = 0;
    let target_pairs = n.min(m);
    for p in 0..n {
        let rest_rows: Vec<usize> = (p + 1..n).collect();
        let remaining = target_pairs - matched;
        let mut chosen = None;
        for (k, &gcol) in free_cols.iter().enumerate() {
            let cols: Vec<usize> = free_cols.iter().copied().filter(|&c| c != gcol).collect();
            // The remaining rows must still be able to complete the pair count.
            if rest_rows.len().min(cols.len()) + 1 < remaining {
                continue;
            }
            let total = fixed + cost[p][gcol] + optimum(cost, &rest_rows, &cols);
            if total <= best + tol {
                chosen = Some(k);
                break;
            }
        }
        match chosen {
            Some(k) => {
                let gcol = free_cols.remove(k);
                fixed += cost[p][gcol];
                pred_to_gt[p] = Some(gcol);
                matched += 1;
            }
            None => {
                debug_assert!(rest_rows.len().min(free_cols.len()) >= remaining);
            }
        }
        if matched == target_pairs {
            break;
        }
    }
    Assignment {
        pred_to_gt,
        total_cost: fixed,
    }
}
