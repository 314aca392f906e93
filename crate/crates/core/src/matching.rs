//! Bipartite matching between ground-truth instances and prediction slots.

use serde::{Deserialize, Serialize};

use crate::config::LossWeights;
use crate::error::{Error, Result};
use crate::geometry::{giou, CenterBox};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchAssignment {
    /// `(gt_index, pred_slot)`, ordered by ground-truth index.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

/// Minimum-cost assignment of every row (ground truth) to a distinct column
/// (prediction slot). Among optimal assignments the one whose column
/// sequence is lexicographically smallest is returned.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<MatchAssignment> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if rows == 0 {
        return Ok(MatchAssignment {
            pairs: Vec::new(),
            total_cost: 0.0,
        });
    }
    if rows > cols {
        return Err(Error::Assignment { rows, cols });
    }
    if cost.iter().any(|r| r.len() != cols) {
        return Err(Error::Config("ragged cost matrix".into()));
    }
    if cost.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cost matrix"));
    }
    let all_rows: Vec<usize> = (0..rows).collect();
    let all_cols: Vec<usize> = (0..cols).collect();
    let (first, best) = solve(cost, &all_rows, &all_cols);
    let tol = 1e-12 * best.abs().max(1.0);

    // Fix rows one at a time to the lowest column that still admits an optimum.
    let mut chosen = Vec::with_capacity(rows);
    let mut fixed_cost = 0.0;
    let mut used = vec![false; cols];
    let mut current = first;
    for i in 0..rows {
        let rest: Vec<usize> = (i + 1..rows).collect();
        let mut pick = current[i];
        for j in 0..current[i] {
            if used[j] {
                continue;
            }
            let free: Vec<usize> = (0..cols).filter(|&c| !used[c] && c != j).collect();
            let (assign, sub) = solve(cost, &rest, &free);
            if fixed_cost + cost[i][j] + sub <= best + tol {
                pick = j;
                let mut next = current.clone();
                next[i] = j;
                next[i + 1..].copy_from_slice(&assign);
                current = next;
                break;
            }
        }
        used[pick] = true;
        fixed_cost += cost[i][pick];
        chosen.push(pick);
    }
    let pairs: Vec<(usize, usize)> = chosen.iter().copied().enumerate().collect();
    let total_cost = pairs.iter().map(|&(r, c)| cost[r][c]).sum();
    Ok(MatchAssignment { pairs, total_cost })
}

/// Shortest-augmenting-path assignment restricted to `rows` × `cols`
/// (`rows.len() <= cols.len()`). Returns the chosen column per row and the total.
fn solve(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> (Vec<usize>, f64) {
    let n = rows.len();
    let m = cols.len();
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    let c = |i: usize, j: usize| cost[rows[i - 1]][cols[j - 1]];
    // 1-based potentials; column 0 is the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut done = vec![false; m + 1];
        loop {
            done[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if done[j] {
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
                if done[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            assign[owner[j] - 1] = cols[j - 1];
        }
    }
    let total = assign.iter().enumerate().map(|(i, &col)| cost[rows[i]][col]).sum();
    (assign, total)
}

/// Classification cost of a slot with text probability `p`: the positive
/// focal term minus the negative one, so confident slots are cheap.
pub fn focal_class_cost(p: f64, alpha: f64, gamma: f64) -> f64 {
    let eps = 1e-8;
    let pos = alpha * (1.0 - p).powf(gamma) * -(p + eps).ln();
    let neg = (1.0 - alpha) * p.powf(gamma) * -(1.0 - p + eps).ln();
    pos - neg
}

pub fn box_l1(a: &CenterBox, b: &CenterBox) -> f64 {
    (a.cx - b.cx).abs() + (a.cy - b.cy).abs() + (a.w - b.w).abs() + (a.h - b.h).abs()
}

/// Matching cost between one prediction and one ground truth.
pub fn match_cost(prob: f64, pred: &CenterBox, gt: &CenterBox, w: &LossWeights) -> f64 {
    let class = w.match_class * focal_class_cost(prob, w.focal_alpha, w.focal_gamma);
    let l1 = w.match_l1 * box_l1(pred, gt);
    let g = w.match_giou * (1.0 - giou(&pred.to_corners(), &gt.to_corners()));
    class + l1 + g
}

/// Cost matrix with ground truths as rows and slots as columns.
pub fn cost_matrix(probs: &[f64], boxes: &[CenterBox], gts: &[CenterBox], w: &LossWeights) -> Vec<Vec<f64>> {
    gts.iter()
        .map(|g| probs.iter().zip(boxes).map(|(&p, b)| match_cost(p, b, g, w)).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive minimum over injective maps rows → columns; ties keep the
    /// lexicographically first column sequence.
    fn brute_force(cost: &[Vec<f64>]) -> (Vec<usize>, f64) {
        fn rec(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>, cur: &mut Vec<usize>, best: &mut (Vec<usize>, f64)) {
            if row == cost.len() {
                let total: f64 = cur.iter().enumerate().map(|(r, &c)| cost[r][c]).sum();
                if total < best.1 {
                    *best = (cur.clone(), total);
                }
                return;
            }
            for c in 0..cost[0].len() {
                if !used[c] {
                    used[c] = true;
                    cur.push(c);
                    rec(cost, row + 1, used, cur, best);
                    cur.pop();
                    used[c] = false;
                }
            }
        }
        let mut best = (Vec::new(), f64::INFINITY);
        rec(cost, 0, &mut vec![false; cost[0].len()], &mut Vec::new(), &mut best);
        best
    }

    #[test]
    fn examples() {
        let a = hungarian(&[]).unwrap();
        assert!(a.pairs.is_empty() && a.total_cost == 0.0);
        let a = hungarian(&[vec![1.0, 3.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total_cost, 1.0);
        assert!(matches!(
            hungarian(&[vec![1.0], vec![2.0]]),
            Err(Error::Assignment { rows: 2, cols: 1 })
        ));
        assert!(hungarian(&[vec![f64::NAN]]).is_err());
    }

    #[test]
    fn ties_prefer_lowest_indices() {
        let a = hungarian(&vec![vec![0.0; 5]; 3]).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        let a = hungarian(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn equals_brute_force_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for trial in 0..200 {
            let rows = 5 + trial % 3;
            let cols = rows + rng.random_range(0..3);
            let cost: Vec<Vec<f64>> = (0..rows)
                .map(|_| (0..cols).map(|_| rng.random_range(0.0..10.0)).collect())
                .collect();
            let a = hungarian(&cost).unwrap();
            let (cols_bf, total_bf) = brute_force(&cost);
            assert_eq!(a.total_cost, total_bf, "trial {trial}");
            assert_eq!(a.pairs.iter().map(|p| p.1).collect::<Vec<_>>(), cols_bf);
        }
    }

    #[test]
    fn integer_costs_with_ties_match_lexicographic_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let rows = rng.random_range(1..5);
            let cols = rows + rng.random_range(0..3);
            let cost: Vec<Vec<f64>> = (0..rows)
                .map(|_| (0..cols).map(|_| rng.random_range(0..3) as f64).collect())
                .collect();
            let a = hungarian(&cost).unwrap();
            let (cols_bf, total_bf) = brute_force(&cost);
            assert_eq!(a.total_cost, total_bf);
            assert_eq!(a.pairs.iter().map(|p| p.1).collect::<Vec<_>>(), cols_bf);
        }
    }

    #[test]
    fn perfect_prediction_has_zero_box_cost() {
        let w = LossWeights::default();
        let b = CenterBox::new(0.4, 0.5, 0.2, 0.1);
        let c = match_cost(1.0, &b, &b, &w);
        assert!((c - w.match_class * focal_class_cost(1.0, 0.25, 2.0)).abs() < 1e-12);
        assert!(focal_class_cost(1.0, 0.25, 2.0) < 0.0);
    }

    #[test]
    fn cost_grows_with_box_distance() {
        let w = LossWeights::default();
        let gt = CenterBox::new(0.5, 0.5, 0.2, 0.2);
        let mut last = f64::NEG_INFINITY;
        for k in 0..50 {
            let pred = CenterBox::new(0.5 + k as f64 * 0.01, 0.5, 0.2, 0.2);
            let c = match_cost(0.3, &pred, &gt, &w);
            assert!(c >= last);
            last = c;
        }
    }
}
