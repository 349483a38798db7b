//! Minimum-cost bipartite assignment (Hungarian algorithm with potentials).

use ndarray::Array2;

/// Optimal assignment for a rectangular cost matrix. Returns `(row, col)`
/// pairs, `min(rows, cols)` of them, minimizing the summed cost.
pub fn min_cost_assignment(cost: &Array2<f64>) -> Vec<(usize, usize)> {
    let (rows, cols) = cost.dim();
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    if rows > cols {
        let t = cost.t().to_owned();
        let mut pairs: Vec<(usize, usize)> =
            solve(&t).into_iter().map(|(c, r)| (r, c)).collect();
        pairs.sort_unstable();
        return pairs;
    }
    solve(cost)
}

/// Requires `rows <= cols`.
fn solve(a: &Array2<f64>) -> Vec<(usize, usize)> {
    let (n, m) = a.dim();
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if !used[j] {
                    let cur = a[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
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
    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| p[j] != 0)
        .map(|j| (p[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    pairs
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two() {
        let c = Array2::from_shape_vec((2, 2), vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        assert_eq!(min_cost_assignment(&c), vec![(0, 0), (1, 1)]);
        let c = Array2::from_shape_vec((2, 2), vec![5.0, 1.0, 1.0, 5.0]).unwrap();
        assert_eq!(min_cost_assignment(&c), vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn rectangular_both_ways() {
        let c = Array2::from_shape_vec((3, 1), vec![3.0, 1.0, 2.0]).unwrap();
        assert_eq!(min_cost_assignment(&c), vec![(1, 0)]);
        let c = Array2::from_shape_vec((1, 3), vec![3.0, 1.0, 2.0]).unwrap();
        assert_eq!(min_cost_assignment(&c), vec![(0, 1)]);
        assert!(min_cost_assignment(&Array2::zeros((0, 4))).is_empty());
    }
}
