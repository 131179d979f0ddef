//! Minimum-cost bipartite assignment (Hungarian method with potentials).

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Matched `(query, target)` pairs, sorted by query index.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
}

impl Assignment {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Target matched to `query`, if any.
    pub fn target_of(&self, query: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == query).map(|p| p.1)
    }

    /// Sum of the matched costs, taken in query order.
    pub fn total_cost(&self, cost: &Tensor) -> f64 {
        self.pairs.iter().map(|&(i, j)| cost.at(i, j)).sum()
    }
}

/// Optimal assignment for an `[N, K]` cost matrix; `min(N, K)` pairs.
pub fn hungarian_match(cost: &Tensor) -> Result<Assignment> {
    let (n, k) = cost.dims2()?;
    if !cost.is_finite() {
        return Err(Error::Contract("matching costs must be finite".into()));
    }
    if n == 0 || k == 0 {
        return Ok(Assignment::default());
    }
    let mut pairs = if n <= k {
        solve(n, k, |i, j| cost.at(i, j))
    } else {
        solve(k, n, |i, j| cost.at(j, i))
            .into_iter()
            .map(|(t, q)| (q, t))
            .collect()
    };
    pairs.sort_unstable();
    Ok(Assignment { pairs })
}

/// Rows ≤ columns. Returns `(row, column)` pairs.
fn solve(rows: usize, cols: usize, a: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize)> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    // p[j]: 1-based row matched to column j (0 = free); column 0 is a sentinel.
    let mut p = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
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
    (1..=cols)
        .filter(|&j| p[j] != 0)
        .map(|j| (p[j] - 1, j - 1))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_and_empty() {
        let c = Tensor::from_rows(&[&[3.5]]).unwrap();
        assert_eq!(hungarian_match(&c).unwrap().pairs, [(0, 0)]);
        let empty = Tensor::zeros(&[4, 0]);
        assert!(hungarian_match(&empty).unwrap().is_empty());
    }

    #[test]
    fn prefers_off_diagonal_minimum() {
        let c = Tensor::from_rows(&[&[9.0, 1.0, 9.0], &[9.0, 9.0, 1.0], &[1.0, 9.0, 9.0]]).unwrap();
        assert_eq!(hungarian_match(&c).unwrap().pairs, [(0, 1), (1, 2), (2, 0)]);
    }

    #[test]
    fn not_greedy() {
        // Greedy on row 0 would take column 0 (cost 1) and force 100 on row 1.
        let c = Tensor::from_rows(&[&[1.0, 2.0], &[1.0, 100.0]]).unwrap();
        let a = hungarian_match(&c).unwrap();
        assert_eq!(a.pairs, [(0, 1), (1, 0)]);
        assert_eq!(a.total_cost(&c), 3.0);
    }

    #[test]
    fn rejects_non_finite() {
        let c = Tensor::from_rows(&[&[f64::NAN]]).unwrap();
        assert!(hungarian_match(&c).is_err());
    }

    #[test]
    fn tall_matrices_match_every_column() {
        let c = Tensor::from_rows(&[&[5.0, 1.0], &[0.5, 4.0], &[2.0, 2.0]]).unwrap();
        let a = hungarian_match(&c).unwrap();
        assert_eq!(a.pairs, [(0, 1), (1, 0)]);
    }
}
