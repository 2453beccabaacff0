//! Hungarian algorithm for rectangular assignment problems.

use crate::error::{arg, Result};

/// Minimum-cost assignment. Returns, for each row, the column it is matched
/// to; with more rows than columns the surplus rows get `None`.
pub fn minimize(cost: &[Vec<f64>]) -> Result<Vec<Option<usize>>> {
    let rows = cost.len();
    if rows == 0 {
        return Ok(Vec::new());
    }
    let cols = cost[0].len();
    if cost.iter().any(|r| r.len() != cols) {
        return arg("cost matrix rows differ in length");
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return arg("cost matrix has non-finite entries");
    }
    let n = rows.max(cols);
    let at = |i: usize, j: usize| if i < rows && j < cols { cost[i][j] } else { 0.0 };
    // Jonker-Volgenant style potentials, 1-based with a virtual column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = at(i0 - 1, j - 1) - u[i0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut result = vec![None; rows];
    for j in 1..=n {
        let i = matched[j];
        if i >= 1 && i <= rows && j <= cols {
            result[i - 1] = Some(j - 1);
        }
    }
    Ok(result)
}

/// Maximum-weight assignment.
pub fn maximize(weight: &[Vec<f64>]) -> Result<Vec<Option<usize>>> {
    let negated: Vec<Vec<f64>> = weight.iter().map(|r| r.iter().map(|w| -w).collect()).collect();
    minimize(&negated)
}

/// Total weight of an assignment.
pub fn total(weight: &[Vec<f64>], assignment: &[Option<usize>]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| weight[i][j]))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_dominant_is_identity() {
        let w = vec![vec![9.0, 1.0, 0.0], vec![2.0, 8.0, 1.0], vec![0.0, 3.0, 7.0]];
        assert_eq!(maximize(&w).unwrap(), vec![Some(0), Some(1), Some(2)]);
    }

    #[test]
    fn classic_minimum() {
        let c = vec![vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]];
        let a = minimize(&c).unwrap();
        assert_eq!(total(&c, &a), 5.0);
    }

    #[test]
    fn rectangular_shapes() {
        let wide = vec![vec![1.0, 5.0, 2.0]];
        assert_eq!(maximize(&wide).unwrap(), vec![Some(1)]);
        let tall = vec![vec![1.0], vec![5.0], vec![2.0]];
        assert_eq!(maximize(&tall).unwrap(), vec![None, Some(0), None]);
    }

    #[test]
    fn empty_and_ragged() {
        assert!(maximize(&[]).unwrap().is_empty());
        assert!(maximize(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
