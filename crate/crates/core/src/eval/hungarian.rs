//! Minimum-cost assignment (Kuhn–Munkres with potentials, O(n³)).
//!
//! Rectangular inputs are padded with zero-cost rows/columns to a square.
//! Among all optimal assignments the lexicographically smallest row→column
//! vector is returned: after solving, the matching is rewired greedily over
//! the tight edges of the optimal dual, which keeps it optimal.

use crate::linalg::Mat;
use crate::scalar::Scalar;

use super::EvalError;

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment<T> {
    /// Column for each row, `None` for rows matched only to padding.
    pub row_to_col: Vec<Option<usize>>,
    pub cost: T,
}

impl<T: Scalar> Assignment<T> {
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.row_to_col
            .iter()
            .enumerate()
            .filter_map(|(r, c)| c.map(|c| (r, c)))
            .collect()
    }
}

/// Sum of `cost[r][c]` over the pairs, in row order.
pub fn assignment_cost<T: Scalar>(cost: &Mat<T>, row_to_col: &[Option<usize>]) -> T {
    row_to_col
        .iter()
        .enumerate()
        .filter_map(|(r, c)| c.map(|c| cost.get(r, c)))
        .fold(T::zero(), |acc, x| acc + x)
}

pub fn hungarian<T: Scalar>(cost: &Mat<T>) -> Result<Assignment<T>, EvalError> {
    let (rows, cols) = (cost.rows(), cost.cols());
    if rows == 0 || cols == 0 {
        return Err(EvalError::EmptyCost);
    }
    if !cost.is_finite() {
        return Err(EvalError::NonFiniteCost);
    }
    let n = rows.max(cols);
    let a = |i: usize, j: usize| -> T {
        if i < rows && j < cols {
            cost.get(i, j)
        } else {
            T::zero()
        }
    };

    // 1-indexed potentials and matching; p[j] is the row matched to column j.
    let inf = T::infinity();
    let mut u = vec![T::zero(); n + 1];
    let mut v = vec![T::zero(); n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
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
            for j in 0..=n {
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

    let mut match_col: Vec<usize> = (1..=n).map(|j| p[j] - 1).collect();
    let mut match_row = vec![0usize; n];
    for (j, &i) in match_col.iter().enumerate() {
        match_row[i] = j;
    }

    let scale = (0..rows)
        .flat_map(|i| (0..cols).map(move |j| (i, j)))
        .fold(T::one(), |m, (i, j)| m.max(cost.get(i, j).abs()));
    let tol = T::epsilon() * scale * T::from_usize_lossy(16 * n);
    let tight = |i: usize, j: usize| (a(i, j) - u[i + 1] - v[j + 1]).abs() <= tol;
    lexicographic_rewire(n, &tight, &mut match_row, &mut match_col);

    let row_to_col: Vec<Option<usize>> = (0..rows)
        .map(|i| Some(match_row[i]).filter(|&j| j < cols))
        .collect();
    let total = assignment_cost(cost, &row_to_col);
    Ok(Assignment {
        row_to_col,
        cost: total,
    })
}

/// Greedy row-by-row: give row `i` the smallest tight column that still
/// leaves a perfect tight matching among the rows after it.
fn lexicographic_rewire(
    n: usize,
    tight: &impl Fn(usize, usize) -> bool,
    match_row: &mut [usize],
    match_col: &mut [usize],
) {
    for i in 0..n {
        let freed = match_row[i];
        for c in 0..freed {
            if !tight(i, c) {
                continue;
            }
            if let Some(path) = alternating_path(n, i, c, freed, tight, match_row, match_col) {
                // path: (row, new column) hops; the last hop lands on `freed`
                for &(r, col) in &path {
                    match_row[r] = col;
                    match_col[col] = r;
                }
                match_row[i] = c;
                match_col[c] = i;
                break;
            }
        }
    }
}

/// Search for a way to move the current owner of column `c` (and any rows it
/// displaces) onto tight columns so that column `freed` absorbs the last one.
/// Only rows after `i` may move.
fn alternating_path(
    n: usize,
    i: usize,
    c: usize,
    freed: usize,
    tight: &impl Fn(usize, usize) -> bool,
    match_row: &[usize],
    match_col: &[usize],
) -> Option<Vec<(usize, usize)>> {
    let start = match_col[c];
    if start <= i {
        return None;
    }
    // BFS over rows; parent[col] = row that reaches col
    let mut parent_of_col = vec![usize::MAX; n];
    let mut seen_col = vec![false; n];
    seen_col[c] = true;
    let mut queue = std::collections::VecDeque::from([start]);
    while let Some(r) = queue.pop_front() {
        for col in 0..n {
            if seen_col[col] || !tight(r, col) {
                continue;
            }
            if col == freed {
                parent_of_col[col] = r;
                let mut path = Vec::new();
                let mut cur = col;
                loop {
                    let row = parent_of_col[cur];
                    path.push((row, cur));
                    if row == start {
                        break;
                    }
                    cur = match_row[row];
                }
                return Some(path);
            }
            let owner = match_col[col];
            if owner <= i {
                continue;
            }
            seen_col[col] = true;
            parent_of_col[col] = r;
            queue.push_back(owner);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two() {
        let a = hungarian(&Mat::from_rows(&[vec![1.0_f64, 2.0], vec![2.0, 1.0]])).unwrap();
        assert_eq!(a.row_to_col, vec![Some(0), Some(1)]);
        assert_eq!(a.cost, 2.0);
    }

    #[test]
    fn zero_diagonal_gives_identity() {
        let m = Mat::from_rows(&[
            vec![0.0_f64, 3.0, 5.0],
            vec![2.0, 0.0, 1.0],
            vec![4.0, 9.0, 0.0],
        ]);
        let a = hungarian(&m).unwrap();
        assert_eq!(a.row_to_col, vec![Some(0), Some(1), Some(2)]);
        assert_eq!(a.cost, 0.0);
    }

    #[test]
    fn ties_resolve_lexicographically() {
        // every permutation costs the same
        let a = hungarian(&Mat::from_vec(3, 3, vec![1.0_f64; 9])).unwrap();
        assert_eq!(a.row_to_col, vec![Some(0), Some(1), Some(2)]);
        // two optimal assignments: (0->1, 1->0) and (0->0, 1->1) both cost 2
        let m = Mat::from_rows(&[vec![1.0_f64, 1.0], vec![1.0, 1.0]]);
        assert_eq!(hungarian(&m).unwrap().row_to_col, vec![Some(0), Some(1)]);
        let m = Mat::from_rows(&[
            vec![5.0_f64, 0.0, 0.0],
            vec![0.0, 5.0, 0.0],
            vec![0.0, 0.0, 5.0],
        ]);
        // optimal cost 0 via either derangement; (1, 2, 0) < (2, 0, 1)
        assert_eq!(
            hungarian(&m).unwrap().row_to_col,
            vec![Some(1), Some(2), Some(0)]
        );
    }

    #[test]
    fn rectangular_inputs() {
        let wide = Mat::from_rows(&[vec![3.0_f64, 1.0, 2.0]]);
        let a = hungarian(&wide).unwrap();
        assert_eq!(a.row_to_col, vec![Some(1)]);
        let tall = Mat::from_rows(&[vec![3.0_f64], vec![1.0], vec![2.0]]);
        let a = hungarian(&tall).unwrap();
        assert_eq!(a.row_to_col, vec![None, Some(0), None]);
        assert_eq!(a.cost, 1.0);
    }

    #[test]
    fn rejects_bad_costs() {
        assert!(matches!(
            hungarian(&Mat::from_rows(&[vec![f64::NAN]])),
            Err(EvalError::NonFiniteCost)
        ));
        assert!(matches!(
            hungarian(&Mat::<f64>::zeros(0, 0)),
            Err(EvalError::EmptyCost)
        ));
    }
}
