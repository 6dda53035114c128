//! Maximum-weight bipartite assignment (Hungarian method with potentials).

use alloc::vec;
use alloc::vec::Vec;

/// Row-major weight matrix with an allowed mask. Pairs that are not allowed
/// are never returned.
#[derive(Debug, Clone)]
pub struct WeightMatrix {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    allowed: Vec<bool>,
}

impl WeightMatrix {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            weights: vec![0.0; rows * cols],
            allowed: vec![false; rows * cols],
        }
    }

    /// Marks `(row, col)` as assignable with `weight`. Weights must be
    /// strictly positive.
    pub fn allow(&mut self, row: usize, col: usize, weight: f64) {
        debug_assert!(weight > 0.0);
        self.weights[row * self.cols + col] = weight;
        self.allowed[row * self.cols + col] = true;
    }

    pub fn weight(&self, row: usize, col: usize) -> Option<f64> {
        let i = row * self.cols + col;
        self.allowed[i].then(|| self.weights[i])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

/// Returns `(row, col)` pairs of a one-to-one assignment maximizing the total
/// weight over allowed pairs. The result is sorted by row. Rows are
/// processed in index order and ties resolve to the lower column, so the
/// output is deterministic.
pub fn max_weight_assignment(m: &WeightMatrix) -> Vec<(usize, usize)> {
    let n = m.rows.max(m.cols);
    if m.rows == 0 || m.cols == 0 {
        return Vec::new();
    }
    // Square minimization problem: cost = -weight, padding and forbidden
    // cells cost 0 (equivalent to leaving the row unmatched).
    let cost = |i: usize, j: usize| -> f64 {
        if i < m.rows && j < m.cols {
            -m.weight(i, j).unwrap_or(0.0)
        } else {
            0.0
        }
    };

    // 1-indexed potentials; column 0 is the virtual source.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
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

    let mut pairs: Vec<(usize, usize)> = (1..=n)
        .filter_map(|j| {
            let (row, col) = (owner[j] - 1, j - 1);
            (row < m.rows && col < m.cols && m.weight(row, col).is_some()).then_some((row, col))
        })
        .collect();
    pairs.sort_unstable();
    pairs
}
