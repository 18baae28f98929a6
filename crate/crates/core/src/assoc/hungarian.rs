//! Minimum-cost bipartite assignment with forbidden pairs and a
//! deterministic tie-break.
//!
//! Rectangular problems are padded into a square where every real row
//! and column also owns a high-cost dummy partner, so the solver first
//! maximizes the number of allowed matches, then minimizes their total
//! cost. Among cost-ties the lexicographically smallest matching (row by
//! row, preferring smaller column indices, matched before unmatched) is
//! returned by rerouting over the tight edges of the optimal duals.

/// Sentinel marking a pair that must never be matched.
pub const FORBIDDEN: f64 = f64::INFINITY;

/// Rectangular cost matrix; rows are tracks, columns are detections.
/// Entries are finite costs or [`FORBIDDEN`].
#[derive(Clone, Debug)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize) -> Self {
        CostMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Option<Self> {
        let r = rows.len();
        let c = rows.first().map(|row| row.len()).unwrap_or(0);
        if rows.iter().any(|row| row.len() != c) {
            return None;
        }
        Some(CostMatrix {
            rows: r,
            cols: c,
            data: rows.into_iter().flatten().collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, cost: f64) {
        self.data[row * self.cols + col] = cost;
    }

    pub fn forbid(&mut self, row: usize, col: usize) {
        self.set(row, col, FORBIDDEN);
    }

    pub fn is_forbidden(&self, row: usize, col: usize) -> bool {
        self.get(row, col) == FORBIDDEN
    }
}

/// Result of an assignment: matched pairs plus the leftovers of both
/// sides. Pairs are sorted by row.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_rows: Vec<usize>,
    pub unmatched_cols: Vec<usize>,
    pub total_cost: f64,
}

/// Solves the assignment problem for `costs`.
pub fn solve(costs: &CostMatrix) -> Assignment {
    let (rows, cols) = (costs.rows, costs.cols);
    if rows == 0 || cols == 0 {
        return Assignment {
            pairs: Vec::new(),
            unmatched_rows: (0..rows).collect(),
            unmatched_cols: (0..cols).collect(),
            total_cost: 0.0,
        };
    }

    // Padded square: real rows/cols first, then one dummy column per real
    // row and one dummy row per real column. A row matched to its dummy
    // column is unmatched; dummy rows absorb unmatched columns. Dummies
    // cost enough that allowed real matches always win, and forbidden
    // entries cost enough that a dummy always beats them.
    let n = rows + cols;
    let mut max_abs = 0.0f64;
    for &v in &costs.data {
        if v != FORBIDDEN {
            max_abs = max_abs.max(v.abs());
        }
    }
    let pad = (max_abs + 1.0) * (n as f64 + 1.0);
    let big = pad * (n as f64 + 2.0);

    let at = |i: usize, j: usize| -> f64 {
        match (i < rows, j < cols) {
            (true, true) => {
                let v = costs.get(i, j);
                if v == FORBIDDEN {
                    big
                } else {
                    v
                }
            }
            // real row i may retire to its own dummy column cols + i
            (true, false) => {
                if j - cols == i {
                    pad
                } else {
                    big
                }
            }
            // dummy row rows + j covers real column j
            (false, true) => {
                if i - rows == j {
                    pad
                } else {
                    big
                }
            }
            // dummies pair off freely
            (false, false) => 0.0,
        }
    };

    let (mut owner, u, v) = jv_square(n, &at);

    lexicographic_refine(costs, n, &at, &u, &v, &mut owner);

    let mut pairs = Vec::new();
    let mut unmatched_rows = Vec::new();
    let mut matched_cols = vec![false; cols];
    let mut row_to_col = vec![usize::MAX; n];
    for (col, &row) in owner.iter().enumerate() {
        row_to_col[row] = col;
    }
    for row in 0..rows {
        let col = row_to_col[row];
        if col < cols && !costs.is_forbidden(row, col) {
            pairs.push((row, col));
            matched_cols[col] = true;
        } else {
            unmatched_rows.push(row);
        }
    }
    let unmatched_cols = (0..cols).filter(|&c| !matched_cols[c]).collect();
    let total_cost = pairs.iter().map(|&(r, c)| costs.get(r, c)).sum();
    Assignment {
        pairs,
        unmatched_rows,
        unmatched_cols,
        total_cost,
    }
}

/// Shortest-augmenting-path assignment on an `n x n` dense matrix.
/// Returns the column owners and the dual potentials `(u, v)`.
fn jv_square(n: usize, cost: &dyn Fn(usize, usize) -> f64) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    const NONE: usize = usize::MAX;
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    // owner[j] = row matched to column j; index n is a virtual column
    let mut owner = vec![NONE; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 0..n {
        owner[n] = row;
        let mut j0 = n;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = n;
            for j in 0..n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0, j) - u[i0] - v[j];
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
            if owner[j0] == NONE {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == n {
                break;
            }
        }
    }
    owner.truncate(n);
    u.truncate(n);
    v.truncate(n);
    (owner, u, v)
}

/// Rewires the optimal matching into the lexicographically smallest one:
/// processing real rows in order, each takes the smallest allowed column
/// that still extends to a perfect matching over the tight edges of the
/// optimal duals (dummy columns, i.e. staying unmatched, rank last).
/// Complementary slackness keeps every such matching optimal.
fn lexicographic_refine(
    costs: &CostMatrix,
    n: usize,
    at: &dyn Fn(usize, usize) -> f64,
    u: &[f64],
    v: &[f64],
    owner: &mut [usize],
) {
    let (rows, cols) = (costs.rows, costs.cols);
    let mut max_abs = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let c = at(i, j);
            if c.is_finite() {
                max_abs = max_abs.max(c.abs());
            }
        }
    }
    let tol = 1e-9 * (1.0 + max_abs);
    let tight = |i: usize, j: usize| at(i, j) - u[i] - v[j] <= tol;

    let mut row_to_col = vec![usize::MAX; n];
    for (col, &row) in owner.iter().enumerate() {
        row_to_col[row] = col;
    }
    let mut fixed = vec![false; n];

    for row in 0..rows {
        // candidate columns in preference order: allowed real columns
        // ascending, then the dummy columns (unmatched)
        let candidates = (0..cols)
            .filter(|&j| !costs.is_forbidden(row, j))
            .chain(cols..n);
        for cand in candidates {
            if !tight(row, cand) {
                continue;
            }
            if row_to_col[row] == cand {
                break;
            }
            if reroute(row, cand, n, &tight, &fixed, owner, &mut row_to_col) {
                break;
            }
        }
        fixed[row] = true;
    }
}

/// Attempts to hand column `cand` to `row`, rematching every displaced
/// row over tight edges without touching fixed rows. Restores the
/// matching on failure.
fn reroute(
    row: usize,
    cand: usize,
    n: usize,
    tight: &dyn Fn(usize, usize) -> bool,
    fixed: &[bool],
    owner: &mut [usize],
    row_to_col: &mut [usize],
) -> bool {
    let displaced = owner[cand];
    if fixed[displaced] {
        return false;
    }
    let freed = row_to_col[row];
    let backup_owner = owner.to_vec();
    let backup_rtc = row_to_col.to_vec();

    owner[freed] = usize::MAX;
    owner[cand] = row;
    row_to_col[row] = cand;
    let mut visited = vec![false; n];
    visited[cand] = true;
    if place(displaced, n, tight, fixed, owner, row_to_col, &mut visited) {
        true
    } else {
        owner.copy_from_slice(&backup_owner);
        row_to_col.copy_from_slice(&backup_rtc);
        false
    }
}

fn place(
    row: usize,
    n: usize,
    tight: &dyn Fn(usize, usize) -> bool,
    fixed: &[bool],
    owner: &mut [usize],
    row_to_col: &mut [usize],
    visited: &mut [bool],
) -> bool {
    for col in 0..n {
        if visited[col] || !tight(row, col) {
            continue;
        }
        visited[col] = true;
        let cur = owner[col];
        if cur == usize::MAX {
            owner[col] = row;
            row_to_col[row] = col;
            return true;
        }
        if !fixed[cur] && place(cur, n, tight, fixed, owner, row_to_col, visited) {
            owner[col] = row;
            row_to_col[row] = col;
            return true;
        }
    }
    false
}
