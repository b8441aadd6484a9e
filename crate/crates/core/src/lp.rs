//! Dense two-phase revised simplex for `min cᵀx  s.t.  Ax = b, x ≥ 0`.
//!
//! Sized for problems with few rows and many columns. The basis inverse is
//! kept explicitly and refactorized periodically. Linearly dependent rows are
//! tolerated: their artificial variables stay basic at zero.

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LpError {
    #[error("infeasible: phase-one objective {infeasibility:e}, largest violation in row {row}")]
    Infeasible { row: usize, infeasibility: f64 },
    #[error("unbounded along column {column}")]
    Unbounded { column: usize },
    #[error("basis became singular during refactorization")]
    Singular,
    #[error("iteration limit {0} reached")]
    IterationLimit(usize),
}

/// Equality-form LP with a dense column-major constraint matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProgram {
    pub rows: usize,
    pub cols: usize,
    a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// `max |Ax - b|` on the unscaled data.
    pub max_residual: f64,
}

const FEAS_TOL: f64 = 1e-9;
const DUAL_TOL: f64 = 1e-9;
const PIVOT_TOL: f64 = 1e-9;
const REFACTOR_EVERY: usize = 64;
const DEGENERATE_RUN: usize = 50;

impl LinearProgram {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols, a: vec![0.0; rows * cols], b: vec![0.0; rows], c: vec![0.0; cols] }
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.a[col * self.rows + row] = v;
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.a[col * self.rows + row]
    }

    pub fn column(&self, col: usize) -> &[f64] {
        &self.a[col * self.rows..(col + 1) * self.rows]
    }

    pub fn column_mut(&mut self, col: usize) -> &mut [f64] {
        &mut self.a[col * self.rows..(col + 1) * self.rows]
    }

    /// Column-major backing storage.
    pub fn matrix_mut(&mut self) -> &mut [f64] {
        &mut self.a
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        self.c.iter().zip(x).map(|(c, x)| c * x).sum()
    }

    pub fn residuals(&self, x: &[f64]) -> Vec<f64> {
        let mut r: Vec<f64> = self.b.iter().map(|b| -b).collect();
        for (j, xj) in x.iter().enumerate() {
            if *xj != 0.0 {
                for (ri, aij) in r.iter_mut().zip(self.column(j)) {
                    *ri += aij * xj;
                }
            }
        }
        r
    }

    pub fn max_residual(&self, x: &[f64]) -> f64 {
        self.residuals(x).iter().fold(0.0, |m, r| m.max(r.abs()))
    }

    pub fn solve(&self) -> Result<LpSolution, LpError> {
        let scaled = Scaled::new(self);
        let mut s = Simplex::new(&scaled);
        s.phase_one()?;
        s.phase_two()?;
        let y = s.primal();
        let x: Vec<f64> = y.iter().zip(&scaled.col_scale).map(|(y, s)| (y * s).max(0.0)).collect();
        Ok(LpSolution {
            objective: self.objective(&x),
            max_residual: self.max_residual(&x),
            iterations: s.iterations,
            x,
        })
    }
}

/// Row- and column-equilibrated copy with nonnegative right-hand side.
struct Scaled {
    m: usize,
    n: usize,
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    col_scale: Vec<f64>,
}

impl Scaled {
    fn new(lp: &LinearProgram) -> Self {
        let (m, n) = (lp.rows, lp.cols);
        let mut a = lp.a.clone();
        let mut b = lp.b.clone();
        let mut row_max = vec![0.0f64; m];
        for j in 0..n {
            for i in 0..m {
                row_max[i] = row_max[i].max(a[j * m + i].abs());
            }
        }
        let row_scale: Vec<f64> = row_max.iter().map(|&r| if r > 0.0 { 1.0 / r } else { 1.0 }).collect();
        for j in 0..n {
            for i in 0..m {
                a[j * m + i] *= row_scale[i];
            }
        }
        for i in 0..m {
            b[i] *= row_scale[i];
            if b[i] < 0.0 {
                b[i] = -b[i];
                for j in 0..n {
                    a[j * m + i] = -a[j * m + i];
                }
            }
        }
        let mut col_scale = vec![1.0; n];
        let mut c = lp.c.clone();
        for j in 0..n {
            let mx = a[j * m..(j + 1) * m].iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
            if mx > 0.0 {
                col_scale[j] = 1.0 / mx;
                a[j * m..(j + 1) * m].iter_mut().for_each(|v| *v /= mx);
                c[j] /= mx;
            }
        }
        Scaled { m, n, a, b, c, col_scale }
    }
}

struct Simplex<'a> {
    lp: &'a Scaled,
    /// Basic variable per row; indices `>= n` are artificials.
    basis: Vec<usize>,
    /// Row position of each variable in the basis, `usize::MAX` if nonbasic.
    position: Vec<usize>,
    /// Row-major `m x m` basis inverse.
    binv: Vec<f64>,
    xb: Vec<f64>,
    cost: Vec<f64>,
    phase_two: bool,
    iterations: usize,
    since_refactor: usize,
}

impl<'a> Simplex<'a> {
    fn new(lp: &'a Scaled) -> Self {
        let m = lp.m;
        let mut binv = vec![0.0; m * m];
        for i in 0..m {
            binv[i * m + i] = 1.0;
        }
        let mut position = vec![usize::MAX; lp.n + m];
        for i in 0..m {
            position[lp.n + i] = i;
        }
        Simplex {
            lp,
            basis: (lp.n..lp.n + m).collect(),
            position,
            binv,
            xb: lp.b.clone(),
            cost: vec![0.0; lp.n + m],
            phase_two: false,
            iterations: 0,
            since_refactor: 0,
        }
    }

    fn is_artificial(&self, j: usize) -> bool {
        j >= self.lp.n
    }

    /// `w = B^{-1} A_j`.
    fn ftran(&self, j: usize, w: &mut [f64]) {
        let m = self.lp.m;
        if self.is_artificial(j) {
            let k = j - self.lp.n;
            for i in 0..m {
                w[i] = self.binv[i * m + k];
            }
            return;
        }
        let col = &self.lp.a[j * m..(j + 1) * m];
        for i in 0..m {
            let row = &self.binv[i * m..(i + 1) * m];
            w[i] = row.iter().zip(col).map(|(r, c)| r * c).sum();
        }
    }

    fn duals(&self) -> Vec<f64> {
        let m = self.lp.m;
        let mut y = vec![0.0; m];
        for r in 0..m {
            let cb = self.cost[self.basis[r]];
            if cb != 0.0 {
                for i in 0..m {
                    y[i] += cb * self.binv[r * m + i];
                }
            }
        }
        y
    }

    fn reduced_cost(&self, j: usize, y: &[f64]) -> f64 {
        let m = self.lp.m;
        if self.is_artificial(j) {
            return self.cost[j] - y[j - self.lp.n];
        }
        let col = &self.lp.a[j * m..(j + 1) * m];
        self.cost[j] - col.iter().zip(y).map(|(a, y)| a * y).sum::<f64>()
    }

    fn eligible(&self, j: usize) -> bool {
        self.position[j] == usize::MAX && !(self.phase_two && self.is_artificial(j))
    }

    fn price(&self, bland: bool) -> Option<usize> {
        let y = self.duals();
        let total = self.lp.n + if self.phase_two { 0 } else { self.lp.m };
        let mut best: Option<(usize, f64)> = None;
        for j in 0..total {
            if !self.eligible(j) {
                continue;
            }
            let d = self.reduced_cost(j, &y);
            if d < -DUAL_TOL {
                if bland {
                    return Some(j);
                }
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((j, d));
                }
            }
        }
        best.map(|(j, _)| j)
    }

    /// Harris two-pass ratio test. Basic artificials in phase two are fixed
    /// at zero and block in both directions.
    fn ratio(&self, w: &[f64], bland: bool) -> Option<(usize, f64)> {
        let m = self.lp.m;
        let fixed = |r: usize| self.phase_two && self.is_artificial(self.basis[r]);
        let mut theta_max = f64::INFINITY;
        for r in 0..m {
            if w[r] > PIVOT_TOL {
                theta_max = theta_max.min((self.xb[r] + FEAS_TOL) / w[r]);
            } else if fixed(r) && w[r] < -PIVOT_TOL {
                theta_max = theta_max.min(FEAS_TOL / -w[r]);
            }
        }
        if theta_max.is_infinite() {
            return None;
        }
        let mut pick: Option<(usize, f64)> = None;
        for r in 0..m {
            let (ratio, mag) = if w[r] > PIVOT_TOL {
                (self.xb[r] / w[r], w[r])
            } else if fixed(r) && w[r] < -PIVOT_TOL {
                (0.0, -w[r])
            } else {
                continue;
            };
            if ratio > theta_max {
                continue;
            }
            let better = match pick {
                None => true,
                Some((pr, _)) if bland => self.basis[r] < self.basis[pr],
                Some((pr, _)) => mag > w[pr].abs(),
            };
            if better {
                pick = Some((r, ratio.max(0.0)));
            }
        }
        pick
    }

    fn pivot(&mut self, q: usize, r: usize, theta: f64, w: &[f64]) -> Result<(), LpError> {
        let m = self.lp.m;
        for i in 0..m {
            self.xb[i] -= theta * w[i];
        }
        self.xb[r] = theta;
        let p = w[r];
        for k in 0..m {
            self.binv[r * m + k] /= p;
        }
        for i in 0..m {
            if i != r && w[i] != 0.0 {
                let f = w[i];
                for k in 0..m {
                    self.binv[i * m + k] -= f * self.binv[r * m + k];
                }
            }
        }
        let leaving = self.basis[r];
        self.position[leaving] = usize::MAX;
        self.basis[r] = q;
        self.position[q] = r;
        self.iterations += 1;
        self.since_refactor += 1;
        if self.since_refactor >= REFACTOR_EVERY {
            self.refactor()?;
        }
        Ok(())
    }

    /// Rebuilds `B^{-1}` by Gauss-Jordan elimination with partial pivoting
    /// and recomputes the basic solution.
    fn refactor(&mut self) -> Result<(), LpError> {
        let m = self.lp.m;
        let mut bmat = vec![0.0; m * m];
        for (r, &j) in self.basis.iter().enumerate() {
            if self.is_artificial(j) {
                bmat[(j - self.lp.n) * m + r] = 1.0;
            } else {
                for i in 0..m {
                    bmat[i * m + r] = self.lp.a[j * m + i];
                }
            }
        }
        let mut inv = vec![0.0; m * m];
        for i in 0..m {
            inv[i * m + i] = 1.0;
        }
        for col in 0..m {
            let piv = (col..m)
                .max_by(|&a, &b| bmat[a * m + col].abs().total_cmp(&bmat[b * m + col].abs()))
                .unwrap();
            if bmat[piv * m + col].abs() < 1e-13 {
                return Err(LpError::Singular);
            }
            if piv != col {
                for k in 0..m {
                    bmat.swap(piv * m + k, col * m + k);
                    inv.swap(piv * m + k, col * m + k);
                }
            }
            let p = bmat[col * m + col];
            for k in 0..m {
                bmat[col * m + k] /= p;
                inv[col * m + k] /= p;
            }
            for i in 0..m {
                if i != col {
                    let f = bmat[i * m + col];
                    if f != 0.0 {
                        for k in 0..m {
                            bmat[i * m + k] -= f * bmat[col * m + k];
                            inv[i * m + k] -= f * inv[col * m + k];
                        }
                    }
                }
            }
        }
        self.binv = inv;
        for i in 0..m {
            self.xb[i] = (0..m).map(|k| self.binv[i * m + k] * self.lp.b[k]).sum();
        }
        self.since_refactor = 0;
        Ok(())
    }

    fn run(&mut self) -> Result<(), LpError> {
        let m = self.lp.m;
        let limit = 50 * (self.lp.n + m) + 10_000;
        let mut w = vec![0.0; m];
        let mut degenerate = 0usize;
        loop {
            if self.iterations > limit {
                return Err(LpError::IterationLimit(limit));
            }
            let bland = degenerate >= DEGENERATE_RUN;
            let Some(q) = self.price(bland) else {
                return Ok(());
            };
            self.ftran(q, &mut w);
            let Some((r, theta)) = self.ratio(&w, bland) else {
                return Err(LpError::Unbounded { column: q });
            };
            if theta * w[r].abs() <= 1e-12 {
                degenerate += 1;
            } else {
                degenerate = 0;
            }
            self.pivot(q, r, theta, &w)?;
        }
    }

    fn phase_one(&mut self) -> Result<(), LpError> {
        let n = self.lp.n;
        for j in n..n + self.lp.m {
            self.cost[j] = 1.0;
        }
        self.run()?;
        self.refactor()?;
        let infeasibility: f64 =
            self.basis.iter().zip(&self.xb).filter(|(j, _)| self.is_artificial(**j)).map(|(_, x)| x.max(0.0)).sum();
        let scale = self.lp.b.iter().fold(1.0f64, |m, b| m.max(b.abs()));
        if infeasibility > 1e-8 * scale {
            let row = (0..self.lp.m)
                .filter(|&r| self.is_artificial(self.basis[r]))
                .max_by(|&a, &b| self.xb[a].total_cmp(&self.xb[b]))
                .unwrap_or(0);
            return Err(LpError::Infeasible { row, infeasibility });
        }
        self.drive_out_artificials()
    }

    fn drive_out_artificials(&mut self) -> Result<(), LpError> {
        let m = self.lp.m;
        let mut w = vec![0.0; m];
        for r in 0..m {
            if !self.is_artificial(self.basis[r]) {
                continue;
            }
            let row = &self.binv[r * m..(r + 1) * m];
            let mut best: Option<(usize, f64)> = None;
            for j in 0..self.lp.n {
                if self.position[j] != usize::MAX {
                    continue;
                }
                let col = &self.lp.a[j * m..(j + 1) * m];
                let v: f64 = row.iter().zip(col).map(|(a, b)| a * b).sum();
                if v.abs() > 1e-7 && best.is_none_or(|(_, bv)| v.abs() > bv) {
                    best = Some((j, v.abs()));
                }
            }
            if let Some((j, _)) = best {
                self.ftran(j, &mut w);
                self.xb[r] = 0.0;
                self.pivot(j, r, 0.0, &w)?;
            }
        }
        Ok(())
    }

    fn phase_two(&mut self) -> Result<(), LpError> {
        self.phase_two = true;
        let n = self.lp.n;
        self.cost[..n].copy_from_slice(&self.lp.c);
        for j in n..n + self.lp.m {
            self.cost[j] = 0.0;
        }
        self.run()?;
        self.refactor()
    }

    fn primal(&self) -> Vec<f64> {
        let mut x = vec![0.0; self.lp.n];
        for (r, &j) in self.basis.iter().enumerate() {
            if j < self.lp.n {
                x[j] = self.xb[r];
            }
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lp(a: &[&[f64]], b: &[f64], c: &[f64]) -> LinearProgram {
        let mut p = LinearProgram::new(a.len(), c.len());
        for (i, row) in a.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                p.set(i, j, *v);
            }
        }
        p.b = b.to_vec();
        p.c = c.to_vec();
        p
    }

    #[test]
    fn textbook_problem() {
        // max 3x + 5y s.t. x <= 4, 2y <= 12, 3x + 2y <= 18 (optimum 36 at (2, 6)).
        let p = lp(
            &[&[1.0, 0.0, 1.0, 0.0, 0.0], &[0.0, 2.0, 0.0, 1.0, 0.0], &[3.0, 2.0, 0.0, 0.0, 1.0]],
            &[4.0, 12.0, 18.0],
            &[-3.0, -5.0, 0.0, 0.0, 0.0],
        );
        let s = p.solve().unwrap();
        assert!((s.objective + 36.0).abs() < 1e-9);
        assert!((s.x[0] - 2.0).abs() < 1e-9 && (s.x[1] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn redundant_rows_are_tolerated() {
        let p = lp(&[&[1.0, 1.0, 1.0], &[2.0, 2.0, 2.0], &[1.0, 0.0, -1.0]], &[1.0, 2.0, 0.0], &[1.0, 2.0, 3.0]);
        let s = p.solve().unwrap();
        // x1 = x3, x1 + x2 + x3 = 1: cost x1 + 2 x2 + 3 x1 = 2 - 0 at x2 = 1.
        assert!((s.objective - 2.0).abs() < 1e-9, "{}", s.objective);
        assert!(s.max_residual < 1e-12);
    }

    #[test]
    fn negative_rhs() {
        let p = lp(&[&[-1.0, -1.0]], &[-2.0], &[1.0, 3.0]);
        let s = p.solve().unwrap();
        assert!((s.objective - 2.0).abs() < 1e-12);
    }

    #[test]
    fn infeasible_is_detected() {
        let p = lp(&[&[1.0, 1.0], &[1.0, 1.0]], &[1.0, 2.0], &[0.0, 0.0]);
        assert!(matches!(p.solve(), Err(LpError::Infeasible { .. })));
        let p = lp(&[&[1.0, 1.0]], &[-1.0], &[0.0, 0.0]);
        assert!(matches!(p.solve(), Err(LpError::Infeasible { .. })));
    }

    #[test]
    fn unbounded_is_detected() {
        let p = lp(&[&[1.0, -1.0]], &[1.0], &[0.0, -1.0]);
        assert!(matches!(p.solve(), Err(LpError::Unbounded { .. })));
    }

    #[test]
    fn degenerate_transportation_problem() {
        // 3x3 transportation with balanced supplies: many degenerate vertices.
        let supply = [1.0, 1.0, 1.0];
        let demand = [1.0, 1.0, 1.0];
        let cost = [[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]];
        let mut p = LinearProgram::new(6, 9);
        for i in 0..3 {
            for j in 0..3 {
                let col = i * 3 + j;
                p.set(i, col, 1.0);
                p.set(3 + j, col, 1.0);
                p.c[col] = cost[i][j];
            }
        }
        p.b[..3].copy_from_slice(&supply);
        p.b[3..].copy_from_slice(&demand);
        let s = p.solve().unwrap();
        // Brute force over permutations.
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let best = perms.iter().map(|q| (0..3).map(|i| cost[i][q[i]]).sum::<f64>()).fold(f64::INFINITY, f64::min);
        assert!((s.objective - best).abs() < 1e-9);
    }

    /// Brute-force optimum over all bases of a small LP.
    fn vertex_enumeration(p: &LinearProgram) -> Option<f64> {
        let (m, n) = (p.rows, p.cols);
        let mut best: Option<f64> = None;
        let mut idx: Vec<usize> = (0..m).collect();
        loop {
            // Solve B x_B = b by Gaussian elimination.
            let mut mat: Vec<Vec<f64>> =
                (0..m).map(|i| idx.iter().map(|&j| p.get(i, j)).chain([p.b[i]]).collect()).collect();
            let mut ok = true;
            for c in 0..m {
                let piv = (c..m).max_by(|&a, &b| mat[a][c].abs().total_cmp(&mat[b][c].abs())).unwrap();
                if mat[piv][c].abs() < 1e-10 {
                    ok = false;
                    break;
                }
                mat.swap(c, piv);
                for i in 0..m {
                    if i != c {
                        let f = mat[i][c] / mat[c][c];
                        for k in c..=m {
                            mat[i][k] -= f * mat[c][k];
                        }
                    }
                }
            }
            if ok {
                let xb: Vec<f64> = (0..m).map(|i| mat[i][m] / mat[i][i]).collect();
                if xb.iter().all(|v| *v >= -1e-9) {
                    let obj: f64 = idx.iter().zip(&xb).map(|(&j, v)| p.c[j] * v).sum();
                    best = Some(best.map_or(obj, |b: f64| b.min(obj)));
                }
            }
            // Next combination.
            let mut i = m;
            loop {
                if i == 0 {
                    return best;
                }
                i -= 1;
                if idx[i] < n - m + i {
                    idx[i] += 1;
                    for k in i + 1..m {
                        idx[k] = idx[k - 1] + 1;
                    }
                    break;
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn matches_vertex_enumeration(
            entries in proptest::collection::vec(-3i32..4, 14),
            costs in proptest::collection::vec(0i32..6, 7),
            seed_point in proptest::collection::vec(0i32..3, 7),
        ) {
            // Two rows, seven columns; b chosen so that `seed_point` is feasible
            // and nonnegative costs keep the problem bounded.
            let mut p = LinearProgram::new(2, 7);
            for j in 0..7 {
                p.set(0, j, entries[j] as f64);
                p.set(1, j, entries[7 + j] as f64);
                p.c[j] = costs[j] as f64;
            }
            let xs: Vec<f64> = seed_point.iter().map(|v| *v as f64).collect();
            p.b = (0..2).map(|i| (0..7).map(|j| p.get(i, j) * xs[j]).sum()).collect();
            let s = p.solve().unwrap();
            prop_assert!(s.max_residual < 1e-8);
            prop_assert!(s.x.iter().all(|v| *v >= 0.0));
            let full_rank = (0..7).any(|i| (0..7).any(|j| {
                (p.get(0, i) * p.get(1, j) - p.get(0, j) * p.get(1, i)).abs() > 0.5
            }));
            if full_rank {
                let best = vertex_enumeration(&p).unwrap();
                prop_assert!((s.objective - best).abs() < 1e-7, "{} vs {}", s.objective, best);
            }
        }
    }
}
