//! Solver-agnostic conic-program assembly and solution.
//!
//! The rest of the crate describes optimization problems through
//! [`ConicProgram`]: a linear objective over scalar variables, plus blocks of
//!
//! * linear equalities,
//! * linear inequalities (`expr >= 0`),
//! * second-order cones `||G x + g|| <= h' x + h0`, and
//! * rotated second-order cones `||G x + g||^2 <= (h' x + h0)(k' x + k0)`.
//!
//! Each `add_*` call returns a typed handle; after a solve, the handle
//! recovers that block's dual variables. The backend is the Clarabel
//! interior-point solver. Rotated cones are not native there, so a rotated
//! block is embedded as the standard cone
//!
//! ```text
//! || ( (h'x+h0-k'x-k0)/2 ; Gx+g ) || <= (h'x+h0+k'x+k0)/2
//! ```
//!
//! and the embedded dual `z = (z0, z1, zw)` maps back to multipliers
//! `mu_h = (z0+z1)/2` on the `h` form, `mu_k = (z0-z1)/2` on the `k` form,
//! and `u = zw` on the vector, which satisfy `||u||^2 <= 4 mu_h mu_k` and
//! enter stationarity as `- G' u - mu_h h - mu_k k`.
//!
//! Sign conventions for duals (verified by the unit tests below): every
//! block's rows are sent to the solver as `s = expr`, so every block
//! contributes `- terms' z` to the gradient of the Lagrangian — an
//! equality `expr = 0` with `z` free, an inequality `expr >= 0` with
//! `z >= 0`, and a second-order block `- h z0 - G' zw` with
//! `||zw|| <= z0`. Conic complementarity holds per block:
//! `z0 * margin + zw . (Gx+g) = 0` at the reported optimum.

use crate::error::{Error, Result};
use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use nalgebra::DVector;

/// A contiguous range of scalar variables in a program.
#[derive(Debug, Clone, Copy)]
pub struct VarRange {
    pub start: usize,
    pub len: usize,
}

impl VarRange {
    /// Column index of the `i`-th variable of the range.
    pub fn at(&self, i: usize) -> usize {
        debug_assert!(i < self.len);
        self.start + i
    }
}

/// A linear expression `sum coeff_i x_i + constant`.
#[derive(Debug, Clone, Default)]
pub struct LinExpr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl LinExpr {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn constant(c: f64) -> Self {
        Self {
            terms: Vec::new(),
            constant: c,
        }
    }

    pub fn var(col: usize, coeff: f64) -> Self {
        Self {
            terms: vec![(col, coeff)],
            constant: 0.0,
        }
    }

    pub fn add(&mut self, col: usize, coeff: f64) -> &mut Self {
        if coeff != 0.0 {
            self.terms.push((col, coeff));
        }
        self
    }

    pub fn add_const(&mut self, c: f64) -> &mut Self {
        self.constant += c;
        self
    }

    /// Evaluates the expression at a point.
    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        self.terms
            .iter()
            .fold(self.constant, |acc, (c, v)| acc + v * x[*c])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EqHandle(usize);
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IneqHandle(usize);
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SocHandle(usize);
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RsocHandle(usize);

enum Block {
    /// Rows `expr = 0`.
    Eq { label: String, rows: Vec<LinExpr> },
    /// Rows `expr >= 0`.
    Ineq { label: String, rows: Vec<LinExpr> },
    /// `||vector|| <= margin`.
    Soc {
        label: String,
        margin: LinExpr,
        vector: Vec<LinExpr>,
    },
    /// `||vector||^2 <= h * k`.
    Rsoc {
        label: String,
        h: LinExpr,
        k: LinExpr,
        vector: Vec<LinExpr>,
    },
}

impl Block {
    fn label(&self) -> &str {
        match self {
            Block::Eq { label, .. }
            | Block::Ineq { label, .. }
            | Block::Soc { label, .. }
            | Block::Rsoc { label, .. } => label,
        }
    }

    fn n_rows(&self) -> usize {
        match self {
            Block::Eq { rows, .. } | Block::Ineq { rows, .. } => rows.len(),
            Block::Soc { vector, .. } => vector.len() + 1,
            Block::Rsoc { vector, .. } => vector.len() + 2,
        }
    }

    fn kind_name(&self) -> &'static str {
        match self {
            Block::Eq { .. } => "equality",
            Block::Ineq { .. } => "inequality",
            Block::Soc { .. } => "second-order",
            Block::Rsoc { .. } => "rotated",
        }
    }
}

/// Dual of a second-order block: `||u|| <= lambda`.
#[derive(Debug, Clone)]
pub struct SocDual {
    pub lambda: f64,
    pub u: DVector<f64>,
}

/// Dual of a rotated block: `||u||^2 <= 4 mu_h mu_k`.
#[derive(Debug, Clone)]
pub struct RsocDual {
    pub mu_h: f64,
    pub mu_k: f64,
    pub u: DVector<f64>,
}

/// Termination report of a conic solve.
#[derive(Debug, Clone)]
pub enum SolveOutcome {
    Optimal(ConicSolution),
    /// No feasible point exists; carries the dual (Farkas) certificate.
    PrimalInfeasible { certificate: DVector<f64> },
    /// The objective is unbounded below; carries the primal ray.
    DualInfeasible { certificate: DVector<f64> },
    /// The solver stopped without a definitive answer.
    Stalled {
        status: String,
        r_prim: f64,
        r_dual: f64,
    },
}

impl SolveOutcome {
    /// Unwraps the optimal solution or converts the outcome into the
    /// matching error.
    pub fn into_optimal(self) -> Result<ConicSolution> {
        match self {
            SolveOutcome::Optimal(sol) => Ok(sol),
            SolveOutcome::PrimalInfeasible { certificate } => Err(Error::Infeasible {
                certificate_norm: certificate.norm(),
            }),
            SolveOutcome::DualInfeasible { certificate } => Err(Error::Unbounded {
                certificate_norm: certificate.norm(),
            }),
            SolveOutcome::Stalled {
                status,
                r_prim,
                r_dual,
            } => Err(Error::SolverStalled {
                status,
                r_prim,
                r_dual,
            }),
        }
    }
}

/// Primal point and per-block duals of a solved program.
#[derive(Debug, Clone)]
pub struct ConicSolution {
    pub x: DVector<f64>,
    eq_duals: Vec<DVector<f64>>,
    ineq_duals: Vec<DVector<f64>>,
    soc_duals: Vec<SocDual>,
    rsoc_duals: Vec<RsocDual>,
    pub objective: f64,
    pub dual_objective: f64,
    pub iterations: u32,
    pub r_prim: f64,
    pub r_dual: f64,
}

impl ConicSolution {
    pub fn eq_dual(&self, h: EqHandle) -> &DVector<f64> {
        &self.eq_duals[h.0]
    }

    pub fn ineq_dual(&self, h: IneqHandle) -> &DVector<f64> {
        &self.ineq_duals[h.0]
    }

    pub fn soc_dual(&self, h: SocHandle) -> &SocDual {
        &self.soc_duals[h.0]
    }

    pub fn rsoc_dual(&self, h: RsocHandle) -> &RsocDual {
        &self.rsoc_duals[h.0]
    }

    /// Relative primal-dual objective gap.
    pub fn relative_gap(&self) -> f64 {
        (self.objective - self.dual_objective).abs()
            / 1.0f64.max(self.objective.abs()).max(self.dual_objective.abs())
    }
}

/// Solver tolerances and limits.
#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    pub tol_feas: f64,
    pub tol_gap: f64,
    pub max_iter: u32,
    /// Interior-point step-length damping. The default 0.99 is fast on
    /// well-conditioned programs; values near 0.9 trade iterations for
    /// robustness when an optimal face pins a cone at its apex.
    pub step_fraction: f64,
    pub verbose: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol_feas: 1e-10,
            tol_gap: 1e-10,
            max_iter: 200,
            step_fraction: 0.99,
            verbose: false,
        }
    }
}

/// A conic program under construction.
#[derive(Default)]
pub struct ConicProgram {
    n_vars: usize,
    objective: Vec<f64>,
    blocks: Vec<Block>,
    n_eq: usize,
    n_ineq: usize,
    n_soc: usize,
    n_rsoc: usize,
}

impl ConicProgram {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `len` new scalar variables.
    pub fn add_vars(&mut self, len: usize) -> VarRange {
        let start = self.n_vars;
        self.n_vars += len;
        self.objective.resize(self.n_vars, 0.0);
        VarRange { start, len }
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn n_rows(&self) -> usize {
        self.blocks.iter().map(Block::n_rows).sum()
    }

    pub fn n_soc_blocks(&self) -> usize {
        self.n_soc
    }

    pub fn n_rsoc_blocks(&self) -> usize {
        self.n_rsoc
    }

    /// Adds `coeff` to the objective coefficient of column `col`.
    pub fn add_objective(&mut self, col: usize, coeff: f64) {
        self.objective[col] += coeff;
    }

    /// Enforces `expr = 0` for every row.
    pub fn add_equalities(&mut self, label: impl Into<String>, rows: Vec<LinExpr>) -> EqHandle {
        let h = EqHandle(self.n_eq);
        self.n_eq += 1;
        self.blocks.push(Block::Eq {
            label: label.into(),
            rows,
        });
        h
    }

    /// Enforces `expr >= 0` for every row.
    pub fn add_inequalities(
        &mut self,
        label: impl Into<String>,
        rows: Vec<LinExpr>,
    ) -> IneqHandle {
        let h = IneqHandle(self.n_ineq);
        self.n_ineq += 1;
        self.blocks.push(Block::Ineq {
            label: label.into(),
            rows,
        });
        h
    }

    /// Enforces `||vector|| <= margin`.
    pub fn add_soc(
        &mut self,
        label: impl Into<String>,
        margin: LinExpr,
        vector: Vec<LinExpr>,
    ) -> SocHandle {
        assert!(!vector.is_empty(), "second-order block needs a vector part");
        let h = SocHandle(self.n_soc);
        self.n_soc += 1;
        self.blocks.push(Block::Soc {
            label: label.into(),
            margin,
            vector,
        });
        h
    }

    /// Enforces `||vector||^2 <= h * k` (both factors nonnegative).
    pub fn add_rotated(
        &mut self,
        label: impl Into<String>,
        h_side: LinExpr,
        k_side: LinExpr,
        vector: Vec<LinExpr>,
    ) -> RsocHandle {
        assert!(!vector.is_empty(), "rotated block needs a vector part");
        let h = RsocHandle(self.n_rsoc);
        self.n_rsoc += 1;
        self.blocks.push(Block::Rsoc {
            label: label.into(),
            h: h_side,
            k: k_side,
            vector,
        });
        h
    }

    /// Lowers the program to the backend's `A x + s = b, s in K` form.
    fn lower(&self) -> (Vec<(usize, usize, f64)>, Vec<f64>, Vec<SupportedConeT<f64>>) {
        let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
        let mut b = Vec::new();
        let mut cones = Vec::new();
        let mut row = 0usize;

        let push_row = |triplets: &mut Vec<(usize, usize, f64)>,
                            b: &mut Vec<f64>,
                            row: &mut usize,
                            expr: &LinExpr,
                            scale: f64| {
            for (col, coeff) in &expr.terms {
                // s = b - A x with s = scale * expr, so A carries -coeff.
                triplets.push((*row, *col, -coeff * scale));
            }
            b.push(expr.constant * scale);
            *row += 1;
        };

        for block in &self.blocks {
            match block {
                Block::Eq { rows, .. } => {
                    if rows.is_empty() {
                        continue;
                    }
                    for r in rows {
                        push_row(&mut triplets, &mut b, &mut row, r, 1.0);
                    }
                    cones.push(SupportedConeT::ZeroConeT(rows.len()));
                }
                Block::Ineq { rows, .. } => {
                    if rows.is_empty() {
                        continue;
                    }
                    for r in rows {
                        push_row(&mut triplets, &mut b, &mut row, r, 1.0);
                    }
                    cones.push(SupportedConeT::NonnegativeConeT(rows.len()));
                }
                Block::Soc { margin, vector, .. } => {
                    push_row(&mut triplets, &mut b, &mut row, margin, 1.0);
                    for v in vector {
                        push_row(&mut triplets, &mut b, &mut row, v, 1.0);
                    }
                    cones.push(SupportedConeT::SecondOrderConeT(vector.len() + 1));
                }
                Block::Rsoc { h, k, vector, .. } => {
                    // (h + k)/2 is the cone radius, (h - k)/2 the first
                    // vector entry; see the module docs for the dual map.
                    let mut plus = h.clone();
                    for (c, v) in &k.terms {
                        plus.add(*c, *v);
                    }
                    plus.constant += k.constant;
                    let mut minus = h.clone();
                    for (c, v) in &k.terms {
                        minus.add(*c, -*v);
                    }
                    minus.constant -= k.constant;
                    push_row(&mut triplets, &mut b, &mut row, &plus, 0.5);
                    push_row(&mut triplets, &mut b, &mut row, &minus, 0.5);
                    for v in vector {
                        push_row(&mut triplets, &mut b, &mut row, v, 1.0);
                    }
                    cones.push(SupportedConeT::SecondOrderConeT(vector.len() + 2));
                }
            }
        }
        (triplets, b, cones)
    }

    /// Builds a CSC matrix from (row, col, value) triplets, merging
    /// duplicates.
    fn csc_from_triplets(
        m: usize,
        n: usize,
        mut triplets: Vec<(usize, usize, f64)>,
    ) -> CscMatrix<f64> {
        triplets.sort_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));
        let mut colptr = vec![0usize; n + 1];
        let mut rowval = Vec::with_capacity(triplets.len());
        let mut nzval: Vec<f64> = Vec::with_capacity(triplets.len());
        for (r, c, v) in triplets {
            if let (Some(&last_r), true) = (rowval.last(), colptr[c + 1] > 0) {
                // Same column as the previous entry and same row: merge.
                if last_r == r && colptr[c + 1] as usize == rowval.len() {
                    *nzval.last_mut().unwrap() += v;
                    continue;
                }
            }
            rowval.push(r);
            nzval.push(v);
            colptr[c + 1] = rowval.len();
        }
        // colptr must be cumulative even across empty columns.
        for c in 0..n {
            if colptr[c + 1] < colptr[c] {
                colptr[c + 1] = colptr[c];
            }
        }
        CscMatrix::new(m, n, colptr, rowval, nzval)
    }

    /// Solves the program and maps the backend duals onto the typed blocks.
    pub fn solve(&self, opts: &SolveOptions) -> SolveOutcome {
        let (triplets, b, cones) = self.lower();
        let m = b.len();
        let a = Self::csc_from_triplets(m, self.n_vars, triplets);
        let p = CscMatrix::new(
            self.n_vars,
            self.n_vars,
            vec![0; self.n_vars + 1],
            vec![],
            vec![],
        );

        let settings = DefaultSettings {
            verbose: opts.verbose,
            max_iter: opts.max_iter,
            tol_gap_abs: opts.tol_gap,
            tol_gap_rel: opts.tol_gap,
            tol_feas: opts.tol_feas,
            max_step_fraction: opts.step_fraction,
            ..DefaultSettings::default()
        };
        let mut solver = DefaultSolver::new(&p, &self.objective, &a, &b, &cones, settings);
        solver.solve();
        let sol = &solver.solution;

        match sol.status {
            SolverStatus::Solved | SolverStatus::AlmostSolved => {
                SolveOutcome::Optimal(self.split_duals(sol))
            }
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
                SolveOutcome::PrimalInfeasible {
                    certificate: DVector::from_vec(sol.z.clone()),
                }
            }
            SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
                SolveOutcome::DualInfeasible {
                    certificate: DVector::from_vec(sol.x.clone()),
                }
            }
            other => SolveOutcome::Stalled {
                status: format!("{other:?}"),
                r_prim: sol.r_prim,
                r_dual: sol.r_dual,
            },
        }
    }

    /// Solves with the given options, retrying once at relaxed tolerances if
    /// the backend stalls; a definitive infeasible/unbounded answer is
    /// returned as-is.
    pub fn solve_robust(&self, opts: &SolveOptions) -> SolveOutcome {
        let first = self.solve(opts);
        if !matches!(first, SolveOutcome::Stalled { .. }) {
            return first;
        }
        // Shorter steps get the iterate past degenerate faces (a chance
        // cone whose margin and vector vanish together at the optimum).
        let damped = SolveOptions {
            step_fraction: 0.90,
            ..*opts
        };
        let second = self.solve(&damped);
        if !matches!(second, SolveOutcome::Stalled { .. }) {
            return second;
        }
        let relaxed = SolveOptions {
            tol_feas: (opts.tol_feas * 100.0).min(1e-8),
            tol_gap: (opts.tol_gap * 100.0).min(1e-8),
            max_iter: opts.max_iter * 2,
            step_fraction: 0.80,
            verbose: opts.verbose,
        };
        self.solve(&relaxed)
    }

    fn split_duals(
        &self,
        sol: &clarabel::solver::DefaultSolution<f64>,
    ) -> ConicSolution {
        let mut eq_duals = Vec::new();
        let mut ineq_duals = Vec::new();
        let mut soc_duals = Vec::new();
        let mut rsoc_duals = Vec::new();
        let mut row = 0usize;
        for block in &self.blocks {
            match block {
                Block::Eq { rows, .. } => {
                    let z = DVector::from_iterator(
                        rows.len(),
                        sol.z[row..row + rows.len()].iter().copied(),
                    );
                    row += rows.len();
                    eq_duals.push(z);
                }
                Block::Ineq { rows, .. } => {
                    let z = DVector::from_iterator(
                        rows.len(),
                        sol.z[row..row + rows.len()].iter().copied(),
                    );
                    row += rows.len();
                    ineq_duals.push(z);
                }
                Block::Soc { vector, .. } => {
                    let lambda = sol.z[row];
                    let u = DVector::from_iterator(
                        vector.len(),
                        sol.z[row + 1..row + 1 + vector.len()].iter().copied(),
                    );
                    row += vector.len() + 1;
                    soc_duals.push(SocDual { lambda, u });
                }
                Block::Rsoc { vector, .. } => {
                    let z0 = sol.z[row];
                    let z1 = sol.z[row + 1];
                    let u = DVector::from_iterator(
                        vector.len(),
                        sol.z[row + 2..row + 2 + vector.len()].iter().copied(),
                    );
                    row += vector.len() + 2;
                    rsoc_duals.push(RsocDual {
                        mu_h: 0.5 * (z0 + z1),
                        mu_k: 0.5 * (z0 - z1),
                        u,
                    });
                }
            }
        }
        ConicSolution {
            x: DVector::from_vec(sol.x.clone()),
            eq_duals,
            ineq_duals,
            soc_duals,
            rsoc_duals,
            objective: sol.obj_val,
            dual_objective: sol.obj_val_dual,
            iterations: sol.iterations,
            r_prim: sol.r_prim,
            r_dual: sol.r_dual,
        }
    }

    /// Structured description of the assembled program (for debugging and
    /// the CLI's `--dump-program`).
    pub fn describe(&self) -> serde_json::Value {
        let blocks: Vec<serde_json::Value> = self
            .blocks
            .iter()
            .map(|blk| {
                serde_json::json!({
                    "label": blk.label(),
                    "kind": blk.kind_name(),
                    "rows": blk.n_rows(),
                })
            })
            .collect();
        serde_json::json!({
            "variables": self.n_vars,
            "rows": self.n_rows(),
            "blocks": blocks,
        })
    }
}
