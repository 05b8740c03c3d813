//! Chance-constrained optimization of affine recourse policies.
//!
//! The decision is a day-ahead schedule plus an affine response to the
//! extraction disturbance `xi`:
//!
//! ```text
//! theta(xi) = theta + alpha xi        (injections)
//! kappa(xi) = kappa + beta  xi        (regulation)
//! ```
//!
//! Pressures and flows then respond through the first-order network model
//! ([`crate::linearize::ResponseMaps`]); the reference node's squared
//! pressure stays fixed, and total recourse must cover each unit of
//! disturbance plus the actuator gas it triggers (`1'(alpha - B beta) =
//! 1'`), which makes nodal conservation hold identically in `xi`.
//!
//! Every engineering limit must hold with high probability. Each limit is
//! tightened by `z` standard deviations of its affine margin
//! ([`crate::uncertainty::UncertaintyModel`] supplies `z` and the
//! covariance factor `F`), turning it into a second-order cone. The
//! objective is expected dispatch cost (linear plus quadratic, the
//! quadratic part picking up a variance term) plus optional prices on the
//! predicted pressure and flow standard deviations.
//!
//! The standard deviations enter through auxiliary matrix variables
//!
//! ```text
//! W_theta = alpha F,   W_kappa = beta F,
//! W_pi  = G (W_theta - F) - G H W_kappa      (pressure response times F)
//! W_phi = J (W_theta - F) - K W_kappa        (flow response times F)
//! ```
//!
//! (`G`, `GH`, `J`, `K` the constant response maps), so each cone
//! references one row of one auxiliary matrix instead of a dense product
//! of decision variables — the assembled program stays sparse.

use crate::conic::{
    ConicProgram, EqHandle, IneqHandle, LinExpr, RsocHandle, SocHandle, SolveOptions,
};
use crate::error::{Error, Result};
use crate::linearize::{FlowLinearization, ResponseMaps};
use crate::network::GasNetwork;
use crate::steady::StationaryPoint;
use crate::uncertainty::UncertaintyModel;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Which assets may respond to disturbances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecourseScope {
    /// Only injections respond; all regulation stays at its schedule.
    InjectionsOnly,
    /// Injections and compressors respond; valves stay scheduled.
    WithCompressors,
    /// Injections, compressors, and valves all respond.
    AllActuators,
}

impl RecourseScope {
    /// Edges whose response row is pinned to zero.
    pub(crate) fn pinned_edges(self, net: &GasNetwork) -> Vec<usize> {
        use crate::network::EdgeKind::*;
        net.edges
            .iter()
            .enumerate()
            .filter(|(_, e)| match self {
                RecourseScope::InjectionsOnly => true,
                RecourseScope::WithCompressors => e.kind != Compressor,
                RecourseScope::AllActuators => e.kind == Passive,
            })
            .map(|(i, _)| i)
            .collect()
    }
}

/// Prices and scope for the policy optimization.
#[derive(Debug, Clone, Copy)]
pub struct PolicyOptions {
    /// Price on each node's predicted pressure standard deviation.
    pub psi_pressure: f64,
    /// Price on each edge's predicted flow standard deviation.
    pub psi_flow: f64,
    pub scope: RecourseScope,
    pub solver: SolveOptions,
}

impl Default for PolicyOptions {
    fn default() -> Self {
        Self {
            psi_pressure: 0.0,
            psi_flow: 0.0,
            scope: RecourseScope::AllActuators,
            solver: SolveOptions::default(),
        }
    }
}

/// Dual of one probabilistic limit: the multiplier on the margin and the
/// vector dual of the standard-deviation bound (zero in deterministic
/// mode, where the limit is a plain inequality).
#[derive(Debug, Clone)]
pub struct ChanceDual {
    pub lambda: f64,
    pub u: DVector<f64>,
}

/// Dual of one standard-deviation tracking cone.
#[derive(Debug, Clone)]
pub struct VarianceDual {
    pub lambda: f64,
    pub u: DVector<f64>,
}

/// Dual of one quadratic-cost epigraph cone.
#[derive(Debug, Clone)]
pub struct CostDual {
    /// Multiplier on the epigraph variable's side (equals the objective
    /// weight at optimality).
    pub mu: f64,
    /// Multiplier on the constant side.
    pub mu_const: f64,
    pub u: DVector<f64>,
}

/// All dual variables of the policy program, grouped by constraint family.
/// Regulation and flow-direction families are indexed in the order of
/// [`GasNetwork::active_indices`].
///
/// Signs are normalized once, here at the solver boundary, so that every
/// multiplier reads as a price:
///
/// * equality multipliers enter the Lagrangian as `+ lambda' expr` with the
///   expressions as written in the program builder (so `nominal_balance` is
///   the locational price paid per unit of injection, and `recourse_balance`
///   the price per unit of absorbed disturbance);
/// * inequality and cone duals keep the solver's convention: `lambda >= 0`
///   on the margin with gradient contribution `- h lambda - G' u`, and
///   complementarity `lambda * margin + u . vector = 0`.
#[derive(Debug, Clone)]
pub struct PolicyDuals {
    /// Nodal conservation (`N`): the locational price of gas.
    pub nominal_balance: DVector<f64>,
    /// Recourse adequacy per disturbance node (`N`): the price of standing
    /// ready to absorb one unit of disturbance. Zero at nodes that cannot
    /// be disturbed (no adequacy obligation exists for them).
    pub recourse_balance: DVector<f64>,
    /// Linearized flow relation (`E`).
    pub linear_flow: DVector<f64>,
    /// Reference pressure pin.
    pub reference_pin: f64,
    pub pressure_var: Vec<VarianceDual>,
    pub flow_var: Vec<VarianceDual>,
    pub pressure_upper: Vec<ChanceDual>,
    pub pressure_lower: Vec<ChanceDual>,
    pub flow_nonneg: Vec<ChanceDual>,
    pub injection_upper: Vec<ChanceDual>,
    pub injection_lower: Vec<ChanceDual>,
    pub regulation_upper: Vec<ChanceDual>,
    pub regulation_lower: Vec<ChanceDual>,
    pub cost_nominal: Vec<Option<CostDual>>,
    pub cost_recourse: Vec<Option<CostDual>>,
}

/// Solution of the policy program.
#[derive(Debug, Clone)]
pub struct PolicySolution {
    pub theta: DVector<f64>,
    pub kappa: DVector<f64>,
    pub phi: DVector<f64>,
    pub pi: DVector<f64>,
    /// Forecast extraction the schedule was built for.
    pub delta: DVector<f64>,
    /// Injection response (`N x N`); columns of undisturbed nodes are
    /// identically zero.
    pub alpha: DMatrix<f64>,
    /// Regulation response (`E x N`), with the same zero columns.
    pub beta: DMatrix<f64>,
    /// Predicted pressure standard deviation per node, recomputed from the
    /// optimal responses and the covariance factor.
    pub s_pressure: DVector<f64>,
    /// Predicted flow standard deviation per edge, recomputed likewise.
    pub s_flow: DVector<f64>,
    /// Expected dispatch cost (closed form, excludes variance prices).
    pub expected_cost: f64,
    /// Solver objective (expected cost plus variance prices).
    pub objective: f64,
    pub duals: PolicyDuals,
    /// Safety factor the program was tightened with.
    pub z: f64,
    pub psi_pressure: f64,
    pub psi_flow: f64,
    pub scope: RecourseScope,
    /// First-order model the program was built on.
    pub lin: FlowLinearization,
    pub maps: ResponseMaps,
    pub iterations: u32,
    pub relative_gap: f64,
}

/// A realized network state under the affine policy.
#[derive(Debug, Clone)]
pub struct RealizedState {
    pub theta: DVector<f64>,
    pub kappa: DVector<f64>,
    pub delta: DVector<f64>,
    pub phi: DVector<f64>,
    pub pi: DVector<f64>,
}

impl PolicySolution {
    /// The affine state the policy produces for a disturbance `xi`
    /// (first-order model; the true physics are evaluated separately).
    pub fn realize(&self, delta: &DVector<f64>, xi: &DVector<f64>) -> RealizedState {
        let d_inj = &self.alpha * xi - xi;
        let d_kappa = &self.beta * xi;
        RealizedState {
            theta: &self.theta + &self.alpha * xi,
            kappa: &self.kappa + &d_kappa,
            delta: delta + xi,
            phi: &self.phi + self.maps.flow_shift(&d_inj, &d_kappa),
            pi: &self.pi + self.maps.pressure_shift(&d_inj, &d_kappa),
        }
    }

    /// Recomputes the predicted standard deviations from first principles
    /// (response maps times covariance factor), independent of the solver's
    /// auxiliary variables.
    pub fn stddev_from_responses(&self, unc: &UncertaintyModel) -> (DVector<f64>, DVector<f64>) {
        let rp = self.maps.policy_pressure_response(&self.alpha, &self.beta);
        let rf = self.maps.policy_flow_response(&self.alpha, &self.beta);
        let wp = &rp * &unc.factor;
        let wf = &rf * &unc.factor;
        let sp = DVector::from_fn(wp.nrows(), |n, _| wp.row(n).norm());
        let sf = DVector::from_fn(wf.nrows(), |l, _| wf.row(l).norm());
        (sp, sf)
    }
}

/// Handles to every block of the assembled program, for dual extraction.
struct Handles {
    nominal_balance: EqHandle,
    recourse_balance: EqHandle,
    linear_flow: EqHandle,
    reference_pin: EqHandle,
    /// Present only when the pressure-deviation price is nonzero; the
    /// reference node's entry is always `None` (no deviation to track).
    pressure_var: Option<Vec<Option<SocHandle>>>,
    /// Present only when the flow-deviation price is nonzero.
    flow_var: Option<Vec<SocHandle>>,
    chance: ChanceHandles,
    cost_nominal: Vec<Option<RsocHandle>>,
    cost_recourse: Vec<Option<RsocHandle>>,
}

enum ChanceHandles {
    /// Stochastic mode: one cone per limit. `None` where the underlying
    /// box has zero width — those quantities are pinned by equalities
    /// instead (a cone whose margin and vector are both forced to zero
    /// sits at the cone's apex, which the interior-point method cannot
    /// scale).
    Cones {
        pressure_upper: Vec<SocHandle>,
        pressure_lower: Vec<SocHandle>,
        flow_nonneg: Vec<SocHandle>,
        injection_upper: Vec<Option<SocHandle>>,
        injection_lower: Vec<Option<SocHandle>>,
        regulation_upper: Vec<Option<SocHandle>>,
        regulation_lower: Vec<Option<SocHandle>>,
    },
    /// Deterministic mode (`z = 0`): one inequality block per family.
    Rows {
        pressure_upper: IneqHandle,
        pressure_lower: IneqHandle,
        flow_nonneg: IneqHandle,
        injection_upper: IneqHandle,
        injection_lower: IneqHandle,
        regulation_upper: IneqHandle,
        regulation_lower: IneqHandle,
    },
}

/// Optimizes the affine policy around the operating point `at`.
///
/// `delta` is the forecast extraction vector; disturbances are deviations
/// from it as described by `unc`. Also returns the assembled program's
/// description when `dump` is requested through [`describe_policy_program`].
pub fn solve_policy(
    net: &GasNetwork,
    delta: &DVector<f64>,
    at: &StationaryPoint,
    unc: &UncertaintyModel,
    opts: &PolicyOptions,
) -> Result<PolicySolution> {
    let (program, handles, layout) = build_policy_program(net, delta, at, unc, opts)?;
    let sol = program.solve_robust(&opts.solver).into_optimal()?;
    extract_solution(net, delta, unc, opts, sol, handles, layout)
}

/// Structured description of the assembled policy program (for diagnostics
/// and the CLI's `--dump-program`).
pub fn describe_policy_program(
    net: &GasNetwork,
    delta: &DVector<f64>,
    at: &StationaryPoint,
    unc: &UncertaintyModel,
    opts: &PolicyOptions,
) -> Result<serde_json::Value> {
    let (program, _, _) = build_policy_program(net, delta, at, unc, opts)?;
    Ok(program.describe())
}

/// Column layout of the policy program.
struct Layout {
    theta: crate::conic::VarRange,
    kappa: crate::conic::VarRange,
    phi: crate::conic::VarRange,
    pi: crate::conic::VarRange,
    alpha: crate::conic::VarRange,
    beta: crate::conic::VarRange,
    /// Nodes with response columns, in column order.
    stoch: Vec<usize>,
    lin: FlowLinearization,
    maps: ResponseMaps,
}

fn build_policy_program(
    net: &GasNetwork,
    delta: &DVector<f64>,
    at: &StationaryPoint,
    unc: &UncertaintyModel,
    opts: &PolicyOptions,
) -> Result<(ConicProgram, Handles, Layout)> {
    let n = net.n_nodes();
    let e = net.n_edges();
    let r = net.reference_index();
    let a = net.incidence();
    let b = net.control_incidence();
    let active = net.active_indices();
    let z = unc.z;
    let f = &unc.factor;

    if delta.len() != n {
        return Err(Error::Dimension(format!(
            "extraction vector has length {}, expected {n}",
            delta.len()
        )));
    }

    let lin = FlowLinearization::at(net, &at.phi, &at.pi, &at.kappa)?;
    let maps = ResponseMaps::new(net, &lin)?;

    // Constant response maps feeding the auxiliary definitions.
    let g = &maps.grounded_inverse; // N x N
    let gh = &maps.pressure_wrt_regulation; // N x E
    let j_map = &maps.flow_wrt_injection; // E x N
    let k_map = &maps.flow_wrt_regulation; // E x E
    let g_f = g * f; // N x N
    let j_f = j_map * f; // E x N

    // Response columns exist only for nodes that can actually be
    // disturbed. A zero-variance node's response column would be
    // constrained by nothing but its adequacy row (the disturbance never
    // materializes), leaving a flat optimal face that stalls the
    // interior-point method — and it carries no information anyway.
    let stoch = unc.stochastic_nodes();
    let s = stoch.len();

    let mut p = ConicProgram::new();
    let theta = p.add_vars(n);
    let kappa = p.add_vars(e);
    let phi = p.add_vars(e);
    let pi = p.add_vars(n);
    let alpha = p.add_vars(n * s);
    let beta = p.add_vars(e * s);
    let w_theta = p.add_vars(n * s); // alpha F
    let w_kappa = p.add_vars(e * s); // beta F
    let w_pi = p.add_vars(n * s); // pressure response times F
    let w_phi = p.add_vars(e * s); // flow response times F

    // Indexing: `jj`/`kk` run over positions in `stoch`.
    let ai = |i: usize, jj: usize| alpha.at(i * s + jj);
    let bi = |l: usize, jj: usize| beta.at(l * s + jj);
    let wt = |i: usize, kk: usize| w_theta.at(i * s + kk);
    let wk = |l: usize, kk: usize| w_kappa.at(l * s + kk);
    let wp = |i: usize, kk: usize| w_pi.at(i * s + kk);
    let wf = |l: usize, kk: usize| w_phi.at(l * s + kk);

    // --- Objective ---------------------------------------------------
    let c1 = net.cost_linear();
    let c2 = net.cost_quadratic();
    for i in 0..n {
        if c1[i] != 0.0 {
            p.add_objective(theta.at(i), c1[i]);
        }
    }

    // --- Equalities ---------------------------------------------------
    // Nominal conservation: A phi - theta + B kappa + delta = 0.
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let mut row = LinExpr::constant(delta[i]);
        row.add(theta.at(i), -1.0);
        for l in 0..e {
            if a[(i, l)] != 0.0 {
                row.add(phi.at(l), a[(i, l)]);
            }
            if b[(i, l)] != 0.0 {
                row.add(kappa.at(l), b[(i, l)]);
            }
        }
        rows.push(row);
    }
    let nominal_balance = p.add_equalities("nominal conservation", rows);

    // Recourse adequacy per disturbance node j:
    // sum_i (B beta)_{ij} - sum_i alpha_{ij} + 1 = 0.
    let bsum: Vec<f64> = (0..e).map(|l| (0..n).map(|i| b[(i, l)]).sum()).collect();
    let mut rows = Vec::with_capacity(s);
    for jj in 0..s {
        let mut row = LinExpr::constant(1.0);
        for i in 0..n {
            row.add(ai(i, jj), -1.0);
        }
        for l in 0..e {
            if bsum[l] != 0.0 {
                row.add(bi(l, jj), bsum[l]);
            }
        }
        rows.push(row);
    }
    let recourse_balance = p.add_equalities("recourse adequacy", rows);

    // Linearized flow relation: phi - G2 pi - G3 kappa - g1 = 0.
    let mut rows = Vec::with_capacity(e);
    for l in 0..e {
        let mut row = LinExpr::constant(-lin.offset[l]);
        row.add(phi.at(l), 1.0);
        for i in 0..n {
            let c = lin.wrt_pressure[(l, i)];
            if c != 0.0 {
                row.add(pi.at(i), -c);
            }
        }
        row.add(kappa.at(l), -lin.wrt_regulation[(l, l)]);
        rows.push(row);
    }
    let linear_flow = p.add_equalities("linearized flow relation", rows);

    // Reference pressure pin: pi_ref(point) - pi_r = 0.
    let mut row = LinExpr::constant(at.pi[r]);
    row.add(pi.at(r), -1.0);
    let reference_pin = p.add_equalities("reference pressure pin", vec![row]);

    // Passive edges carry no regulation.
    let passive_rows: Vec<LinExpr> = (0..e)
        .filter(|&l| !net.edges[l].kind.is_active())
        .map(|l| LinExpr::var(kappa.at(l), 1.0))
        .collect();
    if !passive_rows.is_empty() {
        p.add_equalities("passive edges unregulated", passive_rows);
    }

    // The reference node does not respond to disturbances (its injection
    // is the nominal slack; letting it respond would move the pinned
    // pressure's counterpart unaccountably).
    if s > 0 {
        let rows: Vec<LinExpr> = (0..s).map(|jj| LinExpr::var(ai(r, jj), 1.0)).collect();
        p.add_equalities("reference node non-responsive", rows);
    }

    // Scope pins on the regulation response.
    let scope_pinned: Vec<usize> = opts.scope.pinned_edges(net);
    let mut rows = Vec::new();
    for &l in &scope_pinned {
        for jj in 0..s {
            rows.push(LinExpr::var(bi(l, jj), 1.0));
        }
    }
    if !rows.is_empty() {
        p.add_equalities("regulation response pins", rows);
    }

    // Zero-width boxes become equality pins rather than chance cones: a
    // cone whose margin and deviation are both forced to zero has no
    // interior for the solver to walk through. A node that cannot flex
    // its injection is pinned to it and cannot respond; likewise a fixed
    // actuator.
    let pi_lo = net.pressure_min();
    let pi_hi = net.pressure_max();
    let th_lo = net.injection_min();
    let th_hi = net.injection_max();
    let (ka_lo, ka_hi) = net.regulation_bounds();
    let theta_fixed: Vec<bool> = (0..n).map(|i| th_lo[i] == th_hi[i]).collect();
    let kappa_fixed: Vec<bool> = (0..e).map(|l| ka_lo[l] == ka_hi[l]).collect();

    let mut rows = Vec::new();
    for i in 0..n {
        if theta_fixed[i] {
            let mut row = LinExpr::constant(-th_hi[i]);
            row.add(theta.at(i), 1.0);
            rows.push(row);
        }
    }
    if !rows.is_empty() {
        p.add_equalities("fixed injections", rows);
    }
    let mut rows = Vec::new();
    for i in 0..n {
        if theta_fixed[i] && i != r {
            for jj in 0..s {
                rows.push(LinExpr::var(ai(i, jj), 1.0));
            }
        }
    }
    if !rows.is_empty() {
        p.add_equalities("fixed injections non-responsive", rows);
    }
    let mut rows = Vec::new();
    for &l in &active {
        if kappa_fixed[l] {
            let mut row = LinExpr::constant(-ka_hi[l]);
            row.add(kappa.at(l), 1.0);
            rows.push(row);
            if !scope_pinned.contains(&l) {
                for jj in 0..s {
                    rows.push(LinExpr::var(bi(l, jj), 1.0));
                }
            }
        }
    }
    if !rows.is_empty() {
        p.add_equalities("fixed regulation", rows);
    }

    // --- Auxiliary definitions ----------------------------------------
    if s > 0 {
        // W_theta = alpha F (restricted to the stochastic columns; all
        // other columns of F are zero).
        let mut rows = Vec::with_capacity(n * s);
        for i in 0..n {
            for (kk, &k) in stoch.iter().enumerate() {
                let mut row = LinExpr::var(wt(i, kk), 1.0);
                for (jj, &j) in stoch.iter().enumerate() {
                    let c = f[(j, k)];
                    if c != 0.0 {
                        row.add(ai(i, jj), -c);
                    }
                }
                rows.push(row);
            }
        }
        p.add_equalities("injection response spread", rows);

        // W_kappa = beta F.
        let mut rows = Vec::with_capacity(e * s);
        for l in 0..e {
            for (kk, &k) in stoch.iter().enumerate() {
                let mut row = LinExpr::var(wk(l, kk), 1.0);
                for (jj, &j) in stoch.iter().enumerate() {
                    let c = f[(j, k)];
                    if c != 0.0 {
                        row.add(bi(l, jj), -c);
                    }
                }
                rows.push(row);
            }
        }
        p.add_equalities("regulation response spread", rows);

        // W_pi = G W_theta - GH W_kappa - G F.
        let mut rows = Vec::with_capacity(n * s);
        for i in 0..n {
            for (kk, &k) in stoch.iter().enumerate() {
                let mut row = LinExpr::constant(g_f[(i, k)]);
                row.add(wp(i, kk), 1.0);
                for m in 0..n {
                    let c = g[(i, m)];
                    if c != 0.0 {
                        row.add(wt(m, kk), -c);
                    }
                }
                for l in 0..e {
                    let c = gh[(i, l)];
                    if c != 0.0 {
                        row.add(wk(l, kk), c);
                    }
                }
                rows.push(row);
            }
        }
        p.add_equalities("pressure response spread", rows);

        // W_phi = J W_theta - K W_kappa - J F.
        let mut rows = Vec::with_capacity(e * s);
        for l in 0..e {
            for (kk, &k) in stoch.iter().enumerate() {
                let mut row = LinExpr::constant(j_f[(l, k)]);
                row.add(wf(l, kk), 1.0);
                for m in 0..n {
                    let c = j_map[(l, m)];
                    if c != 0.0 {
                        row.add(wt(m, kk), -c);
                    }
                }
                for m in 0..e {
                    let c = k_map[(l, m)];
                    if c != 0.0 {
                        row.add(wk(m, kk), c);
                    }
                }
                rows.push(row);
            }
        }
        p.add_equalities("flow response spread", rows);
    }

    // --- Standard-deviation tracking cones -----------------------------
    // Only created when priced: an unpriced tracking variable has nothing
    // pinning it to the norm it tracks (the interior-point method would
    // float it into the cone's interior, and the flat optimal face hurts
    // convergence). Predicted deviations are always recomputed from the
    // responses after the solve.
    let pressure_var = (opts.psi_pressure != 0.0 && s > 0).then(|| {
        (0..n)
            .map(|i| {
                // The reference pressure cannot deviate (its response row
                // is structurally zero); a tracking cone there would sit
                // at the apex.
                if i == r {
                    return None;
                }
                let s_pi = p.add_vars(1);
                p.add_objective(s_pi.at(0), opts.psi_pressure);
                let vector: Vec<LinExpr> =
                    (0..s).map(|kk| LinExpr::var(wp(i, kk), 1.0)).collect();
                Some(p.add_soc(
                    format!("pressure deviation node {}", net.nodes[i].id),
                    LinExpr::var(s_pi.at(0), 1.0),
                    vector,
                ))
            })
            .collect::<Vec<_>>()
    });
    let flow_var = (opts.psi_flow != 0.0 && s > 0).then(|| {
        let s_phi = p.add_vars(e);
        (0..e)
            .map(|l| {
                p.add_objective(s_phi.at(l), opts.psi_flow);
                let vector: Vec<LinExpr> =
                    (0..s).map(|kk| LinExpr::var(wf(l, kk), 1.0)).collect();
                p.add_soc(
                    format!("flow deviation edge {l}"),
                    LinExpr::var(s_phi.at(l), 1.0),
                    vector,
                )
            })
            .collect::<Vec<_>>()
    });

    // --- Probabilistic limits ------------------------------------------
    let margin_pressure_upper = |i: usize| {
        let mut m = LinExpr::constant(pi_hi[i]);
        m.add(pi.at(i), -1.0);
        m
    };
    let margin_pressure_lower = |i: usize| {
        let mut m = LinExpr::constant(-pi_lo[i]);
        m.add(pi.at(i), 1.0);
        m
    };
    let margin_injection_upper = |i: usize| {
        let mut m = LinExpr::constant(th_hi[i]);
        m.add(theta.at(i), -1.0);
        m
    };
    let margin_injection_lower = |i: usize| {
        let mut m = LinExpr::constant(-th_lo[i]);
        m.add(theta.at(i), 1.0);
        m
    };
    let margin_regulation_upper = |l: usize| {
        let mut m = LinExpr::constant(ka_hi[l]);
        m.add(kappa.at(l), -1.0);
        m
    };
    let margin_regulation_lower = |l: usize| {
        let mut m = LinExpr::constant(-ka_lo[l]);
        m.add(kappa.at(l), 1.0);
        m
    };

    let chance = if z > 0.0 && s > 0 {
        let mut pressure_upper = Vec::with_capacity(n);
        let mut pressure_lower = Vec::with_capacity(n);
        for i in 0..n {
            let vec_i = |coeff: f64| -> Vec<LinExpr> {
                (0..s).map(|kk| LinExpr::var(wp(i, kk), coeff)).collect()
            };
            pressure_upper.push(p.add_soc(
                format!("pressure ceiling node {}", net.nodes[i].id),
                margin_pressure_upper(i),
                vec_i(z),
            ));
            pressure_lower.push(p.add_soc(
                format!("pressure floor node {}", net.nodes[i].id),
                margin_pressure_lower(i),
                vec_i(z),
            ));
        }
        let mut flow_nonneg = Vec::with_capacity(active.len());
        for &l in &active {
            let vector: Vec<LinExpr> = (0..s).map(|kk| LinExpr::var(wf(l, kk), z)).collect();
            flow_nonneg.push(p.add_soc(
                format!("flow direction edge {l}"),
                LinExpr::var(phi.at(l), 1.0),
                vector,
            ));
        }
        let mut injection_upper = Vec::with_capacity(n);
        let mut injection_lower = Vec::with_capacity(n);
        for i in 0..n {
            if theta_fixed[i] {
                injection_upper.push(None);
                injection_lower.push(None);
                continue;
            }
            let vector: Vec<LinExpr> = (0..s).map(|kk| LinExpr::var(wt(i, kk), z)).collect();
            injection_upper.push(Some(p.add_soc(
                format!("injection ceiling node {}", net.nodes[i].id),
                margin_injection_upper(i),
                vector.clone(),
            )));
            injection_lower.push(Some(p.add_soc(
                format!("injection floor node {}", net.nodes[i].id),
                margin_injection_lower(i),
                vector,
            )));
        }
        let mut regulation_upper = Vec::with_capacity(active.len());
        let mut regulation_lower = Vec::with_capacity(active.len());
        for &l in &active {
            if kappa_fixed[l] {
                regulation_upper.push(None);
                regulation_lower.push(None);
                continue;
            }
            let vector: Vec<LinExpr> = (0..s).map(|kk| LinExpr::var(wk(l, kk), z)).collect();
            regulation_upper.push(Some(p.add_soc(
                format!("regulation ceiling edge {l}"),
                margin_regulation_upper(l),
                vector.clone(),
            )));
            regulation_lower.push(Some(p.add_soc(
                format!("regulation floor edge {l}"),
                margin_regulation_lower(l),
                vector,
            )));
        }
        ChanceHandles::Cones {
            pressure_upper,
            pressure_lower,
            flow_nonneg,
            injection_upper,
            injection_lower,
            regulation_upper,
            regulation_lower,
        }
    } else {
        // Deterministic mode (or no disturbances at all): plain
        // inequality per limit, in the same family order.
        let pressure_upper =
            p.add_inequalities("pressure ceilings", (0..n).map(margin_pressure_upper).collect());
        let pressure_lower =
            p.add_inequalities("pressure floors", (0..n).map(margin_pressure_lower).collect());
        let flow_nonneg = p.add_inequalities(
            "flow directions",
            active
                .iter()
                .map(|&l| LinExpr::var(phi.at(l), 1.0))
                .collect(),
        );
        let injection_upper = p.add_inequalities(
            "injection ceilings",
            (0..n).map(margin_injection_upper).collect(),
        );
        let injection_lower = p.add_inequalities(
            "injection floors",
            (0..n).map(margin_injection_lower).collect(),
        );
        let regulation_upper = p.add_inequalities(
            "regulation ceilings",
            active.iter().map(|&l| margin_regulation_upper(l)).collect(),
        );
        let regulation_lower = p.add_inequalities(
            "regulation floors",
            active.iter().map(|&l| margin_regulation_lower(l)).collect(),
        );
        ChanceHandles::Rows {
            pressure_upper,
            pressure_lower,
            flow_nonneg,
            injection_upper,
            injection_lower,
            regulation_upper,
            regulation_lower,
        }
    };

    // --- Quadratic cost epigraphs ---------------------------------------
    let mut cost_nominal = vec![None; n];
    let mut cost_recourse = vec![None; n];
    for i in 0..n {
        if c2[i] <= 0.0 {
            continue;
        }
        let root = c2[i].sqrt();
        // A fixed injection contributes a constant quadratic cost; it is
        // accounted in the closed-form expected cost, not given an
        // epigraph (whose margin could be apex-pinned at zero).
        if !theta_fixed[i] {
            let ct = p.add_vars(1);
            p.add_objective(ct.at(0), 1.0);
            cost_nominal[i] = Some(p.add_rotated(
                format!("scheduled cost node {}", net.nodes[i].id),
                LinExpr::var(ct.at(0), 1.0),
                LinExpr::constant(1.0),
                vec![LinExpr::var(theta.at(i), root)],
            ));
        }
        // Recourse cost only where the response row is free.
        if s > 0 && !theta_fixed[i] && i != r {
            let ca = p.add_vars(1);
            p.add_objective(ca.at(0), 1.0);
            let vector: Vec<LinExpr> =
                (0..s).map(|kk| LinExpr::var(wt(i, kk), root)).collect();
            cost_recourse[i] = Some(p.add_rotated(
                format!("recourse cost node {}", net.nodes[i].id),
                LinExpr::var(ca.at(0), 1.0),
                LinExpr::constant(1.0),
                vector,
            ));
        }
    }

    let handles = Handles {
        nominal_balance,
        recourse_balance,
        linear_flow,
        reference_pin,
        pressure_var,
        flow_var,
        chance,
        cost_nominal,
        cost_recourse,
    };
    let layout = Layout {
        theta,
        kappa,
        phi,
        pi,
        alpha,
        beta,
        stoch,
        lin,
        maps,
    };
    Ok((p, handles, layout))
}

fn extract_solution(
    net: &GasNetwork,
    delta: &DVector<f64>,
    unc: &UncertaintyModel,
    opts: &PolicyOptions,
    sol: crate::conic::ConicSolution,
    handles: Handles,
    layout: Layout,
) -> Result<PolicySolution> {
    let n = net.n_nodes();
    let e = net.n_edges();
    let s = layout.stoch.len();
    let x = &sol.x;

    let theta = DVector::from_fn(n, |i, _| x[layout.theta.at(i)]);
    let kappa = DVector::from_fn(e, |l, _| x[layout.kappa.at(l)]);
    let phi = DVector::from_fn(e, |l, _| x[layout.phi.at(l)]);
    let pi = DVector::from_fn(n, |i, _| x[layout.pi.at(i)]);

    // Responses stored as full matrices; columns of undisturbed nodes are
    // identically zero.
    let mut alpha = DMatrix::zeros(n, n);
    let mut beta = DMatrix::zeros(e, n);
    for (jj, &j) in layout.stoch.iter().enumerate() {
        for i in 0..n {
            alpha[(i, j)] = x[layout.alpha.at(i * s + jj)];
        }
        for l in 0..e {
            beta[(l, j)] = x[layout.beta.at(l * s + jj)];
        }
    }

    // Predicted deviations, recomputed from the responses (the solver only
    // carries tracking variables for the priced families).
    let rp = layout.maps.policy_pressure_response(&alpha, &beta) * &unc.factor;
    let rf = layout.maps.policy_flow_response(&alpha, &beta) * &unc.factor;
    let s_pressure = DVector::from_fn(n, |i, _| rp.row(i).norm());
    let s_flow = DVector::from_fn(e, |l, _| rf.row(l).norm());

    // Closed-form expected cost: linear + quadratic in the schedule plus
    // the quadratic cost of recourse variance.
    let c1 = net.cost_linear();
    let c2 = net.cost_quadratic();
    let w_theta = &alpha * &unc.factor;
    let mut expected_cost = 0.0;
    for i in 0..n {
        expected_cost += c1[i] * theta[i] + c2[i] * theta[i] * theta[i];
        expected_cost += c2[i] * w_theta.row(i).norm_squared();
    }

    // Cone vector duals live in the stochastic-column space; expand them
    // to full node indexing (zeros at undisturbed nodes).
    let expand = |u: &DVector<f64>| -> DVector<f64> {
        let mut full = DVector::zeros(n);
        for (kk, &k) in layout.stoch.iter().enumerate() {
            full[k] = u[kk];
        }
        full
    };
    let var_dual = |h: crate::conic::SocHandle| -> VarianceDual {
        let d = sol.soc_dual(h);
        VarianceDual {
            lambda: d.lambda,
            u: expand(&d.u),
        }
    };
    let chance_from_soc = |h: crate::conic::SocHandle| -> ChanceDual {
        let d = sol.soc_dual(h);
        ChanceDual {
            lambda: d.lambda,
            u: expand(&d.u),
        }
    };

    let zero_var = |count: usize| -> Vec<VarianceDual> {
        (0..count)
            .map(|_| VarianceDual {
                lambda: 0.0,
                u: DVector::zeros(n),
            })
            .collect()
    };
    let duals = {
        let pressure_var = match &handles.pressure_var {
            Some(hs) => hs
                .iter()
                .map(|h| match h {
                    Some(h) => var_dual(*h),
                    None => VarianceDual {
                        lambda: 0.0,
                        u: DVector::zeros(n),
                    },
                })
                .collect(),
            None => zero_var(n),
        };
        let flow_var = match &handles.flow_var {
            Some(hs) => hs.iter().map(|&h| var_dual(h)).collect(),
            None => zero_var(e),
        };
        let (
            pressure_upper,
            pressure_lower,
            flow_nonneg,
            injection_upper,
            injection_lower,
            regulation_upper,
            regulation_lower,
        ) = match &handles.chance {
            ChanceHandles::Cones {
                pressure_upper,
                pressure_lower,
                flow_nonneg,
                injection_upper,
                injection_lower,
                regulation_upper,
                regulation_lower,
            } => {
                let opt = |hs: &Vec<Option<SocHandle>>| -> Vec<ChanceDual> {
                    hs.iter()
                        .map(|h| match h {
                            Some(h) => chance_from_soc(*h),
                            None => ChanceDual {
                                lambda: 0.0,
                                u: DVector::zeros(n),
                            },
                        })
                        .collect()
                };
                (
                    pressure_upper.iter().map(|&h| chance_from_soc(h)).collect(),
                    pressure_lower.iter().map(|&h| chance_from_soc(h)).collect(),
                    flow_nonneg.iter().map(|&h| chance_from_soc(h)).collect(),
                    opt(injection_upper),
                    opt(injection_lower),
                    opt(regulation_upper),
                    opt(regulation_lower),
                )
            }
            ChanceHandles::Rows {
                pressure_upper,
                pressure_lower,
                flow_nonneg,
                injection_upper,
                injection_lower,
                regulation_upper,
                regulation_lower,
            } => {
                let rows = |h: IneqHandle, count: usize| -> Vec<ChanceDual> {
                    let d = sol.ineq_dual(h);
                    (0..count)
                        .map(|i| ChanceDual {
                            lambda: d[i],
                            u: DVector::zeros(n),
                        })
                        .collect()
                };
                let n_active = net.active_indices().len();
                (
                    rows(*pressure_upper, n),
                    rows(*pressure_lower, n),
                    rows(*flow_nonneg, n_active),
                    rows(*injection_upper, n),
                    rows(*injection_lower, n),
                    rows(*regulation_upper, n_active),
                    rows(*regulation_lower, n_active),
                )
            }
        };
        let cost_nominal: Vec<Option<CostDual>> = handles
            .cost_nominal
            .iter()
            .map(|h| {
                h.map(|h| {
                    let d = sol.rsoc_dual(h);
                    CostDual {
                        mu: d.mu_h,
                        mu_const: d.mu_k,
                        u: d.u.clone(),
                    }
                })
            })
            .collect();
        let cost_recourse: Vec<Option<CostDual>> = handles
            .cost_recourse
            .iter()
            .map(|h| {
                h.map(|h| {
                    let d = sol.rsoc_dual(h);
                    CostDual {
                        mu: d.mu_h,
                        mu_const: d.mu_k,
                        u: expand(&d.u),
                    }
                })
            })
            .collect();
        // Equality multipliers are negated here so they read as prices
        // (`+ lambda' expr` in the Lagrangian); see the `PolicyDuals` docs.
        // The adequacy price of a disturbance that cannot occur is zero.
        let recourse_full = expand(&-sol.eq_dual(handles.recourse_balance));
        PolicyDuals {
            nominal_balance: -sol.eq_dual(handles.nominal_balance),
            recourse_balance: recourse_full,
            linear_flow: -sol.eq_dual(handles.linear_flow),
            reference_pin: -sol.eq_dual(handles.reference_pin)[0],
            pressure_var,
            flow_var,
            pressure_upper,
            pressure_lower,
            flow_nonneg,
            injection_upper,
            injection_lower,
            regulation_upper,
            regulation_lower,
            cost_nominal,
            cost_recourse,
        }
    };

    Ok(PolicySolution {
        theta,
        kappa,
        phi,
        pi,
        delta: delta.clone(),
        alpha,
        beta,
        s_pressure,
        s_flow,
        expected_cost,
        objective: sol.objective,
        duals,
        z: unc.z,
        psi_pressure: opts.psi_pressure,
        psi_flow: opts.psi_flow,
        scope: opts.scope,
        lin: layout.lin,
        maps: layout.maps,
        iterations: sol.iterations,
        relative_gap: sol.relative_gap(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Edge, EdgeKind, GasNetwork, Node};
    use crate::steady::{solve_deterministic, DispatchOptions};
    use crate::uncertainty::RiskModel;
    use approx::assert_relative_eq;

    fn node(id: u32) -> Node {
        Node {
            id,
            pressure_min: 1.0,
            pressure_max: 900.0,
            injection_min: 0.0,
            injection_max: 10.0,
            cost_linear: 1.0,
            cost_quadratic: 0.0,
            extraction_mean: 0.0,
            extraction_stddev: 0.0,
        }
    }

    fn passive(from: u32, to: u32, w: f64) -> Edge {
        Edge {
            from,
            to,
            w,
            kind: EdgeKind::Passive,
            b: 0.0,
            kappa_min: 0.0,
            kappa_max: 0.0,
        }
    }

    /// Chain 1 - 2 - 3 with the reference supplier at node 1, uncertain
    /// demand at node 2, and a second supplier at node 3.
    fn chain_net(sigma2: f64) -> GasNetwork {
        let mut n1 = node(1);
        n1.cost_linear = 3.0;
        let mut n2 = node(2);
        n2.injection_max = 0.0; // pure demand node
        n2.extraction_stddev = sigma2;
        let mut n3 = node(3);
        n3.cost_linear = 8.0;
        GasNetwork {
            name: None,
            reference_node: 1,
            nodes: vec![n1, n2, n3],
            edges: vec![passive(1, 2, 1.0), passive(2, 3, 1.0)],
            correlation: None,
        }
    }

    /// Builds a linearization point with nonzero flow on every edge by
    /// simulating the true physics at explicit injections (a cost-optimal
    /// dispatch often idles edges entirely, where the flow relation is not
    /// differentiable).
    fn point_at(
        net: &GasNetwork,
        theta: &[f64],
        delta: &DVector<f64>,
    ) -> crate::steady::StationaryPoint {
        let theta = DVector::from_column_slice(theta);
        let kappa = DVector::zeros(net.n_edges());
        crate::steady::simulate_point(
            net,
            &theta,
            &kappa,
            delta,
            50.0,
            &crate::steady::SimulationOptions::default(),
        )
        .unwrap()
    }

    /// In deterministic mode with no uncertainty the policy program is the
    /// dispatch problem around the operating point; costs must agree.
    #[test]
    fn deterministic_mode_matches_dispatch() {
        let net = chain_net(0.0);
        net.validate().unwrap();
        let delta = DVector::from_vec(vec![0.0, 1.5, 0.0]);
        let d = solve_deterministic(&net, &delta, &DispatchOptions::default()).unwrap();
        let point = point_at(&net, &[0.5, 0.0, 1.0], &delta);
        let unc = UncertaintyModel::build(&net, 0.0, RiskModel::Deterministic).unwrap();
        let sol = solve_policy(&net, &delta, &point, &unc, &PolicyOptions::default()).unwrap();
        assert_relative_eq!(sol.expected_cost, d.cost, epsilon = 1e-5);
        assert_relative_eq!(sol.objective, d.cost, epsilon = 1e-5);
        // No disturbances: predicted deviations vanish... except that alpha
        // must still sum to one per column; the cheapest response is any
        // zero-variance one, and sigma = 0 makes every response zero-
        // variance, so the deviations are identically zero.
        assert!(sol.s_pressure.amax() < 1e-6);
        assert!(sol.s_flow.amax() < 1e-6);
    }

    /// A demand node with no injection capability cannot self-balance, so
    /// all recourse lands on the far supplier; the response structure and
    /// the predicted deviations are then computable by hand.
    #[test]
    fn recourse_lands_on_capable_supplier() {
        let net = chain_net(0.4);
        net.validate().unwrap();
        let delta = DVector::from_vec(vec![0.0, 1.5, 0.0]);
        let point = point_at(&net, &[0.5, 0.0, 1.0], &delta);
        let unc = UncertaintyModel::build(&net, 0.10, RiskModel::Gaussian).unwrap();
        let sol = solve_policy(&net, &delta, &point, &unc, &PolicyOptions::default()).unwrap();

        // Column 2 of alpha: the demand node cannot respond (injection box
        // is [0,0] and theta-cones force zero variance there), the
        // reference is pinned, so the supplier at node 3 takes it all.
        assert_relative_eq!(sol.alpha[(0, 1)], 0.0, epsilon = 1e-6);
        assert_relative_eq!(sol.alpha[(1, 1)], 0.0, epsilon = 1e-5);
        assert_relative_eq!(sol.alpha[(2, 1)], 1.0, epsilon = 1e-5);

        // Recourse adequacy holds for the disturbed column; columns of
        // undisturbed nodes are identically zero.
        let b = net.control_incidence();
        let colsum = (sol.alpha.clone() - &b * &sol.beta)
            .row_sum()
            .transpose();
        assert_relative_eq!(colsum[1], 1.0, epsilon = 1e-7);
        assert_eq!(sol.alpha.column(0).amax(), 0.0);
        assert_eq!(sol.alpha.column(2).amax(), 0.0);

        // The disturbance is met from node 3 through edge 2: unit flow
        // response, sigma = 0.4 flow deviation there; edge 1 untouched.
        assert_relative_eq!(sol.s_flow[1], 0.4, epsilon = 1e-5);
        assert!(sol.s_flow[0] < 1e-6);

        // Chance margins hold: theta_3 keeps z * 0.4 of headroom.
        assert!(sol.theta[2] + unc.z * 0.4 <= 10.0 + 1e-6);
    }

    /// Realized affine states conserve mass exactly for any disturbance.
    #[test]
    fn realized_states_conserve_mass() {
        let net = chain_net(0.4);
        let delta = DVector::from_vec(vec![0.0, 1.5, 0.0]);
        let point = point_at(&net, &[0.5, 0.0, 1.0], &delta);
        let unc = UncertaintyModel::build(&net, 0.10, RiskModel::Gaussian).unwrap();
        let sol = solve_policy(&net, &delta, &point, &unc, &PolicyOptions::default()).unwrap();

        let a = net.incidence();
        let b = net.control_incidence();
        let draws = unc.sample(11, 0, 25);
        for s in 0..draws.ncols() {
            let xi = DVector::from_column_slice(draws.column(s).as_slice());
            let st = sol.realize(&delta, &xi);
            let resid = &a * &st.phi - &st.theta + &b * &st.kappa + &st.delta;
            assert!(
                resid.amax() < 1e-8,
                "conservation residual {} at sample {s}",
                resid.amax()
            );
            // Reference pressure pinned in every realization.
            assert_relative_eq!(st.pi[0], sol.pi[0], epsilon = 1e-9);
        }
    }

    /// Monte-Carlo variance of the realized pressures matches the
    /// program's predicted standard deviations.
    #[test]
    fn predicted_deviations_match_monte_carlo() {
        let net = chain_net(0.4);
        let delta = DVector::from_vec(vec![0.0, 1.5, 0.0]);
        let point = point_at(&net, &[0.5, 0.0, 1.0], &delta);
        let unc = UncertaintyModel::build(&net, 0.10, RiskModel::Gaussian).unwrap();
        let sol = solve_policy(&net, &delta, &point, &unc, &PolicyOptions::default()).unwrap();

        let n_samples = 20_000;
        let draws = unc.sample(99, 1, n_samples);
        let mut acc = DVector::<f64>::zeros(3);
        for s in 0..n_samples {
            let xi = DVector::from_column_slice(draws.column(s).as_slice());
            let st = sol.realize(&delta, &xi);
            for i in 0..3 {
                acc[i] += (st.pi[i] - sol.pi[i]).powi(2);
            }
        }
        for i in 0..3 {
            let mc = (acc[i] / n_samples as f64).sqrt();
            assert!(
                (mc - sol.s_pressure[i]).abs() <= 0.03 * sol.s_pressure[i].max(0.05),
                "node {i}: MC {mc} vs predicted {}",
                sol.s_pressure[i]
            );
        }
    }

    /// Raising the safety factor (smaller violation budget) can only
    /// increase the optimal expected cost.
    #[test]
    fn cost_is_monotone_in_safety_factor() {
        let net = chain_net(0.4);
        let delta = DVector::from_vec(vec![0.0, 1.5, 0.0]);
        let point = point_at(&net, &[0.5, 0.0, 1.0], &delta);
        let mut last = f64::NEG_INFINITY;
        for eps in [0.5, 0.2, 0.1, 0.02] {
            let unc = UncertaintyModel::build(&net, eps, RiskModel::Gaussian).unwrap();
            let sol =
                solve_policy(&net, &delta, &point, &unc, &PolicyOptions::default()).unwrap();
            assert!(
                sol.objective >= last - 1e-7,
                "objective fell from {last} to {} at eps {eps}",
                sol.objective
            );
            last = sol.objective;
        }
    }

    /// Pricing pressure deviations shifts the optimum toward
    /// lower-deviation policies: total predicted deviation is
    /// non-increasing and the objective non-decreasing in the price.
    #[test]
    fn deviation_price_reduces_deviation() {
        // Diamond: three suppliers at different distances from the demand,
        // with quadratic recourse cost so the deviation-vs-cost trade-off
        // has a unique optimum at every price.
        let mut n1 = node(1);
        n1.cost_linear = 3.0;
        n1.cost_quadratic = 0.5;
        let mut n2 = node(2);
        n2.injection_max = 0.0;
        n2.extraction_stddev = 0.5;
        let mut n3 = node(3);
        n3.cost_linear = 3.5;
        n3.cost_quadratic = 0.5;
        let mut n4 = node(4);
        n4.cost_linear = 4.0;
        n4.cost_quadratic = 0.5;
        let net = GasNetwork {
            name: None,
            reference_node: 1,
            nodes: vec![n1, n2, n3, n4],
            edges: vec![
                passive(1, 2, 1.0),
                passive(2, 3, 1.0),
                passive(2, 4, 4.0),
                passive(3, 4, 2.0),
            ],
            correlation: None,
        };
        net.validate().unwrap();
        let delta = DVector::from_vec(vec![0.0, 2.0, 0.0, 0.0]);
        let point = point_at(&net, &[1.0, 0.0, 0.6, 0.4], &delta);
        let unc = UncertaintyModel::build(&net, 0.10, RiskModel::Gaussian).unwrap();

        let mut first_dev = None;
        let mut last_dev = f64::INFINITY;
        let mut last_obj = f64::NEG_INFINITY;
        for psi in [0.0, 0.5, 5.0, 50.0] {
            let opts = PolicyOptions {
                psi_pressure: psi,
                ..PolicyOptions::default()
            };
            let sol = solve_policy(&net, &delta, &point, &unc, &opts).unwrap();
            let dev = sol.s_pressure.sum();
            assert!(
                dev <= last_dev + 1e-6,
                "deviation rose from {last_dev} to {dev} at psi {psi}"
            );
            let cost_part = sol.expected_cost;
            assert!(
                cost_part >= last_obj - 1e-6,
                "expected cost fell from {last_obj} to {cost_part} at psi {psi}"
            );
            first_dev.get_or_insert(dev);
            last_dev = dev;
            last_obj = cost_part;
        }
        // A steep enough price must actually buy a quieter network, not
        // just leave the unpriced optimum in place.
        assert!(
            first_dev.unwrap() - last_dev > 0.01,
            "pricing deviations never reduced them: {first_dev:?} -> {last_dev}"
        );
    }

    /// Demand beyond total capacity is reported as infeasible, not as a
    /// garbage answer.
    #[test]
    fn impossible_demand_is_infeasible() {
        let net = chain_net(0.4);
        let delta_ok = DVector::from_vec(vec![0.0, 1.5, 0.0]);
        let point = point_at(&net, &[0.5, 0.0, 1.0], &delta_ok);
        let unc = UncertaintyModel::build(&net, 0.10, RiskModel::Gaussian).unwrap();
        let delta_bad = DVector::from_vec(vec![0.0, 50.0, 0.0]);
        match solve_policy(&net, &delta_bad, &point, &unc, &PolicyOptions::default()) {
            Err(Error::Infeasible { .. }) => {}
            other => panic!("expected infeasibility, got {other:?}"),
        }
    }

    /// Block bookkeeping: the assembled program has the expected cone
    /// counts for a 3-node, 2-edge passive network.
    #[test]
    fn program_structure_matches_formulas() {
        let net = chain_net(0.4);
        let delta = DVector::from_vec(vec![0.0, 1.5, 0.0]);
        let point = point_at(&net, &[0.5, 0.0, 1.0], &delta);
        let unc = UncertaintyModel::build(&net, 0.10, RiskModel::Gaussian).unwrap();
        let desc = describe_policy_program(
            &net,
            &delta,
            &point,
            &unc,
            &PolicyOptions::default(),
        )
        .unwrap();
        let blocks = desc["blocks"].as_array().unwrap();
        let socs = blocks
            .iter()
            .filter(|b| b["kind"] == "second-order")
            .count();
        // Chance cones: 2N pressures, 2(N-1) injections (the demand node's
        // zero-width box is pinned by equalities instead), no actuators;
        // deviation-tracking cones only appear when priced.
        assert_eq!(socs, 2 * 3 + 2 * 2);
        assert_eq!(desc["variables"].as_u64().unwrap() as usize, {
            let (n, e, s) = (3usize, 2usize, 1usize);
            // theta, kappa, phi, pi, then alpha, beta and four spread
            // matrices with one column per disturbed node
            n + e + e + n + n * s + e * s + n * s + e * s + n * s + e * s
        });
    }

    /// A supplier co-located with the disturbance can cancel it entirely:
    /// with free capacity both ways, the optimum is zero deviation at zero
    /// extra cost.
    #[test]
    fn colocated_recourse_cancels_all_variance() {
        let mut n1 = node(1);
        n1.cost_linear = 2.0;
        let mut n2 = node(2);
        n2.injection_min = -5.0; // may absorb as well as supply
        n2.cost_linear = 2.0;
        n2.extraction_stddev = 0.5;
        let net = GasNetwork {
            name: None,
            reference_node: 1,
            nodes: vec![n1, n2],
            edges: vec![passive(1, 2, 1.0)],
            correlation: None,
        };
        net.validate().unwrap();
        let delta = DVector::from_vec(vec![0.0, 1.0]);
        let point = point_at(&net, &[0.6, 0.4], &delta);
        let unc = UncertaintyModel::build(&net, 0.10, RiskModel::Gaussian).unwrap();
        let sol = solve_policy(&net, &delta, &point, &unc, &PolicyOptions::default()).unwrap();
        // Self-balancing: alpha[2,2] = 1 neutralizes the disturbance.
        assert_relative_eq!(sol.alpha[(1, 1)], 1.0, epsilon = 1e-5);
        assert!(sol.s_pressure.amax() < 1e-5);
        assert!(sol.s_flow.amax() < 1e-5);
        assert_relative_eq!(sol.expected_cost, 2.0, epsilon = 1e-5);
    }
}
