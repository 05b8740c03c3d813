//! Nonlinear steady-state gas flow: simulation, optimal dispatch, and
//! projection of a target state onto the physically feasible set.
//!
//! The network state is `(theta, kappa, phi, pi)`: nodal injections, edge
//! regulation, edge flows, and squared nodal pressures. A state is
//! physically consistent when
//!
//! ```text
//! A phi = theta - B kappa - delta        (nodal conservation)
//! phi * |phi| = w (A' pi + kappa)        (per-edge flow relation)
//! ```
//!
//! [`simulate_flow`] solves these equations for `(phi, pi)` given the
//! controls, by a damped Newton method with the reference node's squared
//! pressure pinned. [`solve_deterministic`] finds a minimum-cost dispatch
//! subject to the physics and the network's box limits, via sequential
//! linearization with a trust region and multiple starting points (the
//! feasible set is nonconvex, so only a high-quality local optimum is
//! claimed). [`project_state`] reuses the same machinery with a
//! least-distance objective to find the feasible state nearest to a target
//! — the repair a system operator would apply to an unimplementable
//! schedule.

use crate::conic::{ConicProgram, LinExpr, SolveOptions, VarRange};
use crate::error::{Error, Result};
use crate::network::GasNetwork;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// A physically consistent operating state.
#[derive(Debug, Clone, PartialEq)]
pub struct StationaryPoint {
    pub theta: DVector<f64>,
    pub kappa: DVector<f64>,
    pub phi: DVector<f64>,
    pub pi: DVector<f64>,
}

#[derive(Serialize, Deserialize)]
struct StationaryPointFile {
    theta: Vec<f64>,
    kappa: Vec<f64>,
    phi: Vec<f64>,
    pi: Vec<f64>,
}

impl StationaryPoint {
    pub fn to_json(&self) -> String {
        let file = StationaryPointFile {
            theta: self.theta.iter().copied().collect(),
            kappa: self.kappa.iter().copied().collect(),
            phi: self.phi.iter().copied().collect(),
            pi: self.pi.iter().copied().collect(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("vectors always serialize");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: StationaryPointFile =
            serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        Ok(Self {
            theta: DVector::from_vec(file.theta),
            kappa: DVector::from_vec(file.kappa),
            phi: DVector::from_vec(file.phi),
            pi: DVector::from_vec(file.pi),
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Max-norm residuals of (conservation, flow relation) at this state.
    pub fn residuals(&self, net: &GasNetwork, delta: &DVector<f64>) -> (f64, f64) {
        let a = net.incidence();
        let b = net.control_incidence();
        let w = net.weymouth_coeff();
        let cons = &a * &self.phi - &self.theta + &b * &self.kappa + delta;
        let drop = a.transpose() * &self.pi + &self.kappa;
        let mut flow = 0.0f64;
        for l in 0..net.n_edges() {
            let r = self.phi[l] * self.phi[l].abs() - w[l] * drop[l];
            flow = flow.max(r.abs());
        }
        (cons.amax(), flow)
    }
}

/// Options for the Newton flow solver.
#[derive(Debug, Clone, Copy)]
pub struct SimulationOptions {
    /// Convergence tolerance, relative to the problem's magnitudes.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SimulationOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 60,
        }
    }
}

/// Tolerance (relative to total throughput) for the global balance of a
/// simulation input; an imbalanced input has no steady state at all.
const BALANCE_TOL: f64 = 1e-6;

/// Solves the steady-state equations for `(phi, pi)` given injections,
/// regulation, extractions, and the reference node's squared pressure.
///
/// The inputs must balance: total injection must equal total extraction
/// plus actuator consumption, since conservation summed over nodes leaves
/// no slack. The Newton iteration is damped by a backtracking line search
/// and the flow Jacobian is floored away from zero so that zero-flow
/// iterates cannot make it singular.
pub fn simulate_flow(
    net: &GasNetwork,
    theta: &DVector<f64>,
    kappa: &DVector<f64>,
    delta: &DVector<f64>,
    pi_ref: f64,
    opts: &SimulationOptions,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let n = net.n_nodes();
    let e = net.n_edges();
    if theta.len() != n || kappa.len() != e || delta.len() != n {
        return Err(Error::Dimension(format!(
            "simulation inputs have sizes theta={}, kappa={}, delta={}, expected {n}, {e}, {n}",
            theta.len(),
            kappa.len(),
            delta.len()
        )));
    }
    let a = net.incidence();
    let b = net.control_incidence();
    let w = net.weymouth_coeff();
    let r = net.reference_index();

    // Net nodal supply the flows must carry.
    let rhs = theta - &b * kappa - delta;
    let scale = 1.0 + rhs.amax();
    if rhs.sum().abs() > BALANCE_TOL * scale {
        return Err(Error::Validation {
            message: format!(
                "injections, extractions and actuator consumption do not balance \
                 (net surplus {:.3e}); no steady state exists",
                rhs.sum()
            ),
        });
    }

    let nonref: Vec<usize> = (0..n).filter(|&i| i != r).collect();

    // Initial flows: least-squares solution of the conservation equations;
    // initial pressures: flat at the reference value.
    let mut phi = if e == 0 || nonref.is_empty() {
        DVector::zeros(e)
    } else {
        let mut a_nr = DMatrix::zeros(nonref.len(), e);
        let mut rhs_nr = DVector::zeros(nonref.len());
        for (ii, &i) in nonref.iter().enumerate() {
            rhs_nr[ii] = rhs[i];
            for l in 0..e {
                a_nr[(ii, l)] = a[(i, l)];
            }
        }
        a_nr.svd(true, true)
            .solve(&rhs_nr, 1e-12)
            .map_err(|m| Error::NonConvergent(format!("flow initialization failed: {m}")))?
    };
    let mut pi = DVector::from_element(n, pi_ref);

    let w_max = w.iter().cloned().fold(0.0f64, f64::max);
    let resid_scale = 1.0 + rhs.amax().max(w_max * (1.0 + pi_ref.abs()));
    let tol_abs = opts.tol * resid_scale;

    let residual = |phi: &DVector<f64>, pi: &DVector<f64>| -> DVector<f64> {
        let mut res = DVector::zeros(nonref.len() + e);
        let cons = &a * phi - &rhs;
        for (ii, &i) in nonref.iter().enumerate() {
            res[ii] = cons[i];
        }
        let drop = a.transpose() * pi + kappa;
        for l in 0..e {
            res[nonref.len() + l] = phi[l] * phi[l].abs() - w[l] * drop[l];
        }
        res
    };

    let mut res = residual(&phi, &pi);
    for iter in 0..opts.max_iter {
        if res.amax() <= tol_abs {
            return Ok((phi, pi));
        }

        // Assemble the Jacobian over unknowns [phi; pi at non-reference].
        let m = nonref.len() + e;
        let mut jac = DMatrix::zeros(m, m);
        for (ii, &i) in nonref.iter().enumerate() {
            for l in 0..e {
                jac[(ii, l)] = a[(i, l)];
            }
        }
        let mean_abs = if e == 0 {
            0.0
        } else {
            phi.iter().map(|v| v.abs()).sum::<f64>() / e as f64
        };
        let floor = 1e-6 * (1.0 + mean_abs);
        for l in 0..e {
            jac[(nonref.len() + l, l)] = (2.0 * phi[l].abs()).max(floor);
            for (jj, &j) in nonref.iter().enumerate() {
                let aij = a[(j, l)];
                if aij != 0.0 {
                    jac[(nonref.len() + l, e + jj)] = -w[l] * aij;
                }
            }
        }

        let lu = jac.lu();
        let step = lu.solve(&(-&res)).ok_or_else(|| {
            let small: Vec<usize> = (0..e).filter(|&l| phi[l].abs() <= floor).collect();
            Error::SingularJacobian { edges: small }
        })?;

        // Backtracking line search on the residual norm.
        let base_norm = res.norm();
        let mut t = 1.0f64;
        let mut accepted = false;
        for _ in 0..40 {
            let mut phi_t = phi.clone();
            let mut pi_t = pi.clone();
            for l in 0..e {
                phi_t[l] += t * step[l];
            }
            for (jj, &j) in nonref.iter().enumerate() {
                pi_t[j] += t * step[e + jj];
            }
            let res_t = residual(&phi_t, &pi_t);
            if res_t.norm() <= (1.0 - 1e-4 * t) * base_norm {
                phi = phi_t;
                pi = pi_t;
                res = res_t;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return Err(Error::SimulationDiverged {
                residual: res.amax(),
                iterations: iter,
            });
        }
    }
    if res.amax() <= tol_abs {
        Ok((phi, pi))
    } else {
        Err(Error::SimulationDiverged {
            residual: res.amax(),
            iterations: opts.max_iter,
        })
    }
}

/// Simulates and assembles a full state, recomputing injections from the
/// solved flows so the returned point is exactly conservative (any residual
/// imbalance in the requested injections lands on the reference node).
pub fn simulate_point(
    net: &GasNetwork,
    theta: &DVector<f64>,
    kappa: &DVector<f64>,
    delta: &DVector<f64>,
    pi_ref: f64,
    opts: &SimulationOptions,
) -> Result<StationaryPoint> {
    let (phi, pi) = simulate_flow(net, theta, kappa, delta, pi_ref, opts)?;
    let theta_implied = net.incidence() * &phi + net.control_incidence() * kappa + delta;
    Ok(StationaryPoint {
        theta: theta_implied,
        kappa: kappa.clone(),
        phi,
        pi,
    })
}

/// Objective of the sequential linearization loop.
enum SlpObjective<'a> {
    /// Minimize dispatch cost `c1' theta + theta' diag(c2) theta`.
    Cost,
    /// Minimize `||theta - theta_to|| + ||kappa - kappa_to||` (the latter
    /// over actuated edges).
    Distance {
        theta_to: &'a DVector<f64>,
        kappa_to: &'a DVector<f64>,
    },
}

/// Options for the sequential linearization solvers.
#[derive(Debug, Clone, Copy)]
pub struct DispatchOptions {
    pub max_outer: usize,
    /// Relative objective-change tolerance for declaring convergence.
    pub tol_objective: f64,
    /// Absolute tolerance on the summed box violations of the simulated
    /// state.
    pub feas_tol: f64,
    /// Number of starting points for the dispatch search.
    pub n_starts: usize,
}

impl Default for DispatchOptions {
    fn default() -> Self {
        Self {
            max_outer: 80,
            tol_objective: 1e-8,
            feas_tol: 1e-6,
            n_starts: 5,
        }
    }
}

/// Result of the deterministic dispatch search.
#[derive(Debug, Clone)]
pub struct Dispatch {
    pub point: StationaryPoint,
    pub cost: f64,
    /// Number of starting points whose local search converged.
    pub starts_converged: usize,
}

/// Result of projecting a target state onto the feasible set.
#[derive(Debug, Clone)]
pub struct Projection {
    pub point: StationaryPoint,
    /// Distance `||theta - theta_target||`.
    pub injection_shift: f64,
    /// Distance `||kappa - kappa_target||` over actuated edges.
    pub regulation_shift: f64,
}

struct SubVars {
    theta: VarRange,
    kappa: VarRange,
    phi: VarRange,
    pi: VarRange,
}

/// Builds the linearized subproblem around the iterate
/// `(theta, kappa, phi, pi)` with a componentwise trust region of relative
/// radius `trust`.
///
/// Box limits are elastic: each carries a penalized slack so the
/// subproblem is feasible from any iterate (the iterate itself plus
/// slacks is always a solution). With the same penalty used in the merit
/// function, minimizing the subproblem minimizes the merit's linear model.
fn build_subproblem(
    net: &GasNetwork,
    delta: &DVector<f64>,
    at: &StationaryPoint,
    trust: f64,
    objective: &SlpObjective,
    penalty: f64,
) -> (ConicProgram, SubVars) {
    let n = net.n_nodes();
    let e = net.n_edges();
    let a = net.incidence();
    let b = net.control_incidence();
    let w = net.weymouth_coeff();

    let mut p = ConicProgram::new();
    let theta = p.add_vars(n);
    let kappa = p.add_vars(e);
    let phi = p.add_vars(e);
    let pi = p.add_vars(n);

    // Nodal conservation: A phi - theta + B kappa + delta = 0.
    let mut cons_rows = Vec::with_capacity(n);
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
        cons_rows.push(row);
    }
    p.add_equalities("conservation", cons_rows);

    // Flow relation linearized at the iterate, in undivided form so a
    // zero-flow iterate stays well posed:
    // 2|phi_k| phi - phi_k |phi_k| - w (A' pi + kappa) = 0.
    let mut flow_rows = Vec::with_capacity(e);
    for l in 0..e {
        let fk = at.phi[l];
        let mut row = LinExpr::constant(-fk * fk.abs());
        row.add(phi.at(l), 2.0 * fk.abs());
        row.add(kappa.at(l), -w[l]);
        for i in 0..n {
            if a[(i, l)] != 0.0 {
                row.add(pi.at(i), -w[l] * a[(i, l)]);
            }
        }
        flow_rows.push(row);
    }
    p.add_equalities("linearized flow relation", flow_rows);

    // Passive edges have no regulation.
    let passive_rows: Vec<LinExpr> = (0..e)
        .filter(|&l| !net.edges[l].kind.is_active())
        .map(|l| LinExpr::var(kappa.at(l), 1.0))
        .collect();
    if !passive_rows.is_empty() {
        p.add_equalities("passive edges unregulated", passive_rows);
    }

    // Elastic box limits: every `expr >= 0` becomes `expr + slack >= 0`
    // with `slack >= 0` penalized in the objective.
    let th_lo = net.injection_min();
    let th_hi = net.injection_max();
    let pi_lo = net.pressure_min();
    let pi_hi = net.pressure_max();
    let (ka_lo, ka_hi) = net.regulation_bounds();
    let mut boxes = Vec::new();
    for i in 0..n {
        let mut lo = LinExpr::var(theta.at(i), 1.0);
        lo.add_const(-th_lo[i]);
        boxes.push(lo);
        let mut hi = LinExpr::var(theta.at(i), -1.0);
        hi.add_const(th_hi[i]);
        boxes.push(hi);
        let mut plo = LinExpr::var(pi.at(i), 1.0);
        plo.add_const(-pi_lo[i]);
        boxes.push(plo);
        let mut phi_hi = LinExpr::var(pi.at(i), -1.0);
        phi_hi.add_const(pi_hi[i]);
        boxes.push(phi_hi);
    }
    for l in net.active_indices() {
        let mut lo = LinExpr::var(kappa.at(l), 1.0);
        lo.add_const(-ka_lo[l]);
        boxes.push(lo);
        let mut hi = LinExpr::var(kappa.at(l), -1.0);
        hi.add_const(ka_hi[l]);
        boxes.push(hi);
        // Gas moves in the design direction through actuated edges.
        boxes.push(LinExpr::var(phi.at(l), 1.0));
    }
    let slacks = p.add_vars(boxes.len());
    let mut slack_rows = Vec::with_capacity(boxes.len());
    for (k, row) in boxes.iter_mut().enumerate() {
        row.add(slacks.at(k), 1.0);
        p.add_objective(slacks.at(k), penalty);
        slack_rows.push(LinExpr::var(slacks.at(k), 1.0));
    }
    p.add_inequalities("box limits (elastic)", boxes);
    p.add_inequalities("box slacks nonnegative", slack_rows);

    // Trust region around the iterate, scaled by box widths.
    let mut trust_rows = Vec::new();
    let add_trust = |rows: &mut Vec<LinExpr>, col: usize, center: f64, width: f64| {
        let radius = trust * width.max(1.0);
        let mut up = LinExpr::var(col, -1.0);
        up.add_const(center + radius);
        rows.push(up);
        let mut dn = LinExpr::var(col, 1.0);
        dn.add_const(radius - center);
        rows.push(dn);
    };
    for i in 0..n {
        add_trust(&mut trust_rows, theta.at(i), at.theta[i], th_hi[i] - th_lo[i]);
        add_trust(&mut trust_rows, pi.at(i), at.pi[i], pi_hi[i] - pi_lo[i]);
    }
    for l in net.active_indices() {
        add_trust(&mut trust_rows, kappa.at(l), at.kappa[l], ka_hi[l] - ka_lo[l]);
    }
    p.add_inequalities("trust region", trust_rows);

    // Objective.
    match objective {
        SlpObjective::Cost => {
            let c1 = net.cost_linear();
            let c2 = net.cost_quadratic();
            for i in 0..n {
                if c1[i] != 0.0 {
                    p.add_objective(theta.at(i), c1[i]);
                }
            }
            for i in 0..n {
                if c2[i] > 0.0 {
                    let t = p.add_vars(1);
                    p.add_objective(t.at(0), c2[i]);
                    p.add_rotated(
                        format!("quadratic cost epigraph node {i}"),
                        LinExpr::var(t.at(0), 1.0),
                        LinExpr::constant(1.0),
                        vec![LinExpr::var(theta.at(i), 1.0)],
                    );
                }
            }
        }
        SlpObjective::Distance {
            theta_to,
            kappa_to,
        } => {
            let t_inj = p.add_vars(1);
            p.add_objective(t_inj.at(0), 1.0);
            let dev: Vec<LinExpr> = (0..n)
                .map(|i| {
                    let mut d = LinExpr::var(theta.at(i), 1.0);
                    d.add_const(-theta_to[i]);
                    d
                })
                .collect();
            p.add_soc(
                "injection shift",
                LinExpr::var(t_inj.at(0), 1.0),
                dev,
            );
            let active = net.active_indices();
            if !active.is_empty() {
                let t_reg = p.add_vars(1);
                p.add_objective(t_reg.at(0), 1.0);
                let dev: Vec<LinExpr> = active
                    .iter()
                    .map(|&l| {
                        let mut d = LinExpr::var(kappa.at(l), 1.0);
                        d.add_const(-kappa_to[l]);
                        d
                    })
                    .collect();
                p.add_soc(
                    "regulation shift",
                    LinExpr::var(t_reg.at(0), 1.0),
                    dev,
                );
            }
        }
    }

    (
        p,
        SubVars {
            theta,
            kappa,
            phi,
            pi,
        },
    )
}

/// True objective value at a physical state.
fn objective_value(net: &GasNetwork, objective: &SlpObjective, point: &StationaryPoint) -> f64 {
    match objective {
        SlpObjective::Cost => {
            let c1 = net.cost_linear();
            let c2 = net.cost_quadratic();
            (0..net.n_nodes())
                .map(|i| c1[i] * point.theta[i] + c2[i] * point.theta[i] * point.theta[i])
                .sum()
        }
        SlpObjective::Distance {
            theta_to,
            kappa_to,
        } => {
            let inj = (&point.theta - *theta_to).norm();
            let reg: f64 = net
                .active_indices()
                .iter()
                .map(|&l| (point.kappa[l] - kappa_to[l]).powi(2))
                .sum::<f64>()
                .sqrt();
            inj + reg
        }
    }
}

/// Summed violation of the box limits at a state (physics holds by
/// construction for simulated states).
fn box_violation(net: &GasNetwork, point: &StationaryPoint) -> f64 {
    let th_lo = net.injection_min();
    let th_hi = net.injection_max();
    let pi_lo = net.pressure_min();
    let pi_hi = net.pressure_max();
    let (ka_lo, ka_hi) = net.regulation_bounds();
    let mut v = 0.0;
    for i in 0..net.n_nodes() {
        v += (th_lo[i] - point.theta[i]).max(0.0);
        v += (point.theta[i] - th_hi[i]).max(0.0);
        v += (pi_lo[i] - point.pi[i]).max(0.0);
        v += (point.pi[i] - pi_hi[i]).max(0.0);
    }
    for l in net.active_indices() {
        v += (ka_lo[l] - point.kappa[l]).max(0.0);
        v += (point.kappa[l] - ka_hi[l]).max(0.0);
        v += (-point.phi[l]).max(0.0);
    }
    v
}

struct SlpResult {
    point: StationaryPoint,
    objective: f64,
    violation: f64,
    converged: bool,
}

/// Sequential linearization from one starting point: linearize, solve the
/// conic subproblem inside a trust region, re-simulate the candidate with
/// the Newton solver, and accept or shrink based on a merit function.
fn slp(
    net: &GasNetwork,
    delta: &DVector<f64>,
    objective: &SlpObjective,
    theta0: &DVector<f64>,
    kappa0: &DVector<f64>,
    pi_ref0: f64,
    opts: &DispatchOptions,
) -> Result<SlpResult> {
    let sim_opts = SimulationOptions::default();
    let mut state = simulate_point(net, theta0, kappa0, delta, pi_ref0, &sim_opts)?;
    let mut obj = objective_value(net, objective, &state);
    let mut viol = box_violation(net, &state);
    let penalty = 1e5 * obj.abs().max(1.0);
    let mut merit = obj + penalty * viol;
    let mut trust = 0.2f64;
    let mut converged = false;
    let r = net.reference_index();
    let solve_opts = SolveOptions::default();

    for _ in 0..opts.max_outer {
        let (program, vars) = build_subproblem(net, delta, &state, trust, objective, penalty);
        let solved = match program.solve_robust(&solve_opts).into_optimal() {
            Ok(s) => s,
            Err(_) => {
                trust *= 0.5;
                if trust < 1e-7 {
                    break;
                }
                continue;
            }
        };
        let theta_c = DVector::from_fn(net.n_nodes(), |i, _| solved.x[vars.theta.at(i)]);
        let kappa_c = DVector::from_fn(net.n_edges(), |l, _| solved.x[vars.kappa.at(l)]);
        let pi_ref_c = solved.x[vars.pi.at(r)];
        let _ = &vars.phi; // flows are re-derived by simulation below

        let candidate = match simulate_point(net, &theta_c, &kappa_c, delta, pi_ref_c, &sim_opts) {
            Ok(s) => s,
            Err(_) => {
                trust *= 0.5;
                if trust < 1e-7 {
                    break;
                }
                continue;
            }
        };
        let obj_c = objective_value(net, objective, &candidate);
        let viol_c = box_violation(net, &candidate);
        let merit_c = obj_c + penalty * viol_c;

        if merit_c <= merit - 1e-12 * (1.0 + merit.abs()) {
            let improvement = merit - merit_c;
            state = candidate;
            obj = obj_c;
            viol = viol_c;
            merit = merit_c;
            trust = (trust * 1.5).min(1.0);
            if improvement <= opts.tol_objective * (1.0 + obj.abs()) && viol <= opts.feas_tol {
                converged = true;
                break;
            }
        } else {
            if viol <= opts.feas_tol
                && (merit_c - merit).abs() <= opts.tol_objective * (1.0 + merit.abs())
            {
                // The subproblem can no longer improve the merit: done.
                converged = true;
                break;
            }
            trust *= 0.5;
            if trust < 1e-7 {
                break;
            }
        }
    }

    Ok(SlpResult {
        point: state,
        objective: obj,
        violation: viol,
        converged: converged && viol <= opts.feas_tol,
    })
}

/// Starting points for the dispatch search: a proportional split of the
/// demand across suppliers, then variants that concentrate supply on the
/// largest sources.
fn dispatch_starts(
    net: &GasNetwork,
    delta: &DVector<f64>,
    n_starts: usize,
) -> Vec<(DVector<f64>, DVector<f64>, f64)> {
    let n = net.n_nodes();
    let e = net.n_edges();
    let th_lo = net.injection_min();
    let th_hi = net.injection_max();
    let (ka_lo, ka_hi) = net.regulation_bounds();
    let b = net.control_incidence();
    let r = net.reference_index();
    let pi_lo = net.pressure_min();
    let pi_hi = net.pressure_max();
    let pi_ref = 0.5 * (pi_lo[r] + pi_hi[r]);

    let kappa0 = DVector::from_fn(e, |l, _| 0.0f64.clamp(ka_lo[l], ka_hi[l]));
    let demand = delta.sum() + (&b * &kappa0).sum();

    let lo_sum: f64 = th_lo.iter().sum();
    let hi_sum: f64 = th_hi.iter().sum();
    let rebalance = |mut theta: DVector<f64>| -> DVector<f64> {
        let shift = (demand - theta.sum()) / n as f64;
        for i in 0..n {
            theta[i] += shift;
        }
        theta
    };

    let mut starts = Vec::new();
    let share = if hi_sum > lo_sum {
        ((demand - lo_sum) / (hi_sum - lo_sum)).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let proportional =
        DVector::from_fn(n, |i, _| th_lo[i] + share * (th_hi[i] - th_lo[i]));
    starts.push((rebalance(proportional), kappa0.clone(), pi_ref));

    // Concentrated starts: rank nodes by supply capacity.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        (th_hi[j] - th_lo[j])
            .partial_cmp(&(th_hi[i] - th_lo[i]))
            .unwrap()
    });
    for &j in order.iter().take(n_starts.saturating_sub(1)) {
        if th_hi[j] - th_lo[j] <= 0.0 {
            break;
        }
        let mut theta = DVector::from_fn(n, |i, _| th_lo[i]);
        theta[j] = th_hi[j].min(th_lo[j] + (demand - lo_sum).max(0.0));
        let mut remaining = demand - theta.sum();
        if remaining > 0.0 {
            for &i in &order {
                if i == j {
                    continue;
                }
                let room = th_hi[i] - theta[i];
                let take = room.min(remaining);
                theta[i] += take;
                remaining -= take;
                if remaining <= 0.0 {
                    break;
                }
            }
        }
        starts.push((rebalance(theta), kappa0.clone(), pi_ref));
        if starts.len() >= n_starts {
            break;
        }
    }
    starts
}

/// Minimum-cost dispatch subject to the nonlinear physics and box limits.
///
/// Runs the sequential linearization from several starting points and
/// returns the best feasible local optimum found.
pub fn solve_deterministic(
    net: &GasNetwork,
    delta: &DVector<f64>,
    opts: &DispatchOptions,
) -> Result<Dispatch> {
    let mut best: Option<SlpResult> = None;
    let mut converged = 0usize;
    let mut last_err: Option<Error> = None;

    for (theta0, kappa0, pi_ref0) in dispatch_starts(net, delta, opts.n_starts) {
        match slp(
            net,
            delta,
            &SlpObjective::Cost,
            &theta0,
            &kappa0,
            pi_ref0,
            opts,
        ) {
            Ok(res) if res.converged => {
                converged += 1;
                let better = match &best {
                    None => true,
                    Some(b) => res.objective < b.objective,
                };
                if better {
                    best = Some(res);
                }
            }
            Ok(_) => {}
            Err(e) => last_err = Some(e),
        }
    }

    match best {
        Some(res) => Ok(Dispatch {
            cost: res.objective,
            point: res.point,
            starts_converged: converged,
        }),
        None => Err(last_err.unwrap_or_else(|| {
            Error::NonConvergent(
                "no dispatch starting point converged to a feasible operating state".into(),
            )
        })),
    }
}

/// Projects a target `(theta, kappa)` onto the set of physically
/// consistent, box-feasible states, starting the search at the target
/// itself (warm start) and measuring how far injections and regulation had
/// to move.
pub fn project_state(
    net: &GasNetwork,
    delta: &DVector<f64>,
    theta_target: &DVector<f64>,
    kappa_target: &DVector<f64>,
    pi_ref_start: f64,
    opts: &DispatchOptions,
) -> Result<Projection> {
    project_state_from(
        net,
        delta,
        theta_target,
        kappa_target,
        theta_target,
        kappa_target,
        pi_ref_start,
        opts,
    )
}

/// [`project_state`] with the local search started from an explicit state
/// instead of the target itself — for retrying a projection whose warm
/// start stalled (e.g. from a known-consistent operating point).
#[allow(clippy::too_many_arguments)]
pub fn project_state_from(
    net: &GasNetwork,
    delta: &DVector<f64>,
    theta_target: &DVector<f64>,
    kappa_target: &DVector<f64>,
    theta_start: &DVector<f64>,
    kappa_start: &DVector<f64>,
    pi_ref_start: f64,
    opts: &DispatchOptions,
) -> Result<Projection> {
    let e = net.n_edges();
    let (ka_lo, ka_hi) = net.regulation_bounds();
    // Clamp the start into the regulation box and repair global balance so
    // the initial simulation is well posed; the subproblems enforce the
    // boxes from then on.
    let kappa0 = DVector::from_fn(e, |l, _| kappa_start[l].clamp(ka_lo[l], ka_hi[l]));
    let b = net.control_incidence();
    let demand = delta.sum() + (&b * &kappa0).sum();
    let n = net.n_nodes();
    let mut theta0 = theta_start.clone();
    let shift = (demand - theta0.sum()) / n as f64;
    for i in 0..n {
        theta0[i] += shift;
    }

    let objective = SlpObjective::Distance {
        theta_to: theta_target,
        kappa_to: kappa_target,
    };
    let res = slp(net, delta, &objective, &theta0, &kappa0, pi_ref_start, opts)?;
    if !res.converged {
        return Err(Error::NonConvergent(format!(
            "projection stalled with box violation {:.3e}",
            res.violation
        )));
    }
    let injection_shift = (&res.point.theta - theta_target).norm();
    let regulation_shift = net
        .active_indices()
        .iter()
        .map(|&l| (res.point.kappa[l] - kappa_target[l]).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(Projection {
        point: res.point,
        injection_shift,
        regulation_shift,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Edge, EdgeKind, GasNetwork, Node};
    use approx::assert_relative_eq;

    fn node(id: u32) -> Node {
        Node {
            id,
            pressure_min: 0.0,
            pressure_max: 1000.0,
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

    /// Triangle network with one degree of freedom in the flow division.
    /// The loop equation is solved independently by bisection and the
    /// Newton solution must agree with it.
    #[test]
    fn cycle_flow_matches_independent_solution() {
        let net = GasNetwork {
            name: None,
            reference_node: 1,
            nodes: vec![node(1), node(2), node(3)],
            edges: vec![passive(1, 2, 1.0), passive(2, 3, 2.0), passive(1, 3, 4.0)],
            correlation: None,
        };
        net.validate().unwrap();
        let theta = DVector::from_vec(vec![2.0, 0.0, 0.0]);
        let delta = DVector::from_vec(vec![0.0, 1.0, 1.0]);
        let kappa = DVector::zeros(3);

        // With phi = (t, t-1, 2-t), the loop condition is
        // t|t|/1 + (t-1)|t-1|/2 - (2-t)|2-t|/4 = 0.
        let g = |t: f64| {
            t * t.abs() + (t - 1.0) * (t - 1.0).abs() / 2.0
                - (2.0 - t) * (2.0 - t).abs() / 4.0
        };
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        assert!(g(lo) < 0.0 && g(hi) > 0.0);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if g(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let t = 0.5 * (lo + hi);

        let (phi, pi) = simulate_flow(
            &net,
            &theta,
            &kappa,
            &delta,
            100.0,
            &SimulationOptions::default(),
        )
        .unwrap();
        assert_relative_eq!(phi[0], t, epsilon = 1e-8);
        assert_relative_eq!(phi[1], t - 1.0, epsilon = 1e-8);
        assert_relative_eq!(phi[2], 2.0 - t, epsilon = 1e-8);
        // Pressures satisfy each edge relation and pin the reference.
        assert_relative_eq!(pi[0], 100.0);
        assert_relative_eq!(pi[0] - pi[1], phi[0] * phi[0].abs(), epsilon = 1e-8);
        assert_relative_eq!(
            pi[1] - pi[2],
            phi[1] * phi[1].abs() / 2.0,
            epsilon = 1e-8
        );

        let point = StationaryPoint {
            theta: theta.clone(),
            kappa,
            phi,
            pi,
        };
        let (cons, flow) = point.residuals(&net, &delta);
        assert!(cons < 1e-9 && flow < 1e-9);
    }

    #[test]
    fn imbalanced_inputs_are_rejected() {
        let net = GasNetwork {
            name: None,
            reference_node: 1,
            nodes: vec![node(1), node(2)],
            edges: vec![passive(1, 2, 1.0)],
            correlation: None,
        };
        let theta = DVector::from_vec(vec![2.0, 0.0]);
        let delta = DVector::from_vec(vec![0.0, 1.0]);
        let kappa = DVector::zeros(1);
        match simulate_flow(
            &net,
            &theta,
            &kappa,
            &delta,
            25.0,
            &SimulationOptions::default(),
        ) {
            Err(Error::Validation { message }) => assert!(message.contains("balance")),
            other => panic!("expected balance rejection, got {other:?}"),
        }
    }

    fn two_node_net(pi_boxes: [(f64, f64); 2], costs: [f64; 2], quads: [f64; 2]) -> GasNetwork {
        let mut n1 = node(1);
        n1.pressure_min = pi_boxes[0].0;
        n1.pressure_max = pi_boxes[0].1;
        n1.injection_max = 3.0;
        n1.cost_linear = costs[0];
        n1.cost_quadratic = quads[0];
        let mut n2 = node(2);
        n2.pressure_min = pi_boxes[1].0;
        n2.pressure_max = pi_boxes[1].1;
        n2.injection_max = 3.0;
        n2.cost_linear = costs[1];
        n2.cost_quadratic = quads[1];
        GasNetwork {
            name: None,
            reference_node: 2,
            nodes: vec![n1, n2],
            edges: vec![passive(1, 2, 1.0)],
            correlation: None,
        }
    }

    /// Cheap supplier covers all demand when pressure limits are slack:
    /// theta = (2, 0) at cost 6.
    #[test]
    fn dispatch_prefers_cheap_supplier() {
        let net = two_node_net([(1.0, 900.0), (1.0, 900.0)], [3.0, 8.0], [0.0, 0.0]);
        net.validate().unwrap();
        let delta = DVector::from_vec(vec![0.0, 2.0]);
        let d = solve_deterministic(&net, &delta, &DispatchOptions::default()).unwrap();
        assert_relative_eq!(d.cost, 6.0, epsilon = 1e-5);
        assert_relative_eq!(d.point.theta[0], 2.0, epsilon = 1e-5);
        assert_relative_eq!(d.point.theta[1], 0.0, epsilon = 1e-5);
        let (cons, flow) = d.point.residuals(&net, &delta);
        assert!(cons < 1e-8 && flow < 1e-8);
    }

    /// Tight pressure boxes cap the pipe's carrying capacity at unit flow,
    /// forcing the expensive local supplier to cover the rest: cost 11.
    #[test]
    fn dispatch_respects_pressure_limits() {
        let net = two_node_net([(25.0, 26.0), (25.0, 26.0)], [3.0, 8.0], [0.0, 0.0]);
        net.validate().unwrap();
        let delta = DVector::from_vec(vec![0.0, 2.0]);
        let d = solve_deterministic(&net, &delta, &DispatchOptions::default()).unwrap();
        assert_relative_eq!(d.cost, 11.0, epsilon = 1e-4);
        assert_relative_eq!(d.point.theta[0], 1.0, epsilon = 1e-4);
        assert_relative_eq!(d.point.theta[1], 1.0, epsilon = 1e-4);
        // The binding mechanism is the squared-pressure drop of exactly 1.
        assert_relative_eq!(d.point.pi[0], 26.0, epsilon = 1e-4);
        assert_relative_eq!(d.point.pi[1], 25.0, epsilon = 1e-4);
    }

    /// Quadratic costs shift the optimum interior: minimizing
    /// 3a + 8b + a^2 + b^2 with a + b = 2 and b >= 0 gives (2, 0), cost 10.
    #[test]
    fn dispatch_handles_quadratic_costs() {
        let net = two_node_net([(1.0, 900.0), (1.0, 900.0)], [3.0, 8.0], [1.0, 1.0]);
        net.validate().unwrap();
        let delta = DVector::from_vec(vec![0.0, 2.0]);
        let d = solve_deterministic(&net, &delta, &DispatchOptions::default()).unwrap();
        assert_relative_eq!(d.cost, 10.0, epsilon = 1e-4);
        assert_relative_eq!(d.point.theta[0], 2.0, epsilon = 1e-4);
    }

    /// A compressor must lift pressure into a higher-pressure delivery
    /// zone; minimizing cost squeezes its boost to the smallest workable
    /// value and pays for its gas consumption.
    #[test]
    fn dispatch_uses_compressor_minimally() {
        let mut n1 = node(1);
        n1.pressure_min = 20.0;
        n1.pressure_max = 30.0;
        let mut n2 = node(2);
        n2.pressure_min = 15.0;
        n2.pressure_max = 22.0;
        n2.injection_max = 0.0;
        let mut n3 = node(3);
        n3.pressure_min = 26.0;
        n3.pressure_max = 30.0;
        n3.injection_max = 0.0;
        let comp = Edge {
            from: 2,
            to: 3,
            w: 1.0,
            kind: EdgeKind::Compressor,
            b: 0.1,
            kappa_min: 0.0,
            kappa_max: 10.0,
        };
        let net = GasNetwork {
            name: None,
            reference_node: 1,
            nodes: vec![n1, n2, n3],
            edges: vec![passive(1, 2, 1.0), comp],
            correlation: None,
        };
        net.validate().unwrap();
        let delta = DVector::from_vec(vec![0.0, 0.0, 1.0]);
        let d = solve_deterministic(&net, &delta, &DispatchOptions::default()).unwrap();
        // kappa* = 1 - (pi2 - pi3) at pi2 = 22, pi3 = 26 gives 5; supply
        // covers the unit demand plus b*kappa of compressor consumption.
        assert_relative_eq!(d.point.kappa[1], 5.0, epsilon = 1e-3);
        assert_relative_eq!(d.point.theta[0], 1.5, epsilon = 1e-3);
        assert_relative_eq!(d.cost, 1.5, epsilon = 1e-3);
        assert_relative_eq!(d.point.phi[1], 1.0, epsilon = 1e-4);
    }

    /// Projecting an already-feasible target must return it unchanged.
    #[test]
    fn projection_is_identity_on_feasible_targets() {
        let net = two_node_net([(1.0, 900.0), (1.0, 900.0)], [3.0, 8.0], [0.0, 0.0]);
        let delta = DVector::from_vec(vec![0.0, 2.0]);
        let d = solve_deterministic(&net, &delta, &DispatchOptions::default()).unwrap();
        let proj = project_state(
            &net,
            &delta,
            &d.point.theta,
            &d.point.kappa,
            d.point.pi[net.reference_index()],
            &DispatchOptions::default(),
        )
        .unwrap();
        assert!(proj.injection_shift < 1e-5, "shift {}", proj.injection_shift);
        assert!(proj.regulation_shift < 1e-6);
    }

    /// An infeasible target (demand beyond what the pressure-limited pipe
    /// can carry without local supply) is moved to the nearest feasible
    /// injections.
    #[test]
    fn projection_repairs_infeasible_targets() {
        let net = two_node_net([(25.0, 26.0), (25.0, 26.0)], [3.0, 8.0], [0.0, 0.0]);
        let delta = DVector::from_vec(vec![0.0, 2.0]);
        // Target: ship everything from node 1 (needs drop 4 > 1 available).
        let theta_t = DVector::from_vec(vec![2.0, 0.0]);
        let kappa_t = DVector::zeros(1);
        let proj =
            project_state(&net, &delta, &theta_t, &kappa_t, 25.5, &DispatchOptions::default())
                .unwrap();
        // Nearest feasible split is (1, 1): distance sqrt(2).
        assert_relative_eq!(proj.injection_shift, 2.0f64.sqrt(), epsilon = 1e-3);
        assert_relative_eq!(proj.point.theta[0], 1.0, epsilon = 1e-3);
        assert_relative_eq!(proj.point.theta[1], 1.0, epsilon = 1e-3);
        let (cons, flow) = proj.point.residuals(&net, &delta);
        assert!(cons < 1e-8 && flow < 1e-8);
    }

    #[test]
    fn stationary_point_roundtrips_json() {
        let p = StationaryPoint {
            theta: DVector::from_vec(vec![1.0, -0.5]),
            kappa: DVector::from_vec(vec![0.25]),
            phi: DVector::from_vec(vec![0.75]),
            pi: DVector::from_vec(vec![25.0, 24.0]),
        };
        let json = p.to_json();
        let q = StationaryPoint::from_json(&json).unwrap();
        assert_eq!(p, q);
    }
}
