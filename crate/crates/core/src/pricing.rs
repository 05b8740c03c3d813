//! Settlement of an optimized policy: who pays whom, and why the books
//! balance.
//!
//! The dual solution of the policy program prices every service the
//! network trades:
//!
//! * `lambda_c` (nodal conservation) prices nominal gas,
//! * `lambda_r` (recourse adequacy) prices standing ready to absorb one
//!   unit of disturbance at a node,
//! * the chance-cone duals price the margin each asset's response leaves
//!   under the pressure/flow limits, and
//! * the deviation-cone duals price the pressure/flow variance an asset
//!   createsor removes.
//!
//! [`revenues`] assembles these into per-supplier revenues, per-active-pipe
//! revenues, consumer charges, and the operator's congestion rent. At an
//! optimum the streams reconcile exactly:
//!
//! ```text
//! sum(consumer) - sum(supplier) - sum(active pipes)
//!     = rent + lambda_w' gamma1
//! ```
//!
//! (`gamma1` is the linearization offset; its payment is reported as a
//! separate line item rather than folded into any agent's stream.)
//! [`check_revenue_adequacy`] audits that identity, [`check_cost_recovery`]
//! audits per-agent profit, and [`check_stationarity`] recomputes the
//! first-order optimality residuals from the returned duals, so a bad dual
//! extraction cannot silently produce plausible-looking payments.

use crate::error::{Error, Result};
use crate::network::{EdgeKind, GasNetwork};
use crate::policy::PolicySolution;
use crate::uncertainty::UncertaintyModel;
use nalgebra::{DMatrix, DVector};

/// One agent's revenue, split by the service being paid for.
#[derive(Debug, Clone, Copy, Default)]
pub struct RevenueStreams {
    /// Payment for nominal balance (or nominal pressure regulation, for an
    /// active pipe).
    pub nominal: f64,
    /// Payment for absorbing disturbances (recourse adequacy).
    pub recourse: f64,
    /// Payment for keeping pressures and flows inside their limits under
    /// uncertainty.
    pub limits: f64,
    /// Payment for controlling pressure and flow variance.
    pub variance: f64,
}

impl RevenueStreams {
    pub fn total(&self) -> f64 {
        self.nominal + self.recourse + self.limits + self.variance
    }
}

/// The operator's congestion rent, by source.
#[derive(Debug, Clone, Copy, Default)]
pub struct RentBreakdown {
    pub flow: f64,
    pub pressure: f64,
    pub variance: f64,
}

impl RentBreakdown {
    pub fn total(&self) -> f64 {
        self.flow + self.pressure + self.variance
    }
}

/// Complete settlement of one optimized policy.
#[derive(Debug, Clone)]
pub struct RevenueReport {
    /// Revenue of the supplier at each node (zero streams where nothing is
    /// supplied).
    pub supplier: Vec<RevenueStreams>,
    /// Revenue per active edge, keyed by edge index.
    pub active_pipe: Vec<(usize, RevenueStreams)>,
    /// Charge to the consumer at each node.
    pub consumer: Vec<RevenueStreams>,
    pub rent: RentBreakdown,
    /// Payment attached to the linearization offset (`lambda_w' gamma1`).
    /// Reported separately: it belongs to no agent.
    pub offset_payment: f64,
    /// Largest absolute entry of the linearization offset; the adequacy
    /// guarantee is unconditional only when this is zero.
    pub offset_max_abs: f64,
    /// `sum(consumer) - sum(supplier) - sum(active pipes)`.
    pub adequacy_gap: f64,
    /// Supplier revenue minus supplier cost, per node.
    pub supplier_profit: Vec<f64>,
    /// Active-pipe profit (equals its revenue; pipes carry no cost here),
    /// keyed by edge index.
    pub pipe_profit: Vec<(usize, f64)>,
}

/// Outcome of the revenue-adequacy audit.
#[derive(Debug, Clone, Copy)]
pub struct AdequacyCheck {
    /// Consumers cover suppliers and active pipes.
    pub holds: bool,
    pub gap: f64,
    /// Whether the sufficient conditions for guaranteed adequacy hold
    /// (zero linearization offset and zero pressure floors).
    pub conditions_met: bool,
    /// `gap - rent - offset_payment`; zero at any optimum regardless of
    /// the conditions.
    pub identity_residual: f64,
}

/// Profit of one agent, with the non-negativity audit.
#[derive(Debug, Clone, Copy)]
pub struct AgentProfit {
    /// Node index for suppliers, edge index for pipes.
    pub index: usize,
    pub profit: f64,
    pub recovers_cost: bool,
}

/// Outcome of the cost-recovery audit.
#[derive(Debug, Clone)]
pub struct CostRecovery {
    pub suppliers: Vec<AgentProfit>,
    pub active_pipes: Vec<AgentProfit>,
    /// Whether the sufficient design conditions hold: free injection
    /// floors, free compressor floors, free valve ceilings.
    pub conditions_met: bool,
}

/// Max-absolute first-order optimality residual per variable block, plus
/// cone-wise dual feasibility and complementarity. All entries are raw
/// (unnormalized) residuals.
#[derive(Debug, Clone, Copy, Default)]
pub struct StationarityReport {
    /// Schedule (injection) block.
    pub schedule: f64,
    /// Regulation block, over responsive actuators.
    pub regulation: f64,
    pub pressure: f64,
    pub flow: f64,
    /// Deviation prices: tracking-cone multipliers minus the configured
    /// prices.
    pub deviation_price: f64,
    /// Cost-epigraph multipliers minus their objective weight.
    pub cost_scale: f64,
    /// Injection-response rows.
    pub injection_response: f64,
    /// Regulation-response rows.
    pub regulation_response: f64,
    /// Cone dual-membership violation (`||u|| - lambda` and its rotated
    /// analogue), clamped at zero.
    pub dual_feasibility: f64,
    /// Cone complementarity products.
    pub complementarity: f64,
}

impl StationarityReport {
    /// Largest residual across all blocks.
    pub fn max(&self) -> f64 {
        [
            self.schedule,
            self.regulation,
            self.pressure,
            self.flow,
            self.deviation_price,
            self.cost_scale,
            self.injection_response,
            self.regulation_response,
            self.dual_feasibility,
            self.complementarity,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

/// Dual matrices lifted out of a [`PolicySolution`], in dense node/edge
/// indexing (rows = constraint site, columns = disturbance node).
struct DualTables {
    lam_c: DVector<f64>,
    lam_r: DVector<f64>,
    lam_w: DVector<f64>,
    lam_ref: f64,
    lam_pi_hi: DVector<f64>,
    lam_pi_lo: DVector<f64>,
    lam_phi_lo: DVector<f64>,
    lam_th_hi: DVector<f64>,
    lam_th_lo: DVector<f64>,
    lam_ka_hi: DVector<f64>,
    lam_ka_lo: DVector<f64>,
    lam_s_pi: DVector<f64>,
    lam_s_phi: DVector<f64>,
    u_pi_hi: DMatrix<f64>,
    u_pi_lo: DMatrix<f64>,
    u_phi_lo: DMatrix<f64>,
    u_th_hi: DMatrix<f64>,
    u_th_lo: DMatrix<f64>,
    u_ka_hi: DMatrix<f64>,
    u_ka_lo: DMatrix<f64>,
    u_s_pi: DMatrix<f64>,
    u_s_phi: DMatrix<f64>,
}

impl DualTables {
    fn build(net: &GasNetwork, sol: &PolicySolution) -> Result<Self> {
        let n = net.n_nodes();
        let e = net.n_edges();
        let active = net.active_indices();
        let d = &sol.duals;

        let expect = |what: &str, got: usize, want: usize| -> Result<()> {
            if got != want {
                return Err(Error::Dimension(format!(
                    "dual family {what} has {got} entries, expected {want}"
                )));
            }
            Ok(())
        };
        expect("nominal balance", d.nominal_balance.len(), n)?;
        expect("recourse balance", d.recourse_balance.len(), n)?;
        expect("linearized flow", d.linear_flow.len(), e)?;
        expect("pressure ceiling", d.pressure_upper.len(), n)?;
        expect("pressure floor", d.pressure_lower.len(), n)?;
        expect("flow direction", d.flow_nonneg.len(), active.len())?;
        expect("injection ceiling", d.injection_upper.len(), n)?;
        expect("injection floor", d.injection_lower.len(), n)?;
        expect("regulation ceiling", d.regulation_upper.len(), active.len())?;
        expect("regulation floor", d.regulation_lower.len(), active.len())?;
        expect("pressure deviation", d.pressure_var.len(), n)?;
        expect("flow deviation", d.flow_var.len(), e)?;
        expect("scheduled cost", d.cost_nominal.len(), n)?;
        expect("recourse cost", d.cost_recourse.len(), n)?;

        let rows_n = |name: &str, items: &[crate::policy::ChanceDual]| -> Result<DMatrix<f64>> {
            let mut m = DMatrix::zeros(items.len(), n);
            for (i, cd) in items.iter().enumerate() {
                expect(name, cd.u.len(), n)?;
                m.row_mut(i).copy_from(&cd.u.transpose());
            }
            Ok(m)
        };
        // Families indexed by active position spread onto full edge rows.
        let rows_active =
            |name: &str, items: &[crate::policy::ChanceDual]| -> Result<DMatrix<f64>> {
                let mut m = DMatrix::zeros(e, n);
                for (pos, cd) in items.iter().enumerate() {
                    expect(name, cd.u.len(), n)?;
                    m.row_mut(active[pos]).copy_from(&cd.u.transpose());
                }
                Ok(m)
            };
        let lam_active = |items: &[crate::policy::ChanceDual]| -> DVector<f64> {
            let mut v = DVector::zeros(e);
            for (pos, cd) in items.iter().enumerate() {
                v[active[pos]] = cd.lambda;
            }
            v
        };

        let mut u_s_pi = DMatrix::zeros(n, n);
        for (i, vd) in d.pressure_var.iter().enumerate() {
            expect("pressure deviation", vd.u.len(), n)?;
            u_s_pi.row_mut(i).copy_from(&vd.u.transpose());
        }
        let mut u_s_phi = DMatrix::zeros(e, n);
        for (l, vd) in d.flow_var.iter().enumerate() {
            expect("flow deviation", vd.u.len(), n)?;
            u_s_phi.row_mut(l).copy_from(&vd.u.transpose());
        }

        Ok(Self {
            lam_c: d.nominal_balance.clone(),
            lam_r: d.recourse_balance.clone(),
            lam_w: d.linear_flow.clone(),
            lam_ref: d.reference_pin,
            lam_pi_hi: DVector::from_fn(n, |i, _| d.pressure_upper[i].lambda),
            lam_pi_lo: DVector::from_fn(n, |i, _| d.pressure_lower[i].lambda),
            lam_phi_lo: lam_active(&d.flow_nonneg),
            lam_th_hi: DVector::from_fn(n, |i, _| d.injection_upper[i].lambda),
            lam_th_lo: DVector::from_fn(n, |i, _| d.injection_lower[i].lambda),
            lam_ka_hi: lam_active(&d.regulation_upper),
            lam_ka_lo: lam_active(&d.regulation_lower),
            lam_s_pi: DVector::from_fn(n, |i, _| d.pressure_var[i].lambda),
            lam_s_phi: DVector::from_fn(e, |l, _| d.flow_var[l].lambda),
            u_pi_hi: rows_n("pressure ceiling", &d.pressure_upper)?,
            u_pi_lo: rows_n("pressure floor", &d.pressure_lower)?,
            u_phi_lo: rows_active("flow direction", &d.flow_nonneg)?,
            u_th_hi: rows_n("injection ceiling", &d.injection_upper)?,
            u_th_lo: rows_n("injection floor", &d.injection_lower)?,
            u_ka_hi: rows_active("regulation ceiling", &d.regulation_upper)?,
            u_ka_lo: rows_active("regulation floor", &d.regulation_lower)?,
            u_s_pi,
            u_s_phi,
        })
    }
}

/// Computes the full settlement of an optimized policy.
pub fn revenues(
    net: &GasNetwork,
    sol: &PolicySolution,
    unc: &UncertaintyModel,
) -> Result<RevenueReport> {
    let n = net.n_nodes();
    let e = net.n_edges();
    let active = net.active_indices();
    let z = sol.z;
    let f = &unc.factor;
    if f.nrows() != n {
        return Err(Error::Dimension(format!(
            "covariance factor is {}x{}, expected {n}x{n}",
            f.nrows(),
            f.ncols()
        )));
    }
    let t = DualTables::build(net, sol)?;

    let g = &sol.maps.grounded_inverse; // N x N, pressure response to injections
    let gh = &sol.maps.pressure_wrt_regulation; // N x E
    let jm = &sol.maps.flow_wrt_injection; // E x N
    let km = &sol.maps.flow_wrt_regulation; // E x E

    // Sensitivity-weighted dual aggregates. Row n of `m_lim` is the
    // per-disturbance marginal value of relaxing every pressure/flow limit
    // through an injection response at node n; `m_var` is the same through
    // the deviation cones; the `a_*` rows aggregate through a regulation
    // response instead.
    let lim_pi = &t.u_pi_hi + &t.u_pi_lo;
    let m_lim = g.transpose() * &lim_pi + jm.transpose() * &t.u_phi_lo; // N x N
    let m_var = g.transpose() * &t.u_s_pi + jm.transpose() * &t.u_s_phi; // N x N
    let a_lim = gh.transpose() * &lim_pi + km.transpose() * &t.u_phi_lo; // E x N
    let a_var = gh.transpose() * &t.u_s_pi + km.transpose() * &t.u_s_phi; // E x N
    let m_lim_f = &m_lim * f;
    let m_var_f = &m_var * f;
    let a_lim_f = &a_lim * f;
    let a_var_f = &a_var * f;

    let b = net.control_incidence();
    let bsum: Vec<f64> = (0..e).map(|l| b.column(l).sum()).collect();

    let supplier: Vec<RevenueStreams> = (0..n)
        .map(|i| RevenueStreams {
            nominal: t.lam_c[i] * sol.theta[i],
            recourse: t.lam_r.dot(&sol.alpha.row(i).transpose()),
            limits: z * m_lim_f.row(i).dot(&sol.alpha.row(i)),
            variance: m_var_f.row(i).dot(&sol.alpha.row(i)),
        })
        .collect();

    let active_pipe: Vec<(usize, RevenueStreams)> = active
        .iter()
        .map(|&l| {
            let regulation_price =
                sol.lin.wrt_regulation[(l, l)] * t.lam_w[l] - t.lam_c.dot(&b.column(l));
            let streams = RevenueStreams {
                nominal: regulation_price * sol.kappa[l],
                recourse: -bsum[l] * t.lam_r.dot(&sol.beta.row(l).transpose()),
                limits: -z * a_lim_f.row(l).dot(&sol.beta.row(l)),
                variance: -a_var_f.row(l).dot(&sol.beta.row(l)),
            };
            (l, streams)
        })
        .collect();

    let consumer: Vec<RevenueStreams> = (0..n)
        .map(|i| RevenueStreams {
            nominal: t.lam_c[i] * sol.delta[i],
            recourse: t.lam_r[i],
            limits: z * f.row(i).dot(&m_lim.row(i)),
            variance: f.row(i).dot(&m_var.row(i)),
        })
        .collect();

    // Operator rent. The flow term is zero at any exact optimum (the flow
    // stationarity condition is exactly its bracket); it is kept so the
    // identity audit sees solver residuals rather than hiding them.
    let a = net.incidence();
    let flow_bracket = &t.lam_phi_lo - &t.lam_w - a.transpose() * &t.lam_c;
    let pressure_bracket =
        sol.lin.wrt_pressure.transpose() * &t.lam_w + &t.lam_pi_lo - &t.lam_pi_hi;
    let rent = RentBreakdown {
        flow: flow_bracket.dot(&sol.phi),
        pressure: pressure_bracket.dot(&sol.pi) + t.lam_pi_hi.dot(&net.pressure_max())
            - t.lam_pi_lo.dot(&net.pressure_min()),
        variance: t.lam_s_phi.dot(&sol.s_flow) + t.lam_s_pi.dot(&sol.s_pressure),
    };

    let offset_payment = t.lam_w.dot(&sol.lin.offset);
    let offset_max_abs = sol.lin.offset.amax();
    let adequacy_gap = consumer.iter().map(RevenueStreams::total).sum::<f64>()
        - supplier.iter().map(RevenueStreams::total).sum::<f64>()
        - active_pipe
            .iter()
            .map(|(_, s)| s.total())
            .sum::<f64>();

    // Supplier cost at the optimum: linear energy cost plus the scheduled
    // and recourse quadratic costs (their epigraphs are tight).
    let c1 = net.cost_linear();
    let c2 = net.cost_quadratic();
    let w_theta = &sol.alpha * f;
    let supplier_profit: Vec<f64> = (0..n)
        .map(|i| {
            let cost = c1[i] * sol.theta[i]
                + c2[i] * sol.theta[i] * sol.theta[i]
                + c2[i] * w_theta.row(i).norm_squared();
            supplier[i].total() - cost
        })
        .collect();
    let pipe_profit: Vec<(usize, f64)> = active_pipe
        .iter()
        .map(|&(l, ref s)| (l, s.total()))
        .collect();

    Ok(RevenueReport {
        supplier,
        active_pipe,
        consumer,
        rent,
        offset_payment,
        offset_max_abs,
        adequacy_gap,
        supplier_profit,
        pipe_profit,
    })
}

/// Audits whether consumer charges cover supplier and pipe revenues, and
/// whether the settlement identity holds.
pub fn check_revenue_adequacy(report: &RevenueReport, net: &GasNetwork) -> AdequacyCheck {
    let scale = 1.0 + report.adequacy_gap.abs() + report.rent.total().abs();
    let conditions_met =
        report.offset_max_abs == 0.0 && net.pressure_min().iter().all(|&p| p == 0.0);
    AdequacyCheck {
        holds: report.adequacy_gap >= -1e-6 * scale,
        gap: report.adequacy_gap,
        conditions_met,
        identity_residual: report.adequacy_gap - report.rent.total() - report.offset_payment,
    }
}

/// Audits per-agent profit and the design conditions that guarantee it.
pub fn check_cost_recovery(report: &RevenueReport, net: &GasNetwork) -> CostRecovery {
    let scale = 1.0
        + report
            .supplier_profit
            .iter()
            .fold(0.0_f64, |m, p| m.max(p.abs()));
    let suppliers: Vec<AgentProfit> = report
        .supplier_profit
        .iter()
        .enumerate()
        .map(|(i, &profit)| AgentProfit {
            index: i,
            profit,
            recovers_cost: profit >= -1e-6 * scale,
        })
        .collect();
    let active_pipes: Vec<AgentProfit> = report
        .pipe_profit
        .iter()
        .map(|&(l, profit)| AgentProfit {
            index: l,
            profit,
            recovers_cost: profit >= -1e-6 * scale,
        })
        .collect();
    let injections_free = net.injection_min().iter().all(|&v| v == 0.0);
    let regulation_free = net.edges.iter().enumerate().all(|(l, edge)| match edge.kind {
        EdgeKind::Passive => true,
        EdgeKind::Compressor => net.regulation_min()[l] == 0.0,
        EdgeKind::Valve => net.regulation_max()[l] == 0.0,
    });
    CostRecovery {
        suppliers,
        active_pipes,
        conditions_met: injections_free && regulation_free,
    }
}

/// Recomputes the first-order optimality residuals of the policy program
/// from the solution's duals.
///
/// Rows eliminated from the program by pinning (the reference response,
/// zero-width boxes, out-of-scope actuators, passive edges) are owned by
/// their pin multipliers and are skipped here.
pub fn check_stationarity(
    net: &GasNetwork,
    sol: &PolicySolution,
    unc: &UncertaintyModel,
) -> Result<StationarityReport> {
    let n = net.n_nodes();
    let e = net.n_edges();
    let r = net.reference_index();
    let active = net.active_indices();
    let z = sol.z;
    let f = &unc.factor;
    let t = DualTables::build(net, sol)?;
    let stochastic = !unc.stochastic_nodes().is_empty();

    let th_lo = net.injection_min();
    let th_hi = net.injection_max();
    let (ka_lo, ka_hi) = net.regulation_bounds();
    let theta_fixed: Vec<bool> = (0..n).map(|i| th_lo[i] == th_hi[i]).collect();
    let kappa_fixed: Vec<bool> = (0..e).map(|l| ka_lo[l] == ka_hi[l]).collect();
    let scope_pinned = sol.scope.pinned_edges(net);

    let a = net.incidence();
    let b = net.control_incidence();
    let bsum: Vec<f64> = (0..e).map(|l| b.column(l).sum()).collect();
    let c1 = net.cost_linear();
    let c2 = net.cost_quadratic();

    let mut rep = StationarityReport::default();
    let track = |slot: &mut f64, v: f64| *slot = slot.max(v.abs());

    // Schedule block: marginal cost meets the nodal price and the
    // injection-limit duals.
    for i in 0..n {
        if theta_fixed[i] {
            continue;
        }
        let u_nom = sol.duals.cost_nominal[i]
            .as_ref()
            .map_or(0.0, |cd| cd.u[0]);
        let res = c1[i] - c2[i].sqrt() * u_nom - t.lam_c[i] + t.lam_th_hi[i] - t.lam_th_lo[i];
        track(&mut rep.schedule, res);
    }

    // Regulation block, on actuators that are actually free.
    for &l in &active {
        if kappa_fixed[l] {
            continue;
        }
        let res = b.column(l).dot(&t.lam_c) - sol.lin.wrt_regulation[(l, l)] * t.lam_w[l]
            + t.lam_ka_hi[l]
            - t.lam_ka_lo[l];
        track(&mut rep.regulation, res);
    }

    // Pressure block (the reference pin's multiplier closes its own row).
    let g2t_lw = sol.lin.wrt_pressure.transpose() * &t.lam_w;
    for i in 0..n {
        let pin = if i == r { t.lam_ref } else { 0.0 };
        let res = t.lam_pi_hi[i] - t.lam_pi_lo[i] - g2t_lw[i] - pin;
        track(&mut rep.pressure, res);
    }

    // Flow block.
    let at_lc = a.transpose() * &t.lam_c;
    for l in 0..e {
        let res = at_lc[l] + t.lam_w[l] - t.lam_phi_lo[l];
        track(&mut rep.flow, res);
    }

    // Deviation prices: each tracking cone's multiplier equals the price.
    if sol.psi_pressure != 0.0 && stochastic {
        for i in 0..n {
            if i == r {
                continue;
            }
            track(&mut rep.deviation_price, t.lam_s_pi[i] - sol.psi_pressure);
        }
    }
    if sol.psi_flow != 0.0 && stochastic {
        for l in 0..e {
            track(&mut rep.deviation_price, t.lam_s_phi[l] - sol.psi_flow);
        }
    }

    // Cost epigraphs: their multipliers equal the objective weight 1.
    for cd in sol.duals.cost_nominal.iter().flatten() {
        track(&mut rep.cost_scale, cd.mu - 1.0);
    }
    for cd in sol.duals.cost_recourse.iter().flatten() {
        track(&mut rep.cost_scale, cd.mu - 1.0);
    }

    // Response blocks: the adequacy price balances the marginal value the
    // response creates across every cone it touches.
    let g = &sol.maps.grounded_inverse;
    let gh = &sol.maps.pressure_wrt_regulation;
    let jm = &sol.maps.flow_wrt_injection;
    let km = &sol.maps.flow_wrt_regulation;
    let lim_pi = &t.u_pi_hi + &t.u_pi_lo;
    let m_lim_f = (g.transpose() * &lim_pi + jm.transpose() * &t.u_phi_lo) * f;
    let m_var_f = (g.transpose() * &t.u_s_pi + jm.transpose() * &t.u_s_phi) * f;
    let a_lim_f = (gh.transpose() * &lim_pi + km.transpose() * &t.u_phi_lo) * f;
    let a_var_f = (gh.transpose() * &t.u_s_pi + km.transpose() * &t.u_s_phi) * f;
    let th_cone_f = (&t.u_th_hi + &t.u_th_lo) * f;
    let ka_cone_f = (&t.u_ka_hi + &t.u_ka_lo) * f;
    let mut u_alpha = DMatrix::zeros(n, n);
    for (i, cd) in sol.duals.cost_recourse.iter().enumerate() {
        if let Some(cd) = cd {
            u_alpha.row_mut(i).copy_from(&cd.u.transpose());
        }
    }
    let u_alpha_f = &u_alpha * f;

    for i in 0..n {
        if i == r || theta_fixed[i] {
            continue;
        }
        for j in 0..n {
            let res = t.lam_r[j]
                + z * (m_lim_f[(i, j)] + th_cone_f[(i, j)])
                + m_var_f[(i, j)]
                + c2[i].sqrt() * u_alpha_f[(i, j)];
            track(&mut rep.injection_response, res);
        }
    }
    for &l in &active {
        if kappa_fixed[l] || scope_pinned.contains(&l) {
            continue;
        }
        for j in 0..n {
            let res = bsum[l] * t.lam_r[j] + z * (a_lim_f[(l, j)] - ka_cone_f[(l, j)])
                + a_var_f[(l, j)];
            track(&mut rep.regulation_response, res);
        }
    }

    // Cone dual membership and complementarity, from the realized margins.
    let w_theta = &sol.alpha * f;
    let w_kappa = &sol.beta * f;
    let w_pi = sol.maps.policy_pressure_response(&sol.alpha, &sol.beta) * f;
    let w_phi = sol.maps.policy_flow_response(&sol.alpha, &sol.beta) * f;
    let pi_lo = net.pressure_min();
    let pi_hi = net.pressure_max();

    let mut soc = |lam: f64, u: &DVector<f64>, margin: f64, vec: DVector<f64>| {
        track(&mut rep.dual_feasibility, (u.norm() - lam).max(0.0));
        track(&mut rep.complementarity, lam * margin + u.dot(&vec));
    };
    for i in 0..n {
        soc(
            t.lam_pi_hi[i],
            &sol.duals.pressure_upper[i].u,
            pi_hi[i] - sol.pi[i],
            z * w_pi.row(i).transpose(),
        );
        soc(
            t.lam_pi_lo[i],
            &sol.duals.pressure_lower[i].u,
            sol.pi[i] - pi_lo[i],
            z * w_pi.row(i).transpose(),
        );
        if !theta_fixed[i] {
            soc(
                t.lam_th_hi[i],
                &sol.duals.injection_upper[i].u,
                th_hi[i] - sol.theta[i],
                z * w_theta.row(i).transpose(),
            );
            soc(
                t.lam_th_lo[i],
                &sol.duals.injection_lower[i].u,
                sol.theta[i] - th_lo[i],
                z * w_theta.row(i).transpose(),
            );
        }
        if sol.psi_pressure != 0.0 && stochastic && i != r {
            soc(
                t.lam_s_pi[i],
                &sol.duals.pressure_var[i].u,
                sol.s_pressure[i],
                w_pi.row(i).transpose(),
            );
        }
    }
    for (pos, &l) in active.iter().enumerate() {
        soc(
            t.lam_phi_lo[l],
            &sol.duals.flow_nonneg[pos].u,
            sol.phi[l],
            z * w_phi.row(l).transpose(),
        );
        if !kappa_fixed[l] {
            soc(
                t.lam_ka_hi[l],
                &sol.duals.regulation_upper[pos].u,
                ka_hi[l] - sol.kappa[l],
                z * w_kappa.row(l).transpose(),
            );
            soc(
                t.lam_ka_lo[l],
                &sol.duals.regulation_lower[pos].u,
                sol.kappa[l] - ka_lo[l],
                z * w_kappa.row(l).transpose(),
            );
        }
    }
    if sol.psi_flow != 0.0 && stochastic {
        for l in 0..e {
            soc(
                t.lam_s_phi[l],
                &sol.duals.flow_var[l].u,
                sol.s_flow[l],
                w_phi.row(l).transpose(),
            );
        }
    }
    for (i, cd) in sol.duals.cost_nominal.iter().enumerate() {
        if let Some(cd) = cd {
            let root = c2[i].sqrt();
            let value = c2[i] * sol.theta[i] * sol.theta[i];
            track(
                &mut rep.dual_feasibility,
                (cd.u.norm_squared() - 4.0 * cd.mu * cd.mu_const).max(0.0),
            );
            track(
                &mut rep.complementarity,
                cd.mu * value + cd.mu_const + cd.u[0] * root * sol.theta[i],
            );
        }
    }
    for (i, cd) in sol.duals.cost_recourse.iter().enumerate() {
        if let Some(cd) = cd {
            let root = c2[i].sqrt();
            let row = w_theta.row(i).transpose();
            let value = c2[i] * row.norm_squared();
            track(
                &mut rep.dual_feasibility,
                (cd.u.norm_squared() - 4.0 * cd.mu * cd.mu_const).max(0.0),
            );
            track(
                &mut rep.complementarity,
                cd.mu * value + cd.mu_const + root * cd.u.dot(&row),
            );
        }
    }

    Ok(rep)
}
