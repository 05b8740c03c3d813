//! Deterministic rendering of results to CSV, JSON, and plain text.
//!
//! Every emitter is a pure function from in-memory results to a `String`:
//! no clocks, no environment lookups, no iteration-order dependence, so
//! identical inputs give byte-identical bytes. Each emitted file starts
//! with (or, for JSON, embeds) the configuration digest and RNG seed that
//! produced it, which is what makes reruns auditable.
//!
//! Monetary amounts are rounded to the micro-unit here and only here; the
//! numerical layers below never round.

use crate::network::{EdgeKind, GasNetwork};
use crate::policy::PolicySolution;
use crate::pricing::{
    AdequacyCheck, CostRecovery, RevenueReport, RevenueStreams, StationarityReport,
};
use crate::steady::StationaryPoint;
use crate::uncertainty::UncertaintyModel;
use crate::validation::{self, ProjectionMetrics, ValidationReport};
use nalgebra::DMatrix;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;

/// Identification stamped into every output file.
#[derive(Debug, Clone)]
pub struct ReportMeta {
    pub config_hash: String,
    pub seed: u64,
}

impl ReportMeta {
    pub fn new(config_bytes: &[u8], seed: u64) -> Self {
        Self {
            config_hash: config_hash(config_bytes),
            seed,
        }
    }

    /// Comment line placed at the top of CSV and text outputs.
    pub fn header(&self) -> String {
        format!("# config={} seed={}", self.config_hash, self.seed)
    }
}

/// Short hex digest of a serialized configuration.
pub fn config_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().take(8).fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Rounds a monetary amount to the micro-unit, flushing negative zero.
pub fn money(x: f64) -> f64 {
    let r = (x * 1e6).round() / 1e6;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

fn m(x: f64) -> String {
    format!("{:.6}", money(x))
}

/// General (non-monetary) value: Rust's shortest-roundtrip decimal form,
/// which is deterministic and lossless.
fn g(x: f64) -> String {
    format!("{x}")
}

fn opt(x: Option<f64>) -> String {
    x.map(g).unwrap_or_default()
}

fn kind_tag(kind: EdgeKind) -> &'static str {
    match kind {
        EdgeKind::Passive => "passive",
        EdgeKind::Compressor => "compressor",
        EdgeKind::Valve => "valve",
    }
}

// ---------------------------------------------------------------------------
// Settlement outputs
// ---------------------------------------------------------------------------

/// Long-form settlement table: one row per agent per revenue stream, plus
/// the rent breakdown and the balance identity terms, so the whole
/// decomposition can be re-aggregated from this one file.
pub fn revenue_csv(meta: &ReportMeta, report: &RevenueReport) -> String {
    let mut out = String::new();
    out.push_str(&meta.header());
    out.push_str("\nagent,index,stream,amount\n");
    let mut rows = |agent: &str, index: String, s: &RevenueStreams| {
        for (stream, v) in [
            ("nominal", s.nominal),
            ("recourse", s.recourse),
            ("limits", s.limits),
            ("variance", s.variance),
            ("total", s.total()),
        ] {
            let _ = writeln!(out, "{agent},{index},{stream},{}", m(v));
        }
    };
    for (i, s) in report.supplier.iter().enumerate() {
        rows("supplier", i.to_string(), s);
    }
    for (l, s) in &report.active_pipe {
        rows("active_pipe", l.to_string(), s);
    }
    for (i, s) in report.consumer.iter().enumerate() {
        rows("consumer", i.to_string(), s);
    }
    for (stream, v) in [
        ("flow", report.rent.flow),
        ("pressure", report.rent.pressure),
        ("variance", report.rent.variance),
        ("total", report.rent.total()),
    ] {
        let _ = writeln!(out, "rent,,{stream},{}", m(v));
    }
    let _ = writeln!(out, "system,,offset_payment,{}", m(report.offset_payment));
    let _ = writeln!(out, "system,,adequacy_gap,{}", m(report.adequacy_gap));
    out
}

/// Human-readable settlement summary with the three audits appended.
pub fn revenue_text(
    report: &RevenueReport,
    adequacy: &AdequacyCheck,
    recovery: &CostRecovery,
    stationarity: &StationarityReport,
    stationarity_tol: f64,
) -> String {
    let sum =
        |agents: &[RevenueStreams]| -> f64 { agents.iter().map(RevenueStreams::total).sum() };
    let consumers = sum(&report.consumer);
    let suppliers = sum(&report.supplier);
    let pipes: f64 = report.active_pipe.iter().map(|(_, s)| s.total()).sum();

    let mut out = String::new();
    let _ = writeln!(out, "settlement");
    let _ = writeln!(out, "  consumers pay            {}", m(consumers));
    let _ = writeln!(out, "  suppliers receive        {}", m(suppliers));
    let _ = writeln!(out, "  active pipes receive     {}", m(pipes));
    let _ = writeln!(out, "  surplus (adequacy gap)   {}", m(report.adequacy_gap));
    let _ = writeln!(
        out,
        "    rent: flow {} + pressure {} + variance {} = {}",
        m(report.rent.flow),
        m(report.rent.pressure),
        m(report.rent.variance),
        m(report.rent.total())
    );
    let _ = writeln!(
        out,
        "    linearization offset payment {}",
        m(report.offset_payment)
    );
    let _ = writeln!(
        out,
        "    identity residual (gap - rent - offset) {}",
        m(adequacy.identity_residual)
    );

    let _ = writeln!(
        out,
        "revenue adequacy: {} (sufficient conditions {})",
        if adequacy.holds { "HOLDS" } else { "VIOLATED" },
        if adequacy.conditions_met {
            "met"
        } else {
            "not met"
        }
    );

    let losses: Vec<String> = recovery
        .suppliers
        .iter()
        .map(|a| ("supplier", a))
        .chain(recovery.active_pipes.iter().map(|a| ("active_pipe", a)))
        .filter(|(_, a)| !a.recovers_cost)
        .map(|(kind, a)| format!("  {kind} {} profit {}", a.index, m(a.profit)))
        .collect();
    if losses.is_empty() {
        let _ = writeln!(
            out,
            "cost recovery: all agents recover cost (sufficient conditions {})",
            if recovery.conditions_met {
                "met"
            } else {
                "not met"
            }
        );
    } else {
        let _ = writeln!(out, "cost recovery: {} agent(s) below cost", losses.len());
        for line in losses {
            let _ = writeln!(out, "{line}");
        }
    }

    let worst = stationarity.max();
    let _ = writeln!(
        out,
        "stationarity audit: max residual {} ({})",
        g(worst),
        if worst <= stationarity_tol {
            "PASS"
        } else {
            "FAIL"
        }
    );
    for (name, v) in [
        ("schedule", stationarity.schedule),
        ("regulation", stationarity.regulation),
        ("pressure", stationarity.pressure),
        ("flow", stationarity.flow),
        ("deviation_price", stationarity.deviation_price),
        ("cost_scale", stationarity.cost_scale),
        ("injection_response", stationarity.injection_response),
        ("regulation_response", stationarity.regulation_response),
        ("dual_feasibility", stationarity.dual_feasibility),
        ("complementarity", stationarity.complementarity),
    ] {
        let _ = writeln!(out, "  {name:<20} {}", g(v));
    }
    out
}

// ---------------------------------------------------------------------------
// Run summary (one row per configuration)
// ---------------------------------------------------------------------------

/// One summary-table row: cost, state spread, and out-of-sample quality of
/// a single solved configuration.
#[derive(Debug, Clone)]
pub struct SummaryRow {
    pub label: String,
    pub mode: String,
    pub epsilon: f64,
    pub psi_pressure: f64,
    pub psi_flow: f64,
    pub expected_cost: f64,
    /// Sum of predicted pressure variances over nodes.
    pub pressure_variance_sum: f64,
    /// Sum of predicted flow variances over edges.
    pub flow_variance_sum: f64,
    /// Sum of predicted regulation standard deviations over compressors.
    pub regulation_spread_compressors: f64,
    /// Same, over valves.
    pub regulation_spread_valves: f64,
    /// Joint out-of-sample violation frequency, when validation ran.
    pub violation_frequency: Option<f64>,
    /// Mean projection distances, when validation ran.
    pub injection_distance: Option<f64>,
    pub regulation_distance: Option<f64>,
}

impl SummaryRow {
    pub fn build(
        label: &str,
        mode: &str,
        epsilon: f64,
        net: &GasNetwork,
        sol: &PolicySolution,
        unc: &UncertaintyModel,
        validation: Option<&ValidationReport>,
    ) -> Self {
        let wk = &sol.beta * &unc.factor;
        let mut compressors = 0.0;
        let mut valves = 0.0;
        for (l, edge) in net.edges.iter().enumerate() {
            let spread = wk.row(l).norm();
            match edge.kind {
                EdgeKind::Compressor => compressors += spread,
                EdgeKind::Valve => valves += spread,
                EdgeKind::Passive => {}
            }
        }
        Self {
            label: label.to_string(),
            mode: mode.to_string(),
            epsilon,
            psi_pressure: sol.psi_pressure,
            psi_flow: sol.psi_flow,
            expected_cost: sol.expected_cost,
            pressure_variance_sum: sol.s_pressure.iter().map(|s| s * s).sum(),
            flow_variance_sum: sol.s_flow.iter().map(|s| s * s).sum(),
            regulation_spread_compressors: compressors,
            regulation_spread_valves: valves,
            violation_frequency: validation.map(|v| v.evaluation.joint_frequency),
            injection_distance: validation.map(|v| v.projection.injection_distance),
            regulation_distance: validation.map(|v| v.projection.regulation_distance),
        }
    }
}

pub fn summary_csv(meta: &ReportMeta, rows: &[SummaryRow]) -> String {
    let mut out = String::new();
    out.push_str(&meta.header());
    out.push_str(
        "\nlabel,mode,epsilon,psi_pressure,psi_flow,expected_cost,\
         pressure_variance_sum,flow_variance_sum,regulation_spread_compressors,\
         regulation_spread_valves,violation_frequency,injection_distance,\
         regulation_distance\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.label,
            r.mode,
            g(r.epsilon),
            g(r.psi_pressure),
            g(r.psi_flow),
            m(r.expected_cost),
            g(r.pressure_variance_sum),
            g(r.flow_variance_sum),
            g(r.regulation_spread_compressors),
            g(r.regulation_spread_valves),
            opt(r.violation_frequency),
            opt(r.injection_distance),
            opt(r.regulation_distance),
        );
    }
    out
}

// ---------------------------------------------------------------------------
// Validation outputs
// ---------------------------------------------------------------------------

/// Per-constraint violation table, with the joint row first.
pub fn validation_csv(meta: &ReportMeta, report: &ValidationReport) -> String {
    let eval = &report.evaluation;
    let mut out = String::new();
    out.push_str(&meta.header());
    out.push_str("\nfamily,index,violations,frequency\n");
    let joint_count = (eval.joint_frequency * eval.samples as f64).round() as usize;
    let _ = writeln!(
        out,
        "joint,,{joint_count},{}",
        g(eval.joint_frequency)
    );
    for (family, stats) in [
        ("pressure_upper", &eval.pressure_upper),
        ("pressure_lower", &eval.pressure_lower),
        ("injection_upper", &eval.injection_upper),
        ("injection_lower", &eval.injection_lower),
    ] {
        for (i, c) in stats.iter().enumerate() {
            let _ = writeln!(out, "{family},{i},{},{}", c.violations, g(c.frequency));
        }
    }
    for (family, stats) in [
        ("flow_direction", &eval.flow_direction),
        ("regulation_upper", &eval.regulation_upper),
        ("regulation_lower", &eval.regulation_lower),
    ] {
        for (l, c) in stats.iter() {
            let _ = writeln!(out, "{family},{l},{},{}", c.violations, g(c.frequency));
        }
    }
    out
}

/// Per-node spread table: scheduled pressure, predicted and empirical
/// standard deviation, and worst observed prediction error.
pub fn node_table_csv(
    meta: &ReportMeta,
    sol: &PolicySolution,
    report: &ValidationReport,
) -> String {
    let mut out = String::new();
    out.push_str(&meta.header());
    out.push_str(
        "\nnode,scheduled_pressure,predicted_stddev,empirical_stddev,worst_projection_error\n",
    );
    for i in 0..sol.pi.len() {
        let _ = writeln!(
            out,
            "{i},{},{},{},{}",
            g(sol.pi[i]),
            g(sol.s_pressure[i]),
            g(report.evaluation.pressure_stddev[i]),
            g(report.pressure_error[i]),
        );
    }
    out
}

/// Per-edge spread table with flow-reversal frequencies.
pub fn edge_table_csv(
    meta: &ReportMeta,
    net: &GasNetwork,
    sol: &PolicySolution,
    report: &ValidationReport,
) -> String {
    let mut out = String::new();
    out.push_str(&meta.header());
    out.push_str(
        "\nedge,from,to,kind,scheduled_flow,predicted_stddev,empirical_stddev,\
         reversal_frequency\n",
    );
    for (l, edge) in net.edges.iter().enumerate() {
        let _ = writeln!(
            out,
            "{l},{},{},{},{},{},{},{}",
            edge.from,
            edge.to,
            kind_tag(edge.kind),
            g(sol.phi[l]),
            g(sol.s_flow[l]),
            g(report.evaluation.flow_stddev[l]),
            g(report.flow_reversal[l]),
        );
    }
    out
}

/// Human-readable validation summary.
pub fn validation_text(report: &ValidationReport) -> String {
    let eval = &report.evaluation;
    let mut out = String::new();
    let _ = writeln!(out, "out-of-sample validation ({} draws)", eval.samples);
    let _ = writeln!(
        out,
        "  joint violation frequency  {} (95% ci half-width {})",
        g(eval.joint_frequency),
        g(eval.joint_ci)
    );
    let _ = writeln!(
        out,
        "  worst single constraint    {}",
        g(eval.max_constraint_frequency)
    );
    let _ = writeln!(
        out,
        "  projections                {} converged, {} failed",
        report.projection.samples, report.projection.failures
    );
    let _ = writeln!(
        out,
        "    mean injection shift     {}",
        g(report.projection.injection_distance)
    );
    let _ = writeln!(
        out,
        "    mean regulation shift    {}",
        g(report.projection.regulation_distance)
    );
    let worst_node = report.pressure_error.imax();
    let _ = writeln!(
        out,
        "  pressure prediction error  max {} at node {} ({} draws, p={}, v={})",
        g(report.pressure_error[worst_node]),
        worst_node,
        report.certificate_samples,
        g(report.certificate_p),
        g(report.certificate_v)
    );
    let (worst_edge, worst_rev) = report
        .flow_reversal
        .iter()
        .copied()
        .enumerate()
        .fold((0, 0.0), |acc, (l, f)| if f > acc.1 { (l, f) } else { acc });
    let _ = writeln!(
        out,
        "  flow reversals             max frequency {} at edge {}",
        g(worst_rev),
        worst_edge
    );
    out
}

/// Per-sample debug trace: the disturbance, which limits it violated, and
/// how far its projection had to move (blank when the projection was not
/// run or did not converge).
pub fn sample_trace_csv(
    meta: &ReportMeta,
    net: &GasNetwork,
    sol: &PolicySolution,
    samples: &DMatrix<f64>,
    projections: Option<&ProjectionMetrics>,
) -> String {
    let mut out = String::new();
    out.push_str(&meta.header());
    out.push_str("\nsample,xi,violated,injection_distance,regulation_distance\n");
    for s in 0..samples.ncols() {
        let xi = samples.column(s).into_owned();
        let st = sol.realize(&sol.delta, &xi);
        let tags = validation::violation_labels(net, &st);
        let xi_txt = xi.iter().map(|v| g(*v)).collect::<Vec<_>>().join(";");
        let (inj, reg) = match projections.and_then(|p| p.per_sample.get(s)) {
            Some(Some((a, b))) => (g(*a), g(*b)),
            _ => (String::new(), String::new()),
        };
        let _ = writeln!(out, "{s},{xi_txt},{},{inj},{reg}", tags.join(";"));
    }
    out
}

// ---------------------------------------------------------------------------
// JSON outputs
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct PointFile<'a> {
    config: &'a str,
    seed: u64,
    theta: Vec<f64>,
    kappa: Vec<f64>,
    phi: Vec<f64>,
    pi: Vec<f64>,
}

/// The linearization base point, stamped with the run identity.
pub fn point_json(meta: &ReportMeta, point: &StationaryPoint) -> String {
    let file = PointFile {
        config: &meta.config_hash,
        seed: meta.seed,
        theta: point.theta.iter().copied().collect(),
        kappa: point.kappa.iter().copied().collect(),
        phi: point.phi.iter().copied().collect(),
        pi: point.pi.iter().copied().collect(),
    };
    let mut s = serde_json::to_string_pretty(&file).expect("plain vectors always serialize");
    s.push('\n');
    s
}

#[derive(Serialize)]
struct SolutionFile<'a> {
    config: &'a str,
    seed: u64,
    expected_cost: f64,
    objective: f64,
    z: f64,
    psi_pressure: f64,
    psi_flow: f64,
    iterations: u32,
    relative_gap: f64,
    theta: Vec<f64>,
    kappa: Vec<f64>,
    phi: Vec<f64>,
    pi: Vec<f64>,
    delta: Vec<f64>,
    alpha: Vec<Vec<f64>>,
    beta: Vec<Vec<f64>>,
    s_pressure: Vec<f64>,
    s_flow: Vec<f64>,
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|r| m.row(r).iter().copied().collect())
        .collect()
}

/// The full policy solution (schedule, recourse matrices, predicted
/// spreads) as pretty JSON.
pub fn solution_json(meta: &ReportMeta, sol: &PolicySolution) -> String {
    let file = SolutionFile {
        config: &meta.config_hash,
        seed: meta.seed,
        expected_cost: money(sol.expected_cost),
        objective: money(sol.objective),
        z: sol.z,
        psi_pressure: sol.psi_pressure,
        psi_flow: sol.psi_flow,
        iterations: sol.iterations,
        relative_gap: sol.relative_gap,
        theta: sol.theta.iter().copied().collect(),
        kappa: sol.kappa.iter().copied().collect(),
        phi: sol.phi.iter().copied().collect(),
        pi: sol.pi.iter().copied().collect(),
        delta: sol.delta.iter().copied().collect(),
        alpha: matrix_rows(&sol.alpha),
        beta: matrix_rows(&sol.beta),
        s_pressure: sol.s_pressure.iter().copied().collect(),
        s_flow: sol.s_flow.iter().copied().collect(),
    };
    let mut s = serde_json::to_string_pretty(&file).expect("plain vectors always serialize");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pricing::RentBreakdown;

    #[test]
    fn money_rounds_to_micro_units() {
        assert_eq!(money(1.0000004), 1.0);
        assert_eq!(money(1.0000006), 1.000001);
        assert_eq!(money(-2.5e-7), 0.0);
        assert!(money(-1e-9).is_sign_positive(), "negative zero must flush");
        assert_eq!(m(1.5), "1.500000");
        assert_eq!(m(-0.0000001), "0.000000");
    }

    #[test]
    fn config_hash_is_short_stable_hex() {
        let a = config_hash(b"alpha");
        let b = config_hash(b"alpha");
        let c = config_hash(b"beta");
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 16);
        assert!(a.chars().all(|ch| ch.is_ascii_hexdigit()));
    }

    #[test]
    fn revenue_csv_is_byte_exact() {
        let zero = RevenueStreams::default();
        let supplier = RevenueStreams {
            nominal: 1.25,
            recourse: 0.5,
            limits: -0.125,
            variance: 0.0,
        };
        let report = RevenueReport {
            supplier: vec![supplier, zero],
            active_pipe: vec![(3, zero)],
            consumer: vec![zero, supplier],
            rent: RentBreakdown {
                flow: 0.0,
                pressure: 2.0,
                variance: 0.25,
            },
            offset_payment: -0.75,
            offset_max_abs: 0.1,
            adequacy_gap: 1.5,
            supplier_profit: vec![0.0, 0.0],
            pipe_profit: vec![(3, 0.0)],
        };
        let meta = ReportMeta::new(b"cfg", 7);
        let csv = revenue_csv(&meta, &report);
        let expected_head = format!(
            "# config={} seed=7\nagent,index,stream,amount\n\
             supplier,0,nominal,1.250000\nsupplier,0,recourse,0.500000\n\
             supplier,0,limits,-0.125000\nsupplier,0,variance,0.000000\n\
             supplier,0,total,1.625000\n",
            meta.config_hash
        );
        assert!(csv.starts_with(&expected_head), "got:\n{csv}");
        assert!(csv.contains("active_pipe,3,total,0.000000\n"));
        assert!(csv.contains("rent,,total,2.250000\n"));
        assert!(csv.ends_with("system,,adequacy_gap,1.500000\n"));
        // Re-emission is byte-identical.
        assert_eq!(csv, revenue_csv(&meta, &report));
    }

    #[test]
    fn summary_csv_leaves_missing_validation_columns_empty() {
        let meta = ReportMeta::new(b"cfg", 0);
        let row = SummaryRow {
            label: "base".into(),
            mode: "cc".into(),
            epsilon: 0.1,
            psi_pressure: 0.0,
            psi_flow: 0.0,
            expected_cost: 12.345,
            pressure_variance_sum: 0.5,
            flow_variance_sum: 0.25,
            regulation_spread_compressors: 0.0,
            regulation_spread_valves: 0.0,
            violation_frequency: None,
            injection_distance: None,
            regulation_distance: None,
        };
        let csv = summary_csv(&meta, &[row.clone()]);
        assert!(
            csv.ends_with("base,cc,0.1,0,0,12.345000,0.5,0.25,0,0,,,\n"),
            "got:\n{csv}"
        );
        let mut with = row;
        with.violation_frequency = Some(0.04);
        with.injection_distance = Some(0.0);
        with.regulation_distance = Some(0.0);
        let csv = summary_csv(&meta, &[with]);
        assert!(csv.ends_with(",0.04,0,0\n"), "got:\n{csv}");
    }
}
