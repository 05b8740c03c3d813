//! Out-of-sample audit of an optimized policy.
//!
//! The policy program makes three promises it cannot check itself: the
//! probabilistic limits hold at the configured budget, the affine state
//! predictions track the real (non-convex) physics, and the control
//! inputs it schedules are implementable as-is. This module tests all
//! three against Monte Carlo disturbance draws:
//!
//! * [`evaluate_policies`] realizes the policy for each draw and counts
//!   violations of every engineering limit under the first-order state
//!   model, per constraint and jointly;
//! * [`evaluate_projections`] projects the realized control inputs onto
//!   the true feasible set ([`steady::project_state`]) and reports how far
//!   they had to move — zero distance means the schedule was implementable
//!   unchanged;
//! * [`pressure_error_bounds`] turns projection results into a per-node
//!   worst-case bound on the pressure prediction error, with the
//!   sample-complexity certificate of [`certificate_samples`]: with
//!   `ceil(1/(p v) - 1)` draws, the returned maximum bounds the error of a
//!   fresh draw with probability `1 - p` at confidence `1 - v`;
//! * [`flow_reversal_stats`] estimates how often each pipe's flow changes
//!   direction, which the linearization (built around signed flows)
//!   silently mispredicts.
//!
//! Violation counting deliberately uses the same first-order responses the
//! optimizer reasoned with, so its frequencies test the chance-constraint
//! calibration in isolation; the projection metrics then measure the
//! linearization error separately. Folding the two together would make a
//! well-calibrated policy on a badly linearized network look miscalibrated.

use crate::error::{Error, Result};
use crate::network::GasNetwork;
use crate::policy::PolicySolution;
use crate::steady::{self, DispatchOptions, StationaryPoint};
use crate::uncertainty::UncertaintyModel;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

/// Disturbance stream used for violation counting (see
/// [`UncertaintyModel::sample`]).
pub const VIOLATION_STREAM: u64 = 0;
/// Disturbance stream used for projection metrics.
pub const PROJECTION_STREAM: u64 = 1;
/// Disturbance stream used for the pressure-error certificate.
pub const ERROR_BOUND_STREAM: u64 = 2;

/// Violation tally of one constraint over a sample set.
#[derive(Debug, Clone, Copy, Default)]
pub struct ConstraintStat {
    pub violations: usize,
    pub frequency: f64,
}

/// Monte Carlo violation count under the first-order state model.
#[derive(Debug, Clone)]
pub struct PolicyEvaluation {
    pub samples: usize,
    /// Fraction of samples violating at least one limit.
    pub joint_frequency: f64,
    /// Half-width of the 95% binomial confidence interval on the joint
    /// frequency.
    pub joint_ci: f64,
    /// Largest per-constraint frequency across all families.
    pub max_constraint_frequency: f64,
    pub pressure_upper: Vec<ConstraintStat>,
    pub pressure_lower: Vec<ConstraintStat>,
    pub injection_upper: Vec<ConstraintStat>,
    pub injection_lower: Vec<ConstraintStat>,
    /// Flow-direction violations per active edge, keyed by edge index.
    pub flow_direction: Vec<(usize, ConstraintStat)>,
    pub regulation_upper: Vec<(usize, ConstraintStat)>,
    pub regulation_lower: Vec<(usize, ConstraintStat)>,
    /// Empirical standard deviation of each node's realized pressure.
    pub pressure_stddev: DVector<f64>,
    /// Empirical standard deviation of each edge's realized flow.
    pub flow_stddev: DVector<f64>,
}

/// How far realized control inputs had to move to become physically
/// implementable.
#[derive(Debug, Clone)]
pub struct ProjectionMetrics {
    /// Samples whose projection converged.
    pub samples: usize,
    /// Samples whose projection did not converge. Never folded into the
    /// distance averages.
    pub failures: usize,
    /// Mean injection correction `||theta_realized - theta_projected||`.
    pub injection_distance: f64,
    /// Mean regulation correction over active edges.
    pub regulation_distance: f64,
    /// Per-sample outcomes in sample order (`None` for failed
    /// projections).
    pub per_sample: Vec<Option<(f64, f64)>>,
}

/// Worst observed pressure-prediction error at one node, with its
/// sample-complexity certificate.
#[derive(Debug, Clone, Copy)]
pub struct ErrorBound {
    pub node: usize,
    /// `max_s |pi_predicted - pi_projected|` over the certificate draws.
    pub t_star: f64,
    pub samples_used: usize,
    /// A fresh draw exceeds `t_star` with probability at most `p`...
    pub p: f64,
    /// ...at confidence `1 - v` over the draws used here.
    pub v: f64,
}

/// Everything the out-of-sample audit produces.
#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub evaluation: PolicyEvaluation,
    pub projection: ProjectionMetrics,
    /// Per-edge fraction of samples whose realized flow reverses against
    /// the schedule.
    pub flow_reversal: Vec<f64>,
    /// Per-node worst-case pressure-prediction error over the certificate
    /// draws.
    pub pressure_error: DVector<f64>,
    pub certificate_p: f64,
    pub certificate_v: f64,
    pub certificate_samples: usize,
}

/// Options for [`validate_policy`].
#[derive(Debug, Clone)]
pub struct ValidationOptions {
    /// Draws for violation counting (cheap, linear-model evaluations).
    pub samples: usize,
    /// Draws for projection metrics (each one is a nonlinear solve).
    pub projection_samples: usize,
    pub seed: u64,
    /// Miss probability of the pressure-error certificate.
    pub error_probability: f64,
    /// One minus the confidence of the certificate.
    pub error_confidence: f64,
    pub dispatch: DispatchOptions,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        Self {
            samples: 10_000,
            projection_samples: 100,
            seed: 0,
            error_probability: 0.1,
            error_confidence: 0.1,
            dispatch: DispatchOptions::default(),
        }
    }
}

fn slack(bound: f64) -> f64 {
    1e-9 * (1.0 + bound.abs())
}

/// Counts violations of every engineering limit over the sample columns,
/// under the policy's own first-order state model.
pub fn evaluate_policies(
    net: &GasNetwork,
    sol: &PolicySolution,
    samples: &DMatrix<f64>,
) -> Result<PolicyEvaluation> {
    let n = net.n_nodes();
    let e = net.n_edges();
    if samples.nrows() != n {
        return Err(Error::Dimension(format!(
            "sample matrix has {} rows, expected one per node ({n})",
            samples.nrows()
        )));
    }
    let s_count = samples.ncols();
    let active = net.active_indices();
    let pi_lo = net.pressure_min();
    let pi_hi = net.pressure_max();
    let th_lo = net.injection_min();
    let th_hi = net.injection_max();
    let (ka_lo, ka_hi) = net.regulation_bounds();

    let states: Vec<crate::policy::RealizedState> = (0..s_count)
        .into_par_iter()
        .map(|s| sol.realize(&sol.delta, &samples.column(s).into_owned()))
        .collect();

    let mut pressure_upper = vec![ConstraintStat::default(); n];
    let mut pressure_lower = vec![ConstraintStat::default(); n];
    let mut injection_upper = vec![ConstraintStat::default(); n];
    let mut injection_lower = vec![ConstraintStat::default(); n];
    let mut flow_direction = vec![ConstraintStat::default(); active.len()];
    let mut regulation_upper = vec![ConstraintStat::default(); active.len()];
    let mut regulation_lower = vec![ConstraintStat::default(); active.len()];
    let mut joint = 0usize;
    let mut sq_pi = DVector::<f64>::zeros(n);
    let mut sq_phi = DVector::<f64>::zeros(e);

    for st in &states {
        let mut any = false;
        for i in 0..n {
            if st.pi[i] > pi_hi[i] + slack(pi_hi[i]) {
                pressure_upper[i].violations += 1;
                any = true;
            }
            if st.pi[i] < pi_lo[i] - slack(pi_lo[i]) {
                pressure_lower[i].violations += 1;
                any = true;
            }
            if st.theta[i] > th_hi[i] + slack(th_hi[i]) {
                injection_upper[i].violations += 1;
                any = true;
            }
            if st.theta[i] < th_lo[i] - slack(th_lo[i]) {
                injection_lower[i].violations += 1;
                any = true;
            }
            let d = st.pi[i] - sol.pi[i];
            sq_pi[i] += d * d;
        }
        for (pos, &l) in active.iter().enumerate() {
            if st.phi[l] < -slack(0.0) {
                flow_direction[pos].violations += 1;
                any = true;
            }
            if st.kappa[l] > ka_hi[l] + slack(ka_hi[l]) {
                regulation_upper[pos].violations += 1;
                any = true;
            }
            if st.kappa[l] < ka_lo[l] - slack(ka_lo[l]) {
                regulation_lower[pos].violations += 1;
                any = true;
            }
        }
        for l in 0..e {
            let d = st.phi[l] - sol.phi[l];
            sq_phi[l] += d * d;
        }
        if any {
            joint += 1;
        }
    }

    let freq = |c: &mut ConstraintStat| {
        c.frequency = c.violations as f64 / s_count.max(1) as f64;
    };
    let mut max_freq = 0.0f64;
    for fam in [
        &mut pressure_upper,
        &mut pressure_lower,
        &mut injection_upper,
        &mut injection_lower,
        &mut flow_direction,
        &mut regulation_upper,
        &mut regulation_lower,
    ] {
        for c in fam.iter_mut() {
            freq(c);
            max_freq = max_freq.max(c.frequency);
        }
    }
    let keyed = |fam: Vec<ConstraintStat>| -> Vec<(usize, ConstraintStat)> {
        fam.into_iter()
            .enumerate()
            .map(|(pos, c)| (active[pos], c))
            .collect()
    };

    let joint_frequency = joint as f64 / s_count.max(1) as f64;
    let joint_ci =
        1.96 * (joint_frequency * (1.0 - joint_frequency) / s_count.max(1) as f64).sqrt();
    Ok(PolicyEvaluation {
        samples: s_count,
        joint_frequency,
        joint_ci,
        max_constraint_frequency: max_freq,
        pressure_upper,
        pressure_lower,
        injection_upper,
        injection_lower,
        flow_direction: keyed(flow_direction),
        regulation_upper: keyed(regulation_upper),
        regulation_lower: keyed(regulation_lower),
        pressure_stddev: sq_pi.map(|v| (v / s_count.max(1) as f64).sqrt()),
        flow_stddev: sq_phi.map(|v| (v / s_count.max(1) as f64).sqrt()),
    })
}

/// Names of the limits a realized state violates, as `family[index]` tags
/// (node index for pressures and injections, edge index for the rest).
/// Used by the per-sample debug trace.
pub fn violation_labels(net: &GasNetwork, st: &crate::policy::RealizedState) -> Vec<String> {
    let mut tags = Vec::new();
    let pi_lo = net.pressure_min();
    let pi_hi = net.pressure_max();
    let th_lo = net.injection_min();
    let th_hi = net.injection_max();
    let (ka_lo, ka_hi) = net.regulation_bounds();
    for i in 0..net.n_nodes() {
        if st.pi[i] > pi_hi[i] + slack(pi_hi[i]) {
            tags.push(format!("pressure_upper[{i}]"));
        }
        if st.pi[i] < pi_lo[i] - slack(pi_lo[i]) {
            tags.push(format!("pressure_lower[{i}]"));
        }
        if st.theta[i] > th_hi[i] + slack(th_hi[i]) {
            tags.push(format!("injection_upper[{i}]"));
        }
        if st.theta[i] < th_lo[i] - slack(th_lo[i]) {
            tags.push(format!("injection_lower[{i}]"));
        }
    }
    for l in net.active_indices() {
        if st.phi[l] < -slack(0.0) {
            tags.push(format!("flow_direction[{l}]"));
        }
        if st.kappa[l] > ka_hi[l] + slack(ka_hi[l]) {
            tags.push(format!("regulation_upper[{l}]"));
        }
        if st.kappa[l] < ka_lo[l] - slack(ka_lo[l]) {
            tags.push(format!("regulation_lower[{l}]"));
        }
    }
    tags
}

/// One realized disturbance, projected onto the physically consistent,
/// box-feasible set.
#[derive(Debug, Clone)]
pub struct ProjectedRealization {
    /// The affine policy's own (first-order) prediction.
    pub realized: crate::policy::RealizedState,
    /// Nearest implementable state found by the nonlinear search.
    pub projected: StationaryPoint,
    pub injection_shift: f64,
    pub regulation_shift: f64,
}

/// Projects the policy's realized control inputs for one disturbance onto
/// the true feasible set.
///
/// The local search starts at the realized inputs themselves, which biases
/// it toward the nearest implementable correction; if that start stalls,
/// it retries from the nominal schedule.
pub fn project_realization(
    net: &GasNetwork,
    sol: &PolicySolution,
    xi: &DVector<f64>,
    opts: &DispatchOptions,
) -> Result<ProjectedRealization> {
    let realized = sol.realize(&sol.delta, xi);
    let pi_ref = sol.pi[net.reference_index()];
    let projection = steady::project_state(
        net,
        &realized.delta,
        &realized.theta,
        &realized.kappa,
        pi_ref,
        opts,
    )
    .or_else(|_| {
        steady::project_state_from(
            net,
            &realized.delta,
            &realized.theta,
            &realized.kappa,
            &sol.theta,
            &sol.kappa,
            pi_ref,
            opts,
        )
    })?;
    Ok(ProjectedRealization {
        realized,
        injection_shift: projection.injection_shift,
        regulation_shift: projection.regulation_shift,
        projected: projection.point,
    })
}

/// Projects every sample column and averages the correction distances.
/// Failed projections are counted, never averaged.
pub fn evaluate_projections(
    net: &GasNetwork,
    sol: &PolicySolution,
    samples: &DMatrix<f64>,
    opts: &DispatchOptions,
) -> ProjectionMetrics {
    let outcomes: Vec<Option<(f64, f64)>> = (0..samples.ncols())
        .into_par_iter()
        .map(|s| {
            let xi = samples.column(s).into_owned();
            project_realization(net, sol, &xi, opts)
                .ok()
                .map(|p| (p.injection_shift, p.regulation_shift))
        })
        .collect();
    let ok: Vec<(f64, f64)> = outcomes.iter().flatten().copied().collect();
    let count = ok.len().max(1) as f64;
    ProjectionMetrics {
        samples: ok.len(),
        failures: outcomes.len() - ok.len(),
        injection_distance: ok.iter().map(|(a, _)| a).sum::<f64>() / count,
        regulation_distance: ok.iter().map(|(_, b)| b).sum::<f64>() / count,
        per_sample: outcomes,
    }
}

/// Number of draws needed so that the maximum observed over them bounds a
/// fresh draw with probability `1 - p` at confidence `1 - v`.
pub fn certificate_samples(p: f64, v: f64) -> Result<usize> {
    if !(p > 0.0 && p < 1.0 && v > 0.0 && v < 1.0) {
        return Err(Error::Validation {
            message: format!("certificate levels must lie in (0, 1), got p={p}, v={v}"),
        });
    }
    Ok((1.0 / (p * v) - 1.0).ceil().max(1.0) as usize)
}

/// Worst observed pressure-prediction error per node over freshly drawn
/// certificate samples, each projected onto the true physics.
///
/// Any projection failure invalidates the certificate and aborts the run.
pub fn pressure_error_bounds(
    net: &GasNetwork,
    sol: &PolicySolution,
    unc: &UncertaintyModel,
    p: f64,
    v: f64,
    seed: u64,
    opts: &DispatchOptions,
) -> Result<(DVector<f64>, usize)> {
    let s_used = certificate_samples(p, v)?;
    let draws = unc.sample(seed, ERROR_BOUND_STREAM, s_used);
    let gaps: Vec<DVector<f64>> = (0..s_used)
        .into_par_iter()
        .map(|s| {
            let xi = draws.column(s).into_owned();
            let pr = project_realization(net, sol, &xi, opts).map_err(|e| {
                Error::Projection {
                    sample: s,
                    reason: e.to_string(),
                }
            })?;
            Ok((&pr.realized.pi - &pr.projected.pi).abs())
        })
        .collect::<Result<_>>()?;
    let mut worst = DVector::zeros(net.n_nodes());
    for gap in &gaps {
        worst.zip_apply(gap, |w: &mut f64, g| *w = w.max(g));
    }
    Ok((worst, s_used))
}

/// The per-node certificate for a single node of interest.
pub fn error_bound(
    net: &GasNetwork,
    sol: &PolicySolution,
    unc: &UncertaintyModel,
    node: usize,
    p: f64,
    v: f64,
    seed: u64,
    opts: &DispatchOptions,
) -> Result<ErrorBound> {
    if node >= net.n_nodes() {
        return Err(Error::Dimension(format!(
            "node index {node} out of range for {} nodes",
            net.n_nodes()
        )));
    }
    let (worst, samples_used) = pressure_error_bounds(net, sol, unc, p, v, seed, opts)?;
    Ok(ErrorBound {
        node,
        t_star: worst[node],
        samples_used,
        p,
        v,
    })
}

/// Per-edge fraction of samples whose realized flow runs against the
/// scheduled direction.
pub fn flow_reversal_stats(
    net: &GasNetwork,
    sol: &PolicySolution,
    samples: &DMatrix<f64>,
) -> Vec<f64> {
    let e = net.n_edges();
    let mut reversed = vec![0usize; e];
    for s in 0..samples.ncols() {
        let st = sol.realize(&sol.delta, &samples.column(s).into_owned());
        for l in 0..e {
            if st.phi[l] * sol.phi[l] < 0.0 {
                reversed[l] += 1;
            }
        }
    }
    reversed
        .into_iter()
        .map(|c| c as f64 / samples.ncols().max(1) as f64)
        .collect()
}

/// Runs the complete out-of-sample audit.
pub fn validate_policy(
    net: &GasNetwork,
    sol: &PolicySolution,
    unc: &UncertaintyModel,
    opts: &ValidationOptions,
) -> Result<ValidationReport> {
    let eval_draws = unc.sample(opts.seed, VIOLATION_STREAM, opts.samples);
    let evaluation = evaluate_policies(net, sol, &eval_draws)?;
    let flow_reversal = flow_reversal_stats(net, sol, &eval_draws);

    let proj_draws = unc.sample(opts.seed, PROJECTION_STREAM, opts.projection_samples);
    let projection = evaluate_projections(net, sol, &proj_draws, &opts.dispatch);

    let (pressure_error, certificate_used) = pressure_error_bounds(
        net,
        sol,
        unc,
        opts.error_probability,
        opts.error_confidence,
        opts.seed,
        &opts.dispatch,
    )?;

    Ok(ValidationReport {
        evaluation,
        projection,
        flow_reversal,
        pressure_error,
        certificate_p: opts.error_probability,
        certificate_v: opts.error_confidence,
        certificate_samples: certificate_used,
    })
}
