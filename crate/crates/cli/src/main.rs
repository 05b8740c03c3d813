//! Batch front-end: solve, price, and validate gas-network policies from
//! the command line, emitting deterministic CSV/JSON reports.

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use gasnet_core::network::GasNetwork;
use gasnet_core::policy::{
    self, PolicyOptions, PolicySolution, RecourseScope,
};
use gasnet_core::report::{self, ReportMeta, SummaryRow};
use gasnet_core::steady::{self, DispatchOptions, StationaryPoint};
use gasnet_core::uncertainty::{RiskModel, UncertaintyModel};
use gasnet_core::validation::{self, ValidationOptions};
use gasnet_core::{pricing, Error};
use rayon::prelude::*;
use serde::Serialize;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Largest stationarity residual still accepted as a certified optimum.
/// Clean solves land below 1e-5; corrupted or stale duals land orders of
/// magnitude above.
const AUDIT_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "gasnet",
    about = "Chance-constrained dispatch, pricing, and validation for gas networks",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Optimize the affine control policy and write the solution files.
    Solve {
        #[command(flatten)]
        args: CommonArgs,
        /// Also dump the assembled conic program as JSON.
        #[arg(long)]
        dump_program: bool,
    },
    /// Solve, then settle: per-agent revenue decomposition and the
    /// adequacy / cost-recovery / stationarity audits.
    Price {
        #[command(flatten)]
        args: CommonArgs,
        /// Add this much noise to the nodal prices before auditing
        /// (demonstrates that the audit catches corrupted duals).
        #[arg(long, default_value_t = 0.0)]
        perturb_duals: f64,
    },
    /// Solve, then stress the policy out of sample against the nonlinear
    /// physics.
    Validate {
        #[command(flatten)]
        args: CommonArgs,
        /// Also write a per-sample debug trace.
        #[arg(long)]
        trace: bool,
    },
}

#[derive(Copy, Clone, PartialEq, ValueEnum, Serialize)]
enum Mode {
    /// Plan for the forecast only; no uncertainty margins.
    Det,
    /// Chance-constrained planning with affine recourse.
    Cc,
}

impl Mode {
    fn tag(self) -> &'static str {
        match self {
            Mode::Det => "det",
            Mode::Cc => "cc",
        }
    }
}

#[derive(Copy, Clone, ValueEnum, Serialize)]
enum Distribution {
    /// Gaussian disturbances (quantile safety factors).
    Gaussian,
    /// Distribution-free (Chebyshev-style) safety factors.
    Free,
}

#[derive(Copy, Clone, ValueEnum, Serialize)]
enum Scope {
    /// Only injections respond to disturbances.
    Injections,
    /// Injections and compressors respond.
    Compressors,
    /// Injections, compressors, and valves all respond.
    All,
}

impl From<Scope> for RecourseScope {
    fn from(s: Scope) -> Self {
        match s {
            Scope::Injections => RecourseScope::InjectionsOnly,
            Scope::Compressors => RecourseScope::WithCompressors,
            Scope::All => RecourseScope::AllActuators,
        }
    }
}

/// Flags shared by every subcommand; together with the network file they
/// are the run configuration hashed into every output.
#[derive(Args, Clone, Serialize)]
struct CommonArgs {
    /// Network description (JSON).
    network: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Cc)]
    mode: Mode,
    /// Joint violation budget for chance constraints.
    #[arg(long, default_value_t = 0.05)]
    eps: f64,
    /// Price on predicted pressure standard deviations.
    #[arg(long = "psi-pi", default_value_t = 0.0)]
    psi_pi: f64,
    /// Price on predicted flow standard deviations.
    #[arg(long = "psi-phi", default_value_t = 0.0)]
    psi_phi: f64,
    /// Which actuators may respond to disturbances.
    #[arg(long, value_enum, default_value_t = Scope::All)]
    scope: Scope,
    #[arg(long, value_enum, default_value_t = Distribution::Gaussian)]
    distribution: Distribution,
    /// Monte Carlo draws for violation counting.
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    /// Draws projected onto the nonlinear physics (each one is a
    /// nonlinear solve).
    #[arg(long, default_value_t = 50)]
    projection_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Miss probability of the pressure-error certificate.
    #[arg(long, default_value_t = 0.1)]
    p: f64,
    /// One minus the certificate confidence.
    #[arg(long, default_value_t = 0.1)]
    v: f64,
    /// Re-run validation at these pressure-spread prices (comma
    /// separated) and emit one summary row each.
    #[arg(long = "sweep-psi-pi", value_delimiter = ',')]
    sweep_psi_pi: Vec<f64>,
    /// Same sweep over the flow-spread price.
    #[arg(long = "sweep-psi-phi", value_delimiter = ',')]
    sweep_psi_phi: Vec<f64>,
    /// Output directory.
    #[arg(long, env = "GASNET_OUT", default_value = "gasnet-out")]
    #[serde(skip)]
    out: PathBuf,
}

impl CommonArgs {
    fn risk_model(&self) -> RiskModel {
        match (self.mode, self.distribution) {
            (Mode::Det, _) => RiskModel::Deterministic,
            (Mode::Cc, Distribution::Gaussian) => RiskModel::Gaussian,
            (Mode::Cc, Distribution::Free) => RiskModel::DistributionFree,
        }
    }

    fn label(&self) -> String {
        self.network
            .file_stem()
            .map(|s| s.to_string_lossy().replace(',', "_"))
            .unwrap_or_else(|| "run".into())
    }

    fn validation_options(&self) -> ValidationOptions {
        ValidationOptions {
            samples: self.samples,
            projection_samples: self.projection_samples,
            seed: self.seed,
            error_probability: self.p,
            error_confidence: self.v,
            dispatch: DispatchOptions::default(),
        }
    }
}

/// Everything the three subcommands share: the loaded network, the
/// linearization point from the deterministic dispatch, and the optimized
/// policy.
struct Pipeline {
    net: GasNetwork,
    point: StationaryPoint,
    unc: UncertaintyModel,
    sol: PolicySolution,
    meta: ReportMeta,
}

fn run_pipeline(a: &CommonArgs, psi_pi: f64, psi_phi: f64) -> anyhow::Result<Pipeline> {
    let net_bytes = fs::read(&a.network)
        .with_context(|| format!("reading network file {}", a.network.display()))?;
    let net = GasNetwork::from_json(&String::from_utf8_lossy(&net_bytes))
        .context("parsing network file")?;
    net.validate().context("validating network")?;

    let mut config_bytes = serde_json::to_vec(a).expect("flags always serialize");
    config_bytes.extend_from_slice(&net_bytes);
    let meta = ReportMeta::new(&config_bytes, a.seed);

    let delta = net.extraction_mean();
    let dispatch = steady::solve_deterministic(&net, &delta, &DispatchOptions::default())
        .context("deterministic dispatch")?;
    let unc = UncertaintyModel::build(&net, a.eps, a.risk_model())
        .context("building uncertainty model")?;
    let opts = PolicyOptions {
        psi_pressure: psi_pi,
        psi_flow: psi_phi,
        scope: a.scope.into(),
        ..PolicyOptions::default()
    };
    let sol = policy::solve_policy(&net, &delta, &dispatch.point, &unc, &opts)
        .context("policy optimization")?;
    Ok(Pipeline {
        net,
        point: dispatch.point,
        unc,
        sol,
        meta,
    })
}

fn write_file(dir: &Path, name: &str, contents: &str) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_solve(a: &CommonArgs, dump_program: bool) -> anyhow::Result<u8> {
    let pl = run_pipeline(a, a.psi_pi, a.psi_phi)?;
    write_file(&a.out, "point.json", &report::point_json(&pl.meta, &pl.point))?;
    write_file(&a.out, "solution.json", &report::solution_json(&pl.meta, &pl.sol))?;
    let row = SummaryRow::build(
        &a.label(),
        a.mode.tag(),
        a.eps,
        &pl.net,
        &pl.sol,
        &pl.unc,
        None,
    );
    write_file(&a.out, "summary.csv", &report::summary_csv(&pl.meta, &[row]))?;
    if dump_program {
        let program = policy::describe_policy_program(
            &pl.net,
            &pl.sol.delta,
            &pl.point,
            &pl.unc,
            &PolicyOptions {
                psi_pressure: a.psi_pi,
                psi_flow: a.psi_phi,
                scope: a.scope.into(),
                ..PolicyOptions::default()
            },
        )?;
        let wrapped = serde_json::json!({
            "config": pl.meta.config_hash,
            "seed": pl.meta.seed,
            "program": program,
        });
        let mut text = serde_json::to_string_pretty(&wrapped).expect("json values serialize");
        text.push('\n');
        write_file(&a.out, "program.json", &text)?;
    }
    println!(
        "expected cost {:.6} (mode {}, {} interior-point iterations)",
        report::money(pl.sol.expected_cost),
        a.mode.tag(),
        pl.sol.iterations
    );
    Ok(0)
}

fn cmd_price(a: &CommonArgs, perturb_duals: f64) -> anyhow::Result<u8> {
    let mut pl = run_pipeline(a, a.psi_pi, a.psi_phi)?;
    if perturb_duals != 0.0 {
        for v in pl.sol.duals.nominal_balance.iter_mut() {
            *v += perturb_duals;
        }
        eprintln!("note: nodal prices perturbed by {perturb_duals} before auditing");
    }
    let revenue = pricing::revenues(&pl.net, &pl.sol, &pl.unc).context("settlement")?;
    let adequacy = pricing::check_revenue_adequacy(&revenue, &pl.net);
    let recovery = pricing::check_cost_recovery(&revenue, &pl.net);
    let stationarity =
        pricing::check_stationarity(&pl.net, &pl.sol, &pl.unc).context("stationarity audit")?;

    write_file(&a.out, "revenue.csv", &report::revenue_csv(&pl.meta, &revenue))?;
    let text = report::revenue_text(&revenue, &adequacy, &recovery, &stationarity, AUDIT_TOL);
    write_file(&a.out, "settlement.txt", &text)?;
    print!("{text}");

    let worst = stationarity.max();
    if worst > AUDIT_TOL {
        eprintln!("error: duals do not certify optimality (max residual {worst:e})");
        return Ok(4);
    }
    Ok(0)
}

fn cmd_validate(a: &CommonArgs, trace: bool) -> anyhow::Result<u8> {
    let pl = run_pipeline(a, a.psi_pi, a.psi_phi)?;
    let opts = a.validation_options();
    let rep = validation::validate_policy(&pl.net, &pl.sol, &pl.unc, &opts)
        .context("out-of-sample validation")?;

    write_file(&a.out, "validation.csv", &report::validation_csv(&pl.meta, &rep))?;
    write_file(&a.out, "nodes.csv", &report::node_table_csv(&pl.meta, &pl.sol, &rep))?;
    write_file(
        &a.out,
        "edges.csv",
        &report::edge_table_csv(&pl.meta, &pl.net, &pl.sol, &rep),
    )?;
    let text = report::validation_text(&rep);
    write_file(&a.out, "validation.txt", &text)?;
    print!("{text}");

    let row = SummaryRow::build(
        &a.label(),
        a.mode.tag(),
        a.eps,
        &pl.net,
        &pl.sol,
        &pl.unc,
        Some(&rep),
    );
    write_file(&a.out, "summary.csv", &report::summary_csv(&pl.meta, &[row]))?;

    if trace {
        // The trace pairs each projected draw with the limits it violated,
        // so it uses the projection draws rather than the (much larger)
        // violation-counting set.
        let draws = pl
            .unc
            .sample(a.seed, validation::PROJECTION_STREAM, a.projection_samples);
        let csv = report::sample_trace_csv(&pl.meta, &pl.net, &pl.sol, &draws, Some(&rep.projection));
        write_file(&a.out, "trace.csv", &csv)?;
    }

    if !a.sweep_psi_pi.is_empty() || !a.sweep_psi_phi.is_empty() {
        let rows = run_sweep(a)?;
        write_file(&a.out, "sweep.csv", &report::summary_csv(&pl.meta, &rows))?;
    }
    Ok(0)
}

/// One validated summary row per swept spread price. Points fan out
/// across threads; each writes nothing and returns its row, so the output
/// order is the configured order.
fn run_sweep(a: &CommonArgs) -> anyhow::Result<Vec<SummaryRow>> {
    let mut configs: Vec<(String, f64, f64)> = Vec::new();
    for &x in &a.sweep_psi_pi {
        configs.push((format!("psi_pi={x}"), x, a.psi_phi));
    }
    for &y in &a.sweep_psi_phi {
        configs.push((format!("psi_phi={y}"), a.psi_pi, y));
    }
    configs
        .into_par_iter()
        .map(|(label, psi_pi, psi_phi)| {
            let pl = run_pipeline(a, psi_pi, psi_phi)
                .with_context(|| format!("sweep point {label}"))?;
            let rep = validation::validate_policy(&pl.net, &pl.sol, &pl.unc, &a.validation_options())
                .with_context(|| format!("validating sweep point {label}"))?;
            Ok(SummaryRow::build(
                &label,
                a.mode.tag(),
                a.eps,
                &pl.net,
                &pl.sol,
                &pl.unc,
                Some(&rep),
            ))
        })
        .collect()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Infeasible { .. }) => 2,
        Some(Error::Unbounded { .. }) => 3,
        Some(
            Error::NonConvergent(_)
            | Error::SolverStalled { .. }
            | Error::SimulationDiverged { .. }
            | Error::SingularJacobian { .. }
            | Error::DegenerateFlow(_)
            | Error::Projection { .. },
        ) => 4,
        _ => 5,
    }
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    match cli.cmd {
        Cmd::Solve { args, dump_program } => cmd_solve(&args, dump_program),
        Cmd::Price {
            args,
            perturb_duals,
        } => cmd_price(&args, perturb_duals),
        Cmd::Validate { args, trace } => cmd_validate(&args, trace),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 5,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
