//! First-order model of the steady-state flow equations around an operating
//! point, and the induced closed-loop response of the network state to
//! injection and regulation changes.
//!
//! With squared pressures `pi`, regulation `kappa`, and edge coefficients
//! `w`, the nonlinear flow relation per edge is
//!
//! ```text
//! phi * |phi| = w * (A' pi + kappa)
//! ```
//!
//! Around a point with nonzero flows this linearizes to an affine relation
//!
//! ```text
//! phi  ≈  offset + wrt_pressure * pi + wrt_regulation * kappa
//! ```
//!
//! ([`FlowLinearization`]). Combining it with nodal conservation
//! `A phi = theta - B kappa - delta` eliminates flows and yields a weighted
//! graph Laplacian in the squared pressures; grounding the reference node
//! makes that system invertible. [`ResponseMaps`] packages the resulting
//! linear maps from changes in net injection and regulation to changes in
//! pressures and flows:
//!
//! ```text
//! d_pi  = grounded_inverse * (d_inj - balance_wrt_regulation * d_kappa)
//! d_phi = flow_wrt_injection * d_inj - flow_wrt_regulation * d_kappa
//! ```
//!
//! where `d_inj` is the change in net nodal injection (injections minus
//! extractions). Both maps keep the reference node's squared pressure
//! fixed, and conservation of the responded state holds identically
//! whenever `1' d_inj = 1' B d_kappa` (total added injection covers the
//! gas consumed by the actuators).

use crate::error::{Error, Result};
use crate::network::GasNetwork;
use nalgebra::{DMatrix, DVector};

/// Relative flow magnitude below which the linearization is refused.
const DEGENERATE_FLOW_REL: f64 = 1e-9;

/// Affine approximation of the edge flow relation at an operating point.
#[derive(Debug, Clone)]
pub struct FlowLinearization {
    /// Constant term (length `E`). Equals `phi/2` at any point that
    /// satisfies the flow relation exactly.
    pub offset: DVector<f64>,
    /// Sensitivity of edge flows to squared nodal pressures (`E x N`).
    pub wrt_pressure: DMatrix<f64>,
    /// Sensitivity of edge flows to regulation (`E x E`, diagonal).
    pub wrt_regulation: DMatrix<f64>,
}

impl FlowLinearization {
    /// Linearizes the flow relation at `(phi, pi, kappa)`.
    ///
    /// Fails with [`Error::DegenerateFlow`] if any edge carries (numerically)
    /// zero flow, since the relation is not differentiable there.
    pub fn at(
        net: &GasNetwork,
        phi: &DVector<f64>,
        pi: &DVector<f64>,
        kappa: &DVector<f64>,
    ) -> Result<Self> {
        let n = net.n_nodes();
        let e = net.n_edges();
        if phi.len() != e || pi.len() != n || kappa.len() != e {
            return Err(Error::Dimension(format!(
                "linearization point has sizes phi={}, pi={}, kappa={}, expected {e}, {n}, {e}",
                phi.len(),
                pi.len(),
                kappa.len()
            )));
        }
        let w = net.weymouth_coeff();
        let mean_abs = if e == 0 {
            0.0
        } else {
            phi.iter().map(|v| v.abs()).sum::<f64>() / e as f64
        };
        let floor = DEGENERATE_FLOW_REL * mean_abs.max(1.0);
        let degenerate: Vec<usize> = (0..e).filter(|&l| phi[l].abs() <= floor).collect();
        if !degenerate.is_empty() {
            return Err(Error::DegenerateFlow(format!(
                "edges {degenerate:?} carry zero flow; the flow relation has no \
                 first-order model there"
            )));
        }

        let a = net.incidence();
        let mut wrt_pressure = DMatrix::zeros(e, n);
        let mut wrt_regulation = DMatrix::zeros(e, e);
        for l in 0..e {
            let slope = w[l] / (2.0 * phi[l].abs());
            wrt_regulation[(l, l)] = slope;
            for i in 0..n {
                let aij = a[(i, l)];
                if aij != 0.0 {
                    wrt_pressure[(l, i)] = slope * aij;
                }
            }
        }
        let offset = phi - &wrt_pressure * pi - &wrt_regulation * kappa;
        Ok(Self {
            offset,
            wrt_pressure,
            wrt_regulation,
        })
    }

    /// The flow the affine model predicts at `(pi, kappa)`.
    pub fn predict(&self, pi: &DVector<f64>, kappa: &DVector<f64>) -> DVector<f64> {
        &self.offset + &self.wrt_pressure * pi + &self.wrt_regulation * kappa
    }
}

/// Closed-loop response of the network state to injection and regulation
/// changes, with the reference node's squared pressure held fixed.
#[derive(Debug, Clone)]
pub struct ResponseMaps {
    /// Weighted graph Laplacian of the squared-pressure system (`N x N`,
    /// symmetric positive semidefinite with kernel spanned by the ones
    /// vector on a connected network).
    pub laplacian: DMatrix<f64>,
    /// Inverse of the Laplacian grounded at the reference node: the
    /// reference row and column are identically zero, and the map inverts
    /// the Laplacian on the complement (`N x N`).
    pub grounded_inverse: DMatrix<f64>,
    /// Sensitivity of nodal balance to regulation (`N x E`): gas consumed
    /// by actuators plus the through-flow they induce.
    pub balance_wrt_regulation: DMatrix<f64>,
    /// Pressure response to regulation, `grounded_inverse *
    /// balance_wrt_regulation` (`N x E`).
    pub pressure_wrt_regulation: DMatrix<f64>,
    /// Flow response to net injection changes (`E x N`).
    pub flow_wrt_injection: DMatrix<f64>,
    /// Flow response to regulation changes, entering with a minus sign:
    /// `d_phi = flow_wrt_injection * d_inj - flow_wrt_regulation * d_kappa`
    /// (`E x E`).
    pub flow_wrt_regulation: DMatrix<f64>,
    reference: usize,
}

impl ResponseMaps {
    pub fn new(net: &GasNetwork, lin: &FlowLinearization) -> Result<Self> {
        let n = net.n_nodes();
        let a = net.incidence();
        let b = net.control_incidence();
        let laplacian = &a * &lin.wrt_pressure;
        let r = net.reference_index();

        // Ground the Laplacian at the reference node and invert the
        // remaining symmetric positive definite minor.
        let keep: Vec<usize> = (0..n).filter(|&i| i != r).collect();
        let mut minor = DMatrix::zeros(n - 1, n - 1);
        for (ii, &i) in keep.iter().enumerate() {
            for (jj, &j) in keep.iter().enumerate() {
                minor[(ii, jj)] = laplacian[(i, j)];
            }
        }
        let chol = minor.clone().cholesky().ok_or_else(|| {
            Error::DegenerateFlow(
                "grounded pressure system is not positive definite; the network \
                 is effectively disconnected at this operating point"
                    .into(),
            )
        })?;
        let minor_inv = chol.inverse();
        let mut grounded_inverse = DMatrix::zeros(n, n);
        for (ii, &i) in keep.iter().enumerate() {
            for (jj, &j) in keep.iter().enumerate() {
                grounded_inverse[(i, j)] = minor_inv[(ii, jj)];
            }
        }

        let balance_wrt_regulation = &b + &a * &lin.wrt_regulation;
        let pressure_wrt_regulation = &grounded_inverse * &balance_wrt_regulation;
        let flow_wrt_injection = &lin.wrt_pressure * &grounded_inverse;
        let flow_wrt_regulation =
            &flow_wrt_injection * &balance_wrt_regulation - &lin.wrt_regulation;

        Ok(Self {
            laplacian,
            grounded_inverse,
            balance_wrt_regulation,
            pressure_wrt_regulation,
            flow_wrt_injection,
            flow_wrt_regulation,
            reference: r,
        })
    }

    pub fn reference(&self) -> usize {
        self.reference
    }

    /// Squared-pressure change for a net injection change `d_inj` and a
    /// regulation change `d_kappa`. The reference component is always zero.
    pub fn pressure_shift(&self, d_inj: &DVector<f64>, d_kappa: &DVector<f64>) -> DVector<f64> {
        &self.grounded_inverse * d_inj - &self.pressure_wrt_regulation * d_kappa
    }

    /// Flow change for a net injection change `d_inj` and a regulation
    /// change `d_kappa`.
    pub fn flow_shift(&self, d_inj: &DVector<f64>, d_kappa: &DVector<f64>) -> DVector<f64> {
        &self.flow_wrt_injection * d_inj - &self.flow_wrt_regulation * d_kappa
    }

    /// Pressure response matrix of an affine recourse policy
    /// `(alpha, beta)`: column `j` is the pressure shift caused by a unit
    /// extraction disturbance at node `j` after recourse reacts (`N x N`).
    pub fn policy_pressure_response(
        &self,
        alpha: &DMatrix<f64>,
        beta: &DMatrix<f64>,
    ) -> DMatrix<f64> {
        let n = alpha.nrows();
        let net_inj = alpha - DMatrix::<f64>::identity(n, n);
        &self.grounded_inverse * net_inj - &self.pressure_wrt_regulation * beta
    }

    /// Flow response matrix of an affine recourse policy (`E x N`).
    pub fn policy_flow_response(
        &self,
        alpha: &DMatrix<f64>,
        beta: &DMatrix<f64>,
    ) -> DMatrix<f64> {
        let n = alpha.nrows();
        let net_inj = alpha - DMatrix::<f64>::identity(n, n);
        &self.flow_wrt_injection * net_inj - &self.flow_wrt_regulation * beta
    }
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
            pressure_max: 100.0,
            injection_min: -10.0,
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

    /// Two nodes, one pipe with `w = 1` carrying unit flow: every entry of
    /// the linearization and the response maps is computable by hand.
    #[test]
    fn single_pipe_values() {
        let net = GasNetwork {
            name: None,
            reference_node: 1,
            nodes: vec![node(1), node(2)],
            edges: vec![passive(1, 2, 1.0)],
            correlation: None,
        };
        net.validate().unwrap();
        let phi = DVector::from_vec(vec![1.0]);
        let pi = DVector::from_vec(vec![2.0, 1.0]);
        let kappa = DVector::from_vec(vec![0.0]);
        let lin = FlowLinearization::at(&net, &phi, &pi, &kappa).unwrap();

        assert_relative_eq!(lin.wrt_pressure[(0, 0)], 0.5);
        assert_relative_eq!(lin.wrt_pressure[(0, 1)], -0.5);
        assert_relative_eq!(lin.wrt_regulation[(0, 0)], 0.5);
        assert_relative_eq!(lin.offset[0], 0.5);
        // At an exact operating point the constant term is half the flow.
        assert_relative_eq!(lin.offset[0], phi[0] / 2.0);

        let maps = ResponseMaps::new(&net, &lin).unwrap();
        assert_relative_eq!(maps.laplacian[(0, 0)], 0.5);
        assert_relative_eq!(maps.laplacian[(0, 1)], -0.5);
        assert_relative_eq!(maps.laplacian[(1, 1)], 0.5);
        // Grounded at node 1 (index 0): only the non-reference diagonal
        // entry survives, and it inverts the 0.5 conductance.
        assert_relative_eq!(maps.grounded_inverse[(0, 0)], 0.0);
        assert_relative_eq!(maps.grounded_inverse[(0, 1)], 0.0);
        assert_relative_eq!(maps.grounded_inverse[(1, 0)], 0.0);
        assert_relative_eq!(maps.grounded_inverse[(1, 1)], 2.0);
        // Extra injection at node 2 pushes flow backward through the pipe.
        assert_relative_eq!(maps.flow_wrt_injection[(0, 0)], 0.0);
        assert_relative_eq!(maps.flow_wrt_injection[(0, 1)], -1.0);
        // A passive pipe has no regulation response.
        assert_relative_eq!(maps.flow_wrt_regulation[(0, 0)], 0.0, epsilon = 1e-15);
    }

    fn diamond_with_actuators() -> (GasNetwork, DVector<f64>, DVector<f64>, DVector<f64>) {
        // 4 nodes, 5 edges: a path 1-2-3-4 plus a compressor 2->4 and a
        // valve 3->2. The reference is node 1, away from actuated edges.
        let compressor = Edge {
            from: 2,
            to: 4,
            w: 2.0,
            kind: EdgeKind::Compressor,
            b: 0.5,
            kappa_min: 0.0,
            kappa_max: 5.0,
        };
        let valve = Edge {
            from: 3,
            to: 2,
            w: 1.5,
            kind: EdgeKind::Valve,
            b: 0.25,
            kappa_min: -4.0,
            kappa_max: 0.0,
        };
        let net = GasNetwork {
            name: None,
            reference_node: 1,
            nodes: vec![node(1), node(2), node(3), node(4)],
            edges: vec![
                passive(1, 2, 1.0),
                passive(2, 3, 2.0),
                passive(3, 4, 1.0),
                compressor,
                valve,
            ],
            correlation: None,
        };
        net.validate().unwrap();
        // Any nonzero flows work for the map identities; the point needs
        // no physical consistency for these tests.
        let phi = DVector::from_vec(vec![1.0, -0.5, 0.75, 0.6, -0.9]);
        let pi = DVector::from_vec(vec![25.0, 24.0, 24.5, 23.0]);
        let kappa = DVector::from_vec(vec![0.0, 0.0, 0.0, 2.0, -1.0]);
        (net, phi, pi, kappa)
    }

    #[test]
    fn laplacian_is_psd_with_ones_kernel() {
        let (net, phi, pi, kappa) = diamond_with_actuators();
        let lin = FlowLinearization::at(&net, &phi, &pi, &kappa).unwrap();
        let maps = ResponseMaps::new(&net, &lin).unwrap();
        let lap = &maps.laplacian;
        // Symmetry.
        assert_relative_eq!((lap - lap.transpose()).norm(), 0.0, epsilon = 1e-12);
        // The ones vector is in the kernel.
        let ones = DVector::from_element(4, 1.0);
        assert_relative_eq!((lap * &ones).norm(), 0.0, epsilon = 1e-12);
        // Eigenvalues nonnegative with exactly one (near-)zero.
        let eig = lap.clone().symmetric_eigen();
        let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(vals[0].abs() < 1e-12);
        assert!(vals[1] > 1e-6);
    }

    #[test]
    fn grounded_inverse_inverts_on_balanced_vectors() {
        let (net, phi, pi, kappa) = diamond_with_actuators();
        let lin = FlowLinearization::at(&net, &phi, &pi, &kappa).unwrap();
        let maps = ResponseMaps::new(&net, &lin).unwrap();
        // Any vector with zero total is reproduced by L * L_grounded^{-1}.
        let v = DVector::from_vec(vec![0.7, -1.3, 0.4, 0.2]);
        assert_relative_eq!(v.sum(), 0.0, epsilon = 1e-12);
        let back = &maps.laplacian * (&maps.grounded_inverse * &v);
        assert_relative_eq!((back - &v).norm(), 0.0, epsilon = 1e-10);
        // Reference row and column of the grounded inverse vanish.
        let r = net.reference_index();
        for i in 0..4 {
            assert_eq!(maps.grounded_inverse[(r, i)], 0.0);
            assert_eq!(maps.grounded_inverse[(i, r)], 0.0);
        }
    }

    /// The responded state conserves mass: for any injection/regulation
    /// change with matching totals, the flow change satisfies the nodal
    /// balance change exactly, and the reference pressure never moves.
    #[test]
    fn responses_conserve_mass_and_pin_reference() {
        let (net, phi, pi, kappa) = diamond_with_actuators();
        let lin = FlowLinearization::at(&net, &phi, &pi, &kappa).unwrap();
        let maps = ResponseMaps::new(&net, &lin).unwrap();
        let a = net.incidence();
        let b = net.control_incidence();

        let d_kappa = DVector::from_vec(vec![0.0, 0.0, 0.0, 0.8, -0.3]);
        let consumed = (&b * &d_kappa).sum();
        // Net injection change with total equal to the actuator consumption.
        let mut d_inj = DVector::from_vec(vec![0.4, -0.2, 0.5, 0.0]);
        let correction = (consumed - d_inj.sum()) / 4.0;
        for i in 0..4 {
            d_inj[i] += correction;
        }

        let d_phi = maps.flow_shift(&d_inj, &d_kappa);
        let d_pi = maps.pressure_shift(&d_inj, &d_kappa);
        // Nodal balance: A d_phi = d_inj - B d_kappa.
        let lhs = &a * &d_phi;
        let rhs = &d_inj - &b * &d_kappa;
        assert_relative_eq!((lhs - rhs).norm(), 0.0, epsilon = 1e-10);
        // The flow relation stays satisfied to first order.
        let predicted = lin.predict(&(&pi + &d_pi), &(&kappa + &d_kappa));
        assert_relative_eq!(((&phi + &d_phi) - predicted).norm(), 0.0, epsilon = 1e-10);
        // Reference pressure pinned.
        assert_eq!(d_pi[net.reference_index()], 0.0);
    }

    #[test]
    fn zero_flow_is_rejected() {
        let (net, mut phi, pi, kappa) = diamond_with_actuators();
        phi[2] = 0.0;
        match FlowLinearization::at(&net, &phi, &pi, &kappa) {
            Err(Error::DegenerateFlow(msg)) => assert!(msg.contains("[2]")),
            other => panic!("expected degenerate-flow error, got {other:?}"),
        }
    }
}
