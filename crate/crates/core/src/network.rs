//! Gas network description: topology, limits, costs, and uncertainty data.
//!
//! # Conventions
//!
//! The network is a connected directed graph. Edge direction fixes the sign
//! convention for flows: a positive flow moves from `from` to `to`. Passive
//! pipes may carry flow in either direction; *active* edges (compressors and
//! valves) are unidirectional and must carry nonnegative flow.
//!
//! All pressure-like quantities in the file and in this crate are **squared
//! pressures** (e.g. MPa^2): the steady-state gas-flow equations are
//! polynomial in squared pressure, so limits, regulation bounds, and state
//! variables are stored directly in that space. `pressure_min`/`pressure_max`
//! bound the squared nodal pressure; `kappa_min`/`kappa_max` bound the
//! squared-pressure boost (compressor, nonnegative) or drop (valve,
//! nonpositive) of an active edge.
//!
//! Two incidence-like matrices encode the topology:
//!
//! * [`GasNetwork::incidence`] builds `A` (nodes x edges): `+1` at the
//!   sending node of an edge, `-1` at the receiving node. Flow conservation
//!   at the nodes reads `A phi = theta - B kappa - delta`.
//! * [`GasNetwork::control_incidence`] builds `B` (nodes x edges): active
//!   edges consume gas at their sending node in proportion to the exercised
//!   regulation, `+b` for a compressor and `-b` for a valve (with valve
//!   regulation nonpositive, consumption is nonnegative in both cases).
//!   Passive columns are zero.
//!
//! Each node carries a stochastic extraction `delta + xi` where `xi` has zero
//! mean and standard deviation `extraction_stddev`; an optional `correlation`
//! block gives the correlation matrix across nodes. The reference node must
//! host no stochastic extraction and may not be an endpoint of an active
//! edge: its squared pressure anchors the network and must stay
//! deterministic.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet, VecDeque};
use std::path::Path;

/// Kind of a network edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    /// Ordinary pipe; bidirectional, no regulation.
    Passive,
    /// Compressor; boosts squared pressure (`kappa >= 0`), flow must be
    /// nonnegative.
    Compressor,
    /// Pressure-regulation valve; drops squared pressure (`kappa <= 0`),
    /// flow must be nonnegative.
    Valve,
}

impl EdgeKind {
    /// Whether the edge carries an actuator (compressor or valve).
    pub fn is_active(self) -> bool {
        self != EdgeKind::Passive
    }
}

/// One network node with its limits, costs, and extraction statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: u32,
    /// Lower bound on squared pressure.
    pub pressure_min: f64,
    /// Upper bound on squared pressure.
    pub pressure_max: f64,
    /// Lower bound on gas injection.
    pub injection_min: f64,
    /// Upper bound on gas injection.
    pub injection_max: f64,
    /// Linear injection cost coefficient.
    pub cost_linear: f64,
    /// Quadratic injection cost coefficient (must be nonnegative).
    pub cost_quadratic: f64,
    /// Mean gas extraction at this node.
    pub extraction_mean: f64,
    /// Standard deviation of the extraction forecast error.
    pub extraction_stddev: f64,
}

/// One network edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    /// Id of the sending node.
    pub from: u32,
    /// Id of the receiving node.
    pub to: u32,
    /// Weymouth conductance: `phi |phi| = w (drop in squared pressure +
    /// regulation)`. Must be positive.
    pub w: f64,
    pub kind: EdgeKind,
    /// Gas consumption per unit of exercised regulation (active edges only).
    #[serde(default)]
    pub b: f64,
    /// Lower regulation bound (squared-pressure units).
    #[serde(default)]
    pub kappa_min: f64,
    /// Upper regulation bound (squared-pressure units).
    #[serde(default)]
    pub kappa_max: f64,
}

/// A validated gas network.
///
/// Node and edge order in the file fixes the index order used by every
/// vector and matrix in this crate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GasNetwork {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Id of the reference (slack-pressure) node.
    pub reference_node: u32,
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
    /// Optional extraction-error correlation matrix (row-major, node order).
    /// Identity when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correlation: Option<Vec<Vec<f64>>>,
}

impl GasNetwork {
    /// Parses and validates a network from JSON text.
    pub fn from_json(text: &str) -> Result<Self> {
        let net: GasNetwork =
            serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        net.validate()?;
        Ok(net)
    }

    /// Loads and validates a network file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    /// Serializes the network back to its file form (stable field order, so
    /// repeated saves of the same network are byte-identical).
    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("network serializes");
        out.push('\n');
        out
    }

    /// Validates and writes the network to a file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.validate()?;
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// Index of a node id in file order.
    pub fn node_index(&self, id: u32) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    /// Index of the reference node.
    pub fn reference_index(&self) -> usize {
        self.node_index(self.reference_node)
            .expect("validated network has a reference node")
    }

    /// Indices of active (compressor or valve) edges, in file order.
    pub fn active_indices(&self) -> Vec<usize> {
        self.edges
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind != EdgeKind::Passive)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn compressor_indices(&self) -> Vec<usize> {
        self.edges
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == EdgeKind::Compressor)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn valve_indices(&self) -> Vec<usize> {
        self.edges
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == EdgeKind::Valve)
            .map(|(i, _)| i)
            .collect()
    }

    /// Node-edge incidence matrix `A`: `+1` at the sending node, `-1` at the
    /// receiving node of each edge.
    pub fn incidence(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.n_nodes(), self.n_edges());
        for (l, e) in self.edges.iter().enumerate() {
            let i = self.node_index(e.from).expect("validated endpoint");
            let j = self.node_index(e.to).expect("validated endpoint");
            a[(i, l)] = 1.0;
            a[(j, l)] = -1.0;
        }
        a
    }

    /// Regulation-consumption incidence `B`: `+b` (compressor) or `-b`
    /// (valve) at the sending node of each active edge, zero elsewhere.
    /// With sign-correct regulation (`kappa >= 0` on compressors, `<= 0` on
    /// valves) the consumption `B kappa` is elementwise nonnegative.
    pub fn control_incidence(&self) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(self.n_nodes(), self.n_edges());
        for (l, e) in self.edges.iter().enumerate() {
            let i = self.node_index(e.from).expect("validated endpoint");
            match e.kind {
                EdgeKind::Passive => {}
                EdgeKind::Compressor => b[(i, l)] = e.b,
                EdgeKind::Valve => b[(i, l)] = -e.b,
            }
        }
        b
    }

    pub fn pressure_min(&self) -> DVector<f64> {
        DVector::from_iterator(self.n_nodes(), self.nodes.iter().map(|n| n.pressure_min))
    }

    pub fn pressure_max(&self) -> DVector<f64> {
        DVector::from_iterator(self.n_nodes(), self.nodes.iter().map(|n| n.pressure_max))
    }

    pub fn injection_min(&self) -> DVector<f64> {
        DVector::from_iterator(self.n_nodes(), self.nodes.iter().map(|n| n.injection_min))
    }

    pub fn injection_max(&self) -> DVector<f64> {
        DVector::from_iterator(self.n_nodes(), self.nodes.iter().map(|n| n.injection_max))
    }

    pub fn regulation_min(&self) -> DVector<f64> {
        DVector::from_iterator(self.n_edges(), self.edges.iter().map(|e| e.kappa_min))
    }

    pub fn regulation_max(&self) -> DVector<f64> {
        DVector::from_iterator(self.n_edges(), self.edges.iter().map(|e| e.kappa_max))
    }

    /// Lower and upper regulation bounds as one pair.
    pub fn regulation_bounds(&self) -> (DVector<f64>, DVector<f64>) {
        (self.regulation_min(), self.regulation_max())
    }

    pub fn cost_linear(&self) -> DVector<f64> {
        DVector::from_iterator(self.n_nodes(), self.nodes.iter().map(|n| n.cost_linear))
    }

    pub fn cost_quadratic(&self) -> DVector<f64> {
        DVector::from_iterator(self.n_nodes(), self.nodes.iter().map(|n| n.cost_quadratic))
    }

    pub fn extraction_mean(&self) -> DVector<f64> {
        DVector::from_iterator(self.n_nodes(), self.nodes.iter().map(|n| n.extraction_mean))
    }

    pub fn extraction_stddev(&self) -> DVector<f64> {
        DVector::from_iterator(self.n_nodes(), self.nodes.iter().map(|n| n.extraction_stddev))
    }

    pub fn weymouth_coeff(&self) -> DVector<f64> {
        DVector::from_iterator(self.n_edges(), self.edges.iter().map(|e| e.w))
    }

    /// Extraction-error correlation matrix (identity when the file has no
    /// `correlation` block).
    pub fn correlation_matrix(&self) -> DMatrix<f64> {
        let n = self.n_nodes();
        match &self.correlation {
            None => DMatrix::identity(n, n),
            Some(rows) => {
                let mut c = DMatrix::zeros(n, n);
                for (i, row) in rows.iter().enumerate() {
                    for (j, v) in row.iter().enumerate() {
                        c[(i, j)] = *v;
                    }
                }
                c
            }
        }
    }

    /// Structural validation. Called by every loader; callers constructing
    /// networks programmatically should call it before use.
    pub fn validate(&self) -> Result<()> {
        let fail = |message: String| Err(Error::Validation { message });

        if self.nodes.is_empty() {
            return fail("network has no nodes".into());
        }
        let mut seen = HashSet::new();
        for n in &self.nodes {
            if !seen.insert(n.id) {
                return fail(format!("duplicate node id {}", n.id));
            }
            if !(n.pressure_min >= 0.0 && n.pressure_min <= n.pressure_max) {
                return fail(format!(
                    "node {}: need 0 <= pressure_min <= pressure_max",
                    n.id
                ));
            }
            if n.injection_min > n.injection_max {
                return fail(format!("node {}: injection_min > injection_max", n.id));
            }
            if n.cost_quadratic < 0.0 {
                return fail(format!("node {}: cost_quadratic must be >= 0", n.id));
            }
            if n.extraction_stddev < 0.0 {
                return fail(format!("node {}: extraction_stddev must be >= 0", n.id));
            }
            if !(n.pressure_min.is_finite()
                && n.pressure_max.is_finite()
                && n.injection_min.is_finite()
                && n.injection_max.is_finite()
                && n.cost_linear.is_finite()
                && n.cost_quadratic.is_finite()
                && n.extraction_mean.is_finite()
                && n.extraction_stddev.is_finite())
            {
                return fail(format!("node {}: non-finite field", n.id));
            }
        }

        let Some(ref_idx) = self.node_index(self.reference_node) else {
            return fail(format!(
                "reference_node {} is not a node id",
                self.reference_node
            ));
        };
        if self.nodes[ref_idx].extraction_stddev != 0.0 {
            return fail(format!(
                "reference node {} must have zero extraction_stddev",
                self.reference_node
            ));
        }

        for (l, e) in self.edges.iter().enumerate() {
            let label = format!("edge {} ({} -> {})", l, e.from, e.to);
            if self.node_index(e.from).is_none() || self.node_index(e.to).is_none() {
                return fail(format!("{label}: unknown endpoint"));
            }
            if e.from == e.to {
                return fail(format!("{label}: self-loop"));
            }
            if !(e.w > 0.0 && e.w.is_finite()) {
                return fail(format!("{label}: w must be positive"));
            }
            if e.kappa_min > e.kappa_max {
                return fail(format!("{label}: kappa_min > kappa_max"));
            }
            match e.kind {
                EdgeKind::Passive => {
                    if e.b != 0.0 || e.kappa_min != 0.0 || e.kappa_max != 0.0 {
                        return fail(format!(
                            "{label}: passive edges must have b = kappa_min = kappa_max = 0"
                        ));
                    }
                }
                EdgeKind::Compressor => {
                    if e.b <= 0.0 {
                        return fail(format!("{label}: compressor needs b > 0"));
                    }
                    if e.kappa_min < 0.0 {
                        return fail(format!("{label}: compressor needs kappa_min >= 0"));
                    }
                }
                EdgeKind::Valve => {
                    if e.b <= 0.0 {
                        return fail(format!("{label}: valve needs b > 0"));
                    }
                    if e.kappa_max > 0.0 {
                        return fail(format!("{label}: valve needs kappa_max <= 0"));
                    }
                }
            }
            if e.kind != EdgeKind::Passive
                && (e.from == self.reference_node || e.to == self.reference_node)
            {
                return fail(format!(
                    "{label}: active edges may not touch the reference node"
                ));
            }
        }

        // Connectivity (undirected reachability from node 0).
        let n = self.n_nodes();
        let mut adj: HashMap<usize, Vec<usize>> = HashMap::new();
        for e in &self.edges {
            let i = self.node_index(e.from).unwrap();
            let j = self.node_index(e.to).unwrap();
            adj.entry(i).or_default().push(j);
            adj.entry(j).or_default().push(i);
        }
        let mut reached = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        reached[0] = true;
        while let Some(i) = queue.pop_front() {
            for &j in adj.get(&i).into_iter().flatten() {
                if !reached[j] {
                    reached[j] = true;
                    queue.push_back(j);
                }
            }
        }
        if let Some(i) = reached.iter().position(|r| !r) {
            return fail(format!(
                "network is disconnected: node {} unreachable",
                self.nodes[i].id
            ));
        }

        if let Some(rows) = &self.correlation {
            if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                return fail(format!("correlation must be {n} x {n}"));
            }
            for i in 0..n {
                if (rows[i][i] - 1.0).abs() > 1e-12 {
                    return fail("correlation diagonal must be 1".into());
                }
                for j in 0..n {
                    if !rows[i][j].is_finite() || rows[i][j].abs() > 1.0 + 1e-12 {
                        return fail(format!("correlation entry ({i},{j}) out of [-1,1]"));
                    }
                    if (rows[i][j] - rows[j][i]).abs() > 1e-12 {
                        return fail("correlation must be symmetric".into());
                    }
                }
            }
        }

        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo_json() -> String {
        r#"{
            "name": "demo",
            "reference_node": 1,
            "nodes": [
                {"id": 1, "pressure_min": 1.0, "pressure_max": 9.0,
                 "injection_min": 0.0, "injection_max": 10.0,
                 "cost_linear": 2.0, "cost_quadratic": 0.1,
                 "extraction_mean": 0.0, "extraction_stddev": 0.0},
                {"id": 2, "pressure_min": 1.0, "pressure_max": 9.0,
                 "injection_min": 0.0, "injection_max": 0.0,
                 "cost_linear": 0.0, "cost_quadratic": 0.0,
                 "extraction_mean": 1.0, "extraction_stddev": 0.1},
                {"id": 3, "pressure_min": 1.0, "pressure_max": 9.0,
                 "injection_min": 0.0, "injection_max": 5.0,
                 "cost_linear": 4.0, "cost_quadratic": 0.0,
                 "extraction_mean": 0.5, "extraction_stddev": 0.05}
            ],
            "edges": [
                {"from": 1, "to": 2, "w": 1.0, "kind": "passive"},
                {"from": 2, "to": 3, "w": 2.0, "kind": "compressor",
                 "b": 0.02, "kappa_min": 0.0, "kappa_max": 2.0},
                {"from": 2, "to": 3, "w": 1.5, "kind": "valve",
                 "b": 0.01, "kappa_min": -1.0, "kappa_max": 0.0}
            ]
        }"#
        .to_string()
    }

    #[test]
    fn loads_and_roundtrips() {
        let net = GasNetwork::from_json(&demo_json()).unwrap();
        assert_eq!(net.n_nodes(), 3);
        assert_eq!(net.n_edges(), 3);
        assert_eq!(net.reference_index(), 0);
        let again = GasNetwork::from_json(&net.to_json()).unwrap();
        assert_eq!(net, again);
        // Serialization is stable byte-for-byte.
        assert_eq!(net.to_json(), again.to_json());
    }

    #[test]
    fn incidence_columns_sum_to_zero() {
        let net = GasNetwork::from_json(&demo_json()).unwrap();
        let a = net.incidence();
        for l in 0..net.n_edges() {
            assert_eq!(a.column(l).sum(), 0.0);
            assert_eq!(a.column(l).iter().filter(|v| **v != 0.0).count(), 2);
        }
        // Edge 0 goes node 1 -> node 2 (indices 0 -> 1).
        assert_eq!(a[(0, 0)], 1.0);
        assert_eq!(a[(1, 0)], -1.0);
    }

    #[test]
    fn control_incidence_signs() {
        let net = GasNetwork::from_json(&demo_json()).unwrap();
        let b = net.control_incidence();
        // Passive column empty.
        assert_eq!(b.column(0).amax(), 0.0);
        // Compressor: +b at sending node (node 2, index 1).
        assert_eq!(b[(1, 1)], 0.02);
        // Valve: -b at sending node.
        assert_eq!(b[(1, 2)], -0.01);
        // Sign-correct regulation consumes gas at the sending node.
        let kappa = DVector::from_vec(vec![0.0, 1.5, -0.5]);
        let consumption = &b * &kappa;
        assert!(consumption.iter().all(|c| *c >= 0.0));
        assert!(consumption[1] > 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let cases: Vec<(&str, Box<dyn Fn(&mut GasNetwork)>)> = vec![
            ("duplicate id", Box::new(|n| n.nodes[1].id = 1)),
            ("bad reference", Box::new(|n| n.reference_node = 99)),
            (
                "stochastic reference",
                Box::new(|n| n.nodes[0].extraction_stddev = 0.1),
            ),
            ("self loop", Box::new(|n| n.edges[0].to = 1)),
            ("nonpositive w", Box::new(|n| n.edges[0].w = 0.0)),
            (
                "compressor negative kappa_min",
                Box::new(|n| n.edges[1].kappa_min = -1.0),
            ),
            (
                "valve positive kappa_max",
                Box::new(|n| n.edges[2].kappa_max = 0.5),
            ),
            (
                "active at reference",
                Box::new(|n| n.edges[1].from = 1),
            ),
            (
                "passive with regulation",
                Box::new(|n| n.edges[0].kappa_max = 1.0),
            ),
            (
                "pressure bounds crossed",
                Box::new(|n| n.nodes[0].pressure_min = 10.0),
            ),
            (
                "quadratic cost negative",
                Box::new(|n| n.nodes[0].cost_quadratic = -1.0),
            ),
        ];
        for (what, mutate) in cases {
            let mut net = GasNetwork::from_json(&demo_json()).unwrap();
            mutate(&mut net);
            assert!(net.validate().is_err(), "expected rejection: {what}");
        }
    }

    #[test]
    fn rejects_disconnected() {
        let mut net = GasNetwork::from_json(&demo_json()).unwrap();
        net.edges.clear();
        assert!(net.validate().is_err());
    }

    #[test]
    fn correlation_checks() {
        let mut net = GasNetwork::from_json(&demo_json()).unwrap();
        net.correlation = Some(vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.3],
            vec![0.0, 0.3, 1.0],
        ]);
        net.validate().unwrap();
        let c = net.correlation_matrix();
        assert_eq!(c[(1, 2)], 0.3);

        net.correlation = Some(vec![
            vec![1.0, 0.0, 0.1],
            vec![0.0, 1.0, 0.3],
            vec![0.0, 0.3, 1.0],
        ]);
        assert!(net.validate().is_err(), "asymmetry rejected");
    }
}
