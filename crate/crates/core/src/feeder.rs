//! Radial feeder topology and the path-impedance sensitivity kernel.
//!
//! Under the linearized branch-flow model the squared voltage at node `i` is
//!
//! ```text
//! v_i = v0 + sum_j (R_ij * p_j + X_ij * q_j)
//! ```
//!
//! where `R_ij` (`X_ij`) is twice the resistance (reactance) of the branches
//! shared by the root paths of `i` and `j`.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeRole {
    /// PV inverter behind a voltage-driven ON/OFF interruption mechanism.
    SwitchedPv,
    FixedLoad,
    /// Generation without voltage protection (always connected).
    FixedInjection,
}

impl NodeRole {
    pub fn is_switched(self) -> bool {
        matches!(self, NodeRole::SwitchedPv)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NodeRole::SwitchedPv => "switched-pv",
            NodeRole::FixedLoad => "fixed-load",
            NodeRole::FixedInjection => "fixed-injection",
        }
    }
}

impl fmt::Display for NodeRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Node {
    pub id: String,
    pub role: NodeRole,
    pub phase: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Branch {
    pub from: String,
    pub to: String,
    pub r: f64,
    pub x: f64,
}

/// Permissible squared-voltage interval `[v_min, v_max]` (per-unit²).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VoltageBand {
    v_min: f64,
    v_max: f64,
}

impl VoltageBand {
    /// Band from squared limits.
    pub fn new(v_min: f64, v_max: f64) -> Result<Self> {
        if !(v_min > 0.0 && v_min < v_max && v_max.is_finite()) {
            return Err(Error::InvalidBand { v_min, v_max });
        }
        Ok(VoltageBand { v_min, v_max })
    }

    /// Band from voltage magnitudes in per-unit; squared internally.
    pub fn from_pu(v_min_pu: f64, v_max_pu: f64) -> Result<Self> {
        if !(v_min_pu > 0.0) {
            return Err(Error::InvalidBand { v_min: v_min_pu, v_max: v_max_pu });
        }
        Self::new(v_min_pu * v_min_pu, v_max_pu * v_max_pu)
    }

    pub fn v_min(&self) -> f64 {
        self.v_min
    }

    pub fn v_max(&self) -> f64 {
        self.v_max
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.v_max + self.v_min)
    }

    pub fn half_width(&self) -> f64 {
        0.5 * (self.v_max - self.v_min)
    }

    /// Closed-interval membership.
    pub fn contains(&self, v: f64) -> bool {
        self.v_min <= v && v <= self.v_max
    }

    /// Same center, half-width multiplied by `factor`.
    pub fn scaled_width(&self, factor: f64) -> Result<Self> {
        let c = self.center();
        let h = self.half_width() * factor;
        Self::new(c - h, c + h)
    }
}

impl Default for VoltageBand {
    /// 0.9 to 1.1 per-unit.
    fn default() -> Self {
        VoltageBand::from_pu(0.9, 1.1).expect("static band")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandDocument {
    pub v_min_pu: f64,
    pub v_max_pu: f64,
}

/// On-disk feeder description (JSON).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeederDocument {
    pub nodes: Vec<Node>,
    pub branches: Vec<Branch>,
    pub reference: String,
    pub v0: f64,
    pub band: BandDocument,
}

/// Validated radial feeder. Nodes are indexed densely `0..n` in document
/// order; the reference bus has no index.
#[derive(Clone, Debug)]
pub struct FeederModel {
    nodes: Vec<Node>,
    branches: Vec<Branch>,
    reference: String,
    reference_v0: f64,
    band: VoltageBand,
    index: HashMap<String, usize>,
    // None means the parent is the reference bus.
    parent: Vec<Option<usize>>,
    up_r: Vec<f64>,
    up_x: Vec<f64>,
}

impl FeederModel {
    pub fn new(
        nodes: Vec<Node>,
        branches: Vec<Branch>,
        reference: impl Into<String>,
        reference_v0: f64,
        band: VoltageBand,
    ) -> Result<Self> {
        let reference = reference.into();
        if !(reference_v0 > 0.0 && reference_v0.is_finite()) {
            return Err(Error::InvalidArgument(format!("reference v0 must be positive, got {reference_v0}")));
        }

        let mut index = HashMap::with_capacity(nodes.len());
        for (i, node) in nodes.iter().enumerate() {
            if node.id == reference {
                return Err(Error::parse(format!("nodes[{i}]"), format!("reference bus {reference} must not be listed as a node")));
            }
            if index.insert(node.id.clone(), i).is_some() {
                return Err(Error::parse(format!("nodes[{i}].id"), format!("duplicate node id {}", node.id)));
            }
        }
        let n = nodes.len();
        // Reference bus gets slot n in the union-find and adjacency lists.
        let slot = |id: &str, field: &str, k: usize| -> Result<usize> {
            if id == reference {
                Ok(n)
            } else {
                index.get(id).copied().ok_or_else(|| Error::parse(format!("branches[{k}].{field}"), format!("unknown node id {id}")))
            }
        };

        let mut uf: Vec<usize> = (0..=n).collect();
        fn find(uf: &mut [usize], mut a: usize) -> usize {
            while uf[a] != a {
                uf[a] = uf[uf[a]];
                a = uf[a];
            }
            a
        }
        let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n + 1];
        for (k, b) in branches.iter().enumerate() {
            let (from, to) = (slot(&b.from, "from", k)?, slot(&b.to, "to", k)?);
            if !(b.r.is_finite() && b.x.is_finite()) {
                return Err(Error::parse(format!("branches[{k}]"), "non-finite impedance"));
            }
            if b.r < 0.0 || b.x < 0.0 {
                return Err(Error::NegativeImpedance { from: b.from.clone(), to: b.to.clone(), r: b.r, x: b.x });
            }
            let (ra, rb) = (find(&mut uf, from), find(&mut uf, to));
            if ra == rb {
                return Err(Error::CycleDetected { from: b.from.clone(), to: b.to.clone() });
            }
            uf[ra] = rb;
            adj[from].push((to, k));
            adj[to].push((from, k));
        }

        let mut parent = vec![None; n];
        let mut up_r = vec![0.0; n];
        let mut up_x = vec![0.0; n];
        let mut seen = vec![false; n + 1];
        seen[n] = true;
        let mut queue = VecDeque::from([n]);
        while let Some(u) = queue.pop_front() {
            for &(w, k) in &adj[u] {
                if seen[w] {
                    continue;
                }
                seen[w] = true;
                parent[w] = if u == n { None } else { Some(u) };
                up_r[w] = branches[k].r;
                up_x[w] = branches[k].x;
                queue.push_back(w);
            }
        }
        if let Some(i) = (0..n).find(|&i| !seen[i]) {
            return Err(Error::Disconnected(nodes[i].id.clone()));
        }

        Ok(FeederModel { nodes, branches, reference, reference_v0, band, index, parent, up_r, up_x })
    }

    pub fn from_document(doc: FeederDocument) -> Result<Self> {
        let band = VoltageBand::from_pu(doc.band.v_min_pu, doc.band.v_max_pu)?;
        FeederModel::new(doc.nodes, doc.branches, doc.reference, doc.v0, band)
    }

    pub fn from_json_str(text: &str, context: &str) -> Result<Self> {
        let doc: FeederDocument = serde_json::from_str(text).map_err(|e| Error::parse(context, e.to_string()))?;
        FeederModel::from_document(doc)
    }

    pub fn to_document(&self) -> FeederDocument {
        FeederDocument {
            nodes: self.nodes.clone(),
            branches: self.branches.clone(),
            reference: self.reference.clone(),
            v0: self.reference_v0,
            band: BandDocument { v_min_pu: self.band.v_min.sqrt(), v_max_pu: self.band.v_max.sqrt() },
        }
    }

    pub fn n(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn reference(&self) -> &str {
        &self.reference
    }

    pub fn reference_v0(&self) -> f64 {
        self.reference_v0
    }

    pub fn band(&self) -> VoltageBand {
        self.band
    }

    pub fn node_ids(&self) -> Vec<String> {
        self.nodes.iter().map(|n| n.id.clone()).collect()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn parent(&self, i: usize) -> Option<usize> {
        self.parent[i]
    }

    pub fn switched_mask(&self) -> Vec<bool> {
        self.nodes.iter().map(|n| n.role.is_switched()).collect()
    }

    pub fn with_v0(&self, v0: f64) -> Result<Self> {
        if !(v0 > 0.0 && v0.is_finite()) {
            return Err(Error::InvalidArgument(format!("v0 must be positive, got {v0}")));
        }
        let mut out = self.clone();
        out.reference_v0 = v0;
        Ok(out)
    }

    pub fn with_band(&self, band: VoltageBand) -> Self {
        let mut out = self.clone();
        out.band = band;
        out
    }

    /// SHA-256 over the canonical JSON form, hex encoded.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_vec(&self.to_document()).expect("feeder serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Reads and validates a feeder document from disk.
pub fn parse_feeder(path: impl AsRef<Path>) -> Result<FeederModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    FeederModel::from_json_str(&text, &path.display().to_string())
}

/// Path-impedance matrices over the non-reference nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityMatrices {
    pub r: DMatrix<f64>,
    pub x: DMatrix<f64>,
}

impl SensitivityMatrices {
    pub fn n(&self) -> usize {
        self.r.nrows()
    }
}

/// `R_ij = 2 * sum(r)` over branches common to the root paths of `i` and
/// `j`; likewise for `X`.
pub fn path_impedances(model: &FeederModel) -> SensitivityMatrices {
    let n = model.n();
    let mut r = DMatrix::zeros(n, n);
    let mut x = DMatrix::zeros(n, n);
    let mut on_path = vec![false; n];
    for i in 0..n {
        on_path.iter_mut().for_each(|b| *b = false);
        let mut k = Some(i);
        while let Some(u) = k {
            on_path[u] = true;
            k = model.parent[u];
        }
        for j in 0..=i {
            let (mut sr, mut sx) = (0.0, 0.0);
            let mut k = Some(j);
            while let Some(u) = k {
                if on_path[u] {
                    sr += model.up_r[u];
                    sx += model.up_x[u];
                }
                k = model.parent[u];
            }
            r[(i, j)] = 2.0 * sr;
            r[(j, i)] = 2.0 * sr;
            x[(i, j)] = 2.0 * sx;
            x[(j, i)] = 2.0 * sx;
        }
    }
    SensitivityMatrices { r, x }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain_json(extra_branch: &str, r01: f64) -> String {
        format!(
            r#"{{
  "nodes": [
    {{"id": "1", "role": "switched-pv", "phase": "a"}},
    {{"id": "2", "role": "fixed-load", "phase": "a"}}
  ],
  "branches": [
    {{"from": "0", "to": "1", "r": {r01}, "x": 0.2}},
    {{"from": "1", "to": "2", "r": 0.05, "x": 0.1}}{extra_branch}
  ],
  "reference": "0",
  "v0": 1.0,
  "band": {{"v_min_pu": 0.9, "v_max_pu": 1.1}}
}}"#
        )
    }

    #[test]
    fn parses_three_node_chain() {
        let m = FeederModel::from_json_str(&chain_json("", 0.1), "chain").unwrap();
        assert_eq!(m.n(), 2);
        assert_eq!(m.branches().len(), 2);
        assert_eq!(m.reference(), "0");
        assert_eq!(m.parent(0), None);
        assert_eq!(m.parent(1), Some(0));
        assert!((m.band().v_min() - 0.81).abs() < 1e-15);
        assert!((m.band().v_max() - 1.21).abs() < 1e-15);
        assert_eq!(m.switched_mask(), vec![true, false]);
    }

    #[test]
    fn duplicate_branch_is_a_cycle() {
        let extra = r#", {"from": "1", "to": "2", "r": 0.05, "x": 0.1}"#;
        let err = FeederModel::from_json_str(&chain_json(extra, 0.1), "dup").unwrap_err();
        assert!(matches!(err, Error::CycleDetected { .. }), "{err}");
    }

    #[test]
    fn negative_resistance_rejected() {
        let err = FeederModel::from_json_str(&chain_json("", -0.1), "neg").unwrap_err();
        assert!(matches!(err, Error::NegativeImpedance { .. }), "{err}");
    }

    #[test]
    fn unknown_keys_rejected_with_location() {
        let text = chain_json("", 0.1).replace("\"v0\"", "\"vzero\"");
        let err = FeederModel::from_json_str(&text, "f.json").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("f.json") && msg.contains("line"), "{msg}");
    }

    #[test]
    fn disconnected_node_detected() {
        let nodes = vec![
            Node { id: "1".into(), role: NodeRole::SwitchedPv, phase: "a".into() },
            Node { id: "2".into(), role: NodeRole::SwitchedPv, phase: "a".into() },
        ];
        let branches = vec![Branch { from: "0".into(), to: "1".into(), r: 0.1, x: 0.1 }];
        let err = FeederModel::new(nodes, branches, "0", 1.0, VoltageBand::default()).unwrap_err();
        assert!(matches!(err, Error::Disconnected(ref id) if id == "2"));
    }

    #[test]
    fn chain_path_impedances() {
        let m = FeederModel::from_json_str(&chain_json("", 0.1), "chain").unwrap();
        let s = path_impedances(&m);
        assert!((s.r[(0, 0)] - 0.2).abs() < 1e-15);
        assert!((s.r[(1, 1)] - 0.3).abs() < 1e-15);
        assert!((s.x[(1, 1)] - 0.6).abs() < 1e-15);
        assert!((s.r[(0, 1)] - 0.2).abs() < 1e-15);
        assert_eq!(s.r[(0, 1)], s.r[(1, 0)]);
    }

    #[test]
    fn band_derived_quantities() {
        let b = VoltageBand::from_pu(0.9, 1.1).unwrap();
        assert!((b.center() - 1.01).abs() < 1e-15);
        assert!((b.half_width() - 0.2).abs() < 1e-15);
        assert!(b.contains(1.21) && b.contains(0.81) && !b.contains(1.2100001));
        assert!(VoltageBand::new(1.0, 0.9).is_err());
        assert!(VoltageBand::new(0.0, 0.9).is_err());
    }
}
