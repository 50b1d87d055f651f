//! Pose-graph data model.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use nalgebra::Matrix6;

use crate::error::{Error, Result};
use crate::se3::{Pose, PI_TOLERANCE};

pub type VariableId = usize;
pub type Information = Matrix6<f64>;

#[derive(Clone, Debug, PartialEq)]
pub struct PoseVariable {
    pub id: VariableId,
    pub estimate: Pose,
    pub fixed: bool,
    /// Scratch flag used by the breadth-first partitioner.
    pub visited: bool,
}

impl PoseVariable {
    pub fn new(id: VariableId, estimate: Pose) -> Self {
        Self {
            id,
            estimate,
            fixed: false,
            visited: false,
        }
    }
}

/// Relative measurement: `measurement` is the pose of `to` in the frame of `from`.
///
/// The weight is stored as an information matrix in `(translation, rotation)`
/// tangent ordering.
#[derive(Clone, Debug, PartialEq)]
pub struct Edge {
    pub from: VariableId,
    pub to: VariableId,
    pub measurement: Pose,
    pub information: Information,
}

impl Edge {
    pub fn new(from: VariableId, to: VariableId, measurement: Pose, information: Information) -> Self {
        Self {
            from,
            to,
            measurement,
            information,
        }
    }

    pub fn other(&self, id: VariableId) -> VariableId {
        if self.from == id {
            self.to
        } else {
            self.from
        }
    }

    pub fn touches(&self, id: VariableId) -> bool {
        self.from == id || self.to == id
    }
}

/// Undirected adjacency: for every variable, the incident `(edge index, neighbor)` pairs.
pub type Adjacency = HashMap<VariableId, Vec<(usize, VariableId)>>;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PoseGraph {
    variables: BTreeMap<VariableId, PoseVariable>,
    edges: Vec<Edge>,
}

impl PoseGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_variable(&mut self, id: VariableId, estimate: Pose) -> Result<()> {
        if self.variables.contains_key(&id) {
            return Err(Error::Parse {
                line: 0,
                reason: format!("duplicate variable id {id}"),
            });
        }
        self.variables.insert(id, PoseVariable::new(id, estimate));
        Ok(())
    }

    /// Inserts or replaces a variable.
    pub fn insert_variable(&mut self, var: PoseVariable) {
        self.variables.insert(var.id, var);
    }

    pub fn add_edge(&mut self, edge: Edge) -> Result<usize> {
        for id in [edge.from, edge.to] {
            if !self.variables.contains_key(&id) {
                return Err(Error::UnknownVariable(id));
            }
        }
        if edge.from == edge.to {
            return Err(Error::Parse {
                line: 0,
                reason: format!("self-loop on variable {}", edge.from),
            });
        }
        self.edges.push(edge);
        Ok(self.edges.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.variables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variables.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edges_mut(&mut self) -> &mut [Edge] {
        &mut self.edges
    }

    pub fn variables(&self) -> impl Iterator<Item = &PoseVariable> {
        self.variables.values()
    }

    pub fn variables_mut(&mut self) -> impl Iterator<Item = &mut PoseVariable> {
        self.variables.values_mut()
    }

    /// Variable ids in ascending order.
    pub fn ids(&self) -> impl Iterator<Item = VariableId> + '_ {
        self.variables.keys().copied()
    }

    pub fn contains(&self, id: VariableId) -> bool {
        self.variables.contains_key(&id)
    }

    pub fn variable(&self, id: VariableId) -> Option<&PoseVariable> {
        self.variables.get(&id)
    }

    pub fn variable_mut(&mut self, id: VariableId) -> Option<&mut PoseVariable> {
        self.variables.get_mut(&id)
    }

    /// Panics if `id` is not in the graph.
    pub fn estimate(&self, id: VariableId) -> &Pose {
        &self.variables[&id].estimate
    }

    pub fn set_estimate(&mut self, id: VariableId, pose: Pose) {
        if let Some(v) = self.variables.get_mut(&id) {
            v.estimate = pose;
        }
    }

    pub fn is_fixed(&self, id: VariableId) -> bool {
        self.variables.get(&id).is_some_and(|v| v.fixed)
    }

    pub fn set_fixed(&mut self, id: VariableId, fixed: bool) {
        if let Some(v) = self.variables.get_mut(&id) {
            v.fixed = fixed;
        }
    }

    pub fn fixed_ids(&self) -> BTreeSet<VariableId> {
        self.variables
            .values()
            .filter(|v| v.fixed)
            .map(|v| v.id)
            .collect()
    }

    pub fn free_ids(&self) -> BTreeSet<VariableId> {
        self.variables
            .values()
            .filter(|v| !v.fixed)
            .map(|v| v.id)
            .collect()
    }

    pub fn clear_visited(&mut self) {
        for v in self.variables.values_mut() {
            v.visited = false;
        }
    }

    pub fn adjacency(&self) -> Adjacency {
        let mut adj: Adjacency = self.variables.keys().map(|&id| (id, Vec::new())).collect();
        for (k, e) in self.edges.iter().enumerate() {
            adj.entry(e.from).or_default().push((k, e.to));
            adj.entry(e.to).or_default().push((k, e.from));
        }
        adj
    }

    pub fn degrees(&self) -> HashMap<VariableId, usize> {
        let mut deg: HashMap<VariableId, usize> = self.variables.keys().map(|&id| (id, 0)).collect();
        for e in &self.edges {
            *deg.entry(e.from).or_default() += 1;
            *deg.entry(e.to).or_default() += 1;
        }
        deg
    }

    /// Partition of the variable ids by undirected edge connectivity, each set
    /// ordered by its smallest id.
    pub fn connected_components(&self) -> Vec<BTreeSet<VariableId>> {
        let adj = self.adjacency();
        let mut seen: BTreeSet<VariableId> = BTreeSet::new();
        let mut out = Vec::new();
        for &start in self.variables.keys() {
            if !seen.insert(start) {
                continue;
            }
            let mut comp = BTreeSet::from([start]);
            let mut queue = VecDeque::from([start]);
            while let Some(u) = queue.pop_front() {
                for &(_, w) in &adj[&u] {
                    if seen.insert(w) {
                        comp.insert(w);
                        queue.push_back(w);
                    }
                }
            }
            out.push(comp);
        }
        out
    }

    /// Fixes the smallest id of every component that has no fixed variable.
    /// Returns the ids that were newly fixed.
    pub fn anchor_components(&mut self) -> Vec<VariableId> {
        let mut anchored = Vec::new();
        for comp in self.connected_components() {
            if comp.iter().any(|id| self.is_fixed(*id)) {
                continue;
            }
            if let Some(&first) = comp.first() {
                self.set_fixed(first, true);
                anchored.push(first);
            }
        }
        anchored
    }

    /// Sub-graph induced by `ids`, keeping only the listed edges (whose
    /// endpoints must be in `ids`). Fixed flags are copied.
    pub fn subgraph(&self, ids: &BTreeSet<VariableId>, edge_indices: &[usize]) -> PoseGraph {
        let mut g = PoseGraph::new();
        for id in ids {
            if let Some(v) = self.variables.get(id) {
                g.variables.insert(*id, v.clone());
            }
        }
        for &k in edge_indices {
            let e = &self.edges[k];
            debug_assert!(ids.contains(&e.from) && ids.contains(&e.to));
            g.edges.push(e.clone());
        }
        g
    }

    /// Left-composes every estimate with `t`.
    pub fn transform(&mut self, t: &Pose) {
        for v in self.variables.values_mut() {
            v.estimate = t.compose(&v.estimate);
        }
    }

    /// Human-readable validation findings; empty when nothing is suspicious.
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (k, e) in self.edges.iter().enumerate() {
            if std::f64::consts::PI - e.measurement.angle() < PI_TOLERANCE {
                out.push(format!(
                    "edge {k} ({} -> {}): measurement rotation angle is at pi",
                    e.from, e.to
                ));
            }
            let asym = (e.information - e.information.transpose()).abs().max();
            if asym > 1e-9 {
                out.push(format!("edge {k}: information matrix is not symmetric"));
            }
        }
        out
    }
}
