//! Hierarchical initialization: breadth-first partitioning into local
//! sub-graphs, a skeleton of virtual measurements between each partition's
//! anchor and its boundary, skeleton optimization, and propagation of the
//! skeleton solution to the remaining variables.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::time::Instant;

use nalgebra::Matrix6;

use crate::costs::CostKind;
use crate::error::{Error, Result};
use crate::g2o::write_g2o;
use crate::graph::{Adjacency, Edge, PoseGraph, VariableId};
use crate::init::{chordal_init, spanning_tree_init};
use crate::se3::{pseudo_inverse6, Covariance6, Pose};
use crate::solver::{build_normal_equations, marginal_covariance, optimize, SolverConfig};

/// Regularization added to a boundary marginal before inverting it.
pub const MARGINAL_FLOOR: f64 = 1e-8;

/// How the traversed distance of the breadth-first visit is measured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GraphDistance {
    /// Number of hops from the root.
    #[default]
    Hops,
    /// Largest translation length accumulated along the breadth-first tree.
    Metric,
}

/// Starting point of each partition's local solve.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LocalInit {
    SpanningTree,
    /// Chordal relaxation with the anchor as the only constraint.
    #[default]
    Chordal,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HipeParams {
    /// Minimum number of variables visited per partition.
    pub k: usize,
    /// Minimum distance traversed from the root.
    pub gamma: f64,
    pub distance: GraphDistance,
    pub local_init: LocalInit,
    pub local_cost: CostKind,
    pub skeleton_cost: CostKind,
    /// Dogleg budget for local solves, the skeleton and propagation.
    pub iterations: usize,
}

impl Default for HipeParams {
    fn default() -> Self {
        Self {
            k: 100,
            gamma: 50.0,
            distance: GraphDistance::Hops,
            local_init: LocalInit::Chordal,
            local_cost: CostKind::Geodesic,
            skeleton_cost: CostKind::Geodesic,
            iterations: 10,
        }
    }
}

impl HipeParams {
    fn solver(&self, cost: CostKind) -> SolverConfig {
        SolverConfig {
            max_iterations: self.iterations.max(1),
            ..SolverConfig::with_cost(cost)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    /// Variables first visited by this partition.
    pub variables: BTreeSet<VariableId>,
    /// Indices (into the source graph) of the edges incident to `variables`.
    pub edges: Vec<usize>,
    pub boundary: BTreeSet<VariableId>,
    pub anchor: VariableId,
}

impl Partition {
    pub fn local_variables(&self) -> BTreeSet<VariableId> {
        self.variables.union(&self.boundary).copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VirtualMeasurement {
    pub anchor: VariableId,
    pub boundary: VariableId,
    pub relative_pose: Pose,
    pub covariance: Covariance6,
}

impl VirtualMeasurement {
    pub fn to_edge(&self) -> Edge {
        let info = pseudo_inverse6(&(self.covariance + Matrix6::identity() * MARGINAL_FLOOR));
        Edge::new(self.anchor, self.boundary, self.relative_pose, (info + info.transpose()) * 0.5)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Skeleton {
    /// Anchors and boundary variables with virtual-measurement edges.
    pub graph: PoseGraph,
    pub measurements: Vec<VirtualMeasurement>,
}

#[derive(Clone, Debug, Default)]
pub struct HipeReport {
    pub partitions: usize,
    pub skeleton_variables: usize,
    pub skeleton_edges: usize,
    pub t_partition: f64,
    pub t_skeleton: f64,
    pub t_propagate: f64,
    pub t_total: f64,
    pub skeleton: Skeleton,
}

/// Node with the most incident edges among `edges`; ties go to the smaller id.
pub fn max_degree_node(vars: &BTreeSet<VariableId>, edges: &[&Edge]) -> Result<VariableId> {
    let mut deg: BTreeMap<VariableId, usize> = vars.iter().map(|&v| (v, 0)).collect();
    for e in edges {
        for id in [e.from, e.to] {
            if let Some(d) = deg.get_mut(&id) {
                *d += 1;
            }
        }
    }
    let mut best: Option<(VariableId, usize)> = None;
    for (id, d) in deg {
        if best.is_none_or(|(_, bd)| d > bd) {
            best = Some((id, d));
        }
    }
    best.map(|(id, _)| id).ok_or(Error::EmptyInput)
}

/// Result of one limited breadth-first visit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Visit {
    pub variables: BTreeSet<VariableId>,
    pub edges: Vec<usize>,
    pub boundary: BTreeSet<VariableId>,
}

/// Level-by-level expansion over unvisited variables while fewer than `k`
/// variables were collected or the traversed distance is below `gamma`.
///
/// A root that is already visited only seeds the expansion and ends up in
/// the boundary. Boundary = unvisited nodes one level past the last
/// expanded level plus previously visited nodes adjacent to the visit.
pub fn breadth_first_visit(
    graph: &PoseGraph,
    adj: &Adjacency,
    root: VariableId,
    k: usize,
    gamma: f64,
    distance: GraphDistance,
) -> Visit {
    let visited = |id: VariableId| graph.variable(id).is_some_and(|v| v.visited);
    let mut variables = BTreeSet::new();
    let mut reach: HashMap<VariableId, f64> = HashMap::from([(root, 0.0)]);
    let mut level: Vec<VariableId> = vec![root];
    if !visited(root) {
        variables.insert(root);
    }
    let mut depth = 0.0_f64;
    loop {
        let mut next: Vec<VariableId> = Vec::new();
        for &u in &level {
            for &(e, w) in &adj[&u] {
                if visited(w) || variables.contains(&w) || reach.contains_key(&w) {
                    continue;
                }
                let step = match distance {
                    GraphDistance::Hops => 1.0,
                    GraphDistance::Metric => graph.edges()[e].measurement.translation.norm(),
                };
                reach.insert(w, reach[&u] + step);
                next.push(w);
            }
        }
        if next.is_empty() {
            break;
        }
        next.sort_unstable();
        if variables.len() >= k && depth >= gamma {
            // `next` is the frontier
            break;
        }
        depth = match distance {
            GraphDistance::Hops => depth + 1.0,
            GraphDistance::Metric => next.iter().map(|w| reach[w]).fold(depth, f64::max),
        };
        variables.extend(next.iter().copied());
        level = next;
    }

    let mut boundary = BTreeSet::new();
    let mut edges = BTreeSet::new();
    for &u in &variables {
        for &(e, w) in &adj[&u] {
            edges.insert(e);
            if !variables.contains(&w) {
                boundary.insert(w);
            }
        }
    }
    Visit {
        variables,
        edges: edges.into_iter().collect(),
        boundary,
    }
}

/// Local maximum-likelihood estimate of a partition with only its anchor
/// fixed, started from `params.local_init`. Returns the solved local graph.
pub fn solve_partition(graph: &PoseGraph, p: &Partition, params: &HipeParams) -> Result<PoseGraph> {
    let mut local = graph.subgraph(&p.local_variables(), &p.edges);
    for v in local.variables_mut() {
        v.fixed = v.id == p.anchor;
    }
    let free: BTreeSet<VariableId> = local.ids().filter(|&id| id != p.anchor).collect();
    match params.local_init {
        LocalInit::SpanningTree => spanning_tree_init(&mut local),
        LocalInit::Chordal => chordal_init(&mut local, &free)?,
    }
    optimize(&mut local, &params.solver(params.local_cost), &free)?;
    Ok(local)
}

/// One virtual measurement per boundary variable: relative pose from the
/// anchor and the boundary marginal with the anchor conditioned out.
pub fn compute_virtual_measurements(p: &Partition, local: &PoseGraph, cost: CostKind) -> Result<Vec<VirtualMeasurement>> {
    if p.boundary.is_empty() {
        return Ok(Vec::new());
    }
    let free: BTreeSet<VariableId> = local.ids().filter(|&id| id != p.anchor).collect();
    let sys = build_normal_equations(local, cost, crate::costs::RobustKernel::None, &free)?;
    let marginals = marginal_covariance(&sys, &p.boundary)?;
    let xa = local.estimate(p.anchor);
    Ok(p.boundary
        .iter()
        .map(|&b| VirtualMeasurement {
            anchor: p.anchor,
            boundary: b,
            relative_pose: xa.between(local.estimate(b)),
            covariance: marginals[&b],
        })
        .collect())
}

/// Runs the breadth-first partitioner over every connected component and
/// collects the skeleton.
pub fn build_skeleton(graph: &PoseGraph, params: &HipeParams) -> Result<(Skeleton, Vec<Partition>)> {
    let mut work = graph.clone();
    work.clear_visited();
    let adj = work.adjacency();
    let mut partitions = Vec::new();
    let mut measurements = Vec::new();
    let mut skeleton_ids = BTreeSet::new();

    for comp in graph.connected_components() {
        let comp_edges: Vec<&Edge> = graph
            .edges()
            .iter()
            .filter(|e| comp.contains(&e.from))
            .collect();
        let root = max_degree_node(&comp, &comp_edges)?;
        let mut queue = std::collections::VecDeque::from([root]);
        while let Some(r) = queue.pop_front() {
            let visit = breadth_first_visit(&work, &adj, r, params.k, params.gamma, params.distance);
            if visit.variables.is_empty() {
                continue;
            }
            let local_edges: Vec<&Edge> = visit.edges.iter().map(|&e| &graph.edges()[e]).collect();
            let anchor = max_degree_node(&visit.variables, &local_edges)?;
            let p = Partition {
                variables: visit.variables,
                edges: visit.edges,
                boundary: visit.boundary,
                anchor,
            };
            if !p.boundary.is_empty() || p.variables.len() > 1 {
                let ts = Instant::now();
                let local = solve_partition(graph, &p, params)?;
                let t_solve = ts.elapsed().as_secs_f64();
                measurements.extend(compute_virtual_measurements(&p, &local, params.local_cost)?);
                log::debug!(
                    "partition at {}: {} variables, {} boundary, solve {:.3}s, marginals {:.3}s",
                    p.anchor,
                    p.variables.len(),
                    p.boundary.len(),
                    t_solve,
                    ts.elapsed().as_secs_f64() - t_solve
                );
            }
            skeleton_ids.insert(p.anchor);
            skeleton_ids.extend(p.boundary.iter().copied());
            for id in p.variables.iter().chain(p.boundary.iter()) {
                if let Some(v) = work.variable_mut(*id) {
                    v.visited = true;
                }
            }
            queue.extend(p.boundary.iter().copied());
            partitions.push(p);
        }
    }

    let mut sk = graph.subgraph(&skeleton_ids, &[]);
    for v in sk.variables_mut() {
        v.fixed = false;
        v.visited = false;
    }
    for m in &measurements {
        sk.add_edge(m.to_edge())?;
    }
    Ok((
        Skeleton {
            graph: sk,
            measurements,
        },
        partitions,
    ))
}

/// Chordal initialization and optimization of the skeleton, each skeleton
/// component anchored at its max-degree node.
pub fn optimize_skeleton(skeleton: &mut Skeleton, params: &HipeParams) -> Result<()> {
    let g = &mut skeleton.graph;
    for comp in g.connected_components() {
        let edges: Vec<&Edge> = g.edges().iter().filter(|e| comp.contains(&e.from)).collect();
        let anchor = max_degree_node(&comp, &edges)?;
        g.set_fixed(anchor, true);
    }
    let free = g.free_ids();
    chordal_init(g, &free)?;
    optimize(g, &params.solver(params.skeleton_cost), &free)?;
    Ok(())
}

/// Writes the skeleton estimates into `graph`, then initializes and
/// optimizes the remaining variables with the skeleton held fixed.
pub fn propagate_to_remaining(graph: &mut PoseGraph, skeleton: &PoseGraph, params: &HipeParams) -> Result<()> {
    let saved: BTreeMap<VariableId, bool> = graph.variables().map(|v| (v.id, v.fixed)).collect();
    for v in skeleton.variables() {
        graph.set_estimate(v.id, v.estimate);
    }
    for v in graph.variables_mut() {
        v.fixed = skeleton.contains(v.id);
    }
    let remaining = graph.free_ids();
    let result = chordal_init(graph, &remaining)
        .and_then(|_| optimize(graph, &params.solver(params.local_cost), &remaining).map(|_| ()));
    for (id, fixed) in saved {
        graph.set_fixed(id, fixed);
    }
    result
}

/// Full hierarchical initialization. The result is expressed in the frame
/// of each component's smallest-id fixed variable, which keeps its pose;
/// other fixed variables are restored to their input poses.
pub fn hipe_init(graph: &mut PoseGraph, params: &HipeParams) -> Result<HipeReport> {
    let start = Instant::now();
    let mut work = graph.clone();
    for v in work.variables_mut() {
        v.fixed = false;
    }

    let t0 = Instant::now();
    let (mut skeleton, partitions) = build_skeleton(&work, params)?;
    let t_partition = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    optimize_skeleton(&mut skeleton, params)?;
    let t_skeleton = t1.elapsed().as_secs_f64();

    let t2 = Instant::now();
    propagate_to_remaining(&mut work, &skeleton.graph, params)?;
    let t_propagate = t2.elapsed().as_secs_f64();

    for comp in graph.connected_components() {
        let Some(&reference) = comp.iter().find(|id| graph.is_fixed(**id)) else {
            for id in &comp {
                graph.set_estimate(*id, *work.estimate(*id));
            }
            continue;
        };
        let align = graph.estimate(reference).compose(&work.estimate(reference).inverse());
        for id in &comp {
            if !graph.is_fixed(*id) {
                graph.set_estimate(*id, align.compose(work.estimate(*id)));
            }
        }
    }

    Ok(HipeReport {
        partitions: partitions.len(),
        skeleton_variables: skeleton.graph.len(),
        skeleton_edges: skeleton.graph.edge_count(),
        t_partition,
        t_skeleton,
        t_propagate,
        t_total: start.elapsed().as_secs_f64(),
        skeleton,
    })
}

/// Skeleton in g2o text, preceded by a `# skeleton` comment.
pub fn write_skeleton<W: Write>(skeleton: &Skeleton, mut out: W) -> Result<()> {
    writeln!(
        out,
        "# skeleton: {} variables, {} virtual measurements",
        skeleton.graph.len(),
        skeleton.graph.edge_count()
    )?;
    write_g2o(&skeleton.graph, out)
}
