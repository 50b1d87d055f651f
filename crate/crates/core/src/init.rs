//! Baseline initializers: odometry chaining, breadth-first spanning tree,
//! chordal relaxation and Cauchy boosting.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use nalgebra::{DVector, Matrix3, Vector3};

use crate::costs::{CostKind, RobustKernel};
use crate::error::{Error, Result};
use crate::graph::{PoseGraph, VariableId};
use crate::hipe::{hipe_init, HipeParams};
use crate::se3::{project_to_so3, Pose};
use crate::solver::{optimize_free, SolverConfig};
use crate::sparse::{Block, BlockMatrixBuilder, CholeskyFactor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitKind {
    Odometry,
    SpanningTree,
    Chordal,
    CauchyBoost,
    Hipe(HipeParams),
}

impl InitKind {
    pub fn name(&self) -> &'static str {
        match self {
            InitKind::Odometry => "odometry",
            InitKind::SpanningTree => "spanning-tree",
            InitKind::Chordal => "chordal",
            InitKind::CauchyBoost => "cauchy",
            InitKind::Hipe(_) => "hipe",
        }
    }
}

impl fmt::Display for InitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InitKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "odometry" => Ok(InitKind::Odometry),
            "spanning-tree" | "spanning_tree" | "sp" => Ok(InitKind::SpanningTree),
            "chordal" | "ci" => Ok(InitKind::Chordal),
            "cauchy" | "cauchy-boost" | "cb" => Ok(InitKind::CauchyBoost),
            "hipe" => Ok(InitKind::Hipe(HipeParams::default())),
            other => Err(format!("unknown initializer '{other}'")),
        }
    }
}

/// Default Cauchy scale for boosting.
pub const CAUCHY_SCALE: f64 = 1.0;

/// Runs the selected initializer. Components without a fixed variable are
/// anchored at their smallest id first.
pub fn initialize(graph: &mut PoseGraph, kind: &InitKind) -> Result<()> {
    graph.anchor_components();
    match kind {
        InitKind::Odometry => {
            odometry_init(graph);
            Ok(())
        }
        InitKind::SpanningTree => {
            spanning_tree_init(graph);
            Ok(())
        }
        InitKind::Chordal => {
            let free = graph.free_ids();
            chordal_init(graph, &free)
        }
        InitKind::CauchyBoost => cauchy_boost_init(graph, 10),
        InitKind::Hipe(params) => hipe_init(graph, params).map(|_| ()),
    }
}

fn oriented(graph: &PoseGraph, k: usize, from: VariableId) -> Pose {
    let e = &graph.edges()[k];
    if e.from == from {
        e.measurement
    } else {
        e.measurement.inverse()
    }
}

/// Breadth-first propagation from `roots` (in order), composing along edges.
/// Nodes in `done` are never overwritten; fixed nodes keep their estimate.
fn propagate_bfs(graph: &mut PoseGraph, roots: &[VariableId], done: &mut BTreeSet<VariableId>) {
    let adj = graph.adjacency();
    let mut queue: VecDeque<VariableId> = roots.iter().copied().collect();
    while let Some(u) = queue.pop_front() {
        for &(k, w) in &adj[&u] {
            if done.insert(w) {
                if !graph.is_fixed(w) {
                    let pose = graph.estimate(u).compose(&oriented(graph, k, u));
                    graph.set_estimate(w, pose);
                }
                queue.push_back(w);
            }
        }
    }
}

/// Breadth-first spanning tree from the fixed variables of each component;
/// estimates are composed parent to child.
pub fn spanning_tree_init(graph: &mut PoseGraph) {
    let roots: Vec<VariableId> = graph.fixed_ids().into_iter().collect();
    let mut done: BTreeSet<VariableId> = roots.iter().copied().collect();
    propagate_bfs(graph, &roots, &mut done);
}

/// Chains consecutive-id edges up and down from each component's anchor,
/// then fills the rest by spanning-tree propagation.
pub fn odometry_init(graph: &mut PoseGraph) {
    let mut consecutive: HashMap<(VariableId, VariableId), usize> = HashMap::new();
    for (k, e) in graph.edges().iter().enumerate() {
        if e.from.abs_diff(e.to) == 1 {
            consecutive.entry((e.from.min(e.to), e.from.max(e.to))).or_insert(k);
        }
    }
    let mut done = BTreeSet::new();
    let mut order = Vec::new();
    for comp in graph.connected_components() {
        let Some(&anchor) = comp.iter().find(|id| graph.is_fixed(**id)) else {
            continue;
        };
        done.insert(anchor);
        order.push(anchor);
        let mut walk = |graph: &mut PoseGraph, up: bool| {
            let mut cur = anchor;
            loop {
                let next = if up { cur.checked_add(1) } else { cur.checked_sub(1) };
                let Some(next) = next else { break };
                let Some(&k) = consecutive.get(&(cur.min(next), cur.max(next))) else {
                    break;
                };
                if !done.insert(next) {
                    break;
                }
                if !graph.is_fixed(next) {
                    let pose = graph.estimate(cur).compose(&oriented(graph, k, cur));
                    graph.set_estimate(next, pose);
                }
                order.push(next);
                cur = next;
            }
        };
        walk(graph, true);
        walk(graph, false);
    }
    propagate_bfs(graph, &order, &mut done);
}

/// Chordal relaxation followed by linear translation recovery. Only the
/// variables in `free` that appear in an edge are updated; every other
/// variable acts as a constraint.
pub fn chordal_init(graph: &mut PoseGraph, free: &BTreeSet<VariableId>) -> Result<()> {
    let (ids, index) = free_index(graph, free);
    let n = ids.len();
    if n == 0 {
        return Ok(());
    }

    let relaxed = solve_rotations(graph, &index, n)?;
    for (k, id) in ids.iter().enumerate() {
        // relaxed blocks shrink with distance from the constraints under heavy
        // noise; the projection is scale invariant
        let a = relaxed[k] / relaxed[k].norm().max(f64::MIN_POSITIVE);
        let r = project_to_so3(&a).map_err(|_| Error::SingularSystem)?.inverse();
        let t = graph.estimate(*id).translation;
        graph.set_estimate(*id, Pose::new(r, t));
    }
    let translations = solve_translations(graph, &index, n)?;
    for (k, id) in ids.iter().enumerate() {
        let r = graph.estimate(*id).rotation;
        graph.set_estimate(*id, Pose::new(r, translations[k]));
    }
    Ok(())
}

/// Solves `min sum |R_ij^T A_i - A_j|_F^2` for `A_i = R_i^T`, column by column.
fn solve_rotations(graph: &PoseGraph, index: &HashMap<VariableId, usize>, n: usize) -> Result<Vec<Matrix3<f64>>> {
    let mut h = BlockMatrixBuilder::<3>::new(n);
    let mut rhs = nalgebra::DMatrix::<f64>::zeros(3 * n, 3);
    let eye = Matrix3::identity();
    for k in 0..n {
        h.touch(k, k);
    }
    for e in graph.edges() {
        let rij = *e.measurement.rotation.matrix();
        match (index.get(&e.from), index.get(&e.to)) {
            (Some(&i), Some(&j)) => {
                h.add(i, i, &eye);
                h.add(j, j, &eye);
                h.add(i, j, &(-rij));
            }
            (Some(&i), None) => {
                let aj = graph.estimate(e.to).rotation.matrix().transpose();
                h.add(i, i, &eye);
                let mut b = rhs.fixed_view_mut::<3, 3>(3 * i, 0);
                b += rij * aj;
            }
            (None, Some(&j)) => {
                let ai = graph.estimate(e.from).rotation.matrix().transpose();
                h.add(j, j, &eye);
                let mut b = rhs.fixed_view_mut::<3, 3>(3 * j, 0);
                b += rij.transpose() * ai;
            }
            (None, None) => {}
        }
    }
    let factor = CholeskyFactor::new(&h.build()).map_err(singular)?;
    let cols: Vec<DVector<f64>> = (0..3).map(|c| factor.solve(&rhs.column(c).into_owned())).collect();
    Ok((0..n).map(|k| Matrix3::from_fn(|r, c| cols[c][3 * k + r])).collect())
}

fn free_index(graph: &PoseGraph, free: &BTreeSet<VariableId>) -> (Vec<VariableId>, HashMap<VariableId, usize>) {
    let mut ids: Vec<VariableId> = graph
        .edges()
        .iter()
        .flat_map(|e| [e.from, e.to])
        .filter(|id| free.contains(id))
        .collect();
    ids.sort_unstable();
    ids.dedup();
    let index = ids.iter().enumerate().map(|(k, id)| (*id, k)).collect();
    (ids, index)
}

/// Unprojected minimizers `A_i` of the relaxed rotation problem.
pub fn chordal_relaxation(graph: &PoseGraph, free: &BTreeSet<VariableId>) -> Result<HashMap<VariableId, Matrix3<f64>>> {
    let (ids, index) = free_index(graph, free);
    if ids.is_empty() {
        return Ok(HashMap::new());
    }
    let relaxed = solve_rotations(graph, &index, ids.len())?;
    Ok(ids.into_iter().zip(relaxed).collect())
}

/// Solves `min sum |t_j - t_i - R_i t_ij|^2` with the rotations fixed.
fn solve_translations(graph: &PoseGraph, index: &HashMap<VariableId, usize>, n: usize) -> Result<Vec<Vector3<f64>>> {
    let mut h = BlockMatrixBuilder::<1>::new(n);
    let mut rhs = vec![DVector::<f64>::zeros(n), DVector::zeros(n), DVector::zeros(n)];
    let one = Block::<1>::new(1.0);
    for k in 0..n {
        h.touch(k, k);
    }
    for e in graph.edges() {
        let (xi, xj) = (graph.estimate(e.from), graph.estimate(e.to));
        let d = xi.rotation * e.measurement.translation;
        let (fi, fj) = (index.get(&e.from).copied(), index.get(&e.to).copied());
        if fi.is_none() && fj.is_none() {
            continue;
        }
        if let Some(i) = fi {
            h.add(i, i, &one);
            for c in 0..3 {
                rhs[c][i] -= d[c];
            }
        }
        if let Some(j) = fj {
            h.add(j, j, &one);
            for c in 0..3 {
                rhs[c][j] += d[c];
            }
        }
        match (fi, fj) {
            (Some(i), Some(j)) => h.add(i, j, &(-one)),
            (Some(i), None) => {
                for c in 0..3 {
                    rhs[c][i] += xj.translation[c];
                }
            }
            (None, Some(j)) => {
                for c in 0..3 {
                    rhs[c][j] += xi.translation[c];
                }
            }
            (None, None) => {}
        }
    }
    let factor = CholeskyFactor::new(&h.build()).map_err(singular)?;
    let sol: Vec<DVector<f64>> = rhs.iter().map(|b| factor.solve(b)).collect();
    Ok((0..n).map(|k| Vector3::new(sol[0][k], sol[1][k], sol[2][k])).collect())
}

fn singular(e: Error) -> Error {
    match e {
        Error::NotPositiveDefinite { .. } => Error::SingularSystem,
        other => other,
    }
}

/// Spanning-tree start refined by `iterations` dogleg steps on the geodesic
/// cost under a Cauchy kernel.
pub fn cauchy_boost_init(graph: &mut PoseGraph, iterations: usize) -> Result<()> {
    spanning_tree_init(graph);
    let cfg = SolverConfig {
        cost: CostKind::Geodesic,
        kernel: RobustKernel::Cauchy(CAUCHY_SCALE),
        max_iterations: iterations.max(1),
        ..SolverConfig::default()
    };
    optimize_free(graph, &cfg)?;
    Ok(())
}

/// Value of `sum |R_ij^T A_i - A_j|_F^2`, taking `A_i` from `relaxed` when
/// present and `R_i^T` of the current estimate otherwise.
pub fn chordal_rotation_objective(graph: &PoseGraph, relaxed: &HashMap<VariableId, Matrix3<f64>>) -> f64 {
    let a = |id: VariableId| {
        relaxed
            .get(&id)
            .copied()
            .unwrap_or_else(|| graph.estimate(id).rotation.matrix().transpose())
    };
    graph
        .edges()
        .iter()
        .map(|e| (e.measurement.rotation.matrix().transpose() * a(e.from) - a(e.to)).norm_squared())
        .sum()
}
