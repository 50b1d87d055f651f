//! Normal-equation assembly and Powell dogleg optimization over SE(3).

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::time::Instant;

use nalgebra::{DVector, Matrix6, Vector6};

use crate::costs::{apply_robust_kernel, CostKind, CostModel, RobustKernel};
use crate::error::{Error, Result};
use crate::graph::{PoseGraph, VariableId};
use crate::se3::{Covariance6, Pose};
use crate::sparse::{amd_ordering, BlockMatrix, BlockMatrixBuilder, CholeskyFactor, SymbolicCholesky};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverConfig {
    pub cost: CostKind,
    pub kernel: RobustKernel,
    pub max_iterations: usize,
    /// Stop when `(F_old - F_new) / F_old` falls below this.
    pub cost_decrease_tolerance: f64,
    pub trust_region_initial: f64,
    pub trust_region_max: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            cost: CostKind::Geodesic,
            kernel: RobustKernel::None,
            max_iterations: 10,
            cost_decrease_tolerance: 1e-6,
            trust_region_initial: 1e4,
            trust_region_max: 1e9,
        }
    }
}

impl SolverConfig {
    pub fn with_cost(cost: CostKind) -> Self {
        Self {
            cost,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizeReport {
    /// Number of linearizations performed.
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Cost after every iteration, starting with the initial cost.
    pub cost_trace: Vec<f64>,
    pub converged: bool,
    pub wall_time: f64,
}

/// Gauss-Newton system `H dx = -g` over the free variables.
#[derive(Clone, Debug)]
pub struct BlockSparseSystem {
    pub hessian: BlockMatrix<6>,
    pub gradient: DVector<f64>,
    /// Free variable id to block row.
    pub index: BTreeMap<VariableId, usize>,
    /// `0.5 * sum rho(r^T W r)` at the linearization point.
    pub cost: f64,
}

impl BlockSparseSystem {
    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }
}

fn assemble(
    graph: &PoseGraph,
    model: &CostModel,
    kernel: RobustKernel,
    index: &BTreeMap<VariableId, usize>,
) -> Result<BlockSparseSystem> {
    let n = index.len();
    let mut builder = BlockMatrixBuilder::<6>::new(n);
    let mut gradient = DVector::zeros(6 * n);
    let mut cost = 0.0;
    for i in 0..n {
        builder.touch(i, i);
    }
    for (k, e) in graph.edges().iter().enumerate() {
        let (bi, bj) = (index.get(&e.from).copied(), index.get(&e.to).copied());
        if bi.is_none() && bj.is_none() {
            continue;
        }
        let lin = model.linearize(k, e, graph.estimate(e.from), graph.estimate(e.to))?;
        let (rho, w) = apply_robust_kernel(kernel, lin.chi2);
        cost += 0.5 * rho;
        if let Some(i) = bi {
            builder.add(i, i, &(lin.h_from_from * w));
            let mut gi = gradient.fixed_rows_mut::<6>(6 * i);
            gi += lin.g_from * w;
        }
        if let Some(j) = bj {
            builder.add(j, j, &(lin.h_to_to * w));
            let mut gj = gradient.fixed_rows_mut::<6>(6 * j);
            gj += lin.g_to * w;
        }
        if let (Some(i), Some(j)) = (bi, bj) {
            builder.add(i, j, &(lin.h_from_to * w));
        }
    }
    Ok(BlockSparseSystem {
        hessian: builder.build(),
        gradient,
        index: index.clone(),
        cost,
    })
}

/// Free variables that appear in at least one edge, in ascending id order.
fn active_index(graph: &PoseGraph, free: &BTreeSet<VariableId>) -> BTreeMap<VariableId, usize> {
    let mut touched = BTreeSet::new();
    for e in graph.edges() {
        for id in [e.from, e.to] {
            if free.contains(&id) {
                touched.insert(id);
            }
        }
    }
    touched.into_iter().enumerate().map(|(k, id)| (id, k)).collect()
}

/// Assembles `H` and `g` for the free variables. Fixed variables enter the
/// residuals but receive no rows.
pub fn build_normal_equations(
    graph: &PoseGraph,
    cost: CostKind,
    kernel: RobustKernel,
    free: &BTreeSet<VariableId>,
) -> Result<BlockSparseSystem> {
    let model = CostModel::new(cost, graph);
    assemble(graph, &model, kernel, &active_index(graph, free))
}

/// Gauss-Newton step `dx = -H^-1 g`.
pub fn solve_linear(sys: &BlockSparseSystem) -> Result<DVector<f64>> {
    let f = CholeskyFactor::new(&sys.hessian)?;
    Ok(-f.solve(&sys.gradient))
}

/// Diagonal blocks of `H^-1` for the requested variables. Variables that
/// are not free in the system are skipped.
pub fn marginal_covariance(
    sys: &BlockSparseSystem,
    targets: &BTreeSet<VariableId>,
) -> Result<HashMap<VariableId, Covariance6>> {
    let (ids, blocks): (Vec<VariableId>, Vec<usize>) = targets
        .iter()
        .filter_map(|id| sys.index.get(id).map(|&k| (*id, k)))
        .unzip();
    // eliminate the targets last so the selected inversion stops early
    let is_target: HashSet<usize> = blocks.iter().copied().collect();
    let (mut perm, last): (Vec<usize>, Vec<usize>) =
        amd_ordering(&sys.hessian).into_iter().partition(|k| !is_target.contains(k));
    perm.extend(last);
    let f = SymbolicCholesky::analyze_with_ordering(&sys.hessian, perm).factor(&sys.hessian)?;
    Ok(ids.into_iter().zip(f.marginal_covariances_of(&blocks)).collect())
}

/// Every connected group of free variables (linked through edges that touch
/// a free variable) must reach a non-free variable.
fn check_anchored(graph: &PoseGraph, free: &BTreeSet<VariableId>) -> Result<()> {
    let mut parent: HashMap<VariableId, VariableId> = HashMap::new();
    fn find(parent: &mut HashMap<VariableId, VariableId>, x: VariableId) -> VariableId {
        let mut r = x;
        while let Some(&p) = parent.get(&r) {
            if p == r {
                break;
            }
            r = p;
        }
        let mut c = x;
        while c != r {
            let next = parent[&c];
            parent.insert(c, r);
            c = next;
        }
        r
    }
    for e in graph.edges() {
        if !free.contains(&e.from) && !free.contains(&e.to) {
            continue;
        }
        parent.entry(e.from).or_insert(e.from);
        parent.entry(e.to).or_insert(e.to);
        let (a, b) = (find(&mut parent, e.from), find(&mut parent, e.to));
        if a != b {
            parent.insert(a.max(b), a.min(b));
        }
    }
    let mut anchored: HashMap<VariableId, bool> = HashMap::new();
    let mut smallest_free: BTreeMap<VariableId, VariableId> = BTreeMap::new();
    let ids: Vec<VariableId> = parent.keys().copied().collect();
    for id in ids {
        let root = find(&mut parent, id);
        let entry = anchored.entry(root).or_insert(false);
        if !free.contains(&id) {
            *entry = true;
        } else {
            let s = smallest_free.entry(root).or_insert(id);
            *s = (*s).min(id);
        }
    }
    for (root, id) in smallest_free {
        if !anchored[&root] {
            return Err(Error::NoAnchor(id));
        }
    }
    Ok(())
}

fn retract_all(graph: &PoseGraph, index: &BTreeMap<VariableId, usize>, dx: &DVector<f64>) -> Vec<(VariableId, Pose)> {
    index
        .iter()
        .map(|(&id, &k)| {
            let d: Vector6<f64> = dx.fixed_rows::<6>(6 * k).into_owned();
            (id, graph.estimate(id).retract(&d))
        })
        .collect()
}

fn total_cost(graph: &PoseGraph, model: &CostModel, kernel: RobustKernel, free: &BTreeMap<VariableId, usize>) -> Result<f64> {
    let mut sum = 0.0;
    for (k, e) in graph.edges().iter().enumerate() {
        if !free.contains_key(&e.from) && !free.contains_key(&e.to) {
            continue;
        }
        let chi2 = model.chi2(k, e, graph.estimate(e.from), graph.estimate(e.to))?;
        sum += 0.5 * apply_robust_kernel(kernel, chi2).0;
    }
    Ok(sum)
}

/// Factors `H`, adding growing diagonal damping while it is not positive definite.
fn factor_damped(symbolic: &SymbolicCholesky, h: &BlockMatrix<6>) -> Result<CholeskyFactor<6>> {
    match symbolic.factor(h) {
        Ok(f) => return Ok(f),
        Err(Error::NotPositiveDefinite { .. }) => {}
        Err(e) => return Err(e),
    }
    let scale = (0..h.block_dim())
        .filter_map(|i| h.block(i, i))
        .map(|b| b.diagonal().amax())
        .fold(0.0_f64, f64::max)
        .max(1.0);
    let mut lambda = 1e-9 * scale;
    for _ in 0..20 {
        let mut damped = h.clone();
        damped.add_to_diagonal(lambda);
        match symbolic.factor(&damped) {
            Ok(f) => {
                log::debug!("factorization needed damping {lambda:e}");
                return Ok(f);
            }
            Err(Error::NotPositiveDefinite { .. }) => lambda *= 10.0,
            Err(e) => return Err(e),
        }
    }
    Err(Error::SingularSystem)
}

/// Powell dogleg over the variables of `free`; all others are held constant.
pub fn optimize(graph: &mut PoseGraph, cfg: &SolverConfig, free: &BTreeSet<VariableId>) -> Result<OptimizeReport> {
    let start = Instant::now();
    check_anchored(graph, free)?;
    let model = CostModel::new(cfg.cost, graph);
    let index = active_index(graph, free);
    let initial = total_cost(graph, &model, cfg.kernel, &index)?;
    let mut report = OptimizeReport {
        initial_cost: initial,
        final_cost: initial,
        cost_trace: vec![initial],
        ..Default::default()
    };
    if index.is_empty() {
        report.converged = true;
        report.wall_time = start.elapsed().as_secs_f64();
        return Ok(report);
    }

    let mut radius = cfg.trust_region_initial;
    let mut cost = initial;
    let mut symbolic: Option<SymbolicCholesky> = None;

    while report.iterations < cfg.max_iterations {
        if cost <= f64::MIN_POSITIVE {
            report.converged = true;
            break;
        }
        let sys = assemble(graph, &model, cfg.kernel, &index)?;
        report.iterations += 1;
        let sym = symbolic.get_or_insert_with(|| SymbolicCholesky::analyze(&sys.hessian));
        let factor = factor_damped(sym, &sys.hessian)?;
        let g = &sys.gradient;
        let gn = -factor.solve(g);
        let hg = sys.hessian.mul_vec(g);
        let g_norm2 = g.norm_squared();
        let g_h_g = g.dot(&hg);
        let sd = if g_h_g > 0.0 { -g * (g_norm2 / g_h_g) } else { -g.clone() };

        let mut accepted = false;
        let mut new_cost = cost;
        while radius > 1e-12 {
            let step = dogleg_step(&gn, &sd, g, radius);
            let predicted = -g.dot(&step) - 0.5 * step.dot(&sys.hessian.mul_vec(&step));
            let trial = retract_all(graph, &index, &step);
            let saved: Vec<(VariableId, Pose)> = trial.iter().map(|(id, _)| (*id, *graph.estimate(*id))).collect();
            for (id, pose) in &trial {
                graph.set_estimate(*id, *pose);
            }
            let trial_cost = match total_cost(graph, &model, cfg.kernel, &index) {
                Ok(c) => c,
                Err(Error::EdgeAngleAtPi { .. }) => f64::INFINITY,
                Err(e) => {
                    for (id, pose) in saved {
                        graph.set_estimate(id, pose);
                    }
                    return Err(e);
                }
            };
            let actual = cost - trial_cost;
            let ratio = if predicted > 0.0 { actual / predicted } else { -1.0 };
            let step_norm = step.norm();
            if ratio < 0.25 {
                radius = 0.5 * radius.min(step_norm.max(1e-12) * 2.0);
            } else if ratio > 0.75 {
                radius = (2.0 * radius.max(step_norm)).min(cfg.trust_region_max);
            }
            if actual > 0.0 && ratio > 0.0 {
                new_cost = trial_cost;
                accepted = true;
                break;
            }
            for (id, pose) in saved {
                graph.set_estimate(id, pose);
            }
            if predicted <= 0.0 || step_norm < 1e-14 {
                break;
            }
        }
        if !accepted {
            report.converged = true;
            break;
        }
        let decrease = (cost - new_cost) / cost;
        log::trace!(
            "iteration {}: cost {cost:.6e} -> {new_cost:.6e}, radius {radius:.3e}, {:.3}s",
            report.iterations,
            start.elapsed().as_secs_f64()
        );
        cost = new_cost;
        report.cost_trace.push(cost);
        if decrease < cfg.cost_decrease_tolerance {
            report.converged = true;
            break;
        }
    }
    report.final_cost = cost;
    report.wall_time = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Optimizes all non-fixed variables of the graph.
pub fn optimize_free(graph: &mut PoseGraph, cfg: &SolverConfig) -> Result<OptimizeReport> {
    let free = graph.free_ids();
    optimize(graph, cfg, &free)
}

fn dogleg_step(gn: &DVector<f64>, sd: &DVector<f64>, g: &DVector<f64>, radius: f64) -> DVector<f64> {
    let gn_norm = gn.norm();
    if gn_norm <= radius {
        return gn.clone();
    }
    let sd_norm = sd.norm();
    if sd_norm >= radius {
        let gnorm = g.norm();
        return if gnorm > 0.0 { -g * (radius / gnorm) } else { sd.clone() };
    }
    // sd + beta (gn - sd) with norm equal to radius
    let d = gn - sd;
    let a = d.norm_squared();
    let b = 2.0 * sd.dot(&d);
    let c = sd_norm * sd_norm - radius * radius;
    let beta = if a > 0.0 {
        (-b + (b * b - 4.0 * a * c).max(0.0).sqrt()) / (2.0 * a)
    } else {
        0.0
    };
    sd + d * beta
}

/// Dense `J^T W J` of the free variables, used as a test oracle.
#[doc(hidden)]
pub fn dense_hessian(graph: &PoseGraph, cost: CostKind, free: &BTreeSet<VariableId>) -> Result<nalgebra::DMatrix<f64>> {
    let model = CostModel::new(cost, graph);
    let index = active_index(graph, free);
    let n = index.len();
    let mut h = nalgebra::DMatrix::zeros(6 * n, 6 * n);
    for (k, e) in graph.edges().iter().enumerate() {
        let lin = model.linearize(k, e, graph.estimate(e.from), graph.estimate(e.to))?;
        let blocks: [(Option<&usize>, Option<&usize>, Matrix6<f64>); 3] = [
            (index.get(&e.from), index.get(&e.from), lin.h_from_from),
            (index.get(&e.to), index.get(&e.to), lin.h_to_to),
            (index.get(&e.from), index.get(&e.to), lin.h_from_to),
        ];
        for (bi, bj, m) in blocks {
            if let (Some(&i), Some(&j)) = (bi, bj) {
                let mut v = h.fixed_view_mut::<6, 6>(6 * i, 6 * j);
                v += m;
                if i != j {
                    let mut v = h.fixed_view_mut::<6, 6>(6 * j, 6 * i);
                    v += m.transpose();
                }
            }
        }
    }
    Ok(h)
}
