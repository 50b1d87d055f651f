//! Edge residuals for the three measurement models, their Jacobians with
//! respect to right perturbations of the endpoint poses, and robust kernels.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix6, SMatrix, SVector, Vector6};

use crate::error::{Error, Result};
use crate::graph::{Edge, Information, PoseGraph};
use crate::se3::{
    exp_se3, flat, flat_jacobian, log_se3, propagate_covariance, pseudo_inverse12,
    pseudo_inverse6, right_jacobian_inv_se3, Covariance12, Pose, Tangent,
};

/// Rotational perturbation applied once when a geodesic residual lands on pi.
pub const PI_RETRY_STEP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CostKind {
    /// Mahalanobis norm of the SE(3) logarithm of the measurement error.
    Geodesic,
    /// Mahalanobis norm of the difference of flattened transforms.
    Chordal,
    /// Isotropic Frobenius rotation term plus isotropic translation term.
    Langevin,
}

impl CostKind {
    pub const ALL: [CostKind; 3] = [CostKind::Geodesic, CostKind::Chordal, CostKind::Langevin];

    pub fn residual_dim(self) -> usize {
        match self {
            CostKind::Geodesic => 6,
            CostKind::Chordal | CostKind::Langevin => 12,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CostKind::Geodesic => "geodesic",
            CostKind::Chordal => "chordal",
            CostKind::Langevin => "langevin",
        }
    }
}

impl fmt::Display for CostKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CostKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "geodesic" => Ok(CostKind::Geodesic),
            "chordal" => Ok(CostKind::Chordal),
            "langevin" => Ok(CostKind::Langevin),
            other => Err(format!("unknown cost '{other}'")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum RobustKernel {
    #[default]
    None,
    /// Cauchy kernel with scale `c > 0` on the per-edge chi2.
    Cauchy(f64),
}

/// Returns `(rho(chi2), rho'(chi2))`.
pub fn apply_robust_kernel(kernel: RobustKernel, chi2: f64) -> (f64, f64) {
    match kernel {
        RobustKernel::None => (chi2, 1.0),
        RobustKernel::Cauchy(c) => {
            let c2 = c * c;
            let u = chi2 / c2;
            (c2 * u.ln_1p(), 1.0 / (1.0 + u))
        }
    }
}

/// Linearized edge: residual `r`, weight `W`, and `d x d` Jacobians.
/// The edge cost is `0.5 * r^T W r`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeResidual<const D: usize> {
    pub residual: SVector<f64, D>,
    pub weight: SMatrix<f64, D, D>,
    pub jac_from: SMatrix<f64, D, 6>,
    pub jac_to: SMatrix<f64, D, 6>,
}

/// Gauss-Newton contributions of one edge: `J^T W J` blocks and `J^T W r`.
#[derive(Clone, Debug)]
pub struct EdgeBlocks {
    pub chi2: f64,
    pub h_from_from: Matrix6<f64>,
    pub h_from_to: Matrix6<f64>,
    pub h_to_to: Matrix6<f64>,
    pub g_from: Vector6<f64>,
    pub g_to: Vector6<f64>,
}

impl<const D: usize> EdgeResidual<D> {
    /// `r^T W r`.
    pub fn chi2(&self) -> f64 {
        (self.residual.transpose() * self.weight * self.residual)[(0, 0)]
    }

    pub fn cost(&self) -> f64 {
        0.5 * self.chi2()
    }

    pub fn blocks(&self) -> EdgeBlocks {
        let wr = self.weight * self.residual;
        let wj_to = self.weight * self.jac_to;
        let wj_from = self.weight * self.jac_from;
        EdgeBlocks {
            chi2: self.residual.dot(&wr),
            h_from_from: self.jac_from.transpose() * wj_from,
            h_from_to: self.jac_from.transpose() * wj_to,
            h_to_to: self.jac_to.transpose() * wj_to,
            g_from: self.jac_from.transpose() * wr,
            g_to: self.jac_to.transpose() * wr,
        }
    }
}

fn geodesic_at(edge: &Edge, xi: &Pose, xj: &Pose, err: &Pose) -> Result<EdgeResidual<6>> {
    let r = log_se3(err)?;
    let jr_inv = right_jacobian_inv_se3(&r);
    let ad = xj.between(xi).adjoint();
    Ok(EdgeResidual {
        residual: r,
        weight: edge.information,
        jac_from: -jr_inv * ad,
        jac_to: jr_inv,
    })
}

/// `Log(Z^-1 Xi^-1 Xj)` weighted by the edge information.
///
/// When the error rotation sits at pi, the error is nudged by
/// `PI_RETRY_STEP` about its own axis and evaluated once more.
pub fn geodesic_residual(edge: &Edge, xi: &Pose, xj: &Pose) -> Result<EdgeResidual<6>> {
    let err = edge.measurement.inverse().compose(&xi.between(xj));
    match geodesic_at(edge, xi, xj, &err) {
        Err(Error::AngleAtPi) => {
            let m = err.rotation.matrix();
            let b = (m + m.transpose()) * 0.5 + nalgebra::Matrix3::identity();
            let col = (0..3)
                .max_by(|&a, &c| b[(a, a)].total_cmp(&b[(c, c)]))
                .unwrap_or(0);
            let axis = b.column(col).into_owned().normalize() * PI_RETRY_STEP;
            let nudge = exp_se3(&Tangent::new(0.0, 0.0, 0.0, axis.x, axis.y, axis.z));
            geodesic_at(edge, xi, &xj.compose(&nudge), &err.compose(&nudge))
        }
        other => other,
    }
}

/// Weight of the chordal residual: the pseudo-inverse of the flat-space
/// covariance propagated at the measurement.
pub fn chordal_weight(edge: &Edge) -> Covariance12 {
    let sigma = pseudo_inverse6(&edge.information);
    let cov = propagate_covariance(&sigma, &flat_jacobian(&edge.measurement));
    pseudo_inverse12(&cov)
}

fn flat_difference(edge: &Edge, xi: &Pose, xj: &Pose) -> (SVector<f64, 12>, SMatrix<f64, 12, 6>, SMatrix<f64, 12, 6>) {
    let rel = xi.between(xj);
    let r = flat(&rel) - flat(&edge.measurement);
    let j_to = flat_jacobian(&rel);
    // Xi exp(d) gives rel' = exp(-d) rel = rel exp(-Ad(rel^-1) d).
    let j_from = -j_to * rel.inverse().adjoint();
    (r, j_from, j_to)
}

pub fn chordal_residual_weighted(edge: &Edge, xi: &Pose, xj: &Pose, weight: &Covariance12) -> EdgeResidual<12> {
    let (residual, jac_from, jac_to) = flat_difference(edge, xi, xj);
    EdgeResidual {
        residual,
        weight: *weight,
        jac_from,
        jac_to,
    }
}

/// `flat(Xi^-1 Xj) - flat(Z)`; computes the weight on the fly.
pub fn chordal_residual(edge: &Edge, xi: &Pose, xj: &Pose) -> EdgeResidual<12> {
    chordal_residual_weighted(edge, xi, xj, &chordal_weight(edge))
}

/// Isotropic concentrations `(kappa, tau)` taken as the means of the
/// rotational and translational information diagonals.
pub fn langevin_parameters(information: &Information) -> (f64, f64) {
    let tau = (information[(0, 0)] + information[(1, 1)] + information[(2, 2)]) / 3.0;
    let kappa = (information[(3, 3)] + information[(4, 4)] + information[(5, 5)]) / 3.0;
    (kappa.max(0.0), tau.max(0.0))
}

/// Residual whose squared norm halves to
/// `kappa/2 |R~ - R|_F^2 + tau/2 |t~ - t|^2`.
pub fn langevin_residual(edge: &Edge, xi: &Pose, xj: &Pose) -> EdgeResidual<12> {
    let (kappa, tau) = langevin_parameters(&edge.information);
    let (mut residual, mut jac_from, mut jac_to) = flat_difference(edge, xi, xj);
    let (sk, st) = (kappa.sqrt(), tau.sqrt());
    for row in 0..12 {
        let s = if row < 9 { sk } else { st };
        residual[row] *= s;
        for c in 0..6 {
            jac_from[(row, c)] *= s;
            jac_to[(row, c)] *= s;
        }
    }
    EdgeResidual {
        residual,
        weight: SMatrix::identity(),
        jac_from,
        jac_to,
    }
}

/// Per-graph cost evaluator holding per-edge caches (chordal weights).
#[derive(Clone, Debug)]
pub struct CostModel {
    kind: CostKind,
    chordal_weights: Vec<Covariance12>,
}

impl CostModel {
    pub fn new(kind: CostKind, graph: &PoseGraph) -> Self {
        let chordal_weights = match kind {
            CostKind::Chordal => graph.edges().iter().map(chordal_weight).collect(),
            _ => Vec::new(),
        };
        Self {
            kind,
            chordal_weights,
        }
    }

    pub fn kind(&self) -> CostKind {
        self.kind
    }

    fn tag(&self, k: usize, edge: &Edge, err: Error) -> Error {
        match err {
            Error::AngleAtPi => Error::EdgeAngleAtPi {
                edge: k,
                from: edge.from,
                to: edge.to,
            },
            other => other,
        }
    }

    /// `r^T W r` of edge `k`.
    pub fn chi2(&self, k: usize, edge: &Edge, xi: &Pose, xj: &Pose) -> Result<f64> {
        Ok(match self.kind {
            CostKind::Geodesic => geodesic_residual(edge, xi, xj)
                .map_err(|e| self.tag(k, edge, e))?
                .chi2(),
            CostKind::Chordal => {
                let r = flat(&xi.between(xj)) - flat(&edge.measurement);
                (r.transpose() * self.chordal_weights[k] * r)[(0, 0)]
            }
            CostKind::Langevin => {
                let (kappa, tau) = langevin_parameters(&edge.information);
                let r = flat(&xi.between(xj)) - flat(&edge.measurement);
                kappa * r.rows(0, 9).norm_squared() + tau * r.rows(9, 3).norm_squared()
            }
        })
    }

    pub fn linearize(&self, k: usize, edge: &Edge, xi: &Pose, xj: &Pose) -> Result<EdgeBlocks> {
        Ok(match self.kind {
            CostKind::Geodesic => geodesic_residual(edge, xi, xj)
                .map_err(|e| self.tag(k, edge, e))?
                .blocks(),
            CostKind::Chordal => chordal_residual_weighted(edge, xi, xj, &self.chordal_weights[k]).blocks(),
            CostKind::Langevin => langevin_residual(edge, xi, xj).blocks(),
        })
    }

    /// Total cost `sum 0.5 * rho(r^T W r)` over all edges.
    pub fn total_cost(&self, graph: &PoseGraph, kernel: RobustKernel) -> Result<f64> {
        let mut sum = 0.0;
        for (k, e) in graph.edges().iter().enumerate() {
            let chi2 = self.chi2(k, e, graph.estimate(e.from), graph.estimate(e.to))?;
            sum += 0.5 * apply_robust_kernel(kernel, chi2).0;
        }
        Ok(sum)
    }

    /// Sum of `r^T W r` over all edges, without robust kernel.
    pub fn total_chi2(&self, graph: &PoseGraph) -> Result<f64> {
        let mut sum = 0.0;
        for (k, e) in graph.edges().iter().enumerate() {
            sum += self.chi2(k, e, graph.estimate(e.from), graph.estimate(e.to))?;
        }
        Ok(sum)
    }
}

/// Convenience: total `0.5 * sum r^T W r` of a graph under `kind`.
pub fn graph_cost(graph: &PoseGraph, kind: CostKind) -> Result<f64> {
    CostModel::new(kind, graph).total_cost(graph, RobustKernel::None)
}
