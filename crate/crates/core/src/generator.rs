//! Synthetic sphere datasets: a vehicle circling a sphere on stacked rings,
//! with odometry and loop closures between neighboring rings.

use std::f64::consts::PI;

use nalgebra::{Matrix6, Vector3, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::graph::{Edge, PoseGraph};
use crate::se3::{exp_se3, Pose, Rotation};

/// Poses per ring.
pub const NODES_PER_RING: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorSpec {
    pub node_count: usize,
    pub radius: f64,
    pub sigma_rot: f64,
    pub sigma_trans: f64,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            node_count: 10_000,
            radius: 100.0,
            sigma_rot: 0.03,
            sigma_trans: 0.01,
            seed: 0,
        }
    }
}

/// Ground-truth poses: ring `f` of `laps`, azimuth step `nn`.
fn sphere_poses(n: usize, radius: f64) -> Vec<Pose> {
    let laps = n.div_ceil(NODES_PER_RING).max(1);
    let per_ring = NODES_PER_RING as f64;
    (0..n)
        .map(|id| {
            let nn = id % NODES_PER_RING;
            let azimuth = -PI + 2.0 * PI * nn as f64 / per_ring;
            let elevation = -PI / 2.0 + id as f64 * PI / (laps as f64 * per_ring);
            let r = Rotation::from_axis_angle(&Vector3::z_axis(), azimuth)
                * Rotation::from_axis_angle(&Vector3::y_axis(), elevation);
            Pose::new(r, r * Vector3::new(radius, 0.0, 0.0))
        })
        .collect()
}

/// Edge list: odometry `(i, i+1)` and, for every pose of every ring but the
/// last, closures to the three nearest poses of the next ring. The last
/// ring only gets two per pose so no index runs past the end.
fn sphere_edges(n: usize) -> Vec<(usize, usize)> {
    let mut edges: Vec<(usize, usize)> = (1..n).map(|i| (i - 1, i)).collect();
    let laps = n / NODES_PER_RING;
    for f in 1..laps {
        for nn in 0..NODES_PER_RING {
            for d in [-1i64, 0, 1] {
                if f == laps - 1 && d == 1 {
                    continue;
                }
                let from = (f - 1) * NODES_PER_RING + nn;
                let to = ((f * NODES_PER_RING + nn) as i64 + d) as usize;
                edges.push((from, to));
            }
        }
    }
    edges
}

fn information(spec: &GeneratorSpec) -> Matrix6<f64> {
    let inv = |s: f64| if s > 0.0 { 1.0 / (s * s) } else { 1.0 };
    let (t, r) = (inv(spec.sigma_trans), inv(spec.sigma_rot));
    Matrix6::from_diagonal(&Vector6::new(t, t, t, r, r, r))
}

/// Returns `(ground_truth, noisy)`. Both graphs carry the same (noisy)
/// measurements; the ground truth holds the true poses, the noisy graph the
/// odometry chain of the noisy measurements. Variable 0 is fixed in both.
pub fn generate_sphere(spec: &GeneratorSpec) -> (PoseGraph, PoseGraph) {
    assert!(spec.node_count >= 2, "need at least two nodes");
    let truth = sphere_poses(spec.node_count, spec.radius);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let nt = Normal::new(0.0, spec.sigma_trans.max(0.0)).expect("valid sigma");
    let nr = Normal::new(0.0, spec.sigma_rot.max(0.0)).expect("valid sigma");
    let info = information(spec);

    let mut gt = PoseGraph::new();
    for (id, p) in truth.iter().enumerate() {
        gt.add_variable(id, *p).expect("unique ids");
    }
    for (i, j) in sphere_edges(spec.node_count) {
        let xi = Vector6::new(
            nt.sample(&mut rng),
            nt.sample(&mut rng),
            nt.sample(&mut rng),
            nr.sample(&mut rng),
            nr.sample(&mut rng),
            nr.sample(&mut rng),
        );
        let z = truth[i].between(&truth[j]).compose(&exp_se3(&xi));
        gt.add_edge(Edge::new(i, j, z, info)).expect("valid edge");
    }
    gt.set_fixed(0, true);

    let mut noisy = gt.clone();
    let mut pose = truth[0];
    for e in gt.edges().iter().take(spec.node_count - 1) {
        pose = pose.compose(&e.measurement);
        noisy.set_estimate(e.to, pose);
    }
    (gt, noisy)
}

/// Edge count produced for `n` nodes.
pub fn sphere_edge_count(n: usize) -> usize {
    sphere_edges(n).len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costs::{graph_cost, CostKind};
    use crate::g2o::to_g2o_string;
    use crate::se3::log_se3;

    #[test]
    fn edge_count_formula() {
        for n in [100, 500, 5000, 10_000] {
            let npl = NODES_PER_RING;
            assert_eq!(sphere_edge_count(n), n - 1 + 3 * (n - npl) - npl);
        }
        assert_eq!(sphere_edge_count(10_000), 39_799);
    }

    #[test]
    fn noise_free_is_consistent() {
        let spec = GeneratorSpec {
            node_count: 500,
            sigma_rot: 0.0,
            sigma_trans: 0.0,
            ..GeneratorSpec::default()
        };
        let (gt, noisy) = generate_sphere(&spec);
        assert!(graph_cost(&gt, CostKind::Geodesic).unwrap() < 1e-12);
        assert!(graph_cost(&noisy, CostKind::Geodesic).unwrap() < 1e-9);
    }

    #[test]
    fn poses_lie_on_sphere() {
        for p in sphere_poses(300, 7.0) {
            assert!((p.translation.norm() - 7.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let spec = GeneratorSpec {
            node_count: 200,
            seed: 42,
            ..GeneratorSpec::default()
        };
        let a = to_g2o_string(&generate_sphere(&spec).1);
        let b = to_g2o_string(&generate_sphere(&spec).1);
        assert_eq!(a, b);
        let other = to_g2o_string(&generate_sphere(&GeneratorSpec { seed: 43, ..spec }).1);
        assert_ne!(a, other);
    }

    #[test]
    fn injected_noise_has_requested_spread() {
        let spec = GeneratorSpec {
            node_count: 3000,
            sigma_rot: 0.05,
            sigma_trans: 0.2,
            seed: 7,
            ..GeneratorSpec::default()
        };
        let (gt, _) = generate_sphere(&spec);
        let mut sum = Vector6::<f64>::zeros();
        let m = gt.edge_count() as f64;
        assert!(m >= 10_000.0);
        for e in gt.edges() {
            let truth = gt.estimate(e.from).between(gt.estimate(e.to));
            let xi = log_se3(&truth.inverse().compose(&e.measurement)).unwrap();
            sum += xi.component_mul(&xi);
        }
        for k in 3..6 {
            let std = (sum[k] / m).sqrt();
            assert!((std / spec.sigma_rot - 1.0).abs() < 0.05, "axis {k}: {std}");
        }
    }
}
