//! Evaluation metrics: normalized chi2 and absolute trajectory error.

use nalgebra::{Matrix3, Vector3};

use crate::costs::{CostKind, CostModel};
use crate::error::{Error, Result};
use crate::graph::PoseGraph;
use crate::se3::{rotation_angle, Pose, Rotation};

/// `sum_ij r_ij^T W_ij r_ij / (6 (m - n))`.
///
/// When `m <= n` the raw sum is returned and a warning is logged.
pub fn normalized_chi2(graph: &PoseGraph, cost: CostKind) -> Result<f64> {
    let sum = CostModel::new(cost, graph).total_chi2(graph)?;
    let (m, n) = (graph.edge_count(), graph.len());
    if m <= n {
        log::warn!("normalized chi2: {m} edges for {n} variables, returning the raw sum");
        return Ok(sum);
    }
    Ok(sum / (6.0 * (m - n) as f64))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ate {
    /// RMS of the rotation angles between aligned and reference poses.
    pub rotation: f64,
    /// RMS of the translation distances between aligned and reference poses.
    pub translation: f64,
}

/// Rigid transform `T` minimizing `sum |T p_i - q_i|^2` (Kabsch/Umeyama
/// without scale).
pub fn align_translations(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Pose {
    let n = src.len().max(1) as f64;
    let cs = src.iter().sum::<Vector3<f64>>() / n;
    let cd = dst.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (p, q) in src.iter().zip(dst) {
        h += (q - cd) * (p - cs).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let d = (u * v_t).determinant().signum();
    let r = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * v_t;
    let rot = Rotation::from_matrix_unchecked(r);
    Pose::new(rot, cd - rot * cs)
}

/// ATE of `estimate` against `reference`; with `align`, the estimate is
/// first moved by the best rigid alignment of the positions.
pub fn absolute_trajectory_error(estimate: &PoseGraph, reference: &PoseGraph, align: bool) -> Result<Ate> {
    if estimate.len() != reference.len() || estimate.ids().zip(reference.ids()).any(|(a, b)| a != b) {
        return Err(Error::IdMismatch);
    }
    if estimate.is_empty() {
        return Err(Error::EmptyInput);
    }
    let src: Vec<Vector3<f64>> = estimate.variables().map(|v| v.estimate.translation).collect();
    let dst: Vec<Vector3<f64>> = reference.variables().map(|v| v.estimate.translation).collect();
    let t = if align {
        align_translations(&src, &dst)
    } else {
        Pose::identity()
    };
    let (mut rot, mut trans) = (0.0, 0.0);
    for (e, r) in estimate.variables().zip(reference.variables()) {
        let aligned = t.compose(&e.estimate);
        trans += (aligned.translation - r.estimate.translation).norm_squared();
        rot += rotation_angle(&(aligned.rotation.inverse() * r.estimate.rotation)).powi(2);
    }
    let n = estimate.len() as f64;
    Ok(Ate {
        rotation: (rot / n).sqrt(),
        translation: (trans / n).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Edge, Information};
    use crate::se3::{exp_se3, Tangent};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn trajectory(n: usize, seed: u64) -> PoseGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = PoseGraph::new();
        for i in 0..n {
            g.add_variable(i, exp_se3(&Tangent::from_fn(|_, _| rng.random_range(-3.0..3.0))))
                .unwrap();
        }
        g
    }

    #[test]
    fn chi2_zero_at_truth_and_degenerate_sum() {
        let mut g = trajectory(3, 1);
        for (i, j) in [(0, 1), (1, 2), (0, 2), (2, 0)] {
            let z = g.estimate(i).between(g.estimate(j));
            g.add_edge(Edge::new(i, j, z, Information::identity())).unwrap();
        }
        assert!(normalized_chi2(&g, CostKind::Geodesic).unwrap() < 1e-20);

        let mut h = trajectory(2, 2);
        h.add_edge(Edge::new(0, 1, Pose::from_translation(Vector3::new(1.0, 0.0, 0.0)), Information::identity()))
            .unwrap();
        h.set_estimate(0, Pose::identity());
        h.set_estimate(1, Pose::identity());
        // m < n: raw sum of r^T W r
        assert!((normalized_chi2(&h, CostKind::Chordal).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ate_identical_and_gauge() {
        let g = trajectory(20, 3);
        let ate = absolute_trajectory_error(&g, &g, true).unwrap();
        assert!(ate.rotation < 1e-7 && ate.translation < 1e-9);
        let mut moved = g.clone();
        moved.transform(&exp_se3(&Tangent::new(5.0, -1.0, 2.0, 0.4, -1.2, 0.7)));
        let ate = absolute_trajectory_error(&moved, &g, true).unwrap();
        assert!(ate.rotation < 1e-6 && ate.translation < 1e-9, "{ate:?}");
        let raw = absolute_trajectory_error(&moved, &g, false).unwrap();
        assert!(raw.translation > 1.0);
    }

    #[test]
    fn ate_id_mismatch() {
        let a = trajectory(3, 4);
        let b = trajectory(4, 4);
        assert!(matches!(absolute_trajectory_error(&a, &b, true), Err(Error::IdMismatch)));
    }

    #[test]
    fn ate_matches_brute_force_alignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let reference = trajectory(10, 6);
        let mut est = reference.clone();
        for id in 0..10 {
            let dir = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
                .normalize();
            let p = *est.estimate(id);
            est.set_estimate(id, Pose::new(p.rotation, p.translation + dir));
        }
        let ate = absolute_trajectory_error(&est, &reference, true).unwrap();
        let rms = |t: &Pose| {
            let s: f64 = (0..10)
                .map(|i| (t.compose(est.estimate(i)).translation - reference.estimate(i).translation).norm_squared())
                .sum();
            (s / 10.0).sqrt()
        };
        // coarse search around identity followed by coordinate refinement
        let mut best = Tangent::zeros();
        let mut best_val = rms(&Pose::identity());
        let mut step = 0.2;
        while step > 1e-7 {
            let mut improved = false;
            for k in 0..6 {
                for s in [-step, step] {
                    let mut c = best;
                    c[k] += s;
                    let v = rms(&exp_se3(&c));
                    if v < best_val {
                        best_val = v;
                        best = c;
                        improved = true;
                    }
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
        assert!(ate.translation <= best_val + 1e-9);
        assert!((ate.translation - best_val).abs() < 1e-6, "{} vs {best_val}", ate.translation);
    }
}
