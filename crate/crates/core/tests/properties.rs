use std::collections::{BTreeSet, HashSet};

use nalgebra::{Matrix3, Matrix6, Vector3};
use proptest::prelude::*;

use pgo_core::costs::{apply_robust_kernel, chordal_weight, graph_cost};
use pgo_core::g2o::{parse_g2o_str, to_g2o_string};
use pgo_core::hipe::build_skeleton;
use pgo_core::se3::{exp_se3, log_se3, project_to_so3, Tangent};
use pgo_core::solver::{build_normal_equations, dense_hessian};
use pgo_core::{CostKind, Edge, HipeParams, Pose, PoseGraph, RobustKernel};

fn tangent(max_angle: f64) -> impl Strategy<Value = Tangent> {
    (
        prop::array::uniform3(-20.0..20.0f64),
        prop::array::uniform3(-1.0..1.0f64),
        0.0..max_angle,
    )
        .prop_filter_map("non-zero axis", |(rho, axis, angle)| {
            let a = Vector3::from(axis);
            (a.norm() > 1e-3).then(|| {
                let phi = a.normalize() * angle;
                Tangent::new(rho[0], rho[1], rho[2], phi.x, phi.y, phi.z)
            })
        })
}

fn pose() -> impl Strategy<Value = Pose> {
    tangent(3.0).prop_map(|v| exp_se3(&v))
}

fn information() -> impl Strategy<Value = Matrix6<f64>> {
    prop::array::uniform32(-0.5..0.5f64).prop_map(|v| {
        let a = Matrix6::from_fn(|r, c| v[(r * 6 + c) % 32]);
        a * a.transpose() + Matrix6::identity()
    })
}

/// Connected graph: a random tree plus a few extra edges, variable 0 fixed.
fn graph(max_nodes: usize) -> impl Strategy<Value = PoseGraph> {
    (2..max_nodes).prop_flat_map(|n| {
        (
            prop::collection::vec(pose(), n),
            prop::collection::vec(0.0..1.0f64, n),
            prop::collection::vec((0..n, 0..n), 0..n),
            prop::collection::vec((tangent(0.2), information()), 2 * n),
        )
            .prop_map(move |(poses, parents, extra, noise)| {
                let mut g = PoseGraph::new();
                for (id, p) in poses.iter().enumerate() {
                    g.add_variable(id, *p).unwrap();
                }
                let mut pairs: Vec<(usize, usize)> =
                    (1..n).map(|i| ((parents[i] * i as f64) as usize, i)).collect();
                pairs.extend(extra.into_iter().filter(|(a, b)| a != b));
                for ((a, b), (xi, info)) in pairs.into_iter().zip(noise.iter().cycle()) {
                    let z = poses[a].between(&poses[b]).compose(&exp_se3(xi));
                    g.add_edge(Edge::new(a, b, z, *info)).unwrap();
                }
                g.set_fixed(0, true);
                g
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exp_log_round_trip(v in tangent(std::f64::consts::PI - 1e-3)) {
        let back = log_se3(&exp_se3(&v)).unwrap();
        prop_assert!((back - v).amax() < 1e-9);
    }

    #[test]
    fn projection_is_a_rotation(m in prop::array::uniform9(-2.0..2.0f64)) {
        let a = Matrix3::from_row_slice(&m);
        if let Ok(r) = project_to_so3(&a) {
            let r = r.matrix();
            prop_assert!((r.transpose() * r - Matrix3::identity()).amax() < 1e-10);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn cauchy_weight_decreases_and_rho_saturates(a in 0.0..1e4f64, b in 0.0..1e4f64, c in 0.1..10.0f64) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let (rho_lo, w_lo) = apply_robust_kernel(RobustKernel::Cauchy(c), lo);
        let (rho_hi, w_hi) = apply_robust_kernel(RobustKernel::Cauchy(c), hi);
        prop_assert!(w_hi <= w_lo);
        prop_assert!(w_lo <= 1.0 && w_hi > 0.0);
        prop_assert!(rho_lo <= rho_hi);
        prop_assert!(rho_hi <= hi + 1e-9);
    }

    #[test]
    fn chordal_weight_is_psd_with_rank_at_most_six(z in pose(), info in information()) {
        let w = chordal_weight(&Edge::new(0, 1, z, info));
        let eig = ((w + w.transpose()) * 0.5).symmetric_eigen();
        let largest = eig.eigenvalues.amax();
        let mut values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        values.sort_by(|a, b| b.partial_cmp(a).unwrap());
        prop_assert!(values.iter().all(|&e| e > -1e-8 * largest));
        prop_assert!(values[6..].iter().all(|&e| e.abs() < 1e-8 * largest));
    }

    #[test]
    fn cost_is_invariant_under_left_composition(g in graph(12), t in pose()) {
        let mut moved = g.clone();
        moved.transform(&t);
        for cost in CostKind::ALL {
            let a = graph_cost(&g, cost).unwrap();
            let b = graph_cost(&moved, cost).unwrap();
            prop_assert!((a - b).abs() <= 1e-6 * a.max(1e-12), "{cost}: {a} vs {b}");
        }
    }

    #[test]
    fn sparse_hessian_matches_dense(g in graph(15)) {
        let free = g.free_ids();
        for cost in CostKind::ALL {
            let sys = build_normal_equations(&g, cost, RobustKernel::None, &free).unwrap();
            let dense = dense_hessian(&g, cost, &free).unwrap();
            let scale = dense.amax().max(1.0);
            prop_assert!((sys.hessian.to_dense() - dense).amax() < 1e-9 * scale);
        }
    }

    #[test]
    fn partitions_cover_and_skeleton_is_deterministic(g in graph(40), k in 1usize..10, gamma in 0usize..4) {
        let params = HipeParams { k, gamma: gamma as f64, ..HipeParams::default() };
        let (sk, parts) = build_skeleton(&g, &params).unwrap();
        let mut interiors = HashSet::new();
        for p in &parts {
            prop_assert!(p.variables.contains(&p.anchor));
            prop_assert!(p.variables.is_disjoint(&p.boundary));
            for v in &p.variables {
                prop_assert!(interiors.insert(*v));
            }
        }
        let covered: BTreeSet<usize> = parts.iter().flat_map(|p| p.local_variables()).collect();
        prop_assert_eq!(covered, g.ids().collect::<BTreeSet<_>>());
        let boundary_total: usize = parts.iter().map(|p| p.boundary.len()).sum();
        prop_assert_eq!(sk.graph.edge_count(), boundary_total);

        let (again, _) = build_skeleton(&g, &params).unwrap();
        prop_assert_eq!(to_g2o_string(&again.graph), to_g2o_string(&sk.graph));
    }

    #[test]
    fn g2o_text_round_trip(g in graph(10)) {
        let back = parse_g2o_str(&to_g2o_string(&g)).unwrap();
        prop_assert_eq!(back.len(), g.len());
        prop_assert_eq!(back.edge_count(), g.edge_count());
        for id in g.ids() {
            let (a, b) = (g.estimate(id), back.estimate(id));
            prop_assert!((a.to_homogeneous() - b.to_homogeneous()).amax() < 1e-12);
            prop_assert_eq!(g.is_fixed(id), back.is_fixed(id));
        }
        for (a, b) in g.edges().iter().zip(back.edges()) {
            prop_assert_eq!((a.from, a.to), (b.from, b.to));
            prop_assert!((a.information - b.information).amax() < 1e-9 * a.information.amax());
        }
    }
}
