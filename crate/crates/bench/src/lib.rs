//! Fixtures shared by the benchmarks.

use pgo_core::{generate_sphere, GeneratorSpec, InitKind, PoseGraph};

/// Noisy sphere with `nodes` poses, started from chordal initialization.
pub fn initialized_sphere(nodes: usize, seed: u64) -> PoseGraph {
    let mut g = noisy_sphere(nodes, seed);
    pgo_core::initialize(&mut g, &InitKind::Chordal).expect("connected sphere");
    g
}

/// Noisy sphere with the odometry-chained start.
pub fn noisy_sphere(nodes: usize, seed: u64) -> PoseGraph {
    generate_sphere(&GeneratorSpec {
        node_count: nodes,
        seed,
        ..GeneratorSpec::default()
    })
    .1
}
