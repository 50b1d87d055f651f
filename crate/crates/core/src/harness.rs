//! Benchmark orchestration: initialize, measure chi2, refine, record.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::Serialize;

use crate::costs::CostKind;
use crate::error::Result;
use crate::g2o::read_g2o;
use crate::graph::PoseGraph;
use crate::init::{initialize, InitKind};
use crate::metrics::normalized_chi2;
use crate::solver::{optimize_free, SolverConfig};

pub const CSV_HEADER: [&str; 10] = [
    "dataset",
    "init",
    "cost",
    "chi2_init",
    "chi2_final",
    "iters",
    "t_init_s",
    "t_opt_s",
    "t_total_s",
    "error",
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunStats {
    pub dataset: String,
    pub init: String,
    pub cost: String,
    pub chi2_init: f64,
    pub chi2_final: f64,
    pub iters: usize,
    pub t_init_s: f64,
    pub t_opt_s: f64,
    pub t_total_s: f64,
    pub error: String,
}

impl RunStats {
    fn failed(dataset: &str, init: &InitKind, cost: CostKind, err: String) -> Self {
        Self {
            dataset: dataset.to_string(),
            init: init.name().to_string(),
            cost: cost.name().to_string(),
            chi2_init: f64::NAN,
            chi2_final: f64::NAN,
            iters: 0,
            t_init_s: 0.0,
            t_opt_s: 0.0,
            t_total_s: 0.0,
            error: err,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.error.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchParams {
    /// Fine-grained iteration budget.
    pub max_iterations: usize,
    /// Number of cells run concurrently; 1 keeps timings comparable.
    pub threads: usize,
}

impl Default for BenchParams {
    fn default() -> Self {
        Self {
            max_iterations: 10,
            threads: 1,
        }
    }
}

/// Initializes `graph` in place, then refines it. Failures are reported in
/// the `error` field.
pub fn run_single(graph: &mut PoseGraph, dataset: &str, init: &InitKind, cost: CostKind, max_iterations: usize) -> RunStats {
    match try_run(graph, dataset, init, cost, max_iterations) {
        Ok(s) => s,
        Err(e) => RunStats::failed(dataset, init, cost, e.to_string()),
    }
}

fn try_run(graph: &mut PoseGraph, dataset: &str, init: &InitKind, cost: CostKind, max_iterations: usize) -> Result<RunStats> {
    let t0 = Instant::now();
    initialize(graph, init)?;
    let t_init = t0.elapsed().as_secs_f64();
    let chi2_init = normalized_chi2(graph, cost)?;
    let cfg = SolverConfig {
        max_iterations: max_iterations.max(1),
        ..SolverConfig::with_cost(cost)
    };
    let t1 = Instant::now();
    let report = if max_iterations == 0 {
        Default::default()
    } else {
        optimize_free(graph, &cfg)?
    };
    let t_opt = t1.elapsed().as_secs_f64();
    Ok(RunStats {
        dataset: dataset.to_string(),
        init: init.name().to_string(),
        cost: cost.name().to_string(),
        chi2_init,
        chi2_final: normalized_chi2(graph, cost)?,
        iters: report.iterations,
        t_init_s: t_init,
        t_opt_s: t_opt,
        t_total_s: t_init + t_opt,
        error: String::new(),
    })
}

pub fn dataset_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Every `(dataset, init, cost)` cell, in that nesting order.
pub fn run_benchmark(datasets: &[PathBuf], inits: &[InitKind], costs: &[CostKind], params: &BenchParams) -> Vec<RunStats> {
    let mut cells = Vec::new();
    for (d, path) in datasets.iter().enumerate() {
        for init in inits {
            for &cost in costs {
                cells.push((d, path, *init, cost));
            }
        }
    }
    let loaded: Vec<Mutex<Option<std::result::Result<PoseGraph, String>>>> =
        datasets.iter().map(|_| Mutex::new(None)).collect();
    let load = |d: usize, path: &Path| -> std::result::Result<PoseGraph, String> {
        let mut slot = loaded[d].lock().expect("dataset lock");
        slot.get_or_insert_with(|| read_g2o(path).map_err(|e| e.to_string()))
            .clone()
    };
    let run_cell = |&(d, path, init, cost): &(usize, &PathBuf, InitKind, CostKind)| -> RunStats {
        let name = dataset_name(path);
        match load(d, path) {
            Ok(mut g) => {
                let s = run_single(&mut g, &name, &init, cost, params.max_iterations);
                log::info!(
                    "{name} {} {}: chi2 {:.4} -> {:.4} in {} iterations ({:.2}s)",
                    s.init,
                    s.cost,
                    s.chi2_init,
                    s.chi2_final,
                    s.iters,
                    s.t_total_s
                );
                s
            }
            Err(e) => RunStats::failed(&name, &init, cost, e),
        }
    };

    let threads = params.threads.max(1).min(cells.len().max(1));
    if threads == 1 {
        return cells.iter().map(run_cell).collect();
    }
    let results: Vec<Mutex<Option<RunStats>>> = cells.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= cells.len() {
                    break;
                }
                let r = run_cell(&cells[i]);
                *results[i].lock().expect("result lock") = Some(r);
            });
        }
    });
    results
        .into_iter()
        .map(|m| m.into_inner().expect("result lock").expect("cell ran"))
        .collect()
}

pub fn write_csv<W: Write>(stats: &[RunStats], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_HEADER)?;
    for s in stats {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::g2o::write_g2o_file;
    use crate::generator::{generate_sphere, GeneratorSpec};

    #[test]
    fn empty_benchmark_is_header_only() {
        let stats = run_benchmark(&[], &[InitKind::Chordal], &[CostKind::Geodesic], &BenchParams::default());
        let mut out = Vec::new();
        write_csv(&stats, &mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "dataset,init,cost,chi2_init,chi2_final,iters,t_init_s,t_opt_s,t_total_s,error\n"
        );
    }

    #[test]
    fn row_count_and_failure_capture() {
        let dir = std::env::temp_dir().join(format!("pgo-harness-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let good = dir.join("small.g2o");
        let (_, noisy) = generate_sphere(&GeneratorSpec {
            node_count: 150,
            seed: 3,
            ..GeneratorSpec::default()
        });
        write_g2o_file(&noisy, &good).unwrap();
        let missing = dir.join("missing.g2o");
        let inits = [InitKind::SpanningTree, InitKind::Chordal];
        let costs = [CostKind::Geodesic, CostKind::Chordal];
        for threads in [1, 3] {
            let stats = run_benchmark(
                &[good.clone(), missing.clone()],
                &inits,
                &costs,
                &BenchParams { threads, ..BenchParams::default() },
            );
            assert_eq!(stats.len(), 2 * 2 * 2);
            assert!(stats[..4].iter().all(RunStats::is_ok));
            assert!(stats[4..].iter().all(|s| !s.is_ok()));
            for s in &stats[..4] {
                assert!(s.chi2_final <= s.chi2_init + 1e-12);
                assert!((s.t_total_s - s.t_init_s - s.t_opt_s).abs() < 1e-9);
            }
            let mut out = Vec::new();
            write_csv(&stats, &mut out).unwrap();
            assert_eq!(String::from_utf8(out).unwrap().lines().count(), 9);
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
