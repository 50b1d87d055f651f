use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use pgo_core::g2o::{read_g2o, write_g2o_file};
use pgo_core::harness::{run_benchmark, write_csv, BenchParams, RunStats};
use pgo_core::hipe::write_skeleton;
use pgo_core::solver::optimize_free;
use pgo_core::{
    absolute_trajectory_error, generate_sphere, hipe_init, initialize, normalized_chi2, CostKind, GeneratorSpec,
    HipeParams, InitKind, LocalInit, SolverConfig,
};

#[derive(Parser)]
#[command(name = "pgo", version, about = "Pose-graph initialization and optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Initialize and optimize a g2o pose graph.
    Optimize(OptimizeArgs),
    /// Generate a synthetic dataset.
    Generate {
        #[command(subcommand)]
        kind: GenerateKind,
    },
    /// Run every (dataset, init, cost) combination and write a CSV.
    Bench(BenchArgs),
    /// Absolute trajectory error of an estimate against a reference.
    Ate {
        estimate: PathBuf,
        reference: PathBuf,
        /// Compare in the stored frames without rigid alignment.
        #[arg(long)]
        no_align: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Odometry,
    SpanningTree,
    Chordal,
    Cauchy,
    Hipe,
}

#[derive(Clone, Copy, ValueEnum)]
enum CostArg {
    Geodesic,
    Chordal,
    Langevin,
}

impl From<CostArg> for CostKind {
    fn from(c: CostArg) -> Self {
        match c {
            CostArg::Geodesic => CostKind::Geodesic,
            CostArg::Chordal => CostKind::Chordal,
            CostArg::Langevin => CostKind::Langevin,
        }
    }
}

#[derive(Args, Clone, Copy)]
struct HipeArgs {
    /// Minimum variables per partition.
    #[arg(long, default_value_t = 100)]
    k: usize,
    /// Minimum hop distance per partition.
    #[arg(long, default_value_t = 50)]
    gamma: usize,
    /// Starting point of each partition's local solve.
    #[arg(long, value_enum, default_value_t = LocalInitArg::Chordal)]
    local_init: LocalInitArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum LocalInitArg {
    Chordal,
    SpanningTree,
}

impl HipeArgs {
    fn params(&self) -> HipeParams {
        HipeParams {
            k: self.k.max(1),
            gamma: self.gamma as f64,
            local_init: match self.local_init {
                LocalInitArg::Chordal => LocalInit::Chordal,
                LocalInitArg::SpanningTree => LocalInit::SpanningTree,
            },
            ..HipeParams::default()
        }
    }

    fn init(&self, arg: InitArg) -> InitKind {
        match arg {
            InitArg::Odometry => InitKind::Odometry,
            InitArg::SpanningTree => InitKind::SpanningTree,
            InitArg::Chordal => InitKind::Chordal,
            InitArg::Cauchy => InitKind::CauchyBoost,
            InitArg::Hipe => InitKind::Hipe(self.params()),
        }
    }
}

#[derive(Args)]
struct OptimizeArgs {
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = InitArg::Hipe)]
    init: InitArg,
    #[arg(long, value_enum, default_value_t = CostArg::Geodesic)]
    cost: CostArg,
    #[command(flatten)]
    hipe: HipeArgs,
    #[arg(long, default_value_t = 10)]
    max_iters: usize,
    /// Optimized graph in g2o format.
    #[arg(long)]
    out: Option<PathBuf>,
    /// One-row CSV with chi2 and timings.
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Single-threaded, reproducible execution.
    #[arg(long)]
    deterministic: bool,
    /// Write the skeleton built by the hierarchical initializer.
    #[arg(long)]
    export_skeleton: Option<PathBuf>,
}

#[derive(Subcommand)]
enum GenerateKind {
    /// Poses on stacked rings around a sphere.
    Sphere {
        #[arg(long, default_value_t = 10_000)]
        nodes: usize,
        #[arg(long, default_value_t = 100.0)]
        radius: f64,
        #[arg(long, default_value_t = 0.03)]
        sigma_rot: f64,
        #[arg(long, default_value_t = 0.01)]
        sigma_trans: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Noisy graph with odometry-chained estimates.
        #[arg(long)]
        out: PathBuf,
        /// Same measurements with the true poses.
        #[arg(long)]
        ground_truth: Option<PathBuf>,
    },
}

#[derive(Args)]
struct BenchArgs {
    /// Glob pattern of g2o files.
    #[arg(long)]
    datasets: String,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "spanning-tree,cauchy,chordal,hipe")]
    inits: Vec<InitArg>,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "geodesic")]
    costs: Vec<CostArg>,
    #[command(flatten)]
    hipe: HipeArgs,
    #[arg(long, default_value_t = 10)]
    max_iters: usize,
    #[arg(long)]
    csv: PathBuf,
    /// Run cells concurrently; timings are then not comparable.
    #[arg(long)]
    parallel: bool,
}

fn thread_cap() -> usize {
    let available = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    std::env::var("PGO_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .map_or(available, |n| n.min(available))
}

fn optimize_cmd(a: OptimizeArgs) -> anyhow::Result<bool> {
    let mut g = read_g2o(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let cost: CostKind = a.cost.into();
    let init = a.hipe.init(a.init);
    if a.export_skeleton.is_some() && !matches!(init, InitKind::Hipe(_)) {
        bail!("--export-skeleton requires --init hipe");
    }
    if a.deterministic {
        log::debug!("deterministic mode: single-threaded");
    }

    let t0 = Instant::now();
    g.anchor_components();
    match &init {
        InitKind::Hipe(params) => {
            let report = hipe_init(&mut g, params)?;
            log::info!(
                "hipe: {} partitions, skeleton {} variables / {} edges; partition {:.3}s, skeleton {:.3}s, propagate {:.3}s",
                report.partitions,
                report.skeleton_variables,
                report.skeleton_edges,
                report.t_partition,
                report.t_skeleton,
                report.t_propagate
            );
            if let Some(path) = &a.export_skeleton {
                write_skeleton(&report.skeleton, BufWriter::new(File::create(path)?))?;
            }
        }
        other => initialize(&mut g, other)?,
    }
    let t_init = t0.elapsed().as_secs_f64();
    let chi2_init = normalized_chi2(&g, cost)?;

    let t1 = Instant::now();
    let report = if a.max_iters == 0 {
        Default::default()
    } else {
        let cfg = SolverConfig {
            max_iterations: a.max_iters,
            ..SolverConfig::with_cost(cost)
        };
        optimize_free(&mut g, &cfg)?
    };
    let t_opt = t1.elapsed().as_secs_f64();
    let chi2_final = normalized_chi2(&g, cost)?;
    println!(
        "{} {} {}: chi2 {:.6} -> {:.6}, {} iterations, init {:.3}s, opt {:.3}s",
        a.input.display(),
        init.name(),
        cost.name(),
        chi2_init,
        chi2_final,
        report.iterations,
        t_init,
        t_opt
    );

    if let Some(out) = &a.out {
        write_g2o_file(&g, out)?;
    }
    if let Some(stats) = &a.stats {
        let row = RunStats {
            dataset: pgo_core::harness::dataset_name(&a.input),
            init: init.name().to_string(),
            cost: cost.name().to_string(),
            chi2_init,
            chi2_final,
            iters: report.iterations,
            t_init_s: t_init,
            t_opt_s: t_opt,
            t_total_s: t_init + t_opt,
            error: String::new(),
        };
        write_csv(&[row], BufWriter::new(File::create(stats)?))?;
    }
    Ok(true)
}

fn bench_cmd(a: BenchArgs) -> anyhow::Result<bool> {
    let mut datasets = Vec::new();
    for entry in glob::glob(&a.datasets).context("invalid dataset pattern")? {
        datasets.push(entry?);
    }
    datasets.sort();
    let inits: Vec<InitKind> = a.inits.iter().map(|&i| a.hipe.init(i)).collect();
    let costs: Vec<CostKind> = a.costs.iter().map(|&c| c.into()).collect();
    let params = BenchParams {
        max_iterations: a.max_iters,
        threads: if a.parallel { thread_cap() } else { 1 },
    };
    if a.parallel {
        log::warn!("parallel benchmark: timings are not comparable across cells");
    }
    let stats = run_benchmark(&datasets, &inits, &costs, &params);
    write_csv(&stats, BufWriter::new(File::create(&a.csv)?))?;
    for s in &stats {
        if s.is_ok() {
            println!(
                "{:<20} {:<14} {:<9} chi2 {:>12.4} -> {:>10.4}  iters {:>2}  {:>8.3}s",
                s.dataset, s.init, s.cost, s.chi2_init, s.chi2_final, s.iters, s.t_total_s
            );
        } else {
            eprintln!("{} {} {}: {}", s.dataset, s.init, s.cost, s.error);
        }
    }
    Ok(stats.iter().all(RunStats::is_ok))
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Optimize(a) => optimize_cmd(a),
        Command::Generate {
            kind:
                GenerateKind::Sphere {
                    nodes,
                    radius,
                    sigma_rot,
                    sigma_trans,
                    seed,
                    out,
                    ground_truth,
                },
        } => {
            if nodes < 2 || sigma_rot < 0.0 || sigma_trans < 0.0 {
                bail!("need --nodes >= 2 and non-negative sigmas");
            }
            let (gt, noisy) = generate_sphere(&GeneratorSpec {
                node_count: nodes,
                radius,
                sigma_rot,
                sigma_trans,
                seed,
            });
            write_g2o_file(&noisy, &out)?;
            if let Some(path) = ground_truth {
                write_g2o_file(&gt, &path)?;
            }
            println!("{} variables, {} edges", noisy.len(), noisy.edge_count());
            Ok(true)
        }
        Command::Bench(a) => bench_cmd(a),
        Command::Ate {
            estimate,
            reference,
            no_align,
        } => {
            let est = read_g2o(&estimate)?;
            let reference = read_g2o(&reference)?;
            let ate = absolute_trajectory_error(&est, &reference, !no_align)?;
            println!("ate_rot {:.6} rad\nate_trans {:.6} m", ate.rotation, ate.translation);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
