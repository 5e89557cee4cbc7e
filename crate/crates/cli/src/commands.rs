use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::Context;
use dede_core::canonical::canonicalize;
use dede_core::cases::{
    perturb, CaseError, ClusterInstance, ClusterVariant, Instance, LoadBalanceInstance, Perturbation, TrafficInstance,
    TrafficParams, TrafficVariant,
};
use dede_core::engine::{Engine, SolveOptions, SolveReport, Termination};
use dede_core::format::{parse_problem, parse_solution, write_problem, ProblemFile, SolutionFile};
use dede_core::model::ProblemSpec;
use dede_core::parallel::default_workers;

use crate::oracle::reference_objective;
use crate::{
    BenchArgs, ClusterObjective, CompareArgs, EngineFlags, GenArgs, GenKind, PerturbKind, SolveArgs, TrafficObjective,
};

pub const TRACE_HEADER: [&str; 7] = ["iter", "primal_res", "dual_res", "rho", "objective", "x_step_ms", "z_step_ms"];
pub const COMPARE_HEADER: [&str; 7] = ["instance", "oracle_obj", "engine_obj", "rel_gap", "oracle_ms", "engine_ms", "iters"];
pub const BENCH_HEADER: [&str; 8] = [
    "mode",
    "workers",
    "rep",
    "wall_ms",
    "iters",
    "objective_raw",
    "objective_repaired",
    "termination",
];
const UNAVAILABLE: &str = "NA";

/// Command failure mapped to a process exit code.
#[derive(Debug)]
pub enum Failure {
    /// Malformed or inconsistent input: exit 2.
    Invalid(anyhow::Error),
    /// The instance cannot have a feasible allocation: exit 3.
    Infeasible(String),
    /// Anything else (I/O on outputs, failed checks): exit 1.
    Other(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => 2,
            Failure::Infeasible(_) => 3,
            Failure::Other(_) => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Invalid(e) => write!(f, "invalid input: {e:#}"),
            Failure::Infeasible(msg) => write!(f, "structurally infeasible: {msg}"),
            Failure::Other(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn invalid(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Invalid(e.into())
}

struct Loaded {
    problem: ProblemSpec,
    file: ProblemFile,
    bytes: Vec<u8>,
}

/// Reads and validates a problem file, including the structural check of an
/// embedded generator record.
fn load_problem(path: &Path) -> Result<Loaded> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display())).map_err(invalid)?;
    let text = std::str::from_utf8(&bytes)
        .with_context(|| format!("{} is not UTF-8", path.display()))
        .map_err(invalid)?;
    let (problem, file) = parse_problem(text)
        .with_context(|| format!("{}", path.display()))
        .map_err(invalid)?;
    if let Some(case) = &file.case {
        match case.check_structure() {
            Ok(()) => {}
            Err(e @ CaseError::FootprintExceedsMemory { .. }) => return Err(Failure::Infeasible(e.to_string())),
            Err(e) => return Err(invalid(anyhow::Error::new(e).context(path.display().to_string()))),
        }
    }
    Ok(Loaded { problem, file, bytes })
}

fn options(flags: &EngineFlags) -> SolveOptions {
    SolveOptions {
        rho0: flags.rho,
        max_iters: flags.max_iters,
        time_budget: flags.time_budget_ms.map(Duration::from_millis),
        eps_abs: flags.eps_abs,
        eps_rel: flags.eps_rel,
        workers: flags.workers.unwrap_or_else(default_workers),
        deterministic: flags.deterministic,
        ..SolveOptions::default()
    }
}

fn run_engine(problem: &ProblemSpec, opts: SolveOptions) -> Result<SolveReport> {
    let canonical = canonicalize(problem).map_err(invalid)?;
    let engine = Engine::new(&canonical, opts).map_err(invalid)?;
    engine.solve().context("engine failed").map_err(Failure::Other)
}

/// Writes to `path`, or to stdout when absent.
fn emit(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match path {
        Some(p) => fs::write(p, bytes).with_context(|| format!("cannot write {}", p.display()))?,
        None => std::io::stdout().write_all(bytes).context("cannot write to stdout")?,
    }
    Ok(())
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::Writer::from_writer(Vec::new())
}

fn csv_bytes(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    Ok(w.into_inner().map_err(|e| anyhow::anyhow!("csv: {e}"))?)
}

fn csv_err(e: csv::Error) -> Failure {
    Failure::Other(e.into())
}

pub fn trace_csv(report: &SolveReport) -> Result<Vec<u8>> {
    let mut w = csv_writer();
    w.write_record(TRACE_HEADER).map_err(csv_err)?;
    for r in &report.trace {
        w.write_record([
            r.iter.to_string(),
            r.primal.to_string(),
            r.dual.to_string(),
            r.rho.to_string(),
            r.objective.to_string(),
            r.x_step_ms.to_string(),
            r.z_step_ms.to_string(),
        ])
        .map_err(csv_err)?;
    }
    csv_bytes(w)
}

pub fn solve(args: &SolveArgs) -> Result<()> {
    let loaded = load_problem(&args.input)?;
    let mut opts = options(&args.engine);
    if let Some(path) = &args.warm_start {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read {}", path.display()))
            .map_err(invalid)?;
        let prior = parse_solution(&text).with_context(|| path.display().to_string()).map_err(invalid)?;
        let state = prior
            .warm_state_for(&loaded.problem)
            .with_context(|| path.display().to_string())
            .map_err(invalid)?;
        opts.warm_start = Some(state);
    }
    let report = run_engine(&loaded.problem, opts)?;
    if let Some(path) = &args.trace {
        emit(Some(path), &trace_csv(&report)?)?;
    }
    let solution = SolutionFile::from_report(&report, &loaded.problem, &loaded.bytes, args.reproducible);
    emit(args.output.as_deref(), (solution.to_json() + "\n").as_bytes())?;
    eprintln!(
        "{}: {} after {} iterations, objective {} (raw {}), feasible {}",
        args.input.display(),
        report.termination,
        report.iterations,
        report.objective_repaired,
        report.objective_raw,
        report.feasibility.feasible
    );
    if report.termination == Termination::MaxIters {
        eprintln!("warning: iteration limit reached before the stopping rule was met");
    }
    Ok(())
}

fn cluster_variant(o: ClusterObjective) -> ClusterVariant {
    match o {
        ClusterObjective::MaxMin => ClusterVariant::MaxMin,
        ClusterObjective::PropFair => ClusterVariant::PropFair,
        ClusterObjective::TotalThroughput => ClusterVariant::TotalThroughput,
    }
}

fn perturbation(kind: PerturbKind, amount: f64) -> Result<Perturbation> {
    Ok(match kind {
        PerturbKind::RhsNoise => Perturbation::RhsNoise(amount),
        PerturbKind::RhsScale => Perturbation::RhsScale(amount),
        PerturbKind::DemandShift => Perturbation::DemandShift(amount),
        PerturbKind::LinkFailures => {
            if amount < 0.0 || amount.fract() != 0.0 {
                return Err(invalid(anyhow::anyhow!("link failures need a whole number, got {amount}")));
            }
            Perturbation::LinkFailures(amount as usize)
        }
    })
}

fn case_of(loaded: &Loaded, path: &Path) -> Result<Instance> {
    loaded.file.case.clone().ok_or_else(|| {
        invalid(anyhow::anyhow!(
            "{} has no generator record (`case`), so it cannot be perturbed",
            path.display()
        ))
    })
}

pub fn generate(args: &GenArgs) -> Result<()> {
    let instance = match &args.kind {
        GenKind::Cluster {
            types,
            jobs,
            objective,
            seed,
        } => Instance::Cluster {
            variant: cluster_variant(*objective),
            instance: ClusterInstance::random(*types, *jobs, *seed).map_err(invalid)?,
        },
        GenKind::Traffic {
            rows,
            cols,
            demands,
            paths,
            objective,
            seed,
        } => {
            let variant = match objective {
                TrafficObjective::TotalFlow => TrafficVariant::TotalFlow,
                TrafficObjective::MinMlu => TrafficVariant::MinMlu,
            };
            let params = TrafficParams {
                k_paths: *paths,
                ..TrafficParams::grid(*rows, *cols, *demands, variant)
            };
            Instance::Traffic {
                variant,
                instance: TrafficInstance::random(&params, *seed).map_err(invalid)?,
            }
        }
        GenKind::LoadBalance {
            servers,
            shards,
            eps,
            seed,
        } => Instance::LoadBalance {
            instance: LoadBalanceInstance::random(*servers, *shards, *eps, *seed).map_err(invalid)?,
        },
        GenKind::Toy { objective } => Instance::Cluster {
            variant: cluster_variant(*objective),
            instance: ClusterInstance::toy(),
        },
        GenKind::Perturb {
            input,
            kind,
            amount,
            seed,
        } => {
            let loaded = load_problem(input)?;
            let case = case_of(&loaded, input)?;
            perturb(&case, perturbation(*kind, *amount)?, *seed).map_err(invalid)?
        }
    };
    let problem = instance.to_problem().map_err(invalid)?;
    emit(args.output.as_deref(), write_problem(&problem, Some(instance)).as_bytes())
}

/// Problem files named by `inputs`; directories contribute their `.json`
/// files except oracle sidecars, in name order.
fn expand_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(p)
                .with_context(|| format!("cannot list {}", p.display()))
                .map_err(invalid)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    let name = f.file_name().and_then(|n| n.to_str()).unwrap_or("");
                    name.ends_with(".json") && !name.ends_with(".oracle.json")
                })
                .collect();
            files.sort();
            out.extend(files);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn instance_name(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

pub fn compare(args: &CompareArgs) -> Result<()> {
    let files = expand_inputs(&args.inputs)?;
    let mut w = csv_writer();
    w.write_record(COMPARE_HEADER).map_err(csv_err)?;
    for path in &files {
        let loaded = load_problem(path)?;
        let t = Instant::now();
        let oracle = reference_objective(&loaded.problem, args.oracle_limit);
        let oracle_ms = t.elapsed().as_secs_f64() * 1e3;
        let report = run_engine(&loaded.problem, options(&args.engine))?;
        let engine_ms = report.wall.as_secs_f64() * 1e3;
        let engine_obj = report.objective_repaired;
        let (oracle_obj, gap, oracle_ms) = match oracle {
            Some(o) => (
                o.to_string(),
                ((engine_obj - o).abs() / o.abs().max(1e-9)).to_string(),
                oracle_ms.to_string(),
            ),
            None => (UNAVAILABLE.into(), UNAVAILABLE.into(), UNAVAILABLE.into()),
        };
        w.write_record([
            instance_name(path),
            oracle_obj,
            engine_obj.to_string(),
            gap,
            oracle_ms,
            engine_ms.to_string(),
            report.iterations.to_string(),
        ])
        .map_err(csv_err)?;
    }
    emit(args.output.as_deref(), &csv_bytes(w)?)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn bench_row(w: &mut csv::Writer<Vec<u8>>, mode: &str, workers: usize, rep: usize, r: &SolveReport) -> Result<()> {
    w.write_record([
        mode.to_string(),
        workers.to_string(),
        rep.to_string(),
        (r.wall.as_secs_f64() * 1e3).to_string(),
        r.iterations.to_string(),
        r.objective_raw.to_string(),
        r.objective_repaired.to_string(),
        r.termination.to_string(),
    ])
    .map_err(csv_err)
}

pub fn bench(args: &BenchArgs) -> Result<()> {
    if args.workers_list.is_empty() || args.workers_list.contains(&0) {
        return Err(invalid(anyhow::anyhow!("worker counts must be positive")));
    }
    if args.reps == 0 {
        return Err(invalid(anyhow::anyhow!("need at least one repetition")));
    }
    let loaded = load_problem(&args.input)?;
    let canonical = canonicalize(&loaded.problem).map_err(invalid)?;
    let mut w = csv_writer();
    w.write_record(BENCH_HEADER).map_err(csv_err)?;
    let mut reference: Option<SolveReport> = None;
    let mut identical = true;
    for &workers in &args.workers_list {
        let opts = SolveOptions {
            workers,
            ..options(&args.engine)
        };
        let engine = Engine::new(&canonical, opts).map_err(invalid)?;
        let mut walls = Vec::new();
        for rep in 0..args.reps {
            let r = engine.solve().context("engine failed")?;
            bench_row(&mut w, "sweep", workers, rep, &r)?;
            walls.push(r.wall.as_secs_f64() * 1e3);
            match &reference {
                Some(first) => identical &= first.same_numerics(&r),
                None => reference = Some(r),
            }
        }
        let med = median(walls.clone());
        let var = walls.iter().map(|x| (x - med).powi(2)).sum::<f64>() / walls.len() as f64;
        eprintln!("workers {workers}: median wall {med:.3} ms, spread {:.3} ms", var.sqrt());
    }
    if let Some(scale) = args.warm_scale {
        let case = case_of(&loaded, &args.input)?;
        let next = perturb(&case, Perturbation::RhsScale(scale), 0)
            .map_err(invalid)?
            .to_problem()
            .map_err(invalid)?;
        let opts = || SolveOptions {
            workers: args.workers_list[0],
            ..options(&args.engine)
        };
        let base = reference.as_ref().map_or_else(
            || run_engine(&loaded.problem, opts()),
            |r| Ok(r.clone()),
        )?;
        let cold = run_engine(&next, opts())?;
        let warm = run_engine(
            &next,
            SolveOptions {
                warm_start: Some(base.state.clone()),
                ..opts()
            },
        )?;
        bench_row(&mut w, "cold", args.workers_list[0], 0, &cold)?;
        bench_row(&mut w, "warm", args.workers_list[0], 0, &warm)?;
        eprintln!("after scaling capacities by {scale}: cold {} iterations, warm {}", cold.iterations, warm.iterations);
    }
    emit(args.output.as_deref(), &csv_bytes(w)?)?;
    if args.engine.deterministic && !identical {
        return Err(Failure::Other(anyhow::anyhow!(
            "deterministic runs differ across worker counts or repetitions"
        )));
    }
    Ok(())
}
