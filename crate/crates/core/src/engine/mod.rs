//! Two-block ADMM over the grouped problem.
//!
//! With consensus copies `x` (resource side, carries the domains) and `z`
//! (demand side), each iteration solves every resource group's subproblem in
//! parallel, then every demand group's, then updates the scaled duals
//! `alpha += Rx - r`, `beta += Dz - d`, `lambda += x - z`.
//!
//! Two alternative outer loops share the same sweeps: a quadratic penalty
//! method (duals pinned at zero, penalty raised tenfold whenever the inner
//! alternation settles) and a joint augmented Lagrangian method (the inner
//! alternation is run to convergence before each multiplier update).

mod repair;

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::{CanonicalProblem, ConstraintGroup, Side};
use crate::model::{Allocation, FeasibilityReport, ProblemSpec};
use crate::parallel::{default_workers, BatchError, BatchPlan, ScheduleMode, WorkerPool};
use crate::subsolver::{assemble, gram_spectral_estimate, project_scalar, solve_subproblem, SubsolverStatus};

pub use repair::{repair, RepairLog};

/// Continuous-relaxation iterations before integer projection starts.
pub const INTEGER_WARMUP: usize = 50;
const ADAPT_RATIO: f64 = 10.0;
const RHO_RANGE: f64 = 1e4;
pub const ADAPT_INTERVAL: usize = 50;
const REPAIR_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Admm,
    Penalty,
    JointAlm,
}

/// How constraint multipliers are stored. Both give the same iterates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DualForm {
    /// `u = y / rho`
    #[default]
    Scaled,
    /// `y` itself
    Unscaled,
}

#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub rho0: f64,
    pub max_iters: usize,
    pub time_budget: Option<Duration>,
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub adapt_rho: bool,
    /// Residual balancing runs on iterations that are multiples of this.
    pub adapt_interval: usize,
    pub workers: usize,
    /// Static block scheduling when set, work stealing otherwise.
    pub deterministic: bool,
    pub warm_start: Option<AdmmState>,
    pub method: Method,
    pub dual_form: DualForm,
    /// Absolute subsolver tolerance; defaults to `0.1 * eps_abs * rho`.
    pub inner_tol: Option<f64>,
    pub inner_max_iter: usize,
    pub integer_warmup: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            rho0: 1.0,
            max_iters: 5000,
            time_budget: None,
            eps_abs: 1e-4,
            eps_rel: 1e-3,
            adapt_rho: true,
            adapt_interval: ADAPT_INTERVAL,
            workers: default_workers(),
            deterministic: true,
            warm_start: None,
            method: Method::Admm,
            dual_form: DualForm::Scaled,
            inner_tol: None,
            inner_max_iter: 20_000,
            integer_warmup: INTEGER_WARMUP,
        }
    }
}

impl SolveOptions {
    fn validate(&self) -> Result<(), EngineError> {
        let bad = |what: &str| Err(EngineError::InvalidOptions(what.to_string()));
        if !(self.rho0 > 0.0 && self.rho0.is_finite()) {
            return bad("rho0 must be positive");
        }
        if !(self.eps_abs > 0.0) || !(self.eps_rel > 0.0) {
            return bad("eps_abs and eps_rel must be positive");
        }
        if self.workers == 0 {
            return bad("workers must be at least 1");
        }
        Ok(())
    }
}

/// Iterates of one ADMM run.
///
/// `x` and `z` hold consensus coordinates; slack values live per group in
/// `x_slack` / `z_slack`. Duals follow the run's [`DualForm`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmmState {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub x_slack: Vec<Vec<f64>>,
    pub z_slack: Vec<Vec<f64>>,
    pub alpha: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    pub lambda: Vec<f64>,
    pub rho: f64,
    pub iter: usize,
    pub history: Vec<(f64, f64)>,
}

impl AdmmState {
    /// `(n_coords, slack lengths per side, dual lengths per side)`; equal
    /// signatures mean a state can warm-start the other problem.
    pub fn signature(&self) -> (usize, Vec<usize>, Vec<usize>, Vec<usize>, Vec<usize>) {
        (
            self.x.len(),
            self.x_slack.iter().map(Vec::len).collect(),
            self.z_slack.iter().map(Vec::len).collect(),
            self.alpha.iter().map(Vec::len).collect(),
            self.beta.iter().map(Vec::len).collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIters,
    TimeBudget,
}

impl std::fmt::Display for Termination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Termination::Converged => "converged",
            Termination::MaxIters => "max_iters",
            Termination::TimeBudget => "time_budget",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PhaseTimings {
    pub x_step: Duration,
    pub z_step: Duration,
    pub dual: Duration,
    pub overhead: Duration,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residuals {
    pub primal: f64,
    pub dual: f64,
    pub eps_primal: f64,
    pub eps_dual: f64,
}

impl Residuals {
    pub fn converged(&self) -> bool {
        self.primal <= self.eps_primal && self.dual <= self.eps_dual
    }
}

/// One row of the iteration trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iter: usize,
    pub primal: f64,
    pub dual: f64,
    pub rho: f64,
    pub objective: f64,
    pub x_step_ms: f64,
    pub z_step_ms: f64,
}

/// Read-only view handed to iteration hooks.
pub struct IterationSnapshot<'a> {
    pub state: &'a AdmmState,
    pub record: IterationRecord,
    pub residuals: Residuals,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    /// Feasibility-restored allocation in the source problem's shape.
    pub allocation: Allocation,
    /// `z` projected onto the domains, before repair.
    pub raw_allocation: Allocation,
    pub objective_raw: f64,
    pub objective_repaired: f64,
    pub feasibility: FeasibilityReport,
    pub repair: RepairLog,
    pub trace: Vec<IterationRecord>,
    pub iterations: usize,
    pub termination: Termination,
    pub timings: PhaseTimings,
    pub wall: Duration,
    pub subsolver_warnings: usize,
    pub state: AdmmState,
}

impl SolveReport {
    pub fn objective_trajectory(&self) -> Vec<f64> {
        self.trace.iter().map(|r| r.objective).collect()
    }

    pub fn residual_trajectory(&self) -> Vec<(f64, f64)> {
        self.trace.iter().map(|r| (r.primal, r.dual)).collect()
    }

    /// Everything except wall-clock measurements, for bit-exact comparison.
    pub fn same_numerics(&self, other: &SolveReport) -> bool {
        let bits = |v: &[f64]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        let trace_bits = |t: &[IterationRecord]| {
            t.iter()
                .map(|r| {
                    (
                        r.iter,
                        r.primal.to_bits(),
                        r.dual.to_bits(),
                        r.rho.to_bits(),
                        r.objective.to_bits(),
                    )
                })
                .collect::<Vec<_>>()
        };
        bits(self.allocation.as_slice()) == bits(other.allocation.as_slice())
            && bits(self.raw_allocation.as_slice()) == bits(other.raw_allocation.as_slice())
            && self.objective_raw.to_bits() == other.objective_raw.to_bits()
            && self.objective_repaired.to_bits() == other.objective_repaired.to_bits()
            && trace_bits(&self.trace) == trace_bits(&other.trace)
            && self.iterations == other.iterations
            && self.termination == other.termination
            && self.state == other.state
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("invalid options: {0}")]
    InvalidOptions(String),
    #[error("warm start does not match the problem shape: {0}")]
    WarmStartShape(String),
    #[error(transparent)]
    Batch(#[from] BatchError),
}

#[derive(Debug, Clone, Copy, Default)]
struct StepStats {
    elapsed: Duration,
    failures: usize,
}

/// Owns the worker pool and per-group caches for one problem.
pub struct Engine<'a> {
    canonical: &'a CanonicalProblem,
    opts: SolveOptions,
    pool: WorkerPool,
    res_lmax: Vec<OnceLock<f64>>,
    dem_lmax: Vec<OnceLock<f64>>,
    res_discrete: Vec<Vec<bool>>,
    n_x: usize,
    n_primal: usize,
}

impl<'a> Engine<'a> {
    pub fn new(canonical: &'a CanonicalProblem, opts: SolveOptions) -> Result<Self, EngineError> {
        opts.validate()?;
        let pool = WorkerPool::new(opts.workers)?;
        let res_discrete = canonical
            .resource_groups()
            .iter()
            .map(|g| g.domains.iter().map(|d| d.is_discrete()).collect())
            .collect();
        let n_x = canonical.n_coords() + canonical.resource_groups().iter().map(|g| g.n_slack).sum::<usize>();
        let n_primal = canonical.n_constraint_rows() + canonical.n_coords();
        Ok(Self {
            canonical,
            res_lmax: (0..canonical.resource_groups().len()).map(|_| OnceLock::new()).collect(),
            dem_lmax: (0..canonical.demand_groups().len()).map(|_| OnceLock::new()).collect(),
            opts,
            pool,
            res_discrete,
            n_x,
            n_primal,
        })
    }

    pub fn options(&self) -> &SolveOptions {
        &self.opts
    }

    pub fn pool(&self) -> &WorkerPool {
        &self.pool
    }

    pub fn canonical(&self) -> &CanonicalProblem {
        self.canonical
    }

    /// Cold start at the domain projection of zero, or a copy of the warm start.
    pub fn init_state(&self) -> Result<AdmmState, EngineError> {
        let c = self.canonical;
        let cold = self.cold_state();
        match &self.opts.warm_start {
            None => Ok(cold),
            Some(w) => {
                if w.signature() != cold.signature() {
                    return Err(EngineError::WarmStartShape(format!(
                        "{} coordinates, {} resource and {} demand groups expected; warm start has {}, {} and {}",
                        c.n_coords(),
                        c.resource_groups().len(),
                        c.demand_groups().len(),
                        w.x.len(),
                        w.alpha.len(),
                        w.beta.len()
                    )));
                }
                if !(w.rho > 0.0) {
                    return Err(EngineError::WarmStartShape("warm start rho must be positive".into()));
                }
                let mut s = w.clone();
                s.iter = 0;
                s.history.clear();
                Ok(s)
            }
        }
    }

    fn cold_state(&self) -> AdmmState {
        let c = self.canonical;
        let mut x = vec![0.0; c.n_coords()];
        for g in c.resource_groups() {
            for (k, &coord) in g.coords.iter().enumerate() {
                x[coord] = project_scalar(0.0, &g.domains[k]);
            }
        }
        let z = x.clone();
        AdmmState {
            x,
            z,
            x_slack: c.resource_groups().iter().map(|g| vec![0.0; g.n_slack]).collect(),
            z_slack: c.demand_groups().iter().map(|g| vec![0.0; g.n_slack]).collect(),
            alpha: c.resource_groups().iter().map(|g| vec![0.0; g.n_constraints()]).collect(),
            beta: c.demand_groups().iter().map(|g| vec![0.0; g.n_constraints()]).collect(),
            lambda: vec![0.0; c.n_coords()],
            rho: self.opts.rho0,
            iter: 0,
            history: Vec::new(),
        }
    }

    fn schedule(&self) -> ScheduleMode {
        if self.opts.deterministic {
            ScheduleMode::StaticBlock
        } else {
            ScheduleMode::WorkStealing
        }
    }

    fn inner_tol(&self, rho: f64, iter: usize) -> f64 {
        let base = self.opts.inner_tol.unwrap_or(0.1 * self.opts.eps_abs * rho);
        if self.opts.inner_tol.is_none() && iter + 10 >= self.opts.max_iters {
            base * 0.1
        } else {
            base
        }
    }

    /// Dual slice for assembly in scaled form.
    fn scaled(&self, dual: &[f64], rho: f64) -> Vec<f64> {
        match self.opts.dual_form {
            DualForm::Scaled => dual.to_vec(),
            DualForm::Unscaled => dual.iter().map(|y| y / rho).collect(),
        }
    }

    fn lambda_scaled(&self, state: &AdmmState, coord: usize) -> f64 {
        match self.opts.dual_form {
            DualForm::Scaled => state.lambda[coord],
            DualForm::Unscaled => state.lambda[coord] / state.rho,
        }
    }

    fn solve_group(
        &self,
        side: Side,
        g: usize,
        group: &ConstraintGroup,
        state: &AdmmState,
        project: bool,
        tol: f64,
    ) -> (Vec<f64>, bool) {
        if group.dim() == 0 {
            return (Vec::new(), true);
        }
        let (target, warm_coords, slack, dual, cache): (Vec<f64>, &[f64], &[f64], &[f64], &OnceLock<f64>) = match side {
            Side::Resource => (
                group
                    .coords
                    .iter()
                    .map(|&c| state.z[c] - self.lambda_scaled(state, c))
                    .collect(),
                &state.x,
                &state.x_slack[g],
                &state.alpha[g],
                &self.res_lmax[g],
            ),
            Side::Demand => (
                group
                    .coords
                    .iter()
                    .map(|&c| state.x[c] + self.lambda_scaled(state, c))
                    .collect(),
                &state.z,
                &state.z_slack[g],
                &state.beta[g],
                &self.dem_lmax[g],
            ),
        };
        let mut warm: Vec<f64> = group.coords.iter().map(|&c| warm_coords[c]).collect();
        warm.extend_from_slice(slack);
        let lmax = *cache.get_or_init(|| gram_spectral_estimate(&group.system, group.coords.len()));
        let dual = self.scaled(dual, state.rho);
        let sp = assemble(group, &target, &dual, state.rho, warm, lmax);
        let result = solve_subproblem(&sp, tol, self.opts.inner_max_iter);
        let mut v = result.solution;
        if project && side == Side::Resource {
            for (k, disc) in self.res_discrete[g].iter().enumerate() {
                if *disc {
                    v[k] = project_scalar(v[k], &group.domains[k]);
                }
            }
        }
        (v, result.status == SubsolverStatus::Optimal)
    }

    fn side_step(&self, side: Side, state: &mut AdmmState, project: bool, tol: f64) -> Result<StepStats, EngineError> {
        let start = Instant::now();
        let groups = self.canonical.groups(side);
        let plan = BatchPlan {
            tasks: (0..groups.len()).collect(),
            mode: self.schedule(),
            workers: self.opts.workers,
            deterministic: self.opts.deterministic,
        };
        let snapshot: &AdmmState = state;
        let results = self
            .pool
            .run_batch(&plan, |g| self.solve_group(side, g, &groups[g], snapshot, project, tol))?;
        let mut failures = 0;
        for (g, (v, ok)) in results.into_iter().enumerate() {
            if !ok {
                failures += 1;
            }
            let group = &groups[g];
            let nc = group.coords.len();
            let (coords, slack) = match side {
                Side::Resource => (&mut state.x, &mut state.x_slack[g]),
                Side::Demand => (&mut state.z, &mut state.z_slack[g]),
            };
            for (k, &c) in group.coords.iter().enumerate() {
                coords[c] = v[k];
            }
            slack.copy_from_slice(&v[nc..]);
        }
        if failures > 0 {
            log::warn!("{failures} {side:?} subproblems stopped before reaching tolerance");
        }
        Ok(StepStats {
            elapsed: start.elapsed(),
            failures,
        })
    }

    /// Resource-side update; only `x` and its slacks change.
    pub fn x_step(&self, state: &mut AdmmState) -> Result<(), EngineError> {
        let project = self.canonical.source().has_discrete() && state.iter >= self.opts.integer_warmup;
        self.side_step(Side::Resource, state, project, self.inner_tol(state.rho, state.iter))
            .map(|_| ())
    }

    /// Demand-side update using the current `x`; only `z` and its slacks change.
    pub fn z_step(&self, state: &mut AdmmState) -> Result<(), EngineError> {
        self.side_step(Side::Demand, state, false, self.inner_tol(state.rho, state.iter))
            .map(|_| ())
    }

    fn group_residual(group: &ConstraintGroup, coords: &[f64], slack: &[f64]) -> Vec<f64> {
        let mut v: Vec<f64> = group.coords.iter().map(|&c| coords[c]).collect();
        v.extend_from_slice(slack);
        let mut out = vec![0.0; group.n_constraints()];
        group.system.mul(&v, &mut out);
        for (o, b) in out.iter_mut().zip(&group.rhs) {
            *o -= b;
        }
        out
    }

    /// `alpha += Rx - r`, `beta += Dz - d`, `lambda += x - z` (times rho in unscaled form).
    pub fn dual_step(&self, state: &mut AdmmState) {
        let scale = match self.opts.dual_form {
            DualForm::Scaled => 1.0,
            DualForm::Unscaled => state.rho,
        };
        for (g, group) in self.canonical.resource_groups().iter().enumerate() {
            let r = Self::group_residual(group, &state.x, &state.x_slack[g]);
            for (a, v) in state.alpha[g].iter_mut().zip(r) {
                *a += scale * v;
            }
        }
        for (g, group) in self.canonical.demand_groups().iter().enumerate() {
            let r = Self::group_residual(group, &state.z, &state.z_slack[g]);
            for (b, v) in state.beta[g].iter_mut().zip(r) {
                *b += scale * v;
            }
        }
        for ((l, x), z) in state.lambda.iter_mut().zip(&state.x).zip(&state.z) {
            *l += scale * (x - z);
        }
    }

    /// Primal and dual residuals with their stopping thresholds; `z_prev` is
    /// the demand-side iterate before this iteration's z-step.
    pub fn residuals(&self, state: &AdmmState, z_prev: &[f64]) -> Residuals {
        let mut primal2 = 0.0;
        let (mut ax2, mut bz2, mut c2) = (0.0, 0.0, 0.0);
        for (side, groups) in [
            (Side::Resource, self.canonical.resource_groups()),
            (Side::Demand, self.canonical.demand_groups()),
        ] {
            for (g, group) in groups.iter().enumerate() {
                let (coords, slack) = match side {
                    Side::Resource => (&state.x, &state.x_slack[g]),
                    Side::Demand => (&state.z, &state.z_slack[g]),
                };
                let r = Self::group_residual(group, coords, slack);
                for (k, v) in r.iter().enumerate() {
                    primal2 += v * v;
                    let lhs = v + group.rhs[k];
                    match side {
                        Side::Resource => ax2 += lhs * lhs,
                        Side::Demand => bz2 += lhs * lhs,
                    }
                    c2 += group.rhs[k] * group.rhs[k];
                }
            }
        }
        let mut dz2 = 0.0;
        let mut lam2 = 0.0;
        for k in 0..state.x.len() {
            let d = state.x[k] - state.z[k];
            primal2 += d * d;
            ax2 += state.x[k] * state.x[k];
            bz2 += state.z[k] * state.z[k];
            let dz = state.z[k] - z_prev[k];
            dz2 += dz * dz;
            let y = match self.opts.dual_form {
                DualForm::Scaled => state.rho * state.lambda[k],
                DualForm::Unscaled => state.lambda[k],
            };
            lam2 += y * y;
        }
        let eps_primal =
            (self.n_primal as f64).sqrt() * self.opts.eps_abs + self.opts.eps_rel * ax2.sqrt().max(bz2.sqrt()).max(c2.sqrt());
        let eps_dual = (self.n_x as f64).sqrt() * self.opts.eps_abs + self.opts.eps_rel * lam2.sqrt();
        Residuals {
            primal: primal2.sqrt(),
            dual: state.rho * dz2.sqrt(),
            eps_primal,
            eps_dual,
        }
    }

    /// Residual balancing: doubles or halves rho and rescales the scaled
    /// duals inversely so `rho * u` is unchanged. Steps that would leave
    /// `[rho0 / 1e4, rho0 * 1e4]` are skipped.
    pub fn adapt_rho(&self, state: &mut AdmmState, res: &Residuals) -> bool {
        let factor = if res.primal > ADAPT_RATIO * res.dual {
            2.0
        } else if res.dual > ADAPT_RATIO * res.primal {
            0.5
        } else {
            return false;
        };
        let next = state.rho * factor;
        if next > self.opts.rho0 * RHO_RANGE || next < self.opts.rho0 / RHO_RANGE {
            return false;
        }
        state.rho = next;
        if self.opts.dual_form == DualForm::Scaled {
            let inv = 1.0 / factor;
            for a in state.alpha.iter_mut().flatten() {
                *a *= inv;
            }
            for b in state.beta.iter_mut().flatten() {
                *b *= inv;
            }
            for l in &mut state.lambda {
                *l *= inv;
            }
        }
        true
    }

    /// Source-shape allocation from consensus values (epigraph replicas dropped).
    pub fn to_allocation(&self, values: &[f64]) -> Allocation {
        let (n, m) = self.canonical.source().shape();
        let mut a = Allocation::zeros(n, m);
        for (k, (i, j)) in self.canonical.real_coords() {
            a.set(i, j, values[k]);
        }
        a
    }

    fn projected_z(&self, state: &AdmmState) -> Allocation {
        let src = self.canonical.source();
        let mut a = self.to_allocation(&state.z);
        let (n, m) = src.shape();
        for i in 0..n {
            for j in 0..m {
                a.set(i, j, project_scalar(a.get(i, j), &src.domain(i, j)));
            }
        }
        a
    }

    fn objective_at(&self, a: &Allocation) -> f64 {
        self.canonical.source().eval_objective(a).unwrap_or(f64::NAN)
    }

    pub fn solve(&self) -> Result<SolveReport, EngineError> {
        self.solve_with_hook(|_| {})
    }

    /// Runs the configured method, calling `hook` after every outer sweep.
    pub fn solve_with_hook<H: FnMut(&IterationSnapshot)>(&self, mut hook: H) -> Result<SolveReport, EngineError> {
        let started = Instant::now();
        let mut state = self.init_state()?;
        let mut timings = PhaseTimings::default();
        let mut trace = Vec::new();
        let mut warnings = 0;
        let mut termination = Termination::MaxIters;
        let budget_hit = |now: Instant| self.opts.time_budget.is_some_and(|b| now.duration_since(started) >= b);

        // penalty / joint-ALM bookkeeping
        let inner_cap = 1000usize;
        let mut inner_count = 0usize;
        let mut z_outer = state.z.clone();

        if budget_hit(Instant::now()) {
            termination = Termination::TimeBudget;
        } else {
            while state.iter < self.opts.max_iters {
                let project = self.canonical.source().has_discrete() && state.iter >= self.opts.integer_warmup;
                let tol = self.inner_tol(state.rho, state.iter);
                let z_prev = state.z.clone();
                let xs = self.side_step(Side::Resource, &mut state, project, tol)?;
                let zs = self.side_step(Side::Demand, &mut state, false, tol)?;
                warnings += xs.failures + zs.failures;
                timings.x_step += xs.elapsed;
                timings.z_step += zs.elapsed;

                let t_dual = Instant::now();
                let mut res = self.residuals(&state, &z_prev);
                let mut done = false;
                match self.opts.method {
                    Method::Admm => {
                        self.dual_step(&mut state);
                        res = self.residuals(&state, &z_prev);
                        done = res.converged();
                        if !done && self.opts.adapt_rho && (state.iter + 1) % self.opts.adapt_interval.max(1) == 0 {
                            self.adapt_rho(&mut state, &res);
                        }
                    }
                    Method::Penalty | Method::JointAlm => {
                        inner_count += 1;
                        // the inner alternation has settled when z stops moving
                        let settled = res.dual <= res.eps_dual || inner_count >= inner_cap;
                        if settled {
                            inner_count = 0;
                            if self.opts.method == Method::JointAlm {
                                self.dual_step(&mut state);
                            }
                            let outer = self.residuals(&state, &z_outer);
                            z_outer.clone_from(&state.z);
                            res = Residuals {
                                dual: outer.dual,
                                eps_dual: outer.eps_dual,
                                ..res
                            };
                            done = match self.opts.method {
                                Method::Penalty => res.primal <= res.eps_primal,
                                _ => res.primal <= res.eps_primal && res.dual <= res.eps_dual,
                            };
                            if !done && self.opts.method == Method::Penalty {
                                state.rho *= 10.0;
                            }
                        }
                    }
                }
                timings.dual += t_dual.elapsed();

                let t_over = Instant::now();
                state.iter += 1;
                state.history.push((res.primal, res.dual));
                let objective = self.objective_at(&self.projected_z(&state));
                let record = IterationRecord {
                    iter: state.iter,
                    primal: res.primal,
                    dual: res.dual,
                    rho: state.rho,
                    objective,
                    x_step_ms: xs.elapsed.as_secs_f64() * 1e3,
                    z_step_ms: zs.elapsed.as_secs_f64() * 1e3,
                };
                trace.push(record);
                hook(&IterationSnapshot {
                    state: &state,
                    record,
                    residuals: res,
                });
                timings.overhead += t_over.elapsed();
                if done {
                    termination = Termination::Converged;
                    break;
                }
                if budget_hit(Instant::now()) {
                    termination = Termination::TimeBudget;
                    break;
                }
            }
        }

        let t_final = Instant::now();
        let raw = self.projected_z(&state);
        let objective_raw = self.objective_at(&raw);
        let (allocation, repair_log) = repair(self.canonical.source(), &raw, REPAIR_TOL);
        let objective_repaired = self.objective_at(&allocation);
        let feasibility = self
            .canonical
            .source()
            .check_feasibility(&allocation, 1e-6)
            .expect("allocation has the source shape");
        timings.overhead += t_final.elapsed();
        Ok(SolveReport {
            allocation,
            raw_allocation: raw,
            objective_raw,
            objective_repaired,
            feasibility,
            repair: repair_log,
            iterations: state.iter,
            trace,
            termination,
            timings,
            wall: started.elapsed(),
            subsolver_warnings: warnings,
            state,
        })
    }
}

/// Canonicalizes and solves `problem` in one call.
pub fn solve_problem(problem: &ProblemSpec, opts: SolveOptions) -> Result<SolveReport, SolveError> {
    let canonical = crate::canonical::canonicalize(problem)?;
    let engine = Engine::new(&canonical, opts)?;
    Ok(engine.solve()?)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error(transparent)]
    Canonical(#[from] crate::canonical::CanonicalError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canonical::canonicalize;
    use crate::model::{LinearConstraint, ObjectiveTerm, Relation, Target, VariableDomain};

    fn opts() -> SolveOptions {
        SolveOptions {
            workers: 1,
            ..SolveOptions::default()
        }
    }

    fn one_by_one() -> ProblemSpec {
        ProblemSpec::builder(1, 1)
            .maximize()
            .term(ObjectiveTerm::Linear {
                target: Target::Global,
                entries: vec![(0, 0, 1.0)],
            })
            .resource_constraint(LinearConstraint::new(vec![(0, 0, 1.0)], Relation::Le, 1.0))
            .demand_constraint(LinearConstraint::new(vec![(0, 0, 1.0)], Relation::Le, 1.0))
            .build()
            .unwrap()
    }

    #[test]
    fn trivial_problem_reaches_one() {
        let r = solve_problem(&one_by_one(), opts()).unwrap();
        assert_eq!(r.termination, Termination::Converged);
        assert!((r.objective_repaired - 1.0).abs() < 1e-3, "{}", r.objective_repaired);
        assert!(r.feasibility.feasible);
    }

    #[test]
    fn unconstrained_x_step_is_z_minus_lambda() {
        let p = ProblemSpec::builder(1, 2)
            .default_domain(VariableDomain::Real)
            .term(ObjectiveTerm::Linear {
                target: Target::Column(0),
                entries: vec![(0, 0, 0.0)],
            })
            .build()
            .unwrap();
        let c = canonicalize(&p).unwrap();
        let mut o = opts();
        o.inner_tol = Some(1e-12);
        let e = Engine::new(&c, o).unwrap();
        let mut s = e.init_state().unwrap();
        s.z = vec![0.7, -1.2];
        s.lambda = vec![0.2, 0.3];
        e.x_step(&mut s).unwrap();
        assert!((s.x[0] - 0.5).abs() < 1e-12 && (s.x[1] + 1.5).abs() < 1e-12, "{:?}", s.x);
        // nonnegative domain clips
        let p2 = p.to_builder().default_domain(VariableDomain::NonNegative).build().unwrap();
        let c2 = canonicalize(&p2).unwrap();
        let mut o = opts();
        o.inner_tol = Some(1e-12);
        let e2 = Engine::new(&c2, o).unwrap();
        let mut s2 = e2.init_state().unwrap();
        s2.z = vec![0.7, -1.2];
        s2.lambda = vec![0.2, 0.3];
        e2.x_step(&mut s2).unwrap();
        assert_eq!(s2.x[1], 0.0);
        assert!((s2.x[0] - 0.5).abs() < 1e-12);
        // z = x + lambda without demand constraints
        e2.z_step(&mut s2).unwrap();
        assert!((s2.z[0] - 0.7).abs() < 1e-12 && (s2.z[1] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn dual_step_adds_residual() {
        let p = one_by_one();
        let c = canonicalize(&p).unwrap();
        let e = Engine::new(&c, opts()).unwrap();
        let mut s = e.init_state().unwrap();
        // x + s = 1 with x = 1.3, s = 0 => residual 0.3
        s.x = vec![1.3];
        s.z = vec![1.3];
        s.z_slack = vec![vec![-0.3]];
        e.dual_step(&mut s);
        assert!((s.alpha[0][0] - 0.3).abs() < 1e-15);
        assert_eq!(s.lambda, vec![0.0]);
    }

    #[test]
    fn adapt_rule_and_exact_rescale() {
        let p = one_by_one();
        let c = canonicalize(&p).unwrap();
        let e = Engine::new(&c, opts()).unwrap();
        let mut s = e.init_state().unwrap();
        s.alpha = vec![vec![0.37]];
        s.lambda = vec![-1.1];
        let before = s.rho * s.alpha[0][0];
        let res = Residuals {
            primal: 100.0,
            dual: 1.0,
            eps_primal: 0.0,
            eps_dual: 0.0,
        };
        assert!(e.adapt_rho(&mut s, &res));
        assert_eq!(s.rho, 2.0);
        assert_eq!(s.alpha[0][0], 0.37 / 2.0);
        assert_eq!(s.rho * s.alpha[0][0], before);
        let even = Residuals {
            primal: 1.0,
            dual: 1.0,
            ..res
        };
        assert!(!e.adapt_rho(&mut s, &even));
        assert_eq!(s.rho, 2.0);
    }

    #[test]
    fn cold_start_primal_residual_is_rhs_norm() {
        // x = z = 0; rows x <= 1 with slack 0 violate by 1 each
        let p = one_by_one();
        let c = canonicalize(&p).unwrap();
        let e = Engine::new(&c, opts()).unwrap();
        let s = e.init_state().unwrap();
        let r = e.residuals(&s, &s.z);
        assert!((r.primal - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(r.dual, 0.0);
    }

    #[test]
    fn zero_budget_reports_time_budget() {
        let mut o = opts();
        o.time_budget = Some(Duration::ZERO);
        let r = solve_problem(&one_by_one(), o).unwrap();
        assert_eq!(r.termination, Termination::TimeBudget);
        assert_eq!(r.iterations, 0);
    }

    #[test]
    fn warm_start_shape_mismatch() {
        let p = one_by_one();
        let c = canonicalize(&p).unwrap();
        let mut o = opts();
        let mut bad = Engine::new(&c, opts()).unwrap().init_state().unwrap();
        bad.x.push(0.0);
        o.warm_start = Some(bad);
        let e = Engine::new(&c, o).unwrap();
        assert!(matches!(e.init_state(), Err(EngineError::WarmStartShape(_))));
    }

    #[test]
    fn converged_warm_start_finishes_fast() {
        let p = one_by_one();
        let first = solve_problem(&p, opts()).unwrap();
        let mut o = opts();
        o.warm_start = Some(first.state.clone());
        let second = solve_problem(&p, o).unwrap();
        assert!(second.iterations <= 2, "{}", second.iterations);
    }
}
