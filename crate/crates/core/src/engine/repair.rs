//! Restores feasibility of an extracted allocation.
//!
//! Order of operations: project every entry onto its domain, downscale
//! violated `<=` rows and then columns with nonnegative coefficients, run
//! cyclic projections over all constraints with discrete entries held fixed,
//! and finally flip discrete entries greedily, most violated constraint
//! first, re-running the projections after every flip. When no single flip
//! helps, a short tabu search over flips takes over. Allocations reached by
//! flipping are then polished by objective-improving feasible flips.

use std::collections::HashMap;

use crate::model::{Allocation, LinearConstraint, ProblemSpec, Relation, VariableDomain};
use crate::subsolver::project_scalar;

const MAX_SWEEPS: usize = 20_000;
const MAX_FLIPS: usize = 1_000;
const TABU_STEPS: usize = 200;
const TRIAL_SWEEPS: usize = 500;
const TABU_MAX_ENTRIES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RepairLog {
    pub rows_scaled: usize,
    pub columns_scaled: usize,
    pub projection_sweeps: usize,
    pub flips: usize,
}

struct Repairer<'a> {
    problem: &'a ProblemSpec,
    constraints: Vec<&'a LinearConstraint>,
    domains: HashMap<(usize, usize), VariableDomain>,
    tol: f64,
}

impl<'a> Repairer<'a> {
    fn new(problem: &'a ProblemSpec, tol: f64) -> Self {
        let constraints: Vec<&LinearConstraint> = problem
            .resource_constraints()
            .iter()
            .chain(problem.demand_constraints())
            .collect();
        let mut domains = HashMap::new();
        for c in &constraints {
            for &(i, j, _) in &c.entries {
                domains.entry((i, j)).or_insert_with(|| problem.domain(i, j));
            }
        }
        Self {
            problem,
            constraints,
            domains,
            tol,
        }
    }

    fn domain(&self, i: usize, j: usize) -> VariableDomain {
        self.domains.get(&(i, j)).copied().unwrap_or_else(|| self.problem.domain(i, j))
    }

    fn max_violation(&self, x: &Allocation) -> f64 {
        self.constraints.iter().map(|c| c.violation(x)).fold(0.0, f64::max)
    }

    fn total_violation(&self, x: &Allocation) -> f64 {
        self.constraints.iter().map(|c| c.violation(x)).sum()
    }

    /// Scales the continuous part of each violated `<=` constraint with
    /// nonnegative coefficients down to its right-hand side.
    fn downscale(&self, x: &mut Allocation, list: &[LinearConstraint]) -> usize {
        let mut scaled = 0;
        for c in list {
            if c.relation != Relation::Le || c.rhs < 0.0 || c.entries.iter().any(|e| e.2 < 0.0) {
                continue;
            }
            let (mut cont, mut disc) = (0.0, 0.0);
            for &(i, j, a) in &c.entries {
                if self.domain(i, j).is_discrete() {
                    disc += a * x.get(i, j);
                } else {
                    cont += a * x.get(i, j);
                }
            }
            if cont + disc <= c.rhs + self.tol || cont <= 0.0 {
                continue;
            }
            let s = ((c.rhs - disc) / cont).max(0.0);
            for &(i, j, _) in &c.entries {
                let d = self.domain(i, j);
                if !d.is_discrete() {
                    x.set(i, j, project_scalar(x.get(i, j) * s, &d));
                }
            }
            scaled += 1;
        }
        scaled
    }

    /// Cyclic projections onto each constraint (restricted to continuous
    /// entries) followed by a box clamp, until the violation target is met.
    fn project_cyclic(&self, x: &mut Allocation) -> usize {
        for sweep in 0..MAX_SWEEPS {
            if self.max_violation(x) <= 0.1 * self.tol {
                return sweep;
            }
            self.sweep(x);
        }
        MAX_SWEEPS
    }

    fn sweep(&self, x: &mut Allocation) {
        for c in &self.constraints {
            let lhs = c.lhs(x);
            let target = match c.relation {
                Relation::Le if lhs > c.rhs => c.rhs,
                Relation::Ge if lhs < c.rhs => c.rhs,
                Relation::Eq => c.rhs,
                _ => continue,
            };
            let norm2: f64 = c
                .entries
                .iter()
                .filter(|&&(i, j, _)| !self.domain(i, j).is_discrete())
                .map(|e| e.2 * e.2)
                .sum();
            if norm2 == 0.0 {
                continue;
            }
            let step = (target - lhs) / norm2;
            for &(i, j, a) in &c.entries {
                let d = self.domain(i, j);
                if !d.is_discrete() {
                    x.set(i, j, project_scalar(x.get(i, j) + step * a, &d));
                }
            }
        }
    }

    fn candidates(d: &VariableDomain, v: f64) -> Vec<f64> {
        match *d {
            VariableDomain::Boolean => vec![1.0 - v],
            VariableDomain::IntegerBox { lo, hi } => [v - 1.0, v + 1.0]
                .into_iter()
                .filter(|c| *c >= lo as f64 && *c <= hi as f64)
                .collect(),
            _ => Vec::new(),
        }
    }

    /// One greedy flip: among the discrete entries of the most violated
    /// constraint that has any, the change that most reduces total violation.
    fn flip_once(&self, x: &mut Allocation) -> bool {
        let mut order: Vec<(f64, usize)> = self
            .constraints
            .iter()
            .enumerate()
            .map(|(k, c)| (c.violation(x), k))
            .filter(|&(v, k)| {
                v > self.tol
                    && self.constraints[k]
                        .entries
                        .iter()
                        .any(|&(i, j, _)| self.domain(i, j).is_discrete())
            })
            .collect();
        order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let base = self.total_violation(x);
        for &(_, k) in &order {
            let mut best: Option<(f64, usize, usize, f64)> = None;
            for &(i, j, _) in &self.constraints[k].entries {
                let d = self.domain(i, j);
                if !d.is_discrete() {
                    continue;
                }
                let old = x.get(i, j);
                for cand in Self::candidates(&d, old) {
                    x.set(i, j, cand);
                    let mut trial = x.clone();
                    self.project_cyclic(&mut trial);
                    let v = self.total_violation(&trial);
                    x.set(i, j, old);
                    if v < base - 1e-12 && best.is_none_or(|b| v < b.0) {
                        best = Some((v, i, j, cand));
                    }
                }
            }
            if let Some((_, i, j, v)) = best {
                x.set(i, j, v);
                return true;
            }
        }
        false
    }

    /// Tabu search over single flips of discrete entries: every step takes
    /// the best change not made recently, even when it increases violation,
    /// and the best state seen is kept. Escapes configurations where only a
    /// coordinated sequence of moves restores feasibility.
    fn tabu(&self, x: &mut Allocation) -> bool {
        let entries = self.discrete_entries();
        if entries.is_empty() || entries.len() > TABU_MAX_ENTRIES {
            return false;
        }
        let tenure = (entries.len() / 2).max(2);
        let mut last_moved = vec![usize::MAX; entries.len()];
        let mut current = x.clone();
        let start = self.total_violation(x);
        let mut best = start;
        let mut best_x = None;
        for step in 0..TABU_STEPS.min(4 * entries.len()) {
            let mut pick: Option<(f64, usize, f64, Allocation)> = None;
            for (e, &(i, j)) in entries.iter().enumerate() {
                if last_moved[e] != usize::MAX && step - last_moved[e] < tenure {
                    continue;
                }
                for cand in Self::candidates(&self.domain(i, j), current.get(i, j)) {
                    let mut trial = current.clone();
                    trial.set(i, j, cand);
                    self.project_limited(&mut trial, TRIAL_SWEEPS);
                    let v = self.total_violation(&trial);
                    if pick.as_ref().is_none_or(|p| v < p.0) {
                        pick = Some((v, e, cand, trial));
                    }
                }
            }
            let Some((v, e, _, trial)) = pick else {
                break;
            };
            last_moved[e] = step;
            current = trial;
            if v < best - 1e-12 {
                best = v;
                best_x = Some(current.clone());
                if v <= self.tol {
                    break;
                }
            }
        }
        match best_x {
            Some(b) => {
                *x = b;
                true
            }
            None => false,
        }
    }

    /// Feasibility-preserving descent on the objective: single discrete
    /// changes are taken while they keep the allocation feasible and
    /// strictly improve it.
    fn polish(&self, x: &mut Allocation) -> usize {
        let entries = self.discrete_entries();
        if entries.is_empty() || entries.len() > TABU_MAX_ENTRIES {
            return 0;
        }
        let sign = self.problem.sense().sign();
        let value = |a: &Allocation| self.problem.eval_objective(a).map(|v| sign * v).unwrap_or(f64::INFINITY);
        let mut current = value(x);
        let mut changes = 0;
        while changes < MAX_FLIPS {
            let mut best: Option<(f64, Allocation)> = None;
            for &(i, j) in &entries {
                for cand in Self::candidates(&self.domain(i, j), x.get(i, j)) {
                    let mut trial = x.clone();
                    trial.set(i, j, cand);
                    self.project_limited(&mut trial, TRIAL_SWEEPS);
                    if self.max_violation(&trial) > self.tol {
                        continue;
                    }
                    let v = value(&trial);
                    if v < current - 1e-9 * (1.0 + current.abs()) && best.as_ref().is_none_or(|b| v < b.0) {
                        best = Some((v, trial));
                    }
                }
            }
            let Some((v, trial)) = best else {
                break;
            };
            *x = trial;
            current = v;
            changes += 1;
        }
        changes
    }

    fn discrete_entries(&self) -> Vec<(usize, usize)> {
        let mut e: Vec<(usize, usize)> = self
            .domains
            .iter()
            .filter(|(_, d)| d.is_discrete())
            .map(|(&k, _)| k)
            .collect();
        e.sort_unstable();
        e
    }

    fn project_limited(&self, x: &mut Allocation, sweeps: usize) {
        for _ in 0..sweeps {
            if self.max_violation(x) <= 0.1 * self.tol {
                return;
            }
            self.sweep(x);
        }
    }
}

/// Projects `x` onto the domains and restores constraint feasibility within
/// `tol` where the heuristics manage to.
pub fn repair(problem: &ProblemSpec, x: &Allocation, tol: f64) -> (Allocation, RepairLog) {
    let r = Repairer::new(problem, tol);
    let mut log = RepairLog::default();
    let mut y = x.clone();
    let (n, m) = problem.shape();
    for i in 0..n {
        for j in 0..m {
            y.set(i, j, project_scalar(y.get(i, j), &problem.domain(i, j)));
        }
    }
    if r.max_violation(&y) <= tol {
        return (y, log);
    }
    log.rows_scaled = r.downscale(&mut y, problem.resource_constraints());
    log.columns_scaled = r.downscale(&mut y, problem.demand_constraints());
    if r.max_violation(&y) <= tol {
        return (y, log);
    }
    log.projection_sweeps += r.project_cyclic(&mut y);
    let mut flipped = false;
    while r.max_violation(&y) > tol && log.flips < MAX_FLIPS && problem.has_discrete() {
        if !r.flip_once(&mut y) && !r.tabu(&mut y) {
            break;
        }
        flipped = true;
        log.flips += 1;
        log.projection_sweeps += r.project_cyclic(&mut y);
    }
    if flipped && r.max_violation(&y) <= tol {
        log.flips += r.polish(&mut y);
    }
    (y, log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ObjectiveTerm, Target};

    fn base(n: usize, m: usize) -> crate::model::ProblemBuilder {
        ProblemSpec::builder(n, m).term(ObjectiveTerm::Linear {
            target: Target::Global,
            entries: vec![(0, 0, 1.0)],
        })
    }

    #[test]
    fn overfull_row_is_scaled_down() {
        let p = base(1, 2)
            .resource_constraint(LinearConstraint::new(vec![(0, 0, 1.0), (0, 1, 1.0)], Relation::Le, 1.0))
            .build()
            .unwrap();
        let x = Allocation::from_rows(&[vec![1.0, 1.0]]);
        let (y, log) = repair(&p, &x, 1e-9);
        assert_eq!(y.row(0), &[0.5, 0.5]);
        assert_eq!(log.rows_scaled, 1);
    }

    #[test]
    fn equality_needs_projection() {
        let p = base(2, 1)
            .demand_constraint(LinearConstraint::new(vec![(0, 0, 1.0), (1, 0, 1.0)], Relation::Eq, 1.0))
            .build()
            .unwrap();
        let x = Allocation::from_rows(&[vec![0.2], vec![0.3]]);
        let (y, _) = repair(&p, &x, 1e-9);
        assert!((y.get(0, 0) + y.get(1, 0) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn boolean_flip_restores_link() {
        // x' - x >= 0 with x forced to 1 by a demand equality
        let p = base(1, 2)
            .domain(0, 0, VariableDomain::Box { lo: 0.0, hi: 1.0 })
            .domain(0, 1, VariableDomain::Boolean)
            .resource_constraint(LinearConstraint::new(vec![(0, 1, 1.0), (0, 0, -1.0)], Relation::Ge, 0.0))
            .demand_constraint(LinearConstraint::new(vec![(0, 0, 1.0)], Relation::Eq, 1.0))
            .build()
            .unwrap();
        let x = Allocation::from_rows(&[vec![1.0, 0.2]]);
        let (y, log) = repair(&p, &x, 1e-9);
        assert_eq!(y.get(0, 1), 1.0);
        assert_eq!(log.flips, 1);
        assert!(p.check_feasibility(&y, 1e-9).unwrap().feasible);
    }
}
