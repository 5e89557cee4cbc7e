//! Reference solvers used to certify the engine at desk scale.
//!
//! Everything here is single-threaded and built straight from the problem
//! definition rather than from the engine's grouped data, so agreement
//! between the two is meaningful.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::canonical::{CanonicalProblem, Side};
use crate::engine::AdmmState;
use crate::model::{Allocation, ObjectiveTerm, ProblemSpec, Relation, Sense, Target, VariableDomain};

const PIVOT_EPS: f64 = 1e-11;
/// Limit on enumerated discrete assignments.
pub const MILP_NODE_LIMIT: f64 = 1e7;
pub const MILP_MAX_DISCRETE: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("objective term {0} is not linear; the LP oracle cannot represent it")]
    NonLinear(&'static str),
    #[error("{count} discrete coordinates exceed the oracle limit of {limit}")]
    TooManyDiscrete { count: usize, limit: usize },
    #[error("search space of {nodes:e} assignments exceeds the oracle limit")]
    SearchTooLarge { nodes: f64 },
    #[error("problem has {0} variables; the joint oracle is limited to desk scale")]
    TooLarge(usize),
}

/// `optimize c'x  s.t.  row_k(x) rel_k b_k,  lo <= x <= hi`.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardFormLP {
    pub a: Vec<Vec<f64>>,
    pub relations: Vec<Relation>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub sense: Sense,
    pub bounds: Vec<(f64, f64)>,
}

impl StandardFormLP {
    pub fn n_vars(&self) -> usize {
        self.c.len()
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        self.c.iter().zip(x).map(|(c, v)| c * v).sum()
    }

    /// Largest violation of rows and bounds.
    pub fn violation(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for (k, row) in self.a.iter().enumerate() {
            let lhs: f64 = row.iter().zip(x).map(|(a, v)| a * v).sum();
            let v = match self.relations[k] {
                Relation::Le => lhs - self.b[k],
                Relation::Ge => self.b[k] - lhs,
                Relation::Eq => (lhs - self.b[k]).abs(),
            };
            worst = worst.max(v);
        }
        for (v, &(lo, hi)) in x.iter().zip(&self.bounds) {
            worst = worst.max(lo - v).max(v - hi);
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub status: LpStatus,
    pub x: Vec<f64>,
    pub objective: f64,
}

/// How an original variable is rebuilt from tableau columns.
#[derive(Debug, Clone, Copy)]
enum VarMap {
    Fixed(f64),
    /// `lo + y`
    Shifted { col: usize, lo: f64 },
    /// `hi - y`
    Mirrored { col: usize, hi: f64 },
    /// `y+ - y-`
    Split { pos: usize, neg: usize },
}

struct Tableau {
    rows: Vec<Vec<f64>>,
    rhs: Vec<f64>,
    basis: Vec<usize>,
    n: usize,
}

impl Tableau {
    fn pivot(&mut self, r: usize, c: usize) {
        let p = self.rows[r][c];
        for v in self.rows[r].iter_mut() {
            *v /= p;
        }
        self.rhs[r] /= p;
        let pivot_row = self.rows[r].clone();
        let pivot_rhs = self.rhs[r];
        for i in 0..self.rows.len() {
            if i == r {
                continue;
            }
            let f = self.rows[i][c];
            if f == 0.0 {
                continue;
            }
            for (v, pv) in self.rows[i].iter_mut().zip(&pivot_row) {
                *v -= f * pv;
            }
            self.rhs[i] -= f * pivot_rhs;
            self.rows[i][c] = 0.0;
        }
        self.basis[r] = c;
    }

    /// Minimizes `cost'y` over columns with `allowed[col]`. Pricing is
    /// Dantzig's rule; after a streak of degenerate pivots it switches to
    /// Bland's rule until the objective moves again, which rules out cycling.
    /// Returns false when unbounded.
    fn optimize(&mut self, cost: &[f64], allowed: &[bool]) -> bool {
        let m = self.rows.len();
        let mut reduced = cost.to_vec();
        for i in 0..m {
            let cb = cost[self.basis[i]];
            if cb != 0.0 {
                for (r, a) in reduced.iter_mut().zip(&self.rows[i]) {
                    *r -= cb * a;
                }
            }
        }
        let mut in_basis = vec![false; self.n];
        for &b in &self.basis {
            in_basis[b] = true;
        }
        let mut degenerate_streak = 0usize;
        loop {
            let bland = degenerate_streak > 50;
            let mut entering = None;
            let mut best = -1e-10;
            for j in 0..self.n {
                if !allowed[j] || in_basis[j] {
                    continue;
                }
                if reduced[j] < best {
                    entering = Some(j);
                    if bland {
                        break;
                    }
                    best = reduced[j];
                }
            }
            let Some(j) = entering else {
                return true;
            };
            let mut leave: Option<(f64, usize)> = None;
            for i in 0..m {
                let a = self.rows[i][j];
                if a > PIVOT_EPS {
                    let ratio = self.rhs[i] / a;
                    let better = match leave {
                        None => true,
                        Some((r, k)) => ratio < r - 1e-12 || (ratio <= r + 1e-12 && self.basis[i] < self.basis[k]),
                    };
                    if better {
                        leave = Some((ratio, i));
                    }
                }
            }
            let Some((ratio, r)) = leave else {
                return false;
            };
            if ratio <= 1e-12 {
                degenerate_streak += 1;
            } else {
                degenerate_streak = 0;
            }
            in_basis[self.basis[r]] = false;
            in_basis[j] = true;
            self.pivot(r, j);
            let f = reduced[j];
            for (rc, a) in reduced.iter_mut().zip(&self.rows[r]) {
                *rc -= f * a;
            }
            reduced[j] = 0.0;
        }
    }
}

/// Dense two-phase simplex with Bland's anti-cycling rule.
pub fn simplex_solve(lp: &StandardFormLP) -> LpSolution {
    let nv = lp.n_vars();
    // column layout for the shifted, nonnegative variables
    let mut maps = Vec::with_capacity(nv);
    let mut ncols = 0;
    let mut extra_rows: Vec<(usize, f64)> = Vec::new();
    for &(lo, hi) in &lp.bounds {
        let m = if lo == hi {
            VarMap::Fixed(lo)
        } else if lo.is_finite() {
            let col = ncols;
            ncols += 1;
            if hi.is_finite() {
                extra_rows.push((col, hi - lo));
            }
            VarMap::Shifted { col, lo }
        } else if hi.is_finite() {
            let col = ncols;
            ncols += 1;
            VarMap::Mirrored { col, hi }
        } else {
            ncols += 2;
            VarMap::Split {
                pos: ncols - 2,
                neg: ncols - 1,
            }
        };
        maps.push(m);
    }
    if lp.bounds.iter().any(|&(lo, hi)| lo > hi) {
        return LpSolution {
            status: LpStatus::Infeasible,
            x: vec![0.0; nv],
            objective: f64::NAN,
        };
    }

    // rows over the structural columns
    let mut rows: Vec<(Vec<f64>, Relation, f64)> = Vec::new();
    for (k, arow) in lp.a.iter().enumerate() {
        let mut row = vec![0.0; ncols];
        let mut rhs = lp.b[k];
        for (v, &a) in arow.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            match maps[v] {
                VarMap::Fixed(val) => rhs -= a * val,
                VarMap::Shifted { col, lo } => {
                    row[col] += a;
                    rhs -= a * lo;
                }
                VarMap::Mirrored { col, hi } => {
                    row[col] -= a;
                    rhs -= a * hi;
                }
                VarMap::Split { pos, neg } => {
                    row[pos] += a;
                    row[neg] -= a;
                }
            }
        }
        rows.push((row, lp.relations[k], rhs));
    }
    for &(col, width) in &extra_rows {
        let mut row = vec![0.0; ncols];
        row[col] = 1.0;
        rows.push((row, Relation::Le, width));
    }
    // nonnegative right-hand sides
    for (row, rel, rhs) in rows.iter_mut() {
        if *rhs < 0.0 {
            row.iter_mut().for_each(|v| *v = -*v);
            *rhs = -*rhs;
            *rel = match *rel {
                Relation::Le => Relation::Ge,
                Relation::Ge => Relation::Le,
                Relation::Eq => Relation::Eq,
            };
        }
    }
    let m = rows.len();
    let n_slack = rows.iter().filter(|r| r.1 != Relation::Eq).count();
    let n_art = rows.iter().filter(|r| r.1 != Relation::Le).count();
    let n = ncols + n_slack + n_art;
    let mut t = Tableau {
        rows: Vec::with_capacity(m),
        rhs: Vec::with_capacity(m),
        basis: vec![0; m],
        n,
    };
    let mut s_col = ncols;
    let mut a_col = ncols + n_slack;
    let mut is_art = vec![false; n];
    for (i, (row, rel, rhs)) in rows.into_iter().enumerate() {
        let mut full = row;
        full.resize(n, 0.0);
        match rel {
            Relation::Le => {
                full[s_col] = 1.0;
                t.basis[i] = s_col;
                s_col += 1;
            }
            Relation::Ge => {
                full[s_col] = -1.0;
                s_col += 1;
                full[a_col] = 1.0;
                is_art[a_col] = true;
                t.basis[i] = a_col;
                a_col += 1;
            }
            Relation::Eq => {
                full[a_col] = 1.0;
                is_art[a_col] = true;
                t.basis[i] = a_col;
                a_col += 1;
            }
        }
        t.rows.push(full);
        t.rhs.push(rhs);
    }

    // phase 1
    if n_art > 0 {
        let cost: Vec<f64> = (0..n).map(|j| if is_art[j] { 1.0 } else { 0.0 }).collect();
        let all = vec![true; n];
        t.optimize(&cost, &all);
        let infeas: f64 = t
            .basis
            .iter()
            .enumerate()
            .filter(|(_, &b)| is_art[b])
            .map(|(i, _)| t.rhs[i])
            .sum();
        let scale = 1.0 + t.rhs.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        if infeas > 1e-9 * scale {
            return LpSolution {
                status: LpStatus::Infeasible,
                x: vec![0.0; nv],
                objective: f64::NAN,
            };
        }
        // drive artificials out of the basis; drop redundant rows
        let mut i = 0;
        while i < t.rows.len() {
            if is_art[t.basis[i]] {
                if let Some(j) = (0..n).find(|&j| !is_art[j] && t.rows[i][j].abs() > 1e-9) {
                    t.pivot(i, j);
                    i += 1;
                } else {
                    t.rows.remove(i);
                    t.rhs.remove(i);
                    t.basis.remove(i);
                }
            } else {
                i += 1;
            }
        }
    }

    // phase 2 (minimization form)
    let sign = lp.sense.sign();
    let mut cost = vec![0.0; n];
    let mut constant = 0.0;
    for (v, &c) in lp.c.iter().enumerate() {
        let c = sign * c;
        match maps[v] {
            VarMap::Fixed(val) => constant += c * val,
            VarMap::Shifted { col, lo } => {
                cost[col] += c;
                constant += c * lo;
            }
            VarMap::Mirrored { col, hi } => {
                cost[col] -= c;
                constant += c * hi;
            }
            VarMap::Split { pos, neg } => {
                cost[pos] += c;
                cost[neg] -= c;
            }
        }
    }
    let allowed: Vec<bool> = (0..n).map(|j| !is_art[j]).collect();
    if !t.optimize(&cost, &allowed) {
        return LpSolution {
            status: LpStatus::Unbounded,
            x: vec![0.0; nv],
            objective: f64::NAN,
        };
    }
    let mut y = vec![0.0; n];
    for (i, &b) in t.basis.iter().enumerate() {
        y[b] = t.rhs[i];
    }
    let x: Vec<f64> = maps
        .iter()
        .map(|m| match *m {
            VarMap::Fixed(v) => v,
            VarMap::Shifted { col, lo } => lo + y[col],
            VarMap::Mirrored { col, hi } => hi - y[col],
            VarMap::Split { pos, neg } => y[pos] - y[neg],
        })
        .collect();
    let _ = constant;
    let objective = lp.objective(&x);
    LpSolution {
        status: LpStatus::Optimal,
        x,
        objective,
    }
}

/// Variable layout of an LP built from a problem.
#[derive(Debug, Clone, PartialEq)]
pub struct LpMapping {
    /// Matrix entry of each variable; the epigraph scalar, if any, is last.
    pub entries: Vec<(usize, usize)>,
    pub epigraph_var: Option<usize>,
    pub shape: (usize, usize),
}

impl LpMapping {
    pub fn allocation(&self, x: &[f64]) -> Allocation {
        let mut a = Allocation::zeros(self.shape.0, self.shape.1);
        for (k, &(i, j)) in self.entries.iter().enumerate() {
            a.set(i, j, x[k]);
        }
        a
    }
}

/// LP over the active entries of a linear (or epigraph) problem, in its
/// original inequality form. Discrete domains are relaxed to their bounds.
pub fn lp_from_problem(problem: &ProblemSpec) -> Result<(StandardFormLP, LpMapping), OracleError> {
    let (n, m) = problem.shape();
    let mut index = HashMap::new();
    let mut entries = Vec::new();
    let mut bounds = Vec::new();
    for i in 0..n {
        for j in 0..m {
            if problem.is_active(i, j) {
                index.insert((i, j), entries.len());
                entries.push((i, j));
                bounds.push(problem.domain(i, j).bounds());
            }
        }
    }
    let has_epi = problem.objective().iter().any(ObjectiveTerm::is_epigraph);
    let nv = entries.len() + usize::from(has_epi);
    let t_var = has_epi.then_some(entries.len());
    if has_epi {
        bounds.push((f64::NEG_INFINITY, f64::INFINITY));
    }
    let row_of = |es: &[(usize, usize, f64)]| {
        let mut row = vec![0.0; nv];
        for &(i, j, a) in es {
            if let Some(&k) = index.get(&(i, j)) {
                row[k] += a;
            }
        }
        row
    };
    let mut a = Vec::new();
    let mut relations = Vec::new();
    let mut b = Vec::new();
    for c in problem.resource_constraints().iter().chain(problem.demand_constraints()) {
        a.push(row_of(&c.entries));
        relations.push(c.relation);
        b.push(c.rhs);
    }
    let mut c = vec![0.0; nv];
    for term in problem.objective() {
        match term {
            ObjectiveTerm::Linear { entries, .. } => {
                for (k, v) in row_of(entries).into_iter().enumerate() {
                    c[k] += v;
                }
            }
            ObjectiveTerm::EpigraphMin { utilities } | ObjectiveTerm::EpigraphMax { utilities } => {
                let rel = if matches!(term, ObjectiveTerm::EpigraphMin { .. }) {
                    Relation::Ge
                } else {
                    Relation::Le
                };
                let t = t_var.expect("epigraph variable allocated");
                for u in utilities {
                    let mut row = row_of(&u.entries);
                    row[t] = -1.0;
                    a.push(row);
                    relations.push(rel);
                    b.push(0.0);
                }
                c[t] += 1.0;
            }
            other => return Err(OracleError::NonLinear(other.kind_name())),
        }
    }
    if let Some(t) = t_var {
        entries.push((usize::MAX, usize::MAX));
        let _ = t;
    }
    let lp = StandardFormLP {
        a,
        relations,
        b,
        c,
        sense: problem.sense(),
        bounds,
    };
    let mut mapping = LpMapping {
        entries,
        epigraph_var: t_var,
        shape: (n, m),
    };
    if t_var.is_some() {
        mapping.entries.pop();
    }
    Ok((lp, mapping))
}

/// Solves the linear problem with the simplex oracle; returns the optimal
/// allocation and objective in the problem's sense.
pub fn solve_lp_problem(problem: &ProblemSpec) -> Result<(LpStatus, Allocation, f64), OracleError> {
    let (lp, map) = lp_from_problem(problem)?;
    let sol = simplex_solve(&lp);
    let alloc = map.allocation(&sol.x);
    Ok((sol.status, alloc, sol.objective))
}

/// Minimization LP over the canonical equality form: consensus coordinates
/// (with the transformed domains) plus one nonnegative slack per inequality.
pub fn lp_from_canonical(canonical: &CanonicalProblem) -> Result<StandardFormLP, OracleError> {
    let t = canonical.transformed();
    for term in t.objective() {
        if !matches!(term, ObjectiveTerm::Linear { .. }) {
            return Err(OracleError::NonLinear(term.kind_name()));
        }
    }
    let nc = canonical.n_coords();
    let cons = canonical.constraints();
    let mut slack_col = HashMap::new();
    for (cid, c) in cons.iter().enumerate() {
        if c.slack_sign.is_some() {
            slack_col.insert(cid, nc + slack_col.len());
        }
    }
    let nv = nc + slack_col.len();
    let mut bounds: Vec<(f64, f64)> = canonical.coords().iter().map(|&(i, j)| t.domain(i, j).bounds()).collect();
    bounds.resize(nv, (0.0, f64::INFINITY));
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (cid, c) in cons.iter().enumerate() {
        let mut row = vec![0.0; nv];
        for &(k, v) in &c.terms {
            row[k] += v;
        }
        if let Some(s) = c.slack_sign {
            row[slack_col[&cid]] = s;
        }
        a.push(row);
        b.push(c.rhs);
    }
    let mut cost = vec![0.0; nv];
    for side in [Side::Resource, Side::Demand] {
        for g in canonical.groups(side) {
            for (k, &coord) in g.coords.iter().enumerate() {
                cost[coord] += g.objective.linear[k];
            }
        }
    }
    Ok(StandardFormLP {
        relations: vec![Relation::Eq; a.len()],
        a,
        b,
        c: cost,
        sense: Sense::Minimize,
        bounds,
    })
}

/// Optimum of the canonical LP, converted back to the source sense.
pub fn canonical_lp_objective(canonical: &CanonicalProblem) -> Result<(LpStatus, f64), OracleError> {
    let lp = lp_from_canonical(canonical)?;
    let sol = simplex_solve(&lp);
    Ok((sol.status, canonical.sense().sign() * sol.objective))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MilpResult {
    /// `None` when every assignment is infeasible.
    pub allocation: Option<Allocation>,
    pub objective: f64,
    pub nodes: u64,
}

/// Exhaustive search over the discrete entries; the continuous remainder of
/// each assignment is solved by the simplex oracle.
pub fn brute_force_milp(problem: &ProblemSpec) -> Result<MilpResult, OracleError> {
    let (lp, map) = lp_from_problem(problem)?;
    let discrete: Vec<(usize, Vec<f64>)> = map
        .entries
        .iter()
        .enumerate()
        .filter_map(|(k, &(i, j))| match problem.domain(i, j) {
            VariableDomain::Boolean => Some((k, vec![0.0, 1.0])),
            VariableDomain::IntegerBox { lo, hi } => Some((k, (lo..=hi).map(|v| v as f64).collect())),
            _ => None,
        })
        .collect();
    if discrete.len() > MILP_MAX_DISCRETE {
        return Err(OracleError::TooManyDiscrete {
            count: discrete.len(),
            limit: MILP_MAX_DISCRETE,
        });
    }
    let nodes: f64 = discrete.iter().map(|d| d.1.len() as f64).product();
    if nodes > MILP_NODE_LIMIT {
        return Err(OracleError::SearchTooLarge { nodes });
    }
    let better = |a: f64, b: f64| match problem.sense() {
        Sense::Minimize => a < b - 1e-12,
        Sense::Maximize => a > b + 1e-12,
    };
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut digits = vec![0usize; discrete.len()];
    let mut count = 0u64;
    let mut sub = lp.clone();
    loop {
        for (d, &(k, ref values)) in discrete.iter().enumerate() {
            let v = values[digits[d]];
            sub.bounds[k] = (v, v);
        }
        count += 1;
        let sol = simplex_solve(&sub);
        if sol.status == LpStatus::Optimal && best.as_ref().is_none_or(|(b, _)| better(sol.objective, *b)) {
            best = Some((sol.objective, sol.x));
        }
        // odometer increment
        let mut pos = 0;
        loop {
            if pos == digits.len() {
                return Ok(match best {
                    Some((obj, x)) => MilpResult {
                        allocation: Some(map.allocation(&x)),
                        objective: obj,
                        nodes: count,
                    },
                    None => MilpResult {
                        allocation: None,
                        objective: f64::NAN,
                        nodes: count,
                    },
                });
            }
            digits[pos] += 1;
            if digits[pos] < discrete[pos].1.len() {
                break;
            }
            digits[pos] = 0;
            pos += 1;
        }
    }
}

/// Independent objective evaluation straight from the term definitions.
pub fn evaluate_objective(problem: &ProblemSpec, x: &Allocation) -> f64 {
    let lin = |es: &[(usize, usize, f64)]| es.iter().map(|&(i, j, c)| c * x.get(i, j)).sum::<f64>();
    let max_sign = match problem.sense() {
        Sense::Maximize => 1.0,
        Sense::Minimize => -1.0,
    };
    problem
        .objective()
        .iter()
        .map(|t| match t {
            ObjectiveTerm::Linear { entries, .. } => lin(entries),
            ObjectiveTerm::WeightedLog {
                weight, entries, floor, ..
            } => max_sign * weight * (lin(entries) + floor).ln(),
            ObjectiveTerm::Quadratic { entries, .. } => {
                -max_sign * entries.iter().map(|&(i, j, w)| w * x.get(i, j).powi(2)).sum::<f64>()
            }
            ObjectiveTerm::EpigraphMin { utilities } => {
                utilities.iter().map(|u| lin(&u.entries)).fold(f64::INFINITY, f64::min)
            }
            ObjectiveTerm::EpigraphMax { utilities } => {
                utilities.iter().map(|u| lin(&u.entries)).fold(f64::NEG_INFINITY, f64::max)
            }
        })
        .sum()
}

/// One side's block of the augmented Lagrangian, in global indexing.
///
/// Variables are the consensus coordinates followed by one slack per
/// inequality owned by this side (ordered by constraint id).
struct JointBlock {
    side: Side,
    n: usize,
    slack_of: HashMap<usize, usize>,
    /// rows: (terms over variables, rhs, scaled dual)
    rows: Vec<(Vec<(usize, f64)>, f64, f64)>,
    linear: Vec<f64>,
    quadratic: Vec<f64>,
    logs: Vec<(f64, f64, Vec<(usize, f64)>)>,
    bounds: Vec<(f64, f64)>,
    target: Vec<f64>,
    rho: f64,
}

impl JointBlock {
    fn build(canonical: &CanonicalProblem, state: &AdmmState, side: Side) -> Result<Self, OracleError> {
        let nc = canonical.n_coords();
        if nc > 200 {
            return Err(OracleError::TooLarge(nc));
        }
        let cons = canonical.constraints();
        let mut slack_of = HashMap::new();
        for (cid, c) in cons.iter().enumerate() {
            if c.side == side && c.slack_sign.is_some() {
                slack_of.insert(cid, nc + slack_of.len());
            }
        }
        let n = nc + slack_of.len();
        // scaled duals keyed by constraint id
        let mut dual = HashMap::new();
        let groups = canonical.groups(side);
        for (g, group) in groups.iter().enumerate() {
            for (k, &cid) in group.constraint_ids.iter().enumerate() {
                let d = match side {
                    Side::Resource => state.alpha[g][k],
                    Side::Demand => state.beta[g][k],
                };
                dual.insert(cid, d);
            }
        }
        let mut rows = Vec::new();
        for (cid, c) in cons.iter().enumerate() {
            if c.side != side {
                continue;
            }
            let mut terms = c.terms.clone();
            if let Some(s) = c.slack_sign {
                terms.push((slack_of[&cid], s));
            }
            rows.push((terms, c.rhs, dual.get(&cid).copied().unwrap_or(0.0)));
        }
        // objective terms straight from the transformed problem
        let t = canonical.transformed();
        let sign = t.sense().sign();
        let mut linear = vec![0.0; n];
        let mut quadratic = vec![0.0; n];
        let mut logs = Vec::new();
        let owns = |target: &Target| match target {
            Target::Row(_) | Target::Global => side == Side::Resource,
            Target::Column(_) => side == Side::Demand,
        };
        let map = |es: &[(usize, usize, f64)]| -> Vec<(usize, f64)> {
            es.iter()
                .filter_map(|&(i, j, v)| canonical.coord_of(i, j).map(|k| (k, v)))
                .collect()
        };
        for term in t.objective() {
            match term {
                ObjectiveTerm::Linear { target, entries } if owns(target) => {
                    for (k, v) in map(entries) {
                        linear[k] += sign * v;
                    }
                }
                ObjectiveTerm::Quadratic { target, entries } if owns(target) => {
                    for (k, v) in map(entries) {
                        quadratic[k] += v;
                    }
                }
                ObjectiveTerm::WeightedLog {
                    target,
                    weight,
                    entries,
                    floor,
                } if owns(target) => logs.push((*weight, *floor, map(entries))),
                _ => {}
            }
        }
        let mut bounds = vec![(f64::NEG_INFINITY, f64::INFINITY); n];
        if side == Side::Resource {
            for (k, &(i, j)) in canonical.coords().iter().enumerate() {
                bounds[k] = t.domain(i, j).bounds();
            }
        }
        for b in bounds.iter_mut().skip(nc) {
            *b = (0.0, f64::INFINITY);
        }
        let target = (0..nc)
            .map(|k| match side {
                Side::Resource => state.z[k] - state.lambda[k],
                Side::Demand => state.x[k] + state.lambda[k],
            })
            .collect();
        Ok(Self {
            side,
            n,
            slack_of,
            rows,
            linear,
            quadratic,
            logs,
            bounds,
            target,
            rho: state.rho,
        })
    }

    fn value(&self, v: &[f64]) -> f64 {
        let mut f = 0.0;
        for k in 0..self.n {
            f += self.linear[k] * v[k] + self.quadratic[k] * v[k] * v[k];
        }
        for (w, floor, es) in &self.logs {
            let arg = es.iter().map(|&(k, a)| a * v[k]).sum::<f64>() + floor;
            if arg <= 0.0 {
                return f64::INFINITY;
            }
            f -= w * arg.ln();
        }
        for (terms, rhs, u) in &self.rows {
            let r = terms.iter().map(|&(k, a)| a * v[k]).sum::<f64>() - rhs + u;
            f += 0.5 * self.rho * r * r;
        }
        for (k, t) in self.target.iter().enumerate() {
            f += 0.5 * self.rho * (v[k] - t).powi(2);
        }
        f
    }

    fn gradient(&self, v: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.n];
        for k in 0..self.n {
            g[k] = self.linear[k] + 2.0 * self.quadratic[k] * v[k];
        }
        for (w, floor, es) in &self.logs {
            let arg = es.iter().map(|&(k, a)| a * v[k]).sum::<f64>() + floor;
            for &(k, a) in es {
                g[k] -= w * a / arg;
            }
        }
        for (terms, rhs, u) in &self.rows {
            let r = terms.iter().map(|&(k, a)| a * v[k]).sum::<f64>() - rhs + u;
            for &(k, a) in terms {
                g[k] += self.rho * r * a;
            }
        }
        for (k, t) in self.target.iter().enumerate() {
            g[k] += self.rho * (v[k] - t);
        }
        g
    }

    fn project(&self, v: &mut [f64]) {
        for (x, &(lo, hi)) in v.iter_mut().zip(&self.bounds) {
            *x = x.clamp(lo, hi);
        }
    }

    fn hessian(&self, v: &[f64]) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.n, self.n);
        for k in 0..self.n {
            h[(k, k)] += 2.0 * self.quadratic[k];
        }
        for k in 0..self.target.len() {
            h[(k, k)] += self.rho;
        }
        for (w, floor, es) in &self.logs {
            let arg = es.iter().map(|&(k, a)| a * v[k]).sum::<f64>() + floor;
            let c = w / (arg * arg);
            for &(k, a) in es {
                for &(l, b) in es {
                    h[(k, l)] += c * a * b;
                }
            }
        }
        for (terms, _, _) in &self.rows {
            for &(k, a) in terms {
                for &(l, b) in terms {
                    h[(k, l)] += self.rho * a * b;
                }
            }
        }
        h
    }

    /// Projected Newton on the bound-constrained block: variables at a bound
    /// with the gradient pushing outward are held, a Newton step is taken on
    /// the rest, and the projected arc is backtracked (Armijo). Runs until
    /// `|v - P(v - g)|_inf <= tol`.
    fn minimize(&self, start: &[f64], tol: f64) -> Vec<f64> {
        let mut v = start.to_vec();
        self.project(&mut v);
        let mut f = self.value(&v);
        if !f.is_finite() {
            // move strictly inside the log domains
            for (_, _, es) in &self.logs {
                for &(k, _) in es {
                    v[k] = v[k].max(1.0).clamp(self.bounds[k].0, self.bounds[k].1);
                }
            }
            f = self.value(&v);
        }
        for _ in 0..10_000 {
            let g = self.gradient(&v);
            let mut pg: Vec<f64> = v.iter().zip(&g).map(|(x, d)| x - d).collect();
            self.project(&mut pg);
            let stat = pg.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if stat <= tol {
                break;
            }
            let eps = stat.min(1e-3);
            let held: Vec<bool> = (0..self.n)
                .map(|k| {
                    let (lo, hi) = self.bounds[k];
                    (v[k] <= lo + eps && g[k] > 0.0) || (v[k] >= hi - eps && g[k] < 0.0)
                })
                .collect();
            let free: Vec<usize> = (0..self.n).filter(|&k| !held[k]).collect();
            let mut d: Vec<f64> = g.iter().map(|x| -x).collect();
            if !free.is_empty() {
                let h = self.hessian(&v);
                let hf = DMatrix::from_fn(free.len(), free.len(), |r, c| h[(free[r], free[c])]);
                let gf = DVector::from_fn(free.len(), |r, _| -g[free[r]]);
                let step = hf.clone().cholesky().map(|ch| ch.solve(&gf)).or_else(|| {
                    let shift = 1e-10 * (1.0 + hf.diagonal().amax());
                    (hf + DMatrix::identity(free.len(), free.len()) * shift).cholesky().map(|ch| ch.solve(&gf))
                });
                if let Some(step) = step {
                    for (r, &k) in free.iter().enumerate() {
                        d[k] = step[r];
                    }
                }
            }
            let mut t = 1.0;
            let mut moved = false;
            while t > 1e-20 {
                let mut trial: Vec<f64> = v.iter().zip(&d).map(|(x, dk)| x + t * dk).collect();
                self.project(&mut trial);
                let ft = self.value(&trial);
                let decrease: f64 = g.iter().zip(trial.iter().zip(&v)).map(|(gk, (a, b))| gk * (a - b)).sum();
                if ft.is_finite() && ft <= f + 1e-4 * decrease.min(0.0) && decrease < 0.0 {
                    v = trial;
                    f = ft;
                    moved = true;
                    break;
                }
                t *= 0.5;
            }
            if !moved {
                break;
            }
        }
        v
    }

    /// Splits a block vector into consensus values and per-group slacks.
    fn unpack(&self, canonical: &CanonicalProblem, v: &[f64]) -> JointUpdate {
        let nc = canonical.n_coords();
        let slacks = canonical
            .groups(self.side)
            .iter()
            .map(|g| {
                g.constraint_ids
                    .iter()
                    .filter_map(|cid| self.slack_of.get(cid).map(|&k| v[k]))
                    .collect()
            })
            .collect();
        JointUpdate {
            coords: v[..nc].to_vec(),
            slacks,
        }
    }
}

/// Result of a monolithic block minimization.
#[derive(Debug, Clone, PartialEq)]
pub struct JointUpdate {
    pub coords: Vec<f64>,
    /// Slack values per group, in the group's slack order.
    pub slacks: Vec<Vec<f64>>,
}

fn joint_update(canonical: &CanonicalProblem, state: &AdmmState, side: Side, tol: f64) -> Result<JointUpdate, OracleError> {
    let block = JointBlock::build(canonical, state, side)?;
    let nc = canonical.n_coords();
    let mut start = vec![0.0; block.n];
    let (coords, slacks) = match side {
        Side::Resource => (&state.x, &state.x_slack),
        Side::Demand => (&state.z, &state.z_slack),
    };
    start[..nc].copy_from_slice(coords);
    for (g, group) in canonical.groups(side).iter().enumerate() {
        let mut s = 0;
        for cid in &group.constraint_ids {
            if let Some(&k) = block.slack_of.get(cid) {
                start[k] = slacks[g][s];
                s += 1;
            }
        }
    }
    let v = block.minimize(&start, tol);
    Ok(block.unpack(canonical, &v))
}

/// Minimizes the augmented Lagrangian over all resource-side variables at
/// once, ignoring the group structure. Scaled duals are expected.
pub fn joint_x_update_oracle(canonical: &CanonicalProblem, state: &AdmmState, tol: f64) -> Result<JointUpdate, OracleError> {
    joint_update(canonical, state, Side::Resource, tol)
}

/// Demand-side counterpart of [`joint_x_update_oracle`], using `state.x`.
pub fn joint_z_update_oracle(canonical: &CanonicalProblem, state: &AdmmState, tol: f64) -> Result<JointUpdate, OracleError> {
    joint_update(canonical, state, Side::Demand, tol)
}

/// `{x : a_k x <= b_k (k < n_eq are equalities)}` in dense form, used for
/// exact Euclidean projections.
struct Polytope {
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
    n_eq: usize,
    dim: usize,
}

impl Polytope {
    fn new(rows: &[(Vec<(usize, f64)>, Relation, f64)], bounds: &[(f64, f64)]) -> Self {
        let dim = bounds.len();
        let dense = |terms: &[(usize, f64)], s: f64| {
            let mut r = vec![0.0; dim];
            for &(k, v) in terms {
                r[k] += s * v;
            }
            r
        };
        let (mut eq, mut ineq) = (Vec::new(), Vec::new());
        for (terms, rel, rhs) in rows {
            match rel {
                Relation::Eq => eq.push((dense(terms, 1.0), *rhs)),
                Relation::Le => ineq.push((dense(terms, 1.0), *rhs)),
                Relation::Ge => ineq.push((dense(terms, -1.0), -rhs)),
            }
        }
        for (k, &(lo, hi)) in bounds.iter().enumerate() {
            let unit = |s: f64| {
                let mut r = vec![0.0; dim];
                r[k] = s;
                r
            };
            if lo == hi {
                eq.push((unit(1.0), lo));
                continue;
            }
            if lo.is_finite() {
                ineq.push((unit(-1.0), -lo));
            }
            if hi.is_finite() {
                ineq.push((unit(1.0), hi));
            }
        }
        let n_eq = eq.len();
        let (a, b) = eq.into_iter().chain(ineq).unzip();
        Self { a, b, n_eq, dim }
    }

    fn row_dot(&self, k: usize, x: &[f64]) -> f64 {
        self.a[k].iter().zip(x).map(|(a, v)| a * v).sum()
    }

    /// A vertex of the polytope from the simplex oracle.
    fn feasible_point(&self) -> Option<Vec<f64>> {
        let lp = StandardFormLP {
            a: self.a.clone(),
            relations: (0..self.a.len())
                .map(|k| if k < self.n_eq { Relation::Eq } else { Relation::Le })
                .collect(),
            b: self.b.clone(),
            c: vec![0.0; self.dim],
            sense: Sense::Minimize,
            bounds: vec![(f64::NEG_INFINITY, f64::INFINITY); self.dim],
        };
        let sol = simplex_solve(&lp);
        (sol.status == LpStatus::Optimal).then_some(sol.x)
    }

    /// Primal active-set method for `min |x - p|^2` started from the
    /// feasible point `start`.
    fn project(&self, p: &[f64], start: &[f64]) -> Vec<f64> {
        let mut x = start.to_vec();
        let scale = 1.0 + p.iter().chain(start).fold(0.0f64, |m, v| m.max(v.abs()));
        let tol = 1e-12 * scale;
        let mut basis = RowBasis::default();
        for k in 0..self.a.len() {
            if k < self.n_eq || self.row_dot(k, &x) >= self.b[k] - tol {
                basis.try_push(k, &self.a[k]);
            }
        }
        for _ in 0..10 * (self.a.len() + self.dim) + 100 {
            let resid: Vec<f64> = p.iter().zip(&x).map(|(a, b)| a - b).collect();
            let coef = basis.coefficients(&resid);
            let mut d = resid.clone();
            for (q, c) in basis.q.iter().zip(&coef) {
                axpy(&mut d, -c, q);
            }
            let dnorm = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if dnorm <= tol {
                let mu = basis.multipliers(&coef);
                let worst = (0..basis.rows.len())
                    .filter(|&r| basis.rows[r] >= self.n_eq)
                    .min_by(|&a, &b| mu[a].total_cmp(&mu[b]));
                match worst {
                    Some(r) if mu[r] < -1e-10 * scale => {
                        let mut kept = basis.rows.clone();
                        kept.remove(r);
                        basis = RowBasis::default();
                        for k in kept {
                            basis.try_push(k, &self.a[k]);
                        }
                        continue;
                    }
                    _ => return x,
                }
            }
            let dn = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mut alpha = 1.0;
            let mut blocking = None;
            for k in self.n_eq..self.a.len() {
                if basis.rows.contains(&k) {
                    continue;
                }
                let ad = self.row_dot(k, &d);
                let an = self.a[k].iter().map(|v| v * v).sum::<f64>().sqrt();
                if ad > 1e-12 * an * dn {
                    let room = (self.b[k] - self.row_dot(k, &x)).max(0.0);
                    let step = room / ad;
                    if step < alpha {
                        alpha = step;
                        blocking = Some(k);
                    }
                }
            }
            axpy(&mut x, alpha, &d);
            if let Some(k) = blocking {
                if !basis.try_push(k, &self.a[k]) {
                    return x;
                }
            }
        }
        x
    }
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

/// Orthonormal basis `Q` of a set of linearly independent rows, with the
/// upper-triangular `R` such that `row_r = sum_s R[s][r] q_s`.
#[derive(Default)]
struct RowBasis {
    rows: Vec<usize>,
    q: Vec<Vec<f64>>,
    r: Vec<Vec<f64>>,
}

impl RowBasis {
    /// Adds row `k` unless it lies (numerically) in the current span.
    fn try_push(&mut self, k: usize, a: &[f64]) -> bool {
        let norm = dot(a, a).sqrt();
        if norm == 0.0 {
            return false;
        }
        let mut v = a.to_vec();
        let mut col = vec![0.0; self.q.len() + 1];
        // two passes of modified Gram-Schmidt
        for _ in 0..2 {
            for (s, q) in self.q.iter().enumerate() {
                let c = dot(q, &v);
                col[s] += c;
                axpy(&mut v, -c, q);
            }
        }
        let rest = dot(&v, &v).sqrt();
        if rest <= 1e-8 * norm {
            return false;
        }
        v.iter_mut().for_each(|x| *x /= rest);
        col[self.q.len()] = rest;
        for (s, row) in self.r.iter_mut().enumerate() {
            row.push(col[s]);
        }
        let mut last = vec![0.0; self.q.len() + 1];
        last[self.q.len()] = rest;
        self.r.push(last);
        self.q.push(v);
        self.rows.push(k);
        true
    }

    fn coefficients(&self, v: &[f64]) -> Vec<f64> {
        self.q.iter().map(|q| dot(q, v)).collect()
    }

    /// Solves `R mu = coef` by back substitution.
    fn multipliers(&self, coef: &[f64]) -> Vec<f64> {
        let w = coef.len();
        let mut mu = vec![0.0; w];
        for s in (0..w).rev() {
            let tail: f64 = (s + 1..w).map(|t| self.r[s][t] * mu[t]).sum();
            mu[s] = (coef[s] - tail) / self.r[s][s];
        }
        mu
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConcaveSolution {
    pub allocation: Allocation,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Projected gradient on the whole problem (concave maximization or convex
/// minimization with log, linear and quadratic terms), with exact
/// projections onto the feasible polytope, run until the unit-step projected
/// gradient moves the iterate by at most `tol`.
pub fn projected_gradient_solve(problem: &ProblemSpec, tol: f64, max_iter: usize) -> ConcaveSolution {
    let (n, m) = problem.shape();
    let mut index = HashMap::new();
    let mut entries = Vec::new();
    let mut bounds = Vec::new();
    for i in 0..n {
        for j in 0..m {
            if problem.is_active(i, j) {
                index.insert((i, j), entries.len());
                entries.push((i, j));
                bounds.push(problem.domain(i, j).bounds());
            }
        }
    }
    let nv = entries.len();
    let map = |es: &[(usize, usize, f64)]| -> Vec<(usize, f64)> {
        es.iter()
            .filter_map(|&(i, j, a)| index.get(&(i, j)).map(|&k| (k, a)))
            .collect()
    };
    let rows: Vec<(Vec<(usize, f64)>, Relation, f64)> = problem
        .resource_constraints()
        .iter()
        .chain(problem.demand_constraints())
        .map(|c| (map(&c.entries), c.relation, c.rhs))
        .collect();
    let to_alloc = |v: &[f64]| {
        let mut a = Allocation::zeros(n, m);
        for (k, &(i, j)) in entries.iter().enumerate() {
            a.set(i, j, v[k]);
        }
        a
    };
    // minimization form
    let sign = problem.sense().sign();
    let value = |v: &[f64]| {
        let f = evaluate_objective(problem, &to_alloc(v));
        if f.is_nan() {
            f64::INFINITY
        } else {
            sign * f
        }
    };
    let grad = |v: &[f64]| {
        let mut g = vec![0.0; nv];
        for t in problem.objective() {
            match t {
                ObjectiveTerm::Linear { entries, .. } => {
                    for (k, a) in map(entries) {
                        g[k] += sign * a;
                    }
                }
                ObjectiveTerm::WeightedLog {
                    weight, entries, floor, ..
                } => {
                    let es = map(entries);
                    let arg = es.iter().map(|&(k, a)| a * v[k]).sum::<f64>() + floor;
                    // minimization form carries -w ln(arg) in either sense
                    for (k, a) in es {
                        g[k] -= weight * a / arg;
                    }
                }
                ObjectiveTerm::Quadratic { entries, .. } => {
                    for (k, w) in map(entries) {
                        g[k] += 2.0 * w * v[k];
                    }
                }
                _ => {}
            }
        }
        g
    };
    let poly = Polytope::new(&rows, &bounds);
    let Some(vertex) = poly.feasible_point() else {
        let allocation = to_alloc(&vec![0.0; nv]);
        return ConcaveSolution {
            objective: f64::NAN,
            allocation,
            iterations: 0,
            converged: false,
        };
    };
    // start away from the log singularities: the projection of a central
    // point, or the midpoint between it and the vertex when that is better
    let centre: Vec<f64> = bounds
        .iter()
        .map(|&(lo, hi)| if hi.is_finite() { 0.5 * (lo + hi) } else { lo.max(0.0) + 1.0 })
        .collect();
    let projected = poly.project(&centre, &vertex);
    let mid: Vec<f64> = projected.iter().zip(&vertex).map(|(a, b)| 0.5 * (a + b)).collect();
    let mut v = [projected, mid, vertex]
        .into_iter()
        .min_by(|a, b| value(a).total_cmp(&value(b)))
        .expect("three candidates");
    let mut f = value(&v);
    let mut step = 1.0;
    let mut iterations = 0;
    let mut converged = false;
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    for it in 0..max_iter {
        iterations = it + 1;
        let g = grad(&v);
        // stationarity: distance to the unit-step projected gradient point
        let unit: Vec<f64> = v.iter().zip(&g).map(|(x, d)| x - d).collect();
        if dist(&poly.project(&unit, &v), &v) <= tol {
            converged = true;
            break;
        }
        let mut t = step;
        let accepted = loop {
            let trial_raw: Vec<f64> = v.iter().zip(&g).map(|(x, d)| x - t * d).collect();
            let trial = poly.project(&trial_raw, &v);
            let ft = value(&trial);
            let d2: f64 = trial.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum();
            // sufficient decrease along the projection arc
            if ft.is_finite() && ft <= f - 1e-4 * d2 / t {
                break Some((trial, ft));
            }
            t *= 0.5;
            if t < 1e-30 {
                break None;
            }
        };
        let Some((next, nf)) = accepted else {
            break;
        };
        v = next;
        f = nf;
        step = (t * 2.0).min(1e6);
    }
    let allocation = to_alloc(&v);
    ConcaveSolution {
        objective: evaluate_objective(problem, &allocation),
        allocation,
        iterations,
        converged,
    }
}

/// Exact minimizer of `1/2 v'Qv + q'v` over a box by enumerating which
/// coordinates sit at a bound (`3^d` patterns) and checking KKT conditions.
pub fn box_qp_active_set(q: &[f64], lin: &[f64], bounds: &[(f64, f64)]) -> Option<Vec<f64>> {
    let d = lin.len();
    if d > 12 {
        return None;
    }
    let total = 3usize.pow(d as u32);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for code in 0..total {
        // 0 = free, 1 = at lower, 2 = at upper
        let mut state = vec![0u8; d];
        let mut c = code;
        let mut ok = true;
        for s in state.iter_mut() {
            *s = (c % 3) as u8;
            c /= 3;
        }
        let mut v = vec![0.0; d];
        for k in 0..d {
            match state[k] {
                1 if bounds[k].0.is_finite() => v[k] = bounds[k].0,
                2 if bounds[k].1.is_finite() => v[k] = bounds[k].1,
                0 => {}
                _ => ok = false,
            }
        }
        if !ok {
            continue;
        }
        let free: Vec<usize> = (0..d).filter(|&k| state[k] == 0).collect();
        if !free.is_empty() {
            let nf = free.len();
            let mut mat = DMatrix::zeros(nf, nf);
            let mut rhs = DVector::zeros(nf);
            for (r, &i) in free.iter().enumerate() {
                let mut s = -lin[i];
                for k in 0..d {
                    if state[k] != 0 {
                        s -= q[i * d + k] * v[k];
                    }
                }
                rhs[r] = s;
                for (cc, &j) in free.iter().enumerate() {
                    mat[(r, cc)] = q[i * d + j];
                }
            }
            let Some(sol) = mat.lu().solve(&rhs) else {
                continue;
            };
            for (r, &i) in free.iter().enumerate() {
                v[i] = sol[r];
            }
        }
        let feasible = v
            .iter()
            .zip(bounds)
            .all(|(x, &(lo, hi))| *x >= lo - 1e-12 && *x <= hi + 1e-12);
        if !feasible {
            continue;
        }
        // KKT sign conditions on the gradient at bound coordinates
        let kkt = (0..d).all(|k| {
            let g: f64 = (0..d).map(|j| q[k * d + j] * v[j]).sum::<f64>() + lin[k];
            match state[k] {
                1 => g >= -1e-9,
                2 => g <= 1e-9,
                _ => true,
            }
        });
        if !kkt {
            continue;
        }
        let f: f64 = (0..d)
            .map(|i| 0.5 * v[i] * (0..d).map(|j| q[i * d + j] * v[j]).sum::<f64>() + lin[i] * v[i])
            .sum();
        if best.as_ref().is_none_or(|(b, _)| f < *b) {
            best = Some((f, v));
        }
    }
    best.map(|(_, v)| v)
}
