//! Equality-form, grouped view of a [`ProblemSpec`].
//!
//! Inequalities gain a nonnegative slack owned by the side of the
//! constraint, min/max objectives are rewritten through an epigraph scalar,
//! and constraints are partitioned into disjoint resource (row) and demand
//! (column) groups. Each group carries everything a per-group subproblem
//! needs: its coordinates, equality system, local objective and domains.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use thiserror::Error;

use crate::model::{
    LinearConstraint, ModelError, ObjectiveTerm, ProblemSpec, Relation, Sense, Target, VariableDomain,
};

/// Groups with at most this many local variables store their system densely.
pub const DENSE_GROUP_LIMIT: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Side {
    Resource,
    Demand,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CanonicalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("epigraph term mixes row and column utilities")]
    MixedEpigraph,
    #[error("epigraph term has two utilities on {0:?}")]
    DuplicateEpigraphLine(Target),
    #[error("{side:?} constraint {index} spans rows {rows:?} and columns {cols:?}; it belongs to neither side")]
    SpansBothSides {
        side: Side,
        index: usize,
        rows: Vec<usize>,
        cols: Vec<usize>,
    },
    #[error("{side:?} group {group} has overlapping log terms")]
    OverlappingLogs { side: Side, group: usize },
    #[error("parameter refresh changes the problem pattern: {}", diff.join("; "))]
    PatternMismatch { diff: Vec<String> },
}

/// Bookkeeping for the epigraph scalar: one replica per utility line, living
/// in a virtual row (utilities over columns) or a virtual column (utilities
/// over rows). Replicas are tied by equalities on the virtual line and by the
/// ordinary `x = z` coupling.
#[derive(Debug, Clone, PartialEq)]
pub struct EpigraphRecord {
    /// Side that owns the virtual line's consensus equalities.
    pub virtual_side: Side,
    /// Index of the virtual row (or column) in the transformed matrix.
    pub virtual_line: usize,
    /// Lines (columns for a virtual row, rows for a virtual column) holding a replica.
    pub replica_lines: Vec<usize>,
    pub maximize_min: bool,
}

/// Dense or CSR storage of a group's equality matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum EqualitySystem {
    Dense {
        rows: usize,
        cols: usize,
        data: Vec<f64>,
    },
    Sparse {
        rows: usize,
        cols: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<usize>,
        values: Vec<f64>,
    },
}

impl EqualitySystem {
    fn from_rows(rows: &[Vec<(usize, f64)>], cols: usize) -> Self {
        if cols <= DENSE_GROUP_LIMIT {
            let mut data = vec![0.0; rows.len() * cols];
            for (r, row) in rows.iter().enumerate() {
                for &(c, v) in row {
                    data[r * cols + c] += v;
                }
            }
            EqualitySystem::Dense {
                rows: rows.len(),
                cols,
                data,
            }
        } else {
            let mut row_ptr = vec![0];
            let mut col_idx = Vec::new();
            let mut values = Vec::new();
            for row in rows {
                let mut sorted: BTreeMap<usize, f64> = BTreeMap::new();
                for &(c, v) in row {
                    *sorted.entry(c).or_insert(0.0) += v;
                }
                for (c, v) in sorted {
                    col_idx.push(c);
                    values.push(v);
                }
                row_ptr.push(col_idx.len());
            }
            EqualitySystem::Sparse {
                rows: rows.len(),
                cols,
                row_ptr,
                col_idx,
                values,
            }
        }
    }

    pub fn rows(&self) -> usize {
        match self {
            EqualitySystem::Dense { rows, .. } | EqualitySystem::Sparse { rows, .. } => *rows,
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            EqualitySystem::Dense { cols, .. } | EqualitySystem::Sparse { cols, .. } => *cols,
        }
    }

    pub fn is_dense(&self) -> bool {
        matches!(self, EqualitySystem::Dense { .. })
    }

    /// `out = A v`
    pub fn mul(&self, v: &[f64], out: &mut [f64]) {
        match self {
            EqualitySystem::Dense { rows, cols, data } => {
                for r in 0..*rows {
                    let row = &data[r * cols..(r + 1) * cols];
                    out[r] = row.iter().zip(v).map(|(a, b)| a * b).sum();
                }
            }
            EqualitySystem::Sparse {
                rows,
                row_ptr,
                col_idx,
                values,
                ..
            } => {
                for r in 0..*rows {
                    let mut s = 0.0;
                    for k in row_ptr[r]..row_ptr[r + 1] {
                        s += values[k] * v[col_idx[k]];
                    }
                    out[r] = s;
                }
            }
        }
    }

    /// `out += scale * A^T w`
    pub fn mul_t_add(&self, w: &[f64], scale: f64, out: &mut [f64]) {
        match self {
            EqualitySystem::Dense { rows, cols, data } => {
                for r in 0..*rows {
                    let s = scale * w[r];
                    if s == 0.0 {
                        continue;
                    }
                    let row = &data[r * cols..(r + 1) * cols];
                    for (o, a) in out.iter_mut().zip(row) {
                        *o += s * a;
                    }
                }
            }
            EqualitySystem::Sparse {
                rows,
                row_ptr,
                col_idx,
                values,
                ..
            } => {
                for r in 0..*rows {
                    let s = scale * w[r];
                    if s == 0.0 {
                        continue;
                    }
                    for k in row_ptr[r]..row_ptr[r + 1] {
                        out[col_idx[k]] += s * values[k];
                    }
                }
            }
        }
    }

    /// Entry `(r, c)`; used by tests and the dense Gram assembly.
    pub fn get(&self, r: usize, c: usize) -> f64 {
        match self {
            EqualitySystem::Dense { cols, data, .. } => data[r * cols + c],
            EqualitySystem::Sparse {
                row_ptr,
                col_idx,
                values,
                ..
            } => (row_ptr[r]..row_ptr[r + 1])
                .find(|&k| col_idx[k] == c)
                .map_or(0.0, |k| values[k]),
        }
    }

    fn set_values_from(&mut self, rows: &[Vec<(usize, f64)>]) {
        *self = EqualitySystem::from_rows(rows, self.cols());
    }
}

/// `-weight * ln(a^T v + floor)` over local coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalLog {
    pub weight: f64,
    pub floor: f64,
    pub coefs: Vec<(usize, f64)>,
}

/// Minimization-normalized objective restricted to one group.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LocalObjective {
    pub linear: Vec<f64>,
    /// Cost weights `w` of `w * v^2` (Hessian contribution `2w`).
    pub quadratic: Vec<f64>,
    pub logs: Vec<LocalLog>,
}

impl LocalObjective {
    fn zeros(dim: usize) -> Self {
        Self {
            linear: vec![0.0; dim],
            quadratic: vec![0.0; dim],
            logs: Vec::new(),
        }
    }

    pub fn value(&self, v: &[f64]) -> f64 {
        let mut s = 0.0;
        for (k, &x) in v.iter().enumerate() {
            s += self.linear[k] * x + self.quadratic[k] * x * x;
        }
        for l in &self.logs {
            let agg: f64 = l.coefs.iter().map(|&(k, a)| a * v[k]).sum::<f64>() + l.floor;
            s -= l.weight * agg.ln();
        }
        s
    }

    pub fn is_zero(&self) -> bool {
        self.logs.is_empty()
            && self.linear.iter().all(|&v| v == 0.0)
            && self.quadratic.iter().all(|&v| v == 0.0)
    }
}

/// A disjoint set of rows (resource side) or columns (demand side) with the
/// constraints and objective terms that live on them.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintGroup {
    pub side: Side,
    pub members: Vec<usize>,
    /// Consensus coordinates owned by this group, in local order.
    pub coords: Vec<usize>,
    pub constraint_ids: Vec<usize>,
    pub n_slack: usize,
    pub system: EqualitySystem,
    pub rhs: Vec<f64>,
    pub objective: LocalObjective,
    pub domains: Vec<VariableDomain>,
}

impl ConstraintGroup {
    /// Local dimension: coordinates followed by slacks.
    pub fn dim(&self) -> usize {
        self.coords.len() + self.n_slack
    }

    pub fn n_constraints(&self) -> usize {
        self.rhs.len()
    }
}

/// One constraint after the slack transform, over consensus coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalConstraint {
    pub side: Side,
    pub source_index: usize,
    pub terms: Vec<(usize, f64)>,
    /// `+1` for `<=`, `-1` for `>=`, `None` for equalities.
    pub slack_sign: Option<f64>,
    pub rhs: f64,
    pub rows: BTreeSet<usize>,
    pub cols: BTreeSet<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlackRecord {
    pub constraint: usize,
    pub side: Side,
    pub group: usize,
    pub local: usize,
    pub sign: f64,
}

/// Minimization-normalized objective term over consensus coordinates.
#[derive(Debug, Clone, PartialEq)]
enum NormTerm {
    Linear(Vec<(usize, f64)>),
    Quadratic(Vec<(usize, f64)>),
    Log {
        weight: f64,
        floor: f64,
        coefs: Vec<(usize, f64)>,
    },
}

#[derive(Debug, Clone, PartialEq)]
struct PlacedTerm {
    side: Side,
    line: usize,
    term: NormTerm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalProblem {
    source: ProblemSpec,
    transformed: ProblemSpec,
    epigraph: Option<EpigraphRecord>,
    coords: Vec<(usize, usize)>,
    coord_index: HashMap<(usize, usize), usize>,
    constraints: Vec<CanonicalConstraint>,
    terms: Vec<PlacedTerm>,
    slack_layout: Vec<SlackRecord>,
    resource_groups: Vec<ConstraintGroup>,
    demand_groups: Vec<ConstraintGroup>,
    grouped: bool,
}

impl CanonicalProblem {
    pub fn source(&self) -> &ProblemSpec {
        &self.source
    }

    /// Problem after the epigraph transform (equal to `source` without one).
    pub fn transformed(&self) -> &ProblemSpec {
        &self.transformed
    }

    pub fn epigraph(&self) -> Option<&EpigraphRecord> {
        self.epigraph.as_ref()
    }

    pub fn n_coords(&self) -> usize {
        self.coords.len()
    }

    /// Matrix entry (in the transformed shape) of each consensus coordinate.
    pub fn coords(&self) -> &[(usize, usize)] {
        &self.coords
    }

    pub fn coord_of(&self, i: usize, j: usize) -> Option<usize> {
        self.coord_index.get(&(i, j)).copied()
    }

    pub fn constraints(&self) -> &[CanonicalConstraint] {
        &self.constraints
    }

    pub fn slack_layout(&self) -> &[SlackRecord] {
        &self.slack_layout
    }

    pub fn resource_groups(&self) -> &[ConstraintGroup] {
        &self.resource_groups
    }

    pub fn demand_groups(&self) -> &[ConstraintGroup] {
        &self.demand_groups
    }

    pub fn groups(&self, side: Side) -> &[ConstraintGroup] {
        match side {
            Side::Resource => &self.resource_groups,
            Side::Demand => &self.demand_groups,
        }
    }

    pub fn is_grouped(&self) -> bool {
        self.grouped
    }

    pub fn sense(&self) -> Sense {
        self.source.sense()
    }

    /// Total number of equality rows across both sides.
    pub fn n_constraint_rows(&self) -> usize {
        self.constraints.len()
    }

    /// Consensus coordinates that are real matrix entries (not epigraph replicas),
    /// with their position in the source matrix.
    pub fn real_coords(&self) -> impl Iterator<Item = (usize, (usize, usize))> + '_ {
        let (n, m) = self.source.shape();
        self.coords
            .iter()
            .enumerate()
            .filter(move |(_, &(i, j))| i < n && j < m)
            .map(|(k, &e)| (k, e))
    }

    /// Refreshes right-hand sides, constraint coefficients and objective
    /// weights from `problem`, which must share this problem's pattern.
    pub fn update_parameters(&mut self, problem: &ProblemSpec) -> Result<(), CanonicalError> {
        let (transformed, epigraph) = transform_with_record(problem)?;
        let mut diff = Vec::new();
        if transformed.shape() != self.transformed.shape() {
            diff.push(format!(
                "shape {:?} -> {:?}",
                self.transformed.shape(),
                transformed.shape()
            ));
        }
        if epigraph.is_some() != self.epigraph.is_some() {
            diff.push("epigraph term added or removed".into());
        }
        if problem.sense() != self.source.sense() {
            diff.push("objective sense changed".into());
        }
        if diff.is_empty() {
            let (n, m) = transformed.shape();
            for i in 0..n {
                for j in 0..m {
                    if transformed.domain(i, j) != self.transformed.domain(i, j) {
                        diff.push(format!("domain of ({i}, {j}) changed"));
                    }
                }
            }
            compare_constraints(
                "resource",
                self.transformed.resource_constraints(),
                transformed.resource_constraints(),
                &mut diff,
            );
            compare_constraints(
                "demand",
                self.transformed.demand_constraints(),
                transformed.demand_constraints(),
                &mut diff,
            );
            let old_terms = self.transformed.objective();
            let new_terms = transformed.objective();
            if old_terms.len() != new_terms.len() {
                diff.push(format!(
                    "objective has {} terms, expected {}",
                    new_terms.len(),
                    old_terms.len()
                ));
            } else {
                for (k, (a, b)) in old_terms.iter().zip(new_terms).enumerate() {
                    if term_pattern(a) != term_pattern(b) {
                        diff.push(format!("objective term {k} pattern changed"));
                    }
                }
            }
            if transformed.demand_groups() != self.transformed.demand_groups() {
                diff.push("demand grouping hint changed".into());
            }
        }
        if !diff.is_empty() {
            return Err(CanonicalError::PatternMismatch { diff });
        }

        let constraints = build_constraints(&transformed, &self.coord_index);
        for (old, new) in self.constraints.iter_mut().zip(constraints) {
            old.terms = new.terms;
            old.rhs = new.rhs;
        }
        self.terms = place_terms(&transformed, &self.coord_index)?;
        let constraints = &self.constraints;
        let terms = &self.terms;
        for side in [Side::Resource, Side::Demand] {
            let groups = match side {
                Side::Resource => &mut self.resource_groups,
                Side::Demand => &mut self.demand_groups,
            };
            for (g, group) in groups.iter_mut().enumerate() {
                let (rows, rhs) = group_rows(group, constraints);
                group.system.set_values_from(&rows);
                group.rhs = rhs;
                group.objective = group_objective(side, g, group, terms)?;
            }
        }
        self.source = problem.clone();
        self.transformed = transformed;
        self.epigraph = epigraph;
        Ok(())
    }
}

fn term_pattern(t: &ObjectiveTerm) -> (String, Vec<(Target, Vec<(usize, usize)>)>) {
    let pos = |e: &[(usize, usize, f64)]| e.iter().map(|&(i, j, _)| (i, j)).collect::<Vec<_>>();
    let lines = match t {
        ObjectiveTerm::Linear { target, entries }
        | ObjectiveTerm::Quadratic { target, entries }
        | ObjectiveTerm::WeightedLog { target, entries, .. } => vec![(*target, pos(entries))],
        ObjectiveTerm::EpigraphMin { utilities } | ObjectiveTerm::EpigraphMax { utilities } => {
            utilities.iter().map(|u| (u.target, pos(&u.entries))).collect()
        }
    };
    (t.kind_name().to_string(), lines)
}

fn compare_constraints(side: &str, old: &[LinearConstraint], new: &[LinearConstraint], diff: &mut Vec<String>) {
    if old.len() != new.len() {
        diff.push(format!("{side} constraint count {} -> {}", old.len(), new.len()));
        return;
    }
    for (k, (a, b)) in old.iter().zip(new).enumerate() {
        if a.relation != b.relation {
            diff.push(format!("{side} constraint {k} relation {} -> {}", a.relation, b.relation));
        }
        let pa: Vec<_> = a.entries.iter().map(|e| (e.0, e.1)).collect();
        let pb: Vec<_> = b.entries.iter().map(|e| (e.0, e.1)).collect();
        if pa != pb {
            diff.push(format!("{side} constraint {k} sparsity changed"));
        }
    }
}

/// Rewrites a min/max objective through a replicated epigraph scalar.
///
/// Utilities over columns get a virtual row whose entry in column `j` is the
/// replica used by column `j`'s constraint `u_j(x) >= t` (or `<= t`); the
/// replicas are tied by equalities on the virtual row. Utilities over rows
/// mirror this with a virtual column. Problems without an epigraph term are
/// returned unchanged.
pub fn epigraph_transform(problem: &ProblemSpec) -> Result<ProblemSpec, CanonicalError> {
    transform_with_record(problem).map(|(p, _)| p)
}

pub(crate) fn transform_with_record(
    problem: &ProblemSpec,
) -> Result<(ProblemSpec, Option<EpigraphRecord>), CanonicalError> {
    let Some(epi_idx) = problem.objective().iter().position(ObjectiveTerm::is_epigraph) else {
        return Ok((problem.clone(), None));
    };
    let (utilities, maximize_min) = match &problem.objective()[epi_idx] {
        ObjectiveTerm::EpigraphMin { utilities } => (utilities, true),
        ObjectiveTerm::EpigraphMax { utilities } => (utilities, false),
        _ => unreachable!(),
    };
    let over_columns = utilities.iter().all(|u| matches!(u.target, Target::Column(_)));
    let over_rows = utilities.iter().all(|u| matches!(u.target, Target::Row(_)));
    if !over_columns && !over_rows {
        return Err(CanonicalError::MixedEpigraph);
    }
    let mut seen = BTreeSet::new();
    for u in utilities {
        if !seen.insert(u.target) {
            return Err(CanonicalError::DuplicateEpigraphLine(u.target));
        }
    }
    let (n, m) = problem.shape();
    let (n2, m2) = if over_columns { (n + 1, m) } else { (n, m + 1) };
    let relation = if maximize_min { Relation::Ge } else { Relation::Le };

    let mut b = ProblemSpec::builder(n2, m2)
        .sense(problem.sense())
        .default_domain(problem.default_domain())
        .allow_group_merge(problem.allow_group_merge());
    for (&(i, j), &d) in problem.domain_overrides() {
        b.set_domain(i, j, d);
    }
    if let Some(g) = problem.demand_groups() {
        let mut labels = g.to_vec();
        if !over_columns {
            // the virtual column gets a label of its own
            labels.push(labels.iter().max().map_or(0, |v| v + 1));
        }
        b = b.demand_groups(labels);
    }
    // Inactive by default along the virtual line; replicas are free reals.
    let virtual_line = if over_columns { n } else { m };
    let other_len = if over_columns { m } else { n };
    let entry = |line: usize| if over_columns { (n, line) } else { (line, m) };
    for k in 0..other_len {
        let (i, j) = entry(k);
        b.set_domain(i, j, VariableDomain::Box { lo: 0.0, hi: 0.0 });
    }
    let mut replica_lines = Vec::new();
    for u in utilities {
        let line = match u.target {
            Target::Column(j) => j,
            Target::Row(i) => i,
            Target::Global => unreachable!(),
        };
        replica_lines.push(line);
        let (ti, tj) = entry(line);
        b.set_domain(ti, tj, VariableDomain::Real);
        let mut entries = u.entries.clone();
        entries.push((ti, tj, -1.0));
        let c = LinearConstraint::new(entries, relation, 0.0);
        if over_columns {
            b.push_demand_constraint(c);
        } else {
            b.push_resource_constraint(c);
        }
    }
    for c in problem.resource_constraints() {
        b.push_resource_constraint(c.clone());
    }
    for c in problem.demand_constraints() {
        b.push_demand_constraint(c.clone());
    }
    // Star-shaped tie between the first replica and every other one.
    let hub = replica_lines[0];
    for &line in &replica_lines[1..] {
        let (hi, hj) = entry(hub);
        let (li, lj) = entry(line);
        let c = LinearConstraint::new(vec![(hi, hj, 1.0), (li, lj, -1.0)], Relation::Eq, 0.0);
        if over_columns {
            b.push_resource_constraint(c);
        } else {
            b.push_demand_constraint(c);
        }
    }
    let share = 1.0 / replica_lines.len() as f64;
    let target = if over_columns {
        Target::Row(virtual_line)
    } else {
        Target::Column(virtual_line)
    };
    for (k, term) in problem.objective().iter().enumerate() {
        if k == epi_idx {
            b.push_term(ObjectiveTerm::Linear {
                target,
                entries: replica_lines
                    .iter()
                    .map(|&l| {
                        let (i, j) = entry(l);
                        (i, j, share)
                    })
                    .collect(),
            });
        } else {
            b.push_term(term.clone());
        }
    }
    let transformed = b.build()?;
    let record = EpigraphRecord {
        virtual_side: if over_columns { Side::Resource } else { Side::Demand },
        virtual_line,
        replica_lines,
        maximize_min,
    };
    Ok((transformed, Some(record)))
}

fn build_constraints(
    problem: &ProblemSpec,
    coord_index: &HashMap<(usize, usize), usize>,
) -> Vec<CanonicalConstraint> {
    let mut out = Vec::new();
    for (side, list) in [
        (Side::Resource, problem.resource_constraints()),
        (Side::Demand, problem.demand_constraints()),
    ] {
        for (k, c) in list.iter().enumerate() {
            let terms = c
                .entries
                .iter()
                .filter_map(|&(i, j, v)| coord_index.get(&(i, j)).map(|&ci| (ci, v)))
                .collect();
            let slack_sign = match c.relation {
                Relation::Le => Some(1.0),
                Relation::Ge => Some(-1.0),
                Relation::Eq => None,
            };
            out.push(CanonicalConstraint {
                side,
                source_index: k,
                terms,
                slack_sign,
                rhs: c.rhs,
                rows: c.rows(),
                cols: c.columns(),
            });
        }
    }
    out
}

fn place_terms(
    problem: &ProblemSpec,
    coord_index: &HashMap<(usize, usize), usize>,
) -> Result<Vec<PlacedTerm>, CanonicalError> {
    let sign = problem.sense().sign();
    let mut placed = Vec::new();
    let map = |entries: &[(usize, usize, f64)], scale: f64| -> Vec<(usize, f64)> {
        entries
            .iter()
            .filter_map(|&(i, j, v)| coord_index.get(&(i, j)).map(|&c| (c, v * scale)))
            .collect()
    };
    for term in problem.objective() {
        match term {
            ObjectiveTerm::Linear { target, entries } => match *target {
                Target::Row(i) => placed.push(PlacedTerm {
                    side: Side::Resource,
                    line: i,
                    term: NormTerm::Linear(map(entries, sign)),
                }),
                Target::Column(j) => placed.push(PlacedTerm {
                    side: Side::Demand,
                    line: j,
                    term: NormTerm::Linear(map(entries, sign)),
                }),
                Target::Global => {
                    // split per entry onto the owning row
                    let mut by_row: BTreeMap<usize, Vec<(usize, usize, f64)>> = BTreeMap::new();
                    for &e in entries {
                        by_row.entry(e.0).or_default().push(e);
                    }
                    for (i, es) in by_row {
                        placed.push(PlacedTerm {
                            side: Side::Resource,
                            line: i,
                            term: NormTerm::Linear(map(&es, sign)),
                        });
                    }
                }
            },
            ObjectiveTerm::Quadratic { target, entries } => {
                let (side, line) = line_of(*target);
                placed.push(PlacedTerm {
                    side,
                    line,
                    term: NormTerm::Quadratic(map(entries, 1.0)),
                });
            }
            ObjectiveTerm::WeightedLog {
                target,
                weight,
                entries,
                floor,
            } => {
                let (side, line) = line_of(*target);
                placed.push(PlacedTerm {
                    side,
                    line,
                    term: NormTerm::Log {
                        weight: *weight,
                        floor: *floor,
                        coefs: map(entries, 1.0),
                    },
                });
            }
            ObjectiveTerm::EpigraphMin { .. } | ObjectiveTerm::EpigraphMax { .. } => {
                unreachable!("epigraph terms are transformed before placement")
            }
        }
    }
    Ok(placed)
}

fn line_of(t: Target) -> (Side, usize) {
    match t {
        Target::Row(i) => (Side::Resource, i),
        Target::Column(j) => (Side::Demand, j),
        Target::Global => unreachable!("validated at build time"),
    }
}

/// Transforms all inequalities into equalities with nonnegative slacks.
///
/// Applies the epigraph transform first when the objective needs it. The
/// result has one group per row and per column; constraints spanning several
/// lines are attached to their first line until [`group_constraints`] runs.
pub fn to_equality_form(problem: &ProblemSpec) -> Result<CanonicalProblem, CanonicalError> {
    let (transformed, epigraph) = transform_with_record(problem)?;
    let (n, m) = transformed.shape();
    let mut coords = Vec::new();
    let mut coord_index = HashMap::new();
    for i in 0..n {
        for j in 0..m {
            if transformed.is_active(i, j) {
                coord_index.insert((i, j), coords.len());
                coords.push((i, j));
            }
        }
    }
    let constraints = build_constraints(&transformed, &coord_index);
    let terms = place_terms(&transformed, &coord_index)?;
    let mut canonical = CanonicalProblem {
        source: problem.clone(),
        transformed,
        epigraph,
        coords,
        coord_index,
        constraints,
        terms,
        slack_layout: Vec::new(),
        resource_groups: Vec::new(),
        demand_groups: Vec::new(),
        grouped: false,
    };
    let rows: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let cols: Vec<Vec<usize>> = (0..m).map(|j| vec![j]).collect();
    let multi_line = canonical.constraints.iter().any(|c| match c.side {
        Side::Resource => c.rows.len() > 1,
        Side::Demand => c.cols.len() > 1,
    });
    assemble_groups(&mut canonical, rows, cols)?;
    canonical.grouped = !multi_line && problem.demand_groups().is_none();
    Ok(canonical)
}

/// Merges lines that share a constraint (union-find) into disjoint groups.
pub fn group_constraints(mut canonical: CanonicalProblem) -> Result<CanonicalProblem, CanonicalError> {
    let (n, m) = canonical.transformed.shape();
    for c in &canonical.constraints {
        if c.rows.len() > 1 && c.cols.len() > 1 {
            return Err(CanonicalError::SpansBothSides {
                side: c.side,
                index: c.source_index,
                rows: c.rows.iter().copied().collect(),
                cols: c.cols.iter().copied().collect(),
            });
        }
    }
    let mut row_sets = UnionFind::new(n);
    let mut col_sets = UnionFind::new(m);
    for c in &canonical.constraints {
        match c.side {
            Side::Resource => {
                let mut it = c.rows.iter();
                if let Some(&first) = it.next() {
                    for &r in it {
                        row_sets.union(first, r);
                    }
                }
            }
            Side::Demand => {
                let mut it = c.cols.iter();
                if let Some(&first) = it.next() {
                    for &col in it {
                        col_sets.union(first, col);
                    }
                }
            }
        }
    }
    if let Some(labels) = canonical.transformed.demand_groups() {
        let mut first_of: HashMap<usize, usize> = HashMap::new();
        for (j, &l) in labels.iter().enumerate() {
            match first_of.get(&l) {
                Some(&f) => col_sets.union(f, j),
                None => {
                    first_of.insert(l, j);
                }
            }
        }
    }
    let rows = row_sets.components();
    let cols = col_sets.components();
    assemble_groups(&mut canonical, rows, cols)?;
    canonical.grouped = true;
    Ok(canonical)
}

/// Full pipeline: epigraph transform, slack transform and grouping.
pub fn canonicalize(problem: &ProblemSpec) -> Result<CanonicalProblem, CanonicalError> {
    group_constraints(to_equality_form(problem)?)
}

fn group_rows(group: &ConstraintGroup, constraints: &[CanonicalConstraint]) -> (Vec<Vec<(usize, f64)>>, Vec<f64>) {
    let local: HashMap<usize, usize> = group.coords.iter().enumerate().map(|(k, &c)| (c, k)).collect();
    let mut slack = group.coords.len();
    let mut rows = Vec::new();
    let mut rhs = Vec::new();
    for &cid in &group.constraint_ids {
        let c = &constraints[cid];
        let mut row: Vec<(usize, f64)> = c.terms.iter().map(|&(ci, v)| (local[&ci], v)).collect();
        if let Some(s) = c.slack_sign {
            row.push((slack, s));
            slack += 1;
        }
        rows.push(row);
        rhs.push(c.rhs);
    }
    (rows, rhs)
}

fn group_objective(
    side: Side,
    g: usize,
    group: &ConstraintGroup,
    terms: &[PlacedTerm],
) -> Result<LocalObjective, CanonicalError> {
    let members: BTreeSet<usize> = group.members.iter().copied().collect();
    let local: HashMap<usize, usize> = group.coords.iter().enumerate().map(|(k, &c)| (c, k)).collect();
    let mut obj = LocalObjective::zeros(group.dim());
    let mut log_support = BTreeSet::new();
    for t in terms.iter().filter(|t| t.side == side && members.contains(&t.line)) {
        match &t.term {
            NormTerm::Linear(cs) => {
                for &(c, v) in cs {
                    obj.linear[local[&c]] += v;
                }
            }
            NormTerm::Quadratic(cs) => {
                for &(c, v) in cs {
                    obj.quadratic[local[&c]] += v;
                }
            }
            NormTerm::Log { weight, floor, coefs } => {
                let coefs: Vec<(usize, f64)> = coefs.iter().map(|&(c, v)| (local[&c], v)).collect();
                for &(k, _) in &coefs {
                    if !log_support.insert(k) {
                        return Err(CanonicalError::OverlappingLogs { side, group: g });
                    }
                }
                obj.logs.push(LocalLog {
                    weight: *weight,
                    floor: *floor,
                    coefs,
                });
            }
        }
    }
    Ok(obj)
}

fn assemble_groups(
    canonical: &mut CanonicalProblem,
    rows: Vec<Vec<usize>>,
    cols: Vec<Vec<usize>>,
) -> Result<(), CanonicalError> {
    let mut row_group = vec![0usize; canonical.transformed.n_resources()];
    for (g, members) in rows.iter().enumerate() {
        for &r in members {
            row_group[r] = g;
        }
    }
    let mut col_group = vec![0usize; canonical.transformed.n_demands()];
    for (g, members) in cols.iter().enumerate() {
        for &c in members {
            col_group[c] = g;
        }
    }
    let mut res_coords = vec![Vec::new(); rows.len()];
    let mut dem_coords = vec![Vec::new(); cols.len()];
    for (k, &(i, j)) in canonical.coords.iter().enumerate() {
        res_coords[row_group[i]].push(k);
        dem_coords[col_group[j]].push(k);
    }
    let mut res_cons = vec![Vec::new(); rows.len()];
    let mut dem_cons = vec![Vec::new(); cols.len()];
    // Constraints whose lines straddle groups stay unattached; that only
    // happens before grouping has run.
    for (cid, c) in canonical.constraints.iter().enumerate() {
        match c.side {
            Side::Resource => {
                let gs: BTreeSet<usize> = c.rows.iter().map(|&r| row_group[r]).collect();
                if gs.len() == 1 {
                    res_cons[*gs.iter().next().unwrap()].push(cid);
                }
            }
            Side::Demand => {
                let gs: BTreeSet<usize> = c.cols.iter().map(|&col| col_group[col]).collect();
                if gs.len() == 1 {
                    dem_cons[*gs.iter().next().unwrap()].push(cid);
                }
            }
        }
    }


    let mut slack_layout = Vec::new();
    let mut build = |side: Side,
                     partition: Vec<Vec<usize>>,
                     coords: Vec<Vec<usize>>,
                     cons: Vec<Vec<usize>>|
     -> Result<Vec<ConstraintGroup>, CanonicalError> {
        let mut groups = Vec::with_capacity(partition.len());
        for (g, ((members, coords), constraint_ids)) in partition.into_iter().zip(coords).zip(cons).enumerate() {
            let n_slack = constraint_ids
                .iter()
                .filter(|&&c| canonical.constraints[c].slack_sign.is_some())
                .count();
            let dim = coords.len() + n_slack;
            let mut domains: Vec<VariableDomain> = match side {
                Side::Resource => coords
                    .iter()
                    .map(|&c| {
                        let (i, j) = canonical.coords[c];
                        canonical.transformed.domain(i, j)
                    })
                    .collect(),
                Side::Demand => vec![VariableDomain::Real; coords.len()],
            };
            domains.extend(std::iter::repeat_n(VariableDomain::NonNegative, n_slack));
            let mut group = ConstraintGroup {
                side,
                members,
                coords,
                constraint_ids,
                n_slack,
                system: EqualitySystem::from_rows(&[], dim),
                rhs: Vec::new(),
                objective: LocalObjective::zeros(dim),
                domains,
            };
            let (sys_rows, rhs) = group_rows(&group, &canonical.constraints);
            group.system = EqualitySystem::from_rows(&sys_rows, dim);
            group.rhs = rhs;
            group.objective = group_objective(side, g, &group, &canonical.terms)?;
            let mut local = group.coords.len();
            for &cid in &group.constraint_ids {
                if let Some(sign) = canonical.constraints[cid].slack_sign {
                    slack_layout.push(SlackRecord {
                        constraint: cid,
                        side,
                        group: g,
                        local,
                        sign,
                    });
                    local += 1;
                }
            }
            groups.push(group);
        }
        Ok(groups)
    };
    let resource_groups = build(Side::Resource, rows, res_coords, res_cons)?;
    let demand_groups = build(Side::Demand, cols, dem_coords, dem_cons)?;
    canonical.resource_groups = resource_groups;
    canonical.demand_groups = demand_groups;
    slack_layout.sort_by_key(|s| s.constraint);
    canonical.slack_layout = slack_layout;
    Ok(())
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut a: usize) -> usize {
        while self.parent[a] != a {
            self.parent[a] = self.parent[self.parent[a]];
            a = self.parent[a];
        }
        a
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // smaller root wins so components are labelled by their first line
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }

    /// Components ordered by their smallest member, members ascending.
    fn components(&mut self) -> Vec<Vec<usize>> {
        let mut by_root: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for a in 0..self.parent.len() {
            let r = self.find(a);
            by_root.entry(r).or_default().push(a);
        }
        by_root.into_values().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LineUtility, ObjectiveTerm};

    fn row_sum_problem(n: usize, m: usize) -> ProblemSpec {
        let mut b = ProblemSpec::builder(n, m).maximize();
        b.push_term(ObjectiveTerm::Linear {
            target: Target::Global,
            entries: (0..n).flat_map(|i| (0..m).map(move |j| (i, j, 1.0))).collect(),
        });
        for i in 0..n {
            b.push_resource_constraint(LinearConstraint::new(
                (0..m).map(|j| (i, j, 1.0)).collect(),
                Relation::Le,
                1.0,
            ));
        }
        for j in 0..m {
            b.push_demand_constraint(LinearConstraint::new(
                (0..n).map(|i| (i, j, 1.0)).collect(),
                Relation::Le,
                1.0,
            ));
        }
        b.build().unwrap()
    }

    #[test]
    fn le_constraint_gets_positive_slack() {
        let c = canonicalize(&row_sum_problem(1, 3)).unwrap();
        let g = &c.resource_groups()[0];
        assert_eq!(g.n_slack, 1);
        assert_eq!(g.dim(), 4);
        // x00 + x01 + x02 + s = 1
        for k in 0..4 {
            assert_eq!(g.system.get(0, k), 1.0);
        }
        assert_eq!(g.rhs, vec![1.0]);
        assert_eq!(g.domains[3], VariableDomain::NonNegative);
        // slack carries no objective weight
        assert_eq!(g.objective.linear[3], 0.0);
    }

    #[test]
    fn equality_passes_through_without_slack() {
        let p = ProblemSpec::builder(1, 2)
            .term(ObjectiveTerm::Linear {
                target: Target::Global,
                entries: vec![(0, 0, 1.0)],
            })
            .resource_constraint(LinearConstraint::new(
                vec![(0, 0, 1.0), (0, 1, 2.0)],
                Relation::Eq,
                3.0,
            ))
            .build()
            .unwrap();
        let c = canonicalize(&p).unwrap();
        assert_eq!(c.resource_groups()[0].n_slack, 0);
        assert!(c.slack_layout().is_empty());
    }

    #[test]
    fn ge_constraint_gets_negative_slack() {
        let p = ProblemSpec::builder(1, 2)
            .term(ObjectiveTerm::Linear {
                target: Target::Global,
                entries: vec![(0, 0, 1.0)],
            })
            .resource_constraint(LinearConstraint::new(
                vec![(0, 0, 1.0), (0, 1, 2.0)],
                Relation::Ge,
                3.0,
            ))
            .build()
            .unwrap();
        let c = canonicalize(&p).unwrap();
        let g = &c.resource_groups()[0];
        assert_eq!(g.system.get(0, 2), -1.0);
        assert_eq!(c.slack_layout()[0].sign, -1.0);
    }

    #[test]
    fn row_local_constraints_give_one_group_per_row() {
        let c = canonicalize(&row_sum_problem(5, 3)).unwrap();
        assert_eq!(c.resource_groups().len(), 5);
        assert_eq!(c.demand_groups().len(), 3);
    }

    #[test]
    fn cross_row_constraint_merges_rows() {
        let mut b = row_sum_problem(3, 2).to_builder().allow_group_merge(true);
        b.push_resource_constraint(LinearConstraint::new(
            vec![(0, 0, 1.0), (1, 0, 1.0)],
            Relation::Le,
            1.5,
        ));
        let c = canonicalize(&b.build().unwrap()).unwrap();
        let members: Vec<_> = c.resource_groups().iter().map(|g| g.members.clone()).collect();
        assert_eq!(members, vec![vec![0, 1], vec![2]]);
    }

    #[test]
    fn constraint_spanning_rows_and_columns_is_rejected() {
        let mut b = row_sum_problem(2, 2).to_builder().allow_group_merge(true);
        b.push_resource_constraint(LinearConstraint::new(
            vec![(0, 0, 1.0), (1, 1, 1.0)],
            Relation::Le,
            1.5,
        ));
        let err = canonicalize(&b.build().unwrap()).unwrap_err();
        assert!(matches!(err, CanonicalError::SpansBothSides { .. }));
    }

    #[test]
    fn demand_hint_merges_columns() {
        let p = row_sum_problem(2, 4).to_builder().demand_groups(vec![0, 1, 0, 1]).build().unwrap();
        let c = canonicalize(&p).unwrap();
        let members: Vec<_> = c.demand_groups().iter().map(|g| g.members.clone()).collect();
        assert_eq!(members, vec![vec![0, 2], vec![1, 3]]);
    }

    #[test]
    fn max_min_transform_adds_virtual_row() {
        let p = ProblemSpec::builder(2, 2)
            .maximize()
            .term(ObjectiveTerm::EpigraphMin {
                utilities: (0..2)
                    .map(|j| LineUtility {
                        target: Target::Column(j),
                        entries: vec![(0, j, 1.0), (1, j, 2.0)],
                    })
                    .collect(),
            })
            .build()
            .unwrap();
        let t = epigraph_transform(&p).unwrap();
        assert_eq!(t.shape(), (3, 2));
        assert_eq!(t.domain(2, 0), VariableDomain::Real);
        // throughput_j - t_j >= 0
        assert_eq!(t.demand_constraints().len(), 2);
        assert_eq!(t.demand_constraints()[0].relation, Relation::Ge);
        // t_0 == t_1 on the virtual row
        assert_eq!(t.resource_constraints().len(), 1);
        assert_eq!(t.resource_constraints()[0].rows().into_iter().collect::<Vec<_>>(), vec![2]);
    }

    #[test]
    fn mixed_epigraph_is_unsupported() {
        let p = ProblemSpec::builder(2, 2)
            .maximize()
            .term(ObjectiveTerm::EpigraphMin {
                utilities: vec![
                    LineUtility {
                        target: Target::Column(0),
                        entries: vec![(0, 0, 1.0)],
                    },
                    LineUtility {
                        target: Target::Row(1),
                        entries: vec![(1, 1, 1.0)],
                    },
                ],
            })
            .build()
            .unwrap();
        assert_eq!(epigraph_transform(&p).unwrap_err(), CanonicalError::MixedEpigraph);
    }

    #[test]
    fn refresh_changes_only_rhs() {
        let p = row_sum_problem(2, 2);
        let mut c = canonicalize(&p).unwrap();
        let before = c.clone();
        let mut b = p.to_builder();
        b.resource_constraints_mut()[1].rhs = 2.4;
        c.update_parameters(&b.build().unwrap()).unwrap();
        assert_eq!(c.resource_groups()[1].rhs, vec![2.4]);
        assert_eq!(c.resource_groups()[0], before.resource_groups()[0]);
        assert_eq!(c.resource_groups()[1].system, before.resource_groups()[1].system);
        assert_eq!(c.demand_groups(), before.demand_groups());
        assert_eq!(c.slack_layout(), before.slack_layout());
    }

    #[test]
    fn refresh_with_identical_parameters_is_identity() {
        let p = row_sum_problem(3, 2);
        let mut c = canonicalize(&p).unwrap();
        let before = c.clone();
        c.update_parameters(&p).unwrap();
        assert_eq!(c, before);
    }

    #[test]
    fn refresh_rejects_pattern_change() {
        let p = row_sum_problem(2, 2);
        let mut c = canonicalize(&p).unwrap();
        let mut b = p.to_builder();
        b.resource_constraints_mut()[0].entries.pop();
        let err = c.update_parameters(&b.build().unwrap()).unwrap_err();
        match err {
            CanonicalError::PatternMismatch { diff } => {
                assert!(diff.iter().any(|d| d.contains("resource constraint 0 sparsity")));
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
