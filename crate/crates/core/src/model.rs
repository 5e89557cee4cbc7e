//! Separable resource-allocation problems.
//!
//! A problem is an `n_resources x n_demands` allocation matrix together with
//! per-entry domains, an objective made of row-local, column-local or global
//! terms, and linear constraints tagged as resource-side (rows) or
//! demand-side (columns).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

/// Default floor added inside weighted-log terms.
pub const DEFAULT_LOG_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sense {
    Minimize,
    Maximize,
}

impl Sense {
    /// Multiplier that turns a value in this sense into a minimization value.
    pub fn sign(self) -> f64 {
        match self {
            Sense::Minimize => 1.0,
            Sense::Maximize => -1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VariableDomain {
    NonNegative,
    /// Unbounded real line. Used for epigraph coordinates.
    Real,
    Box { lo: f64, hi: f64 },
    Boolean,
    IntegerBox { lo: i64, hi: i64 },
}

impl VariableDomain {
    /// Continuous relaxation as a closed interval.
    pub fn bounds(&self) -> (f64, f64) {
        match *self {
            VariableDomain::NonNegative => (0.0, f64::INFINITY),
            VariableDomain::Real => (f64::NEG_INFINITY, f64::INFINITY),
            VariableDomain::Box { lo, hi } => (lo, hi),
            VariableDomain::Boolean => (0.0, 1.0),
            VariableDomain::IntegerBox { lo, hi } => (lo as f64, hi as f64),
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, VariableDomain::Boolean | VariableDomain::IntegerBox { .. })
    }

    /// A box pinned at zero marks an entry that is not part of the model
    /// (for example a link that lies on none of a demand's paths).
    pub fn is_structural_zero(&self) -> bool {
        matches!(*self, VariableDomain::Box { lo, hi } if lo == 0.0 && hi == 0.0)
            || matches!(*self, VariableDomain::IntegerBox { lo: 0, hi: 0 })
    }

    /// Distance from `v` to the domain.
    pub fn violation(&self, v: f64) -> f64 {
        let (lo, hi) = self.bounds();
        let mut d = if v < lo {
            lo - v
        } else if v > hi {
            v - hi
        } else {
            0.0
        };
        if self.is_discrete() {
            let nearest = v.round().clamp(lo, hi);
            d = d.max((v - nearest).abs());
        }
        d
    }

    fn validate(&self) -> Result<(), String> {
        match *self {
            VariableDomain::Box { lo, hi } => {
                if lo.is_nan() || hi.is_nan() || lo > hi {
                    return Err(format!("box domain [{lo}, {hi}] is empty"));
                }
            }
            VariableDomain::IntegerBox { lo, hi } => {
                if lo > hi {
                    return Err(format!("integer domain [{lo}, {hi}] is empty"));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Relation {
    Le,
    Eq,
    Ge,
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Relation::Le => "<=",
            Relation::Eq => "==",
            Relation::Ge => ">=",
        })
    }
}

/// `sum coef * x[i, j]  (relation)  rhs`, stored as sparse `(i, j, coef)` triplets.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearConstraint {
    pub entries: Vec<(usize, usize, f64)>,
    pub relation: Relation,
    pub rhs: f64,
}

impl LinearConstraint {
    pub fn new(entries: Vec<(usize, usize, f64)>, relation: Relation, rhs: f64) -> Self {
        Self {
            entries,
            relation,
            rhs,
        }
    }

    pub fn lhs(&self, x: &Allocation) -> f64 {
        self.entries.iter().map(|&(i, j, c)| c * x.get(i, j)).sum()
    }

    /// Amount by which `x` violates the constraint (zero when satisfied).
    pub fn violation(&self, x: &Allocation) -> f64 {
        let lhs = self.lhs(x);
        match self.relation {
            Relation::Le => (lhs - self.rhs).max(0.0),
            Relation::Ge => (self.rhs - lhs).max(0.0),
            Relation::Eq => (lhs - self.rhs).abs(),
        }
    }

    pub fn rows(&self) -> BTreeSet<usize> {
        self.entries.iter().map(|e| e.0).collect()
    }

    pub fn columns(&self) -> BTreeSet<usize> {
        self.entries.iter().map(|e| e.1).collect()
    }
}

/// The line an objective term lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Target {
    Row(usize),
    Column(usize),
    Global,
}

/// One per-line linear utility inside an epigraph term.
#[derive(Debug, Clone, PartialEq)]
pub struct LineUtility {
    pub target: Target,
    pub entries: Vec<(usize, usize, f64)>,
}

impl LineUtility {
    pub fn value(&self, x: &Allocation) -> f64 {
        self.entries.iter().map(|&(i, j, c)| c * x.get(i, j)).sum()
    }
}

/// Objective terms. Every term is oriented so that it is convex after the
/// problem sense is normalized to minimization: weighted-log terms are
/// utilities (`+w log` when maximizing, `-w log` when minimizing) and
/// quadratic terms are costs (`-sum w x^2` when maximizing, `+sum w x^2`
/// when minimizing).
#[derive(Debug, Clone, PartialEq)]
pub enum ObjectiveTerm {
    Linear {
        target: Target,
        entries: Vec<(usize, usize, f64)>,
    },
    WeightedLog {
        target: Target,
        weight: f64,
        entries: Vec<(usize, usize, f64)>,
        floor: f64,
    },
    Quadratic {
        target: Target,
        entries: Vec<(usize, usize, f64)>,
    },
    /// `min_k utility_k(x)`; only meaningful when maximizing.
    EpigraphMin { utilities: Vec<LineUtility> },
    /// `max_k utility_k(x)`; only meaningful when minimizing.
    EpigraphMax { utilities: Vec<LineUtility> },
}

impl ObjectiveTerm {
    pub fn kind_name(&self) -> &'static str {
        match self {
            ObjectiveTerm::Linear { .. } => "linear",
            ObjectiveTerm::WeightedLog { .. } => "weighted_log",
            ObjectiveTerm::Quadratic { .. } => "quadratic",
            ObjectiveTerm::EpigraphMin { .. } => "epigraph_min",
            ObjectiveTerm::EpigraphMax { .. } => "epigraph_max",
        }
    }

    pub fn is_epigraph(&self) -> bool {
        matches!(
            self,
            ObjectiveTerm::EpigraphMin { .. } | ObjectiveTerm::EpigraphMax { .. }
        )
    }
}

/// Dense row-major allocation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Allocation {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        let mut a = Self::zeros(n, m);
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(r.len(), m, "ragged allocation rows");
            a.data[i * m..(i + 1) * m].copy_from_slice(r);
        }
        a
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    /// Nonzero entries as `(i, j, value)` triplets.
    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for i in 0..self.rows {
            for j in 0..self.cols {
                let v = self.get(i, j);
                if v != 0.0 {
                    out.push((i, j, v));
                }
            }
        }
        out
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("problem needs at least one resource and one demand (got {n_resources} x {n_demands})")]
    EmptyDimensions { n_resources: usize, n_demands: usize },
    #[error("objective has no terms")]
    EmptyObjective,
    #[error("{what}: entry ({i}, {j}) is outside the {n} x {m} allocation matrix")]
    OutOfRange {
        what: String,
        i: usize,
        j: usize,
        n: usize,
        m: usize,
    },
    #[error("{what}: {reason}")]
    InvalidConstraint { what: String, reason: String },
    #[error("{what} spans {side} {lines:?}; enable group merging to allow it")]
    CrossLineConstraint {
        what: String,
        side: &'static str,
        lines: Vec<usize>,
    },
    #[error("objective term {index} ({kind}): {reason}")]
    InvalidTerm {
        index: usize,
        kind: &'static str,
        reason: String,
    },
    #[error("domain of entry ({i}, {j}): {reason}")]
    InvalidDomain { i: usize, j: usize, reason: String },
    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("objective term {index} ({kind}): log of nonpositive aggregate {value}")]
    LogDomain {
        index: usize,
        kind: &'static str,
        value: f64,
    },
    #[error("demand grouping hint has {got} labels for {expected} demands")]
    GroupHint { expected: usize, got: usize },
}

/// A validated separable allocation problem. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    n_resources: usize,
    n_demands: usize,
    default_domain: VariableDomain,
    domain_overrides: BTreeMap<(usize, usize), VariableDomain>,
    sense: Sense,
    objective: Vec<ObjectiveTerm>,
    resource_constraints: Vec<LinearConstraint>,
    demand_constraints: Vec<LinearConstraint>,
    demand_groups: Option<Vec<usize>>,
    allow_group_merge: bool,
}

impl ProblemSpec {
    pub fn builder(n_resources: usize, n_demands: usize) -> ProblemBuilder {
        ProblemBuilder::new(n_resources, n_demands)
    }

    pub fn n_resources(&self) -> usize {
        self.n_resources
    }

    pub fn n_demands(&self) -> usize {
        self.n_demands
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_resources, self.n_demands)
    }

    pub fn sense(&self) -> Sense {
        self.sense
    }

    pub fn default_domain(&self) -> VariableDomain {
        self.default_domain
    }

    pub fn domain_overrides(&self) -> &BTreeMap<(usize, usize), VariableDomain> {
        &self.domain_overrides
    }

    pub fn domain(&self, i: usize, j: usize) -> VariableDomain {
        self.domain_overrides
            .get(&(i, j))
            .copied()
            .unwrap_or(self.default_domain)
    }

    pub fn objective(&self) -> &[ObjectiveTerm] {
        &self.objective
    }

    pub fn resource_constraints(&self) -> &[LinearConstraint] {
        &self.resource_constraints
    }

    pub fn demand_constraints(&self) -> &[LinearConstraint] {
        &self.demand_constraints
    }

    pub fn demand_groups(&self) -> Option<&[usize]> {
        self.demand_groups.as_deref()
    }

    pub fn allow_group_merge(&self) -> bool {
        self.allow_group_merge
    }

    /// Entries that are real decision variables (not pinned at zero).
    pub fn is_active(&self, i: usize, j: usize) -> bool {
        !self.domain(i, j).is_structural_zero()
    }

    pub fn has_discrete(&self) -> bool {
        self.default_domain.is_discrete() && self.n_resources * self.n_demands > self.domain_overrides.len()
            || self.domain_overrides.values().any(VariableDomain::is_discrete)
    }

    /// Re-opens the problem for modification, keeping all parts.
    pub fn to_builder(&self) -> ProblemBuilder {
        ProblemBuilder {
            n_resources: self.n_resources,
            n_demands: self.n_demands,
            default_domain: self.default_domain,
            domain_overrides: self.domain_overrides.clone(),
            sense: self.sense,
            objective: self.objective.clone(),
            resource_constraints: self.resource_constraints.clone(),
            demand_constraints: self.demand_constraints.clone(),
            demand_groups: self.demand_groups.clone(),
            allow_group_merge: self.allow_group_merge,
        }
    }

    fn check_shape(&self, x: &Allocation) -> Result<(), ModelError> {
        if x.shape() != self.shape() {
            return Err(ModelError::DimensionMismatch {
                expected: self.shape(),
                got: x.shape(),
            });
        }
        Ok(())
    }

    /// Objective value at `x` in the problem's declared sense.
    pub fn eval_objective(&self, x: &Allocation) -> Result<f64, ModelError> {
        self.check_shape(x)?;
        let utility_sign = -self.sense.sign();
        let mut total = 0.0;
        for (index, term) in self.objective.iter().enumerate() {
            total += match term {
                ObjectiveTerm::Linear { entries, .. } => {
                    entries.iter().map(|&(i, j, c)| c * x.get(i, j)).sum::<f64>()
                }
                ObjectiveTerm::WeightedLog {
                    weight,
                    entries,
                    floor,
                    ..
                } => {
                    let agg: f64 = entries.iter().map(|&(i, j, c)| c * x.get(i, j)).sum();
                    let arg = agg + floor;
                    if arg <= 0.0 {
                        return Err(ModelError::LogDomain {
                            index,
                            kind: term.kind_name(),
                            value: agg,
                        });
                    }
                    utility_sign * weight * arg.ln()
                }
                ObjectiveTerm::Quadratic { entries, .. } => {
                    let cost: f64 = entries
                        .iter()
                        .map(|&(i, j, w)| {
                            let v = x.get(i, j);
                            w * v * v
                        })
                        .sum();
                    -utility_sign * cost
                }
                ObjectiveTerm::EpigraphMin { utilities } => utilities
                    .iter()
                    .map(|u| u.value(x))
                    .fold(f64::INFINITY, f64::min),
                ObjectiveTerm::EpigraphMax { utilities } => utilities
                    .iter()
                    .map(|u| u.value(x))
                    .fold(f64::NEG_INFINITY, f64::max),
            };
        }
        Ok(total)
    }

    /// Maximum violation per constraint class; never fails except on shape.
    pub fn check_feasibility(&self, x: &Allocation, tol: f64) -> Result<FeasibilityReport, ModelError> {
        self.check_shape(x)?;
        let worst = |cs: &[LinearConstraint]| {
            let mut best = ClassViolation::default();
            for (k, c) in cs.iter().enumerate() {
                let v = c.violation(x);
                if v > best.max || (best.worst.is_none() && v >= best.max) {
                    best = ClassViolation {
                        max: v,
                        worst: Some(k),
                    };
                }
            }
            best
        };
        let resource = worst(&self.resource_constraints);
        let demand = worst(&self.demand_constraints);
        let mut domain = DomainViolation::default();
        for i in 0..self.n_resources {
            for j in 0..self.n_demands {
                let v = self.domain(i, j).violation(x.get(i, j));
                if v > domain.max || domain.worst.is_none() {
                    domain = DomainViolation {
                        max: v.max(domain.max),
                        worst: Some((i, j)),
                    };
                }
            }
        }
        let feasible = resource.max <= tol && demand.max <= tol && domain.max <= tol;
        Ok(FeasibilityReport {
            resource,
            demand,
            domain,
            tol,
            feasible,
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ClassViolation {
    pub max: f64,
    /// Index of the constraint attaining `max` (None when the class is empty).
    pub worst: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DomainViolation {
    pub max: f64,
    pub worst: Option<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeasibilityReport {
    pub resource: ClassViolation,
    pub demand: ClassViolation,
    pub domain: DomainViolation,
    pub tol: f64,
    pub feasible: bool,
}

impl FeasibilityReport {
    pub fn max_violation(&self) -> f64 {
        self.resource.max.max(self.demand.max).max(self.domain.max)
    }
}

/// Incremental constructor; `build` performs all validation.
#[derive(Debug, Clone)]
pub struct ProblemBuilder {
    n_resources: usize,
    n_demands: usize,
    default_domain: VariableDomain,
    domain_overrides: BTreeMap<(usize, usize), VariableDomain>,
    sense: Sense,
    objective: Vec<ObjectiveTerm>,
    resource_constraints: Vec<LinearConstraint>,
    demand_constraints: Vec<LinearConstraint>,
    demand_groups: Option<Vec<usize>>,
    allow_group_merge: bool,
}

impl ProblemBuilder {
    pub fn new(n_resources: usize, n_demands: usize) -> Self {
        Self {
            n_resources,
            n_demands,
            default_domain: VariableDomain::NonNegative,
            domain_overrides: BTreeMap::new(),
            sense: Sense::Minimize,
            objective: Vec::new(),
            resource_constraints: Vec::new(),
            demand_constraints: Vec::new(),
            demand_groups: None,
            allow_group_merge: false,
        }
    }

    pub fn sense(mut self, sense: Sense) -> Self {
        self.sense = sense;
        self
    }

    pub fn maximize(self) -> Self {
        self.sense(Sense::Maximize)
    }

    pub fn minimize(self) -> Self {
        self.sense(Sense::Minimize)
    }

    pub fn default_domain(mut self, domain: VariableDomain) -> Self {
        self.default_domain = domain;
        self
    }

    pub fn domain(mut self, i: usize, j: usize, domain: VariableDomain) -> Self {
        self.domain_overrides.insert((i, j), domain);
        self
    }

    pub fn set_domain(&mut self, i: usize, j: usize, domain: VariableDomain) {
        self.domain_overrides.insert((i, j), domain);
    }

    pub fn term(mut self, term: ObjectiveTerm) -> Self {
        self.objective.push(term);
        self
    }

    pub fn push_term(&mut self, term: ObjectiveTerm) {
        self.objective.push(term);
    }

    pub fn resource_constraint(mut self, c: LinearConstraint) -> Self {
        self.resource_constraints.push(c);
        self
    }

    pub fn push_resource_constraint(&mut self, c: LinearConstraint) {
        self.resource_constraints.push(c);
    }

    pub fn demand_constraint(mut self, c: LinearConstraint) -> Self {
        self.demand_constraints.push(c);
        self
    }

    pub fn push_demand_constraint(&mut self, c: LinearConstraint) {
        self.demand_constraints.push(c);
    }

    /// Labels that force demand columns into shared groups (one label per column).
    pub fn demand_groups(mut self, labels: Vec<usize>) -> Self {
        self.demand_groups = Some(labels);
        self
    }

    pub fn allow_group_merge(mut self, allow: bool) -> Self {
        self.allow_group_merge = allow;
        self
    }

    pub fn resource_constraints_mut(&mut self) -> &mut Vec<LinearConstraint> {
        &mut self.resource_constraints
    }

    pub fn demand_constraints_mut(&mut self) -> &mut Vec<LinearConstraint> {
        &mut self.demand_constraints
    }

    pub fn objective_mut(&mut self) -> &mut Vec<ObjectiveTerm> {
        &mut self.objective
    }

    pub fn build(self) -> Result<ProblemSpec, ModelError> {
        let (n, m) = (self.n_resources, self.n_demands);
        if n == 0 || m == 0 {
            return Err(ModelError::EmptyDimensions {
                n_resources: n,
                n_demands: m,
            });
        }
        if self.objective.is_empty() {
            return Err(ModelError::EmptyObjective);
        }
        self.default_domain
            .validate()
            .map_err(|reason| ModelError::InvalidDomain { i: 0, j: 0, reason })?;
        for (&(i, j), d) in &self.domain_overrides {
            if i >= n || j >= m {
                return Err(ModelError::OutOfRange {
                    what: "domain override".into(),
                    i,
                    j,
                    n,
                    m,
                });
            }
            d.validate()
                .map_err(|reason| ModelError::InvalidDomain { i, j, reason })?;
        }
        for (side, cs) in [
            ("resource", &self.resource_constraints),
            ("demand", &self.demand_constraints),
        ] {
            for (k, c) in cs.iter().enumerate() {
                let what = format!("{side} constraint {k}");
                validate_constraint(&what, c, n, m)?;
                let lines: Vec<usize> = if side == "resource" {
                    c.rows().into_iter().collect()
                } else {
                    c.columns().into_iter().collect()
                };
                if lines.len() > 1 && !self.allow_group_merge {
                    return Err(ModelError::CrossLineConstraint {
                        what,
                        side: if side == "resource" { "rows" } else { "columns" },
                        lines,
                    });
                }
            }
        }
        for (index, term) in self.objective.iter().enumerate() {
            validate_term(index, term, self.sense, n, m)?;
        }
        if self.objective.iter().filter(|t| t.is_epigraph()).count() > 1 {
            return Err(ModelError::InvalidTerm {
                index: self.objective.len() - 1,
                kind: "epigraph",
                reason: "at most one epigraph term is supported".into(),
            });
        }
        if let Some(g) = &self.demand_groups {
            if g.len() != m {
                return Err(ModelError::GroupHint {
                    expected: m,
                    got: g.len(),
                });
            }
        }
        Ok(ProblemSpec {
            n_resources: n,
            n_demands: m,
            default_domain: self.default_domain,
            domain_overrides: self.domain_overrides,
            sense: self.sense,
            objective: self.objective,
            resource_constraints: self.resource_constraints,
            demand_constraints: self.demand_constraints,
            demand_groups: self.demand_groups,
            allow_group_merge: self.allow_group_merge,
        })
    }
}

fn check_entries(what: &str, entries: &[(usize, usize, f64)], n: usize, m: usize) -> Result<(), ModelError> {
    for &(i, j, c) in entries {
        if i >= n || j >= m {
            return Err(ModelError::OutOfRange {
                what: what.to_string(),
                i,
                j,
                n,
                m,
            });
        }
        if !c.is_finite() {
            return Err(ModelError::InvalidConstraint {
                what: what.to_string(),
                reason: format!("non-finite coefficient at ({i}, {j})"),
            });
        }
    }
    Ok(())
}

fn validate_constraint(what: &str, c: &LinearConstraint, n: usize, m: usize) -> Result<(), ModelError> {
    check_entries(what, &c.entries, n, m)?;
    if !c.rhs.is_finite() {
        return Err(ModelError::InvalidConstraint {
            what: what.to_string(),
            reason: "non-finite right-hand side".into(),
        });
    }
    if !c.entries.iter().any(|e| e.2 != 0.0) {
        return Err(ModelError::InvalidConstraint {
            what: what.to_string(),
            reason: "no nonzero coefficient".into(),
        });
    }
    let mut seen = BTreeSet::new();
    for &(i, j, _) in &c.entries {
        if !seen.insert((i, j)) {
            return Err(ModelError::InvalidConstraint {
                what: what.to_string(),
                reason: format!("entry ({i}, {j}) listed twice"),
            });
        }
    }
    Ok(())
}

fn check_target(
    index: usize,
    kind: &'static str,
    target: Target,
    entries: &[(usize, usize, f64)],
) -> Result<(), ModelError> {
    let bad = entries.iter().find(|&&(i, j, _)| match target {
        Target::Row(r) => i != r,
        Target::Column(c) => j != c,
        Target::Global => false,
    });
    if let Some(&(i, j, _)) = bad {
        return Err(ModelError::InvalidTerm {
            index,
            kind,
            reason: format!("entry ({i}, {j}) is outside target {target:?}"),
        });
    }
    Ok(())
}

fn validate_term(index: usize, term: &ObjectiveTerm, sense: Sense, n: usize, m: usize) -> Result<(), ModelError> {
    let kind = term.kind_name();
    let what = format!("objective term {index}");
    let err = |reason: String| ModelError::InvalidTerm {
        index,
        kind,
        reason,
    };
    match term {
        ObjectiveTerm::Linear { target, entries } => {
            check_entries(&what, entries, n, m)?;
            check_target(index, kind, *target, entries)?;
        }
        ObjectiveTerm::WeightedLog {
            target,
            weight,
            entries,
            floor,
        } => {
            check_entries(&what, entries, n, m)?;
            if *target == Target::Global {
                return Err(err("weighted_log needs a row or column target".into()));
            }
            check_target(index, kind, *target, entries)?;
            if !(*weight > 0.0 && weight.is_finite()) {
                return Err(err(format!("weight {weight} must be strictly positive")));
            }
            if entries.is_empty() || entries.iter().any(|e| e.2 <= 0.0) {
                return Err(err("aggregation coefficients must be strictly positive".into()));
            }
            if !(*floor > 0.0 && floor.is_finite()) {
                return Err(err(format!("floor {floor} must be strictly positive")));
            }
        }
        ObjectiveTerm::Quadratic { target, entries } => {
            check_entries(&what, entries, n, m)?;
            if *target == Target::Global {
                return Err(err("quadratic needs a row or column target".into()));
            }
            check_target(index, kind, *target, entries)?;
            if entries.iter().any(|e| e.2 < 0.0) {
                return Err(err("quadratic weights must be nonnegative".into()));
            }
        }
        ObjectiveTerm::EpigraphMin { utilities } | ObjectiveTerm::EpigraphMax { utilities } => {
            let wants = if matches!(term, ObjectiveTerm::EpigraphMin { .. }) {
                Sense::Maximize
            } else {
                Sense::Minimize
            };
            if sense != wants {
                return Err(err(format!("{kind} is only convex under {wants:?}")));
            }
            if utilities.is_empty() {
                return Err(err("epigraph term has no utilities".into()));
            }
            for u in utilities {
                check_entries(&what, &u.entries, n, m)?;
                if u.target == Target::Global {
                    return Err(err("epigraph utilities must target a row or a column".into()));
                }
                check_target(index, kind, u.target, &u.entries)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ProblemSpec {
        ProblemSpec::builder(1, 1)
            .maximize()
            .term(ObjectiveTerm::Linear {
                target: Target::Global,
                entries: vec![(0, 0, 1.0)],
            })
            .demand_constraint(LinearConstraint::new(vec![(0, 0, 1.0)], Relation::Le, 1.0))
            .resource_constraint(LinearConstraint::new(vec![(0, 0, 1.0)], Relation::Le, 1.0))
            .build()
            .unwrap()
    }

    #[test]
    fn smallest_problem_is_valid() {
        let p = tiny();
        assert_eq!(p.shape(), (1, 1));
        assert_eq!(p.sense(), Sense::Maximize);
    }

    #[test]
    fn cross_row_constraint_names_rows() {
        let err = ProblemSpec::builder(2, 2)
            .term(ObjectiveTerm::Linear {
                target: Target::Global,
                entries: vec![(0, 0, 1.0)],
            })
            .resource_constraint(LinearConstraint::new(
                vec![(0, 0, 1.0), (1, 1, 1.0)],
                Relation::Le,
                1.0,
            ))
            .build()
            .unwrap_err();
        match err {
            ModelError::CrossLineConstraint { lines, side, .. } => {
                assert_eq!(lines, vec![0, 1]);
                assert_eq!(side, "rows");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_objective_rejected() {
        let err = ProblemSpec::builder(1, 1).build().unwrap_err();
        assert_eq!(err, ModelError::EmptyObjective);
    }

    #[test]
    fn out_of_range_entry_rejected() {
        let err = ProblemSpec::builder(1, 1)
            .term(ObjectiveTerm::Linear {
                target: Target::Global,
                entries: vec![(0, 3, 1.0)],
            })
            .build()
            .unwrap_err();
        assert!(matches!(err, ModelError::OutOfRange { j: 3, .. }));
    }

    #[test]
    fn intro_example_shape_is_valid() {
        // maximize sum_j w_j sum_i tput_ij x_ij, sum_i x_ij <= 1, sum_j req_j x_ij <= cap_i
        let tput = [[3.0, 1.0], [2.0, 5.0], [1.0, 1.0]];
        let w = [1.0, 2.0];
        let req = [1.0, 2.0];
        let cap = [1.0, 2.0, 1.5];
        let mut b = ProblemSpec::builder(3, 2).maximize();
        for j in 0..2 {
            b.push_term(ObjectiveTerm::Linear {
                target: Target::Column(j),
                entries: (0..3).map(|i| (i, j, w[j] * tput[i][j])).collect(),
            });
            b.push_demand_constraint(LinearConstraint::new(
                (0..3).map(|i| (i, j, 1.0)).collect(),
                Relation::Le,
                1.0,
            ));
        }
        for i in 0..3 {
            b.push_resource_constraint(LinearConstraint::new(
                (0..2).map(|j| (i, j, req[j])).collect(),
                Relation::Le,
                cap[i],
            ));
        }
        let p = b.build().unwrap();
        assert_eq!(p.resource_constraints().len(), 3);
        assert_eq!(p.demand_constraints().len(), 2);
    }

    #[test]
    fn eval_zero_and_identity() {
        let p = tiny();
        assert_eq!(p.eval_objective(&Allocation::zeros(1, 1)).unwrap(), 0.0);
        assert_eq!(p.eval_objective(&Allocation::from_rows(&[vec![1.0]])).unwrap(), 1.0);
    }

    #[test]
    fn log_of_nonpositive_aggregate_is_an_error() {
        let p = ProblemSpec::builder(1, 1)
            .maximize()
            .default_domain(VariableDomain::Real)
            .term(ObjectiveTerm::WeightedLog {
                target: Target::Column(0),
                weight: 1.0,
                entries: vec![(0, 0, 1.0)],
                floor: DEFAULT_LOG_FLOOR,
            })
            .build()
            .unwrap();
        let err = p.eval_objective(&Allocation::from_rows(&[vec![-1.0]])).unwrap_err();
        assert!(matches!(err, ModelError::LogDomain { index: 0, .. }));
    }

    #[test]
    fn split_job_is_feasible() {
        // job split 0.8 + 0.2 across two GPU types
        let p = ProblemSpec::builder(2, 1)
            .maximize()
            .term(ObjectiveTerm::Linear {
                target: Target::Column(0),
                entries: vec![(0, 0, 1.0), (1, 0, 1.0)],
            })
            .demand_constraint(LinearConstraint::new(
                vec![(0, 0, 1.0), (1, 0, 1.0)],
                Relation::Le,
                1.0,
            ))
            .build()
            .unwrap();
        let x = Allocation::from_rows(&[vec![0.8], vec![0.2]]);
        let r = p.check_feasibility(&x, 1e-12).unwrap();
        assert!(r.feasible);
        assert!(r.demand.max <= 1e-15);
    }

    #[test]
    fn negative_entry_violates_nonneg_domain() {
        let p = tiny();
        let r = p
            .check_feasibility(&Allocation::from_rows(&[vec![-0.01]]), 1e-4)
            .unwrap();
        assert!(!r.feasible);
        assert!((r.domain.max - 0.01).abs() < 1e-15);
        assert_eq!(r.domain.worst, Some((0, 0)));
    }

    #[test]
    fn epigraph_sense_is_checked() {
        let err = ProblemSpec::builder(1, 2)
            .minimize()
            .term(ObjectiveTerm::EpigraphMin {
                utilities: vec![LineUtility {
                    target: Target::Column(0),
                    entries: vec![(0, 0, 1.0)],
                }],
            })
            .build()
            .unwrap_err();
        assert!(matches!(err, ModelError::InvalidTerm { kind: "epigraph_min", .. }));
    }
}
