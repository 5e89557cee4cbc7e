//! JSON problem and solution files.
//!
//! Problems use `"format": "dede-problem/1"`; solutions use
//! `"format": "dede-solution/1"`. Infinite bounds are written as `null`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cases::Instance;
use crate::engine::{AdmmState, SolveReport, Termination};
use crate::model::{
    LineUtility, LinearConstraint, ModelError, ObjectiveTerm, ProblemSpec, Relation, Sense, Target, VariableDomain,
    DEFAULT_LOG_FLOOR,
};

pub const PROBLEM_FORMAT: &str = "dede-problem/1";
pub const SOLUTION_FORMAT: &str = "dede-solution/1";

#[derive(Debug, Error)]
pub enum FormatError {
    /// Malformed JSON or a field of the wrong type.
    #[error("line {line}, column {column}, at `{path}`: {message}")]
    Parse {
        line: usize,
        column: usize,
        path: String,
        message: String,
    },
    #[error("unsupported format tag `{found}`, expected `{expected}`")]
    Version { found: String, expected: &'static str },
    #[error("invalid problem: {0}")]
    Model(#[from] ModelError),
    #[error("invalid solution: {0}")]
    Solution(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DomainRecord {
    NonNegative,
    Real,
    Box { lo: Option<f64>, hi: Option<f64> },
    Boolean,
    IntegerBox { lo: i64, hi: i64 },
}

impl From<VariableDomain> for DomainRecord {
    fn from(d: VariableDomain) -> Self {
        let finite = |v: f64| v.is_finite().then_some(v);
        match d {
            VariableDomain::NonNegative => DomainRecord::NonNegative,
            VariableDomain::Real => DomainRecord::Real,
            VariableDomain::Box { lo, hi } => DomainRecord::Box {
                lo: finite(lo),
                hi: finite(hi),
            },
            VariableDomain::Boolean => DomainRecord::Boolean,
            VariableDomain::IntegerBox { lo, hi } => DomainRecord::IntegerBox { lo, hi },
        }
    }
}

impl From<DomainRecord> for VariableDomain {
    fn from(d: DomainRecord) -> Self {
        match d {
            DomainRecord::NonNegative => VariableDomain::NonNegative,
            DomainRecord::Real => VariableDomain::Real,
            DomainRecord::Box { lo, hi } => VariableDomain::Box {
                lo: lo.unwrap_or(f64::NEG_INFINITY),
                hi: hi.unwrap_or(f64::INFINITY),
            },
            DomainRecord::Boolean => VariableDomain::Boolean,
            DomainRecord::IntegerBox { lo, hi } => VariableDomain::IntegerBox { lo, hi },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SenseRecord {
    Minimize,
    Maximize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RelationRecord {
    #[serde(rename = "<=", alias = "le")]
    Le,
    #[serde(rename = "==", alias = "=", alias = "eq")]
    Eq,
    #[serde(rename = ">=", alias = "ge")]
    Ge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetRecord {
    Row(usize),
    Column(usize),
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintRecord {
    pub entries: Vec<(usize, usize, f64)>,
    pub rel: RelationRecord,
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtilityRecord {
    pub target: TargetRecord,
    pub entries: Vec<(usize, usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TermRecord {
    Linear {
        target: TargetRecord,
        entries: Vec<(usize, usize, f64)>,
    },
    WeightedLog {
        target: TargetRecord,
        weight: f64,
        entries: Vec<(usize, usize, f64)>,
        #[serde(default = "default_floor")]
        floor: f64,
    },
    Quadratic {
        target: TargetRecord,
        entries: Vec<(usize, usize, f64)>,
    },
    EpigraphMin {
        utilities: Vec<UtilityRecord>,
    },
    EpigraphMax {
        utilities: Vec<UtilityRecord>,
    },
}

fn default_floor() -> f64 {
    DEFAULT_LOG_FLOOR
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainOverride {
    pub i: usize,
    pub j: usize,
    pub domain: DomainRecord,
}

/// On-disk problem. `domain` is the default for every entry; the optional
/// `domains` list overrides single entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    pub format: String,
    pub n_resources: usize,
    pub n_demands: usize,
    pub domain: DomainRecord,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub domains: Vec<DomainOverride>,
    pub sense: SenseRecord,
    pub objective: Vec<TermRecord>,
    pub resource_constraints: Vec<ConstraintRecord>,
    pub demand_constraints: Vec<ConstraintRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demand_groups: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub allow_group_merge: bool,
    /// The generator record this problem was built from, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub case: Option<Instance>,
}

fn target_out(t: Target) -> TargetRecord {
    match t {
        Target::Row(i) => TargetRecord::Row(i),
        Target::Column(j) => TargetRecord::Column(j),
        Target::Global => TargetRecord::Global,
    }
}

fn target_in(t: TargetRecord) -> Target {
    match t {
        TargetRecord::Row(i) => Target::Row(i),
        TargetRecord::Column(j) => Target::Column(j),
        TargetRecord::Global => Target::Global,
    }
}

fn constraint_out(c: &LinearConstraint) -> ConstraintRecord {
    ConstraintRecord {
        entries: c.entries.clone(),
        rel: match c.relation {
            Relation::Le => RelationRecord::Le,
            Relation::Eq => RelationRecord::Eq,
            Relation::Ge => RelationRecord::Ge,
        },
        rhs: c.rhs,
    }
}

fn constraint_in(c: &ConstraintRecord) -> LinearConstraint {
    let relation = match c.rel {
        RelationRecord::Le => Relation::Le,
        RelationRecord::Eq => Relation::Eq,
        RelationRecord::Ge => Relation::Ge,
    };
    LinearConstraint::new(c.entries.clone(), relation, c.rhs)
}

impl ProblemFile {
    pub fn from_problem(problem: &ProblemSpec, case: Option<Instance>) -> Self {
        let utilities = |us: &[LineUtility]| {
            us.iter()
                .map(|u| UtilityRecord {
                    target: target_out(u.target),
                    entries: u.entries.clone(),
                })
                .collect()
        };
        let objective = problem
            .objective()
            .iter()
            .map(|t| match t {
                ObjectiveTerm::Linear { target, entries } => TermRecord::Linear {
                    target: target_out(*target),
                    entries: entries.clone(),
                },
                ObjectiveTerm::WeightedLog {
                    target,
                    weight,
                    entries,
                    floor,
                } => TermRecord::WeightedLog {
                    target: target_out(*target),
                    weight: *weight,
                    entries: entries.clone(),
                    floor: *floor,
                },
                ObjectiveTerm::Quadratic { target, entries } => TermRecord::Quadratic {
                    target: target_out(*target),
                    entries: entries.clone(),
                },
                ObjectiveTerm::EpigraphMin { utilities: us } => TermRecord::EpigraphMin { utilities: utilities(us) },
                ObjectiveTerm::EpigraphMax { utilities: us } => TermRecord::EpigraphMax { utilities: utilities(us) },
            })
            .collect();
        Self {
            format: PROBLEM_FORMAT.to_string(),
            n_resources: problem.n_resources(),
            n_demands: problem.n_demands(),
            domain: problem.default_domain().into(),
            domains: problem
                .domain_overrides()
                .iter()
                .map(|(&(i, j), &d)| DomainOverride { i, j, domain: d.into() })
                .collect(),
            sense: match problem.sense() {
                Sense::Minimize => SenseRecord::Minimize,
                Sense::Maximize => SenseRecord::Maximize,
            },
            objective,
            resource_constraints: problem.resource_constraints().iter().map(constraint_out).collect(),
            demand_constraints: problem.demand_constraints().iter().map(constraint_out).collect(),
            demand_groups: problem.demand_groups().map(<[usize]>::to_vec),
            allow_group_merge: problem.allow_group_merge(),
            case,
        }
    }

    pub fn to_problem(&self) -> Result<ProblemSpec, FormatError> {
        if self.format != PROBLEM_FORMAT {
            return Err(FormatError::Version {
                found: self.format.clone(),
                expected: PROBLEM_FORMAT,
            });
        }
        let utilities = |us: &[UtilityRecord]| {
            us.iter()
                .map(|u| LineUtility {
                    target: target_in(u.target),
                    entries: u.entries.clone(),
                })
                .collect()
        };
        let mut b = ProblemSpec::builder(self.n_resources, self.n_demands)
            .sense(match self.sense {
                SenseRecord::Minimize => Sense::Minimize,
                SenseRecord::Maximize => Sense::Maximize,
            })
            .default_domain(self.domain.into())
            .allow_group_merge(self.allow_group_merge);
        for o in &self.domains {
            b.set_domain(o.i, o.j, o.domain.into());
        }
        for t in &self.objective {
            b.push_term(match t {
                TermRecord::Linear { target, entries } => ObjectiveTerm::Linear {
                    target: target_in(*target),
                    entries: entries.clone(),
                },
                TermRecord::WeightedLog {
                    target,
                    weight,
                    entries,
                    floor,
                } => ObjectiveTerm::WeightedLog {
                    target: target_in(*target),
                    weight: *weight,
                    entries: entries.clone(),
                    floor: *floor,
                },
                TermRecord::Quadratic { target, entries } => ObjectiveTerm::Quadratic {
                    target: target_in(*target),
                    entries: entries.clone(),
                },
                TermRecord::EpigraphMin { utilities: us } => ObjectiveTerm::EpigraphMin { utilities: utilities(us) },
                TermRecord::EpigraphMax { utilities: us } => ObjectiveTerm::EpigraphMax { utilities: utilities(us) },
            });
        }
        for c in &self.resource_constraints {
            b.push_resource_constraint(constraint_in(c));
        }
        for c in &self.demand_constraints {
            b.push_demand_constraint(constraint_in(c));
        }
        if let Some(labels) = &self.demand_groups {
            b = b.demand_groups(labels.clone());
        }
        Ok(b.build()?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("problem records serialize")
    }

    /// Single-line form, used for stored fixtures.
    pub fn to_json_compact(&self) -> String {
        serde_json::to_string(self).expect("problem records serialize")
    }
}

fn parse<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T, FormatError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        FormatError::Parse {
            line: inner.line(),
            column: inner.column(),
            path,
            message: inner.to_string(),
        }
    })
}

/// Parses and validates a problem file.
pub fn parse_problem(text: &str) -> Result<(ProblemSpec, ProblemFile), FormatError> {
    let file: ProblemFile = parse(text)?;
    let problem = file.to_problem()?;
    Ok((problem, file))
}

pub fn write_problem(problem: &ProblemSpec, case: Option<Instance>) -> String {
    ProblemFile::from_problem(problem, case).to_json()
}

/// Lower-case hex SHA-256 of `bytes`.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of everything that fixes the solver's state layout: dimensions,
/// domains, sense, and the sparsity pattern and relations of constraints and
/// objective terms. Coefficients and right-hand sides are left out, so a
/// perturbed instance keeps the hash of the original.
pub fn shape_hash(problem: &ProblemSpec) -> String {
    let mut h = Sha256::new();
    let mut put = |s: String| {
        h.update(s.as_bytes());
        h.update(b";");
    };
    let (n, m) = problem.shape();
    put(format!("{n}x{m} {:?}", problem.sense()));
    for i in 0..n {
        for j in 0..m {
            put(format!("{:?}", problem.domain(i, j)));
        }
    }
    let pattern = |es: &[(usize, usize, f64)]| es.iter().map(|&(i, j, _)| format!("{i},{j}")).collect::<Vec<_>>().join(" ");
    for (side, cs) in [("r", problem.resource_constraints()), ("d", problem.demand_constraints())] {
        for c in cs {
            put(format!("{side} {} {}", c.relation, pattern(&c.entries)));
        }
    }
    for t in problem.objective() {
        let body = match t {
            ObjectiveTerm::Linear { target, entries }
            | ObjectiveTerm::WeightedLog { target, entries, .. }
            | ObjectiveTerm::Quadratic { target, entries } => format!("{target:?} {}", pattern(entries)),
            ObjectiveTerm::EpigraphMin { utilities } | ObjectiveTerm::EpigraphMax { utilities } => utilities
                .iter()
                .map(|u| format!("{:?} {}", u.target, pattern(&u.entries)))
                .collect::<Vec<_>>()
                .join(" | "),
        };
        put(format!("{} {body}", t.kind_name()));
    }
    put(format!("{:?}", problem.demand_groups()));
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualRecord {
    pub primal: f64,
    pub dual: f64,
}

/// On-disk solution. `wall_ms` is absent in reproducible output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionFile {
    pub format: String,
    pub input_hash: String,
    pub shape_hash: String,
    pub n_resources: usize,
    pub n_demands: usize,
    pub objective_raw: f64,
    pub objective_repaired: f64,
    /// Nonzero entries of the repaired allocation as `[i, j, value]`.
    pub allocation: Vec<(usize, usize, f64)>,
    pub termination: Termination,
    pub iters: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<f64>,
    pub residuals: ResidualRecord,
    pub feasible: bool,
    pub max_violation: f64,
    /// Final iterates, usable as a warm start.
    pub state: AdmmState,
}

impl SolutionFile {
    pub fn from_report(report: &SolveReport, problem: &ProblemSpec, input: &[u8], reproducible: bool) -> Self {
        let last = report.trace.last();
        Self {
            format: SOLUTION_FORMAT.to_string(),
            input_hash: content_hash(input),
            shape_hash: shape_hash(problem),
            n_resources: problem.n_resources(),
            n_demands: problem.n_demands(),
            objective_raw: report.objective_raw,
            objective_repaired: report.objective_repaired,
            allocation: report.allocation.triplets(),
            termination: report.termination,
            iters: report.iterations,
            wall_ms: (!reproducible).then(|| report.wall.as_secs_f64() * 1e3),
            residuals: ResidualRecord {
                primal: last.map_or(f64::NAN, |r| r.primal),
                dual: last.map_or(f64::NAN, |r| r.dual),
            },
            feasible: report.feasibility.feasible,
            max_violation: report.feasibility.max_violation(),
            state: report.state.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("solution records serialize")
    }

    /// The stored state, provided the solution was computed for a problem
    /// with the same shape.
    pub fn warm_state_for(&self, problem: &ProblemSpec) -> Result<AdmmState, FormatError> {
        let expected = shape_hash(problem);
        if self.shape_hash != expected {
            return Err(FormatError::Solution(format!(
                "warm start was computed for shape {}, problem has shape {}",
                &self.shape_hash[..12.min(self.shape_hash.len())],
                &expected[..12]
            )));
        }
        Ok(self.state.clone())
    }
}

pub fn parse_solution(text: &str) -> Result<SolutionFile, FormatError> {
    let file: SolutionFile = parse(text)?;
    if file.format != SOLUTION_FORMAT {
        return Err(FormatError::Version {
            found: file.format,
            expected: SOLUTION_FORMAT,
        });
    }
    Ok(file)
}
