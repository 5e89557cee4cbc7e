//! Desk-scale instance generators for the three case studies: cluster
//! scheduling, traffic engineering and shard load balancing.
//!
//! Generators are pure functions of their parameters and seed. Each case
//! keeps its raw data in an instance struct so perturbations can edit the
//! numbers without touching the sparsity pattern.

use std::collections::{BTreeSet, HashMap, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    LineUtility, LinearConstraint, ModelError, ObjectiveTerm, ProblemSpec, Relation, Target, VariableDomain,
    DEFAULT_LOG_FLOOR,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CaseError {
    #[error("total shard footprint {footprint} exceeds total server memory {memory}")]
    FootprintExceedsMemory { footprint: f64, memory: f64 },
    #[error("invalid case parameters: {0}")]
    InvalidParameters(String),
    #[error("perturbation {perturbation} does not apply to a {case} instance")]
    WrongKind {
        perturbation: &'static str,
        case: &'static str,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- cluster

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterVariant {
    MaxMin,
    PropFair,
    TotalThroughput,
}

/// Resource types (rows) and jobs (columns).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterInstance {
    pub capacity: Vec<f64>,
    /// Instances requested per job.
    pub req: Vec<f64>,
    /// `tput[i][j]`: throughput of job `j` on type `i`.
    pub tput: Vec<Vec<f64>>,
    pub weight: Vec<f64>,
    /// `allowed[i][j]`; masked entries are forced to zero.
    pub allowed: Vec<Vec<bool>>,
}

impl ClusterInstance {
    pub fn random(n_types: usize, n_jobs: usize, seed: u64) -> Result<Self, CaseError> {
        if n_types == 0 || n_jobs == 0 {
            return Err(CaseError::InvalidParameters("cluster needs at least one type and one job".into()));
        }
        let mut r = rng(seed);
        let mult: Vec<f64> = (0..n_types).map(|_| r.random_range(0.5..1.5)).collect();
        let (lo, hi) = (1f64.ln(), 100f64.ln());
        let mut tput = vec![vec![0.0; n_jobs]; n_types];
        for row in tput.iter_mut().zip(&mult) {
            for v in row.0.iter_mut() {
                *v = r.random_range(lo..hi).exp() * row.1;
            }
        }
        let req: Vec<f64> = (0..n_jobs).map(|_| [1.0, 2.0, 4.0][r.random_range(0..3)]).collect();
        let weight: Vec<f64> = (0..n_jobs).map(|_| [1.0, 2.0][r.random_range(0..2)]).collect();
        let mut allowed = vec![vec![true; n_jobs]; n_types];
        if n_types > 1 {
            for j in 0..n_jobs {
                if r.random_bool(1.0 / 3.0) {
                    let keep = r.random_range(1..n_types);
                    let mut types: Vec<usize> = (0..n_types).collect();
                    types.shuffle(&mut r);
                    for (rank, &i) in types.iter().enumerate() {
                        allowed[i][j] = rank < keep;
                    }
                }
            }
        }
        let per_type = req.iter().sum::<f64>() / n_types as f64;
        let capacity = (0..n_types).map(|_| per_type * r.random_range(0.3..0.8)).collect();
        Ok(Self {
            capacity,
            req,
            tput,
            weight,
            allowed,
        })
    }

    /// Three types and three jobs whose total-throughput optimum splits job 0
    /// 0.8/0.2 across types A and C.
    pub fn toy() -> Self {
        Self {
            capacity: vec![0.8, 1.0, 1.2],
            req: vec![1.0; 3],
            tput: vec![vec![12.0, 1.0, 1.0], vec![2.0, 4.0, 1.0], vec![10.0, 1.0, 3.2]],
            weight: vec![1.0; 3],
            allowed: vec![vec![true; 3]; 3],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.capacity.len(), self.req.len())
    }

    /// Best single-type throughput of job `j` over its allowed types.
    pub fn best_tput(&self, j: usize) -> f64 {
        (0..self.capacity.len())
            .filter(|&i| self.allowed[i][j])
            .map(|i| self.tput[i][j])
            .fold(0.0, f64::max)
    }

    pub fn to_problem(&self, variant: ClusterVariant) -> Result<ProblemSpec, CaseError> {
        let (n, m) = self.shape();
        let mut b = ProblemSpec::builder(n, m).maximize();
        for i in 0..n {
            for j in 0..m {
                if !self.allowed[i][j] {
                    b.set_domain(i, j, VariableDomain::Box { lo: 0.0, hi: 0.0 });
                }
            }
        }
        let active = |j: usize| (0..n).filter(move |&i| self.allowed[i][j]);
        for j in 0..m {
            b.push_demand_constraint(LinearConstraint::new(active(j).map(|i| (i, j, 1.0)).collect(), Relation::Le, 1.0));
        }
        for i in 0..n {
            let entries: Vec<_> = (0..m).filter(|&j| self.allowed[i][j]).map(|j| (i, j, self.req[j])).collect();
            if !entries.is_empty() {
                b.push_resource_constraint(LinearConstraint::new(entries, Relation::Le, self.capacity[i]));
            }
        }
        let normalized = |j: usize| -> Vec<(usize, usize, f64)> {
            let best = self.best_tput(j);
            active(j).map(|i| (i, j, self.tput[i][j] / best)).collect()
        };
        match variant {
            ClusterVariant::MaxMin => {
                let utilities = (0..m)
                    .map(|j| LineUtility {
                        target: Target::Column(j),
                        entries: normalized(j)
                            .into_iter()
                            .map(|(i, j, v)| (i, j, v / self.weight[j]))
                            .collect(),
                    })
                    .collect();
                b.push_term(ObjectiveTerm::EpigraphMin { utilities });
            }
            ClusterVariant::PropFair => {
                for j in 0..m {
                    b.push_term(ObjectiveTerm::WeightedLog {
                        target: Target::Column(j),
                        weight: self.weight[j],
                        entries: normalized(j),
                        floor: DEFAULT_LOG_FLOOR,
                    });
                }
            }
            ClusterVariant::TotalThroughput => {
                for j in 0..m {
                    b.push_term(ObjectiveTerm::Linear {
                        target: Target::Column(j),
                        entries: active(j).map(|i| (i, j, self.weight[j] * self.tput[i][j])).collect(),
                    });
                }
            }
        }
        Ok(b.build()?)
    }
}

pub fn gen_cluster(n_types: usize, n_jobs: usize, variant: ClusterVariant, seed: u64) -> Result<ProblemSpec, CaseError> {
    ClusterInstance::random(n_types, n_jobs, seed)?.to_problem(variant)
}

// ---------------------------------------------------------------- traffic

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    Grid { rows: usize, cols: usize },
    Random { nodes: usize, degree: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrafficVariant {
    TotalFlow,
    MinMlu,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrafficParams {
    pub topology: Topology,
    pub k_paths: usize,
    /// Number of node pairs with traffic; `None` uses every ordered pair.
    pub n_demands: Option<usize>,
    pub variant: TrafficVariant,
}

impl TrafficParams {
    pub fn grid(rows: usize, cols: usize, n_demands: usize, variant: TrafficVariant) -> Self {
        Self {
            topology: Topology::Grid { rows, cols },
            k_paths: 4,
            n_demands: Some(n_demands),
            variant,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demand {
    pub src: usize,
    pub dst: usize,
    pub volume: f64,
    /// Paths as sequences of link indices.
    pub paths: Vec<Vec<usize>>,
}

/// Links (rows) and demand pairs (columns) of a path-based flow problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficInstance {
    pub n_nodes: usize,
    pub links: Vec<(usize, usize)>,
    pub capacity: Vec<f64>,
    /// Capacity before failures; utilization is measured against it.
    pub nominal_capacity: Vec<f64>,
    pub demands: Vec<Demand>,
}

/// Directed links in both directions for every undirected edge.
fn bidirectional(edges: &[(usize, usize)]) -> Vec<(usize, usize)> {
    edges.iter().flat_map(|&(u, v)| [(u, v), (v, u)]).collect()
}

fn topology_links(topology: Topology, r: &mut ChaCha8Rng) -> Result<(usize, Vec<(usize, usize)>), CaseError> {
    match topology {
        Topology::Grid { rows, cols } => {
            if rows * cols < 2 {
                return Err(CaseError::InvalidParameters("grid needs at least two nodes".into()));
            }
            let id = |a: usize, b: usize| a * cols + b;
            let mut edges = Vec::new();
            for a in 0..rows {
                for b in 0..cols {
                    if b + 1 < cols {
                        edges.push((id(a, b), id(a, b + 1)));
                    }
                    if a + 1 < rows {
                        edges.push((id(a, b), id(a + 1, b)));
                    }
                }
            }
            Ok((rows * cols, bidirectional(&edges)))
        }
        Topology::Random { nodes, degree } => {
            if nodes < 2 || degree == 0 {
                return Err(CaseError::InvalidParameters("random topology needs >= 2 nodes and degree >= 1".into()));
            }
            // a ring keeps the graph connected
            let mut set = BTreeSet::new();
            for u in 0..nodes {
                let v = (u + 1) % nodes;
                if u != v {
                    set.insert((u.min(v), u.max(v)));
                }
            }
            let target = (nodes * degree / 2).min(nodes * (nodes - 1) / 2);
            while set.len() < target {
                let u = r.random_range(0..nodes);
                let v = r.random_range(0..nodes);
                if u != v {
                    set.insert((u.min(v), u.max(v)));
                }
            }
            let edges: Vec<_> = set.into_iter().collect();
            Ok((nodes, bidirectional(&edges)))
        }
    }
}

/// Fewest-hop path avoiding `banned_links` and `banned_nodes`; neighbours
/// are explored in link order so ties break deterministically.
fn bfs_path(
    adj: &[Vec<(usize, usize)>],
    s: usize,
    t: usize,
    banned_links: &BTreeSet<usize>,
    banned_nodes: &BTreeSet<usize>,
) -> Option<Vec<usize>> {
    let mut prev: Vec<Option<(usize, usize)>> = vec![None; adj.len()];
    let mut seen = vec![false; adj.len()];
    seen[s] = true;
    let mut q = VecDeque::from([s]);
    while let Some(u) = q.pop_front() {
        if u == t {
            break;
        }
        for &(v, l) in &adj[u] {
            if seen[v] || banned_links.contains(&l) || banned_nodes.contains(&v) {
                continue;
            }
            seen[v] = true;
            prev[v] = Some((u, l));
            q.push_back(v);
        }
    }
    if !seen[t] {
        return None;
    }
    let mut path = Vec::new();
    let mut cur = t;
    while cur != s {
        let (u, l) = prev[cur].expect("reached nodes have a predecessor");
        path.push(l);
        cur = u;
    }
    path.reverse();
    Some(path)
}

/// Yen's k shortest simple paths by hop count.
pub fn k_shortest_paths(n_nodes: usize, links: &[(usize, usize)], s: usize, t: usize, k: usize) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n_nodes];
    for (l, &(u, v)) in links.iter().enumerate() {
        adj[u].push((v, l));
    }
    let nodes_of = |path: &[usize]| -> Vec<usize> {
        let mut ns = vec![s];
        ns.extend(path.iter().map(|&l| links[l].1));
        ns
    };
    let Some(first) = bfs_path(&adj, s, t, &BTreeSet::new(), &BTreeSet::new()) else {
        return Vec::new();
    };
    let mut found = vec![first];
    let mut candidates: BTreeSet<(usize, Vec<usize>)> = BTreeSet::new();
    while found.len() < k {
        let last = found.last().expect("nonempty").clone();
        let last_nodes = nodes_of(&last);
        for spur in 0..last.len() {
            let root = &last[..spur];
            let mut banned_links = BTreeSet::new();
            for p in &found {
                if p.len() > spur && p[..spur] == *root {
                    banned_links.insert(p[spur]);
                }
            }
            let banned_nodes: BTreeSet<usize> = last_nodes[..spur].iter().copied().collect();
            if let Some(tail) = bfs_path(&adj, last_nodes[spur], t, &banned_links, &banned_nodes) {
                let mut p = root.to_vec();
                p.extend(tail);
                if !found.contains(&p) {
                    candidates.insert((p.len(), p));
                }
            }
        }
        match candidates.pop_first() {
            Some((_, p)) => found.push(p),
            None => break,
        }
    }
    found
}

impl TrafficInstance {
    /// Builds an instance from explicit links and demands, computing up to
    /// `k` paths per pair. Pairs without any path are dropped with a warning.
    pub fn from_parts(
        n_nodes: usize,
        links: Vec<(usize, usize)>,
        capacity: Vec<f64>,
        demands: &[(usize, usize, f64)],
        k: usize,
    ) -> Result<Self, CaseError> {
        if links.len() != capacity.len() {
            return Err(CaseError::InvalidParameters("one capacity per link is required".into()));
        }
        if capacity.iter().any(|&c| c <= 0.0) {
            return Err(CaseError::InvalidParameters("link capacities must be positive".into()));
        }
        if k == 0 {
            return Err(CaseError::InvalidParameters("k_paths must be at least 1".into()));
        }
        let mut out = Vec::new();
        for &(s, t, d) in demands {
            if s >= n_nodes || t >= n_nodes || s == t {
                return Err(CaseError::InvalidParameters(format!("bad demand pair ({s}, {t})")));
            }
            let paths = k_shortest_paths(n_nodes, &links, s, t, k);
            if paths.is_empty() {
                log::warn!("demand {s}->{t} has no path and is dropped");
                continue;
            }
            out.push(Demand {
                src: s,
                dst: t,
                volume: d,
                paths,
            });
        }
        Ok(Self {
            n_nodes,
            links,
            nominal_capacity: capacity.clone(),
            capacity,
            demands: out,
        })
    }

    pub fn random(params: &TrafficParams, seed: u64) -> Result<Self, CaseError> {
        let mut r = rng(seed);
        let (n_nodes, links) = topology_links(params.topology, &mut r)?;
        let capacity: Vec<f64> = links.iter().map(|_| r.random_range(5.0..15.0)).collect();
        let mut pairs: Vec<(usize, usize)> = (0..n_nodes)
            .flat_map(|s| (0..n_nodes).filter(move |&t| t != s).map(move |t| (s, t)))
            .collect();
        pairs.shuffle(&mut r);
        if let Some(k) = params.n_demands {
            pairs.truncate(k);
        }
        pairs.sort_unstable();
        let raw: Vec<(usize, usize, f64)> = pairs.iter().map(|&(s, t)| (s, t, r.random_range(1.0..10.0))).collect();
        let mut inst = Self::from_parts(n_nodes, links, capacity, &raw, params.k_paths)?;
        // scale demands against shortest-path routing
        let mut load = vec![0.0; inst.links.len()];
        for d in &inst.demands {
            for &l in &d.paths[0] {
                load[l] += d.volume;
            }
        }
        let mlu = load
            .iter()
            .zip(&inst.capacity)
            .map(|(a, c)| a / c)
            .fold(0.0, f64::max);
        let target = match params.variant {
            TrafficVariant::MinMlu => 0.9,
            TrafficVariant::TotalFlow => 2.0,
        };
        if mlu > 0.0 {
            for d in inst.demands.iter_mut() {
                d.volume *= target / mlu;
            }
        }
        Ok(inst)
    }

    /// Links used by any path of demand `p`.
    pub fn demand_links(&self, p: usize) -> BTreeSet<usize> {
        self.demands[p].paths.iter().flatten().copied().collect()
    }

    pub fn to_problem(&self, variant: TrafficVariant) -> Result<ProblemSpec, CaseError> {
        let n = self.links.len();
        let m = self.demands.len();
        if m == 0 {
            return Err(CaseError::InvalidParameters("traffic instance has no routable demand".into()));
        }
        let used: Vec<BTreeSet<usize>> = (0..m).map(|p| self.demand_links(p)).collect();
        let mut b = ProblemSpec::builder(n, m).sense(match variant {
            TrafficVariant::TotalFlow => crate::model::Sense::Maximize,
            TrafficVariant::MinMlu => crate::model::Sense::Minimize,
        });
        let mut row_entries: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (p, ls) in used.iter().enumerate() {
            for l in 0..n {
                if ls.contains(&l) {
                    row_entries[l].push(p);
                } else {
                    b.set_domain(l, p, VariableDomain::Box { lo: 0.0, hi: 0.0 });
                }
            }
        }
        for (l, ps) in row_entries.iter().enumerate() {
            if !ps.is_empty() {
                b.push_resource_constraint(LinearConstraint::new(
                    ps.iter().map(|&p| (l, p, 1.0)).collect(),
                    Relation::Le,
                    self.capacity[l],
                ));
            }
        }
        for (p, d) in self.demands.iter().enumerate() {
            let inflow: Vec<(usize, usize, f64)> = used[p]
                .iter()
                .filter(|&&l| self.links[l].1 == d.dst)
                .map(|&l| (l, p, 1.0))
                .collect();
            let rel = match variant {
                TrafficVariant::TotalFlow => Relation::Le,
                TrafficVariant::MinMlu => Relation::Eq,
            };
            b.push_demand_constraint(LinearConstraint::new(inflow.clone(), rel, d.volume));
            // conservation at intermediate path nodes
            let mut inner = BTreeSet::new();
            for &l in &used[p] {
                let (u, v) = self.links[l];
                for x in [u, v] {
                    if x != d.src && x != d.dst {
                        inner.insert(x);
                    }
                }
            }
            for v in inner {
                let mut entries = Vec::new();
                for &l in &used[p] {
                    if self.links[l].1 == v {
                        entries.push((l, p, 1.0));
                    }
                    if self.links[l].0 == v {
                        entries.push((l, p, -1.0));
                    }
                }
                b.push_demand_constraint(LinearConstraint::new(entries, Relation::Eq, 0.0));
            }
            if variant == TrafficVariant::TotalFlow {
                b.push_term(ObjectiveTerm::Linear {
                    target: Target::Column(p),
                    entries: inflow,
                });
            }
        }
        if variant == TrafficVariant::MinMlu {
            let utilities = row_entries
                .iter()
                .enumerate()
                .filter(|(_, ps)| !ps.is_empty())
                .map(|(l, ps)| LineUtility {
                    target: Target::Row(l),
                    entries: ps.iter().map(|&p| (l, p, 1.0 / self.nominal_capacity[l])).collect(),
                })
                .collect();
            b.push_term(ObjectiveTerm::EpigraphMax { utilities });
        }
        let labels = self.demands.iter().map(|d| d.src).collect();
        Ok(b.demand_groups(labels).build()?)
    }
}

pub fn gen_traffic(params: &TrafficParams, seed: u64) -> Result<ProblemSpec, CaseError> {
    TrafficInstance::random(params, seed)?.to_problem(params.variant)
}

// ----------------------------------------------------------- load balance

/// Servers (rows) by shards. The problem matrix has `2 * shards` columns:
/// fractional assignments `x` first, then placement indicators `x'`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadBalanceInstance {
    pub memory: Vec<f64>,
    pub load: Vec<f64>,
    pub footprint: Vec<f64>,
    /// Server currently holding each shard.
    pub prior: Vec<usize>,
    pub eps: f64,
}

impl LoadBalanceInstance {
    /// Loads normalized to an average of 1 per server, unit footprints, and
    /// per-server memory equal to the shard count of a wrap-around layout
    /// that balances load exactly, so a feasible placement always exists.
    pub fn random(n_servers: usize, n_shards: usize, eps: f64, seed: u64) -> Result<Self, CaseError> {
        if n_servers == 0 || n_shards == 0 {
            return Err(CaseError::InvalidParameters("need at least one server and one shard".into()));
        }
        if eps <= 0.0 {
            return Err(CaseError::InvalidParameters("eps must be positive".into()));
        }
        let mut r = rng(seed);
        let raw: Vec<f64> = (0..n_shards).map(|_| r.random_range(0.5..1.5)).collect();
        let total: f64 = raw.iter().sum();
        let load: Vec<f64> = raw.iter().map(|l| l * n_servers as f64 / total).collect();
        let prior = (0..n_shards).map(|_| r.random_range(0..n_servers)).collect();
        let memory = wraparound_counts(&load, n_servers);
        Ok(Self {
            memory,
            load,
            footprint: vec![1.0; n_shards],
            prior,
            eps,
        })
    }

    pub fn n_servers(&self) -> usize {
        self.memory.len()
    }

    pub fn n_shards(&self) -> usize {
        self.load.len()
    }

    pub fn average_load(&self) -> f64 {
        self.load.iter().sum::<f64>() / self.n_servers() as f64
    }

    /// Rejects instances that cannot hold every shard somewhere.
    pub fn check_structure(&self) -> Result<(), CaseError> {
        let footprint: f64 = self.footprint.iter().sum();
        let memory: f64 = self.memory.iter().sum();
        if footprint > memory {
            return Err(CaseError::FootprintExceedsMemory { footprint, memory });
        }
        Ok(())
    }

    /// Shards placed on a server that did not hold them before, weighted by
    /// footprint, read from the indicator columns of `x`.
    pub fn movements(&self, x: &crate::model::Allocation) -> f64 {
        let m = self.n_shards();
        (0..self.n_servers())
            .flat_map(|i| (0..m).map(move |j| (i, j)))
            .filter(|&(i, j)| self.prior[j] != i)
            .map(|(i, j)| self.footprint[j] * x.get(i, m + j))
            .sum()
    }

    pub fn to_problem(&self) -> Result<ProblemSpec, CaseError> {
        self.check_structure()?;
        let (n, m) = (self.n_servers(), self.n_shards());
        if self.prior.len() != m || self.footprint.len() != m || self.prior.iter().any(|&s| s >= n) {
            return Err(CaseError::InvalidParameters("prior placement and footprints must cover every shard".into()));
        }
        let avg = self.average_load();
        let mut b = ProblemSpec::builder(n, 2 * m).minimize();
        for i in 0..n {
            for j in 0..m {
                b.set_domain(i, j, VariableDomain::Box { lo: 0.0, hi: 1.0 });
                b.set_domain(i, m + j, VariableDomain::Boolean);
            }
        }
        let mut any_term = false;
        for i in 0..n {
            for j in 0..m {
                b.push_resource_constraint(LinearConstraint::new(
                    vec![(i, m + j, 1.0), (i, j, -1.0)],
                    Relation::Ge,
                    0.0,
                ));
            }
            b.push_resource_constraint(LinearConstraint::new(
                (0..m).map(|j| (i, m + j, self.footprint[j])).collect(),
                Relation::Le,
                self.memory[i],
            ));
            let load: Vec<_> = (0..m).map(|j| (i, j, self.load[j])).collect();
            b.push_resource_constraint(LinearConstraint::new(load.clone(), Relation::Ge, avg - self.eps));
            b.push_resource_constraint(LinearConstraint::new(load, Relation::Le, avg + self.eps));
            let moves: Vec<_> = (0..m)
                .filter(|&j| self.prior[j] != i)
                .map(|j| (i, m + j, self.footprint[j]))
                .collect();
            if !moves.is_empty() {
                any_term = true;
                b.push_term(ObjectiveTerm::Linear {
                    target: Target::Row(i),
                    entries: moves,
                });
            }
        }
        if !any_term {
            b.push_term(ObjectiveTerm::Linear {
                target: Target::Row(0),
                entries: vec![(0, m, 0.0)],
            });
        }
        for j in 0..m {
            b.push_demand_constraint(LinearConstraint::new((0..n).map(|i| (i, j, 1.0)).collect(), Relation::Eq, 1.0));
        }
        Ok(b.build()?)
    }
}

/// Number of shards each server touches when shards are laid out in order
/// and wrapped across servers of capacity equal to the average load.
fn wraparound_counts(load: &[f64], n_servers: usize) -> Vec<f64> {
    let avg = load.iter().sum::<f64>() / n_servers as f64;
    let mut counts = vec![0.0; n_servers];
    let mut server = 0;
    let mut room = avg;
    for &l in load {
        let mut left = l;
        loop {
            counts[server] += 1.0;
            if left <= room + 1e-12 || server + 1 == n_servers {
                room -= left;
                break;
            }
            left -= room;
            server += 1;
            room = avg;
        }
        if room <= 1e-12 && server + 1 < n_servers {
            server += 1;
            room = avg;
        }
    }
    counts
}

pub fn gen_load_balance(n_servers: usize, n_shards: usize, eps: f64, seed: u64) -> Result<ProblemSpec, CaseError> {
    LoadBalanceInstance::random(n_servers, n_shards, eps, seed)?.to_problem()
}

// ------------------------------------------------------------ perturbation

/// A case instance together with the variant that turns it into a problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Instance {
    Cluster {
        variant: ClusterVariant,
        instance: ClusterInstance,
    },
    Traffic {
        variant: TrafficVariant,
        instance: TrafficInstance,
    },
    LoadBalance {
        instance: LoadBalanceInstance,
    },
}

impl Instance {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Instance::Cluster { .. } => "cluster",
            Instance::Traffic { .. } => "traffic",
            Instance::LoadBalance { .. } => "load_balance",
        }
    }

    pub fn to_problem(&self) -> Result<ProblemSpec, CaseError> {
        match self {
            Instance::Cluster { variant, instance } => instance.to_problem(*variant),
            Instance::Traffic { variant, instance } => instance.to_problem(*variant),
            Instance::LoadBalance { instance } => instance.to_problem(),
        }
    }

    /// Structural feasibility checks that do not need a solve.
    pub fn check_structure(&self) -> Result<(), CaseError> {
        match self {
            Instance::LoadBalance { instance } => instance.check_structure(),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perturbation {
    /// Multiplies each capacity (cluster, traffic) or shard load by `1 + σ·N(0,1)`.
    RhsNoise(f64),
    /// Multiplies capacities (cluster, traffic) or the load tolerance by a factor.
    RhsScale(f64),
    /// Multiplies each request, demand or load by `1 + σ·N(0,1)`.
    DemandShift(f64),
    /// Sets the capacity of this many random working links to zero.
    LinkFailures(usize),
}

impl Perturbation {
    fn name(&self) -> &'static str {
        match self {
            Perturbation::RhsNoise(_) => "rhs_noise",
            Perturbation::RhsScale(_) => "rhs_scale",
            Perturbation::DemandShift(_) => "demand_shift",
            Perturbation::LinkFailures(_) => "link_failures",
        }
    }
}

fn noisy(r: &mut ChaCha8Rng, sigma: f64, v: f64, floor: f64) -> f64 {
    let z: f64 = StandardNormal.sample(r);
    (v * (1.0 + sigma * z)).max(floor)
}

/// Returns a perturbed copy with the same sparsity pattern, so the result
/// can refresh an existing canonical problem.
pub fn perturb(instance: &Instance, kind: Perturbation, seed: u64) -> Result<Instance, CaseError> {
    let mut r = rng(seed);
    let mut out = instance.clone();
    let wrong = || CaseError::WrongKind {
        perturbation: kind.name(),
        case: instance.kind_name(),
    };
    match (&mut out, kind) {
        (Instance::Cluster { instance, .. }, Perturbation::RhsNoise(s)) => {
            for c in instance.capacity.iter_mut() {
                *c = noisy(&mut r, s, *c, 1e-6);
            }
        }
        (Instance::Cluster { instance, .. }, Perturbation::RhsScale(f)) => {
            instance.capacity.iter_mut().for_each(|c| *c *= f);
        }
        (Instance::Cluster { instance, .. }, Perturbation::DemandShift(s)) => {
            for q in instance.req.iter_mut() {
                *q = noisy(&mut r, s, *q, 1.0);
            }
        }
        (Instance::Traffic { instance, .. }, Perturbation::RhsNoise(s)) => {
            for c in instance.capacity.iter_mut() {
                if *c > 0.0 {
                    *c = noisy(&mut r, s, *c, 1e-6);
                }
            }
        }
        (Instance::Traffic { instance, .. }, Perturbation::RhsScale(f)) => {
            instance.capacity.iter_mut().for_each(|c| *c *= f);
        }
        (Instance::Traffic { instance, .. }, Perturbation::DemandShift(s)) => {
            for d in instance.demands.iter_mut() {
                d.volume = noisy(&mut r, s, d.volume, 0.0);
            }
        }
        (Instance::Traffic { instance, .. }, Perturbation::LinkFailures(count)) => {
            let mut working: Vec<usize> = (0..instance.links.len()).filter(|&l| instance.capacity[l] > 0.0).collect();
            working.shuffle(&mut r);
            for &l in working.iter().take(count) {
                instance.capacity[l] = 0.0;
            }
            let caps = instance.capacity.clone();
            for d in instance.demands.iter_mut() {
                let alive = d.paths.iter().any(|p| p.iter().all(|&l| caps[l] > 0.0));
                if !alive && d.volume > 0.0 {
                    log::warn!("demand {}->{} lost every path and is zeroed", d.src, d.dst);
                    d.volume = 0.0;
                }
            }
        }
        (Instance::LoadBalance { instance }, Perturbation::RhsNoise(s) | Perturbation::DemandShift(s)) => {
            let n = instance.n_servers() as f64;
            for l in instance.load.iter_mut() {
                *l = noisy(&mut r, s, *l, 1e-6);
            }
            let total: f64 = instance.load.iter().sum();
            instance.load.iter_mut().for_each(|l| *l *= n / total);
        }
        (Instance::LoadBalance { instance }, Perturbation::RhsScale(f)) => {
            instance.eps *= f;
        }
        _ => return Err(wrong()),
    }
    Ok(out)
}

/// Nodes a demand's flow passes through, excluding its endpoints.
pub fn intermediate_nodes(instance: &TrafficInstance, p: usize) -> BTreeSet<usize> {
    let d = &instance.demands[p];
    instance
        .demand_links(p)
        .into_iter()
        .flat_map(|l| [instance.links[l].0, instance.links[l].1])
        .filter(|&v| v != d.src && v != d.dst)
        .collect()
}

/// Largest `|inflow - outflow|` over intermediate nodes of every demand.
pub fn conservation_violation(instance: &TrafficInstance, x: &crate::model::Allocation) -> f64 {
    let mut worst: f64 = 0.0;
    for p in 0..instance.demands.len() {
        let mut net: HashMap<usize, f64> = HashMap::new();
        for l in instance.demand_links(p) {
            let (u, v) = instance.links[l];
            *net.entry(v).or_default() += x.get(l, p);
            *net.entry(u).or_default() -= x.get(l, p);
        }
        for v in intermediate_nodes(instance, p) {
            worst = worst.max(net.get(&v).copied().unwrap_or(0.0).abs());
        }
    }
    worst
}
