#![allow(dead_code)]

use std::path::PathBuf;

use dede_core::cases::{ClusterInstance, ClusterVariant, Instance, TrafficInstance, TrafficParams, TrafficVariant};
use dede_core::format::{content_hash, parse_problem, ProblemFile};
use dede_core::model::ProblemSpec;
use serde::{Deserialize, Serialize};

pub const SEEDS: u64 = 20;
pub const TE_DEMANDS: usize = 20;

/// Cached oracle optimum stored next to each fixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub instance_hash: String,
    pub objective: f64,
    pub solver: String,
    pub tol: f64,
}

pub struct Fixture {
    pub name: String,
    pub problem: ProblemSpec,
    pub sidecar: Sidecar,
    pub bytes: Vec<u8>,
}

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/v1")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    ClusterMaxMin,
    TeTotalFlow,
    TeMinMlu,
}

pub const FAMILIES: [Family; 3] = [Family::ClusterMaxMin, Family::TeTotalFlow, Family::TeMinMlu];

impl Family {
    pub fn prefix(self) -> &'static str {
        match self {
            Family::ClusterMaxMin => "cluster_maxmin_5x8",
            Family::TeTotalFlow => "te_total_flow_3x3",
            Family::TeMinMlu => "te_min_mlu_3x3",
        }
    }

    pub fn name(self, seed: u64) -> String {
        format!("{}_s{seed:02}", self.prefix())
    }

    /// Regenerates the instance and its problem file text.
    pub fn generate(self, seed: u64) -> (ProblemSpec, String) {
        let (problem, case) = match self {
            Family::ClusterMaxMin => {
                let inst = ClusterInstance::random(5, 8, seed).unwrap();
                let p = inst.to_problem(ClusterVariant::MaxMin).unwrap();
                (
                    p,
                    Instance::Cluster {
                        variant: ClusterVariant::MaxMin,
                        instance: inst,
                    },
                )
            }
            Family::TeTotalFlow | Family::TeMinMlu => {
                let variant = if self == Family::TeTotalFlow {
                    TrafficVariant::TotalFlow
                } else {
                    TrafficVariant::MinMlu
                };
                let params = TrafficParams::grid(3, 3, TE_DEMANDS, variant);
                let inst = TrafficInstance::random(&params, seed).unwrap();
                let p = inst.to_problem(variant).unwrap();
                (p, Instance::Traffic { variant, instance: inst })
            }
        };
        let text = ProblemFile::from_problem(&problem, Some(case)).to_json_compact() + "\n";
        (problem, text)
    }
}

pub fn load(name: &str) -> Fixture {
    let dir = data_dir();
    let bytes = std::fs::read(dir.join(format!("{name}.json"))).unwrap_or_else(|e| panic!("{name}: {e}"));
    let (problem, _) = parse_problem(std::str::from_utf8(&bytes).unwrap()).unwrap();
    let sidecar: Sidecar =
        serde_json::from_slice(&std::fs::read(dir.join(format!("{name}.oracle.json"))).unwrap()).unwrap();
    Fixture {
        name: name.to_string(),
        problem,
        sidecar,
        bytes,
    }
}

pub fn load_family(family: Family) -> Vec<Fixture> {
    (0..SEEDS).map(|s| load(&family.name(s))).collect()
}

pub fn hash_of(bytes: &[u8]) -> String {
    content_hash(bytes)
}

pub fn rel_gap(engine: f64, oracle: f64) -> f64 {
    (engine - oracle).abs() / oracle.abs().max(1e-9)
}
