//! The cached fixture suite: regeneration and consistency with the generators
//! and the LP oracle.
//!
//! Regenerate with `DEDE_REGEN_FIXTURES=1 cargo test -p dede-core --test fixtures -- --ignored`.

mod common;

use common::{data_dir, hash_of, load, Family, Sidecar, FAMILIES, SEEDS};
use dede_core::oracle::{solve_lp_problem, LpStatus};

const ORACLE_TOL: f64 = 1e-9;

#[test]
#[ignore]
fn regenerate_fixtures() {
    if std::env::var("DEDE_REGEN_FIXTURES").is_err() {
        return;
    }
    let dir = data_dir();
    std::fs::create_dir_all(&dir).unwrap();
    for family in FAMILIES {
        for seed in 0..SEEDS {
            let name = family.name(seed);
            let (problem, text) = family.generate(seed);
            let (status, _, objective) = solve_lp_problem(&problem).unwrap();
            assert_eq!(status, LpStatus::Optimal, "{name}");
            let sidecar = Sidecar {
                instance_hash: hash_of(text.as_bytes()),
                objective,
                solver: "oracle".into(),
                tol: ORACLE_TOL,
            };
            std::fs::write(dir.join(format!("{name}.json")), &text).unwrap();
            std::fs::write(
                dir.join(format!("{name}.oracle.json")),
                serde_json::to_string_pretty(&sidecar).unwrap() + "\n",
            )
            .unwrap();
        }
    }
}

#[test]
fn fixtures_match_generators_and_hashes() {
    for family in FAMILIES {
        for seed in 0..SEEDS {
            let f = load(&family.name(seed));
            assert_eq!(f.sidecar.instance_hash, hash_of(&f.bytes), "{}", f.name);
            assert_eq!(f.sidecar.solver, "oracle");
            let (problem, text) = family.generate(seed);
            assert_eq!(text.as_bytes(), &f.bytes[..], "{} drifted from its generator", f.name);
            assert_eq!(problem, f.problem);
        }
    }
}

#[test]
fn cached_optima_match_the_oracle() {
    for family in FAMILIES {
        // every fifth seed keeps this quick; the full sweep runs on regeneration
        for seed in (0..SEEDS).step_by(5) {
            let f = load(&family.name(seed));
            let (status, x, objective) = solve_lp_problem(&f.problem).unwrap();
            assert_eq!(status, LpStatus::Optimal);
            assert!(
                (objective - f.sidecar.objective).abs() <= f.sidecar.tol * (1.0 + objective.abs()),
                "{}: {objective} vs cached {}",
                f.name,
                f.sidecar.objective
            );
            assert!(f.problem.check_feasibility(&x, 1e-7).unwrap().feasible, "{}", f.name);
        }
    }
}

#[test]
fn min_mlu_fixtures_are_scaled_below_saturation() {
    for seed in 0..SEEDS {
        let f = load(&Family::TeMinMlu.name(seed));
        assert!(f.sidecar.objective > 0.0 && f.sidecar.objective <= 0.9 + 1e-9, "{}", f.name);
    }
}
