use dede_core::model::ProblemSpec;
use dede_core::oracle::{brute_force_milp, projected_gradient_solve, solve_lp_problem, LpStatus, OracleError};

/// Reference optimum from whichever oracle fits the problem, or `None` when
/// the problem is too large for any of them.
pub fn reference_objective(problem: &ProblemSpec, limit: usize) -> Option<f64> {
    let entries = (0..problem.n_resources())
        .flat_map(|i| (0..problem.n_demands()).map(move |j| (i, j)))
        .filter(|&(i, j)| problem.is_active(i, j))
        .count();
    if entries > limit {
        return None;
    }
    if problem.has_discrete() {
        return brute_force_milp(problem)
            .ok()
            .filter(|r| r.allocation.is_some())
            .map(|r| r.objective);
    }
    match solve_lp_problem(problem) {
        Ok((LpStatus::Optimal, _, objective)) => Some(objective),
        Ok(_) => None,
        Err(OracleError::NonLinear(_)) => Some(projected_gradient_solve(problem, 1e-8, 5000).objective),
        Err(_) => None,
    }
}
