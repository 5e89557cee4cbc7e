//! Per-group convex subproblems and their first-order solver.
//!
//! A subproblem minimizes `1/2 v'Qv + q'v - sum_l w_l ln(a_l'v + eps_l)` over
//! a box, where `Q = rho (A'A + E) + 2 diag(quad)` and `E` is the identity on
//! consensus coordinates. `Q` is never formed for group subproblems; it is
//! applied through the group's equality system.

use crate::canonical::{ConstraintGroup, EqualitySystem, LocalLog};
use crate::model::VariableDomain;

#[derive(Debug, Clone)]
pub enum QuadraticForm<'a> {
    /// `rho (A'A + E) + 2 diag(quad)` with `E = I` on the first `n_consensus` coordinates.
    Structured {
        system: &'a EqualitySystem,
        n_consensus: usize,
        rho: f64,
        quad: &'a [f64],
    },
    /// Explicit row-major symmetric matrix.
    Dense { dim: usize, data: Vec<f64> },
}

impl QuadraticForm<'_> {
    pub fn dim(&self) -> usize {
        match self {
            QuadraticForm::Structured { system, .. } => system.cols(),
            QuadraticForm::Dense { dim, .. } => *dim,
        }
    }

    /// `out = Q v`; `scratch` needs one slot per constraint row.
    pub fn apply(&self, v: &[f64], out: &mut [f64], scratch: &mut Vec<f64>) {
        match self {
            QuadraticForm::Structured {
                system,
                n_consensus,
                rho,
                quad,
            } => {
                scratch.resize(system.rows(), 0.0);
                system.mul(v, scratch);
                for (k, o) in out.iter_mut().enumerate() {
                    let e = if k < *n_consensus { v[k] } else { 0.0 };
                    *o = rho * e + 2.0 * quad[k] * v[k];
                }
                system.mul_t_add(scratch, *rho, out);
            }
            QuadraticForm::Dense { dim, data } => {
                for r in 0..*dim {
                    out[r] = data[r * dim..(r + 1) * dim].iter().zip(v).map(|(a, b)| a * b).sum();
                }
            }
        }
    }

    /// Dense copy of `Q`, for tests and oracles.
    pub fn to_dense(&self) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; d * d];
        let mut e = vec![0.0; d];
        let mut col = vec![0.0; d];
        let mut scratch = Vec::new();
        for c in 0..d {
            e.iter_mut().for_each(|x| *x = 0.0);
            e[c] = 1.0;
            self.apply(&e, &mut col, &mut scratch);
            for r in 0..d {
                out[r * d + c] = col[r];
            }
        }
        out
    }
}

/// One assembled subproblem.
#[derive(Debug, Clone)]
pub struct Subproblem<'a> {
    pub quadratic: QuadraticForm<'a>,
    pub linear: Vec<f64>,
    /// Constant so that `objective` equals the corresponding Lagrangian terms.
    pub constant: f64,
    pub logs: &'a [LocalLog],
    /// Continuous bounds per coordinate (discrete domains are relaxed here).
    pub bounds: Vec<(f64, f64)>,
    pub warm: Vec<f64>,
    /// Estimate of the largest eigenvalue of `Q`; raised by backtracking when too small.
    pub lipschitz: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubsolverStatus {
    Optimal,
    MaxIter,
    Numerical,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubsolverResult {
    pub solution: Vec<f64>,
    pub iterations: usize,
    /// Norm of the composite gradient mapping at the last prox point.
    pub gradient_norm: f64,
    pub status: SubsolverStatus,
}

impl Subproblem<'_> {
    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    /// Objective value, `+inf` if a log argument is nonpositive.
    pub fn objective(&self, v: &[f64]) -> f64 {
        let mut qv = vec![0.0; v.len()];
        self.quadratic.apply(v, &mut qv, &mut Vec::new());
        self.objective_with(v, &qv)
    }

    fn objective_with(&self, v: &[f64], qv: &[f64]) -> f64 {
        let mut s = self.constant;
        for k in 0..v.len() {
            s += 0.5 * v[k] * qv[k] + self.linear[k] * v[k];
        }
        s + log_penalty(self.logs, v)
    }
}

fn log_penalty(logs: &[LocalLog], v: &[f64]) -> f64 {
    let mut s = 0.0;
    for l in logs {
        let arg = l.coefs.iter().map(|&(k, a)| a * v[k]).sum::<f64>() + l.floor;
        if arg <= 0.0 {
            return f64::INFINITY;
        }
        s -= l.weight * arg.ln();
    }
    s
}

/// Largest eigenvalue of `A'A + E` by 20 power-iteration steps.
pub fn gram_spectral_estimate(system: &EqualitySystem, n_consensus: usize) -> f64 {
    let d = system.cols();
    if d == 0 {
        return 0.0;
    }
    let quad = vec![0.0; d];
    let form = QuadraticForm::Structured {
        system,
        n_consensus,
        rho: 1.0,
        quad: &quad,
    };
    // deterministic, non-symmetric start so no eigenvector is missed by accident
    let mut v: Vec<f64> = (0..d).map(|k| 1.0 + 0.1 * ((k * 7919) % 13) as f64).collect();
    let mut w = vec![0.0; d];
    let mut scratch = Vec::new();
    let mut est = 0.0;
    for _ in 0..20 {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        form.apply(&v, &mut w, &mut scratch);
        est = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        std::mem::swap(&mut v, &mut w);
    }
    // never below the largest diagonal entry
    let mut diag_max: f64 = 0.0;
    let mut e = vec![0.0; d];
    for c in 0..d {
        e[c] = 1.0;
        form.apply(&e, &mut w, &mut scratch);
        diag_max = diag_max.max(w[c]);
        e[c] = 0.0;
    }
    est.max(diag_max)
}

/// Builds the subproblem for `group` around `target` (`z - lambda` on the
/// resource side, `x + lambda` on the demand side).
///
/// `dual` is the group's scaled constraint dual and `lambda_max` the cached
/// spectral estimate of `A'A + E`.
pub fn assemble<'a>(
    group: &'a ConstraintGroup,
    target: &[f64],
    dual: &[f64],
    rho: f64,
    warm: Vec<f64>,
    lambda_max: f64,
) -> Subproblem<'a> {
    let d = group.dim();
    let nc = group.coords.len();
    let mut linear = group.objective.linear.clone();
    let shifted: Vec<f64> = dual.iter().zip(&group.rhs).map(|(u, b)| u - b).collect();
    group.system.mul_t_add(&shifted, rho, &mut linear);
    for k in 0..nc {
        linear[k] -= rho * target[k];
    }
    let constant = 0.5 * rho * (shifted.iter().map(|s| s * s).sum::<f64>() + target.iter().map(|t| t * t).sum::<f64>());
    let quad_max = group.objective.quadratic.iter().cloned().fold(0.0, f64::max);
    Subproblem {
        quadratic: QuadraticForm::Structured {
            system: &group.system,
            n_consensus: nc,
            rho,
            quad: &group.objective.quadratic,
        },
        linear,
        constant,
        logs: &group.objective.logs,
        bounds: group.domains.iter().map(|dm| dm.bounds()).collect(),
        warm,
        lipschitz: rho * lambda_max + 2.0 * quad_max,
    }
    .with_dim_check(d)
}

impl<'a> Subproblem<'a> {
    fn with_dim_check(self, d: usize) -> Self {
        debug_assert_eq!(self.linear.len(), d);
        debug_assert_eq!(self.warm.len(), d);
        self
    }

    /// Subproblem over an explicit dense `Q` (tests and oracles).
    pub fn dense(q: Vec<f64>, linear: Vec<f64>, bounds: Vec<(f64, f64)>, logs: &'a [LocalLog]) -> Self {
        let d = linear.len();
        // Gershgorin bound
        let lipschitz = (0..d)
            .map(|r| q[r * d..(r + 1) * d].iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max);
        let warm = bounds.iter().map(|&(lo, hi)| 0.0f64.clamp(lo, hi)).collect();
        Subproblem {
            quadratic: QuadraticForm::Dense { dim: d, data: q },
            linear,
            constant: 0.0,
            logs,
            bounds,
            warm,
            lipschitz,
        }
    }
}

/// Proximal map of `tau * (log penalty) + indicator(bounds)` at `u`, in place.
fn prox(u: &mut [f64], tau: f64, logs: &[LocalLog], bounds: &[(f64, f64)]) {
    let mut in_log = vec![false; u.len()];
    for l in logs {
        for &(k, _) in &l.coefs {
            in_log[k] = true;
        }
    }
    for l in logs {
        log_prox(u, tau * l.weight, l, bounds);
    }
    for (k, x) in u.iter_mut().enumerate() {
        if !in_log[k] {
            let (lo, hi) = bounds[k];
            *x = x.clamp(lo, hi);
        }
    }
}

/// Solves `min 1/2 |v - u|^2 - tw ln(a'v + eps)` over the box on the log's
/// support: `v = clamp(u + mu a)` with `mu (a'v(mu) + eps) = tw`.
fn log_prox(u: &mut [f64], tw: f64, l: &LocalLog, bounds: &[(f64, f64)]) {
    let point = |mu: f64, k: usize, a: f64, u: &[f64]| (u[k] + mu * a).clamp(bounds[k].0, bounds[k].1);
    let arg = |mu: f64, u: &[f64]| l.coefs.iter().map(|&(k, a)| a * point(mu, k, a, u)).sum::<f64>() + l.floor;
    let c = l.coefs.iter().map(|&(k, a)| a * u[k]).sum::<f64>() + l.floor;
    let a2: f64 = l.coefs.iter().map(|&(_, a)| a * a).sum();
    // closed form when no bound binds
    let s = 0.5 * (c + (c * c + 4.0 * tw * a2).sqrt());
    let mut mu = if a2 > 0.0 { (s - c) / a2 } else { 0.0 };
    let unbounded_ok = l.coefs.iter().all(|&(k, a)| {
        let v = u[k] + mu * a;
        v >= bounds[k].0 && v <= bounds[k].1
    });
    if !unbounded_ok {
        // g(mu) = mu * arg(mu) - tw is increasing for mu > 0; safeguarded Newton
        let g = |mu: f64, u: &[f64]| mu * arg(mu, u) - tw;
        let mut lo = 0.0;
        let mut hi = mu.max(1e-12);
        while g(hi, u) < 0.0 {
            lo = hi;
            hi *= 2.0;
            if hi > 1e300 {
                break;
            }
        }
        mu = 0.5 * (lo + hi);
        for _ in 0..30 {
            let val = g(mu, u);
            if val.abs() <= 1e-12 * tw.max(1.0) {
                break;
            }
            if val > 0.0 {
                hi = mu;
            } else {
                lo = mu;
            }
            // derivative: arg + mu * sum over free coordinates of a^2
            let free: f64 = l
                .coefs
                .iter()
                .filter(|&&(k, a)| {
                    let v = u[k] + mu * a;
                    v > bounds[k].0 && v < bounds[k].1
                })
                .map(|&(_, a)| a * a)
                .sum();
            let deriv = arg(mu, u) + mu * free;
            let newton = if deriv > 0.0 { mu - val / deriv } else { f64::NAN };
            mu = if newton.is_finite() && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
        }
    }
    let vals: Vec<(usize, f64)> = l.coefs.iter().map(|&(k, a)| (k, point(mu, k, a, u))).collect();
    for (k, v) in vals {
        u[k] = v;
    }
}

/// Monotone accelerated proximal gradient with restart.
///
/// Terminates when the composite gradient mapping `L |y - prox(y)|` drops
/// below `tol`. A warm start that already meets `tol` is returned unchanged
/// with zero iterations.
pub fn solve_subproblem(sp: &Subproblem, tol: f64, max_iter: usize) -> SubsolverResult {
    let d = sp.dim();
    let mut scratch = Vec::new();
    let mut lip = sp.lipschitz.max(1e-12);

    let mut x: Vec<f64> = sp.warm.clone();
    for (v, &(lo, hi)) in x.iter_mut().zip(&sp.bounds) {
        *v = v.clamp(lo, hi);
    }
    let mut qx = vec![0.0; d];
    sp.quadratic.apply(&x, &mut qx, &mut scratch);
    let mut fx = sp.objective_with(&x, &qx);
    if !fx.is_finite() {
        // start from the prox of the warm point so log arguments are positive
        prox(&mut x, 1.0 / lip, sp.logs, &sp.bounds);
        sp.quadratic.apply(&x, &mut qx, &mut scratch);
        fx = sp.objective_with(&x, &qx);
    }
    let mut x_prev = x.clone();
    let mut qx_prev = qx.clone();
    let mut y = x.clone();
    let mut qy = qx.clone();
    let mut t = 1.0f64;

    let mut p = vec![0.0; d];
    let mut qp = vec![0.0; d];
    let mut last_gm = f64::INFINITY;

    for k in 0..max_iter {
        let gm;
        loop {
            for i in 0..d {
                p[i] = y[i] - (qy[i] + sp.linear[i]) / lip;
            }
            prox(&mut p, 1.0 / lip, sp.logs, &sp.bounds);
            sp.quadratic.apply(&p, &mut qp, &mut scratch);
            let mut dqd = 0.0;
            let mut dd = 0.0;
            for i in 0..d {
                let di = p[i] - y[i];
                dqd += di * (qp[i] - qy[i]);
                dd += di * di;
            }
            if dqd <= lip * dd * (1.0 + 1e-10) + 1e-300 {
                gm = lip * dd.sqrt();
                break;
            }
            lip *= 2.0;
        }
        last_gm = gm;
        if !gm.is_finite() {
            return SubsolverResult {
                solution: x,
                iterations: k,
                gradient_norm: gm,
                status: SubsolverStatus::Numerical,
            };
        }
        if k == 0 && gm <= tol {
            return SubsolverResult {
                solution: x,
                iterations: 0,
                gradient_norm: gm,
                status: SubsolverStatus::Optimal,
            };
        }
        let fp = sp.objective_with(&p, &qp);
        let improved = fp <= fx;
        if gm <= tol {
            let solution = if improved { p.clone() } else { x.clone() };
            return SubsolverResult {
                solution,
                iterations: k + 1,
                gradient_norm: gm,
                status: SubsolverStatus::Optimal,
            };
        }
        // gradient restart test on iterates only; objective values near the
        // optimum are dominated by round-off
        let mut uphill = 0.0;
        for i in 0..d {
            uphill += (y[i] - p[i]) * (p[i] - x[i]);
        }
        std::mem::swap(&mut x_prev, &mut x);
        std::mem::swap(&mut qx_prev, &mut qx);
        if improved {
            x.copy_from_slice(&p);
            qx.copy_from_slice(&qp);
            fx = fp;
        } else {
            x.copy_from_slice(&x_prev);
            qx.copy_from_slice(&qx_prev);
        }
        if uphill > 0.0 {
            y.copy_from_slice(&x);
            qy.copy_from_slice(&qx);
            t = 1.0;
        } else {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let a = t / t_next;
            let b = (t - 1.0) / t_next;
            for i in 0..d {
                y[i] = x[i] + a * (p[i] - x[i]) + b * (x[i] - x_prev[i]);
                qy[i] = qx[i] + a * (qp[i] - qx[i]) + b * (qx[i] - qx_prev[i]);
            }
            t = t_next;
        }
    }
    SubsolverResult {
        solution: x,
        iterations: max_iter,
        gradient_norm: last_gm,
        status: SubsolverStatus::MaxIter,
    }
}

/// Projects each coordinate onto its domain: clamp for continuous domains,
/// round-then-clamp for integer boxes, threshold at 0.5 for booleans.
pub fn project_domain(v: &[f64], domains: &[VariableDomain]) -> Vec<f64> {
    v.iter().zip(domains).map(|(&x, d)| project_scalar(x, d)).collect()
}

pub fn project_scalar(x: f64, d: &VariableDomain) -> f64 {
    match *d {
        VariableDomain::Boolean => {
            if x >= 0.5 {
                1.0
            } else {
                0.0
            }
        }
        VariableDomain::IntegerBox { lo, hi } => x.round().clamp(lo as f64, hi as f64),
        _ => {
            let (lo, hi) = d.bounds();
            x.clamp(lo, hi)
        }
    }
}
