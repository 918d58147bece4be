//! Derivative-free and finite-difference optimizers: a Nelder-Mead simplex search
//! for smooth low-dimensional likelihood surfaces, and a box-constrained augmented
//! Lagrangian method whose inner loop is a spectral projected gradient iteration
//! with forward-difference gradients.

use crate::error::{Error, Result};

/// Tuning knobs for the constrained solver.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOpts {
    /// Projected-gradient infinity-norm tolerance on the augmented Lagrangian.
    pub grad_tol: f64,
    /// Maximum allowed constraint violation at the reported solution.
    pub cons_tol: f64,
    /// Cap on inner (gradient) iterations summed over all outer updates.
    pub max_iter: usize,
    /// Relative forward-difference step.
    pub fd_step: f64,
}

impl Default for SolverOpts {
    fn default() -> Self {
        Self { grad_tol: 1e-5, cons_tol: 1e-6, max_iter: 500, fd_step: 1e-6 }
    }
}

/// Largest constraint value allowed into a multiplier update.
const MULT_CLAMP: f64 = 1e8;

/// Terminal state of a constrained solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    /// Tolerances met.
    Converged,
    /// Iteration budget exhausted with acceptable constraint violation.
    IterationLimit,
    /// No point satisfying the constraints was found.
    Infeasible,
}

/// Best point found by `solve_box_al` and how it was reached.
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub x: Vec<f64>,
    pub objective: f64,
    pub max_violation: f64,
    pub iterations: usize,
    pub status: SolveStatus,
}

/// Minimizes `f` by the Nelder-Mead simplex method starting from `x0` with initial
/// per-coordinate step `step`. Returns the best vertex and its value. Infinite
/// function values act as rejection penalties.
pub fn nelder_mead(
    mut f: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    step: f64,
    max_iter: usize,
) -> (Vec<f64>, f64) {
    let n = x0.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), f(x0)));
    for i in 0..n {
        let mut v = x0.to_vec();
        v[i] += step;
        let fv = f(&v);
        simplex.push((v, fv));
    }
    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    for _ in 0..max_iter {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let spread = simplex[n].1 - simplex[0].1;
        let size: f64 = (0..n)
            .map(|i| (simplex[n].0[i] - simplex[0].0[i]).abs())
            .fold(0.0, f64::max);
        if spread.abs() < 1e-12 * (1.0 + simplex[0].1.abs()) && size < 1e-10 {
            break;
        }
        let centroid: Vec<f64> = (0..n)
            .map(|i| simplex[..n].iter().map(|(v, _)| v[i]).sum::<f64>() / n as f64)
            .collect();
        let worst = simplex[n].clone();
        let reflect: Vec<f64> = (0..n)
            .map(|i| centroid[i] + alpha * (centroid[i] - worst.0[i]))
            .collect();
        let fr = f(&reflect);
        if fr < simplex[0].1 {
            let expand: Vec<f64> = (0..n)
                .map(|i| centroid[i] + gamma * (reflect[i] - centroid[i]))
                .collect();
            let fe = f(&expand);
            simplex[n] = if fe < fr { (expand, fe) } else { (reflect, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (reflect, fr);
        } else {
            let contract: Vec<f64> = (0..n)
                .map(|i| centroid[i] + rho * (worst.0[i] - centroid[i]))
                .collect();
            let fc = f(&contract);
            if fc < worst.1 {
                simplex[n] = (contract, fc);
            } else {
                let best = simplex[0].0.clone();
                for entry in simplex.iter_mut().skip(1) {
                    for i in 0..n {
                        entry.0[i] = best[i] + sigma * (entry.0[i] - best[i]);
                    }
                    entry.1 = f(&entry.0);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex.swap_remove(0)
}

fn project(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lo[i], hi[i]);
    }
}

/// Forward-difference gradient with steps flipped at the upper bound so every
/// evaluation stays inside the box. Non-finite probes are treated as steep walls.
fn fd_gradient(
    merit: &mut impl FnMut(&[f64]) -> f64,
    x: &[f64],
    fx: f64,
    lo: &[f64],
    hi: &[f64],
    rel_step: f64,
) -> Vec<f64> {
    let n = x.len();
    let mut g = vec![0.0; n];
    let mut probe = x.to_vec();
    for i in 0..n {
        let mut h = rel_step * x[i].abs().max(1.0);
        if x[i] + h > hi[i] {
            h = -h;
        }
        if x[i] + h < lo[i] {
            // Degenerate interval, no useful slope information.
            g[i] = 0.0;
            continue;
        }
        probe[i] = x[i] + h;
        let fp = merit(&probe);
        probe[i] = x[i];
        let fp = if fp.is_finite() { fp } else { fx + fx.abs().max(1.0) * 1e6 };
        g[i] = (fp - fx) / h;
    }
    g
}

struct SpgOutcome {
    x: Vec<f64>,
    pg_norm: f64,
    iterations: usize,
}

/// Spectral projected gradient descent on a box with a nonmonotone line search.
fn spg(
    merit: &mut impl FnMut(&[f64]) -> f64,
    x0: Vec<f64>,
    lo: &[f64],
    hi: &[f64],
    tol: f64,
    max_iter: usize,
    rel_step: f64,
) -> SpgOutcome {
    let n = x0.len();
    let mut x = x0;
    project(&mut x, lo, hi);
    let mut fx = merit(&x);
    let mut g = fd_gradient(merit, &x, fx, lo, hi, rel_step);
    let mut alpha = {
        let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if gmax > 0.0 { (1.0 / gmax).clamp(1e-8, 1.0) } else { 1.0 }
    };
    let mut history = vec![fx];
    let mut pg_norm = f64::INFINITY;
    let mut it = 0;
    while it < max_iter {
        // Projected-gradient stationarity measure with unit step.
        pg_norm = (0..n)
            .map(|i| ((x[i] - g[i]).clamp(lo[i], hi[i]) - x[i]).abs())
            .fold(0.0, f64::max);
        if pg_norm <= tol {
            break;
        }
        it += 1;
        let mut d = vec![0.0; n];
        let mut gd = 0.0;
        for i in 0..n {
            d[i] = (x[i] - alpha * g[i]).clamp(lo[i], hi[i]) - x[i];
            gd += g[i] * d[i];
        }
        if gd >= 0.0 {
            // Projection produced no descent direction; the step size is stale.
            alpha = (alpha * 0.1).max(1e-10);
            continue;
        }
        let f_ref = history.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut t = 1.0;
        let mut x_new;
        let mut f_new;
        loop {
            x_new = (0..n).map(|i| x[i] + t * d[i]).collect::<Vec<_>>();
            f_new = merit(&x_new);
            if f_new <= f_ref + 1e-4 * t * gd || t < 1e-10 {
                break;
            }
            t *= 0.5;
        }
        let g_new = fd_gradient(merit, &x_new, f_new, lo, hi, rel_step);
        let mut ss = 0.0;
        let mut sy = 0.0;
        for i in 0..n {
            let s = x_new[i] - x[i];
            ss += s * s;
            sy += s * (g_new[i] - g[i]);
        }
        alpha = if sy > 1e-30 { (ss / sy).clamp(1e-8, 1e8) } else { 1e4 };
        x = x_new;
        fx = f_new;
        g = g_new;
        history.push(fx);
        if history.len() > 10 {
            history.remove(0);
        }
    }
    SpgOutcome { x, pg_norm, iterations: it }
}

/// Minimizes f subject to g_i(x) <= 0 and bounds lo <= x <= hi. `eval` returns the
/// objective together with all constraint values; `n_cons` fixes their count.
/// Multiplier estimates follow the classical augmented Lagrangian update, with the
/// penalty grown whenever the violation fails to contract.
pub fn solve_box_al(
    eval: &mut dyn FnMut(&[f64]) -> (f64, Vec<f64>),
    n_cons: usize,
    x0: &[f64],
    lo: &[f64],
    hi: &[f64],
    opts: &SolverOpts,
) -> Result<SolveReport> {
    let n = x0.len();
    if lo.len() != n || hi.len() != n {
        return Err(Error::Dim("solver bounds must match the decision dimension".into()));
    }
    if lo.iter().zip(hi).any(|(l, h)| l > h) {
        return Err(Error::Invalid("solver bounds are inverted".into()));
    }
    let mut x = x0.to_vec();
    project(&mut x, lo, hi);

    let (f0, g0) = eval(&x);
    if !f0.is_finite() || g0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("objective or constraints non-finite at start".into()));
    }
    if g0.len() != n_cons {
        return Err(Error::Dim(format!("expected {n_cons} constraints, got {}", g0.len())));
    }

    let viol_of = |g: &[f64]| g.iter().fold(0.0f64, |m, &v| m.max(v));
    let mut lambda = vec![0.0f64; n_cons];
    let mut rho = 10.0f64;
    let mut used = 0usize;
    // Seeded with the start point so a warm-started solve never reports a
    // point worse than its warm start.
    let mut best: Option<(Vec<f64>, f64, f64)> = Some((x.clone(), f0, viol_of(&g0).max(0.0)));
    let mut prev_viol = f64::INFINITY;
    let mut last_pg = f64::INFINITY;

    for _outer in 0..20 {
        let inner_cap = (opts.max_iter - used).min((opts.max_iter / 5).max(40));
        if inner_cap == 0 {
            break;
        }
        let mut merit = |p: &[f64]| -> f64 {
            let (f, g) = eval(p);
            if !f.is_finite() {
                return f64::INFINITY;
            }
            let mut m = f;
            for i in 0..n_cons {
                let gi = g[i];
                if !gi.is_finite() {
                    return f64::INFINITY;
                }
                let shifted = lambda[i] + rho * gi;
                if shifted > 0.0 {
                    m += (shifted * shifted - lambda[i] * lambda[i]) / (2.0 * rho);
                } else {
                    m -= lambda[i] * lambda[i] / (2.0 * rho);
                }
            }
            m
        };
        let out = spg(&mut merit, x.clone(), lo, hi, opts.grad_tol, inner_cap, opts.fd_step);
        used += out.iterations.max(1);
        x = out.x;
        last_pg = out.pg_norm;

        let (f, g) = eval(&x);
        let viol = viol_of(&g).max(0.0);
        let improves = match &best {
            None => true,
            Some((_, bf, bv)) => {
                if viol <= opts.cons_tol && *bv <= opts.cons_tol {
                    f < *bf
                } else {
                    viol < *bv
                }
            }
        };
        if improves {
            best = Some((x.clone(), f, viol));
        }
        if viol <= opts.cons_tol && out.pg_norm <= opts.grad_tol {
            // The final round is stationary and feasible; the report still
            // carries the best point seen, which is equal or better.
            let (bx, bf, bv) = best.clone().expect("seeded at the start");
            return Ok(SolveReport {
                x: bx,
                objective: bf,
                max_violation: bv,
                iterations: used,
                status: SolveStatus::Converged,
            });
        }
        for i in 0..n_cons {
            // Rejection plateaus report astronomical violations; feeding those
            // into the multipliers would poison every later merit evaluation.
            lambda[i] = (lambda[i] + rho * g[i].min(MULT_CLAMP)).max(0.0);
        }
        if viol > 0.25 * prev_viol {
            rho = (rho * 8.0).min(1e8);
        }
        prev_viol = viol;
        if used >= opts.max_iter {
            break;
        }
    }

    let (bx, bf, bv) = best.expect("seeded at the start");
    let status = if bv <= opts.cons_tol {
        if last_pg <= opts.grad_tol { SolveStatus::Converged } else { SolveStatus::IterationLimit }
    } else if bv <= 1e3 * opts.cons_tol {
        SolveStatus::IterationLimit
    } else {
        SolveStatus::Infeasible
    };
    Ok(SolveReport { x: bx, objective: bf, max_violation: bv, iterations: used, status })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn nelder_mead_minimizes_quadratic() {
        let (x, f) = nelder_mead(
            |v| (v[0] - 1.3).powi(2) + 2.0 * (v[1] + 0.4).powi(2),
            &[0.0, 0.0],
            0.5,
            500,
        );
        assert!(f < 1e-10);
        assert_relative_eq!(x[0], 1.3, epsilon = 1e-4);
        assert_relative_eq!(x[1], -0.4, epsilon = 1e-4);
    }

    #[test]
    fn nelder_mead_handles_rosenbrock() {
        let (x, _) = nelder_mead(
            |v| (1.0 - v[0]).powi(2) + 100.0 * (v[1] - v[0] * v[0]).powi(2),
            &[-1.2, 1.0],
            0.5,
            4000,
        );
        assert!((x[0] - 1.0).abs() < 1e-3 && (x[1] - 1.0).abs() < 1e-3, "got {x:?}");
    }

    #[test]
    fn nelder_mead_ignores_infinite_regions() {
        let (x, _) = nelder_mead(
            |v| if v[0] < 0.0 { f64::INFINITY } else { (v[0] - 2.0).powi(2) },
            &[0.5],
            0.3,
            300,
        );
        assert!((x[0] - 2.0).abs() < 1e-4);
    }

    #[test]
    fn al_solves_convex_qp_against_analytic_optimum() {
        // min (x1-1)^2 + (x2-1)^2  s.t.  x1 + x2 <= 1, 0 <= x <= 1.
        // KKT: x* = (0.5, 0.5), multiplier 1.
        let mut eval = |x: &[f64]| {
            let f = (x[0] - 1.0).powi(2) + (x[1] - 1.0).powi(2);
            (f, vec![x[0] + x[1] - 1.0])
        };
        let opts = SolverOpts { grad_tol: 1e-8, cons_tol: 1e-9, max_iter: 2000, ..Default::default() };
        let rep =
            solve_box_al(&mut eval, 1, &[0.1, 0.9], &[0.0, 0.0], &[1.0, 1.0], &opts).unwrap();
        assert_eq!(rep.status, SolveStatus::Converged);
        assert!((rep.x[0] - 0.5).abs() < 1e-6 && (rep.x[1] - 0.5).abs() < 1e-6, "{:?}", rep.x);
        assert!(rep.max_violation <= 1e-9);
    }

    #[test]
    fn al_respects_active_bounds() {
        // Unconstrained optimum outside the box; solution must sit on the bound.
        let mut eval = |x: &[f64]| ((x[0] - 3.0).powi(2), vec![]);
        let rep = solve_box_al(&mut eval, 0, &[0.2], &[0.0], &[1.0], &SolverOpts::default())
            .unwrap();
        assert!((rep.x[0] - 1.0).abs() < 1e-8, "{:?}", rep.x);
    }

    #[test]
    fn al_reports_infeasible_when_constraints_conflict() {
        // g requires x >= 2 while the box caps x at 1.
        let mut eval = |x: &[f64]| (x[0] * x[0], vec![2.0 - x[0]]);
        let rep = solve_box_al(&mut eval, 1, &[0.5], &[0.0], &[1.0], &SolverOpts::default())
            .unwrap();
        assert_eq!(rep.status, SolveStatus::Infeasible);
    }

    #[test]
    fn al_rejects_bad_bounds() {
        let mut eval = |x: &[f64]| (x[0], vec![]);
        assert!(solve_box_al(&mut eval, 0, &[0.0], &[1.0], &[0.0], &SolverOpts::default()).is_err());
    }

    #[test]
    fn al_is_deterministic() {
        let mut eval = |x: &[f64]| {
            let f = (x[0] + 0.3).powi(2) * (1.0 + (3.0 * x[1]).sin().powi(2)) + x[1] * x[1];
            (f, vec![-x[0] - x[1]])
        };
        let opts = SolverOpts::default();
        let a = solve_box_al(&mut eval, 1, &[0.4, 0.6], &[-1.0, -1.0], &[1.0, 1.0], &opts).unwrap();
        let b = solve_box_al(&mut eval, 1, &[0.4, 0.6], &[-1.0, -1.0], &[1.0, 1.0], &opts).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.objective, b.objective);
    }
}
