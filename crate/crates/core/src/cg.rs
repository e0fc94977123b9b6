//! Conjugate gradient for symmetric positive-definite systems.

/// Result of a single CG solve.
#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub solution: Vec<f64>,
    pub iterations: usize,
    /// `||b - A x|| / ||b||`, recomputed from the final iterate.
    pub relative_residual: f64,
    pub converged: bool,
}

/// Solves `A x = b` from a zero initial guess, without preconditioning.
///
/// `apply(x, out)` must write `A x` into `out`. Convergence is declared on
/// the recursively updated residual and then confirmed against the true
/// residual; if rounding made the two drift apart the iteration restarts
/// from the current iterate.
pub fn conjugate_gradient<F>(apply: F, b: &[f64], tol: f64, max_iter: usize) -> CgOutcome
where
    F: Fn(&[f64], &mut [f64]),
{
    let n = b.len();
    let b_norm = norm(b);
    let mut x = vec![0.0; n];
    if b_norm == 0.0 {
        return CgOutcome { solution: x, iterations: 0, relative_residual: 0.0, converged: true };
    }
    let target = tol * b_norm;

    let mut ap = vec![0.0; n];
    let mut r = b.to_vec();
    let mut iterations = 0;

    loop {
        let mut p = r.clone();
        let mut rs_old = dot(&r, &r);
        while rs_old.sqrt() > target && iterations < max_iter {
            apply(&p, &mut ap);
            let pap = dot(&p, &ap);
            if pap <= 0.0 {
                // Not positive definite along p; nothing sensible left to do.
                break;
            }
            let step = rs_old / pap;
            for i in 0..n {
                x[i] += step * p[i];
                r[i] -= step * ap[i];
            }
            let rs_new = dot(&r, &r);
            let beta = rs_new / rs_old;
            for i in 0..n {
                p[i] = r[i] + beta * p[i];
            }
            rs_old = rs_new;
            iterations += 1;
        }

        apply(&x, &mut ap);
        for i in 0..n {
            r[i] = b[i] - ap[i];
        }
        let true_res = norm(&r);
        if true_res <= target || iterations >= max_iter || rs_old.sqrt() > target {
            return CgOutcome {
                solution: x,
                iterations,
                relative_residual: true_res / b_norm,
                converged: true_res <= target,
            };
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
