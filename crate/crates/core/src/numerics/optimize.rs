//! Unconstrained minimization: BFGS with central finite-difference gradients,
//! backtracking line search, a short Newton polish, and a finite-difference
//! Hessian at the optimum whose eigenvalue-floored inverse doubles as the
//! sampling covariance of a maximum-likelihood fit.

use super::matrix::{nearest_psd, SpdMatrix, PSD_EIGEN_FLOOR};
use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct MinimizeOptions {
    pub max_iter: usize,
    /// Convergence when ||grad|| <= grad_tol * max(1, |f|).
    pub grad_tol: f64,
    /// Newton polish rounds after BFGS terminates (tightens the optimum so
    /// results do not depend on summation order noise in the objective).
    pub polish_rounds: usize,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            grad_tol: 1e-6,
            polish_rounds: 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MinimizeResult {
    pub x: DVector<f64>,
    pub objective: f64,
    /// Inverse of the finite-difference Hessian at `x` (the negative-Hessian
    /// inverse of a maximized log-likelihood), eigenvalue-floored to PSD.
    pub vcov: SpdMatrix,
    pub converged: bool,
    pub iterations: usize,
    /// True when the Hessian needed eigenvalue repair before inversion.
    pub hessian_repaired: bool,
}

const GRAD_STEP: f64 = 6e-6;

fn fd_gradient<F: Fn(&DVector<f64>) -> f64>(f: &F, x: &DVector<f64>) -> DVector<f64> {
    let d = x.len();
    let mut g = DVector::zeros(d);
    let mut xp = x.clone();
    for i in 0..d {
        let h = GRAD_STEP * x[i].abs().max(1.0);
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Central-difference Hessian with step max(1e-5, 1e-5*|x_i|).
pub fn fd_hessian<F: Fn(&DVector<f64>) -> f64>(f: &F, x: &DVector<f64>) -> DMatrix<f64> {
    let d = x.len();
    let f0 = f(x);
    let step = |i: usize| 1e-5f64.max(1e-5 * x[i].abs());
    let mut h = DMatrix::zeros(d, d);
    let mut xp = x.clone();
    for i in 0..d {
        let hi = step(i);
        xp[i] = x[i] + hi;
        let fp = f(&xp);
        xp[i] = x[i] - hi;
        let fm = f(&xp);
        xp[i] = x[i];
        h[(i, i)] = (fp - 2.0 * f0 + fm) / (hi * hi);
        for j in (i + 1)..d {
            let hj = step(j);
            xp[i] = x[i] + hi;
            xp[j] = x[j] + hj;
            let fpp = f(&xp);
            xp[j] = x[j] - hj;
            let fpm = f(&xp);
            xp[i] = x[i] - hi;
            let fmm = f(&xp);
            xp[j] = x[j] + hj;
            let fmp = f(&xp);
            xp[i] = x[i];
            xp[j] = x[j];
            let v = (fpp - fpm - fmp + fmm) / (4.0 * hi * hj);
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    h
}

/// Invert a symmetric matrix through its eigenvalue-floored decomposition.
fn floored_inverse(h: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let sym = 0.5 * (h + h.transpose());
    let eig = sym.symmetric_eigen();
    let repaired = eig.eigenvalues.iter().any(|&l| l < PSD_EIGEN_FLOOR);
    let inv_vals = eig.eigenvalues.map(|l| 1.0 / l.max(PSD_EIGEN_FLOOR));
    let mut scaled = eig.eigenvectors.clone();
    for j in 0..scaled.ncols() {
        for i in 0..scaled.nrows() {
            scaled[(i, j)] *= inv_vals[j];
        }
    }
    let mut out = scaled * eig.eigenvectors.transpose();
    for i in 0..out.nrows() {
        for j in (i + 1)..out.ncols() {
            let s = 0.5 * (out[(i, j)] + out[(j, i)]);
            out[(i, j)] = s;
            out[(j, i)] = s;
        }
    }
    (out, repaired)
}

/// Backtracking Armijo line search. Non-finite objective values reject the
/// trial point. Returns the accepted (step, x, f) or None.
fn line_search<F: Fn(&DVector<f64>) -> f64>(
    f: &F,
    x: &DVector<f64>,
    fx: f64,
    dir: &DVector<f64>,
    slope: f64,
) -> Option<(DVector<f64>, f64)> {
    let mut t = 1.0;
    for _ in 0..60 {
        let xt = x + dir * t;
        let ft = f(&xt);
        if ft.is_finite() && ft <= fx + 1e-4 * t * slope {
            return Some((xt, ft));
        }
        t *= 0.5;
    }
    None
}

pub fn minimize<F: Fn(&DVector<f64>) -> f64>(
    f: F,
    x0: &DVector<f64>,
    opts: &MinimizeOptions,
) -> MinimizeResult {
    let d = x0.len();
    let mut x = x0.clone();
    let mut fx = f(&x);
    let fail = |x: DVector<f64>, fx: f64, iters: usize| MinimizeResult {
        vcov: SpdMatrix::identity(x.len()),
        x,
        objective: fx,
        converged: false,
        iterations: iters,
        hessian_repaired: true,
    };
    if !fx.is_finite() {
        return fail(x, fx, 0);
    }

    let mut g = fd_gradient(&f, &x);
    let mut h_inv = DMatrix::<f64>::identity(d, d);
    let mut converged = false;
    let mut iterations = 0;

    for iter in 0..opts.max_iter {
        iterations = iter;
        if !g.iter().all(|v| v.is_finite()) {
            return fail(x, fx, iter);
        }
        if g.norm() <= opts.grad_tol * fx.abs().max(1.0) {
            converged = true;
            break;
        }

        let mut dir = -(&h_inv * &g);
        let mut slope = dir.dot(&g);
        if slope >= 0.0 {
            // stale curvature; restart from steepest descent
            h_inv = DMatrix::identity(d, d);
            dir = -g.clone();
            slope = dir.dot(&g);
        }

        let step = match line_search(&f, &x, fx, &dir, slope) {
            Some(s) => Some(s),
            None => {
                // retry once along the raw gradient before giving up
                h_inv = DMatrix::identity(d, d);
                let dir2 = -g.clone();
                let slope2 = dir2.dot(&g);
                line_search(&f, &x, fx, &dir2, slope2)
            }
        };
        let Some((x_new, f_new)) = step else {
            break;
        };

        let g_new = fd_gradient(&f, &x_new);
        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-10 * s.norm() * y.norm() {
            // standard BFGS inverse update
            let rho = 1.0 / sy;
            let hy = &h_inv * &y;
            let yhy = y.dot(&hy);
            h_inv += (sy + yhy) * rho * rho * (&s * s.transpose())
                - rho * (&hy * s.transpose() + &s * hy.transpose());
        }
        x = x_new;
        fx = f_new;
        g = g_new;
    }

    // Newton polish against the finite-difference Hessian.
    for _ in 0..opts.polish_rounds {
        let g_cur = fd_gradient(&f, &x);
        if !g_cur.iter().all(|v| v.is_finite()) {
            break;
        }
        let h = fd_hessian(&f, &x);
        let (h_invm, _) = floored_inverse(&h);
        let dir = -(&h_invm * &g_cur);
        if !dir.iter().all(|v| v.is_finite()) || dir.norm() <= 1e-10 * (1.0 + x.norm()) {
            break;
        }
        let slope = dir.dot(&g_cur);
        match line_search(&f, &x, fx, &dir, slope.min(0.0)) {
            Some((x_new, f_new)) => {
                x = x_new;
                fx = f_new;
            }
            None => break,
        }
    }

    let g_final = fd_gradient(&f, &x);
    if g_final.iter().all(|v| v.is_finite())
        && g_final.norm() <= opts.grad_tol * fx.abs().max(1.0)
    {
        converged = true;
    }

    let hessian = fd_hessian(&f, &x);
    let (vcov_raw, repaired) = floored_inverse(&hessian);
    if repaired {
        log::debug!("indefinite Hessian at optimum; eigenvalues floored before inversion");
    }
    let vcov = nearest_psd(&vcov_raw).unwrap_or_else(|_| SpdMatrix::identity(d));
    MinimizeResult {
        x,
        objective: fx,
        vcov,
        converged,
        iterations,
        hessian_repaired: repaired,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_recovers_minimum_and_curvature() {
        let f = |x: &DVector<f64>| (x[0] - 3.0) * (x[0] - 3.0);
        let res = minimize(f, &DVector::from_column_slice(&[0.0]), &MinimizeOptions::default());
        assert!(res.converged);
        assert!((res.x[0] - 3.0).abs() < 1e-7);
        // curvature 2 => inverse variance 0.5
        assert!((res.vcov.as_matrix()[(0, 0)] - 0.5).abs() < 1e-5);
        assert!(!res.hessian_repaired);
    }

    #[test]
    fn rosenbrock_from_standard_start() {
        let f = |x: &DVector<f64>| {
            let (a, b) = (x[0], x[1]);
            100.0 * (b - a * a) * (b - a * a) + (1.0 - a) * (1.0 - a)
        };
        let res = minimize(
            f,
            &DVector::from_column_slice(&[-1.2, 1.0]),
            &MinimizeOptions::default(),
        );
        assert!(res.converged, "iterations: {}", res.iterations);
        assert!((res.x[0] - 1.0).abs() < 1e-4 && (res.x[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn iteration_cap_reports_best_iterate_not_converged() {
        let f = |x: &DVector<f64>| {
            let (a, b) = (x[0], x[1]);
            100.0 * (b - a * a) * (b - a * a) + (1.0 - a) * (1.0 - a)
        };
        let opts = MinimizeOptions {
            max_iter: 2,
            polish_rounds: 0,
            ..Default::default()
        };
        let start = DVector::from_column_slice(&[-1.2, 1.0]);
        let res = minimize(f, &start, &opts);
        assert!(!res.converged);
        assert!(res.objective < f(&start));
    }

    #[test]
    fn non_finite_start_fails_cleanly() {
        let f = |_: &DVector<f64>| f64::NAN;
        let res = minimize(f, &DVector::from_column_slice(&[1.0]), &MinimizeOptions::default());
        assert!(!res.converged);
    }

    #[test]
    fn indefinite_regions_are_backtracked_around() {
        // objective undefined (NaN) for x < 0; minimum at x = 0.25
        let f = |x: &DVector<f64>| {
            if x[0] < 0.0 {
                f64::NAN
            } else {
                (x[0] - 0.25) * (x[0] - 0.25)
            }
        };
        let res = minimize(f, &DVector::from_column_slice(&[2.0]), &MinimizeOptions::default());
        assert!(res.converged);
        assert!((res.x[0] - 0.25).abs() < 1e-6);
    }
}
