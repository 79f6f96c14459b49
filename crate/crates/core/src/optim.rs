//! Quasi-Newton maximization and finite-difference curvature.

use nalgebra::{DMatrix, DVector};

/// A function to be maximized. `value` may return `-inf` outside the domain.
pub trait Objective {
    fn value(&self, x: &[f64]) -> f64;

    /// Gradient of `value`; central differences unless overridden.
    fn gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
        central_gradient(|y| self.value(y), x)
    }
}

impl<F: Fn(&[f64]) -> f64> Objective for F {
    fn value(&self, x: &[f64]) -> f64 {
        self(x)
    }
}

pub fn central_gradient<F: Fn(&[f64]) -> f64>(f: F, x: &[f64]) -> Option<Vec<f64>> {
    let mut y = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        let h = 1e-6 * x[j].abs().max(1.0);
        y[j] = x[j] + h;
        let fp = f(&y);
        y[j] = x[j] - h;
        let fm = f(&y);
        y[j] = x[j];
        if !(fp.is_finite() && fm.is_finite()) {
            return None;
        }
        g.push((fp - fm) / (2.0 * h));
    }
    Some(g)
}

#[derive(Debug, Clone, Copy)]
pub struct OptimOptions {
    pub max_iter: usize,
    /// Stop when `max |g_j| <= grad_tol * max(1, |f|)`.
    pub grad_tol: f64,
    /// Scaled gradient level below which a stalled run still counts as converged.
    pub accept_tol: f64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        Self { max_iter: 500, grad_tol: 1e-10, accept_tol: 1e-5 }
    }
}

#[derive(Debug, Clone)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    /// Scaled gradient norm at the returned point.
    pub scaled_gradient: f64,
    pub converged: bool,
}

fn scaled_norm(g: &[f64], f: f64) -> f64 {
    g.iter().fold(0.0f64, |m, v| m.max(v.abs())) / f.abs().max(1.0)
}

/// BFGS with a backtracking Armijo line search.
pub fn maximize<O: Objective + ?Sized>(obj: &O, x0: &[f64], opts: &OptimOptions) -> OptimResult {
    let n = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let mut f = obj.value(x.as_slice());
    let fail = |x: DVector<f64>, f: f64, iterations| OptimResult {
        x: x.as_slice().to_vec(),
        value: f,
        gradient: vec![f64::NAN; n],
        iterations,
        scaled_gradient: f64::INFINITY,
        converged: false,
    };
    if !f.is_finite() {
        return fail(x, f, 0);
    }
    let Some(g0) = obj.gradient(x.as_slice()) else {
        return fail(x, f, 0);
    };
    // work with the minimization of -f
    let mut g = -DVector::from_vec(g0);
    let mut hinv = DMatrix::<f64>::identity(n, n);
    let mut first = true;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        if scaled_norm(g.as_slice(), f) <= opts.grad_tol {
            break;
        }
        iterations += 1;
        let mut dir = -(&hinv * &g);
        let mut slope = g.dot(&dir);
        if !(slope < 0.0) {
            hinv = DMatrix::identity(n, n);
            dir = -g.clone();
            slope = g.dot(&dir);
        }
        let mut step = if first { (1.0 / g.amax()).min(1.0) } else { 1.0 };
        let mut accepted = None;
        for _ in 0..60 {
            let xn = &x + &dir * step;
            let fnew = obj.value(xn.as_slice());
            if fnew.is_finite() && -fnew <= -f + 1e-4 * step * slope {
                accepted = Some((xn, fnew));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fnew)) = accepted else { break };
        let Some(gn) = obj.gradient(xn.as_slice()) else { break };
        let gn = -DVector::from_vec(gn);
        let s = &xn - &x;
        let y = &gn - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if first {
                hinv *= sy / y.dot(&y);
            }
            let rho = 1.0 / sy;
            let hy = &hinv * &y;
            let yhy = y.dot(&hy);
            hinv += (&s * s.transpose()) * ((1.0 + rho * yhy) * rho) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
            first = false;
        }
        let stalled = (f - fnew).abs() <= 1e-15 * f.abs().max(1.0) && s.amax() <= 1e-15 * x.amax().max(1.0);
        x = xn;
        f = fnew;
        g = gn;
        if stalled {
            break;
        }
    }
    let sg = scaled_norm(g.as_slice(), f);
    OptimResult {
        x: x.as_slice().to_vec(),
        value: f,
        gradient: (-g).as_slice().to_vec(),
        iterations,
        scaled_gradient: sg,
        converged: sg <= opts.accept_tol,
    }
}

/// Hessian of `f` at `x` by central differences with steps
/// `rel_step * max(|x_j|, 1)`, symmetrized.
pub fn fd_hessian<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], rel_step: f64) -> DMatrix<f64> {
    let n = x.len();
    let h: Vec<f64> = x.iter().map(|v| rel_step * v.abs().max(1.0)).collect();
    let f0 = f(x);
    let mut y = x.to_vec();
    let mut eval = |deltas: &[(usize, f64)]| {
        y.copy_from_slice(x);
        for &(j, d) in deltas {
            y[j] += d;
        }
        f(&y)
    };
    let mut hess = DMatrix::zeros(n, n);
    for i in 0..n {
        let fp = eval(&[(i, h[i])]);
        let fm = eval(&[(i, -h[i])]);
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h[i] * h[i]);
        for j in 0..i {
            let fpp = eval(&[(i, h[i]), (j, h[j])]);
            let fpm = eval(&[(i, h[i]), (j, -h[j])]);
            let fmp = eval(&[(i, -h[i]), (j, h[j])]);
            let fmm = eval(&[(i, -h[i]), (j, -h[j])]);
            let v = (fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    (&hess + hess.transpose()) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock_maximum() {
        let f = |x: &[f64]| -((1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2));
        let r = maximize(&f, &[-1.2, 1.0], &OptimOptions::default());
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-5 && (r.x[1] - 1.0).abs() < 1e-5, "{:?}", r.x);
    }

    #[test]
    fn hessian_of_quadratic_is_exact() {
        let f = |x: &[f64]| -(2.0 * x[0] * x[0] + x[0] * x[1] + 3.0 * x[1] * x[1]);
        let h = fd_hessian(f, &[0.3, -0.7], 1e-4);
        let expected = DMatrix::from_row_slice(2, 2, &[-4.0, -1.0, -1.0, -6.0]);
        assert!((h - expected).abs().max() < 1e-6);
    }

    #[test]
    fn infeasible_start_does_not_converge() {
        let f = |_: &[f64]| f64::NEG_INFINITY;
        assert!(!maximize(&f, &[0.0], &OptimOptions::default()).converged);
    }
}
