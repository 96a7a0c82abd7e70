//! Small dense Levenberg–Marquardt used by the minimal-problem refiners.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy)]
pub(crate) struct LmOptions {
    pub max_iterations: usize,
    pub relative_tolerance: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            relative_tolerance: 1e-12,
        }
    }
}

pub(crate) fn numeric_jacobian<F>(f: &F, x: &DVector<f64>, r0_len: usize) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let mut jac = DMatrix::zeros(r0_len, x.len());
    let mut xp = x.clone();
    for c in 0..x.len() {
        let h = 1e-7 * x[c].abs().max(1.0);
        xp[c] = x[c] + h;
        let fp = f(&xp);
        xp[c] = x[c] - h;
        let fm = f(&xp);
        xp[c] = x[c];
        jac.set_column(c, &((fp - fm) / (2.0 * h)));
    }
    jac
}

/// Minimizes `½‖f(x)‖²` from `x0` with Nielsen damping updates. Returns the
/// final point and cost.
pub(crate) fn minimize<F>(f: F, x0: DVector<f64>, opts: LmOptions) -> (DVector<f64>, f64)
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let mut x = x0;
    let mut r = f(&x);
    let mut cost = 0.5 * r.norm_squared();
    if !cost.is_finite() {
        return (x, cost);
    }
    let mut mu = -1.0;
    let mut nu = 2.0;
    for _ in 0..opts.max_iterations {
        let jac = numeric_jacobian(&f, &x, r.len());
        let jtj = jac.transpose() * &jac;
        let g = jac.transpose() * &r;
        if g.amax() < 1e-15 {
            break;
        }
        if mu < 0.0 {
            mu = 1e-3 * jtj.diagonal().max().max(1e-12);
        }
        let mut improved = false;
        for _ in 0..20 {
            let mut a = jtj.clone();
            for d in 0..a.nrows() {
                a[(d, d)] += mu;
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&-&g)) else {
                mu *= nu;
                nu *= 2.0;
                continue;
            };
            let xn = &x + &step;
            let rn = f(&xn);
            let cn = 0.5 * rn.norm_squared();
            let predicted = -(step.dot(&g) + 0.5 * step.dot(&(&jtj * &step)));
            let rho = if predicted > 0.0 { (cost - cn) / predicted } else { -1.0 };
            if cn.is_finite() && rho > 0.0 {
                let rel = (cost - cn) / cost.max(1e-300);
                x = xn;
                r = rn;
                cost = cn;
                mu *= (1.0f64 / 3.0).max(1.0 - (2.0 * rho - 1.0).powi(3));
                nu = 2.0;
                improved = true;
                if rel < opts.relative_tolerance {
                    return (x, cost);
                }
                break;
            }
            mu *= nu;
            nu *= 2.0;
        }
        if !improved {
            break;
        }
    }
    (x, cost)
}
