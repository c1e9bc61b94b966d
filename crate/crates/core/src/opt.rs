//! Limited-memory BFGS with a weak-Wolfe bisection line search, used to
//! maximize the penalized log-likelihood. The driver works on a
//! minimization problem, so callers hand in the negated objective.

/// Result of an optimization run.
#[derive(Debug, Clone)]
pub struct OptResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub struct LbfgsOptions {
    pub memory: usize,
    pub max_iter: usize,
    /// Relative infinity-norm gradient tolerance.
    pub tol: f64,
    pub armijo_c1: f64,
    pub wolfe_c2: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsOptions {
    fn default() -> LbfgsOptions {
        LbfgsOptions {
            memory: 10,
            max_iter: 500,
            tol: 1e-5,
            armijo_c1: 1e-4,
            wolfe_c2: 0.9,
            max_line_search: 60,
        }
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, &x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `f` starting from `x0`. The objective returns the value and
/// gradient at a point; non-finite values are treated as line-search
/// rejections.
pub fn lbfgs<F>(x0: &[f64], opts: &LbfgsOptions, mut objective: F) -> OptResult
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut f, mut g) = objective(&x);
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut rho_hist: Vec<f64> = Vec::new();

    let mut iterations = 0;
    let mut converged = inf_norm(&g) < opts.tol * f.abs().sqrt().max(1.0);

    while !converged && iterations < opts.max_iter {
        // Two-loop recursion for d = -H g.
        let mut q = g.clone();
        let m = s_hist.len();
        let mut alpha = vec![0.0; m];
        for k in (0..m).rev() {
            alpha[k] = rho_hist[k] * dot(&s_hist[k], &q);
            for i in 0..n {
                q[i] -= alpha[k] * y_hist[k][i];
            }
        }
        if m > 0 {
            let sy = dot(&s_hist[m - 1], &y_hist[m - 1]);
            let yy = dot(&y_hist[m - 1], &y_hist[m - 1]);
            let scale = sy / yy;
            for v in q.iter_mut() {
                *v *= scale;
            }
        }
        for k in 0..m {
            let beta = rho_hist[k] * dot(&y_hist[k], &q);
            for i in 0..n {
                q[i] += (alpha[k] - beta) * s_hist[k][i];
            }
        }
        let d: Vec<f64> = q.iter().map(|&v| -v).collect();

        let mut gd = dot(&g, &d);
        let d = if gd >= 0.0 {
            // Fall back to steepest descent if the direction is not a
            // descent direction (can happen after skipped updates).
            let sd: Vec<f64> = g.iter().map(|&v| -v).collect();
            gd = -dot(&g, &g);
            sd
        } else {
            d
        };

        // Weak-Wolfe bisection line search starting from a unit step.
        let mut lo = 0.0f64;
        let mut hi = f64::INFINITY;
        let mut step = 1.0;
        let mut x_new = x.clone();
        let mut f_new = f;
        let mut g_new = g.clone();
        let mut step_acc = 0.0;
        for _ in 0..opts.max_line_search {
            for i in 0..n {
                x_new[i] = x[i] + step * d[i];
            }
            let (ft, gt) = objective(&x_new);
            if !ft.is_finite() || ft > f + opts.armijo_c1 * step * gd {
                hi = step;
            } else if dot(&gt, &d) < opts.wolfe_c2 * gd {
                lo = step;
                f_new = ft;
                g_new = gt;
                step_acc = step;
            } else {
                f_new = ft;
                g_new = gt;
                step_acc = step;
                break;
            }
            step = if hi.is_finite() {
                0.5 * (lo + hi)
            } else {
                2.0 * step
            };
        }
        let accepted = step_acc > 0.0;
        if accepted && step_acc != step {
            for i in 0..n {
                x_new[i] = x[i] + step_acc * d[i];
            }
        }
        if !accepted {
            break;
        }

        let s: Vec<f64> = (0..n).map(|i| x_new[i] - x[i]).collect();
        let y: Vec<f64> = (0..n).map(|i| g_new[i] - g[i]).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 {
            s_hist.push(s);
            y_hist.push(y);
            rho_hist.push(1.0 / sy);
            if s_hist.len() > opts.memory {
                s_hist.remove(0);
                y_hist.remove(0);
                rho_hist.remove(0);
            }
        }

        x = x_new;
        f = f_new;
        g = g_new;
        iterations += 1;
        converged = inf_norm(&g) < opts.tol * f.abs().sqrt().max(1.0);
    }

    let grad_norm = inf_norm(&g);
    OptResult {
        x,
        f,
        grad: g,
        grad_norm,
        iterations,
        converged,
    }
}
