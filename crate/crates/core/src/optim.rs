//! Small dense optimizers: damped least squares for the shooting system
//! and limited-memory BFGS for the gradient path.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct LmOptions {
    pub max_iter: usize,
    pub residual_tol: f64,
    /// Forward-difference step scale for the Jacobian.
    pub fd_step: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iter: 120,
            residual_tol: 1e-10,
            fd_step: 1e-7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmOutcome {
    pub x: Vec<f64>,
    pub residual: Vec<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Levenberg-Marquardt on a square or rectangular residual with a
/// forward-difference Jacobian (columns evaluated in parallel).
pub fn levenberg_marquardt<R>(residual_fn: R, x0: &[f64], opts: &LmOptions) -> Result<LmOutcome>
where
    R: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut r = residual_fn(&x)?;
    let mut r_norm = norm(&r);
    let mut mu = -1.0f64; // initialized from the first normal matrix
    let mut iterations = 0;

    while iterations < opts.max_iter {
        if r_norm <= opts.residual_tol {
            return Ok(LmOutcome {
                x,
                residual: r,
                residual_norm: r_norm,
                iterations,
                converged: true,
            });
        }
        iterations += 1;

        let m = r.len();
        let cols: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let h = opts.fd_step * x[i].abs().max(1.0);
                let mut xp = x.clone();
                xp[i] += h;
                let rp = residual_fn(&xp)?;
                Ok(rp.iter().zip(&r).map(|(a, b)| (a - b) / h).collect())
            })
            .collect::<Result<_>>()?;
        let jac = DMatrix::from_fn(m, n, |row, col| cols[col][row]);

        let a = jac.transpose() * &jac;
        let g = jac.transpose() * DVector::from_column_slice(&r);
        let max_diag = (0..n).map(|i| a[(i, i)]).fold(0.0f64, f64::max);
        if !(max_diag > 0.0) {
            return Err(Error::Rank("zero shooting Jacobian".into()));
        }
        if mu < 0.0 {
            mu = 1e-3 * max_diag;
        }

        let mut accepted = false;
        for _ in 0..25 {
            let mut damped = a.clone();
            for i in 0..n {
                damped[(i, i)] += mu * a[(i, i)].max(1e-12 * max_diag);
            }
            let delta = match damped.cholesky() {
                Some(chol) => chol.solve(&(-&g)),
                None => {
                    mu *= 4.0;
                    continue;
                }
            };
            let x_trial: Vec<f64> = x.iter().zip(delta.iter()).map(|(a, d)| a + d).collect();
            let r_trial = residual_fn(&x_trial)?;
            let r_trial_norm = norm(&r_trial);
            if r_trial_norm < r_norm {
                x = x_trial;
                r = r_trial;
                r_norm = r_trial_norm;
                mu = (mu / 3.0).max(1e-14 * max_diag);
                accepted = true;
                break;
            }
            mu *= 4.0;
            if mu > 1e16 * max_diag {
                return Err(Error::Rank(format!(
                    "damping exhausted at residual {r_norm:.3e}"
                )));
            }
        }
        if !accepted {
            break;
        }
    }

    if r_norm <= opts.residual_tol {
        Ok(LmOutcome {
            x,
            residual: r,
            residual_norm: r_norm,
            iterations,
            converged: true,
        })
    } else {
        Err(Error::Convergence {
            iterations,
            residual_norm: r_norm,
            best: x,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LbfgsOptions {
    pub max_iter: usize,
    /// Stop as soon as the objective drops to this value.
    pub f_target: f64,
    pub grad_tol: f64,
    pub memory: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            max_iter: 400,
            f_target: 0.0,
            grad_tol: 1e-12,
            memory: 12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsOutcome {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Limited-memory BFGS with Armijo backtracking.
///
/// The objective closure receives a `need_grad` flag: line-search trials
/// after the first only need the value, which matters when the gradient
/// costs an extra backward integration.
pub fn lbfgs<FG>(mut f_grad: FG, x0: &[f64], opts: &LbfgsOptions) -> LbfgsOutcome
where
    FG: FnMut(&[f64], bool) -> (f64, Option<Vec<f64>>),
{
    let mut x = x0.to_vec();
    let (mut f, g0) = f_grad(&x, true);
    let mut g = g0.expect("gradient requested");
    let mut history: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new(); // (s, y, 1/s.y)
    let mut iterations = 0;

    while iterations < opts.max_iter {
        let g_norm = norm(&g);
        if f <= opts.f_target || g_norm <= opts.grad_tol {
            return LbfgsOutcome {
                x,
                f,
                grad_norm: g_norm,
                iterations,
                converged: true,
            };
        }
        iterations += 1;

        let mut d = two_loop(&history, &g);
        let mut descent: f64 = dot(&g, &d);
        if descent >= 0.0 {
            history.clear();
            d = g.iter().map(|v| -v).collect();
            descent = -g_norm * g_norm;
        }

        // Armijo backtracking from the quasi-Newton unit step.
        let mut alpha = 1.0;
        let c1 = 1e-4;
        let mut improved = None;
        for trial in 0..40 {
            let x_trial: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + alpha * b).collect();
            let (f_trial, g_trial) = f_grad(&x_trial, trial == 0);
            if f_trial.is_finite() && f_trial <= f + c1 * alpha * descent {
                let g_trial = match g_trial {
                    Some(g) => g,
                    None => f_grad(&x_trial, true).1.expect("gradient requested"),
                };
                improved = Some((x_trial, f_trial, g_trial));
                break;
            }
            alpha *= 0.5;
        }
        let Some((x_new, f_new, g_new)) = improved else {
            // Line search failed; the iterate is as good as it gets.
            return LbfgsOutcome {
                x,
                f,
                grad_norm: g_norm,
                iterations,
                converged: f <= opts.f_target,
            };
        };

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) {
            if history.len() == opts.memory {
                history.remove(0);
            }
            history.push((s, y, 1.0 / sy));
        }
        x = x_new;
        f = f_new;
        g = g_new;
    }

    let g_norm = norm(&g);
    LbfgsOutcome {
        x,
        f,
        grad_norm: g_norm,
        iterations,
        converged: f <= opts.f_target || g_norm <= opts.grad_tol,
    }
}

fn two_loop(history: &[(Vec<f64>, Vec<f64>, f64)], g: &[f64]) -> Vec<f64> {
    let mut q: Vec<f64> = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let alpha = rho * dot(s, &q);
        q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= alpha * yi);
        alphas.push(alpha);
    }
    if let Some((s, y, _)) = history.last() {
        let gamma = dot(s, y) / dot(y, y).max(1e-300);
        q.iter_mut().for_each(|qi| *qi *= gamma);
    }
    for ((s, y, rho), alpha) in history.iter().zip(alphas.into_iter().rev()) {
        let beta = rho * dot(y, &q);
        q.iter_mut()
            .zip(s)
            .for_each(|(qi, si)| *qi += (alpha - beta) * si);
    }
    q.iter_mut().for_each(|qi| *qi = -*qi);
    q
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn lm_solves_rosenbrock_roots() {
        // Residuals (10(y - x^2), 1 - x) vanish at (1, 1).
        let out = levenberg_marquardt(
            |x| Ok(vec![10.0 * (x[1] - x[0] * x[0]), 1.0 - x[0]]),
            &[-1.2, 1.0],
            &LmOptions::default(),
        )
        .unwrap();
        assert!(out.converged);
        assert_relative_eq!(out.x[0], 1.0, epsilon = 1e-8);
        assert_relative_eq!(out.x[1], 1.0, epsilon = 1e-8);
    }

    #[test]
    fn lm_reports_nonconvergence() {
        // No root: |r| >= 1 everywhere.
        let res = levenberg_marquardt(
            |x| Ok(vec![x[0] * x[0] + 1.0]),
            &[2.0],
            &LmOptions {
                max_iter: 30,
                ..Default::default()
            },
        );
        match res {
            Err(Error::Convergence { residual_norm, .. }) => assert!(residual_norm >= 1.0),
            Err(Error::Rank(_)) => {}
            other => panic!("expected failure, got {other:?}"),
        }
    }

    #[test]
    fn lbfgs_minimizes_quadratic_bowl() {
        let out = lbfgs(
            |x, _| {
                let f = (x[0] - 3.0).powi(2) + 10.0 * (x[1] + 1.0).powi(2);
                (f, Some(vec![2.0 * (x[0] - 3.0), 20.0 * (x[1] + 1.0)]))
            },
            &[0.0, 0.0],
            &LbfgsOptions::default(),
        );
        assert!(out.converged);
        assert_relative_eq!(out.x[0], 3.0, epsilon = 1e-6);
        assert_relative_eq!(out.x[1], -1.0, epsilon = 1e-6);
    }

    #[test]
    fn lbfgs_handles_rosenbrock() {
        let out = lbfgs(
            |x, _| {
                let a = 1.0 - x[0];
                let b = x[1] - x[0] * x[0];
                let f = a * a + 100.0 * b * b;
                let g = vec![-2.0 * a - 400.0 * x[0] * b, 200.0 * b];
                (f, Some(g))
            },
            &[-1.2, 1.0],
            &LbfgsOptions {
                max_iter: 2000,
                grad_tol: 1e-10,
                ..Default::default()
            },
        );
        assert!(out.f < 1e-15, "f = {}", out.f);
    }
}
