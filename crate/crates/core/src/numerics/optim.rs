use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;

/// Nelder–Mead simplex settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NelderMead {
    /// Convergence when the simplex diameter (max-norm) falls below `tol`
    /// and the spread of vertex values below `ftol`.
    pub tol: f64,
    pub ftol: f64,
    pub max_iter: usize,
    /// Edge length of the initial simplex.
    pub initial_step: f64,
    /// Number of starts: the supplied point plus `restarts − 1` jittered copies.
    pub restarts: usize,
    /// Standard deviation of the start jitter.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for NelderMead {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            ftol: 1e-10,
            max_iter: 20_000,
            initial_step: 0.1,
            restarts: 5,
            jitter: 0.2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

/// Minimizes `f` from `x0` with the multi-start simplex method and returns
/// the best point over all starts. Fails only if no start converged.
pub fn minimize<F>(f: F, x0: &[f64], opts: &NelderMead, exec: Execution) -> Result<Minimum>
where
    F: Fn(&[f64]) -> f64 + Sync + Send,
{
    let best = minimize_best_effort(f, x0, opts, exec);
    if best.converged {
        Ok(best)
    } else {
        Err(Error::numerical(format!(
            "simplex search hit the iteration cap ({}) without converging; best value {:e}",
            opts.max_iter, best.value
        )))
    }
}

/// Like [`minimize`] but always returns the best point found, with the
/// convergence flag set accordingly.
pub fn minimize_best_effort<F>(f: F, x0: &[f64], opts: &NelderMead, exec: Execution) -> Minimum
where
    F: Fn(&[f64]) -> f64 + Sync + Send,
{
    let starts = opts.restarts.max(1);
    let mut rng = super::rng_stream(opts.seed, 0x4e4d);
    let points: Vec<Vec<f64>> = (0..starts)
        .map(|k| {
            if k == 0 {
                x0.to_vec()
            } else {
                x0.iter()
                    .map(|v| v + opts.jitter * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            }
        })
        .collect();
    let runs = exec.map(&points, |p| nelder_mead(&f, p, opts));
    let f0 = f(x0);
    let mut best = runs
        .into_iter()
        .min_by(|a, b| a.value.total_cmp(&b.value))
        .expect("at least one start");
    best.evaluations += 1;
    if !(best.value <= f0) {
        best.x = x0.to_vec();
        best.value = f0;
    }
    best
}

/// A single simplex run with standard coefficients (1, 2, 0.5, 0.5).
pub(crate) fn nelder_mead<F>(f: &F, x0: &[f64], opts: &NelderMead) -> Minimum
where
    F: Fn(&[f64]) -> f64,
{
    let n = x0.len();
    let eval = |x: &[f64]| {
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    simplex.push(x0.to_vec());
    for i in 0..n {
        let mut v = x0.to_vec();
        v[i] += opts.initial_step;
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|x| eval(x)).collect();
    let mut evaluations = n + 1;
    let mut iterations = 0;
    let mut converged = false;

    while iterations < opts.max_iter {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();

        let diameter = simplex[1..]
            .iter()
            .flat_map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        let spread = values[n] - values[0];
        if diameter < opts.tol && (spread.abs() < opts.ftol || !spread.is_finite()) {
            converged = true;
            break;
        }
        iterations += 1;

        let centroid: Vec<f64> = (0..n)
            .map(|j| simplex[..n].iter().map(|v| v[j]).sum::<f64>() / n as f64)
            .collect();
        let toward = |coef: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[n])
                .map(|(c, w)| c + coef * (w - c))
                .collect()
        };
        let xr = toward(-1.0);
        let fr = eval(&xr);
        evaluations += 1;
        if fr < values[0] {
            let xe = toward(-2.0);
            let fe = eval(&xe);
            evaluations += 1;
            if fe < fr {
                simplex[n] = xe;
                values[n] = fe;
            } else {
                simplex[n] = xr;
                values[n] = fr;
            }
            continue;
        }
        if fr < values[n - 1] {
            simplex[n] = xr;
            values[n] = fr;
            continue;
        }
        let (xc, fc) = if fr < values[n] {
            let xc = toward(-0.5);
            let fc = eval(&xc);
            (xc, fc)
        } else {
            let xc = toward(0.5);
            let fc = eval(&xc);
            (xc, fc)
        };
        evaluations += 1;
        if fc < values[n].min(fr) {
            simplex[n] = xc;
            values[n] = fc;
            continue;
        }
        // Shrink toward the best vertex.
        let best = simplex[0].clone();
        for i in 1..=n {
            for j in 0..n {
                simplex[i][j] = best[j] + 0.5 * (simplex[i][j] - best[j]);
            }
            values[i] = eval(&simplex[i]);
        }
        evaluations += n;
    }

    let (bi, _) = values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("nonempty simplex");
    Minimum {
        x: simplex[bi].clone(),
        value: values[bi],
        iterations,
        evaluations,
        converged,
    }
}

/// Levenberg–Marquardt settings for nonlinear least squares.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevenbergMarquardt {
    pub max_iter: usize,
    /// Stop when the step is below `xtol · (1 + ||x||)`.
    pub xtol: f64,
    /// Stop when the relative cost decrease is below `ftol`.
    pub ftol: f64,
    /// Forward-difference step for the Jacobian.
    pub diff_step: f64,
}

impl Default for LevenbergMarquardt {
    fn default() -> Self {
        Self {
            max_iter: 100,
            xtol: 1e-10,
            ftol: 1e-14,
            diff_step: 1e-7,
        }
    }
}

/// Minimizes `||r(x)||²` with a forward-difference Jacobian. Non-finite
/// residuals are treated as an infinite cost, so the damping grows until a
/// valid step is found.
pub fn levenberg_marquardt<F>(r: F, x0: &[f64], opts: &LevenbergMarquardt) -> Minimum
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    use nalgebra::{DMatrix, DVector};
    let cost = |v: &[f64]| -> f64 {
        let s: f64 = v.iter().map(|e| e * e).sum();
        if s.is_finite() {
            s
        } else {
            f64::INFINITY
        }
    };
    let p = x0.len();
    let mut x = x0.to_vec();
    let mut res = r(&x);
    let mut c = cost(&res);
    let mut evaluations = 1;
    let mut lambda = 1e-3;
    let mut iterations = 0;
    let mut converged = false;
    if !c.is_finite() {
        return Minimum { x, value: c, iterations, evaluations, converged };
    }
    while iterations < opts.max_iter {
        iterations += 1;
        let m = res.len();
        let mut jac = DMatrix::zeros(m, p);
        for j in 0..p {
            let h = opts.diff_step * (1.0 + x[j].abs());
            let mut xp = x.clone();
            xp[j] += h;
            let rp = r(&xp);
            evaluations += 1;
            for i in 0..m {
                jac[(i, j)] = (rp[i] - res[i]) / h;
            }
        }
        let jtj = jac.tr_mul(&jac);
        let jtr = jac.tr_mul(&DVector::from_column_slice(&res));
        let mut accepted = false;
        for _ in 0..30 {
            let mut a = jtj.clone();
            for k in 0..p {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
            }
            let Some(chol) = a.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let step = chol.solve(&(-&jtr));
            let xn: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            let rn = r(&xn);
            evaluations += 1;
            let cn = cost(&rn);
            if cn < c {
                let rel = (c - cn) / c.max(f64::MIN_POSITIVE);
                let small = step.norm() < opts.xtol * (1.0 + x.iter().map(|v| v * v).sum::<f64>().sqrt());
                x = xn;
                res = rn;
                c = cn;
                lambda = (lambda / 3.0).max(1e-12);
                accepted = true;
                if small || rel < opts.ftol {
                    converged = true;
                }
                break;
            }
            lambda *= 4.0;
        }
        if !accepted {
            // No descent direction at any damping: stationary to working precision.
            converged = true;
        }
        if converged {
            break;
        }
    }
    Minimum { x, value: c, iterations, evaluations, converged }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_minimum() {
        let f = |x: &[f64]| (x[0] - 1.0).powi(2) + 3.0 * (x[1] + 2.0).powi(2);
        let m = minimize(f, &[0.0, 0.0], &NelderMead::default(), Execution::Sequential).unwrap();
        assert!((m.x[0] - 1.0).abs() < 1e-6);
        assert!((m.x[1] + 2.0).abs() < 1e-6);
    }

    #[test]
    fn rosenbrock_from_standard_start() {
        let f = |x: &[f64]| 100.0 * (x[1] - x[0] * x[0]).powi(2) + (1.0 - x[0]).powi(2);
        let opts = NelderMead { restarts: 1, ..NelderMead::default() };
        let m = minimize(f, &[-1.2, 1.0], &opts, Execution::Sequential).unwrap();
        assert!((m.x[0] - 1.0).abs() < 1e-4, "{:?}", m.x);
        assert!((m.x[1] - 1.0).abs() < 1e-4, "{:?}", m.x);
    }

    #[test]
    fn multistart_keeps_best_basin() {
        // Two basins; the start sits in the shallow one.
        let f = |x: &[f64]| {
            let a = (x[0] - 1.0).powi(2);
            let b = (x[0] + 1.0).powi(2) - 0.5;
            a.min(b)
        };
        let opts = NelderMead { restarts: 8, jitter: 1.5, seed: 3, ..NelderMead::default() };
        let single = minimize(f, &[1.2], &NelderMead { restarts: 1, ..opts }, Execution::Sequential).unwrap();
        let multi = minimize(f, &[1.2], &opts, Execution::Sequential).unwrap();
        assert!(multi.value <= single.value);
        assert!((multi.x[0] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn levenberg_marquardt_solves_rosenbrock_residuals() {
        let r = |x: &[f64]| vec![10.0 * (x[1] - x[0] * x[0]), 1.0 - x[0]];
        let m = levenberg_marquardt(r, &[-1.2, 1.0], &LevenbergMarquardt::default());
        assert!(m.converged);
        assert!((m.x[0] - 1.0).abs() < 1e-8 && (m.x[1] - 1.0).abs() < 1e-8, "{:?}", m.x);
    }

    #[test]
    fn iteration_cap_is_an_error() {
        let f = |x: &[f64]| 100.0 * (x[1] - x[0] * x[0]).powi(2) + (1.0 - x[0]).powi(2);
        let opts = NelderMead { max_iter: 5, restarts: 1, ..NelderMead::default() };
        assert!(minimize(f, &[-1.2, 1.0], &opts, Execution::Sequential).is_err());
    }
}
