use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Linear-predictor magnitude beyond which the fit is declared separated.
const SEPARATION_BOUND: f64 = 30.0;

#[derive(Clone, Debug, PartialEq)]
pub struct LogitFit {
    pub coef: DVector<f64>,
    /// Inverse observed information.
    pub cov: DMatrix<f64>,
    pub fitted: DVector<f64>,
    pub log_likelihood: f64,
    pub iterations: usize,
}

impl LogitFit {
    pub fn se(&self) -> DVector<f64> {
        self.cov.diagonal().map(|v| v.max(0.0).sqrt())
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn log_likelihood(eta: &DVector<f64>, y: &[f64]) -> f64 {
    // y η − log(1 + e^η), evaluated stably.
    eta.iter()
        .zip(y)
        .map(|(&e, &yi)| yi * e - if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() })
        .sum()
}

/// Maximum-likelihood logistic regression by Newton-Raphson (IRLS) with
/// step halving.
pub fn logit_irls(x: &DMatrix<f64>, y: &[f64]) -> Result<LogitFit> {
    let n = x.nrows();
    let p = x.ncols();
    if y.len() != n {
        return Err(Error::domain("response length differs from design rows"));
    }
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::domain("logit response must be 0 or 1"));
    }
    let mut beta = DVector::zeros(p);
    let mut eta = x * &beta;
    let mut ll = log_likelihood(&eta, y);
    let max_iter = 100;
    for iter in 1..=max_iter {
        let prob = eta.map(sigmoid);
        let resid = DVector::from_fn(n, |i, _| y[i] - prob[i]);
        let score = x.tr_mul(&resid);
        let mut info = DMatrix::zeros(p, p);
        for i in 0..n {
            let w = prob[i] * (1.0 - prob[i]);
            let row = x.row(i).transpose();
            info.ger(w, &row, &row, 1.0);
        }
        let chol = info.clone().cholesky().ok_or_else(|| {
            Error::Separation("information matrix is singular; outcome is perfectly predicted".into())
        })?;
        if score.amax() / (n as f64) < 1e-12 {
            return Ok(LogitFit {
                coef: beta,
                cov: chol.inverse(),
                fitted: prob,
                log_likelihood: ll,
                iterations: iter - 1,
            });
        }
        let step = chol.solve(&score);
        let mut t = 1.0;
        loop {
            let cand = &beta + &step * t;
            let cand_eta = x * &cand;
            let cand_ll = log_likelihood(&cand_eta, y);
            if cand_ll >= ll - 1e-12 * ll.abs() || t < 1e-8 {
                beta = cand;
                eta = cand_eta;
                ll = cand_ll;
                if eta.amax() > SEPARATION_BOUND {
                    return Err(Error::Separation(format!(
                        "linear predictor diverges (|η| = {:.1}); the data are (quasi-)separated",
                        eta.amax()
                    )));
                }
                break;
            }
            t *= 0.5;
        }
    }
    let prob = eta.map(sigmoid);
    let resid = DVector::from_fn(n, |i, _| y[i] - prob[i]);
    let score = x.tr_mul(&resid);
    if score.amax() / (n as f64) < 1e-8 {
        let mut info = DMatrix::zeros(p, p);
        for i in 0..n {
            let w = prob[i] * (1.0 - prob[i]);
            let row = x.row(i).transpose();
            info.ger(w, &row, &row, 1.0);
        }
        let cov = info
            .cholesky()
            .map(|c| c.inverse())
            .ok_or_else(|| Error::Separation("singular information at convergence".into()))?;
        return Ok(LogitFit {
            coef: beta,
            cov,
            fitted: prob,
            log_likelihood: ll,
            iterations: max_iter,
        });
    }
    Err(Error::numerical(format!(
        "logit did not converge in {max_iter} iterations (max score {:e})",
        score.amax() / n as f64
    )))
}
