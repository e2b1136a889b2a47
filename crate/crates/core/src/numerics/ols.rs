use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative pivot threshold below which a column is treated as collinear.
const PIVOT_TOL: f64 = 1e-10;

/// Coefficients of a least-squares fit without covariance bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct LeastSquares {
    /// Full-length coefficient vector; dropped columns carry 0.
    pub coef: DVector<f64>,
    /// Indices of columns dropped as collinear.
    pub dropped: Vec<usize>,
    kept: Vec<usize>,
    /// Inverse of X'X over the kept columns.
    gram_inv: DMatrix<f64>,
}

impl LeastSquares {
    pub fn kept(&self) -> &[usize] {
        &self.kept
    }
}

/// Solves min ||y − Xβ|| through the normal equations, dropping columns
/// whose Cholesky pivot collapses (in column order, so later duplicates go).
pub fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<LeastSquares> {
    if x.nrows() != y.len() {
        return Err(Error::domain(format!(
            "design has {} rows but response has {}",
            x.nrows(),
            y.len()
        )));
    }
    let gram = x.tr_mul(x);
    let xty = x.tr_mul(y);
    solve_normal_equations(&gram, &xty)
}

pub(crate) fn solve_normal_equations(gram: &DMatrix<f64>, xty: &DVector<f64>) -> Result<LeastSquares> {
    let p = gram.nrows();
    let kept = independent_columns(gram);
    if kept.is_empty() {
        return Err(Error::numerical("design matrix has rank 0"));
    }
    let dropped: Vec<usize> = (0..p).filter(|j| !kept.contains(j)).collect();
    if !dropped.is_empty() {
        log::warn!("dropping {} collinear column(s): {:?}", dropped.len(), dropped);
    }
    let k = kept.len();
    let sub = DMatrix::from_fn(k, k, |i, j| gram[(kept[i], kept[j])]);
    let rhs = DVector::from_fn(k, |i, _| xty[kept[i]]);
    let chol = sub
        .cholesky()
        .ok_or_else(|| Error::numerical("normal equations are not positive definite"))?;
    let b = chol.solve(&rhs);
    let gram_inv = chol.inverse();
    let mut coef = DVector::zeros(p);
    for (i, &j) in kept.iter().enumerate() {
        coef[j] = b[i];
    }
    Ok(LeastSquares {
        coef,
        dropped,
        kept,
        gram_inv,
    })
}

/// Greedy in-order Cholesky that skips columns with a vanishing pivot.
fn independent_columns(gram: &DMatrix<f64>) -> Vec<usize> {
    let p = gram.nrows();
    let mut kept: Vec<usize> = Vec::with_capacity(p);
    // Rows of L for kept columns, stored densely in kept order.
    let mut l: Vec<Vec<f64>> = Vec::with_capacity(p);
    for j in 0..p {
        let gjj = gram[(j, j)];
        if !(gjj > 0.0 && gjj.is_finite()) {
            continue;
        }
        let mut row = Vec::with_capacity(kept.len() + 1);
        for (a, &ka) in kept.iter().enumerate() {
            let dot: f64 = (0..a).map(|t| l[a][t] * row[t]).sum();
            row.push((gram[(j, ka)] - dot) / l[a][a]);
        }
        let d = gjj - row.iter().map(|v| v * v).sum::<f64>();
        if d > PIVOT_TOL * gjj {
            row.push(d.sqrt());
            kept.push(j);
            l.push(row);
        }
    }
    kept
}

/// OLS fit with heteroskedasticity-robust (HC1) and optional
/// cluster-robust covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionFit {
    pub coef: DVector<f64>,
    pub residuals: DVector<f64>,
    pub fitted: DVector<f64>,
    pub dropped: Vec<usize>,
    /// HC1 covariance; rows and columns of dropped regressors are zero.
    pub cov_robust: DMatrix<f64>,
    /// Cluster-robust covariance with the G/(G−1)·(n−1)/(n−k) correction.
    pub cov_cluster: Option<DMatrix<f64>>,
    pub n_clusters: Option<usize>,
}

impl RegressionFit {
    pub fn se_robust(&self) -> DVector<f64> {
        self.cov_robust.diagonal().map(|v| v.max(0.0).sqrt())
    }

    /// Cluster-robust s.e. when clusters were supplied, HC1 otherwise.
    pub fn se(&self) -> DVector<f64> {
        match &self.cov_cluster {
            Some(c) => c.diagonal().map(|v| v.max(0.0).sqrt()),
            None => self.se_robust(),
        }
    }
}

pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>, clusters: Option<&[u64]>) -> Result<RegressionFit> {
    let ls = least_squares(x, y)?;
    let n = x.nrows();
    let p = x.ncols();
    let k = ls.kept.len();
    let fitted = x * &ls.coef;
    let residuals = y - &fitted;
    let xk = x.select_columns(ls.kept.iter());

    let mut meat = DMatrix::zeros(k, k);
    for i in 0..n {
        let e2 = residuals[i] * residuals[i];
        let row = xk.row(i);
        meat.ger(e2, &row.transpose(), &row.transpose(), 1.0);
    }
    let dof = if n > k { n as f64 / (n - k) as f64 } else { 1.0 };
    let hc1 = &ls.gram_inv * meat * &ls.gram_inv * dof;
    let cov_robust = expand(&hc1, &ls.kept, p);

    let (cov_cluster, n_clusters) = match clusters {
        None => (None, None),
        Some(ids) => {
            if ids.len() != n {
                return Err(Error::domain("cluster key length differs from row count"));
            }
            let mut scores: std::collections::BTreeMap<u64, DVector<f64>> = Default::default();
            for i in 0..n {
                let s = scores.entry(ids[i]).or_insert_with(|| DVector::zeros(k));
                s.axpy(residuals[i], &xk.row(i).transpose(), 1.0);
            }
            let g = scores.len();
            let mut meat = DMatrix::zeros(k, k);
            for s in scores.values() {
                meat.ger(1.0, s, s, 1.0);
            }
            let corr = if g > 1 && n > k {
                (g as f64 / (g - 1) as f64) * ((n - 1) as f64 / (n - k) as f64)
            } else {
                1.0
            };
            let v = &ls.gram_inv * meat * &ls.gram_inv * corr;
            (Some(expand(&v, &ls.kept, p)), Some(g))
        }
    };

    Ok(RegressionFit {
        coef: ls.coef,
        residuals,
        fitted,
        dropped: ls.dropped,
        cov_robust,
        cov_cluster,
        n_clusters,
    })
}

fn expand(v: &DMatrix<f64>, kept: &[usize], p: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(p, p);
    for (a, &i) in kept.iter().enumerate() {
        for (b, &j) in kept.iter().enumerate() {
            out[(i, j)] = v[(a, b)];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn exact_fit_has_zero_residuals() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        let y = DVector::from_vec(vec![1.0, 3.0, 5.0, 7.0]);
        let f = ols(&x, &y, None).unwrap();
        assert_relative_eq!(f.coef[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(f.coef[1], 2.0, epsilon = 1e-12);
        assert!(f.residuals.amax() < 1e-12);
    }

    #[test]
    fn intercept_only_gives_mean() {
        let x = DMatrix::from_element(5, 1, 1.0);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 10.0]);
        let f = ols(&x, &y, None).unwrap();
        assert_relative_eq!(f.coef[0], 4.0, epsilon = 1e-12);
    }

    #[test]
    fn duplicate_column_is_dropped() {
        let x = DMatrix::from_row_slice(4, 3, &[
            1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 1.0, 5.0, 5.0,
        ]);
        let y = DVector::from_vec(vec![1.0, 2.0, 2.5, 6.0]);
        let f = ols(&x, &y, None).unwrap();
        assert_eq!(f.dropped, vec![2]);
        assert_eq!(f.coef[2], 0.0);
        let xty = x.tr_mul(&f.residuals);
        assert!(xty.amax() < 1e-10);
    }

    #[test]
    fn zero_design_is_rank_error() {
        let x = DMatrix::zeros(3, 2);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert!(ols(&x, &y, None).unwrap_err().is_numerical());
    }

    #[test]
    fn cluster_covariance_with_singleton_clusters_matches_hc1_up_to_correction() {
        let x = DMatrix::from_row_slice(6, 2, &[
            1.0, 0.1, 1.0, 0.5, 1.0, 0.9, 1.0, 1.7, 1.0, 2.2, 1.0, 3.1,
        ]);
        let y = DVector::from_vec(vec![0.3, 0.9, 1.1, 2.5, 2.4, 3.9]);
        let ids: Vec<u64> = (0..6).collect();
        let f = ols(&x, &y, Some(&ids)).unwrap();
        let n = 6.0;
        let k = 2.0;
        let g = 6.0;
        let ratio = (g / (g - 1.0)) * ((n - 1.0) / (n - k)) / (n / (n - k));
        let c = f.cov_cluster.unwrap();
        assert_relative_eq!(c[(1, 1)] / f.cov_robust[(1, 1)], ratio, epsilon = 1e-10);
    }
}
