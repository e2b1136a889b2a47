use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FeOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iter: 10_000,
        }
    }
}

/// Removes any number of fixed effects from every column of `data` by
/// alternating projections. `groups[f][i]` is the (dense, zero-based) level
/// of fixed effect `f` for row `i`.
pub fn absorb_fixed_effects(
    data: &DMatrix<f64>,
    groups: &[Vec<usize>],
    opts: FeOptions,
) -> Result<DMatrix<f64>> {
    let n = data.nrows();
    let mut out = data.clone();
    let counts: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| {
            if g.len() != n {
                return Err(Error::domain("fixed-effect key length differs from row count"));
            }
            let levels = g.iter().copied().max().map_or(0, |m| m + 1);
            let mut c = vec![0.0; levels];
            for &l in g {
                c[l] += 1.0;
            }
            Ok(c)
        })
        .collect::<Result<_>>()?;

    for mut col in out.column_iter_mut() {
        let mut iter = 0;
        loop {
            let mut max_change: f64 = 0.0;
            for (g, cnt) in groups.iter().zip(&counts) {
                let mut sums = vec![0.0; cnt.len()];
                for (i, &l) in g.iter().enumerate() {
                    sums[l] += col[i];
                }
                for (s, c) in sums.iter_mut().zip(cnt) {
                    if *c > 0.0 {
                        *s /= c;
                    }
                }
                for (i, &l) in g.iter().enumerate() {
                    col[i] -= sums[l];
                }
                max_change = sums.iter().fold(max_change, |m, v| m.max(v.abs()));
            }
            iter += 1;
            if max_change < opts.tol || groups.len() <= 1 {
                break;
            }
            if iter >= opts.max_iter {
                return Err(Error::numerical(format!(
                    "fixed-effect absorption did not converge after {iter} sweeps (max change {max_change:e})"
                )));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn single_fe_is_within_transform() {
        let data = DMatrix::from_column_slice(4, 1, &[1.0, 3.0, 10.0, 14.0]);
        let out = absorb_fixed_effects(&data, &[vec![0, 0, 1, 1]], FeOptions::default()).unwrap();
        assert_eq!(out.column(0).iter().copied().collect::<Vec<_>>(), vec![-1.0, 1.0, -2.0, 2.0]);
    }

    #[test]
    fn nested_fe_equals_finer_demeaning() {
        let data = DMatrix::from_column_slice(6, 1, &[1.0, 2.0, 4.0, 8.0, 16.0, 32.0]);
        let fine = vec![0, 0, 1, 1, 2, 2];
        let coarse = vec![0, 0, 0, 0, 1, 1];
        let a = absorb_fixed_effects(&data, &[fine.clone(), coarse], FeOptions::default()).unwrap();
        let b = absorb_fixed_effects(&data, &[fine], FeOptions::default()).unwrap();
        for i in 0..6 {
            assert_relative_eq!(a[(i, 0)], b[(i, 0)], epsilon = 1e-12);
        }
    }
}
