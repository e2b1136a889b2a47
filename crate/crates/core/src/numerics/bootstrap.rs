use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;

/// Replicate count and seed for a cluster (plant) bootstrap.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootstrapPlan {
    pub replicates: usize,
    pub seed: u64,
}

impl BootstrapPlan {
    pub fn new(replicates: usize, seed: u64) -> Result<Self> {
        if replicates == 0 {
            return Err(Error::Config("bootstrap needs at least one replicate".into()));
        }
        Ok(Self { replicates, seed })
    }

    /// Cluster indices drawn with replacement for replicate `b`.
    pub fn draw(&self, b: usize, n_clusters: usize) -> Vec<usize> {
        let mut rng = super::rng_stream(self.seed, b as u64 + 1);
        (0..n_clusters).map(|_| rng.random_range(0..n_clusters)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    /// Retained replicate estimates, in replicate order.
    pub estimates: Vec<Vec<f64>>,
    /// Replicate index of each retained estimate.
    pub replicate_ids: Vec<usize>,
    /// Replicates whose estimator failed.
    pub failed: usize,
    /// Replicates rejected by the retention predicate.
    pub rejected: usize,
    /// Standard deviation of each component over retained replicates.
    pub sd: Vec<f64>,
}

impl BootstrapResult {
    pub fn retained(&self) -> usize {
        self.estimates.len()
    }

    /// Component `j` across retained replicates.
    pub fn component(&self, j: usize) -> Vec<f64> {
        self.estimates.iter().map(|e| e[j]).collect()
    }

    /// Percentile interval of component `j` at the given coverage.
    pub fn percentile_interval(&self, j: usize, coverage: f64) -> (f64, f64) {
        let c = self.component(j);
        let a = (1.0 - coverage) / 2.0;
        (super::quantile(&c, a), super::quantile(&c, 1.0 - a))
    }

    /// Basic (reverse-percentile) interval of component `j` around the
    /// full-sample estimate: `[2θ̂ − q_hi, 2θ̂ − q_lo]`.
    pub fn basic_interval(&self, j: usize, coverage: f64, estimate: f64) -> (f64, f64) {
        let (lo, hi) = self.percentile_interval(j, coverage);
        (2.0 * estimate - hi, 2.0 * estimate - lo)
    }

    pub fn interval(&self, j: usize, coverage: f64, estimate: f64, kind: IntervalKind) -> (f64, f64) {
        match kind {
            IntervalKind::Percentile => self.percentile_interval(j, coverage),
            IntervalKind::Basic => self.basic_interval(j, coverage, estimate),
        }
    }
}

/// Bootstrap confidence-interval construction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalKind {
    /// Quantiles of the replicate distribution.
    Percentile,
    /// Replicate quantiles reflected around the full-sample estimate. Removes
    /// a bias shared by the estimator and its replicates.
    #[default]
    Basic,
}

/// Runs `estimator` on `plan.replicates` resamples of `n_clusters` clusters.
///
/// The estimator receives the drawn cluster indices and the replicate
/// number. Failed replicates are counted and skipped; successful ones are
/// kept when `retain` accepts them.
pub fn cluster_bootstrap<E, R>(
    plan: &BootstrapPlan,
    n_clusters: usize,
    exec: Execution,
    estimator: E,
    retain: R,
) -> Result<BootstrapResult>
where
    E: Fn(&[usize], usize) -> Result<Vec<f64>> + Sync + Send,
    R: Fn(&[f64]) -> bool,
{
    if n_clusters == 0 {
        return Err(Error::InsufficientData("bootstrap needs at least one cluster".into()));
    }
    let outcomes = exec.map_range(plan.replicates, |b| {
        let draw = plan.draw(b, n_clusters);
        estimator(&draw, b)
    });
    let mut estimates = Vec::new();
    let mut replicate_ids = Vec::new();
    let mut failed = 0;
    let mut rejected = 0;
    for (b, out) in outcomes.into_iter().enumerate() {
        match out {
            Ok(v) if v.iter().all(|x| x.is_finite()) => {
                if retain(&v) {
                    estimates.push(v);
                    replicate_ids.push(b);
                } else {
                    rejected += 1;
                }
            }
            Ok(_) => failed += 1,
            Err(e) => {
                log::debug!("bootstrap replicate {b} failed: {e}");
                failed += 1;
            }
        }
    }
    let dim = estimates.first().map_or(0, Vec::len);
    let sd = (0..dim)
        .map(|j| super::sample_sd(&estimates.iter().map(|e| e[j]).collect::<Vec<_>>()))
        .collect();
    Ok(BootstrapResult {
        estimates,
        replicate_ids,
        failed,
        rejected,
        sd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_estimator_has_zero_sd() {
        let plan = BootstrapPlan::new(20, 1).unwrap();
        let r = cluster_bootstrap(&plan, 10, Execution::Sequential, |_, _| Ok(vec![3.0]), |_| true)
            .unwrap();
        assert_eq!(r.retained(), 20);
        assert_eq!(r.sd, vec![0.0]);
    }

    #[test]
    fn retention_predicate_reduces_count() {
        let plan = BootstrapPlan::new(50, 2).unwrap();
        let r = cluster_bootstrap(
            &plan,
            10,
            Execution::Sequential,
            |d, _| Ok(vec![d[0] as f64 - 4.5]),
            |v| v[0] < 0.0,
        )
        .unwrap();
        assert!(r.retained() < 50);
        assert_eq!(r.retained() + r.rejected, 50);
    }

    #[test]
    fn draws_are_deterministic_and_parallel_safe() {
        let plan = BootstrapPlan::new(16, 9).unwrap();
        let est = |d: &[usize], _b: usize| Ok(vec![d.iter().sum::<usize>() as f64]);
        let a = cluster_bootstrap(&plan, 30, Execution::Sequential, est, |_| true).unwrap();
        let b = cluster_bootstrap(&plan, 30, Execution::Parallel, est, |_| true).unwrap();
        assert_eq!(a, b);
    }
}
