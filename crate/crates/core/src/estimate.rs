//! Production function estimation: control-function first stage,
//! productivity recovery, the productivity law of motion, and two-step GMM
//! with plant-clustered bootstrap standard errors.

use nalgebra::{DMatrix, DVector, Matrix5, SMatrix, SVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ces::{
    self, CesShares, PreparedRow, ProductivityTriple, RecoveryConstants, RecoveryInputs, ShareBasis,
    StructuralParams,
};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::numerics::{
    self, levenberg_marquardt, minimize_best_effort, poly_features, BootstrapPlan, IntervalKind, LevenbergMarquardt,
    NelderMead,
};
use crate::panel::{normalize_rows, AugmentedRow, NormRow, NormalizationScope, NormalizedPanel};

pub const FIRST_STAGE_REGRESSORS: [&str; 10] = [
    "log_capital",
    "log_skilled",
    "log_unskilled",
    "log_materials_exp",
    "log_wage_skilled",
    "log_wage_unskilled",
    "log_price_index",
    "log_industry_materials_exp",
    "log_investment",
    "log_labor_materials_ratio",
];

pub const MARKOV_REGRESSORS: [&str; 5] = ["constant", "omega_H_lag", "omega_S_lag", "omega_U_lag", "export_lag"];

/// Row index of the same plant's observation in the next and previous
/// calendar year.
pub fn adjacent_rows(np: &NormalizedPanel) -> (Vec<Option<usize>>, Vec<Option<usize>>) {
    let rows = np.rows();
    let n = rows.len();
    let mut next = vec![None; n];
    let mut prev = vec![None; n];
    for i in 1..n {
        let (a, b) = (&rows[i - 1].raw, &rows[i].raw);
        if a.plant_id == b.plant_id && a.year + 1 == b.year {
            next[i - 1] = Some(i);
            prev[i] = Some(i - 1);
        }
    }
    (next, prev)
}

fn first_stage_logs(r: &NormRow) -> Option<[f64; 10]> {
    let inv = r.investment?;
    Some([
        r.capital.ln(),
        r.skilled.ln(),
        r.unskilled.ln(),
        r.materials_exp.ln(),
        r.wage_skilled.ln(),
        r.wage_unskilled.ln(),
        r.price_index.ln(),
        r.industry_materials_exp.ln(),
        inv.ln(),
        (r.raw.labor_pay() / r.raw.materials_exp).ln(),
    ])
}

/// How the four export-status groups share the first-stage regression.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Separate regressions; a group smaller than the design is an error.
    #[default]
    Never,
    /// Separate regressions unless a group is too small, then pool.
    Auto,
    /// One regression with a common polynomial and group intercepts.
    Always,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FirstStageOptions {
    pub pooling: Pooling,
}

/// Fitted planned log output and measurement-error residuals, aligned with
/// the normalized panel's rows. Rows outside the estimable sample carry `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FirstStageFit {
    pub y_hat: Vec<Option<f64>>,
    pub residual: Vec<Option<f64>>,
    /// Export group `2 e_t + e_{t+1}`.
    pub group: Vec<Option<u8>>,
    pub group_sizes: [usize; 4],
    pub pooled: bool,
}

impl FirstStageFit {
    pub fn n_estimable(&self) -> usize {
        self.y_hat.iter().filter(|v| v.is_some()).count()
    }

    pub fn residual_sd(&self) -> f64 {
        let r: Vec<f64> = self.residual.iter().flatten().copied().collect();
        numerics::sample_sd(&r)
    }
}

/// Estimable rows: positive investment and an observation next year.
fn estimable_groups(np: &NormalizedPanel) -> Vec<Option<u8>> {
    let (next, _) = adjacent_rows(np);
    np.rows()
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let j = next[i]?;
            r.investment?;
            Some(2 * u8::from(r.raw.export) + u8::from(np.rows()[j].raw.export))
        })
        .collect()
}

const N_POLY: usize = 66;

struct FirstStageDesign {
    /// Compact estimable row → panel row.
    rows: Vec<usize>,
    x: DMatrix<f64>,
    y: DVector<f64>,
    /// Regression key per compact row (the group, or 0 when pooled).
    key: Vec<u8>,
    pooled: bool,
    group_sizes: [usize; 4],
}

fn first_stage_design(np: &NormalizedPanel, opts: &FirstStageOptions) -> Result<FirstStageDesign> {
    let groups = estimable_groups(np);
    let rows: Vec<usize> = (0..np.len()).filter(|&i| groups[i].is_some()).collect();
    if rows.is_empty() {
        return Err(Error::InsufficientData(
            "no rows with positive investment and an observed following year".into(),
        ));
    }
    let mut group_sizes = [0usize; 4];
    for &i in &rows {
        group_sizes[groups[i].expect("estimable") as usize] += 1;
    }
    let small = group_sizes.iter().any(|&n| n > 0 && n < N_POLY);
    let pooled = match opts.pooling {
        Pooling::Always => true,
        Pooling::Auto => small,
        Pooling::Never => {
            if small {
                return Err(Error::InsufficientData(format!(
                    "export-status group sizes {group_sizes:?} include a group with fewer rows than the \
                     {N_POLY} polynomial terms; enable first-stage pooling"
                )));
            }
            false
        }
    };
    if pooled {
        log::warn!("first stage pools export-status groups (sizes {group_sizes:?})");
    }
    let logs = DMatrix::from_fn(rows.len(), 10, |i, j| {
        first_stage_logs(&np.rows()[rows[i]]).expect("estimable row")[j]
    });
    let poly = poly_features(&logs, 2);
    let x = if pooled {
        let p = poly.ncols();
        DMatrix::from_fn(rows.len(), p + 3, |i, j| {
            if j < p {
                poly[(i, j)]
            } else {
                f64::from(u8::from(groups[rows[i]] == Some((j - p + 1) as u8)))
            }
        })
    } else {
        poly
    };
    let y = DVector::from_fn(rows.len(), |i, _| np.rows()[rows[i]].output.ln());
    let key = rows
        .iter()
        .map(|&i| if pooled { 0 } else { groups[i].expect("estimable") })
        .collect();
    Ok(FirstStageDesign {
        rows,
        x,
        y,
        key,
        pooled,
        group_sizes,
    })
}

/// Second-order polynomial regression of log output on the ten control
/// variables, separately within each (e_t, e_{t+1}) group.
pub fn first_stage(np: &NormalizedPanel, opts: &FirstStageOptions) -> Result<FirstStageFit> {
    let d = first_stage_design(np, opts)?;
    let n = np.len();
    let mut y_hat = vec![None; n];
    let mut residual = vec![None; n];
    let mut group = vec![None; n];
    let groups = estimable_groups(np);
    for key in 0..4u8 {
        let idx: Vec<usize> = (0..d.rows.len()).filter(|&i| d.key[i] == key).collect();
        if idx.is_empty() {
            continue;
        }
        let x = d.x.select_rows(idx.iter());
        let y = DVector::from_fn(idx.len(), |i, _| d.y[idx[i]]);
        let fit = numerics::least_squares(&x, &y)?;
        let fitted = &x * &fit.coef;
        for (a, &ci) in idx.iter().enumerate() {
            let row = d.rows[ci];
            y_hat[row] = Some(fitted[a]);
            residual[row] = Some(y[a] - fitted[a]);
            group[row] = groups[row];
        }
    }
    Ok(FirstStageFit {
        y_hat,
        residual,
        group,
        group_sizes: d.group_sizes,
        pooled: d.pooled,
    })
}

/// Per-plant cross-product blocks of the first-stage design, so a plant
/// resample's regression only needs weighted sums of precomputed blocks.
///
/// Under global normalization a resample shifts every log regressor by a
/// constant; a full quadratic polynomial spans the same space after such a
/// shift, so fitted values computed with the full-sample design differ from
/// the resample's own only by the shift in normalized log output.
struct FirstStageCache {
    p: usize,
    pooled: bool,
    group_sizes: [usize; 4],
    /// Panel row → (compact row, regression key).
    compact: Vec<Option<(usize, u8)>>,
    x: DMatrix<f64>,
    y: DVector<f64>,
    /// Per plant: (key, block offset).
    blocks: Vec<Vec<(u8, usize)>>,
    storage: Vec<f64>,
}

impl FirstStageCache {
    fn block_len(p: usize) -> usize {
        p * (p + 1) / 2 + p
    }

    fn new(np: &NormalizedPanel, opts: &FirstStageOptions) -> Result<Self> {
        let d = first_stage_design(np, opts)?;
        let p = d.x.ncols();
        let mut compact = vec![None; np.len()];
        for (c, &r) in d.rows.iter().enumerate() {
            compact[r] = Some((c, d.key[c]));
        }
        let spans = np.plant_spans();
        let bl = Self::block_len(p);
        let mut blocks = Vec::with_capacity(spans.len());
        let mut storage = Vec::new();
        for span in spans {
            let mut mine: Vec<(u8, usize)> = Vec::new();
            for r in span {
                let Some((c, key)) = compact[r] else { continue };
                let off = match mine.iter().find(|b| b.0 == key) {
                    Some(b) => b.1,
                    None => {
                        let off = storage.len();
                        storage.resize(off + bl, 0.0);
                        mine.push((key, off));
                        off
                    }
                };
                let blk = &mut storage[off..off + bl];
                let mut t = 0;
                for a in 0..p {
                    let xa = d.x[(c, a)];
                    for b in a..p {
                        blk[t] += xa * d.x[(c, b)];
                        t += 1;
                    }
                }
                for a in 0..p {
                    blk[t + a] += d.x[(c, a)] * d.y[c];
                }
            }
            blocks.push(mine);
        }
        Ok(Self {
            p,
            pooled: d.pooled,
            group_sizes: d.group_sizes,
            compact,
            x: d.x,
            y: d.y,
            blocks,
            storage,
        })
    }

    /// First stage for a resample of whole plants (`draw` indexes plant
    /// spans of the full panel; `rep` is the re-normalized resample).
    fn resample(&self, np: &NormalizedPanel, draw: &[usize], rep: &NormalizedPanel) -> Result<FirstStageFit> {
        let p = self.p;
        let bl = Self::block_len(p);
        let mut sums = vec![vec![0.0; bl]; 4];
        let mut used = [false; 4];
        for &j in draw {
            for &(key, off) in &self.blocks[j] {
                used[key as usize] = true;
                for (s, v) in sums[key as usize].iter_mut().zip(&self.storage[off..off + bl]) {
                    *s += v;
                }
            }
        }
        let mut coef: Vec<Option<DVector<f64>>> = vec![None; 4];
        for key in 0..4 {
            if !used[key] {
                continue;
            }
            let s = &sums[key];
            let mut gram = DMatrix::zeros(p, p);
            let mut t = 0;
            for a in 0..p {
                for b in a..p {
                    gram[(a, b)] = s[t];
                    gram[(b, a)] = s[t];
                    t += 1;
                }
            }
            let xty = DVector::from_column_slice(&s[t..t + p]);
            coef[key] = Some(numerics::ols::solve_normal_equations(&gram, &xty)?.coef);
        }
        let spans = np.plant_spans();
        let n = rep.len();
        let mut y_hat = vec![None; n];
        let mut residual = vec![None; n];
        let mut group = vec![None; n];
        let mut group_sizes = [0usize; 4];
        let mut out = 0;
        for &j in draw {
            for r in spans[j].clone() {
                if let Some((c, key)) = self.compact[r] {
                    let b = coef[key as usize].as_ref().expect("block used");
                    let fit: f64 = (0..p).map(|a| self.x[(c, a)] * b[a]).sum();
                    let shift = rep.rows()[out].output.ln() - self.y[c];
                    y_hat[out] = Some(fit + shift);
                    residual[out] = Some(self.y[c] - fit);
                    let g = 2 * u8::from(np.rows()[r].raw.export)
                        + u8::from(np.rows()[r + 1].raw.export);
                    group[out] = Some(g);
                    group_sizes[g as usize] += 1;
                }
                out += 1;
            }
        }
        let _ = self.group_sizes;
        Ok(FirstStageFit {
            y_hat,
            residual,
            group,
            group_sizes,
            pooled: self.pooled,
        })
    }
}

// ---------------------------------------------------------------------------
// Productivity recovery

fn recovery_inputs(r: &NormRow, y_hat: f64) -> RecoveryInputs {
    RecoveryInputs {
        y_hat,
        capital: r.capital,
        skilled: r.skilled,
        unskilled: r.unskilled,
        e_s: r.raw.skilled_pay,
        e_u: r.raw.unskilled_pay,
        e_m: r.raw.materials_exp,
        materials_exp_norm: r.materials_exp,
        price_index_norm: r.price_index,
        industry_exp_norm: r.industry_materials_exp,
    }
}

/// Recovered productivity aligned with the normalized panel's rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProductivityPanel {
    pub omega: Vec<Option<ProductivityTriple>>,
    pub params: StructuralParams,
    pub shares: CesShares,
}

impl ProductivityPanel {
    pub fn n_recovered(&self) -> usize {
        self.omega.iter().filter(|o| o.is_some()).count()
    }
}

/// Recovers (ω_H, ω_S, ω_U) for every first-stage row from fitted planned
/// output and the first-order conditions at `params`.
pub fn recover_productivity_panel(
    params: &StructuralParams,
    np: &NormalizedPanel,
    fs: &FirstStageFit,
) -> Result<ProductivityPanel> {
    params.validate()?;
    let shares = ShareBasis::from_panel(np).shares(params.tau)?;
    let omega = np
        .rows()
        .iter()
        .zip(&fs.y_hat)
        .map(|(r, y)| match y {
            None => Ok(None),
            Some(y) => ces::recover_triple(&recovery_inputs(r, *y), params, &shares)
                .map(Some)
                .map_err(|e| e.at_row(r.raw.plant_id, r.raw.year)),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ProductivityPanel {
        omega,
        params: *params,
        shares,
    })
}

// ---------------------------------------------------------------------------
// Law of motion

/// Consecutive-year pairs (current row, lagged row) where both rows carry
/// recovered productivity.
pub fn markov_pairs(np: &NormalizedPanel, available: &[bool]) -> Vec<(usize, usize)> {
    let (_, prev) = adjacent_rows(np);
    (0..np.len())
        .filter_map(|i| {
            let j = prev[i]?;
            (available[i] && available[j]).then_some((i, j))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkovEstimate {
    /// Rows: equations H, S, U; columns as [`MARKOV_REGRESSORS`].
    pub coef: [[f64; 5]; 3],
    /// Plant-clustered standard errors.
    pub se: [[f64; 5]; 3],
    /// Forecast errors ξ per pair.
    pub residuals: Vec<[f64; 3]>,
    /// (current row, lagged row) per regression observation.
    pub pairs: Vec<(usize, usize)>,
}

/// OLS of each productivity on a constant, the lagged triple and the lagged
/// export flag.
pub fn markov_regression(pp: &ProductivityPanel, np: &NormalizedPanel) -> Result<MarkovEstimate> {
    let available: Vec<bool> = pp.omega.iter().map(Option::is_some).collect();
    let pairs = markov_pairs(np, &available);
    if pairs.len() < 10 {
        return Err(Error::InsufficientData(format!(
            "only {} consecutive-year productivity pairs",
            pairs.len()
        )));
    }
    let x = DMatrix::from_fn(pairs.len(), 5, |i, j| {
        let lag = pairs[i].1;
        let o = pp.omega[lag].expect("available");
        match j {
            0 => 1.0,
            1 => o.omega_h,
            2 => o.omega_s,
            3 => o.omega_u,
            _ => f64::from(u8::from(np.rows()[lag].raw.export)),
        }
    });
    let clusters: Vec<u64> = pairs.iter().map(|p| np.rows()[p.0].raw.plant_id).collect();
    let mut coef = [[0.0; 5]; 3];
    let mut se = [[0.0; 5]; 3];
    let mut residuals = vec![[0.0; 3]; pairs.len()];
    for k in 0..3 {
        let y = DVector::from_fn(pairs.len(), |i, _| pp.omega[pairs[i].0].expect("available").as_array()[k]);
        let fit = numerics::ols(&x, &y, Some(&clusters))?;
        let s = fit.se();
        for j in 0..5 {
            coef[k][j] = fit.coef[j];
            se[k][j] = s[j];
        }
        for (i, r) in fit.residuals.iter().enumerate() {
            residuals[i][k] = *r;
        }
    }
    Ok(MarkovEstimate {
        coef,
        se,
        residuals,
        pairs,
    })
}

// ---------------------------------------------------------------------------
// Instruments and GMM

/// Instruments per Markov pair: Z_H (2), Z_S (3) and Z_U (3).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instruments {
    pub pairs: Vec<(usize, usize)>,
    pub z_h: Vec<[f64; 2]>,
    pub z_s: Vec<[f64; 3]>,
    pub z_u: Vec<[f64; 3]>,
}

pub fn build_instruments(np: &NormalizedPanel, fs: &FirstStageFit) -> Instruments {
    let available: Vec<bool> = fs.y_hat.iter().map(Option::is_some).collect();
    let pairs = markov_pairs(np, &available);
    let rows = np.rows();
    let mut z_h = Vec::with_capacity(pairs.len());
    let mut z_s = Vec::with_capacity(pairs.len());
    let mut z_u = Vec::with_capacity(pairs.len());
    for &(cur, lag) in &pairs {
        let c = &rows[cur];
        let l = &rows[lag];
        let log_k = c.capital.ln();
        let el = l.raw.labor_pay();
        z_h.push([log_k, (el / l.raw.materials_exp).ln()]);
        z_s.push([
            log_k,
            (el / l.raw.skilled_pay).ln(),
            (l.materials_exp / l.price_index).ln(),
        ]);
        z_u.push([
            log_k,
            (l.raw.skilled_pay / l.raw.unskilled_pay).ln(),
            (l.skilled / l.unskilled).ln(),
        ]);
    }
    Instruments { pairs, z_h, z_s, z_u }
}

pub const N_MOMENTS: usize = 8;
pub type MomentVector = SVector<f64, N_MOMENTS>;
pub type WeightMatrix = SMatrix<f64, N_MOMENTS, N_MOMENTS>;

/// Objective value returned where the productivity chain cannot be
/// evaluated; finite so the simplex search stays total.
pub const PENALTY: f64 = 1e10;

/// Maps an unconstrained vector to parameters:
/// τ = e^x₀, η = e^x₁, θ = 1 − e^x₂, ρ = 1 − e^x₃.
pub fn from_unconstrained(x: &[f64]) -> StructuralParams {
    StructuralParams {
        tau: x[0].exp(),
        eta_m: x[1].exp(),
        theta: 1.0 - x[2].exp(),
        rho: 1.0 - x[3].exp(),
    }
}

pub fn to_unconstrained(p: &StructuralParams) -> [f64; 4] {
    [p.tau.ln(), p.eta_m.ln(), (1.0 - p.theta).ln(), (1.0 - p.rho).ln()]
}

#[derive(Clone, Copy, Debug)]
struct Pair {
    cur: u32,
    lag: u32,
    e_lag: f64,
    cluster: u32,
}

/// Parameter-free data of the GMM problem, prepared once.
pub struct GmmProblem {
    prepared: Vec<PreparedRow>,
    pairs: Vec<Pair>,
    z: Vec<[f64; N_MOMENTS]>,
    basis: ShareBasis,
    n_clusters: usize,
}

impl GmmProblem {
    pub fn new(np: &NormalizedPanel, fs: &FirstStageFit) -> Result<Self> {
        let inst = build_instruments(np, fs);
        if inst.pairs.len() < 2 * N_MOMENTS {
            return Err(Error::InsufficientData(format!(
                "only {} consecutive-year pairs for the GMM moments",
                inst.pairs.len()
            )));
        }
        let mut compact = vec![u32::MAX; np.len()];
        let mut prepared = Vec::new();
        for (i, (r, y)) in np.rows().iter().zip(&fs.y_hat).enumerate() {
            if let Some(y) = y {
                compact[i] = prepared.len() as u32;
                prepared.push(PreparedRow::new(&recovery_inputs(r, *y)));
            }
        }
        let mut cluster_of = std::collections::HashMap::new();
        let pairs = inst
            .pairs
            .iter()
            .map(|&(c, l)| {
                let next = cluster_of.len() as u32;
                let cluster = *cluster_of.entry(np.rows()[c].raw.plant_id).or_insert(next);
                Pair {
                    cur: compact[c],
                    lag: compact[l],
                    e_lag: f64::from(u8::from(np.rows()[l].raw.export)),
                    cluster,
                }
            })
            .collect();
        let z = (0..inst.pairs.len())
            .map(|i| {
                let (h, s, u) = (inst.z_h[i], inst.z_s[i], inst.z_u[i]);
                [h[0], h[1], s[0], s[1], s[2], u[0], u[1], u[2]]
            })
            .collect();
        Ok(Self {
            prepared,
            pairs,
            z,
            basis: ShareBasis::from_panel(np),
            n_clusters: cluster_of.len(),
        })
    }

    /// Number of moment observations (Markov pairs).
    pub fn n(&self) -> usize {
        self.pairs.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    pub fn shares(&self, tau: f64) -> Result<CesShares> {
        self.basis.shares(tau)
    }

    fn recover_all(&self, params: &StructuralParams) -> Option<Vec<ProductivityTriple>> {
        if params.validate().is_err() || params.theta.abs() < 1e-8 || params.rho.abs() < 1e-8 {
            return None;
        }
        let shares = self.basis.shares(params.tau).ok()?;
        let k = RecoveryConstants::new(params, &shares);
        self.prepared.iter().map(|r| k.recover(r)).collect()
    }

    fn markov(&self, omega: &[ProductivityTriple]) -> Option<[[f64; 5]; 3]> {
        let mut gram = Matrix5::<f64>::zeros();
        let mut xty = SMatrix::<f64, 5, 3>::zeros();
        for p in &self.pairs {
            let l = omega[p.lag as usize];
            let c = omega[p.cur as usize];
            let x = [1.0, l.omega_h, l.omega_s, l.omega_u, p.e_lag];
            let y = c.as_array();
            for a in 0..5 {
                for b in a..5 {
                    gram[(a, b)] += x[a] * x[b];
                }
                for k in 0..3 {
                    xty[(a, k)] += x[a] * y[k];
                }
            }
        }
        for a in 0..5 {
            for b in 0..a {
                gram[(a, b)] = gram[(b, a)];
            }
        }
        let b = match gram.cholesky() {
            Some(ch) => ch.solve(&xty),
            None => {
                // Degenerate design (for example no lagged exporters): drop columns.
                let g = DMatrix::from_fn(5, 5, |i, j| gram[(i, j)]);
                let mut out = SMatrix::<f64, 5, 3>::zeros();
                for k in 0..3 {
                    let r = DVector::from_fn(5, |i, _| xty[(i, k)]);
                    let ls = numerics::ols::solve_normal_equations(&g, &r).ok()?;
                    for i in 0..5 {
                        out[(i, k)] = ls.coef[i];
                    }
                }
                out
            }
        };
        let mut coef = [[0.0; 5]; 3];
        for k in 0..3 {
            for j in 0..5 {
                coef[k][j] = b[(j, k)];
            }
        }
        coef.iter().flatten().all(|v| v.is_finite()).then_some(coef)
    }

    fn contributions<F: FnMut(usize, &[f64; N_MOMENTS])>(
        &self,
        omega: &[ProductivityTriple],
        coef: &[[f64; 5]; 3],
        mut sink: F,
    ) {
        for (i, p) in self.pairs.iter().enumerate() {
            let l = omega[p.lag as usize];
            let c = omega[p.cur as usize].as_array();
            let x = [1.0, l.omega_h, l.omega_s, l.omega_u, p.e_lag];
            let mut xi = [0.0; 3];
            for k in 0..3 {
                xi[k] = c[k] - (0..5).map(|j| coef[k][j] * x[j]).sum::<f64>();
            }
            let z = &self.z[i];
            let g = [
                xi[0] * z[0],
                xi[0] * z[1],
                xi[1] * z[2],
                xi[1] * z[3],
                xi[1] * z[4],
                xi[2] * z[5],
                xi[2] * z[6],
                xi[2] * z[7],
            ];
            sink(i, &g);
        }
    }

    /// Sample moments E[ξ ⊗ Z] at `params`, or `None` where the chain fails.
    pub fn moments(&self, params: &StructuralParams) -> Option<MomentVector> {
        let omega = self.recover_all(params)?;
        let coef = self.markov(&omega)?;
        let mut m = MomentVector::zeros();
        self.contributions(&omega, &coef, |_, g| {
            for k in 0..N_MOMENTS {
                m[k] += g[k];
            }
        });
        m /= self.pairs.len() as f64;
        m.iter().all(|v| v.is_finite()).then_some(m)
    }

    /// Law of motion at `params` (fast path, coefficients only).
    pub fn markov_coefficients(&self, params: &StructuralParams) -> Option<[[f64; 5]; 3]> {
        let omega = self.recover_all(params)?;
        self.markov(&omega)
    }

    /// Plant-clustered covariance of the moment contributions at `params`.
    pub fn moment_covariance(&self, params: &StructuralParams) -> Option<WeightMatrix> {
        let omega = self.recover_all(params)?;
        let coef = self.markov(&omega)?;
        let mut sums = vec![MomentVector::zeros(); self.n_clusters];
        let mut mean = MomentVector::zeros();
        self.contributions(&omega, &coef, |i, g| {
            let v = MomentVector::from_column_slice(g);
            sums[self.pairs[i].cluster as usize] += v;
            mean += v;
        });
        let n = self.pairs.len() as f64;
        mean /= n;
        let mut counts = vec![0.0; self.n_clusters];
        for p in &self.pairs {
            counts[p.cluster as usize] += 1.0;
        }
        let mut s = WeightMatrix::zeros();
        for (sum, cnt) in sums.iter().zip(&counts) {
            let d = sum - mean * *cnt;
            s += d * d.transpose();
        }
        Some(s / n)
    }
}

/// GMM criterion m'Wm at unconstrained parameters. The J statistic is this
/// value times the number of moment observations.
pub fn gmm_objective(x: &[f64], problem: &GmmProblem, w: &WeightMatrix) -> f64 {
    match problem.moments(&from_unconstrained(x)) {
        Some(m) => {
            let v = (m.transpose() * w * m)[(0, 0)];
            if v.is_finite() {
                v.max(0.0)
            } else {
                PENALTY
            }
        }
        None => PENALTY,
    }
}

/// Inverts a moment covariance, adding a ridge when it is singular.
fn optimal_weight(s: &WeightMatrix) -> (WeightMatrix, Option<f64>) {
    let sym = (s + s.transpose()) * 0.5;
    if let Some(ch) = sym.cholesky() {
        let inv = ch.inverse();
        if inv.iter().all(|v| v.is_finite()) {
            return (inv, None);
        }
    }
    let scale = sym.trace() / N_MOMENTS as f64;
    let mut ridge = 1e-8 * scale.max(1e-300);
    loop {
        let m = sym + WeightMatrix::identity() * ridge;
        if let Some(ch) = m.cholesky() {
            log::warn!("step-2 moment covariance is singular; ridge {ridge:e} added");
            return (ch.inverse(), Some(ridge));
        }
        ridge *= 10.0;
    }
}

/// Residual vector whose squared norm equals m'Wm, for least-squares solvers.
fn weighted_residuals(problem: &GmmProblem, chol_t: &WeightMatrix, x: &[f64]) -> Vec<f64> {
    match problem.moments(&from_unconstrained(x)) {
        Some(m) => (chol_t * m).iter().copied().collect(),
        None => vec![1e5; N_MOMENTS],
    }
}

fn weight_factor(w: &WeightMatrix) -> WeightMatrix {
    // W = L Lᵀ, so m'Wm = ||Lᵀ m||².
    match ((w + w.transpose()) * 0.5).cholesky() {
        Some(ch) => ch.l().transpose(),
        None => WeightMatrix::identity(),
    }
}

/// Levenberg–Marquardt on the weighted moment residuals from `x0`; keeps
/// `x0` if the polish does not improve the criterion.
fn polish(problem: &GmmProblem, w: &WeightMatrix, x0: &[f64], lm_opts: &LevenbergMarquardt) -> (Vec<f64>, f64, bool) {
    let lt = weight_factor(w);
    let lm = levenberg_marquardt(|v| weighted_residuals(problem, &lt, v), x0, lm_opts);
    let v0 = gmm_objective(x0, problem, w);
    let v1 = gmm_objective(&lm.x, problem, w);
    if v1 <= v0 {
        (lm.x, v1, lm.converged && v1 < PENALTY)
    } else {
        (x0.to_vec(), v0, v0 < PENALTY)
    }
}

/// Minimizes m'Wm. With simplex options, every start (the given point plus
/// jittered copies) runs a simplex search followed by a Levenberg–Marquardt
/// polish and the best end point wins; without, only the polish runs.
fn minimize_gmm(
    problem: &GmmProblem,
    w: &WeightMatrix,
    start: &[f64],
    nm: Option<&NelderMead>,
    lm_opts: &LevenbergMarquardt,
    exec: Execution,
) -> (Vec<f64>, f64, bool) {
    let Some(opts) = nm else {
        return polish(problem, w, start, lm_opts);
    };
    let mut rng = numerics::rng_stream(opts.seed, 0x4e4d);
    let starts: Vec<Vec<f64>> = (0..opts.restarts.max(1))
        .map(|k| {
            start
                .iter()
                .map(|v| if k == 0 { *v } else { v + opts.jitter * rng.sample::<f64, _>(StandardNormal) })
                .collect()
        })
        .collect();
    let single = NelderMead { restarts: 1, ..*opts };
    let runs = exec.map(&starts, |x0| {
        let m = minimize_best_effort(|v| gmm_objective(v, problem, w), x0, &single, Execution::Sequential);
        let (x, v, c) = polish(problem, w, &m.x, lm_opts);
        (x, v, c || m.converged)
    });
    runs.into_iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("at least one start")
}

/// Values reported for the production function, in table order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportedValues {
    pub sigma_outer: f64,
    pub sigma_inner: f64,
    pub markdown: f64,
    pub tau: f64,
    pub alpha_k: f64,
    pub alpha_m: f64,
    pub alpha_l: f64,
    pub alpha_s: f64,
    pub alpha_u: f64,
}

pub const REPORTED_NAMES: [&str; 9] = [
    "sigma_outer",
    "sigma_inner",
    "markdown",
    "tau",
    "alpha_K",
    "alpha_M",
    "alpha_L",
    "alpha_S",
    "alpha_U",
];

impl ReportedValues {
    pub fn new(p: &StructuralParams, s: &CesShares) -> Self {
        Self {
            sigma_outer: p.sigma_outer(),
            sigma_inner: p.sigma_inner(),
            markdown: p.markdown(),
            tau: p.tau,
            alpha_k: s.alpha_k,
            alpha_m: s.alpha_m,
            alpha_l: s.alpha_l,
            alpha_s: s.alpha_s,
            alpha_u: s.alpha_u,
        }
    }

    pub fn to_array(&self) -> [f64; 9] {
        [
            self.sigma_outer,
            self.sigma_inner,
            self.markdown,
            self.tau,
            self.alpha_k,
            self.alpha_m,
            self.alpha_l,
            self.alpha_s,
            self.alpha_u,
        ]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            sigma_outer: v[0],
            sigma_inner: v[1],
            markdown: v[2],
            tau: v[3],
            alpha_k: v[4],
            alpha_m: v[5],
            alpha_l: v[6],
            alpha_s: v[7],
            alpha_u: v[8],
        }
    }
}

/// How bootstrap replicates re-estimate the parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplicateMode {
    /// Both steps, each warm-started from the full-sample estimates.
    #[default]
    TwoStep,
    /// Step 2 only, with the full-sample weighting matrix.
    FixedWeight,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmOptions {
    /// Starting parameters for step 1.
    pub start: StructuralParams,
    pub nelder_mead: NelderMead,
    pub first_stage: FirstStageOptions,
    pub bootstrap: Option<BootstrapPlan>,
    pub replicate_mode: ReplicateMode,
    pub interval: IntervalKind,
    pub execution: Execution,
}

impl Default for GmmOptions {
    fn default() -> Self {
        Self {
            start: StructuralParams {
                tau: 0.1,
                eta_m: 1.0,
                theta: -1.0,
                rho: -1.0,
            },
            nelder_mead: NelderMead {
                tol: 1e-4,
                ftol: 1e-12,
                max_iter: 3_000,
                initial_step: 0.3,
                restarts: 8,
                jitter: 0.7,
                seed: 0,
            },
            first_stage: FirstStageOptions::default(),
            bootstrap: None,
            replicate_mode: ReplicateMode::TwoStep,
            interval: IntervalKind::default(),
            execution: Execution::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmBootstrap {
    pub requested: usize,
    /// Replicates retained (outer and inner nests both gross complements).
    pub effective: usize,
    pub failed: usize,
    pub rejected: usize,
    pub se: ReportedValues,
    pub interval: IntervalKind,
    /// 90% intervals in [`REPORTED_NAMES`] order.
    pub interval90: Vec<(f64, f64)>,
    pub markov_se: [[f64; 5]; 3],
    pub markov_interval90: [[(f64, f64); 5]; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmResult {
    pub params: StructuralParams,
    pub shares: CesShares,
    pub reported: ReportedValues,
    pub step1: StructuralParams,
    pub objective: f64,
    pub j_statistic: f64,
    pub n_moment_obs: usize,
    pub n_plants: usize,
    pub converged: bool,
    /// Ridge added to the step-2 covariance when it was singular.
    pub weight_ridge: Option<f64>,
    pub markov: MarkovEstimate,
    pub first_stage_pooled: bool,
    pub bootstrap: Option<GmmBootstrap>,
}

struct PointEstimate {
    x1: Vec<f64>,
    x2: Vec<f64>,
    objective: f64,
    weight: WeightMatrix,
    ridge: Option<f64>,
    converged: bool,
}

fn estimate_point(problem: &GmmProblem, opts: &GmmOptions) -> Result<PointEstimate> {
    let exec = opts.execution;
    let id = WeightMatrix::identity();
    let x0 = to_unconstrained(&opts.start);
    let (x1, _, c1) = minimize_gmm(problem, &id, &x0, Some(&opts.nelder_mead), &LevenbergMarquardt::default(), exec);
    let s = problem
        .moment_covariance(&from_unconstrained(&x1))
        .ok_or_else(|| Error::numerical("moment covariance undefined at the step-1 estimate"))?;
    let (w, ridge) = optimal_weight(&s);
    let nm2 = NelderMead {
        initial_step: opts.nelder_mead.initial_step / 3.0,
        jitter: opts.nelder_mead.jitter / 3.0,
        seed: opts.nelder_mead.seed.wrapping_add(1),
        restarts: opts.nelder_mead.restarts.div_ceil(2),
        ..opts.nelder_mead
    };
    let (x2, v2, c2) = minimize_gmm(problem, &w, &x1, Some(&nm2), &LevenbergMarquardt::default(), exec);
    if v2 >= PENALTY {
        return Err(Error::numerical("GMM objective could not be evaluated near the estimate"));
    }
    Ok(PointEstimate {
        x1,
        x2,
        objective: v2,
        weight: w,
        ridge,
        converged: c1 && c2,
    })
}

/// Two-step GMM: W = I, then W = inverse plant-clustered moment covariance at
/// the step-1 estimate. Bootstrap replicates resample plants, re-normalize,
/// and re-run the first stage and both GMM steps.
pub fn two_step_gmm(np: &NormalizedPanel, fs: &FirstStageFit, opts: &GmmOptions) -> Result<GmmResult> {
    let problem = GmmProblem::new(np, fs)?;
    let est = estimate_point(&problem, opts)?;
    let params = from_unconstrained(&est.x2);
    params.validate()?;
    let shares = problem.shares(params.tau)?;
    let pp = recover_productivity_panel(&params, np, fs)?;
    let markov = markov_regression(&pp, np)?;

    let reported = ReportedValues::new(&params, &shares);
    let bootstrap = match &opts.bootstrap {
        None => None,
        Some(plan) => {
            let mut center = reported.to_array().to_vec();
            center.extend(markov.coef.iter().flatten());
            Some(bootstrap_gmm(np, &est, &center, plan, opts)?)
        }
    };

    Ok(GmmResult {
        params,
        shares,
        reported,
        step1: from_unconstrained(&est.x1),
        objective: est.objective,
        j_statistic: est.objective * problem.n() as f64,
        n_moment_obs: problem.n(),
        n_plants: np.plant_spans().len(),
        converged: est.converged,
        weight_ridge: est.ridge,
        markov,
        first_stage_pooled: fs.pooled,
        bootstrap,
    })
}

/// Builds the re-normalized panel of a plant resample. Drawn plants receive
/// fresh identifiers `1..=n` in draw order.
pub fn resample_panel(np: &NormalizedPanel, draw: &[usize]) -> Result<NormalizedPanel> {
    let spans = np.plant_spans();
    let aug = np.augmented_rows();
    let mut rows: Vec<AugmentedRow> = Vec::with_capacity(np.len());
    for (k, &j) in draw.iter().enumerate() {
        for r in spans[j].clone() {
            let mut a = aug[r].clone();
            a.raw.plant_id = k as u64 + 1;
            rows.push(a);
        }
    }
    normalize_rows(rows, np.scope())
}

/// Replicates start next to their optimum, so looser tolerances suffice.
const REPLICATE_LM: LevenbergMarquardt = LevenbergMarquardt {
    max_iter: 60,
    xtol: 1e-7,
    ftol: 1e-9,
    diff_step: 1e-7,
};

fn bootstrap_gmm(
    np: &NormalizedPanel,
    est: &PointEstimate,
    center: &[f64],
    plan: &BootstrapPlan,
    opts: &GmmOptions,
) -> Result<GmmBootstrap> {
    let cache = if np.scope() == NormalizationScope::Global {
        Some(FirstStageCache::new(np, &opts.first_stage)?)
    } else {
        None
    };
    let n_plants = np.plant_spans().len();
    let result = numerics::cluster_bootstrap(
        plan,
        n_plants,
        opts.execution,
        |draw, _b| {
            let rep = resample_panel(np, draw)?;
            let fs = match &cache {
                Some(c) => c.resample(np, draw, &rep)?,
                None => first_stage(&rep, &FirstStageOptions { pooling: Pooling::Auto })?,
            };
            let problem = GmmProblem::new(&rep, &fs)?;
            let x = match opts.replicate_mode {
                ReplicateMode::FixedWeight => {
                    minimize_gmm(&problem, &est.weight, &est.x2, None, &REPLICATE_LM, Execution::Sequential).0
                }
                ReplicateMode::TwoStep => {
                    let id = WeightMatrix::identity();
                    let (x1, _, _) = minimize_gmm(&problem, &id, &est.x1, None, &REPLICATE_LM, Execution::Sequential);
                    let s = problem
                        .moment_covariance(&from_unconstrained(&x1))
                        .ok_or_else(|| Error::numerical("replicate moment covariance undefined"))?;
                    let (w, _) = optimal_weight(&s);
                    minimize_gmm(&problem, &w, &est.x2, None, &REPLICATE_LM, Execution::Sequential).0
                }
            };
            let p = from_unconstrained(&x);
            if gmm_objective(&x, &problem, &WeightMatrix::identity()) >= PENALTY {
                return Err(Error::numerical("replicate estimate is outside the evaluable region"));
            }
            let shares = problem.shares(p.tau)?;
            let markov = problem
                .markov_coefficients(&p)
                .ok_or_else(|| Error::numerical("replicate law of motion undefined"))?;
            let mut out = ReportedValues::new(&p, &shares).to_array().to_vec();
            out.extend(markov.iter().flatten());
            out.push(p.rho);
            out.push(p.theta);
            Ok(out)
        },
        |v| {
            let n = v.len();
            v[n - 2] < 0.0 && v[n - 1] < 0.0
        },
    )?;
    if result.retained() < 2 {
        return Err(Error::numerical(format!(
            "only {} bootstrap replicates retained",
            result.retained()
        )));
    }
    let ci = |j: usize| result.interval(j, 0.9, center[j], opts.interval);
    let interval90 = (0..9).map(ci).collect();
    let mut markov_se = [[0.0; 5]; 3];
    let mut markov_interval90 = [[(0.0, 0.0); 5]; 3];
    for k in 0..3 {
        for j in 0..5 {
            markov_se[k][j] = result.sd[9 + 5 * k + j];
            markov_interval90[k][j] = ci(9 + 5 * k + j);
        }
    }
    Ok(GmmBootstrap {
        requested: plan.replicates,
        effective: result.retained(),
        failed: result.failed,
        rejected: result.rejected,
        interval: opts.interval,
        se: ReportedValues::from_slice(&result.sd[..9]),
        interval90,
        markov_se,
        markov_interval90,
    })
}

// ---------------------------------------------------------------------------
// Table documents

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub name: String,
    pub estimate: f64,
    pub se: Option<f64>,
    /// Bootstrap 90% interval.
    pub interval90: Option<(f64, f64)>,
}

/// Production-function table: transforms, shares, raw parameters, J.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table2 {
    pub entries: Vec<TableEntry>,
    pub raw: StructuralParams,
    pub j_statistic: f64,
    pub n_moment_obs: usize,
    pub n_plants: usize,
    pub bootstrap_requested: Option<usize>,
    pub bootstrap_effective: Option<usize>,
    pub converged: bool,
    pub first_stage_pooled: bool,
}

/// Law-of-motion table: one block per equation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table3 {
    pub equations: Vec<Table3Equation>,
    pub n_pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table3Equation {
    pub dependent: String,
    pub entries: Vec<TableEntry>,
}

impl GmmResult {
    pub fn table2(&self) -> Table2 {
        let est = self.reported.to_array();
        let se = self.bootstrap.as_ref().map(|b| b.se.to_array());
        Table2 {
            entries: REPORTED_NAMES
                .iter()
                .enumerate()
                .map(|(j, n)| TableEntry {
                    name: (*n).to_string(),
                    estimate: est[j],
                    se: se.map(|s| s[j]),
                    interval90: self.bootstrap.as_ref().map(|b| b.interval90[j]),
                })
                .collect(),
            raw: self.params,
            j_statistic: self.j_statistic,
            n_moment_obs: self.n_moment_obs,
            n_plants: self.n_plants,
            bootstrap_requested: self.bootstrap.as_ref().map(|b| b.requested),
            bootstrap_effective: self.bootstrap.as_ref().map(|b| b.effective),
            converged: self.converged,
            first_stage_pooled: self.first_stage_pooled,
        }
    }

    /// Law of motion with bootstrap s.e. when available, clustered OLS s.e.
    /// otherwise.
    pub fn table3(&self) -> Table3 {
        let names = ["omega_H", "omega_S", "omega_U"];
        Table3 {
            equations: (0..3)
                .map(|k| Table3Equation {
                    dependent: names[k].to_string(),
                    entries: (0..5)
                        .map(|j| TableEntry {
                            name: MARKOV_REGRESSORS[j].to_string(),
                            estimate: self.markov.coef[k][j],
                            se: Some(
                                self.bootstrap
                                    .as_ref()
                                    .map_or(self.markov.se[k][j], |b| b.markov_se[k][j]),
                            ),
                            interval90: self.bootstrap.as_ref().map(|b| b.markov_interval90[k][j]),
                        })
                        .collect(),
                })
                .collect(),
            n_pairs: self.markov.pairs.len(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transform_round_trips() {
        let p = StructuralParams::colombia();
        let q = from_unconstrained(&to_unconstrained(&p));
        assert!((p.tau - q.tau).abs() < 1e-12);
        assert!((p.eta_m - q.eta_m).abs() < 1e-12);
        assert!((p.theta - q.theta).abs() < 1e-12);
        assert!((p.rho - q.rho).abs() < 1e-12);
    }

    #[test]
    fn transforms_in_unit_interval_iff_complements() {
        for rho in [-3.0, -0.5, 0.3, 0.9] {
            let p = StructuralParams { tau: 0.1, eta_m: 1.0, theta: -1.0, rho };
            assert_eq!(p.sigma_outer() < 1.0, rho < 0.0);
        }
    }
}
