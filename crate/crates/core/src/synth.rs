//! Synthetic plant panels generated from the structural model: Markov
//! productivity with learning by exporting, logistic export choice, a
//! monotone investment policy, and static input choices that solve the
//! cost-minimization problem exactly.
//!
//! Simulation runs in two passes. The first draws every state path (capital,
//! wages, productivity, export status, supply shifters), which do not depend
//! on demand. The second solves the static allocation for every observed
//! plant-year. Demand is `Q = cap · exp(−g)` where `cap = e^h a_K^(1/ρ) K` is
//! the output reachable with unlimited variable inputs and `g` is linear in
//! log wages, the log supply shifter and the export flag. Its intercept is
//! calibrated so that the realized capital wedge matches the configured τ.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ces::{self, CesShares, CostMinState, ProductivityTriple, ShareBasis, StructuralParams};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::numerics::rng_stream;
use crate::panel::{self, NormalizationScope, Panel, PlantYear, PriceTable};

/// Productivity law of motion `ω' = c + A ω + b e + ξ` over (H, S, U).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkovProcess {
    /// Rows are equations H, S, U; columns are constant, ω_H, ω_S, ω_U, export.
    pub coef: [[f64; 5]; 3],
    pub shock_cov: [[f64; 3]; 3],
}

impl MarkovProcess {
    /// Pooled Colombian estimates of the law of motion.
    pub fn colombia() -> Self {
        Self {
            coef: [
                [0.016, 0.806, -0.002, -0.011, 0.093],
                [0.075, 0.010, 0.857, 0.049, 0.019],
                [0.091, 0.008, -0.005, 0.942, 0.078],
            ],
            shock_cov: diag3([0.03, 0.045, 0.045]),
        }
    }

    pub fn lag_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.coef[i][j + 1])
    }

    pub fn constant(&self) -> Vector3<f64> {
        Vector3::from_fn(|i, _| self.coef[i][0])
    }

    pub fn export_effect(&self) -> Vector3<f64> {
        Vector3::from_fn(|i, _| self.coef[i][4])
    }

    pub fn spectral_radius(&self) -> f64 {
        self.lag_matrix()
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }

    fn validate(&self) -> Result<()> {
        let r = self.spectral_radius();
        if !(r < 1.0) {
            return Err(Error::Config(format!(
                "productivity law of motion is not stationary (spectral radius {r:.4})"
            )));
        }
        let cov = Matrix3::from_fn(|i, j| self.shock_cov[i][j]);
        if (cov - cov.transpose()).amax() > 1e-12 {
            return Err(Error::Config("shock covariance must be symmetric".into()));
        }
        let min_eig = SymmetricEigen::new(cov).eigenvalues.min();
        if min_eig < -1e-12 {
            return Err(Error::Config(format!(
                "shock covariance is not positive semi-definite (eigenvalue {min_eig:e})"
            )));
        }
        Ok(())
    }

    /// Matrix square root used to draw correlated shocks.
    fn shock_factor(&self) -> Matrix3<f64> {
        let eig = SymmetricEigen::new(Matrix3::from_fn(|i, j| self.shock_cov[i][j]));
        let d = Matrix3::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
        eig.eigenvectors * d
    }
}

pub fn diag3(sd: [f64; 3]) -> [[f64; 3]; 3] {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        m[i][i] = sd[i] * sd[i];
    }
    m
}

/// Plant-level log-AR(1) wages around a plant-specific mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WageProcess {
    /// Mean log wage, skilled then unskilled.
    pub mean_log: [f64; 2],
    pub persistence: f64,
    pub innovation_sd: [f64; 2],
    pub plant_sd: [f64; 2],
}

/// Industry-year log supply shifter: industry level plus AR(1) deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupplyProcess {
    pub industry_sd: f64,
    pub persistence: f64,
    pub innovation_sd: f64,
}

/// Demand gap `g = g₀ + b_S (log W_S − μ_S) + b_U (log W_U − μ_U) + b_Φ log Φ + b_e e`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemandProcess {
    /// Starting value for g₀; replaced by the calibrated value when
    /// `calibrate_tau` is set.
    pub intercept: f64,
    pub wage_skilled: f64,
    pub wage_unskilled: f64,
    pub supply: f64,
    pub export: f64,
    pub calibrate_tau: bool,
}

/// `log I = a₀ + a_K log K + a_H ω_H + a_e e_t + a_n e_{t+1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvestmentPolicy {
    pub intercept: f64,
    pub capital: f64,
    pub omega_h: f64,
    pub export_now: f64,
    pub export_next: f64,
    pub depreciation: f64,
    /// Standard deviation of an i.i.d. log investment shock.
    pub shock_sd: f64,
    /// Probability that a plant-year records zero investment.
    pub zero_rate: f64,
}

/// Logistic export index: start-up or continuation intercept plus a linear
/// function of the log state and an industry effect.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportIndex {
    pub startup: f64,
    pub continuation: f64,
    /// Coefficient on log K relative to the initial capital mean.
    pub capital: f64,
    pub omega: [f64; 3],
    /// Coefficients on log wages relative to their means.
    pub wages: [f64; 2],
    pub supply: f64,
    pub industry_sd: f64,
}

/// Log machinery stock: plant effect, AR(1) deviation, and a permanent step
/// from the first export year on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MachineryProcess {
    pub mean_log: f64,
    pub plant_sd: f64,
    pub persistence: f64,
    pub innovation_sd: f64,
    pub entry_step: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_plants: usize,
    pub n_years: usize,
    pub n_industries: usize,
    pub burn_in: usize,
    pub start_year: i32,
    /// Structural truth; `tau` is the target capital wedge.
    pub params: StructuralParams,
    /// Technology share constants in raw units (sum to one per nest).
    pub technology: CesShares,
    pub markov: MarkovProcess,
    pub wages: WageProcess,
    pub supply: SupplyProcess,
    pub demand: DemandProcess,
    pub investment: InvestmentPolicy,
    pub export: ExportIndex,
    /// Mean and s.d. of initial log capital.
    pub initial_capital: [f64; 2],
    /// Per-year probability of permanent exit after the first observed year.
    pub exit_rate: f64,
    /// Permanent level shift in (ω_H, ω_S, ω_U) from the first export year on,
    /// on top of the latent Markov state.
    pub entry_effect: [f64; 3],
    pub machinery: Option<MachineryProcess>,
    /// Standard deviation of log output measurement error.
    pub measurement_sd: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_plants: 2000,
            n_years: 10,
            n_industries: 10,
            burn_in: 10,
            start_year: 1981,
            params: StructuralParams::colombia(),
            technology: CesShares {
                alpha_k: 0.1,
                alpha_m: 0.5,
                alpha_l: 0.4,
                alpha_s: 0.45,
                alpha_u: 0.55,
            },
            markov: MarkovProcess::colombia(),
            wages: WageProcess {
                mean_log: [1.2, 0.3],
                persistence: 0.6,
                innovation_sd: [0.4, 0.4],
                plant_sd: [0.5, 0.5],
            },
            supply: SupplyProcess {
                industry_sd: 0.6,
                persistence: 0.6,
                innovation_sd: 0.3,
            },
            demand: DemandProcess {
                intercept: 2.5,
                wage_skilled: 0.35,
                wage_unskilled: 0.35,
                supply: -0.35,
                export: -0.2,
                calibrate_tau: true,
            },
            investment: InvestmentPolicy {
                intercept: -2.0,
                capital: 0.9,
                omega_h: 1.5,
                export_now: 0.1,
                export_next: 0.2,
                depreciation: 0.1,
                shock_sd: 0.0,
                zero_rate: 0.0,
            },
            export: ExportIndex {
                startup: -3.5,
                continuation: 3.0,
                capital: 0.4,
                omega: [1.0, 0.3, 0.3],
                wages: [-0.3, -0.3],
                supply: 0.2,
                industry_sd: 0.3,
            },
            initial_capital: [3.0, 0.6],
            exit_rate: 0.02,
            entry_effect: [0.0; 3],
            machinery: Some(MachineryProcess {
                mean_log: 2.0,
                plant_sd: 0.5,
                persistence: 0.7,
                innovation_sd: 0.1,
                entry_step: 0.2,
            }),
            measurement_sd: 0.05,
            seed: 20240101,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_plants == 0 || self.n_years == 0 || self.n_industries == 0 {
            return Err(Error::Config("panel dimensions must be positive".into()));
        }
        self.params.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.technology.validate().map_err(|e| Error::Config(e.to_string()))?;
        let t = &self.technology;
        if (t.alpha_k + t.alpha_m + t.alpha_l - 1.0).abs() > 1e-12
            || (t.alpha_s + t.alpha_u - 1.0).abs() > 1e-12
        {
            return Err(Error::Config("technology shares must sum to one per nest".into()));
        }
        if self.params.rho >= 0.0 {
            return Err(Error::Config(
                "the simulator's demand design requires gross complements in the outer nest (rho < 0)"
                    .into(),
            ));
        }
        self.markov.validate()?;
        if !(0.0..1.0).contains(&self.exit_rate) || !(0.0..1.0).contains(&self.investment.zero_rate) {
            return Err(Error::Config("rates must lie in [0, 1)".into()));
        }
        if !(self.investment.depreciation > 0.0 && self.investment.depreciation < 1.0) {
            return Err(Error::Config("depreciation must lie in (0, 1)".into()));
        }
        if self.investment.omega_h <= 0.0 {
            return Err(Error::Config(
                "investment must be strictly increasing in omega_H".into(),
            ));
        }
        if self.measurement_sd < 0.0 {
            return Err(Error::Config("measurement_sd must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn industry_code(&self, k: usize) -> u32 {
        311 + 10 * k as u32
    }
}

/// Hidden truth for one observed plant-year.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub plant_id: u64,
    pub year: i32,
    /// Productivity in the estimator's normalized representation.
    pub omega: ProductivityTriple,
    /// Productivity in the simulator's raw units.
    pub omega_raw: ProductivityTriple,
    /// True probability of exporting next year.
    pub ccp: f64,
    /// Raw log planned output.
    pub planned_log_output: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub demand_intercept: f64,
    pub realized_tau: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimPanel {
    pub panel: Panel,
    /// Aligned with `panel.rows()`.
    pub truth: Vec<TruthRow>,
    pub price_index: PriceTable,
    pub supply_shifter: BTreeMap<(u32, i32), f64>,
    pub calibration: Calibration,
    /// Shares of the normalized representation at the true τ.
    pub shares: CesShares,
    /// Constant added to raw productivity to obtain normalized productivity.
    pub representation_shift: [f64; 3],
    /// Law of motion in the normalized representation.
    pub markov_normalized: [[f64; 5]; 3],
    pub max_foc_residual: f64,
}

/// Per-year draws for one plant that do not depend on demand.
#[derive(Clone, Debug)]
struct PathRow {
    year: i32,
    industry: usize,
    capital: f64,
    investment: f64,
    wage_s: f64,
    wage_u: f64,
    omega: ProductivityTriple,
    export: bool,
    ccp: f64,
    demand_shift: f64,
    log_phi: f64,
    machinery: Option<f64>,
    eps: f64,
}

fn industry_supply(cfg: &SimConfig) -> Vec<Vec<f64>> {
    let mut rng = rng_stream(cfg.seed, 0);
    let total = cfg.burn_in + cfg.n_years;
    let s = &cfg.supply;
    (0..cfg.n_industries)
        .map(|_| {
            let level = s.industry_sd * rng.sample::<f64, _>(StandardNormal);
            let sd0 = s.innovation_sd / (1.0 - s.persistence * s.persistence).max(1e-12).sqrt();
            let mut dev = sd0 * rng.sample::<f64, _>(StandardNormal);
            (0..total)
                .map(|_| {
                    let v = level + dev;
                    dev = s.persistence * dev + s.innovation_sd * rng.sample::<f64, _>(StandardNormal);
                    v
                })
                .collect()
        })
        .collect()
}

fn industry_export_effects(cfg: &SimConfig) -> Vec<f64> {
    let mut rng = rng_stream(cfg.seed, 1);
    (0..cfg.n_industries)
        .map(|_| cfg.export.industry_sd * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Truncated standard normal draw (|z| ≤ 4) keeping log states bounded.
fn z4(rng: &mut impl Rng) -> f64 {
    rng.sample::<f64, _>(StandardNormal).clamp(-4.0, 4.0)
}

fn simulate_plant(
    cfg: &SimConfig,
    plant: usize,
    supply: &[Vec<f64>],
    export_fx: &[f64],
    shock: &Matrix3<f64>,
) -> Vec<PathRow> {
    let mut rng = rng_stream(cfg.seed, 1000 + plant as u64);
    let industry = plant % cfg.n_industries;
    let mk = &cfg.markov;
    let a = mk.lag_matrix();
    let c = mk.constant();
    let b = mk.export_effect();
    let w = &cfg.wages;
    let inv = &cfg.investment;
    let ex = &cfg.export;

    let wage_fx = [w.plant_sd[0] * z4(&mut rng), w.plant_sd[1] * z4(&mut rng)];
    let wsd0 = |k: usize| w.innovation_sd[k] / (1.0 - w.persistence.powi(2)).max(1e-12).sqrt();
    let mut wage_dev = [wsd0(0) * z4(&mut rng), wsd0(1) * z4(&mut rng)];
    let stationary = (Matrix3::identity() - a)
        .try_inverse()
        .map(|m| m * c)
        .unwrap_or_else(|| c);
    let mut latent = stationary;
    let mut log_k = cfg.initial_capital[0] + cfg.initial_capital[1] * z4(&mut rng);
    let mut export = false;
    let mut ever_exported = false;
    let mach = cfg.machinery.as_ref();
    let mach_fx = mach.map_or(0.0, |m| m.plant_sd * z4(&mut rng));
    let mut mach_dev = mach.map_or(0.0, |m| {
        m.innovation_sd / (1.0 - m.persistence.powi(2)).max(1e-12).sqrt() * z4(&mut rng)
    });

    let total = cfg.burn_in + cfg.n_years;
    let mut rows = Vec::with_capacity(cfg.n_years);
    for t in 0..total {
        let observed = t >= cfg.burn_in;
        if observed && t > cfg.burn_in && rng.random::<f64>() < cfg.exit_rate {
            break;
        }
        let entry = Vector3::from(cfg.entry_effect) * if ever_exported { 1.0 } else { 0.0 };
        let om = latent + entry;
        let omega = ProductivityTriple::new(om[0], om[1], om[2]);
        let log_ws = w.mean_log[0] + wage_fx[0] + wage_dev[0];
        let log_wu = w.mean_log[1] + wage_fx[1] + wage_dev[1];
        let log_phi = supply[industry][t];
        let e_now = f64::from(u8::from(export));

        let index = if export { ex.continuation } else { ex.startup }
            + ex.capital * (log_k - cfg.initial_capital[0])
            + ex.omega[0] * om[0]
            + ex.omega[1] * om[1]
            + ex.omega[2] * om[2]
            + ex.wages[0] * (log_ws - w.mean_log[0])
            + ex.wages[1] * (log_wu - w.mean_log[1])
            + ex.supply * log_phi
            + export_fx[industry];
        let ccp = logistic(index);
        let export_next = rng.random::<f64>() < ccp;
        let e_next = f64::from(u8::from(export_next));

        let zero_inv = inv.zero_rate > 0.0 && rng.random::<f64>() < inv.zero_rate;
        let inv_shock = inv.shock_sd * z4(&mut rng);
        let investment = if zero_inv {
            0.0
        } else {
            (inv.intercept
                + inv.capital * log_k
                + inv.omega_h * om[0]
                + inv.export_now * e_now
                + inv.export_next * e_next
                + inv_shock)
                .exp()
        };
        let d = &cfg.demand;
        let demand_shift = d.wage_skilled * (log_ws - w.mean_log[0])
            + d.wage_unskilled * (log_wu - w.mean_log[1])
            + d.supply * log_phi
            + d.export * e_now;
        let machinery = mach.map(|m| {
            (m.mean_log + mach_fx + mach_dev + if ever_exported { m.entry_step } else { 0.0 }).exp()
        });
        let eps = cfg.measurement_sd * rng.sample::<f64, _>(StandardNormal);

        if observed {
            rows.push(PathRow {
                year: cfg.start_year + (t - cfg.burn_in) as i32,
                industry,
                capital: log_k.exp(),
                investment,
                wage_s: log_ws.exp(),
                wage_u: log_wu.exp(),
                omega,
                export,
                ccp,
                demand_shift,
                log_phi,
                machinery,
                eps,
            });
        }

        // Transition to t + 1.
        let xi = shock * Vector3::new(z4(&mut rng), z4(&mut rng), z4(&mut rng));
        latent = c + a * latent + b * e_now + xi;
        log_k = ((1.0 - inv.depreciation) * log_k.exp() + investment).ln();
        for k in 0..2 {
            wage_dev[k] = w.persistence * wage_dev[k] + w.innovation_sd[k] * z4(&mut rng);
        }
        if let Some(m) = mach {
            mach_dev = m.persistence * mach_dev + m.innovation_sd * z4(&mut rng);
        }
        export = export_next;
        ever_exported |= export;
    }
    rows
}

struct Allocation {
    planned: f64,
    skilled: f64,
    unskilled: f64,
    materials: f64,
    materials_exp: f64,
    lambda: f64,
}

fn solve_statics(
    cfg: &SimConfig,
    rows: &[PathRow],
    intercept: f64,
    exec: Execution,
) -> Result<Vec<Allocation>> {
    let p = &cfg.params;
    let a = &cfg.technology;
    exec.try_map_range(rows.len(), |i| {
        let r = &rows[i];
        let g = intercept + r.demand_shift;
        if !(g > 1e-6) {
            return Err(Error::Config(format!(
                "demand reaches capacity (gap {g:.3e}); raise the demand intercept"
            )));
        }
        let log_cap = r.omega.omega_h + a.alpha_k.ln() / p.rho + r.capital.ln();
        let planned = (log_cap - g).exp();
        let state = CostMinState {
            capital: r.capital,
            wage_skilled: r.wage_s,
            wage_unskilled: r.wage_u,
            supply_shifter: r.log_phi.exp(),
        };
        let sol = ces::static_cost_min(&state, &r.omega, planned, p, a)?;
        Ok(Allocation {
            planned,
            skilled: sol.skilled,
            unskilled: sol.unskilled,
            materials: sol.materials,
            materials_exp: sol.materials_exp,
            lambda: sol.lambda,
        })
    })
}

/// Capital wedge implied by an allocation in the normalized representation.
fn realized_tau(cfg: &SimConfig, rows: &[PathRow], alloc: &[Allocation]) -> f64 {
    let n = rows.len() as f64;
    let mean_log_k = rows.iter().map(|r| r.capital.ln()).sum::<f64>() / n;
    let mean_log_m = alloc.iter().map(|a| a.materials.ln()).sum::<f64>() / n;
    let a = &cfg.technology;
    a.alpha_k / a.alpha_m * (cfg.params.rho * (mean_log_k - mean_log_m)).exp()
}

pub fn simulate(cfg: &SimConfig, exec: Execution) -> Result<SimPanel> {
    cfg.validate()?;
    let supply = industry_supply(cfg);
    let export_fx = industry_export_effects(cfg);
    let shock = cfg.markov.shock_factor();
    let plants: Vec<Vec<PathRow>> = exec.map_range(cfg.n_plants, |j| {
        simulate_plant(cfg, j, &supply, &export_fx, &shock)
    });
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for (j, p) in plants.into_iter().enumerate() {
        for r in p {
            ids.push(j as u64 + 1);
            rows.push(r);
        }
    }
    if rows.is_empty() {
        return Err(Error::InsufficientData("simulation produced no observations".into()));
    }

    // Calibrate g₀ so the realized wedge equals τ; log τ falls monotonically in g₀.
    let target = cfg.params.tau.ln();
    let mut g0 = cfg.demand.intercept;
    let mut alloc = solve_statics(cfg, &rows, g0, exec)?;
    let mut iterations = 0;
    if cfg.demand.calibrate_tau {
        let mut f0 = realized_tau(cfg, &rows, &alloc).ln() - target;
        let mut g1 = g0 + 0.1;
        let mut alloc1 = solve_statics(cfg, &rows, g1, exec)?;
        let mut f1 = realized_tau(cfg, &rows, &alloc1).ln() - target;
        while f1.abs() > 1e-13 {
            iterations += 1;
            if iterations > 100 {
                return Err(Error::numerical(format!(
                    "demand calibration did not converge (log-wedge gap {f1:e})"
                )));
            }
            let slope = (f1 - f0) / (g1 - g0);
            if !(slope < 0.0) || !slope.is_finite() {
                return Err(Error::numerical("demand calibration lost monotonicity"));
            }
            let step = (-f1 / slope).clamp(-1.0, 1.0);
            let min_shift = rows.iter().map(|r| r.demand_shift).fold(f64::INFINITY, f64::min);
            let g2 = (g1 + step).max(-min_shift + 1e-3);
            let a2 = solve_statics(cfg, &rows, g2, exec)?;
            let f2 = realized_tau(cfg, &rows, &a2).ln() - target;
            g0 = g1;
            f0 = f1;
            g1 = g2;
            f1 = f2;
            alloc1 = a2;
        }
        g0 = g1;
        alloc = alloc1;
    }
    let tau_real = realized_tau(cfg, &rows, &alloc);

    // Industry aggregates and the implied price index.
    let eta = cfg.params.eta_m;
    let mut cells: BTreeMap<(u32, i32), (f64, usize, f64)> = BTreeMap::new();
    for (r, a) in rows.iter().zip(&alloc) {
        let e = cells
            .entry((cfg.industry_code(r.industry), r.year))
            .or_insert((0.0, 0, r.log_phi));
        e.0 += a.materials_exp.ln();
        e.1 += 1;
    }
    let mut price_index = PriceTable::new();
    let mut supply_shifter = BTreeMap::new();
    for (&key, &(sum, n, log_phi)) in &cells {
        let log_ei = sum / n as f64;
        price_index.insert(key, ((log_ei - eta * log_phi) / (1.0 + eta)).exp());
        supply_shifter.insert(key, log_phi.exp());
    }

    let mut panel_rows = Vec::with_capacity(rows.len());
    let mut max_res: f64 = 0.0;
    for ((r, a), &id) in rows.iter().zip(&alloc).zip(&ids) {
        let st = CostMinState {
            capital: r.capital,
            wage_skilled: r.wage_s,
            wage_unskilled: r.wage_u,
            supply_shifter: r.log_phi.exp(),
        };
        let sol = ces::CostMinSolution {
            skilled: a.skilled,
            unskilled: a.unskilled,
            materials: a.materials,
            materials_exp: a.materials_exp,
            lambda: a.lambda,
            newton_iterations: 0,
        };
        let res = ces::foc_residuals(&st, &r.omega, a.planned, &sol, &cfg.params, &cfg.technology)?;
        max_res = res.iter().fold(max_res, |m, v| m.max(v.abs()));
        panel_rows.push(PlantYear {
            plant_id: id,
            industry_id: cfg.industry_code(r.industry),
            year: r.year,
            export: r.export,
            output: a.planned * r.eps.exp(),
            capital: r.capital,
            investment: r.investment,
            skilled: a.skilled,
            unskilled: a.unskilled,
            skilled_pay: a.skilled * r.wage_s,
            unskilled_pay: a.unskilled * r.wage_u,
            materials_exp: a.materials_exp,
            machinery: r.machinery,
        });
    }
    if max_res > 1e-8 {
        return Err(Error::numerical(format!(
            "simulated allocation violates optimality (max FOC residual {max_res:e})"
        )));
    }
    let panel = Panel::new(panel_rows)?;

    // Map raw productivity into the estimator's normalized representation.
    let aggs = panel::aggregates_with_prices(&panel, &price_index)?;
    let np = panel::normalize(&panel, &aggs, NormalizationScope::Global)?;
    let gm = np.global_means();
    let shares = ShareBasis::from_panel(&np).shares(cfg.params.tau)?;
    let (rho, theta) = (cfg.params.rho, cfg.params.theta);
    let t = &cfg.technology;
    let shift_h = (gm.capital / gm.output).ln() + (t.alpha_k / shares.alpha_k).ln() / rho;
    let labor = (t.alpha_l / shares.alpha_l).ln() / rho;
    let shift_s = (gm.skilled / gm.output).ln() + labor + (t.alpha_s / shares.alpha_s).ln() / theta;
    let shift_u = (gm.unskilled / gm.output).ln() + labor + (t.alpha_u / shares.alpha_u).ln() / theta;
    let shift = Vector3::new(shift_h, shift_s, shift_u);
    let a_mat = cfg.markov.lag_matrix();
    let c_norm = cfg.markov.constant() + shift - a_mat * shift;
    let mut markov_normalized = cfg.markov.coef;
    for i in 0..3 {
        markov_normalized[i][0] = c_norm[i];
    }

    // Panel::new sorted rows by (plant, year); path rows are already in that order.
    let truth = rows
        .iter()
        .zip(&alloc)
        .zip(&ids)
        .map(|((r, a), &id)| TruthRow {
            plant_id: id,
            year: r.year,
            omega: ProductivityTriple::new(
                r.omega.omega_h + shift_h,
                r.omega.omega_s + shift_s,
                r.omega.omega_u + shift_u,
            ),
            omega_raw: r.omega,
            ccp: r.ccp,
            planned_log_output: a.planned.ln(),
        })
        .collect();

    Ok(SimPanel {
        panel,
        truth,
        price_index,
        supply_shifter,
        calibration: Calibration {
            demand_intercept: g0,
            realized_tau: tau_real,
            iterations,
        },
        shares,
        representation_shift: [shift_h, shift_s, shift_u],
        markov_normalized,
        max_foc_residual: max_res,
    })
}

/// Files written by [`write_panel`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WrittenFiles {
    pub panel: PathBuf,
    pub price_index: PathBuf,
    pub truth: Option<PathBuf>,
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("panel");
    path.with_file_name(format!("{stem}_{suffix}.csv"))
}

/// Writes the panel CSV, its materials price index (`<stem>_price_index.csv`)
/// and, when requested, the truth columns (`<stem>_truth.csv`).
pub fn write_panel(sim: &SimPanel, path: impl AsRef<Path>, include_truth: bool) -> Result<WrittenFiles> {
    let path = path.as_ref();
    sim.panel.write_csv(path)?;
    let price_path = sibling(path, "price_index");
    panel::write_price_table(&sim.price_index, &price_path)?;
    let truth = if include_truth {
        let tp = sibling(path, "truth");
        write_truth(&sim.truth, &tp)?;
        Some(tp)
    } else {
        None
    };
    Ok(WrittenFiles {
        panel: path.to_path_buf(),
        price_index: price_path,
        truth,
    })
}

pub fn write_truth(truth: &[TruthRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "plant_id",
        "year",
        "omega_H",
        "omega_S",
        "omega_U",
        "ccp",
        "planned_log_output",
    ])?;
    for t in truth {
        w.write_record([
            t.plant_id.to_string(),
            t.year.to_string(),
            t.omega.omega_h.to_string(),
            t.omega.omega_s.to_string(),
            t.omega.omega_u.to_string(),
            t.ccp.to_string(),
            t.planned_log_output.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
