//! Normalized two-level nested CES technology: evaluation, share
//! construction, productivity recovery from first-order conditions and a
//! static cost-minimization solver.
//!
//! Technology, with every quantity expressed relative to its geometric mean:
//!
//! ```text
//! Q = [a_K (e^h K)^ρ + a_M (e^h M)^ρ + a_L L^ρ]^(1/ρ)
//! L = [a_S (e^s S)^θ + a_U (e^u U)^θ]^(1/θ)
//! ```
//!
//! which is the same function as `e^h [a_K K^ρ + a_M M^ρ + a_L (e^(s-h) 𝓛)^ρ]^(1/ρ)`
//! with `𝓛 = [a_S S^θ + a_U (e^(u-s) U)^θ]^(1/θ)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::NormalizedPanel;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructuralParams {
    /// Capital static-optimality wedge, equal to a_K / a_M.
    pub tau: f64,
    /// Materials supply elasticity.
    pub eta_m: f64,
    /// Inner-nest exponent (skilled vs unskilled).
    pub theta: f64,
    /// Outer-nest exponent (capital, materials, labor).
    pub rho: f64,
}

impl StructuralParams {
    pub fn new(tau: f64, eta_m: f64, theta: f64, rho: f64) -> Result<Self> {
        let p = Self { tau, eta_m, theta, rho };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.tau, self.eta_m, self.theta, self.rho]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::domain("structural parameters must be finite"));
        }
        if self.tau <= 0.0 {
            return Err(Error::domain(format!("tau must be positive, got {}", self.tau)));
        }
        if self.eta_m <= 0.0 {
            return Err(Error::domain(format!(
                "eta_m must be positive, got {}",
                self.eta_m
            )));
        }
        for (v, name) in [(self.theta, "theta"), (self.rho, "rho")] {
            if v >= 1.0 {
                return Err(Error::domain(format!("{name} must be below 1, got {v}")));
            }
            if v == 0.0 {
                return Err(Error::domain(format!(
                    "{name} = 0 (Cobb-Douglas limit) is not supported"
                )));
            }
        }
        Ok(())
    }

    /// Elasticity of substitution in the outer nest, 1/(1-ρ).
    pub fn sigma_outer(&self) -> f64 {
        1.0 / (1.0 - self.rho)
    }

    /// Elasticity of substitution between skilled and unskilled labor, 1/(1-θ).
    pub fn sigma_inner(&self) -> f64 {
        1.0 / (1.0 - self.theta)
    }

    /// Materials markdown η/(η+1).
    pub fn markdown(&self) -> f64 {
        self.eta_m / (self.eta_m + 1.0)
    }

    /// Inverts the reported transforms (σ_outer, σ_inner, markdown) back to
    /// raw parameters.
    pub fn from_transforms(tau: f64, sigma_outer: f64, sigma_inner: f64, markdown: f64) -> Result<Self> {
        if !(markdown > 0.0 && markdown < 1.0) {
            return Err(Error::domain("markdown must lie in (0, 1)"));
        }
        if !(sigma_outer > 0.0 && sigma_inner > 0.0) {
            return Err(Error::domain("elasticities must be positive"));
        }
        Self::new(
            tau,
            markdown / (1.0 - markdown),
            1.0 - 1.0 / sigma_inner,
            1.0 - 1.0 / sigma_outer,
        )
    }

    /// Truth used throughout the recovery tests: Colombian pooled estimates
    /// (outer elasticity 0.454, inner 0.257, markdown 0.678, a_K/a_M 0.0833).
    pub fn colombia() -> Self {
        Self::from_transforms(0.0833, 0.454, 0.257, 0.678).expect("valid constants")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CesShares {
    pub alpha_k: f64,
    pub alpha_m: f64,
    pub alpha_l: f64,
    pub alpha_s: f64,
    pub alpha_u: f64,
}

impl CesShares {
    /// Builds shares from mean expenditures: a_S = E_S/(E_S+E_U) and outer
    /// shares proportional to (τ E_M, E_M, E_L).
    pub fn from_expenditures(e_s: f64, e_u: f64, e_m: f64, e_l: f64, tau: f64) -> Result<Self> {
        if !(tau.is_finite() && tau > 0.0) {
            return Err(Error::domain(format!("tau must be positive, got {tau}")));
        }
        if !(e_s > 0.0 && e_u > 0.0 && e_m > 0.0 && e_l > 0.0) {
            return Err(Error::domain("mean expenditures must be positive"));
        }
        let alpha_s = e_s / (e_s + e_u);
        let denom = e_m + e_l + tau * e_m;
        let alpha_m = e_m / denom;
        let alpha_l = e_l / denom;
        Ok(Self {
            alpha_k: 1.0 - alpha_m - alpha_l,
            alpha_m,
            alpha_l,
            alpha_s,
            alpha_u: 1.0 - alpha_s,
        })
    }

    /// Outer shares for a given τ, keeping a fixed labor-to-materials mean
    /// expenditure ratio `r = E_L/E_M` and inner shares.
    pub fn with_tau(alpha_s: f64, labor_materials_ratio: f64, tau: f64) -> Self {
        let denom = 1.0 + labor_materials_ratio + tau;
        let alpha_m = 1.0 / denom;
        let alpha_l = labor_materials_ratio / denom;
        Self {
            alpha_k: 1.0 - alpha_m - alpha_l,
            alpha_m,
            alpha_l,
            alpha_s,
            alpha_u: 1.0 - alpha_s,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha_k, self.alpha_m, self.alpha_l, self.alpha_s, self.alpha_u];
        if all.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(Error::domain(format!("shares must lie in (0,1): {self:?}")));
        }
        Ok(())
    }
}

/// Mean expenditures that pin down the shares of a normalized panel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShareBasis {
    pub skilled_pay: f64,
    pub unskilled_pay: f64,
    pub materials_exp: f64,
    /// Geometric mean of plant labor bills E_S + E_U.
    pub labor_pay: f64,
}

impl ShareBasis {
    pub fn from_panel(np: &NormalizedPanel) -> Self {
        let n = np.len().max(1) as f64;
        let mut acc = [0.0; 4];
        for r in np.rows() {
            acc[0] += r.raw.skilled_pay.ln();
            acc[1] += r.raw.unskilled_pay.ln();
            acc[2] += r.raw.materials_exp.ln();
            acc[3] += r.raw.labor_pay().ln();
        }
        Self {
            skilled_pay: (acc[0] / n).exp(),
            unskilled_pay: (acc[1] / n).exp(),
            materials_exp: (acc[2] / n).exp(),
            labor_pay: (acc[3] / n).exp(),
        }
    }

    pub fn shares(&self, tau: f64) -> Result<CesShares> {
        CesShares::from_expenditures(
            self.skilled_pay,
            self.unskilled_pay,
            self.materials_exp,
            self.labor_pay,
            tau,
        )
    }
}

pub fn shares_from_panel(np: &NormalizedPanel, tau: f64) -> Result<CesShares> {
    ShareBasis::from_panel(np).shares(tau)
}

/// Log productivities. Relative terms are always derived from the three
/// stored levels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProductivityTriple {
    pub omega_h: f64,
    pub omega_s: f64,
    pub omega_u: f64,
}

impl ProductivityTriple {
    pub fn new(omega_h: f64, omega_s: f64, omega_u: f64) -> Self {
        Self { omega_h, omega_s, omega_u }
    }

    /// Unskilled-relative-to-skilled bias, ω_U − ω_S.
    pub fn omega_b(&self) -> f64 {
        self.omega_u - self.omega_s
    }

    /// Labor-relative-to-Hicks bias, ω_S − ω_H.
    pub fn omega_l(&self) -> f64 {
        self.omega_s - self.omega_h
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.omega_h, self.omega_s, self.omega_u]
    }
}

fn check_positive(vals: &[f64]) -> Result<()> {
    if vals.iter().all(|v| v.is_finite() && *v > 0.0) {
        Ok(())
    } else {
        Err(Error::domain(format!("inputs must be positive and finite: {vals:?}")))
    }
}

/// Inputs to the production function.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Inputs {
    pub capital: f64,
    pub materials: f64,
    pub skilled: f64,
    pub unskilled: f64,
}

fn inner_composite(theta: f64, shares: &CesShares, x: &Inputs, w: &ProductivityTriple) -> f64 {
    (shares.alpha_s * (theta * (w.omega_s + x.skilled.ln())).exp()
        + shares.alpha_u * (theta * (w.omega_u + x.unskilled.ln())).exp())
    .powf(1.0 / theta)
}

/// Planned output. Cobb-Douglas limits (ρ or θ equal to 0) are rejected.
pub fn output(
    params: &StructuralParams,
    shares: &CesShares,
    x: &Inputs,
    w: &ProductivityTriple,
) -> Result<f64> {
    params.validate()?;
    check_positive(&[x.capital, x.materials, x.skilled, x.unskilled])?;
    Ok(output_unchecked(params.rho, params.theta, shares, x, w))
}

pub(crate) fn output_unchecked(
    rho: f64,
    theta: f64,
    shares: &CesShares,
    x: &Inputs,
    w: &ProductivityTriple,
) -> f64 {
    let l = inner_composite(theta, shares, x, w);
    (shares.alpha_k * (rho * (w.omega_h + x.capital.ln())).exp()
        + shares.alpha_m * (rho * (w.omega_h + x.materials.ln())).exp()
        + shares.alpha_l * l.powf(rho))
    .powf(1.0 / rho)
}

/// Partial derivatives of output with respect to (K, M, S, U).
pub fn output_gradient(
    params: &StructuralParams,
    shares: &CesShares,
    x: &Inputs,
    w: &ProductivityTriple,
) -> Result<[f64; 4]> {
    let q = output(params, shares, x, w)?;
    let (rho, theta) = (params.rho, params.theta);
    let l = inner_composite(theta, shares, x, w);
    let outer = q.powf(1.0 - rho);
    let d_k = outer * shares.alpha_k * (rho * w.omega_h).exp() * x.capital.powf(rho - 1.0);
    let d_m = outer * shares.alpha_m * (rho * w.omega_h).exp() * x.materials.powf(rho - 1.0);
    let d_l = outer * shares.alpha_l * l.powf(rho - theta);
    let d_s = d_l * shares.alpha_s * (theta * w.omega_s).exp() * x.skilled.powf(theta - 1.0);
    let d_u = d_l * shares.alpha_u * (theta * w.omega_u).exp() * x.unskilled.powf(theta - 1.0);
    Ok([d_k, d_m, d_s, d_u])
}

// ---------------------------------------------------------------------------
// Productivity recovery

fn nonzero(v: f64, name: &str) -> Result<()> {
    if v == 0.0 || !v.is_finite() {
        Err(Error::domain(format!("{name} must be finite and nonzero")))
    } else {
        Ok(())
    }
}

/// ω_B from the skilled/unskilled tangency.
pub fn recover_omega_b(
    e_s: f64,
    e_u: f64,
    skilled: f64,
    unskilled: f64,
    theta: f64,
    shares: &CesShares,
) -> Result<f64> {
    nonzero(theta, "theta")?;
    check_positive(&[e_s, e_u, skilled, unskilled])?;
    Ok(((e_u / e_s).ln() + (shares.alpha_s / shares.alpha_u).ln()) / theta + skilled.ln()
        - unskilled.ln())
}

/// Inner labor composite net of skilled productivity, 𝓛.
pub fn composite_labor(skilled: f64, e_s: f64, e_u: f64, theta: f64, alpha_s: f64) -> Result<f64> {
    nonzero(theta, "theta")?;
    check_positive(&[skilled, e_s, e_u, alpha_s])?;
    Ok(skilled * (alpha_s * (e_s + e_u) / e_s).powf(1.0 / theta))
}

/// Normalized plant materials quantity implied by the supply curve.
pub fn materials_quantity(materials_exp_norm: f64, supply_shifter: f64, eta_m: f64) -> f64 {
    (materials_exp_norm * supply_shifter).powf(eta_m / (eta_m + 1.0))
}

/// ω_L from the labor/materials tangency.
#[allow(clippy::too_many_arguments)]
pub fn recover_omega_l(
    e_s: f64,
    e_u: f64,
    e_m: f64,
    materials_exp_norm: f64,
    supply_shifter: f64,
    labor: f64,
    params: &StructuralParams,
    shares: &CesShares,
) -> Result<f64> {
    nonzero(params.rho, "rho")?;
    check_positive(&[e_s, e_u, e_m, materials_exp_norm, supply_shifter, labor])?;
    let m = params.markdown();
    let lhs = (shares.alpha_m / shares.alpha_l * m * (e_s + e_u) / e_m).ln() / params.rho;
    Ok(lhs + materials_quantity(materials_exp_norm, supply_shifter, params.eta_m).ln() - labor.ln())
}

/// ω_H from planned log output.
#[allow(clippy::too_many_arguments)]
pub fn recover_omega_h(
    y_hat: f64,
    capital: f64,
    e_s: f64,
    e_u: f64,
    e_m: f64,
    materials_exp_norm: f64,
    supply_shifter: f64,
    params: &StructuralParams,
    shares: &CesShares,
) -> Result<f64> {
    nonzero(params.rho, "rho")?;
    check_positive(&[capital, e_s, e_u, e_m, materials_exp_norm, supply_shifter])?;
    let rho = params.rho;
    let m = params.markdown();
    let mat = materials_quantity(materials_exp_norm, supply_shifter, params.eta_m);
    let bracket = params.tau * capital.powf(rho) + (1.0 + m * (e_s + e_u) / e_m) * mat.powf(rho);
    if !(bracket > 0.0 && bracket.is_finite()) {
        return Err(Error::domain("output bracket is not positive"));
    }
    Ok(y_hat - (shares.alpha_m.ln() + bracket.ln()) / rho)
}

pub fn omega_s_from_h(omega_h: f64, omega_l: f64) -> f64 {
    omega_h + omega_l
}

pub fn omega_u_from_s(omega_s: f64, omega_b: f64) -> f64 {
    omega_s + omega_b
}

/// Observables needed by the recovery chain for one plant-year.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RecoveryInputs {
    pub y_hat: f64,
    pub capital: f64,
    pub skilled: f64,
    pub unskilled: f64,
    /// Raw (unnormalized) expenditures; only their ratios matter.
    pub e_s: f64,
    pub e_u: f64,
    pub e_m: f64,
    pub materials_exp_norm: f64,
    pub price_index_norm: f64,
    pub industry_exp_norm: f64,
}

/// Runs the full recovery chain (ω_B, 𝓛, ω_L, ω_H, then ω_S and ω_U).
pub fn recover_triple(
    inp: &RecoveryInputs,
    params: &StructuralParams,
    shares: &CesShares,
) -> Result<ProductivityTriple> {
    params.validate()?;
    let phi = crate::panel::supply_shifter(inp.price_index_norm, inp.industry_exp_norm, params.eta_m)?;
    let b = recover_omega_b(inp.e_s, inp.e_u, inp.skilled, inp.unskilled, params.theta, shares)?;
    let labor = composite_labor(inp.skilled, inp.e_s, inp.e_u, params.theta, shares.alpha_s)?;
    let l = recover_omega_l(
        inp.e_s,
        inp.e_u,
        inp.e_m,
        inp.materials_exp_norm,
        phi,
        labor,
        params,
        shares,
    )?;
    let h = recover_omega_h(
        inp.y_hat,
        inp.capital,
        inp.e_s,
        inp.e_u,
        inp.e_m,
        inp.materials_exp_norm,
        phi,
        params,
        shares,
    )?;
    let s = omega_s_from_h(h, l);
    Ok(ProductivityTriple::new(h, s, omega_u_from_s(s, b)))
}

/// Parameter-free logarithms of one row, precomputed so the recovery chain
/// costs two exponentials and one logarithm per evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PreparedRow {
    pub y_hat: f64,
    pub log_k: f64,
    pub log_s: f64,
    pub log_u: f64,
    pub log_eu_es: f64,
    pub log_el_es: f64,
    pub log_el_em: f64,
    pub el_em: f64,
    pub log_em: f64,
    pub log_p: f64,
    pub log_ei: f64,
}

impl PreparedRow {
    pub fn new(inp: &RecoveryInputs) -> Self {
        let el = inp.e_s + inp.e_u;
        Self {
            y_hat: inp.y_hat,
            log_k: inp.capital.ln(),
            log_s: inp.skilled.ln(),
            log_u: inp.unskilled.ln(),
            log_eu_es: (inp.e_u / inp.e_s).ln(),
            log_el_es: (el / inp.e_s).ln(),
            log_el_em: (el / inp.e_m).ln(),
            el_em: el / inp.e_m,
            log_em: inp.materials_exp_norm.ln(),
            log_p: inp.price_index_norm.ln(),
            log_ei: inp.industry_exp_norm.ln(),
        }
    }
}

/// Parameter-dependent constants of the recovery chain.
#[derive(Clone, Copy, Debug)]
pub struct RecoveryConstants {
    rho: f64,
    inv_rho: f64,
    inv_theta: f64,
    tau: f64,
    m: f64,
    b_const: f64,
    l_const: f64,
    wl_const: f64,
    log_alpha_m: f64,
}

impl RecoveryConstants {
    pub fn new(params: &StructuralParams, shares: &CesShares) -> Self {
        let m = params.markdown();
        Self {
            rho: params.rho,
            inv_rho: 1.0 / params.rho,
            inv_theta: 1.0 / params.theta,
            tau: params.tau,
            m,
            b_const: (shares.alpha_s / shares.alpha_u).ln(),
            l_const: shares.alpha_s.ln(),
            wl_const: (shares.alpha_m / shares.alpha_l).ln() + m.ln(),
            log_alpha_m: shares.alpha_m.ln(),
        }
    }

    /// Same chain as [`recover_triple`]; returns `None` if the row cannot
    /// be inverted at these parameters.
    #[inline]
    pub fn recover(&self, r: &PreparedRow) -> Option<ProductivityTriple> {
        let log_mat = self.m * r.log_em - r.log_p + (1.0 - self.m) * r.log_ei;
        let b = self.inv_theta * (r.log_eu_es + self.b_const) + r.log_s - r.log_u;
        let log_labor = r.log_s + self.inv_theta * (self.l_const + r.log_el_es);
        let l = self.inv_rho * (self.wl_const + r.log_el_em) + log_mat - log_labor;
        let bracket =
            self.tau * (self.rho * r.log_k).exp() + (1.0 + self.m * r.el_em) * (self.rho * log_mat).exp();
        let h = r.y_hat - self.inv_rho * (self.log_alpha_m + bracket.ln());
        let s = h + l;
        let t = ProductivityTriple::new(h, s, s + b);
        (t.omega_h.is_finite() && t.omega_s.is_finite() && t.omega_u.is_finite()).then_some(t)
    }
}

// ---------------------------------------------------------------------------
// Static cost minimization

/// Plant state relevant to the static input choice.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostMinState {
    pub capital: f64,
    pub wage_skilled: f64,
    pub wage_unskilled: f64,
    /// Aggregate materials supply shifter; the plant buys M = (E_M Φ)^(η/(η+1)).
    pub supply_shifter: f64,
}

impl CostMinState {
    /// State built from normalized industry aggregates (P̈, Ë).
    pub fn from_aggregates(
        capital: f64,
        wage_skilled: f64,
        wage_unskilled: f64,
        price_index: f64,
        industry_exp: f64,
        eta_m: f64,
    ) -> Result<Self> {
        Ok(Self {
            capital,
            wage_skilled,
            wage_unskilled,
            supply_shifter: crate::panel::supply_shifter(price_index, industry_exp, eta_m)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostMinSolution {
    pub skilled: f64,
    pub unskilled: f64,
    pub materials: f64,
    pub materials_exp: f64,
    /// Multiplier on the output constraint.
    pub lambda: f64,
    pub newton_iterations: usize,
}

impl CostMinSolution {
    pub fn variable_cost(&self, state: &CostMinState) -> f64 {
        state.wage_skilled * self.skilled + state.wage_unskilled * self.unskilled + self.materials_exp
    }
}

/// Cost of materials quantity `m` under the upward-sloping supply curve.
pub fn materials_cost(materials: f64, supply_shifter: f64, eta_m: f64) -> f64 {
    materials.powf((eta_m + 1.0) / eta_m) / supply_shifter
}

/// Minimizes W_S S + W_U U + E_M(M) subject to producing `required` at the
/// given capital and productivity.
///
/// The inner nest is solved through the CES unit cost of labor, the outer
/// nest through the labor/materials tangency, leaving a single monotone
/// equation in log M solved by Newton's method.
pub fn static_cost_min(
    state: &CostMinState,
    w: &ProductivityTriple,
    required: f64,
    params: &StructuralParams,
    shares: &CesShares,
) -> Result<CostMinSolution> {
    params.validate()?;
    shares.validate()?;
    check_positive(&[
        state.capital,
        state.wage_skilled,
        state.wage_unskilled,
        state.supply_shifter,
        required,
    ])?;
    let rho = params.rho;
    let m = params.markdown();
    let sigma = params.sigma_inner();

    // Effective prices of efficiency units of labor and the CES unit cost.
    let p_s = state.wage_skilled * (-w.omega_s).exp();
    let p_u = state.wage_unskilled * (-w.omega_u).exp();
    let log_pl = ((shares.alpha_s.powf(sigma) * p_s.powf(1.0 - sigma)
        + shares.alpha_u.powf(sigma) * p_u.powf(1.0 - sigma))
    .ln())
        / (1.0 - sigma);

    // Remaining output requirement after capital's contribution.
    let r = required.powf(rho) - shares.alpha_k * (rho * (w.omega_h + state.capital.ln())).exp();
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::numerical(format!(
            "required output {required} is not attainable with capital {} (ρ = {rho})",
            state.capital
        )));
    }

    // log L = c0 + c1 x with x = log M, from the tangency condition.
    let c1 = (1.0 / m - rho) / (1.0 - rho);
    let c0 = ((shares.alpha_l / (m * shares.alpha_m)).ln()
        - state.supply_shifter.ln()
        - log_pl
        - rho * w.omega_h)
        / (1.0 - rho);

    // φ(x) = log(a_M e^{ρh} e^{ρx} + a_L e^{ρ c0} e^{ρ c1 x}) is monotone and
    // convex, so undamped Newton from any start converges.
    let log_a = shares.alpha_m.ln() + rho * w.omega_h;
    let log_b = shares.alpha_l.ln() + rho * c0;
    let (a, b) = (rho, rho * c1);
    let target = r.ln();
    let phi = |x: f64| -> (f64, f64) {
        let ta = log_a + a * x;
        let tb = log_b + b * x;
        let mx = ta.max(tb);
        let ea = (ta - mx).exp();
        let eb = (tb - mx).exp();
        let v = mx + (ea + eb).ln();
        let d = (a * ea + b * eb) / (ea + eb);
        (v, d)
    };
    let mut x = required.ln() - w.omega_h;
    let mut iterations = 0;
    loop {
        let (v, d) = phi(x);
        let f = v - target;
        if f.abs() < 1e-14 {
            break;
        }
        let step = f / d;
        x -= step;
        iterations += 1;
        if !x.is_finite() {
            return Err(Error::numerical("cost-minimization root finder diverged"));
        }
        if step.abs() < 1e-15 * (1.0 + x.abs()) {
            break;
        }
        if iterations >= 200 {
            return Err(Error::numerical(format!(
                "cost-minimization root finder did not converge: |residual| = {:e}, log M = {x}",
                f.abs()
            )));
        }
    }

    let materials = x.exp();
    let log_l = c0 + c1 * x;
    let labor = log_l.exp();
    let pl = log_pl.exp();
    let x_s = labor * (shares.alpha_s * pl / p_s).powf(sigma);
    let x_u = labor * (shares.alpha_u * pl / p_u).powf(sigma);
    let skilled = x_s * (-w.omega_s).exp();
    let unskilled = x_u * (-w.omega_u).exp();
    let materials_exp = materials_cost(materials, state.supply_shifter, params.eta_m);
    // λ ∂Q/∂L = P_L with ∂Q/∂L = Q^{1-ρ} a_L L^{ρ-1}.
    let lambda = pl / (required.powf(1.0 - rho) * shares.alpha_l * labor.powf(rho - 1.0));
    Ok(CostMinSolution {
        skilled,
        unskilled,
        materials,
        materials_exp,
        lambda,
        newton_iterations: iterations,
    })
}

/// Relative residuals of the optimality system at a candidate solution:
/// `[skilled FOC, unskilled FOC, materials FOC, output constraint]`.
pub fn foc_residuals(
    state: &CostMinState,
    w: &ProductivityTriple,
    required: f64,
    sol: &CostMinSolution,
    params: &StructuralParams,
    shares: &CesShares,
) -> Result<[f64; 4]> {
    let x = Inputs {
        capital: state.capital,
        materials: sol.materials,
        skilled: sol.skilled,
        unskilled: sol.unskilled,
    };
    let q = output(params, shares, &x, w)?;
    let g = output_gradient(params, shares, &x, w)?;
    let mc_m = sol.materials_exp / (params.markdown() * sol.materials);
    Ok([
        sol.lambda * g[2] / state.wage_skilled - 1.0,
        sol.lambda * g[3] / state.wage_unskilled - 1.0,
        sol.lambda * g[1] / mc_m - 1.0,
        q / required - 1.0,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn shares() -> CesShares {
        CesShares::from_expenditures(0.4, 0.6, 1.5, 1.0, 0.0833).unwrap()
    }

    #[test]
    fn transforms_invert_table_values() {
        let p = StructuralParams::colombia();
        assert_relative_eq!(p.sigma_outer(), 0.454, epsilon = 1e-12);
        assert_relative_eq!(p.sigma_inner(), 0.257, epsilon = 1e-12);
        assert_relative_eq!(p.markdown(), 0.678, epsilon = 1e-12);
        assert_relative_eq!(p.rho, -1.2026, epsilon = 1e-4);
        assert_relative_eq!(p.theta, -2.8911, epsilon = 1e-4);
        assert_relative_eq!(p.eta_m, 2.106, epsilon = 1e-3);
    }

    #[test]
    fn reported_share_ratio_matches_tau() {
        // Reported shares alpha_K = 0.056, alpha_M = 0.672.
        assert_relative_eq!(0.056 / 0.672, 0.0833, epsilon = 1e-4);
        let s = CesShares::from_expenditures(1.0, 1.0, 3.0, 1.2, 0.0833).unwrap();
        assert_relative_eq!(s.alpha_k / s.alpha_m, 0.0833, epsilon = 1e-14);
    }

    #[test]
    fn symmetric_labor_gives_equal_inner_shares() {
        let s = CesShares::from_expenditures(2.0, 2.0, 1.0, 4.0, 0.1).unwrap();
        assert_eq!(s.alpha_s, 0.5);
        assert_eq!(s.alpha_u, 0.5);
    }

    #[test]
    fn nonpositive_tau_rejected() {
        assert!(CesShares::from_expenditures(1.0, 1.0, 1.0, 2.0, 0.0).is_err());
        assert!(CesShares::from_expenditures(1.0, 1.0, 1.0, 2.0, -0.1).is_err());
    }

    #[test]
    fn baseline_output_is_one_and_crs() {
        let p = StructuralParams::colombia();
        let s = shares();
        let ones = Inputs { capital: 1.0, materials: 1.0, skilled: 1.0, unskilled: 1.0 };
        let w = ProductivityTriple::default();
        assert_relative_eq!(output(&p, &s, &ones, &w).unwrap(), 1.0, epsilon = 1e-14);
        let twos = Inputs { capital: 2.0, materials: 2.0, skilled: 2.0, unskilled: 2.0 };
        assert_relative_eq!(output(&p, &s, &twos, &w).unwrap(), 2.0, epsilon = 1e-13);
    }

    #[test]
    fn cobb_douglas_limit_rejected() {
        let p = StructuralParams { tau: 0.1, eta_m: 1.0, theta: 0.0, rho: -1.0 };
        let ones = Inputs { capital: 1.0, materials: 1.0, skilled: 1.0, unskilled: 1.0 };
        assert!(output(&p, &shares(), &ones, &ProductivityTriple::default()).is_err());
    }

    #[test]
    fn omega_b_neutral_point_and_two_to_one_case() {
        let s = CesShares { alpha_k: 0.1, alpha_m: 0.5, alpha_l: 0.4, alpha_s: 0.5, alpha_u: 0.5 };
        let theta = StructuralParams::colombia().theta;
        assert_eq!(recover_omega_b(1.0, 1.0, 1.0, 1.0, theta, &s).unwrap(), 0.0);
        let b = recover_omega_b(2.0, 1.0, 1.0, 1.0, theta, &s).unwrap();
        assert_relative_eq!(b.exp(), 2f64.powf(-1.0 / theta), epsilon = 1e-12);
        assert_relative_eq!(b.exp(), 1.271, epsilon = 1e-3);
        assert!(recover_omega_b(1.0, 1.0, 1.0, 1.0, 0.0, &s).is_err());
    }

    #[test]
    fn composite_labor_cases() {
        let theta = -2.0;
        assert_relative_eq!(composite_labor(3.0, 1.0, 1.0, theta, 0.5).unwrap(), 3.0, epsilon = 1e-14);
        let a = composite_labor(1.0, 1.0, 2.0, theta, 0.4).unwrap();
        let b = composite_labor(2.5, 1.0, 2.0, theta, 0.4).unwrap();
        assert_relative_eq!(b / a, 2.5, epsilon = 1e-14);
    }

    #[test]
    fn omega_l_baseline_and_inverse_linearity() {
        let p = StructuralParams::colombia();
        let s = shares();
        // Choose E_L/E_M so the bracket equals one: (a_M/a_L) m E_L/E_M = 1.
        let e_m = 1.0;
        let e_l = s.alpha_l / (s.alpha_m * p.markdown());
        let l0 = recover_omega_l(e_l / 2.0, e_l / 2.0, e_m, 1.0, 1.0, 1.0, &p, &s).unwrap();
        assert!(l0.abs() < 1e-14);
        let l1 = recover_omega_l(e_l / 2.0, e_l / 2.0, e_m, 1.0, 1.0, 2.0, &p, &s).unwrap();
        assert_relative_eq!((l1 - l0).exp(), 0.5, epsilon = 1e-14);
    }

    #[test]
    fn omega_h_is_additive_in_planned_output() {
        let p = StructuralParams::colombia();
        let s = shares();
        let a = recover_omega_h(0.3, 1.2, 1.0, 2.0, 1.5, 0.8, 1.1, &p, &s).unwrap();
        let b = recover_omega_h(0.4, 1.2, 1.0, 2.0, 1.5, 0.8, 1.1, &p, &s).unwrap();
        assert_relative_eq!(b - a, 0.1, epsilon = 1e-14);
    }

    #[test]
    fn chained_identities_are_exact() {
        let t = ProductivityTriple::new(0.2, 0.2, 0.2);
        assert_eq!(t.omega_b(), 0.0);
        assert_eq!(t.omega_l(), 0.0);
        let s = omega_s_from_h(0.1, 0.0);
        assert_eq!(omega_u_from_s(s, 0.0), 0.1);
    }

    #[test]
    fn prepared_recovery_matches_direct_chain() {
        let p = StructuralParams::colombia();
        let s = shares();
        let inp = RecoveryInputs {
            y_hat: 0.2,
            capital: 1.3,
            skilled: 0.7,
            unskilled: 1.4,
            e_s: 3.0,
            e_u: 4.0,
            e_m: 9.0,
            materials_exp_norm: 1.2,
            price_index_norm: 0.9,
            industry_exp_norm: 1.1,
        };
        let a = recover_triple(&inp, &p, &s).unwrap();
        let b = RecoveryConstants::new(&p, &s).recover(&PreparedRow::new(&inp)).unwrap();
        for (x, y) in a.as_array().iter().zip(b.as_array()) {
            assert_relative_eq!(*x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn cost_min_symmetric_case_equal_labor() {
        let p = StructuralParams::colombia();
        let s = CesShares { alpha_k: 0.05, alpha_m: 0.6, alpha_l: 0.35, alpha_s: 0.5, alpha_u: 0.5 };
        let st = CostMinState { capital: 1.0, wage_skilled: 1.0, wage_unskilled: 1.0, supply_shifter: 1.0 };
        let sol = static_cost_min(&st, &ProductivityTriple::default(), 0.8, &p, &s).unwrap();
        assert_relative_eq!(sol.skilled, sol.unskilled, epsilon = 1e-12);
    }

    #[test]
    fn cost_min_satisfies_focs_and_markdown() {
        let p = StructuralParams::colombia();
        let s = shares();
        let st = CostMinState { capital: 1.3, wage_skilled: 2.0, wage_unskilled: 0.7, supply_shifter: 1.2 };
        let w = ProductivityTriple::new(0.1, -0.2, 0.3);
        let sol = static_cost_min(&st, &w, 0.9, &p, &s).unwrap();
        let res = foc_residuals(&st, &w, 0.9, &sol, &p, &s).unwrap();
        for r in res {
            assert!(r.abs() < 1e-10, "{res:?}");
        }
        let x = Inputs { capital: 1.3, materials: sol.materials, skilled: sol.skilled, unskilled: sol.unskilled };
        let g = output_gradient(&p, &s, &x, &w).unwrap();
        let share = sol.materials_exp / (sol.lambda * sol.materials * g[1]);
        assert_relative_eq!(share, p.markdown(), epsilon = 1e-10);
    }

    #[test]
    fn unattainable_output_is_numerical_error() {
        let p = StructuralParams::colombia();
        let s = shares();
        let st = CostMinState { capital: 0.01, wage_skilled: 1.0, wage_unskilled: 1.0, supply_shifter: 1.0 };
        let err = static_cost_min(&st, &ProductivityTriple::default(), 50.0, &p, &s).unwrap_err();
        assert!(err.is_numerical());
    }
}
