use lbe_core::ces::{
    composite_labor, output, output_gradient, recover_omega_b, recover_triple, static_cost_min,
    CesShares, CostMinState, Inputs, ProductivityTriple, RecoveryInputs, StructuralParams,
};
use lbe_core::estimate::from_unconstrained;
use proptest::prelude::*;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

fn params() -> impl Strategy<Value = StructuralParams> {
    (0.02f64..0.4, 0.2f64..0.9, 0.12f64..0.9, 0.4f64..0.92)
        .prop_map(|(tau, so, si, md)| StructuralParams::from_transforms(tau, so, si, md).unwrap())
}

fn shares_for(p: StructuralParams) -> impl Strategy<Value = (StructuralParams, CesShares)> {
    (0.15f64..0.85, 0.3f64..3.0).prop_map(move |(a_s, r)| (p, CesShares::with_tau(a_s, r, p.tau)))
}

fn model() -> impl Strategy<Value = (StructuralParams, CesShares)> {
    params().prop_flat_map(shares_for)
}

fn inputs() -> impl Strategy<Value = Inputs> {
    prop::array::uniform4(-1.5f64..1.5).prop_map(|v| Inputs {
        capital: v[0].exp(),
        materials: v[1].exp(),
        skilled: v[2].exp(),
        unskilled: v[3].exp(),
    })
}

fn triple() -> impl Strategy<Value = ProductivityTriple> {
    prop::array::uniform3(-0.6f64..0.6).prop_map(|w| ProductivityTriple::new(w[0], w[1], w[2]))
}

/// Nested CES written out from its definition.
fn nested_ces(p: &StructuralParams, s: &CesShares, x: &Inputs, w: &ProductivityTriple) -> f64 {
    let inner = (s.alpha_s * (w.omega_s.exp() * x.skilled).powf(p.theta)
        + s.alpha_u * (w.omega_u.exp() * x.unskilled).powf(p.theta))
    .powf(1.0 / p.theta);
    (s.alpha_k * (w.omega_h.exp() * x.capital).powf(p.rho)
        + s.alpha_m * (w.omega_h.exp() * x.materials).powf(p.rho)
        + s.alpha_l * inner.powf(p.rho))
    .powf(1.0 / p.rho)
}

fn scaled(x: &Inputs, c: f64) -> Inputs {
    Inputs {
        capital: x.capital * c,
        materials: x.materials * c,
        skilled: x.skilled * c,
        unskilled: x.unskilled * c,
    }
}

/// Output reached as variable inputs grow without bound when ρ < 0.
fn output_ceiling(p: &StructuralParams, s: &CesShares, w: &ProductivityTriple, capital: f64) -> f64 {
    s.alpha_k.powf(1.0 / p.rho) * w.omega_h.exp() * capital
}

fn state() -> impl Strategy<Value = (f64, f64, f64, f64, f64)> {
    (0.3f64..3.0, 0.5f64..2.0, 0.5f64..2.0, 0.5f64..2.0, 0.5f64..2.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn shares_sum_to_one_and_respect_tau(p in params(), a_s in 0.01f64..0.99, r in 0.01f64..50.0) {
        let s = CesShares::with_tau(a_s, r, p.tau);
        prop_assert!(close(s.alpha_k + s.alpha_m + s.alpha_l, 1.0, 1e-14));
        prop_assert!(close(s.alpha_s + s.alpha_u, 1.0, 1e-14));
        prop_assert!(close(s.alpha_k / s.alpha_m, p.tau, 1e-12));
        s.validate().unwrap();
    }

    #[test]
    fn expenditure_shares_respect_tau(e in prop::array::uniform4(0.01f64..100.0), tau in 0.001f64..5.0) {
        let s = CesShares::from_expenditures(e[0], e[1], e[2], e[3], tau).unwrap();
        prop_assert!(close(s.alpha_k + s.alpha_m + s.alpha_l, 1.0, 1e-14));
        prop_assert!(close(s.alpha_k / s.alpha_m, tau, 1e-12));
        prop_assert!(close(s.alpha_l / s.alpha_m, e[3] / e[2], 1e-12));
        prop_assert!(close(s.alpha_s / s.alpha_u, e[0] / e[1], 1e-12));
    }

    #[test]
    fn output_matches_nested_definition((p, s) in model(), x in inputs(), w in triple()) {
        let q = output(&p, &s, &x, &w).unwrap();
        prop_assert!(close(q, nested_ces(&p, &s, &x, &w), 1e-11));
    }

    #[test]
    fn output_is_homogeneous_of_degree_one((p, s) in model(), x in inputs(), w in triple(), c in 0.05f64..20.0) {
        let q = output(&p, &s, &x, &w).unwrap();
        let qc = output(&p, &s, &scaled(&x, c), &w).unwrap();
        prop_assert!(close(qc, c * q, 1e-11));
    }

    #[test]
    fn output_increases_in_every_input((p, s) in model(), x in inputs(), w in triple()) {
        let g = output_gradient(&p, &s, &x, &w).unwrap();
        prop_assert!(g.iter().all(|d| *d > 0.0 && d.is_finite()));
        let q = output(&p, &s, &x, &w).unwrap();
        let bumped = Inputs { unskilled: x.unskilled * 1.01, ..x };
        prop_assert!(output(&p, &s, &bumped, &w).unwrap() > q);
        // Euler: the gradient dotted with inputs reproduces output.
        let euler = g[0] * x.capital + g[1] * x.materials + g[2] * x.skilled + g[3] * x.unskilled;
        prop_assert!(close(euler, q, 1e-10));
    }

    #[test]
    fn omega_b_flips_sign_when_groups_swap(
        (p, s) in model(),
        e in prop::array::uniform4(0.1f64..10.0),
    ) {
        let swapped = CesShares { alpha_s: s.alpha_u, alpha_u: s.alpha_s, ..s };
        let b = recover_omega_b(e[0], e[1], e[2], e[3], p.theta, &s).unwrap();
        let b_swap = recover_omega_b(e[1], e[0], e[3], e[2], p.theta, &swapped).unwrap();
        prop_assert!(close(b, -b_swap, 1e-12));
    }

    #[test]
    fn composite_labor_is_linear_in_skilled(
        p in params(),
        a_s in 0.1f64..0.9,
        e in prop::array::uniform3(0.1f64..10.0),
        c in 0.05f64..20.0,
    ) {
        let base = composite_labor(e[0], e[1], e[2], p.theta, a_s).unwrap();
        let more = composite_labor(c * e[0], e[1], e[2], p.theta, a_s).unwrap();
        let rescaled_pay = composite_labor(e[0], c * e[1], c * e[2], p.theta, a_s).unwrap();
        prop_assert!(close(more, c * base, 1e-12));
        prop_assert!(close(rescaled_pay, base, 1e-12));
    }

    #[test]
    fn recovery_inverts_cost_minimization(
        (p, s) in model(),
        w in triple(),
        (k, ws, wu, pi, ei) in state(),
        frac in 0.05f64..0.9,
    ) {
        let required = frac * output_ceiling(&p, &s, &w, k);
        let st = CostMinState::from_aggregates(k, ws, wu, pi, ei, p.eta_m).unwrap();
        let sol = static_cost_min(&st, &w, required, &p, &s).unwrap();
        let inp = RecoveryInputs {
            y_hat: required.ln(),
            capital: k,
            skilled: sol.skilled,
            unskilled: sol.unskilled,
            e_s: ws * sol.skilled,
            e_u: wu * sol.unskilled,
            e_m: sol.materials_exp,
            materials_exp_norm: sol.materials_exp,
            price_index_norm: pi,
            industry_exp_norm: ei,
        };
        let got = recover_triple(&inp, &p, &s).unwrap();
        for (a, b) in got.as_array().into_iter().zip(w.as_array()) {
            prop_assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn unskilled_productivity_lowers_unskilled_intensity(
        (p, s) in model(),
        w in triple(),
        (k, ws, wu, pi, ei) in state(),
        bump in 0.05f64..0.5,
        frac in 0.05f64..0.9,
    ) {
        let required = frac * output_ceiling(&p, &s, &w, k);
        let st = CostMinState::from_aggregates(k, ws, wu, pi, ei, p.eta_m).unwrap();
        let base = static_cost_min(&st, &w, required, &p, &s).unwrap();
        let w2 = ProductivityTriple::new(w.omega_h, w.omega_s, w.omega_u + bump);
        let after = static_cost_min(&st, &w2, required, &p, &s).unwrap();
        // Inner elasticity below one: the groups are gross complements.
        prop_assert!(p.theta < 0.0);
        prop_assert!(after.unskilled / after.skilled < base.unskilled / base.skilled);
    }

    #[test]
    fn unconstrained_parameters_stay_in_domain(x in prop::array::uniform4(-8.0f64..8.0)) {
        let p = from_unconstrained(&x);
        p.validate().unwrap();
        prop_assert!(p.tau > 0.0 && p.eta_m > 0.0);
        prop_assert!(p.theta < 1.0 && p.rho < 1.0);
        let m = p.markdown();
        prop_assert!(m > 0.0 && m < 1.0);
        prop_assert!(close(m, p.eta_m / (1.0 + p.eta_m), 1e-14));
    }
}

#[test]
fn cobb_douglas_limits_are_rejected() {
    let p = StructuralParams::colombia();
    let s = CesShares::with_tau(0.4, 1.0, p.tau);
    let x = Inputs {
        capital: 1.0,
        materials: 1.0,
        skilled: 1.0,
        unskilled: 1.0,
    };
    let w = ProductivityTriple::new(0.0, 0.0, 0.0);
    let flat = StructuralParams { rho: 0.0, ..p };
    assert!(output(&flat, &s, &x, &w).is_err());
    assert!(recover_omega_b(1.0, 1.0, 1.0, 1.0, 0.0, &s).is_err());
}
