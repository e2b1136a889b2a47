//! Acceptance suite. Runs every criterion at its stated tolerance and prints
//! one PASS/FAIL line per criterion. `ACCEPTANCE_ONLY=2,6` restricts the run.

use std::time::{Duration, Instant};

use lbe_core::ces::{
    foc_residuals, materials_cost, output, output_gradient, static_cost_min, CesShares, CostMinState, Inputs,
    ProductivityTriple, StructuralParams,
};
use lbe_core::estimate::{
    first_stage, markov_regression, recover_productivity_panel, two_step_gmm, FirstStageFit, FirstStageOptions,
    GmmOptions, ProductivityPanel,
};
use lbe_core::numerics::{minimize, rng_stream, sample_sd, BootstrapPlan, NelderMead};
use lbe_core::panel::{aggregates_with_prices, normalize, NormalizationScope, NormalizedPanel};
use lbe_core::synth::{simulate, SimConfig, SimPanel};
use lbe_core::treatment::{
    balance_table, estimate_ccp, event_study, match_exporters, matched_did, panel_outcome, productivity_outcome,
    DidOptions, EventStudyOptions, PanelOutcome, StateVariable,
};
use lbe_core::Execution;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn sim(cfg: &SimConfig) -> (SimPanel, NormalizedPanel) {
    let s = simulate(cfg, Execution::Parallel).expect("simulation");
    let agg = aggregates_with_prices(&s.panel, &s.price_index).expect("aggregates");
    let np = normalize(&s.panel, &agg, NormalizationScope::Global).expect("normalize");
    (s, np)
}

fn no_export_learning(cfg: &mut SimConfig) {
    for row in cfg.markov.coef.iter_mut() {
        row[4] = 0.0;
    }
}

// ---------------------------------------------------------------------------

fn c1_round_trip() -> Outcome {
    let t = Instant::now();
    let cfg = SimConfig {
        n_plants: 500,
        n_years: 6,
        measurement_sd: 0.0,
        seed: 1,
        ..SimConfig::default()
    };
    let (s, np) = sim(&cfg);
    let y: Vec<Option<f64>> = np.rows().iter().map(|r| Some(r.output.ln())).collect();
    let fs = FirstStageFit {
        residual: vec![Some(0.0); y.len()],
        group: vec![None; y.len()],
        group_sizes: [0; 4],
        pooled: false,
        y_hat: y,
    };
    let pp = recover_productivity_panel(&cfg.params, &np, &fs).expect("recovery");
    let mut max_err = 0.0f64;
    for (o, truth) in pp.omega.iter().zip(&s.truth) {
        let o = o.expect("recovered");
        for (a, b) in o.as_array().iter().zip(truth.omega.as_array()) {
            max_err = max_err.max((a - b).abs());
        }
    }
    let el = t.elapsed();
    outcome(
        max_err < 1e-6 && el < Duration::from_secs(10),
        format!("{} rows, max |error| {max_err:.2e}, {:.2}s", np.len(), el.as_secs_f64()),
    )
}

fn c2_structural_recovery() -> Outcome {
    let t = Instant::now();
    let reps = 20;
    let truth = StructuralParams::colombia();
    let target = [truth.sigma_outer(), truth.sigma_inner(), truth.markdown(), truth.tau];
    let mut within = [0usize; 4];
    let mut covered = [0usize; 4];
    let mut worst = [0.0f64; 4];
    let mut effective = usize::MAX;
    for rep in 0..reps {
        let seed = 101 + rep as u64;
        let (_, np) = sim(&SimConfig {
            seed,
            ..SimConfig::default()
        });
        let fs = first_stage(&np, &FirstStageOptions::default()).expect("first stage");
        let opts = GmmOptions {
            bootstrap: Some(BootstrapPlan::new(200, seed).unwrap()),
            ..GmmOptions::default()
        };
        let r = two_step_gmm(&np, &fs, &opts).expect("gmm");
        let b = r.bootstrap.as_ref().expect("bootstrap");
        effective = effective.min(b.effective);
        let est = [r.reported.sigma_outer, r.reported.sigma_inner, r.reported.markdown, r.reported.tau];
        for j in 0..4 {
            let rel = (est[j] - target[j]).abs() / target[j];
            worst[j] = worst[j].max(rel);
            within[j] += usize::from(rel <= 0.10);
            let (lo, hi) = b.interval90[j];
            covered[j] += usize::from(lo <= target[j] && target[j] <= hi);
        }
    }
    let el = t.elapsed();
    let need = (0.8 * reps as f64).ceil() as usize;
    let pass = (0..3).all(|j| within[j] == reps && covered[j] >= need) && el < Duration::from_secs(15 * 60);
    outcome(
        pass,
        format!(
            "{reps} reps; within 10%: sigma_outer {}/{reps}, sigma_inner {}/{reps}, markdown {}/{reps} \
             (worst {:.1}%, {:.1}%, {:.1}%); 90% coverage {}, {}, {}; tau (informational) within 10% {}/{reps}, \
             coverage {}/{reps}; min effective B {effective}; {:.0}s",
            within[0],
            within[1],
            within[2],
            100.0 * worst[0],
            100.0 * worst[1],
            100.0 * worst[2],
            covered[0],
            covered[1],
            covered[2],
            within[3],
            covered[3],
            el.as_secs_f64()
        ),
    )
}

fn truth_productivity(cfg: &SimConfig, np: &NormalizedPanel) -> (FirstStageFit, ProductivityPanel) {
    let fs = first_stage(np, &FirstStageOptions::default()).expect("first stage");
    let pp = recover_productivity_panel(&cfg.params, np, &fs).expect("recovery");
    (fs, pp)
}

fn c3_markov_recovery() -> Outcome {
    let reps = 20;
    let mut dev: Vec<[[f64; 5]; 3]> = Vec::new();
    for rep in 0..reps {
        let cfg = SimConfig {
            seed: 201 + rep,
            ..SimConfig::default()
        };
        let (s, np) = sim(&cfg);
        let (_, pp) = truth_productivity(&cfg, &np);
        let m = markov_regression(&pp, &np).expect("markov");
        let mut d = [[0.0; 5]; 3];
        for k in 0..3 {
            for j in 0..5 {
                d[k][j] = m.coef[k][j] - s.markov_normalized[k][j];
            }
        }
        dev.push(d);
    }
    let mut worst = 0.0f64;
    let mut worst_at = (0, 0);
    for k in 0..3 {
        for j in 0..5 {
            let xs: Vec<f64> = dev.iter().map(|d| d[k][j]).collect();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let mc_se = sample_sd(&xs) / (xs.len() as f64).sqrt();
            let z = mean.abs() / mc_se;
            if z > worst {
                worst = z;
                worst_at = (k, j);
            }
        }
    }
    let eq = ["omega_H", "omega_S", "omega_U"];
    let reg = ["constant", "omega_H_lag", "omega_S_lag", "omega_U_lag", "export_lag"];
    outcome(
        worst <= 3.0,
        format!(
            "{reps} reps; largest |mean bias| / MC s.e. = {worst:.2} ({} on {})",
            eq[worst_at.0], reg[worst_at.1]
        ),
    )
}

fn random_params<R: Rng>(rng: &mut R) -> (StructuralParams, CesShares) {
    let params = StructuralParams::new(
        rng.random_range(0.03..0.3),
        rng.random_range(0.5..5.0),
        rng.random_range(-4.0..-0.3),
        rng.random_range(-3.0..-0.2),
    )
    .unwrap();
    let alpha_s = rng.random_range(0.2..0.8);
    let ratio = rng.random_range(0.3..1.5);
    (params, CesShares::with_tau(alpha_s, ratio, params.tau))
}

fn random_triple<R: Rng>(rng: &mut R) -> ProductivityTriple {
    ProductivityTriple::new(
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.5..0.5),
    )
}

fn c4_gradients() -> Outcome {
    let mut rng = rng_stream(4, 0);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (params, shares) = random_params(&mut rng);
        let w = random_triple(&mut rng);
        let x = Inputs {
            capital: rng.random_range(0.3..3.0),
            materials: rng.random_range(0.3..3.0),
            skilled: rng.random_range(0.3..3.0),
            unskilled: rng.random_range(0.3..3.0),
        };
        let g = output_gradient(&params, &shares, &x, &w).unwrap();
        for (i, &ana) in g.iter().enumerate() {
            let bump = |d: f64| {
                let mut y = x;
                match i {
                    0 => y.capital += d,
                    1 => y.materials += d,
                    2 => y.skilled += d,
                    _ => y.unskilled += d,
                }
                output(&params, &shares, &y, &w).unwrap()
            };
            let base = [x.capital, x.materials, x.skilled, x.unskilled][i];
            let h = 1e-5 * base;
            let num = (bump(h) - bump(-h)) / (2.0 * h);
            worst = worst.max((ana - num).abs() / ana.abs());
        }
    }
    outcome(worst < 1e-6, format!("100 points, worst relative error {worst:.2e}"))
}

/// Materials quantity giving output `q` at fixed labor, by bisection in log M.
fn materials_for_output(
    params: &StructuralParams,
    shares: &CesShares,
    w: &ProductivityTriple,
    capital: f64,
    s: f64,
    u: f64,
    q: f64,
) -> Option<f64> {
    let f = |lm: f64| {
        let x = Inputs {
            capital,
            materials: lm.exp(),
            skilled: s,
            unskilled: u,
        };
        output(params, shares, &x, w).unwrap() - q
    };
    let (mut lo, mut hi) = (-60.0, 60.0);
    if f(lo) > 0.0 || f(hi) < 0.0 {
        return None;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(hi.exp())
}

fn c5_cost_min() -> Outcome {
    let mut rng = rng_stream(5, 0);
    let mut worst_gap = 0.0f64;
    let mut beaten = 0usize;
    let mut instances = 0usize;
    let mut max_foc = 0.0f64;
    while instances < 50 {
        let (params, shares) = random_params(&mut rng);
        let w = random_triple(&mut rng);
        let state = CostMinState {
            capital: rng.random_range(0.5..2.0),
            wage_skilled: rng.random_range(0.5..2.0),
            wage_unskilled: rng.random_range(0.5..2.0),
            supply_shifter: rng.random_range(0.5..2.0),
        };
        // Required output produced by an arbitrary allocation, so it is attainable.
        let x0 = Inputs {
            capital: state.capital,
            materials: rng.random_range(0.5..2.0),
            skilled: rng.random_range(0.5..2.0),
            unskilled: rng.random_range(0.5..2.0),
        };
        let q = output(&params, &shares, &x0, &w).unwrap();
        let sol = static_cost_min(&state, &w, q, &params, &shares).expect("cost min");
        let cost = sol.variable_cost(&state);
        let foc = foc_residuals(&state, &w, q, &sol, &params, &shares).unwrap();
        max_foc = foc.iter().fold(max_foc, |m, r| m.max(r.abs()));

        let cost_at = |s: f64, u: f64| -> f64 {
            match materials_for_output(&params, &shares, &w, state.capital, s, u, q) {
                Some(m) => {
                    state.wage_skilled * s + state.wage_unskilled * u + materials_cost(m, state.supply_shifter, params.eta_m)
                }
                None => f64::INFINITY,
            }
        };
        let nm = NelderMead {
            tol: 1e-10,
            ftol: 1e-14,
            max_iter: 20_000,
            initial_step: 0.3,
            restarts: 1,
            jitter: 0.0,
            seed: 0,
        };
        let start = [x0.skilled.ln(), x0.unskilled.ln()];
        let numeric = minimize(|v: &[f64]| cost_at(v[0].exp(), v[1].exp()), &start, &nm, Execution::Sequential)
            .expect("oracle minimizer");
        worst_gap = worst_gap.max((cost - numeric.value).abs() / numeric.value);

        for _ in 0..1000 {
            let z1: f64 = StandardNormal.sample(&mut rng);
            let z2: f64 = StandardNormal.sample(&mut rng);
            let s = sol.skilled * (0.2 * z1).exp();
            let u = sol.unskilled * (0.2 * z2).exp();
            if cost_at(s, u) < cost * (1.0 - 1e-12) {
                beaten += 1;
            }
        }
        instances += 1;
    }
    outcome(
        worst_gap < 1e-5 && beaten == 0,
        format!(
            "50 instances; worst relative gap to numerical minimizer {worst_gap:.2e}; \
             perturbations cheaper than solution {beaten}/50000; max FOC residual {max_foc:.1e}"
        ),
    )
}

fn did_config(seed: u64, effect: f64) -> SimConfig {
    let mut cfg = SimConfig {
        seed,
        entry_effect: [0.0, 0.0, effect],
        ..SimConfig::default()
    };
    no_export_learning(&mut cfg);
    cfg
}

fn c6_matching_did() -> Outcome {
    let cfg = did_config(601, 0.10);
    let (_, np) = sim(&cfg);
    let (_, pp) = truth_productivity(&cfg, &np);
    let ccp = estimate_ccp(&np, &pp).expect("ccp");
    let ms = match_exporters(&ccp, &np, 5).expect("matching");
    let balance = balance_table(&ms, &np, &pp, &StateVariable::ALL).expect("balance");
    let opts = DidOptions {
        bootstrap: Some(BootstrapPlan::new(200, 602).unwrap()),
        ..DidOptions::default()
    };
    let did = matched_did(&ms, &productivity_outcome(&np, &pp, StateVariable::OmegaU), &opts).expect("did");
    let mut covers = true;
    let mut desc = Vec::new();
    for h in 0..=3 {
        let d = did.horizon(h).expect("horizon");
        let (lo, hi) = (d.lower.unwrap(), d.upper.unwrap());
        covers &= lo <= 0.10 && 0.10 <= hi;
        desc.push(format!("h={h} {:.3} [{lo:.3},{hi:.3}]", d.tau));
    }
    let base = did.horizon(-1).expect("base horizon").tau;
    let max_t = balance.max_abs_t();
    outcome(
        covers && base == 0.0 && max_t < 1.96,
        format!(
            "{} treated; {}; tau_-1 = {base}; max balance |t| {max_t:.2}",
            ms.treated.len(),
            desc.join(", ")
        ),
    )
}

fn c7_null_calibration() -> Outcome {
    let reps = 50;
    let mut tests = 0usize;
    let mut rejections = 0usize;
    for rep in 0..reps {
        let cfg = did_config(701 + rep, 0.0);
        let (_, np) = sim(&cfg);
        let (_, pp) = truth_productivity(&cfg, &np);
        let ccp = estimate_ccp(&np, &pp).expect("ccp");
        let ms = match_exporters(&ccp, &np, 5).expect("matching");
        let opts = DidOptions {
            bootstrap: Some(BootstrapPlan::new(200, 7000 + rep).unwrap()),
            ..DidOptions::default()
        };
        let did = matched_did(&ms, &productivity_outcome(&np, &pp, StateVariable::OmegaU), &opts).expect("did");
        for d in did.horizons.iter().filter(|d| d.h != -1) {
            if let (Some(lo), Some(hi)) = (d.lower, d.upper) {
                tests += 1;
                rejections += usize::from(!(lo <= 0.0 && 0.0 <= hi));
            }
        }
    }
    let rate = rejections as f64 / tests as f64;
    outcome(
        rate <= 0.20,
        format!("{reps} reps; {rejections}/{tests} horizon tests reject at 90% ({:.1}%)", 100.0 * rate),
    )
}

fn c8_event_study() -> Outcome {
    let mut cfg = SimConfig {
        seed: 801,
        ..SimConfig::default()
    };
    if let Some(m) = cfg.machinery.as_mut() {
        m.entry_step = 0.2;
    }
    let (s, _) = sim(&cfg);
    let y = panel_outcome(&s.panel, PanelOutcome::Machinery);
    let es = event_study(&s.panel, &y, &EventStudyOptions::default()).expect("event study");
    let mut ok = true;
    let mut worst_lag = 0.0f64;
    let mut worst_lead = 0.0f64;
    for c in &es.lags {
        let z = (c.estimate - 0.2).abs() / c.se;
        worst_lag = worst_lag.max(z);
        ok &= z <= 2.0;
    }
    for c in &es.leads {
        let z = c.estimate.abs() / c.se;
        worst_lead = worst_lead.max(z);
        ok &= z <= 2.0;
    }
    let lags: Vec<String> = es.lags.iter().map(|c| format!("{}:{:.3}", c.k, c.estimate)).collect();
    outcome(
        ok,
        format!(
            "{} obs; lags {}; max |phi_k - 0.2|/se {worst_lag:.2}; max |lead|/se {worst_lead:.2}",
            es.n_obs,
            lags.join(" ")
        ),
    )
}

/// Serialized output of every stage for one seed.
fn pipeline_bytes(seed: u64, exec: Execution) -> Vec<(String, Vec<u8>)> {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = did_config(seed, 0.05);
    cfg.n_plants = 800;
    let s = simulate(&cfg, exec).unwrap();
    lbe_core::synth::write_panel(&s, dir.path().join("panel.csv"), true).unwrap();
    let agg = aggregates_with_prices(&s.panel, &s.price_index).unwrap();
    let np = normalize(&s.panel, &agg, NormalizationScope::Global).unwrap();
    let fs = first_stage(&np, &FirstStageOptions::default()).unwrap();
    let mut opts = GmmOptions {
        bootstrap: Some(BootstrapPlan::new(20, seed).unwrap()),
        execution: exec,
        ..GmmOptions::default()
    };
    opts.nelder_mead.seed = seed;
    let gmm = two_step_gmm(&np, &fs, &opts).unwrap();
    let pp = recover_productivity_panel(&gmm.params, &np, &fs).unwrap();
    let ccp = estimate_ccp(&np, &pp).unwrap();
    let ms = match_exporters(&ccp, &np, 5).unwrap();
    let balance = balance_table(&ms, &np, &pp, &StateVariable::ALL).unwrap();
    balance.write_csv(dir.path().join("balance.csv")).unwrap();
    let did_opts = DidOptions {
        bootstrap: Some(BootstrapPlan::new(50, seed).unwrap()),
        execution: exec,
        ..DidOptions::default()
    };
    let did = matched_did(&ms, &productivity_outcome(&np, &pp, StateVariable::OmegaU), &did_opts).unwrap();
    did.write_csv(dir.path().join("did.csv")).unwrap();
    let es = event_study(
        &s.panel,
        &panel_outcome(&s.panel, PanelOutcome::SkillRatio),
        &EventStudyOptions::default(),
    )
    .unwrap();
    es.write_csv(dir.path().join("event_study.csv")).unwrap();

    let mut out = vec![
        ("table2".to_string(), serde_json::to_vec(&gmm.table2()).unwrap()),
        ("table3".to_string(), serde_json::to_vec(&gmm.table3()).unwrap()),
        ("productivity".to_string(), serde_json::to_vec(&pp).unwrap()),
        ("ccp".to_string(), serde_json::to_vec(&ccp).unwrap()),
        ("matched".to_string(), serde_json::to_vec(&ms).unwrap()),
    ];
    let mut files: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    for f in files {
        out.push((
            f.file_name().unwrap().to_string_lossy().into_owned(),
            std::fs::read(&f).unwrap(),
        ));
    }
    out
}

fn c9_determinism() -> Outcome {
    let a = pipeline_bytes(901, Execution::Parallel);
    let b = pipeline_bytes(901, Execution::Parallel);
    let c = pipeline_bytes(901, Execution::Sequential);
    let differing: Vec<&str> = a
        .iter()
        .zip(&b)
        .zip(&c)
        .filter(|((x, y), z)| x != y || x != z)
        .map(|((x, _), _)| x.0.as_str())
        .collect();
    outcome(
        differing.is_empty() && a.len() == b.len() && a.len() == c.len(),
        format!(
            "{} artifacts compared across two parallel runs and one sequential run; differing: {:?}",
            a.len(),
            differing
        ),
    )
}

fn main() {
    // Honour the libtest flags cargo passes, e.g. `--list`.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("FOC round-trip identity", c1_round_trip),
        ("structural parameter recovery", c2_structural_recovery),
        ("law-of-motion recovery", c3_markov_recovery),
        ("gradient checks", c4_gradients),
        ("cost-minimizer optimality", c5_cost_min),
        ("matching and DiD", c6_matching_did),
        ("DiD null calibration", c7_null_calibration),
        ("event study", c8_event_study),
        ("determinism", c9_determinism),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let r = run();
        let tag = if r.pass { "PASS" } else { "FAIL" };
        println!("criterion {id} [{tag}] {name}: {} ({:.1}s)", r.detail, t.elapsed().as_secs_f64());
        if !r.pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
