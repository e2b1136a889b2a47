use std::collections::HashMap;

use lbe_core::estimate::{first_stage, recover_productivity_panel, FirstStageOptions, Pooling};
use lbe_core::numerics::BootstrapPlan;
use lbe_core::panel::{aggregates_with_prices, normalize, NormalizationScope, PlantYear};
use lbe_core::synth::{simulate, SimConfig};
use lbe_core::treatment::{
    estimate_ccp, event_study, export_history, match_exporters, match_within_pool, matched_did,
    DidOptions, EventStudyOptions, ExportHistory, OutcomeSeries, PoolEntry,
};
use lbe_core::Execution;
use proptest::prelude::*;

fn history() -> impl Strategy<Value = ExportHistory> {
    prop_oneof![
        3 => Just(ExportHistory::NeverExporter),
        2 => (2003i32..2008).prop_map(|y| ExportHistory::NewExporter { entry_year: y }),
        1 => Just(ExportHistory::AlwaysExporter),
        1 => Just(ExportHistory::Other),
    ]
}

fn pool() -> impl Strategy<Value = Vec<PoolEntry>> {
    prop::collection::vec(
        (history(), 0u32..3, prop::collection::vec(prop::option::weighted(0.85, 0.0f64..1.0), 8)),
        1..60,
    )
    .prop_map(|entries| {
        entries
            .into_iter()
            .enumerate()
            .map(|(i, (history, ind, scores))| PoolEntry {
                plant_id: i as u64 + 1,
                industry_id: 300 + ind,
                history,
                scores: scores
                    .into_iter()
                    .enumerate()
                    .filter_map(|(t, s)| s.map(|s| (2000 + t as i32, s)))
                    .collect(),
            })
            .collect()
    })
}

fn score_in(p: &PoolEntry, year: i32) -> Option<f64> {
    p.scores.iter().find(|s| s.0 == year).map(|s| s.1)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn matches_are_valid_nearest_neighbours(pool in pool(), k in 1usize..6) {
        let ms = match_within_pool(pool.clone(), k).unwrap();
        let by_id: HashMap<u64, &PoolEntry> = pool.iter().map(|p| (p.plant_id, p)).collect();
        let new_exporters = pool
            .iter()
            .filter(|p| matches!(p.history, ExportHistory::NewExporter { .. }))
            .count();
        prop_assert_eq!(ms.treated.len() + ms.unmatched.len(), new_exporters);
        for (t, cs) in ms.treated.iter().zip(&ms.controls) {
            let year = t.entry_year - 1;
            prop_assert_eq!(Some(t.score), score_in(by_id[&t.plant_id], year));
            prop_assert!(!cs.is_empty() && cs.len() <= k);
            for c in cs {
                let src = by_id[&c.plant_id];
                prop_assert_eq!(src.history, ExportHistory::NeverExporter);
                prop_assert_eq!(src.industry_id, t.industry_id);
                prop_assert_eq!(Some(c.score), score_in(src, year));
                prop_assert!((c.distance - (c.score - t.score).abs()).abs() < 1e-15);
            }
            for w in cs.windows(2) {
                prop_assert!(w[0].distance <= w[1].distance);
            }
            // Brute force: no eligible control outside the set is strictly closer.
            let worst = cs.last().unwrap().distance;
            let mut all: Vec<f64> = pool
                .iter()
                .filter(|p| p.history == ExportHistory::NeverExporter && p.industry_id == t.industry_id)
                .filter_map(|p| score_in(p, year))
                .map(|s| (s - t.score).abs())
                .collect();
            all.sort_by(f64::total_cmp);
            prop_assert_eq!(cs.len(), all.len().min(k));
            prop_assert_eq!(worst, all[cs.len() - 1]);
        }
    }

    #[test]
    fn baseline_horizon_is_zero(pool in pool(), values in prop::collection::vec(-5.0f64..5.0, 60 * 8)) {
        let ms = match_within_pool(pool.clone(), 3).unwrap();
        prop_assume!(!ms.treated.is_empty());
        let mut y = OutcomeSeries::new();
        for p in &pool {
            for t in 0..8 {
                y.insert((p.plant_id, 2000 + t), values[(p.plant_id as usize - 1) * 8 + t as usize]);
            }
        }
        let d = matched_did(&ms, &y, &DidOptions::default()).unwrap();
        prop_assert_eq!(d.horizon(-1).unwrap().tau, 0.0);
    }
}

#[test]
fn export_histories_follow_definitions() {
    let row = |year: i32, export: bool| PlantYear {
        plant_id: 1,
        industry_id: 1,
        year,
        export,
        output: 1.0,
        capital: 1.0,
        investment: 1.0,
        skilled: 1.0,
        unskilled: 1.0,
        skilled_pay: 1.0,
        unskilled_pay: 1.0,
        materials_exp: 1.0,
        machinery: None,
    };
    let h = |flags: &[(i32, bool)]| export_history(&flags.iter().map(|&(y, e)| row(y, e)).collect::<Vec<_>>());
    assert_eq!(h(&[(1, false), (2, false)]), ExportHistory::NeverExporter);
    assert_eq!(h(&[(1, true), (2, true)]), ExportHistory::AlwaysExporter);
    assert_eq!(
        h(&[(1, false), (2, true), (3, true)]),
        ExportHistory::NewExporter { entry_year: 2 }
    );
    assert_eq!(h(&[(1, false), (2, true), (3, false)]), ExportHistory::Other);
    assert_eq!(h(&[(1, false), (3, true)]), ExportHistory::Other);
}

#[test]
fn planted_step_agrees_across_estimators() {
    let cfg = SimConfig {
        n_plants: 1500,
        seed: 77,
        ..SimConfig::default()
    };
    let step = cfg.machinery.as_ref().unwrap().entry_step;
    let s = simulate(&cfg, Execution::Parallel).unwrap();
    let agg = aggregates_with_prices(&s.panel, &s.price_index).unwrap();
    let np = normalize(&s.panel, &agg, NormalizationScope::Global).unwrap();
    let fs = first_stage(&np, &FirstStageOptions { pooling: Pooling::Auto }).unwrap();
    let pp = recover_productivity_panel(&cfg.params, &np, &fs).unwrap();
    let ccp = estimate_ccp(&np, &pp).unwrap();
    let ms = match_exporters(&ccp, &np, 5).unwrap();

    let log_machinery: OutcomeSeries = s
        .panel
        .rows()
        .iter()
        .map(|r| ((r.plant_id, r.year), r.machinery.unwrap().ln()))
        .collect();
    let did = matched_did(
        &ms,
        &log_machinery,
        &DidOptions {
            bootstrap: Some(BootstrapPlan::new(100, 78).unwrap()),
            ..DidOptions::default()
        },
    )
    .unwrap();
    let raw: OutcomeSeries = s
        .panel
        .rows()
        .iter()
        .map(|r| ((r.plant_id, r.year), r.machinery.unwrap()))
        .collect();
    let es = event_study(&s.panel, &raw, &EventStudyOptions::default()).unwrap();
    for h in 0..=3 {
        let phi = es.coefficient(h).unwrap();
        let tau = did.horizon(h).unwrap();
        let joint = (phi.se.powi(2) + tau.se.unwrap().powi(2)).sqrt();
        assert!(
            (phi.estimate - tau.tau).abs() <= 1.96 * joint,
            "h={h}: event study {} vs DiD {} (joint s.e. {joint})",
            phi.estimate,
            tau.tau
        );
        assert!((tau.tau - step).abs() < 0.05);
    }
}

#[test]
fn fitted_scores_rise_with_positive_index_components() {
    let cfg = SimConfig {
        n_plants: 2000,
        seed: 99,
        ..SimConfig::default()
    };
    let s = simulate(&cfg, Execution::Parallel).unwrap();
    let agg = aggregates_with_prices(&s.panel, &s.price_index).unwrap();
    let np = normalize(&s.panel, &agg, NormalizationScope::Global).unwrap();
    let fs = first_stage(&np, &FirstStageOptions { pooling: Pooling::Auto }).unwrap();
    let pp = recover_productivity_panel(&cfg.params, &np, &fs).unwrap();
    let ccp = estimate_ccp(&np, &pp).unwrap();
    assert!(ccp.scores.iter().flatten().all(|p| *p > 0.0 && *p < 1.0));
    let planted = [
        ("log_capital", cfg.export.capital),
        ("omega_H", cfg.export.omega[0]),
        ("omega_S", cfg.export.omega[1]),
        ("omega_U", cfg.export.omega[2]),
    ];
    for (name, truth) in planted {
        assert!(truth > 0.0);
        let (b, _) = ccp.coefficient(name).unwrap();
        assert!(b > 0.0, "{name}: fitted {b}");
    }
    assert!(ccp.coefficient("export").unwrap().0 > 0.0);
}
