//! Export-entry treatment effects: conditional choice probabilities of
//! exporting, propensity-score matching of new exporters to never-exporters,
//! matched difference-in-differences over horizons, balance diagnostics, and
//! the event-study regression.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::ces::ProductivityTriple;
use crate::error::{Error, Result};
use crate::estimate::ProductivityPanel;
use crate::exec::Execution;
use crate::numerics::{self, absorb_fixed_effects, logit_irls, BootstrapPlan, FeOptions};
use crate::panel::{NormRow, NormalizedPanel, Panel, PlantYear};

/// Plant-year state variables entering the CCP index and the balance table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateVariable {
    LogCapital,
    LogWageSkilled,
    LogWageUnskilled,
    LogPriceIndex,
    LogIndustryMaterials,
    OmegaH,
    OmegaS,
    OmegaU,
}

impl StateVariable {
    pub const ALL: [StateVariable; 8] = [
        StateVariable::LogCapital,
        StateVariable::LogWageSkilled,
        StateVariable::LogWageUnskilled,
        StateVariable::LogPriceIndex,
        StateVariable::LogIndustryMaterials,
        StateVariable::OmegaH,
        StateVariable::OmegaS,
        StateVariable::OmegaU,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StateVariable::LogCapital => "log_capital",
            StateVariable::LogWageSkilled => "log_wage_skilled",
            StateVariable::LogWageUnskilled => "log_wage_unskilled",
            StateVariable::LogPriceIndex => "log_price_index",
            StateVariable::LogIndustryMaterials => "log_industry_materials_exp",
            StateVariable::OmegaH => "omega_H",
            StateVariable::OmegaS => "omega_S",
            StateVariable::OmegaU => "omega_U",
        }
    }

    pub fn value(self, r: &NormRow, o: &ProductivityTriple) -> f64 {
        match self {
            StateVariable::LogCapital => r.capital.ln(),
            StateVariable::LogWageSkilled => r.wage_skilled.ln(),
            StateVariable::LogWageUnskilled => r.wage_unskilled.ln(),
            StateVariable::LogPriceIndex => r.price_index.ln(),
            StateVariable::LogIndustryMaterials => r.industry_materials_exp.ln(),
            StateVariable::OmegaH => o.omega_h,
            StateVariable::OmegaS => o.omega_s,
            StateVariable::OmegaU => o.omega_u,
        }
    }
}

// ---------------------------------------------------------------------------
// CCP

/// Logit of next-year export status on the log state, current export status
/// and industry effects, with a fitted score for every row with a state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CcpModel {
    pub names: Vec<String>,
    pub coef: Vec<f64>,
    pub se: Vec<f64>,
    /// False when separation forced a pooled fit without industry effects.
    pub industry_effects: bool,
    /// Industries in the sample; the first is the omitted base.
    pub industries: Vec<u32>,
    /// Fitted probability per normalized-panel row.
    pub scores: Vec<Option<f64>>,
    pub n_obs: usize,
    pub log_likelihood: f64,
}

impl CcpModel {
    /// Coefficient by regressor name.
    pub fn coefficient(&self, name: &str) -> Option<(f64, f64)> {
        self.names.iter().position(|n| n == name).map(|i| (self.coef[i], self.se[i]))
    }
}

fn ccp_design(rows: &[usize], np: &NormalizedPanel, pp: &ProductivityPanel, industries: Option<&[u32]>) -> DMatrix<f64> {
    let n_fx = industries.map_or(0, |v| v.len().saturating_sub(1));
    let p = 1 + StateVariable::ALL.len() + 1 + n_fx;
    DMatrix::from_fn(rows.len(), p, |i, j| {
        let r = &np.rows()[rows[i]];
        let o = pp.omega[rows[i]].expect("row with state");
        match j {
            0 => 1.0,
            j if j <= 8 => StateVariable::ALL[j - 1].value(r, &o),
            9 => f64::from(u8::from(r.raw.export)),
            j => {
                let ind = industries.expect("industry effects")[j - 9];
                f64::from(u8::from(r.raw.industry_id == ind))
            }
        }
    })
}

/// Fits the CCP logit on rows with recovered productivity and an observed
/// following year. Separation with industry effects triggers a pooled refit.
pub fn estimate_ccp(np: &NormalizedPanel, pp: &ProductivityPanel) -> Result<CcpModel> {
    let index = np.index();
    let mut fit_rows = Vec::new();
    let mut y = Vec::new();
    for (i, r) in np.rows().iter().enumerate() {
        if pp.omega[i].is_none() {
            continue;
        }
        if let Some(&j) = index.get(&(r.raw.plant_id, r.raw.year + 1)) {
            fit_rows.push(i);
            y.push(f64::from(u8::from(np.rows()[j].raw.export)));
        }
    }
    if fit_rows.len() < 20 {
        return Err(Error::InsufficientData(format!(
            "{} rows with states and a following year for the CCP logit",
            fit_rows.len()
        )));
    }
    let mut industries: Vec<u32> = fit_rows.iter().map(|&i| np.rows()[i].raw.industry_id).collect();
    industries.sort_unstable();
    industries.dedup();

    let with_fx = ccp_design(&fit_rows, np, pp, Some(&industries));
    let (fit, industry_effects) = match logit_irls(&with_fx, &y) {
        Ok(f) => (f, true),
        Err(Error::Separation(msg)) => {
            log::warn!("CCP logit separated with industry effects ({msg}); refitting without them");
            (logit_irls(&ccp_design(&fit_rows, np, pp, None), &y)?, false)
        }
        Err(e) => return Err(e),
    };

    let mut names: Vec<String> = vec!["constant".into()];
    names.extend(StateVariable::ALL.iter().map(|s| s.name().to_string()));
    names.push("export".into());
    if industry_effects {
        names.extend(industries[1..].iter().map(|i| format!("industry_{i}")));
    }
    let score_rows: Vec<usize> = (0..np.len()).filter(|&i| pp.omega[i].is_some()).collect();
    let x = ccp_design(&score_rows, np, pp, industry_effects.then_some(&industries[..]));
    let eta = &x * &fit.coef;
    let mut scores = vec![None; np.len()];
    for (a, &i) in score_rows.iter().enumerate() {
        scores[i] = Some(1.0 / (1.0 + (-eta[a]).exp()));
    }
    Ok(CcpModel {
        names,
        coef: fit.coef.iter().copied().collect(),
        se: fit.se().iter().copied().collect(),
        industry_effects,
        industries,
        scores,
        n_obs: fit_rows.len(),
        log_likelihood: fit.log_likelihood,
    })
}

// ---------------------------------------------------------------------------
// Export histories and matching

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ExportHistory {
    /// A single switch into exporting between consecutive observed years,
    /// never reversed.
    NewExporter { entry_year: i32 },
    NeverExporter,
    AlwaysExporter,
    /// Exit-and-return, gaps around the switch, or other patterns.
    Other,
}

/// Classifies one plant from its year-sorted rows.
pub fn export_history(rows: &[PlantYear]) -> ExportHistory {
    if rows.iter().all(|r| !r.export) {
        return ExportHistory::NeverExporter;
    }
    if rows.iter().all(|r| r.export) {
        return ExportHistory::AlwaysExporter;
    }
    let first = rows.iter().position(|r| r.export).expect("some export year");
    let monotone = rows[first..].iter().all(|r| r.export);
    if first > 0 && monotone && rows[first - 1].year + 1 == rows[first].year {
        ExportHistory::NewExporter {
            entry_year: rows[first].year,
        }
    } else {
        ExportHistory::Other
    }
}

/// Plant-level export histories keyed by plant id.
pub fn export_histories(panel: &Panel) -> BTreeMap<u64, ExportHistory> {
    panel
        .plant_spans()
        .into_iter()
        .map(|s| {
            let rows = &panel.rows()[s];
            (rows[0].plant_id, export_history(rows))
        })
        .collect()
}

fn histories_from_rows(rows: &[NormRow], spans: &[std::ops::Range<usize>]) -> Vec<ExportHistory> {
    spans
        .iter()
        .map(|s| {
            let raw: Vec<PlantYear> = rows[s.clone()].iter().map(|r| r.raw.clone()).collect();
            export_history(&raw)
        })
        .collect()
}

/// A new exporter or never-exporter eligible for matching, with its scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub plant_id: u64,
    pub industry_id: u32,
    pub history: ExportHistory,
    /// (year, propensity score) for years with a fitted score.
    pub scores: Vec<(i32, f64)>,
}

impl PoolEntry {
    fn score(&self, year: i32) -> Option<f64> {
        self.scores.iter().find(|s| s.0 == year).map(|s| s.1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreatedUnit {
    pub plant_id: u64,
    pub industry_id: u32,
    pub entry_year: i32,
    /// Score in the year before entry.
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchedControl {
    pub plant_id: u64,
    pub score: f64,
    pub distance: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnmatchedTreated {
    pub plant_id: u64,
    pub entry_year: i32,
    pub reason: String,
}

/// New exporters with their nearest never-exporting neighbours.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchedSample {
    pub k: usize,
    pub treated: Vec<TreatedUnit>,
    /// Controls per treated unit, nearest first.
    pub controls: Vec<Vec<MatchedControl>>,
    pub unmatched: Vec<UnmatchedTreated>,
    /// Candidates the sample was drawn from; bootstrap replicates re-match
    /// within resamples of this pool.
    pub pool: Vec<PoolEntry>,
}

/// Builds the matching pool from fitted CCP scores.
pub fn match_pool(ccp: &CcpModel, np: &NormalizedPanel) -> Vec<PoolEntry> {
    let spans = np.plant_spans();
    let histories = histories_from_rows(np.rows(), &spans);
    spans
        .iter()
        .zip(histories)
        .filter(|(_, h)| matches!(h, ExportHistory::NewExporter { .. } | ExportHistory::NeverExporter))
        .map(|(s, h)| {
            let rows = &np.rows()[s.clone()];
            PoolEntry {
                plant_id: rows[0].raw.plant_id,
                industry_id: rows[0].raw.industry_id,
                history: h,
                scores: s
                    .clone()
                    .filter_map(|i| ccp.scores[i].map(|p| (np.rows()[i].raw.year, p)))
                    .collect(),
            }
        })
        .collect()
}

/// Nearest-neighbour matching within a pool: each new exporter receives the
/// `k` never-exporters of its industry closest in score in the year before
/// entry, with replacement; ties go to the smaller plant id.
pub fn match_within_pool(pool: Vec<PoolEntry>, k: usize) -> Result<MatchedSample> {
    if k == 0 {
        return Err(Error::Config("matching needs k ≥ 1".into()));
    }
    let mut by_industry: HashMap<u32, Vec<usize>> = HashMap::new();
    for (i, p) in pool.iter().enumerate() {
        if p.history == ExportHistory::NeverExporter {
            by_industry.entry(p.industry_id).or_default().push(i);
        }
    }
    let mut treated = Vec::new();
    let mut controls = Vec::new();
    let mut unmatched = Vec::new();
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by_key(|&i| pool[i].plant_id);
    for &i in &order {
        let p = &pool[i];
        let ExportHistory::NewExporter { entry_year } = p.history else { continue };
        let Some(score) = p.score(entry_year - 1) else {
            unmatched.push(UnmatchedTreated {
                plant_id: p.plant_id,
                entry_year,
                reason: "no propensity score in the year before entry".into(),
            });
            continue;
        };
        let mut cands: Vec<MatchedControl> = by_industry
            .get(&p.industry_id)
            .into_iter()
            .flatten()
            .filter_map(|&c| {
                let s = pool[c].score(entry_year - 1)?;
                Some(MatchedControl {
                    plant_id: pool[c].plant_id,
                    score: s,
                    distance: (s - score).abs(),
                    weight: 1.0,
                })
            })
            .collect();
        if cands.is_empty() {
            unmatched.push(UnmatchedTreated {
                plant_id: p.plant_id,
                entry_year,
                reason: format!(
                    "no never-exporter with a score in industry {} year {}",
                    p.industry_id,
                    entry_year - 1
                ),
            });
            continue;
        }
        cands.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.plant_id.cmp(&b.plant_id)));
        cands.truncate(k);
        treated.push(TreatedUnit {
            plant_id: p.plant_id,
            industry_id: p.industry_id,
            entry_year,
            score,
        });
        controls.push(cands);
    }
    if !unmatched.is_empty() {
        log::warn!("{} new exporters could not be matched", unmatched.len());
    }
    Ok(MatchedSample {
        k,
        treated,
        controls,
        unmatched,
        pool,
    })
}

/// Propensity-score matching of new exporters to never-exporters.
pub fn match_exporters(ccp: &CcpModel, np: &NormalizedPanel, k: usize) -> Result<MatchedSample> {
    match_within_pool(match_pool(ccp, np), k)
}

// ---------------------------------------------------------------------------
// Balance

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceRow {
    pub variable: String,
    pub treated_mean: f64,
    pub control_mean: f64,
    pub difference: f64,
    pub t_stat: f64,
    pub p_value: f64,
    pub n_treated: usize,
    pub n_control: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceTable {
    pub rows: Vec<BalanceRow>,
}

impl BalanceTable {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_rows(path, &self.rows)
    }

    pub fn max_abs_t(&self) -> f64 {
        self.rows.iter().map(|r| r.t_stat.abs()).fold(0.0, f64::max)
    }
}

/// Pooled-variance two-sample t test of equal means.
pub fn two_sample_t(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    let (n1, n2) = (a.len(), b.len());
    if n1 == 0 || n2 == 0 || n1 + n2 < 3 {
        return Err(Error::InsufficientData(format!(
            "t test needs both groups non-empty and three observations, got {n1} and {n2}"
        )));
    }
    let m1 = numerics::mean(a);
    let m2 = numerics::mean(b);
    let ss = |x: &[f64], m: f64| x.iter().map(|v| (v - m).powi(2)).sum::<f64>();
    let df = (n1 + n2 - 2) as f64;
    let sp2 = (ss(a, m1) + ss(b, m2)) / df;
    let se = (sp2 * (1.0 / n1 as f64 + 1.0 / n2 as f64)).sqrt();
    let diff = m1 - m2;
    let t = if diff == 0.0 {
        0.0
    } else if se > 0.0 {
        diff / se
    } else {
        diff.signum() * f64::INFINITY
    };
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::numerical(e.to_string()))?;
    let p = if t.is_finite() {
        (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
    } else {
        0.0
    };
    Ok((t, p))
}

fn state_lookup<'a>(
    np: &'a NormalizedPanel,
    pp: &'a ProductivityPanel,
) -> impl Fn(u64, i32) -> Option<(&'a NormRow, ProductivityTriple)> + 'a {
    let index = np.index();
    move |plant, year| {
        let &i = index.get(&(plant, year))?;
        Some((&np.rows()[i], pp.omega[i]?))
    }
}

fn balance_from(
    columns: &[StateVariable],
    treated: &[(&NormRow, ProductivityTriple)],
    controls: &[(&NormRow, ProductivityTriple)],
) -> Result<BalanceTable> {
    if treated.is_empty() || controls.is_empty() {
        return Err(Error::InsufficientData("balance table needs treated and control rows".into()));
    }
    let rows = columns
        .iter()
        .map(|c| {
            let a: Vec<f64> = treated.iter().map(|(r, o)| c.value(r, o)).collect();
            let b: Vec<f64> = controls.iter().map(|(r, o)| c.value(r, o)).collect();
            let (t, p) = two_sample_t(&a, &b)?;
            let (ma, mb) = (numerics::mean(&a), numerics::mean(&b));
            Ok(BalanceRow {
                variable: c.name().to_string(),
                treated_mean: ma,
                control_mean: mb,
                difference: ma - mb,
                t_stat: t,
                p_value: p,
                n_treated: a.len(),
                n_control: b.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BalanceTable { rows })
}

/// Means of the state in the year before entry, treated vs matched controls
/// (each control counted once per match).
pub fn balance_table(
    ms: &MatchedSample,
    np: &NormalizedPanel,
    pp: &ProductivityPanel,
    columns: &[StateVariable],
) -> Result<BalanceTable> {
    if ms.treated.is_empty() {
        return Err(Error::InsufficientData("matched sample is empty".into()));
    }
    let look = state_lookup(np, pp);
    let mut treated = Vec::new();
    let mut controls = Vec::new();
    for (t, cs) in ms.treated.iter().zip(&ms.controls) {
        let base = t.entry_year - 1;
        if let Some(s) = look(t.plant_id, base) {
            treated.push(s);
        }
        controls.extend(cs.iter().filter_map(|c| look(c.plant_id, base)));
    }
    balance_from(columns, &treated, &controls)
}

/// Same comparison before matching: treated in the year before entry vs
/// every never-exporter plant-year with a state.
pub fn balance_unmatched(
    ms: &MatchedSample,
    np: &NormalizedPanel,
    pp: &ProductivityPanel,
    columns: &[StateVariable],
) -> Result<BalanceTable> {
    let look = state_lookup(np, pp);
    let treated: Vec<_> = ms
        .pool
        .iter()
        .filter_map(|p| match p.history {
            ExportHistory::NewExporter { entry_year } => look(p.plant_id, entry_year - 1),
            _ => None,
        })
        .collect();
    let controls: Vec<_> = ms
        .pool
        .iter()
        .filter(|p| p.history == ExportHistory::NeverExporter)
        .flat_map(|p| p.scores.iter().filter_map(|&(y, _)| look(p.plant_id, y)))
        .collect();
    balance_from(columns, &treated, &controls)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreHistogramRow {
    /// `treated` or `rank_r` for the r-th nearest control.
    pub group: String,
    pub bin_lower: f64,
    pub bin_upper: f64,
    pub count: usize,
}

/// Score histograms on [0, 1] for treated units and each neighbour rank.
pub fn score_histograms(ms: &MatchedSample, bins: usize) -> Vec<ScoreHistogramRow> {
    let bins = bins.max(1);
    let hist = |group: String, scores: Vec<f64>| {
        let mut counts = vec![0usize; bins];
        for s in scores {
            counts[((s * bins as f64) as usize).min(bins - 1)] += 1;
        }
        counts
            .into_iter()
            .enumerate()
            .map(move |(b, count)| ScoreHistogramRow {
                group: group.clone(),
                bin_lower: b as f64 / bins as f64,
                bin_upper: (b + 1) as f64 / bins as f64,
                count,
            })
            .collect::<Vec<_>>()
    };
    let mut out = hist("treated".into(), ms.treated.iter().map(|t| t.score).collect());
    for r in 0..ms.k {
        let s = ms.controls.iter().filter_map(|c| c.get(r).map(|m| m.score)).collect();
        out.extend(hist(format!("rank_{}", r + 1), s));
    }
    out
}

pub fn write_histograms_csv(rows: &[ScoreHistogramRow], path: impl AsRef<Path>) -> Result<()> {
    write_rows(path, rows)
}

// ---------------------------------------------------------------------------
// Matched difference-in-differences

/// Outcome values keyed by (plant id, year).
pub type OutcomeSeries = HashMap<(u64, i32), f64>;

/// One productivity component from a recovered productivity panel.
pub fn productivity_outcome(np: &NormalizedPanel, pp: &ProductivityPanel, component: StateVariable) -> OutcomeSeries {
    np.rows()
        .iter()
        .zip(&pp.omega)
        .filter_map(|(r, o)| Some(((r.raw.plant_id, r.raw.year), component.value(r, o.as_ref()?))))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DidOptions {
    pub min_horizon: i32,
    pub max_horizon: i32,
    pub bootstrap: Option<BootstrapPlan>,
    /// Coverage of the percentile intervals.
    pub coverage: f64,
    pub execution: Execution,
}

impl Default for DidOptions {
    fn default() -> Self {
        Self {
            min_horizon: -4,
            max_horizon: 4,
            bootstrap: None,
            coverage: 0.9,
            execution: Execution::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DidHorizon {
    pub h: i32,
    pub tau: f64,
    pub n_treated: usize,
    pub se: Option<f64>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DidEstimate {
    pub horizons: Vec<DidHorizon>,
    /// Horizons with no treated unit observed.
    pub omitted: Vec<i32>,
    pub bootstrap_effective: Option<usize>,
}

impl DidEstimate {
    pub fn horizon(&self, h: i32) -> Option<&DidHorizon> {
        self.horizons.iter().find(|d| d.h == h)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_rows(path, &self.horizons)
    }
}

/// τ_h and N_T per horizon; `y` returns the outcome of a plant in a year.
fn did_point<F>(ms: &MatchedSample, h_range: (i32, i32), y: F) -> Vec<(i32, Option<(f64, usize)>)>
where
    F: Fn(u64, i32) -> Option<f64>,
{
    (h_range.0..=h_range.1)
        .map(|h| {
            let mut sum = 0.0;
            let mut n = 0usize;
            for (t, cs) in ms.treated.iter().zip(&ms.controls) {
                let base = t.entry_year - 1;
                let year = t.entry_year + h;
                let (Some(y0), Some(y1)) = (y(t.plant_id, base), y(t.plant_id, year)) else { continue };
                let mut csum = 0.0;
                let mut wsum = 0.0;
                for c in cs {
                    if let (Some(c0), Some(c1)) = (y(c.plant_id, base), y(c.plant_id, year)) {
                        csum += c.weight * (c1 - c0);
                        wsum += c.weight;
                    }
                }
                if wsum == 0.0 {
                    continue;
                }
                sum += (y1 - y0) - csum / wsum;
                n += 1;
            }
            (h, (n > 0).then(|| (sum / n as f64, n)))
        })
        .collect()
}

/// Matched DiD of outcome growth relative to the year before entry, with
/// plant-bootstrap percentile intervals that re-run matching and DiD.
pub fn matched_did(ms: &MatchedSample, outcome: &OutcomeSeries, opts: &DidOptions) -> Result<DidEstimate> {
    if opts.min_horizon > opts.max_horizon {
        return Err(Error::Config("empty horizon range".into()));
    }
    if ms.treated.is_empty() {
        return Err(Error::InsufficientData("matched sample is empty".into()));
    }
    let range = (opts.min_horizon, opts.max_horizon);
    let point = did_point(ms, range, |p, y| outcome.get(&(p, y)).copied());
    let omitted: Vec<i32> = point.iter().filter(|p| p.1.is_none()).map(|p| p.0).collect();
    for h in &omitted {
        log::warn!("horizon {h} omitted: no treated plant observed");
    }

    let (reps, effective) = match &opts.bootstrap {
        None => (Vec::new(), None),
        Some(plan) => {
            let n = ms.pool.len();
            let reps: Vec<Option<Vec<(i32, Option<(f64, usize)>)>>> = opts.execution.map_range(plan.replicates, |b| {
                let draw = plan.draw(b, n);
                let pool: Vec<PoolEntry> = draw
                    .iter()
                    .enumerate()
                    .map(|(k, &j)| PoolEntry {
                        plant_id: k as u64 + 1,
                        ..ms.pool[j].clone()
                    })
                    .collect();
                let rep = match_within_pool(pool, ms.k).ok()?;
                if rep.treated.is_empty() {
                    return None;
                }
                Some(did_point(&rep, range, |p, y| {
                    let src = ms.pool[draw[(p - 1) as usize]].plant_id;
                    outcome.get(&(src, y)).copied()
                }))
            });
            let eff = reps.iter().filter(|r| r.is_some()).count();
            (reps.into_iter().flatten().collect(), Some(eff))
        }
    };

    let a = (1.0 - opts.coverage) / 2.0;
    let horizons = point
        .iter()
        .enumerate()
        .filter_map(|(idx, &(h, v))| {
            let (tau, n_treated) = v?;
            let draws: Vec<f64> = reps.iter().filter_map(|r| r[idx].1.map(|x| x.0)).collect();
            let (se, lower, upper) = if draws.len() >= 2 {
                (
                    Some(numerics::sample_sd(&draws)),
                    Some(numerics::quantile(&draws, a)),
                    Some(numerics::quantile(&draws, 1.0 - a)),
                )
            } else {
                (None, None, None)
            };
            Some(DidHorizon {
                h,
                tau,
                n_treated,
                se,
                lower,
                upper,
            })
        })
        .collect();
    Ok(DidEstimate {
        horizons,
        omitted,
        bootstrap_effective: effective,
    })
}

// ---------------------------------------------------------------------------
// Event study

/// Raw panel outcomes used in the employment and investment trajectories.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PanelOutcome {
    SkillRatio,
    SkillPremium,
    Skilled,
    Unskilled,
    Machinery,
    Output,
    Capital,
}

impl PanelOutcome {
    fn value(self, r: &PlantYear) -> Option<f64> {
        Some(match self {
            PanelOutcome::SkillRatio => r.skilled / r.unskilled,
            PanelOutcome::SkillPremium => r.wage_skilled() / r.wage_unskilled(),
            PanelOutcome::Skilled => r.skilled,
            PanelOutcome::Unskilled => r.unskilled,
            PanelOutcome::Machinery => r.machinery?,
            PanelOutcome::Output => r.output,
            PanelOutcome::Capital => r.capital,
        })
    }
}

pub fn panel_outcome(panel: &Panel, which: PanelOutcome) -> OutcomeSeries {
    panel
        .rows()
        .iter()
        .filter_map(|r| Some(((r.plant_id, r.year), which.value(r)?)))
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventSample {
    /// Plants that start exporting in-sample and stay exporters.
    #[default]
    NewExporters,
    /// New exporters plus never-exporters as a comparison group.
    NewAndNeverExporters,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventStudyOptions {
    /// Leads B: dummies for k = −B..=−2, with k ≤ −B binned into −B.
    pub leads: u32,
    /// Lags F: dummies for k = 0..=F, with k ≥ F binned into F.
    pub lags: u32,
    /// Take logs of the outcome (which must then be positive).
    pub log_outcome: bool,
    pub sample: EventSample,
}

impl Default for EventStudyOptions {
    fn default() -> Self {
        Self {
            leads: 4,
            lags: 4,
            log_outcome: true,
            sample: EventSample::NewExporters,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventCoefficient {
    pub k: i32,
    pub estimate: f64,
    pub se: f64,
    pub lower90: f64,
    pub upper90: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventStudyResult {
    /// τ_k for k ≤ −2.
    pub leads: Vec<EventCoefficient>,
    /// φ_k for k ≥ 0.
    pub lags: Vec<EventCoefficient>,
    /// Event times whose dummies were collinear with the fixed effects.
    pub dropped: Vec<i32>,
    pub n_obs: usize,
    pub n_plants: usize,
}

impl EventStudyResult {
    pub fn coefficient(&self, k: i32) -> Option<&EventCoefficient> {
        self.leads.iter().chain(&self.lags).find(|c| c.k == k)
    }

    /// Plot-ready series including the omitted reference period at zero.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut rows: Vec<EventCoefficient> = self.leads.iter().chain(&self.lags).cloned().collect();
        rows.push(EventCoefficient {
            k: -1,
            estimate: 0.0,
            se: 0.0,
            lower90: 0.0,
            upper90: 0.0,
        });
        rows.sort_by_key(|c| c.k);
        write_rows(path, &rows)
    }
}

const Z90: f64 = 1.644_853_626_951_472_2;

/// Two-way fixed-effects event study with plant and sector-by-year effects
/// and heteroskedasticity-robust standard errors.
pub fn event_study(panel: &Panel, outcome: &OutcomeSeries, opts: &EventStudyOptions) -> Result<EventStudyResult> {
    if opts.leads < 2 {
        return Err(Error::Config("event study needs at least two leads (k = −2)".into()));
    }
    let histories = export_histories(panel);
    let b = -(opts.leads as i32);
    let f = opts.lags as i32;
    let event_times: Vec<i32> = (b..=-2).chain(0..=f).collect();

    let mut ys = Vec::new();
    let mut event: Vec<Option<i32>> = Vec::new();
    let mut plant_key = Vec::new();
    let mut cell_key = Vec::new();
    for r in panel.rows() {
        let entry = match histories[&r.plant_id] {
            ExportHistory::NewExporter { entry_year } => Some(entry_year),
            ExportHistory::NeverExporter if opts.sample == EventSample::NewAndNeverExporters => None,
            _ => continue,
        };
        let Some(&v) = outcome.get(&(r.plant_id, r.year)) else { continue };
        let v = if opts.log_outcome {
            if v <= 0.0 {
                return Err(Error::domain(format!(
                    "non-positive outcome {v} for plant {} year {} under a log specification",
                    r.plant_id, r.year
                )));
            }
            v.ln()
        } else {
            v
        };
        ys.push(v);
        event.push(entry.map(|e| (r.year - e).clamp(b, f)));
        plant_key.push(r.plant_id);
        cell_key.push((r.industry_id, r.year));
    }
    let n = ys.len();
    if n == 0 {
        return Err(Error::InsufficientData("no observations in the event-study sample".into()));
    }
    let dense = |keys: &[(u64, i32)]| -> (Vec<usize>, usize) {
        let mut map = HashMap::new();
        let v = keys
            .iter()
            .map(|k| {
                let next = map.len();
                *map.entry(*k).or_insert(next)
            })
            .collect();
        (v, map.len())
    };
    let (plants, n_plants) = dense(&plant_key.iter().map(|&p| (p, 0)).collect::<Vec<_>>());
    let (cells, n_cells) = dense(&cell_key.iter().map(|&(i, y)| (u64::from(i), y)).collect::<Vec<_>>());

    let mut data = DMatrix::zeros(n, 1 + event_times.len());
    for i in 0..n {
        data[(i, 0)] = ys[i];
        if let Some(k) = event[i] {
            if let Some(j) = event_times.iter().position(|&e| e == k) {
                data[(i, 1 + j)] = 1.0;
            }
        }
    }
    let within = absorb_fixed_effects(&data, &[plants, cells], FeOptions::default())?;
    let y = DVector::from_fn(n, |i, _| within[(i, 0)]);
    let mut keep = Vec::new();
    let mut dropped = Vec::new();
    for (j, &k) in event_times.iter().enumerate() {
        let raw: f64 = data.column(1 + j).norm();
        let res: f64 = within.column(1 + j).norm();
        if raw == 0.0 || res <= 1e-8 * raw {
            dropped.push(k);
        } else {
            keep.push(j);
        }
    }
    let x = DMatrix::from_fn(n, keep.len(), |i, a| within[(i, 1 + keep[a])]);
    let fit = numerics::ols(&x, &y, None)?;
    for &d in &fit.dropped {
        dropped.push(event_times[keep[d]]);
    }
    if !dropped.is_empty() {
        dropped.sort_unstable();
        log::warn!("event-time dummies {dropped:?} are collinear with the fixed effects and were dropped");
    }
    // HC1 from the OLS counts only the event dummies; rescale for the
    // absorbed plant and sector-year effects.
    let k_est = keep.len() - fit.dropped.len();
    let absorbed = n_plants + n_cells - 1;
    let dof = n as f64 - (k_est + absorbed) as f64;
    if dof <= 0.0 {
        return Err(Error::InsufficientData("no residual degrees of freedom after fixed effects".into()));
    }
    let scale = ((n - k_est) as f64 / dof).sqrt();
    let se = fit.se_robust();
    let mut leads = Vec::new();
    let mut lags = Vec::new();
    for (a, &j) in keep.iter().enumerate() {
        if fit.dropped.contains(&a) {
            continue;
        }
        let k = event_times[j];
        let s = se[a] * scale;
        let c = EventCoefficient {
            k,
            estimate: fit.coef[a],
            se: s,
            lower90: fit.coef[a] - Z90 * s,
            upper90: fit.coef[a] + Z90 * s,
        };
        if k < 0 {
            leads.push(c);
        } else {
            lags.push(c);
        }
    }
    Ok(EventStudyResult {
        leads,
        lags,
        dropped,
        n_obs: n,
        n_plants,
    })
}

fn write_rows<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
