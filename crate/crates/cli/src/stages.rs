use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use lbe_core::ces::ProductivityTriple;
use lbe_core::estimate::{
    first_stage, recover_productivity_panel, two_step_gmm, FirstStageOptions, GmmOptions, GmmResult,
    ProductivityPanel,
};
use lbe_core::numerics::BootstrapPlan;
use lbe_core::panel::{
    self, industry_aggregates, load_io_weights, load_oil_series, load_panel, load_price_table, ColumnMap,
    NormalizedPanel, Panel, PriceIndexMode, PriceSource,
};
use lbe_core::synth::{self, SimConfig};
use lbe_core::treatment::{
    balance_table, balance_unmatched, estimate_ccp, event_study, match_exporters, matched_did,
    panel_outcome, productivity_outcome, score_histograms, write_histograms_csv, CcpModel, DidOptions,
    EventStudyOptions, MatchedSample, StateVariable,
};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::error::{io_err, CliError};
use crate::manifest::{hash_value, manifest_path, sha256_file, versions, Manifest};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
#[value(rename_all = "kebab-case")]
pub enum Stage {
    Simulate,
    Estimate,
    Ccp,
    Match,
    Did,
    EventStudy,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Simulate,
        Stage::Estimate,
        Stage::Ccp,
        Stage::Match,
        Stage::Did,
        Stage::EventStudy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::Estimate => "estimate",
            Stage::Ccp => "ccp",
            Stage::Match => "match",
            Stage::Did => "did",
            Stage::EventStudy => "event-study",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    Skipped,
}

// Artifact names inside the run directory.
const PANEL: &str = "panel.csv";
const SIM_CONFIG: &str = "sim_config.json";
const TABLE2: &str = "table2.json";
const TABLE3: &str = "table3.json";
const GMM_RESULT: &str = "gmm_result.json";
const PRODUCTIVITY: &str = "productivity.csv";
const CCP_MODEL: &str = "ccp_model.json";
const CCP_SCORES: &str = "ccp_scores.csv";
const MATCHED: &str = "matched_sample.json";
const BALANCE: &str = "balance.csv";
const BALANCE_UNMATCHED: &str = "balance_unmatched.csv";
const HISTOGRAMS: &str = "score_histograms.csv";

fn splitmix(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn enum_name<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        other => format!("{other:?}"),
    }
}

/// Files a stage writes, with row counts, collected while it runs.
#[derive(Default)]
struct Written {
    files: Vec<String>,
    rows: BTreeMap<String, usize>,
}

impl Written {
    fn file(&mut self, name: impl Into<String>) {
        self.files.push(name.into());
    }

    fn rows(&mut self, key: &str, n: usize) {
        self.rows.insert(key.to_string(), n);
    }
}

pub struct Runner {
    cfg: RunConfig,
    skip_if_fresh: bool,
}

impl Runner {
    pub fn new(cfg: RunConfig, skip_if_fresh: bool) -> Result<Self, CliError> {
        cfg.validate()?;
        Ok(Self { cfg, skip_if_fresh })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    fn out(&self, name: &str) -> PathBuf {
        self.cfg.out.join(name)
    }

    /// Every stage in order. The simulator runs only when no input panel is
    /// configured.
    pub fn pipeline(&self) -> Result<Vec<(Stage, Outcome)>, CliError> {
        Stage::ALL
            .iter()
            .filter(|s| **s != Stage::Simulate || self.cfg.input.panel.is_none())
            .map(|&s| self.run(s).map(|o| (s, o)))
            .collect()
    }

    pub fn run(&self, stage: Stage) -> Result<Outcome, CliError> {
        std::fs::create_dir_all(&self.cfg.out)
            .map_err(io_err(format!("cannot create {}", self.cfg.out.display())))?;
        let inputs = self.inputs(stage)?;
        let seed = self.stage_seed(stage)?;
        let mut input_hashes = BTreeMap::new();
        for p in &inputs {
            // Run-directory artifacts are keyed by name so the directory can move.
            let key = p.strip_prefix(&self.cfg.out).unwrap_or(p);
            input_hashes.insert(key.display().to_string(), sha256_file(p)?);
        }
        let mut manifest = Manifest {
            stage: stage.name().to_string(),
            config_hash: hash_value(&self.stage_config(stage)),
            seed,
            versions: versions(),
            inputs: input_hashes,
            outputs: BTreeMap::new(),
            row_counts: BTreeMap::new(),
        };
        let mpath = manifest_path(&self.cfg.out, stage.name());
        if self.skip_if_fresh {
            if let Some(old) = Manifest::read(&mpath) {
                if old.is_fresh(&manifest, &self.cfg.out) {
                    log::info!("{}: artifacts are fresh, skipping", stage.name());
                    return Ok(Outcome::Skipped);
                }
            }
        }
        log::info!("{}: running", stage.name());
        let mut w = Written::default();
        match stage {
            Stage::Simulate => self.simulate(seed.expect("seeded"), &mut w)?,
            Stage::Estimate => self.estimate(seed.expect("seeded"), &mut w)?,
            Stage::Ccp => self.ccp(&mut w)?,
            Stage::Match => self.matching(&mut w)?,
            Stage::Did => self.did(seed, &mut w)?,
            Stage::EventStudy => self.event_study(&mut w)?,
        }
        for f in &w.files {
            manifest.outputs.insert(f.clone(), sha256_file(&self.out(f))?);
        }
        manifest.row_counts = w.rows;
        manifest.write(&mpath)?;
        Ok(Outcome::Ran)
    }

    fn stage_seed(&self, stage: Stage) -> Result<Option<u64>, CliError> {
        let stochastic = match stage {
            Stage::Simulate | Stage::Estimate => true,
            Stage::Did => self.cfg.matching.bootstrap_replicates > 0,
            Stage::Ccp | Stage::Match | Stage::EventStudy => false,
        };
        if stochastic {
            self.cfg.require_seed(stage.name()).map(Some)
        } else {
            Ok(None)
        }
    }

    /// Configuration values a stage depends on.
    fn stage_config(&self, stage: Stage) -> serde_json::Value {
        let c = &self.cfg;
        match stage {
            Stage::Simulate => json!({ "simulate": c.simulate }),
            Stage::Estimate => json!({ "input": c.input, "estimate": c.estimate }),
            Stage::Ccp => json!({ "input": c.input }),
            Stage::Match => json!({
                "input": c.input,
                "k": c.matching.k,
                "histogram_bins": c.matching.histogram_bins,
            }),
            Stage::Did => json!({ "input": c.input, "matching": c.matching }),
            Stage::EventStudy => json!({ "input": c.input, "event_study": c.event_study }),
        }
    }

    // -----------------------------------------------------------------------
    // Inputs

    fn panel_path(&self) -> PathBuf {
        self.cfg.input.panel.clone().unwrap_or_else(|| self.out(PANEL))
    }

    fn price_paths(&self) -> Vec<PathBuf> {
        let i = &self.cfg.input;
        match i.price_index_mode {
            PriceIndexMode::WtiProxy => vec![i.price_index.clone().unwrap_or_else(|| {
                let panel = self.panel_path();
                let stem = panel.file_stem().and_then(|s| s.to_str()).unwrap_or("panel").to_string();
                panel.with_file_name(format!("{stem}_price_index.csv"))
            })],
            PriceIndexMode::IoWeighted => vec![
                i.origin_prices.clone().expect("validated"),
                i.io_weights.clone().expect("validated"),
            ],
            PriceIndexMode::Fitted => vec![
                i.output_prices.clone().expect("validated"),
                i.oil.clone().expect("validated"),
            ],
        }
    }

    fn data_inputs(&self) -> Vec<(PathBuf, &'static str)> {
        let mut v = vec![(self.panel_path(), "simulate")];
        v.extend(self.price_paths().into_iter().map(|p| (p, "simulate")));
        v
    }

    /// Upstream files of a stage, after checking that each exists.
    fn inputs(&self, stage: Stage) -> Result<Vec<PathBuf>, CliError> {
        let art = |name: &str, from: &'static str| (self.out(name), from);
        let needed: Vec<(PathBuf, &'static str)> = match stage {
            Stage::Simulate => vec![],
            Stage::Estimate => self.data_inputs(),
            Stage::Ccp => {
                let mut v = self.data_inputs();
                v.push(art(GMM_RESULT, "estimate"));
                v.push(art(PRODUCTIVITY, "estimate"));
                v
            }
            Stage::Match => {
                let mut v = self.data_inputs();
                v.push(art(GMM_RESULT, "estimate"));
                v.push(art(PRODUCTIVITY, "estimate"));
                v.push(art(CCP_MODEL, "ccp"));
                v
            }
            Stage::Did => {
                let mut v = self.data_inputs();
                v.push(art(GMM_RESULT, "estimate"));
                v.push(art(PRODUCTIVITY, "estimate"));
                v.push(art(MATCHED, "match"));
                v
            }
            Stage::EventStudy => vec![(self.panel_path(), "simulate")],
        };
        for (p, from) in &needed {
            if !p.is_file() {
                return Err(CliError::Dependency {
                    path: p.clone(),
                    stage: from,
                });
            }
        }
        Ok(needed.into_iter().map(|(p, _)| p).collect())
    }

    fn load_panel(&self) -> Result<Panel, CliError> {
        let (panel, report) = load_panel(self.panel_path(), &ColumnMap::default())?;
        if !report.excluded.is_empty() {
            log::warn!("{} panel rows excluded on load", report.excluded.len());
        }
        Ok(panel)
    }

    fn load_normalized(&self) -> Result<(Panel, NormalizedPanel), CliError> {
        let panel = self.load_panel()?;
        let paths = self.price_paths();
        let source = match self.cfg.input.price_index_mode {
            PriceIndexMode::WtiProxy => PriceSource::WtiProxy(load_price_table(&paths[0])?),
            PriceIndexMode::IoWeighted => PriceSource::IoWeighted {
                origin_prices: load_price_table(&paths[0])?,
                weights: load_io_weights(&paths[1])?,
            },
            PriceIndexMode::Fitted => PriceSource::Fitted {
                output_prices: load_price_table(&paths[0])?,
                oil: load_oil_series(&paths[1])?,
            },
        };
        let agg = industry_aggregates(&panel, &source)?;
        let np = panel::normalize(&panel, &agg, self.cfg.input.normalization)?;
        Ok((panel, np))
    }

    fn read_json<T: DeserializeOwned>(&self, name: &str) -> Result<T, CliError> {
        let path = self.out(name);
        let text = std::fs::read_to_string(&path).map_err(io_err(format!("cannot read {}", path.display())))?;
        serde_json::from_str(&text).map_err(|source| CliError::Json {
            context: format!("cannot parse {}", path.display()),
            source,
        })
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T, w: &mut Written) -> Result<(), CliError> {
        let path = self.out(name);
        let text = serde_json::to_string_pretty(value).map_err(|source| CliError::Json {
            context: format!("cannot serialize {name}"),
            source,
        })?;
        std::fs::write(&path, text + "\n").map_err(io_err(format!("cannot write {}", path.display())))?;
        w.file(name);
        Ok(())
    }

    /// Productivity from the estimate stage, aligned with `np`.
    fn load_productivity(&self, np: &NormalizedPanel) -> Result<ProductivityPanel, CliError> {
        let gmm: GmmResult = self.read_json(GMM_RESULT)?;
        let path = self.out(PRODUCTIVITY);
        let mut rdr = csv::Reader::from_path(&path).map_err(lbe_core::Error::from)?;
        let mut by_key: HashMap<(u64, i32), ProductivityTriple> = HashMap::new();
        for rec in rdr.deserialize() {
            let r: ProductivityRecord = rec.map_err(lbe_core::Error::from)?;
            by_key.insert(
                (r.plant_id, r.year),
                ProductivityTriple {
                    omega_h: r.omega_h,
                    omega_s: r.omega_s,
                    omega_u: r.omega_u,
                },
            );
        }
        let omega: Vec<_> = np
            .rows()
            .iter()
            .map(|r| by_key.get(&(r.raw.plant_id, r.raw.year)).copied())
            .collect();
        if omega.iter().all(Option::is_none) {
            return Err(CliError::Config(format!(
                "{} shares no plant-years with the panel; re-run the estimate stage",
                path.display()
            )));
        }
        Ok(ProductivityPanel {
            omega,
            params: gmm.params,
            shares: gmm.shares,
        })
    }

    // -----------------------------------------------------------------------
    // Stages

    fn simulate(&self, seed: u64, w: &mut Written) -> Result<(), CliError> {
        let s = &self.cfg.simulate;
        let mut sim_cfg = SimConfig {
            n_plants: s.n_plants,
            n_years: s.n_years,
            n_industries: s.n_industries,
            measurement_sd: s.measurement_sd,
            entry_effect: s.entry_effect,
            seed,
            ..SimConfig::default()
        };
        if let Some(b) = s.markov_export_effect {
            for (k, v) in b.into_iter().enumerate() {
                sim_cfg.markov.coef[k][4] = v;
            }
        }
        match s.machinery_entry_step {
            None => sim_cfg.machinery = None,
            Some(step) => {
                if let Some(m) = sim_cfg.machinery.as_mut() {
                    m.entry_step = step;
                }
            }
        }
        let sim = synth::simulate(&sim_cfg, lbe_core::Execution::default())?;
        let files = synth::write_panel(&sim, self.out(PANEL), s.write_truth)?;
        for p in [Some(&files.panel), Some(&files.price_index), files.truth.as_ref()].into_iter().flatten() {
            w.file(p.file_name().and_then(|n| n.to_str()).expect("utf-8 file name"));
        }
        self.write_json(SIM_CONFIG, &sim_cfg, w)?;
        w.rows("panel", sim.panel.len());
        w.rows("plants", sim.panel.n_plants());
        Ok(())
    }

    fn estimate(&self, seed: u64, w: &mut Written) -> Result<(), CliError> {
        let e = &self.cfg.estimate;
        let (_, np) = self.load_normalized()?;
        let fs_opts = FirstStageOptions { pooling: e.pooling };
        let fs = first_stage(&np, &fs_opts)?;
        let mut opts = GmmOptions {
            first_stage: fs_opts,
            replicate_mode: e.replicate_mode,
            interval: e.interval,
            ..GmmOptions::default()
        };
        opts.nelder_mead.restarts = e.restarts;
        opts.nelder_mead.tol = e.tol;
        opts.nelder_mead.ftol = e.ftol;
        opts.nelder_mead.max_iter = e.max_iter;
        opts.nelder_mead.seed = seed;
        if e.bootstrap_replicates > 0 {
            opts.bootstrap = Some(BootstrapPlan::new(e.bootstrap_replicates, splitmix(seed, 1))?);
        }
        let result = two_step_gmm(&np, &fs, &opts)?;
        if !result.converged {
            log::warn!("GMM optimizer stopped before meeting its tolerances");
        }
        let pp = recover_productivity_panel(&result.params, &np, &fs)?;

        self.write_json(TABLE2, &result.table2(), w)?;
        self.write_json(TABLE3, &result.table3(), w)?;
        self.write_json(GMM_RESULT, &result, w)?;
        let records: Vec<ProductivityRecord> = np
            .rows()
            .iter()
            .zip(&pp.omega)
            .filter_map(|(r, o)| {
                let o = o.as_ref()?;
                Some(ProductivityRecord {
                    plant_id: r.raw.plant_id,
                    year: r.raw.year,
                    omega_h: o.omega_h,
                    omega_s: o.omega_s,
                    omega_u: o.omega_u,
                })
            })
            .collect();
        write_csv(&self.out(PRODUCTIVITY), &records)?;
        w.file(PRODUCTIVITY);
        w.rows("normalized_panel", np.len());
        w.rows("first_stage", fs.n_estimable());
        w.rows("moment_obs", result.n_moment_obs);
        w.rows("productivity", records.len());
        if let Some(b) = &result.bootstrap {
            w.rows("bootstrap_effective", b.effective);
        }
        Ok(())
    }

    fn ccp(&self, w: &mut Written) -> Result<(), CliError> {
        let (_, np) = self.load_normalized()?;
        let pp = self.load_productivity(&np)?;
        let model = estimate_ccp(&np, &pp)?;
        self.write_json(CCP_MODEL, &model, w)?;
        let scores: Vec<ScoreRecord> = np
            .rows()
            .iter()
            .zip(&model.scores)
            .filter_map(|(r, s)| {
                Some(ScoreRecord {
                    plant_id: r.raw.plant_id,
                    year: r.raw.year,
                    score: (*s)?,
                })
            })
            .collect();
        write_csv(&self.out(CCP_SCORES), &scores)?;
        w.file(CCP_SCORES);
        w.rows("ccp_obs", model.n_obs);
        w.rows("scores", scores.len());
        Ok(())
    }

    fn matching(&self, w: &mut Written) -> Result<(), CliError> {
        let m = &self.cfg.matching;
        let (_, np) = self.load_normalized()?;
        let pp = self.load_productivity(&np)?;
        let ccp: CcpModel = self.read_json(CCP_MODEL)?;
        if ccp.scores.len() != np.len() {
            return Err(CliError::Config(format!(
                "{CCP_MODEL} was fitted on a different panel; re-run the ccp stage"
            )));
        }
        let ms = match_exporters(&ccp, &np, m.k)?;
        let balance = balance_table(&ms, &np, &pp, &StateVariable::ALL)?;
        let before = balance_unmatched(&ms, &np, &pp, &StateVariable::ALL)?;
        let hist = score_histograms(&ms, m.histogram_bins);
        self.write_json(MATCHED, &ms, w)?;
        balance.write_csv(self.out(BALANCE))?;
        w.file(BALANCE);
        before.write_csv(self.out(BALANCE_UNMATCHED))?;
        w.file(BALANCE_UNMATCHED);
        write_histograms_csv(&hist, self.out(HISTOGRAMS))?;
        w.file(HISTOGRAMS);
        w.rows("treated", ms.treated.len());
        w.rows("unmatched", ms.unmatched.len());
        w.rows("pool", ms.pool.len());
        Ok(())
    }

    fn did(&self, seed: Option<u64>, w: &mut Written) -> Result<(), CliError> {
        let m = &self.cfg.matching;
        let (_, np) = self.load_normalized()?;
        let pp = self.load_productivity(&np)?;
        let ms: MatchedSample = self.read_json(MATCHED)?;
        let mut opts = DidOptions {
            min_horizon: m.min_horizon,
            max_horizon: m.max_horizon,
            ..DidOptions::default()
        };
        for (j, &var) in m.outcomes.iter().enumerate() {
            if let Some(seed) = seed.filter(|_| m.bootstrap_replicates > 0) {
                opts.bootstrap = Some(BootstrapPlan::new(m.bootstrap_replicates, splitmix(seed, 2 + j as u64))?);
            }
            let series = productivity_outcome(&np, &pp, var);
            let est = matched_did(&ms, &series, &opts)?;
            let name = format!("did_{}.csv", enum_name(&var));
            est.write_csv(self.out(&name))?;
            w.file(name);
            w.rows(&format!("horizons_{}", enum_name(&var)), est.horizons.len());
        }
        Ok(())
    }

    fn event_study(&self, w: &mut Written) -> Result<(), CliError> {
        let c = &self.cfg.event_study;
        let panel = self.load_panel()?;
        let opts = EventStudyOptions {
            leads: c.leads,
            lags: c.lags,
            log_outcome: true,
            sample: c.sample,
        };
        for outcome in &c.outcomes {
            let series = panel_outcome(&panel, *outcome);
            let res = event_study(&panel, &series, &opts)?;
            let name = format!("event_study_{}.csv", enum_name(outcome));
            res.write_csv(self.out(&name))?;
            w.file(name);
            w.rows(&format!("obs_{}", enum_name(outcome)), res.n_obs);
        }
        Ok(())
    }
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct ProductivityRecord {
    plant_id: u64,
    year: i32,
    #[serde(rename = "omega_H")]
    omega_h: f64,
    #[serde(rename = "omega_S")]
    omega_s: f64,
    #[serde(rename = "omega_U")]
    omega_u: f64,
}

#[derive(Debug, serde::Serialize)]
struct ScoreRecord {
    plant_id: u64,
    year: i32,
    score: f64,
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut wtr = csv::Writer::from_path(path).map_err(lbe_core::Error::from)?;
    for r in rows {
        wtr.serialize(r).map_err(lbe_core::Error::from)?;
    }
    wtr.flush().map_err(io_err(format!("cannot write {}", path.display())))?;
    Ok(())
}
