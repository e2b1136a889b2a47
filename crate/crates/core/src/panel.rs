//! Plant-year panel: ingestion, industry aggregates and geometric-mean
//! normalization.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ols;

/// One plant-year observation. Currency columns are assumed pre-deflated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantYear {
    pub plant_id: u64,
    pub industry_id: u32,
    pub year: i32,
    pub export: bool,
    pub output: f64,
    pub capital: f64,
    /// May be zero or negative; such rows are skipped by the control-function stage.
    pub investment: f64,
    /// Headcounts are stored as reals so simulated allocations stay exact.
    pub skilled: f64,
    pub unskilled: f64,
    pub skilled_pay: f64,
    pub unskilled_pay: f64,
    pub materials_exp: f64,
    pub machinery: Option<f64>,
}

impl PlantYear {
    pub fn wage_skilled(&self) -> f64 {
        self.skilled_pay / self.skilled
    }

    pub fn wage_unskilled(&self) -> f64 {
        self.unskilled_pay / self.unskilled
    }

    pub fn labor_pay(&self) -> f64 {
        self.skilled_pay + self.unskilled_pay
    }

    /// Reason the row violates the sample restriction, if any.
    fn violation(&self) -> Option<&'static str> {
        let positive = [
            (self.output, "output"),
            (self.capital, "capital"),
            (self.skilled, "skilled_n"),
            (self.unskilled, "unskilled_n"),
            (self.skilled_pay, "skilled_pay"),
            (self.unskilled_pay, "unskilled_pay"),
            (self.materials_exp, "materials_exp"),
        ];
        for (v, name) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Some(name);
            }
        }
        if !self.investment.is_finite() {
            return Some("investment");
        }
        if let Some(m) = self.machinery {
            if !(m.is_finite() && m > 0.0) {
                return Some("machinery");
            }
        }
        None
    }
}

/// Validated, unbalanced plant-year panel sorted by (plant_id, year).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Panel {
    rows: Vec<PlantYear>,
}

impl Panel {
    /// Builds a panel, rejecting rows that violate positivity and duplicate keys.
    pub fn new(mut rows: Vec<PlantYear>) -> Result<Self> {
        for r in &rows {
            if let Some(col) = r.violation() {
                return Err(Error::domain(format!(
                    "plant {} year {}: {col} must be positive and finite",
                    r.plant_id, r.year
                )));
            }
        }
        rows.sort_by_key(|r| (r.plant_id, r.year));
        for w in rows.windows(2) {
            if w[0].plant_id == w[1].plant_id && w[0].year == w[1].year {
                return Err(Error::Schema(format!(
                    "duplicate observation for plant {} year {}",
                    w[0].plant_id, w[0].year
                )));
            }
            if w[0].plant_id == w[1].plant_id && w[0].industry_id != w[1].industry_id {
                return Err(Error::Schema(format!(
                    "plant {} changes industry between years",
                    w[0].plant_id
                )));
            }
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[PlantYear] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn n_plants(&self) -> usize {
        plant_spans(&self.rows).len()
    }

    pub fn has_machinery(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| r.machinery.is_some())
    }

    /// Contiguous row ranges, one per plant.
    pub fn plant_spans(&self) -> Vec<std::ops::Range<usize>> {
        plant_spans(&self.rows)
    }

    pub fn into_rows(self) -> Vec<PlantYear> {
        self.rows
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let with_machinery = self.has_machinery();
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<&str> = DEFAULT_COLUMNS.to_vec();
        if with_machinery {
            header.push("machinery");
        }
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                r.plant_id.to_string(),
                r.industry_id.to_string(),
                r.year.to_string(),
                u8::from(r.export).to_string(),
                r.output.to_string(),
                r.capital.to_string(),
                r.investment.to_string(),
                r.skilled.to_string(),
                r.unskilled.to_string(),
                r.skilled_pay.to_string(),
                r.unskilled_pay.to_string(),
                r.materials_exp.to_string(),
            ];
            if with_machinery {
                rec.push(r.machinery.map(|m| m.to_string()).unwrap_or_default());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn plant_spans(rows: &[PlantYear]) -> Vec<std::ops::Range<usize>> {
    let mut spans = Vec::new();
    let mut start = 0;
    for i in 1..=rows.len() {
        if i == rows.len() || rows[i].plant_id != rows[start].plant_id {
            spans.push(start..i);
            start = i;
        }
    }
    spans
}

const DEFAULT_COLUMNS: [&str; 12] = [
    "plant_id",
    "industry_id",
    "year",
    "export",
    "output",
    "capital",
    "investment",
    "skilled_n",
    "unskilled_n",
    "skilled_pay",
    "unskilled_pay",
    "materials_exp",
];

/// Maps logical fields onto CSV header names.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMap {
    pub plant_id: String,
    pub industry_id: String,
    pub year: String,
    pub export: String,
    pub output: String,
    pub capital: String,
    pub investment: String,
    pub skilled: String,
    pub unskilled: String,
    pub skilled_pay: String,
    pub unskilled_pay: String,
    pub materials_exp: String,
    pub machinery: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        let c = DEFAULT_COLUMNS;
        Self {
            plant_id: c[0].into(),
            industry_id: c[1].into(),
            year: c[2].into(),
            export: c[3].into(),
            output: c[4].into(),
            capital: c[5].into(),
            investment: c[6].into(),
            skilled: c[7].into(),
            unskilled: c[8].into(),
            skilled_pay: c[9].into(),
            unskilled_pay: c[10].into(),
            materials_exp: c[11].into(),
            machinery: "machinery".into(),
        }
    }
}

/// Rows dropped at ingestion, with 1-based data-row numbers.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LoadReport {
    pub rows_read: usize,
    pub rows_kept: usize,
    pub excluded: Vec<Exclusion>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Exclusion {
    pub row: usize,
    pub plant_id: u64,
    pub year: i32,
    pub reason: String,
}

pub fn load_panel(path: impl AsRef<Path>, columns: &ColumnMap) -> Result<(Panel, LoadReport)> {
    let rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path.as_ref())?;
    read_panel(rdr, columns)
}

pub fn read_panel<R: std::io::Read>(
    mut rdr: csv::Reader<R>,
    columns: &ColumnMap,
) -> Result<(Panel, LoadReport)> {
    let headers = rdr.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
    };
    let idx = [
        find(&columns.plant_id)?,
        find(&columns.industry_id)?,
        find(&columns.year)?,
        find(&columns.export)?,
        find(&columns.output)?,
        find(&columns.capital)?,
        find(&columns.investment)?,
        find(&columns.skilled)?,
        find(&columns.unskilled)?,
        find(&columns.skilled_pay)?,
        find(&columns.unskilled_pay)?,
        find(&columns.materials_exp)?,
    ];
    let machinery_idx = headers.iter().position(|h| h == columns.machinery);

    let mut report = LoadReport::default();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row_no = i + 1;
        let rec = rec?;
        let field = |j: usize| rec.get(j).unwrap_or("");
        let int = |j: usize| -> Result<i64> {
            field(j).parse::<i64>().map_err(|e| Error::Parse {
                row: row_no,
                message: format!("column `{}`: {e}", &headers[j]),
            })
        };
        let num = |j: usize| -> Result<f64> {
            field(j).parse::<f64>().map_err(|e| Error::Parse {
                row: row_no,
                message: format!("column `{}`: {e}", &headers[j]),
            })
        };
        let plant_id = int(idx[0])?;
        if plant_id < 0 {
            return Err(Error::Parse {
                row: row_no,
                message: "plant_id must be a non-negative integer".into(),
            });
        }
        let export = match int(idx[3])? {
            0 => false,
            1 => true,
            other => {
                return Err(Error::Parse {
                    row: row_no,
                    message: format!("export flag must be 0 or 1, got {other}"),
                })
            }
        };
        let machinery = match machinery_idx {
            Some(j) if !field(j).is_empty() => Some(num(j)?),
            _ => None,
        };
        let r = PlantYear {
            plant_id: plant_id as u64,
            industry_id: u32::try_from(int(idx[1])?).map_err(|_| Error::Parse {
                row: row_no,
                message: "industry_id out of range".into(),
            })?,
            year: i32::try_from(int(idx[2])?).map_err(|_| Error::Parse {
                row: row_no,
                message: "year out of range".into(),
            })?,
            export,
            output: num(idx[4])?,
            capital: num(idx[5])?,
            investment: num(idx[6])?,
            skilled: num(idx[7])?,
            unskilled: num(idx[8])?,
            skilled_pay: num(idx[9])?,
            unskilled_pay: num(idx[10])?,
            materials_exp: num(idx[11])?,
            machinery,
        };
        report.rows_read += 1;
        if let Some(col) = r.violation() {
            report.excluded.push(Exclusion {
                row: row_no,
                plant_id: r.plant_id,
                year: r.year,
                reason: format!("{col} not strictly positive"),
            });
            continue;
        }
        rows.push(r);
    }
    report.rows_kept = rows.len();
    Ok((Panel::new(rows)?, report))
}

// ---------------------------------------------------------------------------
// Industry aggregates

pub type CellKey = (u32, i32);

/// Industry-year price table keyed by (industry_id, year).
pub type PriceTable = BTreeMap<CellKey, f64>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriceIndexMode {
    /// Price index supplied directly (oil-price proxy normalized by output prices).
    #[default]
    WtiProxy,
    /// Weighted geometric average of origin-industry output price indices.
    IoWeighted,
    /// Fitted values from regressing log output price indices on log oil prices.
    Fitted,
}

/// Destination/origin input-output weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IoWeight {
    pub destination_industry: u32,
    pub origin_industry: u32,
    pub weight: f64,
}

/// External price inputs for the selected index mode.
#[derive(Clone, Debug, PartialEq)]
pub enum PriceSource {
    WtiProxy(PriceTable),
    IoWeighted {
        origin_prices: PriceTable,
        weights: Vec<IoWeight>,
    },
    Fitted {
        output_prices: PriceTable,
        oil: BTreeMap<i32, f64>,
    },
}

impl PriceSource {
    pub fn mode(&self) -> PriceIndexMode {
        match self {
            PriceSource::WtiProxy(_) => PriceIndexMode::WtiProxy,
            PriceSource::IoWeighted { .. } => PriceIndexMode::IoWeighted,
            PriceSource::Fitted { .. } => PriceIndexMode::Fitted,
        }
    }

    /// Resolves the materials price index for every cell.
    pub fn resolve(&self) -> Result<PriceTable> {
        match self {
            PriceSource::WtiProxy(t) => Ok(t.clone()),
            PriceSource::IoWeighted {
                origin_prices,
                weights,
            } => io_weighted_index(origin_prices, weights),
            PriceSource::Fitted { output_prices, oil } => fitted_index(output_prices, oil),
        }
    }
}

fn io_weighted_index(origin: &PriceTable, weights: &[IoWeight]) -> Result<PriceTable> {
    let mut by_dest: BTreeMap<u32, Vec<(u32, f64)>> = BTreeMap::new();
    for w in weights {
        if !(w.weight.is_finite() && w.weight >= 0.0) {
            return Err(Error::Config(format!(
                "invalid IO weight {} for ({}, {})",
                w.weight, w.destination_industry, w.origin_industry
            )));
        }
        by_dest
            .entry(w.destination_industry)
            .or_default()
            .push((w.origin_industry, w.weight));
    }
    let years: std::collections::BTreeSet<i32> = origin.keys().map(|k| k.1).collect();
    let mut out = PriceTable::new();
    for (dest, ws) in &by_dest {
        let total: f64 = ws.iter().map(|w| w.1).sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "IO weights for destination {dest} sum to {total}, expected 1"
            )));
        }
        for &year in &years {
            let mut log_p = 0.0;
            let mut complete = true;
            for &(orig, w) in ws {
                match origin.get(&(orig, year)) {
                    Some(&p) if p > 0.0 => log_p += w * p.ln(),
                    _ if w == 0.0 => {}
                    _ => {
                        complete = false;
                        break;
                    }
                }
            }
            if complete {
                out.insert((*dest, year), log_p.exp());
            }
        }
    }
    Ok(out)
}

fn fitted_index(output_prices: &PriceTable, oil: &BTreeMap<i32, f64>) -> Result<PriceTable> {
    // log P_It = a_I + b log oil_t, pooled with industry intercepts.
    let industries: Vec<u32> = {
        let mut v: Vec<u32> = output_prices.keys().map(|k| k.0).collect();
        v.dedup();
        v
    };
    let obs: Vec<(usize, f64, f64)> = output_prices
        .iter()
        .filter_map(|(&(ind, year), &p)| {
            let o = *oil.get(&year)?;
            (p > 0.0 && o > 0.0).then(|| {
                let k = industries.binary_search(&ind).expect("industry listed");
                (k, o.ln(), p.ln())
            })
        })
        .collect();
    if obs.len() <= industries.len() {
        return Err(Error::Config(
            "too few output-price/oil observations to fit the materials price index".into(),
        ));
    }
    let p = industries.len() + 1;
    let mut x = nalgebra::DMatrix::zeros(obs.len(), p);
    let mut y = nalgebra::DVector::zeros(obs.len());
    for (i, &(k, lo, lp)) in obs.iter().enumerate() {
        x[(i, k)] = 1.0;
        x[(i, p - 1)] = lo;
        y[i] = lp;
    }
    let fit = ols(&x, &y, None)?;
    let mut out = PriceTable::new();
    for &(ind, year) in output_prices.keys() {
        if let Some(&o) = oil.get(&year) {
            let k = industries.binary_search(&ind).expect("industry listed");
            out.insert((ind, year), (fit.coef[k] + fit.coef[p - 1] * o.ln()).exp());
        }
    }
    Ok(out)
}

pub fn load_price_table(path: impl AsRef<Path>) -> Result<PriceTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path.as_ref())?;
    #[derive(Deserialize)]
    struct Rec {
        industry_id: u32,
        year: i32,
        price_index: f64,
    }
    let mut t = PriceTable::new();
    for rec in rdr.deserialize() {
        let r: Rec = rec?;
        if !(r.price_index.is_finite() && r.price_index > 0.0) {
            return Err(Error::Config(format!(
                "price index for ({}, {}) must be positive",
                r.industry_id, r.year
            )));
        }
        t.insert((r.industry_id, r.year), r.price_index);
    }
    Ok(t)
}

pub fn write_price_table(table: &PriceTable, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["industry_id", "year", "price_index"])?;
    for (&(i, y), p) in table {
        w.write_record([i.to_string(), y.to_string(), p.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_io_weights(path: impl AsRef<Path>) -> Result<Vec<IoWeight>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path.as_ref())?;
    rdr.deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

pub fn load_oil_series(path: impl AsRef<Path>) -> Result<BTreeMap<i32, f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path.as_ref())?;
    #[derive(Deserialize)]
    struct Rec {
        year: i32,
        price: f64,
    }
    let mut out = BTreeMap::new();
    for rec in rdr.deserialize() {
        let r: Rec = rec?;
        out.insert(r.year, r.price);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndustryYearAggregates {
    pub industry_id: u32,
    pub year: i32,
    /// Materials price index P^M_It.
    pub price_index: f64,
    /// Geometric mean of member plants' materials expenditure, E^M_It.
    pub materials_exp: f64,
    pub members: usize,
}

pub type Aggregates = BTreeMap<CellKey, IndustryYearAggregates>;

/// Computes E^M_It as the within-cell geometric mean and attaches P^M_It
/// from the resolved price source.
pub fn industry_aggregates(panel: &Panel, prices: &PriceSource) -> Result<Aggregates> {
    let table = prices.resolve()?;
    aggregates_with_prices(panel, &table)
}

pub fn aggregates_with_prices(panel: &Panel, prices: &PriceTable) -> Result<Aggregates> {
    let mut cells: BTreeMap<CellKey, (f64, usize)> = BTreeMap::new();
    for r in panel.rows() {
        let c = cells.entry((r.industry_id, r.year)).or_insert((0.0, 0));
        c.0 += r.materials_exp.ln();
        c.1 += 1;
    }
    let mut out = Aggregates::new();
    for ((ind, year), (sum_log, n)) in cells {
        if n == 0 {
            return Err(Error::Aggregation(format!(
                "industry {ind} year {year} has no members"
            )));
        }
        let price_index = *prices.get(&(ind, year)).ok_or_else(|| {
            Error::Config(format!(
                "no materials price index for industry {ind}, year {year}"
            ))
        })?;
        out.insert(
            (ind, year),
            IndustryYearAggregates {
                industry_id: ind,
                year,
                price_index,
                materials_exp: (sum_log / n as f64).exp(),
                members: n,
            },
        );
    }
    Ok(out)
}

/// Aggregate materials supply shifter
/// Φ̈ = P̈^{-(1+η)/η} · Ë^{1/η} for normalized price index P̈ and normalized
/// industry materials expenditure Ë.
pub fn supply_shifter(price_norm: f64, industry_exp_norm: f64, eta_m: f64) -> Result<f64> {
    if !(eta_m.is_finite() && eta_m > 0.0) {
        return Err(Error::domain(format!(
            "materials supply elasticity must be positive, got {eta_m}"
        )));
    }
    if !(price_norm > 0.0 && industry_exp_norm > 0.0) {
        return Err(Error::domain("supply shifter needs positive aggregates"));
    }
    Ok((-(1.0 + eta_m) / eta_m * price_norm.ln() + industry_exp_norm.ln() / eta_m).exp())
}

// ---------------------------------------------------------------------------
// Normalization

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationScope {
    #[default]
    Global,
    PerIndustry,
}

/// Geometric means used as the normalization baseline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoMeans {
    pub output: f64,
    pub capital: f64,
    /// Over strictly positive investment only; 1 if none are positive.
    pub investment: f64,
    pub skilled: f64,
    pub unskilled: f64,
    pub skilled_pay: f64,
    pub unskilled_pay: f64,
    pub materials_exp: f64,
    pub wage_skilled: f64,
    pub wage_unskilled: f64,
    pub price_index: f64,
    pub industry_materials_exp: f64,
    pub machinery: Option<f64>,
}

/// Normalized view of one observation. Raw values stay available because
/// expenditure ratios enter the productivity formulas unnormalized.
#[derive(Clone, Debug, PartialEq)]
pub struct NormRow {
    pub raw: PlantYear,
    /// Raw P^M_It and E^M_It for this row's cell.
    pub raw_price_index: f64,
    pub raw_industry_materials_exp: f64,
    pub output: f64,
    pub capital: f64,
    /// `None` when raw investment is not strictly positive.
    pub investment: Option<f64>,
    pub skilled: f64,
    pub unskilled: f64,
    pub skilled_pay: f64,
    pub unskilled_pay: f64,
    pub materials_exp: f64,
    pub wage_skilled: f64,
    pub wage_unskilled: f64,
    pub price_index: f64,
    pub industry_materials_exp: f64,
    pub machinery: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedPanel {
    rows: Vec<NormRow>,
    scope: NormalizationScope,
    /// Keyed by industry for per-industry scope; a single entry keyed by
    /// `None` for global scope.
    means: BTreeMap<Option<u32>, GeoMeans>,
}

/// Raw row plus its cell aggregates, the unit that normalization and
/// bootstrap resampling operate on.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedRow {
    pub raw: PlantYear,
    pub price_index: f64,
    pub industry_materials_exp: f64,
}

pub fn normalize(
    panel: &Panel,
    aggregates: &Aggregates,
    scope: NormalizationScope,
) -> Result<NormalizedPanel> {
    let rows = panel
        .rows()
        .iter()
        .map(|r| {
            let agg = aggregates.get(&(r.industry_id, r.year)).ok_or_else(|| {
                Error::Aggregation(format!(
                    "no aggregates for industry {} year {}",
                    r.industry_id, r.year
                ))
            })?;
            Ok(AugmentedRow {
                raw: r.clone(),
                price_index: agg.price_index,
                industry_materials_exp: agg.materials_exp,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    normalize_rows(rows, scope)
}

#[derive(Default)]
struct LogAcc {
    sum: f64,
    n: usize,
}

impl LogAcc {
    fn push(&mut self, v: f64) {
        self.sum += v.ln();
        self.n += 1;
    }
    fn mean(&self) -> f64 {
        if self.n == 0 {
            1.0
        } else {
            (self.sum / self.n as f64).exp()
        }
    }
}

fn geo_means<'a>(rows: impl Iterator<Item = &'a AugmentedRow>) -> GeoMeans {
    let mut acc: [LogAcc; 13] = Default::default();
    let mut machinery_complete = true;
    for a in rows {
        let r = &a.raw;
        acc[0].push(r.output);
        acc[1].push(r.capital);
        if r.investment > 0.0 {
            acc[2].push(r.investment);
        }
        acc[3].push(r.skilled);
        acc[4].push(r.unskilled);
        acc[5].push(r.skilled_pay);
        acc[6].push(r.unskilled_pay);
        acc[7].push(r.materials_exp);
        acc[8].push(r.wage_skilled());
        acc[9].push(r.wage_unskilled());
        acc[10].push(a.price_index);
        acc[11].push(a.industry_materials_exp);
        match r.machinery {
            Some(m) => acc[12].push(m),
            None => machinery_complete = false,
        }
    }
    GeoMeans {
        output: acc[0].mean(),
        capital: acc[1].mean(),
        investment: acc[2].mean(),
        skilled: acc[3].mean(),
        unskilled: acc[4].mean(),
        skilled_pay: acc[5].mean(),
        unskilled_pay: acc[6].mean(),
        materials_exp: acc[7].mean(),
        wage_skilled: acc[8].mean(),
        wage_unskilled: acc[9].mean(),
        price_index: acc[10].mean(),
        industry_materials_exp: acc[11].mean(),
        machinery: (machinery_complete && acc[12].n > 0).then(|| acc[12].mean()),
    }
}

/// Normalizes augmented rows by the geometric means of the chosen scope.
pub fn normalize_rows(
    mut rows: Vec<AugmentedRow>,
    scope: NormalizationScope,
) -> Result<NormalizedPanel> {
    for a in &rows {
        if a.raw.violation().is_some() || !(a.price_index > 0.0 && a.industry_materials_exp > 0.0)
        {
            return Err(Error::domain(format!(
                "nonpositive value for plant {} year {}",
                a.raw.plant_id, a.raw.year
            )));
        }
    }
    rows.sort_by_key(|a| (a.raw.plant_id, a.raw.year));
    let mut means = BTreeMap::new();
    match scope {
        NormalizationScope::Global => {
            means.insert(None, geo_means(rows.iter()));
        }
        NormalizationScope::PerIndustry => {
            let mut by_ind: BTreeMap<u32, Vec<&AugmentedRow>> = BTreeMap::new();
            for a in &rows {
                by_ind.entry(a.raw.industry_id).or_default().push(a);
            }
            for (ind, members) in by_ind {
                means.insert(Some(ind), geo_means(members.into_iter()));
            }
        }
    }
    let key = |ind: u32| match scope {
        NormalizationScope::Global => None,
        NormalizationScope::PerIndustry => Some(ind),
    };
    let out = rows
        .into_iter()
        .map(|a| {
            let m = &means[&key(a.raw.industry_id)];
            let r = &a.raw;
            NormRow {
                output: r.output / m.output,
                capital: r.capital / m.capital,
                investment: (r.investment > 0.0).then(|| r.investment / m.investment),
                skilled: r.skilled / m.skilled,
                unskilled: r.unskilled / m.unskilled,
                skilled_pay: r.skilled_pay / m.skilled_pay,
                unskilled_pay: r.unskilled_pay / m.unskilled_pay,
                materials_exp: r.materials_exp / m.materials_exp,
                wage_skilled: r.wage_skilled() / m.wage_skilled,
                wage_unskilled: r.wage_unskilled() / m.wage_unskilled,
                price_index: a.price_index / m.price_index,
                industry_materials_exp: a.industry_materials_exp / m.industry_materials_exp,
                machinery: r.machinery.zip(m.machinery).map(|(v, g)| v / g),
                raw_price_index: a.price_index,
                raw_industry_materials_exp: a.industry_materials_exp,
                raw: a.raw,
            }
        })
        .collect();
    Ok(NormalizedPanel {
        rows: out,
        scope,
        means,
    })
}

impl NormalizedPanel {
    pub fn rows(&self) -> &[NormRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn scope(&self) -> NormalizationScope {
        self.scope
    }

    /// Geometric means for the scope containing `industry_id`.
    pub fn means_for(&self, industry_id: u32) -> &GeoMeans {
        match self.scope {
            NormalizationScope::Global => &self.means[&None],
            NormalizationScope::PerIndustry => &self.means[&Some(industry_id)],
        }
    }

    /// Means over the whole sample regardless of scope.
    pub fn global_means(&self) -> GeoMeans {
        let aug: Vec<AugmentedRow> = self.augmented_rows();
        geo_means(aug.iter())
    }

    pub fn plant_spans(&self) -> Vec<std::ops::Range<usize>> {
        let mut spans = Vec::new();
        let mut start = 0;
        for i in 1..=self.rows.len() {
            if i == self.rows.len() || self.rows[i].raw.plant_id != self.rows[start].raw.plant_id {
                spans.push(start..i);
                start = i;
            }
        }
        spans
    }

    pub fn augmented_rows(&self) -> Vec<AugmentedRow> {
        self.rows
            .iter()
            .map(|r| AugmentedRow {
                raw: r.raw.clone(),
                price_index: r.raw_price_index,
                industry_materials_exp: r.raw_industry_materials_exp,
            })
            .collect()
    }

    /// Rebuilds raw values from normalized values and stored means.
    pub fn denormalize(&self) -> Vec<AugmentedRow> {
        self.rows
            .iter()
            .map(|r| {
                let m = self.means_for(r.raw.industry_id);
                AugmentedRow {
                    raw: PlantYear {
                        plant_id: r.raw.plant_id,
                        industry_id: r.raw.industry_id,
                        year: r.raw.year,
                        export: r.raw.export,
                        output: r.output * m.output,
                        capital: r.capital * m.capital,
                        investment: r.investment.map_or(r.raw.investment, |i| i * m.investment),
                        skilled: r.skilled * m.skilled,
                        unskilled: r.unskilled * m.unskilled,
                        skilled_pay: r.skilled_pay * m.skilled_pay,
                        unskilled_pay: r.unskilled_pay * m.unskilled_pay,
                        materials_exp: r.materials_exp * m.materials_exp,
                        machinery: r.machinery.zip(m.machinery).map(|(v, g)| v * g),
                    },
                    price_index: r.price_index * m.price_index,
                    industry_materials_exp: r.industry_materials_exp * m.industry_materials_exp,
                }
            })
            .collect()
    }

    /// Normalized values re-expressed as raw rows (for idempotence checks
    /// and for feeding normalized data back through the pipeline).
    pub fn as_augmented_normalized(&self) -> Vec<AugmentedRow> {
        self.rows
            .iter()
            .map(|r| AugmentedRow {
                raw: PlantYear {
                    plant_id: r.raw.plant_id,
                    industry_id: r.raw.industry_id,
                    year: r.raw.year,
                    export: r.raw.export,
                    output: r.output,
                    capital: r.capital,
                    investment: r.investment.unwrap_or(r.raw.investment),
                    skilled: r.skilled,
                    unskilled: r.unskilled,
                    skilled_pay: r.skilled_pay,
                    unskilled_pay: r.unskilled_pay,
                    materials_exp: r.materials_exp,
                    machinery: r.machinery,
                },
                price_index: r.price_index,
                industry_materials_exp: r.industry_materials_exp,
            })
            .collect()
    }

    /// Index of the row for (plant, year), if present.
    pub fn index(&self) -> HashMap<(u64, i32), usize> {
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| ((r.raw.plant_id, r.raw.year), i))
            .collect()
    }
}
