//! Combination weights: Shapley attribution, equal, inverse-MSE and
//! inverse-AIC, and the weighted combination of forecasts.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::attribution::{
    attribute_panel, AttributionMode, BackgroundSet, ForestParams, PanelSeeds, RegressionForest,
};
use crate::backtest::{WindowForecasts, YearSpan};
use crate::error::{Error, Result};
use crate::game::{Allocation, Game};
use crate::models::{csv_error, Gender, ModelId, MortalitySurface};
use crate::numeric;
use crate::report::fmt_num;
use crate::rng::derive_seed;

/// Floor applied to residual sums of squares before taking logs.
pub const RSS_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Equal,
    Shapley,
    InvMse,
    InvAic,
}

impl Scheme {
    /// Report order: Average, Shapley, MSE, AIC.
    pub const ALL: [Scheme; 4] = [Scheme::Equal, Scheme::Shapley, Scheme::InvMse, Scheme::InvAic];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Equal => "equal",
            Scheme::Shapley => "shapley",
            Scheme::InvMse => "inv_mse",
            Scheme::InvAic => "inv_aic",
        }
    }

    /// Column title used in report tables.
    pub fn title(self) -> &'static str {
        match self {
            Scheme::Equal => "Average",
            Scheme::Shapley => "Shapley",
            Scheme::InvMse => "MSE",
            Scheme::InvAic => "AIC",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|sc| sc.as_str().eq_ignore_ascii_case(s) || sc.title().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown weighting scheme '{s}'")))
    }
}

/// Nonnegative weights over a roster, summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub scheme: Scheme,
    pub gender: Gender,
    pub models: Vec<ModelId>,
    pub weights: Vec<f64>,
    /// Per-model statistic the weights were derived from: mean absolute
    /// attribution, mean MSE or (shifted) mean AIC. Empty for equal weights.
    #[serde(default)]
    pub scores: Vec<f64>,
    /// Standardized attributions (Shapley only).
    #[serde(default)]
    pub standardized: Vec<f64>,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl WeightVector {
    pub fn new(scheme: Scheme, gender: Gender, models: Vec<ModelId>, weights: Vec<f64>) -> Result<Self> {
        if models.len() != weights.len() || models.is_empty() {
            return Err(Error::InvalidArgument("weights and roster differ in length".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Numerical(format!("{scheme} weights must be finite and nonnegative")));
        }
        let total = numeric::sum(weights.iter().copied());
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Numerical(format!("{scheme} weights sum to {total}, not 1")));
        }
        Ok(Self {
            scheme,
            gender,
            models,
            weights,
            scores: Vec::new(),
            standardized: Vec::new(),
            notes: Vec::new(),
        })
    }

    pub fn get(&self, model: ModelId) -> Option<f64> {
        self.models.iter().position(|&m| m == model).map(|i| self.weights[i])
    }

    pub fn total(&self) -> f64 {
        numeric::sum(self.weights.iter().copied())
    }
}

/// Normalizes nonnegative values to sum to one, with the remainder of the
/// rounding pushed onto the largest entry.
fn normalize(values: &[f64]) -> Vec<f64> {
    let total = numeric::sum(values.iter().copied());
    let mut w: Vec<f64> = values.iter().map(|v| v / total).collect();
    let err = 1.0 - numeric::sum(w.iter().copied());
    if let Some(i) = (0..w.len()).max_by(|&a, &b| w[a].total_cmp(&w[b]).then(b.cmp(&a))) {
        w[i] += err;
    }
    w
}

pub fn equal_weights(models: &[ModelId], gender: Gender) -> Result<WeightVector> {
    if models.is_empty() {
        return Err(Error::Config("cannot weight an empty roster".into()));
    }
    let n = models.len();
    WeightVector::new(Scheme::Equal, gender, models.to_vec(), vec![1.0 / n as f64; n])
}

/// Weights proportional to `1 / value`. Zero values take all the weight,
/// split evenly among them.
pub fn inverse_weights(values: &[f64]) -> Result<Vec<f64>> {
    if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Numerical("inverse weighting needs finite nonnegative values".into()));
    }
    let zeros = values.iter().filter(|&&v| v == 0.0).count();
    if zeros > 0 {
        let share = 1.0 / zeros as f64;
        return Ok(values.iter().map(|&v| if v == 0.0 { share } else { 0.0 }).collect());
    }
    Ok(normalize(&values.iter().map(|v| 1.0 / v).collect::<Vec<_>>()))
}

/// `(standardized, se, weights)` from mean absolute attributions: subtract
/// the mean, divide by the sample standard deviation (all zeros when it is
/// zero) and apply a softmax.
pub fn standardized_softmax(phi_bar: &[f64]) -> (Vec<f64>, f64, Vec<f64>) {
    let mean = numeric::mean(phi_bar);
    let se = numeric::sample_sd(phi_bar);
    let standardized: Vec<f64> = if se > 0.0 {
        phi_bar.iter().map(|p| (p - mean) / se).collect()
    } else {
        vec![0.0; phi_bar.len()]
    };
    let weights = numeric::softmax(&standardized);
    (standardized, se, weights)
}

fn log_actuals(actuals: &MortalitySurface, year: i32) -> Result<Vec<f64>> {
    actuals
        .year_rates(year)
        .map(|r| r.iter().map(|m| m.ln()).collect())
        .ok_or_else(|| Error::Data(format!("no observed rates for {year}")))
}

fn check_alignment(wf: &WindowForecasts, actuals: &MortalitySurface) -> Result<()> {
    if wf.ages != actuals.ages() {
        return Err(Error::Data("forecast and observed age grids differ".into()));
    }
    Ok(())
}

/// Models usable for weighting: all of them in gap-tolerant mode, otherwise
/// only those without fit gaps.
pub fn eligible_models(wf: &WindowForecasts, gap_tolerant: bool) -> Vec<ModelId> {
    wf.models
        .iter()
        .copied()
        .filter(|&m| gap_tolerant || !wf.has_gaps(m))
        .collect()
}

/// Expands weights over eligible models to the full roster with zeros.
fn on_roster(wf: &WindowForecasts, eligible: &[ModelId], weights: &[f64], scores: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut w = vec![0.0; wf.models.len()];
    let mut s = vec![f64::NAN; wf.models.len()];
    for (k, m) in eligible.iter().enumerate() {
        let i = wf.models.iter().position(|x| x == m).expect("eligible models are on the roster");
        w[i] = weights[k];
        s[i] = scores[k];
    }
    (w, s)
}

fn require_eligible(wf: &WindowForecasts, gap_tolerant: bool, min: usize) -> Result<Vec<ModelId>> {
    let eligible = eligible_models(wf, gap_tolerant);
    if eligible.len() < min {
        return Err(Error::Data(format!(
            "{} of {} models have complete forecasts; need at least {min}",
            eligible.len(),
            wf.models.len()
        )));
    }
    Ok(eligible)
}

/// Mean squared log error of `model` at horizons `1..=H`, normalized by the
/// age-grid size and the number of windows available at each horizon.
pub fn mse_by_horizon(wf: &WindowForecasts, actuals: &MortalitySurface, model: ModelId) -> Result<Vec<f64>> {
    check_alignment(wf, actuals)?;
    (1..=wf.horizon)
        .map(|h| {
            let slices = wf.at_horizon(model, h);
            if slices.is_empty() {
                return Err(Error::Data(format!("{model} has no {h}-step forecasts")));
            }
            let mut acc = numeric::CompensatedSum::new();
            for s in &slices {
                let obs = log_actuals(actuals, s.target_year)?;
                for (p, o) in s.point().iter().zip(&obs) {
                    acc.add((o - p.ln()).powi(2));
                }
            }
            Ok(acc.value() / (wf.ages.len() * slices.len()) as f64)
        })
        .collect()
}

pub fn inverse_mse_weights(wf: &WindowForecasts, actuals: &MortalitySurface, gap_tolerant: bool) -> Result<WeightVector> {
    let eligible = require_eligible(wf, gap_tolerant, 1)?;
    let mse_bar: Vec<f64> = eligible
        .iter()
        .map(|&m| Ok(numeric::mean(&mse_by_horizon(wf, actuals, m)?)))
        .collect::<Result<_>>()?;
    let weights = inverse_weights(&mse_bar)?;
    let (w, s) = on_roster(wf, &eligible, &weights, &mse_bar);
    let mut v = WeightVector::new(Scheme::InvMse, wf.gender, wf.models.clone(), w)?;
    v.scores = s;
    Ok(v)
}

/// `n ln(RSS / n) + 2p`, with the RSS floored at [`RSS_FLOOR`].
pub fn aic(rss: f64, cells: usize, parameter_count: usize) -> f64 {
    let n = cells as f64;
    n * (rss.max(RSS_FLOOR) / n).ln() + 2.0 * parameter_count as f64
}

/// Weights proportional to the inverse of each model's AIC averaged over
/// the validation windows. When any average is not positive all averages
/// are shifted by `1 - min` first.
pub fn inverse_aic_weights(wf: &WindowForecasts, gap_tolerant: bool) -> Result<WeightVector> {
    let eligible = require_eligible(wf, gap_tolerant, 1)?;
    let mut notes = Vec::new();
    let mut aic_bar: Vec<f64> = eligible
        .iter()
        .map(|&m| {
            let fits = wf.fit_summaries(m);
            if fits.iter().any(|f| f.rss < RSS_FLOOR) {
                notes.push(format!("{m}: residual sum of squares floored at {RSS_FLOOR:e}"));
            }
            let values: Vec<f64> = fits.iter().map(|f| aic(f.rss, f.cells, f.parameter_count)).collect();
            numeric::mean(&values)
        })
        .collect();
    let min = aic_bar.iter().copied().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        let shift = 1.0 - min;
        aic_bar.iter_mut().for_each(|a| *a += shift);
        notes.push(format!("AIC averages shifted by {} before inversion", fmt_num(shift)));
    }
    let weights = inverse_weights(&aic_bar)?;
    let (w, s) = on_roster(wf, &eligible, &weights, &aic_bar);
    let mut v = WeightVector::new(Scheme::InvAic, wf.gender, wf.models.clone(), w)?;
    v.scores = s;
    v.notes = notes;
    Ok(v)
}

/// Settings for [`shapley_weights`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapleyConfig {
    pub forest: ForestParams,
    /// Permutations per attributed row.
    pub samples: usize,
    pub seed: u64,
    /// One forest over all horizons instead of one per horizon.
    pub pooled: bool,
    pub gap_tolerant: bool,
}

impl Default for ShapleyConfig {
    fn default() -> Self {
        Self {
            forest: ForestParams::default(),
            samples: 2048,
            seed: 0,
            pooled: false,
            gap_tolerant: false,
        }
    }
}

/// Local-accuracy record for one attributed panel row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LocalAccuracy {
    pub h: usize,
    pub age: u32,
    pub target_year: i32,
    /// `baseline + sum(phi) - prediction`
    pub gap: f64,
    pub total_std_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapleyWeightTrace {
    pub gender: Gender,
    /// Eligible models, in roster order.
    pub models: Vec<ModelId>,
    pub phi_bar: Vec<f64>,
    pub phi_tilde: Vec<f64>,
    pub se: f64,
    pub weights: Vec<f64>,
    /// `phi_hat[h - 1]` is ages x models: attribution averaged over windows.
    pub phi_hat: Vec<DMatrix<f64>>,
    /// Models whose forecasts were identical and shared one feature.
    pub groups: Vec<Vec<ModelId>>,
    pub local_accuracy: Vec<LocalAccuracy>,
}

impl ShapleyWeightTrace {
    /// Largest `|gap| / (4 se)`; at most one when every row is within four
    /// standard errors.
    pub fn worst_local_accuracy_ratio(&self) -> f64 {
        self.local_accuracy
            .iter()
            .map(|r| {
                if r.gap == 0.0 {
                    0.0
                } else {
                    r.gap.abs() / (4.0 * r.total_std_error)
                }
            })
            .fold(0.0, f64::max)
    }
}

struct Panel {
    h: usize,
    features: Vec<Vec<f64>>,
    response: Vec<f64>,
    ages: Vec<usize>,
    years: Vec<i32>,
}

fn build_panel(wf: &WindowForecasts, actuals: &MortalitySurface, models: &[ModelId], h: usize) -> Result<Panel> {
    let per_model: Vec<_> = models.iter().map(|&m| wf.at_horizon(m, h)).collect();
    let mut panel = Panel {
        h,
        features: Vec::new(),
        response: Vec::new(),
        ages: Vec::new(),
        years: Vec::new(),
    };
    for window in 0..wf.window_count() {
        let slices: Vec<_> = per_model
            .iter()
            .map(|s| s.iter().find(|x| x.window == window))
            .collect();
        if slices.iter().any(|s| s.is_none()) {
            continue;
        }
        let points: Vec<Vec<f64>> = slices.iter().map(|s| s.expect("checked").point()).collect();
        let year = slices[0].expect("checked").target_year;
        let obs = log_actuals(actuals, year)?;
        for (x, o) in obs.iter().enumerate() {
            panel.features.push(points.iter().map(|p| p[x].ln()).collect());
            panel.response.push(*o);
            panel.ages.push(x);
            panel.years.push(year);
        }
    }
    if panel.features.is_empty() {
        return Err(Error::Data(format!("no complete {h}-step forecasts to attribute")));
    }
    Ok(panel)
}

/// Groups columns that are bitwise identical; returns the representative
/// column of each group and the group members.
fn identical_columns(features: &[Vec<f64>], n: usize) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for j in 0..n {
        let found = groups.iter_mut().find(|g| {
            let i = g[0];
            features.iter().all(|row| row[i].to_bits() == row[j].to_bits())
        });
        match found {
            Some(g) => g.push(j),
            None => groups.push(vec![j]),
        }
    }
    groups
}

/// Attributions per panel row for the original columns, with identical
/// columns sharing their group's attribution equally.
fn attribute(
    panels: &[Panel],
    n: usize,
    cfg: &ShapleyConfig,
    forest_seed: u64,
    attr_seed: u64,
    groups: &[Vec<usize>],
) -> Result<Vec<Vec<(Vec<f64>, f64, f64)>>> {
    let reduce = |row: &Vec<f64>| -> Vec<f64> { groups.iter().map(|g| row[g[0]]).collect() };
    let features: Vec<Vec<f64>> = panels.iter().flat_map(|p| p.features.iter().map(reduce)).collect();
    let response: Vec<f64> = panels.iter().flat_map(|p| p.response.iter().copied()).collect();
    let forest = RegressionForest::fit(&features, &response, &cfg.forest, forest_seed)?;
    let background = BackgroundSet::new(features.clone())?;
    let results = attribute_panel(
        &forest,
        &features,
        &background,
        AttributionMode::Sampled { samples: cfg.samples },
        attr_seed,
        PanelSeeds::PerRow,
    )?;
    let mut out = Vec::with_capacity(panels.len());
    let mut it = results.into_iter();
    for p in panels {
        let rows = (0..p.features.len())
            .map(|_| {
                let r = it.next().expect("one result per row");
                let mut phi = vec![0.0; n];
                for (g, members) in groups.iter().enumerate() {
                    let share = r.phi[g] / members.len() as f64;
                    for &j in members {
                        phi[j] = share;
                    }
                }
                (phi, r.local_accuracy_gap(), r.total_std_error)
            })
            .collect();
        out.push(rows);
    }
    Ok(out)
}

/// Shapley-attribution weights from validation forecasts.
///
/// For each horizon a regression forest maps the models' log forecasts to
/// the observed log rate over all (age, window) rows; each row is
/// attributed by sampled interventional Shapley values, averaged over
/// windows per age, and the mean absolute attribution per model is
/// standardized and passed through a softmax.
pub fn shapley_weights(
    wf: &WindowForecasts,
    actuals: &MortalitySurface,
    cfg: &ShapleyConfig,
) -> Result<(WeightVector, ShapleyWeightTrace)> {
    check_alignment(wf, actuals)?;
    let models = require_eligible(wf, cfg.gap_tolerant, 2)?;
    let n = models.len();
    let n_ages = wf.ages.len();
    let panels: Vec<Panel> = (1..=wf.horizon)
        .map(|h| build_panel(wf, actuals, &models, h))
        .collect::<Result<_>>()?;

    let mut attributed: Vec<Vec<(Vec<f64>, f64, f64)>> = Vec::with_capacity(panels.len());
    let mut group_sets: Vec<Vec<usize>> = Vec::new();
    if cfg.pooled {
        let all: Vec<Vec<f64>> = panels.iter().flat_map(|p| p.features.iter().cloned()).collect();
        let groups = identical_columns(&all, n);
        attributed = attribute(&panels, n, cfg, derive_seed(cfg.seed, 0), derive_seed(cfg.seed, 1), &groups)?;
        group_sets.extend(groups);
    } else {
        for p in &panels {
            let groups = identical_columns(&p.features, n);
            let h = p.h as u64;
            let mut rows = attribute(
                std::slice::from_ref(p),
                n,
                cfg,
                derive_seed(cfg.seed, 2 * h),
                derive_seed(cfg.seed, 2 * h + 1),
                &groups,
            )?;
            attributed.push(rows.remove(0));
            group_sets.extend(groups);
        }
    }

    let mut phi_hat = Vec::with_capacity(panels.len());
    let mut local_accuracy = Vec::new();
    for (p, rows) in panels.iter().zip(&attributed) {
        let mut sums = DMatrix::zeros(n_ages, n);
        let mut counts = vec![0usize; n_ages];
        for (r, (phi, gap, se)) in rows.iter().enumerate() {
            let x = p.ages[r];
            counts[x] += 1;
            for j in 0..n {
                sums[(x, j)] += phi[j];
            }
            local_accuracy.push(LocalAccuracy {
                h: p.h,
                age: wf.ages[x],
                target_year: p.years[r],
                gap: *gap,
                total_std_error: *se,
            });
        }
        for x in 0..n_ages {
            sums.row_mut(x).scale_mut(1.0 / counts[x] as f64);
        }
        phi_hat.push(sums);
    }
    let phi_bar: Vec<f64> = (0..n)
        .map(|j| {
            let total = numeric::sum(phi_hat.iter().flat_map(|m: &DMatrix<f64>| m.column(j).iter().map(|v: &f64| v.abs()).collect::<Vec<_>>()));
            total / (wf.horizon * n_ages) as f64
        })
        .collect();
    let (phi_tilde, se, weights) = standardized_softmax(&phi_bar);

    let mut groups: Vec<Vec<ModelId>> = Vec::new();
    for g in group_sets.iter().filter(|g| g.len() > 1) {
        let ids: Vec<ModelId> = g.iter().map(|&j| models[j]).collect();
        if !groups.contains(&ids) {
            groups.push(ids);
        }
    }
    let (w, scores) = on_roster(wf, &models, &weights, &phi_bar);
    let (_, standardized) = on_roster(wf, &models, &weights, &phi_tilde);
    let mut vector = WeightVector::new(Scheme::Shapley, wf.gender, wf.models.clone(), w)?;
    vector.scores = scores;
    vector.standardized = standardized;
    if !groups.is_empty() {
        vector.notes.push(format!("{} group(s) of identical forecasts shared attribution", groups.len()));
    }
    let trace = ShapleyWeightTrace {
        gender: wf.gender,
        models,
        phi_bar,
        phi_tilde,
        se,
        weights,
        phi_hat,
        groups,
        local_accuracy,
    };
    Ok((vector, trace))
}

/// Weighted forecasts for one window; matrices are ages x steps.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedWindow {
    pub window: usize,
    pub train_end_year: i32,
    pub point: DMatrix<f64>,
    pub lower: DMatrix<f64>,
    pub upper: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinedForecasts {
    pub scheme: Scheme,
    pub gender: Gender,
    pub ages: Vec<u32>,
    pub span: YearSpan,
    pub horizon: usize,
    pub alpha: f64,
    pub windows: Vec<CombinedWindow>,
}

/// Weighted combination of every window's forecasts. Interval bounds use
/// the same weights as the point forecasts.
///
/// A model with positive weight but no forecast for a window is an error
/// unless `gap_tolerant`, in which case the window's weights are
/// renormalized over the models present.
pub fn combine(wf: &WindowForecasts, weights: &WeightVector, gap_tolerant: bool) -> Result<CombinedForecasts> {
    if weights.gender != wf.gender {
        return Err(Error::InvalidArgument("weights belong to the other gender".into()));
    }
    let weight_of: HashMap<ModelId, f64> = weights.models.iter().copied().zip(weights.weights.iter().copied()).collect();
    for (&m, &w) in &weight_of {
        if w > 0.0 && !wf.models.contains(&m) {
            return Err(Error::Data(format!("weighted model {m} has no forecasts")));
        }
    }
    let n_a = wf.ages.len();
    let mut windows = Vec::with_capacity(wf.window_count());
    for window in 0..wf.window_count() {
        let steps = wf.horizon.min(wf.window_count() - window);
        let mut members = Vec::new();
        for &m in &wf.models {
            let w = weight_of.get(&m).copied().unwrap_or(0.0);
            if w == 0.0 {
                continue;
            }
            match wf.get(m, window) {
                Some(f) => members.push((w, f)),
                None if gap_tolerant => {}
                None => {
                    return Err(Error::Data(format!(
                        "{m} has no forecast for window {window} (train end {})",
                        wf.span.start - 1 + window as i32
                    )))
                }
            }
        }
        if members.is_empty() {
            if gap_tolerant {
                continue;
            }
            return Err(Error::Data(format!("no weighted forecasts for window {window}")));
        }
        let total = numeric::sum(members.iter().map(|(w, _)| *w));
        let mut point = DMatrix::zeros(n_a, steps);
        let mut lower = DMatrix::zeros(n_a, steps);
        let mut upper = DMatrix::zeros(n_a, steps);
        for (w, f) in &members {
            let w = w / total;
            let fs = &f.forecast;
            point += fs.point.columns(0, steps) * w;
            lower += fs.lower.columns(0, steps) * w;
            upper += fs.upper.columns(0, steps) * w;
        }
        windows.push(CombinedWindow {
            window,
            train_end_year: wf.span.start - 1 + window as i32,
            point,
            lower,
            upper,
        });
    }
    Ok(CombinedForecasts {
        scheme: weights.scheme,
        gender: wf.gender,
        ages: wf.ages.clone(),
        span: wf.span,
        horizon: wf.horizon,
        alpha: wf.alpha,
        windows,
    })
}

/// Writes `scheme,gender,model_id,weight,phi_bar,phi_tilde`; the last two
/// columns are blank for schemes other than Shapley.
pub fn write_weights_csv<W: Write>(out: W, vectors: &[WeightVector]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["scheme", "gender", "model_id", "weight", "phi_bar", "phi_tilde"])
        .map_err(csv_error)?;
    for v in vectors {
        for (i, m) in v.models.iter().enumerate() {
            let shapley = v.scheme == Scheme::Shapley;
            let col = |vals: &[f64]| {
                if shapley {
                    vals.get(i).map_or(String::new(), |x| fmt_num(*x))
                } else {
                    String::new()
                }
            };
            w.write_record([
                v.scheme.as_str().to_string(),
                v.gender.as_str().to_string(),
                m.as_str().to_string(),
                fmt_num(v.weights[i]),
                col(&v.scores),
                col(&v.standardized),
            ])
            .map_err(csv_error)?;
        }
    }
    w.flush().map_err(|e| Error::Data(e.to_string()))?;
    Ok(())
}

/// Reads weight vectors written by [`write_weights_csv`].
pub fn read_weights_csv<R: std::io::Read>(input: R) -> Result<Vec<WeightVector>> {
    let mut r = csv::Reader::from_reader(input);
    let mut grouped: Vec<((Scheme, Gender), Vec<ModelId>, Vec<f64>)> = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse { line, message: e.to_string() })?;
        let field = |k: usize| {
            rec.get(k).ok_or_else(|| Error::Parse {
                line,
                message: format!("missing column {}", k + 1),
            })
        };
        let scheme: Scheme = field(0)?.parse().map_err(|e: Error| Error::Parse { line, message: e.to_string() })?;
        let gender: Gender = field(1)?.parse().map_err(|e: Error| Error::Parse { line, message: e.to_string() })?;
        let model: ModelId = field(2)?.parse().map_err(|e: Error| Error::Parse { line, message: e.to_string() })?;
        let weight: f64 = field(3)?.parse().map_err(|_| Error::Parse {
            line,
            message: format!("invalid weight '{}'", field(3).unwrap_or_default()),
        })?;
        match grouped.iter_mut().find(|(k, _, _)| *k == (scheme, gender)) {
            Some((_, models, weights)) => {
                models.push(model);
                weights.push(weight);
            }
            None => grouped.push(((scheme, gender), vec![model], vec![weight])),
        }
    }
    grouped
        .into_iter()
        .map(|((scheme, gender), models, weights)| {
            // printed weights round-trip exactly, but allow for hand-edited files
            let total = numeric::sum(weights.iter().copied());
            let weights = if (total - 1.0).abs() > 1e-12 && total > 0.0 {
                normalize(&weights)
            } else {
                weights
            };
            WeightVector::new(scheme, gender, models, weights)
        })
        .collect()
}

impl CombinedForecasts {
    /// Long format: `scheme,gender,age,target_year,horizon,point,lb,ub,train_end_year`.
    pub fn write_csv<W: Write>(&self, out: W, header: bool) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        if header {
            w.write_record([
                "scheme", "gender", "age", "target_year", "horizon", "point", "lb", "ub", "train_end_year",
            ])
            .map_err(csv_error)?;
        }
        for win in &self.windows {
            for h in 1..=win.point.ncols() {
                for (x, age) in self.ages.iter().enumerate() {
                    w.write_record([
                        self.scheme.as_str().to_string(),
                        self.gender.as_str().to_string(),
                        age.to_string(),
                        (win.train_end_year + h as i32).to_string(),
                        h.to_string(),
                        fmt_num(win.point[(x, h - 1)]),
                        fmt_num(win.lower[(x, h - 1)]),
                        fmt_num(win.upper[(x, h - 1)]),
                        win.train_end_year.to_string(),
                    ])
                    .map_err(csv_error)?;
                }
            }
        }
        w.flush().map_err(|e| Error::Data(e.to_string()))?;
        Ok(())
    }
}

/// Share of the variance of `actuals` explained by an OLS fit (with
/// intercept) on the given forecast columns. Collinear columns are dropped.
pub fn explained_variance(columns: &[&[f64]], actuals: &[f64]) -> f64 {
    let n = actuals.len();
    let centre = |v: &[f64]| -> Vec<f64> {
        let m = numeric::mean(v);
        v.iter().map(|x| x - m).collect()
    };
    let y = centre(actuals);
    let tss = numeric::sum(y.iter().map(|v| v * v));
    if tss == 0.0 || columns.is_empty() {
        return 0.0;
    }
    // modified Gram-Schmidt over the centred columns
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for col in columns {
        let mut v = centre(col);
        let norm0 = numeric::sum(v.iter().map(|x| x * x)).sqrt();
        for q in &basis {
            let d = numeric::sum((0..n).map(|k| q[k] * v[k]));
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
        }
        let norm = numeric::sum(v.iter().map(|x| x * x)).sqrt();
        if norm > 1e-10 * norm0 && norm > 0.0 {
            basis.push(v.iter().map(|x| x / norm).collect());
        }
    }
    let explained = numeric::sum(basis.iter().map(|q| numeric::sum((0..n).map(|k| q[k] * y[k])).powi(2)));
    (explained / tss).clamp(0.0, 1.0)
}

/// Cooperative game whose players are forecasts and whose worth is the
/// explained variance of the actuals by the coalition's forecasts.
pub fn explained_variance_game(forecasts: &[Vec<f64>], actuals: &[f64]) -> Result<Game> {
    if forecasts.iter().any(|f| f.len() != actuals.len()) {
        return Err(Error::InvalidArgument("forecasts and actuals differ in length".into()));
    }
    let forecasts = forecasts.to_vec();
    let actuals = actuals.to_vec();
    Game::from_fn(forecasts.len(), move |s| {
        let cols: Vec<&[f64]> = (0..forecasts.len())
            .filter(|i| s >> i & 1 == 1)
            .map(|i| forecasts[i].as_slice())
            .collect();
        explained_variance(&cols, &actuals)
    })
}

/// Inverse-MSE weights of forecasts against actuals, read as an allocation.
pub fn inverse_mse_allocation(forecasts: &[Vec<f64>], actuals: &[f64]) -> Result<Allocation> {
    let mse: Vec<f64> = forecasts
        .iter()
        .map(|f| numeric::mean(&f.iter().zip(actuals).map(|(a, b)| (a - b).powi(2)).collect::<Vec<_>>()))
        .collect();
    Ok(Allocation(inverse_weights(&mse)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_standardized_hand_case() {
        let (tilde, se, w) = standardized_softmax(&[1.0, 2.0, 3.0]);
        assert_eq!(se, 1.0);
        assert_eq!(tilde, vec![-1.0, 0.0, 1.0]);
        let e = [(-1f64).exp(), 1.0, 1f64.exp()];
        let z: f64 = e.iter().sum();
        for (wi, ei) in w.iter().zip(e) {
            assert!((wi - ei / z).abs() < 1e-15);
        }
        assert!((w[0] - 0.0900).abs() < 5e-5 && (w[1] - 0.2447).abs() < 5e-5 && (w[2] - 0.6652).abs() < 5e-5);
    }

    #[test]
    fn zero_spread_gives_equal_weights() {
        let (tilde, se, w) = standardized_softmax(&[0.4; 5]);
        assert_eq!(se, 0.0);
        assert_eq!(tilde, vec![0.0; 5]);
        assert!(w.iter().all(|&v| v == 0.2));
    }

    #[test]
    fn location_shift_leaves_weights() {
        let base = [0.3, 0.1, 0.7, 0.25];
        let (_, _, w0) = standardized_softmax(&base);
        let shifted: Vec<f64> = base.iter().map(|v| v + 5.0).collect();
        let (_, _, w1) = standardized_softmax(&shifted);
        for (a, b) in w0.iter().zip(&w1) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn inverse_weight_cases() {
        let w = inverse_weights(&[0.01, 0.03]).unwrap();
        assert!((w[0] - 0.75).abs() < 1e-15 && (w[1] - 0.25).abs() < 1e-15);
        let w = inverse_weights(&[10.0, 30.0]).unwrap();
        assert!((w[0] - 0.75).abs() < 1e-15);
        assert_eq!(inverse_weights(&[0.2, 0.0, 0.5]).unwrap(), vec![0.0, 1.0, 0.0]);
        assert_eq!(inverse_weights(&[0.0, 0.0, 0.5]).unwrap(), vec![0.5, 0.5, 0.0]);
        assert_eq!(inverse_weights(&[0.2, 0.2]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn aic_hand_case() {
        assert_eq!(aic(101.0, 101, 5), 10.0);
        assert!(aic(0.0, 10, 1).is_finite());
    }

    #[test]
    fn equal_weight_cases() {
        let w = equal_weights(&ModelId::ALL, Gender::Female).unwrap();
        assert!(w.weights.iter().all(|&v| v == 0.125));
        assert_eq!(equal_weights(&[ModelId::Apc], Gender::Male).unwrap().weights, vec![1.0]);
        assert!(equal_weights(&[], Gender::Male).is_err());
        let fifteen = normalize(&[1.0; 15]);
        assert!((numeric::sum(fifteen.iter().copied()) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn weights_csv_round_trip() {
        let mut a = equal_weights(&[ModelId::Apc, ModelId::Fts, ModelId::Cbd], Gender::Male).unwrap();
        a.scheme = Scheme::InvMse;
        let b = WeightVector::new(Scheme::Shapley, Gender::Female, vec![ModelId::Apc, ModelId::Fts], vec![0.3, 0.7]).unwrap();
        let mut buf = Vec::new();
        write_weights_csv(&mut buf, &[a.clone(), b.clone()]).unwrap();
        let back = read_weights_csv(buf.as_slice()).unwrap();
        assert_eq!(back[0].weights, a.weights);
        assert_eq!(back[1].weights, b.weights);
        assert_eq!((back[1].scheme, back[1].gender), (Scheme::Shapley, Gender::Female));
        let err = read_weights_csv("scheme,gender,model_id,weight\nshapley,female,APC,x\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn explained_variance_of_shifted_copy() {
        let y = [1.0, 2.0, 4.0, 3.0, 5.0, 7.0];
        let f1 = [1.2, 1.7, 4.4, 2.5, 5.5, 6.1];
        let f2: Vec<f64> = f1.iter().map(|v| v + 0.5).collect();
        let r1 = explained_variance(&[&f1], &y);
        let r2 = explained_variance(&[&f2], &y);
        let r12 = explained_variance(&[&f1, &f2], &y);
        assert!((r1 - r2).abs() < 1e-14 && (r1 - r12).abs() < 1e-14);
        assert!(r1 > 0.5 && r1 < 1.0);
        assert_eq!(explained_variance(&[], &y), 0.0);
    }
}
