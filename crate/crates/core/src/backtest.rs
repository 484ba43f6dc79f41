//! Expanding-window backtests over a train/validation/test split.

use std::fmt;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{self, csv_error, ForecastSet, Gender, ModelId, MortalitySurface};
use crate::report::fmt_num;

/// Inclusive range of calendar years.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct YearSpan {
    pub start: i32,
    pub end: i32,
}

impl YearSpan {
    pub fn new(start: i32, end: i32) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        (self.end - self.start + 1).max(0) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.end < self.start
    }

    pub fn contains(&self, year: i32) -> bool {
        (self.start..=self.end).contains(&year)
    }
}

impl fmt::Display for YearSpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.start, self.end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: YearSpan,
    pub validation: YearSpan,
    pub test: YearSpan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Validation,
    Test,
}

impl Target {
    pub fn as_str(self) -> &'static str {
        match self {
            Target::Validation => "validation",
            Target::Test => "test",
        }
    }
}

impl SplitPlan {
    pub fn span(&self, target: Target) -> YearSpan {
        match target {
            Target::Validation => self.validation,
            Target::Test => self.test,
        }
    }
}

/// Splits `years` into three consecutive blocks of the given lengths.
pub fn make_split(years: YearSpan, train_len: usize, val_len: usize, test_len: usize) -> Result<SplitPlan> {
    if train_len == 0 || val_len == 0 || test_len == 0 {
        return Err(Error::Config("split lengths must all be positive".into()));
    }
    if train_len + val_len + test_len != years.len() {
        return Err(Error::Config(format!(
            "split {train_len}/{val_len}/{test_len} does not cover {years} ({} years)",
            years.len()
        )));
    }
    let train = YearSpan::new(years.start, years.start + train_len as i32 - 1);
    let validation = YearSpan::new(train.end + 1, train.end + val_len as i32);
    let test = YearSpan::new(validation.end + 1, years.end);
    Ok(SplitPlan { train, validation, test })
}

/// One model's forecasts from one expanding window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowForecast {
    pub model_id: ModelId,
    /// Window offset: the training set ends at `target.start - 1 + window`.
    pub window: usize,
    pub train_end_year: i32,
    pub forecast: ForecastSet,
}

/// In-sample fit statistics kept for information-criterion weights.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitSummary {
    pub model_id: ModelId,
    pub window: usize,
    pub train_end_year: i32,
    pub rss: f64,
    pub cells: usize,
    pub parameter_count: usize,
    pub fallback: bool,
}

/// A `(model, window)` whose fit or forecast failed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitGap {
    pub model_id: ModelId,
    pub window: usize,
    pub train_end_year: i32,
    pub message: String,
}

/// Forecasts at horizon `h` for one window, aligned to `target_year`.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonSlice<'a> {
    pub window: usize,
    pub train_end_year: i32,
    pub target_year: i32,
    pub forecast: &'a ForecastSet,
    pub h: usize,
}

impl HorizonSlice<'_> {
    pub fn point(&self) -> Vec<f64> {
        self.forecast.point.column(self.h - 1).iter().copied().collect()
    }

    pub fn lower(&self) -> Vec<f64> {
        self.forecast.lower.column(self.h - 1).iter().copied().collect()
    }

    pub fn upper(&self) -> Vec<f64> {
        self.forecast.upper.column(self.h - 1).iter().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowForecasts {
    pub gender: Gender,
    pub target: Target,
    pub span: YearSpan,
    pub horizon: usize,
    pub alpha: f64,
    pub models: Vec<ModelId>,
    pub ages: Vec<u32>,
    /// Ordered by window, then by roster position.
    pub forecasts: Vec<WindowForecast>,
    pub fits: Vec<FitSummary>,
    pub gaps: Vec<FitGap>,
}

impl WindowForecasts {
    pub fn window_count(&self) -> usize {
        self.span.len()
    }

    pub fn get(&self, model: ModelId, window: usize) -> Option<&WindowForecast> {
        self.forecasts
            .iter()
            .find(|f| f.model_id == model && f.window == window)
    }

    /// All forecasts of `model` at horizon `h`, by window.
    pub fn at_horizon(&self, model: ModelId, h: usize) -> Vec<HorizonSlice<'_>> {
        self.forecasts
            .iter()
            .filter(|f| f.model_id == model && f.forecast.horizons() >= h)
            .map(|f| HorizonSlice {
                window: f.window,
                train_end_year: f.train_end_year,
                target_year: f.train_end_year + h as i32,
                forecast: &f.forecast,
                h,
            })
            .collect()
    }

    /// Windows that should carry an `h`-step forecast.
    pub fn expected_windows(&self, h: usize) -> usize {
        (self.window_count() + 1).saturating_sub(h)
    }

    pub fn has_gaps(&self, model: ModelId) -> bool {
        self.gaps.iter().any(|g| g.model_id == model)
    }

    pub fn fit_summaries(&self, model: ModelId) -> Vec<&FitSummary> {
        self.fits.iter().filter(|f| f.model_id == model).collect()
    }

    /// Long-format export, one row per model, age, window and horizon.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "model_id", "gender", "age", "target_year", "horizon", "point", "lb", "ub", "train_end_year",
        ])
        .map_err(csv_error)?;
        for f in &self.forecasts {
            for h in 1..=f.forecast.horizons() {
                for (r, age) in self.ages.iter().enumerate() {
                    w.write_record([
                        f.model_id.as_str().to_string(),
                        self.gender.as_str().to_string(),
                        age.to_string(),
                        (f.train_end_year + h as i32).to_string(),
                        h.to_string(),
                        fmt_num(f.forecast.point[(r, h - 1)]),
                        fmt_num(f.forecast.lower[(r, h - 1)]),
                        fmt_num(f.forecast.upper[(r, h - 1)]),
                        f.train_end_year.to_string(),
                    ])
                    .map_err(csv_error)?;
                }
            }
        }
        w.flush().map_err(|e| Error::Data(e.to_string()))?;
        Ok(())
    }
}

/// Fits every model on each expanding window ending before the target
/// period and forecasts into it.
///
/// Window `z` trains on `train.start ..= target.start - 1 + z` and forecasts
/// `min(H, target_len - z)` steps, so horizon `h` collects
/// `target_len - h + 1` forecasts. Failures become [`FitGap`] records.
pub fn expanding_forecasts(
    surface: &MortalitySurface,
    models: &[ModelId],
    plan: &SplitPlan,
    target: Target,
    horizon: usize,
    alpha: f64,
) -> Result<WindowForecasts> {
    let span = plan.span(target);
    if horizon == 0 || horizon > span.len() {
        return Err(Error::Config(format!(
            "horizon {horizon} must lie in 1..={} for the {} period",
            span.len(),
            target.as_str()
        )));
    }
    if models.is_empty() {
        return Err(Error::Config("model roster is empty".into()));
    }
    if surface.first_year() > plan.train.start || surface.last_year() < span.end {
        return Err(Error::Data(format!(
            "surface {}-{} does not cover the split {}..{}",
            surface.first_year(),
            surface.last_year(),
            plan.train.start,
            span.end
        )));
    }
    let jobs: Vec<(usize, ModelId)> = (0..span.len())
        .flat_map(|z| models.iter().map(move |&m| (z, m)))
        .collect();
    let results: Vec<std::result::Result<(WindowForecast, FitSummary), FitGap>> = jobs
        .par_iter()
        .map(|&(window, model)| {
            let train_end_year = span.start - 1 + window as i32;
            let steps = horizon.min(span.len() - window);
            let gap = |message: String| FitGap {
                model_id: model,
                window,
                train_end_year,
                message,
            };
            let training = surface
                .slice_years(plan.train.start, train_end_year)
                .map_err(|e| gap(e.to_string()))?;
            let fitted = models::fit(model, &training).map_err(|e| gap(e.to_string()))?;
            let forecast = models::forecast(&fitted, steps, alpha).map_err(|e| gap(e.to_string()))?;
            debug_assert!(train_end_year < span.start + window as i32);
            Ok((
                WindowForecast {
                    model_id: model,
                    window,
                    train_end_year,
                    forecast,
                },
                FitSummary {
                    model_id: model,
                    window,
                    train_end_year,
                    rss: fitted.rss(),
                    cells: fitted.cell_count(),
                    parameter_count: fitted.parameter_count(),
                    fallback: fitted.used_fallback(),
                },
            ))
        })
        .collect();
    let mut forecasts = Vec::new();
    let mut fits = Vec::new();
    let mut gaps = Vec::new();
    for r in results {
        match r {
            Ok((f, s)) => {
                forecasts.push(f);
                fits.push(s);
            }
            Err(g) => {
                log::warn!(
                    "{} window ending {} skipped: {}",
                    g.model_id,
                    g.train_end_year,
                    g.message
                );
                gaps.push(g);
            }
        }
    }
    Ok(WindowForecasts {
        gender: surface.gender(),
        target,
        span,
        horizon,
        alpha,
        models: models.to_vec(),
        ages: surface.ages().to_vec(),
        forecasts,
        fits,
        gaps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::testing::lee_carter_truth;

    #[test]
    fn default_split() {
        let plan = make_split(YearSpan::new(1940, 2019), 60, 10, 10).unwrap();
        assert_eq!(plan.train, YearSpan::new(1940, 1999));
        assert_eq!(plan.validation, YearSpan::new(2000, 2009));
        assert_eq!(plan.test, YearSpan::new(2010, 2019));
    }

    #[test]
    fn decade_blocks_and_mismatch() {
        let plan = make_split(YearSpan::new(1990, 2019), 10, 10, 10).unwrap();
        assert_eq!(plan.validation, YearSpan::new(2000, 2009));
        assert!(make_split(YearSpan::new(1940, 2018), 60, 10, 10).is_err());
    }

    #[test]
    fn counts_alignment_and_no_leakage() {
        let (_, _, _, surface) = lee_carter_truth(6, 40);
        let plan = make_split(YearSpan::new(1950, 1989), 24, 8, 8).unwrap();
        let models = [ModelId::LcGaussian, ModelId::Fts];
        let wf = expanding_forecasts(&surface, &models, &plan, Target::Test, 8, 0.2).unwrap();
        assert!(wf.gaps.is_empty());
        for &m in &models {
            for h in 1..=8 {
                let slices = wf.at_horizon(m, h);
                assert_eq!(slices.len(), 9 - h);
                for s in slices {
                    assert_eq!(s.target_year - s.train_end_year, h as i32);
                    assert!(wf.span.contains(s.target_year));
                    // test windows train through the validation years
                    assert!(s.train_end_year >= plan.validation.end);
                }
            }
        }
        assert_eq!(wf.fits.len(), 16);
        assert_eq!(wf.fits[0].cells, 6 * 32);
    }

    #[test]
    fn single_year_target() {
        let (_, _, _, surface) = lee_carter_truth(4, 22);
        let plan = make_split(YearSpan::new(1950, 1971), 20, 1, 1).unwrap();
        let wf = expanding_forecasts(&surface, &[ModelId::LcGaussian], &plan, Target::Validation, 1, 0.2).unwrap();
        assert_eq!(wf.forecasts.len(), 1);
        assert_eq!(wf.forecasts[0].train_end_year, 1969);
        assert!(expanding_forecasts(&surface, &[ModelId::LcGaussian], &plan, Target::Validation, 2, 0.2).is_err());
    }

    #[test]
    fn short_windows_become_gaps() {
        let (_, _, _, surface) = lee_carter_truth(4, 30);
        let plan = make_split(YearSpan::new(1950, 1979), 10, 10, 10).unwrap();
        let wf = expanding_forecasts(&surface, &[ModelId::LcGaussian], &plan, Target::Validation, 3, 0.2).unwrap();
        // every window trains on 10..19 years, short of the 20-year minimum
        assert_eq!(wf.gaps.len(), 10);
        assert!(wf.has_gaps(ModelId::LcGaussian));
    }
}
