//! Extrapolative mortality models with a shared fit/forecast interface.
//!
//! Every model is stored as one or more [`Component`]s, each covering a block
//! of ages. On its link scale a component reads
//! `base_x + sum_k loading_{x,k} * kappa_{k,t} (+ gamma_{t-x})`, so fitted
//! values and forecasts share one code path.

mod dynamics;
mod fit;
mod life_table;
mod linalg;
mod surface;

use std::io::Write;

use nalgebra::DMatrix;
use statrs::distribution::{ContinuousCDF, Normal};

pub use dynamics::RandomWalk;
pub use fit::{
    fit, CBD_MIN_AGE, FTS_COMPONENTS, MIN_COHORT_CELLS, MIN_FIT_YEARS, NEWTON_MAX_ITER, NEWTON_TOL,
};
pub use life_table::life_expectancy;
pub use surface::{Gender, ModelId, MortalitySurface};

use crate::error::{Error, Result};
use dynamics::IndexDynamics;

/// Scale on which a component is linear in its indexes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Link {
    /// `ln m`
    Log,
    /// `logit q` with `q = 1 - exp(-m)`
    Logit,
}

impl Link {
    pub fn apply(self, m: f64) -> f64 {
        match self {
            Link::Log => m.ln(),
            Link::Logit => fit::logit_q(m),
        }
    }

    pub fn invert(self, y: f64) -> f64 {
        match self {
            Link::Log => y.exp(),
            // m = -ln(1 - q) = ln(1 + e^y)
            Link::Logit if y > 35.0 => y,
            Link::Logit => y.exp().ln_1p(),
        }
    }
}

/// Year-of-birth effect `gamma_c`, indexed from `first_cohort`.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortEffect {
    pub first_cohort: i32,
    /// Zero for unsupported cohorts.
    pub values: Vec<f64>,
    pub supported: Vec<bool>,
    /// Numerical rank of the component's design.
    pub rank: usize,
}

impl CohortEffect {
    pub fn value(&self, cohort: i32) -> f64 {
        let i = cohort - self.first_cohort;
        if i < 0 || i as usize >= self.values.len() {
            return 0.0;
        }
        self.values[i as usize]
    }

    fn supported_range(&self) -> Option<(usize, usize)> {
        let first = self.supported.iter().position(|&s| s)?;
        let last = self.supported.iter().rposition(|&s| s)?;
        Some((first, last))
    }

    /// `(mean, variance)` of `gamma_c`, extrapolating past the last
    /// supported cohort by a driftless random walk.
    fn projected(&self, cohort: i32) -> (f64, f64) {
        let Some((first, last)) = self.supported_range() else {
            return (0.0, 0.0);
        };
        let i = cohort - self.first_cohort;
        if i >= first as i32 && i <= last as i32 {
            return (self.values[i as usize], 0.0);
        }
        if i < first as i32 {
            return (self.values[first], 0.0);
        }
        let steps = (i - last as i32) as usize;
        let history = &self.values[first..=last];
        let var = RandomWalk::fit_driftless(history)
            .map(|rw| rw.variance_driftless(steps))
            .unwrap_or(0.0);
        (self.values[last], var)
    }
}

/// A block of ages sharing one link and one set of period indexes.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub link: Link,
    /// Row positions in the surface.
    pub rows: Vec<usize>,
    pub ages: Vec<u32>,
    pub base: Vec<f64>,
    /// `rows x K`
    pub loadings: DMatrix<f64>,
    /// `K x T`
    pub indexes: DMatrix<f64>,
    pub cohort: Option<CohortEffect>,
    /// Observed link values in the final year, used as the forecast origin
    /// instead of the fitted ones when present.
    pub jump_off: Option<Vec<f64>>,
}

impl Component {
    fn period_term(&self, r: usize, t: usize) -> f64 {
        (0..self.loadings.ncols())
            .map(|k| self.loadings[(r, k)] * self.indexes[(k, t)])
            .sum()
    }

    fn link_value(&self, r: usize, t: usize, year: i32) -> f64 {
        let cohort = self
            .cohort
            .as_ref()
            .map_or(0.0, |c| c.value(year - self.ages[r] as i32));
        self.base[r] + self.period_term(r, t) + cohort
    }
}

/// A fitted model on one training window.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    model_id: ModelId,
    gender: Gender,
    ages: Vec<u32>,
    years: Vec<i32>,
    components: Vec<Component>,
    fitted: DMatrix<f64>,
    residuals: DMatrix<f64>,
    parameter_count: usize,
    fallback: bool,
    notes: Vec<String>,
}

impl FittedModel {
    fn assemble(
        model_id: ModelId,
        surface: &MortalitySurface,
        components: Vec<Component>,
        fallback: bool,
        notes: Vec<String>,
    ) -> Self {
        let (n_a, n_t) = (surface.n_ages(), surface.n_years());
        let mut fitted = DMatrix::zeros(n_a, n_t);
        for c in &components {
            for (r, &row) in c.rows.iter().enumerate() {
                for t in 0..n_t {
                    fitted[(row, t)] = c.link.invert(c.link_value(r, t, surface.years()[t]));
                }
            }
        }
        let residuals = surface.rates() - &fitted;
        let parameter_count = fit::parameter_count(model_id, &components);
        Self {
            model_id,
            gender: surface.gender(),
            ages: surface.ages().to_vec(),
            years: surface.years().to_vec(),
            components,
            fitted,
            residuals,
            parameter_count,
            fallback,
            notes,
        }
    }

    pub fn model_id(&self) -> ModelId {
        self.model_id
    }

    pub fn gender(&self) -> Gender {
        self.gender
    }

    pub fn ages(&self) -> &[u32] {
        &self.ages
    }

    /// Training years.
    pub fn years(&self) -> &[i32] {
        &self.years
    }

    pub fn last_year(&self) -> i32 {
        *self.years.last().expect("fits cover at least one year")
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    /// In-sample fitted rates, ages x years.
    pub fn fitted(&self) -> &DMatrix<f64> {
        &self.fitted
    }

    /// Observed minus fitted, on the rate scale.
    pub fn residuals(&self) -> &DMatrix<f64> {
        &self.residuals
    }

    pub fn rss(&self) -> f64 {
        crate::numeric::sum(self.residuals.iter().map(|r| r * r))
    }

    pub fn cell_count(&self) -> usize {
        self.residuals.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_count
    }

    /// True when the primary estimator failed and a simpler one was used.
    pub fn used_fallback(&self) -> bool {
        self.fallback
    }

    pub fn notes(&self) -> &[String] {
        &self.notes
    }

    /// Writes fitted values in long format.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["model_id", "age", "year", "value", "lb", "ub"])
            .map_err(csv_error)?;
        for (r, age) in self.ages.iter().enumerate() {
            for (t, year) in self.years.iter().enumerate() {
                w.write_record([
                    self.model_id.as_str().to_string(),
                    age.to_string(),
                    year.to_string(),
                    crate::report::fmt_num(self.fitted[(r, t)]),
                    String::new(),
                    String::new(),
                ])
                .map_err(csv_error)?;
            }
        }
        w.flush().map_err(|e| Error::Data(e.to_string()))?;
        Ok(())
    }
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    Error::Data(format!("csv: {e}"))
}

/// In-sample fitted rates.
pub fn fitted_values(fitted: &FittedModel) -> &DMatrix<f64> {
    fitted.fitted()
}

/// Point and interval forecasts for horizons `1..=H`; matrices are ages x H.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastSet {
    pub model_id: ModelId,
    pub gender: Gender,
    pub ages: Vec<u32>,
    /// Last training year; horizon `h` targets `jump_off_year + h`.
    pub jump_off_year: i32,
    pub alpha: f64,
    pub point: DMatrix<f64>,
    pub lower: DMatrix<f64>,
    pub upper: DMatrix<f64>,
}

impl ForecastSet {
    pub fn horizons(&self) -> usize {
        self.point.ncols()
    }

    pub fn target_year(&self, h: usize) -> i32 {
        self.jump_off_year + h as i32
    }

    /// Column for horizon `h` (1-based) as `(point, lower, upper)`.
    pub fn at(&self, h: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let col = |m: &DMatrix<f64>| m.column(h - 1).iter().copied().collect();
        (col(&self.point), col(&self.lower), col(&self.upper))
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["model_id", "age", "horizon", "value", "lb", "ub"])
            .map_err(csv_error)?;
        for (r, age) in self.ages.iter().enumerate() {
            for h in 0..self.horizons() {
                w.write_record([
                    self.model_id.as_str().to_string(),
                    age.to_string(),
                    (h + 1).to_string(),
                    crate::report::fmt_num(self.point[(r, h)]),
                    crate::report::fmt_num(self.lower[(r, h)]),
                    crate::report::fmt_num(self.upper[(r, h)]),
                ])
                .map_err(csv_error)?;
            }
        }
        w.flush().map_err(|e| Error::Data(e.to_string()))?;
        Ok(())
    }
}

/// Two-sided Gaussian quantile for coverage `1 - alpha`.
pub fn gaussian_quantile(alpha: f64) -> f64 {
    Normal::new(0.0, 1.0)
        .expect("standard normal")
        .inverse_cdf(1.0 - alpha / 2.0)
}

/// Extrapolates `fitted` for `horizons` years ahead at nominal coverage
/// `1 - alpha`.
pub fn forecast(fitted: &FittedModel, horizons: usize, alpha: f64) -> Result<ForecastSet> {
    if horizons == 0 {
        return Err(Error::InvalidArgument("forecast horizon must be at least 1".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let z = gaussian_quantile(alpha);
    let n_a = fitted.ages.len();
    let last_t = fitted.years.len() - 1;
    let last_year = fitted.last_year();
    let mut point = DMatrix::zeros(n_a, horizons);
    let mut lower = DMatrix::zeros(n_a, horizons);
    let mut upper = DMatrix::zeros(n_a, horizons);
    for c in &fitted.components {
        let dynamics = IndexDynamics::fit(&c.indexes)?;
        for (r, &row) in c.rows.iter().enumerate() {
            let w: Vec<f64> = c.loadings.row(r).iter().copied().collect();
            let origin = match &c.jump_off {
                Some(observed) => observed[r],
                None => c.base[r] + c.period_term(r, last_t),
            };
            for h in 1..=horizons {
                let (increment, mut var) = dynamics.increment(&w, h);
                let mut mean = origin + increment;
                if let Some(cohort) = &c.cohort {
                    let (g, gv) = cohort.projected(last_year + h as i32 - c.ages[r] as i32);
                    mean += g;
                    var += gv;
                }
                let half = z * var.max(0.0).sqrt();
                if !mean.is_finite() || !half.is_finite() {
                    return Err(Error::Numerical(format!(
                        "{} produced a non-finite forecast at age {} horizon {h}",
                        fitted.model_id, c.ages[r]
                    )));
                }
                point[(row, h - 1)] = c.link.invert(mean);
                lower[(row, h - 1)] = c.link.invert(mean - half).min(point[(row, h - 1)]);
                upper[(row, h - 1)] = c.link.invert(mean + half).max(point[(row, h - 1)]);
            }
        }
    }
    Ok(ForecastSet {
        model_id: fitted.model_id,
        gender: fitted.gender,
        ages: fitted.ages.clone(),
        jump_off_year: last_year,
        alpha,
        point,
        lower,
        upper,
    })
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;

    /// Noiseless Lee-Carter surface with known parameters.
    pub fn lee_carter_truth(n_ages: usize, n_years: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>, MortalitySurface) {
        let a: Vec<f64> = (0..n_ages).map(|x| -8.0 + 0.08 * x as f64).collect();
        let raw_b: Vec<f64> = (0..n_ages).map(|x| 1.0 + 0.5 * ((x as f64) * 0.3).sin()).collect();
        let total: f64 = raw_b.iter().sum();
        let b: Vec<f64> = raw_b.iter().map(|v| v / total).collect();
        let raw_k: Vec<f64> = (0..n_years)
            .map(|t| -1.5 * t as f64 + 3.0 * ((t as f64) * 0.7).cos())
            .collect();
        let mk = crate::numeric::mean(&raw_k);
        let kappa: Vec<f64> = raw_k.iter().map(|k| k - mk).collect();
        let surface = MortalitySurface::from_fn(
            (0..n_ages as u32).collect(),
            (1950..1950 + n_years as i32).collect(),
            Gender::Female,
            |x, y| (a[x as usize] + b[x as usize] * kappa[(y - 1950) as usize]).exp(),
        )
        .unwrap();
        (a, b, kappa, surface)
    }
}

#[cfg(test)]
mod tests {
    use super::testing::lee_carter_truth;
    use super::*;

    fn constant_surface(c: f64) -> MortalitySurface {
        MortalitySurface::from_fn((40..=100).collect(), (1960..1990).collect(), Gender::Male, |_, _| c)
            .unwrap()
    }

    #[test]
    fn lee_carter_recovers_generator() {
        let (a, b, kappa, surface) = lee_carter_truth(30, 40);
        let fitted = fit(ModelId::LcGaussian, &surface).unwrap();
        let c = &fitted.components()[0];
        for x in 0..30 {
            assert!((c.base[x] - a[x]).abs() < 1e-8);
            assert!((c.loadings[(x, 0)] - b[x]).abs() < 1e-8);
        }
        for t in 0..40 {
            assert!((c.indexes[(0, t)] - kappa[t]).abs() < 1e-8);
        }
        assert!(fitted.residuals().iter().all(|r| r.abs() <= 1e-8));
        assert_eq!(fitted.parameter_count(), 2 * 30 + 40 - 2);
    }

    #[test]
    fn identification_constraints_hold() {
        let surface = MortalitySurface::from_fn((0..20).collect(), (1960..1990).collect(), Gender::Female, |x, y| {
            let t = (y - 1960) as u32;
            0.001 * (0.08 * x as f64 - 0.02 * t as f64 + 0.01 * ((x * t) as f64).sin()).exp()
        })
        .unwrap();
        for model in [ModelId::LcGaussian, ModelId::LcNoAdjust, ModelId::LcE0Adjust, ModelId::LcPoisson] {
            let f = fit(model, &surface).unwrap();
            let c = &f.components()[0];
            assert!((c.loadings.sum() - 1.0).abs() < 1e-10, "{model}");
            assert!(c.indexes.sum().abs() < 1e-10, "{model}");
        }
    }

    #[test]
    fn constant_surface_is_reproduced_by_every_model() {
        let c = 0.02;
        let surface = constant_surface(c);
        for model in ModelId::ALL {
            let f = fit(model, &surface).unwrap();
            for v in f.fitted().iter() {
                // rank-deficient least squares leaves float noise
                assert!((v - c).abs() <= 1e-11 * c, "{model}: {v}");
            }
            for comp in f.components() {
                for k in 0..comp.indexes.nrows() {
                    let row = comp.indexes.row(k);
                    let spread = row.max() - row.min();
                    assert!(spread <= 1e-10, "{model}: index spread {spread}");
                }
            }
            assert_eq!(f.residuals().shape(), surface.rates().shape());
        }
    }

    #[test]
    fn cbd_recovers_logit_linear_indexes() {
        let ages: Vec<u32> = (60..=100).collect();
        let centre = 80.0;
        let k1: Vec<f64> = (0..25).map(|t| -3.0 - 0.02 * t as f64 + 0.05 * (t as f64).sin()).collect();
        let k2: Vec<f64> = (0..25).map(|t| 0.1 + 0.001 * t as f64).collect();
        let surface = MortalitySurface::from_fn(ages.clone(), (1970..1995).collect(), Gender::Male, |x, year| {
            let t = (year - 1970) as usize;
            let y = k1[t] + k2[t] * (x as f64 - centre);
            Link::Logit.invert(y)
        })
        .unwrap();
        let f = fit(ModelId::Cbd, &surface).unwrap();
        assert_eq!(f.components().len(), 1);
        let c = &f.components()[0];
        for t in 0..25 {
            assert!((c.indexes[(0, t)] - k1[t]).abs() < 1e-8);
            assert!((c.indexes[(1, t)] - k2[t]).abs() < 1e-8);
        }
    }

    #[test]
    fn linear_index_gives_degenerate_intervals() {
        let surface = MortalitySurface::from_fn((0..10).collect(), (1950..1980).collect(), Gender::Female, |x, y| {
            let t = y - 1950;
            let b = 0.1;
            (-6.0 + 0.1 * x as f64 + b * (-0.5 * (t as f64 - 14.5))).exp()
        })
        .unwrap();
        let f = fit(ModelId::LcGaussian, &surface).unwrap();
        let fs = forecast(&f, 5, 0.2).unwrap();
        let last = f.components()[0].indexes[(0, 29)];
        for h in 1..=5 {
            for x in 0..10 {
                let (p, l, u) = (fs.point[(x, h - 1)], fs.lower[(x, h - 1)], fs.upper[(x, h - 1)]);
                assert!((u - l).abs() <= 1e-12 * p);
                let c = &f.components()[0];
                let drift = (c.indexes[(0, 29)] - c.indexes[(0, 0)]) / 29.0;
                let expected = (c.base[x] + c.loadings[(x, 0)] * (last + drift * h as f64)).exp();
                assert!((p - expected).abs() <= 1e-12 * expected);
            }
        }
    }

    #[test]
    fn constant_history_gives_flat_forecasts() {
        let surface = constant_surface(0.01);
        for model in [ModelId::LcGaussian, ModelId::LcNoAdjust, ModelId::LcE0Adjust, ModelId::LcPoisson] {
            let f = fit(model, &surface).unwrap();
            let fs = forecast(&f, 4, 0.05).unwrap();
            for v in fs.point.iter() {
                assert!((v - 0.01).abs() < 1e-14, "{model}");
            }
        }
    }

    #[test]
    fn forecasts_are_ordered_positive_and_widen() {
        let surface = MortalitySurface::from_fn((0..=100).step_by(5).collect(), (1950..1985).collect(), Gender::Male, |x, y| {
            let t = (y - 1950) as u32;
            let age = x as f64;
            let noise = 0.05 * ((7 * x / 5 + 3 * t) as f64).sin();
            (-9.0 + 0.09 * age - 0.015 * t as f64 * (1.0 - age / 150.0) + noise).exp().min(0.9)
        })
        .unwrap();
        let z = gaussian_quantile(0.2);
        assert!((z - 1.2815515655446004).abs() < 1e-12);
        for model in ModelId::ALL {
            let f = fit(model, &surface).unwrap();
            let fs = forecast(&f, 10, 0.2).unwrap();
            for x in 0..fs.ages.len() {
                let mut width_prev = 0.0;
                for h in 0..10 {
                    let (p, l, u) = (fs.point[(x, h)], fs.lower[(x, h)], fs.upper[(x, h)]);
                    assert!(l > 0.0 && l <= p && p <= u, "{model} x={x} h={h}");
                    // width on the link scale grows with the horizon
                    let link = f.components().iter().find(|c| c.ages.contains(&fs.ages[x])).unwrap().link;
                    let width = link.apply(u) - link.apply(l);
                    assert!(width + 1e-12 >= width_prev, "{model} x={x} h={h}");
                    width_prev = width;
                }
            }
        }
    }

    #[test]
    fn refits_are_bit_identical() {
        let (_, _, _, surface) = lee_carter_truth(25, 30);
        for model in ModelId::ALL {
            if matches!(model, ModelId::Cbd | ModelId::CbdCohort) {
                continue;
            }
            assert_eq!(fit(model, &surface).unwrap(), fit(model, &surface).unwrap());
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        let (_, _, _, surface) = lee_carter_truth(5, 25);
        let f = fit(ModelId::LcGaussian, &surface).unwrap();
        assert!(forecast(&f, 0, 0.05).is_err());
        assert!(forecast(&f, 1, 1.0).is_err());
        let short = surface.slice_years(1950, 1960).unwrap();
        assert!(fit(ModelId::LcGaussian, &short).is_err());
    }

    #[test]
    fn e0_adjust_matches_observed_life_expectancy() {
        let surface = MortalitySurface::from_fn((0..=100).collect(), (1950..1975).collect(), Gender::Female, |x, y| {
            let t = (y - 1950) as u32;
            (-7.5 + 0.085 * x as f64 - 0.02 * t as f64 + 0.03 * ((x + 2 * t) as f64).cos()).exp()
        })
        .unwrap();
        let f = fit(ModelId::LcE0Adjust, &surface).unwrap();
        for t in 0..25 {
            let obs: Vec<f64> = surface.rates().column(t).iter().copied().collect();
            let fit_col: Vec<f64> = f.fitted().column(t).iter().copied().collect();
            assert!((life_expectancy(&obs) - life_expectancy(&fit_col)).abs() < 1e-8);
        }
    }
}
