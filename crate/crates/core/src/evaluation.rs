//! Point and interval scores on the log scale, and forecast diagnostics.

use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;

use crate::backtest::WindowForecasts;
use crate::error::{Error, Result};
use crate::models::{csv_error, Gender, ModelId, MortalitySurface};
use crate::numeric;
use crate::report::fmt_num;
use crate::weighting::{CombinedForecasts, Scheme, WeightVector};

/// Forecasts for one window and horizon, aligned to the target year.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedForecast {
    pub h: usize,
    pub train_end_year: i32,
    pub target_year: i32,
    pub point: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Every `(window, h)` forecast of one model.
pub fn model_forecasts(wf: &WindowForecasts, model: ModelId) -> Vec<AlignedForecast> {
    (1..=wf.horizon)
        .flat_map(|h| {
            wf.at_horizon(model, h).into_iter().map(move |s| AlignedForecast {
                h,
                train_end_year: s.train_end_year,
                target_year: s.target_year,
                point: s.point(),
                lower: s.lower(),
                upper: s.upper(),
            })
        })
        .collect()
}

/// Every `(window, h)` forecast of a combination.
pub fn combined_forecasts(cf: &CombinedForecasts) -> Vec<AlignedForecast> {
    let mut out = Vec::new();
    for h in 1..=cf.horizon {
        for w in cf.windows.iter().filter(|w| w.point.ncols() >= h) {
            let col = |m: &nalgebra::DMatrix<f64>| m.column(h - 1).iter().copied().collect();
            out.push(AlignedForecast {
                h,
                train_end_year: w.train_end_year,
                target_year: w.train_end_year + h as i32,
                point: col(&w.point),
                lower: col(&w.lower),
                upper: col(&w.upper),
            });
        }
    }
    out
}

fn observed(actuals: &MortalitySurface, f: &AlignedForecast) -> Result<Vec<f64>> {
    if f.train_end_year + f.h as i32 != f.target_year {
        return Err(Error::Data(format!(
            "forecast for {} at horizon {} was trained through {}",
            f.target_year, f.h, f.train_end_year
        )));
    }
    let obs = actuals
        .year_rates(f.target_year)
        .ok_or_else(|| Error::Data(format!("no observed rates for {}", f.target_year)))?;
    if obs.len() != f.point.len() {
        return Err(Error::Data("forecast and observed age grids differ".into()));
    }
    Ok(obs)
}

fn per_horizon(
    forecasts: &[AlignedForecast],
    horizon: usize,
    mut cell: impl FnMut(&AlignedForecast, usize) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut sums = vec![numeric::CompensatedSum::new(); horizon];
    let mut counts = vec![0usize; horizon];
    for f in forecasts {
        if f.h == 0 || f.h > horizon {
            return Err(Error::Data(format!("horizon {} outside 1..={horizon}", f.h)));
        }
        for x in 0..f.point.len() {
            sums[f.h - 1].add(cell(f, x)?);
            counts[f.h - 1] += 1;
        }
    }
    if let Some(h) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Data(format!("no forecasts at horizon {}", h + 1)));
    }
    Ok(sums.iter().zip(&counts).map(|(s, &c)| s.value() / c as f64).collect())
}

/// Per-horizon mean squared and mean absolute log errors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointScores {
    pub mse: Vec<f64>,
    pub mae: Vec<f64>,
}

pub fn point_scores(forecasts: &[AlignedForecast], actuals: &MortalitySurface, horizon: usize) -> Result<PointScores> {
    let logs: Vec<Vec<f64>> = forecasts
        .iter()
        .map(|f| Ok(observed(actuals, f)?.iter().map(|m| m.ln()).collect()))
        .collect::<Result<_>>()?;
    let index: BTreeMap<(usize, i32), usize> = forecasts
        .iter()
        .enumerate()
        .map(|(i, f)| ((f.h, f.target_year), i))
        .collect();
    let err = |f: &AlignedForecast, x: usize| logs[index[&(f.h, f.target_year)]][x] - f.point[x].ln();
    Ok(PointScores {
        mse: per_horizon(forecasts, horizon, |f, x| Ok(err(f, x).powi(2)))?,
        mae: per_horizon(forecasts, horizon, |f, x| Ok(err(f, x).abs()))?,
    })
}

/// Interval score of `[lower, upper]` for observation `m` at level
/// `1 - alpha`.
pub fn interval_score(lower: f64, upper: f64, m: f64, alpha: f64) -> f64 {
    let mut s = upper - lower;
    if m < lower {
        s += 2.0 / alpha * (lower - m);
    }
    if m > upper {
        s += 2.0 / alpha * (m - upper);
    }
    s
}

/// Mean interval score per horizon, on log rates, multiplied by 100.
pub fn interval_scores(
    forecasts: &[AlignedForecast],
    actuals: &MortalitySurface,
    alpha: f64,
    horizon: usize,
) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let obs: BTreeMap<i32, Vec<f64>> = forecasts
        .iter()
        .map(|f| Ok((f.target_year, observed(actuals, f)?)))
        .collect::<Result<_>>()?;
    let scores = per_horizon(forecasts, horizon, |f, x| {
        let (l, u) = (f.lower[x], f.upper[x]);
        if !(l <= u) {
            return Err(Error::Numerical(format!(
                "inverted interval at horizon {} for {}",
                f.h, f.target_year
            )));
        }
        Ok(interval_score(l.ln(), u.ln(), obs[&f.target_year][x].ln(), alpha))
    })?;
    Ok(scores.iter().map(|s| s * 100.0).collect())
}

/// Result of the per-cell convexity check on the rate scale.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JensenCheck {
    pub cells: usize,
    /// Largest `(combined error)^2 - sum_i w_i (error_i)^2`, relative to
    /// the right-hand side; nonpositive up to rounding.
    pub max_excess: f64,
    pub combined_mse: f64,
    pub max_member_mse: f64,
}

impl JensenCheck {
    pub fn holds(&self) -> bool {
        self.max_excess <= 1e-12 && self.combined_mse <= self.max_member_mse * (1.0 + 1e-12)
    }
}

/// Checks that each combined cell's squared error is at most the weighted
/// squared errors of the members, and that the combined MSE is at most the
/// worst member's.
pub fn jensen_check(
    wf: &WindowForecasts,
    weights: &WeightVector,
    combined: &CombinedForecasts,
    actuals: &MortalitySurface,
) -> Result<JensenCheck> {
    let members: Vec<(f64, Vec<AlignedForecast>)> = weights
        .models
        .iter()
        .zip(&weights.weights)
        .filter(|(_, &w)| w > 0.0)
        .map(|(&m, &w)| (w, model_forecasts(wf, m)))
        .collect();
    let mut cells = 0;
    let mut max_excess = f64::NEG_INFINITY;
    let mut combined_sq = numeric::CompensatedSum::new();
    let mut member_sq = vec![numeric::CompensatedSum::new(); members.len()];
    for c in combined_forecasts(combined) {
        let obs = observed(actuals, &c)?;
        let mut parts = Vec::with_capacity(members.len());
        for (w, fs) in &members {
            let f = fs
                .iter()
                .find(|f| f.h == c.h && f.target_year == c.target_year)
                .ok_or_else(|| Error::Data(format!("member forecast missing for {}", c.target_year)))?;
            parts.push((*w, f));
        }
        let total_w = numeric::sum(parts.iter().map(|(w, _)| *w));
        for x in 0..obs.len() {
            let ce = (c.point[x] - obs[x]).powi(2);
            let bound = numeric::sum(parts.iter().map(|(w, f)| w / total_w * (f.point[x] - obs[x]).powi(2)));
            let excess = (ce - bound) / bound.max(f64::MIN_POSITIVE);
            max_excess = max_excess.max(if ce <= bound { 0.0 } else { excess });
            combined_sq.add(ce);
            for (k, (_, f)) in parts.iter().enumerate() {
                member_sq[k].add((f.point[x] - obs[x]).powi(2));
            }
            cells += 1;
        }
    }
    let n = cells.max(1) as f64;
    Ok(JensenCheck {
        cells,
        max_excess: if cells == 0 { 0.0 } else { max_excess },
        combined_mse: combined_sq.value() / n,
        max_member_mse: member_sq.iter().map(|s| s.value() / n).fold(0.0, f64::max),
    })
}

/// Mean log bias per model and correlations between forecast vectors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticsReport {
    pub gender: Gender,
    pub models: Vec<ModelId>,
    pub bias: Vec<f64>,
    /// `None` where a vector is constant.
    pub correlation: Vec<Vec<Option<f64>>>,
}

pub fn diagnostics(wf: &WindowForecasts, actuals: &MortalitySurface) -> Result<DiagnosticsReport> {
    let mut bias = Vec::with_capacity(wf.models.len());
    let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(wf.models.len());
    for &m in &wf.models {
        let fs = model_forecasts(wf, m);
        let mut errors = Vec::new();
        let mut flat = Vec::new();
        for f in &fs {
            let obs = observed(actuals, f)?;
            for (p, o) in f.point.iter().zip(&obs) {
                errors.push(p.ln() - o.ln());
                flat.push(p.ln());
            }
        }
        bias.push(numeric::mean(&errors));
        vectors.push(flat);
    }
    let n = vectors.len();
    let correlation = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    if vectors[i].len() != vectors[j].len() {
                        return None;
                    }
                    if i == j {
                        return numeric::pearson(&vectors[i], &vectors[j]).map(|_| 1.0);
                    }
                    numeric::pearson(&vectors[i], &vectors[j])
                })
                .collect()
        })
        .collect();
    Ok(DiagnosticsReport {
        gender: wf.gender,
        models: wf.models.clone(),
        bias,
        correlation,
    })
}

/// Per-horizon scores keyed by scheme and gender, written as `h`, then a
/// Female and Male column per scheme, then a Mean row.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreTable {
    pub horizon: usize,
    pub entries: BTreeMap<(Scheme, Gender), Vec<f64>>,
}

impl ScoreTable {
    pub fn new(horizon: usize) -> Self {
        Self {
            horizon,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, scheme: Scheme, gender: Gender, scores: Vec<f64>) -> Result<()> {
        if scores.len() != self.horizon {
            return Err(Error::InvalidArgument(format!(
                "expected {} horizons, got {}",
                self.horizon,
                scores.len()
            )));
        }
        self.entries.insert((scheme, gender), scores);
        Ok(())
    }

    pub fn get(&self, scheme: Scheme, gender: Gender) -> Option<&[f64]> {
        self.entries.get(&(scheme, gender)).map(Vec::as_slice)
    }

    pub fn mean(&self, scheme: Scheme, gender: Gender) -> Option<f64> {
        self.get(scheme, gender).map(numeric::mean)
    }

    fn columns(&self) -> Vec<(Scheme, Gender)> {
        Scheme::ALL
            .into_iter()
            .flat_map(|s| Gender::BOTH.into_iter().map(move |g| (s, g)))
            .filter(|k| self.entries.contains_key(k))
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let columns = self.columns();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["h".to_string()];
        header.extend(columns.iter().map(|(s, g)| format!("{}_{}", s.title(), g.title())));
        w.write_record(&header).map_err(csv_error)?;
        for h in 0..self.horizon {
            let mut row = vec![(h + 1).to_string()];
            row.extend(columns.iter().map(|k| fmt_num(self.entries[k][h])));
            w.write_record(&row).map_err(csv_error)?;
        }
        let mut row = vec!["Mean".to_string()];
        row.extend(columns.iter().map(|k| fmt_num(numeric::mean(&self.entries[k]))));
        w.write_record(&row).map_err(csv_error)?;
        w.flush().map_err(|e| Error::Data(e.to_string()))?;
        Ok(())
    }
}

/// `model_id,Female,Male` mean log bias.
pub fn write_bias_csv<W: Write>(out: W, reports: &[DiagnosticsReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["model_id".to_string()];
    header.extend(reports.iter().map(|r| r.gender.title().to_string()));
    w.write_record(&header).map_err(csv_error)?;
    let models = reports.first().map(|r| r.models.clone()).unwrap_or_default();
    for (i, m) in models.iter().enumerate() {
        let mut row = vec![m.as_str().to_string()];
        row.extend(reports.iter().map(|r| fmt_num(r.bias[i])));
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush().map_err(|e| Error::Data(e.to_string()))?;
    Ok(())
}

/// `gender,model_id,<model>...` correlation matrix, `NA` where undefined.
pub fn write_correlation_csv<W: Write>(out: W, reports: &[DiagnosticsReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let models = reports.first().map(|r| r.models.clone()).unwrap_or_default();
    let mut header = vec!["gender".to_string(), "model_id".to_string()];
    header.extend(models.iter().map(|m| m.as_str().to_string()));
    w.write_record(&header).map_err(csv_error)?;
    for r in reports {
        for (i, m) in r.models.iter().enumerate() {
            let mut row = vec![r.gender.as_str().to_string(), m.as_str().to_string()];
            row.extend(r.correlation[i].iter().map(|c| c.map_or("NA".to_string(), fmt_num)));
            w.write_record(&row).map_err(csv_error)?;
        }
    }
    w.flush().map_err(|e| Error::Data(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn surface(rates: &[f64]) -> MortalitySurface {
        MortalitySurface::from_fn((0..rates.len() as u32).collect(), vec![2000, 2001], Gender::Female, |x, _| {
            rates[x as usize]
        })
        .unwrap()
    }

    fn aligned(point: Vec<f64>) -> AlignedForecast {
        AlignedForecast {
            h: 1,
            train_end_year: 2000,
            target_year: 2001,
            lower: point.clone(),
            upper: point.clone(),
            point,
        }
    }

    #[test]
    fn interval_hand_cases() {
        assert_eq!(interval_score(1.0, 3.0, 2.0, 0.2), 2.0);
        assert_eq!(interval_score(1.0, 3.0, 0.5, 0.2), 7.0);
        assert_eq!(interval_score(1.0, 3.0, 3.5, 0.2), 7.0);
    }

    #[test]
    fn point_score_hand_cases() {
        let actual = surface(&[0.01, 0.02]);
        let perfect = point_scores(&[aligned(vec![0.01, 0.02])], &actual, 1).unwrap();
        assert_eq!((perfect.mse[0], perfect.mae[0]), (0.0, 0.0));
        // log errors (0.1, -0.3)
        let f = aligned(vec![0.01 * (-0.1f64).exp(), 0.02 * 0.3f64.exp()]);
        let s = point_scores(&[f], &actual, 1).unwrap();
        assert!((s.mse[0] - 0.05).abs() < 1e-15);
        assert!((s.mae[0] - 0.2).abs() < 1e-15);
        let one = surface(&[0.01]);
        let s = point_scores(&[aligned(vec![0.01 * (-0.2f64).exp()])], &one, 1).unwrap();
        assert!((s.mse[0] - 0.04).abs() < 1e-15 && (s.mae[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn misaligned_forecasts_are_rejected() {
        let mut f = aligned(vec![0.01]);
        f.train_end_year = 1999;
        assert!(point_scores(&[f], &surface(&[0.01]), 1).is_err());
        assert!(interval_scores(&[aligned(vec![0.01])], &surface(&[0.01]), 0.0, 1).is_err());
    }

    #[test]
    fn score_table_layout() {
        let mut t = ScoreTable::new(2);
        t.insert(Scheme::Shapley, Gender::Male, vec![1.0, 3.0]).unwrap();
        t.insert(Scheme::Equal, Gender::Female, vec![2.0, 4.0]).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "h,Average_Female,Shapley_Male\n1,2,1\n2,4,3\nMean,3,2\n");
        assert!(t.insert(Scheme::InvMse, Gender::Male, vec![1.0]).is_err());
    }
}
