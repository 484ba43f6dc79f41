use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use super::Predictor;
use crate::error::{Error, Result};
use crate::game::{exact_shapley, Game};
use crate::numeric;
use crate::report::fmt_num;
use crate::rng::{derive_seed, stream_rng};

/// Exact attribution enumerates `2^N` coalitions over the whole background.
pub const MAX_EXACT_FEATURES: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttributionMode {
    Exact,
    Sampled { samples: usize },
}

/// Reference rows defining the baseline expectation.
#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundSet {
    rows: Vec<Vec<f64>>,
}

impl BackgroundSet {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::InvalidArgument("background set is empty".into()));
        };
        let width = first.len();
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::InvalidArgument(
                "background rows have inconsistent widths".into(),
            ));
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.rows[0].len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributionResult {
    pub phi: Vec<f64>,
    /// Mean prediction over the background set.
    pub baseline: f64,
    /// Predictor output at the instance.
    pub prediction: f64,
    pub std_errors: Vec<f64>,
    /// Standard error of the per-permutation total `sum_i x(O)_i`; zero in
    /// exact mode.
    pub total_std_error: f64,
    /// Number of sampled permutations; zero in exact mode.
    pub sample_count: usize,
}

impl AttributionResult {
    /// `baseline + sum(phi) - prediction`.
    pub fn local_accuracy_gap(&self) -> f64 {
        self.baseline + numeric::sum(self.phi.iter().copied()) - self.prediction
    }
}

/// How [`attribute_panel`] seeds each row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PanelSeeds {
    /// Row `r` uses `derive_seed(seed, r)`.
    #[default]
    PerRow,
    /// Every row uses `seed`.
    Shared,
}

fn check_shapes<P: Predictor + ?Sized>(
    predictor: &P,
    instance: &[f64],
    background: &BackgroundSet,
) -> Result<()> {
    let n = predictor.n_features();
    if instance.len() != n || background.n_features() != n {
        return Err(Error::InvalidArgument(format!(
            "arity mismatch: predictor {n}, instance {}, background {}",
            instance.len(),
            background.n_features()
        )));
    }
    Ok(())
}

fn composite(instance: &[f64], reference: &[f64], coalition: u64, out: &mut [f64]) {
    for (j, slot) in out.iter_mut().enumerate() {
        *slot = if coalition >> j & 1 == 1 {
            instance[j]
        } else {
            reference[j]
        };
    }
}

/// Stream reserved for the systematic-sampling offset.
const REFERENCE_STREAM: u64 = u64::MAX;

/// Reference row for permutation `k` under systematic sampling with a random
/// start: every background row is drawn with probability `M / B` per slot,
/// and the drawn rows are spread evenly over the set.
fn systematic_index(k: usize, offset: f64, b: usize, m: usize) -> usize {
    (((k as f64 + offset) * b as f64 / m as f64) as usize).min(b - 1)
}

/// Attribution of `predictor(instance)` against `background`.
///
/// Sampled mode pairs each random permutation with one background row chosen
/// by systematic sampling; standard errors use the i.i.d. formula and are
/// conservative for the stratified draw.
pub fn shap_attribute<P: Predictor + ?Sized>(
    predictor: &P,
    instance: &[f64],
    background: &BackgroundSet,
    mode: AttributionMode,
    seed: u64,
) -> Result<AttributionResult> {
    check_shapes(predictor, instance, background)?;
    let n = instance.len();
    let background_preds: Vec<f64> = background.rows().iter().map(|z| predictor.predict(z)).collect();
    let baseline = numeric::mean(&background_preds);
    let prediction = predictor.predict(instance);

    match mode {
        AttributionMode::Exact => {
            if n > MAX_EXACT_FEATURES {
                return Err(Error::InvalidArgument(format!(
                    "exact attribution is limited to {MAX_EXACT_FEATURES} features, got {n}"
                )));
            }
            let mut buf = vec![0.0; n];
            let values: Vec<f64> = (0..1u64 << n)
                .map(|s| {
                    if s == 0 {
                        return baseline;
                    }
                    let preds: Vec<f64> = background
                        .rows()
                        .iter()
                        .map(|z| {
                            composite(instance, z, s, &mut buf);
                            predictor.predict(&buf)
                        })
                        .collect();
                    numeric::mean(&preds)
                })
                .collect();
            let table: Vec<f64> = values.iter().map(|v| v - baseline).collect();
            let phi = exact_shapley(&Game::from_table(n, table)?)?.0;
            Ok(AttributionResult {
                phi,
                baseline,
                prediction,
                std_errors: vec![0.0; n],
                total_std_error: 0.0,
                sample_count: 0,
            })
        }
        AttributionMode::Sampled { samples } => {
            if samples == 0 {
                return Err(Error::InvalidArgument(
                    "sampled attribution needs at least one permutation".into(),
                ));
            }
            let b = background.len();
            let offset: f64 = stream_rng(seed, REFERENCE_STREAM).gen();
            let rows: Vec<(Vec<f64>, f64)> = (0..samples)
                .into_par_iter()
                .map(|k| {
                    let mut rng = stream_rng(seed, k as u64);
                    let mut order: Vec<usize> = (0..n).collect();
                    order.shuffle(&mut rng);
                    let reference = &background.rows()[systematic_index(k, offset, b, samples)];
                    let mut point = reference.clone();
                    let mut previous = predictor.predict(&point);
                    let start = previous;
                    let mut x = vec![0.0; n];
                    for p in order {
                        point[p] = instance[p];
                        let v = predictor.predict(&point);
                        x[p] = v - previous;
                        previous = v;
                    }
                    (x, previous - start)
                })
                .collect();
            let root_m = (samples as f64).sqrt();
            let mut phi = Vec::with_capacity(n);
            let mut std_errors = Vec::with_capacity(n);
            let mut column = vec![0.0; samples];
            for i in 0..n {
                for (c, (x, _)) in column.iter_mut().zip(&rows) {
                    *c = x[i];
                }
                phi.push(numeric::mean(&column));
                std_errors.push(numeric::sample_sd(&column) / root_m);
            }
            let totals: Vec<f64> = rows.iter().map(|(_, t)| *t).collect();
            Ok(AttributionResult {
                phi,
                baseline,
                prediction,
                std_errors,
                total_std_error: numeric::sample_sd(&totals) / root_m,
                sample_count: samples,
            })
        }
    }
}

/// Applies [`shap_attribute`] to every row of `instances`.
pub fn attribute_panel<P: Predictor + ?Sized>(
    predictor: &P,
    instances: &[Vec<f64>],
    background: &BackgroundSet,
    mode: AttributionMode,
    seed: u64,
    seeds: PanelSeeds,
) -> Result<Vec<AttributionResult>> {
    instances
        .par_iter()
        .enumerate()
        .map(|(r, row)| {
            let row_seed = match seeds {
                PanelSeeds::PerRow => derive_seed(seed, r as u64),
                PanelSeeds::Shared => seed,
            };
            shap_attribute(predictor, row, background, mode, row_seed)
        })
        .collect()
}

/// Writes `instance_id,feature_id,phi,std_error,baseline,prediction` rows.
pub fn write_attribution_csv<W: Write>(
    out: W,
    results: &[AttributionResult],
    feature_ids: &[String],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Data(format!("csv write failed: {e}"));
    w.write_record(["instance_id", "feature_id", "phi", "std_error", "baseline", "prediction"])
        .map_err(csv_err)?;
    for (r, res) in results.iter().enumerate() {
        if res.phi.len() != feature_ids.len() {
            return Err(Error::InvalidArgument(
                "feature id list does not match attribution width".into(),
            ));
        }
        for (j, id) in feature_ids.iter().enumerate() {
            w.write_record([
                r.to_string(),
                id.clone(),
                fmt_num(res.phi[j]),
                fmt_num(res.std_errors[j]),
                fmt_num(res.baseline),
                fmt_num(res.prediction),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::Data(format!("csv flush failed: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::LinearPredictor;
    use super::*;

    struct Constant;

    impl Predictor for Constant {
        fn n_features(&self) -> usize {
            3
        }
        fn predict(&self, _: &[f64]) -> f64 {
            4.2
        }
    }

    fn background(n: usize) -> BackgroundSet {
        BackgroundSet::new(
            (0..7)
                .map(|r| (0..n).map(|j| ((r * 3 + j * 5) % 11) as f64 / 3.0).collect())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn constant_predictor_gets_zero_attribution() {
        for mode in [AttributionMode::Exact, AttributionMode::Sampled { samples: 64 }] {
            let r = shap_attribute(&Constant, &[1.0, 2.0, 3.0], &background(3), mode, 1).unwrap();
            assert_eq!(r.phi, vec![0.0; 3]);
            assert_eq!(r.baseline, r.prediction);
        }
    }

    #[test]
    fn single_feature_gets_the_whole_gap() {
        let f = LinearPredictor::new(vec![2.5], 1.0);
        let bg = background(1);
        let r = shap_attribute(&f, &[3.0], &bg, AttributionMode::Exact, 0).unwrap();
        assert_eq!(r.phi[0], r.prediction - r.baseline);
    }

    #[test]
    fn rejects_bad_shapes_and_modes() {
        let f = LinearPredictor::new(vec![1.0, 1.0], 0.0);
        assert!(shap_attribute(&f, &[1.0], &background(2), AttributionMode::Exact, 0).is_err());
        assert!(shap_attribute(&f, &[1.0, 2.0], &background(3), AttributionMode::Exact, 0).is_err());
        assert!(shap_attribute(
            &f,
            &[1.0, 2.0],
            &background(2),
            AttributionMode::Sampled { samples: 0 },
            0
        )
        .is_err());
        assert!(BackgroundSet::new(vec![]).is_err());
        let wide = LinearPredictor::new(vec![1.0; 13], 0.0);
        assert!(shap_attribute(&wide, &[0.0; 13], &background(13), AttributionMode::Exact, 0).is_err());
    }

    #[test]
    fn csv_layout() {
        let f = LinearPredictor::new(vec![1.0, -1.0], 0.0);
        let rows = vec![vec![1.0, 2.0]];
        let res = attribute_panel(&f, &rows, &background(2), AttributionMode::Exact, 0, PanelSeeds::PerRow).unwrap();
        let mut buf = Vec::new();
        write_attribution_csv(&mut buf, &res, &["a".into(), "b".into()]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "instance_id,feature_id,phi,std_error,baseline,prediction");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("0,a,"));
    }
}
