//! Random-walk-with-drift extrapolation of period indexes.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::numeric;

/// Random walk with drift fitted to a univariate index history.
///
/// The drift is the mean first difference and the innovation variance the
/// sample variance of the first differences. The `h`-step forecast variance
/// is `h * sigma2 + h^2 * sigma2 / n_diffs`, the second term accounting for
/// drift estimation error.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomWalk {
    pub last: f64,
    pub drift: f64,
    pub sigma2: f64,
    pub n_diffs: usize,
}

impl RandomWalk {
    pub fn fit(series: &[f64]) -> Result<Self> {
        if series.len() < 2 {
            return Err(Error::InvalidArgument(
                "random walk needs at least two observations".into(),
            ));
        }
        let diffs: Vec<f64> = series.windows(2).map(|w| w[1] - w[0]).collect();
        Ok(Self {
            last: *series.last().expect("non-empty"),
            drift: numeric::mean(&diffs),
            sigma2: numeric::sample_var(&diffs),
            n_diffs: diffs.len(),
        })
    }

    /// Random walk without drift (cohort extrapolation).
    pub fn fit_driftless(series: &[f64]) -> Result<Self> {
        let mut rw = Self::fit(series)?;
        let diffs: Vec<f64> = series.windows(2).map(|w| w[1] - w[0]).collect();
        rw.drift = 0.0;
        rw.sigma2 = numeric::mean(&diffs.iter().map(|d| d * d).collect::<Vec<_>>());
        Ok(rw)
    }

    pub fn mean(&self, h: usize) -> f64 {
        self.last + self.drift * h as f64
    }

    pub fn variance(&self, h: usize) -> f64 {
        let h = h as f64;
        h * self.sigma2 + h * h * self.sigma2 / self.n_diffs as f64
    }

    /// Variance without the drift-uncertainty term.
    pub fn variance_driftless(&self, h: usize) -> f64 {
        h as f64 * self.sigma2
    }
}

/// Joint random walk with drift for `K` index series observed over `T`
/// years (matrix `K x T`). Linear combinations `w' kappa` of the indexes are
/// extrapolated with drift `w' drift` and innovation variance `w' S w`,
/// where `S` is the sample covariance of first differences.
#[derive(Debug, Clone)]
pub(crate) struct IndexDynamics {
    last: DVector<f64>,
    drift: DVector<f64>,
    covariance: DMatrix<f64>,
    n_diffs: usize,
}

impl IndexDynamics {
    pub fn fit(indexes: &DMatrix<f64>) -> Result<Self> {
        let (k, t) = indexes.shape();
        if t < 2 {
            return Err(Error::InvalidArgument(
                "index history needs at least two years".into(),
            ));
        }
        let diffs = DMatrix::from_fn(k, t - 1, |r, c| indexes[(r, c + 1)] - indexes[(r, c)]);
        let drift = DVector::from_fn(k, |r, _| numeric::mean(&diffs.row(r).iter().copied().collect::<Vec<_>>()));
        let n = t - 1;
        let covariance = DMatrix::from_fn(k, k, |a, b| {
            if n < 2 {
                return 0.0;
            }
            let s = numeric::sum((0..n).map(|c| (diffs[(a, c)] - drift[a]) * (diffs[(b, c)] - drift[b])));
            s / (n - 1) as f64
        });
        Ok(Self {
            last: indexes.column(t - 1).into_owned(),
            drift,
            covariance,
            n_diffs: n,
        })
    }

    /// `(mean, variance)` of `w' kappa_{T+h}`.
    pub fn combination(&self, w: &[f64], h: usize) -> (f64, f64) {
        let w = DVector::from_column_slice(w);
        let hf = h as f64;
        let mean = w.dot(&self.last) + hf * w.dot(&self.drift);
        let sigma2 = (w.transpose() * &self.covariance * &w)[(0, 0)].max(0.0);
        (mean, hf * sigma2 + hf * hf * sigma2 / self.n_diffs as f64)
    }

    /// Drift part only: `w' drift * h` and the variance, without the level.
    pub fn increment(&self, w: &[f64], h: usize) -> (f64, f64) {
        let (mean, var) = self.combination(w, h);
        let level = DVector::from_column_slice(w).dot(&self.last);
        (mean - level, var)
    }
}
