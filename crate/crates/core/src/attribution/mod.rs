//! Additive feature attribution of a predictor's output.
//!
//! A prediction `f(x)` is decomposed as `baseline + sum(phi)`, where the
//! baseline is the mean prediction over a background set and `phi_i` is the
//! Shapley value of feature `i` in the game whose coalition value is the
//! mean prediction on composite rows that take the instance's values on the
//! coalition and background values elsewhere (interventional substitution).

mod forest;
mod shap;

pub use forest::{fit_forest, ForestParams, RegressionForest, RegressionTree};
pub use shap::{
    attribute_panel, shap_attribute, write_attribution_csv, AttributionMode, AttributionResult,
    BackgroundSet, PanelSeeds, MAX_EXACT_FEATURES,
};

/// A deterministic, side-effect free function of a feature vector.
pub trait Predictor: Send + Sync {
    fn n_features(&self) -> usize;
    fn predict(&self, x: &[f64]) -> f64;
}

/// `f(x) = intercept + sum(coefficients[j] * x[j])`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPredictor {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
}

impl LinearPredictor {
    pub fn new(coefficients: Vec<f64>, intercept: f64) -> Self {
        Self {
            coefficients,
            intercept,
        }
    }
}

impl Predictor for LinearPredictor {
    fn n_features(&self) -> usize {
        self.coefficients.len()
    }

    fn predict(&self, x: &[f64]) -> f64 {
        self.intercept
            + self
                .coefficients
                .iter()
                .zip(x)
                .map(|(a, v)| a * v)
                .sum::<f64>()
    }
}

impl<P: Predictor + ?Sized> Predictor for &P {
    fn n_features(&self) -> usize {
        (**self).n_features()
    }

    fn predict(&self, x: &[f64]) -> f64 {
        (**self).predict(x)
    }
}
