//! Seeded Lee-Carter surfaces with known parameters.

use rand::distributions::Distribution;
use serde::{Deserialize, Serialize};
use statrs::distribution::Normal;

use crate::backtest::YearSpan;
use crate::error::{Error, Result};
use crate::models::{Gender, MortalitySurface};
use crate::rng::{derive_seed, stream_rng};

/// Generator for `log m = a_x + b_x kappa_t + e_{x,t}` with `kappa` a
/// random walk with drift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub gender: Gender,
    pub ages: Vec<u32>,
    pub years: YearSpan,
    pub a: Vec<f64>,
    /// Must sum to one.
    pub b: Vec<f64>,
    pub kappa0: f64,
    pub drift: f64,
    /// Innovation standard deviation of `kappa`.
    pub sigma: f64,
    /// Standard deviation of independent noise on each log rate.
    pub noise: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// Gompertz-shaped age pattern on ages 0..=100 with improvement
    /// concentrated at young and middle ages.
    pub fn standard(gender: Gender, years: YearSpan, seed: u64) -> Self {
        let ages: Vec<u32> = (0..=100).collect();
        let male = gender == Gender::Male;
        let level = if male { 0.25 } else { 0.0 };
        let a: Vec<f64> = ages
            .iter()
            .map(|&x| {
                let x = x as f64;
                let infant = 0.03 * (-x / 1.5).exp();
                let senescent = (-9.6 + 0.088 * x).exp();
                let hump = if male { 0.4 * (-((x - 21.0) / 6.0).powi(2)).exp() } else { 0.0 };
                (infant + senescent + 0.0002).ln() + level + hump
            })
            .collect();
        let raw: Vec<f64> = ages
            .iter()
            .map(|&x| 0.4 + (-((x as f64 - 5.0) / 40.0).powi(2)).exp() + 0.3 * (-((x as f64 - 60.0) / 20.0).powi(2)).exp())
            .collect();
        let total: f64 = raw.iter().sum();
        Self {
            gender,
            ages,
            years,
            a,
            b: raw.iter().map(|v| v / total).collect(),
            kappa0: 40.0,
            drift: -1.2,
            sigma: 1.0,
            noise: 0.03,
            seed,
        }
    }
}

/// A generated surface with the period index that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSurface {
    pub surface: MortalitySurface,
    pub kappa: Vec<f64>,
}

pub fn synth_surface(spec: &SynthSpec) -> Result<SynthSurface> {
    let n_a = spec.ages.len();
    if spec.a.len() != n_a || spec.b.len() != n_a {
        return Err(Error::Config("a and b must have one entry per age".into()));
    }
    let total: f64 = spec.b.iter().sum();
    if (total - 1.0).abs() > 1e-10 {
        return Err(Error::Config(format!("b must sum to 1, got {total}")));
    }
    if spec.sigma < 0.0 || spec.noise < 0.0 || spec.years.is_empty() {
        return Err(Error::Config("standard deviations must be nonnegative and the year span non-empty".into()));
    }
    let std_normal = Normal::new(0.0, 1.0).expect("standard normal");
    let mut rng = stream_rng(derive_seed(spec.seed, 0), 0);
    let mut kappa = Vec::with_capacity(spec.years.len());
    let mut k = spec.kappa0;
    for t in 0..spec.years.len() {
        if t > 0 {
            k += spec.drift;
            if spec.sigma > 0.0 {
                k += spec.sigma * std_normal.sample(&mut rng);
            }
        }
        kappa.push(k);
    }
    let mut noise_rng = stream_rng(derive_seed(spec.seed, 1), 0);
    let years: Vec<i32> = (spec.years.start..=spec.years.end).collect();
    let mut cells = vec![0.0; n_a * years.len()];
    // column-major, matching the surface matrix layout
    for (t, kt) in kappa.iter().enumerate() {
        for x in 0..n_a {
            let mut v = spec.a[x] + spec.b[x] * kt;
            if spec.noise > 0.0 {
                v += spec.noise * std_normal.sample(&mut noise_rng);
            }
            cells[t * n_a + x] = v.exp();
        }
    }
    let rates = nalgebra::DMatrix::from_vec(n_a, years.len(), cells);
    let surface = MortalitySurface::new(rates, spec.ages.clone(), years, spec.gender)?;
    Ok(SynthSurface { surface, kappa })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{fit, ModelId, RandomWalk};

    fn linear_spec(drift: f64) -> SynthSpec {
        let mut spec = SynthSpec::standard(Gender::Female, YearSpan::new(1950, 1989), 3);
        spec.sigma = 0.0;
        spec.noise = 0.0;
        spec.drift = drift;
        spec
    }

    #[test]
    fn drift_is_recovered_from_a_linear_index() {
        let s = synth_surface(&linear_spec(-1.0)).unwrap();
        let fitted = fit(ModelId::LcGaussian, &s.surface).unwrap();
        let kappa: Vec<f64> = fitted.components()[0].indexes.row(0).iter().copied().collect();
        let rw = RandomWalk::fit(&kappa).unwrap();
        assert!((rw.drift + 1.0).abs() < 1e-8, "{}", rw.drift);
    }

    #[test]
    fn zero_drift_gives_constant_index() {
        let s = synth_surface(&linear_spec(0.0)).unwrap();
        assert!(s.kappa.iter().all(|&k| k == 40.0));
        let first = s.surface.rates().column(0).into_owned();
        for t in 1..s.surface.n_years() {
            assert_eq!(s.surface.rates().column(t), first.column(0));
        }
    }

    #[test]
    fn seeded_runs_repeat() {
        let spec = SynthSpec::standard(Gender::Male, YearSpan::new(1940, 2019), 11);
        assert_eq!(synth_surface(&spec).unwrap(), synth_surface(&spec).unwrap());
        let mut other = spec.clone();
        other.seed = 12;
        assert_ne!(synth_surface(&spec).unwrap(), synth_surface(&other).unwrap());
    }

    #[test]
    fn rejects_unnormalized_b() {
        let mut spec = linear_spec(-1.0);
        spec.b[0] += 0.1;
        assert!(matches!(synth_surface(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn standard_surface_is_plausible() {
        let s = synth_surface(&SynthSpec::standard(Gender::Female, YearSpan::new(1940, 2019), 1)).unwrap();
        let r = s.surface.rates();
        assert!(r.iter().all(|&m| m > 0.0 && m < 2.0));
        // mortality rises with age after childhood and falls over time
        assert!(r[(80, 0)] > r[(40, 0)] && r[(40, 0)] > r[(10, 0)]);
        assert!(r[(60, 79)] < r[(60, 0)]);
    }
}
