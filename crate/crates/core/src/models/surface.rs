use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Female,
    Male,
}

impl Gender {
    pub const BOTH: [Gender; 2] = [Gender::Female, Gender::Male];

    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Female => "female",
            Gender::Male => "male",
        }
    }

    /// Capitalized label used in table headers.
    pub fn title(self) -> &'static str {
        match self {
            Gender::Female => "Female",
            Gender::Male => "Male",
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Gender {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "female" | "f" => Ok(Gender::Female),
            "male" | "m" => Ok(Gender::Male),
            other => Err(Error::Config(format!("unknown gender `{other}`"))),
        }
    }
}

/// Central death rates for one gender on an age × year grid.
///
/// Rows are ages (strictly increasing), columns are consecutive calendar
/// years. Every rate is finite and strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct MortalitySurface {
    rates: DMatrix<f64>,
    ages: Vec<u32>,
    years: Vec<i32>,
    gender: Gender,
}

impl MortalitySurface {
    pub fn new(rates: DMatrix<f64>, ages: Vec<u32>, years: Vec<i32>, gender: Gender) -> Result<Self> {
        if ages.is_empty() || years.is_empty() {
            return Err(Error::Data("surface needs at least one age and one year".into()));
        }
        if rates.nrows() != ages.len() || rates.ncols() != years.len() {
            return Err(Error::Data(format!(
                "rate matrix is {}x{} but axes are {} ages x {} years",
                rates.nrows(),
                rates.ncols(),
                ages.len(),
                years.len()
            )));
        }
        if ages.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Data("ages must be strictly increasing".into()));
        }
        if years.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(Error::Data("years must be consecutive".into()));
        }
        for (idx, v) in rates.iter().enumerate() {
            if !(v.is_finite() && *v > 0.0) {
                let (r, c) = (idx % ages.len(), idx / ages.len());
                return Err(Error::Data(format!(
                    "rate at age {} year {} is {v}; rates must be positive",
                    ages[r], years[c]
                )));
            }
        }
        Ok(Self { rates, ages, years, gender })
    }

    /// Builds a surface from a closure `rate(age, year)`.
    pub fn from_fn(
        ages: Vec<u32>,
        years: Vec<i32>,
        gender: Gender,
        mut rate: impl FnMut(u32, i32) -> f64,
    ) -> Result<Self> {
        let m = DMatrix::from_fn(ages.len(), years.len(), |r, c| rate(ages[r], years[c]));
        Self::new(m, ages, years, gender)
    }

    pub fn rates(&self) -> &DMatrix<f64> {
        &self.rates
    }

    pub fn log_rates(&self) -> DMatrix<f64> {
        self.rates.map(f64::ln)
    }

    pub fn ages(&self) -> &[u32] {
        &self.ages
    }

    pub fn years(&self) -> &[i32] {
        &self.years
    }

    pub fn gender(&self) -> Gender {
        self.gender
    }

    pub fn n_ages(&self) -> usize {
        self.ages.len()
    }

    pub fn n_years(&self) -> usize {
        self.years.len()
    }

    pub fn first_year(&self) -> i32 {
        self.years[0]
    }

    pub fn last_year(&self) -> i32 {
        *self.years.last().expect("non-empty years")
    }

    pub fn year_index(&self, year: i32) -> Option<usize> {
        let off = year.checked_sub(self.first_year())?;
        (off >= 0 && (off as usize) < self.years.len()).then_some(off as usize)
    }

    pub fn rate(&self, age_index: usize, year: i32) -> Option<f64> {
        self.year_index(year).map(|c| self.rates[(age_index, c)])
    }

    /// Column of rates for `year`.
    pub fn year_rates(&self, year: i32) -> Option<Vec<f64>> {
        self.year_index(year)
            .map(|c| self.rates.column(c).iter().copied().collect())
    }

    /// Sub-surface restricted to `first..=last`.
    pub fn slice_years(&self, first: i32, last: i32) -> Result<Self> {
        let (Some(a), Some(b)) = (self.year_index(first), self.year_index(last)) else {
            return Err(Error::Data(format!(
                "years {first}..={last} are outside the surface's {}..={}",
                self.first_year(),
                self.last_year()
            )));
        };
        if b < a {
            return Err(Error::Data(format!("empty year range {first}..={last}")));
        }
        Ok(Self {
            rates: self.rates.columns(a, b - a + 1).into_owned(),
            ages: self.ages.clone(),
            years: self.years[a..=b].to_vec(),
            gender: self.gender,
        })
    }

    /// Sub-surface restricted to the given age rows.
    pub fn select_ages(&self, rows: &[usize]) -> Result<Self> {
        let rates = self.rates.select_rows(rows);
        let ages = rows.iter().map(|&r| self.ages[r]).collect();
        Self::new(rates, ages, self.years.clone(), self.gender)
    }
}

/// Identifier of a roster model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelId {
    #[serde(rename = "LC_POISSON")]
    LcPoisson,
    #[serde(rename = "APC")]
    Apc,
    #[serde(rename = "CBD")]
    Cbd,
    #[serde(rename = "CBD_COHORT")]
    CbdCohort,
    #[serde(rename = "LC_GAUSSIAN")]
    LcGaussian,
    #[serde(rename = "LC_E0_ADJUST")]
    LcE0Adjust,
    #[serde(rename = "LC_NO_ADJUST")]
    LcNoAdjust,
    #[serde(rename = "FTS")]
    Fts,
}

impl ModelId {
    pub const ALL: [ModelId; 8] = [
        ModelId::LcPoisson,
        ModelId::Apc,
        ModelId::Cbd,
        ModelId::CbdCohort,
        ModelId::LcGaussian,
        ModelId::LcE0Adjust,
        ModelId::LcNoAdjust,
        ModelId::Fts,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelId::LcPoisson => "LC_POISSON",
            ModelId::Apc => "APC",
            ModelId::Cbd => "CBD",
            ModelId::CbdCohort => "CBD_COHORT",
            ModelId::LcGaussian => "LC_GAUSSIAN",
            ModelId::LcE0Adjust => "LC_E0_ADJUST",
            ModelId::LcNoAdjust => "LC_NO_ADJUST",
            ModelId::Fts => "FTS",
        }
    }

    /// Conventional roster label (M1, M3, ...).
    pub fn label(self) -> &'static str {
        match self {
            ModelId::LcPoisson => "M1",
            ModelId::Apc => "M3",
            ModelId::Cbd => "M4",
            ModelId::CbdCohort => "M5",
            ModelId::LcGaussian => "M9",
            ModelId::LcE0Adjust => "M11",
            ModelId::LcNoAdjust => "M12",
            ModelId::Fts => "M13",
        }
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_uppercase();
        ModelId::ALL
            .into_iter()
            .find(|m| m.as_str() == key || m.label() == key)
            .ok_or_else(|| Error::Config(format!("unknown model `{s}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> MortalitySurface {
        MortalitySurface::from_fn(vec![0, 1, 2], (2000..2005).collect(), Gender::Female, |a, y| {
            0.01 * (a + 1) as f64 * (1.0 - 0.01 * (y - 2000) as f64)
        })
        .unwrap()
    }

    #[test]
    fn validates_axes_and_rates() {
        let m = DMatrix::from_element(2, 2, 0.1);
        assert!(MortalitySurface::new(m.clone(), vec![0, 1], vec![2000, 2002], Gender::Male).is_err());
        assert!(MortalitySurface::new(m.clone(), vec![1, 1], vec![2000, 2001], Gender::Male).is_err());
        assert!(MortalitySurface::new(m.clone(), vec![0], vec![2000, 2001], Gender::Male).is_err());
        let mut bad = m.clone();
        bad[(1, 1)] = 0.0;
        assert!(MortalitySurface::new(bad, vec![0, 1], vec![2000, 2001], Gender::Male).is_err());
        assert!(MortalitySurface::new(m, vec![0, 1], vec![2000, 2001], Gender::Male).is_ok());
    }

    #[test]
    fn slicing_keeps_alignment() {
        let s = toy();
        let sub = s.slice_years(2001, 2003).unwrap();
        assert_eq!(sub.years(), &[2001, 2002, 2003]);
        assert_eq!(sub.rate(2, 2002), s.rate(2, 2002));
        assert!(s.slice_years(1999, 2001).is_err());
        assert_eq!(s.year_index(2004), Some(4));
        assert_eq!(s.year_index(2005), None);
    }

    #[test]
    fn model_ids_parse_by_name_and_label() {
        for m in ModelId::ALL {
            assert_eq!(m.as_str().parse::<ModelId>().unwrap(), m);
            assert_eq!(m.label().parse::<ModelId>().unwrap(), m);
        }
        assert!("M2".parse::<ModelId>().is_err());
        assert_eq!("female".parse::<Gender>().unwrap(), Gender::Female);
    }
}
