//! Human Mortality Database period rate files (`Mx_1x1` layout).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::backtest::YearSpan;
use crate::error::{Error, Result};
use crate::models::{Gender, MortalitySurface};

/// Oldest single age kept; the row at this age stands for the open group.
pub const TOP_AGE: u32 = 100;
/// A year missing more than this share of ages is rejected.
pub const MAX_MISSING_SHARE: f64 = 0.2;

/// A cell filled by log-linear interpolation over years.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Repair {
    pub gender: Gender,
    pub age: u32,
    pub year: i32,
    pub value: f64,
}

/// Both genders' surfaces from one rate file.
#[derive(Debug, Clone, PartialEq)]
pub struct HmdRates {
    pub female: MortalitySurface,
    pub male: MortalitySurface,
    pub repairs: Vec<Repair>,
    pub notes: Vec<String>,
}

impl HmdRates {
    pub fn surface(&self, gender: Gender) -> &MortalitySurface {
        match gender {
            Gender::Female => &self.female,
            Gender::Male => &self.male,
        }
    }
}

fn parse_rate(token: &str, line: usize) -> Result<Option<f64>> {
    if token == "." {
        return Ok(None);
    }
    token
        .parse::<f64>()
        .map(|v| if v.is_finite() && v > 0.0 { Some(v) } else { None })
        .map_err(|_| Error::Parse {
            line,
            message: format!("invalid rate '{token}'"),
        })
}

/// Parses rate-file text, clipping ages at [`TOP_AGE`] and optionally
/// restricting to `years`.
pub fn parse_hmd_str(text: &str, years: Option<YearSpan>) -> Result<HmdRates> {
    let mut lines = text.lines().enumerate();
    let mut found_header = false;
    for (_, l) in lines.by_ref() {
        let tokens: Vec<&str> = l.split_whitespace().collect();
        if tokens.len() >= 4 && tokens[0] == "Year" && tokens[1] == "Age" {
            if tokens[2] != "Female" || tokens[3] != "Male" {
                return Err(Error::Data(format!("unexpected column layout: {}", l.trim())));
            }
            found_header = true;
            break;
        }
    }
    if !found_header {
        return Err(Error::Data("no 'Year Age Female Male' header found".into()));
    }

    // (year, age) -> (female, male)
    let mut cells: BTreeMap<(i32, u32), (Option<f64>, Option<f64>)> = BTreeMap::new();
    let mut clipped = false;
    for (i, l) in lines {
        let line = i + 1;
        let tokens: Vec<&str> = l.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        if tokens.len() < 4 {
            return Err(Error::Parse {
                line,
                message: format!("expected at least 4 columns, found {}", tokens.len()),
            });
        }
        let year: i32 = tokens[0].parse().map_err(|_| Error::Parse {
            line,
            message: format!("invalid year '{}'", tokens[0]),
        })?;
        let age: u32 = tokens[1].trim_end_matches('+').parse().map_err(|_| Error::Parse {
            line,
            message: format!("invalid age '{}'", tokens[1]),
        })?;
        let female = parse_rate(tokens[2], line)?;
        let male = parse_rate(tokens[3], line)?;
        if age > TOP_AGE {
            clipped = true;
            continue;
        }
        if years.is_some_and(|s| !s.contains(year)) {
            continue;
        }
        if cells.insert((year, age), (female, male)).is_some() {
            return Err(Error::Parse {
                line,
                message: format!("duplicate row for year {year}, age {age}"),
            });
        }
    }
    let Some(&(first, _)) = cells.keys().next() else {
        return Err(Error::Data("no rate rows in the requested years".into()));
    };
    let last = cells.keys().next_back().expect("non-empty").0;
    let year_list: Vec<i32> = (first..=last).collect();
    if let Some(span) = years {
        if span.start != first || span.end != last {
            return Err(Error::Data(format!("file covers {first}-{last}, requested {span}")));
        }
    }
    let max_age = cells.keys().map(|k| k.1).max().expect("non-empty");
    let ages: Vec<u32> = (0..=max_age).collect();

    let mut notes = Vec::new();
    if clipped {
        notes.push(format!(
            "ages above {TOP_AGE} dropped; the age-{TOP_AGE} row stands for the open group {TOP_AGE}+"
        ));
    }
    let mut repairs = Vec::new();
    let mut build = |gender: Gender| -> Result<MortalitySurface> {
        let mut m = DMatrix::from_element(ages.len(), year_list.len(), f64::NAN);
        for (&(y, a), &(f, ml)) in &cells {
            let v = if gender == Gender::Female { f } else { ml };
            if let Some(v) = v {
                m[(a as usize, (y - first) as usize)] = v;
            }
        }
        for (t, y) in year_list.iter().enumerate() {
            let missing = m.column(t).iter().filter(|v| v.is_nan()).count();
            if missing as f64 > MAX_MISSING_SHARE * ages.len() as f64 {
                return Err(Error::Data(format!(
                    "{y}: {missing} of {} {} ages missing",
                    ages.len(),
                    gender.as_str()
                )));
            }
        }
        for (x, &age) in ages.iter().enumerate() {
            let row: Vec<f64> = m.row(x).iter().copied().collect();
            let filled = interpolate_log(&row).ok_or_else(|| {
                Error::Data(format!("age {age} has no usable {} rates", gender.as_str()))
            })?;
            for (t, (&old, &new)) in row.iter().zip(&filled).enumerate() {
                if old.is_nan() {
                    repairs.push(Repair {
                        gender,
                        age,
                        year: year_list[t],
                        value: new,
                    });
                    m[(x, t)] = new;
                }
            }
        }
        MortalitySurface::new(m, ages.clone(), year_list.clone(), gender)
    };
    let female = build(Gender::Female)?;
    let male = build(Gender::Male)?;
    for r in &repairs {
        log::info!("repaired {} age {} in {}: {}", r.gender.as_str(), r.age, r.year, r.value);
    }
    Ok(HmdRates {
        female,
        male,
        repairs,
        notes,
    })
}

/// Fills `NaN` entries by linear interpolation of logs between the nearest
/// observed neighbours; leading and trailing gaps take the nearest value.
/// `None` when nothing is observed.
pub fn interpolate_log(values: &[f64]) -> Option<Vec<f64>> {
    let known: Vec<usize> = (0..values.len()).filter(|&i| !values[i].is_nan()).collect();
    let (&lo, &hi) = (known.first()?, known.last()?);
    let mut out = values.to_vec();
    for i in 0..values.len() {
        if !out[i].is_nan() {
            continue;
        }
        out[i] = if i < lo {
            values[lo]
        } else if i > hi {
            values[hi]
        } else {
            let left = *known.iter().rev().find(|&&k| k < i).expect("bracketed");
            let right = *known.iter().find(|&&k| k > i).expect("bracketed");
            let w = (i - left) as f64 / (right - left) as f64;
            ((1.0 - w) * values[left].ln() + w * values[right].ln()).exp()
        };
    }
    Some(out)
}

pub fn parse_hmd(path: impl AsRef<Path>, years: Option<YearSpan>) -> Result<HmdRates> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_hmd_str(&text, years)
}

/// Renders both surfaces in the rate-file layout. The Total column is left
/// missing because it cannot be rebuilt without exposures.
pub fn write_hmd_string(female: &MortalitySurface, male: &MortalitySurface, title: &str) -> Result<String> {
    if female.ages() != male.ages() || female.years() != male.years() {
        return Err(Error::InvalidArgument("surfaces must share ages and years".into()));
    }
    let mut out = String::new();
    writeln!(out, "{title}").expect("string write");
    writeln!(out).expect("string write");
    writeln!(out, "{:>6}{:>8}{:>24}{:>24}{:>12}", "Year", "Age", "Female", "Male", "Total").expect("string write");
    for (t, year) in female.years().iter().enumerate() {
        for (x, age) in female.ages().iter().enumerate() {
            let label = if *age == TOP_AGE { format!("{age}+") } else { age.to_string() };
            writeln!(
                out,
                "{:>6}{:>8}{:>24}{:>24}{:>12}",
                year,
                label,
                female.rates()[(x, t)],
                male.rates()[(x, t)],
                "."
            )
            .expect("string write");
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = "Testland, Death rates (period 1x1)\n\n  Year   Age   Female   Male   Total\n  1940   0   0.05   0.06   0.055\n  1940   1   0.004   0.005   .\n  1941   0   0.045   0.055   0.05\n  1941   1   0.0035   0.0045   .\n";

    #[test]
    fn parses_fixture_exactly() {
        let r = parse_hmd_str(FIXTURE, None).unwrap();
        assert_eq!(r.female.ages(), &[0, 1]);
        assert_eq!(r.female.years(), &[1940, 1941]);
        assert_eq!(r.female.rates()[(1, 1)], 0.0035);
        assert_eq!(r.male.rates()[(0, 0)], 0.06);
        assert!(r.repairs.is_empty());
    }

    #[test]
    fn geometric_repair() {
        let mut text = String::from("x\n Year Age Female Male Total\n");
        for (y, f) in [(1940, "0.001"), (1941, "."), (1942, "0.002")] {
            for age in 0..10 {
                let v = if age == 5 { f } else { "0.01" };
                text.push_str(&format!("{y} {age} {v} 0.01 .\n"));
            }
        }
        let r = parse_hmd_str(&text, None).unwrap();
        let v = r.female.rates()[(5, 1)];
        assert!((v - (0.5 * (0.001f64.ln() + 0.002f64.ln())).exp()).abs() < 1e-18);
        assert!((v - 0.001414).abs() < 1e-6);
        assert_eq!(r.repairs.len(), 1);
        assert_eq!((r.repairs[0].age, r.repairs[0].year), (5, 1941));
    }

    #[test]
    fn clips_open_ages() {
        let mut text = String::from(" Year Age Female Male Total\n");
        for age in 98..=110 {
            let label = if age == 110 { "110+".to_string() } else { age.to_string() };
            text.push_str(&format!("2000 {label} 0.3 0.4 .\n"));
        }
        let text = text.replace("2000 98", "2000 0");
        let err = parse_hmd_str(&text, None);
        // ages 1..97 are missing entirely, so the year is rejected
        assert!(matches!(err, Err(Error::Data(_))));
        let mut ok = String::from(" Year Age Female Male Total\n");
        for age in 0..=110 {
            let label = if age == 110 { "110+".to_string() } else { age.to_string() };
            ok.push_str(&format!("2000 {label} 0.3 0.4 .\n"));
        }
        let r = parse_hmd_str(&ok, None).unwrap();
        assert_eq!(*r.female.ages().last().unwrap(), 100);
        assert!(r.notes[0].contains("100+"));
    }

    #[test]
    fn reports_line_numbers() {
        let text = format!("{FIXTURE}  1942   zero   0.1   0.1   .\n");
        match parse_hmd_str(&text, None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 8),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn too_many_missing_ages() {
        let mut text = String::from(" Year Age Female Male Total\n");
        for age in 0..10 {
            let v = if age < 3 { "." } else { "0.01" };
            text.push_str(&format!("1950 {age} {v} 0.01 .\n1951 {age} 0.01 0.01 .\n"));
        }
        assert!(matches!(parse_hmd_str(&text, None), Err(Error::Data(_))));
    }

    #[test]
    fn round_trip() {
        let r = parse_hmd_str(FIXTURE, None).unwrap();
        let text = write_hmd_string(&r.female, &r.male, "round trip").unwrap();
        let back = parse_hmd_str(&text, None).unwrap();
        assert_eq!(back.female, r.female);
        assert_eq!(back.male, r.male);
    }
}
