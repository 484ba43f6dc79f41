//! Period life expectancy from central death rates.

/// Life expectancy at the first age of `rates` (single-year ages, the last
/// age treated as an open interval). Deaths are assumed to occur mid-year.
pub fn life_expectancy(rates: &[f64]) -> f64 {
    let mut survivors = 1.0;
    let mut person_years = 0.0;
    let last = rates.len().saturating_sub(1);
    for (i, &m) in rates.iter().enumerate() {
        if i == last {
            person_years += survivors / m;
            break;
        }
        let q = (m / (1.0 + 0.5 * m)).min(1.0);
        let next = survivors * (1.0 - q);
        person_years += 0.5 * (survivors + next);
        survivors = next;
    }
    person_years
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_hazard_open_interval() {
        // single open age group: e = 1/m
        assert!((life_expectancy(&[0.05]) - 20.0).abs() < 1e-12);
    }

    #[test]
    fn higher_mortality_lowers_expectancy() {
        let low: Vec<f64> = (0..101).map(|x| 0.0005 * (0.09 * x as f64).exp()).collect();
        let high: Vec<f64> = low.iter().map(|m| m * 1.2).collect();
        let (el, eh) = (life_expectancy(&low), life_expectancy(&high));
        assert!(el > eh && el > 50.0 && el < 100.0, "{el} {eh}");
    }
}
