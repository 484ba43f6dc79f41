//! Estimation for each roster model.

use nalgebra::{DMatrix, DVector};

use super::linalg::{leading_singular, min_norm_solve, simple_regression};
use super::life_table::life_expectancy;
use super::{CohortEffect, Component, FittedModel, Link, ModelId, MortalitySurface};
use crate::error::{Error, Result};

pub const MIN_FIT_YEARS: usize = 20;
/// Cohorts observed fewer times than this are pinned to zero.
pub const MIN_COHORT_CELLS: usize = 5;
/// Youngest age fitted by the CBD family; younger ages use a Lee-Carter fit.
pub const CBD_MIN_AGE: u32 = 60;
/// Principal components kept by the functional time-series model.
pub const FTS_COMPONENTS: usize = 6;
pub const NEWTON_MAX_ITER: usize = 200;
pub const NEWTON_TOL: f64 = 1e-8;

/// Fits `model` to `surface`.
pub fn fit(model: ModelId, surface: &MortalitySurface) -> Result<FittedModel> {
    if surface.n_years() < MIN_FIT_YEARS {
        return Err(Error::Data(format!(
            "{model} needs at least {MIN_FIT_YEARS} years, got {}",
            surface.n_years()
        )));
    }
    let all_rows: Vec<usize> = (0..surface.n_ages()).collect();
    let mut notes = Vec::new();
    let mut fallback = false;
    let components = match model {
        ModelId::LcGaussian => vec![lee_carter_svd(surface, &all_rows)],
        ModelId::LcNoAdjust => {
            let mut c = lee_carter_svd(surface, &all_rows);
            let last = surface.n_years() - 1;
            c.jump_off = Some(surface.rates().column(last).iter().map(|m| m.ln()).collect());
            vec![c]
        }
        ModelId::LcE0Adjust => vec![lee_carter_e0(surface, &mut notes)],
        ModelId::LcPoisson => {
            let (c, fell_back) = lee_carter_poisson(surface, &mut notes);
            fallback = fell_back;
            vec![c]
        }
        ModelId::Apc => vec![age_period_cohort(surface)],
        ModelId::Cbd | ModelId::CbdCohort => {
            let (old, young): (Vec<usize>, Vec<usize>) =
                all_rows.iter().partition(|&&r| surface.ages()[r] >= CBD_MIN_AGE);
            if old.len() < 2 {
                return Err(Error::Data(format!(
                    "{model} needs at least two ages >= {CBD_MIN_AGE}"
                )));
            }
            let mut parts = Vec::new();
            if !young.is_empty() {
                parts.push(lee_carter_svd(surface, &young));
            }
            parts.push(if model == ModelId::Cbd {
                cairns_blake_dowd(surface, &old)
            } else {
                cairns_blake_dowd_cohort(surface, &old)
            });
            parts
        }
        ModelId::Fts => vec![functional_time_series(surface)],
    };
    Ok(FittedModel::assemble(model, surface, components, fallback, notes))
}

fn sub_log_rates(surface: &MortalitySurface, rows: &[usize]) -> DMatrix<f64> {
    let log = surface.log_rates();
    DMatrix::from_fn(rows.len(), surface.n_years(), |r, c| log[(rows[r], c)])
}

fn row_means(m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.nrows())
        .map(|r| crate::numeric::mean(&m.row(r).iter().copied().collect::<Vec<_>>()))
        .collect()
}

/// Rank-1 SVD of centred log rates with `sum(b) = 1`, `sum(kappa) = 0`.
fn lc_svd_parameters(log: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n_a, n_t) = log.shape();
    let a = row_means(log);
    let centred = DMatrix::from_fn(n_a, n_t, |r, c| log[(r, c)] - a[r]);
    let scale = centred.abs().max();
    let triple = leading_singular(&centred, 1).into_iter().next();
    match triple {
        Some(t) if t.value > 1e-12 * scale.max(1e-300) && t.left.sum().abs() > 1e-12 => {
            let total = t.left.sum();
            let b: Vec<f64> = t.left.iter().map(|u| u / total).collect();
            let kappa: Vec<f64> = t.right.iter().map(|v| v * t.value * total).collect();
            normalize_lc(a, b, kappa)
        }
        _ => (a, vec![1.0 / n_a as f64; n_a], vec![0.0; n_t]),
    }
}

/// Rescales to `sum(b) = 1` and moves the mean of `kappa` into `a`.
fn normalize_lc(mut a: Vec<f64>, mut b: Vec<f64>, mut kappa: Vec<f64>) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let total: f64 = b.iter().sum();
    if total.abs() > 1e-300 {
        b.iter_mut().for_each(|v| *v /= total);
        kappa.iter_mut().for_each(|k| *k *= total);
    }
    let shift = crate::numeric::mean(&kappa);
    kappa.iter_mut().for_each(|k| *k -= shift);
    for (ax, bx) in a.iter_mut().zip(&b) {
        *ax += bx * shift;
    }
    (a, b, kappa)
}

fn lc_component(surface: &MortalitySurface, rows: &[usize], a: Vec<f64>, b: Vec<f64>, kappa: Vec<f64>) -> Component {
    let n_t = kappa.len();
    Component {
        link: Link::Log,
        rows: rows.to_vec(),
        ages: rows.iter().map(|&r| surface.ages()[r]).collect(),
        base: a,
        loadings: DMatrix::from_column_slice(rows.len(), 1, &b),
        indexes: DMatrix::from_row_slice(1, n_t, &kappa),
        cohort: None,
        jump_off: None,
    }
}

pub(crate) fn lee_carter_svd(surface: &MortalitySurface, rows: &[usize]) -> Component {
    let log = sub_log_rates(surface, rows);
    let (a, b, kappa) = lc_svd_parameters(&log);
    lc_component(surface, rows, a, b, kappa)
}

/// Lee-Carter with `kappa_t` re-estimated so that fitted life expectancy at
/// the first age matches the observed value in every year.
fn lee_carter_e0(surface: &MortalitySurface, notes: &mut Vec<String>) -> Component {
    let rows: Vec<usize> = (0..surface.n_ages()).collect();
    let log = surface.log_rates();
    let (a, b, mut kappa) = lc_svd_parameters(&log);
    let e0_at = |k: f64| {
        let rates: Vec<f64> = a.iter().zip(&b).map(|(ax, bx)| (ax + bx * k).exp()).collect();
        life_expectancy(&rates)
    };
    for t in 0..surface.n_years() {
        let observed: Vec<f64> = surface.rates().column(t).iter().copied().collect();
        let target = life_expectancy(&observed);
        match solve_monotone(|k| e0_at(k) - target, kappa[t]) {
            Some(k) => kappa[t] = k,
            None => notes.push(format!(
                "life-expectancy match failed in {}; kept the SVD index",
                surface.years()[t]
            )),
        }
    }
    let (a, b, kappa) = normalize_lc(a, b.clone(), kappa);
    lc_component(surface, &rows, a, b, kappa)
}

/// Root of a continuous function by bracket expansion and bisection.
fn solve_monotone(f: impl Fn(f64) -> f64, start: f64) -> Option<f64> {
    let f0 = f(start);
    if f0 == 0.0 {
        return Some(start);
    }
    let mut step = 1.0;
    let mut bracket = None;
    for _ in 0..64 {
        for candidate in [start - step, start + step] {
            let fc = f(candidate);
            if fc.is_finite() && fc.signum() != f0.signum() {
                bracket = Some(if candidate < start { (candidate, start) } else { (start, candidate) });
                break;
            }
        }
        if bracket.is_some() {
            break;
        }
        step *= 2.0;
    }
    let (mut lo, mut hi) = bracket?;
    let mut flo = f(lo);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let fm = f(mid);
        if fm == 0.0 {
            return Some(mid);
        }
        if fm.signum() == flo.signum() {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

/// Poisson Lee-Carter with unit exposures, fitted by alternating Newton
/// steps from the SVD solution. Returns the component and whether the SVD
/// fallback was used.
fn lee_carter_poisson(surface: &MortalitySurface, notes: &mut Vec<String>) -> (Component, bool) {
    let rows: Vec<usize> = (0..surface.n_ages()).collect();
    let log = surface.log_rates();
    let d = surface.rates();
    let (n_a, n_t) = d.shape();
    let (a0, b0, k0) = lc_svd_parameters(&log);
    let (mut a, mut b, mut kappa) = (a0.clone(), b0.clone(), k0.clone());
    let mu = |a: &[f64], b: &[f64], k: &[f64], x: usize, t: usize| (a[x] + b[x] * k[t]).exp();

    let mut converged = false;
    let mut diverged = false;
    for _ in 0..NEWTON_MAX_ITER {
        let mut change = 0.0f64;
        for x in 0..n_a {
            let (mut num, mut den) = (0.0, 0.0);
            for t in 0..n_t {
                let m = mu(&a, &b, &kappa, x, t);
                num += d[(x, t)] - m;
                den += m;
            }
            let step = num / den;
            a[x] += step;
            change = change.max(step.abs());
        }
        for t in 0..n_t {
            let (mut num, mut den) = (0.0, 0.0);
            for x in 0..n_a {
                let m = mu(&a, &b, &kappa, x, t);
                num += (d[(x, t)] - m) * b[x];
                den += m * b[x] * b[x];
            }
            if den > 0.0 {
                let step = num / den;
                kappa[t] += step;
                change = change.max(step.abs());
            }
        }
        for x in 0..n_a {
            let (mut num, mut den) = (0.0, 0.0);
            for t in 0..n_t {
                let m = mu(&a, &b, &kappa, x, t);
                num += (d[(x, t)] - m) * kappa[t];
                den += m * kappa[t] * kappa[t];
            }
            if den > 0.0 {
                let step = num / den;
                b[x] += step;
                change = change.max(step.abs());
            }
        }
        if !change.is_finite() || a.iter().chain(&b).chain(&kappa).any(|v| !v.is_finite()) {
            diverged = true;
            break;
        }
        if change < NEWTON_TOL {
            converged = true;
            break;
        }
    }
    if diverged {
        notes.push("Poisson iterations diverged; fell back to the SVD fit".into());
        return (lc_component(surface, &rows, a0, b0, k0), true);
    }
    if !converged {
        notes.push(format!(
            "Poisson iterations hit the {NEWTON_MAX_ITER}-step cap before converging"
        ));
    }
    let (a, b, kappa) = normalize_lc(a, b, kappa);
    (lc_component(surface, &rows, a, b, kappa), false)
}

/// Cohort indexing for a block of rows: `(first_cohort, cell counts)`.
fn cohort_counts(surface: &MortalitySurface, rows: &[usize]) -> (i32, Vec<usize>) {
    let ages = surface.ages();
    let oldest = rows.iter().map(|&r| ages[r]).max().unwrap_or(0) as i32;
    let youngest = rows.iter().map(|&r| ages[r]).min().unwrap_or(0) as i32;
    let first = surface.first_year() - oldest;
    let last = surface.last_year() - youngest;
    let mut counts = vec![0usize; (last - first + 1) as usize];
    for &r in rows {
        for &y in surface.years() {
            counts[(y - ages[r] as i32 - first) as usize] += 1;
        }
    }
    (first, counts)
}

/// Accumulates normal equations for cells that are sums of unit-coefficient
/// or weighted parameters.
struct NormalEquations {
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
}

impl NormalEquations {
    fn new(p: usize) -> Self {
        Self {
            xtx: DMatrix::zeros(p, p),
            xty: DVector::zeros(p),
        }
    }

    fn add(&mut self, terms: &[(usize, f64)], y: f64) {
        for &(i, wi) in terms {
            self.xty[i] += wi * y;
            for &(j, wj) in terms {
                self.xtx[(i, j)] += wi * wj;
            }
        }
    }

    fn solve(self) -> (DVector<f64>, usize) {
        min_norm_solve(self.xtx, &self.xty)
    }
}

fn age_period_cohort(surface: &MortalitySurface) -> Component {
    let rows: Vec<usize> = (0..surface.n_ages()).collect();
    let (n_a, n_t) = (surface.n_ages(), surface.n_years());
    let log = surface.log_rates();
    let (first_cohort, counts) = cohort_counts(surface, &rows);
    let supported: Vec<bool> = counts.iter().map(|&c| c >= MIN_COHORT_CELLS).collect();
    let mut column_of = vec![None; counts.len()];
    let mut next = n_a + n_t;
    for (ci, s) in supported.iter().enumerate() {
        if *s {
            column_of[ci] = Some(next);
            next += 1;
        }
    }
    let mut ne = NormalEquations::new(next);
    for r in 0..n_a {
        for t in 0..n_t {
            let ci = (surface.years()[t] - surface.ages()[r] as i32 - first_cohort) as usize;
            let mut terms = vec![(r, 1.0), (n_a + t, 1.0)];
            if let Some(col) = column_of[ci] {
                terms.push((col, 1.0));
            }
            ne.add(&terms, log[(r, t)]);
        }
    }
    let (sol, rank) = ne.solve();
    let mut a: Vec<f64> = sol.rows(0, n_a).iter().copied().collect();
    let mut kappa: Vec<f64> = sol.rows(n_a, n_t).iter().copied().collect();
    let shift = crate::numeric::mean(&kappa);
    kappa.iter_mut().for_each(|k| *k -= shift);
    a.iter_mut().for_each(|v| *v += shift);
    let gamma: Vec<f64> = column_of
        .iter()
        .map(|c| c.map_or(0.0, |col| sol[col]))
        .collect();
    Component {
        link: Link::Log,
        ages: surface.ages().to_vec(),
        rows,
        base: a,
        loadings: DMatrix::from_element(n_a, 1, 1.0),
        indexes: DMatrix::from_row_slice(1, n_t, &kappa),
        cohort: Some(CohortEffect {
            first_cohort,
            values: gamma,
            supported,
            rank,
        }),
        jump_off: None,
    }
}

pub(crate) fn logit_q(m: f64) -> f64 {
    // q = 1 - exp(-m); logit q = ln(q / (1 - q)) = ln(exp(m) - 1)
    m.exp_m1().ln()
}

fn cbd_design(surface: &MortalitySurface, rows: &[usize]) -> (Vec<f64>, f64, DMatrix<f64>) {
    let ages: Vec<f64> = rows.iter().map(|&r| surface.ages()[r] as f64).collect();
    let centre = ages.iter().sum::<f64>() / ages.len() as f64;
    let y = DMatrix::from_fn(rows.len(), surface.n_years(), |r, c| {
        logit_q(surface.rates()[(rows[r], c)])
    });
    (ages, centre, y)
}

fn cairns_blake_dowd(surface: &MortalitySurface, rows: &[usize]) -> Component {
    let (ages, centre, y) = cbd_design(surface, rows);
    let n_t = surface.n_years();
    let offsets: Vec<f64> = ages.iter().map(|x| x - centre).collect();
    let mut indexes = DMatrix::zeros(2, n_t);
    for t in 0..n_t {
        let col: Vec<f64> = y.column(t).iter().copied().collect();
        let (level, slope) = simple_regression(&offsets, &col);
        indexes[(0, t)] = level;
        indexes[(1, t)] = slope;
    }
    Component {
        link: Link::Logit,
        rows: rows.to_vec(),
        ages: rows.iter().map(|&r| surface.ages()[r]).collect(),
        base: vec![0.0; rows.len()],
        loadings: DMatrix::from_fn(rows.len(), 2, |r, k| if k == 0 { 1.0 } else { offsets[r] }),
        indexes,
        cohort: None,
        jump_off: None,
    }
}

fn cairns_blake_dowd_cohort(surface: &MortalitySurface, rows: &[usize]) -> Component {
    let (ages, centre, y) = cbd_design(surface, rows);
    let n_t = surface.n_years();
    let offsets: Vec<f64> = ages.iter().map(|x| x - centre).collect();
    let (first_cohort, counts) = cohort_counts(surface, rows);
    let supported: Vec<bool> = counts.iter().map(|&c| c >= MIN_COHORT_CELLS).collect();
    let mut column_of = vec![None; counts.len()];
    let mut next = 2 * n_t;
    for (ci, s) in supported.iter().enumerate() {
        if *s {
            column_of[ci] = Some(next);
            next += 1;
        }
    }
    let mut ne = NormalEquations::new(next);
    for (r, &row) in rows.iter().enumerate() {
        for t in 0..n_t {
            let ci = (surface.years()[t] - surface.ages()[row] as i32 - first_cohort) as usize;
            let mut terms = vec![(t, 1.0), (n_t + t, offsets[r])];
            if let Some(col) = column_of[ci] {
                terms.push((col, 1.0));
            }
            ne.add(&terms, y[(r, t)]);
        }
    }
    let (sol, rank) = ne.solve();
    let mut indexes = DMatrix::zeros(2, n_t);
    for t in 0..n_t {
        indexes[(0, t)] = sol[t];
        indexes[(1, t)] = sol[n_t + t];
    }
    let gamma = column_of
        .iter()
        .map(|c| c.map_or(0.0, |col| sol[col]))
        .collect();
    Component {
        link: Link::Logit,
        rows: rows.to_vec(),
        ages: rows.iter().map(|&r| surface.ages()[r]).collect(),
        base: vec![0.0; rows.len()],
        loadings: DMatrix::from_fn(rows.len(), 2, |r, k| if k == 0 { 1.0 } else { offsets[r] }),
        indexes,
        cohort: Some(CohortEffect {
            first_cohort,
            values: gamma,
            supported,
            rank,
        }),
        jump_off: None,
    }
}

/// Whittaker smoothing over age with a second-difference penalty whose
/// weight is chosen by generalized cross-validation pooled over years.
pub(crate) fn smooth_over_age(log: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let (n_a, n_t) = log.shape();
    if n_a < 3 {
        return (log.clone(), 0.0);
    }
    let d = DMatrix::from_fn(n_a - 2, n_a, |r, c| match c.wrapping_sub(r) {
        0 | 2 => 1.0,
        1 => -2.0,
        _ => 0.0,
    });
    let penalty = d.transpose() * d;
    let eig = nalgebra::SymmetricEigen::new(penalty);
    let basis = eig.eigenvectors;
    let eigenvalues: Vec<f64> = eig.eigenvalues.iter().map(|v: &f64| v.max(0.0)).collect();
    let coords = basis.transpose() * log;

    let mut best: Option<(f64, f64)> = None;
    for step in -16..=32 {
        let lambda = 10f64.powf(step as f64 / 4.0);
        let mut rss = 0.0;
        let mut trace = 0.0;
        for (i, &e) in eigenvalues.iter().enumerate() {
            let shrink = 1.0 / (1.0 + lambda * e);
            trace += shrink;
            let resid = 1.0 - shrink;
            for t in 0..n_t {
                rss += (resid * coords[(i, t)]).powi(2);
            }
        }
        let dof = 1.0 - trace / n_a as f64;
        let gcv = (rss / (n_a * n_t) as f64) / (dof * dof);
        if best.map_or(true, |(g, _)| gcv < g) {
            best = Some((gcv, lambda));
        }
    }
    let lambda = best.expect("non-empty grid").1;
    let mut smoothed_coords = coords;
    for (i, &e) in eigenvalues.iter().enumerate() {
        let shrink = 1.0 / (1.0 + lambda * e);
        smoothed_coords.row_mut(i).scale_mut(shrink);
    }
    (basis * smoothed_coords, lambda)
}

fn functional_time_series(surface: &MortalitySurface) -> Component {
    let rows: Vec<usize> = (0..surface.n_ages()).collect();
    let (n_a, n_t) = (surface.n_ages(), surface.n_years());
    let (smoothed, _) = smooth_over_age(&surface.log_rates());
    let mean = row_means(&smoothed);
    let centred = DMatrix::from_fn(n_a, n_t, |r, c| smoothed[(r, c)] - mean[r]);
    let scale = centred.abs().max().max(1e-300);
    let triples: Vec<_> = leading_singular(&centred, FTS_COMPONENTS)
        .into_iter()
        .filter(|t| t.value > 1e-12 * scale)
        .collect();
    let k = triples.len();
    let loadings = DMatrix::from_fn(n_a, k, |r, j| triples[j].left[r]);
    let indexes = DMatrix::from_fn(k, n_t, |j, t| triples[j].right[t] * triples[j].value);
    Component {
        link: Link::Log,
        ages: surface.ages().to_vec(),
        rows,
        base: mean,
        loadings,
        indexes,
        cohort: None,
        jump_off: None,
    }
}

/// Effective parameter count reported for AIC.
pub(crate) fn parameter_count(model: ModelId, components: &[Component]) -> usize {
    components
        .iter()
        .map(|c| {
            let n_a = c.rows.len();
            let n_t = c.indexes.ncols();
            match (&c.cohort, c.link) {
                // identified cohort models: rank of the design
                (Some(cohort), _) => cohort.rank,
                (None, Link::Logit) => 2 * n_t,
                (None, Link::Log) if model == ModelId::Fts => {
                    let k = c.indexes.nrows();
                    n_a * (k + 1) + k * n_t
                }
                // Lee-Carter: a_x, b_x, kappa_t less the two constraints
                (None, Link::Log) => 2 * n_a + n_t - 2,
            }
        })
        .sum()
}
