//! End-to-end run: ingest, backtest, weight, combine, evaluate, report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::backtest::{expanding_forecasts, FitGap, Target, WindowForecasts};
use crate::error::{Error, Result, StageExt};
use crate::evaluation::{
    combined_forecasts, diagnostics, interval_scores, jensen_check, point_scores, write_bias_csv,
    write_correlation_csv, DiagnosticsReport, JensenCheck, PointScores, ScoreTable,
};
use crate::io::{parse_hmd, synth_surface, PipelineConfig, Repair, SynthSpec};
use crate::models::{csv_error, Gender, MortalitySurface};
use crate::report::{bar_chart_svg, fmt_num, write_atomic};
use crate::rng::derive_seed;
use crate::weighting::{
    combine, equal_weights, inverse_aic_weights, inverse_mse_weights, shapley_weights, write_weights_csv,
    CombinedForecasts, Scheme, ShapleyConfig, ShapleyWeightTrace, WeightVector,
};

pub const MANIFEST: &str = "run_manifest.json";

/// CSV files every run writes.
pub const REPORT_FILES: [&str; 7] = [
    "weights.csv",
    "accuracy_mse.csv",
    "accuracy_mae.csv",
    "interval_score.csv",
    "diagnostics_bias.csv",
    "diagnostics_corr.csv",
    "shapley_trace.csv",
];

/// Observed surfaces for the configured genders.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub surfaces: Vec<MortalitySurface>,
    pub repairs: Vec<Repair>,
    pub notes: Vec<String>,
    pub source: String,
}

fn gender_seed(seed: u64, gender: Gender) -> u64 {
    derive_seed(seed, gender as u64)
}

/// Reads the rate file, or generates synthetic surfaces when none is set.
pub fn load_inputs(cfg: &PipelineConfig) -> Result<Inputs> {
    match &cfg.data {
        Some(path) => {
            let rates = parse_hmd(path, Some(cfg.years()))?;
            let surfaces = cfg.genders.iter().map(|&g| rates.surface(g).clone()).collect();
            let repairs = rates
                .repairs
                .into_iter()
                .filter(|r| cfg.genders.contains(&r.gender))
                .collect();
            Ok(Inputs {
                surfaces,
                repairs,
                notes: rates.notes,
                source: path.display().to_string(),
            })
        }
        None => {
            let surfaces = cfg
                .genders
                .iter()
                .map(|&g| {
                    let mut spec = SynthSpec::standard(g, cfg.years(), gender_seed(cfg.synthetic.seed, g));
                    spec.drift = cfg.synthetic.drift;
                    spec.sigma = cfg.synthetic.sigma;
                    spec.noise = cfg.synthetic.noise;
                    Ok(synth_surface(&spec)?.surface)
                })
                .collect::<Result<_>>()?;
            Ok(Inputs {
                surfaces,
                repairs: Vec::new(),
                notes: vec!["synthetic Lee-Carter surfaces".into()],
                source: "synthetic".into(),
            })
        }
    }
}

/// Everything computed for one gender.
#[derive(Debug, Clone)]
pub struct GenderRun {
    pub gender: Gender,
    pub validation: WindowForecasts,
    pub test: WindowForecasts,
    /// In [`Scheme::ALL`] order.
    pub weights: Vec<WeightVector>,
    pub trace: ShapleyWeightTrace,
    pub combined: Vec<CombinedForecasts>,
    pub point: BTreeMap<Scheme, PointScores>,
    pub interval: BTreeMap<Scheme, Vec<f64>>,
    pub jensen: BTreeMap<Scheme, JensenCheck>,
    pub diagnostics: DiagnosticsReport,
}

impl GenderRun {
    pub fn weights_for(&self, scheme: Scheme) -> &WeightVector {
        self.weights.iter().find(|w| w.scheme == scheme).expect("every scheme is computed")
    }
}

pub fn backtest_stage(cfg: &PipelineConfig, surface: &MortalitySurface, target: Target) -> Result<WindowForecasts> {
    let plan = cfg.split()?;
    expanding_forecasts(surface, &cfg.models, &plan, target, cfg.horizon, cfg.alpha)
}

pub fn shapley_config(cfg: &PipelineConfig, gender: Gender) -> ShapleyConfig {
    ShapleyConfig {
        forest: cfg.forest.clone(),
        samples: cfg.samples,
        seed: gender_seed(cfg.seed, gender),
        pooled: cfg.pooled_forest,
        gap_tolerant: cfg.gap_tolerant,
    }
}

/// The four weight vectors from validation forecasts.
pub fn weights_stage(
    cfg: &PipelineConfig,
    validation: &WindowForecasts,
    actuals: &MortalitySurface,
) -> Result<(Vec<WeightVector>, ShapleyWeightTrace)> {
    let eligible = crate::weighting::eligible_models(validation, cfg.gap_tolerant);
    let mut equal = equal_weights(&eligible, validation.gender)?;
    if eligible.len() != validation.models.len() {
        let w: Vec<f64> = validation
            .models
            .iter()
            .map(|m| equal.get(*m).unwrap_or(0.0))
            .collect();
        equal = WeightVector::new(Scheme::Equal, validation.gender, validation.models.clone(), w)?;
    }
    let (shapley, trace) = shapley_weights(validation, actuals, &shapley_config(cfg, validation.gender))?;
    let mse = inverse_mse_weights(validation, actuals, cfg.gap_tolerant)?;
    let aic = inverse_aic_weights(validation, cfg.gap_tolerant)?;
    Ok((vec![equal, shapley, mse, aic], trace))
}

pub fn run_gender(cfg: &PipelineConfig, surface: &MortalitySurface) -> Result<GenderRun> {
    let validation = backtest_stage(cfg, surface, Target::Validation).stage("backtest")?;
    let test = backtest_stage(cfg, surface, Target::Test).stage("backtest")?;
    let (weights, trace) = weights_stage(cfg, &validation, surface).stage("weights")?;
    let combined: Vec<CombinedForecasts> = weights
        .iter()
        .map(|w| combine(&test, w, cfg.gap_tolerant))
        .collect::<Result<_>>()
        .stage("combine")?;
    let evaluate = || -> Result<_> {
        let mut point = BTreeMap::new();
        let mut interval = BTreeMap::new();
        let mut jensen = BTreeMap::new();
        for (w, c) in weights.iter().zip(&combined) {
            let aligned = combined_forecasts(c);
            point.insert(w.scheme, point_scores(&aligned, surface, cfg.horizon)?);
            interval.insert(w.scheme, interval_scores(&aligned, surface, cfg.alpha, cfg.horizon)?);
            let check = jensen_check(&test, w, c, surface)?;
            if !check.holds() {
                return Err(Error::Numerical(format!(
                    "{} combination for {} breaks the convexity bound (excess {})",
                    w.scheme,
                    surface.gender().as_str(),
                    check.max_excess
                )));
            }
            jensen.insert(w.scheme, check);
        }
        let diagnostics = diagnostics(&validation, surface)?;
        Ok((point, interval, jensen, diagnostics))
    };
    let (point, interval, jensen, diagnostics) = evaluate().stage("evaluate")?;
    Ok(GenderRun {
        gender: surface.gender(),
        validation,
        test,
        weights,
        trace,
        combined,
        point,
        interval,
        jensen,
        diagnostics,
    })
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub config: PipelineConfig,
    pub inputs: Inputs,
    pub genders: Vec<GenderRun>,
}

impl PipelineRun {
    pub fn gender(&self, gender: Gender) -> Option<&GenderRun> {
        self.genders.iter().find(|g| g.gender == gender)
    }

    pub fn gaps(&self) -> Vec<&FitGap> {
        self.genders
            .iter()
            .flat_map(|g| g.validation.gaps.iter().chain(&g.test.gaps))
            .collect()
    }
}

/// Runs `f` on a pool of `workers` threads (0 for the default size).
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(f)
}

/// Computes every stage in memory without writing anything.
pub fn execute(cfg: &PipelineConfig) -> Result<PipelineRun> {
    cfg.validate()?;
    with_workers(cfg.workers, || {
        let inputs = load_inputs(cfg).stage("ingest")?;
        let genders = inputs
            .surfaces
            .iter()
            .map(|s| {
                log::info!("running {}", s.gender().as_str());
                run_gender(cfg, s)
            })
            .collect::<Result<_>>()?;
        Ok(PipelineRun {
            config: cfg.clone(),
            inputs,
            genders,
        })
    })
}

fn score_table(run: &PipelineRun, pick: impl Fn(&GenderRun, Scheme) -> Vec<f64>) -> Result<ScoreTable> {
    let mut t = ScoreTable::new(run.config.horizon);
    for g in &run.genders {
        for s in Scheme::ALL {
            t.insert(s, g.gender, pick(g, s))?;
        }
    }
    Ok(t)
}

pub fn mse_table(run: &PipelineRun) -> Result<ScoreTable> {
    score_table(run, |g, s| g.point[&s].mse.clone())
}

pub fn mae_table(run: &PipelineRun) -> Result<ScoreTable> {
    score_table(run, |g, s| g.point[&s].mae.clone())
}

pub fn interval_table(run: &PipelineRun) -> Result<ScoreTable> {
    score_table(run, |g, s| g.interval[&s].clone())
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn trace_csv(run: &PipelineRun) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(["gender", "model_id", "h", "age", "phi_hat"]).map_err(csv_error)?;
        for g in &run.genders {
            let t = &g.trace;
            for (j, m) in t.models.iter().enumerate() {
                for (h, phi) in t.phi_hat.iter().enumerate() {
                    for (x, age) in g.validation.ages.iter().enumerate() {
                        w.write_record([
                            g.gender.as_str().to_string(),
                            m.as_str().to_string(),
                            (h + 1).to_string(),
                            age.to_string(),
                            fmt_num(phi[(x, j)]),
                        ])
                        .map_err(csv_error)?;
                    }
                }
            }
        }
        w.flush().map_err(|e| Error::Data(e.to_string()))?;
    }
    Ok(buf)
}

#[derive(Serialize)]
struct ShapleySummary {
    gender: Gender,
    se: f64,
    worst_local_accuracy_ratio: f64,
    attributed_rows: usize,
    identical_groups: Vec<Vec<String>>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    version: &'static str,
    seed: u64,
    data_source: &'a str,
    config: &'a PipelineConfig,
    split: crate::backtest::SplitPlan,
    files: Vec<String>,
    repairs: &'a [Repair],
    notes: Vec<String>,
    gaps: Vec<&'a FitGap>,
    fallbacks: Vec<String>,
    shapley: Vec<ShapleySummary>,
    jensen: Vec<(Gender, Scheme, &'a JensenCheck)>,
}

/// Renders every report file as `(name, bytes)`.
pub fn render_report(run: &PipelineRun) -> Result<Vec<(String, Vec<u8>)>> {
    let weights: Vec<WeightVector> = run.genders.iter().flat_map(|g| g.weights.iter().cloned()).collect();
    let diags: Vec<DiagnosticsReport> = run.genders.iter().map(|g| g.diagnostics.clone()).collect();
    let mut files: Vec<(String, Vec<u8>)> = vec![
        ("weights.csv".into(), csv_bytes(|b| write_weights_csv(b, &weights))?),
        ("accuracy_mse.csv".into(), csv_bytes(|b| mse_table(run)?.write_csv(b))?),
        ("accuracy_mae.csv".into(), csv_bytes(|b| mae_table(run)?.write_csv(b))?),
        ("interval_score.csv".into(), csv_bytes(|b| interval_table(run)?.write_csv(b))?),
        ("diagnostics_bias.csv".into(), csv_bytes(|b| write_bias_csv(b, &diags))?),
        ("diagnostics_corr.csv".into(), csv_bytes(|b| write_correlation_csv(b, &diags))?),
        ("shapley_trace.csv".into(), trace_csv(run)?),
    ];
    if run.config.charts {
        for g in &run.genders {
            let labels: Vec<String> = g.validation.models.iter().map(|m| m.as_str().to_string()).collect();
            let series: Vec<(String, Vec<f64>)> =
                g.weights.iter().map(|w| (w.scheme.title().to_string(), w.weights.clone())).collect();
            let svg = bar_chart_svg(&format!("Combination weights, {}", g.gender.title()), &labels, &series);
            files.push((format!("weights_{}.svg", g.gender.as_str()), svg.into_bytes()));
        }
    }

    let mut notes = run.inputs.notes.clone();
    notes.push("errors, scores and interval bounds are on the log-rate scale".into());
    notes.push("combined interval bounds are the weighted averages of member bounds".into());
    notes.push("interval scores are multiplied by 100".into());
    for g in &run.genders {
        for w in &g.weights {
            notes.extend(w.notes.iter().map(|n| format!("{} {}: {n}", g.gender.as_str(), w.scheme)));
        }
    }
    let mut fallbacks = Vec::new();
    for g in &run.genders {
        for f in g.validation.fits.iter().chain(&g.test.fits).filter(|f| f.fallback) {
            fallbacks.push(format!(
                "{} {} window ending {}: Poisson fit fell back to SVD",
                g.gender.as_str(),
                f.model_id,
                f.train_end_year
            ));
        }
    }
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        seed: run.config.seed,
        data_source: &run.inputs.source,
        config: &run.config,
        split: run.config.split()?,
        files: files.iter().map(|(n, _)| n.clone()).chain([MANIFEST.to_string()]).collect(),
        repairs: &run.inputs.repairs,
        notes,
        gaps: run.gaps(),
        fallbacks,
        shapley: run
            .genders
            .iter()
            .map(|g| ShapleySummary {
                gender: g.gender,
                se: g.trace.se,
                worst_local_accuracy_ratio: g.trace.worst_local_accuracy_ratio(),
                attributed_rows: g.trace.local_accuracy.len(),
                identical_groups: g
                    .trace
                    .groups
                    .iter()
                    .map(|grp| grp.iter().map(|m| m.as_str().to_string()).collect())
                    .collect(),
            })
            .collect(),
        jensen: run
            .genders
            .iter()
            .flat_map(|g| g.jensen.iter().map(move |(s, j)| (g.gender, *s, j)))
            .collect(),
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Data(e.to_string()))?;
    files.push((MANIFEST.into(), json));
    Ok(files)
}

fn staging_dir(out: &Path) -> Result<PathBuf> {
    let name = out
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a directory name", out.display())))?;
    let mut staged = std::ffi::OsString::from(".");
    staged.push(name);
    staged.push(".partial");
    Ok(out.with_file_name(staged))
}

/// Writes report files into `out`, replacing a previous run's directory.
/// Files go to a staging directory first, which is removed on failure.
pub fn write_report(files: &[(String, Vec<u8>)], out: &Path) -> Result<()> {
    if out.exists() {
        let empty = std::fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_none();
        if !empty && !out.join(MANIFEST).exists() {
            return Err(Error::Config(format!(
                "{} exists and is not a previous report; refusing to overwrite",
                out.display()
            )));
        }
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let staged = staging_dir(out)?;
    if staged.exists() {
        std::fs::remove_dir_all(&staged).map_err(|e| Error::io(&staged, e))?;
    }
    std::fs::create_dir_all(&staged).map_err(|e| Error::io(&staged, e))?;
    let written = files
        .iter()
        .try_for_each(|(name, bytes)| write_atomic(&staged.join(name), bytes));
    if let Err(e) = written {
        let _ = std::fs::remove_dir_all(&staged);
        return Err(e);
    }
    if out.exists() {
        std::fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    std::fs::rename(&staged, out).map_err(|e| Error::io(out, e))
}

/// Runs every stage and writes the report to `cfg.output`.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineRun> {
    let run = execute(cfg)?;
    let files = render_report(&run).stage("report")?;
    write_report(&files, &cfg.output).stage("report")?;
    Ok(run)
}
