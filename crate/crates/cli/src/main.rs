//! `shapmort`: command-line driver for the Shapley-weighted mortality
//! ensemble.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use shapley_mortality::backtest::{Target, YearSpan};
use shapley_mortality::game::{audit_allocation, exact_shapley, permutation_shapley, AdditivityPeer, Allocation, Game};
use shapley_mortality::io::{parse_hmd, synth_surface, write_hmd_string, PipelineConfig, SynthSpec};
use shapley_mortality::models::{Gender, ModelId};
use shapley_mortality::pipeline::{self, backtest_stage, load_inputs, weights_stage, with_workers};
use shapley_mortality::report::{fmt_num, write_atomic};
use shapley_mortality::weighting::{combine, read_weights_csv, write_weights_csv, Scheme};
use shapley_mortality::{Error, Result};

#[derive(Parser)]
#[command(name = "shapmort", version, about = "Shapley-weighted ensembles of mortality forecasts")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and repair an HMD rate file.
    Ingest {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        first_year: Option<i32>,
        #[arg(long)]
        last_year: Option<i32>,
        /// Directory for `rates.txt` and `repairs.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic rate file for both genders.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1940)]
        first_year: i32,
        #[arg(long, default_value_t = 2019)]
        last_year: i32,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        drift: Option<f64>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Expanding-window forecasts for the validation or test period.
    Backtest {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum, default_value_t = TargetArg::Validation)]
        target: TargetArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// All four weight schemes from validation forecasts.
    Weights {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Combine test-period forecasts with weights from `weights`.
    Combine {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        weights: PathBuf,
        /// Schemes to apply; all schemes in the file when omitted.
        #[arg(long, value_delimiter = ',')]
        scheme: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the pipeline and print mean scores per scheme.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run the pipeline and write the full report directory.
    Report {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Audit an allocation (Shapley by default) against the four axioms.
    AuditAxioms {
        /// Game file: `n <players>` then `<ids> <value>` lines.
        #[arg(long)]
        game: PathBuf,
        /// Allocation to audit, one number per player (whitespace or comma separated).
        #[arg(long)]
        allocation: Option<PathBuf>,
        /// Second game for the additivity check (Shapley allocations only).
        #[arg(long)]
        peer: Option<PathBuf>,
        /// Use sampled instead of exact Shapley values.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    Validation,
    Test,
}

/// Configuration file plus per-field overrides.
#[derive(Args, Default)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    genders: Option<Vec<String>>,
    #[arg(long)]
    first_year: Option<i32>,
    #[arg(long)]
    last_year: Option<i32>,
    #[arg(long)]
    train_years: Option<usize>,
    #[arg(long)]
    validation_years: Option<usize>,
    #[arg(long)]
    test_years: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    models: Option<Vec<String>>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trees: Option<usize>,
    #[arg(long)]
    max_depth: Option<usize>,
    #[arg(long)]
    min_leaf: Option<usize>,
    #[arg(long)]
    mtry: Option<usize>,
    #[arg(long)]
    gap_tolerant: bool,
    #[arg(long)]
    pooled_forest: bool,
    #[arg(long)]
    no_charts: bool,
    #[arg(long)]
    workers: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(d) = &self.data {
            cfg.data = Some(d.clone());
        }
        if let Some(g) = &self.genders {
            cfg.genders = g.iter().map(|s| s.parse()).collect::<Result<_>>()?;
        }
        if let Some(m) = &self.models {
            cfg.models = m.iter().map(|s| s.parse()).collect::<Result<Vec<ModelId>>>()?;
        }
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field { $target = v; })*
            };
        }
        set!(
            first_year => cfg.first_year,
            last_year => cfg.last_year,
            train_years => cfg.train_years,
            validation_years => cfg.validation_years,
            test_years => cfg.test_years,
            horizon => cfg.horizon,
            alpha => cfg.alpha,
            samples => cfg.samples,
            seed => cfg.seed,
            trees => cfg.forest.tree_count,
            max_depth => cfg.forest.max_depth,
            min_leaf => cfg.forest.min_leaf_size,
            workers => cfg.workers,
        );
        if let Some(m) = self.mtry {
            cfg.forest.features_per_split = Some(m);
        }
        cfg.gap_tolerant |= self.gap_tolerant;
        cfg.pooled_forest |= self.pooled_forest;
        if self.no_charts {
            cfg.charts = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|p| !p.as_os_str().is_empty()) {
        Some(dir) => std::fs::create_dir_all(dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display()))),
        None => Ok(()),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    write_atomic(path, bytes)
}

fn ingest(data: &Path, first: Option<i32>, last: Option<i32>, out: &Path) -> Result<()> {
    let years = match (first, last) {
        (Some(a), Some(b)) => Some(YearSpan::new(a, b)),
        (None, None) => None,
        _ => return Err(Error::Config("give both --first-year and --last-year or neither".into())),
    };
    let rates = parse_hmd(data, years)?;
    std::fs::create_dir_all(out).map_err(|e| Error::Data(format!("{}: {e}", out.display())))?;
    let title = format!("Repaired rates from {}", data.display());
    write_file(&out.join("rates.txt"), write_hmd_string(&rates.female, &rates.male, &title)?.as_bytes())?;
    let mut repairs = String::from("gender,age,year,value\n");
    for r in &rates.repairs {
        repairs += &format!("{},{},{},{}\n", r.gender.as_str(), r.age, r.year, fmt_num(r.value));
    }
    write_file(&out.join("repairs.csv"), repairs.as_bytes())?;
    for n in &rates.notes {
        eprintln!("note: {n}");
    }
    println!(
        "{} ages x {} years ({}-{}), {} repaired cells",
        rates.female.n_ages(),
        rates.female.n_years(),
        rates.female.first_year(),
        rates.female.last_year(),
        rates.repairs.len()
    );
    Ok(())
}

fn synth(out: &Path, years: YearSpan, seed: u64, drift: Option<f64>, sigma: Option<f64>, noise: Option<f64>) -> Result<()> {
    let mut surfaces = Vec::new();
    for (k, g) in Gender::BOTH.into_iter().enumerate() {
        let mut spec = SynthSpec::standard(g, years, seed.wrapping_add(k as u64));
        spec.drift = drift.unwrap_or(spec.drift);
        spec.sigma = sigma.unwrap_or(spec.sigma);
        spec.noise = noise.unwrap_or(spec.noise);
        surfaces.push(synth_surface(&spec)?.surface);
    }
    let text = write_hmd_string(&surfaces[0], &surfaces[1], &format!("Synthetic rates, seed {seed}"))?;
    write_file(out, text.as_bytes())?;
    println!("wrote {}", out.display());
    Ok(())
}

fn csv_concat(parts: Vec<Vec<u8>>) -> Vec<u8> {
    // keep the header of the first part only
    let mut out = Vec::new();
    for (i, p) in parts.into_iter().enumerate() {
        if i == 0 {
            out.extend(p);
        } else if let Some(pos) = p.iter().position(|&b| b == b'\n') {
            out.extend(&p[pos + 1..]);
        }
    }
    out
}

fn backtest(cfg: &PipelineConfig, target: Target, out: &Path) -> Result<()> {
    let parts = with_workers(cfg.workers, || {
        let inputs = load_inputs(cfg)?;
        inputs
            .surfaces
            .iter()
            .map(|s| {
                let wf = backtest_stage(cfg, s, target)?;
                for g in &wf.gaps {
                    eprintln!("gap: {} window ending {}: {}", g.model_id, g.train_end_year, g.message);
                }
                let mut buf = Vec::new();
                wf.write_csv(&mut buf)?;
                Ok(buf)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    write_file(out, &csv_concat(parts))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn weights(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let vectors = with_workers(cfg.workers, || {
        let inputs = load_inputs(cfg)?;
        let mut all = Vec::new();
        for s in &inputs.surfaces {
            let wf = backtest_stage(cfg, s, Target::Validation)?;
            let (w, _) = weights_stage(cfg, &wf, s)?;
            all.extend(w);
        }
        Ok(all)
    })?;
    let mut buf = Vec::new();
    write_weights_csv(&mut buf, &vectors)?;
    write_file(out, &buf)?;
    for v in &vectors {
        let cells: Vec<String> = v
            .models
            .iter()
            .zip(&v.weights)
            .map(|(m, w)| format!("{}={:.4}", m.label(), w))
            .collect();
        println!("{:<8} {:<7} {}", v.scheme.title(), v.gender.as_str(), cells.join(" "));
    }
    Ok(())
}

fn combine_cmd(cfg: &PipelineConfig, weights_path: &Path, schemes: &[String], out: &Path) -> Result<()> {
    let file = std::fs::File::open(weights_path).map_err(|e| Error::Data(format!("{}: {e}", weights_path.display())))?;
    let vectors = read_weights_csv(file)?;
    let wanted: Vec<Scheme> = schemes.iter().map(|s| s.parse()).collect::<Result<_>>()?;
    let parts = with_workers(cfg.workers, || {
        let inputs = load_inputs(cfg)?;
        let mut parts = Vec::new();
        for s in &inputs.surfaces {
            let test = backtest_stage(cfg, s, Target::Test)?;
            for v in vectors
                .iter()
                .filter(|v| v.gender == s.gender() && (wanted.is_empty() || wanted.contains(&v.scheme)))
            {
                let c = combine(&test, v, cfg.gap_tolerant)?;
                let mut buf = Vec::new();
                c.write_csv(&mut buf, parts.is_empty())?;
                parts.push(buf);
            }
        }
        Ok(parts)
    })?;
    if parts.is_empty() {
        return Err(Error::Config("no weight vectors match the requested schemes and genders".into()));
    }
    write_file(out, &parts.concat())?;
    println!("wrote {}", out.display());
    Ok(())
}

fn evaluate(cfg: &PipelineConfig) -> Result<()> {
    let run = pipeline::execute(cfg)?;
    println!("{:<8} {:<7} {:>12} {:>12} {:>14}", "scheme", "gender", "mean MSE", "mean MAE", "mean IS x100");
    for g in &run.genders {
        for s in Scheme::ALL {
            let p = &g.point[&s];
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            println!(
                "{:<8} {:<7} {:>12.6} {:>12.6} {:>14.4}",
                s.title(),
                g.gender.as_str(),
                mean(&p.mse),
                mean(&p.mae),
                mean(&g.interval[&s])
            );
        }
    }
    Ok(())
}

fn report(cfg: &mut PipelineConfig, out: Option<PathBuf>) -> Result<()> {
    if let Some(o) = out {
        cfg.output = o;
    }
    pipeline::run_pipeline(cfg)?;
    println!("report written to {}", cfg.output.display());
    Ok(())
}

fn read_allocation(path: &Path) -> Result<Allocation> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let values = text
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| Error::Data(format!("invalid allocation entry '{t}'"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(Allocation(values))
}

fn shapley_of(game: &Game, samples: Option<usize>, seed: u64) -> Result<Allocation> {
    match samples {
        Some(m) => Ok(Allocation(permutation_shapley(game, m, seed)?.estimates)),
        None => exact_shapley(game),
    }
}

fn audit(game: &Path, allocation: Option<&Path>, peer: Option<&Path>, samples: Option<usize>, seed: u64, tol: f64) -> Result<()> {
    let v = Game::load(game)?;
    let alloc = match allocation {
        Some(p) => read_allocation(p)?,
        None => shapley_of(&v, samples, seed)?,
    };
    let peer_parts = match peer {
        Some(p) => {
            if allocation.is_some() {
                return Err(Error::Config("--peer applies to Shapley allocations only".into()));
            }
            let w = Game::load(p)?;
            let w_alloc = shapley_of(&w, samples, seed)?;
            let sum_alloc = shapley_of(&v.sum(&w)?, samples, seed)?;
            Some((w, w_alloc, sum_alloc))
        }
        None => None,
    };
    let report = audit_allocation(
        &v,
        &alloc,
        peer_parts.as_ref().map(|(w, a, c)| AdditivityPeer {
            game: w,
            allocation: a,
            combined_allocation: c,
        }),
    )?;
    let verdict = |ok: bool| if ok { "PASS" } else { "FAIL" };
    let values: Vec<String> = alloc.values().iter().map(|x| fmt_num(*x)).collect();
    println!("allocation: {}", values.join(" "));
    println!(
        "efficiency  {}  residual {}",
        verdict(report.efficient),
        fmt_num(report.efficiency_residual)
    );
    println!(
        "symmetry    {}  {} symmetric pair(s), max deviation {}",
        verdict(report.symmetric(tol)),
        report.symmetric_pairs.len(),
        fmt_num(report.max_symmetry_deviation())
    );
    println!(
        "dummy       {}  {} dummy player(s), max |allocation| {}",
        verdict(report.dummy(tol)),
        report.dummy_players.len(),
        fmt_num(report.max_dummy_allocation())
    );
    match report.additivity_residual {
        Some(r) => println!("additivity  {}  residual {}", verdict(report.additive(tol)), fmt_num(r)),
        None => println!("additivity  SKIP  no --peer game"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest { data, first_year, last_year, out } => ingest(&data, first_year, last_year, &out),
        Command::Synth { out, first_year, last_year, seed, drift, sigma, noise } => {
            synth(&out, YearSpan::new(first_year, last_year), seed, drift, sigma, noise)
        }
        Command::Backtest { config, target, out } => {
            let target = match target {
                TargetArg::Validation => Target::Validation,
                TargetArg::Test => Target::Test,
            };
            backtest(&config.resolve()?, target, &out)
        }
        Command::Weights { config, out } => weights(&config.resolve()?, &out),
        Command::Combine { config, weights, scheme, out } => combine_cmd(&config.resolve()?, &weights, &scheme, &out),
        Command::Evaluate { config } => evaluate(&config.resolve()?),
        Command::Report { config, out } => report(&mut config.resolve()?, out),
        Command::AuditAxioms { game, allocation, peer, samples, seed, tol } => {
            audit(&game, allocation.as_deref(), peer.as_deref(), samples, seed, tol)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

