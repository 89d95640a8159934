use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use recapture::em::{fit_context, EStepMode, EmConfig, FitResult};
use recapture::io::{
    ingest, read_counts, write_events, write_subjects, Comparison, CountRow, FitSection,
    IngestConfig, Inputs, ModelRow, Report, SimulationSection,
};
use recapture::likelihood::LikContext;
use recapture::model::{Behavior, Dataset, ModelName};
use recapture::population::{ht_from_weights, marginal_weights, Weighting};
use recapture::selection::{
    chao_lower_bound, grid_cells, grid_search, lrt, m0_closed_form, submodel_spec, CountSummary,
};
use recapture::simulator::{simulate, SimConfig};

#[derive(Parser)]
#[command(
    name = "recapture",
    version,
    about = "Continuous-time capture-recapture population size estimation"
)]
struct Cli {
    /// Worker threads used inside fits and grids (falls back to RECAPTURE_THREADS).
    #[arg(long, global = true, env = "RECAPTURE_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one model and estimate the population size.
    Fit(FitArgs),
    /// Fit a model over a grid of behavioral-response settings.
    Grid(FitArgs),
    /// Count-based estimators and a sequence of nested models.
    Compare(CompareArgs),
    /// Generate data from the full model.
    Simulate(SimulateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightArg {
    Marginal,
    PlugIn,
}

#[derive(Clone, Copy, ValueEnum)]
enum EStepArg {
    Exact,
    PlugIn,
}

#[derive(Args)]
struct DataArgs {
    /// CSV with header `subject_id,time`.
    #[arg(long)]
    events: Option<PathBuf>,
    /// CSV with `subject_id` and covariate columns.
    #[arg(long)]
    subjects: Option<PathBuf>,
    /// TOML file with tau, time origin, covariate rules and EM settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Observation window length (overrides the config).
    #[arg(long)]
    tau: Option<f64>,
    /// Drop captures after this time before fitting.
    #[arg(long)]
    truncate_at: Option<f64>,
    /// Recorded in the report; the fit itself is deterministic.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for report.json and report.txt.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Model name from the lattice below hotb, e.g. `hotb`, `htb`, `0`.
    #[arg(long, default_value = "hotb")]
    model: String,
    /// Capture number that switches the behavioral response on (repeatable for grids).
    #[arg(long)]
    c1: Vec<u32>,
    /// Capture number that switches it off, or `inf` (repeatable for grids).
    #[arg(long, value_parser = parse_c2)]
    c2: Vec<Option<u32>>,
    /// Memory length in time units, or `inf` (repeatable for grids).
    #[arg(long = "delta-b", value_parser = parse_delta)]
    delta_b: Vec<Option<f64>>,
    #[arg(long)]
    catchable_fraction: Option<f64>,
    #[arg(long, value_enum, default_value = "marginal")]
    weighting: WeightArg,
    #[arg(long, value_enum)]
    estep: Option<EStepArg>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Frequency table with header `captures,subjects` instead of events.
    #[arg(long)]
    counts: Option<PathBuf>,
    /// Models to fit; the first is the reference for the tests.
    #[arg(long, value_delimiter = ',', default_value = "hotb,otb,htb,hob,hot")]
    models: Vec<String>,
    #[arg(long)]
    c1: Option<u32>,
    #[arg(long, value_parser = parse_c2)]
    c2: Option<Option<u32>>,
    #[arg(long = "delta-b", value_parser = parse_delta)]
    delta_b: Option<Option<f64>>,
}

#[derive(Args)]
struct SimulateArgs {
    /// TOML simulation settings.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the settings.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

fn parse_c2(s: &str) -> std::result::Result<Option<u32>, String> {
    if s.eq_ignore_ascii_case("inf") {
        Ok(None)
    } else {
        s.parse()
            .map(Some)
            .map_err(|_| format!("expected an integer or `inf`, got {s}"))
    }
}

fn parse_delta(s: &str) -> std::result::Result<Option<f64>, String> {
    if s.eq_ignore_ascii_case("inf") {
        Ok(None)
    } else {
        s.parse()
            .map(Some)
            .map_err(|_| format!("expected a number or `inf`, got {s}"))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
        {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Fit(a) => run_fit(a, cli.threads),
        Command::Grid(a) => run_grid(a, cli.threads),
        Command::Compare(a) => run_compare(a, cli.threads),
        Command::Simulate(a) => run_simulate(a, cli.threads),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn path_str(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

struct Loaded {
    data: Dataset,
    config: IngestConfig,
    inputs: Inputs,
    warnings: Vec<String>,
}

fn load(a: &DataArgs, threads: Option<usize>) -> Result<Loaded> {
    let events = a.events.as_ref().context("--events is required")?;
    let mut config = match &a.config {
        Some(p) => IngestConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => IngestConfig::new(a.tau.context("either --config or --tau is required")?),
    };
    if let Some(t) = a.tau {
        config.tau = t;
    }
    let ing = ingest(events, a.subjects.as_deref(), &config)?;
    let mut data = ing.dataset;
    if let Some(t) = a.truncate_at {
        data = data.truncate(t)?;
    }
    let inputs = Inputs {
        events: path_str(&a.events),
        subjects: path_str(&a.subjects),
        counts: None,
        config: Some(config.clone()),
        truncate_at: a.truncate_at,
        seed: a.seed,
        threads,
    };
    Ok(Loaded {
        data,
        config,
        inputs,
        warnings: ing.warnings,
    })
}

fn em_config(config: &IngestConfig, estep: Option<EStepArg>) -> EmConfig {
    let mut em = config.em.clone().unwrap_or_default();
    if let Some(e) = estep {
        em.estep = match e {
            EStepArg::Exact => EStepMode::Exact,
            EStepArg::PlugIn => EStepMode::PlugIn,
        };
    }
    em
}

fn single<T: Copy>(v: &[T], flag: &str) -> Result<Option<T>> {
    match v {
        [] => Ok(None),
        [x] => Ok(Some(*x)),
        _ => bail!("{flag} takes one value for this command"),
    }
}

fn write_report(out: &Path, report: &Report) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("report.json"), report.to_json()?)?;
    let text = report.render_text();
    std::fs::write(out.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn run_fit(a: FitArgs, threads: Option<usize>) -> Result<bool> {
    let name: ModelName = a.model.parse()?;
    let loaded = load(&a.data, threads)?;
    let c1 = single(&a.c1, "--c1")?;
    let c2 = single(&a.c2, "--c2")?.flatten();
    let delta_b = single(&a.delta_b, "--delta-b")?.flatten();
    let behavior = match (c1, c2, delta_b) {
        (None, None, None) => None,
        (c1, c2, d) => Some(Behavior::new(c1.unwrap_or(1), c2, d)?),
    };
    if behavior.is_some() && !name.b {
        bail!("behavioral settings given for {name}, which has no behavioral effect");
    }
    let spec = submodel_spec(&loaded.data, name, behavior);
    let ctx = LikContext::new(&loaded.data, &spec)?;
    let em = em_config(&loaded.config, a.estep);
    let fit = fit_context(&ctx, &em, None)?;
    let weighting = match a.weighting {
        WeightArg::Marginal => Weighting::Marginal,
        WeightArg::PlugIn => Weighting::PlugIn,
    };
    let mut report = Report::new("fit", loaded.inputs, now());
    report.warnings = loaded.warnings;
    report.fit = Some(FitSection::new(&fit, &ctx, weighting, a.catchable_fraction));
    write_report(&a.data.out, &report)?;
    Ok(fit.converged)
}

fn run_grid(a: FitArgs, threads: Option<usize>) -> Result<bool> {
    let name: ModelName = a.model.parse()?;
    if !name.b {
        bail!("grid search needs a model with a behavioral effect, got {name}");
    }
    let loaded = load(&a.data, threads)?;
    let or_default = |v: &[u32]| if v.is_empty() { vec![1] } else { v.to_vec() };
    let c2 = if a.c2.is_empty() {
        vec![None]
    } else {
        a.c2.clone()
    };
    let delta = if a.delta_b.is_empty() {
        vec![None]
    } else {
        a.delta_b.clone()
    };
    let cells = grid_cells(&or_default(&a.c1), &c2, &delta);
    let spec = submodel_spec(&loaded.data, name, None);
    let mut em = em_config(&loaded.config, a.estep);
    em.information = false;
    let grid = grid_search(&loaded.data, &spec, &cells, &em)?;
    let all_converged = grid.rows.iter().all(|r| r.skipped.is_some() || r.converged);
    let mut report = Report::new("grid", loaded.inputs, now());
    report.warnings = loaded.warnings;
    report.grid = Some(grid);
    write_report(&a.data.out, &report)?;
    Ok(all_converged)
}

fn count_rows(counts: &CountSummary) -> Result<Vec<CountRow>> {
    let chao = chao_lower_bound(counts)?;
    let mut rows = vec![CountRow {
        estimator: "chao".into(),
        n_hat: chao.n_hat,
        se: chao.se,
        se_formula: "asymptotic variance of the lower bound".into(),
    }];
    match m0_closed_form(counts) {
        Ok(m0) => rows.push(CountRow {
            estimator: "m0".into(),
            n_hat: m0.n_hat,
            se: m0.se,
            se_formula: "binomial plus delta method".into(),
        }),
        Err(e) => eprintln!("warning: M0 estimate unavailable: {e}"),
    }
    Ok(rows)
}

fn run_compare(a: CompareArgs, threads: Option<usize>) -> Result<bool> {
    if let Some(p) = &a.counts {
        if a.data.events.is_some() {
            bail!("give either --counts or --events, not both");
        }
        let f = std::fs::File::open(p).with_context(|| format!("opening {}", p.display()))?;
        let counts = read_counts(f)?;
        let inputs = Inputs {
            counts: Some(p.display().to_string()),
            threads,
            seed: a.data.seed,
            ..Inputs::default()
        };
        let mut report = Report::new("compare", inputs, now());
        report.comparison = Some(Comparison {
            count_estimators: count_rows(&counts)?,
            models: Vec::new(),
        });
        write_report(&a.data.out, &report)?;
        return Ok(true);
    }
    let loaded = load(&a.data, threads)?;
    let behavior = match (a.c1, a.c2.flatten(), a.delta_b.flatten()) {
        (None, None, None) => None,
        (c1, c2, d) => Some(Behavior::new(c1.unwrap_or(1), c2, d)?),
    };
    let names: Vec<ModelName> = a
        .models
        .iter()
        .map(|m| m.parse())
        .collect::<recapture::Result<_>>()?;
    if names.is_empty() {
        bail!("--models is empty");
    }
    let mut em = em_config(&loaded.config, None);
    em.information = false;
    let mut fits: Vec<(FitResult, LikContext)> = Vec::new();
    for &n in &names {
        let ctx = LikContext::new(&loaded.data, &submodel_spec(&loaded.data, n, behavior))?;
        let fit = fit_context(&ctx, &em, None).with_context(|| format!("fitting {n}"))?;
        fits.push((fit, ctx));
    }
    // The nonparametric baseline adds one free jump per distinct time beyond Omega(tau).
    let n_params = |f: &FitResult| {
        let shape = if f.spec.name().t {
            f.times.len().saturating_sub(1)
        } else {
            0
        };
        f.coordinates.len() + usize::from(f.alpha_capped) + shape
    };
    let (reference, _) = &fits[0];
    let mut models = Vec::new();
    let mut warnings = loaded.warnings;
    for (fit, ctx) in &fits {
        let n_hat = ctx
            .gammas(&fit.params.beta)
            .and_then(|g| marginal_weights(&g, fit.params.omega_tau(), fit.params.alpha()))
            .and_then(|w| ht_from_weights(&w))
            .ok();
        let df = n_params(reference)
            .checked_sub(n_params(fit))
            .filter(|d| *d > 0);
        let test = match df {
            Some(d) if fit.spec.name().is_nested_in(&reference.spec.name()) => {
                match lrt(reference, fit, d as u32) {
                    Ok(t) => Some(t),
                    Err(e) => {
                        warnings.push(format!("{}: {e}", fit.spec.name()));
                        None
                    }
                }
            }
            _ => None,
        };
        models.push(ModelRow {
            model: fit.spec.name().to_string(),
            loglik: fit.loglik,
            n_params: n_params(fit),
            converged: fit.converged,
            n_hat,
            lrt: test,
            df: test.and(df.map(|d| d as u32)),
        });
    }
    let counts = CountSummary::from_dataset(&loaded.data)?;
    let mut report = Report::new("compare", loaded.inputs, now());
    report.warnings = warnings;
    report.comparison = Some(Comparison {
        count_estimators: count_rows(&counts)?,
        models,
    });
    write_report(&a.data.out, &report)?;
    Ok(fits.iter().all(|(f, _)| f.converged))
}

fn run_simulate(a: SimulateArgs, threads: Option<usize>) -> Result<bool> {
    let text = std::fs::read_to_string(&a.config)
        .with_context(|| format!("reading {}", a.config.display()))?;
    let mut cfg: SimConfig =
        toml::from_str(&text).with_context(|| format!("parsing {}", a.config.display()))?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let out = simulate(&cfg)?;
    std::fs::create_dir_all(&a.out)?;
    let events = a.out.join("events.csv");
    let subjects = a.out.join("subjects.csv");
    let config = a.out.join("config.toml");
    write_events(&out.observed, std::fs::File::create(&events)?)?;
    write_subjects(&out.observed, std::fs::File::create(&subjects)?)?;
    let mut ingest_cfg = IngestConfig::new(cfg.tau);
    ingest_cfg.simulation = Some(cfg.clone());
    std::fs::write(&config, ingest_cfg.to_toml_string()?)?;
    let inputs = Inputs {
        seed: Some(cfg.seed),
        threads,
        ..Inputs::default()
    };
    let mut report = Report::new("simulate", inputs, now());
    report.simulation = Some(SimulationSection {
        n_true: cfg.n_true,
        n_observed: out.observed.len(),
        config: cfg,
        files: [events, subjects, config]
            .iter()
            .map(|p| p.display().to_string())
            .collect(),
    });
    write_report(&a.out, &report)?;
    Ok(true)
}
