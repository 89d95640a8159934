//! Versioned JSON report and its plain-text rendering.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::em::{Coordinate, FitResult};
use crate::likelihood::LikContext;
use crate::model::ModelSpec;
use crate::population::{estimate_population, PopEstimate, Weighting};
use crate::selection::{wald, GridResult, TestResult};
use crate::simulator::SimConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRow {
    pub name: String,
    pub estimate: f64,
    pub se: Option<f64>,
    /// Value under the Wald null hypothesis (`0` for coefficients, `1` for
    /// the behavioral factor).
    pub null_value: Option<f64>,
    pub z: Option<f64>,
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub time: f64,
    pub jump: f64,
    pub cumulative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSection {
    pub model: String,
    pub spec: ModelSpec,
    pub n_observed: usize,
    pub total_captures: f64,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub alpha_capped: bool,
    pub parameters: Vec<ParamRow>,
    pub population: Option<PopEstimate>,
    pub baseline: Vec<BaselineRow>,
    pub warnings: Vec<String>,
}

impl FitSection {
    pub fn new(
        fit: &FitResult,
        ctx: &LikContext,
        weighting: Weighting,
        catchable_fraction: Option<f64>,
    ) -> Self {
        let mut warnings = fit.warnings.clone();
        let cov = fit.covariance();
        if let Err(e) = &cov {
            warnings.push(format!("standard errors unavailable: {e}"));
        }
        let parameters = fit
            .coordinates
            .iter()
            .enumerate()
            .map(|(j, c)| {
                let se = cov
                    .as_ref()
                    .ok()
                    .map(|m| m[j][j].sqrt())
                    .filter(|s| s.is_finite());
                let null_value = match c {
                    Coordinate::Beta(_) => Some(0.0),
                    Coordinate::Phi => Some(1.0),
                    _ => None,
                };
                let test = se
                    .zip(null_value)
                    .map(|(s, v)| wald(fit.estimates[j] - v, s));
                ParamRow {
                    name: fit.labels[j].clone(),
                    estimate: fit.estimates[j],
                    se,
                    null_value,
                    z: test.map(|t| t.statistic),
                    p_value: test.map(|t| t.p_value),
                }
            })
            .collect();
        let population = match estimate_population(fit, ctx, weighting, catchable_fraction) {
            Ok(p) => Some(p),
            Err(e) => {
                warnings.push(format!("population size unavailable: {e}"));
                None
            }
        };
        let mut acc = 0.0;
        let baseline = fit
            .times
            .iter()
            .zip(&fit.params.theta)
            .map(|(&time, &jump)| {
                acc += jump;
                BaselineRow {
                    time,
                    jump,
                    cumulative: acc,
                }
            })
            .collect();
        Self {
            model: fit.spec.name().to_string(),
            spec: fit.spec.clone(),
            n_observed: fit.n_observed,
            total_captures: ctx.total_captures,
            loglik: fit.loglik,
            converged: fit.converged,
            iterations: fit.iterations,
            alpha_capped: fit.alpha_capped,
            parameters,
            population,
            baseline,
            warnings,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountRow {
    pub estimator: String,
    pub n_hat: f64,
    pub se: f64,
    /// How the standard error was computed.
    pub se_formula: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRow {
    pub model: String,
    pub loglik: f64,
    pub n_params: usize,
    pub converged: bool,
    pub n_hat: Option<f64>,
    /// Test against the first (largest) model.
    pub lrt: Option<TestResult>,
    pub df: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Comparison {
    pub count_estimators: Vec<CountRow>,
    pub models: Vec<ModelRow>,
}

/// Paths and options the run was started with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Inputs {
    pub events: Option<String>,
    pub subjects: Option<String>,
    pub counts: Option<String>,
    pub config: Option<crate::io::IngestConfig>,
    pub truncate_at: Option<f64>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSection {
    pub config: SimConfig,
    pub n_true: usize,
    pub n_observed: usize,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: u32,
    pub tool_version: String,
    /// The only field that differs between identical runs.
    pub generated_at: String,
    pub command: String,
    pub inputs: Inputs,
    pub fit: Option<FitSection>,
    pub grid: Option<GridResult>,
    pub comparison: Option<Comparison>,
    pub simulation: Option<SimulationSection>,
    pub warnings: Vec<String>,
}

impl Report {
    pub fn new(command: &str, inputs: Inputs, generated_at: String) -> Self {
        Self {
            schema: SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            generated_at,
            command: command.to_string(),
            inputs,
            fit: None,
            grid: None,
            comparison: None,
            simulation: None,
            warnings: Vec::new(),
        }
    }

    pub fn to_json(&self) -> crate::Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> crate::Result<Self> {
        let r: Self = serde_json::from_str(s)?;
        if r.schema != SCHEMA_VERSION {
            return Err(crate::Error::Input(format!(
                "unsupported report schema {}",
                r.schema
            )));
        }
        Ok(r)
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "recapture {} ({})", self.command, self.tool_version);
        if let Some(f) = &self.fit {
            render_fit(&mut out, f);
        }
        if let Some(g) = &self.grid {
            render_grid(&mut out, g);
        }
        if let Some(c) = &self.comparison {
            render_comparison(&mut out, c);
        }
        if let Some(s) = &self.simulation {
            let _ = writeln!(
                out,
                "\nSimulated {} subjects, {} captured (seed {})",
                s.n_true, s.n_observed, s.config.seed
            );
            for f in &s.files {
                let _ = writeln!(out, "  wrote {f}");
            }
        }
        if !self.warnings.is_empty() {
            let _ = writeln!(out, "\nWarnings:");
            for w in &self.warnings {
                let _ = writeln!(out, "  - {w}");
            }
        }
        out
    }
}

fn opt(v: Option<f64>, prec: usize) -> String {
    v.map_or("-".into(), |x| format!("{x:.prec$}"))
}

fn render_fit(out: &mut String, f: &FitSection) {
    let b = f.spec.behavior.map_or(String::new(), |b| format!(" [{b}]"));
    let _ = writeln!(out, "\nModel {}{b}", f.model);
    let _ = writeln!(
        out,
        "  subjects {}  captures {}  log-likelihood {:.4}  iterations {}  converged {}",
        f.n_observed, f.total_captures, f.loglik, f.iterations, f.converged
    );
    let _ = writeln!(
        out,
        "\n  {:<28}{:>14}{:>12}{:>10}{:>12}",
        "parameter", "estimate", "std.err", "z", "p"
    );
    for p in &f.parameters {
        let _ = writeln!(
            out,
            "  {:<28}{:>14.6}{:>12}{:>10}{:>12}",
            p.name,
            p.estimate,
            opt(p.se, 5),
            opt(p.z, 2),
            p.p_value.map_or("-".into(), |v| format!("{v:.3e}"))
        );
    }
    if let Some(p) = &f.population {
        let _ = writeln!(
            out,
            "\n  N_hat {:.1}  se {:.1}  95% CI [{:.1}, {:.1}]  ({:?} weights; other weighting gives {:.1})",
            p.n_hat, p.se, p.ci95.0, p.ci95.1, p.weighting, p.n_hat_alternative
        );
        let _ = writeln!(
            out,
            "  variance: binomial {:.4e} + parameter {:.4e}",
            p.var_binomial, p.var_param
        );
        if let Some(s) = p.scaled_estimate {
            let _ = writeln!(out, "  scaled by catchable fraction: {s:.1}");
        }
    }
    if let Some(last) = f.baseline.last() {
        let _ = writeln!(
            out,
            "  baseline: {} jumps, Omega(tau) = {:.6}",
            f.baseline.len(),
            last.cumulative
        );
    }
    for w in &f.warnings {
        let _ = writeln!(out, "  warning: {w}");
    }
}

fn render_grid(out: &mut String, g: &GridResult) {
    let _ = writeln!(out, "\nGrid over the behavioral response ({})", g.model);
    let _ = writeln!(
        out,
        "  {:>4}{:>6}{:>10}{:>16}{:>14}{:>14}  note",
        "c1", "c2", "delta_b", "loglik", "loglik-first", "N_hat"
    );
    let best = g.best().map(|r| r.cell);
    for r in &g.rows {
        let note = match (&r.skipped, Some(r.cell) == best, r.converged) {
            (Some(s), _, _) => format!("skipped: {s}"),
            (None, true, _) => "best".into(),
            (None, false, false) => "not converged".into(),
            _ => String::new(),
        };
        let _ = writeln!(
            out,
            "  {:>4}{:>6}{:>10}{:>16}{:>14}{:>14}  {note}",
            r.cell.c1,
            r.cell.c2.map_or("inf".into(), |c| c.to_string()),
            r.cell.delta_b.map_or("inf".into(), |d| d.to_string()),
            opt(r.loglik, 4),
            opt(r.delta_loglik, 4),
            opt(r.n_hat, 1),
        );
    }
}

fn render_comparison(out: &mut String, c: &Comparison) {
    if !c.count_estimators.is_empty() {
        let _ = writeln!(out, "\nCount-based estimators");
        for r in &c.count_estimators {
            let _ = writeln!(
                out,
                "  {:<10} N_hat {:>16.1}  se {:>12.1}  ({})",
                r.estimator, r.n_hat, r.se, r.se_formula
            );
        }
    }
    if !c.models.is_empty() {
        let _ = writeln!(out, "\nNested models (tests against the first row)");
        for m in &c.models {
            let test = m.lrt.map_or(String::new(), |t| {
                format!(
                    "  LRT {:.3} on {} df, p {:.3e}",
                    t.statistic,
                    m.df.unwrap_or(0),
                    t.p_value
                )
            });
            let _ = writeln!(
                out,
                "  {:<8} loglik {:>16.4}  params {:>3}  N_hat {:>14}{test}",
                m.model,
                m.loglik,
                m.n_params,
                opt(m.n_hat, 1)
            );
        }
    }
}
