//! Submodel fitting, behavioral grid search, nested-model tests and
//! count-only estimators.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::erf::erfc;

use crate::em::{fit_context, EmConfig, FitResult};
use crate::error::{input, Error, Result};
use crate::likelihood::LikContext;
use crate::model::{Behavior, Dataset, ModelName, ModelSpec};
use crate::par;
use crate::population::{ht_from_weights, marginal_weights};

/// Frequencies `f_j` of subjects captured exactly `j` times, `j = 1..`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountSummary {
    /// `f[j - 1]` is `f_j`.
    pub f: Vec<u64>,
}

impl CountSummary {
    pub fn new(f: Vec<u64>) -> Result<Self> {
        let c = Self { f };
        if c.n() == 0 {
            return input("count summary has no observed subjects");
        }
        Ok(c)
    }

    pub fn from_dataset(data: &Dataset) -> Result<Self> {
        let mut f = Vec::new();
        for h in &data.histories {
            let j = h.n_captures();
            if f.len() < j {
                f.resize(j, 0);
            }
            f[j - 1] += 1;
        }
        Self::new(f)
    }

    pub fn f(&self, j: usize) -> u64 {
        if j == 0 {
            0
        } else {
            self.f.get(j - 1).copied().unwrap_or(0)
        }
    }

    pub fn n(&self) -> u64 {
        self.f.iter().sum()
    }

    /// Total number of captures.
    pub fn k(&self) -> u64 {
        self.f
            .iter()
            .enumerate()
            .map(|(j, c)| (j as u64 + 1) * c)
            .sum()
    }
}

/// Fits `name` with every covariate of `data` and the given behavioral
/// response (classic when `None`).
pub fn fit_submodel(
    data: &Dataset,
    name: ModelName,
    behavior: Option<Behavior>,
    cfg: &EmConfig,
) -> Result<FitResult> {
    let ctx = LikContext::new(data, &submodel_spec(data, name, behavior))?;
    fit_context(&ctx, cfg, None)
}

pub fn submodel_spec(data: &Dataset, name: ModelName, behavior: Option<Behavior>) -> ModelSpec {
    let mut spec = ModelSpec::from_name(name, data.tau, data.covariate_names.clone());
    if name.b {
        if let Some(b) = behavior {
            spec.behavior = Some(b);
        }
    }
    spec
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub c1: u32,
    pub c2: Option<u32>,
    pub delta_b: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub cell: GridCell,
    pub loglik: Option<f64>,
    /// `loglik - loglik(first fitted row)`.
    pub delta_loglik: Option<f64>,
    pub n_hat: Option<f64>,
    pub converged: bool,
    /// Why the cell was not fitted, if it was not.
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub model: String,
    pub rows: Vec<GridRow>,
}

impl GridResult {
    /// Row with the largest log-likelihood among converged fits.
    pub fn best(&self) -> Option<&GridRow> {
        self.rows
            .iter()
            .filter(|r| r.converged && r.loglik.is_some())
            .max_by(|a, b| a.loglik.unwrap().total_cmp(&b.loglik.unwrap()))
    }
}

/// Cross product of the three sets, in the order given.
pub fn grid_cells(
    c1_set: &[u32],
    c2_set: &[Option<u32>],
    delta_set: &[Option<f64>],
) -> Vec<GridCell> {
    let mut cells = Vec::new();
    for &c1 in c1_set {
        for &c2 in c2_set {
            for &delta_b in delta_set {
                cells.push(GridCell { c1, c2, delta_b });
            }
        }
    }
    cells
}

/// Fits `base` once per behavioral cell. Cells that are invalid or not
/// identifiable on `data` are recorded but not fitted.
pub fn grid_search(
    data: &Dataset,
    base: &ModelSpec,
    cells: &[GridCell],
    cfg: &EmConfig,
) -> Result<GridResult> {
    if cells.is_empty() {
        return input("empty grid");
    }
    if base.behavior.is_none() {
        return input("grid search needs a model with a behavioral effect");
    }
    let run = |i: usize| -> GridRow {
        let cell = cells[i];
        let skip = |why: String| GridRow {
            cell,
            loglik: None,
            delta_loglik: None,
            n_hat: None,
            converged: false,
            skipped: Some(why),
        };
        let b = match Behavior::new(cell.c1, cell.c2, cell.delta_b) {
            Ok(b) => b,
            Err(e) => return skip(e.to_string()),
        };
        let spec = base.clone().with_behavior(b);
        let ctx = match LikContext::new(data, &spec) {
            Ok(c) => c,
            Err(e) => return skip(e.to_string()),
        };
        if let Err(e) = ctx.check_identifiable() {
            return skip(e.to_string());
        }
        match fit_context(&ctx, cfg, None) {
            Ok(f) => {
                let n_hat = ctx
                    .gammas(&f.params.beta)
                    .and_then(|g| marginal_weights(&g, f.params.omega_tau(), f.params.alpha()))
                    .and_then(|w| ht_from_weights(&w))
                    .ok();
                GridRow {
                    cell,
                    loglik: Some(f.loglik),
                    delta_loglik: None,
                    n_hat,
                    converged: f.converged,
                    skipped: None,
                }
            }
            Err(e) => skip(e.to_string()),
        }
    };
    let mut rows = par::map_tasks(cells.len(), run);
    if let Some(reference) = rows.iter().find_map(|r| r.loglik) {
        for r in &mut rows {
            r.delta_loglik = r.loglik.map(|l| l - reference);
        }
    }
    Ok(GridResult {
        model: base.name().to_string(),
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Likelihood-ratio test of `nested` against `full` on `df` degrees of
/// freedom.
pub fn lrt(full: &FitResult, nested: &FitResult, df: u32) -> Result<TestResult> {
    if !nested.spec.name().is_nested_in(&full.spec.name()) {
        return input(format!(
            "{} is not nested in {}",
            nested.spec.name(),
            full.spec.name()
        ));
    }
    lrt_from_logliks(full.loglik, nested.loglik, df)
}

pub fn lrt_from_logliks(full: f64, nested: f64, df: u32) -> Result<TestResult> {
    if df == 0 {
        return input("df must be at least 1");
    }
    let stat = 2.0 * (full - nested);
    // Both fits stop at a relative tolerance; tiny negative gaps are noise.
    let slack = 1e-7 * full.abs().max(1.0);
    if stat < -slack || stat.is_nan() {
        return Err(Error::Domain(format!(
            "nested model fits better by {:.6}: the larger fit did not reach its maximum",
            -stat / 2.0
        )));
    }
    let statistic = stat.max(0.0);
    let chi = ChiSquared::new(df as f64).map_err(|e| Error::Domain(e.to_string()))?;
    Ok(TestResult {
        statistic,
        p_value: chi.sf(statistic),
    })
}

/// `z = estimate / se` for the coordinate labelled `label`, with a
/// two-sided normal p-value.
pub fn wald_test(fit: &FitResult, label: &str) -> Result<TestResult> {
    let j = fit
        .position(label)
        .ok_or_else(|| Error::Input(format!("no estimated coordinate {label}")))?;
    let se = fit.standard_errors()?[j];
    if !(se > 0.0) {
        return Err(Error::Evaluation(format!("no standard error for {label}")));
    }
    Ok(wald(fit.estimates[j], se))
}

pub fn wald(estimate: f64, se: f64) -> TestResult {
    let z = estimate / se;
    TestResult {
        statistic: z,
        p_value: erfc(z.abs() / std::f64::consts::SQRT_2),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountEstimate {
    pub n_hat: f64,
    pub se: f64,
    /// `Omega(tau)` for the null model; absent for the lower bound.
    pub mu_hat: Option<f64>,
}

/// Lower bound `n + f1^2 / (2 f2)`, or `n + f1 (f1 - 1) / 2` when `f2 = 0`.
pub fn chao_lower_bound(counts: &CountSummary) -> Result<CountEstimate> {
    let n = counts.n() as f64;
    if n == 0.0 {
        return input("empty counts");
    }
    let f1 = counts.f(1) as f64;
    let f2 = counts.f(2) as f64;
    let (n_hat, var) = if f2 > 0.0 {
        let r = f1 / f2;
        (
            n + f1 * f1 / (2.0 * f2),
            f2 * (r.powi(4) / 4.0 + r.powi(3) + r * r / 2.0),
        )
    } else {
        let n_hat = n + f1 * (f1 - 1.0) / 2.0;
        let var = f1 * (f1 - 1.0) / 2.0 + f1 * (2.0 * f1 - 1.0).powi(2) / 4.0
            - f1.powi(4) / (4.0 * n_hat);
        (n_hat, var.max(0.0))
    };
    Ok(CountEstimate {
        n_hat,
        se: var.sqrt(),
        mu_hat: None,
    })
}

/// Constant-rate model from counts: solves `(1 - e^-mu) / mu = n / K`,
/// `N_hat = K / mu`. The standard error adds the binomial term to the
/// delta-method term of the conditional likelihood.
pub fn m0_closed_form(counts: &CountSummary) -> Result<CountEstimate> {
    let n = counts.n() as f64;
    let k = counts.k() as f64;
    if n == 0.0 {
        return input("empty counts");
    }
    if k <= n {
        return Err(Error::Degenerate(
            "no recaptures: the estimate diverges".into(),
        ));
    }
    let r = n / k;
    let mu = m0_root(r);
    let w = -(-mu).exp_m1();
    let n_hat = n / w;
    let var_binomial = n * (1.0 - w) / (w * w);
    let em1 = mu.exp_m1();
    let info = k / (mu * mu) - n * mu.exp() / (em1 * em1);
    let dn = -n * (-mu).exp() / (w * w);
    Ok(CountEstimate {
        n_hat,
        se: (var_binomial + dn * dn / info).sqrt(),
        mu_hat: Some(mu),
    })
}

/// Root of `(1 - e^-mu) / mu = r` for `r` in `(0, 1)`: Newton safeguarded
/// by the bracket `(0, 1/r)`.
fn m0_root(r: f64) -> f64 {
    let g = |m: f64| -(-m).exp_m1() / m - r;
    let dg = |m: f64| ((-m).exp() * (1.0 + m) - 1.0) / (m * m);
    let (mut lo, mut hi) = (0.0, 1.0 / r);
    let mut m = 2.0 * (1.0 - r);
    if !(m > lo && m < hi) {
        m = 0.5 * hi;
    }
    for _ in 0..200 {
        let v = g(m);
        if v > 0.0 {
            lo = m;
        } else {
            hi = m;
        }
        let mut next = m - v / dg(m);
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - m).abs() <= 1e-15 * m {
            return next;
        }
        m = next;
    }
    m
}
