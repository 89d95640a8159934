//! Approximate EM for the conditional likelihood.
//!
//! One iteration computes posterior frailty moments at the current point,
//! maximizes the profile surrogate over `(phi, Omega(tau), beta)` by
//! Newton-Raphson (baseline shape profiled out), updates `alpha`, and
//! re-evaluates the closed-form likelihood. Iterates are optionally
//! extrapolated with SQUAREM; an extrapolated point is kept only when it
//! raises the likelihood.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};
use crate::likelihood::{
    alpha_score_term, evaluate, frailty_terms, marginal_gradient, profile, Evaluation, LikContext,
    Surrogate,
};
use crate::model::{BaselineFn, Dataset, ModelSpec, ParamState};
use crate::par;
use crate::special::digamma_unchecked;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EStepMode {
    /// Posterior moments plus a first-order correction of the truncation
    /// term, so each M-step ascends the marginal likelihood; `alpha`
    /// maximizes the marginal likelihood given the other parameters.
    Exact,
    /// Posterior means plugged into the complete-data likelihood; `alpha`
    /// maximizes the Gamma log-density of the plugged means.
    PlugIn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub max_iter: usize,
    pub loglik_rel_tol: f64,
    pub nr_max_iter: usize,
    pub nr_step_tol: f64,
    /// Relative step of the finite-difference Jacobian in the M-step.
    pub fd_step: f64,
    /// Factor applied to the E-step update after a likelihood decrease.
    pub damping: f64,
    pub estep: EStepMode,
    pub alpha_max: f64,
    pub alpha_min: f64,
    /// Sup-norm bound on the score required to declare convergence.
    pub score_tol: f64,
    pub accelerate: bool,
    /// Compute the observed information after convergence.
    pub information: bool,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iter: 500,
            loglik_rel_tol: 1e-8,
            nr_max_iter: 50,
            nr_step_tol: 1e-10,
            fd_step: 1e-6,
            damping: 0.5,
            estep: EStepMode::Exact,
            alpha_max: 1e8,
            alpha_min: 1e-6,
            score_tol: 1e-6,
            accelerate: true,
            information: true,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("loglik_rel_tol", self.loglik_rel_tol),
            ("nr_step_tol", self.nr_step_tol),
            ("fd_step", self.fd_step),
            ("damping", self.damping),
            ("alpha_min", self.alpha_min),
            ("score_tol", self.score_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return input(format!("{name} must be positive"));
            }
        }
        if self.max_iter == 0 || self.nr_max_iter == 0 {
            return input("iteration limits must be positive");
        }
        if self.damping > 1.0 {
            return input("damping must lie in (0, 1]");
        }
        if !(self.alpha_max > self.alpha_min) {
            return input("alpha_max must exceed alpha_min");
        }
        Ok(())
    }
}

/// A parameter that is estimated rather than held fixed by the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "index")]
pub enum Coordinate {
    Phi,
    OmegaTau,
    Beta(usize),
    Alpha,
}

impl Coordinate {
    pub fn label(&self, covariate_names: &[String]) -> String {
        match self {
            Coordinate::Phi => "phi".into(),
            Coordinate::OmegaTau => "omega_tau".into(),
            Coordinate::Beta(h) => format!("beta[{}]", covariate_names[*h]),
            Coordinate::Alpha => "alpha".into(),
        }
    }

    /// Natural-scale value in `params`.
    pub fn value(&self, params: &ParamState) -> f64 {
        match self {
            Coordinate::Phi => params.phi(),
            Coordinate::OmegaTau => params.omega_tau(),
            Coordinate::Beta(h) => params.beta[*h],
            Coordinate::Alpha => params.alpha().unwrap_or(f64::INFINITY),
        }
    }

    /// Position in the `(phi, Omega(tau), beta..)` score layout.
    fn score_slot(&self) -> Option<usize> {
        match self {
            Coordinate::Phi => Some(0),
            Coordinate::OmegaTau => Some(1),
            Coordinate::Beta(h) => Some(2 + h),
            Coordinate::Alpha => None,
        }
    }
}

/// Coordinates of the surrogate that the M-step moves.
fn surrogate_coordinates(ctx: &LikContext, frozen_beta: &[usize]) -> Vec<Coordinate> {
    let mut c = Vec::new();
    if ctx.spec.behavior.is_some() {
        c.push(Coordinate::Phi);
    }
    c.push(Coordinate::OmegaTau);
    c.extend(
        (0..ctx.n_covariates())
            .filter(|h| !frozen_beta.contains(h))
            .map(Coordinate::Beta),
    );
    c
}

/// Posterior mean of subject `i`'s frailty.
pub fn e_step_rho(i: usize, params: &ParamState, ctx: &LikContext) -> Result<f64> {
    ctx.check_params(params)?;
    if i >= ctx.n_subjects() {
        return input(format!("subject index {i} out of range"));
    }
    let g = crate::model::linear_predictor(ctx.covariates(i), &params.beta)?;
    let omega = params.omega_tau();
    let os = omega - (1.0 - params.phi()) * ctx.window_mass(i, &params.theta);
    let q = (g * os + params.alpha().unwrap_or(1.0)) / (g * omega);
    if !(q > 0.0) {
        return Err(Error::Evaluation(format!("zeta shift {q} is not positive")));
    }
    Ok(frailty_terms(ctx.n_captures[i], g * os, g * omega, params.alpha()).rho_hat)
}

/// Nelson-Aalen jumps `dN_k / sum_i rho_i gamma_i (phi^{I_ik} + A_i)`.
pub fn baseline_update(params: &ParamState, rho_hat: &[f64], ctx: &LikContext) -> Result<Vec<f64>> {
    ctx.check_params(params)?;
    if rho_hat.len() != ctx.n_subjects() || rho_hat.iter().any(|r| !(*r > 0.0)) {
        return input("rho_hat must hold one positive value per subject");
    }
    let gamma = ctx.gammas(&params.beta)?;
    let omega = params.omega_tau();
    let phi = params.phi();
    let m = ctx.n_times();
    let mut diff = vec![0.0; m + 1];
    let mut base = 0.0;
    for i in 0..ctx.n_subjects() {
        let v = rho_hat[i] * gamma[i];
        base += v * (1.0 + 1.0 / (v * omega).exp_m1());
        let w = ctx.window(i);
        if !w.is_empty() {
            diff[w.start] += v;
            diff[w.end] -= v;
        }
    }
    let mut inside = 0.0;
    let mut theta = Vec::with_capacity(m);
    for k in 0..m {
        inside += diff[k];
        let denom = base - (1.0 - phi) * inside;
        debug_assert!(denom > 0.0);
        theta.push(ctx.dn[k] / denom);
    }
    Ok(theta)
}

/// Result of the `alpha` update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaUpdate {
    pub alpha: f64,
    /// The maximizer lies at or beyond `alpha_max`.
    pub capped: bool,
}

/// Maximizer over `alpha` of `sum_i ln f(rho_hat_i; alpha, alpha)`, the Gamma
/// log-density with unit mean.
pub fn alpha_update(rho_hat: &[f64], alpha_max: f64) -> Result<AlphaUpdate> {
    if rho_hat.is_empty() || rho_hat.iter().any(|r| !(*r > 0.0)) {
        return input("alpha update needs positive frailty estimates");
    }
    let n = rho_hat.len() as f64;
    let mean = rho_hat.iter().sum::<f64>() / n;
    let mean_ln = rho_hat.iter().map(|r| r.ln()).sum::<f64>() / n;
    Ok(solve_alpha(mean - mean_ln - 1.0, 1e-12, alpha_max))
}

/// Solves `ln alpha - digamma(alpha) = c` by bisection in `ln alpha`.
fn solve_alpha(c: f64, alpha_min: f64, alpha_max: f64) -> AlphaUpdate {
    let f = |t: f64| {
        let a = t.exp();
        a.ln() - digamma_unchecked(a) - c
    };
    let (mut lo, mut hi) = (alpha_min.ln(), alpha_max.ln());
    if f(hi) >= 0.0 {
        return AlphaUpdate {
            alpha: alpha_max,
            capped: true,
        };
    }
    if f(lo) <= 0.0 {
        return AlphaUpdate {
            alpha: alpha_min,
            capped: false,
        };
    }
    while hi - lo > 1e-13 * (1.0 + lo.abs().max(hi.abs())) {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    AlphaUpdate {
        alpha: (0.5 * (lo + hi)).exp(),
        capped: false,
    }
}

/// Newton-Raphson on the profile surrogate with `rho_hat` held fixed.
///
/// Only the coordinates the model estimates move; the returned jumps are the
/// profiled baseline at the new point.
pub fn m_step(
    params: &ParamState,
    rho_hat: &[f64],
    ctx: &LikContext,
    cfg: &EmConfig,
) -> Result<ParamState> {
    ctx.check_params(params)?;
    let sur = Surrogate::plug_in(rho_hat.to_vec());
    let coords = surrogate_coordinates(ctx, &[]);
    newton(params, &sur, ctx, cfg, &coords).map(|(st, _)| st)
}

fn surrogate_point(params: &ParamState) -> Vec<f64> {
    [params.log_phi, params.log_omega_tau]
        .into_iter()
        .chain(params.beta.iter().copied())
        .collect()
}

/// Returns the new state and the number of Newton iterations.
fn newton(
    params: &ParamState,
    sur: &Surrogate,
    ctx: &LikContext,
    cfg: &EmConfig,
    coords: &[Coordinate],
) -> Result<(ParamState, usize)> {
    let slots: Vec<usize> = coords.iter().filter_map(Coordinate::score_slot).collect();
    let q = slots.len();
    let value_at = |u: &[f64], grad: bool| profile(u[0].exp(), u[1].exp(), &u[2..], sur, ctx, grad);
    let grad_u = |u: &[f64]| -> Result<Option<(f64, Vec<f64>)>> {
        let pr = value_at(u, true)?;
        if !pr.value.is_finite() {
            return Ok(None);
        }
        let g = slots
            .iter()
            .map(|&j| match j {
                0 => pr.grad[0] * u[0].exp(),
                1 => pr.grad[1] * u[1].exp(),
                _ => pr.grad[j],
            })
            .collect();
        Ok(Some((pr.value, g)))
    };
    let fail = |iterations: usize, reason: &str, u: &[f64]| -> Error {
        let mut last = params.clone();
        last.log_phi = u[0];
        last.log_omega_tau = u[1];
        last.beta = u[2..].to_vec();
        if let Ok(pr) = value_at(u, false) {
            if pr.value.is_finite() {
                last.theta = pr.theta;
            }
        }
        Error::StepFailure {
            iterations,
            reason: reason.to_string(),
            last_valid: Box::new(last),
        }
    };

    let mut u = surrogate_point(params);
    let Some((mut value, mut g)) = grad_u(&u)? else {
        return Err(fail(0, "surrogate is not finite at the starting point", &u));
    };
    let mut iterations = 0;
    while iterations < cfg.nr_max_iter {
        iterations += 1;
        let mut jac = DMatrix::<f64>::zeros(q, q);
        for (c, &j) in slots.iter().enumerate() {
            let h = cfg.fd_step * u[j].abs().max(1.0);
            let mut up = u.clone();
            let mut dn = u.clone();
            up[j] += h;
            dn[j] -= h;
            match (grad_u(&up)?, grad_u(&dn)?) {
                (Some((_, a)), Some((_, b))) => {
                    for r in 0..q {
                        jac[(r, c)] = (a[r] - b[r]) / (2.0 * h);
                    }
                }
                _ => return Err(fail(iterations, "surrogate undefined near the iterate", &u)),
            }
        }
        let neg_hess = -(&jac + jac.transpose()) * 0.5;
        let grad = DVector::from_vec(g.clone());
        let dir = damped_solve(&neg_hess, &grad);
        let slope = grad.dot(&dir);

        let mut lambda = 1.0;
        let mut accepted = None;
        while lambda > 1e-12 {
            let mut trial = u.clone();
            for (c, &j) in slots.iter().enumerate() {
                trial[j] += lambda * dir[c];
            }
            let tv = value_at(&trial, false)?.value;
            let roundoff = 1e-13 * value.abs().max(1.0);
            if tv.is_finite() && tv >= value + 1e-4 * lambda * slope - roundoff {
                accepted = Some(trial);
                break;
            }
            lambda *= 0.5;
        }
        let Some(next) = accepted else {
            if g.iter().all(|x| x.abs() <= 1e-6) {
                break;
            }
            return Err(fail(iterations, "line search found no ascent", &u));
        };
        let step = dir.amax() * lambda;
        u = next;
        match grad_u(&u)? {
            Some((v, gg)) => {
                value = v;
                g = gg;
            }
            None => return Err(fail(iterations, "surrogate not finite after step", &u)),
        }
        if step < cfg.nr_step_tol {
            break;
        }
    }
    let pr = value_at(&u, false)?;
    let mut out = params.clone();
    out.log_phi = u[0];
    out.log_omega_tau = u[1];
    out.beta = u[2..].to_vec();
    out.theta = pr.theta;
    Ok((out, iterations))
}

/// Solves `(H + mu I) d = g`, raising `mu` until the matrix is positive
/// definite.
fn damped_solve(h: &DMatrix<f64>, g: &DVector<f64>) -> DVector<f64> {
    let n = h.nrows();
    let scale = (0..n)
        .map(|i| h[(i, i)].abs())
        .fold(0.0, f64::max)
        .max(1e-12);
    let mut mu = 0.0;
    for _ in 0..40 {
        let m = h + DMatrix::<f64>::identity(n, n) * mu;
        if let Some(ch) = m.cholesky() {
            return ch.solve(g);
        }
        mu = if mu == 0.0 { 1e-10 * scale } else { mu * 10.0 };
    }
    g / scale
}

/// Output of [`fit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub spec: ModelSpec,
    pub params: ParamState,
    /// Distinct capture times carrying the baseline jumps.
    pub times: Vec<f64>,
    pub n_observed: usize,
    /// Identifiers aligned with `rho_hat`.
    pub subject_ids: Vec<String>,
    pub rho_hat: Vec<f64>,
    pub loglik: f64,
    pub loglik_trace: Vec<f64>,
    /// Estimated coordinates; `score`, `estimates` and the information
    /// matrix follow this order.
    pub coordinates: Vec<Coordinate>,
    pub labels: Vec<String>,
    pub estimates: Vec<f64>,
    /// Score of the surrogate at a fresh E-step (the `alpha` entry is the
    /// derivative of the objective used for `alpha`).
    pub score: Vec<f64>,
    pub info_matrix: Option<Vec<Vec<f64>>>,
    pub iterations: usize,
    pub converged: bool,
    pub alpha_capped: bool,
    pub warnings: Vec<String>,
}

impl FitResult {
    pub fn score_norm(&self) -> f64 {
        self.score.iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    pub fn baseline(&self) -> Result<BaselineFn> {
        BaselineFn::new(self.times.clone(), &self.params.theta)
    }

    pub fn position(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Inverse of the observed information. When `alpha` carries no usable
    /// information (a boundary fit) it is held fixed and its row and column
    /// are NaN.
    pub fn covariance(&self) -> Result<Vec<Vec<f64>>> {
        let info = self
            .info_matrix
            .as_ref()
            .ok_or_else(|| Error::Evaluation("information matrix was not computed".into()))?;
        match invert_information(info) {
            Err(e @ Error::Singular { .. }) => {
                let Some(a) = self
                    .coordinates
                    .iter()
                    .position(|c| *c == Coordinate::Alpha)
                else {
                    return Err(e);
                };
                let keep: Vec<usize> = (0..info.len()).filter(|&i| i != a).collect();
                let sub: Vec<Vec<f64>> = keep
                    .iter()
                    .map(|&i| keep.iter().map(|&j| info[i][j]).collect())
                    .collect();
                let inv = invert_information(&sub).map_err(|_| e)?;
                let mut out = vec![vec![f64::NAN; info.len()]; info.len()];
                for (r, &i) in keep.iter().enumerate() {
                    for (c, &j) in keep.iter().enumerate() {
                        out[i][j] = inv[r][c];
                    }
                }
                Ok(out)
            }
            other => other,
        }
    }

    pub fn standard_errors(&self) -> Result<Vec<f64>> {
        let cov = self.covariance()?;
        Ok((0..cov.len()).map(|i| cov[i][i].sqrt()).collect())
    }
}

pub(crate) fn invert_information(info: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = info.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let m = DMatrix::from_fn(n, n, |i, j| info[i][j]);
    let eig = m.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &v| a.min(v));
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(min > 0.0) || condition > 1e14 {
        return Err(Error::Singular { condition });
    }
    let inv = m.cholesky().ok_or(Error::Singular { condition })?.inverse();
    Ok((0..n)
        .map(|i| (0..n).map(|j| inv[(i, j)]).collect())
        .collect())
}

#[derive(Debug, Clone)]
struct Iterate {
    st: ParamState,
    ev: Evaluation,
    sur: Surrogate,
}

fn make_surrogate(mode: EStepMode, ev: &Evaluation, st: &ParamState) -> Surrogate {
    match mode {
        EStepMode::Exact => Surrogate::exact(ev, st.omega_tau()),
        EStepMode::PlugIn => Surrogate::plug_in(ev.rho_hat.clone()),
    }
}

/// Sum over subjects of `d/d alpha ln L_i` at `ln alpha = t`, the other
/// parameters entering through `(n_i, gamma_i Omega*_i, gamma_i Omega(tau))`.
fn alpha_score(t: f64, exposures: &[(u32, f64, f64)]) -> f64 {
    let a = t.exp();
    let base = a.ln() + 1.0 - digamma_unchecked(a);
    let terms = par::map(exposures.len(), |i| {
        let (n, gos, go) = exposures[i];
        base + alpha_score_term(n, gos, go, a)
    });
    terms.iter().sum()
}

/// Maximizes the marginal likelihood over `ln alpha` at fixed other
/// parameters, moving uphill from the current value.
fn maximize_alpha(st: &ParamState, ctx: &LikContext, cfg: &EmConfig) -> Result<f64> {
    let gamma = ctx.gammas(&st.beta)?;
    let omega = st.omega_tau();
    let phi = st.phi();
    let exposures: Vec<(u32, f64, f64)> = (0..ctx.n_subjects())
        .map(|i| {
            let os = omega - (1.0 - phi) * ctx.window_mass(i, &st.theta);
            (ctx.n_captures[i], gamma[i] * os, gamma[i] * omega)
        })
        .collect();
    let (t_min, t_max) = (cfg.alpha_min.ln(), cfg.alpha_max.ln());
    let t0 = st.log_alpha.unwrap_or(0.0).clamp(t_min, t_max);
    let s0 = alpha_score(t0, &exposures);
    if s0 == 0.0 {
        return Ok(t0);
    }
    // Bracket a sign change in the uphill direction.
    let dir = s0.signum();
    let (mut a, mut fa) = (t0, s0);
    let mut step = 0.05;
    let (mut b, mut fb);
    loop {
        b = (a + dir * step).clamp(t_min, t_max);
        fb = alpha_score(b, &exposures);
        if fb.signum() != dir {
            break;
        }
        if b == t_max || b == t_min {
            return Ok(b);
        }
        a = b;
        fa = fb;
        step *= 2.0;
    }
    // Illinois regula falsi on [a, b].
    let mut side = 0;
    for _ in 0..100 {
        if (b - a).abs() < 1e-10 {
            break;
        }
        let c = (a * fb - b * fa) / (fb - fa);
        let fc = alpha_score(c, &exposures);
        if fc == 0.0 {
            return Ok(c);
        }
        if fc.signum() == fb.signum() {
            b = c;
            fb = fc;
            if side == -1 {
                fa *= 0.5;
            }
            side = -1;
        } else {
            a = c;
            fa = fc;
            if side == 1 {
                fb *= 0.5;
            }
            side = 1;
        }
    }
    Ok(if fa.abs() < fb.abs() { a } else { b })
}

struct Fitter<'a> {
    ctx: &'a LikContext,
    cfg: &'a EmConfig,
    coords: Vec<Coordinate>,
    warnings: Vec<String>,
}

impl Fitter<'_> {
    fn update(&self, st: &ParamState, sur: &Surrogate) -> Result<(ParamState, Evaluation)> {
        let (mut next, _) = newton(st, sur, self.ctx, self.cfg, &self.coords)?;
        if self.ctx.spec.frailty {
            let t = match self.cfg.estep {
                EStepMode::Exact => maximize_alpha(&next, self.ctx, self.cfg)?,
                EStepMode::PlugIn => alpha_update(&sur.rho_hat, self.cfg.alpha_max)?
                    .alpha
                    .max(self.cfg.alpha_min)
                    .ln(),
            };
            next.log_alpha = Some(t);
        }
        let ev = evaluate(&next, self.ctx)?;
        Ok((next, ev))
    }

    /// One EM iteration with the decreasing-likelihood fallback.
    fn step(&mut self, cur: &Iterate) -> Result<Iterate> {
        let fresh = make_surrogate(self.cfg.estep, &cur.ev, &cur.st);
        if self.cfg.estep == EStepMode::PlugIn {
            // The plug-in map is not an ascent method; its fixed point is
            // the target, so decreases are recorded rather than undone.
            let (st, ev) = self.update(&cur.st, &fresh)?;
            if ev.loglik < cur.ev.loglik - 1e-10 * cur.ev.loglik.abs().max(1.0) {
                self.warnings
                    .push("log-likelihood decreased under the plug-in E-step".into());
            }
            return Ok(Iterate { st, ev, sur: fresh });
        }
        let slack = 1e-10 * cur.ev.loglik.abs().max(1.0);
        let mut weight = 1.0;
        let mut first_candidate: Option<ParamState> = None;
        let mut last_err = None;
        for attempt in 0..5 {
            let sur = if attempt == 0 {
                fresh.clone()
            } else {
                fresh.damp(&cur.sur, weight)
            };
            match self.update(&cur.st, &sur) {
                Ok((st, ev)) if ev.loglik >= cur.ev.loglik - slack => {
                    if attempt > 0 {
                        self.warnings.push(format!(
                            "log-likelihood decreased; E-step update damped by {weight}"
                        ));
                    }
                    return Ok(Iterate { st, ev, sur });
                }
                Ok((st, _)) => {
                    first_candidate.get_or_insert(st);
                }
                Err(e) => last_err = Some(e),
            }
            weight *= self.cfg.damping;
            if self.cfg.damping == 1.0 {
                break;
            }
        }
        // Shorten the undamped step until the likelihood rises.
        if let Some(target) = first_candidate {
            let x0 = pack(&cur.st);
            let x1 = pack(&target);
            let mut lambda = 0.5;
            while lambda > 1e-4 {
                let x: Vec<f64> = x0
                    .iter()
                    .zip(&x1)
                    .map(|(a, b)| a + lambda * (b - a))
                    .collect();
                let st = unpack(&x, &cur.st, self.cfg);
                if let Ok(ev) = evaluate(&st, self.ctx) {
                    if ev.loglik >= cur.ev.loglik - slack {
                        self.warnings.push(format!(
                            "log-likelihood decreased; step shortened to {lambda}"
                        ));
                        return Ok(Iterate { st, ev, sur: fresh });
                    }
                }
                lambda *= 0.5;
            }
        }
        match last_err {
            Some(e @ Error::StepFailure { .. }) => Err(e),
            _ => {
                self.warnings
                    .push("no ascent step found; iteration stalled".into());
                Ok(cur.clone())
            }
        }
    }

    /// Surrogate score on the estimated coordinates at a fresh E-step.
    fn score(&self, cur: &Iterate) -> Result<Vec<f64>> {
        let sur = make_surrogate(self.cfg.estep, &cur.ev, &cur.st);
        let st = &cur.st;
        let pr = profile(st.phi(), st.omega_tau(), &st.beta, &sur, self.ctx, true)?;
        let mut score: Vec<f64> = self
            .coords
            .iter()
            .filter_map(|c| {
                c.score_slot()
                    .map(|j| pr.grad.get(j).copied().unwrap_or(f64::NAN))
            })
            .collect();
        if self.ctx.spec.frailty && !alpha_at_cap(st, self.cfg) {
            let a = st.alpha().unwrap_or(1.0);
            let base = a.ln() + 1.0 - digamma_unchecked(a);
            let s: f64 = match self.cfg.estep {
                EStepMode::Exact => *marginal_gradient(st, &cur.ev, self.ctx).last().unwrap(),
                EStepMode::PlugIn => cur.ev.rho_hat.iter().map(|r| base + r.ln() - r).sum(),
            };
            score.push(s);
        }
        Ok(score)
    }
}

fn alpha_at_cap(st: &ParamState, cfg: &EmConfig) -> bool {
    st.alpha()
        .is_some_and(|a| a >= cfg.alpha_max * (1.0 - 1e-9))
}

/// Packs `(ln phi, ln alpha, beta, ln theta)` for extrapolation.
fn pack(st: &ParamState) -> Vec<f64> {
    let mut x = vec![st.log_phi, st.log_alpha.unwrap_or(0.0)];
    x.extend(&st.beta);
    x.extend(st.theta.iter().map(|t| t.ln()));
    x
}

fn unpack(x: &[f64], template: &ParamState, cfg: &EmConfig) -> ParamState {
    let p = template.beta.len();
    let theta: Vec<f64> = x[2 + p..].iter().map(|v| v.exp()).collect();
    let total: f64 = theta.iter().sum();
    ParamState {
        log_phi: x[0],
        log_alpha: template
            .log_alpha
            .map(|_| x[1].clamp(cfg.alpha_min.ln(), cfg.alpha_max.ln())),
        beta: x[2..2 + p].to_vec(),
        log_omega_tau: total.ln(),
        theta,
    }
}

/// Fits `spec` to `data`.
pub fn fit(data: &Dataset, spec: &ModelSpec, cfg: &EmConfig) -> Result<FitResult> {
    let ctx = LikContext::new(data, spec)?;
    fit_context(&ctx, cfg, None)
}

/// Fits from `start` (or the default starting point) on a prepared context.
pub fn fit_context(
    ctx: &LikContext,
    cfg: &EmConfig,
    start: Option<&ParamState>,
) -> Result<FitResult> {
    cfg.validate()?;
    if ctx.spec.behavior.is_some() {
        ctx.check_identifiable()?;
    }
    let mut warnings = Vec::new();
    let frozen = ctx.constant_covariates();
    for &h in &frozen {
        warnings.push(format!(
            "covariate {} is constant; its coefficient is not identifiable and is held at 0",
            ctx.spec.covariate_names[h]
        ));
    }
    let mut st = match start {
        Some(s) => {
            ctx.check_params(s)?;
            s.clone()
        }
        None => ctx.initial_state(),
    };
    for &h in &frozen {
        st.beta[h] = 0.0;
    }
    if !ctx.spec.time_varying {
        st.theta = ctx.constant_theta(st.omega_tau());
    }
    if ctx.spec.behavior.is_none() {
        st.log_phi = 0.0;
    }

    let mut fitter = Fitter {
        ctx,
        cfg,
        coords: surrogate_coordinates(ctx, &frozen),
        warnings,
    };
    let ev = evaluate(&st, ctx)?;
    let n = ctx.n_subjects();
    let mut cur = Iterate {
        st,
        ev,
        sur: Surrogate::plug_in(vec![1.0; n]),
    };
    let mut trace = vec![cur.ev.loglik];
    let mut iterations = 0;
    let mut converged = false;
    let mut step_max = 1.0f64;

    let check = |fitter: &Fitter, prev: f64, cur: &Iterate| -> Result<bool> {
        let rel = (cur.ev.loglik - prev).abs() / prev.abs().max(1e-300);
        if rel >= cfg.loglik_rel_tol {
            return Ok(false);
        }
        let s = fitter.score(cur)?;
        Ok(s.iter().all(|v| v.abs() < cfg.score_tol))
    };

    while iterations < cfg.max_iter {
        let prev = cur.ev.loglik;
        let one = match fitter.step(&cur) {
            Ok(it) => it,
            Err(Error::StepFailure {
                reason,
                iterations: k,
                ..
            }) => {
                fitter.warnings.push(format!(
                    "Newton-Raphson failed after {k} iterations: {reason}"
                ));
                break;
            }
            Err(e) => return Err(e),
        };
        iterations += 1;
        trace.push(one.ev.loglik);
        if check(&fitter, prev, &one)? {
            cur = one;
            converged = true;
            break;
        }
        if !cfg.accelerate || cfg.estep == EStepMode::PlugIn || iterations >= cfg.max_iter {
            cur = one;
            continue;
        }
        let two = match fitter.step(&one) {
            Ok(it) => it,
            Err(Error::StepFailure {
                reason,
                iterations: k,
                ..
            }) => {
                fitter.warnings.push(format!(
                    "Newton-Raphson failed after {k} iterations: {reason}"
                ));
                cur = one;
                break;
            }
            Err(e) => return Err(e),
        };
        iterations += 1;
        trace.push(two.ev.loglik);
        if check(&fitter, one.ev.loglik, &two)? {
            cur = two;
            converged = true;
            break;
        }
        // SQUAREM extrapolation from (x0, x1, x2).
        let (x0, x1, x2) = (pack(&cur.st), pack(&one.st), pack(&two.st));
        let r: Vec<f64> = x1.iter().zip(&x0).map(|(a, b)| a - b).collect();
        let v: Vec<f64> = (0..x0.len()).map(|j| x2[j] - 2.0 * x1[j] + x0[j]).collect();
        let nr = r.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let mut next = two;
        if nv > 0.0 && nr > 0.0 {
            let s = (nr / nv).clamp(1.0, step_max);
            let x: Vec<f64> = (0..x0.len())
                .map(|j| x0[j] + 2.0 * s * r[j] + s * s * v[j])
                .collect();
            let st = unpack(&x, &cur.st, cfg);
            match evaluate(&st, ctx) {
                Ok(ev) if ev.loglik > next.ev.loglik => {
                    trace.push(ev.loglik);
                    next = Iterate {
                        st,
                        ev,
                        sur: next.sur,
                    };
                    if s == step_max {
                        step_max *= 4.0;
                    }
                }
                _ => step_max = (step_max / 4.0).max(1.0),
            }
        }
        let prev2 = *trace.iter().rev().nth(1).unwrap_or(&prev);
        cur = next;
        if check(&fitter, prev2, &cur)? {
            converged = true;
            break;
        }
    }

    finish(fitter, cur, trace, iterations, converged)
}

fn finish(
    mut fitter: Fitter,
    cur: Iterate,
    trace: Vec<f64>,
    iterations: usize,
    converged: bool,
) -> Result<FitResult> {
    let ctx = fitter.ctx;
    let cfg = fitter.cfg;
    let capped = alpha_at_cap(&cur.st, cfg);
    if capped {
        fitter.warnings.push(format!(
            "alpha reached its cap {:e}: no detectable frailty variance",
            cfg.alpha_max
        ));
    }
    if cur
        .st
        .alpha()
        .is_some_and(|a| a <= cfg.alpha_min * (1.0 + 1e-9))
    {
        fitter.warnings.push("alpha reached its lower bound".into());
    }
    if !converged {
        fitter.warnings.push(format!(
            "EM did not converge within {iterations} iterations"
        ));
    }
    let score = fitter.score(&cur)?;
    let mut coords = fitter.coords.clone();
    if ctx.spec.frailty && !capped {
        coords.push(Coordinate::Alpha);
    }
    let names = &ctx.spec.covariate_names;
    let info_matrix = if cfg.information {
        match observed_information(&cur.st, ctx, &coords) {
            Ok(m) => {
                if invert_information(&m).is_err() {
                    let alpha_only = coords.contains(&Coordinate::Alpha) && {
                        let keep: Vec<usize> = (0..coords.len())
                            .filter(|&i| coords[i] != Coordinate::Alpha)
                            .collect();
                        let sub: Vec<Vec<f64>> = keep
                            .iter()
                            .map(|&i| keep.iter().map(|&j| m[i][j]).collect())
                            .collect();
                        invert_information(&sub).is_ok()
                    };
                    fitter.warnings.push(if alpha_only {
                        "alpha carries no usable information; it is held fixed for standard errors"
                            .into()
                    } else {
                        "observed information is not positive definite".into()
                    });
                }
                Some(m)
            }
            Err(e) => {
                fitter
                    .warnings
                    .push(format!("observed information unavailable: {e}"));
                None
            }
        }
    } else {
        None
    };
    fitter.warnings.dedup();
    Ok(FitResult {
        spec: ctx.spec.clone(),
        labels: coords.iter().map(|c| c.label(names)).collect(),
        estimates: coords.iter().map(|c| c.value(&cur.st)).collect(),
        coordinates: coords,
        times: ctx.times.clone(),
        n_observed: ctx.n_subjects(),
        subject_ids: ctx.subject_ids.clone(),
        rho_hat: cur.ev.rho_hat.clone(),
        loglik: cur.ev.loglik,
        loglik_trace: trace,
        params: cur.st,
        score,
        info_matrix,
        iterations,
        converged,
        alpha_capped: capped,
        warnings: fitter.warnings,
    })
}

/// State with the natural-scale coordinates `x` substituted into `base`.
///
/// `Omega(tau)` rescales the jumps. With `reprofile`, the baseline shape of a
/// time-varying model is re-maximized at the new point.
pub fn state_at(
    base: &ParamState,
    coords: &[Coordinate],
    x: &[f64],
    ctx: &LikContext,
    reprofile: bool,
) -> Result<ParamState> {
    let mut st = base.clone();
    for (c, &v) in coords.iter().zip(x) {
        match c {
            Coordinate::Phi => st.log_phi = v.ln(),
            Coordinate::OmegaTau => st.set_omega_tau(v),
            Coordinate::Beta(h) => st.beta[*h] = v,
            Coordinate::Alpha => st.log_alpha = Some(v.ln()),
        }
    }
    if reprofile && ctx.spec.time_varying {
        reprofile_shape(&mut st, ctx)?;
    }
    Ok(st)
}

/// Maximizes the likelihood over the jumps subject to `sum theta = Omega(tau)`.
///
/// Stationarity reads `theta_k = dN_k / (sum_i gamma_i (rho_i phi^{I_ik} + kappa_i) + lambda)`
/// with the multiplier `lambda` fixed by the constraint; the posterior moments
/// are refreshed between sweeps.
fn reprofile_shape(st: &mut ParamState, ctx: &LikContext) -> Result<()> {
    let omega = st.omega_tau();
    let phi = st.phi();
    let m = ctx.n_times();
    for _ in 0..5000 {
        let ev = evaluate(st, ctx)?;
        let mut diff = vec![0.0; m + 1];
        let mut base = 0.0;
        for i in 0..ctx.n_subjects() {
            let g = ev.gamma[i];
            base += g * (ev.rho_hat[i] + ev.kappa[i]);
            let w = ctx.window(i);
            if !w.is_empty() {
                diff[w.start] += g * ev.rho_hat[i];
                diff[w.end] -= g * ev.rho_hat[i];
            }
        }
        let mut acc = 0.0;
        let denom: Vec<f64> = (0..m)
            .map(|k| {
                acc += diff[k];
                base - (1.0 - phi) * acc
            })
            .collect();
        let lambda = constraint_multiplier(&ctx.dn, &denom, omega);
        let mut theta: Vec<f64> = ctx
            .dn
            .iter()
            .zip(&denom)
            .map(|(d, b)| d / (b + lambda))
            .collect();
        let total: f64 = theta.iter().sum();
        theta.iter_mut().for_each(|t| *t *= omega / total);
        let change = theta
            .iter()
            .zip(&st.theta)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs() / b));
        st.theta = theta;
        if change < 1e-13 {
            return Ok(());
        }
    }
    Err(Error::Evaluation("baseline shape did not converge".into()))
}

/// Root in `lambda` of `sum_k dn_k / (d_k + lambda) = omega`.
fn constraint_multiplier(dn: &[f64], d: &[f64], omega: f64) -> f64 {
    let f = |l: f64| dn.iter().zip(d).map(|(n, x)| n / (x + l)).sum::<f64>() - omega;
    let min_d = d.iter().copied().fold(f64::INFINITY, f64::min);
    let total: f64 = dn.iter().sum();
    let mut lo = -min_d + 1e-12 * min_d.abs().max(1e-300);
    let mut hi = total / omega;
    if f(hi) > 0.0 {
        hi = hi.max(0.0) * 2.0 + 1.0;
    }
    let mut l = 0.0f64.clamp(lo, hi);
    for _ in 0..200 {
        let v = f(l);
        if v > 0.0 {
            lo = l;
        } else {
            hi = l;
        }
        let dv = -dn
            .iter()
            .zip(d)
            .map(|(n, x)| n / ((x + l) * (x + l)))
            .sum::<f64>();
        let mut next = l - v / dv;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - l).abs() <= 1e-15 * (1.0 + l.abs()) {
            return next;
        }
        l = next;
    }
    l
}

/// Observed information of the profile log-likelihood in natural-scale
/// coordinates, by central differences of its gradient.
pub fn observed_information(
    params: &ParamState,
    ctx: &LikContext,
    coords: &[Coordinate],
) -> Result<Vec<Vec<f64>>> {
    let x0: Vec<f64> = coords.iter().map(|c| c.value(params)).collect();
    let grad_at = |x: &[f64]| -> Result<Vec<f64>> {
        let st = state_at(params, coords, x, ctx, true)?;
        let ev = evaluate(&st, ctx)?;
        let g = marginal_gradient(&st, &ev, ctx);
        let p = ctx.n_covariates();
        Ok(coords
            .iter()
            .map(|c| match c {
                Coordinate::Phi => g[0],
                Coordinate::OmegaTau => g[1],
                Coordinate::Beta(h) => g[2 + h],
                Coordinate::Alpha => g[2 + p],
            })
            .collect())
    };
    let q = coords.len();
    let mut h = vec![vec![0.0; q]; q];
    for j in 0..q {
        let step = match coords[j] {
            Coordinate::Beta(_) => 1e-4 * x0[j].abs().max(1.0),
            _ => 1e-4 * x0[j],
        };
        let mut up = x0.clone();
        let mut dn = x0.clone();
        up[j] += step;
        dn[j] -= step;
        let gu = grad_at(&up)?;
        let gd = grad_at(&dn)?;
        for i in 0..q {
            h[i][j] = -(gu[i] - gd[i]) / (2.0 * step);
        }
    }
    for i in 0..q {
        for j in 0..i {
            let avg = 0.5 * (h[i][j] + h[j][i]);
            h[i][j] = avg;
            h[j][i] = avg;
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Behavior, CaptureHistory, ModelName};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Gamma};

    /// Homogeneous-rate histories on (0, 1] with Gamma frailty, a binary
    /// covariate and a classic behavioral factor.
    fn simulate(seed: u64, n_pop: usize, rate: f64, alpha: f64, phi: f64, beta: f64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frailty = Gamma::new(alpha, 1.0 / alpha).unwrap();
        let mut histories = Vec::new();
        for i in 0..n_pop {
            let z = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
            let base = frailty.sample(&mut rng) * (beta * z).exp() * rate;
            let mut t = 0.0;
            let mut times = Vec::new();
            loop {
                let r = if times.is_empty() { base } else { base * phi };
                t += -rng.gen::<f64>().ln() / r;
                if t > 1.0 {
                    break;
                }
                times.push(t);
            }
            if !times.is_empty() {
                histories.push(CaptureHistory::new(format!("s{i}"), times, vec![z]).unwrap());
            }
        }
        Dataset::new(1.0, vec!["z".into()], histories).unwrap()
    }

    fn spec(name: &str) -> ModelSpec {
        ModelSpec::from_name(name.parse::<ModelName>().unwrap(), 1.0, vec!["z".into()])
    }

    #[test]
    fn alpha_update_examples() {
        let ones = vec![1.0; 50];
        assert!(alpha_update(&ones, 1e8).unwrap().capped);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = Gamma::new(5.0, 0.2).unwrap();
        let draws: Vec<f64> = (0..100_000).map(|_| g.sample(&mut rng)).collect();
        let a = alpha_update(&draws, 1e8).unwrap().alpha;
        assert!((a - 5.0).abs() < 0.25, "{a}");

        // Dense grid over the Gamma log-density sum.
        let two = [0.5, 1.5];
        let ll = |a: f64| {
            two.iter()
                .map(|&r| crate::likelihood::gamma_log_density(r, a))
                .sum::<f64>()
        };
        let mut best = (0.0, f64::NEG_INFINITY);
        let mut a = 0.5;
        while a < 20.0 {
            let v = ll(a);
            if v > best.1 {
                best = (a, v);
            }
            a += 1e-4;
        }
        // Refine around the grid maximizer by golden section.
        let (mut lo, mut hi) = (best.0 - 1e-4, best.0 + 1e-4);
        for _ in 0..100 {
            let m1 = lo + 0.382 * (hi - lo);
            let m2 = lo + 0.618 * (hi - lo);
            if ll(m1) < ll(m2) {
                lo = m1;
            } else {
                hi = m2;
            }
        }
        let got = alpha_update(&two, 1e8).unwrap().alpha;
        assert!(
            (got - 0.5 * (lo + hi)).abs() < 1e-6,
            "{got} vs {}",
            0.5 * (lo + hi)
        );
    }

    #[test]
    fn baseline_update_examples() {
        let h = CaptureHistory::new("a", vec![0.5], vec![]).unwrap();
        let data = Dataset::new(1.0, vec![], vec![h]).unwrap();
        let mut sp = ModelSpec::null(1.0);
        sp.behavior = Some(Behavior::classic());
        let ctx = LikContext::new(&data, &sp).unwrap();
        let mut st = ctx.initial_state();
        st.log_phi = (0.3f64).ln();
        st.set_omega_tau(0.8);
        let th = baseline_update(&st, &[1.0], &ctx).unwrap();
        assert!((th[0] - (1.0 - (-0.8f64).exp())).abs() < 1e-15);

        let data = simulate(1, 60, 1.5, 2.0, 1.0, 0.0);
        let ctx = LikContext::new(&data, &ModelSpec::null(1.0)).unwrap();
        let st = ctx.initial_state();
        let rho = vec![1.0; ctx.n_subjects()];
        let th = baseline_update(&st, &rho, &ctx).unwrap();
        let n = ctx.n_subjects() as f64;
        let f = -(-st.omega_tau()).exp_m1();
        for k in 0..ctx.n_times() {
            assert!((th[k] - ctx.dn[k] * f / n).abs() < 1e-14);
        }
        // Duplicating every subject leaves the jumps unchanged.
        let mut twice = data.clone();
        twice.histories.extend(data.histories.iter().cloned());
        let c2 = LikContext::new(&twice, &ModelSpec::null(1.0)).unwrap();
        let mut st2 = c2.initial_state();
        st2.theta = st.theta.clone();
        st2.log_omega_tau = st.log_omega_tau;
        let th2 = baseline_update(&st2, &vec![1.0; c2.n_subjects()], &c2).unwrap();
        for k in 0..ctx.n_times() {
            assert!((th2[k] - th[k]).abs() < 1e-14 * th[k]);
        }
    }

    #[test]
    fn e_step_near_degenerate_frailty() {
        let data = simulate(2, 40, 2.0, 2.0, 1.0, 0.0);
        let ctx = LikContext::new(&data, &spec("h")).unwrap();
        let mut st = ctx.initial_state();
        st.log_alpha = Some(1e6f64.ln());
        for i in 0..ctx.n_subjects() {
            let r = e_step_rho(i, &st, &ctx).unwrap();
            assert!(r > 0.999 && r < 1.001);
        }
    }

    #[test]
    fn m_step_reproduces_null_model_root() {
        let data = simulate(3, 300, 1.2, 1e9, 1.0, 0.0);
        let ctx = LikContext::new(&data, &ModelSpec::null(1.0)).unwrap();
        let st = ctx.initial_state();
        let cfg = EmConfig::default();
        let out = m_step(&st, &vec![1.0; ctx.n_subjects()], &ctx, &cfg).unwrap();
        let mu = out.omega_tau();
        let ratio = ctx.n_subjects() as f64 / ctx.total_captures;
        assert!(((-(-mu).exp_m1()) / mu - ratio).abs() < 1e-8);
        // Starting at the solution returns it.
        let again = m_step(&out, &vec![1.0; ctx.n_subjects()], &ctx, &cfg).unwrap();
        assert!((again.log_omega_tau - out.log_omega_tau).abs() < 1e-10);
        let s =
            crate::likelihood::score_vector(&again, &vec![1.0; ctx.n_subjects()], &ctx).unwrap();
        assert!(s[1].abs() < 1e-6);
    }

    #[test]
    fn fits_converge_with_small_score() {
        let data = simulate(4, 800, 2.0, 2.0, 0.5, 0.7);
        for name in ["hotb", "ob", "hb", "t", "hot"] {
            for mode in [EStepMode::Exact, EStepMode::PlugIn] {
                let cfg = EmConfig {
                    estep: mode,
                    ..EmConfig::default()
                };
                let fit = fit(&data, &spec(name), &cfg).unwrap();
                assert!(fit.converged, "{name} {mode:?}: {:?}", fit.warnings);
                assert!(fit.score_norm() < 1e-6, "{name}: {:?}", fit.score);
                assert!(fit.params.constraint_gap() < 1e-8);
                let slack = 1e-10 * fit.loglik.abs();
                if mode == EStepMode::Exact {
                    let ups = fit
                        .loglik_trace
                        .windows(2)
                        .filter(|w| w[1] >= w[0] - slack)
                        .count();
                    assert!(
                        ups + 1 >= fit.loglik_trace.len(),
                        "{name}: {:?}",
                        fit.loglik_trace
                    );
                }
                let ll = crate::likelihood::total_cond_loglik(
                    &fit.params,
                    &LikContext::new(&data, &spec(name)).unwrap(),
                );
                assert!((ll - fit.loglik).abs() < 1e-9 * ll.abs());
            }
        }
    }

    #[test]
    fn exact_fit_is_stationary_for_the_likelihood() {
        let data = simulate(5, 800, 2.0, 2.0, 0.5, 0.7);
        let sp = spec("hob");
        let fit = fit(&data, &sp, &EmConfig::default()).unwrap();
        let ctx = LikContext::new(&data, &sp).unwrap();
        let ev = evaluate(&fit.params, &ctx).unwrap();
        let g = marginal_gradient(&fit.params, &ev, &ctx);
        assert!(g.iter().all(|v| v.abs() < 1e-4), "{g:?}");
        let cov = fit.covariance().unwrap();
        assert_eq!(cov.len(), fit.coordinates.len());
        assert!(cov.iter().enumerate().all(|(i, r)| r[i] > 0.0));
    }

    #[test]
    fn permuted_subjects_give_identical_fit() {
        let data = simulate(6, 400, 2.0, 2.0, 0.6, 0.5);
        let mut rev = data.clone();
        rev.histories.reverse();
        let cfg = EmConfig {
            information: false,
            ..EmConfig::default()
        };
        let a = fit(&data, &spec("hotb"), &cfg).unwrap();
        let b = fit(&rev, &spec("hotb"), &cfg).unwrap();
        assert_eq!(a.loglik_trace.len(), b.loglik_trace.len());
        for (x, y) in a.loglik_trace.iter().zip(&b.loglik_trace) {
            assert!((x - y).abs() < 1e-12 * x.abs().max(1.0), "{x} vs {y}");
        }
    }

    #[test]
    fn constant_covariate_is_flagged() {
        let mut data = simulate(7, 300, 2.0, 2.0, 1.0, 0.0);
        for h in &mut data.histories {
            h.covariates[0] = 1.0;
        }
        let fit = fit(&data, &spec("o"), &EmConfig::default()).unwrap();
        assert!(fit.warnings.iter().any(|w| w.contains("not identifiable")));
        assert_eq!(fit.params.beta[0], 0.0);
    }

    #[test]
    fn unidentifiable_behavior_is_rejected() {
        let hs = (0..5)
            .map(|i| {
                CaptureHistory::new(format!("{i}"), vec![0.1 * (i + 1) as f64], vec![0.0]).unwrap()
            })
            .collect();
        let data = Dataset::new(1.0, vec!["z".into()], hs).unwrap();
        assert!(matches!(
            fit(&data, &spec("b"), &EmConfig::default()),
            Err(Error::Identifiability(_))
        ));
    }
}
