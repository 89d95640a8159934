//! Conditional likelihood of the observed subjects, posterior frailty
//! moments, and the profile surrogate that the M-step maximizes.
//!
//! With `s = alpha + N_i`, `b = alpha + gamma_i Omega*_i`, `c = gamma_i Omega(tau)`
//! and `q = b / c`, integrating the frailty out gives
//!
//! ```text
//! ln L_i = e_i ln phi + N_i ln gamma_i + sum_j ln theta_{k(ij)}
//!        + alpha ln alpha + ln Gamma(s) - ln Gamma(alpha) - s ln c + ln zeta(s, q)
//! ```
//!
//! which is evaluated through the scaled tail `q^s zeta(s, q) - 1` so that it
//! stays finite for any `alpha`.

use crate::error::{input, Error, Result};
use crate::model::{behavioral_exponent, validate_identifiability, Dataset, ModelSpec, ParamState};
use crate::par;
use crate::special::{digamma_unchecked, scaled_moment_tail, scaled_tail};

/// Data-dependent quantities shared by every likelihood evaluation.
#[derive(Debug, Clone)]
pub struct LikContext {
    pub spec: ModelSpec,
    /// Distinct capture times `t_(k)`.
    pub times: Vec<f64>,
    /// Number of captures at each distinct time.
    pub dn: Vec<f64>,
    /// Total number of captures `K`.
    pub total_captures: f64,
    /// Shape of a constant rate on the grid of distinct times: the gap
    /// `t_(k) - t_(k-1)` over `tau`, with the last gap running to `tau`.
    pub constant_shape: Vec<f64>,
    /// Subject identifiers in the canonical order used by every per-subject
    /// vector (sorted by identifier).
    pub subject_ids: Vec<String>,
    pub n_captures: Vec<u32>,
    /// Behavioral exponent `e_i`.
    pub exponent: Vec<u32>,
    cap_offsets: Vec<usize>,
    cap_index: Vec<usize>,
    /// Response window as a range `[lo, hi)` of distinct-time indices.
    window: Vec<(usize, usize)>,
    z: Vec<f64>,
    p: usize,
    identifiability: std::result::Result<(), String>,
}

fn cmp_slices(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or_else(|| a.len().cmp(&b.len()))
}

impl LikContext {
    pub fn new(data: &Dataset, spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        if data.is_empty() {
            return input("empty dataset");
        }
        let columns: Vec<usize> = if spec.covariates {
            spec.covariate_names
                .iter()
                .map(|name| {
                    data.covariate_names
                        .iter()
                        .position(|c| c == name)
                        .ok_or_else(|| Error::Input(format!("unknown covariate {name}")))
                })
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let p = columns.len();

        let mut all: Vec<f64> = data
            .histories
            .iter()
            .flat_map(|h| h.times.iter().copied())
            .collect();
        all.sort_by(f64::total_cmp);
        let mut times: Vec<f64> = Vec::new();
        let mut dn: Vec<f64> = Vec::new();
        for t in all {
            if times.last() == Some(&t) {
                *dn.last_mut().unwrap() += 1.0;
            } else {
                times.push(t);
                dn.push(1.0);
            }
        }
        if times.last().is_some_and(|&t| t > spec.tau) {
            return input(format!("capture after tau = {}", spec.tau));
        }

        let behavior = spec.behavior_or_classic();
        let n = data.len();
        let mut ctx = Self {
            spec: spec.clone(),
            total_captures: dn.iter().sum(),
            constant_shape: times
                .iter()
                .enumerate()
                .map(|(k, &t)| {
                    let prev = if k == 0 { 0.0 } else { times[k - 1] };
                    let end = if k + 1 == times.len() { spec.tau } else { t };
                    (end - prev) / spec.tau
                })
                .collect(),
            subject_ids: Vec::with_capacity(n),
            n_captures: Vec::with_capacity(n),
            exponent: Vec::with_capacity(n),
            cap_offsets: vec![0],
            cap_index: Vec::new(),
            window: Vec::with_capacity(n),
            z: Vec::with_capacity(n * p),
            p,
            times,
            dn,
            identifiability: validate_identifiability(&data.histories, spec).map_err(|e| match e {
                Error::Identifiability(m) => m,
                other => other.to_string(),
            }),
        };
        // Canonical subject order makes every reduction independent of the
        // input order.
        let mut order: Vec<&crate::model::CaptureHistory> = data.histories.iter().collect();
        order.sort_by(|a, b| {
            a.subject_id
                .cmp(&b.subject_id)
                .then_with(|| cmp_slices(&a.times, &b.times))
                .then_with(|| cmp_slices(&a.covariates, &b.covariates))
        });
        for h in order {
            ctx.subject_ids.push(h.subject_id.clone());
            ctx.n_captures.push(h.n_captures() as u32);
            ctx.exponent.push(behavioral_exponent(h, spec));
            for &t in &h.times {
                ctx.cap_index.push(ctx.times.partition_point(|&x| x < t));
            }
            ctx.cap_offsets.push(ctx.cap_index.len());
            let range = behavior.window(h, spec.tau).map_or((0, 0), |w| {
                let lo = ctx.times.partition_point(|&x| x <= w.start);
                let hi = ctx.times.partition_point(|&x| x <= w.end);
                (lo, hi.max(lo))
            });
            ctx.window.push(range);
            ctx.z.extend(columns.iter().map(|&c| h.covariates[c]));
        }
        Ok(ctx)
    }

    pub fn n_subjects(&self) -> usize {
        self.n_captures.len()
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.p
    }

    pub fn covariates(&self, i: usize) -> &[f64] {
        &self.z[i * self.p..(i + 1) * self.p]
    }

    /// Distinct-time indices of subject `i`'s captures.
    pub fn captures(&self, i: usize) -> &[usize] {
        &self.cap_index[self.cap_offsets[i]..self.cap_offsets[i + 1]]
    }

    /// Indices `k` with `t_(k)` inside subject `i`'s response window.
    pub fn window(&self, i: usize) -> std::ops::Range<usize> {
        let (lo, hi) = self.window[i];
        lo..hi
    }

    /// Baseline mass inside subject `i`'s response window.
    pub fn window_mass(&self, i: usize, theta: &[f64]) -> f64 {
        theta[self.window(i)].iter().sum()
    }

    fn window_mass_prefix(&self, i: usize, cum: &[f64]) -> f64 {
        let w = self.window(i);
        cum[w.end] - cum[w.start]
    }

    /// Whether some subject is recaptured inside its response window.
    pub fn check_identifiable(&self) -> Result<()> {
        self.identifiability.clone().map_err(Error::Identifiability)
    }

    /// Indices of covariates that take a single value over all subjects.
    pub fn constant_covariates(&self) -> Vec<usize> {
        (0..self.p)
            .filter(|&h| {
                let first = self.z[h];
                (0..self.n_subjects()).all(|i| self.covariates(i)[h] == first)
            })
            .collect()
    }

    /// `exp(beta . z_i)` for every subject.
    pub fn gammas(&self, beta: &[f64]) -> Result<Vec<f64>> {
        if beta.len() != self.p {
            return input(format!(
                "expected {} coefficients, got {}",
                self.p,
                beta.len()
            ));
        }
        Ok((0..self.n_subjects())
            .map(|i| {
                self.covariates(i)
                    .iter()
                    .zip(beta)
                    .map(|(z, b)| z * b)
                    .sum::<f64>()
                    .exp()
            })
            .collect())
    }

    /// Jumps of a constant rate with total `omega_tau` (see `constant_shape`).
    pub fn constant_theta(&self, omega_tau: f64) -> Vec<f64> {
        self.constant_shape.iter().map(|s| omega_tau * s).collect()
    }

    /// Starting point: no effects, `Omega(tau) = K / n`, `alpha = 1`.
    pub fn initial_state(&self) -> ParamState {
        let omega = self.total_captures / self.n_subjects() as f64;
        ParamState {
            beta: vec![0.0; self.p],
            log_phi: 0.0,
            log_alpha: self.spec.frailty.then_some(0.0),
            log_omega_tau: omega.ln(),
            theta: self.constant_theta(omega),
        }
    }

    pub fn check_params(&self, params: &ParamState) -> Result<()> {
        if params.theta.len() != self.n_times() {
            return input(format!(
                "expected {} baseline jumps, got {}",
                self.n_times(),
                params.theta.len()
            ));
        }
        if params.beta.len() != self.p {
            return input(format!(
                "expected {} coefficients, got {}",
                self.p,
                params.beta.len()
            ));
        }
        if params.log_alpha.is_some() != self.spec.frailty {
            return input("frailty parameter does not match the model");
        }
        Ok(())
    }

    /// `sum_{k <= j} theta_k` with a leading zero.
    fn prefix(theta: &[f64]) -> Vec<f64> {
        let mut acc = 0.0;
        std::iter::once(0.0)
            .chain(theta.iter().map(|t| {
                acc += t;
                acc
            }))
            .collect()
    }
}

/// Frailty-integrated pieces of one subject's likelihood.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrailtyTerms {
    /// `ln E[rho^N exp(-rho gamma Omega*) / (1 - exp(-rho gamma Omega))]`
    pub ln_integral: f64,
    /// Posterior mean of `rho`.
    pub rho_hat: f64,
    /// Posterior mean of `rho A(rho gamma Omega)`.
    pub kappa: f64,
    /// Posterior mean of `ln rho`.
    pub e_ln_rho: f64,
}

/// `n` captures, exposure `go_star = gamma Omega*`, `go = gamma Omega(tau)`.
/// Without frailty `rho` is fixed at one.
pub fn frailty_terms(n: u32, go_star: f64, go: f64, alpha: Option<f64>) -> FrailtyTerms {
    let Some(alpha) = alpha else {
        return FrailtyTerms {
            ln_integral: -go_star - (-(-go).exp_m1()).ln(),
            rho_hat: 1.0,
            kappa: 1.0 / go.exp_m1(),
            e_ln_rho: 0.0,
        };
    };
    let nf = n as f64;
    let s = alpha + nf;
    let b = alpha + go_star;
    let q = b / go;
    let t0 = scaled_tail(s, q);
    let t1 = scaled_tail(s + 1.0, q);
    let moment = scaled_moment_tail(s, q);
    // alpha ln alpha - s ln b + ln Gamma(s) - ln Gamma(alpha), rearranged.
    let rising: f64 = (0..n).map(|j| ((j as f64 - go_star) / b).ln_1p()).sum();
    let ln_integral = -alpha * (go_star / alpha).ln_1p() + rising + t0.ln_sum();
    let norm = 1.0 + t0.value;
    FrailtyTerms {
        ln_integral,
        rho_hat: s / b * (1.0 + t1.value) / norm,
        kappa: s / b * moment / norm,
        e_ln_rho: digamma_unchecked(s) - b.ln() + t0.d_ln_sum(),
    }
}

/// `E[ln rho] - E[rho]` under the posterior, the data part of the `alpha`
/// score; skips the moment series that [`frailty_terms`] also sums.
pub fn alpha_score_term(n: u32, go_star: f64, go: f64, alpha: f64) -> f64 {
    let s = alpha + n as f64;
    let b = alpha + go_star;
    let q = b / go;
    let t0 = scaled_tail(s, q);
    let t1 = scaled_tail(s + 1.0, q);
    digamma_unchecked(s) - b.ln() + t0.d_ln_sum() - s / b * (1.0 + t1.value) / (1.0 + t0.value)
}

/// Per-subject quantities at one parameter value.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loglik: f64,
    pub subject_loglik: Vec<f64>,
    pub gamma: Vec<f64>,
    pub omega_star: Vec<f64>,
    /// Baseline mass inside each response window.
    pub window_mass: Vec<f64>,
    pub rho_hat: Vec<f64>,
    pub kappa: Vec<f64>,
    pub e_ln_rho: Vec<f64>,
}

fn log_theta(params: &ParamState, ctx: &LikContext) -> Result<Vec<f64>> {
    params
        .theta
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            if t > 0.0 && t.is_finite() {
                Ok(t.ln())
            } else {
                Err(Error::Evaluation(format!(
                    "baseline jump at observed capture time {} is {t}",
                    ctx.times[k]
                )))
            }
        })
        .collect()
}

/// Likelihood and posterior frailty moments for every subject.
pub fn evaluate(params: &ParamState, ctx: &LikContext) -> Result<Evaluation> {
    ctx.check_params(params)?;
    let ln_theta = log_theta(params, ctx)?;
    let gamma = ctx.gammas(&params.beta)?;
    let phi = params.phi();
    let omega = params.omega_tau();
    let alpha = params.alpha();
    let ln_phi = params.log_phi;
    let cum = LikContext::prefix(&params.theta);

    let rows = par::map(ctx.n_subjects(), |i| {
        let mass = ctx.window_mass_prefix(i, &cum);
        let os = omega - (1.0 - phi) * mass;
        let g = gamma[i];
        let n = ctx.n_captures[i];
        let ft = frailty_terms(n, g * os, g * omega, alpha);
        let ll = ctx.exponent[i] as f64 * ln_phi
            + n as f64 * g.ln()
            + ctx.captures(i).iter().map(|&k| ln_theta[k]).sum::<f64>()
            + ft.ln_integral;
        (ll, os, mass, ft)
    });

    let mut ev = Evaluation {
        loglik: 0.0,
        subject_loglik: Vec::with_capacity(rows.len()),
        gamma,
        omega_star: Vec::with_capacity(rows.len()),
        window_mass: Vec::with_capacity(rows.len()),
        rho_hat: Vec::with_capacity(rows.len()),
        kappa: Vec::with_capacity(rows.len()),
        e_ln_rho: Vec::with_capacity(rows.len()),
    };
    for (ll, os, mass, ft) in rows {
        ev.loglik += ll;
        ev.subject_loglik.push(ll);
        ev.omega_star.push(os);
        ev.window_mass.push(mass);
        ev.rho_hat.push(ft.rho_hat);
        ev.kappa.push(ft.kappa);
        ev.e_ln_rho.push(ft.e_ln_rho);
    }
    if !ev.loglik.is_finite() {
        return Err(Error::Evaluation("log-likelihood is not finite".into()));
    }
    Ok(ev)
}

/// `ln L_i` for subject `i`.
pub fn subject_cond_loglik(i: usize, params: &ParamState, ctx: &LikContext) -> Result<f64> {
    ctx.check_params(params)?;
    if i >= ctx.n_subjects() {
        return input(format!("subject index {i} out of range"));
    }
    let ln_theta = log_theta(params, ctx)?;
    let g = crate::model::linear_predictor(ctx.covariates(i), &params.beta)?;
    let omega = params.omega_tau();
    let mass = ctx.window_mass(i, &params.theta);
    let os = omega - (1.0 - params.phi()) * mass;
    let n = ctx.n_captures[i];
    let ft = frailty_terms(n, g * os, g * omega, params.alpha());
    Ok(ctx.exponent[i] as f64 * params.log_phi
        + n as f64 * g.ln()
        + ctx.captures(i).iter().map(|&k| ln_theta[k]).sum::<f64>()
        + ft.ln_integral)
}

/// `sum_i ln L_i`, or `-inf` when any term cannot be evaluated.
pub fn total_cond_loglik(params: &ParamState, ctx: &LikContext) -> f64 {
    evaluate(params, ctx).map_or(f64::NEG_INFINITY, |e| e.loglik)
}

/// `ln` of the `Ga(alpha, alpha)` density.
pub fn gamma_log_density(rho: f64, alpha: f64) -> f64 {
    alpha * alpha.ln() - statrs::function::gamma::ln_gamma(alpha) + (alpha - 1.0) * rho.ln()
        - alpha * rho
}

/// Expected complete conditional log-likelihood with `rho_i` replaced by
/// `rho_hat[i]`.
pub fn eccl_loglik(params: &ParamState, rho_hat: &[f64], ctx: &LikContext) -> Result<f64> {
    ctx.check_params(params)?;
    if rho_hat.len() != ctx.n_subjects() {
        return input("rho_hat length differs from the number of subjects");
    }
    if rho_hat.iter().any(|r| !(*r > 0.0)) {
        return input("rho_hat must be strictly positive");
    }
    let ln_theta = log_theta(params, ctx)?;
    let gamma = ctx.gammas(&params.beta)?;
    let phi = params.phi();
    let omega = params.omega_tau();
    let cum = LikContext::prefix(&params.theta);
    let mut total = 0.0;
    for (i, &r) in rho_hat.iter().enumerate() {
        let os = omega - (1.0 - phi) * ctx.window_mass_prefix(i, &cum);
        let g = gamma[i];
        let n = ctx.n_captures[i] as f64;
        total += ctx.exponent[i] as f64 * params.log_phi
            + n * g.ln()
            + ctx.captures(i).iter().map(|&k| ln_theta[k]).sum::<f64>()
            + n * r.ln()
            - r * g * os
            - (-(-r * g * omega).exp_m1()).ln();
        if let Some(alpha) = params.alpha() {
            total += gamma_log_density(r, alpha);
        }
    }
    Ok(total)
}

/// `A = e^{-x} / (1 - e^{-x})` with `x = rho gamma Omega(tau)`.
pub fn helper_a(gamma: f64, rho: f64, omega_tau: f64) -> Result<f64> {
    if !(gamma > 0.0 && rho > 0.0) || omega_tau < 0.0 {
        return input("helper A needs positive arguments");
    }
    if omega_tau == 0.0 {
        return Err(Error::Degenerate("zero exposure: A diverges".into()));
    }
    Ok(1.0 / (rho * gamma * omega_tau).exp_m1())
}

/// Nelson-Aalen denominator at distinct time `k`:
/// `sum_h rho_h gamma_h (phi^{I_hk} + A_h)`.
pub fn helper_b(
    phi: f64,
    gammas: &[f64],
    rhos: &[f64],
    omega_tau: f64,
    k: usize,
    ctx: &LikContext,
) -> Result<f64> {
    if gammas.len() != ctx.n_subjects() || rhos.len() != ctx.n_subjects() {
        return input("helper B needs one gamma and one rho per subject");
    }
    if k >= ctx.n_times() {
        return input(format!("time index {k} out of range"));
    }
    let mut total = 0.0;
    for i in 0..ctx.n_subjects() {
        let factor = if ctx.window(i).contains(&k) { phi } else { 1.0 };
        total += rhos[i] * gammas[i] * (factor + helper_a(gammas[i], rhos[i], omega_tau)?);
    }
    Ok(total)
}

/// Quantities frozen by an E-step for the following M-step.
///
/// `delta[i]` corrects the truncation term so that the surrogate's gradient
/// equals that of the marginal likelihood at the E-step point; it is zero for
/// the plain plug-in E-step.
#[derive(Debug, Clone, PartialEq)]
pub struct Surrogate {
    pub rho_hat: Vec<f64>,
    pub delta: Vec<f64>,
}

impl Surrogate {
    pub fn plug_in(rho_hat: Vec<f64>) -> Self {
        let delta = vec![0.0; rho_hat.len()];
        Self { rho_hat, delta }
    }

    /// `delta_i = rho_hat A(rho_hat gamma Omega) - E[rho A(rho gamma Omega)]`.
    pub fn exact(ev: &Evaluation, omega_tau: f64) -> Self {
        let delta = ev
            .rho_hat
            .iter()
            .zip(&ev.gamma)
            .zip(&ev.kappa)
            .map(|((&r, &g), &k)| r / (r * g * omega_tau).exp_m1() - k)
            .collect();
        Self {
            rho_hat: ev.rho_hat.clone(),
            delta,
        }
    }

    /// Blends toward `prev` by `weight` in `[0, 1]` (1 keeps `self`).
    pub fn damp(&self, prev: &Surrogate, weight: f64) -> Self {
        let mix = |a: &[f64], b: &[f64]| -> Vec<f64> {
            a.iter()
                .zip(b)
                .map(|(x, y)| weight * x + (1.0 - weight) * y)
                .collect()
        };
        Self {
            rho_hat: mix(&self.rho_hat, &prev.rho_hat),
            delta: mix(&self.delta, &prev.delta),
        }
    }
}

/// Profile surrogate at `(phi, Omega(tau), beta)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pub value: f64,
    /// Derivatives in `(phi, Omega(tau), beta_1..beta_p)`; empty unless asked.
    pub grad: Vec<f64>,
    /// Profiled jumps, summing to `Omega(tau)`.
    pub theta: Vec<f64>,
}

/// Expected complete conditional log-likelihood with the baseline shape
/// profiled out, as a function of `(phi, Omega(tau), beta)` with the E-step
/// quantities held fixed.
///
/// For a time-varying baseline the shape is `dN_k / B_k` rescaled to sum to
/// `Omega(tau)`; otherwise they follow `constant_shape`. Terms that do not
/// depend on these parameters are dropped. Returns `-inf` when some `B_k` is
/// not positive.
pub fn profile(
    phi: f64,
    omega: f64,
    beta: &[f64],
    sur: &Surrogate,
    ctx: &LikContext,
    want_grad: bool,
) -> Result<Profile> {
    let n = ctx.n_subjects();
    let m = ctx.n_times();
    let p = ctx.n_covariates();
    if sur.rho_hat.len() != n || sur.delta.len() != n {
        return input("E-step quantities do not match the number of subjects");
    }
    let gamma = ctx.gammas(beta)?;

    struct Row {
        v: f64,
        w: f64,
        trunc: f64,
        dw_domega: f64,
        gdw_dgamma: f64,
    }
    let rows = par::map(n, |i| {
        let g = gamma[i];
        let v = sur.rho_hat[i] * g;
        let x = v * omega;
        let a = 1.0 / x.exp_m1();
        let dg = sur.delta[i] * g;
        Row {
            v,
            w: v * a - dg,
            trunc: -(-(-x).exp_m1()).ln() + dg * omega,
            dw_domega: -v * v * a * (1.0 + a),
            gdw_dgamma: v * a * (1.0 - x * (1.0 + a)) - dg,
        }
    });

    // Window sums through difference arrays: R_k = sum_i v_i I_ik, and the
    // same weighted by each covariate.
    let mut diff = vec![0.0; m + 1];
    let mut diff_z = vec![0.0; (m + 1) * p];
    let mut v_total = 0.0;
    let mut v_z = vec![0.0; p];
    let mut w_total = 0.0;
    let mut w_prime = 0.0;
    let mut trunc_total = 0.0;
    let mut w_z = vec![0.0; p];
    let mut gw_z = vec![0.0; p];
    let mut n_ln_gamma = 0.0;
    let mut n_z = vec![0.0; p];
    let mut e_total = 0.0;
    for (i, r) in rows.iter().enumerate() {
        let win = ctx.window(i);
        let z = ctx.covariates(i);
        let nc = ctx.n_captures[i] as f64;
        v_total += r.v;
        w_total += r.w;
        w_prime += r.dw_domega;
        trunc_total += r.trunc;
        n_ln_gamma += nc * gamma[i].ln();
        e_total += ctx.exponent[i] as f64;
        if !win.is_empty() {
            diff[win.start] += r.v;
            diff[win.end] -= r.v;
        }
        for h in 0..p {
            v_z[h] += r.v * z[h];
            w_z[h] += r.w * z[h];
            gw_z[h] += r.gdw_dgamma * z[h];
            n_z[h] += nc * z[h];
            if !win.is_empty() {
                diff_z[win.start * p + h] += r.v * z[h];
                diff_z[win.end * p + h] -= r.v * z[h];
            }
        }
    }
    let mut r_k = vec![0.0; m];
    let mut r_kz = vec![0.0; m * p];
    let mut acc = 0.0;
    let mut acc_z = vec![0.0; p];
    for k in 0..m {
        acc += diff[k];
        r_k[k] = acc;
        for h in 0..p {
            acc_z[h] += diff_z[k * p + h];
            r_kz[k * p + h] = acc_z[h];
        }
    }
    let one_minus_phi = 1.0 - phi;
    let d_k: Vec<f64> = r_k.iter().map(|r| v_total - one_minus_phi * r).collect();

    let (theta, sigma, b_k) = if ctx.spec.time_varying {
        let b_k: Vec<f64> = d_k.iter().map(|d| d + w_total).collect();
        if b_k.iter().any(|b| !(*b > 0.0)) {
            return Ok(Profile {
                value: f64::NEG_INFINITY,
                grad: Vec::new(),
                theta: Vec::new(),
            });
        }
        let raw: Vec<f64> = ctx.dn.iter().zip(&b_k).map(|(d, b)| d / b).collect();
        let s: f64 = raw.iter().sum();
        let sigma: Vec<f64> = raw.iter().map(|r| r / s).collect();
        (
            sigma.iter().map(|s| omega * s).collect::<Vec<_>>(),
            sigma,
            b_k,
        )
    } else {
        let sigma = ctx.constant_shape.clone();
        (sigma.iter().map(|s| omega * s).collect(), sigma, Vec::new())
    };

    // sum_i v_i (window mass of i), and the same times z_i.
    let theta_r: f64 = (0..m).map(|k| theta[k] * r_k[k]).sum();
    let theta_rz: Vec<f64> = (0..p)
        .map(|h| (0..m).map(|k| theta[k] * r_kz[k * p + h]).sum())
        .collect();

    let mut value =
        phi.ln() * e_total + n_ln_gamma + trunc_total - omega * v_total + one_minus_phi * theta_r;
    for k in 0..m {
        value += ctx.dn[k] * theta[k].ln();
    }
    if !want_grad {
        return Ok(Profile {
            value,
            grad: Vec::new(),
            theta,
        });
    }

    // d value / dx = sum_k g_k theta_k d ln theta_k / dx + explicit terms,
    // where g_k = dN_k / theta_k - D_k.
    let mut grad = vec![0.0; 2 + p];

    let sum_gt = ctx.total_captures - omega * v_total + one_minus_phi * theta_r;
    grad[0] = e_total / phi - theta_r;
    grad[1] = sum_gt / omega - w_total;
    for h in 0..p {
        grad[2 + h] = n_z[h] - omega * v_z[h] + one_minus_phi * theta_rz[h] - omega * w_z[h];
    }

    if ctx.spec.time_varying {
        let g_theta: Vec<f64> = (0..m).map(|k| ctx.dn[k] - d_k[k] * theta[k]).collect();
        // d ln theta_k = d ln Omega - dB_k / B_k + sum_m sigma_m dB_m / B_m
        let shape_term = |db: &dyn Fn(usize) -> f64| -> f64 {
            let mean: f64 = (0..m).map(|k| sigma[k] * db(k) / b_k[k]).sum();
            (0..m).map(|k| g_theta[k] * (mean - db(k) / b_k[k])).sum()
        };
        grad[0] += shape_term(&|k| r_k[k]);
        grad[1] += shape_term(&|_| w_prime);
        for h in 0..p {
            let extra = gw_z[h];
            grad[2 + h] += shape_term(&|k| v_z[h] - one_minus_phi * r_kz[k * p + h] + extra);
        }
    }

    Ok(Profile { value, grad, theta })
}

/// Analytic derivatives of the profile log-ECCL in `(phi, Omega(tau), beta)`,
/// with `rho_hat` held fixed.
pub fn score_vector(params: &ParamState, rho_hat: &[f64], ctx: &LikContext) -> Result<Vec<f64>> {
    ctx.check_params(params)?;
    let sur = Surrogate::plug_in(rho_hat.to_vec());
    let pr = profile(
        params.phi(),
        params.omega_tau(),
        &params.beta,
        &sur,
        ctx,
        true,
    )?;
    if !pr.value.is_finite() {
        return Err(Error::Evaluation("profile surrogate is not finite".into()));
    }
    Ok(pr.grad)
}

/// Gradient of `sum_i ln L_i` in `(phi, Omega(tau), beta, alpha)` with the
/// baseline shape held fixed (`Omega(tau)` rescales every jump). The `alpha`
/// entry is present only for frailty models.
pub fn marginal_gradient(params: &ParamState, ev: &Evaluation, ctx: &LikContext) -> Vec<f64> {
    let p = ctx.n_covariates();
    let phi = params.phi();
    let omega = params.omega_tau();
    let mut grad = vec![0.0; 2 + p];
    for i in 0..ctx.n_subjects() {
        let g = ev.gamma[i];
        let n = ctx.n_captures[i] as f64;
        let r = ev.rho_hat[i];
        grad[0] += ctx.exponent[i] as f64 / phi - r * g * ev.window_mass[i];
        grad[1] += n / omega - r * g * ev.omega_star[i] / omega - g * ev.kappa[i];
        let resid = n - g * (r * ev.omega_star[i] + omega * ev.kappa[i]);
        for (h, z) in ctx.covariates(i).iter().enumerate() {
            grad[2 + h] += z * resid;
        }
    }
    if let Some(alpha) = params.alpha() {
        let base = alpha.ln() + 1.0 - digamma_unchecked(alpha);
        let d: f64 = (0..ctx.n_subjects())
            .map(|i| base + ev.e_ln_rho[i] - ev.rho_hat[i])
            .sum();
        grad.push(d);
    }
    grad
}
