//! Population size by inverse-probability weighting of the observed
//! subjects, with a conditional variance decomposition.

use serde::{Deserialize, Serialize};

use crate::em::{state_at, Coordinate, FitResult};
use crate::error::{input, Error, Result};
use crate::likelihood::{evaluate, LikContext};
use crate::model::ParamState;

/// Which detection probability weights a subject.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// `1 - (1 + gamma Omega / alpha)^(-alpha)`: detection probability with
    /// the frailty integrated out.
    #[default]
    Marginal,
    /// `1 - exp(-rho_hat gamma Omega)`: posterior-mean frailty plugged in.
    PlugIn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopEstimate {
    pub weighting: Weighting,
    pub n_observed: usize,
    pub n_hat: f64,
    pub var_binomial: f64,
    pub var_param: f64,
    pub se: f64,
    pub ci95: (f64, f64),
    /// `n_hat` divided by the catchable fraction, when one is given.
    pub scaled_estimate: Option<f64>,
    /// The other weighting's point estimate, for comparison.
    pub n_hat_alternative: f64,
}

/// `sum_i 1 / (1 - exp(-rho_i gamma_i Omega(tau)))`.
pub fn ht_estimate(rho_hat: &[f64], gammas: &[f64], omega_tau: f64) -> Result<f64> {
    ht_from_weights(&plug_in_weights(rho_hat, gammas, omega_tau)?)
}

pub fn plug_in_weights(rho_hat: &[f64], gammas: &[f64], omega_tau: f64) -> Result<Vec<f64>> {
    if rho_hat.len() != gammas.len() {
        return input("rho_hat and gammas differ in length");
    }
    if !(omega_tau > 0.0)
        || rho_hat
            .iter()
            .chain(gammas)
            .any(|v| !(*v > 0.0) || !v.is_finite())
    {
        return input("weights need positive finite inputs");
    }
    Ok(rho_hat
        .iter()
        .zip(gammas)
        .map(|(r, g)| -(-r * g * omega_tau).exp_m1())
        .collect())
}

/// Detection probabilities with `rho ~ Gamma(alpha, alpha)` integrated out;
/// without frailty they reduce to `1 - exp(-gamma Omega(tau))`.
pub fn marginal_weights(gammas: &[f64], omega_tau: f64, alpha: Option<f64>) -> Result<Vec<f64>> {
    if !(omega_tau > 0.0) || gammas.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return input("weights need positive finite inputs");
    }
    Ok(gammas
        .iter()
        .map(|g| match alpha {
            Some(a) => -(-a * (g * omega_tau / a).ln_1p()).exp_m1(),
            None => -(-g * omega_tau).exp_m1(),
        })
        .collect())
}

pub fn ht_from_weights(w: &[f64]) -> Result<f64> {
    if let Some(i) = w.iter().position(|&x| !(x > 0.0)) {
        return Err(Error::Degenerate(format!(
            "subject {i} has detection weight {}",
            w[i]
        )));
    }
    Ok(w.iter().map(|x| 1.0 / x).sum())
}

/// `sum_i (1 - w_i) / w_i^2`, the variance of the estimator given the
/// weights.
pub fn var_binomial(w: &[f64]) -> f64 {
    w.iter().map(|x| (1.0 - x) / (x * x)).sum()
}

fn weights_at(st: &ParamState, ctx: &LikContext, weighting: Weighting) -> Result<Vec<f64>> {
    let gammas = ctx.gammas(&st.beta)?;
    match weighting {
        Weighting::Marginal => marginal_weights(&gammas, st.omega_tau(), st.alpha()),
        Weighting::PlugIn => {
            let ev = evaluate(st, ctx)?;
            plug_in_weights(&ev.rho_hat, &gammas, st.omega_tau())
        }
    }
}

/// `N_hat` as a function of the estimated coordinates, at fixed baseline
/// shape.
fn n_hat_at(fit: &FitResult, ctx: &LikContext, x: &[f64], weighting: Weighting) -> Result<f64> {
    let st = state_at(&fit.params, &fit.coordinates, x, ctx, false)?;
    ht_from_weights(&weights_at(&st, ctx, weighting)?)
}

/// Central-difference gradient of `N_hat` over the fitted coordinates.
/// `rel_step` scales each step by the coordinate's magnitude.
pub fn delta_gradient(
    fit: &FitResult,
    ctx: &LikContext,
    weighting: Weighting,
    rel_step: f64,
) -> Result<Vec<f64>> {
    let x0 = &fit.estimates;
    (0..x0.len())
        .map(|j| {
            let h = match fit.coordinates[j] {
                Coordinate::Beta(_) => rel_step * x0[j].abs().max(1.0),
                _ => rel_step * x0[j],
            };
            let mut up = x0.clone();
            let mut dn = x0.clone();
            up[j] += h;
            dn[j] -= h;
            Ok(
                (n_hat_at(fit, ctx, &up, weighting)? - n_hat_at(fit, ctx, &dn, weighting)?)
                    / (2.0 * h),
            )
        })
        .collect()
}

/// Returns `(var_binomial, var_param)`.
pub fn variance_n(fit: &FitResult, ctx: &LikContext, weighting: Weighting) -> Result<(f64, f64)> {
    let w = weights_at(&fit.params, ctx, weighting)?;
    let cov = fit.covariance()?;
    let g = delta_gradient(fit, ctx, weighting, 1e-4)?;
    // Coordinates held fixed have NaN covariance and contribute nothing.
    let free: Vec<usize> = (0..g.len()).filter(|&i| cov[i][i].is_finite()).collect();
    let var_param = free
        .iter()
        .map(|&i| free.iter().map(|&j| g[i] * cov[i][j] * g[j]).sum::<f64>())
        .sum::<f64>()
        .max(0.0);
    Ok((var_binomial(&w), var_param))
}

pub fn scaled_indirect_estimate(n_hat: f64, fraction: f64) -> Result<f64> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return input(format!("catchable fraction {fraction} must lie in (0, 1]"));
    }
    Ok(n_hat / fraction)
}

/// Point estimate, standard error and Wald interval floored at the number
/// observed.
pub fn estimate_population(
    fit: &FitResult,
    ctx: &LikContext,
    weighting: Weighting,
    catchable_fraction: Option<f64>,
) -> Result<PopEstimate> {
    let w = weights_at(&fit.params, ctx, weighting)?;
    let n_hat = ht_from_weights(&w)?;
    let other = match weighting {
        Weighting::Marginal => Weighting::PlugIn,
        Weighting::PlugIn => Weighting::Marginal,
    };
    let n_hat_alternative = ht_from_weights(&weights_at(&fit.params, ctx, other)?)?;
    let (var_binomial, var_param) = variance_n(fit, ctx, weighting)?;
    let se = (var_binomial + var_param).sqrt();
    let n = ctx.n_subjects();
    let floor = n as f64;
    Ok(PopEstimate {
        weighting,
        n_observed: n,
        n_hat,
        var_binomial,
        var_param,
        se,
        ci95: (
            (n_hat - 1.96 * se).max(floor),
            (n_hat + 1.96 * se).max(floor),
        ),
        scaled_estimate: catchable_fraction
            .map(|f| scaled_indirect_estimate(n_hat, f))
            .transpose()?,
        n_hat_alternative,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::em::{fit, EmConfig};
    use crate::model::{CaptureHistory, Dataset, ModelName, ModelSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ht_examples() {
        // w = 0.25 for a single subject.
        let g = [-(0.75f64).ln()];
        assert!((ht_estimate(&[1.0], &g, 1.0).unwrap() - 4.0).abs() < 1e-12);
        assert!((ht_from_weights(&[0.5, 0.5]).unwrap() - 4.0).abs() < 1e-15);
        let n = ht_estimate(&[1.0; 3], &[1.0; 3], 60.0).unwrap();
        assert!((n - 3.0).abs() < 1e-12);
        assert!(matches!(
            ht_from_weights(&[0.5, 0.0]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn binomial_variance_examples() {
        assert_eq!(var_binomial(&[1.0, 1.0]), 0.0);
        assert!((var_binomial(&[0.5]) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn weights_agree_without_frailty_and_order_with_it() {
        let g = [0.5, 1.0, 2.0];
        let a = marginal_weights(&g, 1.3, None).unwrap();
        let b = plug_in_weights(&[1.0; 3], &g, 1.3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
        // Frailty variance lowers detection (Jensen).
        let c = marginal_weights(&g, 1.3, Some(2.0)).unwrap();
        assert!(c.iter().zip(&a).all(|(x, y)| x < y));
        let big = marginal_weights(&g, 1.3, Some(1e9)).unwrap();
        assert!(big.iter().zip(&a).all(|(x, y)| (x - y).abs() < 1e-8));
    }

    #[test]
    fn scaled_examples() {
        assert!((scaled_indirect_estimate(3.3e6, 2.0 / 3.0).unwrap() - 4.95e6).abs() < 1e-3);
        assert_eq!(scaled_indirect_estimate(7.0, 1.0).unwrap(), 7.0);
        assert_eq!(scaled_indirect_estimate(2.0, 0.5).unwrap(), 4.0);
        assert!(scaled_indirect_estimate(2.0, 0.0).is_err());
        assert!(scaled_indirect_estimate(2.0, 1.5).is_err());
    }

    fn data(seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut hs = Vec::new();
        for i in 0..600 {
            let z: f64 = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
            let rate = 1.2 * (0.5 * z).exp();
            let mut t = 0.0;
            let mut times = Vec::new();
            loop {
                t += -rng.gen::<f64>().ln() / rate;
                if t > 1.0 {
                    break;
                }
                times.push(t);
            }
            if !times.is_empty() {
                hs.push(CaptureHistory::new(format!("{i}"), times, vec![z]).unwrap());
            }
        }
        Dataset::new(1.0, vec!["z".into()], hs).unwrap()
    }

    #[test]
    fn estimate_is_consistent_and_step_stable() {
        let d = data(9);
        let spec = ModelSpec::from_name("ho".parse::<ModelName>().unwrap(), 1.0, vec!["z".into()]);
        let f = fit(&d, &spec, &EmConfig::default()).unwrap();
        let ctx = LikContext::new(&d, &spec).unwrap();
        let est = estimate_population(&f, &ctx, Weighting::Marginal, Some(0.5)).unwrap();
        assert!(est.n_hat >= est.n_observed as f64);
        assert!(
            (est.se * est.se - est.var_binomial - est.var_param).abs() < 1e-9 * est.se * est.se
        );
        assert!(est.ci95.0 >= est.n_observed as f64 && est.ci95.1 > est.n_hat);
        assert_eq!(est.scaled_estimate, Some(2.0 * est.n_hat));
        assert!(est.n_hat > 400.0 && est.n_hat < 900.0, "{}", est.n_hat);

        let g1 = delta_gradient(&f, &ctx, Weighting::Marginal, 1e-4).unwrap();
        let g2 = delta_gradient(&f, &ctx, Weighting::Marginal, 5e-5).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1e-3), "{a} vs {b}");
        }
        let plug = estimate_population(&f, &ctx, Weighting::PlugIn, None).unwrap();
        assert!((plug.n_hat_alternative - est.n_hat).abs() < 1e-9 * est.n_hat);
    }
}
