//! Browser bindings for three operations: count-based estimates, a small
//! simulate-and-fit round trip, and the Hurwitz zeta function.
//!
//! Every export returns a JSON string; the plain functions underneath are
//! usable (and tested) outside the browser.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use recapture::em::{fit_context, EmConfig};
use recapture::likelihood::LikContext;
use recapture::model::{Behavior, ModelName};
use recapture::population::{estimate_population, Weighting};
use recapture::selection::{chao_lower_bound, m0_closed_form, submodel_spec, CountSummary};
use recapture::simulator::{simulate, BaselineShape, CovariateGen, SimConfig};
use recapture::special::hurwitz_zeta;

#[derive(Serialize)]
struct Estimate {
    n_hat: f64,
    se: f64,
}

#[derive(Serialize)]
struct CountsOut {
    n_observed: u64,
    captures: u64,
    chao: Estimate,
    m0: Option<Estimate>,
}

/// Parses `f_1, f_2, ...` (commas or whitespace) and returns both
/// count-based estimators.
pub fn count_estimates(frequencies: &str) -> Result<String, String> {
    let f = frequencies
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<u64>()
                .map_err(|_| format!("`{s}` is not a nonnegative integer"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let counts = CountSummary::new(f).map_err(|e| e.to_string())?;
    let chao = chao_lower_bound(&counts).map_err(|e| e.to_string())?;
    let m0 = m0_closed_form(&counts).ok();
    let out = CountsOut {
        n_observed: counts.n(),
        captures: counts.k(),
        chao: Estimate {
            n_hat: chao.n_hat,
            se: chao.se,
        },
        m0: m0.map(|m| Estimate {
            n_hat: m.n_hat,
            se: m.se,
        }),
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Param {
    name: String,
    estimate: f64,
}

#[derive(Serialize)]
struct RoundTrip {
    n_true: usize,
    n_observed: usize,
    captures: f64,
    converged: bool,
    iterations: usize,
    loglik: f64,
    parameters: Vec<Param>,
    n_hat: Option<f64>,
    ci95: Option<(f64, f64)>,
    warnings: Vec<String>,
}

/// Simulates a population with a binary covariate and a delayed behavioral
/// response on a constant baseline over `[0, 10]`, then fits the full model.
pub fn simulate_and_fit(
    n_true: usize,
    alpha: f64,
    phi: f64,
    beta: f64,
    c1: u32,
    seed: u64,
) -> Result<String, String> {
    if n_true > 5000 {
        return Err("keep the population at 5000 or fewer in the browser".into());
    }
    let cfg = SimConfig {
        n_true,
        tau: 10.0,
        alpha: Some(alpha),
        beta: vec![beta],
        covariates: vec![CovariateGen::Bernoulli {
            name: "x".into(),
            p: 0.5,
        }],
        phi,
        c1,
        c2: None,
        delta_b: None,
        baseline: BaselineShape::Constant { rate: 0.15 },
        seed,
    };
    let data = simulate(&cfg).map_err(|e| e.to_string())?.observed;
    let behavior = Behavior::new(c1, None, None).map_err(|e| e.to_string())?;
    let name: ModelName = "hob".parse().map_err(|e: recapture::Error| e.to_string())?;
    let ctx = LikContext::new(&data, &submodel_spec(&data, name, Some(behavior)))
        .map_err(|e| e.to_string())?;
    let fit = fit_context(&ctx, &EmConfig::default(), None).map_err(|e| e.to_string())?;
    let pop = estimate_population(&fit, &ctx, Weighting::Marginal, None);
    let mut warnings = fit.warnings.clone();
    if let Err(e) = &pop {
        warnings.push(e.to_string());
    }
    let out = RoundTrip {
        n_true,
        n_observed: data.len(),
        captures: ctx.total_captures,
        converged: fit.converged,
        iterations: fit.iterations,
        loglik: fit.loglik,
        parameters: fit
            .labels
            .iter()
            .zip(&fit.estimates)
            .map(|(name, &estimate)| Param {
                name: name.clone(),
                estimate,
            })
            .collect(),
        n_hat: pop.as_ref().ok().map(|p| p.n_hat),
        ci95: pop.as_ref().ok().map(|p| p.ci95),
        warnings,
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

/// `zeta(s, a)` together with the first terms of its series.
pub fn zeta(s: f64, a: f64) -> Result<String, String> {
    let value = hurwitz_zeta(s, a).map_err(|e| e.to_string())?;
    let terms: Vec<f64> = (0..5).map(|n| (n as f64 + a).powf(-s)).collect();
    serde_json::to_string(
        &serde_json::json!({ "s": s, "a": a, "value": value, "first_terms": terms }),
    )
    .map_err(|e| e.to_string())
}

#[wasm_bindgen(js_name = countEstimates)]
pub fn count_estimates_js(frequencies: &str) -> Result<String, JsValue> {
    count_estimates(frequencies).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = simulateAndFit)]
pub fn simulate_and_fit_js(
    n_true: usize,
    alpha: f64,
    phi: f64,
    beta: f64,
    c1: u32,
    seed: u32,
) -> Result<String, JsValue> {
    simulate_and_fit(n_true, alpha, phi, beta, c1, u64::from(seed))
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = hurwitzZeta)]
pub fn zeta_js(s: f64, a: f64) -> Result<String, JsValue> {
    zeta(s, a).map_err(|e| JsValue::from_str(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_from_text() {
        let v: serde_json::Value =
            serde_json::from_str(&count_estimates("50785, 1124 60\n4").unwrap()).unwrap();
        let chao = v["chao"]["n_hat"].as_f64().unwrap();
        assert!((chao / 1.199e6 - 1.0).abs() < 1e-3);
        assert_eq!(v["n_observed"], 51973);
        assert!(count_estimates("3, x").is_err());
    }

    #[test]
    fn round_trip_is_seeded() {
        let a = simulate_and_fit(300, 2.0, 0.5, 0.7, 2, 9).unwrap();
        let b = simulate_and_fit(300, 2.0, 0.5, 0.7, 2, 9).unwrap();
        assert_eq!(a, b);
        let v: serde_json::Value = serde_json::from_str(&a).unwrap();
        assert!(v["converged"].as_bool().unwrap());
        assert!(v["n_hat"].as_f64().unwrap() >= v["n_observed"].as_f64().unwrap());
        assert!(simulate_and_fit(10_000, 2.0, 0.5, 0.7, 2, 9).is_err());
    }

    #[test]
    fn zeta_riemann() {
        let v: serde_json::Value = serde_json::from_str(&zeta(2.0, 1.0).unwrap()).unwrap();
        let z = v["value"].as_f64().unwrap();
        assert!((z - std::f64::consts::PI.powi(2) / 6.0).abs() < 1e-12);
        assert!(zeta(1.0, 1.0).is_err());
    }
}
