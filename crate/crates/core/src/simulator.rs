//! Data generation from the full intensity model, plus brute-force
//! quadrature references for the closed-form likelihood.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};
use crate::model::{CaptureHistory, Dataset, ModelSpec, ParamState};
use crate::par;

/// Baseline intensity `omega(t)` on `[0, tau]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BaselineShape {
    Constant {
        rate: f64,
    },
    /// `rates[j]` applies on `[breaks[j-1], breaks[j])`, with `breaks`
    /// holding the interior change points.
    PiecewiseConstant {
        breaks: Vec<f64>,
        rates: Vec<f64>,
    },
    /// `level + amplitude * sin(2 pi t / period)` with `amplitude < level`.
    Sinusoidal {
        level: f64,
        amplitude: f64,
        period: f64,
    },
}

impl BaselineShape {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            Self::Constant { rate } => *rate > 0.0 && rate.is_finite(),
            Self::PiecewiseConstant { breaks, rates } => {
                rates.len() == breaks.len() + 1
                    && rates.iter().all(|r| *r >= 0.0 && r.is_finite())
                    && rates.iter().any(|r| *r > 0.0)
                    && breaks.windows(2).all(|w| w[0] < w[1])
            }
            Self::Sinusoidal {
                level,
                amplitude,
                period,
            } => level.is_finite() && *amplitude >= 0.0 && amplitude < level && *period > 0.0,
        };
        if ok {
            Ok(())
        } else {
            input(format!("invalid or unbounded baseline {self:?}"))
        }
    }

    pub fn rate(&self, t: f64) -> f64 {
        match self {
            Self::Constant { rate } => *rate,
            Self::PiecewiseConstant { breaks, rates } => rates[breaks.partition_point(|&b| b <= t)],
            Self::Sinusoidal {
                level,
                amplitude,
                period,
            } => level + amplitude * (std::f64::consts::TAU * t / period).sin(),
        }
    }

    pub fn sup(&self) -> f64 {
        match self {
            Self::Constant { rate } => *rate,
            Self::PiecewiseConstant { rates, .. } => rates.iter().copied().fold(0.0, f64::max),
            Self::Sinusoidal {
                level, amplitude, ..
            } => level + amplitude,
        }
    }

    /// `Omega(t) = int_0^t omega`.
    pub fn cumulative(&self, t: f64) -> f64 {
        match self {
            Self::Constant { rate } => rate * t,
            Self::PiecewiseConstant { breaks, rates } => {
                let mut acc = 0.0;
                let mut lo = 0.0;
                for (j, &r) in rates.iter().enumerate() {
                    let hi = breaks.get(j).copied().unwrap_or(f64::INFINITY).min(t);
                    if hi > lo {
                        acc += r * (hi - lo);
                        lo = hi;
                    }
                }
                acc
            }
            Self::Sinusoidal {
                level,
                amplitude,
                period,
            } => {
                let w = std::f64::consts::TAU / period;
                level * t + amplitude * (1.0 - (w * t).cos()) / w
            }
        }
    }
}

/// Generator for one covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CovariateGen {
    Bernoulli {
        name: String,
        p: f64,
    },
    Uniform {
        name: String,
        lo: f64,
        hi: f64,
    },
    /// One dummy column `name:level` per level after the first (the
    /// reference).
    Categorical {
        name: String,
        levels: Vec<String>,
        probs: Vec<f64>,
    },
}

impl CovariateGen {
    pub fn columns(&self) -> Vec<String> {
        match self {
            Self::Bernoulli { name, .. } | Self::Uniform { name, .. } => vec![name.clone()],
            Self::Categorical { name, levels, .. } => {
                levels[1..].iter().map(|l| format!("{name}:{l}")).collect()
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            Self::Bernoulli { p, .. } => (0.0..=1.0).contains(p),
            Self::Uniform { lo, hi, .. } => lo < hi && lo.is_finite() && hi.is_finite(),
            Self::Categorical { levels, probs, .. } => {
                levels.len() >= 2
                    && levels.len() == probs.len()
                    && probs.iter().all(|p| *p >= 0.0)
                    && (probs.iter().sum::<f64>() - 1.0).abs() < 1e-9
            }
        };
        if ok {
            Ok(())
        } else {
            input(format!("invalid covariate generator {self:?}"))
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng, out: &mut Vec<f64>) {
        match self {
            Self::Bernoulli { p, .. } => out.push(if rng.gen::<f64>() < *p { 1.0 } else { 0.0 }),
            Self::Uniform { lo, hi, .. } => out.push(lo + (hi - lo) * rng.gen::<f64>()),
            Self::Categorical { probs, .. } => {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut level = probs.len() - 1;
                for (j, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        level = j;
                        break;
                    }
                }
                out.extend((1..probs.len()).map(|j| if j == level { 1.0 } else { 0.0 }));
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_true: usize,
    pub tau: f64,
    /// Frailty shape; `None` fixes every `rho_i` at one.
    pub alpha: Option<f64>,
    /// One coefficient per generated column.
    pub beta: Vec<f64>,
    pub covariates: Vec<CovariateGen>,
    pub phi: f64,
    pub c1: u32,
    pub c2: Option<u32>,
    pub delta_b: Option<f64>,
    pub baseline: BaselineShape,
    pub seed: u64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_true == 0 {
            return input("n_true must be positive");
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return input("tau must be positive and finite");
        }
        if self.alpha.is_some_and(|a| !(a > 0.0) || !a.is_finite()) {
            return input("alpha must be positive");
        }
        if !(self.phi > 0.0) || !self.phi.is_finite() {
            return input("phi must be positive");
        }
        crate::model::Behavior::new(self.c1, self.c2, self.delta_b)?;
        self.baseline.validate()?;
        for c in &self.covariates {
            c.validate()?;
        }
        if self.beta.len() != self.covariate_names().len() {
            return input(format!(
                "beta has {} entries for {} covariate columns",
                self.beta.len(),
                self.covariate_names().len()
            ));
        }
        Ok(())
    }

    pub fn covariate_names(&self) -> Vec<String> {
        self.covariates
            .iter()
            .flat_map(CovariateGen::columns)
            .collect()
    }

    /// Intensity multiplier while `count` captures have happened, the
    /// `c1`-th of them at `onset`.
    fn behavior_factor(&self, count: u32, onset: f64, t: f64) -> f64 {
        let on = count >= self.c1
            && self.c2.is_none_or(|c2| count < c2)
            && self.delta_b.is_none_or(|d| t <= onset + d);
        if on {
            self.phi
        } else {
            1.0
        }
    }
}

/// A member of the simulated population, observed or not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSubject {
    pub subject_id: String,
    pub rho: f64,
    pub covariates: Vec<f64>,
    pub times: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub population: Vec<SimSubject>,
    /// Subjects with at least one capture.
    pub observed: Dataset,
}

/// Simulates the whole population. Subject `i` draws from its own stream
/// of a ChaCha8 generator keyed by `seed`, so results do not depend on
/// the number of threads.
pub fn simulate(cfg: &SimConfig) -> Result<SimOutput> {
    cfg.validate()?;
    let frailty = match cfg.alpha {
        Some(a) => Some(Gamma::new(a, 1.0 / a).map_err(|e| Error::Input(e.to_string()))?),
        None => None,
    };
    let width = (cfg.n_true - 1).to_string().len();
    let sup = cfg.baseline.sup();
    let population = par::map(cfg.n_true, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64);
        let rho = frailty.as_ref().map_or(1.0, |g| g.sample(&mut rng));
        let mut z = Vec::new();
        for c in &cfg.covariates {
            c.draw(&mut rng, &mut z);
        }
        let gamma = z
            .iter()
            .zip(&cfg.beta)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            .exp();
        let majorant = rho * gamma * cfg.phi.max(1.0) * sup;
        let mut times = Vec::new();
        let mut onset = f64::INFINITY;
        let mut t = 0.0;
        if majorant > 0.0 {
            loop {
                let e: f64 = Exp1.sample(&mut rng);
                t += e / majorant;
                if t > cfg.tau {
                    break;
                }
                let count = times.len() as u32;
                let rate =
                    rho * gamma * cfg.baseline.rate(t) * cfg.behavior_factor(count, onset, t);
                if rng.gen::<f64>() * majorant < rate {
                    times.push(t);
                    if times.len() as u32 == cfg.c1 {
                        onset = t;
                    }
                }
            }
        }
        SimSubject {
            subject_id: format!("s{i:0width$}"),
            rho,
            covariates: z,
            times,
        }
    });
    let histories = population
        .iter()
        .filter(|s| !s.times.is_empty())
        .map(|s| CaptureHistory::new(s.subject_id.clone(), s.times.clone(), s.covariates.clone()))
        .collect::<Result<Vec<_>>>()?;
    if histories.is_empty() {
        return Err(Error::Degenerate("no subject was captured".into()));
    }
    let observed = Dataset::new(cfg.tau, cfg.covariate_names(), histories)?;
    Ok(SimOutput {
        population,
        observed,
    })
}

/// Probability that a subject with multiplier `gamma` is captured at least
/// once, with the frailty integrated out.
pub fn detection_probability(gamma: f64, omega_tau: f64, alpha: Option<f64>) -> f64 {
    match alpha {
        Some(a) => 1.0 - (a / (a + gamma * omega_tau)).powf(a),
        None => -(-gamma * omega_tau).exp_m1(),
    }
}

// Gauss-Kronrod 7/15 abscissae and weights on [-1, 1].
const GK_X: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const GK_W: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];
const G_W: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = GK_W[7] * fc;
    let mut gauss = G_W[3] * fc;
    for j in 0..7 {
        let s = f(c - h * GK_X[j]) + f(c + h * GK_X[j]);
        kronrod += GK_W[j] * s;
        if j % 2 == 1 {
            gauss += G_W[j / 2] * s;
        }
    }
    (kronrod * h, ((kronrod - gauss) * h).abs())
}

/// Adaptive Gauss-Kronrod integration of `f` over `[a, b]` to relative
/// accuracy `rel_tol`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, rel_tol: f64) -> Result<f64> {
    let mut parts = vec![(a, b, gk15(&f, a, b))];
    for _ in 0..5000 {
        let total: f64 = parts.iter().map(|p| p.2 .0).sum();
        let err: f64 = parts.iter().map(|p| p.2 .1).sum();
        if !total.is_finite() || !err.is_finite() {
            return Err(Error::Quadrature("integrand is not finite".into()));
        }
        if err <= rel_tol * total.abs() || err < 1e-300 {
            return Ok(total);
        }
        let (j, _) = parts
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .2 .1.total_cmp(&y.1 .2 .1))
            .unwrap();
        let (lo, hi, _) = parts.swap_remove(j);
        let mid = 0.5 * (lo + hi);
        parts.push((lo, mid, gk15(&f, lo, mid)));
        parts.push((mid, hi, gk15(&f, mid, hi)));
    }
    Err(Error::Quadrature(format!("no convergence on [{a}, {b}]")))
}

/// `ln int_0^inf h(rho) g(rho; alpha) d rho` where `ln h` is `ln_h`,
/// integrated on `u = rho / (scale + rho)` after removing the peak.
fn ln_frailty_integral<F: Fn(f64) -> f64>(ln_h: F, alpha: f64, scale: f64) -> Result<f64> {
    let ln_g = |r: f64| {
        alpha * alpha.ln() - statrs::function::gamma::ln_gamma(alpha) + (alpha - 1.0) * r.ln()
            - alpha * r
    };
    let ln_f = |u: f64| {
        let r = scale * u / (1.0 - u);
        ln_h(r) + ln_g(r) + (scale / ((1.0 - u) * (1.0 - u))).ln()
    };
    // Peak of the transformed integrand on a coarse grid.
    let peak = (1..2000)
        .map(|j| ln_f(j as f64 / 2000.0))
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    let f = |u: f64| {
        if u <= 0.0 || u >= 1.0 {
            return 0.0;
        }
        let v = (ln_f(u) - peak).exp();
        if v.is_finite() {
            v
        } else {
            0.0
        }
    };
    let mut total = 0.0;
    // Split so the bulk near the peak is resolved before the tails.
    let cuts = [0.0, 0.05, 0.25, 0.5, 0.75, 0.95, 1.0];
    for w in cuts.windows(2) {
        total += integrate(f, w[0], w[1], 1e-14)?;
    }
    if !(total > 0.0) {
        return Err(Error::Quadrature("integral vanished".into()));
    }
    Ok(total.ln() + peak)
}

/// Exposure and event factors of one subject, computed by walking its
/// captures along the jump times of the baseline.
struct Walk {
    n: u32,
    /// `sum_k theta_k phi^{active(t_k)}` over all jumps
    omega_star: f64,
    /// `sum over captures of ln(gamma theta phi^{active})`
    ln_events: f64,
    gamma: f64,
}

fn walk(h: &CaptureHistory, times: &[f64], params: &ParamState, spec: &ModelSpec) -> Result<Walk> {
    let b = spec.behavior_or_classic();
    let phi = if spec.behavior.is_some() {
        params.phi()
    } else {
        1.0
    };
    let beta = if spec.covariates {
        params.beta.as_slice()
    } else {
        &[]
    };
    let z = if spec.covariates {
        h.covariates.as_slice()
    } else {
        &[]
    };
    let gamma = crate::model::linear_predictor(z, beta)?;
    let factor = |t: f64| {
        let count = h.times.iter().filter(|&&x| x < t).count() as u32;
        let onset = h.capture_time(b.c1);
        let on = count >= b.c1
            && b.c2.is_none_or(|c2| count < c2)
            && b.delta_b.is_none_or(|d| t <= onset + d);
        if on {
            phi
        } else {
            1.0
        }
    };
    let mut omega_star = 0.0;
    for (k, &t) in times.iter().enumerate() {
        omega_star += params.theta[k] * factor(t);
    }
    let mut ln_events = 0.0;
    for &t in &h.times {
        let k = times
            .iter()
            .position(|&x| x == t)
            .ok_or_else(|| Error::Input(format!("capture at {t} has no baseline jump")))?;
        ln_events += (gamma * params.theta[k] * factor(t)).ln();
    }
    Ok(Walk {
        n: h.n_captures() as u32,
        omega_star,
        ln_events,
        gamma,
    })
}

fn jump_times(data: &Dataset) -> Vec<f64> {
    let mut t: Vec<f64> = data
        .histories
        .iter()
        .flat_map(|h| h.times.iter().copied())
        .collect();
    t.sort_by(f64::total_cmp);
    t.dedup();
    t
}

/// Conditional log-likelihood by numerical integration over each
/// subject's frailty, for checking the closed form on small instances.
/// Each history's likelihood given `rho` is divided by its detection
/// probability given `rho` before integrating against the Gamma density.
pub fn oracle_cond_loglik(data: &Dataset, params: &ParamState, spec: &ModelSpec) -> Result<f64> {
    let times = jump_times(data);
    if params.theta.len() != times.len() {
        return input("one jump per distinct capture time is required");
    }
    let omega: f64 = params.theta.iter().sum();
    let mut total = 0.0;
    for h in &data.histories {
        let w = walk(h, &times, params, spec)?;
        let (go_star, go) = (w.gamma * w.omega_star, w.gamma * omega);
        let n = w.n as f64;
        total += w.ln_events
            + match params.alpha().filter(|_| spec.frailty) {
                None => -go_star - (-(-go).exp_m1()).ln(),
                Some(a) => {
                    let scale = (a + n) / (a + go_star);
                    ln_frailty_integral(
                        |r| n * r.ln() - r * go_star - (-(-r * go).exp_m1()).ln(),
                        a,
                        scale,
                    )?
                }
            };
    }
    Ok(total)
}

/// Posterior mean of each subject's frailty by numerical integration, in
/// data order.
pub fn oracle_posterior_mean(
    data: &Dataset,
    params: &ParamState,
    spec: &ModelSpec,
) -> Result<Vec<f64>> {
    let times = jump_times(data);
    if params.theta.len() != times.len() {
        return input("one jump per distinct capture time is required");
    }
    let Some(a) = params.alpha().filter(|_| spec.frailty) else {
        return Ok(vec![1.0; data.len()]);
    };
    data.histories
        .iter()
        .map(|h| {
            let w = walk(h, &times, params, spec)?;
            let go_star = w.gamma * w.omega_star;
            let go = w.gamma * params.theta.iter().sum::<f64>();
            let n = w.n as f64;
            let scale = (a + n) / (a + go_star);
            let trunc = |r: f64| -r * go_star - (-(-r * go).exp_m1()).ln();
            let num = ln_frailty_integral(|r| (n + 1.0) * r.ln() + trunc(r), a, scale)?;
            let den = ln_frailty_integral(|r| n * r.ln() + trunc(r), a, scale)?;
            Ok((num - den).exp())
        })
        .collect()
}

/// Kolmogorov-Smirnov test of `sample` against Uniform(0, 1); returns the
/// statistic and its asymptotic p-value.
pub fn ks_uniform(sample: &[f64]) -> (f64, f64) {
    let mut x = sample.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    let d = x
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let v = v.clamp(0.0, 1.0);
            ((i as f64 + 1.0) / n - v).max(v - i as f64 / n)
        })
        .fold(0.0, f64::max);
    let sn = n.sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    (d, kolmogorov_sf(lambda))
}

/// `P(K > lambda)` for the Kolmogorov distribution.
fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}
