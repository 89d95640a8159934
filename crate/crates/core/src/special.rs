//! Hurwitz zeta and the Gamma-family helpers used by the closed-form
//! likelihood.
//!
//! The zeta routines work with the scaled series
//! `a^s * zeta(s, a) = 1 + sum_{n >= 1} (1 + n/a)^{-s}`, which stays finite
//! when `zeta` itself under- or overflows (large `s`, large `a`).
//! The tail is summed directly until either it has converged or the
//! Euler-Maclaurin expansion is safe to apply at the current abscissa.

use crate::error::{Error, Result};

/// `B_{2j} / (2j)!` for `j = 1..=10`.
const BERNOULLI_OVER_FACTORIAL: [f64; 10] = [
    1.0 / 12.0,
    -1.0 / 720.0,
    1.0 / 30_240.0,
    -1.0 / 1_209_600.0,
    1.0 / 47_900_160.0,
    -691.0 / 1_307_674_368_000.0,
    1.0 / 74_724_249_600.0,
    -3617.0 / 10_670_622_842_880_000.0,
    43_867.0 / 5_109_094_217_170_944_000.0,
    -174_611.0 / 802_857_662_698_291_200_000.0,
];

const EPS: f64 = 1e-17;

/// Scaled tail `sum_{n >= 1} (1 + n/a)^{-s}` and its derivative in `s`.
#[derive(Debug, Clone, Copy)]
pub struct ScaledTail {
    pub value: f64,
    pub d_s: f64,
}

impl ScaledTail {
    /// `ln(a^s zeta(s, a))`
    pub fn ln_sum(&self) -> f64 {
        self.value.ln_1p()
    }

    /// `d/ds ln(a^s zeta(s, a))`
    pub fn d_ln_sum(&self) -> f64 {
        self.d_s / (1.0 + self.value)
    }
}

/// Caller guarantees `s > 1`, `a > 0`.
pub fn scaled_tail(s: f64, a: f64) -> ScaledTail {
    debug_assert!(s > 1.0 && a > 0.0, "scaled_tail({s}, {a})");
    // Abscissa beyond which the asymptotic series converges quickly:
    // successive terms shrink roughly by ((s + 2j) / (2 pi x))^2.
    let x_safe = 1.6 * (s + 20.0);
    let mut sum = 0.0;
    let mut d_sum = 0.0;
    let mut n = 1u64;
    loop {
        let x = a + n as f64;
        if x >= x_safe {
            let (v, dv) = euler_maclaurin_tail(s, a, n as f64, sum);
            return ScaledTail {
                value: sum + v,
                d_s: d_sum + dv,
            };
        }
        let u = (n as f64 / a).ln_1p();
        let r = (-s * u).exp();
        sum += r;
        d_sum -= u * r;
        // Remaining terms are bounded by the integral from n.
        let rest = r * x / (s - 1.0);
        if rest <= EPS * (1.0 + sum) && rest * (u + 1.0 / (s - 1.0)) <= EPS * (1.0 + d_sum.abs()) {
            return ScaledTail {
                value: sum,
                d_s: d_sum,
            };
        }
        n += 1;
    }
}

/// Euler-Maclaurin estimate of `sum_{n >= m} (1 + n/a)^{-s}` and its
/// `s`-derivative.
fn euler_maclaurin_tail(s: f64, a: f64, m: f64, partial: f64) -> (f64, f64) {
    let u = (m / a).ln_1p();
    let f = (-s * u).exp();
    if f == 0.0 {
        return (0.0, 0.0);
    }
    let x = a + m;
    let integral = x * f / (s - 1.0);
    let mut value = integral + 0.5 * f;
    let mut d_value = integral * (-u - 1.0 / (s - 1.0)) - 0.5 * u * f;

    // (s)_{2j-1} / x^{2j-1}
    let mut ratio = s / x;
    let mut harmonic = 1.0 / s;
    for (j, coef) in BERNOULLI_OVER_FACTORIAL.iter().enumerate() {
        let term = coef * ratio * f;
        value += term;
        d_value += term * (harmonic - u);
        if term.abs() <= EPS * (1.0 + partial + value) {
            break;
        }
        let k = 2.0 * j as f64 + 1.0;
        ratio *= (s + k) * (s + k + 1.0) / (x * x);
        harmonic += 1.0 / (s + k) + 1.0 / (s + k + 1.0);
    }
    (value, d_value)
}

/// `sum_{n >= 1} n (1 + n/a)^{-s-1}`, equal to `a * (T(s) - T(s + 1))` where
/// `T` is [`scaled_tail`], but summed without the cancellation that
/// difference suffers when `a` is large.
///
/// Caller guarantees `s > 1`, `a > 0`.
pub fn scaled_moment_tail(s: f64, a: f64) -> f64 {
    debug_assert!(s > 1.0 && a > 0.0, "scaled_moment_tail({s}, {a})");
    let x_safe = 1.6 * (s + 20.0);
    let peak = a / s;
    let mut sum = 0.0;
    let mut n = 1u64;
    loop {
        let m = n as f64;
        let x = a + m;
        if x >= x_safe {
            return sum + moment_euler_maclaurin_tail(s, a, m, sum);
        }
        let v = m / a;
        let f = (-s * v.ln_1p()).exp();
        sum += m * f / (1.0 + v);
        // Beyond the peak the terms decrease, so the integral from n
        // bounds what is left.
        if m >= peak {
            let rest = a * a * f * (s * v + 1.0) / (s * (s - 1.0));
            if rest <= EPS * sum {
                return sum;
            }
        }
        n += 1;
    }
}

/// Euler-Maclaurin estimate of `sum_{n >= m} n (1 + n/a)^{-s-1}`.
///
/// With `v = m/a` and `x = a + m`, the odd derivatives of the summand are
/// `-(s)_{2j-1} a^2 (1+v)^{-s} (s v - 2j + 1) / (s x^{2j})`.
fn moment_euler_maclaurin_tail(s: f64, a: f64, m: f64, partial: f64) -> f64 {
    let v = m / a;
    let f = (-s * v.ln_1p()).exp();
    if f == 0.0 {
        return 0.0;
    }
    let x = a + m;
    let scale = a * a * f;
    let mut value = scale * (s * v + 1.0) / (s * (s - 1.0)) + 0.5 * m * f * a / x;
    let mut ratio = s / x;
    for (j, coef) in BERNOULLI_OVER_FACTORIAL.iter().enumerate() {
        let k = 2.0 * j as f64 + 1.0;
        let term = coef * ratio / x * scale * (s * v - k) / s;
        value += term;
        if term.abs() <= EPS * (partial + value) {
            break;
        }
        ratio *= (s + k) * (s + k + 1.0) / (x * x);
    }
    value
}

fn check_zeta_args(s: f64, a: f64) -> Result<()> {
    if !(s > 1.0) || !s.is_finite() {
        return Err(Error::Domain(format!("zeta order s = {s} must exceed 1")));
    }
    if !(a > 0.0) || !a.is_finite() {
        return Err(Error::Domain(format!(
            "zeta shift a = {a} must be positive"
        )));
    }
    Ok(())
}

/// Hurwitz zeta `sum_{n >= 0} (n + a)^{-s}`.
pub fn hurwitz_zeta(s: f64, a: f64) -> Result<f64> {
    check_zeta_args(s, a)?;
    let tail = scaled_tail(s, a);
    Ok((-s * a.ln()).exp() * (1.0 + tail.value))
}

/// Natural log of the Hurwitz zeta; finite even where `zeta` underflows.
pub fn ln_hurwitz_zeta(s: f64, a: f64) -> Result<f64> {
    check_zeta_args(s, a)?;
    Ok(-s * a.ln() + scaled_tail(s, a).ln_sum())
}

/// `zeta(s + 1, a) / zeta(s, a)` without forming either factor.
pub fn zeta_ratio(s: f64, a: f64) -> Result<f64> {
    check_zeta_args(s, a)?;
    let lower = scaled_tail(s, a).value;
    let upper = scaled_tail(s + 1.0, a).value;
    Ok((1.0 + upper) / ((1.0 + lower) * a))
}

/// `int_0^inf x^p e^{-b x} / (1 - e^{-c x}) dx = Gamma(p + 1) / c^{p + 1} zeta(p + 1, b / c)`.
pub fn zeta_integral(p: f64, b: f64, c: f64) -> Result<f64> {
    if !(p > 0.0) || !(b > 0.0) || !(c > 0.0) {
        return Err(Error::Domain(format!(
            "zeta integral needs positive arguments, got ({p}, {b}, {c})"
        )));
    }
    let ln = log_gamma(p + 1.0)? - (p + 1.0) * c.ln() + ln_hurwitz_zeta(p + 1.0, b / c)?;
    Ok(ln.exp())
}

pub fn log_gamma(x: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::Domain(format!("log_gamma needs x > 0, got {x}")));
    }
    Ok(statrs::function::gamma::ln_gamma(x))
}

pub fn digamma(x: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::Domain(format!("digamma needs x > 0, got {x}")));
    }
    Ok(digamma_unchecked(x))
}

/// Recurrence up to `x >= 10`, then the asymptotic series.
pub(crate) fn digamma_unchecked(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // Coefficients B_{2k} / (2k)
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0
                                    - inv2
                                        * (1.0 / 132.0
                                            - inv2 * (691.0 / 32_760.0 - inv2 / 12.0))))));
    acc + x.ln() - 0.5 * inv - series
}

/// `ln Gamma(x + n) - ln Gamma(x)` for integer `n`, summed exactly so that it
/// stays accurate for very large `x`.
pub fn ln_rising(x: f64, n: u32) -> f64 {
    (0..n).map(|j| (x + j as f64).ln()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    /// Direct summation with an integral tail bound; slow but independent.
    fn zeta_by_series(s: f64, a: f64) -> f64 {
        let mut sum = 0.0;
        let mut n = 0.0;
        loop {
            let term = (n + a).powf(-s);
            sum += term;
            // Remaining sum lies between int_{n+1}^inf and int_n^inf.
            let upper = (n + a).powf(1.0 - s) / (s - 1.0);
            let lower = (n + 1.0 + a).powf(1.0 - s) / (s - 1.0);
            if upper - lower < 1e-16 * sum {
                return sum + 0.5 * (upper + lower) - 0.5 * term;
            }
            n += 1.0;
            if n > 5e7 {
                panic!("series oracle too slow for s = {s}");
            }
        }
    }

    #[test]
    fn riemann_values() {
        let z2 = hurwitz_zeta(2.0, 1.0).unwrap();
        assert!((z2 - PI * PI / 6.0).abs() < 1e-12, "{z2}");
        let z22 = hurwitz_zeta(2.0, 2.0).unwrap();
        assert!((z22 - (PI * PI / 6.0 - 1.0)).abs() < 1e-12);
        let z4 = hurwitz_zeta(4.0, 1.0).unwrap();
        assert!((z4 - PI.powi(4) / 90.0).abs() < 1e-13);
    }

    #[test]
    fn series_oracle_agreement() {
        // The oracle tail correction is only accurate to second order, so
        // use orders where the direct sum converges fast.
        for &(s, a) in &[(3.5, 0.7), (6.0, 0.1), (4.2, 3.3), (12.0, 0.5)] {
            let expected = zeta_by_series(s, a);
            let got = hurwitz_zeta(s, a).unwrap();
            assert!(
                ((got - expected) / expected).abs() < 1e-12,
                "zeta({s}, {a}) = {got}, oracle {expected}"
            );
        }
    }

    #[test]
    fn frozen_value() {
        // mpmath, 30 significant digits
        let v = hurwitz_zeta(3.5, 0.7).unwrap();
        assert!((v - 3.692_768_064_686_827).abs() < 1e-12, "{v}");
    }

    #[test]
    fn large_arguments_stay_finite() {
        let l = ln_hurwitz_zeta(1e8 + 3.0, 2e10).unwrap();
        assert!(l.is_finite());
        // a^s zeta(s, a) -> 1 / (1 - e^{-s/a}) when s, a grow with s/a fixed
        let t = scaled_tail(1e8, 2e8).value;
        let limit = 1.0 / (-(-0.5f64).exp_m1()) - 1.0;
        assert!((t - limit).abs() < 1e-6, "{t} vs {limit}");
        let r = zeta_ratio(150.0, 1.0e4).unwrap();
        assert!(r > 0.0 && r < 1e-3);
    }

    #[test]
    fn derivative_in_s_matches_finite_difference() {
        for &(s, a) in &[
            (1.5, 0.3),
            (3.0, 12.0),
            (40.0, 900.0),
            (2.2, 0.01),
            (150.0, 20.0),
        ] {
            let h = 1e-5 * s;
            let fd = (scaled_tail(s + h, a).ln_sum() - scaled_tail(s - h, a).ln_sum()) / (2.0 * h);
            let an = scaled_tail(s, a).d_ln_sum();
            assert!(
                (fd - an).abs() < 1e-7 * (1.0 + an.abs()),
                "d/ds at ({s}, {a}): {an} vs {fd}"
            );
        }
    }

    #[test]
    fn moment_tail_matches_brute_force_and_difference() {
        for &(s, a) in &[
            (2.5, 0.4),
            (3.0, 12.0),
            (7.0, 150.0),
            (60.0, 45.0),
            (1e3, 4e4),
            (1.2, 1e5),
        ] {
            let mut brute = 0.0;
            let mut n: f64 = 1.0;
            loop {
                let term = n * (1.0 + n / a).powf(-s - 1.0);
                brute += term;
                if n > a / s && term < 1e-19 * brute {
                    break;
                }
                n += 1.0;
                if n > 2e7 {
                    break;
                }
            }
            let got = scaled_moment_tail(s, a);
            let diff = a * (scaled_tail(s, a).value - scaled_tail(s + 1.0, a).value);
            if n <= 2e7 {
                assert!(
                    ((got - brute) / brute).abs() < 1e-10,
                    "({s}, {a}): {got} vs {brute}"
                );
            }
            assert!(
                ((got - diff) / got).abs() < 1e-8,
                "({s}, {a}): {got} vs {diff}"
            );
        }
        // Degenerate-frailty limit: sum n e^{-n c} = e^{-c} / (1 - e^{-c})^2
        let c: f64 = 0.8;
        let a = 1e9;
        let got = scaled_moment_tail(a * c, a);
        let limit = (-c).exp() / (-(-c).exp_m1()).powi(2);
        assert!(((got - limit) / limit).abs() < 1e-7, "{got} vs {limit}");
    }

    #[test]
    fn domain_errors() {
        assert!(hurwitz_zeta(1.0, 1.0).is_err());
        assert!(hurwitz_zeta(2.0, 0.0).is_err());
        assert!(zeta_integral(0.0, 1.0, 1.0).is_err());
        assert!(log_gamma(0.0).is_err());
        assert!(digamma(-1.0).is_err());
    }

    #[test]
    fn gamma_helpers() {
        assert!(log_gamma(1.0).unwrap().abs() < 1e-15);
        let x = 3.7;
        let diff = log_gamma(x + 1.0).unwrap() - log_gamma(x).unwrap();
        assert!((diff - x.ln()).abs() < 1e-12);
        // Euler-Mascheroni from the limit H_n - ln(n + 1/2) + 1/(24 n^2)
        let n = 1_000_000u32;
        let harmonic: f64 = (1..=n).rev().map(|k| 1.0 / k as f64).sum();
        let nf = n as f64;
        let gamma_oracle = harmonic - (nf + 0.5).ln() - 1.0 / (24.0 * nf * nf);
        assert!((digamma(1.0).unwrap() + gamma_oracle).abs() < 1e-12);
        assert!((digamma(1.0).unwrap() + 0.577_215_664_901_532_9).abs() < 1e-14);
        // psi(x + 1) = psi(x) + 1/x
        for &x in &[0.01, 0.7, 4.5, 33.0, 1e6] {
            let lhs = digamma(x + 1.0).unwrap();
            let rhs = digamma(x).unwrap() + 1.0 / x;
            assert!((lhs - rhs).abs() < 1e-12 * (1.0 + lhs.abs()), "psi at {x}");
        }
        assert!(
            (ln_rising(2.5, 3) - (log_gamma(5.5).unwrap() - log_gamma(2.5).unwrap())).abs() < 1e-13
        );
    }
}
