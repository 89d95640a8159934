//! Domain types and the semantics of the capture intensity
//!
//! The intensity of subject `i` at time `t` is
//! `rho_i * exp(beta' z_i) * phi^{active_i(t)} * omega(t)`, where the
//! behavioral indicator `active_i(t)` is left-continuous: a capture at `t`
//! never changes the intensity at `t` itself.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};

/// One subject's capture times on `(0, tau]` and its covariate row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureHistory {
    pub subject_id: String,
    pub times: Vec<f64>,
    pub covariates: Vec<f64>,
}

impl CaptureHistory {
    /// Builds a history, sorting the times and rejecting duplicates or
    /// non-positive instants.
    pub fn new(
        subject_id: impl Into<String>,
        mut times: Vec<f64>,
        covariates: Vec<f64>,
    ) -> Result<Self> {
        let subject_id = subject_id.into();
        if times.is_empty() {
            return input(format!("subject {subject_id} has no captures"));
        }
        if times.iter().any(|t| !t.is_finite() || *t <= 0.0) {
            return input(format!(
                "subject {subject_id} has a capture time outside (0, tau]"
            ));
        }
        times.sort_by(f64::total_cmp);
        if times.windows(2).any(|w| w[0] == w[1]) {
            return input(format!(
                "subject {subject_id} has duplicate capture timestamps"
            ));
        }
        Ok(Self {
            subject_id,
            times,
            covariates,
        })
    }

    pub fn n_captures(&self) -> usize {
        self.times.len()
    }

    /// Time of the `j`-th capture (1-based), `+inf` when `j` exceeds the
    /// number of captures.
    pub fn capture_time(&self, j: u32) -> f64 {
        if j == 0 {
            return 0.0;
        }
        self.times
            .get(j as usize - 1)
            .copied()
            .unwrap_or(f64::INFINITY)
    }

    /// Number of captures strictly before `t`.
    pub fn count_before(&self, t: f64) -> usize {
        self.times.partition_point(|&x| x < t)
    }
}

/// Delayed-onset, finite-memory behavioral response.
///
/// The response switches on at the `c1`-th capture and stays on until the
/// `c2`-th capture or until `delta_b` time units after onset, whichever
/// comes first. `None` stands for an unbounded memory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Behavior {
    pub c1: u32,
    pub c2: Option<u32>,
    pub delta_b: Option<f64>,
}

impl Behavior {
    /// Response from the first capture onward, never forgotten.
    pub const fn classic() -> Self {
        Self {
            c1: 1,
            c2: None,
            delta_b: None,
        }
    }

    pub fn new(c1: u32, c2: Option<u32>, delta_b: Option<f64>) -> Result<Self> {
        let b = Self { c1, c2, delta_b };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.c1 < 1 {
            return input("c1 must be at least 1");
        }
        if let Some(c2) = self.c2 {
            if c2 <= self.c1 {
                return input(format!("c2 ({c2}) must exceed c1 ({})", self.c1));
            }
        }
        if let Some(d) = self.delta_b {
            if !(d > 0.0) {
                return input("delta_b must be positive");
            }
        }
        Ok(())
    }

    pub fn is_classic(&self) -> bool {
        self.c1 == 1 && self.c2.is_none() && self.delta_b.is_none()
    }

    /// Half-open interval `(start, end]` on which the response is on for
    /// this history, or `None` when the onset capture never happens.
    pub fn window(&self, history: &CaptureHistory, tau: f64) -> Option<ActiveWindow> {
        let start = history.capture_time(self.c1);
        if !start.is_finite() {
            return None;
        }
        let by_count = self.c2.map_or(f64::INFINITY, |c2| history.capture_time(c2));
        let by_time = self.delta_b.map_or(f64::INFINITY, |d| start + d);
        Some(ActiveWindow {
            start,
            end: by_count.min(by_time).min(tau),
        })
    }
}

impl fmt::Display for Behavior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c2 = self.c2.map_or("inf".to_string(), |c| c.to_string());
        let d = self.delta_b.map_or("inf".to_string(), |d| format!("{d}"));
        write!(f, "c1={} c2={} delta_b={}", self.c1, c2, d)
    }
}

/// `(start, end]`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActiveWindow {
    pub start: f64,
    pub end: f64,
}

impl ActiveWindow {
    pub fn contains(&self, t: f64) -> bool {
        t > self.start && t <= self.end
    }
}

/// Which effects of the full model are switched on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub tau: f64,
    /// `h`: Gamma frailty
    pub frailty: bool,
    /// `o`: observed covariates
    pub covariates: bool,
    pub covariate_names: Vec<String>,
    /// `t`: nonparametric baseline; otherwise a constant rate
    pub time_varying: bool,
    /// `b`: behavioral response
    pub behavior: Option<Behavior>,
}

impl ModelSpec {
    /// `M_0` on a window of length `tau`.
    pub fn null(tau: f64) -> Self {
        Self {
            tau,
            frailty: false,
            covariates: false,
            covariate_names: Vec::new(),
            time_varying: false,
            behavior: None,
        }
    }

    pub fn from_name(name: ModelName, tau: f64, covariate_names: Vec<String>) -> Self {
        Self {
            tau,
            frailty: name.h,
            covariates: name.o,
            covariate_names: if name.o { covariate_names } else { Vec::new() },
            time_varying: name.t,
            behavior: name.b.then(Behavior::classic),
        }
    }

    pub fn with_behavior(mut self, behavior: Behavior) -> Self {
        self.behavior = Some(behavior);
        self
    }

    pub fn name(&self) -> ModelName {
        ModelName {
            h: self.frailty,
            o: self.covariates,
            t: self.time_varying,
            b: self.behavior.is_some(),
        }
    }

    /// Behavior used to build indicators; without a `b` effect the indicator
    /// is irrelevant because `phi` is held at 1.
    pub fn behavior_or_classic(&self) -> Behavior {
        self.behavior.unwrap_or(Behavior::classic())
    }

    pub fn n_covariates(&self) -> usize {
        if self.covariates {
            self.covariate_names.len()
        } else {
            0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return input("tau must be a positive finite number");
        }
        if let Some(b) = &self.behavior {
            b.validate()?;
        }
        Ok(())
    }
}

/// A model in the lattice below `M_hotb`, e.g. `M_htb`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelName {
    pub h: bool,
    pub o: bool,
    pub t: bool,
    pub b: bool,
}

impl ModelName {
    pub const FULL: ModelName = ModelName {
        h: true,
        o: true,
        t: true,
        b: true,
    };
    pub const NULL: ModelName = ModelName {
        h: false,
        o: false,
        t: false,
        b: false,
    };

    /// All sixteen models, largest first.
    pub fn lattice() -> Vec<ModelName> {
        let mut all: Vec<ModelName> = (0u8..16)
            .map(|bits| ModelName {
                h: bits & 8 != 0,
                o: bits & 4 != 0,
                t: bits & 2 != 0,
                b: bits & 1 != 0,
            })
            .collect();
        all.sort_by_key(|m| std::cmp::Reverse(m.n_effects()));
        all
    }

    pub fn n_effects(&self) -> usize {
        [self.h, self.o, self.t, self.b]
            .iter()
            .filter(|x| **x)
            .count()
    }

    /// `self` is obtained from `other` by switching effects off.
    pub fn is_nested_in(&self, other: &ModelName) -> bool {
        (!self.h || other.h) && (!self.o || other.o) && (!self.t || other.t) && (!self.b || other.b)
    }

    pub fn suffix(&self) -> String {
        let mut s = String::new();
        for (on, c) in [(self.h, 'h'), (self.o, 'o'), (self.t, 't'), (self.b, 'b')] {
            if on {
                s.push(c);
            }
        }
        if s.is_empty() {
            s.push('0');
        }
        s
    }

    /// Restrictions imposed on the full model, as printed in the usual table.
    pub fn restrictions(&self) -> Vec<&'static str> {
        let mut r = Vec::new();
        if !self.t {
            r.push("omega(t) = omega");
        }
        if !self.h {
            r.push("rho_i = 1");
        }
        if !self.o {
            r.push("beta = 0");
        }
        if !self.b {
            r.push("phi = 1");
        }
        r
    }
}

impl fmt::Display for ModelName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "M_{}", self.suffix())
    }
}

impl std::str::FromStr for ModelName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let trimmed = s.trim();
        let body = trimmed
            .strip_prefix("M_")
            .or_else(|| trimmed.strip_prefix("M"))
            .or_else(|| trimmed.strip_prefix("m_"))
            .unwrap_or(trimmed);
        if body == "0" {
            return Ok(ModelName::NULL);
        }
        if body.is_empty() {
            return input(format!("unknown model name {s:?}"));
        }
        let mut name = ModelName::NULL;
        let mut last = 0usize;
        for c in body.chars() {
            let rank = match c {
                'h' => 1,
                'o' => 2,
                't' => 3,
                'b' => 4,
                _ => return input(format!("unknown model name {s:?}")),
            };
            if rank <= last {
                return input(format!(
                    "unknown model name {s:?} (effects must be ordered h, o, t, b)"
                ));
            }
            last = rank;
            match c {
                'h' => name.h = true,
                'o' => name.o = true,
                't' => name.t = true,
                _ => name.b = true,
            }
        }
        Ok(name)
    }
}

/// Parameters in the unconstrained parameterization plus the baseline jumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamState {
    pub beta: Vec<f64>,
    pub log_phi: f64,
    /// `None` means no frailty (`rho_i = 1`).
    pub log_alpha: Option<f64>,
    pub log_omega_tau: f64,
    /// Jump sizes at the ordered distinct capture times; they sum to
    /// `exp(log_omega_tau)`.
    pub theta: Vec<f64>,
}

impl ParamState {
    pub fn phi(&self) -> f64 {
        self.log_phi.exp()
    }

    pub fn alpha(&self) -> Option<f64> {
        self.log_alpha.map(f64::exp)
    }

    pub fn omega_tau(&self) -> f64 {
        self.log_omega_tau.exp()
    }

    /// Rescales the jumps so they sum to `omega_tau`.
    pub fn set_omega_tau(&mut self, omega_tau: f64) {
        let total: f64 = self.theta.iter().sum();
        if total > 0.0 {
            let f = omega_tau / total;
            self.theta.iter_mut().for_each(|t| *t *= f);
        }
        self.log_omega_tau = omega_tau.ln();
    }

    /// Relative gap between `sum(theta)` and `omega_tau`.
    pub fn constraint_gap(&self) -> f64 {
        let total: f64 = self.theta.iter().sum();
        (total - self.omega_tau()).abs() / self.omega_tau()
    }
}

/// Cumulative baseline as a right-continuous step function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineFn {
    times: Vec<f64>,
    cumulative: Vec<f64>,
}

impl BaselineFn {
    pub fn new(times: Vec<f64>, jumps: &[f64]) -> Result<Self> {
        if times.len() != jumps.len() {
            return input("baseline times and jumps differ in length");
        }
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return input("baseline jump times must be strictly increasing");
        }
        if jumps.iter().any(|j| *j < 0.0 || !j.is_finite()) {
            return input("baseline jumps must be nonnegative");
        }
        let mut acc = 0.0;
        let cumulative = jumps
            .iter()
            .map(|j| {
                acc += j;
                acc
            })
            .collect();
        Ok(Self { times, cumulative })
    }

    /// `Omega(t)`; constant past the last jump, so values beyond `tau`
    /// equal `Omega(tau)`.
    pub fn eval(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&x| x <= t);
        if k == 0 {
            0.0
        } else {
            self.cumulative[k - 1]
        }
    }

    pub fn total(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn cumulative(&self) -> &[f64] {
        &self.cumulative
    }
}

/// Observed subjects (each captured at least once) on a common window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub tau: f64,
    pub covariate_names: Vec<String>,
    pub histories: Vec<CaptureHistory>,
}

impl Dataset {
    pub fn new(
        tau: f64,
        covariate_names: Vec<String>,
        histories: Vec<CaptureHistory>,
    ) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return input("tau must be a positive finite number");
        }
        let p = covariate_names.len();
        for h in &histories {
            if h.covariates.len() != p {
                return input(format!(
                    "subject {} has {} covariates, expected {p}",
                    h.subject_id,
                    h.covariates.len()
                ));
            }
            if h.times.last().is_some_and(|&t| t > tau) {
                return input(format!(
                    "subject {} has a capture after tau = {tau}",
                    h.subject_id
                ));
            }
        }
        Ok(Self {
            tau,
            covariate_names,
            histories,
        })
    }

    pub fn len(&self) -> usize {
        self.histories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.histories.is_empty()
    }

    pub fn total_captures(&self) -> usize {
        self.histories.iter().map(|h| h.n_captures()).sum()
    }

    /// Drops captures after `t` and subjects left without captures; the
    /// window becomes `(0, t]`.
    pub fn truncate(&self, t: f64) -> Result<Self> {
        if !(t > 0.0) {
            return input("truncation time must be positive");
        }
        let histories: Vec<CaptureHistory> = self
            .histories
            .iter()
            .filter_map(|h| {
                let times: Vec<f64> = h.times.iter().copied().filter(|&x| x <= t).collect();
                (!times.is_empty()).then(|| CaptureHistory {
                    subject_id: h.subject_id.clone(),
                    times,
                    covariates: h.covariates.clone(),
                })
            })
            .collect();
        if histories.is_empty() {
            return input(format!("no captures remain after truncation at {t}"));
        }
        Dataset::new(t.min(self.tau), self.covariate_names.clone(), histories)
    }
}

/// Whether the behavioral factor applies at time `t`.
pub fn behavioral_active(history: &CaptureHistory, t: f64, spec: &ModelSpec) -> bool {
    spec.behavior_or_classic()
        .window(history, spec.tau)
        .is_some_and(|w| w.contains(t))
}

/// `exp(beta . z)`
pub fn linear_predictor(z: &[f64], beta: &[f64]) -> Result<f64> {
    if z.len() != beta.len() {
        return input(format!(
            "covariate vector has length {}, coefficients {}",
            z.len(),
            beta.len()
        ));
    }
    Ok(z.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>().exp())
}

/// Probability of at least one capture given the frailty: `1 - exp(-rho gamma Omega(tau))`.
pub fn capture_prob(rho: f64, gamma: f64, omega_tau: f64) -> Result<f64> {
    if rho < 0.0 || gamma < 0.0 || omega_tau < 0.0 {
        return input("capture probability arguments must be nonnegative");
    }
    Ok(-(-rho * gamma * omega_tau).exp_m1())
}

/// Behavior-weighted exposure `Omega*_i(tau)`.
pub fn omega_star(
    history: &CaptureHistory,
    baseline: &BaselineFn,
    phi: f64,
    spec: &ModelSpec,
) -> f64 {
    let omega_tau = baseline.eval(spec.tau);
    match spec.behavior_or_classic().window(history, spec.tau) {
        None => omega_tau,
        Some(w) => omega_tau + (1.0 - phi) * (baseline.eval(w.start) - baseline.eval(w.end)),
    }
}

/// Number of captures that happened while the behavioral factor was on.
///
/// For the classic response this is `N_i(tau) - 1`.
pub fn behavioral_exponent(history: &CaptureHistory, spec: &ModelSpec) -> u32 {
    match spec.behavior_or_classic().window(history, spec.tau) {
        None => 0,
        Some(w) => history.times.iter().filter(|&&t| w.contains(t)).count() as u32,
    }
}

/// Checks that some subject is recaptured inside the response window.
pub fn validate_identifiability(data: &[CaptureHistory], spec: &ModelSpec) -> Result<()> {
    if data.is_empty() {
        return input("empty dataset");
    }
    let Some(b) = spec.behavior else {
        return Ok(());
    };
    let ok = data.iter().any(|h| {
        let onset = h.capture_time(b.c1);
        let next = h.capture_time(b.c1 + 1);
        let limit = b.delta_b.map_or(f64::INFINITY, |d| onset + d);
        next.is_finite() && next > onset && next <= limit
    });
    if ok {
        Ok(())
    } else {
        let window = b.delta_b.map_or(String::new(), |d| {
            format!(" within {d} time units of capture {}", b.c1)
        });
        Err(Error::Identifiability(format!(
            "phi is not identified: no subject has a capture number {}{window}",
            b.c1 + 1,
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hist(times: &[f64]) -> CaptureHistory {
        CaptureHistory::new("s", times.to_vec(), vec![]).unwrap()
    }

    fn spec_with(b: Behavior) -> ModelSpec {
        ModelSpec::null(1.0).with_behavior(b)
    }

    #[test]
    fn classic_activity() {
        let spec = spec_with(Behavior::classic());
        let h = hist(&[0.3, 0.6]);
        assert!(!behavioral_active(&h, 0.2, &spec));
        assert!(!behavioral_active(&h, 0.3, &spec));
        assert!(behavioral_active(&h, 0.31, &spec));
        assert!(behavioral_active(&h, 0.9, &spec));
    }

    #[test]
    fn delayed_onset_memory_expires() {
        let b = Behavior::new(2, None, Some(0.3)).unwrap();
        let spec = spec_with(b);
        let h = hist(&[0.2, 0.5]);
        assert!(!behavioral_active(&h, 0.9, &spec));
        assert!(behavioral_active(&h, 0.8, &spec));
        assert!(!behavioral_active(&h, 0.4, &spec));
    }

    #[test]
    fn count_memory_ends_at_c2() {
        let b = Behavior::new(1, Some(3), None).unwrap();
        let spec = spec_with(b);
        let h = hist(&[0.1, 0.2, 0.3, 0.4]);
        assert!(behavioral_active(&h, 0.3, &spec));
        assert!(!behavioral_active(&h, 0.35, &spec));
        assert_eq!(behavioral_exponent(&h, &spec), 2);
    }

    #[test]
    fn linear_predictor_values() {
        assert_eq!(linear_predictor(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), 1.0);
        let v = linear_predictor(&[1.0, 0.0], &[-0.65, 0.1]).unwrap();
        assert!((v - 0.522_045_776_761_016).abs() < 1e-12);
        let e = linear_predictor(&[2.0], &[0.5]).unwrap();
        assert!((e - std::f64::consts::E).abs() < 1e-15);
        assert!(linear_predictor(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn capture_prob_values() {
        assert_eq!(capture_prob(1.0, 1.0, 0.0).unwrap(), 0.0);
        let ln2 = std::f64::consts::LN_2;
        assert!((capture_prob(1.0, 1.0, ln2).unwrap() - 0.5).abs() < 1e-15);
        assert!((capture_prob(2.0, 0.5, ln2).unwrap() - 0.5).abs() < 1e-15);
        assert!(capture_prob(-1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn omega_star_examples() {
        // Omega(t) = t on (0, 1], approximated by a fine step function that
        // is exact at the grid points used below.
        let times: Vec<f64> = (1..=10).map(|k| k as f64 / 10.0).collect();
        let base = BaselineFn::new(times, &[0.1; 10]).unwrap();
        let classic = spec_with(Behavior::classic());
        let h = hist(&[0.4]);
        assert!((omega_star(&h, &base, 1.0, &classic) - 1.0).abs() < 1e-12);
        assert!((omega_star(&h, &base, 0.5, &classic) - 0.7).abs() < 1e-12);

        let delayed = spec_with(Behavior::new(2, None, None).unwrap());
        let h2 = hist(&[0.2, 0.5]);
        assert!((omega_star(&h2, &base, 0.5, &delayed) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn exponent_examples() {
        let classic = spec_with(Behavior::classic());
        assert_eq!(behavioral_exponent(&hist(&[0.1, 0.2, 0.3]), &classic), 2);
        let delayed = spec_with(Behavior::new(2, None, None).unwrap());
        assert_eq!(behavioral_exponent(&hist(&[0.2, 0.5, 0.9]), &delayed), 1);
        let late = spec_with(Behavior::new(3, Some(5), Some(0.1)).unwrap());
        assert_eq!(behavioral_exponent(&hist(&[0.7]), &late), 0);
        assert_eq!(behavioral_exponent(&hist(&[0.7]), &classic), 0);
    }

    #[test]
    fn identifiability() {
        let classic = spec_with(Behavior::classic());
        let data = vec![hist(&[0.1]), hist(&[0.2, 0.4])];
        assert!(validate_identifiability(&data, &classic).is_ok());

        let singles = vec![hist(&[0.1]), hist(&[0.3])];
        assert!(matches!(
            validate_identifiability(&singles, &classic),
            Err(Error::Identifiability(_))
        ));

        let b = spec_with(Behavior::new(2, None, Some(0.1)).unwrap());
        let one = vec![hist(&[0.2, 0.5, 0.9])];
        assert!(matches!(
            validate_identifiability(&one, &b),
            Err(Error::Identifiability(_))
        ));
        assert!(matches!(
            validate_identifiability(&[], &classic),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn history_validation() {
        assert!(CaptureHistory::new("a", vec![0.0, 0.5], vec![]).is_err());
        assert!(CaptureHistory::new("a", vec![0.5, 0.5], vec![]).is_err());
        let h = CaptureHistory::new("a", vec![0.5, 0.2], vec![]).unwrap();
        assert_eq!(h.times, vec![0.2, 0.5]);
        assert_eq!(h.capture_time(3), f64::INFINITY);
    }

    #[test]
    fn behavior_validation() {
        assert!(Behavior::new(0, None, None).is_err());
        assert!(Behavior::new(2, Some(2), None).is_err());
        assert!(Behavior::new(1, None, Some(0.0)).is_err());
        assert!(Behavior::new(1, Some(2), Some(3.0)).is_ok());
    }

    #[test]
    fn lattice_has_sixteen_names() {
        let all = ModelName::lattice();
        assert_eq!(all.len(), 16);
        assert_eq!(all[0], ModelName::FULL);
        assert_eq!(*all.last().unwrap(), ModelName::NULL);
        for m in &all {
            let parsed: ModelName = m.to_string().parse().unwrap();
            assert_eq!(parsed, *m);
            assert!(ModelName::NULL.is_nested_in(m));
            assert!(m.is_nested_in(&ModelName::FULL));
        }
        assert!("M_bh".parse::<ModelName>().is_err());
        assert!("hotx".parse::<ModelName>().is_err());
        assert_eq!("hotb".parse::<ModelName>().unwrap(), ModelName::FULL);
    }

    #[test]
    fn baseline_is_clamped() {
        let b = BaselineFn::new(vec![0.2, 0.7], &[0.5, 0.25]).unwrap();
        assert_eq!(b.eval(0.0), 0.0);
        assert_eq!(b.eval(0.2), 0.5);
        assert_eq!(b.eval(0.69), 0.5);
        assert_eq!(b.eval(5.0), 0.75);
    }
}
