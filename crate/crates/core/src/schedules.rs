//! Discrete β noise schedules and their derived products.
//!
//! Timesteps are 1-indexed in the math (`t = 1..=T`) and 0-indexed in
//! storage: the value for timestep `t` lives at index `t - 1`.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, RossError};

pub const DEFAULT_STEPS: usize = 1000;
pub const LINEAR_BETA_MIN: f64 = 1e-4;
pub const LINEAR_BETA_MAX: f64 = 0.02;
pub const SCALED_LINEAR_BETA_MIN: f64 = 0.00085;
pub const SCALED_LINEAR_BETA_MAX: f64 = 0.012;
/// Offset of the squared-cosine cumulative schedule.
pub const COSINE_OFFSET: f64 = 0.008;
pub const COSINE_MAX_BETA: f64 = 0.999;
/// The sigmoid schedule sweeps `u` over `[-SIGMOID_RANGE, SIGMOID_RANGE]`.
pub const SIGMOID_RANGE: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    ScaledLinear,
    GlideSoftmax,
    GeodiffSigmoid,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 4] = [
        ScheduleKind::Linear,
        ScheduleKind::ScaledLinear,
        ScheduleKind::GlideSoftmax,
        ScheduleKind::GeodiffSigmoid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::ScaledLinear => "scaled_linear",
            ScheduleKind::GlideSoftmax => "glide_softmax",
            ScheduleKind::GeodiffSigmoid => "geodiff_sigmoid",
        }
    }

    /// Default `(beta_min, beta_max)` for the kind.
    pub fn default_bounds(self) -> (f64, f64) {
        match self {
            ScheduleKind::ScaledLinear => (SCALED_LINEAR_BETA_MIN, SCALED_LINEAR_BETA_MAX),
            _ => (LINEAR_BETA_MIN, LINEAR_BETA_MAX),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScheduleKind {
    type Err = RossError;

    fn from_str(s: &str) -> Result<Self> {
        ScheduleKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| RossError::UnknownKind {
                what: "schedule kind",
                value: s.to_string(),
            })
    }
}

/// How the reverse-step noise scale σ_t is derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// σ_t² = β_t.
    #[default]
    Beta,
    /// σ_t² = β_t (1 - ᾱ_{t-1}) / (1 - ᾱ_t), with ᾱ_0 = 1.
    Posterior,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BetaSchedule {
    pub kind: Option<ScheduleKind>,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    pub sigmas: Vec<f64>,
}

fn lerp_fraction(i: usize, steps: usize) -> f64 {
    if steps == 1 {
        0.0
    } else {
        i as f64 / (steps - 1) as f64
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn cosine_cumulative(t: f64, steps: usize) -> f64 {
    let s = COSINE_OFFSET;
    let f = |x: f64| ((x / steps as f64 + s) / (1.0 + s) * FRAC_PI_2).cos().powi(2);
    f(t) / f(0.0)
}

/// Raw β values for a kind; `i` runs over storage indices `0..steps`.
pub fn beta_values(kind: ScheduleKind, steps: usize, beta_min: f64, beta_max: f64) -> Vec<f64> {
    (0..steps)
        .map(|i| {
            let f = lerp_fraction(i, steps);
            match kind {
                ScheduleKind::Linear => (1.0 - f) * beta_min + f * beta_max,
                ScheduleKind::ScaledLinear => {
                    let (lo, hi) = (beta_min.sqrt(), beta_max.sqrt());
                    ((1.0 - f) * lo + f * hi).powi(2)
                }
                ScheduleKind::GlideSoftmax => {
                    let t = (i + 1) as f64;
                    let ratio = cosine_cumulative(t, steps) / cosine_cumulative(t - 1.0, steps);
                    (1.0 - ratio).min(COSINE_MAX_BETA)
                }
                ScheduleKind::GeodiffSigmoid => {
                    let u = -SIGMOID_RANGE + 2.0 * SIGMOID_RANGE * f;
                    sigmoid(u) * (beta_max - beta_min) + beta_min
                }
            }
        })
        .collect()
}

/// Builds a validated schedule with σ_t² = β_t.
pub fn make_beta_schedule(
    kind: ScheduleKind,
    steps: usize,
    beta_min: f64,
    beta_max: f64,
) -> Result<BetaSchedule> {
    make_beta_schedule_with(kind, steps, beta_min, beta_max, SigmaMode::Beta)
}

pub fn make_beta_schedule_with(
    kind: ScheduleKind,
    steps: usize,
    beta_min: f64,
    beta_max: f64,
    sigma_mode: SigmaMode,
) -> Result<BetaSchedule> {
    if steps == 0 {
        return Err(RossError::InvalidRange("steps must be at least 1".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(RossError::InvalidRange(format!(
            "need 0 < beta_min <= beta_max < 1, got beta_min={beta_min}, beta_max={beta_max}"
        )));
    }
    let betas = beta_values(kind, steps, beta_min, beta_max);
    let mut schedule = BetaSchedule::from_betas(betas, sigma_mode)?;
    schedule.kind = Some(kind);
    Ok(schedule)
}

/// Parses the kind name first so unknown names surface as such.
pub fn make_beta_schedule_named(name: &str, steps: usize, beta_min: f64, beta_max: f64) -> Result<BetaSchedule> {
    make_beta_schedule(name.parse()?, steps, beta_min, beta_max)
}

/// Running product of `1 - β_t`.
pub fn alpha_bars(betas: &[f64]) -> Vec<f64> {
    betas
        .iter()
        .scan(1.0, |acc, &b| {
            *acc *= 1.0 - b;
            Some(*acc)
        })
        .collect()
}

impl BetaSchedule {
    /// A schedule from explicit betas in `[0, 1)`; zero betas are allowed here
    /// so tests can build identity processes.
    pub fn from_betas(betas: Vec<f64>, sigma_mode: SigmaMode) -> Result<Self> {
        if betas.is_empty() {
            return Err(RossError::InvalidRange("empty beta schedule".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b >= 0.0 && **b < 1.0)) {
            return Err(RossError::InvalidRange(format!("beta {b} outside [0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alpha_bars(&betas);
        let sigmas = betas
            .iter()
            .enumerate()
            .map(|(i, &b)| match sigma_mode {
                SigmaMode::Beta => b.sqrt(),
                SigmaMode::Posterior => {
                    let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                    let denom = 1.0 - alpha_bars[i];
                    if denom <= 0.0 {
                        0.0
                    } else {
                        (b * (1.0 - prev) / denom).sqrt()
                    }
                }
            })
            .collect();
        Ok(Self {
            kind: None,
            betas,
            alphas,
            alpha_bars,
            sigmas,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn idx(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(RossError::TimestepOutOfRange {
                t,
                max: self.steps(),
            });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.idx(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alphas[self.idx(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bars[self.idx(t)?])
    }

    pub fn sigma(&self, t: usize) -> Result<f64> {
        Ok(self.sigmas[self.idx(t)?])
    }

    /// CSV with header `t,beta,alpha,alpha_bar,sigma`, one row per timestep.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,beta,alpha,alpha_bar,sigma\n");
        for i in 0..self.steps() {
            out.push_str(&format!(
                "{},{:e},{:e},{:e},{:e}\n",
                i + 1,
                self.betas[i],
                self.alphas[i],
                self.alpha_bars[i],
                self.sigmas[i]
            ));
        }
        out
    }
}

/// Parsed row of a schedule CSV dump.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleRow {
    pub t: usize,
    pub beta: f64,
    pub alpha: f64,
    pub alpha_bar: f64,
    pub sigma: f64,
}

pub fn parse_csv(text: &str) -> Result<Vec<ScheduleRow>> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header.trim() != "t,beta,alpha,alpha_bar,sigma" {
        return Err(RossError::config(format!("unexpected schedule header {header:?}")));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let num = |i: usize| -> Result<f64> {
                f.get(i)
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| RossError::config(format!("bad schedule row {l:?}")))
            };
            Ok(ScheduleRow {
                t: num(0)? as usize,
                beta: num(1)?,
                alpha: num(2)?,
                alpha_bar: num(3)?,
                sigma: num(4)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loop_product(betas: &[f64]) -> Vec<f64> {
        let mut out = Vec::new();
        let mut acc = 1.0;
        for b in betas {
            acc *= 1.0 - b;
            out.push(acc);
        }
        out
    }

    #[test]
    fn linear_three_steps() {
        let s = make_beta_schedule(ScheduleKind::Linear, 3, 0.1, 0.3).unwrap();
        for (b, e) in s.betas.iter().zip([0.1, 0.2, 0.3]) {
            assert!((b - e).abs() < 1e-15);
        }
    }

    #[test]
    fn single_step_takes_beta_min() {
        let s = make_beta_schedule(ScheduleKind::Linear, 1, 0.5, 0.9).unwrap();
        assert_eq!(s.betas, vec![0.5]);
        let s = make_beta_schedule(ScheduleKind::ScaledLinear, 1, 0.5, 0.9).unwrap();
        assert!((s.betas[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_five_steps_against_direct_formula() {
        let s = make_beta_schedule(ScheduleKind::GeodiffSigmoid, 5, 1e-4, 0.02).unwrap();
        let u = [-6.0, -3.0, 0.0, 3.0, 6.0];
        for (b, u) in s.betas.iter().zip(u) {
            let expected = 1.0 / (1.0 + f64::exp(-u)) * (0.02 - 1e-4) + 1e-4;
            assert!((b - expected).abs() < 1e-15, "{b} vs {expected}");
        }
    }

    #[test]
    fn alpha_bars_examples() {
        assert_eq!(alpha_bars(&[0.5, 0.5]), vec![0.5, 0.25]);
        assert_eq!(alpha_bars(&[0.0, 0.0, 0.0]), vec![1.0, 1.0, 1.0]);
        let s = make_beta_schedule(ScheduleKind::Linear, 10, 1e-4, 0.02).unwrap();
        let oracle = loop_product(&s.betas);
        assert!((s.alpha_bars[9] - oracle[9]).abs() < 1e-12);
    }

    #[test]
    fn invalid_bounds_rejected() {
        assert!(matches!(
            make_beta_schedule(ScheduleKind::Linear, 0, 0.1, 0.2),
            Err(RossError::InvalidRange(_))
        ));
        assert!(make_beta_schedule(ScheduleKind::Linear, 3, 0.0, 0.2).is_err());
        assert!(make_beta_schedule(ScheduleKind::Linear, 3, 0.3, 0.2).is_err());
        assert!(make_beta_schedule(ScheduleKind::Linear, 3, 0.1, 1.0).is_err());
        assert!(matches!(
            make_beta_schedule_named("quadratic", 3, 0.1, 0.2),
            Err(RossError::UnknownKind { .. })
        ));
    }

    #[test]
    fn timestep_mapping_is_one_indexed() {
        let s = make_beta_schedule(ScheduleKind::Linear, 3, 0.1, 0.3).unwrap();
        assert_eq!(s.beta(1).unwrap(), s.betas[0]);
        assert!(s.beta(0).is_err());
        assert!(s.beta(4).is_err());
    }

    #[test]
    fn posterior_sigma_vanishes_at_first_step() {
        let s = make_beta_schedule_with(ScheduleKind::Linear, 10, 1e-4, 0.02, SigmaMode::Posterior).unwrap();
        assert_eq!(s.sigmas[0], 0.0);
        assert!(s.sigmas[1..].iter().zip(&s.betas[1..]).all(|(sg, b)| *sg < b.sqrt()));
    }

    #[test]
    fn csv_round_trip() {
        let s = make_beta_schedule(ScheduleKind::GlideSoftmax, 7, 1e-4, 0.02).unwrap();
        let rows = parse_csv(&s.to_csv()).unwrap();
        assert_eq!(rows.len(), 7);
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(r.t, i + 1);
            assert_eq!(r.beta, s.betas[i]);
            assert_eq!(r.alpha_bar, s.alpha_bars[i]);
        }
    }
}
