//! Mixture Gaussian prior, sparsification threshold, annealing schedule and
//! sparsity calibration.
//!
//! Each weight has density `lambda N(0, sigma1^2) + (1 - lambda) N(0, sigma0^2)`
//! with a narrow spike `sigma0` and a wide slab `sigma1`. A weight is kept
//! when the slab's posterior responsibility exceeds one half, which happens
//! exactly when its magnitude exceeds [`MixturePrior::threshold`].

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixturePrior {
    pub lambda_n: f64,
    pub sigma0_sq: f64,
    pub sigma1_sq: f64,
}

fn log_normal0(x: f64, var: f64) -> f64 {
    -0.5 * (2.0 * PI * var).ln() - 0.5 * x * x / var
}

impl MixturePrior {
    pub fn new(lambda_n: f64, sigma0_sq: f64, sigma1_sq: f64) -> Result<Self> {
        let p = Self { lambda_n, sigma0_sq, sigma1_sq };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_n > 0.0 && self.lambda_n < 1.0) {
            return Err(Error::InvalidArgument(format!("lambda_n = {} not in (0, 1)", self.lambda_n)));
        }
        if !(self.sigma0_sq > 0.0 && self.sigma0_sq.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma0_sq = {} must be > 0", self.sigma0_sq)));
        }
        if !(self.sigma1_sq > self.sigma0_sq && self.sigma1_sq.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sigma1_sq = {} must exceed sigma0_sq = {}",
                self.sigma1_sq, self.sigma0_sq
            )));
        }
        Ok(())
    }

    pub fn with_sigma0_sq(&self, sigma0_sq: f64) -> Self {
        Self { sigma0_sq, ..*self }
    }

    /// Log-weights of the slab and spike components at `beta`.
    fn log_components(&self, beta: f64) -> (f64, f64) {
        (
            self.lambda_n.ln() + log_normal0(beta, self.sigma1_sq),
            (1.0 - self.lambda_n).ln() + log_normal0(beta, self.sigma0_sq),
        )
    }

    /// Log density of one weight.
    pub fn log_density(&self, beta: f64) -> f64 {
        let (a, b) = self.log_components(beta);
        let m = a.max(b);
        m + ((a - m).exp() + (b - m).exp()).ln()
    }

    /// Posterior probability that `beta` came from the slab.
    pub fn responsibility(&self, beta: f64) -> f64 {
        let (a, b) = self.log_components(beta);
        // 1 / (1 + exp(b - a)) without overflow
        let d = b - a;
        if d > 0.0 {
            let e = (-d).exp();
            e / (1.0 + e)
        } else {
            1.0 / (1.0 + d.exp())
        }
    }

    /// Derivative of the log density at `beta`.
    pub fn grad_log_density(&self, beta: f64) -> f64 {
        let r = self.responsibility(beta);
        -beta * (r / self.sigma1_sq + (1.0 - r) / self.sigma0_sq)
    }

    /// Magnitude above which the slab responsibility exceeds 0.5.
    pub fn threshold(&self) -> Result<f64> {
        self.validate()?;
        let (s0, s1, l) = (self.sigma0_sq.sqrt(), self.sigma1_sq.sqrt(), self.lambda_n);
        if (1.0 - l) * s1 <= l * s0 {
            return Err(Error::InvalidArgument(format!(
                "no real threshold: (1 - lambda) sigma1 <= lambda sigma0 for lambda = {l}"
            )));
        }
        let arg = ((1.0 - l) / l * (s1 / s0)).ln();
        Ok(2f64.sqrt() * s0 * s1 / (self.sigma1_sq - self.sigma0_sq).sqrt() * arg.sqrt())
    }
}

/// Sum of per-weight log densities.
pub fn log_prior(beta: &[f64], prior: &MixturePrior) -> Result<f64> {
    prior.validate()?;
    if let Some(i) = beta.iter().position(|b| !b.is_finite()) {
        return Err(Error::NonFinite(format!("parameter {i} is {}", beta[i])));
    }
    Ok(beta.iter().map(|&b| prior.log_density(b)).sum())
}

/// Gradient of [`log_prior`].
pub fn grad_log_prior(beta: &[f64], prior: &MixturePrior) -> Vec<f64> {
    let k = Kernel::new(prior);
    beta.iter().map(|&b| k.eval(b).1).collect()
}

/// Per-weight log density and its derivative, with the mixture constants
/// hoisted out of the loop.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Kernel {
    slab0: f64,
    c: f64,
    k: f64,
    inv0: f64,
    inv1: f64,
}

impl Kernel {
    pub(crate) fn new(p: &MixturePrior) -> Self {
        let (l, s0, s1) = (p.lambda_n, p.sigma0_sq, p.sigma1_sq);
        Self {
            slab0: l.ln() - 0.5 * (2.0 * PI * s1).ln(),
            // spike minus slab log-weight is c - k beta^2
            c: (1.0 - l).ln() - l.ln() + 0.5 * (s1 / s0).ln(),
            k: 0.5 * (1.0 / s0 - 1.0 / s1),
            inv0: 1.0 / s0,
            inv1: 1.0 / s1,
        }
    }

    #[inline]
    pub(crate) fn eval(&self, beta: f64) -> (f64, f64) {
        let b2 = beta * beta;
        let a = self.slab0 - 0.5 * b2 * self.inv1;
        let d = self.c - self.k * b2;
        let e = (-d.abs()).exp();
        let (logd, r) = if d > 0.0 {
            (a + d + e.ln_1p(), e / (1.0 + e))
        } else {
            (a + e.ln_1p(), 1.0 / (1.0 + e))
        };
        (logd, -beta * (r * self.inv1 + (1.0 - r) * self.inv0))
    }
}

/// Fraction of entries with `|beta| <= threshold`.
pub fn predicted_sparsity(beta: &[f64], prior: &MixturePrior) -> Result<f64> {
    let t = prior.threshold()?;
    Ok(sparsity_at(beta, t))
}

fn sparsity_at(beta: &[f64], t: f64) -> f64 {
    if beta.is_empty() {
        return 0.0;
    }
    beta.iter().filter(|b| b.abs() <= t).count() as f64 / beta.len() as f64
}

/// Outcome of [`calibrate_sigma0_init`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub sigma0_init_sq: f64,
    pub achieved_sparsity: f64,
    /// True when the target could not be met within tolerance and the
    /// closest endpoint was returned.
    pub warning: bool,
}

/// Bisects `sigma0^2` over `[1e-12, sigma1^2 (1 - 1e-6)]` so that the
/// predicted sparsity of `beta` matches `target` within `tol`.
pub fn calibrate_sigma0_init(
    beta: &[f64],
    template: &MixturePrior,
    target: f64,
    tol: f64,
) -> Result<Calibration> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::InvalidArgument(format!("target sparsity {target} not in (0, 1)")));
    }
    let lo_end = 1e-12;
    let hi_end = template.sigma1_sq * (1.0 - 1e-6);
    let at = |s0: f64| -> Result<f64> { predicted_sparsity(beta, &template.with_sigma0_sq(s0)) };
    let (s_lo, s_hi) = (at(lo_end)?, at(hi_end)?);
    if target <= s_lo + tol || target >= s_hi - tol {
        let (s0, s) = if (s_lo - target).abs() <= (s_hi - target).abs() {
            (lo_end, s_lo)
        } else {
            (hi_end, s_hi)
        };
        let ok = (s - target).abs() <= tol;
        return Ok(Calibration { sigma0_init_sq: s0, achieved_sparsity: s, warning: !ok });
    }
    // bisect in log space; sparsity is nondecreasing in sigma0
    let (mut lo, mut hi) = (lo_end.ln(), hi_end.ln());
    let mut best = (hi_end, s_hi);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let s0 = mid.exp();
        let s = at(s0)?;
        if (s - target).abs() < (best.1 - target).abs() {
            best = (s0, s);
        }
        if (s - target).abs() <= tol {
            return Ok(Calibration { sigma0_init_sq: s0, achieved_sparsity: s, warning: false });
        }
        if s < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Calibration { sigma0_init_sq: best.0, achieved_sparsity: best.1, warning: true })
}

/// Iteration layout of prior annealing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnealSchedule {
    #[serde(rename = "T1")]
    pub t1: usize,
    #[serde(rename = "T2")]
    pub t2: usize,
    #[serde(rename = "T3")]
    pub t3: usize,
    pub sigma0_init_sq: f64,
    pub sigma0_end_sq: f64,
    pub temp_const: f64,
    pub base_temperature: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Initial,
    PriorRamp,
    Sigma0Anneal,
    Cooling,
}

/// Annealing state at one iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleState {
    pub phase: Phase,
    pub eta: f64,
    pub sigma0_sq: f64,
    pub temperature: f64,
}

impl AnnealSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.t1 < self.t2 && self.t2 < self.t3) {
            return Err(Error::InvalidArgument(format!(
                "schedule needs T1 < T2 < T3, got {} {} {}",
                self.t1, self.t2, self.t3
            )));
        }
        if !(self.sigma0_end_sq > 0.0 && self.sigma0_init_sq >= self.sigma0_end_sq) {
            return Err(Error::InvalidArgument("need sigma0_init_sq >= sigma0_end_sq > 0".into()));
        }
        if !(self.temp_const > 0.0 && self.base_temperature > 0.0) {
            return Err(Error::InvalidArgument("temperatures must be > 0".into()));
        }
        Ok(())
    }

    /// `(eta, sigma0^2, temperature)` at iteration `t`.
    pub fn at(&self, t: usize) -> ScheduleState {
        let (t1, t2, t3) = (self.t1 as f64, self.t2 as f64, self.t3 as f64);
        let tf = t as f64;
        if t < self.t1 {
            ScheduleState {
                phase: Phase::Initial,
                eta: 0.0,
                sigma0_sq: self.sigma0_init_sq,
                temperature: self.base_temperature,
            }
        } else if t <= self.t2 {
            ScheduleState {
                phase: Phase::PriorRamp,
                eta: (tf - t1) / (t2 - t1),
                sigma0_sq: self.sigma0_init_sq,
                temperature: self.base_temperature,
            }
        } else if t <= self.t3 {
            let a = (t3 - tf) / (t3 - t2);
            let b = (tf - t2) / (t3 - t2);
            ScheduleState {
                phase: Phase::Sigma0Anneal,
                eta: 1.0,
                sigma0_sq: a * self.sigma0_init_sq + b * self.sigma0_end_sq,
                temperature: self.base_temperature,
            }
        } else {
            ScheduleState {
                phase: Phase::Cooling,
                eta: 1.0,
                sigma0_sq: self.sigma0_end_sq,
                temperature: self.temp_const / (tf - t3),
            }
        }
    }
}

/// Free-function form of [`AnnealSchedule::at`].
pub fn schedule_at(t: usize, sched: &AnnealSchedule) -> ScheduleState {
    sched.at(t)
}
