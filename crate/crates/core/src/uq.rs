//! Prediction intervals for a sparse forecaster.
//!
//! With `gamma` the active coordinates of the fitted network, the variance
//! of a prediction is estimated by the delta method
//!
//! ```text
//! varsigma^2 = grad_gamma mu^T (-hess_gamma l_n)^{-1} grad_gamma mu
//! ```
//!
//! where `l_n` is the averaged Gaussian log-likelihood with the noise
//! variance plugged in. Intervals are `mu +- z * sqrt(varsigma^2 / n + sigma^2)`.
//! Multi-horizon forecasts use per-horizon variances and a Bonferroni
//! quantile. A split-conformal baseline is provided for comparison.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::data::{Sample, Standardization};
use crate::error::{Error, Result};
use crate::models::{build_outputs, Network};
use crate::train::weighted_sse_grad;

const A: [f64; 6] = [
    -3.969683028665376e1,
    2.209460984245205e2,
    -2.759285104469687e2,
    1.383577518672690e2,
    -3.066479806614716e1,
    2.506628277459239,
];
const B: [f64; 5] = [
    -5.447609879822406e1,
    1.615858368580409e2,
    -1.556989798598866e2,
    6.680131188771972e1,
    -1.328068155288572e1,
];
const C: [f64; 6] = [
    -7.784894002430293e-3,
    -3.223964580411365e-1,
    -2.400758277161838,
    -2.549732539343734,
    4.374664141464968,
    2.938163982698783,
];
const D: [f64; 4] = [
    7.784695709041462e-3,
    3.224671290700398e-1,
    2.445134137142996,
    3.754408661907416,
];

fn acklam_lower(p: f64) -> f64 {
    // p <= 0.5
    if p < 0.02425 {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Inverse standard normal CDF on `(0, 1)`.
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!("quantile level {p} outside (0, 1)")));
    }
    if p > 0.5 {
        return Ok(-normal_quantile(1.0 - p)?);
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    let x = acklam_lower(p);
    // one Newton step on Phi(x) - p; the lower tail keeps erfc accurate
    let e = normal_cdf(x) - p;
    let dens = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    Ok(x - e / dens)
}

/// Upper `a`-quantile `z_a`, i.e. `Phi(z_a) = 1 - a`.
pub fn upper_quantile(a: f64) -> Result<f64> {
    Ok(-normal_quantile(a)?)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha = {alpha} must lie in (0, 1)")));
    }
    Ok(())
}

/// Per-horizon sums of squared residuals and the number of samples.
fn residual_sums(net: &Network, train: &[Sample]) -> Result<Vec<f64>> {
    let preds = net.predict_all(train)?;
    let m = net.spec.output_dim();
    let mut s = vec![0.0; m];
    for (p, smp) in preds.iter().zip(train) {
        if smp.target.len() != m {
            return Err(Error::Shape(format!("target of length {} for output width {m}", smp.target.len())));
        }
        for r in 0..m {
            s[r] += (smp.target[r] - p[r]).powi(2);
        }
    }
    Ok(s)
}

/// Noise variance of a single-output fit: sum of squared training residuals
/// over `count - 1`.
pub fn estimate_sigma2(net: &Network, train: &[Sample]) -> Result<f64> {
    if train.len() < 2 {
        return Err(Error::InvalidArgument("need at least 2 training targets".into()));
    }
    if net.spec.output_dim() != 1 {
        return Err(Error::Shape("estimate_sigma2 expects a single output; use estimate_sigma2_panel".into()));
    }
    let s = residual_sums(net, train)?;
    Ok(s[0] / (train.len() - 1) as f64)
}

/// Per-horizon noise variances over `n` training sequences, divisor `n - 1`.
pub fn estimate_sigma2_panel(net: &Network, train: &[Sample]) -> Result<Vec<f64>> {
    if train.len() < 2 {
        return Err(Error::InvalidArgument("need at least 2 training sequences".into()));
    }
    let d = (train.len() - 1) as f64;
    Ok(residual_sums(net, train)?.into_iter().map(|s| s / d).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HessianConfig {
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
    #[serde(default = "default_jitter_start")]
    pub jitter_start: f64,
    #[serde(default = "default_jitter_max")]
    pub jitter_max: f64,
    /// Use the Gauss-Newton matrix when the finite-difference Hessian stays
    /// indefinite at maximal jitter.
    #[serde(default)]
    pub gauss_newton_fallback: bool,
}

fn default_fd_step() -> f64 {
    1e-5
}
fn default_jitter_start() -> f64 {
    1e-8
}
fn default_jitter_max() -> f64 {
    1e-2
}

impl Default for HessianConfig {
    fn default() -> Self {
        Self {
            fd_step: default_fd_step(),
            jitter_start: default_jitter_start(),
            jitter_max: default_jitter_max(),
            gauss_newton_fallback: false,
        }
    }
}

/// `-hess l_n` restricted to the active coordinates, factorized.
#[derive(Debug, Clone)]
pub struct HessianBlock {
    /// Active coordinates, in flat-vector order.
    pub active: Vec<usize>,
    /// Symmetrized matrix before jitter.
    pub matrix: DMatrix<f64>,
    pub jitter: f64,
    pub gauss_newton: bool,
    chol: Cholesky<f64, Dyn>,
}

impl HessianBlock {
    pub fn dim(&self) -> usize {
        self.active.len()
    }

    /// `g^T (H + jitter I)^{-1} g` for a full-length gradient `g`.
    pub fn quad_form(&self, g_full: &[f64]) -> f64 {
        let g = DVector::from_iterator(self.dim(), self.active.iter().map(|&i| g_full[i]));
        let x = self.chol.solve(&g);
        g.dot(&x)
    }

    fn factorize(
        active: Vec<usize>,
        matrix: DMatrix<f64>,
        cfg: &HessianConfig,
        gauss_newton: bool,
    ) -> std::result::Result<Self, f64> {
        let k = matrix.nrows();
        let mut eps = cfg.jitter_start;
        loop {
            let jittered = &matrix + DMatrix::<f64>::identity(k, k) * eps;
            if let Some(chol) = Cholesky::new(jittered) {
                return Ok(Self { active, matrix, jitter: eps, gauss_newton, chol });
            }
            let next = eps * 10.0;
            if next > cfg.jitter_max * (1.0 + 1e-12) {
                return Err(eps);
            }
            eps = next;
        }
    }
}

fn inverse_weights(sigma2: &[f64]) -> Result<Vec<f64>> {
    sigma2
        .iter()
        .map(|&s| {
            if s > 0.0 && s.is_finite() {
                Ok(1.0 / s)
            } else {
                Err(Error::InvalidArgument(format!("noise variance {s} must be positive")))
            }
        })
        .collect()
}

/// Gradient of `-l_n` (full length, masked) with per-output variances.
fn neg_loglik_grad(net: &Network, train: &[Sample], w: &[f64]) -> Result<Vec<f64>> {
    let scale = 1.0 / (2.0 * train.len() as f64);
    Ok(weighted_sse_grad(net, train, scale, Some(w))?.1.values)
}

/// `-l_n` up to its additive constant.
pub fn neg_loglik(net: &Network, train: &[Sample], sigma2: &[f64]) -> Result<f64> {
    let w = inverse_weights(sigma2)?;
    let scale = 1.0 / (2.0 * train.len() as f64);
    Ok(weighted_sse_grad(net, train, scale, Some(&w))?.0)
}

/// Negative Hessian of the averaged Gaussian log-likelihood over the
/// active coordinates, by central differences of the analytic gradient.
/// `sigma2` holds one variance per output.
pub fn neg_hessian(
    net: &Network,
    train: &[Sample],
    sigma2: &[f64],
    cfg: &HessianConfig,
) -> Result<HessianBlock> {
    let active = net.mask.active();
    if active.is_empty() {
        return Err(Error::InvalidArgument("structure mask has no active coordinates".into()));
    }
    if train.is_empty() {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    if sigma2.len() != net.spec.output_dim() {
        return Err(Error::Shape(format!(
            "{} variances for {} outputs",
            sigma2.len(),
            net.spec.output_dim()
        )));
    }
    if !(cfg.fd_step > 0.0) {
        return Err(Error::InvalidArgument("fd_step must be > 0".into()));
    }
    let w = inverse_weights(sigma2)?;
    let k = active.len();
    let h = cfg.fd_step;
    let mut work = net.clone();
    let mut mat = DMatrix::<f64>::zeros(k, k);
    for (c, &j) in active.iter().enumerate() {
        let orig = work.params.values[j];
        work.params.values[j] = orig + h;
        let up = neg_loglik_grad(&work, train, &w)?;
        work.params.values[j] = orig - h;
        let dn = neg_loglik_grad(&work, train, &w)?;
        work.params.values[j] = orig;
        for (r, &i) in active.iter().enumerate() {
            mat[(r, c)] = (up[i] - dn[i]) / (2.0 * h);
        }
    }
    if mat.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("finite-difference Hessian".into()));
    }
    let sym = (&mat + mat.transpose()) * 0.5;
    match HessianBlock::factorize(active.clone(), sym, cfg, false) {
        Ok(b) => Ok(b),
        Err(jitter) if cfg.gauss_newton_fallback => {
            log::warn!("finite-difference Hessian indefinite at jitter {jitter:e}; using Gauss-Newton");
            let gn = gauss_newton(net, train, &w, &active)?;
            HessianBlock::factorize(active, gn, cfg, true).map_err(|jitter| Error::Singular { jitter })
        }
        Err(jitter) => Err(Error::Singular { jitter }),
    }
}

fn gauss_newton(net: &Network, train: &[Sample], w: &[f64], active: &[usize]) -> Result<DMatrix<f64>> {
    let k = active.len();
    let mut mat = DMatrix::<f64>::zeros(k, k);
    for s in train {
        for (r, g) in output_gradients(net, s)?.iter().enumerate() {
            let ga = DVector::from_iterator(k, active.iter().map(|&i| g[i]));
            mat += &ga * ga.transpose() * w[r];
        }
    }
    Ok(mat / train.len() as f64)
}

/// Gradient of each output at `sample` with respect to the flat parameters
/// (masked entries zero).
pub fn output_gradients(net: &Network, sample: &Sample) -> Result<Vec<Vec<f64>>> {
    let m = net.spec.output_dim();
    let beta = net.effective_params();
    let mut out = Vec::with_capacity(m);
    for r in 0..m {
        let mut tape = Tape::new();
        let o = build_outputs(&mut tape, &net.spec, std::slice::from_ref(sample))?;
        let mut pick = vec![0.0; m];
        pick[r] = 1.0;
        let sel = tape.constant(Tensor::matrix(m, 1, pick)?);
        let prod = tape.mul(o, sel)?;
        tape.sum(prod)?;
        tape.forward_eval_flat(&beta)?;
        let mut g = tape.backward_grad()?.values;
        net.mask.zero_masked(&mut g);
        out.push(g);
    }
    Ok(out)
}

/// One interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalPoint {
    pub point_index: usize,
    /// Forecast horizon, 0-based; always 0 for one-step intervals.
    pub horizon: usize,
    pub center: f64,
    pub lower: f64,
    pub upper: f64,
    /// Delta-method variance; absent for the conformal baseline.
    pub varsigma2: Option<f64>,
}

impl IntervalPoint {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, y: f64) -> bool {
        self.lower <= y && y <= self.upper
    }
}

/// Intervals for a set of test points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalReport {
    pub alpha: f64,
    /// Noise variance per horizon.
    pub sigma2_hat: Vec<f64>,
    /// Number of horizons `m`; points are ordered point-major.
    pub horizons: usize,
    pub points: Vec<IntervalPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl IntervalReport {
    /// Maps centers and bounds from standardized units back to data units.
    pub fn destandardize(&self, st: &Standardization) -> Self {
        let mut r = self.clone();
        for p in &mut r.points {
            p.center = st.invert(p.center);
            p.lower = st.invert(p.lower);
            p.upper = st.invert(p.upper);
            p.varsigma2 = p.varsigma2.map(|v| v * st.sd * st.sd);
        }
        r.sigma2_hat = r.sigma2_hat.iter().map(|s| s * st.sd * st.sd).collect();
        r
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("point_index,horizon,center,lower,upper\n");
        for p in &self.points {
            s.push_str(&format!(
                "{},{},{:.16e},{:.16e},{:.16e}\n",
                p.point_index, p.horizon, p.center, p.lower, p.upper
            ));
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Fitted ingredients of the one-step interval.
#[derive(Debug, Clone)]
pub struct OneStepUq {
    pub sigma2_hat: f64,
    pub hessian: HessianBlock,
    /// Number of training targets dividing `varsigma^2`.
    pub n_train: usize,
}

impl OneStepUq {
    pub fn fit(net: &Network, train: &[Sample], cfg: &HessianConfig) -> Result<Self> {
        let sigma2_hat = estimate_sigma2(net, train)?;
        let hessian = neg_hessian(net, train, &[sigma2_hat], cfg)?;
        Ok(Self { sigma2_hat, hessian, n_train: train.len() })
    }

    pub fn interval(&self, net: &Network, point: &Sample, alpha: f64) -> Result<IntervalPoint> {
        check_alpha(alpha)?;
        let center = net.predict(point)?[0];
        let g = output_gradients(net, point)?;
        let vs = self.hessian.quad_form(&g[0]).max(0.0);
        let z = upper_quantile(alpha / 2.0)?;
        let half = z * (vs / self.n_train as f64 + self.sigma2_hat).sqrt();
        Ok(IntervalPoint {
            point_index: point.index,
            horizon: 0,
            center,
            lower: center - half,
            upper: center + half,
            varsigma2: Some(vs),
        })
    }
}

/// One-step interval for a single test point.
pub fn interval_one_step(
    net: &Network,
    train: &[Sample],
    point: &Sample,
    alpha: f64,
    cfg: &HessianConfig,
) -> Result<IntervalPoint> {
    check_alpha(alpha)?;
    OneStepUq::fit(net, train, cfg)?.interval(net, point, alpha)
}

/// One-step intervals for every test point.
pub fn intervals_one_step(
    net: &Network,
    train: &[Sample],
    test: &[Sample],
    alpha: f64,
    cfg: &HessianConfig,
) -> Result<IntervalReport> {
    check_alpha(alpha)?;
    let uq = OneStepUq::fit(net, train, cfg)?;
    let points = test.iter().map(|s| uq.interval(net, s, alpha)).collect::<Result<Vec<_>>>()?;
    Ok(IntervalReport { alpha, sigma2_hat: vec![uq.sigma2_hat], horizons: 1, points, warning: None })
}

/// Bonferroni simultaneous intervals for an `m`-output forecaster trained
/// on a panel.
pub fn intervals_multi_horizon(
    net: &Network,
    train: &[Sample],
    test: &[Sample],
    alpha: f64,
    cfg: &HessianConfig,
) -> Result<IntervalReport> {
    check_alpha(alpha)?;
    let m = net.spec.output_dim();
    let sigma2 = estimate_sigma2_panel(net, train)?;
    let hess = neg_hessian(net, train, &sigma2, cfg)?;
    let n = train.len() as f64;
    let z = upper_quantile(alpha / (2.0 * m as f64))?;
    let preds = net.predict_all(test)?;
    let mut points = Vec::with_capacity(test.len() * m);
    for (s, p) in test.iter().zip(&preds) {
        let grads = output_gradients(net, s)?;
        for r in 0..m {
            let vs = hess.quad_form(&grads[r]).max(0.0);
            let half = z * (vs / n + sigma2[r]).sqrt();
            points.push(IntervalPoint {
                point_index: s.index,
                horizon: r,
                center: p[r],
                lower: p[r] - half,
                upper: p[r] + half,
                varsigma2: Some(vs),
            });
        }
    }
    Ok(IntervalReport { alpha, sigma2_hat: sigma2, horizons: m, points, warning: None })
}

/// Split-conformal intervals: per horizon, the `ceil((n_cal + 1)(1 - alpha/m))`-th
/// smallest absolute calibration residual is the half-width.
pub fn split_conformal_baseline(
    cal_predictions: &[Vec<f64>],
    cal_targets: &[Vec<f64>],
    test_predictions: &[Vec<f64>],
    alpha: f64,
    m: usize,
) -> Result<IntervalReport> {
    check_alpha(alpha)?;
    let n_cal = cal_predictions.len();
    if n_cal == 0 {
        return Err(Error::InvalidArgument("empty calibration set".into()));
    }
    if m == 0 {
        return Err(Error::InvalidArgument("m must be >= 1".into()));
    }
    if cal_targets.len() != n_cal {
        return Err(Error::Shape("calibration predictions and targets differ in length".into()));
    }
    let rows_ok = |rows: &[Vec<f64>]| rows.iter().all(|r| r.len() == m);
    if !rows_ok(cal_predictions) || !rows_ok(cal_targets) || !rows_ok(test_predictions) {
        return Err(Error::Shape(format!("rows must have {m} horizons")));
    }
    let level = (n_cal as f64 + 1.0) * (1.0 - alpha / m as f64);
    let k = (level - 1e-9).ceil() as usize;
    let mut warning = None;
    let mut half = vec![f64::INFINITY; m];
    if k > n_cal {
        warning = Some(format!(
            "quantile index {k} exceeds the {n_cal} calibration points; intervals are unbounded"
        ));
        log::warn!("{}", warning.as_deref().unwrap_or_default());
    } else {
        for (r, hw) in half.iter_mut().enumerate() {
            let mut res: Vec<f64> =
                cal_predictions.iter().zip(cal_targets).map(|(p, y)| (y[r] - p[r]).abs()).collect();
            res.sort_by(f64::total_cmp);
            *hw = res[k.max(1) - 1];
        }
    }
    let mut points = Vec::with_capacity(test_predictions.len() * m);
    for (i, p) in test_predictions.iter().enumerate() {
        for r in 0..m {
            points.push(IntervalPoint {
                point_index: i,
                horizon: r,
                center: p[r],
                lower: p[r] - half[r],
                upper: p[r] + half[r],
                varsigma2: None,
            });
        }
    }
    Ok(IntervalReport { alpha, sigma2_hat: Vec::new(), horizons: m, points, warning })
}
