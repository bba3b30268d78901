//! Optimizers and the prior-annealing training pipeline.
//!
//! Training minimizes the energy
//!
//! ```text
//! U(beta) = n/(2B) * sum_batch |y - mu(x, beta)|^2  -  eta * log pi(beta)
//! ```
//!
//! i.e. the minibatch estimate of `-n l_n` under a unit-variance Gaussian
//! likelihood plus the annealed mixture prior. Phase one runs SGD with
//! momentum and no prior; afterwards SGHMC samples from `exp(-U / tau)`
//! while the schedule ramps `eta`, shrinks `sigma0^2` and finally cools
//! `tau`. The result is thresholded into a structure mask and the surviving
//! weights are refined without the prior.

use serde::{Deserialize, Serialize};

use crate::autodiff::{GradientVector, Tape, Tensor};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::models::{build_outputs, Network, StructureMask};
use crate::prior::{predicted_sparsity, AnnealSchedule, Kernel, MixturePrior, Phase};
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Equals `1 - a` for friction `a`.
    pub momentum: f64,
    pub batch_size: usize,
    pub total_iterations: usize,
    #[serde(default)]
    pub refine_iterations: usize,
    /// Learning rate of the refinement phase; defaults to `learning_rate`.
    #[serde(default)]
    pub refine_learning_rate: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Global-norm gradient clipping, off when `None`.
    #[serde(default)]
    pub gradient_clip: Option<f64>,
    /// Iterations between training-log records; 0 means once per epoch.
    #[serde(default)]
    pub log_every: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument("momentum must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if let Some(c) = self.gradient_clip {
            if !(c > 0.0) {
                return Err(Error::InvalidArgument("gradient_clip must be > 0".into()));
            }
        }
        if matches!(self.refine_learning_rate, Some(lr) if !(lr > 0.0)) {
            return Err(Error::InvalidArgument("refine_learning_rate must be > 0".into()));
        }
        Ok(())
    }
}

/// Velocity, step counter and the noise stream of an optimizer.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub velocity: Vec<f64>,
    pub step: usize,
    rng: SeededRng,
}

impl OptimState {
    pub fn new(len: usize, seed: u64) -> Self {
        Self { velocity: vec![0.0; len], step: 0, rng: SeededRng::stream(seed, "sghmc-noise") }
    }
}

fn check_aligned(params: &[f64], grad: &GradientVector, state: &OptimState) -> Result<()> {
    if params.len() != grad.len() || params.len() != state.velocity.len() {
        return Err(Error::Shape(format!(
            "params {}, gradient {}, velocity {}",
            params.len(),
            grad.len(),
            state.velocity.len()
        )));
    }
    Ok(())
}

/// `v <- momentum v - lr g;  beta <- beta + v`.
pub fn sgd_momentum_step(
    params: &mut [f64],
    grad: &GradientVector,
    state: &mut OptimState,
    cfg: &TrainConfig,
) -> Result<()> {
    momentum_step(params, grad, state, cfg.momentum, cfg.learning_rate, 0.0)
}

/// SGHMC update with friction `a = 1 - momentum`:
/// `v <- (1 - a) v - lr g + xi`, `xi ~ N(0, 2 a tau lr)`; `beta <- beta + v`.
pub fn sghmc_step(
    params: &mut [f64],
    grad: &GradientVector,
    state: &mut OptimState,
    cfg: &TrainConfig,
    temperature: f64,
) -> Result<()> {
    if !(temperature >= 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {temperature} must be >= 0")));
    }
    momentum_step(params, grad, state, cfg.momentum, cfg.learning_rate, temperature)
}

fn momentum_step(
    params: &mut [f64],
    grad: &GradientVector,
    state: &mut OptimState,
    momentum: f64,
    lr: f64,
    temperature: f64,
) -> Result<()> {
    check_aligned(params, grad, state)?;
    let friction = 1.0 - momentum;
    let noise_sd = (2.0 * friction * temperature * lr).sqrt();
    for ((p, v), g) in params.iter_mut().zip(state.velocity.iter_mut()).zip(&grad.values) {
        *v = momentum * *v - lr * g;
        if temperature > 0.0 {
            *v += noise_sd * state.rng.normal();
        }
        *p += *v;
    }
    state.step += 1;
    Ok(())
}

/// Sum of squared final-step residuals over a batch, weighted per output by
/// `weights` (length `m`) when given, times `scale`, on a fresh tape.
/// Returns `(value, gradient)` with the gradient masked.
pub(crate) fn weighted_sse_grad(
    net: &Network,
    batch: &[Sample],
    scale: f64,
    weights: Option<&[f64]>,
) -> Result<(f64, GradientVector)> {
    let mut tape = Tape::new();
    let out = build_outputs(&mut tape, &net.spec, batch)?;
    let m = net.spec.output_dim();
    let b = batch.len();
    let mut targets = vec![0.0; m * b];
    for (j, s) in batch.iter().enumerate() {
        if s.target.len() != m {
            return Err(Error::Shape(format!("target of length {} for output width {m}", s.target.len())));
        }
        for (r, y) in s.target.iter().enumerate() {
            targets[r * b + j] = *y;
        }
    }
    let y = tape.constant(Tensor::matrix(m, b, targets)?);
    let resid = tape.sub(out, y)?;
    let mut sq = tape.square(resid)?;
    if let Some(w) = weights {
        let wm: Vec<f64> = (0..m * b).map(|k| w[k / b]).collect();
        let wn = tape.constant(Tensor::matrix(m, b, wm)?);
        sq = tape.mul(sq, wn)?;
    }
    let total = tape.sum(sq)?;
    tape.scale(total, scale)?;
    let value = tape.forward_eval_flat(&net.effective_params())?;
    let mut grad = tape.backward_grad()?;
    net.mask.zero_masked(&mut grad.values);
    Ok((value, grad))
}

/// Energy `U` of a minibatch and its gradient. `n_total` is the number of
/// training windows the minibatch stands in for. The prior acts on the
/// active coordinates only.
pub fn loss_and_grad(
    net: &Network,
    batch: &[Sample],
    n_total: usize,
    eta: f64,
    prior: &MixturePrior,
) -> Result<(f64, GradientVector)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty minibatch".into()));
    }
    let scale = n_total as f64 / (2.0 * batch.len() as f64);
    let (mut u, mut grad) = weighted_sse_grad(net, batch, scale, None)?;
    if eta > 0.0 {
        prior.validate()?;
        let k = Kernel::new(prior);
        let mut lp = 0.0;
        for ((g, &p), &bit) in grad.values.iter_mut().zip(&net.params.values).zip(&net.mask.bits) {
            if bit != 0 {
                let (l, d) = k.eval(p);
                *g -= eta * d;
                lp += l;
            }
        }
        u -= eta * lp;
    }
    Ok((u, grad))
}

/// Mean squared final-step error over `samples`.
pub fn mean_squared_error(net: &Network, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples".into()));
    }
    let preds = net.predict_all(samples)?;
    let mut s = 0.0;
    let mut count = 0usize;
    for (p, smp) in preds.iter().zip(samples) {
        for (a, b) in p.iter().zip(&smp.target) {
            s += (a - b).powi(2);
            count += 1;
        }
    }
    Ok(s / count as f64)
}

/// Epoch-wise sampling of minibatches without replacement.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: SeededRng,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        let mut rng = SeededRng::stream(seed, "minibatch");
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        Self { order, pos: 0, batch: batch.min(n).max(1), rng }
    }

    pub fn next_indices(&mut self) -> &[usize] {
        if self.pos + self.batch > self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let s = &self.order[self.pos..self.pos + self.batch];
        self.pos += self.batch;
        s
    }
}

/// One JSON-lines training log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: usize,
    pub phase: Phase,
    /// Mean minibatch energy since the previous record.
    pub loss: f64,
    /// Mean minibatch squared error since the previous record.
    pub mse: f64,
    pub eta: f64,
    pub sigma0_sq: f64,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kept_fraction: Option<f64>,
}

fn clip(grad: &mut GradientVector, max_norm: Option<f64>) {
    if let Some(c) = max_norm {
        let n = grad.norm();
        if n > c {
            let f = c / n;
            grad.values.iter_mut().for_each(|g| *g *= f);
        }
    }
}

/// Parameters after annealing together with the training trace.
#[derive(Debug, Clone)]
pub struct AnnealOutcome {
    pub network: Network,
    pub trace: Vec<LogRecord>,
}

/// Steps 1 and 2 of training: initial SGD-momentum fitting for `t < T1`,
/// then SGHMC under the schedule until `total_iterations`.
pub fn run_prior_annealing(
    net: Network,
    data: &[Sample],
    prior_template: &MixturePrior,
    sched: &AnnealSchedule,
    cfg: &TrainConfig,
) -> Result<AnnealOutcome> {
    cfg.validate()?;
    sched.validate()?;
    prior_template.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("no training windows".into()));
    }
    if sched.t1 > cfg.total_iterations {
        return Err(Error::InvalidArgument(format!(
            "T1 = {} exceeds total_iterations = {}",
            sched.t1, cfg.total_iterations
        )));
    }
    let mut net = net;
    let n = data.len();
    let mut state = OptimState::new(net.params.len(), cfg.seed);
    let mut sampler = BatchSampler::new(n, cfg.batch_size, cfg.seed);
    let log_every = if cfg.log_every > 0 { cfg.log_every } else { n.div_ceil(cfg.batch_size) };
    let mut trace = Vec::new();
    let (mut acc_u, mut acc_mse, mut acc_n) = (0.0, 0.0, 0usize);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for t in 0..cfg.total_iterations {
        let st = sched.at(t);
        let prior = prior_template.with_sigma0_sq(st.sigma0_sq);
        batch.clear();
        batch.extend(sampler.next_indices().iter().map(|&i| data[i].clone()));
        let eta = if st.phase == Phase::Initial { 0.0 } else { st.eta };
        let (u, mut grad) = loss_and_grad(&net, &batch, n, eta, &prior)?;
        if !u.is_finite() || grad.values.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { iteration: t, loss: u, last_finite: net.params.values });
        }
        clip(&mut grad, cfg.gradient_clip);
        let before = net.params.values.clone();
        if st.phase == Phase::Initial {
            sgd_momentum_step(&mut net.params.values, &grad, &mut state, cfg)?;
        } else {
            sghmc_step(&mut net.params.values, &grad, &mut state, cfg, st.temperature)?;
        }
        if net.params.values.iter().any(|p| !p.is_finite()) {
            return Err(Error::Divergence { iteration: t, loss: f64::INFINITY, last_finite: before });
        }
        let data_term = if eta > 0.0 { f64::NAN } else { u };
        acc_u += u;
        acc_mse += if data_term.is_nan() { 0.0 } else { data_term * 2.0 / n as f64 };
        acc_n += 1;
        if (t + 1) % log_every == 0 || t + 1 == cfg.total_iterations {
            let rec = LogRecord {
                iter: t + 1,
                phase: st.phase,
                loss: acc_u / acc_n as f64,
                mse: if eta > 0.0 { mean_squared_error(&net, &batch)? } else { acc_mse / acc_n as f64 },
                eta: st.eta,
                sigma0_sq: st.sigma0_sq,
                temperature: st.temperature,
                kept_fraction: if eta > 0.0 {
                    Some(1.0 - predicted_sparsity(&net.params.values, &prior)?)
                } else {
                    None
                },
            };
            log::debug!("{}", serde_json::to_string(&rec).unwrap_or_default());
            trace.push(rec);
            acc_u = 0.0;
            acc_mse = 0.0;
            acc_n = 0;
        }
    }
    Ok(AnnealOutcome { network: net, trace })
}

/// Keeps exactly the weights whose magnitude exceeds the prior's threshold.
/// Returns the mask and its kept fraction.
pub fn sparsify(params: &[f64], prior_end: &MixturePrior) -> Result<(StructureMask, f64)> {
    let t = prior_end.threshold()?;
    let mask = StructureMask::from_bools(params.iter().map(|b| b.abs() > t));
    let kept = 1.0 - predicted_sparsity(params, prior_end)?;
    Ok((mask, kept))
}

/// Maximizes the likelihood over the active coordinates only, with
/// SGD-momentum and no prior. Masked coordinates are held at exactly zero.
pub fn refine(net: Network, data: &[Sample], cfg: &TrainConfig) -> Result<Network> {
    cfg.validate()?;
    let mut net = net;
    net.mask.zero_masked(&mut net.params.values);
    if net.mask.count() == 0 || cfg.refine_iterations == 0 {
        return Ok(net);
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("no training windows".into()));
    }
    let n = data.len();
    let lr_cfg = TrainConfig {
        learning_rate: cfg.refine_learning_rate.unwrap_or(cfg.learning_rate),
        ..cfg.clone()
    };
    let mut state = OptimState::new(net.params.len(), cfg.seed ^ 0x5EF1);
    let mut sampler = BatchSampler::new(n, cfg.batch_size, cfg.seed ^ 0x5EF1);
    let dummy = MixturePrior { lambda_n: 0.5, sigma0_sq: 1.0, sigma1_sq: 2.0 };
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for t in 0..cfg.refine_iterations {
        batch.clear();
        batch.extend(sampler.next_indices().iter().map(|&i| data[i].clone()));
        let (u, mut grad) = loss_and_grad(&net, &batch, n, 0.0, &dummy)?;
        if !u.is_finite() {
            return Err(Error::Divergence { iteration: t, loss: u, last_finite: net.params.values });
        }
        clip(&mut grad, cfg.gradient_clip);
        sgd_momentum_step(&mut net.params.values, &grad, &mut state, &lr_cfg)?;
        net.mask.zero_masked(&mut net.params.values);
    }
    Ok(net)
}

/// Result of the full four-step pipeline.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub network: Network,
    pub trace: Vec<LogRecord>,
    pub threshold: f64,
    pub kept_fraction: f64,
}

/// Annealing, sparsification at `sigma0_end`, then refinement.
pub fn fit(
    net: Network,
    data: &[Sample],
    prior_template: &MixturePrior,
    sched: &AnnealSchedule,
    cfg: &TrainConfig,
) -> Result<FitOutcome> {
    let AnnealOutcome { network, mut trace } =
        run_prior_annealing(net, data, prior_template, sched, cfg)?;
    let prior_end = prior_template.with_sigma0_sq(sched.sigma0_end_sq);
    let threshold = prior_end.threshold()?;
    let (mask, kept_fraction) = sparsify(&network.params.values, &prior_end)?;
    if let Some(last) = trace.last_mut() {
        last.kept_fraction = Some(kept_fraction);
    }
    let sparse = Network { mask, ..network };
    let network = refine(sparse, data, cfg)?;
    Ok(FitOutcome { network, trace, threshold, kept_fraction })
}
