//! End-to-end experiment runners shared by the command-line front end and
//! the acceptance tests: simulate, fit, select, evaluate.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::{
    gen_ar1_panel, gen_expar, gen_nlar, window_series, PanelDataset, Sample, SeriesDataset,
    Split, Standardization, DEFAULT_BURN_IN, NLAR_TRUE_LAGS,
};
use crate::error::{Error, Result};
use crate::metrics::{self, SelectionResult, SelectionSummary};
use crate::models::{
    ar_order, count_hidden_links, selected_input_lags, Activation, Network, NetworkKind,
    NetworkSpec,
};
use crate::prior::{calibrate_sigma0_init, AnnealSchedule, MixturePrior};
use crate::rng::{stream_seed, SeededRng};
use crate::train::{self, LogRecord, TrainConfig};

/// Synthetic process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProcessKind {
    Nlar,
    Expar,
}

impl ProcessKind {
    pub fn true_lags(self) -> BTreeSet<usize> {
        match self {
            ProcessKind::Nlar => NLAR_TRUE_LAGS.iter().copied().collect(),
            ProcessKind::Expar => [1].into_iter().collect(),
        }
    }

    pub fn generate(self, n: usize, seed: u64, burn_in: usize) -> Result<SeriesDataset> {
        match self {
            ProcessKind::Nlar => gen_nlar(n, seed, burn_in),
            ProcessKind::Expar => gen_expar(n, seed, burn_in),
        }
    }
}

fn default_burn_in() -> usize {
    DEFAULT_BURN_IN
}

/// Hidden layers of the forecaster; input and output widths follow from
/// the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: NetworkKind,
    pub hidden: Vec<usize>,
    pub activations: Vec<Activation>,
    #[serde(default)]
    pub warmup: usize,
}

impl ModelConfig {
    pub fn spec(&self, input_dim: usize, output_dim: usize, exog_dim: usize) -> Result<NetworkSpec> {
        let mut widths = vec![input_dim];
        widths.extend(&self.hidden);
        widths.push(output_dim);
        let spec = NetworkSpec {
            kind: self.kind,
            layer_widths: widths,
            activations: self.activations.clone(),
            warmup: self.warmup,
            exog_dim,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Mixture prior with either a fixed initial spike variance or a target
/// sparsity used to calibrate it after initial training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub lambda_n: f64,
    pub sigma1_sq: f64,
    #[serde(default)]
    pub sigma0_init_sq: Option<f64>,
    #[serde(default)]
    pub target_sparsity: Option<f64>,
    pub sigma0_end_sq: f64,
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sigma0_init_sq.is_some() == self.target_sparsity.is_some() {
            return Err(Error::InvalidArgument(
                "prior needs exactly one of sigma0_init_sq and target_sparsity".into(),
            ));
        }
        MixturePrior::new(self.lambda_n, self.sigma0_end_sq, self.sigma1_sq)?.threshold()?;
        Ok(())
    }

    fn template(&self) -> Result<MixturePrior> {
        MixturePrior::new(self.lambda_n, self.sigma0_end_sq, self.sigma1_sq)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(rename = "T1")]
    pub t1: usize,
    #[serde(rename = "T2")]
    pub t2: usize,
    #[serde(rename = "T3")]
    pub t3: usize,
    pub temp_const: f64,
    pub base_temperature: f64,
}

impl ScheduleConfig {
    pub fn with_prior(&self, sigma0_init_sq: f64, sigma0_end_sq: f64) -> AnnealSchedule {
        AnnealSchedule {
            t1: self.t1,
            t2: self.t2,
            t3: self.t3,
            sigma0_init_sq,
            sigma0_end_sq,
            temp_const: self.temp_const,
            base_temperature: self.base_temperature,
        }
    }
}

/// Everything needed to fit a sparse forecaster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub model: ModelConfig,
    pub prior: PriorConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
}

/// A fitted sparse network and how it was obtained.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub network: Network,
    pub trace: Vec<LogRecord>,
    pub sigma0_init_sq: f64,
    pub threshold: f64,
    pub kept_fraction: f64,
}

/// Initial training, prior annealing, sparsification and refinement of a
/// freshly initialized network. `seed` drives initialization and training.
pub fn fit_network(spec: NetworkSpec, data: &[Sample], cfg: &FitConfig, seed: u64) -> Result<FitReport> {
    cfg.prior.validate()?;
    let template = cfg.prior.template()?;
    let net = Network::init(spec, &mut SeededRng::stream(seed, "init"))?;
    let tcfg = TrainConfig { seed: stream_seed(seed, "train"), ..cfg.train.clone() };
    let sigma0_init_sq = match (cfg.prior.sigma0_init_sq, cfg.prior.target_sparsity) {
        (Some(s), _) => s,
        (None, Some(target)) => {
            // run the initial phase alone and size the spike to the target
            let sched = cfg.schedule.with_prior(cfg.prior.sigma0_end_sq, cfg.prior.sigma0_end_sq);
            let init_cfg = TrainConfig { total_iterations: cfg.schedule.t1, ..tcfg.clone() };
            let pre = train::run_prior_annealing(net.clone(), data, &template, &sched, &init_cfg)?;
            let c = calibrate_sigma0_init(&pre.network.params.values, &template, target, 0.01)?;
            if c.warning {
                log::warn!(
                    "target sparsity {target} not reachable; using {} (sparsity {})",
                    c.sigma0_init_sq,
                    c.achieved_sparsity
                );
            }
            c.sigma0_init_sq.max(cfg.prior.sigma0_end_sq)
        }
        (None, None) => unreachable!("validated"),
    };
    let sched = cfg.schedule.with_prior(sigma0_init_sq, cfg.prior.sigma0_end_sq);
    let out = train::fit(net, data, &template, &sched, &tcfg)?;
    Ok(FitReport {
        network: out.network,
        trace: out.trace,
        sigma0_init_sq,
        threshold: out.threshold,
        kept_fraction: out.kept_fraction,
    })
}

/// One order-selection experiment on a simulated series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeriesExperiment {
    pub process: ProcessKind,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    /// Lags fed to the network at every recurrent step.
    pub window: usize,
    /// Recurrent steps per training window.
    pub m_l: usize,
    #[serde(default)]
    pub scaling: Scaling,
    pub fit: FitConfig,
}

/// Preprocessing of the simulated series, with statistics taken from the
/// training part only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scaling {
    /// Subtract the mean and divide by the standard deviation.
    #[default]
    Zscore,
    /// Subtract the mean only, keeping the noise on its original scale.
    Center,
    None,
}

/// Windows of a series split into train, validation and test parts.
#[derive(Debug, Clone)]
pub struct SeriesWindows {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    pub standardization: Option<Standardization>,
}

impl SeriesExperiment {
    /// Length of the raw series needed for the requested window counts.
    pub fn series_len(&self) -> usize {
        self.window + self.m_l - 1 + self.n_train + self.n_val + self.n_test
    }

    pub fn windows(&self, series: &SeriesDataset) -> Result<SeriesWindows> {
        series_windows(series, self.window, self.m_l, [self.n_train, self.n_val, self.n_test], self.scaling)
    }
}

/// Windows `series` and splits them contiguously into `counts =
/// [train, val, test]` windows, scaling with statistics of the values the
/// training windows touch.
pub fn series_windows(
    series: &SeriesDataset,
    window: usize,
    m_l: usize,
    counts: [usize; 3],
    scaling: Scaling,
) -> Result<SeriesWindows> {
    let [n_train, n_val, n_test] = counts;
    let first = window + m_l - 1;
    let total = n_train + n_val + n_test;
    if n_train == 0 {
        return Err(Error::InvalidArgument("need at least one training window".into()));
    }
    if series.len() < first + total {
        return Err(Error::InvalidArgument(format!(
            "series of length {} is shorter than the {} values required",
            series.len(),
            first + total
        )));
    }
    let train = &series.values[..first + n_train];
    let st = match scaling {
        Scaling::Zscore => Some(Standardization::fit(train)?),
        Scaling::Center => Some(Standardization { sd: 1.0, ..Standardization::fit(train)? }),
        Scaling::None => None,
    };
    let series = match st {
        Some(st) => series.rescale(st)?,
        None => series.clone(),
    };
    let w = window_series(&series, window, m_l)?;
    Ok(SeriesWindows {
        train: w[..n_train].to_vec(),
        val: w[n_train..n_train + n_val].to_vec(),
        test: w[n_train + n_val..total].to_vec(),
        standardization: st,
    })
}

/// Predictions and targets of `samples` in data units.
pub fn predictions_in_data_units(
    net: &Network,
    samples: &[Sample],
    st: Option<&Standardization>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let preds = net.predict_all(samples)?;
    let undo = |v: f64| st.map_or(v, |s| s.invert(v));
    Ok((
        preds.iter().map(|p| undo(p[0])).collect(),
        samples.iter().map(|s| undo(s.target[0])).collect(),
    ))
}

/// Outcome of one replicate.
#[derive(Debug, Clone)]
pub struct ReplicateOutcome {
    pub seed: u64,
    pub selected: BTreeSet<usize>,
    pub hidden_links: usize,
    pub ar_order: usize,
    pub mspe: f64,
    pub msfe: f64,
    pub fit: FitReport,
    pub windows: SeriesWindows,
}

/// Simulates a series from `seed`, fits it and reports selection and
/// forecasting metrics in data units.
pub fn run_series_replicate(exp: &SeriesExperiment, seed: u64) -> Result<ReplicateOutcome> {
    let series = exp.process.generate(exp.series_len(), stream_seed(seed, "data"), exp.burn_in)?;
    let windows = exp.windows(&series)?;
    let spec = exp.fit.model.spec(exp.window, 1, 0)?;
    let fit = fit_network(spec, &windows.train, &exp.fit, seed)?;
    let net = &fit.network;
    let st = windows.standardization.as_ref();
    let selected = selected_input_lags(&net.mask, &net.spec)?;
    let hidden_links = match net.spec.kind {
        NetworkKind::ElmanRnn => count_hidden_links(&net.mask, &net.spec)?,
        NetworkKind::Mlp => 0,
    };
    let (p, y) = predictions_in_data_units(net, &windows.test, st)?;
    let mspe = metrics::mspe(&p, &y)?;
    let (p, y) = predictions_in_data_units(net, &windows.train, st)?;
    let msfe = metrics::msfe(&p, &y)?;
    Ok(ReplicateOutcome {
        seed,
        ar_order: ar_order(&selected),
        selected,
        hidden_links,
        mspe,
        msfe,
        fit,
        windows,
    })
}

/// Seed of replicate `j` under top-level `seed`.
pub fn replicate_seed(seed: u64, j: usize) -> u64 {
    stream_seed(seed, &format!("replicate-{j}"))
}

/// Runs `replicates` independent replicates, in parallel when the machine
/// has spare cores. Results are in replicate order.
pub fn run_selection(
    exp: &SeriesExperiment,
    seed: u64,
    replicates: usize,
) -> Result<(Vec<ReplicateOutcome>, SelectionResult, SelectionSummary)> {
    if replicates == 0 {
        return Err(Error::InvalidArgument("need at least one replicate".into()));
    }
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(replicates);
    let mut outcomes: Vec<Option<Result<ReplicateOutcome>>> = (0..replicates).map(|_| None).collect();
    if threads <= 1 {
        for (j, slot) in outcomes.iter_mut().enumerate() {
            *slot = Some(run_series_replicate(exp, replicate_seed(seed, j)));
        }
    } else {
        std::thread::scope(|s| {
            for (k, chunk) in outcomes.chunks_mut(replicates.div_ceil(threads)).enumerate() {
                let base = k * replicates.div_ceil(threads);
                s.spawn(move || {
                    for (i, slot) in chunk.iter_mut().enumerate() {
                        *slot = Some(run_series_replicate(exp, replicate_seed(seed, base + i)));
                    }
                });
            }
        });
    }
    let outcomes = outcomes
        .into_iter()
        .map(|o| o.expect("every replicate ran"))
        .collect::<Result<Vec<_>>>()?;
    let truth = exp.process.true_lags();
    let result = SelectionResult::new(
        truth.clone(),
        outcomes.iter().map(|o| o.selected.clone()).collect(),
        outcomes.iter().map(|o| o.hidden_links).collect(),
    );
    let mspes: Vec<f64> = outcomes.iter().map(|o| o.mspe).collect();
    let msfes: Vec<f64> = outcomes.iter().map(|o| o.msfe).collect();
    let true_order = truth.iter().next_back().copied().unwrap_or(0);
    let summary = metrics::summarize_selection(&result, &mspes, &msfes, exp.window >= true_order);
    Ok((outcomes, result, summary))
}

/// AR(1) panel of `counts = [train, calibration, test]` sequences with
/// `length` observed values and `horizon` targets each.
pub fn ar1_panel(counts: [usize; 3], length: usize, horizon: usize, phi: f64, seed: u64) -> Result<PanelDataset> {
    let [n_train, n_cal, n_test] = counts;
    gen_ar1_panel(n_train + n_cal + n_test, length + horizon, horizon, phi, stream_seed(seed, "data"))?
        .with_splits(n_train, n_cal)
}

/// Multi-horizon experiment on a simulated AR(1) panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PanelExperiment {
    pub n_train: usize,
    #[serde(default)]
    pub n_cal: usize,
    pub n_test: usize,
    /// Observed length `T` of every sequence.
    pub length: usize,
    pub horizon: usize,
    pub phi: f64,
    pub fit: FitConfig,
}

impl PanelExperiment {
    pub fn panel(&self, seed: u64) -> Result<PanelDataset> {
        ar1_panel([self.n_train, self.n_cal, self.n_test], self.length, self.horizon, self.phi, seed)
    }

    pub fn fit_panel(&self, panel: &PanelDataset, seed: u64) -> Result<FitReport> {
        let spec = self.fit.model.spec(1, self.horizon, 0)?;
        fit_network(spec, &panel.samples(Split::Train), &self.fit, seed)
    }
}
