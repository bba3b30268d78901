use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::json;
use sparsets::data::{
    format_csv, read_csv, DatasetManifest, PanelDataset, Sample, SeriesDataset, Split,
    NLAR_COEFFICIENTS,
};
use sparsets::experiment::{
    ar1_panel, fit_network, predictions_in_data_units, run_selection, series_windows,
    SeriesExperiment, SeriesWindows,
};
use sparsets::metrics::{self, IntervalSummary};
use sparsets::models::{
    ar_order, count_hidden_links, selected_input_lags, Checkpoint, Network, NetworkKind,
    ParamVector, StructureMask, TrainingMeta,
};
use sparsets::rng::stream_seed;
use sparsets::uq::{intervals_multi_horizon, intervals_one_step, split_conformal_baseline, IntervalReport};
use sparsets::Error;

use crate::config::{DataKind, RunConfig, Splits};
use crate::CliError;

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| CliError::Output(format!("{}: {e}", path.display())))
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(value).map_err(Error::from)?;
    s.push('\n');
    write(dir, name, s)
}

fn lags_field(lags: &BTreeSet<usize>) -> String {
    lags.iter().map(usize::to_string).collect::<Vec<_>>().join(";")
}

/// The raw series named by the config: simulated from the seed or read from
/// CSV.
fn raw_series(cfg: &RunConfig, len: usize) -> Result<SeriesDataset, CliError> {
    match (cfg.data.kind, &cfg.data.csv_path) {
        (Some(kind), _) => {
            let process = kind
                .process()
                .ok_or_else(|| CliError::Config("a panel kind has no single series".into()))?;
            Ok(process.generate(len, stream_seed(cfg.seed, "data"), cfg.data.burn_in)?)
        }
        (None, Some(path)) => Ok(read_csv(path)?),
        (None, None) => unreachable!("checked at load"),
    }
}

fn series_len(cfg: &RunConfig) -> Result<usize, CliError> {
    let (w, m) = cfg.window()?;
    let s = cfg.splits()?;
    Ok(w + m - 1 + s.train + s.val + s.test)
}

fn windows(cfg: &RunConfig) -> Result<SeriesWindows, CliError> {
    let (w, m) = cfg.window()?;
    let s = cfg.splits()?;
    let series = raw_series(cfg, series_len(cfg)?)?;
    Ok(series_windows(&series, w, m, [s.train, s.val, s.test], cfg.data.scaling)?)
}

fn panel(cfg: &RunConfig) -> Result<PanelDataset, CliError> {
    let (length, horizon, phi) = cfg.panel_shape()?;
    let s = cfg.splits()?;
    Ok(ar1_panel([s.train, s.cal, s.test], length, horizon, phi, cfg.seed)?)
}

pub fn simulate(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let kind = cfg
        .data
        .kind
        .ok_or_else(|| CliError::Config("simulate needs `data.kind`".into()))?;
    if kind == DataKind::Ar1Panel {
        let p = panel(cfg)?;
        let mut csv = String::from("sequence,split,t,value\n");
        for (i, (seq, split)) in p.sequences.iter().zip(&p.splits).enumerate() {
            let split = match split {
                Split::Train => "train",
                Split::Calibration => "calibration",
                Split::Test => "test",
            };
            for (t, v) in seq.iter().enumerate() {
                let _ = writeln!(csv, "{i},{split},{t},{v:.16e}");
            }
        }
        let (length, horizon, phi) = cfg.panel_shape()?;
        let manifest = DatasetManifest {
            kind: "ar1_panel".into(),
            n: p.sequences.len(),
            seed: cfg.seed,
            burn_in: 0,
            params: json!({ "phi": phi, "length": length, "horizon": horizon }),
        };
        write(out, "panel.csv", csv)?;
        return write_json(out, "manifest.json", &manifest);
    }
    let n = match cfg.data.n {
        Some(n) => n,
        None => series_len(cfg)?,
    };
    if n == 0 {
        return Err(CliError::Config("data.n must be >= 1".into()));
    }
    let series = raw_series(cfg, n)?;
    let params = match kind {
        DataKind::Nlar => json!({ "coefficients": NLAR_COEFFICIENTS }),
        _ => json!({ "a": 0.8, "b": -1.1, "gamma": 50.0 }),
    };
    let name = if kind == DataKind::Nlar { "nlar" } else { "expar" };
    let manifest = DatasetManifest { kind: name.into(), n, seed: cfg.seed, burn_in: cfg.data.burn_in, params };
    write(out, "series.csv", format_csv(&series))?;
    write_json(out, "manifest.json", &manifest)
}

#[derive(Serialize)]
struct TrainSummary {
    n_params: usize,
    kept: usize,
    kept_fraction: f64,
    threshold: f64,
    sigma0_init_sq: f64,
    hidden_links: Option<usize>,
    selected_lags: Option<Vec<usize>>,
    ar_order: Option<usize>,
    mspe: Option<f64>,
    msfe: Option<f64>,
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let fit_cfg = cfg.fit()?;
    let (train_set, spec, windows) = if cfg.is_panel() {
        let p = panel(cfg)?;
        let (_, horizon, _) = cfg.panel_shape()?;
        (p.samples(Split::Train), fit_cfg.model.spec(1, horizon, 0)?, None)
    } else {
        let w = windows(cfg)?;
        let exog = w.train[0].steps[0].len() - cfg.window()?.0;
        let spec = fit_cfg.model.spec(cfg.window()?.0, 1, exog)?;
        (w.train.clone(), spec, Some(w))
    };
    let fit = match fit_network(spec.clone(), &train_set, &fit_cfg, cfg.seed) {
        Ok(f) => f,
        Err(Error::Divergence { iteration, loss, last_finite }) => {
            let net = Network::new(
                spec.clone(),
                ParamVector { values: last_finite.clone() },
                StructureMask::ones(spec.num_params()),
            )?;
            let meta = TrainingMeta { seed: cfg.seed, m_l: cfg.data.m_l.unwrap_or(1), ..Default::default() };
            Checkpoint::from_network(&net, meta).save(out.join("checkpoint_last_good.json"))?;
            return Err(Error::Divergence { iteration, loss, last_finite }.into());
        }
        Err(e) => return Err(e.into()),
    };
    let net = &fit.network;
    let mut log = String::new();
    for r in &fit.trace {
        log.push_str(&serde_json::to_string(r).map_err(Error::from)?);
        log.push('\n');
    }
    let st = windows.as_ref().and_then(|w| w.standardization);
    let meta = TrainingMeta {
        seed: cfg.seed,
        m_l: if cfg.is_panel() { cfg.panel_shape()?.0 } else { cfg.window()?.1 },
        n_train: train_set.len(),
        standardization: st,
        final_loss: fit.trace.last().map(|r| r.loss),
        kept_fraction: Some(fit.kept_fraction),
        threshold: Some(fit.threshold),
    };
    Checkpoint::from_network(net, meta).save(out.join("checkpoint.json"))?;
    write_json(out, "mask.json", &net.mask)?;
    write(out, "train_log.jsonl", log)?;

    let rnn = net.spec.kind == NetworkKind::ElmanRnn;
    let hidden_links = if rnn { Some(count_hidden_links(&net.mask, &net.spec)?) } else { None };
    let (lags, mspe, msfe) = match &windows {
        Some(w) => {
            let lags = selected_input_lags(&net.mask, &net.spec)?;
            let mspe = if w.test.is_empty() {
                None
            } else {
                let (p, y) = predictions_in_data_units(net, &w.test, st.as_ref())?;
                Some(metrics::mspe(&p, &y)?)
            };
            let (p, y) = predictions_in_data_units(net, &w.train, st.as_ref())?;
            (Some(lags), mspe, Some(metrics::msfe(&p, &y)?))
        }
        None => (None, None, None),
    };
    let summary = TrainSummary {
        n_params: net.params.len(),
        kept: net.mask.count(),
        kept_fraction: fit.kept_fraction,
        threshold: fit.threshold,
        sigma0_init_sq: fit.sigma0_init_sq,
        hidden_links,
        ar_order: lags.as_ref().map(ar_order),
        selected_lags: lags.map(|l| l.into_iter().collect()),
        mspe,
        msfe,
    };
    log::info!("kept {} of {} weights", summary.kept, summary.n_params);
    write_json(out, "train_summary.json", &summary)
}

pub fn select_order(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let process = cfg
        .data
        .kind
        .and_then(DataKind::process)
        .ok_or_else(|| CliError::Config("select-order needs data.kind nlar or expar".into()))?;
    let reps = cfg.replicates.ok_or_else(|| CliError::Config("missing `replicates`".into()))?;
    if reps == 0 {
        return Err(CliError::Config("replicates must be >= 1".into()));
    }
    let (window, m_l) = cfg.window()?;
    let Splits { train, val, test, .. } = cfg.splits()?;
    let exp = SeriesExperiment {
        process,
        n_train: train,
        n_val: val,
        n_test: test,
        burn_in: cfg.data.burn_in,
        window,
        m_l,
        scaling: cfg.data.scaling,
        fit: cfg.fit()?,
    };
    if test == 0 {
        return Err(CliError::Config("select-order needs test windows for the MSPE".into()));
    }
    let (outcomes, _, summary) = run_selection(&exp, cfg.seed, reps)?;
    let mut csv = String::from("replicate,seed,selected_lags,ar_order,hidden_links,mspe,msfe\n");
    for (j, o) in outcomes.iter().enumerate() {
        let _ = writeln!(
            csv,
            "{j},{},{},{},{},{:.16e},{:.16e}",
            o.seed,
            lags_field(&o.selected),
            o.ar_order,
            o.hidden_links,
            o.mspe,
            o.msfe
        );
        log::info!("replicate {j}: lags {:?}, {} hidden links", o.selected, o.hidden_links);
    }
    write(out, "replicates.csv", csv)?;
    write_json(out, "selection_summary.json", &summary)
}

#[derive(Serialize)]
struct UqSummary {
    prior_annealing: IntervalSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    conformal: Option<IntervalSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    conformal_warning: Option<String>,
}

fn targets_of(samples: &[Sample]) -> Vec<Vec<f64>> {
    samples.iter().map(|s| s.target.clone()).collect()
}

pub fn uq(cfg: &RunConfig, out: &Path, conformal: bool) -> Result<(), CliError> {
    let u = cfg.uq.as_ref().ok_or_else(|| CliError::Config("missing `uq`".into()))?;
    let ck = Checkpoint::load(&u.checkpoint)
        .map_err(|e| CliError::Config(format!("checkpoint {}: {e}", u.checkpoint.display())))?;
    let net = ck.network()?;
    let m = net.spec.output_dim();
    if let Some(h) = u.horizon {
        if h != m {
            return Err(CliError::Config(format!("uq.horizon {h} but the checkpoint predicts {m} steps")));
        }
    }
    let (report, targets, cal, test, test_index) = if cfg.is_panel() {
        let p = panel(cfg)?;
        let (train, cal, test) = (p.samples(Split::Train), p.samples(Split::Calibration), p.samples(Split::Test));
        if test.is_empty() {
            return Err(CliError::Config("no test sequences".into()));
        }
        let r = intervals_multi_horizon(&net, &train, &test, u.alpha, &u.hessian)?;
        let targets = targets_of(&test);
        let cal = (net.predict_all(&cal)?, targets_of(&cal));
        let index: Vec<usize> = test.iter().map(|s| s.index).collect();
        (r, targets, cal, net.predict_all(&test)?, index)
    } else {
        let w = windows(cfg)?;
        if w.test.is_empty() {
            return Err(CliError::Config("no test windows".into()));
        }
        let mut r = intervals_one_step(&net, &w.train, &w.test, u.alpha, &u.hessian)?;
        let st = w.standardization;
        if let Some(st) = &st {
            r = r.destandardize(st);
        }
        let (_, y) = predictions_in_data_units(&net, &w.test, st.as_ref())?;
        let (tp, _) = predictions_in_data_units(&net, &w.test, st.as_ref())?;
        let (cp, cy) = predictions_in_data_units(&net, &w.val, st.as_ref())?;
        let wrap = |v: Vec<f64>| v.into_iter().map(|x| vec![x]).collect::<Vec<_>>();
        let index: Vec<usize> = w.test.iter().map(|s| s.index).collect();
        (r, wrap(y), (wrap(cp), wrap(cy)), wrap(tp), index)
    };
    report.write_csv(out.join("intervals.csv"))?;
    let mut summary = UqSummary {
        prior_annealing: metrics::coverage_and_length(&report, &targets)?,
        conformal: None,
        conformal_warning: None,
    };
    if conformal {
        if cal.0.is_empty() {
            return Err(CliError::Config(
                "the conformal baseline needs calibration data (splits.val or splits.cal)".into(),
            ));
        }
        let mut base: IntervalReport = split_conformal_baseline(&cal.0, &cal.1, &test, u.alpha, m)?;
        for p in &mut base.points {
            p.point_index = test_index[p.point_index];
        }
        base.write_csv(out.join("conformal_intervals.csv"))?;
        summary.conformal = Some(metrics::coverage_and_length(&base, &targets)?);
        summary.conformal_warning = base.warning.clone();
    }
    write_json(out, "uq_summary.json", &summary)
}
