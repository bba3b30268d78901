//! Synthetic processes, windowing, standardization and CSV ingestion.

use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Default number of discarded warm-up samples for the synthetic processes.
pub const DEFAULT_BURN_IN: usize = 200;

/// Intercept, AR coefficients on lags 1, 2, 3, 7 and the weights of the two
/// logistic terms of the NLAR process.
pub const NLAR_COEFFICIENTS: [f64; 7] = [-0.17, 0.85, 0.14, -0.31, 0.08, 12.80, 2.44];

/// True lag set of the NLAR process.
pub const NLAR_TRUE_LAGS: [usize; 4] = [1, 2, 3, 7];

/// z-score record computed on a training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: f64,
    pub sd: f64,
}

impl Standardization {
    pub fn fit(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("cannot standardize an empty split".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        if !(var > 0.0) {
            return Err(Error::InvalidArgument("training split has zero variance".into()));
        }
        Ok(Self { mean, sd: var.sqrt() })
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.sd
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.sd + self.mean
    }
}

/// A single real-valued series with optional exogenous columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesDataset {
    pub values: Vec<f64>,
    /// `n x d` exogenous matrix, one row per time index.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exog: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standardization: Option<Standardization>,
}

impl SeriesDataset {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let ds = Self { values, exog: None, standardization: None };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn exog_dim(&self) -> usize {
        self.exog.as_ref().and_then(|e| e.first()).map_or(0, |r| r.len())
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("series value at index {i}")));
        }
        if let Some(ex) = &self.exog {
            if ex.len() != self.values.len() {
                return Err(Error::Shape(format!(
                    "exogenous matrix has {} rows for {} values",
                    ex.len(),
                    self.values.len()
                )));
            }
            let d = self.exog_dim();
            if ex.iter().any(|r| r.len() != d || r.iter().any(|v| !v.is_finite())) {
                return Err(Error::Shape("ragged or non-finite exogenous rows".into()));
            }
        }
        Ok(())
    }

    /// Standardizes the series (and exogenous columns are left untouched)
    /// with statistics from `train` only.
    pub fn standardize(&self, train: Range<usize>) -> Result<Self> {
        if self.standardization.is_some() {
            return Err(Error::State("series is already standardized".into()));
        }
        let slice = self
            .values
            .get(train.clone())
            .ok_or_else(|| Error::InvalidArgument(format!("training range {train:?} out of bounds")))?;
        self.rescale(Standardization::fit(slice)?)
    }

    /// Applies a precomputed `(v - mean) / sd` map.
    pub fn rescale(&self, st: Standardization) -> Result<Self> {
        if self.standardization.is_some() {
            return Err(Error::State("series is already standardized".into()));
        }
        if !(st.sd > 0.0) || !st.mean.is_finite() {
            return Err(Error::InvalidArgument(format!("invalid standardization {st:?}")));
        }
        Ok(Self {
            values: self.values.iter().map(|&v| st.apply(v)).collect(),
            exog: self.exog.clone(),
            standardization: Some(st),
        })
    }

    pub fn destandardize(&self) -> Result<Self> {
        let st = self
            .standardization
            .ok_or_else(|| Error::State("series is not standardized".into()))?;
        Ok(Self {
            values: self.values.iter().map(|&z| st.invert(z)).collect(),
            exog: self.exog.clone(),
            standardization: None,
        })
    }
}

/// Role of a panel sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Calibration,
    Test,
}

/// A set of i.i.d. equal-length sequences whose last `horizon` values are
/// the forecast targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelDataset {
    pub sequences: Vec<Vec<f64>>,
    pub horizon: usize,
    pub splits: Vec<Split>,
}

impl PanelDataset {
    pub fn new(sequences: Vec<Vec<f64>>, horizon: usize) -> Result<Self> {
        let splits = vec![Split::Train; sequences.len()];
        let p = Self { sequences, horizon, splits };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be >= 1".into()));
        }
        let len = self.sequences.first().map_or(0, |s| s.len());
        if self.sequences.iter().any(|s| s.len() != len) {
            return Err(Error::Shape("panel sequences have unequal lengths".into()));
        }
        if len <= self.horizon {
            return Err(Error::Shape(format!(
                "sequence length {len} leaves no observed prefix for horizon {}",
                self.horizon
            )));
        }
        if self.splits.len() != self.sequences.len() {
            return Err(Error::Shape("split labels do not match sequences".into()));
        }
        Ok(())
    }

    /// Observed length `T` of every sequence.
    pub fn observed_len(&self) -> usize {
        self.sequences[0].len() - self.horizon
    }

    /// Labels the first `n_train` sequences train, the next `n_cal`
    /// calibration and the rest test.
    pub fn with_splits(mut self, n_train: usize, n_cal: usize) -> Result<Self> {
        if n_train + n_cal > self.sequences.len() {
            return Err(Error::InvalidArgument("split sizes exceed the panel".into()));
        }
        for (i, s) in self.splits.iter_mut().enumerate() {
            *s = if i < n_train {
                Split::Train
            } else if i < n_train + n_cal {
                Split::Calibration
            } else {
                Split::Test
            };
        }
        Ok(self)
    }

    pub fn samples(&self, split: Split) -> Vec<Sample> {
        let t = self.observed_len();
        self.sequences
            .iter()
            .zip(&self.splits)
            .enumerate()
            .filter(|(_, (_, s))| **s == split)
            .map(|(i, (seq, _))| Sample {
                steps: seq[..t].iter().map(|&v| vec![v]).collect(),
                target: seq[t..].to_vec(),
                index: i,
            })
            .collect()
    }
}

/// One training or evaluation example: a sequence of input vectors (one per
/// recurrent step) and the target emitted at the final step.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub steps: Vec<Vec<f64>>,
    pub target: Vec<f64>,
    /// Series index of the target (single series) or sequence index (panel).
    pub index: usize,
}

fn simulate(
    n: usize,
    burn_in: usize,
    order: usize,
    mean: impl Fn(&[f64]) -> f64,
    mut noise: impl FnMut() -> f64,
) -> Vec<f64> {
    // history[k] = y_{i-1-k}, seeded with zeros
    let mut hist = vec![0.0; order];
    let mut out = Vec::with_capacity(n);
    for i in 0..burn_in + n {
        let y = mean(&hist) + noise();
        hist.rotate_right(1);
        hist[0] = y;
        if i >= burn_in {
            out.push(y);
        }
    }
    out
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Conditional mean of the NLAR process given `lags[k] = y_{i-1-k}`,
/// `k = 0..7`.
pub fn nlar_mean(lags: &[f64]) -> f64 {
    let [c, a1, a2, a3, a7, g1w, g2w] = NLAR_COEFFICIENTS;
    let (y1, y2, y3, y7) = (lags[0], lags[1], lags[2], lags[6]);
    let g1 = logistic(0.46 * (0.29 * y1 - 0.87 * y2 + 0.40 * y7 - 6.68));
    let g2 = logistic(1.17e-3 * (0.83 * y1 - 0.53 * y2 - 0.18 * y7 + 0.38));
    c + a1 * y1 + a2 * y2 + a3 * y3 + a7 * y7 + g1w * g1 + g2w * g2
}

/// Conditional mean of the exponential AR process given `y_{i-1}`.
pub fn expar_mean(prev: f64) -> f64 {
    (0.8 - 1.1 * (-50.0 * prev * prev).exp()) * prev
}

/// NLAR(7) process with unit Gaussian noise.
pub fn gen_nlar(n: usize, seed: u64, burn_in: usize) -> Result<SeriesDataset> {
    if n == 0 || burn_in < 7 {
        return Err(Error::InvalidArgument(format!(
            "gen_nlar needs n >= 1 and burn_in >= 7 (got n={n}, burn_in={burn_in})"
        )));
    }
    let mut rng = SeededRng::stream(seed, "nlar-noise");
    SeriesDataset::new(simulate(n, burn_in, 7, nlar_mean, || rng.normal()))
}

/// Exponential AR(1) process with unit Gaussian noise.
pub fn gen_expar(n: usize, seed: u64, burn_in: usize) -> Result<SeriesDataset> {
    if n == 0 || burn_in < 1 {
        return Err(Error::InvalidArgument(format!(
            "gen_expar needs n >= 1 and burn_in >= 1 (got n={n}, burn_in={burn_in})"
        )));
    }
    let mut rng = SeededRng::stream(seed, "expar-noise");
    SeriesDataset::new(simulate(n, burn_in, 1, |h| expar_mean(h[0]), || rng.normal()))
}

/// Panel of i.i.d. stationary AR(1) sequences with unit innovations, each
/// started from the stationary law.
pub fn gen_ar1_panel(
    n_sequences: usize,
    length: usize,
    horizon: usize,
    phi: f64,
    seed: u64,
) -> Result<PanelDataset> {
    if !(phi.abs() < 1.0) {
        return Err(Error::InvalidArgument(format!("|phi| = {} must be < 1", phi.abs())));
    }
    if n_sequences == 0 {
        return Err(Error::InvalidArgument("panel needs at least one sequence".into()));
    }
    let mut rng = SeededRng::stream(seed, "ar1-panel");
    let sd0 = (1.0 / (1.0 - phi * phi)).sqrt();
    let sequences = (0..n_sequences)
        .map(|_| {
            let mut y = sd0 * rng.normal();
            let mut s = Vec::with_capacity(length);
            s.push(y);
            for _ in 1..length {
                y = phi * y + rng.normal();
                s.push(y);
            }
            s
        })
        .collect();
    PanelDataset::new(sequences, horizon)
}

/// Cuts a series into windows of `m_l` consecutive lag vectors
/// `(y_{t-1}, .., y_{t-w})` (followed by the exogenous row at `t`), each
/// paired with the target at its final step. Produces `n - m_l - w + 1`
/// windows in target order.
pub fn window_series(series: &SeriesDataset, w: usize, m_l: usize) -> Result<Vec<Sample>> {
    let n = series.len();
    if w == 0 || m_l == 0 {
        return Err(Error::InvalidArgument("window size and M_l must be >= 1".into()));
    }
    if n <= m_l + w {
        return Err(Error::InvalidArgument(format!(
            "series of length {n} too short for window {w} and M_l {m_l}"
        )));
    }
    let y = &series.values;
    let first = m_l + w - 1;
    Ok((first..n)
        .map(|i| {
            let steps = (0..m_l)
                .map(|s| {
                    let t = i + 1 + s - m_l;
                    let mut x: Vec<f64> = (1..=w).map(|lag| y[t - lag]).collect();
                    if let Some(ex) = &series.exog {
                        x.extend_from_slice(&ex[t]);
                    }
                    x
                })
                .collect();
            Sample { steps, target: vec![y[i]], index: i }
        })
        .collect())
}

/// Contiguous train / validation / test slices of one realization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeriesSplit {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl SeriesSplit {
    pub fn contiguous(n_train: usize, n_val: usize, n_test: usize) -> Self {
        Self {
            train: 0..n_train,
            val: n_train..n_train + n_val,
            test: n_train + n_val..n_train + n_val + n_test,
        }
    }

    pub fn total(&self) -> usize {
        self.test.end
    }
}

/// Windows whose target index falls in `range`.
pub fn windows_in(windows: &[Sample], range: &Range<usize>) -> Vec<Sample> {
    windows.iter().filter(|s| range.contains(&s.index)).cloned().collect()
}

/// Reads a series from CSV: first column `y`, any further columns are
/// exogenous. A first row whose first cell is `y` is a header.
pub fn read_csv(path: impl AsRef<Path>) -> Result<SeriesDataset> {
    let text = std::fs::read_to_string(path)?;
    parse_csv(&text)
}

pub fn parse_csv(text: &str) -> Result<SeriesDataset> {
    let mut values = Vec::new();
    let mut exog: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (row, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if row == 0 && cells[0].eq_ignore_ascii_case("y") {
            continue;
        }
        let nums = cells
            .iter()
            .map(|c| {
                c.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Csv { row: row + 1, msg: format!("non-numeric cell {c:?}") })
            })
            .collect::<Result<Vec<f64>>>()?;
        match width {
            None => width = Some(nums.len()),
            Some(w) if w != nums.len() => {
                return Err(Error::Csv { row: row + 1, msg: format!("expected {w} columns") })
            }
            _ => {}
        }
        values.push(nums[0]);
        exog.push(nums[1..].to_vec());
    }
    if values.is_empty() {
        return Err(Error::Csv { row: 0, msg: "no data rows".into() });
    }
    let exog = (width.unwrap_or(1) > 1).then_some(exog);
    let ds = SeriesDataset { values, exog, standardization: None };
    ds.validate()?;
    Ok(ds)
}

pub fn format_csv(ds: &SeriesDataset) -> String {
    let mut s = String::from("y");
    for j in 0..ds.exog_dim() {
        let _ = write!(s, ",x{}", j + 1);
    }
    s.push('\n');
    for (i, v) in ds.values.iter().enumerate() {
        let _ = write!(s, "{v:.16e}");
        if let Some(ex) = &ds.exog {
            for e in &ex[i] {
                let _ = write!(s, ",{e:.16e}");
            }
        }
        s.push('\n');
    }
    s
}

pub fn write_csv(path: impl AsRef<Path>, ds: &SeriesDataset) -> Result<()> {
    std::fs::write(path, format_csv(ds))?;
    Ok(())
}

/// JSON manifest describing how a dataset was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub kind: String,
    pub n: usize,
    pub seed: u64,
    pub burn_in: usize,
    pub params: serde_json::Value,
}
