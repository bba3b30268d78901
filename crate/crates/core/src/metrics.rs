//! Selection and forecasting metrics.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::uq::IntervalReport;

/// Per-replicate outcome of an order-selection experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub truth: BTreeSet<usize>,
    pub selected: Vec<BTreeSet<usize>>,
    pub hidden_links: Vec<usize>,
    /// `max(selected)` per replicate, `None` for an empty selection.
    pub ar_orders: Vec<Option<usize>>,
}

impl SelectionResult {
    pub fn new(truth: BTreeSet<usize>, selected: Vec<BTreeSet<usize>>, hidden_links: Vec<usize>) -> Self {
        let ar_orders = selected.iter().map(|s| s.iter().next_back().copied()).collect();
        Self { truth, selected, hidden_links, ar_orders }
    }
}

/// `sum_j |S_j \ S| / sum_j |S_j|`.
pub fn fsr(r: &SelectionResult) -> Result<f64> {
    let total: usize = r.selected.iter().map(|s| s.len()).sum();
    if total == 0 {
        return Err(Error::Undefined("FSR with every selection empty".into()));
    }
    let false_sel: usize = r.selected.iter().map(|s| s.difference(&r.truth).count()).sum();
    Ok(false_sel as f64 / total as f64)
}

/// `sum_j |S \ S_j| / sum_j |S|`.
pub fn nsr(r: &SelectionResult) -> Result<f64> {
    if r.truth.is_empty() {
        return Err(Error::Undefined("NSR with an empty true set".into()));
    }
    if r.selected.is_empty() {
        return Err(Error::Undefined("NSR over zero replicates".into()));
    }
    let missed: usize = r.selected.iter().map(|s| r.truth.difference(s).count()).sum();
    Ok(missed as f64 / (r.truth.len() * r.selected.len()) as f64)
}

fn mean_sq(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::InvalidArgument("empty prediction set".into()));
    }
    if predictions.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let s: f64 = predictions.iter().zip(targets).map(|(p, y)| (p - y).powi(2)).sum();
    Ok(s / predictions.len() as f64)
}

/// Mean squared prediction error on held-out targets.
pub fn mspe(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    mean_sq(predictions, targets)
}

/// Mean squared fitting error on training targets.
pub fn msfe(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    mean_sq(predictions, targets)
}

/// Sample mean and standard deviation (divisor `n - 1`, 0 for one value).
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(xs: &[f64], q: f64) -> f64 {
    let pos = q * (xs.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    xs[lo] + (xs[hi] - xs[lo]) * (pos - lo as f64)
}

/// Coverage and width statistics of an interval report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalSummary {
    pub alpha: f64,
    /// Fraction of all (point, horizon) targets covered.
    pub coverage: f64,
    /// Fraction of points with every horizon covered; equals `coverage`
    /// for single-horizon reports.
    pub joint_coverage: f64,
    /// Marginal coverage per horizon.
    pub horizon_coverage: Vec<f64>,
    pub mean_width: f64,
    pub sd_width: f64,
    pub median_width: f64,
    pub iqr_width: f64,
}

/// `targets[i]` holds the `m` targets of the `i`-th point of the report.
/// Membership is closed.
pub fn coverage_and_length(report: &IntervalReport, targets: &[Vec<f64>]) -> Result<IntervalSummary> {
    let m = report.horizons.max(1);
    if report.points.len() != targets.len() * m || targets.iter().any(|t| t.len() != m) {
        return Err(Error::Shape(format!(
            "{} interval points for {} targets of {m} horizons",
            report.points.len(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Err(Error::InvalidArgument("no test targets".into()));
    }
    let mut covered = 0usize;
    let mut joint = 0usize;
    let mut per_h = vec![0usize; m];
    for (i, t) in targets.iter().enumerate() {
        let mut all = true;
        for r in 0..m {
            let hit = report.points[i * m + r].contains(t[r]);
            if hit {
                covered += 1;
                per_h[r] += 1;
            } else {
                all = false;
            }
        }
        if all {
            joint += 1;
        }
    }
    let n = targets.len() as f64;
    let mut widths: Vec<f64> = report.points.iter().map(|p| p.width()).collect();
    let (mean_width, sd_width) = mean_sd(&widths);
    widths.sort_by(f64::total_cmp);
    Ok(IntervalSummary {
        alpha: report.alpha,
        coverage: covered as f64 / (n * m as f64),
        joint_coverage: joint as f64 / n,
        horizon_coverage: per_h.iter().map(|&c| c as f64 / n).collect(),
        mean_width,
        sd_width,
        median_width: quantile_sorted(&widths, 0.5),
        iqr_width: quantile_sorted(&widths, 0.75) - quantile_sorted(&widths, 0.25),
    })
}

/// Pooled order-selection summary over replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub fsr: Option<f64>,
    pub nsr: Option<f64>,
    pub ar_order_mean: Option<f64>,
    pub ar_order_sd: Option<f64>,
    pub hidden_links_mean: f64,
    pub hidden_links_sd: f64,
    pub mspe_mean: f64,
    pub mspe_sd: f64,
    pub msfe_mean: f64,
    pub msfe_sd: f64,
}

/// `order_applicable` is false when the input window cannot cover the true
/// order, in which case AR-order statistics are reported as null.
pub fn summarize_selection(
    r: &SelectionResult,
    mspes: &[f64],
    msfes: &[f64],
    order_applicable: bool,
) -> SelectionSummary {
    let links: Vec<f64> = r.hidden_links.iter().map(|&h| h as f64).collect();
    let (hidden_links_mean, hidden_links_sd) = mean_sd(&links);
    let orders: Vec<f64> = r.ar_orders.iter().map(|o| o.unwrap_or(0) as f64).collect();
    let (om, osd) = mean_sd(&orders);
    let (mspe_mean, mspe_sd) = mean_sd(mspes);
    let (msfe_mean, msfe_sd) = mean_sd(msfes);
    SelectionSummary {
        fsr: fsr(r).ok(),
        nsr: nsr(r).ok(),
        ar_order_mean: order_applicable.then_some(om),
        ar_order_sd: order_applicable.then_some(osd),
        hidden_links_mean,
        hidden_links_sd,
        mspe_mean,
        mspe_sd,
        msfe_mean,
        msfe_sd,
    }
}
