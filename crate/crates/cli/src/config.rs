//! JSON run configuration shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sparsets::data::DEFAULT_BURN_IN;
use sparsets::experiment::{FitConfig, ModelConfig, PriorConfig, ProcessKind, Scaling, ScheduleConfig};
use sparsets::train::TrainConfig;
use sparsets::uq::HessianConfig;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Nlar,
    Expar,
    Ar1Panel,
}

impl DataKind {
    pub fn process(self) -> Option<ProcessKind> {
        match self {
            DataKind::Nlar => Some(ProcessKind::Nlar),
            DataKind::Expar => Some(ProcessKind::Expar),
            DataKind::Ar1Panel => None,
        }
    }
}

/// Split sizes. For a series these count windows; for a panel they count
/// sequences (`val` is unused and `cal` feeds the conformal baseline).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: usize,
    #[serde(default)]
    pub val: usize,
    #[serde(default)]
    pub cal: usize,
    #[serde(default)]
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub kind: Option<DataKind>,
    #[serde(default)]
    pub csv_path: Option<PathBuf>,
    /// Series length for `simulate`; derived from the splits when absent.
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    #[serde(default)]
    pub window: Option<usize>,
    #[serde(default, rename = "M_l", alias = "m_l")]
    pub m_l: Option<usize>,
    #[serde(default)]
    pub splits: Option<Splits>,
    #[serde(default)]
    pub scaling: Scaling,
    /// Observed length of every panel sequence.
    #[serde(default)]
    pub length: Option<usize>,
    #[serde(default)]
    pub horizon: Option<usize>,
    #[serde(default)]
    pub phi: Option<f64>,
}

fn default_burn_in() -> usize {
    DEFAULT_BURN_IN
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UqConfig {
    pub checkpoint: PathBuf,
    pub alpha: f64,
    #[serde(default)]
    pub horizon: Option<usize>,
    #[serde(default)]
    pub hessian: HessianConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    pub data: DataConfig,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub prior: Option<PriorConfig>,
    #[serde(default)]
    pub schedule: Option<ScheduleConfig>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub uq: Option<UqConfig>,
    #[serde(default)]
    pub replicates: Option<usize>,
}

fn missing(what: &str) -> CliError {
    CliError::Config(format!("missing `{what}`"))
}

impl RunConfig {
    /// Parses `path` and checks that every referenced file exists. Relative
    /// paths inside the document resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = cfg.data.csv_path.as_mut() {
            resolve(p);
        }
        if let Some(u) = cfg.uq.as_mut() {
            resolve(&mut u.checkpoint);
        }
        if let Some(p) = cfg.out_dir.as_mut() {
            resolve(p);
        }
        cfg.check_paths()?;
        match (cfg.data.kind, &cfg.data.csv_path) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(CliError::Config("data needs exactly one of `kind` and `csv_path`".into()))
            }
            _ => {}
        }
        Ok(cfg)
    }

    fn check_paths(&self) -> Result<(), CliError> {
        let paths = self.data.csv_path.iter().chain(self.uq.as_ref().map(|u| &u.checkpoint));
        for p in paths {
            if !p.is_file() {
                return Err(CliError::Config(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn is_panel(&self) -> bool {
        self.data.kind == Some(DataKind::Ar1Panel)
    }

    pub fn fit(&self) -> Result<FitConfig, CliError> {
        let fit = FitConfig {
            model: self.model.clone().ok_or_else(|| missing("model"))?,
            prior: self.prior.clone().ok_or_else(|| missing("prior"))?,
            schedule: self.schedule.ok_or_else(|| missing("schedule"))?,
            train: self.train.clone().ok_or_else(|| missing("train"))?,
        };
        fit.prior.validate()?;
        fit.train.validate()?;
        fit.schedule.with_prior(1.0, 1.0).validate()?;
        Ok(fit)
    }

    pub fn splits(&self) -> Result<Splits, CliError> {
        self.data.splits.ok_or_else(|| missing("data.splits"))
    }

    pub fn window(&self) -> Result<(usize, usize), CliError> {
        let w = self.data.window.ok_or_else(|| missing("data.window"))?;
        let m = self.data.m_l.ok_or_else(|| missing("data.M_l"))?;
        Ok((w, m))
    }

    /// Panel shape `(length, horizon, phi)`.
    pub fn panel_shape(&self) -> Result<(usize, usize, f64), CliError> {
        Ok((
            self.data.length.ok_or_else(|| missing("data.length"))?,
            self.data.horizon.ok_or_else(|| missing("data.horizon"))?,
            self.data.phi.ok_or_else(|| missing("data.phi"))?,
        ))
    }
}
