//! Run configuration.
//!
//! Every setting is optional at every layer. Layers are merged key by key with
//! precedence flags > JSON file > preset > built-in defaults, and only the
//! merged result is interpreted.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use catt_core::band::{Scope, WeightKind};
use catt_core::first_stage::{FirstStageOptions, OutcomeModel, TrimPolicy};
use catt_core::local_poly::Kernel;
use catt_core::panel::ControlMode;
use catt_core::pipeline::{BandMethod, BandwidthChoice, EstimatorSettings, GridSpec};
use catt_core::simulation::{CovariateKind, SimConfig};

use crate::CliError;

pub const PRESETS: [&str; 2] = ["appendix-d", "section6"];

const DEFAULT_GRID_POINTS: usize = 41;

#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// JSON file of settings, keyed by flag name with underscores.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Named bundle of settings (appendix-d, section6).
    #[arg(long)]
    pub preset: Option<String>,

    /// Long-format panel CSV.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub id_col: Option<String>,
    #[arg(long)]
    pub time_col: Option<String>,
    #[arg(long)]
    pub y_col: Option<String>,
    /// First-treatment period column; 0, empty, `never` or `inf` mean never treated.
    #[arg(long)]
    pub g_col: Option<String>,
    /// Binary treatment-status column, used when no group column is given.
    #[arg(long)]
    pub d_col: Option<String>,
    #[arg(long)]
    pub z_col: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub x_cols: Option<Vec<String>>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub drop_always_treated: Option<bool>,

    /// `continuous` (local polynomial) or `discrete` (cell means).
    #[arg(long)]
    pub estimator: Option<String>,
    #[arg(long)]
    pub delta: Option<usize>,
    /// `never` or `notyet`.
    #[arg(long)]
    pub control: Option<String>,
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub kernel: Option<String>,
    /// `auto`, `rot` or a positive number.
    #[arg(long)]
    pub bandwidth: Option<String>,
    #[arg(long)]
    pub h_var: Option<f64>,
    /// `none`, `analytic`, `gumbel` or `bootstrap`.
    #[arg(long)]
    pub band: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub boot_reps: Option<usize>,
    /// `mammen` or `normal`.
    #[arg(long)]
    pub weights: Option<String>,
    /// `z` (per cell) or `joint` (all cells at once).
    #[arg(long)]
    pub scope: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub grid_points: Option<usize>,
    /// Two comma-separated endpoints.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub grid_interval: Option<Vec<f64>>,
    /// Explicit comma-separated evaluation points.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub grid: Option<Vec<f64>>,
    /// Cells as `g:t` in the data's period labels, comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub cells: Option<Vec<String>>,
    #[arg(long)]
    pub trim_epsilon: Option<f64>,
    /// `fail` or `drop`.
    #[arg(long)]
    pub trim_policy: Option<String>,
    /// Covariate columns of the propensity model (default: all of x_cols).
    #[arg(long, value_delimiter = ',')]
    pub gps_cols: Option<Vec<String>>,
    /// Covariate columns of the outcome regression (default: all of x_cols).
    #[arg(long, value_delimiter = ',')]
    pub or_cols: Option<Vec<String>>,
    /// `linear` or `zero`.
    #[arg(long)]
    pub outcome_model: Option<String>,

    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub periods: Option<usize>,
    #[arg(long)]
    pub reps: Option<usize>,
    /// `continuous` or `discrete`.
    #[arg(long)]
    pub covariate: Option<String>,
    #[arg(long)]
    pub gamma_scale: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub confounder: Option<bool>,
    /// Also write the first replication's panel as `panel.csv`.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub emit_panel: Option<bool>,

    #[arg(long, short)]
    pub output: Option<PathBuf>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub overwrite: Option<bool>,
    /// Worker threads; outputs do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
}

fn invalid(field: &str, message: impl Into<String>) -> CliError {
    CliError::Config { field: field.to_string(), message: message.into() }
}

fn parse<T>(field: &str, r: Result<T, String>) -> Result<T, CliError> {
    r.map_err(|m| invalid(field, m))
}

fn to_map(c: &RunConfig) -> Map<String, Value> {
    match serde_json::to_value(c).expect("config serializes") {
        Value::Object(m) => m,
        _ => unreachable!(),
    }
}

/// `upper` wins wherever it sets a key.
pub fn overlay(upper: &RunConfig, lower: &RunConfig) -> RunConfig {
    let mut merged = to_map(lower);
    for (k, v) in to_map(upper) {
        if !v.is_null() {
            merged.insert(k, v);
        }
    }
    let mut out: RunConfig = serde_json::from_value(Value::Object(merged)).expect("merged config deserializes");
    out.config = upper.config.clone().or_else(|| lower.config.clone());
    out
}

pub fn read_config_file(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io { path: path.to_path_buf(), source: e })?;
    serde_json::from_str(&text).map_err(|e| invalid("config", format!("{}: {e}", path.display())))
}

pub fn preset(name: &str) -> Result<RunConfig, CliError> {
    let base = RunConfig {
        periods: Some(4),
        cells: Some(vec!["2:2".into()]),
        weights: Some("mammen".into()),
        alpha: Some(0.05),
        ..Default::default()
    };
    match name {
        "appendix-d" => Ok(RunConfig {
            estimator: Some("discrete".into()),
            covariate: Some("discrete".into()),
            n: Some(2000),
            reps: Some(1000),
            boot_reps: Some(999),
            ..base
        }),
        "section6" => Ok(RunConfig {
            estimator: Some("continuous".into()),
            covariate: Some("continuous".into()),
            n: Some(2000),
            reps: Some(500),
            boot_reps: Some(500),
            p: Some(2),
            band: Some("bootstrap".into()),
            bandwidth: Some("auto".into()),
            grid_interval: Some(vec![-1.0, 1.0]),
            grid_points: Some(21),
            ..base
        }),
        other => Err(invalid("preset", format!("unknown preset `{other}`; valid presets: {}", PRESETS.join(", ")))),
    }
}

/// Merges flags, the file named by `--config` (or by the flags' `config`),
/// and the preset named by either.
pub fn resolve(flags: &RunConfig) -> Result<RunConfig, CliError> {
    let file = match &flags.config {
        Some(p) => read_config_file(p)?,
        None => RunConfig::default(),
    };
    let merged = overlay(flags, &file);
    let merged = match &merged.preset {
        Some(name) => overlay(&merged, &preset(name)?),
        None => merged,
    };
    merged.validate()?;
    Ok(merged)
}

/// Input column names.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Columns {
    pub id: String,
    pub time: String,
    pub y: String,
    pub g: Option<String>,
    pub d: Option<String>,
    pub z: String,
    pub x: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum EstimatorKind {
    Continuous,
    Discrete,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a < 1.0) {
                return Err(invalid("alpha", format!("must lie in (0, 1), got {a}")));
            }
        }
        if let Some(p) = self.p {
            if p != 1 && p != 2 {
                return Err(invalid("p", format!("must be 1 or 2, got {p}")));
            }
        }
        if self.boot_reps == Some(0) {
            return Err(invalid("boot_reps", "must be at least 1"));
        }
        if self.threads == Some(0) {
            return Err(invalid("threads", "must be at least 1"));
        }
        if self.reps == Some(0) {
            return Err(invalid("reps", "must be at least 1"));
        }
        if let Some(v) = &self.grid_interval {
            if v.len() != 2 || !(v[0] < v[1]) {
                return Err(invalid("grid_interval", "expected two increasing endpoints"));
            }
        }
        if self.grid_points == Some(0) {
            return Err(invalid("grid_points", "must be at least 1"));
        }
        Ok(())
    }

    pub fn estimator_kind(&self) -> Result<EstimatorKind, CliError> {
        match self.estimator.as_deref().unwrap_or("continuous") {
            "continuous" => Ok(EstimatorKind::Continuous),
            "discrete" => Ok(EstimatorKind::Discrete),
            other => Err(invalid("estimator", format!("expected continuous or discrete, got `{other}`"))),
        }
    }

    pub fn columns(&self) -> Columns {
        Columns {
            id: self.id_col.clone().unwrap_or_else(|| "id".into()),
            time: self.time_col.clone().unwrap_or_else(|| "time".into()),
            y: self.y_col.clone().unwrap_or_else(|| "y".into()),
            g: self.g_col.clone().or_else(|| if self.d_col.is_none() { Some("g".into()) } else { None }),
            d: self.d_col.clone(),
            z: self.z_col.clone().unwrap_or_else(|| "z".into()),
            x: self.x_cols.clone().unwrap_or_default(),
        }
    }

    /// Cells as period labels.
    pub fn cell_labels(&self) -> Result<Option<Vec<(i64, i64)>>, CliError> {
        let Some(cells) = &self.cells else { return Ok(None) };
        cells
            .iter()
            .map(|c| {
                let (g, t) = c.split_once(':').ok_or_else(|| invalid("cells", format!("`{c}` is not of the form g:t")))?;
                let parse = |s: &str| s.trim().parse::<i64>().map_err(|_| invalid("cells", format!("`{c}` is not of the form g:t")));
                Ok((parse(g)?, parse(t)?))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }

    /// Estimator settings with covariate names resolved against `x_names`
    /// and cells resolved against the panel's period labels.
    pub fn estimator_settings(&self, x_names: &[String], period_labels: &[i64]) -> Result<EstimatorSettings, CliError> {
        let d = EstimatorSettings::default();
        let mode = match self.control.as_deref() {
            None | Some("never") => ControlMode::NeverTreated,
            Some("notyet") | Some("not-yet") => ControlMode::NotYetTreated,
            Some(other) => return Err(invalid("control", format!("expected never or notyet, got `{other}`"))),
        };
        let bandwidth = match self.bandwidth.as_deref() {
            None | Some("auto") => BandwidthChoice::Auto,
            Some("rot") => BandwidthChoice::RuleOfThumb,
            Some(s) => match s.parse::<f64>() {
                Ok(h) if h > 0.0 && h.is_finite() => BandwidthChoice::Fixed(h),
                _ => return Err(invalid("bandwidth", format!("expected auto, rot or a positive number, got `{s}`"))),
            },
        };
        let scope = match self.scope.as_deref() {
            None | Some("z") => Scope::ZOnly,
            Some("joint") => Scope::JointGtz,
            Some(other) => return Err(invalid("scope", format!("expected z or joint, got `{other}`"))),
        };
        let points = self.grid_points.unwrap_or(DEFAULT_GRID_POINTS);
        let grid = match (&self.grid, &self.grid_interval) {
            (Some(v), _) => GridSpec::Explicit(v.clone()),
            (None, Some(ab)) => GridSpec::Interval { a: ab[0], b: ab[1], points },
            (None, None) => GridSpec::Quartiles { points },
        };
        let column_indices = |field: &str, names: &Option<Vec<String>>| -> Result<Option<Vec<usize>>, CliError> {
            let Some(names) = names else { return Ok(None) };
            names
                .iter()
                .map(|n| {
                    x_names.iter().position(|x| x == n).ok_or_else(|| invalid(field, format!("`{n}` is not a covariate column")))
                })
                .collect::<Result<Vec<_>, _>>()
                .map(Some)
        };
        let fd = FirstStageOptions::default();
        let first_stage = FirstStageOptions {
            trim_epsilon: self.trim_epsilon.unwrap_or(fd.trim_epsilon),
            trim_policy: match self.trim_policy.as_deref() {
                None | Some("fail") => TrimPolicy::Fail,
                Some("drop") => TrimPolicy::Drop,
                Some(other) => return Err(invalid("trim_policy", format!("expected fail or drop, got `{other}`"))),
            },
            gps_columns: column_indices("gps_cols", &self.gps_cols)?,
            or_columns: column_indices("or_cols", &self.or_cols)?,
            outcome_model: match self.outcome_model.as_deref() {
                None | Some("linear") => OutcomeModel::Linear,
                Some("zero") => OutcomeModel::Zero,
                Some(other) => return Err(invalid("outcome_model", format!("expected linear or zero, got `{other}`"))),
            },
            ..fd
        };
        let cells = match self.cell_labels()? {
            None => None,
            Some(labels) => {
                let index = |l: i64| {
                    period_labels
                        .iter()
                        .position(|&p| p == l)
                        .map(|k| k + 1)
                        .ok_or_else(|| invalid("cells", format!("period {l} does not occur in the data")))
                };
                Some(labels.iter().map(|&(g, t)| Ok((index(g)?, index(t)?))).collect::<Result<Vec<_>, CliError>>()?)
            }
        };
        let settings = EstimatorSettings {
            delta: self.delta.unwrap_or(d.delta),
            mode,
            p: self.p.unwrap_or(d.p),
            kernel: match &self.kernel {
                Some(k) => parse("kernel", k.parse::<Kernel>())?,
                None => d.kernel,
            },
            bandwidth,
            h_var: self.h_var,
            band: match &self.band {
                Some(b) => parse("band", b.parse::<BandMethod>())?,
                None => d.band,
            },
            alpha: self.alpha.unwrap_or(d.alpha),
            boot_reps: self.boot_reps.unwrap_or(d.boot_reps),
            weights: match &self.weights {
                Some(w) => parse("weights", w.parse::<WeightKind>())?,
                None => d.weights,
            },
            scope,
            seed: self.seed.unwrap_or(d.seed),
            grid,
            first_stage,
            cells,
        };
        settings.validate().map_err(CliError::from)?;
        Ok(settings)
    }

    pub fn sim_config(&self) -> Result<SimConfig, CliError> {
        let covariate = match self.covariate.as_deref() {
            None | Some("continuous") => CovariateKind::ContinuousNormal,
            Some("discrete") => CovariateKind::DiscreteUniform3,
            Some(other) => return Err(invalid("covariate", format!("expected continuous or discrete, got `{other}`"))),
        };
        let cfg = SimConfig {
            gamma_scale: self.gamma_scale.unwrap_or(1.0),
            confounder: self.confounder.unwrap_or(false),
            ..SimConfig::new(self.n.unwrap_or(2000), self.periods.unwrap_or(4), covariate, self.seed.unwrap_or(1))
        };
        cfg.validate().map_err(|e| invalid("simulation", e.to_string()))?;
        Ok(cfg)
    }

    pub fn reps(&self) -> usize {
        self.reps.unwrap_or(100)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output.clone().unwrap_or_else(|| PathBuf::from("catt-out"))
    }

    /// Covariate names the simulated panels carry.
    pub fn sim_x_names(&self) -> Vec<String> {
        if self.confounder.unwrap_or(false) {
            catt_core::simulation::CONFOUNDER_COLUMNS.iter().map(|s| s.to_string()).collect()
        } else {
            Vec::new()
        }
    }
}
