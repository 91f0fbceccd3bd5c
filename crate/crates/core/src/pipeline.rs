//! End-to-end estimation over every admissible cell of a panel.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::band::{
    analytic_critical_value, assemble_band, bootstrap_critical_value, gumbel_critical_value, a_n_squared, BandError,
    BootstrapTarget, CriticalValue, Scope, UniformBand, WeightKind,
};
use crate::bandwidth::{global_bandwidth, rule_of_thumb, select_bandwidth, BandwidthError, BandwidthReport};
use crate::catt::{dr_curve, CattError, CellSample, DrCurve};
use crate::density::DensityFit;
use crate::discrete::{discrete_bootstrap_band, discrete_dr, DiscreteBand, DiscreteError};
use crate::first_stage::{run_first_stage, FirstStage, FirstStageError, FirstStageOptions};
use crate::local_poly::{Kernel, LprSpec};
use crate::panel::{enumerate_cells, ControlMode, GroupTimeCell, PanelData, PanelError};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum GridSpec {
    /// Equispaced points over the interquartile range of `Z`.
    Quartiles { points: usize },
    Interval { a: f64, b: f64, points: usize },
    Explicit(Vec<f64>),
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::Quartiles { points: 41 }
    }
}

fn type7_quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn equispaced(a: f64, b: f64, points: usize) -> Vec<f64> {
    if points == 1 {
        return vec![0.5 * (a + b)];
    }
    (0..points).map(|k| a + (b - a) * k as f64 / (points - 1) as f64).collect()
}

impl GridSpec {
    pub fn resolve(&self, z: &[f64]) -> Vec<f64> {
        match self {
            GridSpec::Quartiles { points } => {
                let mut s = z.to_vec();
                s.sort_by(f64::total_cmp);
                equispaced(type7_quantile(&s, 0.25), type7_quantile(&s, 0.75), *points)
            }
            GridSpec::Interval { a, b, points } => equispaced(*a, *b, *points),
            GridSpec::Explicit(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum BandwidthChoice {
    /// Plug-in: `h1` for local linear, `h2` for local quadratic fits.
    Auto,
    /// `sd(Z) n^{-1/5}`.
    RuleOfThumb,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BandMethod {
    None,
    Analytic,
    Gumbel,
    Bootstrap,
}

impl std::str::FromStr for BandMethod {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(BandMethod::None),
            "analytic" => Ok(BandMethod::Analytic),
            "gumbel" => Ok(BandMethod::Gumbel),
            "bootstrap" => Ok(BandMethod::Bootstrap),
            other => Err(format!("unknown band method `{other}` (expected analytic, gumbel or bootstrap)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorSettings {
    pub delta: usize,
    pub mode: ControlMode,
    pub p: usize,
    pub kernel: Kernel,
    pub bandwidth: BandwidthChoice,
    /// Bandwidth of the variance-step fits; `None` reuses the main one.
    pub h_var: Option<f64>,
    pub band: BandMethod,
    pub alpha: f64,
    pub boot_reps: usize,
    pub weights: WeightKind,
    pub scope: Scope,
    pub seed: u64,
    pub grid: GridSpec,
    pub first_stage: FirstStageOptions,
    /// Restricts estimation to these `(g, t)` pairs.
    pub cells: Option<Vec<(usize, usize)>>,
}

impl Default for EstimatorSettings {
    fn default() -> Self {
        Self {
            delta: 0,
            mode: ControlMode::NeverTreated,
            p: 2,
            kernel: Kernel::Gaussian,
            bandwidth: BandwidthChoice::Auto,
            h_var: None,
            band: BandMethod::Bootstrap,
            alpha: 0.05,
            boot_reps: 1000,
            weights: WeightKind::Mammen,
            scope: Scope::ZOnly,
            seed: 1,
            grid: GridSpec::default(),
            first_stage: FirstStageOptions::default(),
            cells: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid setting `{field}`: {message}")]
    Invalid { field: &'static str, message: String },
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error(transparent)]
    Band(#[from] BandError),
    #[error(transparent)]
    Discrete(#[from] DiscreteError),
    #[error("every cell failed; first error: {0}")]
    AllCellsFailed(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CellError {
    #[error(transparent)]
    FirstStage(#[from] FirstStageError),
    #[error(transparent)]
    Catt(#[from] CattError),
    #[error(transparent)]
    Bandwidth(#[from] BandwidthError),
    #[error(transparent)]
    Band(#[from] BandError),
    #[error(transparent)]
    Discrete(#[from] DiscreteError),
}

impl EstimatorSettings {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |field, message: &str| Err(PipelineError::Invalid { field, message: message.to_string() });
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha", "must lie in (0, 1)");
        }
        if !(self.p == 1 || self.p == 2) {
            return bad("p", "must be 1 or 2");
        }
        if self.band == BandMethod::Bootstrap && self.boot_reps == 0 {
            return bad("boot_reps", "must be at least 1 for the bootstrap");
        }
        if let BandwidthChoice::Fixed(h) = self.bandwidth {
            if !(h > 0.0 && h.is_finite()) {
                return bad("bandwidth", "must be positive");
            }
        }
        if let Some(h) = self.h_var {
            if !(h > 0.0 && h.is_finite()) {
                return bad("h_var", "must be positive");
            }
        }
        if self.scope == Scope::JointGtz && !matches!(self.band, BandMethod::Bootstrap | BandMethod::None) {
            return bad("scope", "joint uniformity over cells requires the bootstrap band");
        }
        if let GridSpec::Interval { a, b, points } = self.grid {
            if !(b > a) || points == 0 {
                return bad("grid", "interval must satisfy a < b with at least one point");
            }
        }
        if let GridSpec::Explicit(v) = &self.grid {
            if v.is_empty() || v.windows(2).any(|w| w[0] >= w[1]) {
                return bad("grid", "explicit grid must be nonempty and strictly increasing");
            }
        }
        Ok(())
    }
}

/// Coefficients and sample sizes of a cell's first stage.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FirstStageSummary {
    pub gps_coefficients: Vec<f64>,
    pub gps_iterations: usize,
    pub or_coefficients: Vec<f64>,
    pub n_gps: usize,
    pub n_treated: usize,
    pub n_controls: usize,
    pub trimmed: usize,
}

impl FirstStageSummary {
    fn new(fs: &FirstStage) -> Self {
        Self {
            gps_coefficients: fs.gps.coefficients.clone(),
            gps_iterations: fs.gps.iterations,
            or_coefficients: fs.or.coefficients.clone(),
            n_gps: fs.gps.n_subsample,
            n_treated: fs.gps.n_treated,
            n_controls: fs.or.n_controls,
            trimmed: fs.included.iter().filter(|&&k| !k).count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellResult {
    pub cell: GroupTimeCell,
    pub first_stage: FirstStageSummary,
    pub bandwidth: Option<BandwidthReport>,
    pub curve: DrCurve,
    pub band: Option<UniformBand>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellFailure {
    pub cell: GroupTimeCell,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Estimate {
    pub grid: Vec<f64>,
    pub results: Vec<CellResult>,
    pub failures: Vec<CellFailure>,
    /// Shared critical value under joint scope.
    pub joint_critical: Option<CriticalValue>,
}

impl Estimate {
    pub fn n_cells(&self) -> usize {
        self.results.len() + self.failures.len()
    }
}

fn selected_cells(panel: &PanelData, settings: &EstimatorSettings) -> Result<Vec<GroupTimeCell>, PipelineError> {
    let mut cells = enumerate_cells(panel, settings.delta, settings.mode)?;
    if let Some(keep) = &settings.cells {
        cells.retain(|c| keep.contains(&(c.g, c.t)));
        if cells.is_empty() {
            return Err(PipelineError::Invalid { field: "cells", message: "no requested cell is admissible".into() });
        }
    }
    Ok(cells)
}

struct Prepared {
    cell: GroupTimeCell,
    fs: FirstStage,
    sample: CellSample,
    report: Option<BandwidthReport>,
}

fn prepare(panel: &PanelData, cell: &GroupTimeCell, settings: &EstimatorSettings, grid: &[f64]) -> Result<Prepared, CellError> {
    let fs = run_first_stage(panel, cell, &settings.first_stage)?;
    let sample = CellSample::new(panel, cell, &fs)?;
    let report = match settings.bandwidth {
        BandwidthChoice::Auto => Some(select_bandwidth(&sample, grid, settings.kernel, &settings.kernel.moments())?),
        _ => None,
    };
    Ok(Prepared { cell: *cell, fs, sample, report })
}

fn main_bandwidth(prep: &Prepared, settings: &EstimatorSettings) -> f64 {
    match settings.bandwidth {
        BandwidthChoice::Auto => prep.report.as_ref().expect("auto bandwidth report").for_order(settings.p),
        BandwidthChoice::RuleOfThumb => rule_of_thumb(&prep.sample.z),
        BandwidthChoice::Fixed(h) => h,
    }
}

/// Estimates every admissible cell (or the requested subset). Cells that
/// fail are reported in `failures`; the call fails only if all cells fail.
pub fn estimate(panel: &PanelData, settings: &EstimatorSettings) -> Result<Estimate, PipelineError> {
    settings.validate()?;
    let cells = selected_cells(panel, settings)?;
    let grid = settings.grid.resolve(panel.z());
    let moments = settings.kernel.moments();

    let prepared: Vec<Result<Prepared, CellError>> =
        cells.par_iter().map(|c| prepare(panel, c, settings, &grid)).collect();
    let mut failures = Vec::new();
    let mut ok = Vec::new();
    for (cell, p) in cells.iter().zip(prepared) {
        match p {
            Ok(p) => ok.push(p),
            Err(e) => failures.push(CellFailure { cell: *cell, error: e.to_string() }),
        }
    }

    let joint_h = (settings.scope == Scope::JointGtz).then(|| match settings.bandwidth {
        BandwidthChoice::Auto => {
            let reports: Vec<BandwidthReport> = ok.iter().filter_map(|p| p.report.clone()).collect();
            global_bandwidth(&reports, settings.p)
        }
        _ => ok.iter().map(|p| main_bandwidth(p, settings)).fold(f64::INFINITY, f64::min),
    });

    let curves: Vec<Result<DrCurve, CellError>> = ok
        .par_iter()
        .map(|prep| {
            let h = joint_h.unwrap_or_else(|| main_bandwidth(prep, settings));
            let spec = LprSpec::new(settings.p, h, settings.kernel);
            let spec_v = LprSpec::new(1, settings.h_var.unwrap_or(h), settings.kernel);
            let density = DensityFit::fit(&prep.sample.z, &grid, settings.kernel);
            Ok(dr_curve(&prep.sample, &grid, &spec, &spec_v, &density, &moments)?)
        })
        .collect();
    let mut fitted: Vec<(Prepared, DrCurve)> = Vec::new();
    for (prep, c) in ok.into_iter().zip(curves) {
        match c {
            Ok(c) => fitted.push((prep, c)),
            Err(e) => failures.push(CellFailure { cell: prep.cell, error: e.to_string() }),
        }
    }

    let (a, b) = (grid[0], grid[grid.len() - 1]);
    let mut joint_critical = None;
    if settings.scope == Scope::JointGtz && settings.band == BandMethod::Bootstrap && !fitted.is_empty() {
        let targets: Vec<BootstrapTarget> = fitted.iter().map(|(p, c)| BootstrapTarget::new(&p.sample, c)).collect();
        joint_critical = Some(bootstrap_critical_value(
            &targets,
            panel.n_units(),
            settings.alpha,
            settings.boot_reps,
            settings.weights,
            Scope::JointGtz,
            settings.seed,
        )?);
    }

    let banded: Vec<Result<Option<UniformBand>, CellError>> = fitted
        .par_iter()
        .map(|(prep, curve)| {
            let crit = match (settings.band, &joint_critical) {
                (BandMethod::None, _) => return Ok(None),
                (_, Some(j)) => j.clone(),
                (BandMethod::Analytic, None) => {
                    analytic_critical_value(settings.alpha, a, b, curve.spec.h, moments.lambda)?
                }
                (BandMethod::Gumbel, None) => {
                    let a_n2 = a_n_squared(a, b, curve.spec.h, moments.lambda);
                    if a_n2 <= 0.0 {
                        return Err(BandError::BandwidthTooLarge { a_n2 }.into());
                    }
                    gumbel_critical_value(settings.alpha, a_n2.sqrt())?
                }
                (BandMethod::Bootstrap, None) => bootstrap_critical_value(
                    &[BootstrapTarget::new(&prep.sample, curve)],
                    panel.n_units(),
                    settings.alpha,
                    settings.boot_reps,
                    settings.weights,
                    Scope::ZOnly,
                    settings.seed,
                )?,
            };
            Ok(Some(assemble_band(curve, &crit)))
        })
        .collect();

    let mut results = Vec::new();
    for ((prep, curve), band) in fitted.into_iter().zip(banded) {
        match band {
            Ok(band) => results.push(CellResult {
                cell: prep.cell,
                first_stage: FirstStageSummary::new(&prep.fs),
                bandwidth: prep.report,
                curve,
                band,
            }),
            Err(e) => failures.push(CellFailure { cell: prep.cell, error: e.to_string() }),
        }
    }
    if results.is_empty() {
        let first = failures.first().map(|f| f.error.clone()).unwrap_or_default();
        return Err(PipelineError::AllCellsFailed(first));
    }
    failures.sort_by_key(|f| (f.cell.g, f.cell.t));
    Ok(Estimate { grid, results, failures, joint_critical })
}

/// Per-cell bandwidth reports.
pub fn bandwidths(panel: &PanelData, settings: &EstimatorSettings) -> Result<(Vec<BandwidthReport>, Vec<CellFailure>), PipelineError> {
    settings.validate()?;
    let cells = selected_cells(panel, settings)?;
    let grid = settings.grid.resolve(panel.z());
    let auto = EstimatorSettings { bandwidth: BandwidthChoice::Auto, ..settings.clone() };
    let out: Vec<Result<Prepared, CellError>> = cells.par_iter().map(|c| prepare(panel, c, &auto, &grid)).collect();
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for (cell, r) in cells.iter().zip(out) {
        match r {
            Ok(p) => reports.push(p.report.expect("auto bandwidth report")),
            Err(e) => failures.push(CellFailure { cell: *cell, error: e.to_string() }),
        }
    }
    Ok((reports, failures))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiscreteEstimate {
    pub bands: Vec<DiscreteBand>,
    pub failures: Vec<CellFailure>,
}

/// Cell-mean estimation for a covariate with finite support, with bootstrap
/// bands.
pub fn estimate_discrete(panel: &PanelData, settings: &EstimatorSettings) -> Result<DiscreteEstimate, PipelineError> {
    settings.validate()?;
    let cells = selected_cells(panel, settings)?;
    let fitted: Vec<Result<_, CellError>> = cells
        .par_iter()
        .map(|c| {
            let fs = run_first_stage(panel, c, &settings.first_stage)?;
            let sample = CellSample::new(panel, c, &fs)?;
            Ok(discrete_dr(&sample)?)
        })
        .collect();
    let mut failures = Vec::new();
    let mut curves = Vec::new();
    for (cell, f) in cells.iter().zip(fitted) {
        match f {
            Ok(c) => curves.push(c),
            Err(e) => failures.push(CellFailure { cell: *cell, error: e.to_string() }),
        }
    }
    if curves.is_empty() {
        let first = failures.first().map(|f| f.error.clone()).unwrap_or_default();
        return Err(PipelineError::AllCellsFailed(first));
    }
    let bands = match settings.scope {
        Scope::JointGtz => discrete_bootstrap_band(
            &curves,
            panel.n_units(),
            settings.alpha,
            settings.boot_reps,
            settings.weights,
            Scope::JointGtz,
            settings.seed,
        )?,
        Scope::ZOnly => {
            let mut out = Vec::new();
            for c in curves {
                let cell = c.cell;
                match discrete_bootstrap_band(
                    &[c],
                    panel.n_units(),
                    settings.alpha,
                    settings.boot_reps,
                    settings.weights,
                    Scope::ZOnly,
                    settings.seed,
                ) {
                    Ok(mut b) => out.append(&mut b),
                    Err(e) => failures.push(CellFailure { cell, error: e.to_string() }),
                }
            }
            out
        }
    };
    Ok(DiscreteEstimate { bands, failures })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids() {
        let z: Vec<f64> = (0..=100).map(|i| i as f64).collect();
        let g = GridSpec::Quartiles { points: 3 }.resolve(&z);
        assert_eq!(g, vec![25.0, 50.0, 75.0]);
        let g = GridSpec::Interval { a: -1.0, b: 1.0, points: 21 }.resolve(&z);
        assert_eq!(g.len(), 21);
        assert!((g[1] + 0.9).abs() < 1e-15 && g[20] == 1.0);
    }

    #[test]
    fn validation_names_the_field() {
        let s = EstimatorSettings { alpha: 1.5, ..Default::default() };
        let e = s.validate().unwrap_err().to_string();
        assert!(e.contains("alpha"), "{e}");
        let s = EstimatorSettings { p: 3, ..Default::default() };
        assert!(s.validate().unwrap_err().to_string().contains("`p`"));
        let s = EstimatorSettings { scope: Scope::JointGtz, band: BandMethod::Analytic, ..Default::default() };
        assert!(s.validate().is_err());
    }
}
