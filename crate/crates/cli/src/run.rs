//! The three subcommands.

use std::path::PathBuf;

use serde::Serialize;

use catt_core::band::CriticalValue;
use catt_core::bandwidth::BandwidthReport;
use catt_core::panel::{load_panel, LoadOptions, LoadReport, PanelData};
use catt_core::pipeline::{bandwidths, estimate, estimate_discrete, BandMethod, CellFailure, EstimatorSettings, FirstStageSummary};
use catt_core::rng;
use catt_core::simulation::{continuous_rep, discrete_rep, rep_seed, run_monte_carlo, simulate_panel, McReport, SimConfig};

use crate::config::{EstimatorKind, RunConfig};
use crate::io::{prepare_output, read_long_csv, write_csv_with_header, write_json, write_panel_csv};
use crate::CliError;

/// Cells that must succeed for a partial run to count as usable.
pub const PARTIAL_SUCCESS_SHARE: f64 = 0.8;

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub exit_code: i32,
    pub files: Vec<PathBuf>,
    pub message: String,
}

const CURVE_HEADER: [&str; 6] = ["g", "t", "z", "estimate", "se", "n_eff"];
const BAND_HEADER: [&str; 9] = ["g", "t", "z", "estimate", "se", "lower", "upper", "critical", "method"];
const MC_HEADER: [&str; 8] = ["g", "t", "z", "bias", "rmse", "pwcp", "ucp", "length"];
const BANDWIDTH_HEADER: [&str; 11] =
    ["g", "t", "n", "h_imse_p1", "h1", "h2", "pilot_h", "preliminary_h", "integral_v", "integral_b2", "zero_bias_fallback"];

#[derive(Serialize)]
struct CurveRow {
    g: i64,
    t: i64,
    z: f64,
    estimate: f64,
    se: f64,
    n_eff: f64,
}

#[derive(Serialize)]
struct BandRow {
    g: i64,
    t: i64,
    z: f64,
    estimate: f64,
    se: f64,
    lower: f64,
    upper: f64,
    critical: f64,
    method: &'static str,
}

#[derive(Serialize)]
struct BandwidthRow {
    g: i64,
    t: i64,
    n: usize,
    h_imse_p1: f64,
    h1: f64,
    h2: f64,
    pilot_h: f64,
    preliminary_h: f64,
    integral_v: f64,
    integral_b2: f64,
    zero_bias_fallback: bool,
}

#[derive(Serialize)]
struct FailureEntry {
    g: i64,
    t: i64,
    error: String,
}

#[derive(Serialize)]
struct CellEntry {
    g: i64,
    t: i64,
    n: usize,
    h: Option<f64>,
    h_var: Option<f64>,
    first_stage: Option<FirstStageSummary>,
    bandwidth: Option<BandwidthReport>,
    critical: Option<CriticalValue>,
    support: Option<Vec<f64>>,
    count: Option<Vec<usize>>,
    density_floored_points: usize,
    point_errors: Vec<(f64, String)>,
}

#[derive(Serialize)]
struct EstimateSidecar<'a> {
    input: String,
    estimator: EstimatorKind,
    settings: &'a EstimatorSettings,
    n_units: usize,
    periods: &'a [i64],
    load: LoadReport,
    grid: Vec<f64>,
    cells: Vec<CellEntry>,
    failures: Vec<FailureEntry>,
    joint_critical: Option<CriticalValue>,
}

#[derive(Serialize)]
struct SimulateSidecar<'a> {
    preset: Option<&'a str>,
    estimator: EstimatorKind,
    simulation: &'a SimConfig,
    settings: &'a EstimatorSettings,
    reps: usize,
    failed_reps: usize,
    joint_ucp: f64,
}

#[derive(Serialize)]
struct BandwidthSidecar<'a> {
    input: String,
    settings: &'a EstimatorSettings,
    reports: Vec<BandwidthReport>,
    failures: Vec<FailureEntry>,
}

fn failure_entries(panel: &PanelData, failures: &[CellFailure]) -> Vec<FailureEntry> {
    failures
        .iter()
        .map(|f| FailureEntry { g: panel.period_label(f.cell.g), t: panel.period_label(f.cell.t), error: f.error.clone() })
        .collect()
}

fn exit_for(ok: usize, failed: usize) -> (i32, String) {
    let total = ok + failed;
    if failed == 0 {
        (0, format!("{ok} cell(s) estimated"))
    } else if ok as f64 >= PARTIAL_SUCCESS_SHARE * total as f64 {
        (2, format!("{failed} of {total} cells failed"))
    } else {
        (1, format!("{failed} of {total} cells failed; fewer than {:.0}% succeeded", PARTIAL_SUCCESS_SHARE * 100.0))
    }
}

pub fn load_input(cfg: &RunConfig) -> Result<(PanelData, LoadReport), CliError> {
    let path = cfg.input.as_ref().ok_or_else(|| CliError::Config { field: "input".into(), message: "an input CSV is required".into() })?;
    let cols = cfg.columns();
    let records = read_long_csv(path, &cols)?;
    let options = LoadOptions { drop_always_treated: cfg.drop_always_treated.unwrap_or(false) };
    Ok(load_panel(&records, cols.x.clone(), options)?)
}

pub fn run_estimate(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let kind = cfg.estimator_kind()?;
    let (panel, load) = load_input(cfg)?;
    let settings = cfg.estimator_settings(panel.x_names(), panel.period_labels())?;
    let label = |k: usize| panel.period_label(k);
    let with_band = kind == EstimatorKind::Discrete || settings.band != BandMethod::None;
    let mut names = vec!["curve.csv", "estimate.json"];
    if with_band {
        names.push("band.csv");
    }
    let paths = prepare_output(&cfg.output_dir(), &names, cfg.overwrite.unwrap_or(false))?;

    let mut curve_rows = Vec::new();
    let mut band_rows = Vec::new();
    let mut cells = Vec::new();
    let (grid, failures, joint_critical) = match kind {
        EstimatorKind::Continuous => {
            let est = estimate(&panel, &settings)?;
            for r in &est.results {
                let (g, t) = (label(r.cell.g), label(r.cell.t));
                let c = &r.curve;
                for k in 0..c.grid.len() {
                    curve_rows.push(CurveRow { g, t, z: c.grid[k], estimate: c.estimate[k], se: c.se[k], n_eff: c.n_eff[k] });
                }
                if let Some(b) = &r.band {
                    for k in 0..b.grid.len() {
                        band_rows.push(BandRow {
                            g,
                            t,
                            z: b.grid[k],
                            estimate: b.estimate[k],
                            se: b.se[k],
                            lower: b.lower[k],
                            upper: b.upper[k],
                            critical: b.critical.value,
                            method: b.critical.method.tag(),
                        });
                    }
                }
                cells.push(CellEntry {
                    g,
                    t,
                    n: c.n,
                    h: Some(c.spec.h),
                    h_var: Some(c.spec_v.h),
                    first_stage: Some(r.first_stage.clone()),
                    bandwidth: r.bandwidth.clone(),
                    critical: r.band.as_ref().map(|b| b.critical.clone()),
                    support: None,
                    count: None,
                    density_floored_points: c.density_floored.iter().filter(|&&f| f).count(),
                    point_errors: c.point_errors.clone(),
                });
            }
            (est.grid.clone(), est.failures.clone(), est.joint_critical.clone())
        }
        EstimatorKind::Discrete => {
            let est = estimate_discrete(&panel, &settings)?;
            for b in &est.bands {
                let (g, t) = (label(b.cell.g), label(b.cell.t));
                for k in 0..b.support.len() {
                    curve_rows.push(CurveRow {
                        g,
                        t,
                        z: b.support[k],
                        estimate: b.estimate[k],
                        se: b.se_tilde[k],
                        n_eff: b.count[k] as f64,
                    });
                    band_rows.push(BandRow {
                        g,
                        t,
                        z: b.support[k],
                        estimate: b.estimate[k],
                        se: b.se_tilde[k],
                        lower: b.lower[k],
                        upper: b.upper[k],
                        critical: b.critical.value,
                        method: b.critical.method.tag(),
                    });
                }
                cells.push(CellEntry {
                    g,
                    t,
                    n: b.count.iter().sum(),
                    h: None,
                    h_var: None,
                    first_stage: None,
                    bandwidth: None,
                    critical: Some(b.critical.clone()),
                    support: Some(b.support.clone()),
                    count: Some(b.count.clone()),
                    density_floored_points: 0,
                    point_errors: Vec::new(),
                });
            }
            let joint = match settings.scope {
                catt_core::band::Scope::JointGtz => est.bands.first().map(|b| b.critical.clone()),
                catt_core::band::Scope::ZOnly => None,
            };
            (Vec::new(), est.failures.clone(), joint)
        }
    };

    write_csv_with_header(&paths[0], &CURVE_HEADER, &curve_rows)?;
    let sidecar = EstimateSidecar {
        input: cfg.input.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        estimator: kind,
        settings: &settings,
        n_units: panel.n_units(),
        periods: panel.period_labels(),
        load,
        grid,
        failures: failure_entries(&panel, &failures),
        cells,
        joint_critical,
    };
    write_json(&paths[1], &sidecar)?;
    if with_band {
        write_csv_with_header(&paths[2], &BAND_HEADER, &band_rows)?;
    }
    let (code, message) = exit_for(sidecar.cells.len(), sidecar.failures.len());
    Ok(Outcome { exit_code: code, files: paths, message })
}

/// Runs the Monte Carlo experiment described by `cfg` without writing files.
pub fn simulate_report(cfg: &RunConfig) -> Result<(SimConfig, EstimatorSettings, McReport), CliError> {
    let kind = cfg.estimator_kind()?;
    let sim = cfg.sim_config()?;
    let labels: Vec<i64> = (1..=sim.periods as i64).collect();
    let settings = cfg.estimator_settings(&cfg.sim_x_names(), &labels)?;
    let report = match kind {
        EstimatorKind::Continuous => {
            run_monte_carlo(&sim, cfg.reps(), |panel, rep| continuous_rep(panel, &settings, rep_seed(&sim, rep)))
        }
        EstimatorKind::Discrete => {
            run_monte_carlo(&sim, cfg.reps(), |panel, rep| discrete_rep(panel, &settings, rep_seed(&sim, rep)))
        }
    }
    .map_err(|e| CliError::Simulation(e.to_string()))?;
    Ok((sim, settings, report))
}

pub fn run_simulate(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let kind = cfg.estimator_kind()?;
    let emit_panel = cfg.emit_panel.unwrap_or(false);
    let mut names = vec!["mc_report.csv", "mc_report.json"];
    if emit_panel {
        names.push("panel.csv");
    }
    let paths = prepare_output(&cfg.output_dir(), &names, cfg.overwrite.unwrap_or(false))?;
    let (sim, settings, report) = simulate_report(cfg)?;
    log::info!("{} replications in {:.1}s", report.reps, report.runtime_secs);

    write_csv_with_header(&paths[0], &MC_HEADER, &report.rows)?;
    let sidecar = SimulateSidecar {
        preset: cfg.preset.as_deref(),
        estimator: kind,
        simulation: &sim,
        settings: &settings,
        reps: report.reps,
        failed_reps: report.failed_reps,
        joint_ucp: report.joint_ucp,
    };
    write_json(&paths[1], &sidecar)?;
    if emit_panel {
        let panel = simulate_panel(&sim, &mut rng::stream(rng::derive_seed(sim.seed, 0), 0));
        write_panel_csv(&paths[2], &panel)?;
    }
    let message = format!("{} replications, {} failed", report.reps, report.failed_reps);
    Ok(Outcome { exit_code: 0, files: paths, message })
}

pub fn run_bandwidth(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let (panel, _) = load_input(cfg)?;
    let settings = cfg.estimator_settings(panel.x_names(), panel.period_labels())?;
    let paths = prepare_output(&cfg.output_dir(), &["bandwidth.csv", "bandwidth.json"], cfg.overwrite.unwrap_or(false))?;
    let (reports, failures) = bandwidths(&panel, &settings)?;
    let rows: Vec<BandwidthRow> = reports
        .iter()
        .map(|r| BandwidthRow {
            g: panel.period_label(r.cell.g),
            t: panel.period_label(r.cell.t),
            n: r.n,
            h_imse_p1: r.h_imse_p1,
            h1: r.h1,
            h2: r.h2,
            pilot_h: r.pilot_h,
            preliminary_h: r.preliminary_h,
            integral_v: r.integral_v,
            integral_b2: r.integral_b2,
            zero_bias_fallback: r.zero_bias_fallback,
        })
        .collect();
    write_csv_with_header(&paths[0], &BANDWIDTH_HEADER, &rows)?;
    let failures = failure_entries(&panel, &failures);
    let (code, message) = exit_for(reports.len(), failures.len());
    write_json(
        &paths[1],
        &BandwidthSidecar {
            input: cfg.input.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            settings: &settings,
            reports,
            failures,
        },
    )?;
    Ok(Outcome { exit_code: code, files: paths, message })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_for(5, 0).0, 0);
        assert_eq!(exit_for(4, 1).0, 2);
        assert_eq!(exit_for(3, 1).0, 1);
        assert_eq!(exit_for(0, 2).0, 1);
    }
}
