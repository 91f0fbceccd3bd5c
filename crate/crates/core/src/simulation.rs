//! Simulated staggered panels and a Monte Carlo harness.
//!
//! Groups are drawn from `{never, 2, ..., T}` with probabilities proportional
//! to `exp(Z gamma_g)`, `gamma_g = 0.5 g / T` and `gamma_never = 0`. Within
//! the two-class subsample `{g, never}` the choice probability is therefore
//! logistic in `Z` with slope `gamma_g`, so a logit on `(1, Z)` is correctly
//! specified.
//!
//! The optional confounder `W ~ N(0, 1)` adds `W kappa_g` (`kappa_g = g / T`)
//! to the group logits and `W t` to the untreated outcome. It leaves the
//! treatment effect unchanged but biases any estimator that ignores `W` in
//! both the propensity score and the outcome regression.

use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::band::UniformBand;
use crate::discrete::DiscreteBand;
use crate::panel::{Group, PanelData};
use crate::pipeline::{estimate, estimate_discrete, EstimatorSettings};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CovariateKind {
    ContinuousNormal,
    /// Uniform on `{-1, 0, 1}`.
    DiscreteUniform3,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimConfig {
    pub n: usize,
    pub periods: usize,
    pub covariate: CovariateKind,
    /// Multiplies every `gamma_g`; 0 makes the groups equally likely.
    pub gamma_scale: f64,
    pub confounder: bool,
    pub seed: u64,
}

impl SimConfig {
    pub fn new(n: usize, periods: usize, covariate: CovariateKind, seed: u64) -> Self {
        Self { n, periods, covariate, gamma_scale: 1.0, confounder: false, seed }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.periods < 2 {
            return Err(SimError::Invalid("periods must be at least 2".into()));
        }
        if self.n < 50 {
            return Err(SimError::Invalid("n must be at least 50".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Invalid(String),
    #[error("{failed} of {reps} replications failed (more than 2%); first error: {first}")]
    TooManyFailures { failed: usize, reps: usize, first: String },
}

/// Column names of the remaining covariates when the confounder is on.
pub const CONFOUNDER_COLUMNS: [&str; 2] = ["w", "noise"];

pub fn simulate_panel<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> PanelData {
    let t_max = cfg.periods;
    let n = cfg.n;
    // index 0 is "never", index k >= 1 is group k + 1
    let supp: Vec<usize> = std::iter::once(0).chain(2..=t_max).collect();
    let mut ids = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n);
    let mut groups = Vec::with_capacity(n);
    let mut x_sub = Vec::new();
    let mut y = Vec::with_capacity(n * t_max);
    let mut logits = vec![0.0; supp.len()];
    for i in 0..n {
        let zi = match cfg.covariate {
            CovariateKind::ContinuousNormal => rng.sample(StandardNormal),
            CovariateKind::DiscreteUniform3 => rng.random_range(0..3) as f64 - 1.0,
        };
        let (wi, noise) = if cfg.confounder {
            (rng.sample(StandardNormal), rng.sample(StandardNormal))
        } else {
            (0.0, 0.0)
        };
        for (k, &g) in supp.iter().enumerate() {
            let gf = g as f64 / t_max as f64;
            logits[k] = zi * 0.5 * gf * cfg.gamma_scale + if cfg.confounder { wi * gf } else { 0.0 };
        }
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = supp.len() - 1;
        for (k, w) in weights.iter().enumerate() {
            if u < *w {
                pick = k;
                break;
            }
            u -= w;
        }
        let g = supp[pick];
        let eta = g as f64 + rng.sample::<f64, _>(StandardNormal);
        for t in 1..=t_max {
            let tf = t as f64;
            let u_t: f64 = rng.sample(StandardNormal);
            let v_t: f64 = rng.sample(StandardNormal);
            let mut y0 = tf + eta + zi * tf + u_t;
            if cfg.confounder {
                y0 += wi * tf;
            }
            let obs = if g != 0 && t >= g {
                y0 + zi * g as f64 / t_max as f64 + (tf - g as f64 + 1.0) + (v_t - u_t)
            } else {
                y0
            };
            y.push(obs);
        }
        ids.push(format!("u{i:07}"));
        z.push(zi);
        groups.push(if g == 0 { Group::Never } else { Group::Period(g) });
        if cfg.confounder {
            x_sub.push(wi);
            x_sub.push(noise);
        }
    }
    let names = if cfg.confounder { CONFOUNDER_COLUMNS.iter().map(|s| s.to_string()).collect() } else { Vec::new() };
    PanelData::new(ids, (1..=t_max as i64).collect(), y, groups, z, x_sub, names).expect("simulated panel is valid")
}

/// `z g / T + t - g + 1`.
pub fn true_catt(cfg: &SimConfig, g: usize, t: usize, z: f64) -> f64 {
    z * g as f64 / cfg.periods as f64 + t as f64 - g as f64 + 1.0
}

/// One cell's output of one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct CellRep {
    pub g: usize,
    pub t: usize,
    pub z: Vec<f64>,
    pub estimate: Vec<f64>,
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
}

impl CellRep {
    pub fn from_band(b: &UniformBand) -> Self {
        Self {
            g: b.cell.g,
            t: b.cell.t,
            z: b.grid.clone(),
            estimate: b.estimate.clone(),
            lower: Some(b.lower.clone()),
            upper: Some(b.upper.clone()),
        }
    }

    pub fn from_discrete(b: &DiscreteBand) -> Self {
        Self {
            g: b.cell.g,
            t: b.cell.t,
            z: b.support.clone(),
            estimate: b.estimate.clone(),
            lower: Some(b.lower.clone()),
            upper: Some(b.upper.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McRow {
    pub g: usize,
    pub t: usize,
    pub z: f64,
    pub bias: f64,
    pub rmse: f64,
    pub pwcp: f64,
    pub ucp: f64,
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McReport {
    pub rows: Vec<McRow>,
    pub reps: usize,
    pub failed_reps: usize,
    /// Share of replications whose bands cover every cell and point at once.
    pub joint_ucp: f64,
    #[serde(skip)]
    pub runtime_secs: f64,
}

impl McReport {
    pub fn row(&self, g: usize, t: usize, z: f64) -> Option<&McRow> {
        self.rows.iter().find(|r| r.g == g && r.t == t && (r.z - z).abs() < 1e-9)
    }
}

/// Seed of the estimator's own randomness in replication `rep`.
pub fn rep_seed(cfg: &SimConfig, rep: usize) -> u64 {
    rng::derive_seed(cfg.seed, rep as u64 + 1)
}

/// Simulates `reps` panels and aggregates whatever `estimator` returns.
/// Panel `rep` is drawn from stream `rep` of the config seed.
pub fn run_monte_carlo<F>(cfg: &SimConfig, reps: usize, estimator: F) -> Result<McReport, SimError>
where
    F: Fn(&PanelData, usize) -> Result<Vec<CellRep>, String> + Sync,
{
    cfg.validate()?;
    if reps == 0 {
        return Err(SimError::Invalid("reps must be at least 1".into()));
    }
    let started = Instant::now();
    let panel_seed = rng::derive_seed(cfg.seed, 0);
    let outcomes: Vec<Result<Vec<CellRep>, String>> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let panel = simulate_panel(cfg, &mut rng::stream(panel_seed, rep as u64));
            estimator(&panel, rep)
        })
        .collect();

    let failed: Vec<&String> = outcomes.iter().filter_map(|o| o.as_ref().err()).collect();
    if failed.len() as f64 > 0.02 * reps as f64 {
        return Err(SimError::TooManyFailures { failed: failed.len(), reps, first: failed[0].clone() });
    }
    for e in &failed {
        log::warn!("replication failed: {e}");
    }
    let good: Vec<&Vec<CellRep>> = outcomes.iter().filter_map(|o| o.as_ref().ok()).collect();
    let first = good.first().ok_or_else(|| SimError::Invalid("no successful replication".into()))?;

    let mut rows = Vec::new();
    let mut joint_cover = vec![true; good.len()];
    for (c, proto) in first.iter().enumerate() {
        let mut cell_cover = vec![true; good.len()];
        let mut cell_rows = Vec::new();
        for (k, &z) in proto.z.iter().enumerate() {
            let truth = true_catt(cfg, proto.g, proto.t, z);
            let (mut sum, mut sum2, mut cover, mut len, mut count, mut banded) = (0.0, 0.0, 0usize, 0.0, 0usize, 0usize);
            for (r, out) in good.iter().enumerate() {
                let cr = &out[c];
                let e = cr.estimate[k];
                let inside = match (&cr.lower, &cr.upper) {
                    (Some(lo), Some(hi)) if lo[k].is_finite() && hi[k].is_finite() => {
                        banded += 1;
                        len += hi[k] - lo[k];
                        lo[k] <= truth && truth <= hi[k]
                    }
                    _ => false,
                };
                if e.is_finite() {
                    sum += e - truth;
                    sum2 += (e - truth).powi(2);
                    count += 1;
                }
                cover += inside as usize;
                cell_cover[r] &= inside;
            }
            let nf = count.max(1) as f64;
            cell_rows.push(McRow {
                g: proto.g,
                t: proto.t,
                z,
                bias: sum / nf,
                rmse: (sum2 / nf).sqrt(),
                pwcp: cover as f64 / good.len() as f64,
                ucp: 0.0,
                length: if banded > 0 { len / banded as f64 } else { f64::NAN },
            });
        }
        let ucp = cell_cover.iter().filter(|&&c| c).count() as f64 / good.len() as f64;
        for r in cell_rows.iter_mut() {
            r.ucp = ucp;
        }
        for (j, c) in joint_cover.iter_mut().zip(&cell_cover) {
            *j &= *c;
        }
        rows.extend(cell_rows);
    }
    Ok(McReport {
        rows,
        reps,
        failed_reps: failed.len(),
        joint_ucp: joint_cover.iter().filter(|&&c| c).count() as f64 / good.len() as f64,
        runtime_secs: started.elapsed().as_secs_f64(),
    })
}

/// Runs the continuous pipeline on one replication's panel.
pub fn continuous_rep(panel: &PanelData, settings: &EstimatorSettings, seed: u64) -> Result<Vec<CellRep>, String> {
    let s = EstimatorSettings { seed, ..settings.clone() };
    let est = estimate(panel, &s).map_err(|e| e.to_string())?;
    if let Some(f) = est.failures.first() {
        return Err(format!("cell (g={}, t={}): {}", f.cell.g, f.cell.t, f.error));
    }
    Ok(est
        .results
        .iter()
        .map(|r| match &r.band {
            Some(b) => CellRep::from_band(b),
            None => CellRep {
                g: r.cell.g,
                t: r.cell.t,
                z: r.curve.grid.clone(),
                estimate: r.curve.estimate.clone(),
                lower: None,
                upper: None,
            },
        })
        .collect())
}

/// Runs the discrete pipeline on one replication's panel.
pub fn discrete_rep(panel: &PanelData, settings: &EstimatorSettings, seed: u64) -> Result<Vec<CellRep>, String> {
    let s = EstimatorSettings { seed, ..settings.clone() };
    let est = estimate_discrete(panel, &s).map_err(|e| e.to_string())?;
    if let Some(f) = est.failures.first() {
        return Err(format!("cell (g={}, t={}): {}", f.cell.g, f.cell.t, f.error));
    }
    Ok(est.bands.iter().map(CellRep::from_discrete).collect())
}
