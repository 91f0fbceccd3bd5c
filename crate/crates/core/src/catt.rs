//! The conditional doubly robust estimator of one group-time cell.
//!
//! Steps two and three are local polynomial fits over every unit of the
//! cell sample: the ratios `mu_G(z)`, `mu_R(z)` and then the fit of
//! `A_i(z) = (G_i/mu_G(z) - R_i/mu_R(z)) (dY_i - m_i)` at `z`.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::density::DensityFit;
use crate::first_stage::FirstStage;
use crate::local_poly::{self, effective_n, lpr_fit_many, window, KernelMoments, LprError, LprSpec};
use crate::panel::{GroupTimeCell, PanelData};

pub const RATIO_FLOOR: f64 = 1e-6;
/// A curve fails once more than this share of its grid points fail.
pub const MAX_FAILED_SHARE: f64 = 0.2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CattError {
    #[error(transparent)]
    Lpr(#[from] LprError),
    #[error("second-stage ratio {which} = {value:.3e} at z = {z} is below the floor")]
    DegenerateRatio { which: &'static str, value: f64, z: f64 },
    #[error("{failed} of {total} grid points failed for cell (g={g}, t={t})")]
    TooManyFailedPoints { g: usize, t: usize, failed: usize, total: usize },
    #[error("the cell sample is empty")]
    EmptySample,
}

/// Per-unit inputs of one cell, sorted by `(Z, unit index)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSample {
    pub cell: GroupTimeCell,
    pub unit: Vec<usize>,
    pub z: Vec<f64>,
    /// Cell treatment indicator `G_{i,g}`.
    pub g: Vec<f64>,
    pub r: Vec<f64>,
    pub dy: Vec<f64>,
    pub m: Vec<f64>,
    /// `dY - m`.
    pub resid: Vec<f64>,
    /// `R (dY - m)`.
    pub e: Vec<f64>,
    /// `G (dY - m)`.
    pub f: Vec<f64>,
}

impl CellSample {
    pub fn new(panel: &PanelData, cell: &GroupTimeCell, fs: &FirstStage) -> Result<Self, CattError> {
        let mut order: Vec<usize> = (0..panel.n_units()).filter(|&i| fs.included[i]).collect();
        if order.is_empty() {
            return Err(CattError::EmptySample);
        }
        let zs = panel.z();
        order.sort_by(|&a, &b| zs[a].total_cmp(&zs[b]).then(a.cmp(&b)));
        let base = cell.base_period();
        let mut s = CellSample {
            cell: *cell,
            unit: order.clone(),
            z: Vec::with_capacity(order.len()),
            g: Vec::with_capacity(order.len()),
            r: Vec::with_capacity(order.len()),
            dy: Vec::with_capacity(order.len()),
            m: Vec::with_capacity(order.len()),
            resid: Vec::with_capacity(order.len()),
            e: Vec::with_capacity(order.len()),
            f: Vec::with_capacity(order.len()),
        };
        for &i in &order {
            let g = if cell.is_treated(panel.group(i)) { 1.0 } else { 0.0 };
            let dy = panel.y(i, cell.t) - panel.y(i, base);
            let resid = dy - fs.m[i];
            s.z.push(zs[i]);
            s.g.push(g);
            s.r.push(fs.r[i]);
            s.dy.push(dy);
            s.m.push(fs.m[i]);
            s.resid.push(resid);
            s.e.push(fs.r[i] * resid);
            s.f.push(g * resid);
        }
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }
}

/// `mu_G`, `mu_R` at the main order and bandwidth; `mu_E`, `mu_F` from the
/// variance-step fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Ratios {
    pub mu_g: f64,
    pub mu_r: f64,
    pub mu_e: f64,
    pub mu_f: f64,
}

pub fn second_stage_ratios(sample: &CellSample, z: f64, spec: &LprSpec, spec_v: &LprSpec) -> Result<Ratios, CattError> {
    let main = lpr_fit_many(&sample.z, &[&sample.g, &sample.r], z, spec, None)?;
    let var = lpr_fit_many(&sample.z, &[&sample.e, &sample.f], z, spec_v, None)?;
    let ratios = Ratios { mu_g: main[0][0], mu_r: main[1][0], mu_e: var[0][0], mu_f: var[1][0] };
    if ratios.mu_g < RATIO_FLOOR {
        return Err(CattError::DegenerateRatio { which: "mu_G", value: ratios.mu_g, z });
    }
    if ratios.mu_r < RATIO_FLOOR {
        return Err(CattError::DegenerateRatio { which: "mu_R", value: ratios.mu_r, z });
    }
    Ok(ratios)
}

/// Per-unit `A` and `B` at one evaluation point.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentVariables {
    pub ratios: Ratios,
    pub a_hat: Vec<f64>,
    pub b_hat: Vec<f64>,
}

impl ComponentVariables {
    pub fn new(sample: &CellSample, ratios: Ratios) -> Self {
        let a_hat = a_hat(sample, &ratios);
        let (cr, cg) = b_coefficients(&ratios);
        let b_hat = (0..sample.len()).map(|i| a_hat[i] + cr * sample.r[i] - cg * sample.g[i]).collect();
        Self { ratios, a_hat, b_hat }
    }
}

pub fn a_hat(sample: &CellSample, ratios: &Ratios) -> Vec<f64> {
    (0..sample.len())
        .map(|i| (sample.g[i] / ratios.mu_g - sample.r[i] / ratios.mu_r) * sample.resid[i])
        .collect()
}

/// `(mu_E/mu_R², mu_F/mu_G²)`, so that `B = A + c_R R - c_G G`.
fn b_coefficients(r: &Ratios) -> (f64, f64) {
    (r.mu_e / (r.mu_r * r.mu_r), r.mu_f / (r.mu_g * r.mu_g))
}

/// Point estimate at `z` together with the ratios and `A` used.
pub fn dr_at(sample: &CellSample, z: f64, spec: &LprSpec, spec_v: &LprSpec) -> Result<(f64, Ratios, Vec<f64>), CattError> {
    let ratios = second_stage_ratios(sample, z, spec, spec_v)?;
    let a = a_hat(sample, &ratios);
    let beta = local_poly::lpr_fit(&sample.z, &a, z, spec, None)?;
    Ok((beta[0], ratios, a))
}

/// `sigma²_B(z)`: local linear fit at `z` of `U² = (B - mu_B(Z))²`, where
/// `mu_B` is the local linear smooth of `B`. Direct form, quadratic in the
/// window size.
pub fn residual_variance(zs_sorted: &[f64], b_hat: &[f64], z: f64, spec_v: &LprSpec) -> Result<f64, CattError> {
    let range = window(zs_sorted, z, spec_v);
    if range.is_empty() {
        return Err(LprError::EmptyWindow { z }.into());
    }
    let mut u2 = Vec::with_capacity(range.len());
    for j in range.clone() {
        let mu = local_poly::lpr_fit(zs_sorted, b_hat, zs_sorted[j], spec_v, None)?[0];
        u2.push((b_hat[j] - mu).powi(2));
    }
    let fit = local_poly::lpr_fit(&zs_sorted[range], &u2, z, spec_v, None)?;
    Ok(fit[0].max(0.0))
}

/// Local linear smooths of `G`, `R`, `E`, `F` at each unit inside the span
/// that any grid window can reach. Since the smoother is linear,
/// `mu_B(Z_j) = s_F/mu_G - s_E/mu_R + c_R s_R - c_G s_G` for every ratio set.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseSmooths {
    pub offset: usize,
    pub s_g: Vec<f64>,
    pub s_r: Vec<f64>,
    pub s_e: Vec<f64>,
    pub s_f: Vec<f64>,
}

impl BaseSmooths {
    pub fn new(sample: &CellSample, grid: &[f64], spec_v: &LprSpec) -> Result<Self, CattError> {
        let lo_z = grid.iter().copied().fold(f64::INFINITY, f64::min);
        let hi_z = grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = window(&sample.z, lo_z, spec_v).start;
        let hi = window(&sample.z, hi_z, spec_v).end.max(lo);
        let at = &sample.z[lo..hi];
        let fits = local_poly::local_linear_many(&sample.z, &[&sample.g, &sample.r, &sample.e, &sample.f], at, spec_v);
        let mut out = BaseSmooths {
            offset: lo,
            s_g: Vec::with_capacity(at.len()),
            s_r: Vec::with_capacity(at.len()),
            s_e: Vec::with_capacity(at.len()),
            s_f: Vec::with_capacity(at.len()),
        };
        for f in fits {
            let f = f?;
            out.s_g.push(f[0]);
            out.s_r.push(f[1]);
            out.s_e.push(f[2]);
            out.s_f.push(f[3]);
        }
        Ok(out)
    }

    /// `sigma²_B(z)` for the ratios at `z`; equals [`residual_variance`].
    pub fn residual_variance(&self, sample: &CellSample, ratios: &Ratios, z: f64, spec_v: &LprSpec) -> Result<f64, CattError> {
        let range = window(&sample.z, z, spec_v);
        if range.is_empty() {
            return Err(LprError::EmptyWindow { z }.into());
        }
        let (cr, cg) = b_coefficients(ratios);
        let mut u2 = Vec::with_capacity(range.len());
        for j in range.clone() {
            let k = j - self.offset;
            let b = (sample.g[j] / ratios.mu_g - sample.r[j] / ratios.mu_r) * sample.resid[j] + cr * sample.r[j]
                - cg * sample.g[j];
            let mu = self.s_f[k] / ratios.mu_g - self.s_e[k] / ratios.mu_r + cr * self.s_r[k] - cg * self.s_g[k];
            u2.push((b - mu).powi(2));
        }
        let fit = local_poly::lpr_fit(&sample.z[range], &u2, z, spec_v, None)?;
        Ok(fit[0].max(0.0))
    }
}

/// Asymptotic variance constant at one point.
pub fn variance_constant(p: usize, sigma2: f64, f: f64, moments: &KernelMoments) -> f64 {
    sigma2 / f * moments.variance_factor(p)
}

pub fn standard_error(v_hat: f64, n: usize, h: f64) -> f64 {
    (v_hat / (n as f64 * h)).sqrt()
}

/// Estimates and standard errors of one cell over a grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DrCurve {
    pub cell: GroupTimeCell,
    pub spec: LprSpec,
    pub spec_v: LprSpec,
    pub n: usize,
    pub grid: Vec<f64>,
    /// `NaN` where the point failed.
    pub estimate: Vec<f64>,
    pub se: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub f_hat: Vec<f64>,
    pub v_hat: Vec<f64>,
    pub n_eff: Vec<f64>,
    pub ratios: Vec<Option<Ratios>>,
    pub density_floored: Vec<bool>,
    pub point_errors: Vec<(f64, String)>,
    /// `A_i(z)` per grid point in sample order; empty where the point failed.
    #[serde(skip)]
    pub a_hat: Vec<Vec<f64>>,
}

impl DrCurve {
    pub fn ok(&self, k: usize) -> bool {
        self.estimate[k].is_finite()
    }
}

struct PointFit {
    estimate: f64,
    ratios: Ratios,
    a: Vec<f64>,
    sigma2: f64,
}

pub fn dr_curve(
    sample: &CellSample,
    grid: &[f64],
    spec: &LprSpec,
    spec_v: &LprSpec,
    density: &DensityFit,
    moments: &KernelMoments,
) -> Result<DrCurve, CattError> {
    let smooths = BaseSmooths::new(sample, grid, spec_v);
    let points: Vec<Result<PointFit, CattError>> = grid
        .par_iter()
        .map(|&z| {
            let smooths = smooths.as_ref().map_err(Clone::clone)?;
            let (estimate, ratios, a) = dr_at(sample, z, spec, spec_v)?;
            let sigma2 = smooths.residual_variance(sample, &ratios, z, spec_v)?;
            Ok(PointFit { estimate, ratios, a, sigma2 })
        })
        .collect();

    let n = sample.len();
    let k = grid.len();
    let mut curve = DrCurve {
        cell: sample.cell,
        spec: *spec,
        spec_v: *spec_v,
        n,
        grid: grid.to_vec(),
        estimate: vec![f64::NAN; k],
        se: vec![f64::NAN; k],
        sigma2: vec![f64::NAN; k],
        f_hat: density.f.clone(),
        v_hat: vec![f64::NAN; k],
        n_eff: grid.iter().map(|&z| effective_n(&sample.z, z, spec)).collect(),
        ratios: vec![None; k],
        density_floored: density.floored.clone(),
        point_errors: Vec::new(),
        a_hat: vec![Vec::new(); k],
    };
    for (j, point) in points.into_iter().enumerate() {
        match point {
            Ok(pf) => {
                let v = variance_constant(spec.p, pf.sigma2, density.f[j], moments);
                curve.estimate[j] = pf.estimate;
                curve.sigma2[j] = pf.sigma2;
                curve.v_hat[j] = v;
                curve.se[j] = standard_error(v, n, spec.h);
                curve.ratios[j] = Some(pf.ratios);
                curve.a_hat[j] = pf.a;
            }
            Err(e) => curve.point_errors.push((grid[j], e.to_string())),
        }
    }
    let failed = curve.point_errors.len();
    if failed as f64 > MAX_FAILED_SHARE * k as f64 {
        return Err(CattError::TooManyFailedPoints { g: sample.cell.g, t: sample.cell.t, failed, total: k });
    }
    Ok(curve)
}

/// Point estimates only, without the variance step.
pub fn dr_estimates(sample: &CellSample, grid: &[f64], spec: &LprSpec, spec_v: &LprSpec) -> Vec<Result<f64, CattError>> {
    grid.par_iter().map(|&z| dr_at(sample, z, spec, spec_v).map(|r| r.0)).collect()
}

/// Conditional IPW and OR analogues of the DR curve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IpwOrCurves {
    pub grid: Vec<f64>,
    pub ipw: Vec<f64>,
    pub or: Vec<f64>,
}

pub fn ipw_or_curves(sample: &CellSample, grid: &[f64], spec: &LprSpec, spec_v: &LprSpec) -> Result<IpwOrCurves, CattError> {
    let pts: Vec<Result<(f64, f64), CattError>> = grid
        .par_iter()
        .map(|&z| {
            let r = second_stage_ratios(sample, z, spec, spec_v)?;
            let ipw: Vec<f64> =
                (0..sample.len()).map(|i| (sample.g[i] / r.mu_g - sample.r[i] / r.mu_r) * sample.dy[i]).collect();
            let or: Vec<f64> = (0..sample.len()).map(|i| sample.g[i] / r.mu_g * sample.resid[i]).collect();
            let fits = lpr_fit_many(&sample.z, &[&ipw, &or], z, spec, None)?;
            Ok((fits[0][0], fits[1][0]))
        })
        .collect();
    let mut out = IpwOrCurves { grid: grid.to_vec(), ipw: Vec::new(), or: Vec::new() };
    for p in pts {
        let (a, b) = p?;
        out.ipw.push(a);
        out.or.push(b);
    }
    Ok(out)
}
