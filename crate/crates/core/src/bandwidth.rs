//! Plug-in bandwidths: bias constants, the IMSE-optimal rule and its
//! undersmoothed variants.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::catt::{dr_curve, CattError, CellSample, ComponentVariables};
use crate::density::{sample_sd, DensityFit};
use crate::local_poly::{lpr_mu, Kernel, KernelMoments, LprError, LprSpec};
use crate::panel::GroupTimeCell;

pub const ZERO_BIAS_THRESHOLD: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BandwidthError {
    #[error("integrated squared bias {0:.3e} is numerically zero")]
    ZeroBias(f64),
    #[error(transparent)]
    Catt(#[from] CattError),
    #[error(transparent)]
    Lpr(#[from] LprError),
    #[error("fewer than two usable grid points for the integrals")]
    TooFewPoints,
}

/// `zeta(1) = 2`, `zeta(2) = 4`.
pub fn zeta(p: usize) -> f64 {
    match p {
        1 => 2.0,
        2 => 4.0,
        _ => panic!("zeta is defined for p = 1, 2 only"),
    }
}

/// Pilot bandwidth `sd(Z) n^{-1/7}` for derivative fits.
pub fn pilot_bandwidth(zs: &[f64]) -> f64 {
    sample_sd(zs) * (zs.len() as f64).powf(-1.0 / 7.0)
}

/// Rule of thumb `sd(Z) n^{-1/5}`.
pub fn rule_of_thumb(zs: &[f64]) -> f64 {
    sample_sd(zs) * (zs.len() as f64).powf(-0.2)
}

/// `nu`-th derivative of the regression of `B` at `z`, from an order `nu+1`
/// fit at the pilot bandwidth.
fn b_derivative(zs: &[f64], b_hat: &[f64], z: f64, nu: usize, h_pilot: f64, kernel: Kernel) -> Result<f64, LprError> {
    lpr_mu(zs, b_hat, z, &LprSpec::new(nu + 1, h_pilot, kernel), nu, None)
}

/// Leading bias constant at `z`. `f` and `f_prime` are only used for `p = 2`.
#[allow(clippy::too_many_arguments)]
pub fn bias_constant(
    p: usize,
    z: f64,
    b_hat: &[f64],
    zs: &[f64],
    f: f64,
    f_prime: f64,
    moments: &KernelMoments,
    h_pilot: f64,
    kernel: Kernel,
) -> Result<f64, LprError> {
    match p {
        1 => Ok(0.5 * b_derivative(zs, b_hat, z, 2, h_pilot, kernel)? * moments.i2k),
        2 => {
            let d3 = b_derivative(zs, b_hat, z, 3, h_pilot, kernel)?;
            let d4 = b_derivative(zs, b_hat, z, 4, h_pilot, kernel)?;
            Ok((2.0 * d3 * f_prime + d4 * f) / (24.0 * f) * moments.quadratic_bias_factor())
        }
        _ => panic!("bias constant is defined for p = 1, 2 only"),
    }
}

/// `(∫V / (2 zeta ∫B²))^{1/(2 zeta + 1)} n^{-1/(2 zeta + 1)}`.
pub fn imse_bandwidth(p: usize, int_v: f64, int_b2: f64, n: usize) -> Result<f64, BandwidthError> {
    if int_b2 < ZERO_BIAS_THRESHOLD {
        return Err(BandwidthError::ZeroBias(int_b2));
    }
    let z = zeta(p);
    let e = 1.0 / (2.0 * z + 1.0);
    Ok((int_v / (2.0 * z * int_b2)).powf(e) * (n as f64).powf(-e))
}

/// `(h_IMSE(1) n^{1/5 - 2/7}, h_IMSE(1))`.
pub fn undersmoothed_bandwidths(h_imse1: f64, n: usize) -> (f64, f64) {
    (h_imse1 * (n as f64).powf(0.2 - 2.0 / 7.0), h_imse1)
}

/// Trapezoid rule over points sorted by abscissa; non-finite ordinates are
/// dropped.
pub fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    let mut pts: Vec<(f64, f64)> = x.iter().zip(y).filter(|(_, v)| v.is_finite()).map(|(&a, &b)| (a, b)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    pts.windows(2).map(|w| 0.5 * (w[1].0 - w[0].0) * (w[0].1 + w[1].1)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandwidthReport {
    pub cell: GroupTimeCell,
    pub n: usize,
    pub h_imse_p1: f64,
    pub h1: f64,
    pub h2: f64,
    pub pilot_h: f64,
    pub preliminary_h: f64,
    pub integral_v: f64,
    pub integral_b2: f64,
    pub zero_bias_fallback: bool,
}

impl BandwidthReport {
    pub fn for_order(&self, p: usize) -> f64 {
        if p == 1 {
            self.h1
        } else {
            self.h2
        }
    }
}

/// Smallest bandwidth of order `p` across cells.
pub fn global_bandwidth(reports: &[BandwidthReport], p: usize) -> f64 {
    reports.iter().map(|r| r.for_order(p)).fold(f64::INFINITY, f64::min)
}

/// Plug-in bandwidths of one cell. The variance and bias constants are
/// estimated with a local linear preliminary fit at the rule-of-thumb
/// bandwidth, and bias derivatives with order `nu + 1` pilot fits.
pub fn select_bandwidth(
    sample: &CellSample,
    grid: &[f64],
    kernel: Kernel,
    moments: &KernelMoments,
) -> Result<BandwidthReport, BandwidthError> {
    let n = sample.len();
    let h_pre = rule_of_thumb(&sample.z);
    let h_pilot = pilot_bandwidth(&sample.z);
    let spec = LprSpec::new(1, h_pre, kernel);
    let density = DensityFit::fit(&sample.z, grid, kernel);
    let prelim = dr_curve(sample, grid, &spec, &spec, &density, moments)?;

    let bias: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|k| match prelim.ratios[k] {
            Some(r) => {
                let cv = ComponentVariables::new(sample, r);
                bias_constant(1, grid[k], &cv.b_hat, &sample.z, density.f[k], density.f_prime[k], moments, h_pilot, kernel)
                    .unwrap_or(f64::NAN)
            }
            None => f64::NAN,
        })
        .collect();
    let usable = (0..grid.len()).filter(|&k| prelim.v_hat[k].is_finite() && bias[k].is_finite()).count();
    if usable < 2 {
        return Err(BandwidthError::TooFewPoints);
    }
    let keep = |v: &[f64]| -> Vec<f64> {
        (0..grid.len()).map(|k| if prelim.v_hat[k].is_finite() && bias[k].is_finite() { v[k] } else { f64::NAN }).collect()
    };
    let int_v = trapezoid(grid, &keep(&prelim.v_hat));
    let b2: Vec<f64> = bias.iter().map(|b| b * b).collect();
    let int_b2 = trapezoid(grid, &keep(&b2));

    let (h_imse, fallback) = match imse_bandwidth(1, int_v, int_b2, n) {
        Ok(h) => (h, false),
        Err(BandwidthError::ZeroBias(v)) => {
            log::warn!("cell (g={}, t={}): integrated squared bias {v:.3e}, using the rule of thumb", sample.cell.g, sample.cell.t);
            (h_pre, true)
        }
        Err(e) => return Err(e),
    };
    let (h1, h2) = undersmoothed_bandwidths(h_imse, n);
    Ok(BandwidthReport {
        cell: sample.cell,
        n,
        h_imse_p1: h_imse,
        h1,
        h2,
        pilot_h: h_pilot,
        preliminary_h: h_pre,
        integral_v: int_v,
        integral_b2: int_b2,
        zero_bias_fallback: fallback,
    })
}
