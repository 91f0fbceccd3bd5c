//! Local polynomial regression and kernel constants.
//!
//! Fits are solved in the scaled coordinate `u = (Z - z0) / h` and mapped
//! back to derivatives of the regression function at `z0`. Observations with
//! `|u|` beyond the kernel radius get zero weight and are never visited, so
//! sorted and unsorted inputs yield the same result for the same data order.

use std::f64::consts::PI;
use std::ops::Range;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::linalg;
use crate::quadrature::integrate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Kernel {
    Gaussian,
    Epanechnikov,
}

impl Kernel {
    pub fn eval(self, u: f64) -> f64 {
        match self {
            Kernel::Gaussian => (-0.5 * u * u).exp() / (2.0 * PI).sqrt(),
            Kernel::Epanechnikov => {
                if u.abs() <= 1.0 {
                    0.75 * (1.0 - u * u)
                } else {
                    0.0
                }
            }
        }
    }

    pub fn deriv(self, u: f64) -> f64 {
        match self {
            Kernel::Gaussian => -u * self.eval(u),
            Kernel::Epanechnikov => {
                if u.abs() < 1.0 {
                    -1.5 * u
                } else {
                    0.0
                }
            }
        }
    }

    /// Second derivative; for Epanechnikov only on the open support.
    pub fn deriv2(self, u: f64) -> f64 {
        match self {
            Kernel::Gaussian => (u * u - 1.0) * self.eval(u),
            Kernel::Epanechnikov => {
                if u.abs() < 1.0 {
                    -1.5
                } else {
                    0.0
                }
            }
        }
    }

    /// Observations with `|u| > radius` are ignored. For the Gaussian kernel
    /// the neglected mass is below `exp(-32)`.
    pub fn radius(self) -> f64 {
        match self {
            Kernel::Gaussian => 8.0,
            Kernel::Epanechnikov => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Kernel::Gaussian => "gaussian",
            Kernel::Epanechnikov => "epanechnikov",
        }
    }

    pub fn moments(self) -> KernelMoments {
        kernel_moments(self)
    }
}

impl std::str::FromStr for Kernel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => Ok(Kernel::Gaussian),
            "epanechnikov" | "epa" => Ok(Kernel::Epanechnikov),
            other => Err(format!("unknown kernel `{other}` (expected gaussian or epanechnikov)")),
        }
    }
}

/// `I_{l,K} = ∫ u^l K(u) du`, `I_{l,K²} = ∫ u^l K(u)² du` and the
/// roughness constant `lambda = -∫ K K'' / ∫ K²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KernelMoments {
    pub i0k: f64,
    pub i2k: f64,
    pub i4k: f64,
    pub i6k: f64,
    pub i0k2: f64,
    pub i2k2: f64,
    pub i4k2: f64,
    pub lambda: f64,
}

impl KernelMoments {
    /// Kernel factor of the asymptotic variance for order `p` (1 or 2).
    pub fn variance_factor(&self, p: usize) -> f64 {
        match p {
            1 => self.i0k2,
            2 => {
                let num = self.i4k * self.i4k * self.i0k2 - 2.0 * self.i2k * self.i4k * self.i2k2
                    + self.i2k * self.i2k * self.i4k2;
                let den = self.i4k - self.i2k * self.i2k;
                num / (den * den)
            }
            _ => panic!("variance factor is defined for p = 1, 2 only"),
        }
    }

    /// `(I_4K² - I_2K I_6K) / (I_4K - I_2K²)`, the kernel factor of the
    /// local quadratic bias.
    pub fn quadratic_bias_factor(&self) -> f64 {
        (self.i4k * self.i4k - self.i2k * self.i6k) / (self.i4k - self.i2k * self.i2k)
    }
}

pub fn kernel_moments(kernel: Kernel) -> KernelMoments {
    // the Gaussian integrands are below 1e-30 beyond |u| = 12
    let r = match kernel {
        Kernel::Gaussian => 12.0,
        Kernel::Epanechnikov => 1.0,
    };
    let tol = 1e-14;
    let mk = |l: i32| integrate(|u| u.powi(l) * kernel.eval(u), -r, r, tol);
    let mk2 = |l: i32| integrate(|u| u.powi(l) * kernel.eval(u).powi(2), -r, r, tol);
    let kk2 = integrate(|u| kernel.eval(u) * kernel.deriv2(u), -r, r, tol);
    let i0k2 = mk2(0);
    let lambda = -kk2 / i0k2;
    assert!(lambda > 0.0, "kernel roughness constant must be positive");
    KernelMoments { i0k: mk(0), i2k: mk(2), i4k: mk(4), i6k: mk(6), i0k2, i2k2: mk2(2), i4k2: mk2(4), lambda }
}

/// Per-observation weight of the estimator's leading term:
/// 1 for `p = 1` and `(I_4K - u² I_2K)/(I_4K - I_2K²)` for `p = 2`.
pub fn psi_weight(p: usize, u: f64, m: &KernelMoments) -> f64 {
    match p {
        1 => 1.0,
        2 => (m.i4k - u * u * m.i2k) / (m.i4k - m.i2k * m.i2k),
        _ => panic!("psi weight is defined for p = 1, 2 only"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LprSpec {
    pub p: usize,
    pub h: f64,
    pub kernel: Kernel,
}

impl LprSpec {
    pub fn new(p: usize, h: f64, kernel: Kernel) -> Self {
        assert!(h > 0.0 && h.is_finite(), "bandwidth must be positive, got {h}");
        Self { p, h, kernel }
    }

    fn half_width(&self) -> f64 {
        self.kernel.radius() * self.h
    }

    fn in_window(&self, z: f64, z0: f64) -> bool {
        let r = self.half_width();
        z >= z0 - r && z <= z0 + r
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LprError {
    #[error("no observations within the kernel window at z = {z}")]
    EmptyWindow { z: f64 },
    #[error("local design is singular at z = {z}")]
    SingularLocalDesign { z: f64 },
    #[error("derivative order {nu} exceeds polynomial order {p}")]
    NuExceedsOrder { nu: usize, p: usize },
}

/// Index range of a sorted sample inside the kernel window around `z0`.
pub fn window(zs_sorted: &[f64], z0: f64, spec: &LprSpec) -> Range<usize> {
    let r = spec.half_width();
    let lo = zs_sorted.partition_point(|&z| z < z0 - r);
    let hi = zs_sorted.partition_point(|&z| z <= z0 + r);
    lo..hi.max(lo)
}

/// Weighted local polynomial fit of several responses sharing one design.
///
/// Returns one coefficient vector per response; entry `j` is the coefficient
/// of `(Z - z0)^j`, so `j! * beta[j]` estimates the `j`-th derivative.
pub fn lpr_fit_many(
    zs: &[f64],
    qs: &[&[f64]],
    z0: f64,
    spec: &LprSpec,
    multipliers: Option<&[f64]>,
) -> Result<Vec<Vec<f64>>, LprError> {
    let k = spec.p + 1;
    let mut rows: Vec<(f64, f64, usize)> = Vec::new();
    let mut signed = false;
    for (i, &z) in zs.iter().enumerate() {
        if !spec.in_window(z, z0) {
            continue;
        }
        let u = (z - z0) / spec.h;
        let mut w = spec.kernel.eval(u);
        if let Some(m) = multipliers {
            w *= m[i];
        }
        if w != 0.0 {
            signed |= w < 0.0;
            rows.push((u, w, i));
        }
    }
    if rows.is_empty() {
        return Err(LprError::EmptyWindow { z: z0 });
    }
    if rows.len() < k {
        return Err(LprError::SingularLocalDesign { z: z0 });
    }

    let gammas = if signed {
        // a negative multiplier has no square root; use the normal equations
        let mut s = vec![0.0; 2 * k - 1];
        let mut t = vec![vec![0.0; k]; qs.len()];
        for &(u, w, i) in &rows {
            let mut pw = w;
            for (m, sm) in s.iter_mut().enumerate() {
                if m < k {
                    for (r, q) in qs.iter().enumerate() {
                        t[r][m] += pw * q[i];
                    }
                }
                *sm += pw;
                pw *= u;
            }
        }
        t.iter()
            .map(|tr| solve_moments(&s, tr, spec.p).map_err(|_| LprError::SingularLocalDesign { z: z0 }))
            .collect::<Result<Vec<_>, _>>()?
    } else {
        let n = rows.len();
        let mut a = vec![0.0; n * k];
        let mut rhs: Vec<Vec<f64>> = vec![vec![0.0; n]; qs.len()];
        for (r, &(u, w, i)) in rows.iter().enumerate() {
            let sw = w.sqrt();
            let mut pu = sw;
            for j in 0..k {
                a[j * n + r] = pu;
                pu *= u;
            }
            for (b, q) in rhs.iter_mut().zip(qs) {
                b[r] = sw * q[i];
            }
        }
        linalg::lstsq(&mut a, n, k, &mut rhs, 1e-10).map_err(|_| LprError::SingularLocalDesign { z: z0 })?
    };
    Ok(gammas.into_iter().map(|g| unscale(g, spec.h)).collect())
}

/// Solves the local normal equations from the kernel moments
/// `s[m] = Σ w u^m` (`m = 0..=2p`) and `t[m] = Σ w u^m q` (`m = 0..=p`).
/// The result is in `u` coordinates.
pub fn solve_moments(s: &[f64], t: &[f64], p: usize) -> Result<Vec<f64>, linalg::LinalgError> {
    let k = p + 1;
    match k {
        1 => {
            if s[0] == 0.0 {
                return Err(linalg::LinalgError::Singular);
            }
            Ok(vec![t[0] / s[0]])
        }
        2 => {
            let det = s[0] * s[2] - s[1] * s[1];
            if det.abs() <= 1e-13 * (s[0] * s[2]).abs() || det == 0.0 {
                return Err(linalg::LinalgError::Singular);
            }
            Ok(vec![(s[2] * t[0] - s[1] * t[1]) / det, (s[0] * t[1] - s[1] * t[0]) / det])
        }
        _ => {
            let mut gram = vec![0.0; k * k];
            for a in 0..k {
                for b in 0..k {
                    gram[a * k + b] = s[a + b];
                }
            }
            linalg::solve_square(&gram, &t[..k], 1e-13)
        }
    }
}

fn unscale(mut gamma: Vec<f64>, h: f64) -> Vec<f64> {
    let mut hp = 1.0;
    for g in gamma.iter_mut() {
        *g /= hp;
        hp *= h;
    }
    gamma
}

pub fn lpr_fit(zs: &[f64], qs: &[f64], z0: f64, spec: &LprSpec, multipliers: Option<&[f64]>) -> Result<Vec<f64>, LprError> {
    Ok(lpr_fit_many(zs, &[qs], z0, spec, multipliers)?.pop().expect("one response"))
}

/// `nu! * beta[nu]`, the estimate of the `nu`-th derivative at `z0`.
pub fn lpr_mu(
    zs: &[f64],
    qs: &[f64],
    z0: f64,
    spec: &LprSpec,
    nu: usize,
    multipliers: Option<&[f64]>,
) -> Result<f64, LprError> {
    if nu > spec.p {
        return Err(LprError::NuExceedsOrder { nu, p: spec.p });
    }
    let beta = lpr_fit(zs, qs, z0, spec, multipliers)?;
    Ok(factorial(nu) * beta[nu])
}

pub fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// `lpr_mu` at every grid point; errors carry the offending point.
pub fn lpr_curve(
    zs: &[f64],
    qs: &[f64],
    grid: &[f64],
    spec: &LprSpec,
    nu: usize,
    multipliers: Option<&[f64]>,
) -> Vec<Result<f64, LprError>> {
    grid.par_iter().map(|&z| lpr_mu(zs, qs, z, spec, nu, multipliers)).collect()
}

/// Local linear smooths of several responses, evaluated at every entry of
/// `at`. `zs` must be sorted. Uses the moment form, which is adequate for the
/// well-conditioned order-1 problems it serves.
pub fn local_linear_many(zs_sorted: &[f64], qs: &[&[f64]], at: &[f64], spec: &LprSpec) -> Vec<Result<Vec<f64>, LprError>> {
    debug_assert_eq!(spec.p, 1);
    at.par_iter()
        .map(|&z0| {
            let range = window(zs_sorted, z0, spec);
            if range.is_empty() {
                return Err(LprError::EmptyWindow { z: z0 });
            }
            let mut s = [0.0; 3];
            let mut t = vec![[0.0; 2]; qs.len()];
            for i in range {
                let u = (zs_sorted[i] - z0) / spec.h;
                let w = spec.kernel.eval(u);
                let wu = w * u;
                s[0] += w;
                s[1] += wu;
                s[2] += wu * u;
                for (tr, q) in t.iter_mut().zip(qs) {
                    tr[0] += w * q[i];
                    tr[1] += wu * q[i];
                }
            }
            t.iter()
                .map(|tr| {
                    solve_moments(&s, tr, 1)
                        .map(|g| unscale(g, spec.h)[0])
                        .map_err(|_| LprError::SingularLocalDesign { z: z0 })
                })
                .collect()
        })
        .collect()
}

/// Kish effective sample size `(Σ K)² / Σ K²` of the kernel window at `z0`.
pub fn effective_n(zs: &[f64], z0: f64, spec: &LprSpec) -> f64 {
    let (mut s1, mut s2) = (0.0, 0.0);
    for &z in zs {
        if spec.in_window(z, z0) {
            let w = spec.kernel.eval((z - z0) / spec.h);
            s1 += w;
            s2 += w * w;
        }
    }
    if s2 > 0.0 {
        s1 * s1 / s2
    } else {
        0.0
    }
}
