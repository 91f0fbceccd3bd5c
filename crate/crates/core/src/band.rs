//! Critical values and uniform confidence bands.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::catt::{CellSample, DrCurve};
use crate::local_poly::{solve_moments, window, LprSpec};
use crate::panel::GroupTimeCell;
use crate::rng;

/// Grid points whose standard error is below this are left out of the
/// supremum.
pub const ZERO_SE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BandError {
    #[error("alpha must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),
    #[error("analytic critical value undefined: a_n^2 = {a_n2:.4} (bandwidth too large for the interval); use the bootstrap")]
    BandwidthTooLarge { a_n2: f64 },
    #[error("a_n must be positive, got {0}")]
    NonPositiveAn(f64),
    #[error("every grid point has a zero standard error")]
    AllPointsExcluded,
    #[error("at least one bootstrap replication is required")]
    NoReps,
    #[error("every bootstrap replication was dropped")]
    AllRepsDropped,
    #[error("bootstrap distribution at z = {z} has zero interquartile range")]
    ZeroIqr { z: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CriticalMethod {
    Analytic,
    Gumbel,
    Bootstrap,
    DiscreteBootstrap,
}

impl CriticalMethod {
    pub fn tag(self) -> &'static str {
        match self {
            CriticalMethod::Analytic => "analytic",
            CriticalMethod::Gumbel => "gumbel",
            CriticalMethod::Bootstrap => "bootstrap",
            CriticalMethod::DiscreteBootstrap => "discrete-boot",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Scope {
    /// Uniform over `z` within each cell.
    ZOnly,
    /// Uniform over all cells and `z` jointly.
    JointGtz,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriticalValue {
    pub value: f64,
    pub method: CriticalMethod,
    pub alpha: f64,
    pub scope: Scope,
    pub a_n: Option<f64>,
    pub reps: Option<usize>,
    /// Grid points excluded for a zero standard error.
    pub excluded_points: usize,
    /// Replications left out of the quantile.
    pub dropped_reps: usize,
}

fn check_alpha(alpha: f64) -> Result<(), BandError> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(BandError::InvalidAlpha(alpha))
    }
}

/// `a_n² = 2 log((b - a)/h) + 2 log(sqrt(lambda)/(2 pi))`.
pub fn a_n_squared(a: f64, b: f64, h: f64, lambda: f64) -> f64 {
    2.0 * ((b - a) / h).ln() + 2.0 * (lambda.sqrt() / (2.0 * std::f64::consts::PI)).ln()
}

/// `-2 log log (1/sqrt(1 - alpha))`.
fn level_term(alpha: f64) -> f64 {
    -2.0 * (1.0 / (1.0 - alpha).sqrt()).ln().ln()
}

pub fn analytic_critical_value(alpha: f64, a: f64, b: f64, h: f64, lambda: f64) -> Result<CriticalValue, BandError> {
    check_alpha(alpha)?;
    let a_n2 = a_n_squared(a, b, h, lambda);
    let radicand = a_n2 + level_term(alpha);
    if a_n2 <= 0.0 || radicand < 0.0 {
        return Err(BandError::BandwidthTooLarge { a_n2 });
    }
    Ok(CriticalValue {
        value: radicand.sqrt(),
        method: CriticalMethod::Analytic,
        alpha,
        scope: Scope::ZOnly,
        a_n: Some(a_n2.sqrt()),
        reps: None,
        excluded_points: 0,
        dropped_reps: 0,
    })
}

/// `a_n - log log (1/sqrt(1 - alpha)) / a_n`.
pub fn gumbel_critical_value(alpha: f64, a_n: f64) -> Result<CriticalValue, BandError> {
    check_alpha(alpha)?;
    if a_n <= 0.0 {
        return Err(BandError::NonPositiveAn(a_n));
    }
    Ok(CriticalValue {
        value: a_n + 0.5 * level_term(alpha) / a_n,
        method: CriticalMethod::Gumbel,
        alpha,
        scope: Scope::ZOnly,
        a_n: Some(a_n),
        reps: None,
        excluded_points: 0,
        dropped_reps: 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum WeightKind {
    /// Two-point weights with mean 1 and variance 1.
    Mammen,
    /// `N(1, 1)`.
    Normal,
    /// Always 1; the bootstrap statistic is then identically zero.
    Unit,
}

impl std::str::FromStr for WeightKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mammen" => Ok(WeightKind::Mammen),
            "normal" | "gaussian" => Ok(WeightKind::Normal),
            "unit" => Ok(WeightKind::Unit),
            other => Err(format!("unknown weight kind `{other}` (expected mammen or normal)")),
        }
    }
}

/// Support points and lower-point probability of the Mammen weights.
pub fn mammen_points() -> (f64, f64, f64) {
    let s5 = 5f64.sqrt();
    ((3.0 - s5) / 2.0, (3.0 + s5) / 2.0, (s5 + 1.0) / (2.0 * s5))
}

pub fn draw_weights<R: Rng + ?Sized>(kind: WeightKind, n: usize, rng: &mut R) -> Vec<f64> {
    match kind {
        WeightKind::Unit => vec![1.0; n],
        WeightKind::Normal => (0..n).map(|_| 1.0 + rng.sample::<f64, _>(StandardNormal)).collect(),
        WeightKind::Mammen => {
            let (lo, hi, p_lo) = mammen_points();
            (0..n).map(|_| if rng.random::<f64>() < p_lo { lo } else { hi }).collect()
        }
    }
}

/// Order statistic `k = ceil(level * B)` (1-based) of `values`.
pub fn empirical_quantile(values: &[f64], level: f64) -> f64 {
    assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let b = v.len();
    // the guard absorbs representation error in level * B
    let k = ((level * b as f64) - 1e-9).ceil().max(1.0) as usize;
    v[k.min(b) - 1]
}

struct PointFeatures {
    lo: usize,
    len: usize,
    /// Row-major `len x (3p + 2)`: `w u^m` for `m = 0..=2p`, then
    /// `w u^m A` for `m = 0..=p`.
    feats: Vec<f64>,
    center: f64,
    se: f64,
}

/// One cell's bootstrap inputs with `A_i(z)` frozen at the original fit.
pub struct BootstrapTarget {
    pub cell: GroupTimeCell,
    p: usize,
    unit: Vec<usize>,
    points: Vec<PointFeatures>,
    pub excluded_points: usize,
}

impl BootstrapTarget {
    pub fn new(sample: &CellSample, curve: &DrCurve) -> Self {
        let spec: LprSpec = curve.spec;
        let p = spec.p;
        let width = 3 * p + 2;
        let mut points = Vec::new();
        let mut excluded = 0;
        for k in 0..curve.grid.len() {
            let se = curve.se[k];
            if !curve.ok(k) || !(se >= ZERO_SE) {
                excluded += 1;
                continue;
            }
            let z0 = curve.grid[k];
            let range = window(&sample.z, z0, &spec);
            let a = &curve.a_hat[k];
            let mut feats = Vec::with_capacity(range.len() * width);
            for i in range.clone() {
                let u = (sample.z[i] - z0) / spec.h;
                let w = spec.kernel.eval(u);
                let mut pw = w;
                for _ in 0..=2 * p {
                    feats.push(pw);
                    pw *= u;
                }
                let mut pw = w * a[i];
                for _ in 0..=p {
                    feats.push(pw);
                    pw *= u;
                }
            }
            let mut pf = PointFeatures { lo: range.start, len: range.len(), feats, center: 0.0, se };
            let ones = vec![1.0; sample.len()];
            match Self::refit(&pf, p, &ones) {
                Some(c) => {
                    pf.center = c;
                    points.push(pf);
                }
                None => excluded += 1,
            }
        }
        Self { cell: sample.cell, p, unit: sample.unit.clone(), points, excluded_points: excluded }
    }

    fn refit(pf: &PointFeatures, p: usize, v: &[f64]) -> Option<f64> {
        let width = 3 * p + 2;
        let mut acc = [0.0f64; 11];
        for r in 0..pf.len {
            let vi = v[pf.lo + r];
            let row = &pf.feats[r * width..(r + 1) * width];
            for (a, f) in acc.iter_mut().zip(row) {
                *a += vi * f;
            }
        }
        let s = &acc[..2 * p + 1];
        let t = &acc[2 * p + 1..width];
        solve_moments(s, t, p).ok().map(|g| g[0])
    }

    pub fn n_points(&self) -> usize {
        self.points.len()
    }

    /// `max_z |DR*(z) - DR(z)| / SE(z)` for panel-indexed weights; `None`
    /// when no point could be refitted.
    pub fn sup_statistic(&self, weights: &[f64]) -> Option<f64> {
        let v: Vec<f64> = self.unit.iter().map(|&i| weights[i]).collect();
        let mut best: Option<f64> = None;
        for pf in &self.points {
            if let Some(fit) = Self::refit(pf, self.p, &v) {
                let t = (fit - pf.center).abs() / pf.se;
                best = Some(best.map_or(t, |b: f64| b.max(t)));
            }
        }
        best
    }
}

/// Multiplier bootstrap critical value over every target jointly. Each
/// replication draws one weight vector for the whole panel from its own
/// stream, so the result does not depend on scheduling.
pub fn bootstrap_critical_value(
    targets: &[BootstrapTarget],
    n_units: usize,
    alpha: f64,
    reps: usize,
    kind: WeightKind,
    scope: Scope,
    seed: u64,
) -> Result<CriticalValue, BandError> {
    check_alpha(alpha)?;
    if reps == 0 {
        return Err(BandError::NoReps);
    }
    if targets.iter().all(|t| t.n_points() == 0) {
        return Err(BandError::AllPointsExcluded);
    }
    let stats: Vec<Option<f64>> = (0..reps)
        .into_par_iter()
        .map(|b| {
            let mut r = rng::stream(seed, b as u64);
            let v = draw_weights(kind, n_units, &mut r);
            targets.iter().filter_map(|t| t.sup_statistic(&v)).reduce(f64::max)
        })
        .collect();
    let kept: Vec<f64> = stats.iter().flatten().copied().collect();
    if kept.is_empty() {
        return Err(BandError::AllRepsDropped);
    }
    Ok(CriticalValue {
        value: empirical_quantile(&kept, 1.0 - alpha),
        method: CriticalMethod::Bootstrap,
        alpha,
        scope,
        a_n: None,
        reps: Some(reps),
        excluded_points: targets.iter().map(|t| t.excluded_points).sum(),
        dropped_reps: reps - kept.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UniformBand {
    pub cell: GroupTimeCell,
    pub grid: Vec<f64>,
    pub estimate: Vec<f64>,
    pub se: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub critical: CriticalValue,
}

impl UniformBand {
    pub fn covers(&self, k: usize, truth: f64) -> bool {
        self.lower[k] <= truth && truth <= self.upper[k]
    }

    pub fn length(&self, k: usize) -> f64 {
        self.upper[k] - self.lower[k]
    }
}

pub fn assemble_band(curve: &DrCurve, critical: &CriticalValue) -> UniformBand {
    let c = critical.value;
    UniformBand {
        cell: curve.cell,
        grid: curve.grid.clone(),
        estimate: curve.estimate.clone(),
        se: curve.se.clone(),
        lower: curve.estimate.iter().zip(&curve.se).map(|(e, s)| e - c * s).collect(),
        upper: curve.estimate.iter().zip(&curve.se).map(|(e, s)| e + c * s).collect(),
        critical: critical.clone(),
    }
}
