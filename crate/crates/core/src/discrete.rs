//! Cell-mean estimator for a covariate with finite support, with bootstrap
//! standard errors from the interquartile range and max-t bands.

use std::ops::Range;

use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::band::{draw_weights, empirical_quantile, BandError, CriticalMethod, CriticalValue, Scope, WeightKind};
use crate::catt::CellSample;
use crate::panel::GroupTimeCell;
use crate::rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiscreteError {
    #[error("support point z = {z} has {count} observations (at least 2 required)")]
    EmptyCell { z: f64, count: usize },
    #[error("cell mean of {which} is zero at z = {z}")]
    DegenerateCellRatio { which: &'static str, z: f64 },
    #[error("at least 50 bootstrap replications are required for the IQR, got {0}")]
    TooFewReps(usize),
    #[error(transparent)]
    Band(#[from] BandError),
}

/// `z_{0.75} - z_{0.25}` of the standard normal.
pub fn normal_iqr() -> f64 {
    let n = Normal::standard();
    n.inverse_cdf(0.75) - n.inverse_cdf(0.25)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiscreteCurve {
    pub cell: GroupTimeCell,
    pub support: Vec<f64>,
    pub count: Vec<usize>,
    pub estimate: Vec<f64>,
    #[serde(skip)]
    unit: Vec<usize>,
    #[serde(skip)]
    segments: Vec<Range<usize>>,
    /// `A_i` in sample order, built from the unweighted cell means.
    #[serde(skip)]
    a_hat: Vec<f64>,
}

/// `DR(z) = E_n[(G/E_n[G|z] - R/E_n[R|z]) (dY - m) | Z = z]` at every
/// support point of the sample.
pub fn discrete_dr(sample: &CellSample) -> Result<DiscreteCurve, DiscreteError> {
    let mut segments = Vec::new();
    let mut start = 0;
    for i in 1..=sample.len() {
        if i == sample.len() || sample.z[i] != sample.z[start] {
            segments.push(start..i);
            start = i;
        }
    }
    let mut curve = DiscreteCurve {
        cell: sample.cell,
        support: Vec::new(),
        count: Vec::new(),
        estimate: Vec::new(),
        unit: sample.unit.clone(),
        segments: Vec::new(),
        a_hat: vec![0.0; sample.len()],
    };
    for seg in segments {
        let z = sample.z[seg.start];
        let n = seg.len();
        if n < 2 {
            return Err(DiscreteError::EmptyCell { z, count: n });
        }
        let mean = |v: &[f64]| v[seg.clone()].iter().sum::<f64>() / n as f64;
        let eg = mean(&sample.g);
        let er = mean(&sample.r);
        if eg == 0.0 {
            return Err(DiscreteError::DegenerateCellRatio { which: "G", z });
        }
        if er == 0.0 {
            return Err(DiscreteError::DegenerateCellRatio { which: "R", z });
        }
        for i in seg.clone() {
            curve.a_hat[i] = (sample.g[i] / eg - sample.r[i] / er) * sample.resid[i];
        }
        curve.estimate.push(mean(&curve.a_hat));
        curve.support.push(z);
        curve.count.push(n);
        curve.segments.push(seg);
    }
    Ok(curve)
}

impl DiscreteCurve {
    /// Weighted cell means `Σ V A / Σ V` per support point, or `None` if some
    /// `Σ V` is not positive.
    fn reweighted(&self, weights: &[f64]) -> Option<Vec<f64>> {
        self.segments
            .iter()
            .map(|seg| {
                let (mut num, mut den) = (0.0, 0.0);
                for i in seg.clone() {
                    let v = weights[self.unit[i]];
                    num += v * self.a_hat[i];
                    den += v;
                }
                (den > 0.0).then(|| num / den)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiscreteBand {
    pub cell: GroupTimeCell,
    pub support: Vec<f64>,
    pub count: Vec<usize>,
    pub estimate: Vec<f64>,
    pub se_tilde: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub critical: CriticalValue,
}

impl DiscreteBand {
    pub fn covers(&self, k: usize, truth: f64) -> bool {
        self.lower[k] <= truth && truth <= self.upper[k]
    }
}

/// Bootstrap standard errors and max-t bands for every curve. With
/// [`Scope::JointGtz`] one critical value covers all curves; otherwise each
/// curve gets its own. The weight draw of a replication is shared by all
/// curves.
pub fn discrete_bootstrap_band(
    curves: &[DiscreteCurve],
    n_units: usize,
    alpha: f64,
    reps: usize,
    kind: WeightKind,
    scope: Scope,
    seed: u64,
) -> Result<Vec<DiscreteBand>, DiscreteError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(BandError::InvalidAlpha(alpha).into());
    }
    if reps < 50 {
        return Err(DiscreteError::TooFewReps(reps));
    }
    // deviations[rep][curve][point]; None marks a dropped replication
    let draws: Vec<Option<Vec<Vec<f64>>>> = (0..reps)
        .into_par_iter()
        .map(|b| {
            let v = draw_weights(kind, n_units, &mut rng::stream(seed, b as u64));
            curves
                .iter()
                .map(|c| c.reweighted(&v).map(|s| s.iter().zip(&c.estimate).map(|(a, e)| a - e).collect()))
                .collect()
        })
        .collect();
    let kept: Vec<&Vec<Vec<f64>>> = draws.iter().flatten().collect();
    let dropped = reps - kept.len();
    if kept.is_empty() {
        return Err(BandError::AllRepsDropped.into());
    }
    if dropped > 0 {
        log::warn!("{dropped} bootstrap replications dropped for a non-positive weighted cell count");
    }

    let iqr = normal_iqr();
    let mut se = Vec::with_capacity(curves.len());
    for (c, curve) in curves.iter().enumerate() {
        let mut s = Vec::with_capacity(curve.support.len());
        for (k, &z) in curve.support.iter().enumerate() {
            let dev: Vec<f64> = kept.iter().map(|d| d[c][k]).collect();
            let spread = empirical_quantile(&dev, 0.75) - empirical_quantile(&dev, 0.25);
            if !(spread > 0.0) {
                return Err(BandError::ZeroIqr { z }.into());
            }
            s.push(spread / iqr);
        }
        se.push(s);
    }

    let max_t = |d: &Vec<Vec<f64>>, which: Option<usize>| -> f64 {
        let mut m = 0.0f64;
        for (c, dc) in d.iter().enumerate() {
            if which.is_some_and(|w| w != c) {
                continue;
            }
            for (k, x) in dc.iter().enumerate() {
                m = m.max(x.abs() / se[c][k]);
            }
        }
        m
    };
    let critical = |which: Option<usize>| -> CriticalValue {
        let stats: Vec<f64> = kept.iter().map(|d| max_t(d, which)).collect();
        CriticalValue {
            value: empirical_quantile(&stats, 1.0 - alpha),
            method: CriticalMethod::DiscreteBootstrap,
            alpha,
            scope,
            a_n: None,
            reps: Some(reps),
            excluded_points: 0,
            dropped_reps: dropped,
        }
    };
    let joint = (scope == Scope::JointGtz).then(|| critical(None));
    Ok(curves
        .iter()
        .enumerate()
        .map(|(c, curve)| {
            let crit = joint.clone().unwrap_or_else(|| critical(Some(c)));
            let s = &se[c];
            DiscreteBand {
                cell: curve.cell,
                support: curve.support.clone(),
                count: curve.count.clone(),
                estimate: curve.estimate.clone(),
                se_tilde: s.clone(),
                lower: curve.estimate.iter().zip(s).map(|(e, s)| e - crit.value * s).collect(),
                upper: curve.estimate.iter().zip(s).map(|(e, s)| e + crit.value * s).collect(),
                critical: crit,
            }
        })
        .collect())
}
