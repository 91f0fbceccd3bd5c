//! Parametric first stage: logit generalized propensity score and linear
//! outcome regression, plus the per-unit plug-ins built from them.

use serde::Serialize;
use thiserror::Error;

use crate::linalg::{self, LinalgError};
use crate::panel::{ControlMode, GroupTimeCell, PanelData};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FirstStageError {
    #[error("the propensity subsample has only one class ({treated} treated, {controls} comparison units)")]
    OneClass { treated: usize, controls: usize },
    #[error("no comparison units for the outcome regression")]
    EmptyControlSample,
    #[error("logit likelihood is unbounded (perfect separation)")]
    PerfectSeparation,
    #[error("logit Hessian is singular")]
    Singular,
    #[error("logit did not converge in {0} iterations")]
    NoConvergence(usize),
    #[error("outcome regression design is rank deficient")]
    RankDeficient,
    #[error("overlap violated: unit {unit} has propensity {propensity:.6}")]
    OverlapViolation { unit: usize, propensity: f64 },
    #[error("covariate column {0} does not exist")]
    BadColumn(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TrimPolicy {
    /// Drop offending comparison units from the cell.
    Drop,
    /// Abort the cell.
    Fail,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum OutcomeModel {
    Linear,
    /// `m(X) = 0`; only useful to probe double robustness.
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FirstStageOptions {
    pub trim_epsilon: f64,
    pub trim_policy: TrimPolicy,
    /// Columns of `x_sub` used by the propensity model (`None` = all).
    pub gps_columns: Option<Vec<usize>>,
    /// Columns of `x_sub` used by the outcome regression (`None` = all).
    pub or_columns: Option<Vec<usize>>,
    pub outcome_model: OutcomeModel,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for FirstStageOptions {
    fn default() -> Self {
        Self {
            trim_epsilon: 0.005,
            trim_policy: TrimPolicy::Fail,
            gps_columns: None,
            or_columns: None,
            outcome_model: OutcomeModel::Linear,
            max_iter: 100,
            tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogitFit {
    pub coefficients: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub log_likelihood: f64,
}

/// Logit fit of `G_g` on `(1, Z, X_sub)` within the two-class subsample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GpsFit {
    pub coefficients: Vec<f64>,
    pub columns: Vec<usize>,
    pub mode: ControlMode,
    pub n_subsample: usize,
    pub n_treated: usize,
    pub converged: bool,
    pub iterations: usize,
}

impl GpsFit {
    pub fn propensity(&self, panel: &PanelData, i: usize) -> f64 {
        logistic(index(&self.coefficients, panel, &self.columns, i))
    }
}

/// Least-squares fit of `Y_t - Y_{g-delta-1}` on `(1, Z, X_sub)` over the
/// comparison units.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrFit {
    pub coefficients: Vec<f64>,
    pub columns: Vec<usize>,
    pub n_controls: usize,
}

fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

// log(1 + exp(eta)) without overflow
fn softplus(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

fn index(coef: &[f64], panel: &PanelData, columns: &[usize], i: usize) -> f64 {
    let x = panel.x_sub(i);
    let mut s = coef[0] + coef[1] * panel.z()[i];
    for (k, &c) in columns.iter().enumerate() {
        s += coef[k + 2] * x[c];
    }
    s
}

fn resolve_columns(panel: &PanelData, cols: &Option<Vec<usize>>) -> Result<Vec<usize>, FirstStageError> {
    match cols {
        None => Ok((0..panel.n_x_sub()).collect()),
        Some(c) => {
            if let Some(&bad) = c.iter().find(|&&j| j >= panel.n_x_sub()) {
                return Err(FirstStageError::BadColumn(bad));
            }
            Ok(c.clone())
        }
    }
}

fn design_row(panel: &PanelData, columns: &[usize], i: usize, out: &mut Vec<f64>) {
    out.push(1.0);
    out.push(panel.z()[i]);
    let x = panel.x_sub(i);
    out.extend(columns.iter().map(|&c| x[c]));
}

/// Newton-Raphson logit MLE with step halving. `x` is row-major `n x k`.
pub fn logit_mle(x: &[f64], n: usize, k: usize, y: &[f64], max_iter: usize, tol: f64) -> Result<LogitFit, FirstStageError> {
    let loglik = |beta: &[f64]| -> (f64, f64) {
        let mut ll = 0.0;
        let mut max_eta = 0.0f64;
        for i in 0..n {
            let eta: f64 = (0..k).map(|j| x[i * k + j] * beta[j]).sum();
            max_eta = max_eta.max(eta.abs());
            ll += y[i] * eta - softplus(eta);
        }
        (ll, max_eta)
    };

    let mut beta = vec![0.0; k];
    let (mut ll, _) = loglik(&beta);
    for iter in 0..=max_iter {
        let mut grad = vec![0.0; k];
        let mut hess = vec![0.0; k * k];
        for i in 0..n {
            let row = &x[i * k..(i + 1) * k];
            let eta: f64 = row.iter().zip(&beta).map(|(a, b)| a * b).sum();
            let p = logistic(eta);
            let w = p * (1.0 - p);
            for a in 0..k {
                grad[a] += (y[i] - p) * row[a];
                for b in 0..k {
                    hess[a * k + b] += w * row[a] * row[b];
                }
            }
        }
        let gmax = grad.iter().fold(0.0f64, |m, g| m.max(g.abs())) / n as f64;
        if gmax < tol {
            return Ok(LogitFit { coefficients: beta, converged: true, iterations: iter, log_likelihood: ll });
        }
        if iter == max_iter {
            break;
        }
        let step_dir = match linalg::solve_square(&hess, &grad, 1e-13) {
            Ok(d) => d,
            Err(_) => {
                // a vanishing Hessian along a direction means the fitted
                // probabilities collapsed onto 0/1
                if ll > -1e-6 * n as f64 {
                    return Err(FirstStageError::PerfectSeparation);
                }
                return Err(FirstStageError::Singular);
            }
        };
        let mut step = 1.0;
        let mut accepted = false;
        while step > 1e-10 {
            let cand: Vec<f64> = beta.iter().zip(&step_dir).map(|(b, d)| b + step * d).collect();
            let (ll_new, max_eta) = loglik(&cand);
            if ll_new.is_finite() && ll_new >= ll - 1e-12 * ll.abs().max(1.0) {
                if max_eta > 40.0 {
                    return Err(FirstStageError::PerfectSeparation);
                }
                beta = cand;
                ll = ll_new;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return Err(FirstStageError::NoConvergence(iter + 1));
        }
    }
    Err(FirstStageError::NoConvergence(max_iter))
}

/// Treated and comparison indicators of every unit for `cell`.
pub fn cell_membership(panel: &PanelData, cell: &GroupTimeCell) -> (Vec<bool>, Vec<bool>) {
    let treated = panel.groups().iter().map(|&g| cell.is_treated(g)).collect();
    let control = panel.groups().iter().map(|&g| cell.is_control(g)).collect();
    (treated, control)
}

/// Propensity score for the cell's two-class subsample.
pub fn fit_gps(panel: &PanelData, cell: &GroupTimeCell, opts: &FirstStageOptions) -> Result<GpsFit, FirstStageError> {
    let columns = resolve_columns(panel, &opts.gps_columns)?;
    let (treated, control) = cell_membership(panel, cell);
    let k = columns.len() + 2;
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..panel.n_units() {
        if treated[i] || control[i] {
            design_row(panel, &columns, i, &mut x);
            y.push(if treated[i] { 1.0 } else { 0.0 });
        }
    }
    let n_treated = y.iter().filter(|&&v| v == 1.0).count();
    let n_sub = y.len();
    if n_treated == 0 || n_treated == n_sub {
        return Err(FirstStageError::OneClass { treated: n_treated, controls: n_sub - n_treated });
    }
    let fit = logit_mle(&x, n_sub, k, &y, opts.max_iter, opts.tol)?;
    Ok(GpsFit {
        coefficients: fit.coefficients,
        columns,
        mode: cell.mode,
        n_subsample: n_sub,
        n_treated,
        converged: fit.converged,
        iterations: fit.iterations,
    })
}

/// `Y_t - Y_{g-delta-1}` for every unit.
pub fn outcome_difference(panel: &PanelData, cell: &GroupTimeCell) -> Vec<f64> {
    let base = cell.base_period();
    (0..panel.n_units()).map(|i| panel.y(i, cell.t) - panel.y(i, base)).collect()
}

/// Outcome regression over the comparison units.
pub fn fit_or(panel: &PanelData, cell: &GroupTimeCell, opts: &FirstStageOptions) -> Result<OrFit, FirstStageError> {
    let columns = resolve_columns(panel, &opts.or_columns)?;
    let (_, control) = cell_membership(panel, cell);
    let dy = outcome_difference(panel, cell);
    let k = columns.len() + 2;
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..panel.n_units() {
        if control[i] {
            design_row(panel, &columns, i, &mut x);
            y.push(dy[i]);
        }
    }
    if y.is_empty() {
        return Err(FirstStageError::EmptyControlSample);
    }
    let n_controls = y.len();
    if opts.outcome_model == OutcomeModel::Zero {
        return Ok(OrFit { coefficients: vec![0.0; k], columns, n_controls });
    }
    let coefficients = linalg::ols(&x, n_controls, k, &y).map_err(|e| match e {
        LinalgError::RankDeficient { .. } | LinalgError::Singular => FirstStageError::RankDeficient,
        LinalgError::Dimension(_) => FirstStageError::RankDeficient,
    })?;
    Ok(OrFit { coefficients, columns, n_controls })
}

/// `R_i = p(X_i) ctrl_i / (1 - p(X_i))` and the units that failed overlap.
#[derive(Debug, Clone, PartialEq)]
pub struct RValues {
    pub r: Vec<f64>,
    pub trimmed: Vec<usize>,
}

pub fn compute_r(
    panel: &PanelData,
    cell: &GroupTimeCell,
    gps: &GpsFit,
    opts: &FirstStageOptions,
) -> Result<RValues, FirstStageError> {
    let (_, control) = cell_membership(panel, cell);
    let mut r = vec![0.0; panel.n_units()];
    let mut trimmed = Vec::new();
    for i in 0..panel.n_units() {
        if !control[i] {
            continue;
        }
        let p = gps.propensity(panel, i);
        if p >= 1.0 - opts.trim_epsilon {
            match opts.trim_policy {
                TrimPolicy::Fail => return Err(FirstStageError::OverlapViolation { unit: i, propensity: p }),
                TrimPolicy::Drop => {
                    trimmed.push(i);
                    continue;
                }
            }
        }
        r[i] = p / (1.0 - p);
    }
    Ok(RValues { r, trimmed })
}

/// `m_i = (1, X_i)' beta` for every unit.
pub fn compute_m(panel: &PanelData, or_fit: &OrFit) -> Vec<f64> {
    (0..panel.n_units()).map(|i| index(&or_fit.coefficients, panel, &or_fit.columns, i)).collect()
}

/// Everything the later stages need from the first stage of one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct FirstStage {
    pub gps: GpsFit,
    pub or: OrFit,
    pub r: Vec<f64>,
    pub m: Vec<f64>,
    /// Units kept in the cell after overlap trimming.
    pub included: Vec<bool>,
}

pub fn run_first_stage(panel: &PanelData, cell: &GroupTimeCell, opts: &FirstStageOptions) -> Result<FirstStage, FirstStageError> {
    let gps = fit_gps(panel, cell, opts)?;
    let or = fit_or(panel, cell, opts)?;
    let rv = compute_r(panel, cell, &gps, opts)?;
    let m = compute_m(panel, &or);
    let mut included = vec![true; panel.n_units()];
    for &i in &rv.trimmed {
        included[i] = false;
    }
    Ok(FirstStage { gps, or, r: rv.r, m, included })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::Group;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn cell22() -> GroupTimeCell {
        GroupTimeCell { g: 2, t: 2, delta: 0, mode: ControlMode::NeverTreated }
    }

    /// Two-period panel with `dy` as the outcome change and one extra covariate.
    fn two_period(groups: &[Group], z: &[f64], w: &[f64], dy: &[f64]) -> PanelData {
        let n = groups.len();
        let mut y = Vec::new();
        for i in 0..n {
            y.push(0.0);
            y.push(dy[i]);
        }
        PanelData::new(
            (0..n).map(|i| format!("{i:05}")).collect(),
            vec![1, 2],
            y,
            groups.to_vec(),
            z.to_vec(),
            w.to_vec(),
            vec!["w".into()],
        )
        .unwrap()
    }

    #[test]
    fn logit_without_signal_has_small_slopes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 4000;
        let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let groups: Vec<Group> = (0..n).map(|_| if rng.random::<bool>() { Group::Period(2) } else { Group::Never }).collect();
        let panel = two_period(&groups, &z, &w, &vec![0.0; n]);
        let fit = fit_gps(&panel, &cell22(), &FirstStageOptions::default()).unwrap();
        // standard error of each coefficient is about 2/sqrt(n)
        let se = 2.0 / (n as f64).sqrt();
        for c in &fit.coefficients {
            assert!(c.abs() < 3.0 * se, "{:?}", fit.coefficients);
        }
        assert!(fit.converged);
    }

    #[test]
    fn logit_score_equations_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 500;
        let mut x = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let a: f64 = rng.sample(StandardNormal);
            x.extend([1.0, a]);
            let p = 1.0 / (1.0 + (-(0.3 + 0.8 * a)).exp());
            y.push(if rng.random::<f64>() < p { 1.0 } else { 0.0 });
        }
        let fit = logit_mle(&x, n, 2, &y, 100, 1e-10).unwrap();
        for j in 0..2 {
            let s: f64 = (0..n)
                .map(|i| {
                    let eta = fit.coefficients[0] * x[2 * i] + fit.coefficients[1] * x[2 * i + 1];
                    (y[i] - logistic(eta)) * x[2 * i + j]
                })
                .sum();
            assert!((s / n as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn separated_classes_are_detected() {
        let x: Vec<f64> = (0..20).flat_map(|i| [1.0, i as f64]).collect();
        let y: Vec<f64> = (0..20).map(|i| if i < 10 { 0.0 } else { 1.0 }).collect();
        assert_eq!(logit_mle(&x, 20, 2, &y, 100, 1e-10).unwrap_err(), FirstStageError::PerfectSeparation);
    }

    #[test]
    fn one_class_subsample_is_an_error() {
        let groups = vec![Group::Never; 6];
        let z: Vec<f64> = (0..6).map(|i| i as f64).collect();
        let panel = two_period(&groups, &z, &z, &[0.0; 6]);
        assert!(matches!(
            fit_gps(&panel, &cell22(), &FirstStageOptions::default()),
            Err(FirstStageError::OneClass { treated: 0, .. })
        ));
    }

    #[test]
    fn outcome_regression_reproduces_exact_fits() {
        let groups: Vec<Group> = (0..8).map(|i| if i % 3 == 0 { Group::Period(2) } else { Group::Never }).collect();
        let z: Vec<f64> = (0..8).map(|i| i as f64 * 0.5 - 1.0).collect();
        let w: Vec<f64> = (0..8).map(|i| ((i * 7) % 5) as f64).collect();
        let panel = two_period(&groups, &z, &w, &[3.0; 8]);
        let fit = fit_or(&panel, &cell22(), &FirstStageOptions::default()).unwrap();
        assert!((fit.coefficients[0] - 3.0).abs() < 1e-12);
        assert!(fit.coefficients[1].abs() < 1e-12 && fit.coefficients[2].abs() < 1e-12);

        let dy: Vec<f64> = z.iter().map(|v| 2.0 + v).collect();
        let panel = two_period(&groups, &z, &w, &dy);
        let fit = fit_or(&panel, &cell22(), &FirstStageOptions::default()).unwrap();
        assert!((fit.coefficients[0] - 2.0).abs() < 1e-12);
        assert!((fit.coefficients[1] - 1.0).abs() < 1e-12);
        assert!(fit.coefficients[2].abs() < 1e-12);

        let m = compute_m(&panel, &OrFit { coefficients: vec![2.0, 1.0, 0.0], columns: vec![0], n_controls: 0 });
        assert!((m[7] - (2.0 + z[7])).abs() < 1e-15);
    }

    #[test]
    fn r_values_follow_the_odds_formula() {
        let groups = vec![Group::Period(2), Group::Never, Group::Never];
        let z = [0.0, 0.0, 0.0];
        let panel = two_period(&groups, &z, &z, &[0.0; 3]);
        let opts = FirstStageOptions::default();
        let half = GpsFit {
            coefficients: vec![0.0, 0.0, 0.0],
            columns: vec![0],
            mode: ControlMode::NeverTreated,
            n_subsample: 3,
            n_treated: 1,
            converged: true,
            iterations: 0,
        };
        let rv = compute_r(&panel, &cell22(), &half, &opts).unwrap();
        assert_eq!(rv.r, vec![0.0, 1.0, 1.0]);
        let eighty = GpsFit { coefficients: vec![(4.0f64).ln(), 0.0, 0.0], ..half.clone() };
        let rv = compute_r(&panel, &cell22(), &eighty, &opts).unwrap();
        assert!((rv.r[1] - 4.0).abs() < 1e-12);
        assert_eq!(rv.r[0], 0.0);

        let extreme = GpsFit { coefficients: vec![8.0, 0.0, 0.0], ..half };
        assert!(matches!(
            compute_r(&panel, &cell22(), &extreme, &opts),
            Err(FirstStageError::OverlapViolation { unit: 1, .. })
        ));
        let drop = FirstStageOptions { trim_policy: TrimPolicy::Drop, ..opts };
        let rv = compute_r(&panel, &cell22(), &extreme, &drop).unwrap();
        assert_eq!(rv.trimmed, vec![1, 2]);
    }
}
