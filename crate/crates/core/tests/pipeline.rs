use catt_core::band::{Scope, WeightKind};
use catt_core::bandwidth::{imse_bandwidth, select_bandwidth, undersmoothed_bandwidths, zeta};
use catt_core::catt::CellSample;
use catt_core::first_stage::{fit_or, outcome_difference, run_first_stage, FirstStageOptions};
use catt_core::local_poly::Kernel;
use catt_core::panel::{ControlMode, GroupTimeCell, PanelData};
use catt_core::pipeline::{bandwidths, estimate, estimate_discrete, BandMethod, BandwidthChoice, EstimatorSettings, GridSpec};
use catt_core::rng;
use catt_core::simulation::{simulate_panel, true_catt, CovariateKind, SimConfig};

fn panel(n: usize, periods: usize, seed: u64) -> PanelData {
    let cfg = SimConfig::new(n, periods, CovariateKind::ContinuousNormal, seed);
    simulate_panel(&cfg, &mut rng::stream(seed, 0))
}

fn cell(g: usize, t: usize) -> GroupTimeCell {
    GroupTimeCell { g, t, delta: 0, mode: ControlMode::NeverTreated }
}

fn with_outcomes(p: &PanelData, f: impl Fn(usize, usize, f64) -> f64) -> PanelData {
    let mut y = Vec::new();
    for i in 0..p.n_units() {
        for t in 1..=p.n_periods() {
            y.push(f(i, t, p.y(i, t)));
        }
    }
    let x: Vec<f64> = (0..p.n_units()).flat_map(|i| p.x_sub(i).to_vec()).collect();
    PanelData::new(
        p.unit_ids().to_vec(),
        p.period_labels().to_vec(),
        y,
        p.groups().to_vec(),
        p.z().to_vec(),
        x,
        p.x_names().to_vec(),
    )
    .unwrap()
}

#[test]
fn every_cell_gets_a_band_around_its_estimate() {
    let p = panel(2000, 4, 11);
    let s = EstimatorSettings { boot_reps: 200, ..Default::default() };
    let est = estimate(&p, &s).unwrap();
    assert!(est.failures.is_empty(), "{:?}", est.failures);
    assert_eq!(est.results.len(), 6);
    for r in &est.results {
        let b = r.band.as_ref().unwrap();
        assert!(b.critical.value > 1.96 && b.critical.value < 5.0, "{}", b.critical.value);
        for k in 0..b.grid.len() {
            assert!(b.lower[k] < b.estimate[k] && b.estimate[k] < b.upper[k]);
            assert!(r.curve.sigma2[k] <= 0.0 || r.curve.se[k] > 0.0);
        }
        let bw = r.bandwidth.as_ref().unwrap();
        assert_eq!(r.curve.spec.h, bw.h2);
    }
}

#[test]
fn joint_scope_shares_one_critical_value() {
    let p = panel(1500, 3, 12);
    let s = EstimatorSettings {
        boot_reps: 200,
        scope: Scope::JointGtz,
        bandwidth: BandwidthChoice::Fixed(0.35),
        ..Default::default()
    };
    let est = estimate(&p, &s).unwrap();
    let joint = est.joint_critical.as_ref().unwrap();
    // same weight draws per replication, so the joint sup dominates each cell's
    let z_only = estimate(&p, &EstimatorSettings { scope: Scope::ZOnly, ..s.clone() }).unwrap();
    for (r, rz) in est.results.iter().zip(&z_only.results) {
        let b = r.band.as_ref().unwrap();
        assert_eq!(b.critical.value, joint.value);
        assert!(joint.value >= rz.band.as_ref().unwrap().critical.value - 1e-12);
    }
}

#[test]
fn analytic_and_gumbel_bands_with_local_linear_fits() {
    // the analytic constant needs h well below a quarter of the grid length
    let p = panel(8000, 4, 13);
    for band in [BandMethod::Analytic, BandMethod::Gumbel] {
        let s = EstimatorSettings {
            p: 1,
            band,
            cells: Some(vec![(2, 2)]),
            grid: GridSpec::Interval { a: -1.0, b: 1.0, points: 21 },
            ..Default::default()
        };
        let est = estimate(&p, &s).unwrap();
        let r = &est.results[0];
        let b = r.band.as_ref().unwrap();
        assert!(b.critical.a_n.unwrap() > 0.0);
        assert!(b.critical.value > 2.0 && b.critical.value < 4.5);
        assert_eq!(r.curve.spec.h, r.bandwidth.as_ref().unwrap().h1);
    }
}

#[test]
fn level_and_trend_shifts_leave_the_estimate_unchanged() {
    let p = panel(1500, 3, 14);
    let s = EstimatorSettings {
        band: BandMethod::None,
        bandwidth: BandwidthChoice::Fixed(0.4),
        grid: GridSpec::Interval { a: -1.0, b: 1.0, points: 11 },
        ..Default::default()
    };
    let base = estimate(&p, &s).unwrap();
    for shifted in [with_outcomes(&p, |_, _, y| y + 7.5), with_outcomes(&p, |_, t, y| y - 2.0 * t as f64)] {
        let e = estimate(&shifted, &s).unwrap();
        for (a, b) in base.results.iter().zip(&e.results) {
            for (x, y) in a.curve.estimate.iter().zip(&b.curve.estimate) {
                assert!((x - y).abs() < 1e-8 * (1.0 + x.abs()), "{x} vs {y}");
            }
        }
    }
}

#[test]
fn control_modes_coincide_when_only_never_treated_units_can_serve() {
    // two periods: the only cohort is g = 2, so no unit is not-yet-treated at t = 2
    let p = panel(1200, 2, 15);
    let s = EstimatorSettings { boot_reps: 100, ..Default::default() };
    let never = estimate(&p, &s).unwrap();
    let notyet = estimate(&p, &EstimatorSettings { mode: ControlMode::NotYetTreated, ..s }).unwrap();
    assert_eq!(never.results.len(), 1);
    let (a, b) = (&never.results[0], &notyet.results[0]);
    assert_eq!(a.curve.estimate, b.curve.estimate);
    assert_eq!(a.curve.se, b.curve.se);
    assert_eq!(a.band.as_ref().unwrap().critical.value, b.band.as_ref().unwrap().critical.value);
}

#[test]
fn outcome_regression_residuals_are_orthogonal_to_the_design() {
    let cfg = SimConfig { confounder: true, ..SimConfig::new(3000, 4, CovariateKind::ContinuousNormal, 16) };
    let p = simulate_panel(&cfg, &mut rng::stream(16, 0));
    let c = cell(3, 4);
    let fit = fit_or(&p, &c, &FirstStageOptions::default()).unwrap();
    let dy = outcome_difference(&p, &c);
    let mut score = [0.0; 4];
    let mut n = 0.0;
    for i in 0..p.n_units() {
        if !c.is_control(p.group(i)) {
            continue;
        }
        let x = p.x_sub(i);
        let row = [1.0, p.z()[i], x[0], x[1]];
        let fitted: f64 = row.iter().zip(&fit.coefficients).map(|(a, b)| a * b).sum();
        for (s, r) in score.iter_mut().zip(row) {
            *s += r * (dy[i] - fitted);
        }
        n += 1.0;
    }
    for s in score {
        assert!((s / n).abs() < 1e-8, "{s}");
    }
}

#[test]
fn odds_ratios_are_nonnegative_and_vanish_off_the_controls() {
    for seed in 0..5 {
        let p = panel(800, 4, 100 + seed);
        for c in [cell(2, 2), cell(3, 4), GroupTimeCell { mode: ControlMode::NotYetTreated, ..cell(2, 3) }] {
            let fs = run_first_stage(&p, &c, &FirstStageOptions::default()).unwrap();
            for i in 0..p.n_units() {
                assert!(fs.r[i] >= 0.0);
                if !c.is_control(p.group(i)) {
                    assert_eq!(fs.r[i], 0.0);
                }
            }
        }
    }
}

#[test]
fn bandwidths_ignore_grid_order_and_respect_the_rate_corridor() {
    let p = panel(2000, 3, 17);
    let c = cell(2, 2);
    let fs = run_first_stage(&p, &c, &FirstStageOptions::default()).unwrap();
    let sample = CellSample::new(&p, &c, &fs).unwrap();
    let grid: Vec<f64> = (0..21).map(|k| -1.0 + 0.1 * k as f64).collect();
    let mut shuffled = grid.clone();
    shuffled.reverse();
    shuffled.swap(3, 15);
    let m = Kernel::Gaussian.moments();
    let a = select_bandwidth(&sample, &grid, Kernel::Gaussian, &m).unwrap();
    let b = select_bandwidth(&sample, &shuffled, Kernel::Gaussian, &m).unwrap();
    assert!((a.h_imse_p1 - b.h_imse_p1).abs() < 1e-12 * a.h_imse_p1);

    // exponents of n in h1 and h2 against the admissible corridor
    let rate = |p: usize, n: usize| {
        let h = imse_bandwidth(1, 2.0, 0.5, n).unwrap();
        let (h1, h2) = undersmoothed_bandwidths(h, n);
        if p == 1 { h1 } else { h2 }
    };
    for p_ord in [1, 2] {
        let e = (rate(p_ord, 20_000) / rate(p_ord, 10_000)).ln() / 2f64.ln();
        let upper = -1.0 / (2.0 * zeta(p_ord) + 1.0);
        assert!(e > -0.5 && e < upper, "p={p_ord}: exponent {e}, corridor (-1/2, {upper})");
    }
}

#[test]
fn bootstrap_bands_do_not_depend_on_the_thread_count() {
    let p = panel(1500, 3, 18);
    let s = EstimatorSettings { boot_reps: 300, weights: WeightKind::Normal, ..Default::default() };
    let run = |k: usize| rayon::ThreadPoolBuilder::new().num_threads(k).build().unwrap().install(|| estimate(&p, &s).unwrap());
    let one = run(1);
    assert_eq!(one, run(3));
    assert_eq!(one, run(8));
    let (r1, f1) = bandwidths(&p, &s).unwrap();
    assert!(f1.is_empty());
    for (r, res) in r1.iter().zip(&one.results) {
        assert_eq!(Some(r), res.bandwidth.as_ref());
    }
}

#[test]
fn discrete_estimates_track_the_truth() {
    let cfg = SimConfig::new(20_000, 4, CovariateKind::DiscreteUniform3, 19);
    let p = simulate_panel(&cfg, &mut rng::stream(19, 0));
    let s = EstimatorSettings { boot_reps: 499, cells: Some(vec![(2, 2), (3, 4)]), ..Default::default() };
    let est = estimate_discrete(&p, &s).unwrap();
    assert_eq!(est.bands.len(), 2);
    for b in &est.bands {
        assert_eq!(b.support, vec![-1.0, 0.0, 1.0]);
        for k in 0..3 {
            let truth = true_catt(&cfg, b.cell.g, b.cell.t, b.support[k]);
            assert!((b.estimate[k] - truth).abs() < 4.0 * b.se_tilde[k], "{} vs {truth}", b.estimate[k]);
        }
    }
}

#[test]
fn analytic_and_bootstrap_critical_values_are_comparable() {
    let p = panel(2000, 4, 20);
    let grid = GridSpec::Interval { a: -1.0, b: 1.0, points: 21 };
    let base = EstimatorSettings { p: 1, cells: Some(vec![(2, 2)]), grid, boot_reps: 500, ..Default::default() };
    let boot = estimate(&p, &base).unwrap().results[0].band.clone().unwrap().critical.value;
    let analytic =
        estimate(&p, &EstimatorSettings { band: BandMethod::Analytic, ..base }).unwrap().results[0].band.clone().unwrap().critical.value;
    let gap = (analytic - boot).abs() / boot;
    println!("analytic {analytic:.3}, bootstrap {boot:.3}, relative gap {gap:.2}");
    assert!(analytic.is_finite() && boot.is_finite());
}
