//! Kernel density of the scalar covariate and its first derivative.

use log::warn;
use serde::Serialize;

use crate::local_poly::Kernel;

pub const DENSITY_FLOOR: f64 = 1e-10;

/// `(1/(n h)) Σ K((Z_i - z0)/h)`, not floored.
fn raw_kde(zs: &[f64], z0: f64, h: f64, kernel: Kernel) -> f64 {
    let r = kernel.radius() * h;
    let s: f64 = zs.iter().filter(|&&z| (z - z0).abs() <= r).map(|&z| kernel.eval((z - z0) / h)).sum();
    s / (zs.len() as f64 * h)
}

/// Kernel density estimate at `z0`, floored at [`DENSITY_FLOOR`].
pub fn kde(zs: &[f64], z0: f64, h: f64, kernel: Kernel) -> f64 {
    raw_kde(zs, z0, h, kernel).max(DENSITY_FLOOR)
}

/// Derivative of the kernel density estimate at `z0`.
pub fn kde_deriv(zs: &[f64], z0: f64, h: f64, kernel: Kernel) -> f64 {
    let r = kernel.radius() * h;
    let s: f64 = zs.iter().filter(|&&z| (z - z0).abs() <= r).map(|&z| kernel.deriv((z - z0) / h)).sum();
    -s / (zs.len() as f64 * h * h)
}

pub fn sample_sd(zs: &[f64]) -> f64 {
    let n = zs.len() as f64;
    let mean = zs.iter().sum::<f64>() / n;
    (zs.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// `1.06 sd(Z) n^{-1/5}`.
pub fn silverman_bandwidth(zs: &[f64]) -> f64 {
    1.06 * sample_sd(zs) * (zs.len() as f64).powf(-0.2)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityFit {
    pub h: f64,
    pub kernel: Kernel,
    pub grid: Vec<f64>,
    pub f: Vec<f64>,
    pub f_prime: Vec<f64>,
    /// Grid points where the floor replaced the raw estimate.
    pub floored: Vec<bool>,
}

impl DensityFit {
    /// Evaluates the density and its derivative on `grid` with the
    /// rule-of-thumb bandwidth.
    pub fn fit(zs: &[f64], grid: &[f64], kernel: Kernel) -> Self {
        Self::fit_with(zs, grid, silverman_bandwidth(zs), kernel)
    }

    pub fn fit_with(zs: &[f64], grid: &[f64], h: f64, kernel: Kernel) -> Self {
        let mut f = Vec::with_capacity(grid.len());
        let mut floored = Vec::with_capacity(grid.len());
        for &z in grid {
            let raw = raw_kde(zs, z, h, kernel);
            if raw < DENSITY_FLOOR {
                warn!("density estimate at z = {z} floored at {DENSITY_FLOOR}");
            }
            floored.push(raw < DENSITY_FLOOR);
            f.push(raw.max(DENSITY_FLOOR));
        }
        let f_prime = grid.iter().map(|&z| kde_deriv(zs, z, h, kernel)).collect();
        Self { h, kernel, grid: grid.to_vec(), f, f_prime, floored }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal_sample(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    #[test]
    fn single_point_and_symmetry() {
        let g = Kernel::Gaussian;
        assert!((kde(&[0.3], 0.3, 0.5, g) - 0.398_942_280_401_432_7 / 0.5).abs() < 1e-15);
        let two = kde(&[-1.0, 1.0], 0.0, 0.7, g);
        let avg = 0.5 * (g.eval(-1.0 / 0.7) + g.eval(1.0 / 0.7)) / 0.7;
        assert!((two - avg).abs() < 1e-15);
        assert_eq!(kde_deriv(&[-1.0, 1.0], 0.0, 0.7, g), 0.0);
        let s = [0.1, 0.5, 1.3];
        let m: Vec<f64> = s.iter().map(|z| -z).collect();
        assert!((kde_deriv(&s, 0.2, 0.4, g) + kde_deriv(&m, -0.2, 0.4, g)).abs() < 1e-15);
        assert_eq!(kde(&[0.0], 100.0, 0.1, g), DENSITY_FLOOR);
    }

    #[test]
    fn large_sample_matches_normal_density() {
        let zs = normal_sample(50_000, 3);
        let h = silverman_bandwidth(&zs);
        let phi0 = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        assert!((kde(&zs, 0.0, h, Kernel::Gaussian) - phi0).abs() < 0.02);
        let phi1 = phi0 * (-0.5f64).exp();
        assert!((kde_deriv(&zs, 1.0, h, Kernel::Gaussian) + phi1).abs() < 0.03);
    }

    #[test]
    fn integrates_to_one() {
        let zs = normal_sample(1000, 9);
        let grid: Vec<f64> = (0..=800).map(|i| -8.0 + i as f64 * 0.02).collect();
        let fit = DensityFit::fit(&zs, &grid, Kernel::Gaussian);
        let area: f64 = fit.f.windows(2).map(|w| 0.01 * (w[0] + w[1])).sum();
        assert!((area - 1.0).abs() < 0.01);
        assert!(fit.f.iter().all(|&v| v >= DENSITY_FLOOR));
    }
}
