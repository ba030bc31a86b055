//! Scalar special functions and quadrature rules.
//!
//! Everything routes through `libm` so results are bitwise reproducible
//! across platforms and independent of the system math library.

use alloc::vec;
use alloc::vec::Vec;

pub const LN_2PI: f64 = 1.837877066409345483560659472811;
pub const SQRT_PI: f64 = 1.7724538509055160272981674833411;

pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

pub fn erfc(x: f64) -> f64 {
    libm::erfc(x)
}

/// Standard normal CDF Φ(x).
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * core::f64::consts::FRAC_1_SQRT_2)
}

/// Standard normal density φ(x).
pub fn norm_pdf(x: f64) -> f64 {
    libm::exp(-0.5 * x * x - 0.5 * LN_2PI)
}

/// log Φ(x), stable far into the left tail.
///
/// Below the switch point `erfc` underflows, so the asymptotic expansion
/// Φ(x) ≈ φ(x)/(−x)·(1 − x⁻² + 3x⁻⁴ − 15x⁻⁶ + 105x⁻⁸) takes over.
pub fn log_norm_cdf(x: f64) -> f64 {
    if x > -20.0 {
        libm::log(norm_cdf(x))
    } else {
        let r = 1.0 / (x * x);
        let series = 1.0 + r * (-1.0 + r * (3.0 + r * (-15.0 + r * 105.0)));
        -0.5 * x * x - libm::log(-x) - 0.5 * LN_2PI + libm::log(series)
    }
}

/// φ(x)/Φ(x), the derivative of `log_norm_cdf`; stable in the left tail.
pub fn norm_pdf_over_cdf(x: f64) -> f64 {
    if x > -20.0 {
        norm_pdf(x) / norm_cdf(x)
    } else {
        let r = 1.0 / (x * x);
        let series = 1.0 + r * (-1.0 + r * (3.0 + r * (-15.0 + r * 105.0)));
        -x / series
    }
}

/// Gauss–Hermite nodes and weights for ∫ e^{−x²} f(x) dx ≈ Σᵢ wᵢ f(xᵢ).
///
/// Newton iteration on the orthonormal Hermite recurrence; nodes ascend.
/// The expectation of f under N(μ, σ²) is (1/√π)·Σᵢ wᵢ f(μ + √2·σ·xᵢ).
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "quadrature order must be at least 1");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = (n + 1) / 2;
    let nf = n as f64;
    let mut z = 0.0f64;
    for i in 0..m {
        // Initial guesses from Numerical Recipes' gauher.
        z = match i {
            0 => libm::sqrt(2.0 * nf + 1.0) - 1.85575 * libm::pow(2.0 * nf + 1.0, -1.0 / 6.0),
            1 => z - 1.14 * libm::pow(nf, 0.426) / z,
            2 => 1.86 * z - 0.86 * nodes[n - 1],
            3 => 1.91 * z - 0.91 * nodes[n - 2],
            _ => 2.0 * z - nodes[n - i + 1],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            // Orthonormal recurrence: p₀ = π^{-1/4}.
            let mut p1 = libm::pow(core::f64::consts::PI, -0.25);
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * libm::sqrt(2.0 / (jf + 1.0)) * p2 - libm::sqrt(jf / (jf + 1.0)) * p3;
            }
            pp = libm::sqrt(2.0 * nf) * p2;
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        nodes[n - 1 - i] = z;
        nodes[i] = -z;
        weights[n - 1 - i] = 2.0 / (pp * pp);
        weights[i] = weights[n - 1 - i];
    }
    (nodes, weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn norm_cdf_reference_points() {
        assert!((norm_cdf(0.0) - 0.5).abs() < 1e-15);
        // Φ(2) from the standard normal table.
        assert!((norm_cdf(2.0) - 0.9772498680518208).abs() < 1e-12);
        assert!((norm_cdf(-1.0) - 0.15865525393145707).abs() < 1e-12);
    }

    #[test]
    fn log_norm_cdf_matches_direct_in_bulk() {
        for &x in &[-5.0, -1.0, 0.0, 0.5, 3.0] {
            assert!((log_norm_cdf(x) - norm_cdf(x).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn log_norm_cdf_tail_is_finite_and_smooth() {
        // Continuity across the switch point.
        let a = log_norm_cdf(-19.999999);
        let b = log_norm_cdf(-20.000001);
        assert!((a - b).abs() < 1e-4 * a.abs());
        assert!(log_norm_cdf(-300.0).is_finite());
        // Ratio stays close to -x for strongly negative x.
        assert!((norm_pdf_over_cdf(-50.0) - 50.02) .abs() < 0.01);
    }

    #[test]
    fn gauss_hermite_moments() {
        // Σw = √π, Σw·x² = √π/2, Σw·x⁴ = 3√π/4 — exact for n ≥ 3.
        for &n in &[1usize, 3, 5, 20, 40] {
            let (x, w) = gauss_hermite(n);
            let s0: f64 = w.iter().sum();
            assert!((s0 - SQRT_PI).abs() < 1e-12 * SQRT_PI, "n={n} s0={s0}");
            if n >= 2 {
                let s2: f64 = x.iter().zip(&w).map(|(&xi, &wi)| wi * xi * xi).sum();
                assert!((s2 - SQRT_PI / 2.0).abs() < 1e-11, "n={n} s2={s2}");
            }
            if n >= 3 {
                let s4: f64 = x.iter().zip(&w).map(|(&xi, &wi)| wi * xi.powi(4)).sum();
                assert!((s4 - 0.75 * SQRT_PI).abs() < 1e-10, "n={n} s4={s4}");
            }
        }
    }

    #[test]
    fn gauss_hermite_nodes_symmetric_ascending() {
        let (x, _) = gauss_hermite(21);
        for i in 1..x.len() {
            assert!(x[i] > x[i - 1]);
        }
        for i in 0..x.len() {
            assert!((x[i] + x[x.len() - 1 - i]).abs() < 1e-12);
        }
    }
}
