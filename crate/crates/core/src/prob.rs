//! Closed-form probability helpers shared by the differentiable likelihoods
//! and the integer CDF tables used for entropy coding.

use std::f64::consts::{FRAC_1_SQRT_2, LN_2};

/// Probability floor used for rate estimates: 2^-15, the smallest mass a
/// 16-bit table slot can carry with room to spare.
pub const P_FLOOR: f64 = 1.0 / 32768.0;

/// Lowest admissible scale after the softplus map.
pub const SIGMA_MIN: f64 = 1e-6;

/// Standard normal CDF via `erfc`, accurate in both tails.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

pub fn normal_pdf(x: f64) -> f64 {
    const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Mass of `N(0, sigma^2)` on `[d - 1/2, d + 1/2]`.
///
/// Evaluated on `|d|` so both CDF terms sit in the lower tail where `erfc`
/// keeps full relative precision.
pub fn gaussian_mass(d: f64, sigma: f64) -> f64 {
    let a = d.abs();
    normal_cdf((0.5 - a) / sigma) - normal_cdf((-0.5 - a) / sigma)
}

/// Partial derivatives of [`gaussian_mass`] with respect to `d` and `sigma`.
pub fn gaussian_mass_grad(d: f64, sigma: f64) -> (f64, f64) {
    let u = (d + 0.5) / sigma;
    let l = (d - 0.5) / sigma;
    let (pu, pl) = (normal_pdf(u), normal_pdf(l));
    ((pu - pl) / sigma, (l * pl - u * pu) / sigma)
}

/// Mass of `N(0, sigma^2)` below `x`.
pub fn gaussian_lower_tail(x: f64, sigma: f64) -> f64 {
    normal_cdf(x / sigma)
}

pub fn bits(p: f64) -> f64 {
    -p.log2()
}

pub fn bits_grad(p: f64) -> f64 {
    -1.0 / (p * LN_2)
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cdf_reference_points() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-16);
        // Φ(1.96) = 0.9750021048517795
        assert!((normal_cdf(1.96) - 0.975_002_104_851_779_5).abs() < 1e-12);
        assert!((normal_cdf(-8.0) - 6.220_960_574_271_785e-16).abs() < 1e-28);
    }

    #[test]
    fn mass_is_symmetric_and_gradient_matches_differences() {
        for &(d, s) in &[(0.3, 0.7), (-1.2, 2.0), (2.5, 0.4)] {
            assert!((gaussian_mass(d, s) - gaussian_mass(-d, s)).abs() < 1e-15);
            let (gd, gs) = gaussian_mass_grad(d, s);
            let h = 1e-6;
            let fd = (gaussian_mass(d + h, s) - gaussian_mass(d - h, s)) / (2.0 * h);
            let fs = (gaussian_mass(d, s + h) - gaussian_mass(d, s - h)) / (2.0 * h);
            assert!((gd - fd).abs() < 1e-8, "{gd} vs {fd}");
            assert!((gs - fs).abs() < 1e-8, "{gs} vs {fs}");
        }
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - LN_2).abs() < 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }
}
