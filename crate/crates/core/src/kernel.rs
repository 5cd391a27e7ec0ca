//! Second-order smoothing kernels `k`, their scaled forms `K_h(u) = k(u/h)/h`
//! and `K_h^(1)(u) = -k'(u/h)/h^2`, roughness constants, and integrals of
//! polynomials against scaled kernels.
//!
//! The sign convention for `K_h^(1)` makes it the derivative of `K_h(a - tau)`
//! with respect to `tau`, so that
//! `∫ p(a) K_h^(1)(a - tau) da = d/dtau ∫ p(a) K_h(a - tau) da`.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;

use crate::error::{Error, Result};
use crate::quadrature;

/// Tolerance used by the quadrature fallback.
pub const QUAD_TOL: f64 = 1e-13;

/// Half-width, in units of `h`, of the window used to integrate against the
/// Gaussian kernel. Mass outside is below `1e-62`.
const GAUSSIAN_WINDOW: f64 = 12.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    /// `k(u) = exp(-u^2) / sqrt(pi)`
    Gaussian,
    /// `k(u) = 15/16 (1 - u^2)^2` on `[-1, 1]`
    Biweight,
    /// `k(u) = 35/32 (1 - u^2)^3` on `[-1, 1]`
    Triweight,
}

impl KernelFamily {
    pub const ALL: [KernelFamily; 3] = [Self::Gaussian, Self::Biweight, Self::Triweight];

    pub fn eval(self, u: f64) -> f64 {
        match self {
            Self::Gaussian => (-u * u).exp() / PI.sqrt(),
            Self::Biweight => {
                let v = 1.0 - u * u;
                if v <= 0.0 {
                    0.0
                } else {
                    15.0 / 16.0 * v * v
                }
            }
            Self::Triweight => {
                let v = 1.0 - u * u;
                if v <= 0.0 {
                    0.0
                } else {
                    35.0 / 32.0 * v * v * v
                }
            }
        }
    }

    /// First derivative `k'(u)`.
    pub fn eval_d1(self, u: f64) -> f64 {
        match self {
            Self::Gaussian => -2.0 * u * (-u * u).exp() / PI.sqrt(),
            Self::Biweight => {
                let v = 1.0 - u * u;
                if v <= 0.0 {
                    0.0
                } else {
                    -15.0 / 4.0 * u * v
                }
            }
            Self::Triweight => {
                let v = 1.0 - u * u;
                if v <= 0.0 {
                    0.0
                } else {
                    -105.0 / 16.0 * u * v * v
                }
            }
        }
    }

    /// Half-width of the support, `None` for unbounded support.
    pub fn support(self) -> Option<f64> {
        match self {
            Self::Gaussian => None,
            Self::Biweight | Self::Triweight => Some(1.0),
        }
    }

    fn window(self) -> f64 {
        self.support().unwrap_or(GAUSSIAN_WINDOW)
    }

    /// Closed-form `M2`, `Omega2` and `Omega2^(1)`.
    pub fn moments(self) -> KernelMoments {
        match self {
            Self::Gaussian => {
                let r = 1.0 / (2.0 * PI).sqrt();
                KernelMoments {
                    m2: 0.5,
                    omega2: r,
                    omega2_d1: r,
                }
            }
            Self::Biweight => KernelMoments {
                m2: 1.0 / 7.0,
                omega2: 5.0 / 7.0,
                omega2_d1: 15.0 / 7.0,
            },
            Self::Triweight => KernelMoments {
                m2: 1.0 / 9.0,
                omega2: 350.0 / 429.0,
                omega2_d1: 35.0 / 11.0,
            },
        }
    }

    /// The same constants by adaptive quadrature.
    pub fn quadrature_moments(self) -> KernelMoments {
        KernelMoments {
            m2: self.integrate_unit(|u| u * u * self.eval(u)),
            omega2: self.integrate_unit(|u| self.eval(u).powi(2)),
            omega2_d1: self.integrate_unit(|u| self.eval_d1(u).powi(2)),
        }
    }

    /// Integrates `f` over the unit-scale support of the kernel, split at 0.
    pub fn integrate_unit<F: Fn(f64) -> f64>(self, f: F) -> f64 {
        let w = self.window();
        quadrature::integrate_pieces(f, &[-w, 0.0, w], QUAD_TOL).value
    }
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Gaussian => "gaussian",
            Self::Biweight => "biweight",
            Self::Triweight => "triweight",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelMoments {
    pub m2: f64,
    pub omega2: f64,
    pub omega2_d1: f64,
}

/// A kernel family together with a validated bandwidth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaledKernel {
    family: KernelFamily,
    h: f64,
}

impl ScaledKernel {
    pub fn new(family: KernelFamily, h: f64) -> Result<Self> {
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::NonPositiveBandwidth(h));
        }
        Ok(Self { family, h })
    }

    pub fn gaussian(h: f64) -> Result<Self> {
        Self::new(KernelFamily::Gaussian, h)
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    /// `K_h(u)`.
    #[inline]
    pub fn eval(&self, u: f64) -> f64 {
        self.family.eval(u / self.h) / self.h
    }

    /// `K_h^(1)(u) = -k'(u/h) / h^2`.
    #[inline]
    pub fn eval_d1(&self, u: f64) -> f64 {
        -self.family.eval_d1(u / self.h) / (self.h * self.h)
    }

    /// `∫ u^2 K_h(u) du`.
    pub fn second_moment(&self) -> f64 {
        self.family.moments().m2 * self.h * self.h
    }

    /// Interval outside which `K_h(a - center)` is zero or negligible.
    pub fn window(&self, center: f64) -> (f64, f64) {
        let w = self.family.window() * self.h;
        (center - w, center + w)
    }

    /// Integrates `f(a) K_h(a - center)` by quadrature.
    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F, center: f64) -> f64 {
        let (lo, hi) = self.window(center);
        quadrature::integrate_pieces(|a| f(a) * self.eval(a - center), &[lo, center, hi], QUAD_TOL)
            .value
    }

    /// Integrates `f(a) K_h^(1)(a - center)` by quadrature.
    pub fn integrate_d1<F: Fn(f64) -> f64>(&self, f: F, center: f64) -> f64 {
        let (lo, hi) = self.window(center);
        quadrature::integrate_pieces(
            |a| f(a) * self.eval_d1(a - center),
            &[lo, center, hi],
            QUAD_TOL,
        )
        .value
    }
}

/// `K_h(u)` for a family and bandwidth.
pub fn kh(family: KernelFamily, h: f64, u: f64) -> Result<f64> {
    Ok(ScaledKernel::new(family, h)?.eval(u))
}

/// `K_h^(1)(u)` for a family and bandwidth.
pub fn kh1(family: KernelFamily, h: f64, u: f64) -> Result<f64> {
    Ok(ScaledKernel::new(family, h)?.eval_d1(u))
}

/// `(M2, Omega2, Omega2^(1))` of a family.
pub fn kernel_moments(family: KernelFamily) -> KernelMoments {
    family.moments()
}

/// Which kernel a polynomial is integrated against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelOrder {
    /// `∫ p(a) K_h(a - tau) da`
    Value,
    /// `∫ p(a) K_h^(1)(a - tau) da`
    Derivative,
}

/// Even moment `int u^(2m) k(u) du` of the unit-scale kernel.
pub fn unit_moment(family: KernelFamily, two_m: usize) -> f64 {
    debug_assert!(two_m.is_multiple_of(2));
    let m = two_m as f64;
    // int_{-1}^{1} u^(2m) (1 - u^2)^p du as a finite alternating sum
    let compact = |p: u32, c: f64| {
        let mut total = 0.0;
        let mut binom = 1.0;
        for i in 0..=p {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            total += sign * binom * 2.0 / (m + 2.0 * i as f64 + 1.0);
            binom = binom * (p - i) as f64 / (i + 1) as f64;
        }
        c * total
    };
    match family {
        // (2m - 1)!! / 2^m
        KernelFamily::Gaussian => (1..=two_m / 2).map(|i| (2 * i - 1) as f64 / 2.0).product(),
        KernelFamily::Biweight => compact(2, 15.0 / 16.0),
        KernelFamily::Triweight => compact(3, 35.0 / 32.0),
    }
}

/// Integrates `p(a) = sum_j coeffs[j] a^j` against `K_h(a - tau)` or
/// `K_h^(1)(a - tau)` in closed form.
///
/// The value order expands `int p(tau + h u) k(u) du` binomially against the
/// unit kernel moments; the derivative order is the same expansion applied to
/// `p'`, since it equals the `tau`-derivative of the value order.
pub fn poly_kernel_integrals(coeffs: &[f64], tau: f64, kernel: &ScaledKernel, order: KernelOrder) -> f64 {
    match order {
        KernelOrder::Value => poly_smooth(coeffs.iter().copied(), tau, kernel),
        KernelOrder::Derivative => poly_smooth(
            coeffs.iter().enumerate().skip(1).map(|(j, c)| j as f64 * c),
            tau,
            kernel,
        ),
    }
}

fn poly_smooth<I: Iterator<Item = f64>>(coeffs: I, tau: f64, kernel: &ScaledKernel) -> f64 {
    if kernel.family == KernelFamily::Gaussian {
        return gaussian_expectation(coeffs, tau, 0.5 * kernel.h * kernel.h);
    }
    let coeffs: Vec<f64> = coeffs.collect();
    let mut total = 0.0;
    let mut binom = vec![1.0f64];
    for (j, &c) in coeffs.iter().enumerate() {
        if j > 0 {
            let mut next = vec![1.0; j + 1];
            for i in 1..j {
                next[i] = binom[i - 1] + binom[i];
            }
            binom = next;
        }
        if c == 0.0 {
            continue;
        }
        // E[(tau + h U)^j] with only even powers of U surviving
        let mut moment = 0.0;
        for i in (0..=j).step_by(2) {
            moment += binom[i] * tau.powi((j - i) as i32) * kernel.h.powi(i as i32) * unit_moment(kernel.family, i);
        }
        total += c * moment;
    }
    total
}

fn gaussian_expectation<I: Iterator<Item = f64>>(coeffs: I, mean: f64, var: f64) -> f64 {
    // prev2 = E[A^(j-2)], prev = E[A^(j-1)]
    let mut prev2 = 0.0;
    let mut prev = 1.0;
    let mut total = 0.0;
    for (j, c) in coeffs.enumerate() {
        let moment = if j == 0 {
            1.0
        } else {
            let m = mean * prev + (j as f64 - 1.0) * var * prev2;
            prev2 = prev;
            prev = m;
            m
        };
        total += c * moment;
    }
    total
}

/// Evaluates `sum_j coeffs[j] x^j`.
pub fn horner(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn quad_over_r<F: Fn(f64) -> f64>(f: F, family: KernelFamily, h: f64) -> f64 {
        let w = family.window() * h;
        quadrature::integrate_pieces(f, &[-w, 0.0, w], 1e-14).value
    }

    #[test]
    fn gaussian_peak() {
        let v = kh(KernelFamily::Gaussian, 1.0, 0.0).unwrap();
        assert!((v - 1.0 / PI.sqrt()).abs() < 1e-15);
        assert!((v - 0.5642).abs() < 1e-4);
    }

    #[test]
    fn compact_support_vanishes() {
        for h in [0.1, 0.5, 2.0] {
            assert_eq!(kh(KernelFamily::Biweight, h, 2.0 * h).unwrap(), 0.0);
            assert_eq!(kh(KernelFamily::Triweight, h, -2.0 * h).unwrap(), 0.0);
        }
    }

    #[test]
    fn bandwidth_must_be_positive() {
        assert!(matches!(
            kh(KernelFamily::Gaussian, 0.0, 1.0),
            Err(Error::NonPositiveBandwidth(_))
        ));
        assert!(kh1(KernelFamily::Biweight, -1.0, 0.0).is_err());
        assert!(ScaledKernel::gaussian(f64::NAN).is_err());
    }

    #[test]
    fn scaled_kernels_integrate_to_one() {
        for family in KernelFamily::ALL {
            for h in [0.05, 0.5] {
                let k = ScaledKernel::new(family, h).unwrap();
                let mass = quad_over_r(|u| k.eval(u), family, h);
                let first = quad_over_r(|u| u * k.eval(u), family, h);
                assert!((mass - 1.0).abs() < 1e-8, "{family} h={h}: {mass}");
                assert!(first.abs() < 1e-8);
            }
        }
    }

    #[test]
    fn derivative_vanishes_at_zero_and_matches_fd() {
        for family in KernelFamily::ALL {
            assert_eq!(kh1(family, 0.3, 0.0).unwrap(), 0.0);
        }
        let k = ScaledKernel::gaussian(1.0).unwrap();
        let u = 0.5;
        let step = 1e-5;
        let fd = -(k.eval(u + step) - k.eval(u - step)) / (2.0 * step);
        assert!((k.eval_d1(u) - fd).abs() < 1e-6);
    }

    #[test]
    fn analytic_moments_match_quadrature() {
        for family in KernelFamily::ALL {
            let a = family.moments();
            let q = family.quadrature_moments();
            assert!((a.m2 - q.m2).abs() < 1e-10, "{family} m2");
            assert!((a.omega2 - q.omega2).abs() < 1e-10, "{family} omega2");
            assert!((a.omega2_d1 - q.omega2_d1).abs() < 1e-10, "{family} omega2_d1");
        }
        let g = KernelFamily::Gaussian.moments();
        assert_eq!(g.m2, 0.5);
        assert!((g.omega2 - 1.0 / (2.0 * PI).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn constant_and_square_polynomials() {
        let k = ScaledKernel::gaussian(1.0).unwrap();
        let one = poly_kernel_integrals(&[1.0], 0.7, &k, KernelOrder::Value);
        let one_d = poly_kernel_integrals(&[1.0], 0.7, &k, KernelOrder::Derivative);
        assert_eq!(one, 1.0);
        assert_eq!(one_d, 0.0);
        let sq = poly_kernel_integrals(&[0.0, 0.0, 1.0], 0.0, &k, KernelOrder::Value);
        assert!((sq - 0.5).abs() < 1e-15);
    }

    #[test]
    fn compact_square_is_tau_squared_plus_second_moment() {
        let k = ScaledKernel::new(KernelFamily::Biweight, 0.4).unwrap();
        let r = poly_kernel_integrals(&[0.0, 0.0, 1.0], 0.2, &k, KernelOrder::Value);
        assert!((r - (0.04 + 0.16 / 7.0)).abs() < 1e-14);
    }

    #[test]
    fn unit_moments_match_quadrature() {
        for family in KernelFamily::ALL {
            for two_m in [0, 2, 4, 6, 8] {
                let quad = family.integrate_unit(|u| u.powi(two_m as i32) * family.eval(u));
                assert!((unit_moment(family, two_m) - quad).abs() < 1e-11, "{family} {two_m}");
            }
        }
    }

    #[test]
    fn random_quintic_matches_quadrature() {
        let c = [0.3, -1.2, 0.7, 2.1, -0.4, 0.25];
        let tau = 0.3;
        let p = |a: f64| horner(&c, a);
        for family in KernelFamily::ALL {
            let k = ScaledKernel::new(family, 0.35).unwrap();
            let exact = poly_kernel_integrals(&c, tau, &k, KernelOrder::Value);
            assert!((exact - k.integrate(p, tau)).abs() < 1e-10, "{family}");
            let exact_d = poly_kernel_integrals(&c, tau, &k, KernelOrder::Derivative);
            assert!((exact_d - k.integrate_d1(p, tau)).abs() < 1e-9, "{family}");
        }
    }

    proptest! {
        #[test]
        fn kh1_is_odd(u in -3.0f64..3.0, h in 0.05f64..2.0) {
            for family in KernelFamily::ALL {
                let k = ScaledKernel::new(family, h).unwrap();
                prop_assert!((k.eval_d1(u) + k.eval_d1(-u)).abs() <= 1e-12 * (1.0 + k.eval_d1(u).abs()));
            }
        }

        #[test]
        fn scaling_identity(u in -3.0f64..3.0, h in 0.01f64..5.0) {
            for family in KernelFamily::ALL {
                let scaled = kh(family, h, u).unwrap();
                let unit = kh(family, 1.0, u / h).unwrap() / h;
                prop_assert_eq!(scaled, unit);
            }
        }

        #[test]
        fn derivative_integral_is_tau_derivative(
            c in proptest::collection::vec(-2.0f64..2.0, 1..6),
            tau in -1.0f64..1.0,
            h in 0.1f64..1.0,
        ) {
            let k = ScaledKernel::gaussian(h).unwrap();
            let d = 1e-4;
            let up = poly_kernel_integrals(&c, tau + d, &k, KernelOrder::Value);
            let dn = poly_kernel_integrals(&c, tau - d, &k, KernelOrder::Value);
            let fd = (up - dn) / (2.0 * d);
            let exact = poly_kernel_integrals(&c, tau, &k, KernelOrder::Derivative);
            prop_assert!((fd - exact).abs() < 1e-6);
        }
    }
}
