//! Numerical self-check of the kernel constants and integral identities.

use rand::Rng;
use serde::Serialize;

use crate::env::stream_rng;
use crate::kernel::{horner, poly_kernel_integrals, KernelFamily, KernelMoments, KernelOrder, ScaledKernel};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub abs_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelfCheckReport {
    pub checks: Vec<Check>,
}

impl SelfCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.pass)
    }
}

/// Tolerance for constants and moments.
pub const CONSTANT_TOL: f64 = 1e-8;
/// Tolerance for polynomial kernel integrals.
pub const POLY_TOL: f64 = 1e-6;
const RANDOM_POLYNOMIALS: usize = 100;

/// Runs every check against the closed-form kernel constants.
pub fn kernel_selfcheck() -> SelfCheckReport {
    kernel_selfcheck_with(KernelFamily::moments)
}

/// Runs every check, taking the closed-form constants from `constants`.
pub fn kernel_selfcheck_with<F: Fn(KernelFamily) -> KernelMoments>(constants: F) -> SelfCheckReport {
    let mut checks = Vec::new();
    let mut push = |name: String, abs_error: f64, tolerance: f64| {
        checks.push(Check {
            name,
            abs_error,
            tolerance,
            pass: abs_error < tolerance,
        })
    };
    for family in KernelFamily::ALL {
        push(
            format!("{family}: integral of k"),
            (family.integrate_unit(|u| family.eval(u)) - 1.0).abs(),
            CONSTANT_TOL,
        );
        push(
            format!("{family}: first moment"),
            family.integrate_unit(|u| u * family.eval(u)).abs(),
            CONSTANT_TOL,
        );
        let exact = constants(family);
        let quad = family.quadrature_moments();
        push(format!("{family}: M2"), (exact.m2 - quad.m2).abs(), CONSTANT_TOL);
        push(format!("{family}: Omega2"), (exact.omega2 - quad.omega2).abs(), CONSTANT_TOL);
        push(
            format!("{family}: Omega2^(1)"),
            (exact.omega2_d1 - quad.omega2_d1).abs(),
            CONSTANT_TOL,
        );

        let mut rng = stream_rng(0x5E1F, family as u64);
        let mut worst_value = 0.0f64;
        let mut worst_deriv = 0.0f64;
        for _ in 0..RANDOM_POLYNOMIALS {
            let degree = rng.random_range(0..=6);
            let coeffs: Vec<f64> = (0..=degree).map(|_| rng.random_range(-2.0..2.0)).collect();
            let tau = rng.random_range(-1.5..1.5);
            let h = rng.random_range(0.05..1.0);
            let k = ScaledKernel::new(family, h).expect("positive bandwidth");
            let p = |a: f64| horner(&coeffs, a);
            let v = poly_kernel_integrals(&coeffs, tau, &k, KernelOrder::Value);
            let d = poly_kernel_integrals(&coeffs, tau, &k, KernelOrder::Derivative);
            worst_value = worst_value.max((v - k.integrate(p, tau)).abs());
            worst_deriv = worst_deriv.max((d - k.integrate_d1(p, tau)).abs());
        }
        push(format!("{family}: polynomial integrals (max of {RANDOM_POLYNOMIALS})"), worst_value, POLY_TOL);
        push(
            format!("{family}: polynomial derivative integrals (max of {RANDOM_POLYNOMIALS})"),
            worst_deriv,
            POLY_TOL,
        );
    }
    SelfCheckReport { checks }
}
