//! Interfaces between fitted (or known) nuisance functions and the estimators.
//!
//! Time indices are 0-based throughout the library: step `t` in `0..H`.

use serde::{Deserialize, Serialize};

use crate::env::BehaviorModel;
use crate::kernel::ScaledKernel;

/// A function of `(s, a)` together with the pieces the estimators need:
/// its action derivative and its kernel-weighted integrals over actions.
pub trait ActionValue: Send + Sync {
    fn value(&self, s: f64, a: f64) -> f64;

    fn d_action(&self, s: f64, a: f64) -> f64;

    /// `int f(s, a) K_h(a - center) da`
    fn smooth(&self, s: f64, center: f64, kernel: &ScaledKernel) -> f64 {
        kernel.integrate(|a| self.value(s, a), center)
    }

    /// `int f(s, a) K'_h(a - center) da`, the derivative of [`smooth`] in
    /// `center`.
    ///
    /// [`smooth`]: ActionValue::smooth
    fn smooth_d1(&self, s: f64, center: f64, kernel: &ScaledKernel) -> f64 {
        kernel.integrate_d1(|a| self.value(s, a), center)
    }
}

pub trait ConditionalDensity: Send + Sync {
    fn density(&self, s: f64, a: f64) -> f64;
    fn d_action(&self, s: f64, a: f64) -> f64;
}

impl ConditionalDensity for BehaviorModel {
    fn density(&self, s: f64, a: f64) -> f64 {
        BehaviorModel::density(self, s, a)
    }

    fn d_action(&self, s: f64, a: f64) -> f64 {
        self.density_d_action(s, a)
    }
}

/// Which target the q-functions describe: the kernel-smoothed policy or the
/// deterministic policy itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NuisanceMode {
    Kernel,
    Deterministic,
}

impl NuisanceMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Kernel => "kernel",
            Self::Deterministic => "deterministic",
        }
    }
}

/// A full set of per-step nuisance functions for one horizon.
///
/// `w` and `dw` are marginal state density ratios and their theta-gradients;
/// `dq` holds the theta-gradients of the q-functions. Models that do not
/// provide an item return `None`.
pub trait NuisanceModels: Sync {
    fn horizon(&self) -> usize;

    fn mode(&self) -> NuisanceMode;

    fn q(&self, t: usize) -> &dyn ActionValue;

    fn behavior(&self) -> &dyn ConditionalDensity;

    /// Dimension of theta covered by `dq`/`dw`, zero when absent.
    fn dim(&self) -> usize {
        0
    }

    fn dq(&self, _t: usize, _i: usize) -> Option<&dyn ActionValue> {
        None
    }

    fn w(&self, _t: usize, _s: f64) -> Option<f64> {
        None
    }

    fn dw(&self, _t: usize, _i: usize, _s: f64) -> Option<f64> {
        None
    }

    /// Indices of the trajectories these models were trained on, if known.
    fn training_indices(&self) -> Option<&[usize]> {
        None
    }
}
