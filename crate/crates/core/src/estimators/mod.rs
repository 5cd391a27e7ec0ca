//! Value and gradient estimators.
//!
//! Every estimator averages a per-trajectory contribution computed with the
//! nuisance models assigned to that trajectory by a [`NuisanceProvider`].
//! Contributions are computed in parallel and reduced in trajectory order
//! with compensated summation, so reports are bit-reproducible.

mod bandit;
mod rl;

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{Dataset, DeterministicPolicy, Trajectory};
use crate::error::{Error, Result};
use crate::kernel::ScaledKernel;
use crate::models::{ActionValue, NuisanceMode, NuisanceModels};
use crate::nuisance::{NuisanceProvider, DENSITY_FLOOR};
use crate::stats::NeumaierSum;

pub use bandit::{BanditF1, BanditF2, BanditF3, BanditSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    Value,
    Gradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub variant: String,
    pub kind: ReportKind,
    pub n: usize,
    pub h: f64,
    /// Length 1 for value estimates, `d` for gradients.
    pub estimate: Vec<f64>,
    pub per_trajectory: Vec<Vec<f64>>,
    /// Number of denominator densities raised to the clip floor.
    pub clip_count: usize,
}

impl EstimateReport {
    fn from_contributions(
        variant: String,
        kind: ReportKind,
        h: f64,
        contributions: Vec<(Vec<f64>, usize)>,
    ) -> Result<Self> {
        let n = contributions.len();
        let dim = contributions.first().map_or(0, |c| c.0.len());
        let mut sums = vec![NeumaierSum::default(); dim];
        let mut clip_count = 0;
        let mut per_trajectory = Vec::with_capacity(n);
        for (i, (c, clips)) in contributions.into_iter().enumerate() {
            if let Some(t) = c.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    trajectory: i,
                    t,
                    what: "estimator contribution",
                });
            }
            for (s, &x) in sums.iter_mut().zip(&c) {
                s.add(x);
            }
            clip_count += clips;
            per_trajectory.push(c);
        }
        Ok(Self {
            variant,
            kind,
            n,
            h,
            estimate: sums.iter().map(|s| s.total() / n as f64).collect(),
            per_trajectory,
            clip_count,
        })
    }

    pub fn dim(&self) -> usize {
        self.estimate.len()
    }

    /// First coordinate; the value for value estimators.
    pub fn scalar(&self) -> f64 {
        self.estimate[0]
    }

    /// Standard error of each coordinate, from the per-trajectory spread.
    pub fn se(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|k| {
                let col: Vec<f64> = self.per_trajectory.iter().map(|c| c[k]).collect();
                (crate::stats::variance(&col) / self.n as f64).sqrt()
            })
            .collect()
    }

    /// Writes `variant,n,h,estimate` rows, with a trailing `coord` column for
    /// gradients.
    pub fn write_csv<W: Write>(&self, writer: W, header: bool) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let gradient = self.kind == ReportKind::Gradient;
        if header {
            if gradient {
                w.write_record(["variant", "n", "h", "estimate", "coord"])?;
            } else {
                w.write_record(["variant", "n", "h", "estimate"])?;
            }
        }
        for (k, e) in self.estimate.iter().enumerate() {
            let mut row = vec![self.variant.clone(), self.n.to_string(), self.h.to_string(), e.to_string()];
            if gradient {
                row.push(k.to_string());
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `traj_id,coord,value` rows.
    pub fn write_per_trajectory_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["traj_id", "coord", "value"])?;
        for (i, c) in self.per_trajectory.iter().enumerate() {
            for (k, x) in c.iter().enumerate() {
                w.write_record(&[i.to_string(), k.to_string(), x.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueVariant {
    Bandit(BanditSpec),
    Cdrk,
    Cdrd,
    Mdrk,
    Mdrd,
    Dm,
}

/// How the plug-in DPG baseline weights states over a longer horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DpgForm {
    /// `sum_t q_t^(1)(s_t, tau(s_t)) grad tau(s_t)` at the observed states.
    Pooled,
    /// Gradient of the fitted initial value function, `d^v_1(s_1)`.
    InitialValue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientVariant {
    Ispg,
    BanditDpg,
    BanditK,
    BanditD,
    Cpgk,
    Cpgd,
    Mpgk,
    Mpgd,
    Dpg(DpgForm),
}

/// Any estimator, identified by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Estimator {
    Value(ValueVariant),
    Gradient(GradientVariant),
}

impl ValueVariant {
    /// The nuisance mode the q-functions must be fitted in, if any.
    pub fn mode(self) -> Option<NuisanceMode> {
        match self {
            Self::Cdrk | Self::Mdrk => Some(NuisanceMode::Kernel),
            Self::Cdrd | Self::Mdrd => Some(NuisanceMode::Deterministic),
            Self::Bandit(_) | Self::Dm => None,
        }
    }
}

impl GradientVariant {
    pub fn mode(self) -> Option<NuisanceMode> {
        match self {
            Self::Cpgk | Self::Mpgk => Some(NuisanceMode::Kernel),
            Self::Cpgd | Self::Mpgd | Self::Dpg(_) => Some(NuisanceMode::Deterministic),
            Self::Ispg | Self::BanditDpg | Self::BanditK | Self::BanditD => None,
        }
    }

    /// Whether the estimate depends on the bandwidth.
    pub fn uses_bandwidth(self) -> bool {
        !matches!(self, Self::BanditDpg | Self::Dpg(_))
    }
}

impl Estimator {
    pub fn mode(self) -> Option<NuisanceMode> {
        match self {
            Self::Value(v) => v.mode(),
            Self::Gradient(g) => g.mode(),
        }
    }

    pub fn uses_bandwidth(self) -> bool {
        match self {
            Self::Value(ValueVariant::Dm) => false,
            Self::Value(_) => true,
            Self::Gradient(g) => g.uses_bandwidth(),
        }
    }

    pub fn is_gradient(self) -> bool {
        matches!(self, Self::Gradient(_))
    }

    /// Whether only single-step data is accepted.
    pub fn bandit_only(self) -> bool {
        matches!(
            self,
            Self::Value(ValueVariant::Bandit(_))
                | Self::Gradient(
                    GradientVariant::Ispg
                        | GradientVariant::BanditDpg
                        | GradientVariant::BanditK
                        | GradientVariant::BanditD
                )
        )
    }

    pub fn needs_w(self) -> bool {
        matches!(
            self,
            Self::Value(ValueVariant::Mdrk | ValueVariant::Mdrd)
                | Self::Gradient(GradientVariant::Mpgk | GradientVariant::Mpgd)
        )
    }

    pub fn needs_dq(self) -> bool {
        matches!(
            self,
            Self::Gradient(
                GradientVariant::Cpgk
                    | GradientVariant::Cpgd
                    | GradientVariant::Mpgk
                    | GradientVariant::Mpgd
                    | GradientVariant::Dpg(DpgForm::InitialValue)
            )
        )
    }

    pub fn needs_dw(self) -> bool {
        matches!(self, Self::Gradient(GradientVariant::Mpgk | GradientVariant::Mpgd))
    }

    /// Evaluates the estimator.
    pub fn run<P: NuisanceProvider + ?Sized>(
        self,
        data: &Dataset,
        nuisances: &P,
        policy: &DeterministicPolicy,
        kernel: &ScaledKernel,
    ) -> Result<EstimateReport> {
        match self {
            Self::Value(ValueVariant::Bandit(spec)) => ope_bandit(data, nuisances, policy, kernel, spec),
            Self::Value(v) => ope_rl(data, nuisances, policy, kernel, v),
            Self::Gradient(
                g @ (GradientVariant::Ispg
                | GradientVariant::BanditDpg
                | GradientVariant::BanditK
                | GradientVariant::BanditD),
            ) => grad_bandit(data, nuisances, policy, kernel, g),
            Self::Gradient(g) => grad_rl(data, nuisances, policy, kernel, g),
        }
    }
}

impl fmt::Display for ValueVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Bandit(spec) => write!(f, "{spec}"),
            Self::Cdrk => f.write_str("CDRK"),
            Self::Cdrd => f.write_str("CDRD"),
            Self::Mdrk => f.write_str("MDRK"),
            Self::Mdrd => f.write_str("MDRD"),
            Self::Dm => f.write_str("DM"),
        }
    }
}

impl fmt::Display for GradientVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ispg => "ISPG",
            Self::BanditDpg => "DPG-bandit",
            Self::BanditK => "ZK",
            Self::BanditD => "ZD",
            Self::Cpgk => "CPGK",
            Self::Cpgd => "CPGD",
            Self::Mpgk => "MPGK",
            Self::Mpgd => "MPGD",
            Self::Dpg(DpgForm::Pooled) => "DPG",
            Self::Dpg(DpgForm::InitialValue) => "DPG-v1",
        })
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Value(v) => v.fmt(f),
            Self::Gradient(g) => g.fmt(f),
        }
    }
}

impl FromStr for Estimator {
    type Err = Error;

    /// Case-insensitive names as printed by `Display`; bandit value variants
    /// also accept `bandit(f1,f2,f3)`.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let v = |x| Ok(Self::Value(x));
        let g = |x| Ok(Self::Gradient(x));
        match lower.as_str() {
            "cdrk" => v(ValueVariant::Cdrk),
            "cdrd" => v(ValueVariant::Cdrd),
            "mdrk" => v(ValueVariant::Mdrk),
            "mdrd" => v(ValueVariant::Mdrd),
            "dm" => v(ValueVariant::Dm),
            "ispg" => g(GradientVariant::Ispg),
            "dpg-bandit" => g(GradientVariant::BanditDpg),
            "zk" => g(GradientVariant::BanditK),
            "zd" => g(GradientVariant::BanditD),
            "cpgk" => g(GradientVariant::Cpgk),
            "cpgd" => g(GradientVariant::Cpgd),
            "mpgk" => g(GradientVariant::Mpgk),
            "mpgd" => g(GradientVariant::Mpgd),
            "dpg" => g(GradientVariant::Dpg(DpgForm::Pooled)),
            "dpg-v1" => g(GradientVariant::Dpg(DpgForm::InitialValue)),
            other => other
                .parse::<BanditSpec>()
                .map(|b| Self::Value(ValueVariant::Bandit(b)))
                .map_err(|_| Error::InvalidArgument(format!("unknown estimator '{s}'"))),
        }
    }
}

/// Quantities shared by all per-trajectory computations.
pub(crate) struct Context<'a> {
    pub policy: &'a DeterministicPolicy,
    pub kernel: &'a ScaledKernel,
    pub variant: String,
}

impl Context<'_> {
    pub fn dim(&self) -> usize {
        self.policy.dim()
    }

    pub fn missing(&self, what: &'static str) -> Error {
        Error::MissingNuisance {
            variant: self.variant.clone(),
            what,
        }
    }
}

/// Raises `x` to the clip floor, counting the event.
#[inline]
pub(crate) fn clip(x: f64, clips: &mut usize) -> f64 {
    if x < DENSITY_FLOOR {
        *clips += 1;
        DENSITY_FLOOR
    } else {
        x
    }
}

/// `v_t(s)` for the mode: kernel-smoothed or evaluated at `tau(s)`.
#[inline]
pub(crate) fn state_value(q: &dyn ActionValue, smoothed: bool, ctx: &Context<'_>, s: f64) -> f64 {
    let tau = ctx.policy.action(s);
    if smoothed {
        q.smooth(s, tau, ctx.kernel)
    } else {
        q.value(s, tau)
    }
}

/// Writes `grad_theta v_t(s)` into `out`:
/// `int d^q K_h + (int q K'_h) grad tau` when smoothed, else
/// `d^q(s, tau) + q^(1)(s, tau) grad tau`.
pub(crate) fn state_value_grad(
    m: &dyn NuisanceModels,
    t: usize,
    smoothed: bool,
    ctx: &Context<'_>,
    s: f64,
    grad_tau: &mut [f64],
    out: &mut [f64],
) -> Result<()> {
    let tau = ctx.policy.action(s);
    ctx.policy.gradient_into(s, grad_tau);
    let q = m.q(t);
    let q1 = if smoothed {
        q.smooth_d1(s, tau, ctx.kernel)
    } else {
        q.d_action(s, tau)
    };
    for (i, o) in out.iter_mut().enumerate() {
        let dq = m.dq(t, i).ok_or_else(|| ctx.missing("dq"))?;
        let base = if smoothed {
            dq.smooth(s, tau, ctx.kernel)
        } else {
            dq.value(s, tau)
        };
        *o = base + q1 * grad_tau[i];
    }
    Ok(())
}

fn check_inputs<P: NuisanceProvider + ?Sized>(
    data: &Dataset,
    nuisances: &P,
    variant: &str,
    required: Option<NuisanceMode>,
) -> Result<()> {
    if data.horizon != nuisances.horizon() {
        return Err(Error::HorizonMismatch {
            data: data.horizon,
            nuisance: nuisances.horizon(),
        });
    }
    if let Some(mode) = required {
        // single-step q-functions do not depend on the mode
        if data.horizon > 1 && nuisances.mode() != mode {
            return Err(Error::ModeMismatch {
                variant: variant.to_string(),
                required: mode.name(),
            });
        }
    }
    nuisances.check_cross_fit(data.len())
}

fn run_contributions<P, F>(
    data: &Dataset,
    nuisances: &P,
    ctx: &Context<'_>,
    kind: ReportKind,
    f: F,
) -> Result<EstimateReport>
where
    P: NuisanceProvider + ?Sized,
    F: Fn(&Trajectory, &dyn NuisanceModels) -> Result<(Vec<f64>, usize)> + Sync,
{
    let contributions = data
        .trajectories
        .par_iter()
        .enumerate()
        .map(|(i, tr)| f(tr, nuisances.for_trajectory(i)))
        .collect::<Result<Vec<_>>>()?;
    EstimateReport::from_contributions(ctx.variant.clone(), kind, ctx.kernel.h(), contributions)
}

/// Single-step value estimators `K_h(A - tau(S)) (R - f1) / f2 + f3`.
pub fn ope_bandit<P: NuisanceProvider + ?Sized>(
    data: &Dataset,
    nuisances: &P,
    policy: &DeterministicPolicy,
    kernel: &ScaledKernel,
    spec: BanditSpec,
) -> Result<EstimateReport> {
    let name = spec.to_string();
    bandit::require_single_step(data, &name)?;
    check_inputs(data, nuisances, &name, None)?;
    let ctx = Context {
        policy,
        kernel,
        variant: name,
    };
    run_contributions(data, nuisances, &ctx, ReportKind::Value, |tr, m| {
        Ok(bandit::value_contribution(tr, m, &ctx, spec))
    })
}

/// Single-step gradient estimators.
pub fn grad_bandit<P: NuisanceProvider + ?Sized>(
    data: &Dataset,
    nuisances: &P,
    policy: &DeterministicPolicy,
    kernel: &ScaledKernel,
    variant: GradientVariant,
) -> Result<EstimateReport> {
    let name = variant.to_string();
    bandit::require_single_step(data, &name)?;
    check_inputs(data, nuisances, &name, None)?;
    let ctx = Context {
        policy,
        kernel,
        variant: name,
    };
    run_contributions(data, nuisances, &ctx, ReportKind::Gradient, |tr, m| {
        bandit::gradient_contribution(tr, m, &ctx, variant)
    })
}

/// Multi-step value estimators.
pub fn ope_rl<P: NuisanceProvider + ?Sized>(
    data: &Dataset,
    nuisances: &P,
    policy: &DeterministicPolicy,
    kernel: &ScaledKernel,
    variant: ValueVariant,
) -> Result<EstimateReport> {
    if let ValueVariant::Bandit(spec) = variant {
        return ope_bandit(data, nuisances, policy, kernel, spec);
    }
    let name = variant.to_string();
    // DM follows whatever mode the q-functions were fitted in
    check_inputs(data, nuisances, &name, variant.mode())?;
    let ctx = Context {
        policy,
        kernel,
        variant: name,
    };
    let dm_smoothed = nuisances.mode() == NuisanceMode::Kernel;
    run_contributions(data, nuisances, &ctx, ReportKind::Value, |tr, m| {
        rl::value_contribution(tr, m, &ctx, variant, dm_smoothed)
    })
}

/// Multi-step gradient estimators.
pub fn grad_rl<P: NuisanceProvider + ?Sized>(
    data: &Dataset,
    nuisances: &P,
    policy: &DeterministicPolicy,
    kernel: &ScaledKernel,
    variant: GradientVariant,
) -> Result<EstimateReport> {
    if matches!(
        variant,
        GradientVariant::Ispg | GradientVariant::BanditDpg | GradientVariant::BanditK | GradientVariant::BanditD
    ) {
        return grad_bandit(data, nuisances, policy, kernel, variant);
    }
    let name = variant.to_string();
    check_inputs(data, nuisances, &name, variant.mode())?;
    let ctx = Context {
        policy,
        kernel,
        variant: name,
    };
    run_contributions(data, nuisances, &ctx, ReportKind::Gradient, |tr, m| {
        rl::gradient_contribution(tr, m, &ctx, variant)
    })
}
