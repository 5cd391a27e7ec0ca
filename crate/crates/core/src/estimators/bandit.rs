use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{clip, Context, GradientVariant};
use crate::env::{Dataset, Trajectory};
use crate::error::{Error, Result};
use crate::models::NuisanceModels;
use crate::nuisance::DENSITY_FLOOR;

/// Regression term subtracted from the reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BanditF1 {
    QAtA,
    QAtTau,
    Zero,
}

/// Behavior density in the denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BanditF2 {
    PibAtA,
    PibAtTau,
}

/// Control term added back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BanditF3 {
    /// `int q(S, a) K_h(a - tau(S)) da`
    Conv,
    QAtTau,
    Zero,
}

/// One of the single-step estimators `K_h(A - tau(S)) (R - f1) / f2 + f3`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BanditSpec {
    pub f1: BanditF1,
    pub f2: BanditF2,
    pub f3: BanditF3,
}

impl BanditSpec {
    pub const KERNEL: Self = Self {
        f1: BanditF1::QAtA,
        f2: BanditF2::PibAtA,
        f3: BanditF3::Conv,
    };
    pub const DETERMINISTIC: Self = Self {
        f1: BanditF1::QAtTau,
        f2: BanditF2::PibAtTau,
        f3: BanditF3::QAtTau,
    };
    pub const IS: Self = Self {
        f1: BanditF1::Zero,
        f2: BanditF2::PibAtA,
        f3: BanditF3::Zero,
    };

    /// All eighteen combinations.
    pub fn all() -> Vec<Self> {
        let mut out = Vec::new();
        for f1 in [BanditF1::QAtA, BanditF1::QAtTau, BanditF1::Zero] {
            for f2 in [BanditF2::PibAtA, BanditF2::PibAtTau] {
                for f3 in [BanditF3::Conv, BanditF3::QAtTau, BanditF3::Zero] {
                    out.push(Self { f1, f2, f3 });
                }
            }
        }
        out
    }
}

impl fmt::Display for BanditSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Self::KERNEL => f.write_str("JK"),
            Self::DETERMINISTIC => f.write_str("JD"),
            Self::IS => f.write_str("IS"),
            Self { f1, f2, f3 } => {
                let f1 = match f1 {
                    BanditF1::QAtA => "qa",
                    BanditF1::QAtTau => "qtau",
                    BanditF1::Zero => "0",
                };
                let f2 = match f2 {
                    BanditF2::PibAtA => "pba",
                    BanditF2::PibAtTau => "pbtau",
                };
                let f3 = match f3 {
                    BanditF3::Conv => "conv",
                    BanditF3::QAtTau => "qtau",
                    BanditF3::Zero => "0",
                };
                write!(f, "bandit({f1},{f2},{f3})")
            }
        }
    }
}

impl FromStr for BanditSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        match lower.as_str() {
            "jk" => return Ok(Self::KERNEL),
            "jd" => return Ok(Self::DETERMINISTIC),
            "is" => return Ok(Self::IS),
            _ => {}
        }
        let bad = || Error::InvalidArgument(format!("cannot parse bandit spec '{s}'"));
        let inner = lower
            .strip_prefix("bandit(")
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(bad)?;
        let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(bad());
        }
        let f1 = match parts[0] {
            "qa" => BanditF1::QAtA,
            "qtau" => BanditF1::QAtTau,
            "0" => BanditF1::Zero,
            _ => return Err(bad()),
        };
        let f2 = match parts[1] {
            "pba" => BanditF2::PibAtA,
            "pbtau" => BanditF2::PibAtTau,
            _ => return Err(bad()),
        };
        let f3 = match parts[2] {
            "conv" => BanditF3::Conv,
            "qtau" => BanditF3::QAtTau,
            "0" => BanditF3::Zero,
            _ => return Err(bad()),
        };
        Ok(Self { f1, f2, f3 })
    }
}

pub(super) fn require_single_step(data: &Dataset, variant: &str) -> Result<()> {
    if data.horizon != 1 {
        return Err(Error::InvalidArgument(format!(
            "{variant} is a single-step estimator, data has H={}",
            data.horizon
        )));
    }
    Ok(())
}

pub(super) fn value_contribution(
    tr: &Trajectory,
    m: &dyn NuisanceModels,
    ctx: &Context<'_>,
    spec: BanditSpec,
) -> (Vec<f64>, usize) {
    let (s, a, r) = (tr.states[0], tr.actions[0], tr.rewards[0]);
    let tau = ctx.policy.action(s);
    let q = m.q(0);
    let pb = m.behavior();
    let mut clips = 0;
    let f1 = match spec.f1 {
        BanditF1::QAtA => q.value(s, a),
        BanditF1::QAtTau => q.value(s, tau),
        BanditF1::Zero => 0.0,
    };
    let f2 = clip(
        match spec.f2 {
            BanditF2::PibAtA => pb.density(s, a),
            BanditF2::PibAtTau => pb.density(s, tau),
        },
        &mut clips,
    );
    let f3 = match spec.f3 {
        BanditF3::Conv => q.smooth(s, tau, ctx.kernel),
        BanditF3::QAtTau => q.value(s, tau),
        BanditF3::Zero => 0.0,
    };
    (vec![ctx.kernel.eval(a - tau) * (r - f1) / f2 + f3], clips)
}

pub(super) fn gradient_contribution(
    tr: &Trajectory,
    m: &dyn NuisanceModels,
    ctx: &Context<'_>,
    variant: GradientVariant,
) -> Result<(Vec<f64>, usize)> {
    let (s, a, r) = (tr.states[0], tr.actions[0], tr.rewards[0]);
    let tau = ctx.policy.action(s);
    let u = a - tau;
    let q = m.q(0);
    let pb = m.behavior();
    let mut clips = 0;
    let scale = match variant {
        GradientVariant::Ispg => ctx.kernel.eval_d1(u) * r / clip(pb.density(s, a), &mut clips),
        GradientVariant::BanditDpg => q.d_action(s, tau),
        GradientVariant::BanditK => {
            ctx.kernel.eval_d1(u) * (r - q.value(s, a)) / clip(pb.density(s, a), &mut clips)
                + q.smooth_d1(s, tau, ctx.kernel)
        }
        GradientVariant::BanditD => {
            // exact theta-derivative of the JD contribution
            let raw = pb.density(s, tau);
            let pbt = clip(raw, &mut clips);
            let dpbt = if raw >= DENSITY_FLOOR { pb.d_action(s, tau) } else { 0.0 };
            let resid = r - q.value(s, tau);
            let q1 = q.d_action(s, tau);
            let k = ctx.kernel.eval(u);
            ctx.kernel.eval_d1(u) * resid / pbt - k * q1 / pbt - k * resid * dpbt / (pbt * pbt) + q1
        }
        _ => unreachable!("not a single-step gradient variant"),
    };
    Ok((ctx.policy.gradient(s).into_iter().map(|g| scale * g).collect(), clips))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for spec in BanditSpec::all() {
            let text = spec.to_string();
            assert_eq!(text.parse::<BanditSpec>().unwrap(), spec, "{text}");
        }
        assert_eq!(BanditSpec::KERNEL.to_string(), "JK");
        assert!("bandit(qa,pba)".parse::<BanditSpec>().is_err());
    }
}
