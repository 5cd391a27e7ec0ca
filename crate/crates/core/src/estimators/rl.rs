use super::{clip, state_value, state_value_grad, Context, DpgForm, GradientVariant, ValueVariant};
use crate::env::Trajectory;
use crate::error::Result;
use crate::models::NuisanceModels;
use crate::nuisance::DENSITY_FLOOR;

/// Per-step quantities shared by the value and gradient recursions.
struct Step {
    s: f64,
    a: f64,
    r: f64,
    tau: f64,
    k: f64,
    k1: f64,
}

fn step(tr: &Trajectory, t: usize, ctx: &Context<'_>) -> Step {
    let (s, a, r) = (tr.states[t], tr.actions[t], tr.rewards[t]);
    let tau = ctx.policy.action(s);
    Step {
        s,
        a,
        r,
        tau,
        k: ctx.kernel.eval(a - tau),
        k1: ctx.kernel.eval_d1(a - tau),
    }
}

/// Residual `r_t - q_t + v_{t+1}(s_{t+1})`, with `q_t` evaluated at the
/// logged action (kernel variants) or at `tau(s_t)` (deterministic variants).
fn residual(tr: &Trajectory, m: &dyn NuisanceModels, ctx: &Context<'_>, t: usize, st: &Step, kernel: bool) -> f64 {
    let q = m.q(t);
    let qt = if kernel { q.value(st.s, st.a) } else { q.value(st.s, st.tau) };
    let next = if t + 1 < tr.len() {
        state_value(m.q(t + 1), kernel, ctx, tr.states[t + 1])
    } else {
        0.0
    };
    st.r - qt + next
}

fn is_kernel_variant(v: ValueVariant) -> bool {
    matches!(v, ValueVariant::Cdrk | ValueVariant::Mdrk)
}

pub(super) fn value_contribution(
    tr: &Trajectory,
    m: &dyn NuisanceModels,
    ctx: &Context<'_>,
    variant: ValueVariant,
    dm_smoothed: bool,
) -> Result<(Vec<f64>, usize)> {
    if variant == ValueVariant::Dm {
        return Ok((vec![state_value(m.q(0), dm_smoothed, ctx, tr.states[0])], 0));
    }
    let kernel = is_kernel_variant(variant);
    let marginal = matches!(variant, ValueVariant::Mdrk | ValueVariant::Mdrd);
    let pb = m.behavior();
    let mut clips = 0;
    let mut total = state_value(m.q(0), kernel, ctx, tr.states[0]);
    let mut lambda = 1.0;
    for t in 0..tr.len() {
        let st = step(tr, t, ctx);
        let dens = if kernel { pb.density(st.s, st.a) } else { pb.density(st.s, st.tau) };
        let ratio = st.k / clip(dens, &mut clips);
        let weight = if marginal {
            m.w(t, st.s).ok_or_else(|| ctx.missing("w"))? * ratio
        } else {
            lambda *= ratio;
            lambda
        };
        if weight != 0.0 {
            total += weight * residual(tr, m, ctx, t, &st, kernel);
        }
    }
    Ok((vec![total], clips))
}

pub(super) fn gradient_contribution(
    tr: &Trajectory,
    m: &dyn NuisanceModels,
    ctx: &Context<'_>,
    variant: GradientVariant,
) -> Result<(Vec<f64>, usize)> {
    let d = ctx.dim();
    let mut grad_tau = vec![0.0; d];
    if let GradientVariant::Dpg(form) = variant {
        let mut out = vec![0.0; d];
        match form {
            DpgForm::InitialValue => {
                state_value_grad(m, 0, false, ctx, tr.states[0], &mut grad_tau, &mut out)?;
            }
            DpgForm::Pooled => {
                for t in 0..tr.len() {
                    let s = tr.states[t];
                    let q1 = m.q(t).d_action(s, ctx.policy.action(s));
                    ctx.policy.gradient_into(s, &mut grad_tau);
                    for (o, g) in out.iter_mut().zip(&grad_tau) {
                        *o += q1 * g;
                    }
                }
            }
        }
        return Ok((out, 0));
    }

    let kernel = matches!(variant, GradientVariant::Cpgk | GradientVariant::Mpgk);
    let marginal = matches!(variant, GradientVariant::Mpgk | GradientVariant::Mpgd);
    let pb = m.behavior();
    let mut clips = 0;
    let mut out = vec![0.0; d];
    state_value_grad(m, 0, kernel, ctx, tr.states[0], &mut grad_tau, &mut out)?;

    // gradients of v at the current and next state
    let mut dv_cur = out.clone();
    let mut dv_next = vec![0.0; d];
    let mut next_tau = vec![0.0; d];
    // cumulative ratio and its gradient
    let mut lambda = 1.0;
    let mut dlambda = vec![0.0; d];
    for t in 0..tr.len() {
        let st = step(tr, t, ctx);
        ctx.policy.gradient_into(st.s, &mut grad_tau);
        if t + 1 < tr.len() {
            state_value_grad(m, t + 1, kernel, ctx, tr.states[t + 1], &mut next_tau, &mut dv_next)?;
        } else {
            dv_next.iter_mut().for_each(|x| *x = 0.0);
        }
        let delta = residual(tr, m, ctx, t, &st, kernel);

        // ratio rho = K_h / pi_b and the scalar multiplying grad tau in its
        // gradient
        let (rho, drho) = if kernel {
            let pba = clip(pb.density(st.s, st.a), &mut clips);
            (st.k / pba, st.k1 / pba)
        } else {
            let raw = pb.density(st.s, st.tau);
            let pbt = clip(raw, &mut clips);
            let dpbt = if raw >= DENSITY_FLOOR { pb.d_action(st.s, st.tau) } else { 0.0 };
            (st.k / pbt, st.k1 / pbt - st.k * dpbt / (pbt * pbt))
        };

        // gradient of the residual: -grad q_t + grad v_{t+1}
        let mut ddelta = vec![0.0; d];
        for i in 0..d {
            let dq_t = if kernel {
                m.dq(t, i).ok_or_else(|| ctx.missing("dq"))?.value(st.s, st.a)
            } else {
                dv_cur[i]
            };
            ddelta[i] = dv_next[i] - dq_t;
        }

        if marginal {
            let w = m.w(t, st.s).ok_or_else(|| ctx.missing("w"))?;
            for i in 0..d {
                let dw = m.dw(t, i, st.s).ok_or_else(|| ctx.missing("dw"))?;
                out[i] += dw * rho * delta + w * (drho * grad_tau[i] * delta + rho * ddelta[i]);
            }
        } else {
            for i in 0..d {
                dlambda[i] = dlambda[i] * rho + lambda * drho * grad_tau[i];
            }
            lambda *= rho;
            for i in 0..d {
                out[i] += dlambda[i] * delta + lambda * ddelta[i];
            }
        }
        std::mem::swap(&mut dv_cur, &mut dv_next);
    }
    Ok((out, clips))
}
