//! Closed-form nuisances for the linear-Gaussian environment with quadratic
//! reward and an affine deterministic policy.

use serde::{Deserialize, Serialize};

use crate::env::{
    BehaviorModel, DeterministicPolicy, EnvConfig, InitState, PolicyForm, RewardForm, TransitionForm,
};
use crate::error::{Error, Result};
use crate::kernel::{KernelFamily, ScaledKernel};
use crate::models::{ActionValue, ConditionalDensity, NuisanceMode, NuisanceModels};

/// `c0 + c1 s + c2 a + c3 s^2 + c4 a^2 + c5 s a`
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct QuadraticForm {
    pub coef: [f64; 6],
}

impl QuadraticForm {
    pub fn eval(&self, s: f64, a: f64) -> f64 {
        let c = &self.coef;
        c[0] + c[1] * s + c[2] * a + c[3] * s * s + c[4] * a * a + c[5] * s * a
    }

    pub fn d_a(&self, s: f64, a: f64) -> f64 {
        let c = &self.coef;
        c[2] + 2.0 * c[4] * a + c[5] * s
    }

    /// Coefficients in `s` of `q(s, c0 + c1 s) + kappa * c4`.
    fn compose(&self, c0: f64, c1: f64, kappa: f64) -> [f64; 3] {
        let c = &self.coef;
        [
            c[0] + c[2] * c0 + c[4] * (c0 * c0 + kappa),
            c[1] + c[2] * c1 + 2.0 * c[4] * c0 * c1 + c[5] * c0,
            c[3] + c[4] * c1 * c1 + c[5] * c1,
        ]
    }

    /// Coefficients in `s` of `d/da q(s, a)` at `a = c0 + c1 s`.
    fn d_a_composed(&self, c0: f64, c1: f64) -> [f64; 2] {
        let c = &self.coef;
        [c[2] + 2.0 * c[4] * c0, 2.0 * c[4] * c1 + c[5]]
    }
}

impl ActionValue for QuadraticForm {
    fn value(&self, s: f64, a: f64) -> f64 {
        self.eval(s, a)
    }

    fn d_action(&self, s: f64, a: f64) -> f64 {
        self.d_a(s, a)
    }

    fn smooth(&self, s: f64, center: f64, kernel: &ScaledKernel) -> f64 {
        self.eval(s, center) + self.coef[4] * kernel.second_moment()
    }

    fn smooth_d1(&self, s: f64, center: f64, _kernel: &ScaledKernel) -> f64 {
        self.d_a(s, center)
    }
}

fn eval_quad(c: &[f64; 3], s: f64) -> f64 {
    c[0] + c[1] * s + c[2] * s * s
}

/// `E[g(s')]` for `s' = ca a + cs s + sd * N(0, 1)`, as a form in `(s, a)`.
fn expectation(env: &EnvConfig, g: [f64; 3]) -> QuadraticForm {
    let (ca, cs, var) = (env.coeff_a, env.coeff_s, env.noise_std * env.noise_std);
    QuadraticForm {
        coef: [
            g[0] + g[2] * var,
            g[1] * cs,
            g[1] * ca,
            g[2] * cs * cs,
            g[2] * ca * ca,
            2.0 * g[2] * ca * cs,
        ],
    }
}

fn check_env(env: &EnvConfig) -> Result<()> {
    env.validate()?;
    if env.transition != TransitionForm::LinearGaussian || env.reward != RewardForm::NegSquare {
        return Err(Error::NoAnalyticOracle(format!(
            "{:?} transition with {:?} reward",
            env.transition, env.reward
        )));
    }
    Ok(())
}

/// Mean and variance of a Gaussian state marginal, with theta-gradients.
#[derive(Debug, Clone, PartialEq)]
struct Marginal {
    mean: f64,
    var: f64,
    d_mean: Vec<f64>,
    d_var: Vec<f64>,
}

/// Gaussian state marginals at each step when actions are
/// `c0 + c1 s + Normal(0, action_var)`; `with_grad` tracks gradients in
/// theta of the given deterministic policy.
fn marginals(
    env: &EnvConfig,
    c0: f64,
    c1: f64,
    action_var: f64,
    policy: Option<&DeterministicPolicy>,
) -> Vec<Marginal> {
    let d = policy.map_or(0, DeterministicPolicy::dim);
    let (mean, var) = match env.init {
        InitState::Fixed { value } => (value, 0.0),
        InitState::Normal { mean, std } => (mean, std * std),
    };
    let mut cur = Marginal {
        mean,
        var,
        d_mean: vec![0.0; d],
        d_var: vec![0.0; d],
    };
    let (ca, cs) = (env.coeff_a, env.coeff_s);
    let rho = ca * c1 + cs;
    let mut out = Vec::with_capacity(env.horizon);
    for _ in 0..env.horizon {
        let next_mean = ca * c0 + rho * cur.mean;
        let next_var = rho * rho * cur.var + ca * ca * action_var + env.noise_std * env.noise_std;
        let mut d_mean = vec![0.0; d];
        let mut d_var = vec![0.0; d];
        if let Some(p) = policy {
            // (d c0, d c1) for each coordinate of theta
            let dc = |i: usize| match (p.form(), i) {
                (PolicyForm::Affine, 0) => (1.0, 0.0),
                _ => (0.0, 1.0),
            };
            for i in 0..d {
                let (dc0, dc1) = dc(i);
                d_mean[i] = ca * dc0 + ca * dc1 * cur.mean + rho * cur.d_mean[i];
                d_var[i] = 2.0 * rho * ca * dc1 * cur.var + rho * rho * cur.d_var[i];
            }
        }
        let next = Marginal {
            mean: next_mean,
            var: next_var,
            d_mean,
            d_var,
        };
        out.push(std::mem::replace(&mut cur, next));
    }
    out
}

/// Ratio of two Gaussian state marginals and its theta-gradient.
#[derive(Debug, Clone, PartialEq)]
struct GaussianRatio {
    target: Marginal,
    base: Marginal,
}

impl GaussianRatio {
    fn value(&self, s: f64) -> f64 {
        let (e, b) = (&self.target, &self.base);
        if b.var == 0.0 {
            return 1.0;
        }
        let ze = (s - e.mean) * (s - e.mean) / e.var;
        let zb = (s - b.mean) * (s - b.mean) / b.var;
        (b.var / e.var).sqrt() * (0.5 * (zb - ze)).exp()
    }

    fn grad(&self, i: usize, s: f64) -> f64 {
        let (e, b) = (&self.target, &self.base);
        if b.var == 0.0 {
            return 0.0;
        }
        let r = s - e.mean;
        self.value(s)
            * (e.d_mean[i] * r / e.var + e.d_var[i] * (r * r / (2.0 * e.var * e.var) - 0.5 / e.var))
    }
}

/// Exact q-functions, their theta-gradients and (when Gaussian) the marginal
/// density ratios for the standard environment.
///
/// With a kernel, the q-functions are those of the kernel-smoothed policy;
/// without one, those of the deterministic policy.
#[derive(Debug, Clone)]
pub struct AnalyticNuisances {
    mode: NuisanceMode,
    q: Vec<QuadraticForm>,
    dq: Vec<Vec<QuadraticForm>>,
    v: Vec<[f64; 3]>,
    dv: Vec<Vec<[f64; 3]>>,
    ratios: Option<Vec<GaussianRatio>>,
    behavior: BehaviorModel,
    init: InitState,
}

impl AnalyticNuisances {
    pub fn new(
        env: &EnvConfig,
        policy: &DeterministicPolicy,
        behavior: &BehaviorModel,
        kernel: Option<&ScaledKernel>,
    ) -> Result<Self> {
        check_env(env)?;
        let h = env.horizon;
        let d = policy.dim();
        let (c0, c1) = policy.affine_coefficients();
        let kappa = kernel.map_or(0.0, ScaledKernel::second_moment);
        let mut q = vec![QuadraticForm::default(); h];
        let mut dq = vec![vec![QuadraticForm::default(); d]; h];
        let mut v = vec![[0.0; 3]; h];
        let mut dv = vec![vec![[0.0; 3]; d]; h];
        // continuation value v_{t+1} as a quadratic in s, and its gradient
        let mut next_v = [0.0; 3];
        let mut next_dv = vec![[0.0; 3]; d];
        for t in (0..h).rev() {
            let mut g = next_v;
            g[2] -= 1.0;
            q[t] = expectation(env, g);
            for i in 0..d {
                dq[t][i] = expectation(env, next_dv[i]);
            }
            v[t] = q[t].compose(c0, c1, kappa);
            let qa = q[t].d_a_composed(c0, c1);
            for i in 0..d {
                let mut cur = dq[t][i].compose(c0, c1, kappa);
                if policy.form() == PolicyForm::Affine && i == 0 {
                    cur[0] += qa[0];
                    cur[1] += qa[1];
                } else {
                    cur[1] += qa[0];
                    cur[2] += qa[1];
                }
                dv[t][i] = cur;
            }
            next_v = v[t];
            next_dv = dv[t].clone();
        }

        let ratios = Self::ratios(env, policy, behavior, kernel);
        Ok(Self {
            mode: if kernel.is_some() {
                NuisanceMode::Kernel
            } else {
                NuisanceMode::Deterministic
            },
            q,
            dq,
            v,
            dv,
            ratios,
            behavior: behavior.clone(),
            init: env.init,
        })
    }

    fn ratios(
        env: &EnvConfig,
        policy: &DeterministicPolicy,
        behavior: &BehaviorModel,
        kernel: Option<&ScaledKernel>,
    ) -> Option<Vec<GaussianRatio>> {
        if behavior.mean.iter().skip(2).any(|&c| c != 0.0) {
            return None;
        }
        let action_var = match kernel {
            None => 0.0,
            Some(k) if k.family() == KernelFamily::Gaussian => k.second_moment(),
            Some(_) => return None,
        };
        let (c0, c1) = policy.affine_coefficients();
        let target = marginals(env, c0, c1, action_var, Some(policy));
        let b0 = behavior.mean[0];
        let b1 = behavior.mean_coeff();
        let base = marginals(env, b0, b1, behavior.std * behavior.std, None);
        let ok = target
            .iter()
            .zip(&base)
            .all(|(e, b)| (b.var == 0.0 && e.var == 0.0 && e.mean == b.mean) || (b.var > 0.0 && e.var > 0.0));
        ok.then(|| {
            target
                .into_iter()
                .zip(base)
                .map(|(mut e, mut b)| {
                    let d = e.d_mean.len();
                    b.d_mean = vec![0.0; d];
                    b.d_var = vec![0.0; d];
                    if b.var == 0.0 {
                        e.d_mean.iter_mut().for_each(|x| *x = 0.0);
                    }
                    GaussianRatio { target: e, base: b }
                })
                .collect()
        })
    }

    /// Value function at step `t` as a function of the state.
    pub fn state_value(&self, t: usize, s: f64) -> f64 {
        eval_quad(&self.v[t], s)
    }

    pub fn state_value_grad(&self, t: usize, i: usize, s: f64) -> f64 {
        eval_quad(&self.dv[t][i], s)
    }

    pub fn q_form(&self, t: usize) -> &QuadraticForm {
        &self.q[t]
    }

    pub fn dq_form(&self, t: usize, i: usize) -> &QuadraticForm {
        &self.dq[t][i]
    }

    /// Expected return: `E[v_1(s_1)]` over the initial-state distribution.
    pub fn value(&self) -> f64 {
        expect_init(&self.v[0], self.init)
    }

    pub fn gradient(&self) -> Vec<f64> {
        self.dv[0].iter().map(|c| expect_init(c, self.init)).collect()
    }
}

fn expect_init(c: &[f64; 3], init: InitState) -> f64 {
    match init {
        InitState::Fixed { value } => eval_quad(c, value),
        InitState::Normal { mean, std } => c[0] + c[1] * mean + c[2] * (mean * mean + std * std),
    }
}

impl NuisanceModels for AnalyticNuisances {
    fn horizon(&self) -> usize {
        self.q.len()
    }

    fn mode(&self) -> NuisanceMode {
        self.mode
    }

    fn q(&self, t: usize) -> &dyn ActionValue {
        &self.q[t]
    }

    fn behavior(&self) -> &dyn ConditionalDensity {
        &self.behavior
    }

    fn dim(&self) -> usize {
        self.dq.first().map_or(0, Vec::len)
    }

    fn dq(&self, t: usize, i: usize) -> Option<&dyn ActionValue> {
        Some(&self.dq[t][i])
    }

    fn w(&self, t: usize, s: f64) -> Option<f64> {
        self.ratios.as_ref().map(|r| r[t].value(s))
    }

    fn dw(&self, t: usize, i: usize, s: f64) -> Option<f64> {
        self.ratios.as_ref().map(|r| r[t].grad(i, s))
    }
}

/// q-function of the deterministic policy at step `t` (0-based).
pub fn analytic_q(env: &EnvConfig, policy: &DeterministicPolicy, t: usize) -> Result<QuadraticForm> {
    if t >= env.horizon {
        return Err(Error::InvalidArgument(format!("step {t} outside horizon {}", env.horizon)));
    }
    let dummy = BehaviorModel::linear(0.0, 1.0)?;
    Ok(AnalyticNuisances::new(env, policy, &dummy, None)?.q[t])
}

/// Exact policy value of the deterministic policy.
pub fn analytic_value(env: &EnvConfig, policy: &DeterministicPolicy) -> Result<f64> {
    let dummy = BehaviorModel::linear(0.0, 1.0)?;
    Ok(AnalyticNuisances::new(env, policy, &dummy, None)?.value())
}

/// Exact policy value of the kernel-smoothed policy.
pub fn analytic_kernel_value(env: &EnvConfig, policy: &DeterministicPolicy, kernel: &ScaledKernel) -> Result<f64> {
    let dummy = BehaviorModel::linear(0.0, 1.0)?;
    Ok(AnalyticNuisances::new(env, policy, &dummy, Some(kernel))?.value())
}

/// Exact policy gradient of the deterministic policy.
pub fn analytic_gradient(env: &EnvConfig, policy: &DeterministicPolicy) -> Result<Vec<f64>> {
    let dummy = BehaviorModel::linear(0.0, 1.0)?;
    Ok(AnalyticNuisances::new(env, policy, &dummy, None)?.gradient())
}
