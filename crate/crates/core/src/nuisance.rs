//! Cross-fitting and sieve estimation of the nuisance functions.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::env::{stream_rng, BehaviorModel, Dataset, DeterministicPolicy};
use crate::error::{Error, Result};
use crate::kernel::ScaledKernel;
use crate::models::{ActionValue, ConditionalDensity, NuisanceMode, NuisanceModels};
use crate::sieve::{Arity, PolySieve, RidgeProblem, SieveModel};

/// Lower clip applied to every density that appears in a denominator.
pub const DENSITY_FLOOR: f64 = 1e-3;
/// Upper clip on fitted marginal density ratios.
pub const RATIO_CEILING: f64 = 1e3;

/// Two disjoint folds covering `0..n`; the first has `ceil(n / 2)` members.
/// Both lists are sorted.
pub fn crossfold_split(n: usize, seed: u64) -> Result<[Vec<usize>; 2]> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("cross-fitting needs n >= 2, got {n}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut stream_rng(seed, u64::MAX));
    let mut first = perm[..n.div_ceil(2)].to_vec();
    let mut second = perm[n.div_ceil(2)..].to_vec();
    first.sort_unstable();
    second.sort_unstable();
    Ok([first, second])
}

/// `K_h(a - tau(s)) / max(pi_b(a | s), floor)`
#[inline]
fn kernel_ratio(kernel: &ScaledKernel, behavior: &dyn ConditionalDensity, s: f64, a: f64, tau: f64) -> f64 {
    kernel.eval(a - tau) / behavior.density(s, a).max(DENSITY_FLOOR)
}

/// Smoothed continuation value `v_t(s)` under the given mode.
#[inline]
fn continuation(q: &dyn ActionValue, mode: NuisanceMode, kernel: Option<&ScaledKernel>, s: f64, tau: f64) -> f64 {
    match (mode, kernel) {
        (NuisanceMode::Kernel, Some(k)) => q.smooth(s, tau, k),
        _ => q.value(s, tau),
    }
}

fn mode_kernel(mode: NuisanceMode, kernel: Option<&ScaledKernel>) -> Result<Option<&ScaledKernel>> {
    match (mode, kernel) {
        (NuisanceMode::Kernel, None) => Err(Error::InvalidArgument("kernel mode requires a kernel".into())),
        (NuisanceMode::Kernel, k) => Ok(k),
        (NuisanceMode::Deterministic, _) => Ok(None),
    }
}

fn check_fit_args(data: &Dataset, degree: usize) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot fit nuisances on an empty dataset".into()));
    }
    if degree == 0 {
        return Err(Error::InvalidArgument("sieve degree must be >= 1".into()));
    }
    Ok(())
}

/// Fitted-Q iteration: `q_t` regresses `r_t + v_{t+1}(s_{t+1})` on `(s_t, a_t)`
/// monomials, backwards from `t = H - 1` (0-based).
pub fn fit_q(
    data: &Dataset,
    policy: &DeterministicPolicy,
    mode: NuisanceMode,
    kernel: Option<&ScaledKernel>,
    degree: usize,
    ridge: f64,
) -> Result<Vec<SieveModel>> {
    check_fit_args(data, degree)?;
    let kernel = mode_kernel(mode, kernel)?;
    let sieve = PolySieve::new(Arity::StateAction, degree)?;
    let h = data.horizon;
    let mut q: Vec<SieveModel> = Vec::with_capacity(h);
    for t in (0..h).rev() {
        let mut prob = RidgeProblem::new(sieve.clone(), 1);
        for tr in &data.trajectories {
            let mut y = tr.rewards[t];
            if let Some(next) = q.last() {
                let s1 = tr.states[t + 1];
                y += continuation(next, mode, kernel, s1, policy.action(s1));
            }
            prob.push(tr.states[t], tr.actions[t], &[y]);
        }
        q.push(prob.solve(ridge, &format!("q at t={t}"))?.remove(0));
    }
    q.reverse();
    Ok(q)
}

/// Gradient of the continuation value at `s`, written into `out`.
fn continuation_grad(
    q: &dyn ActionValue,
    dq: &[SieveModel],
    mode: NuisanceMode,
    kernel: Option<&ScaledKernel>,
    policy: &DeterministicPolicy,
    s: f64,
    grad_tau: &mut [f64],
    out: &mut [f64],
) {
    let tau = policy.action(s);
    policy.gradient_into(s, grad_tau);
    let q1 = match (mode, kernel) {
        (NuisanceMode::Kernel, Some(k)) => q.smooth_d1(s, tau, k),
        _ => q.d_action(s, tau),
    };
    for (i, o) in out.iter_mut().enumerate() {
        *o = continuation(&dq[i], mode, kernel, s, tau) + q1 * grad_tau[i];
    }
}

/// Theta-gradients of the q-functions by backward regression of the
/// continuation-value gradient. `dq[t][i]` is coordinate `i` at step `t`.
pub fn fit_dq(
    data: &Dataset,
    q: &[SieveModel],
    policy: &DeterministicPolicy,
    mode: NuisanceMode,
    kernel: Option<&ScaledKernel>,
    degree: usize,
    ridge: f64,
) -> Result<Vec<Vec<SieveModel>>> {
    check_fit_args(data, degree)?;
    let kernel = mode_kernel(mode, kernel)?;
    let h = data.horizon;
    if q.len() != h {
        return Err(Error::HorizonMismatch {
            data: h,
            nuisance: q.len(),
        });
    }
    let d = policy.dim();
    let sieve = PolySieve::new(Arity::StateAction, degree)?;
    let mut dq: Vec<Vec<SieveModel>> = Vec::with_capacity(h);
    dq.push(vec![SieveModel::zero(sieve.clone()); d]);
    let mut grad_tau = vec![0.0; d];
    let mut target = vec![0.0; d];
    for t in (0..h - 1).rev() {
        let next_dq = dq.last().expect("nonempty");
        let mut prob = RidgeProblem::new(sieve.clone(), d);
        for tr in &data.trajectories {
            continuation_grad(&q[t + 1], next_dq, mode, kernel, policy, tr.states[t + 1], &mut grad_tau, &mut target);
            prob.push(tr.states[t], tr.actions[t], &target);
        }
        dq.push(prob.solve(ridge, &format!("dq at t={t}"))?);
    }
    dq.reverse();
    Ok(dq)
}

/// Marginal density ratios of the kernel-smoothed policy: `w_j` regresses the
/// cumulative importance ratio through step `j - 1` on `s_j` monomials, with
/// `w_0 = 1`. Predictions are clipped when evaluated through
/// [`FoldNuisances`].
pub fn fit_w(
    data: &Dataset,
    policy: &DeterministicPolicy,
    kernel: &ScaledKernel,
    behavior: &dyn ConditionalDensity,
    degree: usize,
    ridge: f64,
) -> Result<Vec<SieveModel>> {
    check_fit_args(data, degree)?;
    let sieve = PolySieve::new(Arity::State, degree)?;
    let h = data.horizon;
    let mut w = vec![SieveModel::constant(sieve.clone(), 1.0)];
    let mut lambda = vec![1.0; data.len()];
    for j in 1..h {
        let mut prob = RidgeProblem::new(sieve.clone(), 1);
        for (lam, tr) in lambda.iter_mut().zip(&data.trajectories) {
            let (s, a) = (tr.states[j - 1], tr.actions[j - 1]);
            *lam *= kernel_ratio(kernel, behavior, s, a, policy.action(s));
            prob.push(tr.states[j], 0.0, &[*lam]);
        }
        w.push(prob.solve(ridge, &format!("w at t={j}"))?.remove(0));
    }
    Ok(w)
}

/// Theta-gradients of the marginal density ratios: coordinate `i` of `dw_j`
/// regresses the gradient of the cumulative ratio through step `j - 1` on
/// `s_j` monomials, with `dw_0 = 0`.
///
/// The gradient is carried by the product rule,
/// `grad lambda_j = grad lambda_{j-1} * rho_j + lambda_{j-1} * K'_h / pi_b * grad tau`,
/// which equals the cumulative ratio times the summed kernel scores without
/// ever dividing by `K_h`.
pub fn fit_dw(
    data: &Dataset,
    policy: &DeterministicPolicy,
    kernel: &ScaledKernel,
    behavior: &dyn ConditionalDensity,
    degree: usize,
    ridge: f64,
) -> Result<Vec<Vec<SieveModel>>> {
    check_fit_args(data, degree)?;
    let sieve = PolySieve::new(Arity::State, degree)?;
    let d = policy.dim();
    let h = data.horizon;
    let n = data.len();
    let mut dw = vec![vec![SieveModel::zero(sieve.clone()); d]];
    let mut lambda = vec![1.0; n];
    let mut grad = vec![0.0; n * d];
    let mut grad_tau = vec![0.0; d];
    for j in 1..h {
        let mut prob = RidgeProblem::new(sieve.clone(), d);
        for (idx, tr) in data.trajectories.iter().enumerate() {
            let (s, a) = (tr.states[j - 1], tr.actions[j - 1]);
            let tau = policy.action(s);
            let pb = behavior.density(s, a).max(DENSITY_FLOOR);
            let rho = kernel.eval(a - tau) / pb;
            let drho = kernel.eval_d1(a - tau) / pb;
            policy.gradient_into(s, &mut grad_tau);
            let g = &mut grad[idx * d..(idx + 1) * d];
            for i in 0..d {
                g[i] = g[i] * rho + lambda[idx] * drho * grad_tau[i];
            }
            lambda[idx] *= rho;
            prob.push(tr.states[j], 0.0, g);
        }
        dw.push(prob.solve(ridge, &format!("dw at t={j}"))?);
    }
    Ok(dw)
}

/// Gaussian behavior model: polynomial mean in the state and pooled residual
/// standard deviation.
pub fn fit_behavior(data: &Dataset, degree: usize, ridge: f64) -> Result<BehaviorModel> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot fit behavior on an empty dataset".into()));
    }
    let sieve = PolySieve::new(Arity::State, degree)?;
    let mut prob = RidgeProblem::new(sieve.clone(), 1);
    for tr in &data.trajectories {
        for (&s, &a) in tr.states.iter().zip(&tr.actions) {
            prob.push(s, 0.0, &[a]);
        }
    }
    let rows = prob.rows();
    let mean = prob.solve(ridge, "behavior mean")?.remove(0);
    let mut ss = 0.0;
    let mut scale = 0.0;
    for tr in &data.trajectories {
        for (&s, &a) in tr.states.iter().zip(&tr.actions) {
            let r = a - mean.eval_state(s);
            ss += r * r;
            scale += a * a;
        }
    }
    let dof = if rows > sieve.len() { rows - sieve.len() } else { rows };
    let var = ss / dof as f64;
    if !(var > 1e-24 * (1.0 + scale / rows as f64)) {
        return Err(Error::DegenerateBehavior);
    }
    BehaviorModel::new(mean.coef, var.sqrt(), false)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BehaviorSpec {
    /// Use the given density as is.
    Known { model: BehaviorModel },
    /// Fit a Gaussian model with polynomial mean of this degree on each
    /// training fold.
    Fitted { degree: usize },
}

/// Which nuisances to fit and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NuisanceConfig {
    #[serde(default = "default_degree")]
    pub degree: usize,
    /// Ridge penalty per training trajectory.
    #[serde(default = "default_ridge")]
    pub ridge_per_obs: f64,
    #[serde(default = "yes")]
    pub fit_dq: bool,
    #[serde(default = "yes")]
    pub fit_w: bool,
    #[serde(default = "yes")]
    pub fit_dw: bool,
}

fn default_degree() -> usize {
    2
}

fn default_ridge() -> f64 {
    1e-6
}

fn yes() -> bool {
    true
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        Self {
            degree: default_degree(),
            ridge_per_obs: default_ridge(),
            fit_dq: true,
            fit_w: true,
            fit_dw: true,
        }
    }
}

/// All nuisance models for one evaluation fold, trained on the other fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldNuisances {
    pub fold: usize,
    pub mode: NuisanceMode,
    /// Kernel used for kernel-mode q-functions and for the density ratios.
    pub kernel: ScaledKernel,
    pub q: Vec<SieveModel>,
    pub dq: Vec<Vec<SieveModel>>,
    pub w: Vec<SieveModel>,
    pub dw: Vec<Vec<SieveModel>>,
    pub behavior: BehaviorModel,
    /// Sorted indices of the training trajectories.
    pub trained_on: Vec<usize>,
}

impl FoldNuisances {
    #[allow(clippy::too_many_arguments)]
    pub fn fit(
        data: &Dataset,
        train: &[usize],
        fold: usize,
        policy: &DeterministicPolicy,
        mode: NuisanceMode,
        kernel: &ScaledKernel,
        behavior: &BehaviorSpec,
        config: &NuisanceConfig,
    ) -> Result<Self> {
        let sub = data.subset(train);
        let ridge = config.ridge_per_obs * train.len() as f64;
        let deg = config.degree;
        let behavior = match behavior {
            BehaviorSpec::Known { model } => model.clone(),
            BehaviorSpec::Fitted { degree } => fit_behavior(&sub, *degree, ridge)?,
        };
        let q = fit_q(&sub, policy, mode, Some(kernel), deg, ridge)?;
        let dq = if config.fit_dq {
            fit_dq(&sub, &q, policy, mode, Some(kernel), deg, ridge)?
        } else {
            Vec::new()
        };
        let w = if config.fit_w {
            fit_w(&sub, policy, kernel, &behavior, deg, ridge)?
        } else {
            Vec::new()
        };
        let dw = if config.fit_dw {
            fit_dw(&sub, policy, kernel, &behavior, deg, ridge)?
        } else {
            Vec::new()
        };
        let mut trained_on = train.to_vec();
        trained_on.sort_unstable();
        Ok(Self {
            fold,
            mode,
            kernel: *kernel,
            q,
            dq,
            w,
            dw,
            behavior,
            trained_on,
        })
    }
}

impl NuisanceModels for FoldNuisances {
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
        self.dq
            .first()
            .or(self.dw.first())
            .map_or(0, Vec::len)
    }

    fn dq(&self, t: usize, i: usize) -> Option<&dyn ActionValue> {
        self.dq.get(t).map(|v| &v[i] as &dyn ActionValue)
    }

    fn w(&self, t: usize, s: f64) -> Option<f64> {
        self.w
            .get(t)
            .map(|m| m.eval_state(s).clamp(0.0, RATIO_CEILING))
    }

    fn dw(&self, t: usize, i: usize, s: f64) -> Option<f64> {
        self.dw.get(t).map(|v| v[i].eval_state(s))
    }

    fn training_indices(&self) -> Option<&[usize]> {
        Some(&self.trained_on)
    }
}

/// Maps each trajectory to the nuisance models used to evaluate it.
pub trait NuisanceProvider: Sync {
    fn horizon(&self) -> usize;

    fn mode(&self) -> NuisanceMode;

    fn for_trajectory(&self, i: usize) -> &dyn NuisanceModels;

    /// Fails if any trajectory would be evaluated by models trained on it.
    fn check_cross_fit(&self, n: usize) -> Result<()>;
}

impl<M: NuisanceModels> NuisanceProvider for M {
    fn horizon(&self) -> usize {
        NuisanceModels::horizon(self)
    }

    fn mode(&self) -> NuisanceMode {
        NuisanceModels::mode(self)
    }

    fn for_trajectory(&self, _i: usize) -> &dyn NuisanceModels {
        self
    }

    fn check_cross_fit(&self, _n: usize) -> Result<()> {
        Ok(())
    }
}

/// Cross-fitted nuisances: `folds[k]` evaluates the trajectories in
/// `split[k]` and was trained on the other fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceSet {
    pub split: [Vec<usize>; 2],
    pub folds: [FoldNuisances; 2],
    /// `fold_of[i]` is the evaluation fold of trajectory `i`.
    fold_of: Vec<u8>,
}

impl NuisanceSet {
    pub fn fit(
        data: &Dataset,
        policy: &DeterministicPolicy,
        mode: NuisanceMode,
        kernel: &ScaledKernel,
        behavior: &BehaviorSpec,
        config: &NuisanceConfig,
        seed: u64,
    ) -> Result<Self> {
        let split = crossfold_split(data.len(), seed)?;
        let fit = |k: usize| FoldNuisances::fit(data, &split[1 - k], k, policy, mode, kernel, behavior, config);
        let (a, b) = rayon::join(|| fit(0), || fit(1));
        Self::from_parts(split.clone(), [a?, b?])
    }

    pub fn from_parts(split: [Vec<usize>; 2], folds: [FoldNuisances; 2]) -> Result<Self> {
        let n = split[0].len() + split[1].len();
        let mut fold_of = vec![u8::MAX; n];
        for (k, idx) in split.iter().enumerate() {
            for &i in idx {
                if i >= n || fold_of[i] != u8::MAX {
                    return Err(Error::InvalidArgument("folds must partition 0..n".into()));
                }
                fold_of[i] = k as u8;
            }
        }
        if folds[0].q.len() != folds[1].q.len() {
            return Err(Error::HorizonMismatch {
                data: folds[0].q.len(),
                nuisance: folds[1].q.len(),
            });
        }
        Ok(Self { split, folds, fold_of })
    }

    pub fn fold_of(&self, i: usize) -> usize {
        self.fold_of[i] as usize
    }

    pub fn to_text(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let raw: NuisanceSet = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        Self::from_parts(raw.split, raw.folds)
    }
}

impl NuisanceProvider for NuisanceSet {
    fn horizon(&self) -> usize {
        self.folds[0].q.len()
    }

    fn mode(&self) -> NuisanceMode {
        self.folds[0].mode
    }

    fn for_trajectory(&self, i: usize) -> &dyn NuisanceModels {
        &self.folds[self.fold_of(i)]
    }

    fn check_cross_fit(&self, n: usize) -> Result<()> {
        if n != self.fold_of.len() {
            return Err(Error::InvalidArgument(format!(
                "nuisances were split for n={}, data has n={n}",
                self.fold_of.len()
            )));
        }
        for i in 0..n {
            let k = self.fold_of(i);
            if self.folds[k].trained_on.binary_search(&i).is_ok() {
                return Err(Error::CrossFitViolation { fold: k, trajectory: i });
            }
        }
        Ok(())
    }
}

/// A provider viewed through a trajectory resample: trajectory `i` of the
/// resampled data is trajectory `map[i]` of the `original_n` trajectories the
/// provider was built for.
pub struct ResampledNuisances<'a, P: NuisanceProvider + ?Sized> {
    pub inner: &'a P,
    pub map: &'a [usize],
    pub original_n: usize,
}

impl<P: NuisanceProvider + ?Sized> NuisanceProvider for ResampledNuisances<'_, P> {
    fn horizon(&self) -> usize {
        self.inner.horizon()
    }

    fn mode(&self) -> NuisanceMode {
        self.inner.mode()
    }

    fn for_trajectory(&self, i: usize) -> &dyn NuisanceModels {
        self.inner.for_trajectory(self.map[i])
    }

    fn check_cross_fit(&self, n: usize) -> Result<()> {
        if n != self.map.len() || self.map.iter().any(|&i| i >= self.original_n) {
            return Err(Error::InvalidArgument("resample map does not match data".into()));
        }
        self.inner.check_cross_fit(self.original_n)
    }
}
