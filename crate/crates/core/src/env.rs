//! Linear-Gaussian MDP environments, behavior and deterministic policies,
//! trajectory sampling, and Monte Carlo ground-truth oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::kernel::horner;
use crate::stats::NeumaierSum;

/// Rollouts per parallel work unit in the Monte Carlo oracles. Fixed so that
/// the reduction order does not depend on the thread count.
const MC_CHUNK: usize = 4096;

/// RNG for replication unit `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derives a child seed; used to give nested experiment stages independent
/// streams.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitState {
    Fixed { value: f64 },
    Normal { mean: f64, std: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionForm {
    /// `s' = coeff_a * a + coeff_s * s + Normal(0, noise_std^2)`
    LinearGaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardForm {
    /// `r_t = -s_{t+1}^2`
    NegSquare,
    /// `r_t = -|s_{t+1}|`; no closed-form q-function.
    NegAbs,
}

/// Missing fields deserialize to the values of [`EnvConfig::default`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub horizon: usize,
    pub transition: TransitionForm,
    pub reward: RewardForm,
    pub coeff_a: f64,
    pub coeff_s: f64,
    pub noise_std: f64,
    pub init: InitState,
}

impl Default for EnvConfig {
    /// The standard environment with horizon 5.
    fn default() -> Self {
        Self::standard(5)
    }
}

impl EnvConfig {
    /// `s_{t+1} = a_t - s_t + Normal(0, 0.3^2)`, `r_t = -s_{t+1}^2`, `s_1 = 0`.
    pub fn standard(horizon: usize) -> Self {
        Self {
            horizon,
            transition: TransitionForm::LinearGaussian,
            reward: RewardForm::NegSquare,
            coeff_a: 1.0,
            coeff_s: -1.0,
            noise_std: 0.3,
            init: InitState::Fixed { value: 0.0 },
        }
    }

    /// Single-step variant with `s_1 ~ Normal(0, 1)`.
    pub fn bandit(noise_std: f64) -> Self {
        Self {
            horizon: 1,
            noise_std,
            init: InitState::Normal {
                mean: 0.0,
                std: 1.0,
            },
            ..Self::standard(1)
        }
    }

    pub fn with_horizon(mut self, horizon: usize) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be >= 1".into()));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::InvalidArgument("noise_std must be finite and >= 0".into()));
        }
        if !self.coeff_a.is_finite() || !self.coeff_s.is_finite() {
            return Err(Error::InvalidArgument("transition coefficients must be finite".into()));
        }
        if let InitState::Normal { mean, std } = self.init {
            if !mean.is_finite() || !(std >= 0.0) {
                return Err(Error::InvalidArgument("invalid initial-state distribution".into()));
            }
        }
        Ok(())
    }

    /// Short identifier stored alongside simulated datasets.
    pub fn id(&self) -> String {
        format!(
            "lg(a={},s={},sd={},H={})",
            self.coeff_a, self.coeff_s, self.noise_std, self.horizon
        )
    }

    #[inline]
    fn initial(&self, z: f64) -> f64 {
        match self.init {
            InitState::Fixed { value } => value,
            InitState::Normal { mean, std } => mean + std * z,
        }
    }

    #[inline]
    fn step(&self, s: f64, a: f64, z: f64) -> (f64, f64) {
        let next = self.coeff_a * a + self.coeff_s * s + self.noise_std * z;
        let reward = match self.reward {
            RewardForm::NegSquare => -next * next,
            RewardForm::NegAbs => -next.abs(),
        };
        (next, reward)
    }
}

/// Gaussian conditional action density `Normal(m(s), std^2)` with `m` a
/// polynomial in the state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BehaviorModel {
    /// Coefficients of the mean polynomial, constant term first.
    pub mean: Vec<f64>,
    pub std: f64,
    /// Whether this is the true logging policy rather than an estimate.
    #[serde(default)]
    pub known: bool,
}

impl BehaviorModel {
    /// `Normal(mean_coeff * s, std^2)`, flagged as known.
    pub fn linear(mean_coeff: f64, std: f64) -> Result<Self> {
        Self::new(vec![0.0, mean_coeff], std, true)
    }

    pub fn new(mean: Vec<f64>, std: f64, known: bool) -> Result<Self> {
        if !(std > 0.0) || !std.is_finite() {
            return Err(Error::InvalidArgument(format!("behavior std must be > 0, got {std}")));
        }
        if mean.is_empty() || mean.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument("behavior mean must be finite".into()));
        }
        Ok(Self { mean, std, known })
    }

    /// Slope on the state, if the mean is at most linear.
    pub fn mean_coeff(&self) -> f64 {
        self.mean.get(1).copied().unwrap_or(0.0)
    }

    #[inline]
    pub fn mean_at(&self, s: f64) -> f64 {
        horner(&self.mean, s)
    }

    #[inline]
    pub fn density(&self, s: f64, a: f64) -> f64 {
        let z = (a - self.mean_at(s)) / self.std;
        (-0.5 * z * z).exp() / (self.std * (2.0 * std::f64::consts::PI).sqrt())
    }

    /// `d/da` of the density.
    #[inline]
    pub fn density_d_action(&self, s: f64, a: f64) -> f64 {
        let z = (a - self.mean_at(s)) / self.std;
        -z / self.std * self.density(s, a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyForm {
    /// `tau(s) = theta_0 * s`
    Linear,
    /// `tau(s) = theta_0 + theta_1 * s`
    Affine,
}

impl PolicyForm {
    pub fn dim(self) -> usize {
        match self {
            Self::Linear => 1,
            Self::Affine => 2,
        }
    }
}

/// Deterministic policy `a = tau_theta(s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeterministicPolicy {
    theta: Vec<f64>,
    form: PolicyForm,
}

impl DeterministicPolicy {
    pub fn new(form: PolicyForm, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != form.dim() {
            return Err(Error::InvalidArgument(format!(
                "{form:?} policy needs {} parameters, got {}",
                form.dim(),
                theta.len()
            )));
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidArgument("policy parameters must be finite".into()));
        }
        Ok(Self { theta, form })
    }

    pub fn linear(theta: f64) -> Self {
        Self {
            theta: vec![theta],
            form: PolicyForm::Linear,
        }
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn form(&self) -> PolicyForm {
        self.form
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn with_theta(&self, theta: Vec<f64>) -> Result<Self> {
        Self::new(self.form, theta)
    }

    /// `(c0, c1)` with `tau(s) = c0 + c1 * s`.
    pub fn affine_coefficients(&self) -> (f64, f64) {
        match self.form {
            PolicyForm::Linear => (0.0, self.theta[0]),
            PolicyForm::Affine => (self.theta[0], self.theta[1]),
        }
    }

    #[inline]
    pub fn action(&self, s: f64) -> f64 {
        let (c0, c1) = self.affine_coefficients();
        c0 + c1 * s
    }

    /// Writes `grad_theta tau(s)` into `out` (length `dim()`).
    #[inline]
    pub fn gradient_into(&self, s: f64, out: &mut [f64]) {
        match self.form {
            PolicyForm::Linear => out[0] = s,
            PolicyForm::Affine => {
                out[0] = 1.0;
                out[1] = s;
            }
        }
    }

    pub fn gradient(&self, s: f64) -> Vec<f64> {
        let mut g = vec![0.0; self.dim()];
        self.gradient_into(s, &mut g);
        g
    }
}

/// Anything that can choose actions during simulation.
pub trait ActionSource: Sync {
    fn act<R: Rng + ?Sized>(&self, s: f64, rng: &mut R) -> f64;
}

impl ActionSource for BehaviorModel {
    fn act<R: Rng + ?Sized>(&self, s: f64, rng: &mut R) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        self.mean_at(s) + self.std * z
    }
}

impl ActionSource for DeterministicPolicy {
    fn act<R: Rng + ?Sized>(&self, s: f64, _rng: &mut R) -> f64 {
        self.action(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
}

impl Trajectory {
    pub fn new(states: Vec<f64>, actions: Vec<f64>, rewards: Vec<f64>) -> Result<Self> {
        if states.is_empty() || states.len() != actions.len() || states.len() != rewards.len() {
            return Err(Error::InvalidArgument(
                "trajectory arrays must share a nonzero length".into(),
            ));
        }
        for (t, ((s, a), r)) in states.iter().zip(&actions).zip(&rewards).enumerate() {
            if !s.is_finite() || !a.is_finite() || !r.is_finite() {
                return Err(Error::NonFinite {
                    trajectory: 0,
                    t,
                    what: "entry",
                });
            }
        }
        Ok(Self {
            states,
            actions,
            rewards,
        })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub horizon: usize,
    pub seed: u64,
    pub env_id: String,
}

impl Dataset {
    pub fn new(trajectories: Vec<Trajectory>, seed: u64, env_id: impl Into<String>) -> Result<Self> {
        let horizon = trajectories
            .first()
            .map(Trajectory::len)
            .ok_or_else(|| Error::InvalidArgument("dataset must be nonempty".into()))?;
        if let Some(i) = trajectories.iter().position(|tr| tr.len() != horizon) {
            return Err(Error::InvalidArgument(format!(
                "trajectory {i} has length {}, expected {horizon}",
                trajectories[i].len()
            )));
        }
        Ok(Self {
            trajectories,
            horizon,
            seed,
            env_id: env_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Sub-dataset of the given trajectory indices (duplicates allowed).
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            trajectories: indices.iter().map(|&i| self.trajectories[i].clone()).collect(),
            horizon: self.horizon,
            seed: self.seed,
            env_id: self.env_id.clone(),
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["traj_id", "t", "state", "action", "reward"])?;
        for (i, tr) in self.trajectories.iter().enumerate() {
            for t in 0..tr.len() {
                w.write_record(&[
                    i.to_string(),
                    (t + 1).to_string(),
                    tr.states[t].to_string(),
                    tr.actions[t].to_string(),
                    tr.rewards[t].to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the `traj_id,t,state,action,reward` format. Rows may appear in
    /// any order; every trajectory must cover `t = 1..H`.
    pub fn read_csv<R: Read>(reader: R, env_id: impl Into<String>) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers()?.clone();
        let expected = ["traj_id", "t", "state", "action", "reward"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::Parse(format!("unexpected header {headers:?}")));
        }
        let mut rows: Vec<(usize, usize, f64, f64, f64)> = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let field = |k: usize| -> Result<&str> {
                rec.get(k)
                    .ok_or_else(|| Error::Parse(format!("row {}: missing field {k}", line + 2)))
            };
            let int = |k: usize| -> Result<usize> {
                field(k)?
                    .trim()
                    .parse()
                    .map_err(|e| Error::Parse(format!("row {}: {e}", line + 2)))
            };
            let real = |k: usize| -> Result<f64> {
                field(k)?
                    .trim()
                    .parse()
                    .map_err(|e| Error::Parse(format!("row {}: {e}", line + 2)))
            };
            rows.push((int(0)?, int(1)?, real(2)?, real(3)?, real(4)?));
        }
        rows.sort_by_key(|r| (r.0, r.1));
        let mut trajectories = Vec::new();
        let mut current: Option<(usize, Vec<f64>, Vec<f64>, Vec<f64>)> = None;
        for (id, t, s, a, rw) in rows {
            match current.as_mut() {
                Some((cid, ss, aa, rr)) if *cid == id => {
                    if t != ss.len() + 1 {
                        return Err(Error::Parse(format!("trajectory {id}: missing or repeated t={t}")));
                    }
                    ss.push(s);
                    aa.push(a);
                    rr.push(rw);
                }
                _ => {
                    if let Some((_, ss, aa, rr)) = current.take() {
                        trajectories.push(Trajectory::new(ss, aa, rr)?);
                    }
                    if t != 1 {
                        return Err(Error::Parse(format!("trajectory {id} does not start at t=1")));
                    }
                    current = Some((id, vec![s], vec![a], vec![rw]));
                }
            }
        }
        if let Some((_, ss, aa, rr)) = current {
            trajectories.push(Trajectory::new(ss, aa, rr)?);
        }
        Dataset::new(trajectories, 0, env_id)
    }
}

fn simulate_one<P: ActionSource, R: Rng>(
    env: &EnvConfig,
    policy: &P,
    rng: &mut R,
    index: usize,
) -> Result<Trajectory> {
    let h = env.horizon;
    let mut states = Vec::with_capacity(h);
    let mut actions = Vec::with_capacity(h);
    let mut rewards = Vec::with_capacity(h);
    let mut s = env.initial(rng.sample(StandardNormal));
    for t in 0..h {
        let a = policy.act(s, rng);
        let (next, r) = env.step(s, a, rng.sample(StandardNormal));
        if !s.is_finite() || !a.is_finite() || !r.is_finite() {
            return Err(Error::NonFinite {
                trajectory: index,
                t,
                what: if !s.is_finite() { "state" } else if !a.is_finite() { "action" } else { "reward" },
            });
        }
        states.push(s);
        actions.push(a);
        rewards.push(r);
        s = next;
    }
    Ok(Trajectory {
        states,
        actions,
        rewards,
    })
}

/// Samples `n` i.i.d. trajectories. Trajectory `i` draws from its own RNG
/// stream, so the result is bit-identical for a given seed regardless of
/// thread count.
pub fn simulate<P: ActionSource>(env: &EnvConfig, policy: &P, n: usize, seed: u64) -> Result<Dataset> {
    env.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    let trajectories = (0..n)
        .into_par_iter()
        .map(|i| simulate_one(env, policy, &mut stream_rng(seed, i as u64), i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        trajectories,
        horizon: env.horizon,
        seed,
        env_id: env.id(),
    })
}

/// Return of an on-policy rollout driven by fixed noise: `noise[0]` feeds the
/// initial state and `noise[t + 1]` the transition at step `t`.
fn rollout_return(env: &EnvConfig, policy: &DeterministicPolicy, noise: &[f64]) -> f64 {
    let mut s = env.initial(noise[0]);
    let mut total = 0.0;
    for z in &noise[1..=env.horizon] {
        let (next, r) = env.step(s, policy.action(s), *z);
        total += r;
        s = next;
    }
    total
}

fn fill_noise<R: Rng>(rng: &mut R, buf: &mut [f64]) {
    for z in buf.iter_mut() {
        *z = rng.sample(StandardNormal);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueEstimate {
    pub value: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientEstimate {
    pub gradient: Vec<f64>,
    pub se: Vec<f64>,
}

/// Mean and sum of squares over `n_mc` rollouts of `f(noise)`, with fixed
/// chunking so results do not depend on scheduling.
fn mc_moments<F>(env: &EnvConfig, n_mc: usize, seed: u64, outputs: usize, f: F) -> Vec<(f64, f64)>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    let chunks = n_mc.div_ceil(MC_CHUNK);
    let partials: Vec<Vec<(NeumaierSum, NeumaierSum)>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![(NeumaierSum::default(), NeumaierSum::default()); outputs];
            let mut noise = vec![0.0; env.horizon + 1];
            let mut out = vec![0.0; outputs];
            let end = ((c + 1) * MC_CHUNK).min(n_mc);
            for i in c * MC_CHUNK..end {
                let mut rng = stream_rng(seed, i as u64);
                fill_noise(&mut rng, &mut noise);
                f(&noise, &mut out);
                for (a, &v) in acc.iter_mut().zip(&out) {
                    a.0.add(v);
                    a.1.add(v * v);
                }
            }
            acc
        })
        .collect();
    (0..outputs)
        .map(|k| {
            let mut sum = NeumaierSum::default();
            let mut sq = NeumaierSum::default();
            for p in &partials {
                sum.add(p[k].0.total());
                sq.add(p[k].1.total());
            }
            (sum.total(), sq.total())
        })
        .collect()
}

fn mean_se(sum: f64, sq: f64, n: usize) -> (f64, f64) {
    let nf = n as f64;
    let mean = sum / nf;
    let var = ((sq - nf * mean * mean) / (nf - 1.0)).max(0.0);
    (mean, (var / nf).sqrt())
}

/// Monte Carlo value of a deterministic policy from on-policy rollouts.
pub fn oracle_value(env: &EnvConfig, policy: &DeterministicPolicy, n_mc: usize, seed: u64) -> Result<ValueEstimate> {
    env.validate()?;
    if n_mc < 2 {
        return Err(Error::InvalidArgument("n_mc must be >= 2".into()));
    }
    let m = mc_moments(env, n_mc, seed, 1, |noise, out| {
        out[0] = rollout_return(env, policy, noise);
    });
    let (value, se) = mean_se(m[0].0, m[0].1, n_mc);
    Ok(ValueEstimate { value, se })
}

/// Monte Carlo estimate of `J(a) - J(b)` from paired rollouts with common
/// random numbers.
pub fn oracle_value_difference(
    env: &EnvConfig,
    a: &DeterministicPolicy,
    b: &DeterministicPolicy,
    n_mc: usize,
    seed: u64,
) -> Result<ValueEstimate> {
    env.validate()?;
    if n_mc < 2 {
        return Err(Error::InvalidArgument("n_mc must be >= 2".into()));
    }
    let m = mc_moments(env, n_mc, seed, 1, |noise, out| {
        out[0] = rollout_return(env, a, noise) - rollout_return(env, b, noise);
    });
    let (value, se) = mean_se(m[0].0, m[0].1, n_mc);
    Ok(ValueEstimate { value, se })
}

/// Central finite difference of the Monte Carlo value in each coordinate of
/// theta, with common random numbers on both sides.
pub fn oracle_gradient(
    env: &EnvConfig,
    policy: &DeterministicPolicy,
    n_mc: usize,
    delta: f64,
    seed: u64,
) -> Result<GradientEstimate> {
    env.validate()?;
    if n_mc < 2 {
        return Err(Error::InvalidArgument("n_mc must be >= 2".into()));
    }
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument("delta must be > 0".into()));
    }
    let d = policy.dim();
    let shifted: Vec<(DeterministicPolicy, DeterministicPolicy)> = (0..d)
        .map(|i| {
            let mut up = policy.theta().to_vec();
            let mut dn = policy.theta().to_vec();
            up[i] += delta;
            dn[i] -= delta;
            Ok((policy.with_theta(up)?, policy.with_theta(dn)?))
        })
        .collect::<Result<_>>()?;
    let m = mc_moments(env, n_mc, seed, d, |noise, out| {
        for (o, (up, dn)) in out.iter_mut().zip(&shifted) {
            *o = (rollout_return(env, up, noise) - rollout_return(env, dn, noise)) / (2.0 * delta);
        }
    });
    let (gradient, se) = m.iter().map(|&(s, q)| mean_se(s, q, n_mc)).unzip();
    Ok(GradientEstimate { gradient, se })
}
