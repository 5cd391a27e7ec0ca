//! Exactly enumerable test problems shared by the integration tests.
#![allow(dead_code)]

use detpol::env::{Dataset, DeterministicPolicy, Trajectory};
use detpol::kernel::ScaledKernel;
use detpol::models::{ActionValue, ConditionalDensity, NuisanceMode, NuisanceModels};

pub const STATES: [f64; 3] = [-1.0, 0.0, 1.0];
pub const ACTIONS: [f64; 5] = [-1.0, -0.5, 0.0, 0.5, 1.0];
pub const REWARD_SPREAD: f64 = 0.5;

fn state_index(s: f64) -> usize {
    STATES.iter().position(|&x| x == s).expect("state on the grid")
}

fn action_index(a: f64) -> Option<usize> {
    ACTIONS.iter().position(|&x| x == a)
}

/// Softmax behavior over the action grid, defined for any real action so
/// that it can also be evaluated off the grid.
#[derive(Debug, Clone, Copy)]
pub struct GridBehavior;

impl GridBehavior {
    fn score(s: f64, a: f64) -> f64 {
        (-(a - 0.3 * s).powi(2) - 0.2 * a).exp()
    }

    fn norm(s: f64) -> f64 {
        ACTIONS.iter().map(|&a| Self::score(s, a)).sum()
    }
}

impl ConditionalDensity for GridBehavior {
    fn density(&self, s: f64, a: f64) -> f64 {
        Self::score(s, a) / Self::norm(s)
    }

    fn d_action(&self, s: f64, a: f64) -> f64 {
        self.density(s, a) * (-2.0 * (a - 0.3 * s) - 0.2)
    }
}

/// Three states, five actions, two reward outcomes per step, horizon 2 (or 1
/// for the bandit variant). Integrals over actions are sums over the grid.
#[derive(Debug, Clone)]
pub struct TabularMdp {
    pub horizon: usize,
    pub p0: [f64; 3],
}

impl TabularMdp {
    pub fn new(horizon: usize) -> Self {
        Self {
            horizon,
            p0: [0.3, 0.45, 0.25],
        }
    }

    /// Conditional mean reward, smooth in the action.
    pub fn reward_mean(&self, t: usize, s: f64, a: f64) -> f64 {
        -(a - 0.5 * s).powi(2) + 0.3 * s + 0.1 * t as f64 + 0.2 * a
    }

    /// Probability of the upper reward outcome.
    fn p_hi(&self, s: f64, a: f64) -> f64 {
        0.35 + 0.1 * s + 0.05 * a
    }

    /// The two reward outcomes and their probabilities.
    pub fn rewards(&self, t: usize, s: f64, a: f64) -> [(f64, f64); 2] {
        let p = self.p_hi(s, a);
        // outcomes chosen so that the mean is `reward_mean`
        let m = self.reward_mean(t, s, a);
        let hi = m + 2.0 * REWARD_SPREAD * (1.0 - p);
        let lo = m - 2.0 * REWARD_SPREAD * p;
        [(hi, p), (lo, 1.0 - p)]
    }

    pub fn transition(&self, s: f64, a: f64) -> [f64; 3] {
        let logits = STATES.map(|x| -(x - 0.6 * a + 0.2 * s).powi(2));
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        logits.map(|l| l.exp() / z)
    }

    /// Every trajectory with its probability under the behavior policy.
    pub fn enumerate(&self) -> Vec<(Trajectory, f64)> {
        let mut out = Vec::new();
        for (i, &s) in STATES.iter().enumerate() {
            self.extend(vec![], vec![], vec![], s, self.p0[i], &mut out);
        }
        out
    }

    fn extend(
        &self,
        states: Vec<f64>,
        actions: Vec<f64>,
        rewards: Vec<f64>,
        s: f64,
        prob: f64,
        out: &mut Vec<(Trajectory, f64)>,
    ) {
        let t = states.len();
        for &a in &ACTIONS {
            let pa = GridBehavior.density(s, a);
            for (r, pr) in self.rewards(t, s, a) {
                let mut st = states.clone();
                let mut ac = actions.clone();
                let mut rw = rewards.clone();
                st.push(s);
                ac.push(a);
                rw.push(r);
                let p = prob * pa * pr;
                if t + 1 == self.horizon {
                    out.push((Trajectory::new(st, ac, rw).unwrap(), p));
                } else {
                    for (k, &s2) in STATES.iter().enumerate() {
                        let ps = self.transition(s, a)[k];
                        self.extend(st.clone(), ac.clone(), rw.clone(), s2, p * ps, out);
                    }
                }
            }
        }
    }

    pub fn dataset(&self) -> (Dataset, Vec<f64>) {
        let (trajs, probs): (Vec<_>, Vec<_>) = self.enumerate().into_iter().unzip();
        (Dataset::new(trajs, 0, "tabular").unwrap(), probs)
    }

    /// Exact nuisances of the kernel-smoothed policy (counting measure) and
    /// their theta-gradients.
    pub fn kernel_nuisances(&self, policy: &DeterministicPolicy, kernel: &ScaledKernel) -> TabularNuisances {
        let h = self.horizon;
        let d = policy.dim();
        let mut q = vec![Table::zero(); h];
        let mut dq = vec![vec![Table::zero(); d]; h];
        // v and grad v at step t + 1, by state index
        let mut v_next = [0.0; 3];
        let mut dv_next = vec![[0.0; 3]; d];
        for t in (0..h).rev() {
            for (i, &s) in STATES.iter().enumerate() {
                for (j, &a) in ACTIONS.iter().enumerate() {
                    let p = self.transition(s, a);
                    q[t].0[i][j] = self.reward_mean(t, s, a) + (0..3).map(|k| p[k] * v_next[k]).sum::<f64>();
                    for c in 0..d {
                        dq[t][c].0[i][j] = (0..3).map(|k| p[k] * dv_next[c][k]).sum();
                    }
                }
            }
            let mut v = [0.0; 3];
            let mut dv = vec![[0.0; 3]; d];
            for (i, &s) in STATES.iter().enumerate() {
                let tau = policy.action(s);
                let g = policy.gradient(s);
                v[i] = q[t].smooth(s, tau, kernel);
                let q1 = q[t].smooth_d1(s, tau, kernel);
                for c in 0..d {
                    dv[c][i] = dq[t][c].smooth(s, tau, kernel) + q1 * g[c];
                }
            }
            v_next = v;
            dv_next = dv;
        }

        // marginal state weights under the smoothed policy and behavior
        let mut w = vec![[1.0; 3]];
        let mut dw = vec![vec![[0.0; 3]; d]];
        let mut pe = self.p0;
        let mut dpe = vec![[0.0; 3]; d];
        let mut pbm = self.p0;
        for _ in 1..h {
            let mut ne = [0.0; 3];
            let mut dne = vec![[0.0; 3]; d];
            let mut nb = [0.0; 3];
            for (i, &s) in STATES.iter().enumerate() {
                let tau = policy.action(s);
                let g = policy.gradient(s);
                for &a in &ACTIONS {
                    let p = self.transition(s, a);
                    let k = kernel.eval(a - tau);
                    let k1 = kernel.eval_d1(a - tau);
                    let b = GridBehavior.density(s, a);
                    for m in 0..3 {
                        ne[m] += pe[i] * k * p[m];
                        nb[m] += pbm[i] * b * p[m];
                        for c in 0..d {
                            dne[c][m] += (dpe[c][i] * k + pe[i] * k1 * g[c]) * p[m];
                        }
                    }
                }
            }
            w.push([0, 1, 2].map(|m| ne[m] / nb[m]));
            dw.push((0..d).map(|c| [0, 1, 2].map(|m| dne[c][m] / nb[m])).collect());
            pe = ne;
            dpe = dne;
            pbm = nb;
        }
        TabularNuisances {
            q,
            dq,
            w,
            dw,
            behavior: GridBehavior,
        }
    }

    /// Exact value of the kernel-smoothed policy, by forward recursion over
    /// the unnormalized state weights.
    pub fn kernel_value(&self, policy: &DeterministicPolicy, kernel: &ScaledKernel) -> f64 {
        let mut weight = self.p0;
        let mut total = 0.0;
        for t in 0..self.horizon {
            let mut next = [0.0; 3];
            for (i, &s) in STATES.iter().enumerate() {
                for &a in &ACTIONS {
                    let k = kernel.eval(a - policy.action(s));
                    total += weight[i] * k * self.reward_mean(t, s, a);
                    let p = self.transition(s, a);
                    for m in 0..3 {
                        next[m] += weight[i] * k * p[m];
                    }
                }
            }
            weight = next;
        }
        total
    }
}

/// A function on the state-action grid; kernel integrals are grid sums.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Table(pub [[f64; 5]; 3]);

impl Table {
    pub fn zero() -> Self {
        Self([[0.0; 5]; 3])
    }

    pub fn shifted(&self, by: f64) -> Self {
        Self(self.0.map(|row| row.map(|x| x + by)))
    }
}

impl ActionValue for Table {
    fn value(&self, s: f64, a: f64) -> f64 {
        match action_index(a) {
            Some(j) => self.0[state_index(s)][j],
            None => f64::NAN,
        }
    }

    fn d_action(&self, _s: f64, _a: f64) -> f64 {
        f64::NAN
    }

    fn smooth(&self, s: f64, center: f64, kernel: &ScaledKernel) -> f64 {
        let row = &self.0[state_index(s)];
        ACTIONS.iter().zip(row).map(|(&a, v)| v * kernel.eval(a - center)).sum()
    }

    fn smooth_d1(&self, s: f64, center: f64, kernel: &ScaledKernel) -> f64 {
        let row = &self.0[state_index(s)];
        ACTIONS.iter().zip(row).map(|(&a, v)| v * kernel.eval_d1(a - center)).sum()
    }
}

#[derive(Debug, Clone)]
pub struct TabularNuisances {
    pub q: Vec<Table>,
    pub dq: Vec<Vec<Table>>,
    /// `w[t][state index]`
    pub w: Vec<[f64; 3]>,
    pub dw: Vec<Vec<[f64; 3]>>,
    pub behavior: GridBehavior,
}

impl NuisanceModels for TabularNuisances {
    fn horizon(&self) -> usize {
        self.q.len()
    }

    fn mode(&self) -> NuisanceMode {
        NuisanceMode::Kernel
    }

    fn q(&self, t: usize) -> &dyn ActionValue {
        &self.q[t]
    }

    fn behavior(&self) -> &dyn ConditionalDensity {
        &self.behavior
    }

    fn dim(&self) -> usize {
        self.dq[0].len()
    }

    fn dq(&self, t: usize, i: usize) -> Option<&dyn ActionValue> {
        Some(&self.dq[t][i])
    }

    fn w(&self, t: usize, s: f64) -> Option<f64> {
        Some(self.w[t][state_index(s)])
    }

    fn dw(&self, t: usize, i: usize, s: f64) -> Option<f64> {
        Some(self.dw[t][i][state_index(s)])
    }
}

/// `sum_i p_i x_i`
pub fn expectation(values: impl IntoIterator<Item = f64>, probs: &[f64]) -> f64 {
    values.into_iter().zip(probs).map(|(v, p)| v * p).sum()
}

/// The grid kernel used throughout: wide enough that every action carries
/// weight.
pub fn grid_kernel() -> ScaledKernel {
    ScaledKernel::gaussian(0.7).unwrap()
}

pub fn grid_policy(theta: f64) -> DeterministicPolicy {
    DeterministicPolicy::linear(theta)
}
