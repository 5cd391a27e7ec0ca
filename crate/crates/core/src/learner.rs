//! Projected gradient ascent on the policy parameters.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::bandwidth::{BandwidthGrid, BandwidthSelection};
use crate::env::{oracle_gradient, Dataset, DeterministicPolicy, EnvConfig, PolicyForm};
use crate::error::{Error, Result};
use crate::estimators::EstimateReport;
use crate::pipeline::Recipe;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AscentConfig {
    pub theta_init: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
}

fn default_step() -> f64 {
    0.05
}

fn default_iterations() -> usize {
    50
}

impl AscentConfig {
    /// One-dimensional ascent from `theta_init` inside `[lo, hi]`.
    pub fn scalar(theta_init: f64, lo: f64, hi: f64) -> Self {
        Self {
            theta_init: vec![theta_init],
            lower: vec![lo],
            upper: vec![hi],
            step: default_step(),
            iterations: default_iterations(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.theta_init.len();
        if d == 0 || self.lower.len() != d || self.upper.len() != d {
            return Err(Error::InvalidArgument("theta_init and box bounds must share a nonzero length".into()));
        }
        if self.lower.iter().zip(&self.upper).any(|(lo, hi)| !(lo < hi)) {
            return Err(Error::InvalidArgument("box requires lo < hi in every coordinate".into()));
        }
        if !(self.step > 0.0) || !self.step.is_finite() {
            return Err(Error::InvalidArgument("step must be > 0".into()));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("iterations must be >= 1".into()));
        }
        Ok(())
    }

    pub fn project(&self, theta: &mut [f64]) {
        for ((t, lo), hi) in theta.iter_mut().zip(&self.lower).zip(&self.upper) {
            *t = t.clamp(*lo, *hi);
        }
    }
}

/// Supplies a gradient estimate at each iterate.
pub trait GradientSource {
    fn gradient(&mut self, iter: usize, policy: &DeterministicPolicy) -> Result<Vec<f64>>;
}

impl<F: FnMut(usize, &DeterministicPolicy) -> Result<Vec<f64>>> GradientSource for F {
    fn gradient(&mut self, iter: usize, policy: &DeterministicPolicy) -> Result<Vec<f64>> {
        self(iter, policy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AscentPath {
    /// `iterations + 1` iterates, starting with the projected initial point.
    pub thetas: Vec<Vec<f64>>,
    /// Euclidean norm of the gradient used at each of the first
    /// `iterations` iterates.
    pub grad_norms: Vec<f64>,
}

impl AscentPath {
    pub fn last(&self) -> &[f64] {
        self.thetas.last().expect("path is nonempty")
    }

    /// Writes `iter,theta_0..theta_{d-1},grad_norm`; the final iterate has an
    /// empty gradient norm.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let d = self.thetas[0].len();
        let mut header = vec!["iter".to_string()];
        header.extend((0..d).map(|i| format!("theta_{i}")));
        header.push("grad_norm".into());
        w.write_record(&header)?;
        for (i, theta) in self.thetas.iter().enumerate() {
            let mut row = vec![i.to_string()];
            row.extend(theta.iter().map(f64::to_string));
            row.push(self.grad_norms.get(i).map_or(String::new(), f64::to_string));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `theta <- Proj(theta + step * Z(theta))` for the configured number of
/// iterations.
pub fn gradient_ascent<G: GradientSource>(form: PolicyForm, cfg: &AscentConfig, source: &mut G) -> Result<AscentPath> {
    cfg.validate()?;
    if cfg.theta_init.len() != form.dim() {
        return Err(Error::InvalidArgument(format!(
            "{form:?} policy needs {} parameters",
            form.dim()
        )));
    }
    let mut theta = cfg.theta_init.clone();
    cfg.project(&mut theta);
    let mut thetas = vec![theta.clone()];
    let mut grad_norms = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let policy = DeterministicPolicy::new(form, theta.clone())?;
        let grad = source.gradient(iter, &policy)?;
        if grad.len() != theta.len() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { iter });
        }
        for (t, g) in theta.iter_mut().zip(&grad) {
            *t += cfg.step * g;
        }
        cfg.project(&mut theta);
        grad_norms.push(grad.iter().map(|g| g * g).sum::<f64>().sqrt());
        thetas.push(theta.clone());
    }
    Ok(AscentPath { thetas, grad_norms })
}

/// Monte Carlo finite-difference gradient of the true value, with the same
/// random numbers at every iterate.
pub struct OracleGradient {
    pub env: EnvConfig,
    pub n_mc: usize,
    pub delta: f64,
    pub seed: u64,
}

impl GradientSource for OracleGradient {
    fn gradient(&mut self, _iter: usize, policy: &DeterministicPolicy) -> Result<Vec<f64>> {
        Ok(oracle_gradient(&self.env, policy, self.n_mc, self.delta, self.seed)?.gradient)
    }
}

/// How the bandwidth is chosen for an offline gradient estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BandwidthChoice {
    Fixed { h: f64 },
    /// Bootstrap selection at the first iterate, then kept fixed.
    Bootstrap {
        grid: BandwidthGrid,
        #[serde(default)]
        frozen: bool,
    },
}

/// Offline gradient estimates from a fixed dataset, re-fitting every
/// nuisance at each iterate's theta.
pub struct EstimatedGradient<'a> {
    pub data: &'a Dataset,
    pub recipe: Recipe,
    pub bandwidth: BandwidthChoice,
    pub seed: u64,
    /// Bandwidth in use once chosen, with the selection table if any.
    pub selected: Option<(f64, Option<BandwidthSelection>)>,
    pub reports: Vec<EstimateReport>,
}

impl<'a> EstimatedGradient<'a> {
    pub fn new(data: &'a Dataset, recipe: Recipe, bandwidth: BandwidthChoice, seed: u64) -> Result<Self> {
        if !recipe.estimator.is_gradient() {
            return Err(Error::InvalidArgument(format!("{} is not a gradient estimator", recipe.estimator)));
        }
        Ok(Self {
            data,
            recipe,
            bandwidth,
            seed,
            selected: None,
            reports: Vec::new(),
        })
    }

    pub fn bandwidth(&self) -> Option<f64> {
        self.selected.as_ref().map(|s| s.0)
    }
}

impl GradientSource for EstimatedGradient<'_> {
    fn gradient(&mut self, _iter: usize, policy: &DeterministicPolicy) -> Result<Vec<f64>> {
        let h = match (&self.selected, &self.bandwidth) {
            (Some((h, _)), _) => *h,
            (None, BandwidthChoice::Fixed { h }) => {
                self.selected = Some((*h, None));
                *h
            }
            (None, BandwidthChoice::Bootstrap { grid, frozen }) => {
                let sel = self.recipe.select_bandwidth(self.data, policy, grid, *frozen, self.seed)?;
                let h = sel.h_star;
                self.selected = Some((h, Some(sel)));
                h
            }
        };
        let report = self.recipe.run(self.data, policy, h, self.seed)?;
        let est = report.estimate.clone();
        self.reports.push(report);
        Ok(est)
    }
}
