//! Experiment configuration, ground truth, and the MSE and regret studies.

mod selfcheck;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bandwidth::BandwidthGrid;
use crate::env::{
    derive_seed, oracle_gradient, oracle_value, oracle_value_difference, simulate, stream_rng, BehaviorModel,
    DeterministicPolicy, EnvConfig, PolicyForm,
};
use crate::error::{Error, Result};
use crate::estimators::Estimator;
use crate::kernel::KernelFamily;
use crate::learner::{gradient_ascent, AscentConfig, BandwidthChoice, EstimatedGradient, OracleGradient};
use crate::nuisance::{BehaviorSpec, NuisanceConfig};
use crate::pipeline::Recipe;

pub use selfcheck::{kernel_selfcheck, kernel_selfcheck_with, Check, SelfCheckReport};

/// An estimator in an experiment: a fitted recipe, or the ground truth
/// itself as a reference point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentEstimator {
    Oracle,
    Fitted(Estimator),
}

impl FromStr for ExperimentEstimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim().eq_ignore_ascii_case("oracle") {
            Ok(Self::Oracle)
        } else {
            s.parse().map(Self::Fitted)
        }
    }
}

impl fmt::Display for ExperimentEstimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Oracle => f.write_str("oracle"),
            Self::Fitted(e) => e.fmt(f),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthConfig {
    #[serde(default = "default_n_mc")]
    pub n_mc: usize,
    /// Finite-difference step for the gradient oracle.
    #[serde(default = "default_fd_delta")]
    pub fd_delta: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_n_mc() -> usize {
    1_000_000
}

fn default_fd_delta() -> f64 {
    1e-2
}

impl Default for TruthConfig {
    fn default() -> Self {
        Self {
            n_mc: default_n_mc(),
            fd_delta: default_fd_delta(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerConfig {
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    /// Initial parameters are drawn uniformly from this box.
    #[serde(default = "default_init_lo")]
    pub init_lower: Vec<f64>,
    #[serde(default = "default_init_hi")]
    pub init_upper: Vec<f64>,
    /// Projection box.
    #[serde(default = "default_lower")]
    pub lower: Vec<f64>,
    #[serde(default = "default_upper")]
    pub upper: Vec<f64>,
    /// Optimal parameters used as the regret reference.
    #[serde(default = "default_theta_star")]
    pub theta_star: Vec<f64>,
    /// Rollouts for the paired regret evaluation.
    #[serde(default = "default_regret_n_mc")]
    pub regret_n_mc: usize,
    /// Rollouts per iterate for the oracle-gradient learner.
    #[serde(default = "default_oracle_n_mc")]
    pub oracle_n_mc: usize,
}

fn default_step() -> f64 {
    0.05
}
fn default_iterations() -> usize {
    50
}
fn default_init_lo() -> Vec<f64> {
    vec![0.8]
}
fn default_init_hi() -> Vec<f64> {
    vec![1.2]
}
fn default_lower() -> Vec<f64> {
    vec![0.0]
}
fn default_upper() -> Vec<f64> {
    vec![2.0]
}
fn default_theta_star() -> Vec<f64> {
    vec![1.0]
}
fn default_regret_n_mc() -> usize {
    100_000
}
fn default_oracle_n_mc() -> usize {
    20_000
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            step: default_step(),
            iterations: default_iterations(),
            init_lower: default_init_lo(),
            init_upper: default_init_hi(),
            lower: default_lower(),
            upper: default_upper(),
            theta_star: default_theta_star(),
            regret_n_mc: default_regret_n_mc(),
            oracle_n_mc: default_oracle_n_mc(),
        }
    }
}

fn default_policy_form() -> PolicyForm {
    PolicyForm::Linear
}
fn default_kernel() -> KernelFamily {
    KernelFamily::Gaussian
}
fn default_replications() -> usize {
    50
}
fn default_n() -> Vec<usize> {
    vec![200, 400, 800]
}
fn default_theta_eval() -> Vec<f64> {
    vec![1.0]
}
fn default_estimators() -> Vec<String> {
    ["MPGK", "MPGD", "CPGK", "CPGD", "DPG"].map(String::from).to_vec()
}
fn default_behavior() -> BehaviorModel {
    BehaviorModel::linear(0.8, 1.0).expect("valid behavior")
}

/// Full description of an experiment, read from TOML. Unknown keys are
/// rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default = "default_n")]
    pub n: Vec<usize>,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<String>,
    #[serde(default = "default_theta_eval")]
    pub theta_eval: Vec<f64>,
    #[serde(default = "default_policy_form")]
    pub policy_form: PolicyForm,
    #[serde(default = "default_kernel")]
    pub kernel: KernelFamily,
    /// Fit the behavior density with this polynomial mean degree instead of
    /// using the known one.
    #[serde(default)]
    pub fit_behavior_degree: Option<usize>,
    /// Fit nuisances once per bandwidth candidate instead of per resample.
    #[serde(default)]
    pub frozen_bootstrap: bool,
    /// Use this bandwidth instead of bootstrap selection.
    #[serde(default)]
    pub fixed_bandwidth: Option<f64>,
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default = "default_behavior")]
    pub behavior: BehaviorModel,
    #[serde(default)]
    pub grid: BandwidthGrid,
    #[serde(default)]
    pub nuisance: NuisanceConfig,
    #[serde(default)]
    pub truth: TruthConfig,
    #[serde(default)]
    pub learner: LearnerConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults deserialize")
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Horizon 20, 100 replications and `n` in {200, 400, 600, 800}.
    pub fn paper_scale(mut self) -> Self {
        self.env.horizon = 20;
        self.replications = 100;
        self.n = vec![200, 400, 600, 800];
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.grid.validate()?;
        if self.replications < 2 {
            return Err(Error::InvalidArgument("replications must be >= 2".into()));
        }
        if self.n.is_empty() || self.n.windows(2).any(|w| w[0] >= w[1]) || self.n[0] < 2 {
            return Err(Error::InvalidArgument("n must be a nonempty ascending list with n >= 2".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::InvalidArgument("no estimators configured".into()));
        }
        self.parsed_estimators()?;
        self.eval_policy()?;
        if let Some(h) = self.fixed_bandwidth {
            if !(h > 0.0) {
                return Err(Error::NonPositiveBandwidth(h));
            }
        }
        Ok(())
    }

    pub fn parsed_estimators(&self) -> Result<Vec<ExperimentEstimator>> {
        self.estimators.iter().map(|s| s.parse()).collect()
    }

    pub fn eval_policy(&self) -> Result<DeterministicPolicy> {
        DeterministicPolicy::new(self.policy_form, self.theta_eval.clone())
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))[..16].to_string()
    }

    fn behavior_spec(&self) -> BehaviorSpec {
        match self.fit_behavior_degree {
            Some(degree) => BehaviorSpec::Fitted { degree },
            None => BehaviorSpec::Known {
                model: self.behavior.clone(),
            },
        }
    }

    pub fn recipe(&self, estimator: Estimator) -> Recipe {
        Recipe {
            estimator,
            kernel: self.kernel,
            behavior: self.behavior_spec(),
            nuisance: self.nuisance.clone(),
        }
    }

    pub fn bandwidth_choice(&self) -> BandwidthChoice {
        match self.fixed_bandwidth {
            Some(h) => BandwidthChoice::Fixed { h },
            None => BandwidthChoice::Bootstrap {
                grid: self.grid.clone(),
                frozen: self.frozen_bootstrap,
            },
        }
    }

    /// Seed of replication `r` at sample size `n`.
    pub fn replication_seed(&self, n: usize, r: usize) -> u64 {
        derive_seed(derive_seed(self.seed, n as u64), r as u64)
    }
}

/// Monte Carlo value and gradient at the evaluation policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub key: String,
    pub value: f64,
    pub value_se: f64,
    pub gradient: Vec<f64>,
    pub gradient_se: Vec<f64>,
}

fn truth_key(cfg: &ExperimentConfig) -> String {
    let key = serde_json::json!({
        "env": cfg.env,
        "policy_form": cfg.policy_form,
        "theta": cfg.theta_eval,
        "truth": cfg.truth,
    });
    hex::encode(Sha256::digest(key.to_string().as_bytes()))[..16].to_string()
}

/// Computes the ground truth, or reads it from `cache_dir` if a previous run
/// with the same environment, policy and oracle settings stored it there.
pub fn ground_truth(cfg: &ExperimentConfig, cache_dir: Option<&Path>) -> Result<GroundTruth> {
    let key = truth_key(cfg);
    let path = cache_dir.map(|d| d.join(format!("truth_{key}.json")));
    if let Some(p) = path.as_ref().filter(|p| p.exists()) {
        let cached: GroundTruth =
            serde_json::from_str(&std::fs::read_to_string(p)?).map_err(|e| Error::Parse(e.to_string()))?;
        if cached.key == key {
            return Ok(cached);
        }
    }
    let policy = cfg.eval_policy()?;
    let v = oracle_value(&cfg.env, &policy, cfg.truth.n_mc, cfg.truth.seed)?;
    let g = oracle_gradient(&cfg.env, &policy, cfg.truth.n_mc, cfg.truth.fd_delta, cfg.truth.seed)?;
    let truth = GroundTruth {
        key,
        value: v.value,
        value_se: v.se,
        gradient: g.gradient,
        gradient_se: g.se,
    };
    if let Some(p) = path {
        std::fs::create_dir_all(p.parent().expect("file has a parent"))?;
        std::fs::write(&p, serde_json::to_string_pretty(&truth).expect("serializes"))?;
    }
    Ok(truth)
}

/// One replication of one estimator.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationRecord {
    pub estimator: String,
    pub n: usize,
    pub replication: usize,
    /// Selected bandwidth, absent for estimators that do not use one.
    pub h: Option<f64>,
    /// Estimate (MSE study) or final parameters (regret study).
    pub output: Vec<f64>,
    /// Squared error (MSE study) or regret (regret study).
    pub loss: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub estimator: String,
    pub n: usize,
    /// Mean loss over successful replications.
    pub mean: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub succeeded: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Mse,
    Regret,
}

impl ExperimentKind {
    fn name(self) -> &'static str {
        match self {
            Self::Mse => "mse",
            Self::Regret => "regret",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentResult {
    pub kind: ExperimentKind,
    pub config_hash: String,
    pub truth: GroundTruth,
    pub rows: Vec<SummaryRow>,
    pub replications: Vec<ReplicationRecord>,
}

impl ExperimentResult {
    pub fn failures(&self) -> usize {
        self.replications.iter().filter(|r| r.error.is_some()).count()
    }

    pub fn row(&self, estimator: &str, n: usize) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.estimator == estimator && r.n == n)
    }

    pub fn summary_csv(&self) -> Result<String> {
        let loss = match self.kind {
            ExperimentKind::Mse => "mse",
            ExperimentKind::Regret => "mean_regret",
        };
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["config_hash", "estimator", "n", loss, "ci_lo", "ci_hi", "succeeded", "failed"])?;
        for r in &self.rows {
            w.write_record(&[
                self.config_hash.clone(),
                r.estimator.clone(),
                r.n.to_string(),
                r.mean.to_string(),
                r.ci_lo.to_string(),
                r.ci_hi.to_string(),
                r.succeeded.to_string(),
                r.failed.to_string(),
            ])?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?).expect("utf8"))
    }

    pub fn replications_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["config_hash", "estimator", "n", "replication", "h", "output", "loss", "error"])?;
        for r in &self.replications {
            let output: Vec<String> = r.output.iter().map(f64::to_string).collect();
            w.write_record(&[
                self.config_hash.clone(),
                r.estimator.clone(),
                r.n.to_string(),
                r.replication.to_string(),
                r.h.map_or(String::new(), |h| h.to_string()),
                output.join(";"),
                r.loss.to_string(),
                r.error.clone().unwrap_or_default(),
            ])?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?).expect("utf8"))
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&serde_json::json!({
            "experiment": self.kind,
            "config_hash": self.config_hash,
            "truth": self.truth,
            "rows": self.rows,
            "failed_replications": self.failures(),
        }))
        .expect("serializes")
    }

    /// Writes `<kind>_<hash>.csv`, `<kind>_replications_<hash>.csv` and
    /// `<kind>_<hash>.json` into `dir`, returning the paths.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let k = self.kind.name();
        let h = &self.config_hash;
        let files = [
            (dir.join(format!("{k}_{h}.csv")), self.summary_csv()?),
            (dir.join(format!("{k}_replications_{h}.csv")), self.replications_csv()?),
            (dir.join(format!("{k}_{h}.json")), self.summary_json()),
        ];
        let mut out = Vec::new();
        for (p, text) in files {
            std::fs::write(&p, text)?;
            out.push(p);
        }
        Ok(out)
    }
}

fn summarize(records: &[ReplicationRecord], estimators: &[String], ns: &[usize]) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    for name in estimators {
        for &n in ns {
            let mine: Vec<&ReplicationRecord> =
                records.iter().filter(|r| &r.estimator == name && r.n == n).collect();
            let ok: Vec<f64> = mine.iter().filter(|r| r.error.is_none()).map(|r| r.loss).collect();
            let (mean, half) = if ok.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                let m = crate::stats::mean(&ok);
                (m, 1.96 * (crate::stats::variance(&ok) / ok.len() as f64).sqrt())
            };
            rows.push(SummaryRow {
                estimator: name.clone(),
                n,
                mean,
                ci_lo: mean - half,
                ci_hi: mean + half,
                succeeded: ok.len(),
                failed: mine.len() - ok.len(),
            });
        }
    }
    rows
}

/// Runs `job(n, r)` for every sample size and replication in parallel and
/// returns the records sorted by (n, replication, estimator order).
fn replicate<F>(cfg: &ExperimentConfig, job: F) -> Vec<ReplicationRecord>
where
    F: Fn(usize, usize) -> Vec<ReplicationRecord> + Sync,
{
    let units: Vec<(usize, usize)> = cfg
        .n
        .iter()
        .flat_map(|&n| (0..cfg.replications).map(move |r| (n, r)))
        .collect();
    units.par_iter().flat_map_iter(|&(n, r)| job(n, r)).collect()
}

fn failed(estimator: &str, n: usize, r: usize, err: Error) -> ReplicationRecord {
    ReplicationRecord {
        estimator: estimator.to_string(),
        n,
        replication: r,
        h: None,
        output: Vec::new(),
        loss: f64::NAN,
        error: Some(err.to_string()),
    }
}

/// MSE of each estimator against the ground truth, over fresh datasets.
/// Value estimators are scored against the value, gradient estimators
/// against the gradient (squared Euclidean error).
pub fn run_mse_experiment(cfg: &ExperimentConfig, cache_dir: Option<&Path>) -> Result<ExperimentResult> {
    cfg.validate()?;
    let estimators = cfg.parsed_estimators()?;
    let names: Vec<String> = estimators.iter().map(ToString::to_string).collect();
    let truth = ground_truth(cfg, cache_dir)?;
    let policy = cfg.eval_policy()?;
    let records = replicate(cfg, |n, r| {
        let seed = cfg.replication_seed(n, r);
        let data = match simulate(&cfg.env, &cfg.behavior, n, seed) {
            Ok(d) => d,
            Err(e) => return names.iter().map(|name| failed(name, n, r, simulation_failed(&e))).collect(),
        };
        estimators
            .iter()
            .zip(&names)
            .map(|(est, name)| {
                let outcome = match est {
                    ExperimentEstimator::Oracle => Ok((None, truth.gradient.clone())),
                    ExperimentEstimator::Fitted(e) => (|| {
                        let recipe = cfg.recipe(*e);
                        let h = match cfg.fixed_bandwidth {
                            Some(h) => h,
                            None => recipe.select_bandwidth(&data, &policy, &cfg.grid, cfg.frozen_bootstrap, seed)?.h_star,
                        };
                        let report = recipe.run(&data, &policy, h, seed)?;
                        Ok((e.uses_bandwidth().then_some(h), report.estimate))
                    })(),
                };
                match outcome {
                    Ok((h, estimate)) => {
                        let target: &[f64] = match est {
                            ExperimentEstimator::Fitted(e) if !e.is_gradient() => std::slice::from_ref(&truth.value),
                            _ => &truth.gradient,
                        };
                        let loss = estimate.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum();
                        ReplicationRecord {
                            estimator: name.clone(),
                            n,
                            replication: r,
                            h,
                            output: estimate,
                            loss,
                            error: None,
                        }
                    }
                    Err(e) => failed(name, n, r, e),
                }
            })
            .collect()
    });
    Ok(ExperimentResult {
        kind: ExperimentKind::Mse,
        config_hash: cfg.hash(),
        rows: summarize(&records, &names, &cfg.n),
        truth,
        replications: records,
    })
}

fn simulation_failed(e: &Error) -> Error {
    Error::InvalidArgument(format!("simulation failed: {e}"))
}

/// Regret `J(theta*) - J(theta_T)` of projected gradient ascent driven by
/// each estimator. Every estimator in a replication starts from the same
/// random initial point.
pub fn run_regret_experiment(cfg: &ExperimentConfig, cache_dir: Option<&Path>) -> Result<ExperimentResult> {
    cfg.validate()?;
    let estimators = cfg.parsed_estimators()?;
    if let Some(e) = estimators.iter().find(|e| matches!(e, ExperimentEstimator::Fitted(x) if !x.is_gradient())) {
        return Err(Error::InvalidArgument(format!("{e} is not a gradient estimator")));
    }
    let names: Vec<String> = estimators.iter().map(ToString::to_string).collect();
    let truth = ground_truth(cfg, cache_dir)?;
    let lc = &cfg.learner;
    let star = DeterministicPolicy::new(cfg.policy_form, lc.theta_star.clone())?;
    if lc.init_lower.len() != star.dim() || lc.init_upper.len() != star.dim() {
        return Err(Error::InvalidArgument("learner init box has the wrong dimension".into()));
    }
    let records = replicate(cfg, |n, r| {
        let seed = cfg.replication_seed(n, r);
        let mut rng = stream_rng(derive_seed(seed, 0x1417), 0);
        let theta_init: Vec<f64> = lc
            .init_lower
            .iter()
            .zip(&lc.init_upper)
            .map(|(&lo, &hi)| rng.random_range(lo..=hi))
            .collect();
        let ascent = AscentConfig {
            theta_init,
            lower: lc.lower.clone(),
            upper: lc.upper.clone(),
            step: lc.step,
            iterations: lc.iterations,
        };
        let data = simulate(&cfg.env, &cfg.behavior, n, seed);
        estimators
            .iter()
            .zip(&names)
            .map(|(est, name)| {
                let outcome = (|| {
                    let (path, h) = match est {
                        ExperimentEstimator::Oracle => {
                            let mut src = OracleGradient {
                                env: cfg.env,
                                n_mc: lc.oracle_n_mc,
                                delta: cfg.truth.fd_delta,
                                seed: cfg.truth.seed,
                            };
                            (gradient_ascent(cfg.policy_form, &ascent, &mut src)?, None)
                        }
                        ExperimentEstimator::Fitted(e) => {
                            let data = data.as_ref().map_err(simulation_failed)?;
                            let mut src = EstimatedGradient::new(data, cfg.recipe(*e), cfg.bandwidth_choice(), seed)?;
                            let path = gradient_ascent(cfg.policy_form, &ascent, &mut src)?;
                            (path, src.bandwidth().filter(|_| e.uses_bandwidth()))
                        }
                    };
                    let last = DeterministicPolicy::new(cfg.policy_form, path.last().to_vec())?;
                    let regret = oracle_value_difference(&cfg.env, &star, &last, lc.regret_n_mc, cfg.truth.seed)?;
                    Ok::<_, Error>((h, path.last().to_vec(), regret.value))
                })();
                match outcome {
                    Ok((h, theta, loss)) => ReplicationRecord {
                        estimator: name.clone(),
                        n,
                        replication: r,
                        h,
                        output: theta,
                        loss,
                        error: None,
                    },
                    Err(e) => failed(name, n, r, e),
                }
            })
            .collect()
    });
    Ok(ExperimentResult {
        kind: ExperimentKind::Regret,
        config_hash: cfg.hash(),
        rows: summarize(&records, &names, &cfg.n),
        truth,
        replications: records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_desk_scale() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.env.horizon, 5);
        assert_eq!(cfg.replications, 50);
        let paper = cfg.clone().paper_scale();
        assert_eq!((paper.env.horizon, paper.replications), (20, 100));
        assert_ne!(cfg.hash(), paper.hash());
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(ExperimentConfig::from_toml("replications = 3\nbogus = 1\n").is_err());
        assert!(ExperimentConfig::from_toml("[env]\nhorizon = 2\ncoeff_a = 1.0\ncoeff_s = -1.0\nnoise_std = 0.3\ninit = { kind = \"fixed\", value = 0.0 }\nextra = 1\n").is_err());
        let cfg = ExperimentConfig::from_toml("replications = 3\nn = [10, 20]\n").unwrap();
        assert_eq!(cfg.n, vec![10, 20]);
    }

    #[test]
    fn toml_round_trip_preserves_hash() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn invalid_lists_are_rejected() {
        assert!(ExperimentConfig::from_toml("n = [400, 200]\n").is_err());
        assert!(ExperimentConfig::from_toml("replications = 1\n").is_err());
        assert!(ExperimentConfig::from_toml("estimators = [\"nope\"]\n").is_err());
    }

    #[test]
    fn oracle_stub_has_zero_mse() {
        let mut cfg = ExperimentConfig::from_toml("replications = 3\nn = [10]\nestimators = [\"oracle\"]\n").unwrap();
        cfg.truth.n_mc = 1000;
        let res = run_mse_experiment(&cfg, None).unwrap();
        assert_eq!(res.rows[0].mean, 0.0);
        assert_eq!(res.failures(), 0);
    }

    #[test]
    fn selfcheck_passes_and_detects_bad_constant() {
        assert!(kernel_selfcheck().passed());
        let bad = kernel_selfcheck_with(|f| {
            let mut m = f.moments();
            if f == KernelFamily::Biweight {
                m.m2 += 1e-3;
            }
            m
        });
        let failures: Vec<&str> = bad.failures().map(|c| c.name.as_str()).collect();
        assert_eq!(failures, vec!["biweight: M2"]);
    }
}
