//! Fitting nuisances and running an estimator in one step, plus bandwidth
//! selection for such a recipe.

use serde::{Deserialize, Serialize};

use rayon::prelude::*;

use crate::bandwidth::{choose, resample_indices, select_bandwidth, tabulate, BandwidthGrid, BandwidthSelection};
use crate::env::{Dataset, DeterministicPolicy};
use crate::error::Result;
use crate::estimators::{EstimateReport, Estimator};
use crate::kernel::{KernelFamily, ScaledKernel};
use crate::models::NuisanceMode;
use crate::nuisance::{BehaviorSpec, NuisanceConfig, NuisanceSet, ResampledNuisances};

/// Everything needed to go from data to an estimate at a given bandwidth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub estimator: Estimator,
    pub kernel: KernelFamily,
    pub behavior: BehaviorSpec,
    pub nuisance: NuisanceConfig,
}

impl Recipe {
    /// Nuisance mode used to fit the q-functions for this estimator.
    pub fn mode(&self) -> NuisanceMode {
        self.estimator.mode().unwrap_or(NuisanceMode::Deterministic)
    }

    /// The nuisance configuration restricted to what the estimator uses.
    pub fn nuisance_config(&self) -> NuisanceConfig {
        NuisanceConfig {
            fit_dq: self.nuisance.fit_dq && self.estimator.needs_dq(),
            fit_w: self.nuisance.fit_w && self.estimator.needs_w(),
            fit_dw: self.nuisance.fit_dw && self.estimator.needs_dw(),
            ..self.nuisance.clone()
        }
    }

    pub fn fit(&self, data: &Dataset, policy: &DeterministicPolicy, h: f64, seed: u64) -> Result<NuisanceSet> {
        let kernel = ScaledKernel::new(self.kernel, h)?;
        NuisanceSet::fit(data, policy, self.mode(), &kernel, &self.behavior, &self.nuisance_config(), seed)
    }

    /// Cross-fits the nuisances on `data` and evaluates the estimator.
    pub fn run(&self, data: &Dataset, policy: &DeterministicPolicy, h: f64, seed: u64) -> Result<EstimateReport> {
        let set = self.fit(data, policy, h, seed)?;
        self.estimator.run(data, &set, policy, &ScaledKernel::new(self.kernel, h)?)
    }

    /// Bootstrap bandwidth selection. With `frozen`, nuisances are fitted
    /// once per candidate on the full data and only the estimator is
    /// re-evaluated per resample; otherwise everything is re-fitted.
    ///
    /// Estimators that ignore the bandwidth skip the bootstrap and select the
    /// smallest candidate with an empty table.
    pub fn select_bandwidth(
        &self,
        data: &Dataset,
        policy: &DeterministicPolicy,
        grid: &BandwidthGrid,
        frozen: bool,
        seed: u64,
    ) -> Result<BandwidthSelection> {
        grid.validate()?;
        if !self.estimator.uses_bandwidth() {
            let h_star = grid.candidates.iter().copied().fold(f64::INFINITY, f64::min);
            return Ok(BandwidthSelection {
                h_star,
                table: Vec::new(),
            });
        }
        let fold_seed = seed;
        let boot_seed = crate::env::derive_seed(seed, 0xB007);
        if !frozen {
            return select_bandwidth(data, |sample, h| self.run(sample, policy, h, fold_seed), grid, boot_seed);
        }
        let resamples = resample_indices(data.len(), grid.replicates, boot_seed);
        let mut table = Vec::new();
        for h in grid.sorted() {
            let kernel = ScaledKernel::new(self.kernel, h)?;
            let set = self.fit(data, policy, h, fold_seed)?;
            let ok: Vec<Vec<f64>> = resamples
                .par_iter()
                .filter_map(|idx| {
                    let view = ResampledNuisances {
                        inner: &set,
                        map: idx,
                        original_n: data.len(),
                    };
                    self.estimator
                        .run(&data.subset(idx), &view, policy, &kernel)
                        .ok()
                        .map(|r| r.estimate)
                })
                .collect();
            table.push(tabulate(h, ok, resamples.len())?);
        }
        Ok(choose(table))
    }
}
