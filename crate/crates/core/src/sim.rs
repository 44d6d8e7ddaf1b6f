//! Planted-model recovery study: simulate from a known list, search, and
//! measure edit distance to the truth.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BinaryMatrix, Dataset};
use crate::error::{Error, Result};
use crate::mining::RulePool;
use crate::model::{simulate_data, Hyperparameters, LatentParams};
use crate::rule_list::{assign_matrix, edit_distance, random_list, RuleList};
use crate::search::{anneal, AnnealConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryConfig {
    pub sizes: Vec<usize>,
    pub replicates: usize,
    pub pool_size: usize,
    pub feature_prob: f64,
    /// Subgroups in the planted list, counting the default.
    pub true_list_size: usize,
    pub n_confounders: usize,
    /// Upper end of the uniform prior on each planted increment.
    pub effect_scale: f64,
    /// Smallest planted subgroup, as a fraction of N.
    pub min_subgroup_frac: f64,
    pub seed: u64,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            sizes: vec![500, 2000, 8000],
            replicates: 10,
            pool_size: 100,
            feature_prob: 0.25,
            true_list_size: 6,
            n_confounders: 10,
            effect_scale: 10.0,
            min_subgroup_frac: 0.02,
            seed: 0,
        }
    }
}

impl RecoveryConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("replicates", self.replicates),
            ("pool_size", self.pool_size),
            ("true_list_size", self.true_list_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.sizes.is_empty() || self.sizes.contains(&0) {
            return Err(Error::Config("sample sizes must be a non-empty list of positive counts".into()));
        }
        if !(self.feature_prob > 0.0 && self.feature_prob < 1.0) {
            return Err(Error::Config(format!("feature_prob must be in (0, 1), got {}", self.feature_prob)));
        }
        if self.true_list_size > self.pool_size + 1 {
            return Err(Error::Config("true list needs more rules than the pool holds".into()));
        }
        if !(self.effect_scale > 0.0) || !(0.0..1.0).contains(&self.min_subgroup_frac) {
            return Err(Error::Config("effect_scale must be positive and min_subgroup_frac in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Stateless 64-bit mixer used to derive independent sub-seeds.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed of replicate `rep` at sample size `n`.
pub fn replicate_seed(master: u64, n: usize, rep: usize) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ n as u64) ^ rep as u64)
}

#[derive(Debug, Clone)]
pub struct PlantedInstance {
    pub data: Dataset,
    pub pool: RulePool,
    pub truth: RuleList,
    pub params: LatentParams,
}

/// Draw one planted dataset of `n` rows.
pub fn planted_instance(config: &RecoveryConfig, n: usize, seed: u64) -> Result<PlantedInstance> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = config.pool_size;
    let cells: Vec<u8> = (0..n * p)
        .map(|_| u8::from(rng.random_bool(config.feature_prob)))
        .collect();
    let names = (0..p).map(|j| format!("f{j}")).collect();
    let features = BinaryMatrix::new(n, names, cells)?;
    let pool = RulePool::singletons(&features);
    let min_count = (config.min_subgroup_frac * n as f64).ceil() as usize;
    let mut truth = None;
    for _ in 0..1000 {
        let cand = random_list(&pool, config.true_list_size - 1, &mut rng)?;
        let a = assign_matrix(&cand, &features)?;
        if a.counts.iter().all(|&c| c >= min_count.max(1)) {
            truth = Some(cand);
            break;
        }
    }
    let truth = truth.ok_or_else(|| {
        Error::Config(format!(
            "no planted list with every subgroup covering {min_count} of {n} rows after 1000 draws"
        ))
    })?;
    let len = truth.len();
    let k = config.n_confounders;
    let params = LatentParams {
        b: DMatrix::from_fn(len, k, |_, _| rng.sample(StandardNormal)),
        delta: (0..len).map(|_| rng.random_range(0.0..config.effect_scale)).collect(),
        lambda: vec![1.0; len],
        m: DVector::zeros(k),
        tau: 1.0,
    };
    let confounders = DMatrix::from_fn(n, k, |_, _| rng.sample(StandardNormal));
    let t: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.5))).collect();
    let outcomes = simulate_data(&truth, &params, &features, &confounders, &t, &mut rng)?;
    Ok(PlantedInstance {
        data: Dataset {
            rule_features: features,
            confounders,
            y: outcomes.y_obs,
            t,
        },
        pool,
        truth,
        params,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub n: usize,
    pub replicate: usize,
    pub seed: u64,
    /// `None` when the replicate failed.
    pub distance: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryRow {
    pub n: usize,
    pub mean_distance: f64,
    pub sd: f64,
    pub n_ok: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryReport {
    pub rows: Vec<RecoveryRow>,
    pub replicates: Vec<ReplicateResult>,
}

/// Recovery study with simulated annealing as the searcher. `hyper = None`
/// uses [`Hyperparameters::defaults_for`] on each simulated dataset.
pub fn run_recovery_study(
    config: &RecoveryConfig,
    hyper: Option<&Hyperparameters>,
    anneal_config: &AnnealConfig,
) -> Result<RecoveryReport> {
    anneal_config.validate()?;
    run_recovery_with(config, |inst, seed| {
        let h = hyper.cloned().unwrap_or_else(|| Hyperparameters::defaults_for(&inst.data));
        let c = AnnealConfig { seed, ..*anneal_config };
        Ok(anneal(&inst.data, &inst.pool, &h, &c)?.best)
    })
}

/// Recovery study with an arbitrary searcher mapping an instance and a seed
/// to a selected list.
pub fn run_recovery_with<F>(config: &RecoveryConfig, search: F) -> Result<RecoveryReport>
where
    F: Fn(&PlantedInstance, u64) -> Result<RuleList> + Sync,
{
    config.validate()?;
    let cells: Vec<(usize, usize)> = config
        .sizes
        .iter()
        .flat_map(|&n| (0..config.replicates).map(move |r| (n, r)))
        .collect();
    let replicates: Vec<ReplicateResult> = cells
        .par_iter()
        .map(|&(n, replicate)| {
            let seed = replicate_seed(config.seed, n, replicate);
            let outcome = planted_instance(config, n, seed).and_then(|inst| {
                let best = search(&inst, splitmix64(seed))?;
                Ok(edit_distance(&best, &inst.truth))
            });
            let distance = match outcome {
                Ok(d) => Some(d),
                Err(e) => {
                    log::warn!("replicate {replicate} at N = {n} failed: {e}");
                    None
                }
            };
            ReplicateResult {
                n,
                replicate,
                seed,
                distance,
            }
        })
        .collect();
    let rows = config
        .sizes
        .iter()
        .map(|&n| {
            let d: Vec<f64> = replicates
                .iter()
                .filter(|r| r.n == n)
                .filter_map(|r| r.distance.map(|d| d as f64))
                .collect();
            let k = d.len() as f64;
            let mean = if d.is_empty() { f64::NAN } else { d.iter().sum::<f64>() / k };
            let sd = if d.len() > 1 {
                (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
            } else {
                0.0
            };
            RecoveryRow {
                n,
                mean_distance: mean,
                sd,
                n_ok: d.len(),
            }
        })
        .collect();
    Ok(RecoveryReport { rows, replicates })
}

pub fn write_recovery_csv(rows: &[RecoveryRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_recovery(rows, std::io::BufWriter::new(file))
}

pub fn write_recovery<W: Write>(rows: &[RecoveryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["N", "mean_distance", "sd", "n_ok"])?;
    for r in rows {
        w.write_record([
            r.n.to_string(),
            r.mean_distance.to_string(),
            r.sd.to_string(),
            r.n_ok.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<recovery>", e))?;
    Ok(())
}
