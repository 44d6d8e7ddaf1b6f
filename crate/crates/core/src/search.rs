//! Simulated annealing over rule lists, scored by the variational ELBO.

use std::io::Write;
use std::num::NonZeroUsize;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use lru::LruCache;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mining::RulePool;
use crate::model::{subgroup_stats, Hyperparameters};
use crate::rule_list::{propose_move, random_list, RuleList, DEFAULT_MAX_RULES};
use crate::vi::{fit_vi_stats, VariationalConfig};

pub const DEFAULT_CACHE_CAPACITY: usize = 10_000;

/// Thread-safe LRU map from clause sequences to scores.
///
/// Scores depend on the data and hyperparameters, so a cache must only be
/// shared between searches over the same dataset and prior.
pub struct ScoreCache {
    map: Mutex<LruCache<Vec<Vec<usize>>, f64>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl ScoreCache {
    pub fn new(capacity: usize) -> Result<Self> {
        let cap = NonZeroUsize::new(capacity).ok_or_else(|| Error::Config("cache capacity must be >= 1".into()))?;
        Ok(Self {
            map: Mutex::new(LruCache::new(cap)),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        })
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, LruCache<Vec<Vec<usize>>, f64>> {
        // a panic while holding the lock cannot leave the map inconsistent
        self.map.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn get(&self, key: &Vec<Vec<usize>>) -> Option<f64> {
        let v = self.lock().get(key).copied();
        if v.is_some() {
            self.hits.fetch_add(1, Ordering::Relaxed);
        }
        v
    }

    fn put(&self, key: Vec<Vec<usize>>, score: f64) {
        self.misses.fetch_add(1, Ordering::Relaxed);
        self.lock().put(key, score);
    }
}

impl Default for ScoreCache {
    fn default() -> Self {
        Self::new(DEFAULT_CACHE_CAPACITY).expect("nonzero capacity")
    }
}

/// Final ELBO of `list`, from the cache when present.
pub fn score_model(
    list: &RuleList,
    data: &Dataset,
    hyper: &Hyperparameters,
    vi: &VariationalConfig,
    cache: &ScoreCache,
) -> Result<f64> {
    let key = list.key();
    if let Some(s) = cache.get(&key) {
        return Ok(s);
    }
    let (_, stats) = subgroup_stats(list, data)?;
    let (_, trace) = fit_vi_stats(&stats, hyper, vi)?;
    let score = trace.final_elbo();
    cache.put(key, score);
    Ok(score)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Temperature {
    Constant { value: f64 },
    Geometric { initial: f64, factor: f64 },
}

impl Temperature {
    /// Temperature used when deciding step `step` (1-based).
    pub fn at(&self, step: usize) -> f64 {
        match *self {
            Temperature::Constant { value } => value,
            Temperature::Geometric { initial, factor } => initial * factor.powi(step as i32 - 1),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Temperature::Constant { value } => value > 0.0 && value.is_finite(),
            Temperature::Geometric { initial, factor } => {
                initial > 0.0 && initial.is_finite() && factor > 0.0 && factor <= 1.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid temperature schedule {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealConfig {
    pub n_steps: usize,
    pub temperature: Temperature,
    pub init_length: usize,
    pub max_rules: usize,
    pub seed: u64,
    pub cache_capacity: usize,
    pub vi: VariationalConfig,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        Self {
            n_steps: 5000,
            temperature: Temperature::Constant { value: 1.0 },
            init_length: 3,
            max_rules: DEFAULT_MAX_RULES,
            seed: 0,
            cache_capacity: DEFAULT_CACHE_CAPACITY,
            vi: VariationalConfig::default(),
        }
    }
}

impl AnnealConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::Config("n_steps must be >= 1".into()));
        }
        if self.init_length > self.max_rules {
            return Err(Error::Config(format!(
                "init_length {} exceeds the maximum list length {}",
                self.init_length, self.max_rules
            )));
        }
        if self.cache_capacity == 0 {
            return Err(Error::Config("cache capacity must be >= 1".into()));
        }
        self.temperature.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub proposed_score: f64,
    pub accepted: bool,
    pub current_score: f64,
    pub list_length: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub best: RuleList,
    pub best_score: f64,
    /// Step 0 is the initial list; steps `1..=n_steps` are proposals.
    pub trace: Vec<TraceStep>,
    /// Number of scored lists, including cache hits.
    pub evaluations: usize,
    pub final_list: RuleList,
}

/// Single annealing chain with a private cache.
pub fn anneal(data: &Dataset, pool: &RulePool, hyper: &Hyperparameters, config: &AnnealConfig) -> Result<SearchResult> {
    config.validate()?;
    let cache = ScoreCache::new(config.cache_capacity)?;
    anneal_with_cache(data, pool, hyper, config, &cache)
}

fn score_or_reject(
    list: &RuleList,
    data: &Dataset,
    hyper: &Hyperparameters,
    config: &AnnealConfig,
    cache: &ScoreCache,
) -> Result<f64> {
    match score_model(list, data, hyper, &config.vi, cache) {
        Ok(s) => Ok(s),
        Err(e @ (Error::Numerical { .. } | Error::NotPositiveDefinite { .. })) => {
            log::warn!("scoring {} failed ({e}); rejecting", list.describe());
            Ok(f64::NEG_INFINITY)
        }
        Err(e) => Err(e),
    }
}

/// Annealing chain sharing `cache` with other chains over the same data.
pub fn anneal_with_cache(
    data: &Dataset,
    pool: &RulePool,
    hyper: &Hyperparameters,
    config: &AnnealConfig,
    cache: &ScoreCache,
) -> Result<SearchResult> {
    config.validate()?;
    hyper.validate_for(data)?;
    if pool.is_empty() {
        return Err(Error::Config("rule pool is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut current = random_list(pool, config.init_length, &mut rng)?;
    let mut current_score = score_or_reject(&current, data, hyper, config, cache)?;
    let mut best = current.clone();
    let mut best_score = current_score;
    let mut trace = Vec::with_capacity(config.n_steps + 1);
    trace.push(TraceStep {
        step: 0,
        proposed_score: current_score,
        accepted: true,
        current_score,
        list_length: current.len(),
    });
    let mut evaluations = 1;
    for step in 1..=config.n_steps {
        let (proposal, kind) = propose_move(&current, pool, config.max_rules, &mut rng);
        let score = if kind.is_some() {
            evaluations += 1;
            score_or_reject(&proposal, data, hyper, config, cache)?
        } else {
            current_score
        };
        let temp = config.temperature.at(step);
        let u: f64 = rng.random();
        let accepted = kind.is_some()
            && score > f64::NEG_INFINITY
            && (score >= current_score || u < ((score - current_score) / temp).exp());
        if accepted {
            current = proposal;
            current_score = score;
            if score > best_score {
                best_score = score;
                best = current.clone();
            }
        }
        trace.push(TraceStep {
            step,
            proposed_score: score,
            accepted,
            current_score,
            list_length: current.len(),
        });
    }
    Ok(SearchResult {
        best,
        best_score,
        trace,
        evaluations,
        final_list: current,
    })
}

/// Independent chains, one per seed, run in parallel over one shared cache.
pub fn anneal_chains(
    data: &Dataset,
    pool: &RulePool,
    hyper: &Hyperparameters,
    config: &AnnealConfig,
    seeds: &[u64],
) -> Result<Vec<SearchResult>> {
    config.validate()?;
    let cache = ScoreCache::new(config.cache_capacity)?;
    seeds
        .par_iter()
        .map(|&seed| {
            let c = AnnealConfig { seed, ..*config };
            anneal_with_cache(data, pool, hyper, &c, &cache)
        })
        .collect()
}

pub fn write_trace_csv(result: &SearchResult, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_trace(result, std::io::BufWriter::new(file))
}

pub fn write_trace<W: Write>(result: &SearchResult, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for s in &result.trace {
        w.serialize(s)?;
    }
    w.flush().map_err(|e| Error::io("<trace>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::BinaryMatrix;
    use crate::mining::mine_rules;
    use nalgebra::DMatrix;

    fn instance(n: usize) -> (Dataset, RulePool) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rows: Vec<Vec<u8>> = (0..n).map(|_| (0..4).map(|_| rng.random_range(0..2)).collect()).collect();
        let features = BinaryMatrix::from_rows(&rows).unwrap();
        let t: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let y = (0..n)
            .map(|i| f64::from(t[i]) * 3.0 * f64::from(rows[i][0]) + rng.random_range(-1.0..1.0))
            .collect();
        let data = Dataset {
            confounders: DMatrix::from_element(n, 1, 1.0),
            rule_features: features.clone(),
            y,
            t,
        };
        let pool = mine_rules(&features, 0.1, 1).unwrap();
        (data, pool)
    }

    fn hyper() -> Hyperparameters {
        Hyperparameters {
            s0: 10.0,
            r0: -10.0,
            v0: 2.0,
            w0: 1.0,
            c0: 0.01,
            u0: 0.01,
            alpha0: 0.01,
            beta0: 0.01,
            k_h: 1,
            k_i: 0,
        }
    }

    #[test]
    fn cache_hits_and_order_sensitivity() {
        let (data, pool) = instance(200);
        let h = hyper();
        let cache = ScoreCache::default();
        let vi = VariationalConfig::default();
        let a = RuleList::new(vec![pool.rules[0].clone(), pool.rules[1].clone()]).unwrap();
        let b = RuleList::new(vec![pool.rules[1].clone(), pool.rules[0].clone()]).unwrap();
        let s1 = score_model(&a, &data, &h, &vi, &cache).unwrap();
        let s2 = score_model(&a, &data, &h, &vi, &cache).unwrap();
        assert_eq!(s1, s2);
        assert_eq!((cache.hits(), cache.misses()), (1, 1));
        score_model(&b, &data, &h, &vi, &cache).unwrap();
        assert_eq!((cache.hits(), cache.misses()), (1, 2));
    }

    #[test]
    fn lru_evicts_oldest() {
        let cache = ScoreCache::new(2).unwrap();
        cache.put(vec![vec![0]], 1.0);
        cache.put(vec![vec![1]], 2.0);
        assert_eq!(cache.get(&vec![vec![0]]), Some(1.0));
        cache.put(vec![vec![2]], 3.0);
        assert_eq!(cache.get(&vec![vec![1]]), None);
        assert_eq!(cache.len(), 2);
    }

    #[test]
    fn single_rule_pool() {
        let (data, pool) = instance(200);
        let pool = RulePool {
            rules: vec![pool.rules[0].clone()],
            params: pool.params,
        };
        let h = hyper();
        let config = AnnealConfig {
            n_steps: 10,
            init_length: 0,
            ..AnnealConfig::default()
        };
        let cache = ScoreCache::default();
        let r = anneal_with_cache(&data, &pool, &h, &config, &cache).unwrap();
        assert!(cache.misses() <= 2);
        let vi = VariationalConfig::default();
        let empty = score_model(&RuleList::empty(), &data, &h, &vi, &cache).unwrap();
        let one = score_model(&RuleList::new(pool.rules.clone()).unwrap(), &data, &h, &vi, &cache).unwrap();
        assert_eq!(r.best_score, empty.max(one));
    }

    #[test]
    fn best_is_trace_max_and_deterministic() {
        let (data, pool) = instance(300);
        let h = hyper();
        let config = AnnealConfig {
            n_steps: 60,
            seed: 3,
            ..AnnealConfig::default()
        };
        let r = anneal(&data, &pool, &h, &config).unwrap();
        let max = r.trace.iter().map(|s| s.proposed_score).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(r.best_score, max);
        assert_eq!(r.trace.len(), 61);
        assert_eq!(r, anneal(&data, &pool, &h, &config).unwrap());
    }

    #[test]
    fn greedy_limit_never_goes_downhill() {
        let (data, pool) = instance(300);
        let h = hyper();
        let config = AnnealConfig {
            n_steps: 60,
            temperature: Temperature::Constant { value: 1e-9 },
            ..AnnealConfig::default()
        };
        let r = anneal(&data, &pool, &h, &config).unwrap();
        for w in r.trace.windows(2) {
            if w[1].accepted {
                assert!(w[1].proposed_score >= w[0].current_score);
            }
            assert!(w[1].current_score >= w[0].current_score);
        }
    }

    #[test]
    fn geometric_schedule() {
        let t = Temperature::Geometric {
            initial: 2.0,
            factor: 0.5,
        };
        assert_eq!(t.at(1), 2.0);
        assert_eq!(t.at(3), 0.5);
        assert!(t.validate().is_ok());
        assert!(Temperature::Constant { value: 0.0 }.validate().is_err());
    }

    #[test]
    fn rejects_bad_config() {
        let (data, pool) = instance(50);
        let h = hyper();
        let bad = [
            AnnealConfig {
                n_steps: 0,
                ..AnnealConfig::default()
            },
            AnnealConfig {
                init_length: 13,
                ..AnnealConfig::default()
            },
        ];
        for c in bad {
            assert!(matches!(anneal(&data, &pool, &h, &c), Err(Error::Config(_))));
        }
        let empty = RulePool {
            rules: vec![],
            params: pool.params,
        };
        assert!(matches!(
            anneal(&data, &empty, &h, &AnnealConfig::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn parallel_chains_match_serial() {
        let (data, pool) = instance(200);
        let h = hyper();
        let config = AnnealConfig {
            n_steps: 30,
            ..AnnealConfig::default()
        };
        let par = anneal_chains(&data, &pool, &h, &config, &[1, 2, 3]).unwrap();
        for (r, seed) in par.iter().zip([1, 2, 3]) {
            let s = anneal(&data, &pool, &h, &AnnealConfig { seed, ..config }).unwrap();
            assert_eq!(r.best, s.best);
            assert_eq!(r.best_score, s.best_score);
        }
    }
}
