//! Systematic-scan Gibbs sampler over the exact posterior of a fixed list.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{quantile_sorted, Dataset};
use crate::error::{Error, Result};
use crate::model::{gamma_sample, subgroup_stats, treatment_effects, Hyperparameters, LatentParams, SubgroupStats};
use crate::rule_list::RuleList;
use crate::truncnorm::TruncatedNormal;
use crate::vi::{initial_increments, MeanSd};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GibbsConfig {
    pub n_steps: usize,
    pub burn_in: usize,
    pub thin: usize,
}

impl GibbsConfig {
    /// `n_steps` sweeps, the first 20% discarded, no thinning.
    pub fn with_steps(n_steps: usize) -> Self {
        Self {
            n_steps,
            burn_in: n_steps / 5,
            thin: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_steps <= self.burn_in {
            return Err(Error::Config(format!(
                "n_steps ({}) must exceed burn_in ({})",
                self.n_steps, self.burn_in
            )));
        }
        if self.thin == 0 {
            return Err(Error::Config("thin must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GibbsTrace {
    /// Retained samples, after burn-in and thinning.
    pub samples: Vec<LatentParams>,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
}

/// Gamma distribution in shape-rate form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaDensity {
    pub shape: f64,
    pub rate: f64,
}

impl GammaDensity {
    pub fn ln_pdf(&self, x: f64) -> f64 {
        self.shape * self.rate.ln() - libm::lgamma(self.shape) + (self.shape - 1.0) * x.ln() - self.rate * x
    }
}

/// Gaussian in precision form, `N(mean, precision^-1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDensity {
    pub mean: DVector<f64>,
    pub precision: DMatrix<f64>,
}

impl GaussianDensity {
    pub fn ln_pdf(&self, x: &DVector<f64>) -> f64 {
        let k = self.mean.len() as f64;
        let chol = self.precision.clone().cholesky().expect("positive definite precision");
        let ln_det: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum();
        let e = x - &self.mean;
        ln_det - 0.5 * k * crate::model::LN_2PI - 0.5 * (e.transpose() * &self.precision * &e)[0]
    }
}

/// Full conditional distributions of every parameter block.
pub struct FullConditionals<'a> {
    stats: &'a [SubgroupStats],
    hyper: &'a Hyperparameters,
}

impl<'a> FullConditionals<'a> {
    pub fn new(stats: &'a [SubgroupStats], hyper: &'a Hyperparameters) -> Self {
        Self { stats, hyper }
    }

    pub fn coefficients(&self, l: usize, p: &LatentParams) -> Result<GaussianDensity> {
        let s = &self.stats[l];
        let k = self.hyper.k();
        let lam = p.lambda[l];
        let d = treatment_effects(&p.delta)[l];
        let prior = self.hyper.coef_prior_precision(p.tau);
        let mut precision = lam * &s.sxx;
        let mut rhs = lam * (&s.sxy - d * &s.sx_treated);
        for j in 0..k {
            precision[(j, j)] += prior[j];
            if j < self.hyper.k_h {
                rhs[j] += prior[j] * p.m[j];
            }
        }
        let chol = precision
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite { subgroup: l })?;
        Ok(GaussianDensity {
            mean: chol.solve(&rhs),
            precision,
        })
    }

    pub fn increment(&self, j: usize, p: &LatentParams) -> TruncatedNormal {
        let d = treatment_effects(&p.delta);
        let (mut prec, mut lin) = (0.0, 0.0);
        for l in 0..=j {
            let s = &self.stats[l];
            let n1 = s.n_treated as f64;
            let lam = p.lambda[l];
            let b = p.b.row(l).transpose();
            prec += lam * n1;
            lin += lam * (s.sy_treated - b.dot(&s.sx_treated) - n1 * (d[l] - p.delta[j]));
        }
        let (lo, hi) = self.hyper.delta_bounds(j, p.delta.len());
        if prec > 0.0 {
            TruncatedNormal::new(lin / prec, prec, lo, hi)
        } else {
            TruncatedNormal::uniform(lo, hi)
        }
    }

    pub fn precision(&self, l: usize, p: &LatentParams) -> GammaDensity {
        let s = &self.stats[l];
        let d = treatment_effects(&p.delta)[l];
        let ssr = s.ssr(&p.b.row(l).transpose(), d).max(0.0);
        GammaDensity {
            shape: self.hyper.alpha0 + 0.5 * s.n as f64,
            rate: self.hyper.beta0 + 0.5 * ssr,
        }
    }

    pub fn shared_mean(&self, p: &LatentParams) -> GaussianDensity {
        let kh = self.hyper.k_h;
        let len = p.n_subgroups() as f64;
        let prec = self.hyper.c0 + len * p.tau;
        let sum = DVector::from_fn(kh, |j, _| p.b.column(j).sum());
        GaussianDensity {
            mean: sum * (p.tau / prec),
            precision: DMatrix::identity(kh, kh) * prec,
        }
    }

    pub fn shared_precision(&self, p: &LatentParams) -> GammaDensity {
        let kh = self.hyper.k_h;
        let (ts, tr) = self.hyper.tau_gamma();
        let mut sq = 0.0;
        for l in 0..p.n_subgroups() {
            for j in 0..kh {
                sq += (p.b[(l, j)] - p.m[j]).powi(2);
            }
        }
        GammaDensity {
            shape: ts + 0.5 * (p.n_subgroups() * kh) as f64,
            rate: tr + 0.5 * sq,
        }
    }

    /// One sweep in the fixed order: B blocks, increments top to bottom,
    /// precisions, shared mean, shared precision.
    pub fn sweep<R: Rng + ?Sized>(&self, p: &mut LatentParams, rng: &mut R) -> Result<()> {
        let len = p.n_subgroups();
        let k = self.hyper.k();
        for l in 0..len {
            let c = self.coefficients(l, p)?;
            let chol = c.precision.cholesky().ok_or(Error::NotPositiveDefinite { subgroup: l })?;
            // x = mean + L^-T z has covariance (L L')^-1
            let z = DVector::from_fn(k, |_, _| StandardNormal.sample(rng));
            let draw = c.mean + chol.l().transpose().solve_upper_triangular(&z).expect("nonsingular factor");
            p.b.set_row(l, &draw.transpose());
        }
        for j in 0..len {
            let f = self.increment(j, p);
            p.delta[j] = loop {
                let x = f.sample(rng);
                if x > f.lower && x < f.upper {
                    break x;
                }
            };
        }
        for l in 0..len {
            let g = self.precision(l, p);
            p.lambda[l] = gamma_sample(g.shape, g.rate, rng);
        }
        if self.hyper.k_h > 0 {
            let g = self.shared_mean(p);
            let sd = g.precision[(0, 0)].sqrt().recip();
            p.m = DVector::from_fn(self.hyper.k_h, |j, _| {
                g.mean[j] + sd * rng.sample::<f64, _>(StandardNormal)
            });
        }
        let g = self.shared_precision(p);
        p.tau = gamma_sample(g.shape, g.rate, rng);
        Ok(())
    }
}

/// Data-driven starting point: contrast-based increments, ridge coefficients,
/// conditional-mean precisions.
pub fn initial_state(stats: &[SubgroupStats], hyper: &Hyperparameters) -> LatentParams {
    let len = stats.len();
    let k = hyper.k();
    let delta = initial_increments(stats, hyper);
    let d = treatment_effects(&delta);
    let mut b = DMatrix::zeros(len, k);
    for (l, s) in stats.iter().enumerate() {
        let p = &s.sxx + DMatrix::identity(k, k);
        if let Some(chol) = p.cholesky() {
            b.set_row(l, &chol.solve(&(&s.sxy - d[l] * &s.sx_treated)).transpose());
        }
    }
    let lambda = stats
        .iter()
        .enumerate()
        .map(|(l, s)| {
            let ssr = s.ssr(&b.row(l).transpose(), d[l]).max(0.0);
            (hyper.alpha0 + 0.5 * s.n as f64) / (hyper.beta0 + 0.5 * ssr)
        })
        .collect();
    let m = DVector::from_fn(hyper.k_h, |j, _| b.column(j).mean());
    let (ts, tr) = hyper.tau_gamma();
    LatentParams {
        b,
        delta,
        lambda,
        m,
        tau: ts / tr,
    }
}

/// Run one chain of `config.n_steps` sweeps.
pub fn run_gibbs(
    list: &RuleList,
    data: &Dataset,
    hyper: &Hyperparameters,
    config: &GibbsConfig,
    seed: u64,
) -> Result<GibbsTrace> {
    config.validate()?;
    hyper.validate_for(data)?;
    let (_, stats) = subgroup_stats(list, data)?;
    run_gibbs_stats(&stats, hyper, config, seed)
}

/// [`run_gibbs`] from precomputed subgroup statistics.
pub fn run_gibbs_stats(
    stats: &[SubgroupStats],
    hyper: &Hyperparameters,
    config: &GibbsConfig,
    seed: u64,
) -> Result<GibbsTrace> {
    config.validate()?;
    let cond = FullConditionals::new(stats, hyper);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = initial_state(stats, hyper);
    let mut samples = Vec::with_capacity((config.n_steps - config.burn_in) / config.thin + 1);
    for step in 0..config.n_steps {
        cond.sweep(&mut state, &mut rng)?;
        if step >= config.burn_in && (step - config.burn_in) % config.thin == 0 {
            samples.push(state.clone());
        }
    }
    Ok(GibbsTrace {
        samples,
        burn_in: config.burn_in,
        thin: config.thin,
        seed,
    })
}

pub const SUMMARY_QUANTILES: [f64; 5] = [0.025, 0.25, 0.5, 0.75, 0.975];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSummary {
    pub mean: f64,
    pub sd: f64,
    /// Values at [`SUMMARY_QUANTILES`].
    pub quantiles: Vec<f64>,
}

impl SampleSummary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Self {
            mean,
            sd: var.sqrt(),
            quantiles: SUMMARY_QUANTILES.iter().map(|&p| quantile_sorted(&sorted, p)).collect(),
        }
    }

    pub fn mean_sd(&self) -> MeanSd {
        MeanSd {
            mean: self.mean,
            sd: self.sd,
        }
    }
}

/// Per-subgroup summaries of the effects `D` over the retained samples.
pub fn trace_effect_summary(trace: &GibbsTrace) -> Result<Vec<SampleSummary>> {
    let first = trace
        .samples
        .first()
        .ok_or_else(|| Error::Config("trace has no retained samples".into()))?;
    let effects: Vec<Vec<f64>> = trace.samples.iter().map(LatentParams::effects).collect();
    Ok((0..first.n_subgroups())
        .map(|l| SampleSummary::of(&effects.iter().map(|d| d[l]).collect::<Vec<_>>()))
        .collect())
}

/// One row per retained sample, one column per scalar parameter.
pub fn write_trace_csv(trace: &GibbsTrace, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_trace(trace, std::io::BufWriter::new(file))
}

pub fn write_trace<W: Write>(trace: &GibbsTrace, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if let Some(first) = trace.samples.first() {
        let len = first.n_subgroups();
        let mut header = vec!["step".to_string()];
        header.extend(LatentParams::scalar_names(len, first.b.ncols(), first.m.len()));
        w.write_record(&header)?;
        for (i, s) in trace.samples.iter().enumerate() {
            let step = trace.burn_in + i * trace.thin;
            let mut row = vec![step.to_string()];
            row.extend(s.to_vec().iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| Error::io("<trace>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::log_joint;
    use crate::data::BinaryMatrix;
    use crate::mining::Rule;

    fn hyper(k: usize) -> Hyperparameters {
        Hyperparameters {
            s0: 4.0,
            r0: -4.0,
            v0: 4.0,
            w0: 0.5,
            c0: 1.0,
            u0: 1.0,
            alpha0: 3.0,
            beta0: 2.0,
            k_h: k,
            k_i: 0,
        }
    }

    fn instance(seed: u64, n: usize, k: usize) -> (RuleList, Dataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<u8>> = (0..n).map(|_| (0..2).map(|_| rng.random_range(0..2)).collect()).collect();
        let features = BinaryMatrix::from_rows(&rows).unwrap();
        let names = features.names().to_vec();
        let list = RuleList::new(vec![Rule::new(vec![0], &names), Rule::new(vec![1], &names)]).unwrap();
        let confounders = DMatrix::from_fn(n, k, |_, _| rng.random_range(-1.0..1.0));
        let t: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let y = (0..n)
            .map(|i| f64::from(t[i]) * (1.0 + f64::from(rows[i][0])) + rng.random_range(-1.0..1.0))
            .collect();
        (
            list,
            Dataset {
                rule_features: features,
                confounders,
                y,
                t,
            },
        )
    }

    #[test]
    fn seed_reproducible_and_in_support() {
        let (list, data) = instance(1, 50, 2);
        let h = hyper(2);
        let cfg = GibbsConfig::with_steps(300);
        let a = run_gibbs(&list, &data, &h, &cfg, 9).unwrap();
        let b = run_gibbs(&list, &data, &h, &cfg, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.samples.len(), 240);
        for s in &a.samples {
            assert!(s.in_support(&h));
            let d = s.effects();
            assert!(d.windows(2).all(|w| w[0] > w[1]));
        }
    }

    #[test]
    fn prior_only_precision_moments() {
        let h = hyper(1);
        let stats = vec![SubgroupStats {
            n: 0,
            n_treated: 0,
            sxx: DMatrix::zeros(1, 1),
            sxy: DVector::zeros(1),
            sx_treated: DVector::zeros(1),
            sy: 0.0,
            syy: 0.0,
            sy_treated: 0.0,
        }];
        let trace = run_gibbs_stats(&stats, &h, &GibbsConfig::with_steps(20000), 4).unwrap();
        let lam: Vec<f64> = trace.samples.iter().map(|s| s.lambda[0]).collect();
        let n = lam.len() as f64;
        let mean = lam.iter().sum::<f64>() / n;
        let var = lam.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let (m0, v0) = (h.alpha0 / h.beta0, h.alpha0 / h.beta0.powi(2));
        // lambda draws are independent when no data links them
        assert!((mean - m0).abs() < 3.0 * (v0 / n).sqrt(), "{mean}");
        let var_se = (2.0 * v0 * v0 / n + v0 * v0 * 6.0 / h.alpha0 / n).sqrt();
        assert!((var - v0).abs() < 3.0 * var_se, "{var}");
    }

    /// `log_joint(x) - ln conditional(x)` must not depend on the moving coordinate.
    fn assert_flat(values: &[(f64, f64)]) {
        let diffs: Vec<f64> = values.iter().map(|(j, c)| j - c).collect();
        let scale = values.iter().map(|(j, _)| j.abs()).fold(1.0, f64::max);
        for d in &diffs {
            assert!((d - diffs[0]).abs() < 1e-8 * scale, "{diffs:?}");
        }
    }

    #[test]
    fn conditionals_match_joint_on_slices() {
        let (list, data) = instance(2, 40, 2);
        let h = hyper(2);
        let (_, stats) = subgroup_stats(&list, &data).unwrap();
        let cond = FullConditionals::new(&stats, &h);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let base = crate::model::sample_prior(&h, list.len(), &mut rng);
            let lj = |p: &LatentParams| log_joint(&list, p, &data, &h).unwrap();
            let grid: Vec<f64> = (0..9).map(|i| -0.8 + 0.2 * i as f64).collect();

            let mut vals = Vec::new();
            for &g in &grid {
                let mut p = base.clone();
                p.b[(1, 0)] += g;
                p.b[(1, 1)] -= 0.5 * g;
                let c = cond.coefficients(1, &base).unwrap();
                vals.push((lj(&p), c.ln_pdf(&p.b.row(1).transpose())));
            }
            assert_flat(&vals);

            for j in 0..list.len() {
                let c = cond.increment(j, &base);
                let mut vals = Vec::new();
                for i in 1..10 {
                    let mut p = base.clone();
                    p.delta[j] = c.lower + (c.upper - c.lower) * i as f64 / 10.0;
                    vals.push((lj(&p), c.ln_pdf(p.delta[j])));
                }
                assert_flat(&vals);
            }

            let c = cond.precision(2, &base);
            let vals: Vec<_> = (1..10)
                .map(|i| {
                    let mut p = base.clone();
                    p.lambda[2] = 0.3 * i as f64;
                    (lj(&p), c.ln_pdf(p.lambda[2]))
                })
                .collect();
            assert_flat(&vals);

            let c = cond.shared_mean(&base);
            let vals: Vec<_> = grid
                .iter()
                .map(|&g| {
                    let mut p = base.clone();
                    p.m[0] += g;
                    p.m[1] += 0.3 * g;
                    (lj(&p), c.ln_pdf(&p.m))
                })
                .collect();
            assert_flat(&vals);

            let c = cond.shared_precision(&base);
            let vals: Vec<_> = (1..10)
                .map(|i| {
                    let mut p = base.clone();
                    p.tau = 0.4 * i as f64;
                    (lj(&p), c.ln_pdf(p.tau))
                })
                .collect();
            assert_flat(&vals);
        }
    }

    #[test]
    fn degenerate_trace_summary() {
        let (list, data) = instance(3, 20, 1);
        let h = hyper(1);
        let (_, stats) = subgroup_stats(&list, &data).unwrap();
        let s = initial_state(&stats, &h);
        let trace = GibbsTrace {
            samples: vec![s.clone(); 5],
            burn_in: 0,
            thin: 1,
            seed: 0,
        };
        let sum = trace_effect_summary(&trace).unwrap();
        for (l, d) in s.effects().iter().enumerate() {
            assert_eq!(sum[l].sd, 0.0);
            assert!((sum[l].mean - d).abs() < 1e-12);
        }
        let empty = GibbsTrace {
            samples: vec![],
            ..trace
        };
        assert!(matches!(trace_effect_summary(&empty), Err(Error::Config(_))));
    }

    #[test]
    fn quantiles_ordered() {
        let s = SampleSummary::of(&[3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0]);
        assert!(s.quantiles.windows(2).all(|w| w[0] <= w[1]));
        assert!(s.quantiles[1] <= s.quantiles[2] && s.quantiles[2] <= s.quantiles[3]);
    }

    #[test]
    fn trace_csv_layout() {
        let (list, data) = instance(4, 30, 1);
        let h = hyper(1);
        let trace = run_gibbs(&list, &data, &h, &GibbsConfig::with_steps(10), 1).unwrap();
        let mut buf = Vec::new();
        write_trace(&trace, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "step,B[0][0],B[1][0],B[2][0],delta[0],delta[1],delta[2],lambda[0],lambda[1],lambda[2],m[0],tau"
        );
        assert_eq!(lines.count(), 8);
    }

    #[test]
    fn rejects_bad_config() {
        let (list, data) = instance(4, 30, 1);
        let h = hyper(1);
        let cfg = GibbsConfig {
            n_steps: 10,
            burn_in: 10,
            thin: 1,
        };
        assert!(matches!(run_gibbs(&list, &data, &h, &cfg, 1), Err(Error::Config(_))));
    }
}
