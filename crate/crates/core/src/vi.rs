//! Coordinate-ascent variational inference for a fixed rule list.
//!
//! The approximate posterior factorizes as
//! `q(B[1]) ... q(B[L]) q(delta[1]) ... q(delta[L]) q(lambda[1]) ... q(lambda[L]) q(m) q(tau)`
//! with full-covariance Gaussian coefficient factors, truncated-normal
//! increment factors on the prior box, and Gamma precision factors. Every
//! update is the exact coordinate optimum, so the ELBO never decreases.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::digamma;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::la_serde;
use crate::model::{subgroup_stats, LN_2PI, Hyperparameters, SubgroupStats};
use crate::rule_list::RuleList;
use crate::truncnorm::{TruncatedMoments, TruncatedNormal};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianFactor {
    #[serde(with = "la_serde::vector")]
    pub mean: DVector<f64>,
    #[serde(with = "la_serde::matrix")]
    pub cov: DMatrix<f64>,
}

impl GaussianFactor {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn ln_det_cov(&self) -> Option<f64> {
        if self.dim() == 0 {
            return Some(0.0);
        }
        let chol = self.cov.clone().cholesky()?;
        Some(2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
    }

    fn entropy(&self) -> Option<f64> {
        Some(0.5 * self.dim() as f64 * (1.0 + LN_2PI) + 0.5 * self.ln_det_cov()?)
    }

    fn is_valid(&self) -> bool {
        self.cov.nrows() == self.dim()
            && self.cov.ncols() == self.dim()
            && self.mean.iter().all(|x| x.is_finite())
            && (&self.cov - self.cov.transpose()).amax() <= 1e-9 * self.cov.amax().max(1.0)
            && self.ln_det_cov().is_some_and(f64::is_finite)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaFactor {
    pub shape: f64,
    pub rate: f64,
}

impl GammaFactor {
    pub fn mean(&self) -> f64 {
        self.shape / self.rate
    }

    pub fn ln_mean(&self) -> f64 {
        digamma(self.shape) - self.rate.ln()
    }

    pub fn entropy(&self) -> f64 {
        self.shape - self.rate.ln() + libm::lgamma(self.shape) + (1.0 - self.shape) * digamma(self.shape)
    }

    /// `E_q[ln Gamma(x; shape0, rate0)]`.
    fn expected_ln_prior(&self, shape0: f64, rate0: f64) -> f64 {
        shape0 * rate0.ln() - libm::lgamma(shape0) + (shape0 - 1.0) * self.ln_mean() - rate0 * self.mean()
    }

    fn is_valid(&self) -> bool {
        self.shape > 0.0 && self.rate > 0.0 && self.shape.is_finite() && self.rate.is_finite()
    }
}

/// Mean-field approximate posterior for a list of `L` subgroups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalPosterior {
    #[serde(rename = "B")]
    pub b: Vec<GaussianFactor>,
    pub delta: Vec<TruncatedNormal>,
    pub lambda: Vec<GammaFactor>,
    pub m: GaussianFactor,
    pub tau: GammaFactor,
}

impl VariationalPosterior {
    pub fn n_subgroups(&self) -> usize {
        self.delta.len()
    }

    fn check(&self, hyper: &Hyperparameters) -> Result<()> {
        let len = self.delta.len();
        if self.b.len() != len || self.lambda.len() != len {
            return Err(Error::Parameter("factor counts disagree".into()));
        }
        if self.m.dim() != hyper.k_h || self.b.iter().any(|f| f.dim() != hyper.k()) {
            return Err(Error::Parameter("factor dimensions disagree with k_h, k_i".into()));
        }
        if !self.b.iter().all(GaussianFactor::is_valid) || !(hyper.k_h == 0 || self.m.is_valid()) {
            return Err(Error::Parameter(
                "Gaussian factor covariance is not symmetric positive definite".into(),
            ));
        }
        if !self.lambda.iter().all(GammaFactor::is_valid) || !self.tau.is_valid() {
            return Err(Error::Parameter("Gamma factor parameters must be positive".into()));
        }
        for (l, d) in self.delta.iter().enumerate() {
            let (lo, hi) = hyper.delta_bounds(l, len);
            if !d.is_valid() || d.lower != lo || d.upper != hi {
                return Err(Error::Parameter(format!(
                    "delta factor {l} must be truncated to its prior interval ({lo}, {hi})"
                )));
            }
        }
        Ok(())
    }

    fn delta_moments(&self) -> Vec<TruncatedMoments> {
        self.delta.iter().map(TruncatedNormal::moments).collect()
    }
}

/// Suffix-sum means and variances of the effects from independent increments.
fn effect_moments(dm: &[TruncatedMoments]) -> (Vec<f64>, Vec<f64>) {
    let len = dm.len();
    let (mut mean, mut var) = (vec![0.0; len], vec![0.0; len]);
    let (mut am, mut av) = (0.0, 0.0);
    for l in (0..len).rev() {
        am += dm[l].mean;
        av += dm[l].var;
        mean[l] = am;
        var[l] = av;
    }
    (mean, var)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariationalConfig {
    pub max_iter: usize,
    pub rel_tol: f64,
}

impl Default for VariationalConfig {
    fn default() -> Self {
        Self {
            max_iter: 500,
            rel_tol: 1e-6,
        }
    }
}

/// ELBO after initialization (element 0) and after every sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElboTrace {
    pub values: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl ElboTrace {
    pub fn final_elbo(&self) -> f64 {
        *self.values.last().expect("trace holds the initial ELBO")
    }
}

/// Closed-form pieces of the ELBO, in nats.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ElboTerms {
    pub likelihood: f64,
    pub coefficients: f64,
    pub increments: f64,
    pub precisions: f64,
    pub shared_mean: f64,
    pub shared_precision: f64,
}

impl ElboTerms {
    pub fn total(&self) -> f64 {
        self.likelihood
            + self.coefficients
            + self.increments
            + self.precisions
            + self.shared_mean
            + self.shared_precision
    }
}

/// Increments implied by the per-subgroup difference in treated and untreated
/// mean outcomes, clipped into the interior of the prior box.
pub(crate) fn initial_increments(stats: &[SubgroupStats], hyper: &Hyperparameters) -> Vec<f64> {
    let len = stats.len();
    let contrast: Vec<f64> = stats
        .iter()
        .map(|s| {
            let n0 = s.n - s.n_treated;
            if s.n_treated == 0 || n0 == 0 {
                return 0.0;
            }
            s.sy_treated / s.n_treated as f64 - (s.sy - s.sy_treated) / n0 as f64
        })
        .collect();
    (0..len)
        .map(|l| {
            let (lo, hi) = hyper.delta_bounds(l, len);
            let raw = if l + 1 == len {
                contrast[l]
            } else {
                contrast[l] - contrast[l + 1]
            };
            let w = hi - lo;
            raw.clamp(lo + 0.01 * w, hi - 0.01 * w)
        })
        .collect()
}

struct Cavi<'a> {
    stats: &'a [SubgroupStats],
    hyper: &'a Hyperparameters,
    q: VariationalPosterior,
}

impl<'a> Cavi<'a> {
    fn len(&self) -> usize {
        self.stats.len()
    }

    fn prior_mean_h(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.hyper.k());
        v.rows_mut(0, self.hyper.k_h).copy_from(&self.q.m.mean);
        v
    }

    fn init(stats: &'a [SubgroupStats], hyper: &'a Hyperparameters) -> Result<Self> {
        let len = stats.len();
        let k = hyper.k();
        let delta = initial_increments(stats, hyper)
            .into_iter()
            .enumerate()
            .map(|(l, centre)| {
                let (lo, hi) = hyper.delta_bounds(l, len);
                TruncatedNormal::new(centre, (20.0 / (hi - lo)).powi(2), lo, hi)
            })
            .collect::<Vec<_>>();
        let d0 = effect_moments(&delta.iter().map(TruncatedNormal::moments).collect::<Vec<_>>()).0;
        let b = stats
            .iter()
            .zip(&d0)
            .map(|(s, &d)| {
                let p = &s.sxx + DMatrix::identity(k, k);
                let cov = p.cholesky().map_or_else(|| DMatrix::identity(k, k), |c| c.inverse());
                let mean = if s.n == 0 {
                    DVector::zeros(k)
                } else {
                    &cov * (&s.sxy - d * &s.sx_treated)
                };
                GaussianFactor { mean, cov }
            })
            .collect();
        let (ts, tr) = hyper.tau_gamma();
        let q = VariationalPosterior {
            b,
            delta,
            lambda: vec![
                GammaFactor {
                    shape: hyper.alpha0,
                    rate: hyper.beta0
                };
                len
            ],
            m: GaussianFactor {
                mean: DVector::zeros(hyper.k_h),
                cov: DMatrix::identity(hyper.k_h, hyper.k_h) / hyper.c0,
            },
            tau: GammaFactor { shape: ts, rate: tr },
        };
        Ok(Self { stats, hyper, q })
    }

    fn update_b(&mut self, d_mean: &[f64], iteration: usize) -> Result<()> {
        let k = self.hyper.k();
        let prec_diag = self.hyper.coef_prior_precision(self.q.tau.mean());
        let prior_mean = self.prior_mean_h();
        for l in 0..self.len() {
            let s = &self.stats[l];
            let e_lam = self.q.lambda[l].mean();
            let mut p = e_lam * &s.sxx;
            for j in 0..k {
                p[(j, j)] += prec_diag[j];
            }
            let rhs = e_lam * (&s.sxy - d_mean[l] * &s.sx_treated) + prec_diag.component_mul(&prior_mean);
            let chol = p.cholesky().ok_or_else(|| Error::Numerical {
                iteration,
                message: format!("coefficient precision of subgroup {l} is not positive definite"),
            })?;
            let mean = chol.solve(&rhs);
            let cov = chol.inverse();
            self.q.b[l] = GaussianFactor { mean, cov };
        }
        Ok(())
    }

    fn update_delta(&mut self) {
        let len = self.len();
        let mut dm = self.q.delta_moments();
        for j in 0..len {
            let (d_mean, _) = effect_moments(&dm);
            let (mut prec, mut lin) = (0.0, 0.0);
            for l in 0..=j {
                let s = &self.stats[l];
                let e_lam = self.q.lambda[l].mean();
                let n1 = s.n_treated as f64;
                let rest = d_mean[l] - dm[j].mean;
                prec += e_lam * n1;
                lin += e_lam * (s.sy_treated - self.q.b[l].mean.dot(&s.sx_treated) - n1 * rest);
            }
            let (lo, hi) = self.hyper.delta_bounds(j, len);
            let f = if prec > 0.0 {
                TruncatedNormal::new(lin / prec, prec, lo, hi)
            } else {
                TruncatedNormal::uniform(lo, hi)
            };
            dm[j] = f.moments();
            self.q.delta[j] = f;
        }
    }

    fn expected_ssr(&self, l: usize, d_mean: f64, d_var: f64) -> f64 {
        let s = &self.stats[l];
        let f = &self.q.b[l];
        let mu = &f.mean;
        let e_d2 = d_var + d_mean * d_mean;
        let quad = (mu.transpose() * &s.sxx * mu)[0] + s.sxx.component_mul(&f.cov).sum();
        s.syy - 2.0 * d_mean * s.sy_treated - 2.0 * mu.dot(&s.sxy)
            + e_d2 * s.n_treated as f64
            + 2.0 * d_mean * mu.dot(&s.sx_treated)
            + quad
    }

    fn update_lambda(&mut self) {
        let (d_mean, d_var) = effect_moments(&self.q.delta_moments());
        for l in 0..self.len() {
            let essr = self.expected_ssr(l, d_mean[l], d_var[l]).max(0.0);
            self.q.lambda[l] = GammaFactor {
                shape: self.hyper.alpha0 + 0.5 * self.stats[l].n as f64,
                rate: self.hyper.beta0 + 0.5 * essr,
            };
        }
    }

    fn update_m(&mut self) {
        let kh = self.hyper.k_h;
        if kh == 0 {
            return;
        }
        let e_tau = self.q.tau.mean();
        let prec = self.hyper.c0 + self.len() as f64 * e_tau;
        let mut sum = DVector::zeros(kh);
        for f in &self.q.b {
            sum += f.mean.rows(0, kh);
        }
        self.q.m = GaussianFactor {
            mean: sum * (e_tau / prec),
            cov: DMatrix::identity(kh, kh) / prec,
        };
    }

    /// `sum_l E||B_h[l] - m||^2`.
    fn expected_shared_dev(&self) -> f64 {
        let kh = self.hyper.k_h;
        let tr_m = self.q.m.cov.trace();
        self.q
            .b
            .iter()
            .map(|f| {
                let dev = f.mean.rows(0, kh) - &self.q.m.mean;
                dev.norm_squared() + f.cov.view((0, 0), (kh, kh)).trace() + tr_m
            })
            .sum()
    }

    fn update_tau(&mut self) {
        let kh = self.hyper.k_h;
        let (ts, tr) = self.hyper.tau_gamma();
        if kh == 0 {
            self.q.tau = GammaFactor { shape: ts, rate: tr };
            return;
        }
        self.q.tau = GammaFactor {
            shape: ts + 0.5 * (self.len() * kh) as f64,
            rate: tr + 0.5 * self.expected_shared_dev(),
        };
    }

    fn sweep(&mut self, iteration: usize) -> Result<()> {
        let (d_mean, _) = effect_moments(&self.q.delta_moments());
        self.update_b(&d_mean, iteration)?;
        self.update_delta();
        self.update_lambda();
        self.update_m();
        self.update_tau();
        Ok(())
    }

    fn terms(&self) -> Option<ElboTerms> {
        let h = self.hyper;
        let len = self.len();
        let kh = h.k_h;
        let ki = h.k_i;
        let dm = self.q.delta_moments();
        let (d_mean, d_var) = effect_moments(&dm);
        let mut t = ElboTerms::default();
        for l in 0..len {
            let lam = &self.q.lambda[l];
            let n = self.stats[l].n as f64;
            t.likelihood += 0.5 * n * (lam.ln_mean() - LN_2PI)
                - 0.5 * lam.mean() * self.expected_ssr(l, d_mean[l], d_var[l]);
            t.precisions += lam.expected_ln_prior(h.alpha0, h.beta0) + lam.entropy();
            let (lo, hi) = h.delta_bounds(l, len);
            t.increments += -(hi - lo).ln() + dm[l].entropy;
        }
        let e_tau = self.q.tau.mean();
        let e_ln_tau = self.q.tau.ln_mean();
        t.coefficients += 0.5 * (len * kh) as f64 * (e_ln_tau - LN_2PI) - 0.5 * e_tau * self.expected_shared_dev();
        for f in &self.q.b {
            if ki > 0 {
                let mi = f.mean.rows(kh, ki);
                let tr = f.cov.view((kh, kh), (ki, ki)).trace();
                t.coefficients += 0.5 * ki as f64 * (h.u0.ln() - LN_2PI) - 0.5 * h.u0 * (mi.norm_squared() + tr);
            }
            t.coefficients += f.entropy()?;
        }
        if kh > 0 {
            t.shared_mean = 0.5 * kh as f64 * (h.c0.ln() - LN_2PI)
                - 0.5 * h.c0 * (self.q.m.mean.norm_squared() + self.q.m.cov.trace())
                + self.q.m.entropy()?;
        }
        let (ts, tr) = h.tau_gamma();
        t.shared_precision = self.q.tau.expected_ln_prior(ts, tr) + self.q.tau.entropy();
        Some(t)
    }

    fn elbo(&self, iteration: usize) -> Result<f64> {
        let v = self.terms().map(|t| t.total());
        match v {
            Some(v) if v.is_finite() => Ok(v),
            _ => Err(Error::Numerical {
                iteration,
                message: format!("non-finite ELBO ({v:?})"),
            }),
        }
    }
}

/// Fit the variational posterior of `list` on `data`.
pub fn fit_vi(
    list: &RuleList,
    data: &Dataset,
    hyper: &Hyperparameters,
    config: &VariationalConfig,
) -> Result<(VariationalPosterior, ElboTrace)> {
    hyper.validate_for(data)?;
    let (_, stats) = subgroup_stats(list, data)?;
    fit_vi_stats(&stats, hyper, config)
}

/// [`fit_vi`] from precomputed subgroup statistics.
pub fn fit_vi_stats(
    stats: &[SubgroupStats],
    hyper: &Hyperparameters,
    config: &VariationalConfig,
) -> Result<(VariationalPosterior, ElboTrace)> {
    if config.max_iter == 0 || !(config.rel_tol > 0.0) {
        return Err(Error::Config("max_iter must be >= 1 and rel_tol > 0".into()));
    }
    let mut cavi = Cavi::init(stats, hyper)?;
    let mut values = vec![cavi.elbo(0)?];
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=config.max_iter {
        cavi.sweep(it)?;
        let e = cavi.elbo(it)?;
        let prev = *values.last().expect("non-empty");
        values.push(e);
        iterations = it;
        if (e - prev).abs() <= config.rel_tol * e.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    Ok((
        cavi.q,
        ElboTrace {
            values,
            converged,
            iterations,
        },
    ))
}

/// Evidence lower bound of `q`, in nats.
pub fn elbo(list: &RuleList, data: &Dataset, hyper: &Hyperparameters, q: &VariationalPosterior) -> Result<f64> {
    Ok(elbo_terms(list, data, hyper, q)?.total())
}

pub fn elbo_terms(
    list: &RuleList,
    data: &Dataset,
    hyper: &Hyperparameters,
    q: &VariationalPosterior,
) -> Result<ElboTerms> {
    hyper.validate_for(data)?;
    if q.n_subgroups() != list.len() {
        return Err(Error::Parameter(format!(
            "posterior has {} subgroups, list has {}",
            q.n_subgroups(),
            list.len()
        )));
    }
    q.check(hyper)?;
    let (_, stats) = subgroup_stats(list, data)?;
    let cavi = Cavi {
        stats: &stats,
        hyper,
        q: q.clone(),
    };
    cavi.terms()
        .ok_or_else(|| Error::Parameter("covariance is not positive definite".into()))
}

/// Posterior mean and standard deviation of one scalar.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectSummary {
    /// Treatment effect `D` of each subgroup, top of the list first.
    pub effect: Vec<MeanSd>,
    /// Increment `delta` of each subgroup.
    pub increment: Vec<MeanSd>,
}

/// Moments of the effects implied by the independent increment factors:
/// means add and variances add down the suffix sums.
pub fn posterior_effect_summary(q: &VariationalPosterior) -> EffectSummary {
    let dm = q.delta_moments();
    let (mean, var) = effect_moments(&dm);
    EffectSummary {
        effect: mean
            .iter()
            .zip(&var)
            .map(|(&m, &v)| MeanSd { mean: m, sd: v.sqrt() })
            .collect(),
        increment: dm
            .iter()
            .map(|m| MeanSd {
                mean: m.mean,
                sd: m.var.sqrt(),
            })
            .collect(),
    }
}

/// Effect moments with the increment covariance from a linear-response
/// correction of the increment block, other factors held fixed.
///
/// With `V` the diagonal of factor variances and `A` the off-diagonal
/// coupling of the increments in the expected log joint, the corrected
/// covariance is `(I + V A)^-1 V`. Means are unchanged.
pub fn linear_response_effect_summary(
    list: &RuleList,
    data: &Dataset,
    hyper: &Hyperparameters,
    q: &VariationalPosterior,
) -> Result<EffectSummary> {
    hyper.validate_for(data)?;
    q.check(hyper)?;
    let (_, stats) = subgroup_stats(list, data)?;
    if stats.len() != q.n_subgroups() {
        return Err(Error::Parameter("posterior and list lengths differ".into()));
    }
    let len = stats.len();
    let dm = q.delta_moments();
    // coupling of delta[j] and delta[k] is sum over l <= min(j, k) of E[lambda_l] n1_l
    let mut cum = vec![0.0; len];
    let mut acc = 0.0;
    for l in 0..len {
        acc += q.lambda[l].mean() * stats[l].n_treated as f64;
        cum[l] = acc;
    }
    let v = DMatrix::from_diagonal(&DVector::from_iterator(len, dm.iter().map(|m| m.var)));
    let a = DMatrix::from_fn(len, len, |j, k| if j == k { 0.0 } else { cum[j.min(k)] });
    let lhs = DMatrix::identity(len, len) + &v * a;
    let cov = lhs
        .lu()
        .solve(&v)
        .ok_or_else(|| Error::Numerical {
            iteration: 0,
            message: "linear-response system is singular".into(),
        })?;
    let cov = (&cov + cov.transpose()) * 0.5;
    let (mean, _) = effect_moments(&dm);
    let effect = (0..len)
        .map(|l| {
            let n = len - l;
            let var = cov.view((l, l), (n, n)).sum();
            MeanSd {
                mean: mean[l],
                sd: var.max(0.0).sqrt(),
            }
        })
        .collect();
    let increment = (0..len)
        .map(|j| MeanSd {
            mean: dm[j].mean,
            sd: cov[(j, j)].max(0.0).sqrt(),
        })
        .collect();
    Ok(EffectSummary { effect, increment })
}

/// Effect table as CSV: `subgroup, rule, mean, sd`; subgroups are 1-based.
pub fn write_effect_csv<W: std::io::Write>(list: &RuleList, summary: &EffectSummary, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["subgroup", "rule", "mean", "sd"])?;
    for (l, e) in summary.effect.iter().enumerate() {
        let rule = list.rules().get(l).map_or_else(|| "DEFAULT".to_string(), |r| r.label.clone());
        w.write_record([(l + 1).to_string(), rule, e.mean.to_string(), e.sd.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<effects>", e))?;
    Ok(())
}
