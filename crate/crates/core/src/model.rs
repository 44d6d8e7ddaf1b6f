//! The falling-rule-list outcome model: hyperparameters, latent parameters,
//! prior, generative sampler and log joint density.
//!
//! Within subgroup `l` the observed outcome is
//! `Y ~ Normal(T * D[l] + B[l] . x, 1 / lambda[l])` where the effects
//! `D[l] = delta[l] + ... + delta[L-1]` are suffix sums of increments that are
//! positive (except possibly the last), so `D` falls strictly down the list.


use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{BinaryMatrix, Dataset};
use crate::error::{Error, Result};
use crate::la_serde;
use crate::rule_list::{assign_matrix, Assignment, RuleList};

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    /// Upper bound of every effect increment (outcome units).
    pub s0: f64,
    /// Lower bound of the last increment, i.e. of the default subgroup's effect.
    pub r0: f64,
    /// Degrees of freedom of the scalar Wishart prior on `tau`.
    pub v0: f64,
    /// Scale of the scalar Wishart prior on `tau`.
    pub w0: f64,
    /// Prior precision of the shared coefficient mean `m`.
    pub c0: f64,
    /// Prior precision of the independent coefficients.
    pub u0: f64,
    /// Gamma shape for the noise precisions.
    pub alpha0: f64,
    /// Gamma rate for the noise precisions.
    pub beta0: f64,
    /// Leading confounder columns sharing the hierarchical prior.
    pub k_h: usize,
    /// Trailing confounder columns with independent priors.
    pub k_i: usize,
}

impl Hyperparameters {
    /// Weakly informative defaults scaled to the outcome: `s0 = 10 sd(Y)`,
    /// `r0 = -s0`, all confounders hierarchical.
    pub fn defaults_for(data: &Dataset) -> Self {
        let sd = data.outcome_sd();
        let s0 = if sd > 0.0 { 10.0 * sd } else { 10.0 };
        Self {
            s0,
            r0: -s0,
            v0: 2.0,
            w0: 1.0,
            c0: 1e-2,
            u0: 1e-2,
            alpha0: 1e-2,
            beta0: 1e-2,
            k_h: data.n_confounders(),
            k_i: 0,
        }
    }

    pub fn k(&self) -> usize {
        self.k_h + self.k_i
    }

    pub fn validate(&self) -> Result<()> {
        let positives = [
            ("s0", self.s0),
            ("v0", self.v0),
            ("w0", self.w0),
            ("c0", self.c0),
            ("u0", self.u0),
            ("alpha0", self.alpha0),
            ("beta0", self.beta0),
        ];
        for (name, v) in positives {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if !(self.r0.is_finite() && self.r0 < self.s0) {
            return Err(Error::Parameter(format!(
                "r0 must be finite and below s0 (r0 = {}, s0 = {})",
                self.r0, self.s0
            )));
        }
        Ok(())
    }

    pub fn validate_for(&self, data: &Dataset) -> Result<()> {
        self.validate()?;
        if self.k() != data.n_confounders() {
            return Err(Error::Dimension(format!(
                "k_h + k_i = {} but the dataset has {} confounders",
                self.k(),
                data.n_confounders()
            )));
        }
        Ok(())
    }

    /// Prior support of increment `l` (0-based) in a list of `len` subgroups.
    pub fn delta_bounds(&self, l: usize, len: usize) -> (f64, f64) {
        if l + 1 == len {
            (self.r0, self.s0)
        } else {
            (0.0, self.s0)
        }
    }

    /// Shape and rate of the Gamma equivalent of the scalar Wishart on `tau`.
    pub fn tau_gamma(&self) -> (f64, f64) {
        (0.5 * self.v0, 0.5 / self.w0)
    }

    /// Diagonal of the prior precision of each coefficient vector given `tau`.
    pub(crate) fn coef_prior_precision(&self, tau: f64) -> DVector<f64> {
        DVector::from_fn(self.k(), |j, _| if j < self.k_h { tau } else { self.u0 })
    }
}

/// Latent parameters for a list of `L` subgroups and `K` confounders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentParams {
    /// Row `l` holds subgroup `l`'s coefficients.
    #[serde(rename = "B", with = "la_serde::matrix")]
    pub b: DMatrix<f64>,
    pub delta: Vec<f64>,
    pub lambda: Vec<f64>,
    #[serde(with = "la_serde::vector")]
    pub m: DVector<f64>,
    pub tau: f64,
}

impl LatentParams {
    pub fn n_subgroups(&self) -> usize {
        self.delta.len()
    }

    pub fn effects(&self) -> Vec<f64> {
        treatment_effects(&self.delta)
    }

    pub fn in_support(&self, hyper: &Hyperparameters) -> bool {
        let len = self.delta.len();
        self.delta.iter().enumerate().all(|(l, &d)| {
            let (lo, hi) = hyper.delta_bounds(l, len);
            d > lo && d < hi
        }) && self.lambda.iter().all(|&x| x > 0.0 && x.is_finite())
            && self.tau > 0.0
            && self.tau.is_finite()
    }

    pub fn check_dims(&self, len: usize, hyper: &Hyperparameters) -> Result<()> {
        if self.delta.len() != len
            || self.lambda.len() != len
            || self.b.nrows() != len
            || self.b.ncols() != hyper.k()
            || self.m.len() != hyper.k_h
        {
            return Err(Error::Dimension(format!(
                "parameters shaped for L = {}, K = {} do not match L = {len}, K = {}",
                self.delta.len(),
                self.b.ncols(),
                hyper.k()
            )));
        }
        Ok(())
    }

    /// Flatten into `[B (row-major), delta, lambda, m, tau]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.b.transpose().iter().copied().collect();
        v.extend(&self.delta);
        v.extend(&self.lambda);
        v.extend(self.m.iter());
        v.push(self.tau);
        v
    }

    pub fn from_vec(v: &[f64], len: usize, k: usize, k_h: usize) -> Self {
        let (b, rest) = v.split_at(len * k);
        let (delta, rest) = rest.split_at(len);
        let (lambda, rest) = rest.split_at(len);
        let (m, rest) = rest.split_at(k_h);
        Self {
            b: DMatrix::from_row_slice(len, k, b),
            delta: delta.to_vec(),
            lambda: lambda.to_vec(),
            m: DVector::from_column_slice(m),
            tau: rest[0],
        }
    }

    /// Names matching [`LatentParams::to_vec`], e.g. `B[0][1]`, `delta[2]`.
    pub fn scalar_names(len: usize, k: usize, k_h: usize) -> Vec<String> {
        let mut n = Vec::new();
        for l in 0..len {
            for j in 0..k {
                n.push(format!("B[{l}][{j}]"));
            }
        }
        n.extend((0..len).map(|l| format!("delta[{l}]")));
        n.extend((0..len).map(|l| format!("lambda[{l}]")));
        n.extend((0..k_h).map(|j| format!("m[{j}]")));
        n.push("tau".into());
        n
    }
}

/// Suffix sums `D[l] = delta[l] + delta[l+1] + ... + delta[L-1]`.
pub fn treatment_effects(delta: &[f64]) -> Vec<f64> {
    let mut d = vec![0.0; delta.len()];
    let mut acc = 0.0;
    for l in (0..delta.len()).rev() {
        acc += delta[l];
        d[l] = acc;
    }
    d
}

pub(crate) fn gamma_sample<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> f64 {
    let g = Gamma::new(shape, 1.0 / rate).expect("positive gamma parameters");
    // a draw can underflow to zero for tiny shapes; keep it in the support
    g.sample(rng).max(f64::MIN_POSITIVE)
}

fn normal_sample<R: Rng + ?Sized>(mean: f64, sd: f64, rng: &mut R) -> f64 {
    Normal::new(mean, sd).expect("finite normal parameters").sample(rng)
}

/// One draw of all latent parameters from the prior for `len` subgroups.
pub fn sample_prior<R: Rng + ?Sized>(hyper: &Hyperparameters, len: usize, rng: &mut R) -> LatentParams {
    assert!(len >= 1, "a rule list has at least the default subgroup");
    let (ts, tr) = hyper.tau_gamma();
    let tau = gamma_sample(ts, tr, rng);
    let m = DVector::from_fn(hyper.k_h, |_, _| normal_sample(0.0, hyper.c0.sqrt().recip(), rng));
    let mut b = DMatrix::zeros(len, hyper.k());
    for l in 0..len {
        for j in 0..hyper.k() {
            b[(l, j)] = if j < hyper.k_h {
                normal_sample(m[j], tau.sqrt().recip(), rng)
            } else {
                normal_sample(0.0, hyper.u0.sqrt().recip(), rng)
            };
        }
    }
    let delta = (0..len)
        .map(|l| {
            let (lo, hi) = hyper.delta_bounds(l, len);
            loop {
                let d = rng.random_range(lo..hi);
                if d > lo {
                    break d;
                }
            }
        })
        .collect();
    let lambda = (0..len)
        .map(|_| gamma_sample(hyper.alpha0, hyper.beta0, rng))
        .collect();
    LatentParams {
        b,
        delta,
        lambda,
        m,
        tau,
    }
}

/// Both potential outcomes and their observed/unobserved arrangement.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialOutcomes {
    pub y1: Vec<f64>,
    pub y0: Vec<f64>,
    pub y_obs: Vec<f64>,
    pub y_unobs: Vec<f64>,
}

/// Simulate both potential outcomes for every row from the model.
pub fn simulate_data<R: Rng + ?Sized>(
    list: &RuleList,
    params: &LatentParams,
    rule_features: &BinaryMatrix,
    confounders: &DMatrix<f64>,
    t: &[u8],
    rng: &mut R,
) -> Result<PotentialOutcomes> {
    let n = rule_features.n_rows();
    if confounders.nrows() != n || t.len() != n {
        return Err(Error::Dimension(format!(
            "rule features have {n} rows, confounders {}, treatment {}",
            confounders.nrows(),
            t.len()
        )));
    }
    if params.n_subgroups() != list.len() || params.b.ncols() != confounders.ncols() {
        return Err(Error::Dimension(
            "parameters do not match the list length or confounder count".into(),
        ));
    }
    let z = assign_matrix(list, rule_features)?.subgroup;
    let d = params.effects();
    let mean0 = (confounders * params.b.transpose()).into_owned();
    let mut out = PotentialOutcomes {
        y1: Vec::with_capacity(n),
        y0: Vec::with_capacity(n),
        y_obs: Vec::with_capacity(n),
        y_unobs: Vec::with_capacity(n),
    };
    for (row, &l) in z.iter().enumerate() {
        let sd = params.lambda[l].sqrt().recip();
        let e1: f64 = StandardNormal.sample(rng);
        let e0: f64 = StandardNormal.sample(rng);
        let base = mean0[(row, l)];
        let y1 = d[l] + base + sd * e1;
        let y0 = base + sd * e0;
        let (obs, unobs) = if t[row] == 1 { (y1, y0) } else { (y0, y1) };
        out.y1.push(y1);
        out.y0.push(y0);
        out.y_obs.push(obs);
        out.y_unobs.push(unobs);
    }
    Ok(out)
}

fn gamma_ln_pdf(x: f64, shape: f64, rate: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    shape * rate.ln() - libm::lgamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

fn normal_ln_pdf(x: f64, mean: f64, precision: f64) -> f64 {
    0.5 * (precision.ln() - LN_2PI) - 0.5 * precision * (x - mean) * (x - mean)
}

/// Log prior density of `params`; `-inf` outside the support.
pub fn log_prior(params: &LatentParams, hyper: &Hyperparameters) -> f64 {
    if !params.in_support(hyper) {
        return f64::NEG_INFINITY;
    }
    let len = params.n_subgroups();
    let (ts, tr) = hyper.tau_gamma();
    let mut lp = gamma_ln_pdf(params.tau, ts, tr);
    lp += params.m.iter().map(|&x| normal_ln_pdf(x, 0.0, hyper.c0)).sum::<f64>();
    for l in 0..len {
        for j in 0..hyper.k() {
            lp += if j < hyper.k_h {
                normal_ln_pdf(params.b[(l, j)], params.m[j], params.tau)
            } else {
                normal_ln_pdf(params.b[(l, j)], 0.0, hyper.u0)
            };
        }
        let (lo, hi) = hyper.delta_bounds(l, len);
        lp -= (hi - lo).ln();
        lp += gamma_ln_pdf(params.lambda[l], hyper.alpha0, hyper.beta0);
    }
    lp
}

fn residuals(list: &RuleList, params: &LatentParams, data: &Dataset) -> Result<(Vec<usize>, Vec<f64>)> {
    let z = assign_matrix(list, &data.rule_features)?.subgroup;
    let d = params.effects();
    let r = z
        .iter()
        .enumerate()
        .map(|(n, &l)| {
            let fit = f64::from(data.t[n]) * d[l]
                + data.confounders.row(n).dot(&params.b.row(l));
            data.y[n] - fit
        })
        .collect();
    Ok((z, r))
}

/// Log likelihood of the observed outcomes.
pub fn log_likelihood(list: &RuleList, params: &LatentParams, data: &Dataset) -> Result<f64> {
    let (z, r) = residuals(list, params, data)?;
    Ok(z.iter()
        .zip(&r)
        .map(|(&l, &e)| {
            let lam = params.lambda[l];
            0.5 * (lam.ln() - LN_2PI) - 0.5 * lam * e * e
        })
        .sum())
}

/// Log prior plus log likelihood of the observed outcomes; `-inf` when the
/// parameters leave the prior support.
pub fn log_joint(
    list: &RuleList,
    params: &LatentParams,
    data: &Dataset,
    hyper: &Hyperparameters,
) -> Result<f64> {
    params.check_dims(list.len(), hyper)?;
    if data.n_confounders() != hyper.k() {
        return Err(Error::Dimension("confounder count differs from k_h + k_i".into()));
    }
    let lp = log_prior(params, hyper);
    if lp == f64::NEG_INFINITY {
        return Ok(lp);
    }
    Ok(lp + log_likelihood(list, params, data)?)
}

/// Analytic gradient of [`log_joint`] in the layout of [`LatentParams`].
pub fn grad_log_joint(
    list: &RuleList,
    params: &LatentParams,
    data: &Dataset,
    hyper: &Hyperparameters,
) -> Result<LatentParams> {
    params.check_dims(list.len(), hyper)?;
    let len = list.len();
    let k = hyper.k();
    let (z, r) = residuals(list, params, data)?;
    let mut g_b = DMatrix::zeros(len, k);
    let mut g_delta = vec![0.0; len];
    let mut ssr = vec![0.0; len];
    let mut count = vec![0usize; len];
    let mut treated_resid = vec![0.0; len];
    for (n, (&l, &e)) in z.iter().zip(&r).enumerate() {
        let lam = params.lambda[l];
        for j in 0..k {
            g_b[(l, j)] += lam * e * data.confounders[(n, j)];
        }
        treated_resid[l] += f64::from(data.t[n]) * lam * e;
        ssr[l] += e * e;
        count[l] += 1;
    }
    // dD[l]/d delta[j] = 1 for l <= j
    let mut acc = 0.0;
    for j in 0..len {
        acc += treated_resid[j];
        g_delta[j] = acc;
    }
    let mut g_m = DVector::zeros(hyper.k_h);
    let mut sq = 0.0;
    for l in 0..len {
        for j in 0..k {
            if j < hyper.k_h {
                let dev = params.b[(l, j)] - params.m[j];
                g_b[(l, j)] -= params.tau * dev;
                g_m[j] += params.tau * dev;
                sq += dev * dev;
            } else {
                g_b[(l, j)] -= hyper.u0 * params.b[(l, j)];
            }
        }
    }
    g_m -= hyper.c0 * &params.m;
    let g_lambda = (0..len)
        .map(|l| {
            let lam = params.lambda[l];
            0.5 * count[l] as f64 / lam - 0.5 * ssr[l] + (hyper.alpha0 - 1.0) / lam - hyper.beta0
        })
        .collect();
    let (ts, tr) = hyper.tau_gamma();
    let g_tau = 0.5 * (len * hyper.k_h) as f64 / params.tau - 0.5 * sq + (ts - 1.0) / params.tau - tr;
    Ok(LatentParams {
        b: g_b,
        delta: g_delta,
        lambda: g_lambda,
        m: g_m,
        tau: g_tau,
    })
}

/// Per-subgroup sufficient statistics of the observed data.
#[derive(Debug, Clone, PartialEq)]
pub struct SubgroupStats {
    pub n: usize,
    pub n_treated: usize,
    /// `sum x x'`
    pub sxx: DMatrix<f64>,
    /// `sum x y`
    pub sxy: DVector<f64>,
    /// `sum over treated of x`
    pub sx_treated: DVector<f64>,
    /// `sum y`
    pub sy: f64,
    /// `sum y^2`
    pub syy: f64,
    /// `sum over treated of y`
    pub sy_treated: f64,
}

impl SubgroupStats {
    /// Sum of squared residuals at coefficients `b` and effect `d`.
    pub fn ssr(&self, b: &DVector<f64>, d: f64) -> f64 {
        self.syy - 2.0 * d * self.sy_treated - 2.0 * b.dot(&self.sxy)
            + d * d * self.n_treated as f64
            + 2.0 * d * b.dot(&self.sx_treated)
            + (b.transpose() * &self.sxx * b)[0]
    }
}

/// Sufficient statistics of every subgroup of `list`.
pub fn subgroup_stats(list: &RuleList, data: &Dataset) -> Result<(Assignment, Vec<SubgroupStats>)> {
    let assignment = assign_matrix(list, &data.rule_features)?;
    let stats = stats_for_assignment(&assignment, list.len(), data);
    Ok((assignment, stats))
}

pub(crate) fn stats_for_assignment(a: &Assignment, len: usize, data: &Dataset) -> Vec<SubgroupStats> {
    let k = data.n_confounders();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); len];
    for (n, &l) in a.subgroup.iter().enumerate() {
        members[l].push(n);
    }
    members
        .iter()
        .map(|rows| {
            let x = DMatrix::from_fn(rows.len(), k, |i, j| data.confounders[(rows[i], j)]);
            let y = DVector::from_fn(rows.len(), |i, _| data.y[rows[i]]);
            let t = DVector::from_fn(rows.len(), |i, _| f64::from(data.t[rows[i]]));
            let ty = t.component_mul(&y);
            SubgroupStats {
                n: rows.len(),
                n_treated: rows.iter().filter(|&&r| data.t[r] == 1).count(),
                sxx: x.tr_mul(&x),
                sxy: x.tr_mul(&y),
                sx_treated: x.tr_mul(&t),
                sy: y.sum(),
                syy: y.dot(&y),
                sy_treated: ty.sum(),
            }
        })
        .collect()
}
