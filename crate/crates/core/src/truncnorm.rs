//! Univariate truncated normal distribution: moments, entropy, density and
//! sampling, all numerically stable far into either tail.

use std::f64::consts::{PI, SQRT_2};
use std::sync::OnceLock;

use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};
use libm::erfc;
use statrs::function::erf::erfc_inv;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

pub fn ln_std_normal_pdf(x: f64) -> f64 {
    -0.5 * x * x - LN_SQRT_2PI
}

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

pub fn std_normal_quantile(p: f64) -> f64 {
    -SQRT_2 * erfc_inv(2.0 * p)
}

/// Mills ratio `(1 - Φ(t)) / φ(t)` for `t >= 0`.
pub fn mills_ratio(t: f64) -> f64 {
    debug_assert!(t >= 0.0);
    if t < 3.0 {
        0.5 * erfc(t / SQRT_2) * (-ln_std_normal_pdf(t)).exp()
    } else {
        1.0 / (t + mills_tail_g(t))
    }
}

/// Backward evaluation of `1/(t + 2/(t + 3/(t + ...)))` starting at depth `k`.
fn mills_cf_from(t: f64, k: usize) -> f64 {
    let mut acc = 0.0;
    for j in (k..k + 120).rev() {
        acc = j as f64 / (t + acc);
    }
    acc
}

/// `1/M(t) - t`, accurate for large `t`.
fn mills_tail_g(t: f64) -> f64 {
    1.0 / (t + mills_cf_from(t, 2))
}

/// `ln Φ(x)`.
pub fn ln_std_normal_cdf(x: f64) -> f64 {
    if x == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else if x < -5.0 {
        ln_std_normal_pdf(x) + mills_ratio(-x).ln()
    } else if x > 5.0 {
        (-std_normal_cdf(-x)).ln_1p()
    } else {
        std_normal_cdf(x).ln()
    }
}

/// `ln(1 - e^x)` for `x < 0`.
fn ln_1m_exp(x: f64) -> f64 {
    if x > -std::f64::consts::LN_2 {
        (-x.exp_m1()).ln()
    } else {
        (-x.exp()).ln_1p()
    }
}

/// Moments of a standard normal truncated to `(a, b)`.
#[derive(Debug, Clone, Copy)]
struct StdMoments {
    ln_z: f64,
    mean: f64,
    var: f64,
}

impl StdMoments {
    fn second(&self) -> f64 {
        self.var + self.mean * self.mean
    }
}

fn gauss_legendre_20() -> &'static [(f64, f64)] {
    static NODES: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    NODES.get_or_init(|| gauss_legendre(20))
}

/// Nodes and weights of the n-point Gauss-Legendre rule on [-1, 1].
fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let k = k as f64;
                let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        out.push((x, 2.0 / ((1.0 - x * x) * dp * dp)));
    }
    out
}

fn std_moments(a: f64, b: f64) -> StdMoments {
    debug_assert!(a < b);
    if a > 0.0 {
        let m = std_moments(-b, -a);
        return StdMoments {
            mean: -m.mean,
            ..m
        };
    }
    let width = b - a;
    let center = 0.5 * (a + b);
    if width <= 1.0 && center.abs() * width <= 4.0 {
        return narrow_moments(center, 0.5 * width);
    }
    if b <= 0.0 {
        let ln_b = ln_std_normal_cdf(b);
        let ln_a = ln_std_normal_cdf(a);
        let ln_z = ln_b + ln_1m_exp(ln_a - ln_b);
        let pa = if a.is_finite() {
            (ln_std_normal_pdf(a) - ln_z).exp()
        } else {
            0.0
        };
        let pb = (ln_std_normal_pdf(b) - ln_z).exp();
        let t = -b;
        if t > 30.0 && pa * a.abs() < 1e-300 {
            // one-sided deep tail: mean = -(t + g), var = g (h - g)
            let h = mills_cf_from(t, 2);
            let g = 1.0 / (t + h);
            return StdMoments {
                ln_z,
                mean: -(t + g),
                var: g * (h - g),
            };
        }
        let apa = if a.is_finite() { a * pa } else { 0.0 };
        let mean = pa - pb;
        let var = (1.0 + apa - b * pb - mean * mean).max(0.0);
        return StdMoments { ln_z, mean, var };
    }
    // a <= 0 < b
    let z = 1.0 - std_normal_cdf(a) - std_normal_cdf(-b);
    let ln_z = z.ln();
    let pa = if a.is_finite() {
        ln_std_normal_pdf(a).exp() / z
    } else {
        0.0
    };
    let pb = if b.is_finite() {
        ln_std_normal_pdf(b).exp() / z
    } else {
        0.0
    };
    let apa = if a.is_finite() { a * pa } else { 0.0 };
    let bpb = if b.is_finite() { b * pb } else { 0.0 };
    let mean = pa - pb;
    let var = (1.0 + apa - bpb - mean * mean).max(0.0);
    StdMoments { ln_z, mean, var }
}

/// Quadrature for intervals short enough that the density is nearly flat.
fn narrow_moments(center: f64, half: f64) -> StdMoments {
    let (mut w0, mut w1, mut w2) = (0.0, 0.0, 0.0);
    for &(x, w) in gauss_legendre_20() {
        let u = half * x;
        let f = w * (-center * u - 0.5 * u * u).exp();
        w0 += f;
        w1 += f * u;
        w2 += f * u * u;
    }
    let mean_u = w1 / w0;
    StdMoments {
        ln_z: -0.5 * center * center - LN_SQRT_2PI + (half * w0).ln(),
        mean: center + mean_u,
        var: (w2 / w0 - mean_u * mean_u).max(0.0),
    }
}

/// Normal with location `loc` and precision `precision` restricted to
/// `(lower, upper)`. A precision of exactly zero denotes the uniform
/// distribution on the interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncatedNormal {
    pub loc: f64,
    pub precision: f64,
    pub lower: f64,
    pub upper: f64,
}

/// First two moments and entropy of a [`TruncatedNormal`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncatedMoments {
    pub mean: f64,
    pub var: f64,
    pub entropy: f64,
    /// Log normalizer `ln Pr(lower < X < upper)` under the untruncated normal;
    /// zero for the uniform case.
    pub ln_mass: f64,
}

impl TruncatedNormal {
    pub fn new(loc: f64, precision: f64, lower: f64, upper: f64) -> Self {
        debug_assert!(lower < upper, "empty truncation interval");
        debug_assert!(precision >= 0.0);
        Self {
            loc,
            precision,
            lower,
            upper,
        }
    }

    pub fn uniform(lower: f64, upper: f64) -> Self {
        Self::new(0.5 * (lower + upper), 0.0, lower, upper)
    }

    pub fn is_uniform(&self) -> bool {
        self.precision == 0.0
    }

    pub fn is_valid(&self) -> bool {
        self.loc.is_finite()
            && self.precision.is_finite()
            && self.precision >= 0.0
            && self.lower < self.upper
            && self.lower.is_finite()
            && self.upper.is_finite()
    }

    fn standardized(&self) -> (f64, f64, f64) {
        let sd = self.precision.sqrt().recip();
        (
            (self.lower - self.loc) / sd,
            (self.upper - self.loc) / sd,
            sd,
        )
    }

    pub fn moments(&self) -> TruncatedMoments {
        if self.is_uniform() {
            let w = self.upper - self.lower;
            return TruncatedMoments {
                mean: 0.5 * (self.lower + self.upper),
                var: w * w / 12.0,
                entropy: w.ln(),
                ln_mass: 0.0,
            };
        }
        let (a, b, sd) = self.standardized();
        let m = std_moments(a, b);
        TruncatedMoments {
            mean: self.loc + sd * m.mean,
            var: sd * sd * m.var,
            entropy: m.ln_z + LN_SQRT_2PI + 0.5 * m.second() + sd.ln(),
            ln_mass: m.ln_z,
        }
    }

    pub fn mean(&self) -> f64 {
        self.moments().mean
    }

    pub fn var(&self) -> f64 {
        self.moments().var
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        if !(x > self.lower && x < self.upper) {
            return f64::NEG_INFINITY;
        }
        if self.is_uniform() {
            return -(self.upper - self.lower).ln();
        }
        let (_, _, sd) = self.standardized();
        let m = self.moments();
        ln_std_normal_pdf((x - self.loc) / sd) - sd.ln() - m.ln_mass
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.is_uniform() {
            return rng.random_range(self.lower..self.upper);
        }
        let (a, b, sd) = self.standardized();
        let z = sample_std(a, b, rng);
        (self.loc + sd * z).clamp(self.lower, self.upper)
    }
}

/// Draw from a standard normal truncated to `(a, b)`.
pub fn sample_std<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    const TAIL: f64 = 4.0;
    if a >= TAIL {
        return sample_upper_tail(a, b, rng);
    }
    if b <= -TAIL {
        return -sample_upper_tail(-b, -a, rng);
    }
    if a > 0.0 {
        return -sample_std(-b, -a, rng);
    }
    if b - a > 6.0 && a < -6.0 && b > 6.0 {
        // essentially untruncated; plain rejection is cheap
        loop {
            let z: f64 = StandardNormal.sample(rng);
            if z > a && z < b {
                return z;
            }
        }
    }
    let lo = std_normal_cdf(a);
    let hi = std_normal_cdf(b);
    let u = lo + rng.random::<f64>() * (hi - lo);
    std_normal_quantile(u).clamp(a, b)
}

fn sample_upper_tail<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    if (b - a) * a < 1.0 {
        // short interval: uniform proposal against the envelope exp(-a^2/2)
        loop {
            let z = rng.random_range(a..b);
            let u: f64 = rng.random();
            if u.ln() < 0.5 * (a * a - z * z) {
                return z;
            }
        }
    }
    let rate = 0.5 * (a + (a * a + 4.0).sqrt());
    let exp = Exp::new(rate).expect("positive rate");
    loop {
        let z = a + exp.sample(rng);
        if z >= b {
            continue;
        }
        let u: f64 = rng.random();
        if u.ln() < -0.5 * (z - rate) * (z - rate) {
            return z;
        }
    }
}
