//! Probability kernels shared by the statistical models: Student-t, the
//! standardized Fernández–Steel skew-t, and a Gaussian-kernel smoothed
//! marginal with its probability integral transform.

use std::f64::consts::{PI, SQRT_2};

use rand::Rng;
use rand_distr::{Distribution, StudentT};
use statrs::function::beta::{beta_reg, inv_beta_reg};
use statrs::function::erf::{erfc, erfc_inv};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// PIT values are kept this far from the boundary of the unit interval.
pub const PIT_EPS: f64 = 1e-12;

fn check_prob(p: f64) -> Result<()> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidParameter(format!("probability {p} outside (0, 1)")));
    }
    Ok(())
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / SQRT_2)
}

pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z - LN_SQRT_2PI).exp()
}

pub fn normal_quantile(p: f64) -> f64 {
    -SQRT_2 * erfc_inv(2.0 * p)
}

/// Root of an increasing function on a bracket `lo < root < hi` by Newton
/// steps that fall back to bisection whenever they leave the bracket.
/// `f` returns `(value, derivative)`.
pub(crate) fn solve_increasing(
    f: impl Fn(f64) -> (f64, f64),
    mut lo: f64,
    mut hi: f64,
    x0: f64,
    xtol: f64,
) -> f64 {
    let mut x = if x0 > lo && x0 < hi { x0 } else { 0.5 * (lo + hi) };
    for _ in 0..300 {
        let (v, d) = f(x);
        if v == 0.0 {
            return x;
        }
        if v < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let newton = if d > 0.0 && d.is_finite() { x - v / d } else { f64::NAN };
        let next = if newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (next - x).abs() <= xtol || hi - lo <= xtol {
            return next;
        }
        x = next;
    }
    x
}

/// Standard Student-t CDF with `nu` degrees of freedom.
pub fn student_t_cdf(x: f64, nu: f64) -> f64 {
    if x.is_infinite() {
        return if x > 0.0 { 1.0 } else { 0.0 };
    }
    let ib = beta_reg(0.5 * nu, 0.5, nu / (nu + x * x));
    if x >= 0.0 {
        1.0 - 0.5 * ib
    } else {
        0.5 * ib
    }
}

/// Log normalizing constant of the standard Student-t density.
pub fn student_t_ln_const(nu: f64) -> f64 {
    ln_gamma(0.5 * (nu + 1.0)) - ln_gamma(0.5 * nu) - 0.5 * (nu * PI).ln()
}

pub fn student_t_ln_pdf(x: f64, nu: f64) -> f64 {
    student_t_ln_const(nu) - 0.5 * (nu + 1.0) * (x * x / nu).ln_1p()
}

pub fn student_t_pdf(x: f64, nu: f64) -> f64 {
    student_t_ln_pdf(x, nu).exp()
}

/// Standard Student-t quantile, solved on the CDF to absolute accuracy well
/// below 1e-8.
pub fn student_t_quantile(p: f64, nu: f64) -> Result<f64> {
    check_prob(p)?;
    if !(nu > 0.0) {
        return Err(Error::InvalidParameter(format!("degrees of freedom {nu} must be positive")));
    }
    Ok(t_quantile_unchecked(p, nu, student_t_ln_const(nu)))
}

/// `ln_c` is `student_t_ln_const(nu)`, passed in so hot loops compute it once.
pub(crate) fn t_quantile_unchecked(p: f64, nu: f64, ln_c: f64) -> f64 {
    if p == 0.5 {
        return 0.0;
    }
    // Solve in the lower tail, where the CDF carries full relative precision.
    let (q, sign) = if p < 0.5 { (p, 1.0) } else { (1.0 - p, -1.0) };
    let t = inv_beta_reg(0.5 * nu, 0.5, 2.0 * q);
    let mut x0 = -(nu * (1.0 - t) / t).sqrt();
    if !x0.is_finite() {
        x0 = normal_quantile(q);
    }
    let f = |x: f64| {
        let v = student_t_cdf(x, nu) - q;
        let d = (ln_c - 0.5 * (nu + 1.0) * (x * x / nu).ln_1p()).exp();
        (v, d)
    };
    let mut lo = (2.0 * x0).min(-1.0);
    while student_t_cdf(lo, nu) > q && lo > -1e300 {
        lo *= 4.0;
    }
    let hi = 0.0;
    let tol = 1e-13 * x0.abs().max(1.0);
    sign * solve_increasing(f, lo, hi, x0, tol)
}

/// Skew-t innovation law: Fernández–Steel two-piece Student-t, shifted and
/// scaled to zero mean and unit variance. `xi = 1` is the standardized
/// symmetric t; `xi > 1` skews to the right.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SkewT {
    nu: f64,
    xi: f64,
    /// Mean and std of the unstandardized two-piece variable.
    mu: f64,
    sigma: f64,
    ln_norm: f64,
    t_ln_c: f64,
}

impl SkewT {
    pub fn new(nu: f64, xi: f64) -> Result<Self> {
        if !(nu > 2.0 && nu.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "skew-t needs nu > 2 for a finite variance, got {nu}"
            )));
        }
        if !(xi > 0.0 && xi.is_finite()) {
            return Err(Error::InvalidParameter(format!("skew-t xi {xi} must be positive")));
        }
        // E|W| for W standardized Student-t.
        let m1 = ((nu - 2.0).ln() * 0.5 + ln_gamma(0.5 * (nu - 1.0))
            - ln_gamma(0.5 * nu)
            - 0.5 * PI.ln())
        .exp();
        let mu = m1 * (xi - 1.0 / xi);
        let var = (1.0 - m1 * m1) * (xi * xi + 1.0 / (xi * xi)) + 2.0 * m1 * m1 - 1.0;
        let sigma = var.sqrt();
        let g = 2.0 / (xi + 1.0 / xi);
        // Standardized t density: ln c_std - (nu+1)/2 ln(1 + w^2/(nu-2)).
        let ln_c_std = ln_gamma(0.5 * (nu + 1.0)) - ln_gamma(0.5 * nu) - 0.5 * (PI * (nu - 2.0)).ln();
        Ok(Self {
            nu,
            xi,
            mu,
            sigma,
            ln_norm: g.ln() + sigma.ln() + ln_c_std,
            t_ln_c: student_t_ln_const(nu),
        })
    }

    /// Standardized symmetric Student-t.
    pub fn symmetric(nu: f64) -> Result<Self> {
        Self::new(nu, 1.0)
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn xi(&self) -> f64 {
        self.xi
    }

    fn std_scale(&self) -> f64 {
        (self.nu / (self.nu - 2.0)).sqrt()
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        let z = x * self.sigma + self.mu;
        let w = if z >= 0.0 { z / self.xi } else { z * self.xi };
        self.ln_norm - 0.5 * (self.nu + 1.0) * (w * w / (self.nu - 2.0)).ln_1p()
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.ln_pdf(x).exp()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let z = x * self.sigma + self.mu;
        let xi2 = self.xi * self.xi;
        let s = self.std_scale();
        if z < 0.0 {
            2.0 / (1.0 + xi2) * student_t_cdf(z * self.xi * s, self.nu)
        } else {
            1.0 - 2.0 * xi2 / (1.0 + xi2) * student_t_cdf(-z / self.xi * s, self.nu)
        }
    }

    pub fn quantile(&self, p: f64) -> Result<f64> {
        check_prob(p)?;
        let xi2 = self.xi * self.xi;
        let inv_s = 1.0 / self.std_scale();
        let z = if p < 1.0 / (1.0 + xi2) {
            let q = p * (1.0 + xi2) / 2.0;
            t_quantile_unchecked(q, self.nu, self.t_ln_c) * inv_s / self.xi
        } else {
            let q = (1.0 - p) * (1.0 + xi2) / (2.0 * xi2);
            -self.xi * t_quantile_unchecked(q, self.nu, self.t_ln_c) * inv_s
        };
        Ok((z - self.mu) / self.sigma)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let t = StudentT::new(self.nu).expect("nu validated at construction");
        let w = (t.sample(rng) / self.std_scale()).abs();
        let xi2 = self.xi * self.xi;
        let z = if rng.random::<f64>() < xi2 / (1.0 + xi2) {
            self.xi * w
        } else {
            -w / self.xi
        };
        (z - self.mu) / self.sigma
    }
}

/// Gaussian kernel estimate of a marginal distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMarginal {
    sample: Vec<f64>,
    bandwidth: f64,
}

/// Contributions beyond this many bandwidths are taken as exactly 0 or 1.
const KERNEL_REACH: f64 = 10.0;

impl KernelMarginal {
    /// Kernel marginal with Silverman's rule-of-thumb bandwidth.
    pub fn fit(sample: &[f64]) -> Result<Self> {
        if sample.len() < 10 {
            return Err(Error::InvalidInput(format!(
                "kernel marginal needs at least 10 observations, got {}",
                sample.len()
            )));
        }
        let n = sample.len() as f64;
        let mean = sample.iter().sum::<f64>() / n;
        let sd = (sample.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        Self::with_bandwidth(sample, 1.06 * sd * n.powf(-0.2))
    }

    pub fn with_bandwidth(sample: &[f64], bandwidth: f64) -> Result<Self> {
        if sample.is_empty() || sample.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("kernel sample must be finite and non-empty".into()));
        }
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "bandwidth {bandwidth} must be positive (constant sample?)"
            )));
        }
        let mut sorted = sample.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(Self {
            sample: sorted,
            bandwidth,
        })
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// Sorted training sample.
    pub fn sample(&self) -> &[f64] {
        &self.sample
    }

    fn window(&self, x: f64) -> (usize, usize) {
        let reach = KERNEL_REACH * self.bandwidth;
        let a = self.sample.partition_point(|&s| s < x - reach);
        let b = self.sample.partition_point(|&s| s <= x + reach);
        (a, b)
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let (a, b) = self.window(x);
        let h = self.bandwidth;
        let near: f64 = self.sample[a..b].iter().map(|&s| normal_cdf((x - s) / h)).sum();
        (a as f64 + near) / self.sample.len() as f64
    }

    pub fn pdf(&self, x: f64) -> f64 {
        let (a, b) = self.window(x);
        let h = self.bandwidth;
        let near: f64 = self.sample[a..b].iter().map(|&s| normal_pdf((x - s) / h)).sum();
        near / (self.sample.len() as f64 * h)
    }

    /// Search bracket for quantiles.
    pub fn support(&self) -> (f64, f64) {
        let pad = 12.0 * self.bandwidth;
        (self.sample[0] - pad, self.sample[self.sample.len() - 1] + pad)
    }

    /// Inverse of [`cdf`](Self::cdf) to 1e-10 in `x`. Probabilities whose
    /// quantile lies outside [`support`](Self::support) clamp to its ends.
    pub fn quantile(&self, p: f64) -> Result<f64> {
        check_prob(p)?;
        let (lo, hi) = self.support();
        if p <= self.cdf(lo) {
            log::warn!("kernel quantile for p={p} below bracket; clamped");
            return Ok(lo);
        }
        if p >= self.cdf(hi) {
            log::warn!("kernel quantile for p={p} above bracket; clamped");
            return Ok(hi);
        }
        // Start from the matching order statistic.
        let n = self.sample.len();
        let k = ((p * n as f64) as usize).min(n - 1);
        let x0 = self.sample[k];
        Ok(solve_increasing(
            |x| (self.cdf(x) - p, self.pdf(x)),
            lo,
            hi,
            x0,
            1e-10,
        ))
    }

    /// Probability integral transform, kept inside `[PIT_EPS, 1 - PIT_EPS]`.
    pub fn pit(&self, xs: &[f64]) -> Vec<f64> {
        xs.iter()
            .map(|&x| self.cdf(x).clamp(PIT_EPS, 1.0 - PIT_EPS))
            .collect()
    }
}
