//! Markov chain of order `p` whose transition is the conditional law of a
//! Student-t copula, combined with a kernel marginal.
//!
//! The joint copula of `(x_t, x_{t-1}, ..., x_{t-p})` has a Toeplitz
//! correlation matrix built from lag correlations `rho_1..rho_p`; everything
//! here orders tuples newest first.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StudentT};
use statrs::function::gamma::ln_gamma;

use crate::dists::{student_t_cdf, student_t_ln_const, student_t_ln_pdf, t_quantile_unchecked, KernelMarginal, PIT_EPS};
use crate::error::{Error, Result};
use crate::optim::{self, BfgsOptions, NelderMeadOptions};
use crate::record::KvRecord;

pub const NU_BOUNDS: (f64, f64) = (2.1, 100.0);
pub const DEFAULT_SAMPLES: usize = 10_000;
const BURN_IN: usize = 200;

/// Lag correlations of a stationary process with the given partial
/// autocorrelations (inverse Durbin–Levinson).
pub fn pacf_to_acf(pacf: &[f64]) -> Vec<f64> {
    let mut rho: Vec<f64> = Vec::with_capacity(pacf.len());
    let mut phi: Vec<f64> = Vec::new();
    for (k, &r) in pacf.iter().enumerate() {
        // phi holds the order-k AR coefficients.
        let lin: f64 = (0..k).map(|j| phi[j] * rho[k - 1 - j]).sum();
        let fit: f64 = (0..k).map(|j| phi[j] * rho[j]).sum();
        rho.push(lin + r * (1.0 - fit));
        let prev = phi.clone();
        phi.push(r);
        for j in 0..k {
            phi[j] = prev[j] - r * prev[k - 1 - j];
        }
    }
    rho
}

/// Partial autocorrelations of a lag-correlation sequence; `None` unless the
/// implied Toeplitz matrix is positive definite.
pub fn acf_to_pacf(rho: &[f64]) -> Option<Vec<f64>> {
    let mut phi: Vec<f64> = Vec::new();
    let mut pacf = Vec::with_capacity(rho.len());
    let mut v = 1.0;
    for k in 0..rho.len() {
        let num = rho[k] - (0..k).map(|j| phi[j] * rho[k - 1 - j]).sum::<f64>();
        let r = num / v;
        if !(r.abs() < 1.0) {
            return None;
        }
        let prev = phi.clone();
        phi.push(r);
        for j in 0..k {
            phi[j] = prev[j] - r * prev[k - 1 - j];
        }
        v *= 1.0 - r * r;
        pacf.push(r);
    }
    Some(pacf)
}

/// `(p+1) x (p+1)` Toeplitz correlation matrix with first row `(1, rho..)`.
pub fn toeplitz_correlation(rho: &[f64]) -> DMatrix<f64> {
    let d = rho.len() + 1;
    DMatrix::from_fn(d, d, |i, j| {
        let k = i.abs_diff(j);
        if k == 0 {
            1.0
        } else {
            rho[k - 1]
        }
    })
}

/// Kendall's tau of an elliptical pair with correlation `rho`.
pub fn kendall_tau(rho: f64) -> f64 {
    2.0 / std::f64::consts::PI * rho.asin()
}

/// Multivariate t log-density with unit-diagonal scale, prepared once per
/// parameter set.
struct MvtDensity {
    nu: f64,
    chol_l: DMatrix<f64>,
    ln_norm: f64,
}

impl MvtDensity {
    fn new(nu: f64, sigma: &DMatrix<f64>) -> Result<Self> {
        let d = sigma.nrows() as f64;
        let chol = sigma
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidParameter("copula correlation matrix is not positive definite".into()))?;
        let l = chol.l();
        let ln_det: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let ln_norm = ln_gamma(0.5 * (nu + d)) - ln_gamma(0.5 * nu) - 0.5 * d * (nu * std::f64::consts::PI).ln() - 0.5 * ln_det;
        Ok(Self { nu, chol_l: l, ln_norm })
    }

    fn ln_pdf(&self, z: &[f64]) -> f64 {
        // Forward substitution for L w = z.
        let d = z.len();
        let mut w = [0.0f64; 8];
        let mut w_vec;
        let w: &mut [f64] = if d <= 8 {
            &mut w[..d]
        } else {
            w_vec = vec![0.0; d];
            &mut w_vec
        };
        let mut quad = 0.0;
        for i in 0..d {
            let mut s = z[i];
            for j in 0..i {
                s -= self.chol_l[(i, j)] * w[j];
            }
            w[i] = s / self.chol_l[(i, i)];
            quad += w[i] * w[i];
        }
        let d = d as f64;
        self.ln_norm - 0.5 * (self.nu + d) * (quad / self.nu).ln_1p()
    }
}

fn check_nu(nu: f64) -> Result<()> {
    if !(nu > 2.0 && nu.is_finite()) {
        return Err(Error::InvalidParameter(format!("copula degrees of freedom {nu} must exceed 2")));
    }
    Ok(())
}

/// Log-density of the t copula at `u`.
pub fn t_copula_logdensity(u: &[f64], nu: f64, sigma: &DMatrix<f64>) -> Result<f64> {
    check_nu(nu)?;
    if sigma.nrows() != u.len() || sigma.ncols() != u.len() {
        return Err(Error::InvalidInput(format!(
            "{} uniforms for a {}x{} correlation matrix",
            u.len(),
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    if u.iter().any(|&v| !(v > 0.0 && v < 1.0)) {
        return Err(Error::InvalidInput("copula arguments must lie strictly inside (0, 1)".into()));
    }
    let mvt = MvtDensity::new(nu, sigma)?;
    let ln_c = student_t_ln_const(nu);
    let z: Vec<f64> = u.iter().map(|&v| t_quantile_unchecked(v, nu, ln_c)).collect();
    let margins: f64 = z.iter().map(|&x| student_t_ln_pdf(x, nu)).sum();
    Ok(mvt.ln_pdf(&z) - margins)
}

/// Fitted copula Markov model.
#[derive(Debug, Clone, PartialEq)]
pub struct CopulaParams {
    pub nu: f64,
    /// Lag correlations `rho_1..rho_p`.
    pub rho: Vec<f64>,
    pub marginal: KernelMarginal,
}

/// Closed-form conditional of the newest coordinate given the lags, in t space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionalT {
    pub dof: f64,
    pub location: f64,
    pub scale: f64,
}

impl CopulaParams {
    pub fn new(nu: f64, rho: Vec<f64>, marginal: KernelMarginal) -> Result<Self> {
        let params = Self { nu, rho, marginal };
        params.validate()?;
        Ok(params)
    }

    pub fn p(&self) -> usize {
        self.rho.len()
    }

    pub fn sigma(&self) -> DMatrix<f64> {
        toeplitz_correlation(&self.rho)
    }

    pub fn validate(&self) -> Result<()> {
        check_nu(self.nu)?;
        if self.rho.is_empty() || self.rho.len() > 5 {
            return Err(Error::InvalidParameter(format!("Markov order {} outside 1..=5", self.rho.len())));
        }
        MvtDensity::new(self.nu, &self.sigma()).map(|_| ())
    }

    /// Conditional law of `z_t` given `lag_pits` (newest first).
    pub fn conditional(&self, lag_pits: &[f64]) -> Result<ConditionalT> {
        let p = self.p();
        if lag_pits.len() != p {
            return Err(Error::InvalidInput(format!("expected {p} lag PIT values, got {}", lag_pits.len())));
        }
        if lag_pits.iter().any(|&v| !(v > 0.0 && v < 1.0)) {
            return Err(Error::InvalidInput("lag PIT values must lie strictly inside (0, 1)".into()));
        }
        let ln_c = student_t_ln_const(self.nu);
        let b: Vec<f64> = lag_pits.iter().map(|&u| t_quantile_unchecked(u, self.nu, ln_c)).collect();
        Ok(self.conditional_from_z(&b))
    }

    fn conditional_from_z(&self, b: &[f64]) -> ConditionalT {
        let p = self.p();
        // Lags form a Toeplitz block with correlations rho_0..rho_{p-1}.
        let mut lag_rho = vec![1.0];
        lag_rho.extend_from_slice(&self.rho[..p - 1]);
        let s_rr = DMatrix::from_fn(p, p, |i, j| lag_rho[i.abs_diff(j)]);
        let s_r0 = DVector::from_column_slice(&self.rho);
        let chol = s_rr.cholesky().expect("validated correlation block");
        let w = chol.solve(&s_r0);
        let bv = DVector::from_column_slice(b);
        let location = w.dot(&bv);
        let resid = (1.0 - s_r0.dot(&w)).max(0.0);
        let maha = bv.dot(&chol.solve(&bv));
        let dof = self.nu + p as f64;
        ConditionalT {
            dof,
            location,
            scale: ((self.nu + maha) / dof * resid).sqrt(),
        }
    }

    pub fn to_record(&self) -> KvRecord {
        let mut r = KvRecord::new();
        r.push("model", "t_copula").push("p", self.p()).push("nu", self.nu);
        for (i, v) in self.rho.iter().enumerate() {
            r.push(format!("rho{}", i + 1), v);
        }
        r.push("bandwidth", self.marginal.bandwidth());
        r
    }

    /// Rebuilds parameters from a record; the kernel sample is not part of
    /// the record and is supplied by the caller.
    pub fn from_record(r: &KvRecord, marginal_sample: &[f64]) -> Result<Self> {
        r.expect("model", "t_copula")?;
        let p: usize = r.get("p")?;
        let marginal = KernelMarginal::with_bandwidth(marginal_sample, r.get("bandwidth")?)?;
        Self::new(r.get("nu")?, r.get_vec("rho", p)?, marginal)
    }
}

fn conditional_z(params: &CopulaParams, lag_pits: &[f64], n: usize, seed: u64) -> Result<Vec<f64>> {
    let cond = params.conditional(lag_pits)?;
    let t = StudentT::new(cond.dof).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| cond.location + cond.scale * t.sample(&mut rng)).collect())
}

/// `n` draws from the conditional copula given `lag_pits` (newest first).
pub fn conditional_sample(params: &CopulaParams, lag_pits: &[f64], n: usize, seed: u64) -> Result<Vec<f64>> {
    let nu = params.nu;
    Ok(conditional_z(params, lag_pits, n, seed)?
        .into_iter()
        .map(|z| student_t_cdf(z, nu))
        .collect())
}

/// Order statistic `ceil(q n) - 1` of a sorted sample (inverse empirical CDF).
pub fn empirical_quantile(sorted: &[f64], q: f64) -> f64 {
    sorted[order_index(sorted.len(), q)]
}

fn order_index(n: usize, q: f64) -> usize {
    ((q * n as f64).ceil() as usize).clamp(1, n) - 1
}

fn marginal_quantile(m: &KernelMarginal, v: f64) -> f64 {
    m.quantile(v.clamp(PIT_EPS, 1.0 - PIT_EPS))
        .expect("probability clamped inside (0, 1)")
}

/// One-step interval from `n` simulated draws. Only the two order statistics
/// that form the endpoints are pushed through the (monotone) t CDF and
/// marginal quantile.
pub fn forecast_interval(params: &CopulaParams, history: &[f64], alpha: f64, n: usize, seed: u64) -> Result<(f64, f64)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!("alpha {alpha} outside (0, 1)")));
    }
    if n == 0 {
        return Err(Error::InvalidParameter("sample count must be positive".into()));
    }
    let p = params.p();
    if history.len() < p {
        return Err(Error::InvalidInput(format!("history of {} values is shorter than p={p}", history.len())));
    }
    let lags: Vec<f64> = history.iter().rev().take(p).copied().collect();
    let lag_pits = params.marginal.pit(&lags);
    let mut z = conditional_z(params, &lag_pits, n, seed)?;
    let mut endpoint = |q: f64| {
        let k = order_index(n, q);
        let (_, zk, _) = z.select_nth_unstable_by(k, f64::total_cmp);
        marginal_quantile(&params.marginal, student_t_cdf(*zk, params.nu))
    };
    let lower = endpoint(alpha / 2.0);
    let upper = endpoint(1.0 - alpha / 2.0);
    Ok((lower, upper))
}

/// PIT-scale chain of length `n` after a burn-in of 200 steps.
pub fn simulate_pits(params: &CopulaParams, n: usize, seed: u64) -> Result<Vec<f64>> {
    params.validate()?;
    let p = params.p();
    let nu = params.nu;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let marginal_t = StudentT::new(nu).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let cond_t = StudentT::new(nu + p as f64).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    // Newest first.
    let mut lags: Vec<f64> = (0..p).map(|_| marginal_t.sample(&mut rng)).collect();
    let mut out = Vec::with_capacity(n);
    for t in 0..BURN_IN + n {
        let c = params.conditional_from_z(&lags);
        let z = c.location + c.scale * cond_t.sample(&mut rng);
        lags.pop();
        lags.insert(0, z);
        if t >= BURN_IN {
            out.push(student_t_cdf(z, nu).clamp(PIT_EPS, 1.0 - PIT_EPS));
        }
    }
    Ok(out)
}

/// Simulated series on the scale of the marginal.
pub fn simulate_chain(params: &CopulaParams, n: usize, seed: u64) -> Result<Vec<f64>> {
    Ok(simulate_pits(params, n, seed)?
        .into_iter()
        .map(|u| marginal_quantile(&params.marginal, u))
        .collect())
}

#[derive(Debug, Clone)]
pub struct CopulaFit {
    pub params: CopulaParams,
    pub loglik: f64,
    /// True when the estimate of `nu` sits at its upper bound.
    pub nu_at_bound: bool,
}

/// Copula log-likelihood of a PIT series on consecutive `(p+1)` tuples.
pub fn pit_loglik(pits: &[f64], nu: f64, rho: &[f64]) -> Result<f64> {
    check_nu(nu)?;
    let ln_c = student_t_ln_const(nu);
    let z: Vec<f64> = pits.iter().map(|&u| t_quantile_unchecked(u, nu, ln_c)).collect();
    let ln_f: Vec<f64> = z.iter().map(|&x| student_t_ln_pdf(x, nu)).collect();
    loglik_from_z(&z, &ln_f, nu, rho)
}

fn loglik_from_z(z: &[f64], ln_f: &[f64], nu: f64, rho: &[f64]) -> Result<f64> {
    let p = rho.len();
    let mvt = MvtDensity::new(nu, &toeplitz_correlation(rho))?;
    let mut tuple = vec![0.0; p + 1];
    let mut total = 0.0;
    for t in p..z.len() {
        let mut margins = 0.0;
        for j in 0..=p {
            tuple[j] = z[t - j];
            margins += ln_f[t - j];
        }
        total += mvt.ln_pdf(&tuple) - margins;
    }
    Ok(total)
}

fn check_pits(pits: &[f64]) -> Result<()> {
    if pits.iter().any(|&u| !(u > 0.0 && u < 1.0)) {
        return Err(Error::InvalidInput("PIT values must lie strictly inside (0, 1)".into()));
    }
    Ok(())
}

/// Maximizes the copula likelihood over `rho` for fixed `nu`. Returns
/// `(loglik, rho)`.
fn profile(z: &[f64], ln_f: &[f64], nu: f64, p: usize, start: &[f64]) -> (f64, Vec<f64>) {
    let mut negll = |pacf_u: &[f64]| -> f64 {
        let pacf: Vec<f64> = pacf_u.iter().map(|v| v.tanh()).collect();
        if pacf.iter().any(|r| r.abs() >= 1.0) {
            return f64::INFINITY;
        }
        loglik_from_z(z, ln_f, nu, &pacf_to_acf(&pacf)).map_or(f64::INFINITY, |l| -l)
    };
    if p == 1 {
        let (u, v) = optim::brent_bounded(&mut |u| negll(&[u]), -3.8, 3.8, 1e-9, 200);
        return (-v, pacf_to_acf(&[u.tanh()]));
    }
    let u0: Vec<f64> = acf_to_pacf(start)
        .unwrap_or_else(|| vec![0.0; p])
        .into_iter()
        .map(|r| r.clamp(-0.95, 0.95).atanh())
        .collect();
    let m = optim::simplex_then_bfgs(
        &mut negll,
        &u0,
        NelderMeadOptions { max_evals: 800, ftol: 1e-11, initial_step: 0.2 },
        BfgsOptions { max_iters: 100, gtol: 1e-7, grad_step: 1e-6 },
    );
    let pacf: Vec<f64> = m.x.iter().map(|v| v.tanh()).collect();
    (-m.value, pacf_to_acf(&pacf))
}

fn sample_lag_correlations(z: &[f64], p: usize) -> Vec<f64> {
    let n = z.len() as f64;
    let mean = z.iter().sum::<f64>() / n;
    let c0: f64 = z.iter().map(|v| (v - mean).powi(2)).sum();
    (1..=p)
        .map(|k| z.iter().zip(&z[k..]).map(|(a, b)| (a - mean) * (b - mean)).sum::<f64>() / c0)
        .collect()
}

/// Semiparametric fit from PIT values: profile likelihood over `nu`
/// (bounded search on `ln nu`) with `rho` re-optimized at each `nu`.
pub fn fit_pits(pits: &[f64], p: usize) -> Result<(f64, Vec<f64>, f64)> {
    check_pits(pits)?;
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut profile_at = |ln_nu: f64| -> f64 {
        let nu = ln_nu.exp();
        let ln_c = student_t_ln_const(nu);
        let z: Vec<f64> = pits.iter().map(|&u| t_quantile_unchecked(u, nu, ln_c)).collect();
        let ln_f: Vec<f64> = z.iter().map(|&x| student_t_ln_pdf(x, nu)).collect();
        let start = sample_lag_correlations(&z, p);
        let (ll, rho) = profile(&z, &ln_f, nu, p, &start);
        if ll.is_finite() && best.as_ref().is_none_or(|(b, _)| ll > *b) {
            best = Some((ll, rho));
        }
        -ll
    };
    let (ln_nu, value) = optim::brent_bounded(&mut profile_at, NU_BOUNDS.0.ln(), NU_BOUNDS.1.ln(), 1e-5, 100);
    let nu = ln_nu.exp();
    if !value.is_finite() {
        return Err(Error::Optimization {
            message: "copula likelihood is not finite anywhere on the search range".into(),
            best_value: value,
        });
    }
    // Re-evaluate at the reported optimum so the returned triple is consistent.
    let ln_c = student_t_ln_const(nu);
    let z: Vec<f64> = pits.iter().map(|&u| t_quantile_unchecked(u, nu, ln_c)).collect();
    let ln_f: Vec<f64> = z.iter().map(|&x| student_t_ln_pdf(x, nu)).collect();
    let start = best.map(|(_, r)| r).unwrap_or_else(|| sample_lag_correlations(&z, p));
    let (ll, rho) = profile(&z, &ln_f, nu, p, &start);
    Ok((nu, rho, ll))
}

/// Fits marginal and copula on `xs`.
pub fn fit(xs: &[f64], p: usize) -> Result<CopulaFit> {
    if !(1..=5).contains(&p) {
        return Err(Error::InvalidParameter(format!("Markov order {p} outside 1..=5")));
    }
    if xs.len() <= 10 * (p + 2) {
        return Err(Error::InvalidInput(format!(
            "copula fit of order {p} needs more than {} observations, got {}",
            10 * (p + 2),
            xs.len()
        )));
    }
    let marginal = KernelMarginal::fit(xs)?;
    let pits = marginal.pit(xs);
    let (nu, rho, loglik) = fit_pits(&pits, p)?;
    let nu_at_bound = nu > NU_BOUNDS.1 * 0.99;
    if nu_at_bound {
        log::warn!("copula degrees of freedom at upper bound {nu:.2}: dependence is close to Gaussian");
    }
    Ok(CopulaFit {
        params: CopulaParams::new(nu, rho, marginal)?,
        loglik,
        nu_at_bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn normal_marginal(n: usize, seed: u64) -> KernelMarginal {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<f64> = (0..n)
            .map(|_| rand_distr::StandardNormal.sample(&mut rng))
            .collect();
        KernelMarginal::fit(&xs).unwrap()
    }

    fn params(nu: f64, rho: f64) -> CopulaParams {
        CopulaParams::new(nu, vec![rho], normal_marginal(500, 1)).unwrap()
    }

    fn ks_uniform(us: &[f64]) -> f64 {
        let mut s = us.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len() as f64;
        s.iter()
            .enumerate()
            .map(|(i, &u)| (u - i as f64 / n).abs().max(((i + 1) as f64 / n - u).abs()))
            .fold(0.0, f64::max)
    }

    #[test]
    fn acf_pacf_round_trip() {
        let pacf = [0.5, -0.3, 0.2];
        let rho = pacf_to_acf(&pacf);
        let back = acf_to_pacf(&rho).unwrap();
        for (a, b) in back.iter().zip(&pacf) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(toeplitz_correlation(&rho).cholesky().is_some());
        // AR(1) with coefficient r has rho_k = r^k.
        let ar1 = pacf_to_acf(&[0.6, 0.0, 0.0]);
        assert!((ar1[2] - 0.216).abs() < 1e-12);
        assert!(acf_to_pacf(&[0.9, 0.0]).is_none());
    }

    #[test]
    fn identity_sigma_independence_in_gaussian_limit() {
        let s = toeplitz_correlation(&[0.0]);
        for u in [[0.1, 0.7], [0.5, 0.5], [0.99, 0.01]] {
            assert!(t_copula_logdensity(&u, 1e7, &s).unwrap().abs() < 1e-5);
        }
        // Uncorrelated t margins still share the radial mixing variable.
        assert!(t_copula_logdensity(&[0.99, 0.99], 5.0, &s).unwrap() > 0.1);
    }

    #[test]
    fn density_is_exchangeable_and_rejects_boundary() {
        let s = toeplitz_correlation(&[0.6]);
        let a = t_copula_logdensity(&[0.2, 0.9], 5.0, &s).unwrap();
        let b = t_copula_logdensity(&[0.9, 0.2], 5.0, &s).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(t_copula_logdensity(&[0.0, 0.5], 5.0, &s).is_err());
        assert!(t_copula_logdensity(&[0.5, 1.0], 5.0, &s).is_err());
    }

    #[test]
    fn density_integrates_to_one() {
        let s = toeplitz_correlation(&[0.6]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 1_000_000;
        let total: f64 = (0..n)
            .map(|_| {
                let u = [rng.random::<f64>().max(1e-300), rng.random::<f64>().max(1e-300)];
                t_copula_logdensity(&u, 5.0, &s).unwrap().exp()
            })
            .sum();
        let mean = total / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "{mean}");
    }

    #[test]
    fn independent_sampler_is_uniform() {
        let p = params(1e7, 0.0);
        let v = conditional_sample(&p, &[0.9], 10_000, 3).unwrap();
        assert!(ks_uniform(&v) < 1.358 / 100.0);
        assert_eq!(v, conditional_sample(&p, &[0.9], 10_000, 3).unwrap());
    }

    fn bivariate_t_ln_pdf(x: f64, y: f64, rho: f64, nu: f64) -> f64 {
        let det = 1.0 - rho * rho;
        let q = (x * x - 2.0 * rho * x * y + y * y) / det;
        -(2.0 * std::f64::consts::PI).ln() - 0.5 * det.ln() - 0.5 * (nu + 2.0) * (q / nu).ln_1p()
    }

    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn conditional_cdf_matches_quadrature() {
        let (nu, rho) = (5.0, 0.7);
        let p = params(nu, rho);
        for lag in [0.1, 0.5, 0.9] {
            let z1 = crate::dists::student_t_quantile(lag, nu).unwrap();
            let marg = student_t_ln_pdf(z1, nu);
            let dens = |z: f64| (bivariate_t_ln_pdf(z, z1, rho, nu) - marg).exp();
            let mut v = conditional_sample(&p, &[lag], 10_000, 77).unwrap();
            v.sort_by(f64::total_cmp);
            let mut sup: f64 = 0.0;
            for k in 1..100 {
                let w = k as f64 / 100.0;
                let zw = crate::dists::student_t_quantile(w, nu).unwrap();
                let exact = simpson(&dens, -200.0, zw, 40_000);
                let ecdf = v.partition_point(|&x| x <= w) as f64 / v.len() as f64;
                sup = sup.max((ecdf - exact).abs());
            }
            assert!(sup < 0.02, "lag {lag}: sup distance {sup}");
        }
    }

    fn iqr(v: &mut [f64]) -> f64 {
        v.sort_by(f64::total_cmp);
        empirical_quantile(v, 0.75) - empirical_quantile(v, 0.25)
    }

    #[test]
    fn stronger_dependence_narrows_conditional() {
        let mut a = conditional_sample(&params(5.0, 0.2), &[0.9], 10_000, 5).unwrap();
        let mut b = conditional_sample(&params(5.0, 0.9), &[0.9], 10_000, 5).unwrap();
        assert!(iqr(&mut b) < iqr(&mut a));
    }

    #[test]
    fn fast_interval_equals_mapping_every_draw() {
        let p = params(4.0, 0.6);
        let history = [0.3, -1.2, 0.8];
        let (lo, hi) = forecast_interval(&p, &history, 0.1, 2001, 13).unwrap();
        let pit = p.marginal.pit(&[0.8]);
        let v = conditional_sample(&p, &pit, 2001, 13).unwrap();
        let mut xs: Vec<f64> = v.iter().map(|&u| marginal_quantile(&p.marginal, u)).collect();
        xs.sort_by(f64::total_cmp);
        assert_eq!(lo, empirical_quantile(&xs, 0.05));
        assert_eq!(hi, empirical_quantile(&xs, 0.95));
    }

    #[test]
    fn independence_gives_marginal_quantiles() {
        let p = params(1e7, 0.0);
        let (lo, hi) = forecast_interval(&p, &[2.0], 0.1, 10_000, 21).unwrap();
        let ql = p.marginal.quantile(0.05).unwrap();
        let qh = p.marginal.quantile(0.95).unwrap();
        assert!((lo - ql).abs() < 0.06 && (hi - qh).abs() < 0.06, "{lo} {hi} vs {ql} {qh}");
    }

    #[test]
    fn interval_nesting_and_lag_monotonicity() {
        let p = params(5.0, 0.6);
        let (l1, u1) = forecast_interval(&p, &[0.5], 0.1, 10_000, 2).unwrap();
        let (l5, u5) = forecast_interval(&p, &[0.5], 0.5, 10_000, 2).unwrap();
        assert!(l5 > l1 && u5 < u1);
        let mut prev = f64::NEG_INFINITY;
        for k in -8..=8 {
            let (_, u) = forecast_interval(&p, &[0.25 * k as f64], 0.1, 10_000, 2).unwrap();
            assert!(u >= prev - 0.02, "upper endpoint fell at lag {}", 0.25 * k as f64);
            prev = u;
        }
    }

    #[test]
    fn conditional_quantiles_are_monotone() {
        let p = params(3.0, 0.5);
        let mut v = conditional_sample(&p, &[0.3], 5000, 8).unwrap();
        v.sort_by(f64::total_cmp);
        let qs: Vec<f64> = (1..20).map(|k| empirical_quantile(&v, k as f64 / 20.0)).collect();
        assert!(qs.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn chain_is_deterministic_with_kernel_marginal() {
        let p = params(5.0, 0.5);
        let a = simulate_chain(&p, 10_000, 4).unwrap();
        assert_eq!(a, simulate_chain(&p, 10_000, 4).unwrap());
        assert_ne!(a, simulate_chain(&p, 10_000, 5).unwrap());
        let pits: Vec<f64> = a.iter().map(|&x| p.marginal.cdf(x)).collect();
        assert!(ks_uniform(&pits) < 0.05);
    }

    fn kendall(pairs: &[(f64, f64)]) -> f64 {
        let mut s = 0i64;
        for i in 0..pairs.len() {
            for j in i + 1..pairs.len() {
                let a = (pairs[i].0 - pairs[j].0) * (pairs[i].1 - pairs[j].1);
                s += if a > 0.0 { 1 } else if a < 0.0 { -1 } else { 0 };
            }
        }
        let n = pairs.len() as f64;
        s as f64 / (n * (n - 1.0) / 2.0)
    }

    #[test]
    fn chain_rank_correlation_matches_kendall_tau() {
        let p = params(5.0, 0.6);
        let u = simulate_pits(&p, 4000, 6).unwrap();
        let pairs: Vec<(f64, f64)> = u.windows(2).map(|w| (w[0], w[1])).collect();
        let tau = kendall(&pairs);
        assert!((tau - kendall_tau(0.6)).abs() < 0.05, "{tau}");
    }

    #[test]
    fn tail_dependence_falls_with_nu() {
        let stat = |nu: f64| {
            let u = simulate_pits(&params(nu, 0.5), 400_000, 10).unwrap();
            let q = 0.99;
            let hits = u.windows(2).filter(|w| w[0] > q).count() as f64;
            let both = u.windows(2).filter(|w| w[0] > q && w[1] > q).count() as f64;
            both / hits
        };
        let (a, b, c) = (stat(3.0), stat(30.0), stat(300.0));
        assert!(a > b && b > c, "{a} {b} {c}");
    }

    #[test]
    fn record_round_trip() {
        let p = CopulaParams::new(6.5, vec![0.4, 0.1], normal_marginal(100, 2)).unwrap();
        let r = KvRecord::parse(&p.to_record().to_string()).unwrap();
        let back = CopulaParams::from_record(&r, p.marginal.sample()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn null_fit_and_dominance() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let xs: Vec<f64> = (0..5000).map(|_| rand_distr::StandardNormal.sample(&mut rng)).collect();
        let f = fit(&xs, 1).unwrap();
        assert!(f.params.rho[0].abs() < 0.05, "{}", f.params.rho[0]);

        let truth = params(5.0, 0.5);
        let pits = simulate_pits(&truth, 2000, 3).unwrap();
        let (nu, rho, ll) = fit_pits(&pits, 1).unwrap();
        assert!(ll >= pit_loglik(&pits, 5.0, &[0.5]).unwrap() - 1e-6);
        assert!((pit_loglik(&pits, nu, &rho).unwrap() - ll).abs() < 1e-9);
    }

    #[test]
    fn second_order_fit() {
        let truth = CopulaParams::new(6.0, pacf_to_acf(&[0.5, 0.3]), normal_marginal(300, 3)).unwrap();
        let pits = simulate_pits(&truth, 3000, 4).unwrap();
        let (_, rho, ll) = fit_pits(&pits, 2).unwrap();
        assert!(ll >= pit_loglik(&pits, 6.0, &truth.rho).unwrap() - 1e-6);
        assert!((rho[0] - truth.rho[0]).abs() < 0.06 && (rho[1] - truth.rho[1]).abs() < 0.06, "{rho:?}");
    }

    #[test]
    fn short_input_rejected() {
        assert!(fit(&[0.1; 30], 1).is_err());
        assert!(fit(&[0.1; 300], 0).is_err());
    }
}
