//! ARMA(p, q) mean equation with a power-1 APARCH(1,1) volatility recursion
//!
//! ```text
//! x_t     = mu + sum_i phi_i x_{t-i} + sum_j theta_j eps_{t-j} + eps_t
//! eps_t   = sigma_t * gamma_t,          gamma_t ~ SkewT(nu, xi)
//! sigma_t = a0 + a1 sigma_{t-1} + a2 |eps_{t-1}|
//! ```
//!
//! Estimation is by maximum likelihood over a reparameterized, unconstrained
//! space (stationary AR and invertible MA through partial autocorrelations,
//! `a1 + a2 < 1` through a softmax, bounded `nu` and `xi`).

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dists::SkewT;
use crate::error::{Error, Result};
use crate::optim::{self, ar_to_pacf, pacf_to_ar, BfgsOptions, NelderMeadOptions};
use crate::record::KvRecord;

/// Bounds used by the estimator for the innovation parameters.
pub const NU_BOUNDS: (f64, f64) = (2.1, 100.0);
pub const LOG_XI_BOUND: f64 = 1.5;

#[derive(Debug, Clone, PartialEq)]
pub struct ArmaAparchParams {
    pub mu: f64,
    pub phi: Vec<f64>,
    pub theta: Vec<f64>,
    pub a0: f64,
    pub a1: f64,
    pub a2: f64,
    pub nu: f64,
    pub xi: f64,
}

impl ArmaAparchParams {
    pub fn p(&self) -> usize {
        self.phi.len()
    }

    pub fn q(&self) -> usize {
        self.theta.len()
    }

    /// Number of lags needed before the recursion can start.
    pub fn max_lag(&self) -> usize {
        self.p().max(self.q())
    }

    /// Parameter count used in the information criterion.
    pub fn aic_param_count(&self) -> usize {
        self.p() + self.q() + 5
    }

    pub fn innovation(&self) -> Result<SkewT> {
        SkewT::new(self.nu, self.xi)
    }

    /// True if every AR root lies strictly outside the unit circle.
    pub fn is_stationary(&self) -> bool {
        ar_to_pacf(&self.phi).is_some()
    }

    /// Checks the parameter domain; `a1 = a2 = 0` is allowed for the
    /// homoskedastic special case.
    pub fn validate(&self) -> Result<()> {
        let all = [self.mu, self.a0, self.a1, self.a2, self.nu, self.xi];
        if all.iter().chain(&self.phi).chain(&self.theta).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite ARMA-APARCH parameter".into()));
        }
        if !(self.a0 > 0.0) || self.a1 < 0.0 || self.a2 < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "volatility coefficients a0={} a1={} a2={} must be positive",
                self.a0, self.a1, self.a2
            )));
        }
        if self.a1 + self.a2 >= 1.0 {
            return Err(Error::InvalidParameter(format!(
                "persistence a1 + a2 = {} must be below 1",
                self.a1 + self.a2
            )));
        }
        if !self.is_stationary() {
            return Err(Error::InvalidParameter("AR polynomial is not stationary".into()));
        }
        self.innovation().map(|_| ())
    }

    /// Parameters for data multiplied by `c > 0`.
    pub fn rescaled(&self, c: f64) -> Self {
        Self {
            mu: self.mu * c,
            a0: self.a0 * c,
            ..self.clone()
        }
    }

    /// Natural-parameter vector `(mu, phi.., theta.., a0, a1, a2, nu, xi)`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![self.mu];
        v.extend(&self.phi);
        v.extend(&self.theta);
        v.extend([self.a0, self.a1, self.a2, self.nu, self.xi]);
        v
    }

    pub fn from_vec(v: &[f64], p: usize, q: usize) -> Self {
        let tail = &v[1 + p + q..];
        Self {
            mu: v[0],
            phi: v[1..1 + p].to_vec(),
            theta: v[1 + p..1 + p + q].to_vec(),
            a0: tail[0],
            a1: tail[1],
            a2: tail[2],
            nu: tail[3],
            xi: tail[4],
        }
    }

    /// Names matching [`to_vec`](Self::to_vec).
    pub fn names(&self) -> Vec<String> {
        let mut n = vec!["mu".to_string()];
        n.extend((1..=self.p()).map(|i| format!("phi{i}")));
        n.extend((1..=self.q()).map(|i| format!("theta{i}")));
        n.extend(["a0", "a1", "a2", "nu", "xi"].map(String::from));
        n
    }

    pub fn to_record(&self) -> KvRecord {
        let mut r = KvRecord::new();
        r.push("model", "arma_aparch").push("p", self.p()).push("q", self.q());
        for (name, value) in self.names().into_iter().zip(self.to_vec()) {
            r.push(name, value);
        }
        r
    }

    pub fn from_record(r: &KvRecord) -> Result<Self> {
        r.expect("model", "arma_aparch")?;
        let p: usize = r.get("p")?;
        let q: usize = r.get("q")?;
        Ok(Self {
            mu: r.get("mu")?,
            phi: r.get_vec("phi", p)?,
            theta: r.get_vec("theta", q)?,
            a0: r.get("a0")?,
            a1: r.get("a1")?,
            a2: r.get("a2")?,
            nu: r.get("nu")?,
            xi: r.get("xi")?,
        })
    }
}

/// Residual and volatility paths from running the recursion over a sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub residuals: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub loglik: f64,
    /// Index of the first observation entering the likelihood.
    pub burn_in: usize,
}

impl FilterState {
    /// `eps_t / sigma_t` over the likelihood window.
    pub fn standardized_residuals(&self) -> Vec<f64> {
        self.residuals[self.burn_in..]
            .iter()
            .zip(&self.sigmas[self.burn_in..])
            .map(|(e, s)| e / s)
            .collect()
    }
}

/// Volatility seed: mean absolute deviation of the demeaned sample.
fn initial_sigma(xs: &[f64]) -> f64 {
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.iter().map(|x| (x - mean).abs()).sum::<f64>() / xs.len() as f64
}

/// Runs the recursion with the default burn-in of `max(p, q) + 1`.
pub fn filter(params: &ArmaAparchParams, xs: &[f64]) -> Result<FilterState> {
    filter_with_burn_in(params, xs, params.max_lag() + 1)
}

/// Runs the recursion; the log-likelihood sums over `t >= burn_in`.
/// Residuals before `max(p, q)` are zero and volatilities up to `max(p, q)`
/// equal the seed.
pub fn filter_with_burn_in(params: &ArmaAparchParams, xs: &[f64], burn_in: usize) -> Result<FilterState> {
    let innov = params.innovation()?;
    let m = params.max_lag();
    if xs.len() <= m {
        return Err(Error::InvalidInput(format!(
            "{} observations do not cover the {m} lags of the model",
            xs.len()
        )));
    }
    let sigma0 = initial_sigma(xs);
    if !(sigma0 > 0.0) {
        return Err(Error::InvalidInput("constant sample: volatility seed is zero".into()));
    }
    let n = xs.len();
    let mut eps = vec![0.0_f64; n];
    let mut sig = vec![sigma0; n];
    let mut loglik = 0.0;
    for t in 0..n {
        if t > m {
            sig[t] = params.a0 + params.a1 * sig[t - 1] + params.a2 * eps[t - 1].abs();
        }
        if t >= m {
            let mut mean = params.mu;
            for (i, phi) in params.phi.iter().enumerate() {
                mean += phi * xs[t - 1 - i];
            }
            for (j, theta) in params.theta.iter().enumerate() {
                mean += theta * eps[t - 1 - j];
            }
            eps[t] = xs[t] - mean;
        }
        if !(eps[t].is_finite() && sig[t].is_finite() && sig[t] > 0.0) {
            return Err(Error::Numerical(format!("recursion diverged at t={t}")));
        }
        if t >= burn_in {
            loglik += innov.ln_pdf(eps[t] / sig[t]) - sig[t].ln();
        }
    }
    if !loglik.is_finite() {
        return Err(Error::Numerical("non-finite log-likelihood".into()));
    }
    Ok(FilterState {
        residuals: eps,
        sigmas: sig,
        loglik,
        burn_in,
    })
}

/// Conditional mean and scale of the observation following `xs`.
pub fn one_step(params: &ArmaAparchParams, xs: &[f64], state: &FilterState) -> (f64, f64) {
    let n = xs.len();
    let mut mean = params.mu;
    for (i, phi) in params.phi.iter().enumerate() {
        mean += phi * xs[n - 1 - i];
    }
    for (j, theta) in params.theta.iter().enumerate() {
        mean += theta * state.residuals[n - 1 - j];
    }
    let sigma = params.a0 + params.a1 * state.sigmas[n - 1] + params.a2 * state.residuals[n - 1].abs();
    (mean, sigma)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntervalForecast {
    pub lower: f64,
    pub upper: f64,
    pub mean_next: f64,
    pub sigma_next: f64,
}

/// One-step `(1 - alpha)` interval from the `alpha/2` and `1 - alpha/2`
/// innovation quantiles.
pub fn forecast_interval(params: &ArmaAparchParams, history: &[f64], alpha: f64) -> Result<IntervalForecast> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!("alpha {alpha} outside (0, 1)")));
    }
    let state = filter(params, history)?;
    let (mean_next, sigma_next) = one_step(params, history, &state);
    let innov = params.innovation()?;
    Ok(IntervalForecast {
        lower: mean_next + sigma_next * innov.quantile(alpha / 2.0)?,
        upper: mean_next + sigma_next * innov.quantile(1.0 - alpha / 2.0)?,
        mean_next,
        sigma_next,
    })
}

/// Simulates `n` observations after discarding 500 burn-in steps.
pub fn simulate(params: &ArmaAparchParams, n: usize, seed: u64) -> Result<Vec<f64>> {
    Ok(simulate_path(params, n, seed)?.values)
}

/// Simulated observations with the conditional mean and scale each was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedPath {
    pub values: Vec<f64>,
    pub means: Vec<f64>,
    pub sigmas: Vec<f64>,
}

/// Same draws as [`simulate`], also returning the true conditional moments.
pub fn simulate_path(params: &ArmaAparchParams, n: usize, seed: u64) -> Result<SimulatedPath> {
    params.validate()?;
    let innov = params.innovation()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let burn = 500;
    let (p, q) = (params.p(), params.q());
    let ar_sum: f64 = params.phi.iter().sum();
    let x_bar = params.mu / (1.0 - ar_sum);
    let mut xs = vec![x_bar; p];
    let mut eps = vec![0.0_f64; q.max(1)];
    let mut sigma = params.a0 / (1.0 - params.a1 - params.a2);
    let mut out = SimulatedPath {
        values: Vec::with_capacity(n),
        means: Vec::with_capacity(n),
        sigmas: Vec::with_capacity(n),
    };
    for t in 0..burn + n {
        let last_eps = *eps.last().unwrap_or(&0.0);
        if t > 0 {
            sigma = params.a0 + params.a1 * sigma + params.a2 * last_eps.abs();
        }
        let e = sigma * innov.sample(&mut rng);
        let mut x = params.mu + e;
        for (i, phi) in params.phi.iter().enumerate() {
            x += phi * xs[xs.len() - 1 - i];
        }
        for (j, theta) in params.theta.iter().enumerate() {
            x += theta * eps[eps.len() - 1 - j];
        }
        xs.push(x);
        eps.push(e);
        if xs.len() > p + 1 {
            xs.remove(0);
        }
        if eps.len() > q + 1 {
            eps.remove(0);
        }
        if t >= burn {
            out.values.push(x);
            out.means.push(x - e);
            out.sigmas.push(sigma);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub starts: usize,
    pub seed: u64,
    pub simplex_evals: usize,
    pub bfgs_iters: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            starts: 5,
            seed: 0x5eed,
            simplex_evals: 2500,
            bfgs_iters: 150,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ArmaAparchFit {
    pub params: ArmaAparchParams,
    pub loglik: f64,
    pub burn_in: usize,
    /// Best negative log-likelihood per start.
    pub start_values: Vec<f64>,
    pub evaluations: usize,
}

impl ArmaAparchFit {
    pub fn aic(&self) -> f64 {
        2.0 * self.params.aic_param_count() as f64 - 2.0 * self.loglik
    }
}

/// Unconstrained encoding of the parameter vector.
struct Encoding {
    p: usize,
    q: usize,
}

impl Encoding {
    fn decode(&self, u: &[f64]) -> Option<ArmaAparchParams> {
        let (p, q) = (self.p, self.q);
        let pacf_ar: Vec<f64> = u[1..1 + p].iter().map(|v| v.tanh()).collect();
        let pacf_ma: Vec<f64> = u[1 + p..1 + p + q].iter().map(|v| v.tanh()).collect();
        if pacf_ar.iter().chain(&pacf_ma).any(|r| r.abs() >= 1.0) {
            return None;
        }
        let phi = pacf_to_ar(&pacf_ar);
        let theta: Vec<f64> = pacf_to_ar(&pacf_ma).into_iter().map(|v| -v).collect();
        let t = &u[1 + p + q..];
        let a0 = t[0].exp();
        let (e1, e2) = (t[1].exp(), t[2].exp());
        let denom = 1.0 + e1 + e2;
        let nu = NU_BOUNDS.0 + (NU_BOUNDS.1 - NU_BOUNDS.0) * crate::metrics::sigmoid(t[3]);
        let xi = (LOG_XI_BOUND * t[4].tanh()).exp();
        Some(ArmaAparchParams {
            mu: u[0],
            phi,
            theta,
            a0,
            a1: e1 / denom,
            a2: e2 / denom,
            nu,
            xi,
        })
    }

    fn encode(&self, params: &ArmaAparchParams) -> Vec<f64> {
        let mut u = vec![params.mu];
        let clamp = |r: f64| r.clamp(-0.95, 0.95).atanh();
        u.extend(ar_to_pacf(&params.phi).unwrap_or_else(|| vec![0.0; self.p]).into_iter().map(clamp));
        let neg_theta: Vec<f64> = params.theta.iter().map(|v| -v).collect();
        u.extend(ar_to_pacf(&neg_theta).unwrap_or_else(|| vec![0.0; self.q]).into_iter().map(clamp));
        let rest = (1.0 - params.a1 - params.a2).max(1e-6);
        u.push(params.a0.ln());
        u.push((params.a1.max(1e-6) / rest).ln());
        u.push((params.a2.max(1e-6) / rest).ln());
        let s = ((params.nu - NU_BOUNDS.0) / (NU_BOUNDS.1 - NU_BOUNDS.0)).clamp(1e-4, 1.0 - 1e-4);
        u.push((s / (1.0 - s)).ln());
        u.push((params.xi.ln() / LOG_XI_BOUND).clamp(-0.95, 0.95).atanh());
        u
    }
}

/// Sample partial autocorrelations up to `p` by Durbin–Levinson.
fn sample_pacf(xs: &[f64], p: usize) -> Vec<f64> {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let c0 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let acf: Vec<f64> = (0..=p)
        .map(|k| xs.iter().zip(&xs[k..]).map(|(a, b)| (a - mean) * (b - mean)).sum::<f64>() / n / c0)
        .collect();
    let mut phi: Vec<f64> = Vec::new();
    let mut pacf = Vec::with_capacity(p);
    for k in 1..=p {
        let num = acf[k] - phi.iter().enumerate().map(|(j, f)| f * acf[k - 1 - j]).sum::<f64>();
        let den = 1.0 - phi.iter().enumerate().map(|(j, f)| f * acf[j + 1]).sum::<f64>();
        let r = (num / den).clamp(-0.9, 0.9);
        let prev = phi.clone();
        phi.push(r);
        for j in 0..k - 1 {
            phi[j] = prev[j] - r * prev[k - 2 - j];
        }
        pacf.push(r);
    }
    pacf
}

fn check_fit_length(n: usize, p: usize, q: usize) -> Result<()> {
    let need = (10 * (p + q + 5)).max(31);
    if n < need {
        return Err(Error::InvalidInput(format!(
            "ARMA({p},{q})-APARCH fit needs at least {need} observations, got {n}"
        )));
    }
    Ok(())
}

/// Maximum likelihood fit with the default burn-in.
pub fn fit(xs: &[f64], p: usize, q: usize, opts: &FitOptions) -> Result<ArmaAparchFit> {
    fit_with_burn_in(xs, p, q, p.max(q) + 1, opts)
}

/// Maximum likelihood fit with the likelihood summed from `burn_in`.
///
/// The data are divided by their sample standard deviation before optimizing
/// and the estimates mapped back, so the fit is equivariant under scaling.
pub fn fit_with_burn_in(xs: &[f64], p: usize, q: usize, burn_in: usize, opts: &FitOptions) -> Result<ArmaAparchFit> {
    check_fit_length(xs.len(), p, q)?;
    if xs.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite observation".into()));
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let scale = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    if !(scale > 0.0) {
        return Err(Error::InvalidInput("constant sample".into()));
    }
    let ys: Vec<f64> = xs.iter().map(|x| x / scale).collect();
    let enc = Encoding { p, q };

    let pacf = sample_pacf(&ys, p);
    let phi0 = pacf_to_ar(&pacf);
    let base = ArmaAparchParams {
        mu: mean / scale * (1.0 - phi0.iter().sum::<f64>()),
        phi: phi0,
        theta: vec![0.0; q],
        a0: 0.12,
        a1: 0.8,
        a2: 0.1,
        nu: 8.0,
        xi: 1.0,
    };
    let u0 = enc.encode(&base);
    let mut objective = |u: &[f64]| -> f64 {
        match enc.decode(u) {
            Some(params) => match filter_with_burn_in(&params, &ys, burn_in) {
                Ok(st) => -st.loglik,
                Err(_) => f64::INFINITY,
            },
            None => f64::INFINITY,
        }
    };

    let jitter = Normal::new(0.0, 0.4).expect("valid normal");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let nm = NelderMeadOptions {
        max_evals: opts.simplex_evals,
        ftol: 1e-11,
        initial_step: 0.3,
    };
    let qn = BfgsOptions {
        max_iters: opts.bfgs_iters,
        gtol: 1e-7,
        grad_step: 1e-6,
    };
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut start_values = Vec::with_capacity(opts.starts.max(1));
    let mut evaluations = 0;
    for s in 0..opts.starts.max(1) {
        let start: Vec<f64> = if s == 0 {
            u0.clone()
        } else {
            u0.iter().map(|v| v + jitter.sample(&mut rng)).collect()
        };
        let m = optim::simplex_then_bfgs(&mut objective, &start, nm, qn);
        evaluations += m.evaluations;
        start_values.push(m.value);
        if m.value.is_finite() && best.as_ref().is_none_or(|(v, _)| m.value < *v) {
            best = Some((m.value, m.x));
        }
    }
    let (value, u) = best.ok_or_else(|| Error::Optimization {
        message: format!("no start of ARMA({p},{q})-APARCH reached a finite likelihood"),
        best_value: f64::INFINITY,
    })?;
    let params = enc
        .decode(&u)
        .ok_or_else(|| Error::Optimization {
            message: "optimum decodes outside the parameter domain".into(),
            best_value: value,
        })?
        .rescaled(scale);
    let state = filter_with_burn_in(&params, xs, burn_in)?;
    Ok(ArmaAparchFit {
        params,
        loglik: state.loglik,
        burn_in,
        start_values,
        evaluations,
    })
}

/// Asymptotic standard errors in natural parameters, from the inverse of the
/// numerically differentiated observed information.
pub fn standard_errors(params: &ArmaAparchParams, xs: &[f64]) -> Result<Vec<f64>> {
    let (p, q) = (params.p(), params.q());
    let burn_in = params.max_lag() + 1;
    let x0 = params.to_vec();
    let mut negll = |v: &[f64]| -> f64 {
        let cand = ArmaAparchParams::from_vec(v, p, q);
        if cand.validate().is_err() {
            return f64::NAN;
        }
        filter_with_burn_in(&cand, xs, burn_in).map(|s| -s.loglik).unwrap_or(f64::NAN)
    };
    let h = optim::numerical_hessian(&mut negll, &x0, 1e-4);
    let dim = x0.len();
    let mat = DMatrix::from_fn(dim, dim, |i, j| h[i][j]);
    if mat.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("Hessian has non-finite entries (optimum on a bound?)".into()));
    }
    let inv = mat
        .try_inverse()
        .ok_or_else(|| Error::Numerical("observed information is singular".into()))?;
    (0..dim)
        .map(|i| {
            let v = inv[(i, i)];
            if v > 0.0 {
                Ok(v.sqrt())
            } else {
                Err(Error::Numerical(format!("non-positive variance for parameter {i}")))
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct OrderCandidate {
    pub p: usize,
    pub q: usize,
    pub loglik: f64,
    pub aic: f64,
}

#[derive(Debug, Clone)]
pub struct OrderSelection {
    pub p: usize,
    pub q: usize,
    pub fit: ArmaAparchFit,
    pub candidates: Vec<OrderCandidate>,
}

/// AIC grid search over `p <= p_max`, `q <= q_max`. Every candidate is
/// estimated on the same likelihood window (burn-in `max(p_max, q_max) + 1`)
/// so the criteria are comparable. Ties prefer smaller `p + q`, then smaller `p`.
pub fn select_order(xs: &[f64], p_max: usize, q_max: usize, opts: &FitOptions) -> Result<OrderSelection> {
    if p_max > 5 || q_max > 5 {
        return Err(Error::InvalidParameter("order search is limited to p, q <= 5".into()));
    }
    let burn_in = p_max.max(q_max) + 1;
    let mut best: Option<(f64, usize, usize, ArmaAparchFit)> = None;
    let mut candidates = Vec::new();
    let mut last_err = None;
    for p in 0..=p_max {
        for q in 0..=q_max {
            match fit_with_burn_in(xs, p, q, burn_in, opts) {
                Ok(f) => {
                    let aic = f.aic();
                    candidates.push(OrderCandidate { p, q, loglik: f.loglik, aic });
                    let better = match &best {
                        None => true,
                        Some((b_aic, bp, bq, _)) => {
                            aic < *b_aic || (aic == *b_aic && (p + q, p) < (bp + bq, *bp))
                        }
                    };
                    if better {
                        best = Some((aic, p, q, f));
                    }
                }
                Err(e) => {
                    log::warn!("ARMA({p},{q})-APARCH fit failed: {e}");
                    last_err = Some(e);
                }
            }
        }
    }
    match best {
        Some((_, p, q, fit)) => Ok(OrderSelection { p, q, fit, candidates }),
        None => Err(last_err.unwrap_or_else(|| Error::InvalidInput("empty order grid".into()))),
    }
}
