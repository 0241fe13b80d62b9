//! Rolling-origin, one-step-ahead evaluation.
//!
//! Forecasters work on `d`-th differences of the price series. For each
//! target date the driver hands a forecaster only the differences strictly
//! before that date, re-estimates on a cadence, and maps each interval back
//! to price level. Reports hold per-date rows and per-regime metrics and
//! round-trip through their on-disk form.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::arma_aparch::{self, ArmaAparchParams, FitOptions};
use crate::copula::{self, CopulaParams};
use crate::data::{difference, PriceSeries};
use crate::error::{Error, Result};
use crate::metrics::{IntervalBatch, MetricReport};
use crate::neural::{self, LossKind, SearchSpace, TrainConfig, TrainedMlp};

/// A model that can be re-estimated on a window and asked for one-step
/// intervals. All inputs are differenced observations in time order.
pub trait Forecaster {
    /// Display name used in reports.
    fn name(&self) -> &str;
    /// Re-estimates on `window`; `alpha` is the nominal level of the run.
    fn refit(&mut self, window: &[f64], alpha: f64) -> Result<()>;
    /// Interval for the observation following `history`.
    fn forecast(&mut self, history: &[f64], alpha: f64) -> Result<(f64, f64)>;
    /// Short text describing the current fitted state, for the report.
    fn describe_fit(&self) -> String {
        String::new()
    }
}

/// ARMA-APARCH settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmaAparchSpec {
    #[serde(default = "default_order_max")]
    pub p_max: usize,
    #[serde(default = "default_order_max")]
    pub q_max: usize,
    /// Fixed `[p, q]`; skips order selection.
    #[serde(default)]
    pub order: Option<[usize; 2]>,
    #[serde(default = "default_starts")]
    pub starts: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ArmaAparchSpec {
    fn default() -> Self {
        Self {
            p_max: default_order_max(),
            q_max: default_order_max(),
            order: None,
            starts: default_starts(),
            seed: 0,
        }
    }
}

/// Copula Markov model settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CopulaSpec {
    #[serde(default = "default_markov_order")]
    pub p: usize,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for CopulaSpec {
    fn default() -> Self {
        Self {
            p: default_markov_order(),
            samples: default_samples(),
            seed: 0,
        }
    }
}

/// Quantile network settings: the random-search space.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    #[serde(default)]
    pub search: SearchSpace,
}

/// Model choice plus its settings, as written in a run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ForecasterSpec {
    ArmaAparch(ArmaAparchSpec),
    Copula(CopulaSpec),
    MlpPb(MlpSpec),
    MlpQd(MlpSpec),
}

fn default_order_max() -> usize {
    2
}
fn default_starts() -> usize {
    5
}
fn default_markov_order() -> usize {
    1
}
fn default_samples() -> usize {
    copula::DEFAULT_SAMPLES
}

impl ForecasterSpec {
    pub const KINDS: [&'static str; 4] = ["arma_aparch", "copula", "mlp_pb", "mlp_qd"];

    pub fn display_name(&self) -> &'static str {
        match self {
            Self::ArmaAparch(_) => ARMA_NAME,
            Self::Copula(_) => COPULA_NAME,
            Self::MlpPb(_) => MLP_PB_NAME,
            Self::MlpQd(_) => MLP_QD_NAME,
        }
    }

    /// Adds a run-wide base seed to the forecaster's own seed.
    pub fn with_base_seed(mut self, base: u64) -> Self {
        match &mut self {
            Self::ArmaAparch(s) => s.seed = s.seed.wrapping_add(base),
            Self::Copula(s) => s.seed = s.seed.wrapping_add(base),
            Self::MlpPb(s) | Self::MlpQd(s) => s.search.seed = s.search.seed.wrapping_add(base),
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::ArmaAparch(s) => {
                if s.p_max > 5 || s.q_max > 5 || s.order.is_some_and(|[p, q]| p > 5 || q > 5) {
                    return Err(Error::InvalidParameter("ARMA orders are limited to 5".into()));
                }
                if s.starts == 0 {
                    return Err(Error::InvalidParameter("ARMA fit needs at least one start".into()));
                }
                Ok(())
            }
            Self::Copula(s) => {
                if !(1..=5).contains(&s.p) || s.samples == 0 {
                    return Err(Error::InvalidParameter("copula needs p in 1..=5 and a positive sample count".into()));
                }
                Ok(())
            }
            Self::MlpPb(s) | Self::MlpQd(s) => s.search.validate(),
        }
    }

    pub fn build(&self) -> Result<Box<dyn Forecaster>> {
        self.validate()?;
        Ok(match self.clone() {
            Self::ArmaAparch(s) => Box::new(ArmaAparchForecaster::new(
                s.p_max,
                s.q_max,
                s.order.map(|[p, q]| (p, q)),
                FitOptions {
                    starts: s.starts,
                    seed: s.seed,
                    ..FitOptions::default()
                },
            )),
            Self::Copula(s) => Box::new(CopulaForecaster::new(s.p, s.samples, s.seed)),
            Self::MlpPb(s) => Box::new(MlpForecaster::new(LossKind::Pinball, s.search)),
            Self::MlpQd(s) => Box::new(MlpForecaster::new(LossKind::Qd, s.search)),
        })
    }
}

pub const ARMA_NAME: &str = "ARMA-APARCH";
pub const COPULA_NAME: &str = "t copula kernel";
pub const MLP_PB_NAME: &str = "MLP-PB";
pub const MLP_QD_NAME: &str = "MLP-QD";

/// ARMA-APARCH with AIC order selection at the first refit and
/// re-estimation at that order afterwards.
pub struct ArmaAparchForecaster {
    p_max: usize,
    q_max: usize,
    order: Option<(usize, usize)>,
    opts: FitOptions,
    params: Option<ArmaAparchParams>,
}

impl ArmaAparchForecaster {
    pub fn new(p_max: usize, q_max: usize, order: Option<(usize, usize)>, opts: FitOptions) -> Self {
        Self { p_max, q_max, order, opts, params: None }
    }

    /// Forecaster with fixed parameters that never re-estimates.
    pub fn frozen(params: ArmaAparchParams) -> Self {
        Self {
            p_max: 0,
            q_max: 0,
            order: Some((params.p(), params.q())),
            opts: FitOptions::default(),
            params: Some(params),
        }
    }

    pub fn params(&self) -> Option<&ArmaAparchParams> {
        self.params.as_ref()
    }
}

impl Forecaster for ArmaAparchForecaster {
    fn name(&self) -> &str {
        ARMA_NAME
    }

    fn refit(&mut self, window: &[f64], _alpha: f64) -> Result<()> {
        let fit = match self.order {
            Some((p, q)) => arma_aparch::fit(window, p, q, &self.opts)?,
            None => {
                let sel = arma_aparch::select_order(window, self.p_max, self.q_max, &self.opts)?;
                self.order = Some((sel.p, sel.q));
                // Re-estimate on the model's own likelihood window.
                arma_aparch::fit(window, sel.p, sel.q, &self.opts)?
            }
        };
        self.params = Some(fit.params);
        Ok(())
    }

    fn forecast(&mut self, history: &[f64], alpha: f64) -> Result<(f64, f64)> {
        let params = self.params.as_ref().ok_or_else(|| Error::InvalidInput("ARMA-APARCH not fitted".into()))?;
        let f = arma_aparch::forecast_interval(params, history, alpha)?;
        Ok((f.lower, f.upper))
    }

    fn describe_fit(&self) -> String {
        match (&self.params, self.order) {
            (Some(p), Some((po, qo))) => format!("order=({po},{qo}) a1={:.4} a2={:.4} nu={:.3}", p.a1, p.a2, p.nu),
            _ => "unfitted".into(),
        }
    }
}

/// Wrapper whose refit is a no-op.
pub struct Frozen<F>(pub F);

impl<F: Forecaster> Forecaster for Frozen<F> {
    fn name(&self) -> &str {
        self.0.name()
    }
    fn refit(&mut self, _window: &[f64], _alpha: f64) -> Result<()> {
        Ok(())
    }
    fn forecast(&mut self, history: &[f64], alpha: f64) -> Result<(f64, f64)> {
        self.0.forecast(history, alpha)
    }
}

/// Copula Markov model with a kernel marginal, refitted on each window.
pub struct CopulaForecaster {
    p: usize,
    samples: usize,
    seed: u64,
    params: Option<CopulaParams>,
}

impl CopulaForecaster {
    pub fn new(p: usize, samples: usize, seed: u64) -> Self {
        Self { p, samples, seed, params: None }
    }
}

impl Forecaster for CopulaForecaster {
    fn name(&self) -> &str {
        COPULA_NAME
    }

    fn refit(&mut self, window: &[f64], _alpha: f64) -> Result<()> {
        self.params = Some(copula::fit(window, self.p)?.params);
        Ok(())
    }

    fn forecast(&mut self, history: &[f64], alpha: f64) -> Result<(f64, f64)> {
        let params = self.params.as_ref().ok_or_else(|| Error::InvalidInput("copula not fitted".into()))?;
        // The history length identifies the target, giving each forecast its own stream.
        let seed = self.seed ^ (history.len() as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        copula::forecast_interval(params, history, alpha, self.samples, seed)
    }

    fn describe_fit(&self) -> String {
        match &self.params {
            Some(p) => format!("p={} nu={:.3} rho={:?}", p.p(), p.nu, p.rho.iter().map(|r| format!("{r:.4}")).collect::<Vec<_>>()),
            None => "unfitted".into(),
        }
    }
}

/// Quantile network; random search at the first refit, retraining with the
/// chosen configuration afterwards.
pub struct MlpForecaster {
    kind: LossKind,
    space: SearchSpace,
    config: Option<TrainConfig>,
    trained: Option<TrainedMlp>,
}

impl MlpForecaster {
    pub fn new(kind: LossKind, space: SearchSpace) -> Self {
        Self { kind, space, config: None, trained: None }
    }

    /// Skips the search and always trains `config`.
    pub fn with_config(config: TrainConfig) -> Self {
        Self {
            kind: config.loss,
            space: SearchSpace::default(),
            config: Some(config),
            trained: None,
        }
    }
}

impl Forecaster for MlpForecaster {
    fn name(&self) -> &str {
        match self.kind {
            LossKind::Pinball => MLP_PB_NAME,
            LossKind::Qd => MLP_QD_NAME,
        }
    }

    fn refit(&mut self, window: &[f64], alpha: f64) -> Result<()> {
        let trained = match &self.config {
            Some(cfg) => neural::fit_series(window, cfg)?.0,
            None => {
                let out = neural::random_search(&self.space, self.kind, alpha, window)?;
                self.config = Some(out.best.config.clone());
                out.best
            }
        };
        self.trained = Some(trained);
        Ok(())
    }

    fn forecast(&mut self, history: &[f64], _alpha: f64) -> Result<(f64, f64)> {
        self.trained
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("network not trained".into()))?
            .predict(history)
    }

    fn describe_fit(&self) -> String {
        match &self.config {
            Some(c) => format!(
                "lags={} layers={}x{} lr={:.2e} l2={:.2e} batch={} taus=({:.3},{:.3}) lambda={:.3} s={:.1}",
                c.lags, c.layers, c.neurons, c.learning_rate, c.l2, c.batch_size, c.tau_low, c.tau_high, c.lambda, c.softness
            ),
            None => "unfitted".into(),
        }
    }
}

/// Named closed date range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Regime {
    pub name: String,
    pub start: NaiveDate,
    pub end: NaiveDate,
}

/// Regime index of each date (closed ranges), `None` outside all regimes.
pub fn segment(dates: &[NaiveDate], regimes: &[Regime]) -> Result<Vec<Option<usize>>> {
    for r in regimes {
        if r.start > r.end {
            return Err(Error::InvalidParameter(format!("regime `{}` ends before it starts", r.name)));
        }
    }
    for (i, a) in regimes.iter().enumerate() {
        for b in &regimes[i + 1..] {
            if a.start <= b.end && b.start <= a.end {
                return Err(Error::InvalidParameter(format!("regimes `{}` and `{}` overlap", a.name, b.name)));
            }
            if a.name == b.name {
                return Err(Error::InvalidParameter(format!("duplicate regime name `{}`", a.name)));
            }
        }
    }
    Ok(dates
        .iter()
        .map(|d| regimes.iter().position(|r| r.start <= *d && *d <= r.end))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowMode {
    Expanding,
    Moving,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BacktestConfig {
    #[serde(default = "default_refit_every")]
    pub refit_every: usize,
    #[serde(default = "default_window")]
    pub window: WindowMode,
    /// Length of the moving window in differenced observations.
    #[serde(default)]
    pub moving_length: Option<usize>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_d")]
    pub difference_order: usize,
    #[serde(default)]
    pub regimes: Vec<Regime>,
    /// Optional explicit target span; defaults to the union of the regimes.
    #[serde(default)]
    pub eval_start: Option<NaiveDate>,
    #[serde(default)]
    pub eval_end: Option<NaiveDate>,
    /// Differenced observations required before the first target.
    #[serde(default = "default_min_history")]
    pub min_history: usize,
}

fn default_refit_every() -> usize {
    10
}
fn default_window() -> WindowMode {
    WindowMode::Expanding
}
fn default_alpha() -> f64 {
    0.1
}
fn default_d() -> usize {
    1
}
fn default_min_history() -> usize {
    100
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self {
            refit_every: default_refit_every(),
            window: default_window(),
            moving_length: None,
            alpha: default_alpha(),
            difference_order: default_d(),
            regimes: Vec::new(),
            eval_start: None,
            eval_end: None,
            min_history: default_min_history(),
        }
    }
}

impl BacktestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.refit_every == 0 {
            return Err(Error::InvalidParameter("refit_every must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidParameter(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        if self.window == WindowMode::Moving && self.moving_length.is_none_or(|l| l == 0) {
            return Err(Error::InvalidParameter("moving window needs a positive moving_length".into()));
        }
        if self.difference_order > 3 {
            return Err(Error::InvalidParameter("difference order above 3 is not supported".into()));
        }
        segment(&[], &self.regimes).map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRow {
    pub forecaster: String,
    pub date: NaiveDate,
    pub y: f64,
    pub lower: f64,
    pub upper: f64,
    pub regime: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeMetrics {
    pub forecaster: String,
    pub regime: String,
    pub picp: f64,
    pub piaw: f64,
    pub interval_score: f64,
    pub pb_low: f64,
    pub pb_high: f64,
    pub n: usize,
}

impl RegimeMetrics {
    pub fn metrics(&self) -> MetricReport {
        MetricReport {
            picp: self.picp,
            piaw: self.piaw,
            interval_score: self.interval_score,
            pb_low: self.pb_low,
            pb_high: self.pb_high,
            n: self.n,
        }
    }
}

/// Fit or forecast problem recorded instead of aborting the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub forecaster: String,
    pub date: NaiveDate,
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefitRecord {
    pub forecaster: String,
    pub date: NaiveDate,
    /// Ordinal of the target at which the refit happened.
    pub target_index: usize,
    pub ok: bool,
    pub state: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub alpha: f64,
    /// Config echo, in insertion order.
    pub header: Vec<(String, String)>,
    pub forecasters: Vec<String>,
    pub regimes: Vec<String>,
    pub rows: Vec<ForecastRow>,
    pub metrics: Vec<RegimeMetrics>,
    pub failures: Vec<Failure>,
    pub refits: Vec<RefitRecord>,
}

/// Six-decimal rounding applied to every emitted float.
pub fn quantize(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// `c` such that `level[t] = diff_d[t - d] + c`, from the `d` levels before `t`.
pub fn reintegration_offset(levels: &[f64], t: usize, d: usize) -> f64 {
    (1..=d)
        .map(|k| {
            let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
            sign * binomial(d, k) * levels[t - k]
        })
        .sum()
}

impl EvalReport {
    /// Metrics for one forecaster and regime computed from the rows.
    pub fn recompute(&self, forecaster: &str, regime: &str) -> Result<MetricReport> {
        let rows: Vec<&ForecastRow> = self
            .rows
            .iter()
            .filter(|r| r.forecaster == forecaster && r.regime.as_deref() == Some(regime))
            .collect();
        metrics_of(&rows, self.alpha)
    }

    pub fn metric(&self, forecaster: &str, regime: &str) -> Option<&RegimeMetrics> {
        self.metrics.iter().find(|m| m.forecaster == forecaster && m.regime == regime)
    }

    pub fn rows_for<'a>(&'a self, forecaster: &'a str) -> impl Iterator<Item = &'a ForecastRow> + 'a {
        self.rows.iter().filter(move |r| r.forecaster == forecaster)
    }
}

fn metrics_of(rows: &[&ForecastRow], alpha: f64) -> Result<MetricReport> {
    if rows.is_empty() {
        return Ok(MetricReport::empty());
    }
    let batch = IntervalBatch::new(
        rows.iter().map(|r| r.lower).collect(),
        rows.iter().map(|r| r.upper).collect(),
        alpha,
    )?;
    let y: Vec<f64> = rows.iter().map(|r| r.y).collect();
    MetricReport::evaluate(&batch, &y)
}

/// Positions (in the level series) of the target dates.
pub fn target_positions(series: &PriceSeries, cfg: &BacktestConfig) -> Result<Vec<usize>> {
    let dates = series.dates();
    let in_span = |d: &NaiveDate| cfg.eval_start.is_none_or(|s| *d >= s) && cfg.eval_end.is_none_or(|e| *d <= e);
    let targets: Vec<usize> = if cfg.eval_start.is_some() || cfg.eval_end.is_some() {
        (0..dates.len()).filter(|&i| in_span(&dates[i])).collect()
    } else {
        let seg = segment(dates, &cfg.regimes)?;
        (0..dates.len()).filter(|&i| seg[i].is_some()).collect()
    };
    if targets.is_empty() {
        return Err(Error::InvalidInput("no target dates: set regimes or an evaluation span inside the data".into()));
    }
    Ok(targets)
}

/// Walks the targets for every forecaster and assembles the report.
pub fn run(series: &PriceSeries, forecasters: &mut [Box<dyn Forecaster>], cfg: &BacktestConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let (first, last) = (series.dates()[0], series.dates()[series.len() - 1]);
    for r in &cfg.regimes {
        if r.start < first || r.end > last {
            return Err(Error::InvalidParameter(format!(
                "regime `{}` ({} to {}) extends beyond the data ({first} to {last})",
                r.name, r.start, r.end
            )));
        }
    }
    let d = cfg.difference_order;
    let levels = series.values();
    let diffs = difference(levels, d)?.diffs;
    let targets = target_positions(series, cfg)?;
    let need = cfg.min_history.max(1) + d;
    if targets[0] < need {
        return Err(Error::InvalidInput(format!(
            "first target {} has {} observations of history, {need} required",
            series.dates()[targets[0]],
            targets[0]
        )));
    }
    let seg = segment(series.dates(), &cfg.regimes)?;

    let mut report = EvalReport {
        alpha: cfg.alpha,
        forecasters: forecasters.iter().map(|f| f.name().to_string()).collect(),
        regimes: cfg.regimes.iter().map(|r| r.name.clone()).collect(),
        ..Default::default()
    };
    for f in forecasters.iter_mut() {
        let name = f.name().to_string();
        let mut last_refit: Option<usize> = None;
        let mut fitted_once = false;
        for (k, &t) in targets.iter().enumerate() {
            let date = series.dates()[t];
            // Differences strictly before level index t.
            let end = t - d;
            let start = match cfg.window {
                WindowMode::Expanding => 0,
                WindowMode::Moving => end.saturating_sub(cfg.moving_length.unwrap_or(end)),
            };
            let history = &diffs[start..end];
            if last_refit.is_none_or(|r| t - r >= cfg.refit_every) {
                last_refit = Some(t);
                let outcome = f.refit(history, cfg.alpha);
                let ok = outcome.is_ok();
                if let Err(e) = outcome {
                    log::warn!("{name}: refit at {date} failed: {e}");
                    report.failures.push(Failure {
                        forecaster: name.clone(),
                        date,
                        stage: if fitted_once { "refit (previous parameters kept)".into() } else { "refit".into() },
                        message: e.to_string(),
                    });
                }
                fitted_once |= ok;
                report.refits.push(RefitRecord {
                    forecaster: name.clone(),
                    date,
                    target_index: k,
                    ok,
                    state: f.describe_fit(),
                });
            }
            match f.forecast(history, cfg.alpha) {
                Ok((lo, hi)) => {
                    let offset = reintegration_offset(levels, t, d);
                    report.rows.push(ForecastRow {
                        forecaster: name.clone(),
                        date,
                        y: quantize(levels[t]),
                        lower: quantize(lo + offset),
                        upper: quantize(hi + offset),
                        regime: seg[t].map(|i| cfg.regimes[i].name.clone()),
                    });
                }
                Err(e) => report.failures.push(Failure {
                    forecaster: name.clone(),
                    date,
                    stage: "forecast".into(),
                    message: e.to_string(),
                }),
            }
        }
    }
    for f in &report.forecasters {
        for r in &report.regimes {
            let m = report.recompute(f, r)?;
            report.metrics.push(RegimeMetrics {
                forecaster: f.clone(),
                regime: r.clone(),
                picp: quantize(m.picp),
                piaw: quantize(m.piaw),
                interval_score: quantize(m.interval_score),
                pb_low: quantize(m.pb_low),
                pb_high: quantize(m.pb_high),
                n: m.n,
            });
        }
    }
    Ok(report)
}

/// File-name form of a display name.
pub fn slug(name: &str) -> String {
    let mut s = String::new();
    for c in name.chars() {
        if c.is_ascii_alphanumeric() {
            s.push(c.to_ascii_lowercase());
        } else if !s.ends_with('_') {
            s.push('_');
        }
    }
    s.trim_matches('_').to_string()
}

/// One table row in the column order
/// Model | PICP | PIAW | Interval Score | PB^{a/2} | PB^{1-a/2}, joined by `sep`.
pub fn render_row(name: &str, m: &MetricReport, sep: &str) -> String {
    [
        name.to_string(),
        format!("{:.4}", m.picp),
        format!("{:.4}", m.piaw),
        format!("{:.4}", m.interval_score),
        format!("{:.4}", m.pb_low),
        format!("{:.4}", m.pb_high),
    ]
    .join(sep)
}

/// Human-readable report: header echo, then one table per regime.
pub fn render_tables(report: &EvalReport) -> String {
    let mut out = String::new();
    for (k, v) in &report.header {
        let _ = writeln!(out, "# {k} = {v}");
    }
    let a = report.alpha;
    let fmt_level = |x: f64| {
        let s = format!("{x:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    };
    let columns = [
        "Model".to_string(),
        "PICP".into(),
        "PIAW".into(),
        "Interval Score".into(),
        format!("PB^{{{}}}", fmt_level(a / 2.0)),
        format!("PB^{{{}}}", fmt_level(1.0 - a / 2.0)),
    ];
    for regime in &report.regimes {
        let n = report.metrics.iter().find(|m| &m.regime == regime).map_or(0, |m| m.n);
        let _ = writeln!(out, "\n{regime} (n = {n})");
        let mut lines = vec![columns.to_vec()];
        for m in report.metrics.iter().filter(|m| &m.regime == regime) {
            lines.push(render_row(&m.forecaster, &m.metrics(), "\t").split('\t').map(String::from).collect());
        }
        let widths: Vec<usize> = (0..columns.len()).map(|c| lines.iter().map(|l| l[c].chars().count()).max().unwrap_or(0)).collect();
        for (i, l) in lines.iter().enumerate() {
            let cells: Vec<String> = l
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (cell, w))| if c == 0 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", cells.join(" | ").trim_end());
            if i == 0 {
                let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
                let _ = writeln!(out, "{}", rule.join("-|-"));
            }
        }
    }
    if !report.failures.is_empty() {
        let _ = writeln!(out, "\nFailures");
        for f in &report.failures {
            let _ = writeln!(out, "{} {} [{}]: {}", f.forecaster, f.date, f.stage, f.message);
        }
    }
    out
}

fn json_float(x: f64) -> String {
    format!("{x:.6}")
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization")
}

fn metrics_json(report: &EvalReport) -> String {
    let mut s = String::from("{\n");
    let _ = writeln!(s, "  \"alpha\": {},", json_float(report.alpha));
    s.push_str("  \"header\": {");
    let header: Vec<String> = report.header.iter().map(|(k, v)| format!("\n    {}: {}", json_str(k), json_str(v))).collect();
    s.push_str(&header.join(","));
    s.push_str(if header.is_empty() { "},\n" } else { "\n  },\n" });
    let list = |items: &[String]| items.iter().map(|i| json_str(i)).collect::<Vec<_>>().join(", ");
    let _ = writeln!(s, "  \"forecasters\": [{}],", list(&report.forecasters));
    let _ = writeln!(s, "  \"regimes\": [{}],", list(&report.regimes));
    s.push_str("  \"metrics\": [");
    let rows: Vec<String> = report
        .metrics
        .iter()
        .map(|m| {
            format!(
                "\n    {{\"forecaster\": {}, \"regime\": {}, \"n\": {}, \"picp\": {}, \"piaw\": {}, \"interval_score\": {}, \"pb_low\": {}, \"pb_high\": {}}}",
                json_str(&m.forecaster),
                json_str(&m.regime),
                m.n,
                json_float(m.picp),
                json_float(m.piaw),
                json_float(m.interval_score),
                json_float(m.pb_low),
                json_float(m.pb_high)
            )
        })
        .collect();
    s.push_str(&rows.join(","));
    s.push_str(if rows.is_empty() { "],\n" } else { "\n  ],\n" });
    s.push_str("  \"failures\": [");
    let fails: Vec<String> = report
        .failures
        .iter()
        .map(|f| {
            format!(
                "\n    {{\"forecaster\": {}, \"date\": \"{}\", \"stage\": {}, \"message\": {}}}",
                json_str(&f.forecaster),
                f.date,
                json_str(&f.stage),
                json_str(&f.message)
            )
        })
        .collect();
    s.push_str(&fails.join(","));
    s.push_str(if fails.is_empty() { "],\n" } else { "\n  ],\n" });
    s.push_str("  \"refits\": [");
    let refits: Vec<String> = report
        .refits
        .iter()
        .map(|r| {
            format!(
                "\n    {{\"forecaster\": {}, \"date\": \"{}\", \"target_index\": {}, \"ok\": {}, \"state\": {}}}",
                json_str(&r.forecaster),
                r.date,
                r.target_index,
                r.ok,
                json_str(&r.state)
            )
        })
        .collect();
    s.push_str(&refits.join(","));
    s.push_str(if refits.is_empty() { "]\n" } else { "\n  ]\n" });
    s.push_str("}\n");
    s
}

#[derive(Deserialize)]
struct MetricsDoc {
    alpha: f64,
    header: serde_json::Map<String, serde_json::Value>,
    forecasters: Vec<String>,
    regimes: Vec<String>,
    metrics: Vec<RegimeMetrics>,
    failures: Vec<Failure>,
    refits: Vec<RefitRecord>,
}

/// Paths written by [`emit`].
#[derive(Debug, Clone)]
pub struct EmittedFiles {
    pub forecasts: PathBuf,
    pub metrics: PathBuf,
    pub report: PathBuf,
    pub plots: Vec<PathBuf>,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `forecasts.csv`, `metrics.json`, `report.txt` and
/// `plots/<forecaster>_<regime>.csv` under `dir`.
pub fn emit(report: &EvalReport, dir: impl AsRef<Path>) -> Result<EmittedFiles> {
    let dir = dir.as_ref();
    let plots_dir = dir.join("plots");
    std::fs::create_dir_all(&plots_dir).map_err(|e| Error::io(&plots_dir, e))?;

    let mut csv = String::from("forecaster,date,y,lower,upper,regime\n");
    for r in &report.rows {
        let _ = writeln!(
            csv,
            "{},{},{:.6},{:.6},{:.6},{}",
            r.forecaster,
            r.date,
            r.y,
            r.lower,
            r.upper,
            r.regime.as_deref().unwrap_or("")
        );
    }
    let forecasts = dir.join("forecasts.csv");
    write_file(&forecasts, &csv)?;
    let metrics = dir.join("metrics.json");
    write_file(&metrics, &metrics_json(report))?;
    let text = dir.join("report.txt");
    write_file(&text, &render_tables(report))?;

    let mut plots = Vec::new();
    for f in &report.forecasters {
        for g in &report.regimes {
            let mut s = String::from("date,y,lower,upper\n");
            for r in report.rows.iter().filter(|r| &r.forecaster == f && r.regime.as_ref() == Some(g)) {
                let _ = writeln!(s, "{},{:.6},{:.6},{:.6}", r.date, r.y, r.lower, r.upper);
            }
            let path = plots_dir.join(format!("{}_{}.csv", slug(f), slug(g)));
            write_file(&path, &s)?;
            plots.push(path);
        }
    }
    Ok(EmittedFiles { forecasts, metrics, report: text, plots })
}

#[derive(Deserialize)]
struct CsvRow {
    forecaster: String,
    date: NaiveDate,
    y: f64,
    lower: f64,
    upper: f64,
    regime: String,
}

/// Reads the machine-readable part of an emitted report.
pub fn parse(dir: impl AsRef<Path>) -> Result<EvalReport> {
    let dir = dir.as_ref();
    let fpath = dir.join("forecasts.csv");
    let mut rdr = csv::Reader::from_path(&fpath).map_err(|e| Error::Format(format!("{}: {e}", fpath.display())))?;
    let mut rows = Vec::new();
    for rec in rdr.deserialize::<CsvRow>() {
        let r = rec.map_err(|e| Error::Format(format!("{}: {e}", fpath.display())))?;
        rows.push(ForecastRow {
            forecaster: r.forecaster,
            date: r.date,
            y: r.y,
            lower: r.lower,
            upper: r.upper,
            regime: (!r.regime.is_empty()).then_some(r.regime),
        });
    }
    let mpath = dir.join("metrics.json");
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let doc: MetricsDoc = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", mpath.display())))?;
    let header = doc
        .header
        .into_iter()
        .map(|(k, v)| (k, v.as_str().unwrap_or_default().to_string()))
        .collect();
    Ok(EvalReport {
        alpha: doc.alpha,
        header,
        forecasters: doc.forecasters,
        regimes: doc.regimes,
        rows,
        metrics: doc.metrics,
        failures: doc.failures,
        refits: doc.refits,
    })
}

/// Regime-level summary keyed by forecaster, for quick lookups in tests and examples.
pub fn piaw_by_regime(report: &EvalReport) -> BTreeMap<(String, String), f64> {
    report
        .metrics
        .iter()
        .map(|m| ((m.forecaster.clone(), m.regime.clone()), m.piaw))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{Datelike, Duration, Weekday};

    fn weekdays(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
        let mut out = Vec::with_capacity(n);
        let mut d = start;
        while out.len() < n {
            if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
                out.push(d);
            }
            d += Duration::days(1);
        }
        out
    }

    fn date(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn synthetic(n: usize, seed: u64) -> (PriceSeries, ArmaAparchParams) {
        let truth = ArmaAparchParams {
            mu: 0.0,
            phi: vec![0.3],
            theta: vec![],
            a0: 0.05,
            a1: 0.7,
            a2: 0.2,
            nu: 6.0,
            xi: 1.0,
        };
        let diffs = arma_aparch::simulate(&truth, n - 1, seed).unwrap();
        let mut level = 20.0;
        let mut values = vec![level];
        for d in diffs {
            level += d;
            values.push(level);
        }
        (PriceSeries::new(weekdays(date("2015-01-01"), n), values).unwrap(), truth)
    }

    /// Records every call; forecasts a fixed band around the last observation.
    struct Probe {
        refits: Vec<usize>,
        seen: Vec<usize>,
    }

    impl Forecaster for Probe {
        fn name(&self) -> &str {
            "probe"
        }
        fn refit(&mut self, window: &[f64], _alpha: f64) -> Result<()> {
            self.refits.push(window.len());
            Ok(())
        }
        fn forecast(&mut self, history: &[f64], _alpha: f64) -> Result<(f64, f64)> {
            self.seen.push(history.len());
            let last = *history.last().unwrap();
            Ok((last - 1.0, last + 1.0))
        }
    }

    fn span_cfg(series: &PriceSeries, from: usize, to: usize) -> BacktestConfig {
        BacktestConfig {
            regimes: vec![Regime {
                name: "eval".into(),
                start: series.dates()[from],
                end: series.dates()[to],
            }],
            min_history: 50,
            ..Default::default()
        }
    }

    #[test]
    fn refit_cadence() {
        let (series, _) = synthetic(300, 1);
        let cfg = span_cfg(&series, 200, 224);
        let mut fs: Vec<Box<dyn Forecaster>> = vec![Box::new(Probe { refits: vec![], seen: vec![] })];
        let report = run(&series, &mut fs, &cfg).unwrap();
        let idx: Vec<usize> = report.refits.iter().map(|r| r.target_index).collect();
        assert_eq!(idx, vec![0, 10, 20]);
        assert_eq!(report.rows.len(), 25);
    }

    #[test]
    fn history_ends_before_target() {
        let (series, _) = synthetic(300, 2);
        let cfg = span_cfg(&series, 200, 209);
        let report = run(&series, &mut [Box::new(Probe { refits: vec![], seen: vec![] }) as Box<dyn Forecaster>], &cfg).unwrap();
        // Level t has t - 1 first differences strictly before it; probe centres on the last one.
        for (k, row) in report.rows.iter().enumerate() {
            let t = 200 + k;
            let last_diff = series.values()[t - 1] - series.values()[t - 2];
            assert!((row.lower - quantize(last_diff - 1.0 + series.values()[t - 1])).abs() < 1e-9);
        }
    }

    #[test]
    fn perturbing_the_target_leaves_its_interval_unchanged() {
        let (series, _) = synthetic(260, 3);
        let cfg = span_cfg(&series, 240, 249);
        let build = || -> Vec<Box<dyn Forecaster>> { vec![Box::new(CopulaForecaster::new(1, 2000, 9))] };
        let base = run(&series, &mut build(), &cfg).unwrap();
        for k in [0, 4, 9] {
            let t = 240 + k;
            let mut values = series.values().to_vec();
            for v in &mut values[t..] {
                *v += 50.0;
            }
            let bumped = PriceSeries::new(series.dates().to_vec(), values).unwrap();
            let other = run(&bumped, &mut build(), &cfg).unwrap();
            for j in 0..=k {
                assert_eq!(base.rows[j].lower, other.rows[j].lower, "target {j} after bump at {k}");
                assert_eq!(base.rows[j].upper, other.rows[j].upper);
            }
            assert_ne!(base.rows[k].y, other.rows[k].y);
        }
    }

    #[test]
    fn moving_window_matches_expanding_on_first_refit() {
        let (series, _) = synthetic(300, 4);
        let mut cfg = span_cfg(&series, 200, 229);
        let mut a: Vec<Box<dyn Forecaster>> = vec![Box::new(CopulaForecaster::new(1, 1000, 2))];
        let exp = run(&series, &mut a, &cfg).unwrap();
        cfg.window = WindowMode::Moving;
        cfg.moving_length = Some(199);
        let mut b: Vec<Box<dyn Forecaster>> = vec![Box::new(CopulaForecaster::new(1, 1000, 2))];
        let mov = run(&series, &mut b, &cfg).unwrap();
        assert_eq!(exp.refits[0].state, mov.refits[0].state);
        assert_eq!(exp.rows[0], mov.rows[0]);
        assert_ne!(exp.refits[1].state, mov.refits[1].state);
    }

    #[test]
    fn reintegration_inverts_any_order() {
        let xs: Vec<f64> = (0..30).map(|i| ((i * 37) % 11) as f64 * 0.7 - i as f64 * 0.1).collect();
        for d in 0..=3 {
            let diffs = difference(&xs, d).unwrap().diffs;
            for t in d..xs.len() {
                let back = diffs[t - d] + reintegration_offset(&xs, t, d);
                assert!((back - xs[t]).abs() < 1e-9, "d={d} t={t}");
            }
        }
    }

    #[test]
    fn segment_rules() {
        let days = weekdays(date("2022-01-03"), 10);
        let r = |n: &str, a: &str, b: &str| Regime { name: n.into(), start: date(a), end: date(b) };
        let seg = segment(&days, &[r("a", "2022-01-03", "2022-01-05")]).unwrap();
        assert_eq!(seg.iter().filter(|s| s.is_some()).count(), 3);
        assert!(segment(&days, &[r("a", "2022-01-03", "2022-01-05"), r("b", "2022-01-05", "2022-01-07")]).is_err());
        let empty = segment(&days, &[r("w", "2022-01-08", "2022-01-09")]).unwrap();
        assert!(empty.iter().all(|s| s.is_none()));
    }

    #[test]
    fn calendar_counts_for_reference_regimes() {
        let holidays: Vec<NaiveDate> = ["2021-08-30", "2021-12-27", "2021-12-28", "2022-01-03", "2022-04-15", "2022-04-18", "2022-05-02", "2022-06-02", "2022-06-03", "2022-08-29", "2022-09-19", "2022-12-26", "2022-12-27", "2023-01-02"]
            .iter()
            .map(|s| date(s))
            .collect();
        let days: Vec<NaiveDate> = weekdays(date("2021-01-04"), 600).into_iter().filter(|d| !holidays.contains(d)).collect();
        let regimes = vec![
            Regime { name: "shock".into(), start: date("2021-06-09"), end: date("2022-01-31") },
            Regime { name: "after-shock".into(), start: date("2022-10-26"), end: date("2023-01-20") },
        ];
        let seg = segment(&days, &regimes).unwrap();
        assert_eq!(seg.iter().filter(|s| **s == Some(0)).count(), 165);
        assert_eq!(seg.iter().filter(|s| **s == Some(1)).count(), 60);
    }

    #[test]
    fn table_row_layout() {
        let m = MetricReport { picp: 0.8364, piaw: 14.8305, interval_score: 27.0107, pb_low: 0.6494, pb_high: 0.7012, n: 165 };
        assert_eq!(render_row("ARMA-APARCH", &m, ", "), "ARMA-APARCH, 0.8364, 14.8305, 27.0107, 0.6494, 0.7012");
        let report = EvalReport {
            alpha: 0.1,
            forecasters: vec!["ARMA-APARCH".into()],
            regimes: vec!["shock".into()],
            metrics: vec![RegimeMetrics { forecaster: "ARMA-APARCH".into(), regime: "shock".into(), picp: 0.8364, piaw: 14.8305, interval_score: 27.0107, pb_low: 0.6494, pb_high: 0.7012, n: 165 }],
            ..Default::default()
        };
        let text = render_tables(&report);
        assert!(text.contains("Model       |   PICP |    PIAW | Interval Score | PB^{0.05} | PB^{0.95}"), "{text}");
        assert!(text.contains("ARMA-APARCH | 0.8364 | 14.8305 |        27.0107 |    0.6494 |    0.7012"), "{text}");
    }

    #[test]
    fn slugs() {
        assert_eq!(slug("t copula kernel"), "t_copula_kernel");
        assert_eq!(slug("ARMA-APARCH"), "arma_aparch");
        assert_eq!(slug("after-shock"), "after_shock");
    }

    #[test]
    fn oracle_forecaster_is_calibrated() {
        let (series, truth) = synthetic(1300, 5);
        let cfg = span_cfg(&series, 300, 1299);
        let mut fs: Vec<Box<dyn Forecaster>> = vec![Box::new(Frozen(ArmaAparchForecaster::frozen(truth)))];
        let report = run(&series, &mut fs, &cfg).unwrap();
        let m = report.metric(ARMA_NAME, "eval").unwrap();
        assert_eq!(m.n, 1000);
        assert!((0.87..=0.93).contains(&m.picp), "{}", m.picp);
    }

    #[test]
    fn emit_parse_round_trip_and_determinism() {
        let (series, truth) = synthetic(400, 6);
        let mut cfg = span_cfg(&series, 300, 399);
        cfg.regimes.push(Regime { name: "empty".into(), start: series.dates()[100], end: series.dates()[100] });
        cfg.eval_start = Some(series.dates()[300]);
        let build = || -> Vec<Box<dyn Forecaster>> { vec![Box::new(Frozen(ArmaAparchForecaster::frozen(truth.clone())))] };
        let mut report = run(&series, &mut build(), &cfg).unwrap();
        report.header.push(("refit_every".into(), "10".into()));
        let dir = tempfile::tempdir().unwrap();
        let files = emit(&report, dir.path()).unwrap();
        let back = parse(dir.path()).unwrap();
        assert_eq!(back, report);
        assert_eq!(back.metric(ARMA_NAME, "empty").unwrap().n, 0);
        for m in &back.metrics {
            let r = back.recompute(&m.forecaster, &m.regime).unwrap();
            assert_eq!(quantize(r.picp), m.picp);
            assert_eq!(quantize(r.interval_score), m.interval_score);
        }
        let plot = std::fs::read_to_string(&files.plots[0]).unwrap();
        assert_eq!(plot.lines().count() - 1, back.metrics[0].n);

        let dir2 = tempfile::tempdir().unwrap();
        let mut again = run(&series, &mut build(), &cfg).unwrap();
        again.header = report.header.clone();
        emit(&again, dir2.path()).unwrap();
        for f in ["forecasts.csv", "metrics.json"] {
            assert_eq!(std::fs::read(dir.path().join(f)).unwrap(), std::fs::read(dir2.path().join(f)).unwrap());
        }
    }

    #[test]
    fn fit_failure_is_recorded_and_run_continues() {
        struct Flaky(usize);
        impl Forecaster for Flaky {
            fn name(&self) -> &str {
                "flaky"
            }
            fn refit(&mut self, _w: &[f64], _a: f64) -> Result<()> {
                self.0 += 1;
                if self.0 == 2 {
                    Err(Error::Numerical("boom".into()))
                } else {
                    Ok(())
                }
            }
            fn forecast(&mut self, _h: &[f64], _a: f64) -> Result<(f64, f64)> {
                Ok((-1.0, 1.0))
            }
        }
        let (series, _) = synthetic(300, 7);
        let report = run(&series, &mut [Box::new(Flaky(0)) as Box<dyn Forecaster>], &span_cfg(&series, 200, 229)).unwrap();
        assert_eq!(report.rows.len(), 30);
        assert_eq!(report.failures.len(), 1);
        assert!(report.failures[0].stage.contains("previous"));
        assert!(render_tables(&report).contains("boom"));
    }

    #[test]
    fn config_checks() {
        let (series, _) = synthetic(300, 8);
        let mut cfg = span_cfg(&series, 20, 30);
        assert!(run(&series, &mut [Box::new(Probe { refits: vec![], seen: vec![] }) as Box<dyn Forecaster>], &cfg).is_err());
        cfg = span_cfg(&series, 200, 210);
        cfg.refit_every = 0;
        assert!(cfg.validate().is_err());
        cfg.refit_every = 5;
        cfg.window = WindowMode::Moving;
        assert!(cfg.validate().is_err());
        cfg.regimes[0].end = date("2030-01-01");
        cfg.window = WindowMode::Expanding;
        assert!(run(&series, &mut [Box::new(Probe { refits: vec![], seen: vec![] }) as Box<dyn Forecaster>], &cfg).is_err());
    }
}
