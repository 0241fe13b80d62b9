//! Interval and quantile evaluation measures, plus the two trainable losses
//! (pinball and quality-driven).
//!
//! Intervals are closed: a realization on either bound counts as covered.
//! Bounds are taken literally and may cross; ordering is the caller's job.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower/upper bounds of a batch of `(1 - alpha)` prediction intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalBatch {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub alpha: f64,
}

impl IntervalBatch {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, alpha: f64) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::InvalidInput(format!(
                "{} lower bounds but {} upper bounds",
                lower.len(),
                upper.len()
            )));
        }
        check_alpha(alpha)?;
        if lower.iter().chain(&upper).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("interval bounds must be finite".into()));
        }
        Ok(Self {
            lower,
            upper,
            alpha,
        })
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    fn widths(&self) -> impl Iterator<Item = f64> + '_ {
        self.lower.iter().zip(&self.upper).map(|(l, u)| u - l)
    }

    fn check_targets(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.len() {
            return Err(Error::InvalidInput(format!(
                "{} intervals but {} realizations",
                self.len(),
                y.len()
            )));
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!("alpha {alpha} outside (0, 1)")));
    }
    Ok(())
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "quantile level {tau} outside (0, 1)"
        )));
    }
    Ok(())
}

#[inline]
pub(crate) fn covered(l: f64, u: f64, y: f64) -> bool {
    l <= y && y <= u
}

/// Fraction of realizations inside their interval.
pub fn picp(b: &IntervalBatch, y: &[f64]) -> Result<f64> {
    b.check_targets(y)?;
    if b.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let hits = b
        .lower
        .iter()
        .zip(&b.upper)
        .zip(y)
        .filter(|((l, u), y)| covered(**l, **u, **y))
        .count();
    Ok(hits as f64 / b.len() as f64)
}

/// Mean interval width.
pub fn piaw(b: &IntervalBatch) -> Result<f64> {
    if b.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    Ok(b.widths().sum::<f64>() / b.len() as f64)
}

/// Interval score of a single interval at level `alpha`.
pub fn interval_score_one(lower: f64, upper: f64, y: f64, alpha: f64) -> f64 {
    let mut s = upper - lower;
    if y < lower {
        s += 2.0 / alpha * (lower - y);
    }
    if y > upper {
        s += 2.0 / alpha * (y - upper);
    }
    s
}

/// Batch-mean interval score; lower is better.
pub fn interval_score(b: &IntervalBatch, y: &[f64]) -> Result<f64> {
    b.check_targets(y)?;
    check_alpha(b.alpha)?;
    if b.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let total: f64 = b
        .lower
        .iter()
        .zip(&b.upper)
        .zip(y)
        .map(|((l, u), y)| interval_score_one(*l, *u, *y, b.alpha))
        .sum();
    Ok(total / b.len() as f64)
}

/// Pinball loss of quantile prediction `q_hat` at level `tau`.
#[inline]
pub fn pinball(q_hat: f64, y: f64, tau: f64) -> f64 {
    if q_hat >= y {
        (1.0 - tau) * (q_hat - y)
    } else {
        tau * (y - q_hat)
    }
}

pub fn mean_pinball(q_hat: &[f64], y: &[f64], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if q_hat.len() != y.len() || y.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} realizations",
            q_hat.len(),
            y.len()
        )));
    }
    Ok(q_hat.iter().zip(y).map(|(q, y)| pinball(*q, *y, tau)).sum::<f64>() / y.len() as f64)
}

/// Average of the per-level batch-mean pinball losses.
pub fn combined_pinball(preds: &[Vec<f64>], y: &[f64], taus: &[f64]) -> Result<f64> {
    if taus.is_empty() {
        return Err(Error::InvalidInput("no quantile levels given".into()));
    }
    if preds.len() != taus.len() {
        return Err(Error::InvalidInput(format!(
            "{} prediction vectors for {} levels",
            preds.len(),
            taus.len()
        )));
    }
    let mut total = 0.0;
    for (p, &tau) in preds.iter().zip(taus) {
        total += mean_pinball(p, y, tau)?;
    }
    Ok(total / taus.len() as f64)
}

/// Mean width over the intervals that cover their realization; 0 when none do.
pub fn piaw_capt(b: &IntervalBatch, y: &[f64]) -> Result<f64> {
    b.check_targets(y)?;
    let (mut width, mut count) = (0.0, 0usize);
    for ((l, u), y) in b.lower.iter().zip(&b.upper).zip(y) {
        if covered(*l, *u, *y) {
            width += u - l;
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { width / count as f64 })
}

/// Parameters of the quality-driven loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QdParams {
    /// Weight of the coverage penalty.
    pub lambda: f64,
    /// Sharpness of the sigmoid coverage indicator.
    pub softness: f64,
    /// Exact indicators instead of sigmoids.
    pub hard: bool,
}

impl QdParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "QD lambda {} must be non-negative",
                self.lambda
            )));
        }
        if !(self.softness > 0.0 && self.softness.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "QD softness {} must be positive",
                self.softness
            )));
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Soft coverage indicator `sigmoid(s (y - l)) * sigmoid(s (u - y))`.
#[inline]
pub(crate) fn soft_cover(l: f64, u: f64, y: f64, s: f64) -> (f64, f64, f64) {
    let a = sigmoid(s * (y - l));
    let b = sigmoid(s * (u - y));
    (a * b, a, b)
}

/// Added to the soft captured mass so the width ratio stays finite when no
/// point is (softly) covered.
pub(crate) const QD_SOFT_EPS: f64 = 1e-12;

pub(crate) fn qd_penalty_scale(n: usize, alpha: f64, lambda: f64) -> f64 {
    lambda * n as f64 / (alpha * (1.0 - alpha))
}

/// Quality-driven loss: captured width plus `lambda * n / (alpha (1 - alpha))`
/// times the squared coverage shortfall below `1 - alpha`.
pub fn qd_loss(b: &IntervalBatch, y: &[f64], params: &QdParams) -> Result<f64> {
    b.check_targets(y)?;
    check_alpha(b.alpha)?;
    params.validate()?;
    if b.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let n = b.len();
    let (mut width, mut captured) = (0.0, 0.0);
    for ((l, u), y) in b.lower.iter().zip(&b.upper).zip(y) {
        let k = if params.hard {
            if covered(*l, *u, *y) {
                1.0
            } else {
                0.0
            }
        } else {
            soft_cover(*l, *u, *y, params.softness).0
        };
        width += (u - l) * k;
        captured += k;
    }
    let piaw_c = if params.hard {
        if captured > 0.0 { width / captured } else { 0.0 }
    } else {
        width / (captured + QD_SOFT_EPS)
    };
    let coverage = captured / n as f64;
    let shortfall = ((1.0 - b.alpha) - coverage).max(0.0);
    Ok(piaw_c + qd_penalty_scale(n, b.alpha, params.lambda) * shortfall * shortfall)
}

/// Per-batch evaluation summary in the column order of the report tables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub picp: f64,
    pub piaw: f64,
    pub interval_score: f64,
    /// Pinball loss of the lower bound at level `alpha / 2`.
    pub pb_low: f64,
    /// Pinball loss of the upper bound at level `1 - alpha / 2`.
    pub pb_high: f64,
    pub n: usize,
}

impl MetricReport {
    pub fn evaluate(b: &IntervalBatch, y: &[f64]) -> Result<Self> {
        Ok(Self {
            picp: picp(b, y)?,
            piaw: piaw(b)?,
            interval_score: interval_score(b, y)?,
            pb_low: mean_pinball(&b.lower, y, b.alpha / 2.0)?,
            pb_high: mean_pinball(&b.upper, y, 1.0 - b.alpha / 2.0)?,
            n: b.len(),
        })
    }

    /// Report for an empty regime: zero metrics, `n = 0`.
    pub fn empty() -> Self {
        Self {
            picp: 0.0,
            piaw: 0.0,
            interval_score: 0.0,
            pb_low: 0.0,
            pb_high: 0.0,
            n: 0,
        }
    }
}
