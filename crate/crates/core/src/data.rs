//! Price series ingestion and the transforms applied before modelling:
//! differencing, min-max scaling, chronological splits, lag matrices and
//! descriptive statistics.

use std::path::Path;

use chrono::NaiveDate;

use crate::error::{Error, Result};

/// Dated observations at price level, strictly increasing in date.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceSeries {
    dates: Vec<NaiveDate>,
    values: Vec<f64>,
}

impl PriceSeries {
    pub fn new(dates: Vec<NaiveDate>, values: Vec<f64>) -> Result<Self> {
        if dates.len() != values.len() {
            return Err(Error::InvalidInput(format!(
                "{} dates but {} values",
                dates.len(),
                values.len()
            )));
        }
        if values.len() < 2 {
            return Err(Error::InvalidInput(
                "a price series needs at least 2 observations".into(),
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite value at position {i}"
            )));
        }
        if let Some(w) = dates.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput(format!(
                "dates not strictly increasing: {} then {}",
                w[0], w[1]
            )));
        }
        Ok(Self { dates, values })
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Index of the first observation dated on or after `date`.
    pub fn position_from(&self, date: NaiveDate) -> usize {
        self.dates.partition_point(|d| *d < date)
    }
}

/// Column layout of an input file.
#[derive(Debug, Clone)]
pub struct ColumnSpec {
    pub date_column: String,
    pub price_column: String,
    pub delimiter: u8,
}

impl Default for ColumnSpec {
    fn default() -> Self {
        Self {
            date_column: "date".into(),
            price_column: "price".into(),
            delimiter: b',',
        }
    }
}

/// Reads a delimited `date,price` file. Rows may appear in any order; the
/// result is sorted by date. Blank rows are skipped, missing values rejected.
pub fn load_series(path: impl AsRef<Path>, columns: &ColumnSpec) -> Result<PriceSeries> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_series(file, path, columns)
}

pub(crate) fn read_series<R: std::io::Read>(
    reader: R,
    path: &Path,
    columns: &ColumnSpec,
) -> Result<PriceSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(columns.delimiter)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let parse_err = |record: usize, line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        record,
        line,
        message,
    };
    let headers = rdr
        .headers()
        .map_err(|e| parse_err(0, 1, format!("unreadable header: {e}")))?
        .clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| parse_err(0, 1, format!("missing column `{name}`")))
    };
    let date_idx = find(&columns.date_column)?;
    let price_idx = find(&columns.price_column)?;

    let mut rows: Vec<(NaiveDate, f64, usize, u64)> = Vec::new();
    let mut record_no = 0usize;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(record_no + 1, line, e.to_string())
        })?;
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        record_no += 1;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let date_s = rec.get(date_idx).unwrap_or("");
        let price_s = rec.get(price_idx).unwrap_or("");
        let date = NaiveDate::parse_from_str(date_s, "%Y-%m-%d")
            .map_err(|e| parse_err(record_no, line, format!("bad date `{date_s}`: {e}")))?;
        if price_s.is_empty() {
            return Err(parse_err(record_no, line, "missing price".into()));
        }
        let price: f64 = price_s
            .parse()
            .map_err(|_| parse_err(record_no, line, format!("bad price `{price_s}`")))?;
        if !price.is_finite() {
            return Err(parse_err(record_no, line, format!("non-finite price `{price_s}`")));
        }
        rows.push((date, price, record_no, line));
    }
    rows.sort_by_key(|r| r.0);
    if let Some(w) = rows.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(parse_err(w[1].2, w[1].3, format!("duplicate date {}", w[1].0)));
    }
    let (dates, values) = rows.into_iter().map(|r| (r.0, r.1)).unzip();
    PriceSeries::new(dates, values)
}

/// Writes a series in the ingestion format.
pub fn write_series(path: impl AsRef<Path>, series: &PriceSeries) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::with_capacity(series.len() * 24);
    out.push_str("date,price\n");
    for (d, v) in series.dates.iter().zip(&series.values) {
        out.push_str(&format!("{d},{v:.6}\n"));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// `order`-th differences of a series together with what is needed to undo them.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffSeries {
    pub base_date: Option<NaiveDate>,
    pub base_value: f64,
    pub diffs: Vec<f64>,
    pub order: usize,
    /// First value of every intermediate level 0..order.
    heads: Vec<f64>,
    /// Last value of every intermediate level 0..order.
    tails: Vec<f64>,
}

impl DiffSeries {
    /// Last observed level of the undifferenced series.
    pub fn last_level(&self) -> f64 {
        self.tails.first().copied().unwrap_or(self.base_value)
    }

    /// Rebuilds the source series from the stored heads and the differences.
    pub fn reconstruct(&self) -> Vec<f64> {
        let mut level = self.diffs.clone();
        for head in self.heads.iter().rev() {
            let mut next = Vec::with_capacity(level.len() + 1);
            let mut acc = *head;
            next.push(acc);
            for d in &level {
                acc += d;
                next.push(acc);
            }
            level = next;
        }
        level
    }
}

pub fn difference(values: &[f64], order: usize) -> Result<DiffSeries> {
    if values.len() <= order {
        return Err(Error::InvalidInput(format!(
            "series of length {} cannot be differenced {order} times",
            values.len()
        )));
    }
    let mut level = values.to_vec();
    let mut heads = Vec::with_capacity(order);
    let mut tails = Vec::with_capacity(order);
    for _ in 0..order {
        heads.push(level[0]);
        tails.push(level[level.len() - 1]);
        level = level.windows(2).map(|w| w[1] - w[0]).collect();
    }
    Ok(DiffSeries {
        base_date: None,
        base_value: values[0],
        diffs: level,
        order,
        heads,
        tails,
    })
}

/// Differences a dated series; `base_date` is the date of the first observation.
pub fn difference_series(series: &PriceSeries, order: usize) -> Result<DiffSeries> {
    let mut ds = difference(series.values(), order)?;
    ds.base_date = series.dates().first().copied();
    Ok(ds)
}

/// Cumulative sums of `future_diffs` anchored at the last observed level.
pub fn integrate(ds: &DiffSeries, future_diffs: &[f64]) -> Result<Vec<f64>> {
    if ds.order != 1 {
        return Err(Error::InvalidInput(format!(
            "integrate expects first differences, got order {}",
            ds.order
        )));
    }
    let mut level = ds.last_level();
    Ok(future_diffs
        .iter()
        .map(|d| {
            level += d;
            level
        })
        .collect())
}

/// Affine map of `[lo, hi]` onto `[0, 1]`; extrapolates outside without clipping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinMaxScaler {
    pub lo: f64,
    pub hi: f64,
}

impl MinMaxScaler {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(Error::InvalidParameter(format!(
                "scaler range [{lo}, {hi}] is degenerate"
            )));
        }
        Ok(Self { lo, hi })
    }

    pub fn identity() -> Self {
        Self { lo: 0.0, hi: 1.0 }
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.lo) / (self.hi - self.lo)
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * (self.hi - self.lo) + self.lo
    }

    pub fn apply_all(&self, xs: &[f64]) -> Vec<f64> {
        xs.iter().map(|&x| self.apply(x)).collect()
    }

    pub fn range(&self) -> f64 {
        self.hi - self.lo
    }
}

pub fn fit_scaler(train: &[f64]) -> Result<MinMaxScaler> {
    let (lo, hi) = train
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    MinMaxScaler::new(lo, hi).map_err(|_| {
        Error::InvalidInput("scaler needs at least two distinct training values".into())
    })
}

/// Chronological split: the first `floor(ratio * n)` entries train, the rest validate.
pub fn split_train_val(xs: &[f64], ratio: f64) -> Result<(&[f64], &[f64])> {
    let n_train = split_point(xs.len(), ratio)?;
    Ok(xs.split_at(n_train))
}

pub(crate) fn split_point(n: usize, ratio: f64) -> Result<usize> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "split ratio {ratio} outside (0, 1)"
        )));
    }
    let n_train = (ratio * n as f64).floor() as usize;
    if n_train == 0 || n_train >= n {
        return Err(Error::InvalidInput(format!(
            "split of {n} observations at ratio {ratio} leaves an empty part"
        )));
    }
    Ok(n_train)
}

/// Autoregressive design: row `t` holds `(x[t-1], ..., x[t-lags])` and target `x[t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LagMatrix {
    pub features: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    pub lags: usize,
}

impl LagMatrix {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Rows `range` as a new matrix.
    pub fn slice(&self, range: std::ops::Range<usize>) -> LagMatrix {
        LagMatrix {
            features: self.features[range.clone()].to_vec(),
            targets: self.targets[range].to_vec(),
            lags: self.lags,
        }
    }
}

pub fn lag_matrix(xs: &[f64], lags: usize) -> Result<LagMatrix> {
    if lags == 0 {
        return Err(Error::InvalidParameter("lag count must be at least 1".into()));
    }
    if xs.len() <= lags {
        return Err(Error::InvalidInput(format!(
            "series of length {} too short for {lags} lags",
            xs.len()
        )));
    }
    let features = (lags..xs.len())
        .map(|t| (1..=lags).map(|k| xs[t - k]).collect())
        .collect();
    Ok(LagMatrix {
        features,
        targets: xs[lags..].to_vec(),
        lags,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DescriptiveStats {
    /// Sample standard deviation (n - 1 denominator).
    pub std: f64,
    pub skewness: f64,
    /// Raw (non-excess) kurtosis; a Gaussian gives 3.
    pub kurtosis: f64,
    pub n: usize,
}

pub fn describe(xs: &[f64]) -> Result<DescriptiveStats> {
    let n = xs.len();
    if n < 4 {
        return Err(Error::InvalidInput(format!(
            "descriptive statistics need at least 4 values, got {n}"
        )));
    }
    let nf = n as f64;
    let mean = xs.iter().sum::<f64>() / nf;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &x in xs {
        let d = x - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    if m2 <= 0.0 {
        return Err(Error::InvalidInput("zero variance".into()));
    }
    let std = (m2 / (nf - 1.0)).sqrt();
    let (m2, m3, m4) = (m2 / nf, m3 / nf, m4 / nf);
    Ok(DescriptiveStats {
        std,
        skewness: m3 / m2.powf(1.5),
        kurtosis: m4 / (m2 * m2),
        n,
    })
}
