//! Command-line front end: `describe`, `fit`, `backtest` and `synth`.
//!
//! Exit codes: 0 success, 1 runtime or model failure, 2 usage or
//! configuration error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::arma_aparch::{self, ArmaAparchParams, FitOptions};
use crate::backtest::{self, ArmaAparchSpec, BacktestConfig, CopulaSpec, ForecasterSpec, MlpSpec, WindowMode};
use crate::copula::{self, CopulaParams};
use crate::data::{self, ColumnSpec, PriceSeries};
use crate::dists::{student_t_cdf, student_t_quantile, KernelMarginal};
use crate::error::{Error, Result};
use crate::neural::{self, LossKind};
use crate::record::KvRecord;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "intervalcast", version, about = "Interval forecasts and rolling backtests for price series")]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Descriptive statistics of differenced prices per period.
    Describe(DescribeArgs),
    /// Fit one model on the whole series and write its parameters.
    Fit(FitArgs),
    /// Rolling one-step backtest driven by a run config.
    Backtest(BacktestArgs),
    /// Generate a synthetic price file with ground truth sidecars.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct ColumnArgs {
    #[arg(long)]
    pub date_column: Option<String>,
    #[arg(long)]
    pub price_column: Option<String>,
}

#[derive(Debug, Args)]
pub struct DescribeArgs {
    pub data: PathBuf,
    /// Start date of a new period; repeatable.
    #[arg(long = "split")]
    pub splits: Vec<NaiveDate>,
    /// Run config supplying columns and splits.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub difference_order: usize,
    #[command(flatten)]
    pub columns: ColumnArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    #[value(name = "arma_aparch")]
    ArmaAparch,
    #[value(name = "copula")]
    Copula,
    #[value(name = "mlp_pb")]
    MlpPb,
    #[value(name = "mlp_qd")]
    MlpQd,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long, value_enum)]
    pub model: ModelKind,
    #[arg(long)]
    pub data: PathBuf,
    /// Parameter file (record or network binary).
    #[arg(long)]
    pub out: PathBuf,
    /// Run config whose forecaster section of the same kind supplies settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub difference_order: Option<usize>,
    /// Fixed ARMA order.
    #[arg(long, requires = "q")]
    pub p: Option<usize>,
    #[arg(long, requires = "p")]
    pub q: Option<usize>,
    /// Copula Markov order.
    #[arg(long)]
    pub markov_order: Option<usize>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub columns: ColumnArgs,
}

#[derive(Debug, Args)]
pub struct BacktestArgs {
    pub config: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub refit_every: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub window: Option<WindowArg>,
    #[arg(long)]
    pub moving_length: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WindowArg {
    Expanding,
    Moving,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Generator spec, e.g. "aparch a0=0.05 a1=0.7 a2=0.2 n=3000 break=0.5 factor=25".
    pub spec: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Column names of the input file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnsConfig {
    #[serde(default = "default_date_column")]
    pub date: String,
    #[serde(default = "default_price_column")]
    pub price: String,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
}

fn default_date_column() -> String {
    "date".into()
}
fn default_price_column() -> String {
    "price".into()
}
fn default_delimiter() -> char {
    ','
}

impl Default for ColumnsConfig {
    fn default() -> Self {
        Self {
            date: default_date_column(),
            price: default_price_column(),
            delimiter: default_delimiter(),
        }
    }
}

impl ColumnsConfig {
    fn spec(&self) -> Result<ColumnSpec> {
        if !self.delimiter.is_ascii() {
            return Err(Error::InvalidParameter(format!("delimiter `{}` is not ASCII", self.delimiter)));
        }
        Ok(ColumnSpec {
            date_column: self.date.clone(),
            price_column: self.price.clone(),
            delimiter: self.delimiter as u8,
        })
    }

    fn overridden(&self, args: &ColumnArgs) -> Self {
        let mut c = self.clone();
        if let Some(d) = &args.date_column {
            c.date = d.clone();
        }
        if let Some(p) = &args.price_column {
            c.price = p.clone();
        }
        c
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DescribeConfig {
    #[serde(default)]
    pub splits: Vec<NaiveDate>,
}

/// One document driving a whole run. Relative paths resolve against the
/// directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: PathBuf,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    /// Added to every forecaster seed.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub columns: ColumnsConfig,
    #[serde(default)]
    pub backtest: BacktestConfig,
    #[serde(default, deserialize_with = "forecaster_tables")]
    pub forecasters: Vec<ForecasterSpec>,
    #[serde(default)]
    pub describe: DescribeConfig,
}

/// Forecaster sections, deserialized per kind so errors carry the full field path.
fn forecaster_tables<'de, D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Vec<ForecasterSpec>, D::Error> {
    use serde::de::Error as _;
    let tables = Vec::<toml::Table>::deserialize(de)?;
    tables
        .into_iter()
        .enumerate()
        .map(|(i, mut t)| {
            let kind = match t.remove("kind") {
                Some(toml::Value::String(k)) => k,
                Some(_) => return Err(D::Error::custom(format!("forecasters[{i}].kind must be a string"))),
                None => return Err(D::Error::custom(format!("forecasters[{i}] is missing `kind`"))),
            };
            let rest = toml::Value::Table(t);
            let at = |e: serde_path_to_error::Error<toml::de::Error>| {
                let path = e.path().to_string();
                let field = if path == "." { String::new() } else { format!(".{path}") };
                D::Error::custom(format!("at `forecasters[{i}]{field}`: {}", e.inner().message()))
            };
            Ok(match kind.as_str() {
                "arma_aparch" => ForecasterSpec::ArmaAparch(serde_path_to_error::deserialize(rest).map_err(at)?),
                "copula" => ForecasterSpec::Copula(serde_path_to_error::deserialize(rest).map_err(at)?),
                "mlp_pb" => ForecasterSpec::MlpPb(serde_path_to_error::deserialize(rest).map_err(at)?),
                "mlp_qd" => ForecasterSpec::MlpQd(serde_path_to_error::deserialize(rest).map_err(at)?),
                other => {
                    return Err(D::Error::custom(format!(
                        "forecasters[{i}].kind `{other}` is not one of {}",
                        ForecasterSpec::KINDS.join(", ")
                    )))
                }
            })
        })
        .collect()
}

fn default_output() -> PathBuf {
    PathBuf::from("report")
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let config_err = |message: String| Error::Config {
            path: path.display().to_string(),
            message,
        };
        let de = toml::Deserializer::parse(text).map_err(|e| config_err(e.to_string()))?;
        let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let at = e.path().to_string();
            config_err(format!("at `{at}`: {}", e.inner().message()))
        })?;
        if let Some(dir) = path.parent() {
            cfg.data = dir.join(&cfg.data);
            cfg.output = dir.join(&cfg.output);
        }
        cfg.validate().map_err(|e| config_err(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.columns.spec()?;
        self.backtest.validate()?;
        for (i, f) in self.forecasters.iter().enumerate() {
            f.validate().map_err(|e| Error::InvalidParameter(format!("forecasters[{i}]: {e}")))?;
        }
        Ok(())
    }
}

/// Error paired with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub error: Error,
}

impl From<Error> for CliError {
    fn from(error: Error) -> Self {
        Self { code: EXIT_FAILURE, error }
    }
}

trait UsageExt<T> {
    fn usage(self) -> std::result::Result<T, CliError>;
}

impl<T> UsageExt<T> for Result<T> {
    fn usage(self) -> std::result::Result<T, CliError> {
        self.map_err(|error| CliError { code: EXIT_USAGE, error })
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `args` (including the program name), runs the command, writes
/// output to `out` and returns the exit code.
pub fn run_with<I, T>(args: I, out: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    let outcome = match &cli.command {
        Command::Describe(a) => cmd_describe(a).map(|s| s.to_string()),
        Command::Fit(a) => cmd_fit(a),
        Command::Backtest(a) => cmd_backtest(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match outcome {
        Ok(text) => {
            let _ = out.write_all(text.as_bytes());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {}", e.error);
            e.code
        }
    }
}

/// Entry point used by the binary.
pub fn main() -> i32 {
    run_with(std::env::args_os(), &mut std::io::stdout())
}

fn load_data(path: &Path, columns: &ColumnsConfig) -> CliResult<PriceSeries> {
    data::load_series(path, &columns.spec().usage()?).usage()
}

/// Rows of the statistics table.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodStats {
    pub start: NaiveDate,
    pub end: NaiveDate,
    pub stats: data::DescriptiveStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescribeTable(pub Vec<PeriodStats>);

impl std::fmt::Display for DescribeTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let header = ["Period", "Standard Deviation", "Skewness", "Kurtosis"];
        let rows: Vec<[String; 4]> = self
            .0
            .iter()
            .map(|p| {
                [
                    format!("{} to {}", p.start, p.end),
                    format!("{:.4}", p.stats.std),
                    format!("{:.4}", p.stats.skewness),
                    format!("{:.4}", p.stats.kurtosis),
                ]
            })
            .collect();
        let w: Vec<usize> = (0..4)
            .map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
            .collect();
        writeln!(f, "{:<a$} | {:>b$} | {:>c$} | {:>d$}", header[0], header[1], header[2], header[3], a = w[0], b = w[1], c = w[2], d = w[3])?;
        writeln!(f, "{}", w.iter().map(|n| "-".repeat(*n)).collect::<Vec<_>>().join("-|-"))?;
        for r in &rows {
            writeln!(f, "{:<a$} | {:>b$} | {:>c$} | {:>d$}", r[0], r[1], r[2], r[3], a = w[0], b = w[1], c = w[2], d = w[3])?;
        }
        Ok(())
    }
}

/// Statistics of `d`-th differences split at the given period start dates.
/// A difference belongs to the period of its later observation.
pub fn describe_periods(series: &PriceSeries, splits: &[NaiveDate], d: usize) -> Result<DescribeTable> {
    let diffs = data::difference(series.values(), d)?.diffs;
    let dates = &series.dates()[d..];
    let mut splits = splits.to_vec();
    splits.sort();
    splits.dedup();
    let mut rows = Vec::new();
    let mut lo = 0;
    for bound in splits.iter().map(Some).chain([None]) {
        let hi = bound.map_or(dates.len(), |b| dates.partition_point(|x| x < b));
        if hi > lo {
            let stats = data::describe(&diffs[lo..hi])
                .map_err(|e| Error::InvalidInput(format!("period starting {}: {e}", dates[lo])))?;
            rows.push(PeriodStats { start: dates[lo], end: dates[hi - 1], stats });
        }
        lo = hi;
    }
    Ok(DescribeTable(rows))
}

fn cmd_describe(a: &DescribeArgs) -> CliResult<DescribeTable> {
    let (mut columns, mut splits) = (ColumnsConfig::default(), a.splits.clone());
    if let Some(path) = &a.config {
        let cfg = RunConfig::load(path).usage()?;
        columns = cfg.columns;
        if splits.is_empty() {
            splits = cfg.describe.splits;
        }
    }
    let series = load_data(&a.data, &columns.overridden(&a.columns))?;
    Ok(describe_periods(&series, &splits, a.difference_order).usage()?)
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn fit_spec(a: &FitArgs, cfg: Option<&RunConfig>) -> ForecasterSpec {
    let from_cfg = cfg.and_then(|c| {
        c.forecasters.iter().find(|f| {
            matches!(
                (f, a.model),
                (ForecasterSpec::ArmaAparch(_), ModelKind::ArmaAparch)
                    | (ForecasterSpec::Copula(_), ModelKind::Copula)
                    | (ForecasterSpec::MlpPb(_), ModelKind::MlpPb)
                    | (ForecasterSpec::MlpQd(_), ModelKind::MlpQd)
            )
        })
    });
    let spec = from_cfg.cloned().unwrap_or_else(|| match a.model {
        ModelKind::ArmaAparch => ForecasterSpec::ArmaAparch(ArmaAparchSpec::default()),
        ModelKind::Copula => ForecasterSpec::Copula(CopulaSpec::default()),
        ModelKind::MlpPb => ForecasterSpec::MlpPb(MlpSpec::default()),
        ModelKind::MlpQd => ForecasterSpec::MlpQd(MlpSpec::default()),
    });
    let mut spec = spec.with_base_seed(cfg.map_or(0, |c| c.seed));
    match &mut spec {
        ForecasterSpec::ArmaAparch(s) => {
            if let Some(pq) = a.p.zip(a.q) {
                s.order = Some([pq.0, pq.1]);
            }
            s.seed = a.seed.unwrap_or(s.seed);
        }
        ForecasterSpec::Copula(s) => {
            s.p = a.markov_order.unwrap_or(s.p);
            s.seed = a.seed.unwrap_or(s.seed);
        }
        ForecasterSpec::MlpPb(s) | ForecasterSpec::MlpQd(s) => {
            let search = &mut s.search;
            search.trials = a.trials.unwrap_or(search.trials);
            search.max_epochs = a.max_epochs.unwrap_or(search.max_epochs);
            search.seed = a.seed.unwrap_or(search.seed);
        }
    }
    spec
}

fn cmd_fit(a: &FitArgs) -> CliResult<String> {
    let cfg = a.config.as_ref().map(RunConfig::load).transpose().usage()?;
    let columns = cfg.as_ref().map(|c| c.columns.clone()).unwrap_or_default();
    let d = a
        .difference_order
        .or(cfg.as_ref().map(|c| c.backtest.difference_order))
        .unwrap_or(1);
    let alpha = a.alpha.or(cfg.as_ref().map(|c| c.backtest.alpha)).unwrap_or(0.1);
    let spec = fit_spec(a, cfg.as_ref());
    spec.validate().usage()?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!("alpha {alpha} outside (0, 1)"))).usage();
    }
    let series = load_data(&a.data, &columns.overridden(&a.columns))?;
    let xs = data::difference(series.values(), d).usage()?.diffs;
    let mut out = String::new();
    match spec {
        ForecasterSpec::ArmaAparch(s) => {
            let opts = FitOptions { starts: s.starts, seed: s.seed, ..FitOptions::default() };
            let fit = match s.order {
                Some([p, q]) => arma_aparch::fit(&xs, p, q, &opts)?,
                None => arma_aparch::select_order(&xs, s.p_max, s.q_max, &opts)?.fit,
            };
            let mut rec = fit.params.to_record();
            rec.push("difference_order", d).push("n", xs.len()).push("burn_in", fit.burn_in).push("loglik", fit.loglik).push("aic", fit.aic());
            rec.write(&a.out)?;
            let _ = writeln!(out, "model = arma_aparch\np = {}\nq = {}\nloglik = {}\naic = {}", fit.params.p(), fit.params.q(), fit.loglik, fit.aic());
        }
        ForecasterSpec::Copula(CopulaSpec { p, .. }) => {
            let fit = copula::fit(&xs, p)?;
            let mut rec = fit.params.to_record();
            rec.push("difference_order", d).push("n", xs.len()).push("loglik", fit.loglik).push("nu_at_bound", fit.nu_at_bound);
            rec.write(&a.out)?;
            let _ = writeln!(out, "model = t_copula\np = {p}\nnu = {}\nloglik = {}", fit.params.nu, fit.loglik);
            if fit.nu_at_bound {
                let _ = writeln!(out, "warning = degrees of freedom at the upper search bound");
            }
        }
        ForecasterSpec::MlpPb(MlpSpec { search }) | ForecasterSpec::MlpQd(MlpSpec { search }) => {
            let kind = if a.model == ModelKind::MlpPb { LossKind::Pinball } else { LossKind::Qd };
            let result = neural::random_search(&search, kind, alpha, &xs)?;
            result.best.model.save(&a.out)?;
            let best = &result.trials[result.best_index];
            let meta = MlpSidecar {
                difference_order: d,
                alpha,
                scaler_lo: result.best.scaler.lo,
                scaler_hi: result.best.scaler.hi,
                val_loss: best.val_loss.unwrap_or(f64::NAN),
                selection_score: best.selection_score.unwrap_or(f64::NAN),
                best_trial: result.best_index,
                config: result.best.config.clone(),
            };
            let meta_text = toml::to_string(&meta).map_err(|e| Error::Format(e.to_string()))?;
            write_text(&sidecar(&a.out, ".meta.toml"), &meta_text)?;
            write_text(&sidecar(&a.out, ".trials.csv"), &trial_log(&result.trials))?;
            let _ = writeln!(
                out,
                "model = {}\ntrials = {}\nbest_trial = {}\nval_loss = {}\nselection_score = {}",
                if kind == LossKind::Pinball { "mlp_pb" } else { "mlp_qd" },
                result.trials.len(),
                result.best_index,
                meta.val_loss,
                meta.selection_score
            );
        }
    }
    Ok(out)
}

/// Settings needed to reuse a saved network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSidecar {
    pub difference_order: usize,
    pub alpha: f64,
    pub scaler_lo: f64,
    pub scaler_hi: f64,
    pub val_loss: f64,
    pub selection_score: f64,
    pub best_trial: usize,
    pub config: neural::TrainConfig,
}

fn trial_log(trials: &[neural::TrialRecord]) -> String {
    let mut s = String::from("index,val_loss,selection_score,best_epoch,learning_rate,l2,neurons,layers,lags,batch_size,tau_low,tau_high,lambda,softness,error\n");
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
    for t in trials {
        let c = &t.config;
        let _ = writeln!(
            s,
            "{},{},{},{},{:e},{:e},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{}",
            t.index,
            opt(t.val_loss),
            opt(t.selection_score),
            t.best_epoch.map_or(String::new(), |e| e.to_string()),
            c.learning_rate,
            c.l2,
            c.neurons,
            c.layers,
            c.lags,
            c.batch_size,
            c.tau_low,
            c.tau_high,
            c.lambda,
            c.softness,
            t.error.as_deref().unwrap_or("").replace([',', '\n'], ";")
        );
    }
    s
}

fn cmd_backtest(a: &BacktestArgs) -> CliResult<String> {
    let mut cfg = RunConfig::load(&a.config).usage()?;
    let mut header = vec![("config".to_string(), a.config.display().to_string())];
    let mut overrides = Vec::new();
    if let Some(d) = &a.data {
        cfg.data = d.clone();
        overrides.push(("data", d.display().to_string()));
    }
    if let Some(o) = &a.output {
        cfg.output = o.clone();
        overrides.push(("output", o.display().to_string()));
    }
    if let Some(r) = a.refit_every {
        cfg.backtest.refit_every = r;
        overrides.push(("refit_every", r.to_string()));
    }
    if let Some(x) = a.alpha {
        cfg.backtest.alpha = x;
        overrides.push(("alpha", x.to_string()));
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
        overrides.push(("seed", s.to_string()));
    }
    if let Some(w) = a.window {
        cfg.backtest.window = match w {
            WindowArg::Expanding => WindowMode::Expanding,
            WindowArg::Moving => WindowMode::Moving,
        };
        overrides.push(("window", format!("{w:?}").to_lowercase()));
    }
    if let Some(l) = a.moving_length {
        cfg.backtest.moving_length = Some(l);
        overrides.push(("moving_length", l.to_string()));
    }
    cfg.validate().usage()?;
    if cfg.forecasters.is_empty() {
        return Err(Error::Config { path: a.config.display().to_string(), message: "no [[forecasters]] configured".into() }).usage();
    }
    let series = load_data(&cfg.data, &cfg.columns)?;
    let bt = &cfg.backtest;
    header.extend([
        ("data".to_string(), cfg.data.display().to_string()),
        ("seed".into(), cfg.seed.to_string()),
        ("alpha".into(), bt.alpha.to_string()),
        ("refit_every".into(), bt.refit_every.to_string()),
        ("window".into(), format!("{:?}", bt.window).to_lowercase()),
        ("difference_order".into(), bt.difference_order.to_string()),
    ]);
    if let Some(l) = bt.moving_length {
        header.push(("moving_length".into(), l.to_string()));
    }
    for (k, v) in overrides {
        header.push((format!("override.{k}"), v));
    }
    let mut forecasters = cfg
        .forecasters
        .iter()
        .map(|f| f.clone().with_base_seed(cfg.seed).build())
        .collect::<Result<Vec<_>>>()
        .usage()?;
    // Range and history checks surface as configuration errors.
    backtest::target_positions(&series, bt).usage()?;
    let mut report = backtest::run(&series, &mut forecasters, bt)?;
    report.header = header;
    let files = backtest::emit(&report, &cfg.output)?;
    let mut out = backtest::render_tables(&report);
    let _ = writeln!(out, "\nwrote {}, {}, {} and {} plot files", files.forecasts.display(), files.metrics.display(), files.report.display(), files.plots.len());
    let empty: Vec<&String> = report.forecasters.iter().filter(|f| report.rows_for(f).next().is_none()).collect();
    if !empty.is_empty() {
        return Err(CliError {
            code: EXIT_FAILURE,
            error: Error::InvalidInput(format!("no forecasts produced by {}", empty.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", "))),
        });
    }
    Ok(out)
}

/// Parsed generator spec for `synth`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub generator: Generator,
    pub n: usize,
    /// Fraction of the sample after which the variance is multiplied by `factor`.
    pub break_at: Option<f64>,
    pub factor: f64,
    pub start_price: f64,
    pub start_date: NaiveDate,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Generator {
    Aparch(ArmaAparchParams),
    /// t copula chain with a kernel marginal built from normal draws of scale `scale`.
    Copula { nu: f64, rho: Vec<f64>, scale: f64 },
}

fn parse_list(s: &str) -> std::result::Result<Vec<f64>, String> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|v| v.trim().parse::<f64>().map_err(|_| format!("bad number `{v}`"))).collect()
}

impl SynthSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let bad = |m: String| Error::InvalidParameter(format!("synth spec: {m}"));
        let mut tokens = text.split_whitespace();
        let kind = tokens.next().ok_or_else(|| bad("empty spec".into()))?;
        let mut kv = std::collections::BTreeMap::new();
        for tok in tokens {
            let (k, v) = tok.split_once('=').ok_or_else(|| bad(format!("expected key=value, got `{tok}`")))?;
            if kv.insert(k.to_string(), v.to_string()).is_some() {
                return Err(bad(format!("`{k}` given twice")));
            }
        }
        let mut take = |k: &str, default: Option<f64>| -> Result<f64> {
            match kv.remove(k) {
                Some(v) => v.parse().map_err(|_| bad(format!("`{k}` has bad value `{v}`"))),
                None => default.ok_or_else(|| bad(format!("missing `{k}`"))),
            }
        };
        let n = take("n", None)?;
        let break_raw = take("break", Some(f64::NAN))?;
        let factor = take("factor", Some(1.0))?;
        let start_price = take("start", Some(20.0))?;
        let generator = match kind {
            "aparch" => {
                let (mu, a0, a1, a2) = (take("mu", Some(0.0))?, take("a0", None)?, take("a1", None)?, take("a2", None)?);
                let (nu, xi) = (take("nu", Some(6.0))?, take("xi", Some(1.0))?);
                let phi = parse_list(&kv.remove("phi").unwrap_or_default()).map_err(bad)?;
                let theta = parse_list(&kv.remove("theta").unwrap_or_default()).map_err(bad)?;
                let params = ArmaAparchParams { mu, phi, theta, a0, a1, a2, nu, xi };
                params.validate().map_err(|e| bad(e.to_string()))?;
                Generator::Aparch(params)
            }
            "copula" => {
                let nu = take("nu", None)?;
                let scale = take("scale", Some(1.0))?;
                let rho = parse_list(&kv.remove("rho").ok_or_else(|| bad("missing `rho`".into()))?).map_err(bad)?;
                if !(scale > 0.0) || rho.is_empty() || rho.len() > 5 {
                    return Err(bad("copula needs scale > 0 and 1 to 5 rho values".into()));
                }
                Generator::Copula { nu, rho, scale }
            }
            other => return Err(bad(format!("unknown generator `{other}` (expected aparch or copula)"))),
        };
        let start_date = match kv.remove("date") {
            Some(d) => NaiveDate::parse_from_str(&d, "%Y-%m-%d").map_err(|_| bad(format!("bad date `{d}`")))?,
            None => NaiveDate::from_ymd_opt(2010, 9, 8).expect("valid date"),
        };
        if let Some(k) = kv.keys().next() {
            return Err(bad(format!("unknown key `{k}`")));
        }
        if n.fract() != 0.0 || n < 10.0 {
            return Err(bad(format!("n must be an integer of at least 10, got {n}")));
        }
        let break_at = (!break_raw.is_nan()).then_some(break_raw);
        if break_at.is_some_and(|b| !(b > 0.0 && b < 1.0)) {
            return Err(bad("break must lie in (0, 1)".into()));
        }
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(bad("factor must be positive".into()));
        }
        Ok(Self { generator, n: n as usize, break_at, factor, start_price, start_date })
    }

    /// Index of the first difference drawn at the inflated variance.
    pub fn break_index(&self) -> Option<usize> {
        self.break_at.map(|b| (b * self.n as f64).round() as usize)
    }
}

/// Consecutive weekdays starting at `start` (moved forward if it is a weekend).
pub fn weekdays(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
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

/// Synthetic series plus what generated it.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub series: PriceSeries,
    /// Differences `price[t] - price[t-1]`, `t >= 1`.
    pub diffs: Vec<f64>,
    /// True 90% one-step price interval for rows `1..n` where known.
    pub true_intervals: Option<Vec<(f64, f64)>>,
    pub truth: KvRecord,
}

pub const SYNTH_ALPHA: f64 = 0.1;

pub fn synthesize(spec: &SynthSpec, seed: u64) -> Result<SynthOutput> {
    let m = spec.n - 1;
    let brk = spec.break_index().unwrap_or(m);
    let scale_at = |t: usize| if t >= brk { spec.factor.sqrt() } else { 1.0 };
    let mut truth = KvRecord::new();
    truth.push("seed", seed).push("n", spec.n).push("start_price", spec.start_price).push("start_date", spec.start_date);
    let (raw, bands): (Vec<f64>, Option<Vec<(f64, f64)>>) = match &spec.generator {
        Generator::Aparch(params) => {
            let path = arma_aparch::simulate_path(params, m, seed)?;
            let innov = params.innovation()?;
            let (ql, qh) = (innov.quantile(SYNTH_ALPHA / 2.0)?, innov.quantile(1.0 - SYNTH_ALPHA / 2.0)?);
            let bands = (0..m)
                .map(|t| {
                    let (mu, s) = (path.means[t], path.sigmas[t]);
                    (scale_at(t) * (mu + s * ql), scale_at(t) * (mu + s * qh))
                })
                .collect();
            truth.push("generator", "aparch");
            for (k, v) in params.to_record().entries() {
                if k != "model" {
                    truth.push(k.clone(), v);
                }
            }
            (path.values, Some(bands))
        }
        Generator::Copula { nu, rho, scale } => {
            use rand::SeedableRng;
            use rand_distr::{Distribution, Normal};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x00c0_9a1a);
            let normal = Normal::new(0.0, *scale).map_err(|e| Error::InvalidParameter(e.to_string()))?;
            let sample: Vec<f64> = (0..2000).map(|_| normal.sample(&mut rng)).collect();
            let marginal = KernelMarginal::fit(&sample)?;
            let params = CopulaParams::new(*nu, rho.clone(), marginal)?;
            let xs = copula::simulate_chain(&params, m, seed)?;
            let p = params.p();
            let pits = params.marginal.pit(&xs);
            let mut bands = Vec::with_capacity(m);
            for t in 0..m {
                if t < p {
                    bands.push((f64::NAN, f64::NAN));
                    continue;
                }
                let lags: Vec<f64> = (1..=p).map(|k| pits[t - k]).collect();
                let c = params.conditional(&lags)?;
                let endpoint = |q: f64| -> Result<f64> {
                    let z = c.location + c.scale * student_t_quantile(q, c.dof)?;
                    params.marginal.quantile(student_t_cdf(z, params.nu))
                };
                bands.push((scale_at(t) * endpoint(SYNTH_ALPHA / 2.0)?, scale_at(t) * endpoint(1.0 - SYNTH_ALPHA / 2.0)?));
            }
            truth.push("generator", "copula").push("nu", nu).push("scale", scale).push("p", p).push("bandwidth", params.marginal.bandwidth());
            for (k, r) in rho.iter().enumerate() {
                truth.push(format!("rho{}", k + 1), r);
            }
            (xs, Some(bands))
        }
    };
    let diffs: Vec<f64> = raw.iter().enumerate().map(|(t, x)| x * scale_at(t)).collect();
    if let Some(b) = spec.break_index() {
        truth.push("break_index", b + 1).push("factor", spec.factor);
    }
    let dates = weekdays(spec.start_date, spec.n);
    if let Some(b) = spec.break_index() {
        truth.push("break_date", dates[(b + 1).min(spec.n - 1)]);
    }
    let mut values = Vec::with_capacity(spec.n);
    let mut level = spec.start_price;
    values.push(level);
    for d in &diffs {
        level += d;
        values.push(level);
    }
    let true_intervals = bands.map(|b| {
        b.iter()
            .enumerate()
            .map(|(t, (lo, hi))| (values[t] + lo, values[t] + hi))
            .collect()
    });
    Ok(SynthOutput {
        series: PriceSeries::new(dates, values)?,
        diffs,
        true_intervals,
        truth,
    })
}

fn cmd_synth(a: &SynthArgs) -> CliResult<String> {
    let spec = SynthSpec::parse(&a.spec).usage()?;
    let mut out = synthesize(&spec, a.seed)?;
    out.truth.push("spec", a.spec.trim());
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    data::write_series(&a.out, &out.series)?;
    out.truth.write(sidecar(&a.out, ".truth"))?;
    if let Some(bands) = &out.true_intervals {
        let mut s = String::from("date,lower,upper\n");
        for (t, (lo, hi)) in bands.iter().enumerate() {
            if lo.is_finite() {
                let _ = writeln!(s, "{},{lo:.6},{hi:.6}", out.series.dates()[t + 1]);
            }
        }
        write_text(&sidecar(&a.out, ".quantiles.csv"), &s)?;
    }
    Ok(format!("wrote {} rows to {}\n", out.series.len(), a.out.display()))
}
