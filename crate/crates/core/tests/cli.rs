//! Command-line behaviour through the built binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use intervalcast::arma_aparch::{self, ArmaAparchParams};
use intervalcast::data::{self, ColumnSpec};
use intervalcast::neural::MlpModel;
use intervalcast::record::KvRecord;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_intervalcast")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, spec: &str, seed: u64) -> PathBuf {
    let out = dir.join(format!("s{seed}.csv"));
    let o = bin(&["synth", spec, "--seed", &seed.to_string(), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    out
}

#[test]
fn synth_writes_loadable_file_with_sidecars() {
    let dir = tempfile::tempdir().unwrap();
    let path = synth(dir.path(), "aparch a0=0.05 a1=0.7 a2=0.2 n=3000", 1);
    let series = data::load_series(&path, &ColumnSpec::default()).unwrap();
    assert_eq!(series.len(), 3000);
    let truth = KvRecord::read(format!("{}.truth", path.display())).unwrap();
    assert_eq!(truth.get::<f64>("a1").unwrap(), 0.7);
    let bands = std::fs::read_to_string(format!("{}.quantiles.csv", path.display())).unwrap();
    assert_eq!(bands.lines().count(), 3000);

    let again = dir.path().join("again.csv");
    bin(&["synth", "aparch a0=0.05 a1=0.7 a2=0.2 n=3000", "--seed", "1", "--out", p(&again)]);
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    let other = synth(dir.path(), "aparch a0=0.05 a1=0.7 a2=0.2 n=3000", 2);
    assert_ne!(std::fs::read(&path).unwrap(), std::fs::read(&other).unwrap());
}

#[test]
fn synth_rejects_bad_specs() {
    let dir = tempfile::tempdir().unwrap();
    for spec in ["aparch a0=0.05 a1=0.7 n=100", "nonsense n=100", "aparch a0=0.05 a1=0.7 a2=0.2 n=100 colour=blue", "copula nu=5 n=100"] {
        let o = bin(&["synth", spec, "--out", p(&dir.path().join("x.csv"))]);
        assert_eq!(o.status.code(), Some(2), "{spec}");
    }
}

#[test]
fn describe_layout_and_break_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let path = synth(dir.path(), "aparch a0=0.05 a1=0.3 a2=0.1 nu=8 n=3000 break=0.5 factor=25", 3);
    let truth = KvRecord::read(format!("{}.truth", path.display())).unwrap();
    let split = truth.get_str("break_date").unwrap().to_string();

    let one = bin(&["describe", p(&path)]);
    assert_eq!(one.status.code(), Some(0));
    let text = stdout(&one);
    assert_eq!(text.lines().count(), 3);
    let header: Vec<&str> = text.lines().next().unwrap().split('|').map(str::trim).collect();
    assert_eq!(header, ["Period", "Standard Deviation", "Skewness", "Kurtosis"]);

    let two = bin(&["describe", p(&path), "--split", &split]);
    let text = stdout(&two);
    let rows: Vec<Vec<&str>> = text.lines().skip(2).map(|l| l.split('|').map(str::trim).collect()).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.len() == 4));
    let std_ratio = rows[1][1].parse::<f64>().unwrap() / rows[0][1].parse::<f64>().unwrap();
    assert!((std_ratio / 5.0 - 1.0).abs() < 0.1, "{std_ratio}");
}

#[test]
fn fit_arma_record_reproduces_loglik() {
    let dir = tempfile::tempdir().unwrap();
    let path = synth(dir.path(), "aparch a0=0.05 a1=0.7 a2=0.2 phi=0.3 n=1500", 4);
    let rec_path = dir.path().join("aparch.rec");
    let o = bin(&["fit", "--model", "arma_aparch", "--data", p(&path), "--out", p(&rec_path), "--p", "1", "--q", "0"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("loglik = "));
    let rec = KvRecord::read(&rec_path).unwrap();
    let params = ArmaAparchParams::from_record(&rec).unwrap();
    let series = data::load_series(&path, &ColumnSpec::default()).unwrap();
    let xs = data::difference(series.values(), 1).unwrap().diffs;
    let state = arma_aparch::filter_with_burn_in(&params, &xs, rec.get("burn_in").unwrap()).unwrap();
    assert_eq!(state.loglik, rec.get::<f64>("loglik").unwrap());
}

#[test]
fn fit_copula_and_mlp_write_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let path = synth(dir.path(), "copula nu=5 rho=0.7 n=800", 5);
    let rec = dir.path().join("cop.rec");
    let o = bin(&["fit", "--model", "copula", "--data", p(&path), "--out", p(&rec)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(KvRecord::read(&rec).unwrap().get_str("model"), Some("t_copula"));

    let model = dir.path().join("pb.bin");
    let o = bin(&["fit", "--model", "mlp_pb", "--data", p(&path), "--out", p(&model), "--trials", "1", "--max-epochs", "20"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("val_loss = "));
    let log = std::fs::read_to_string(format!("{}.trials.csv", model.display())).unwrap();
    assert_eq!(log.lines().count(), 2, "{log}");
    let net = MlpModel::load(&model).unwrap();
    let meta = std::fs::read_to_string(format!("{}.meta.toml", model.display())).unwrap();
    assert!(meta.contains("scaler_lo"));
    assert_eq!(net.widths().last(), Some(&2));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    let o = bin(&["fit", "--model", "garch", "--data", "x.csv", "--out", "y"]);
    assert_eq!(o.status.code(), Some(2));
    let o = bin(&["describe", p(&missing)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope.csv"));
    let o = bin(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));

    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "data = \"nope.csv\"\n[[forecasters]]\nkind = \"copula\"\n[[backtest.regimes]]\nname = \"r\"\nstart = \"2020-01-01\"\nend = \"2020-02-01\"\n").unwrap();
    let o = bin(&["backtest", p(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope.csv"), "{}", stderr(&o));

    std::fs::write(&cfg, "data = \"x.csv\"\n[backtest]\nrefit_every = 10\nwindw = \"moving\"\n").unwrap();
    let o = bin(&["backtest", p(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("backtest") && err.contains("windw"), "{err}");

    std::fs::write(&cfg, "data = \"x.csv\"\n[[forecasters]]\nkind = \"mlp_pb\"\nsearch = { trials = \"many\" }\n").unwrap();
    let o = bin(&["backtest", p(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("forecasters[0].search.trials"), "{}", stderr(&o));
}

#[test]
fn backtest_overrides_are_echoed_and_reruns_match() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "aparch a0=0.05 a1=0.7 a2=0.2 phi=0.3 n=400", 6);
    let series = data::load_series(&data, &ColumnSpec::default()).unwrap();
    let (s, e) = (series.dates()[350], series.dates()[399]);
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        format!(
            "data = \"{}\"\noutput = \"out\"\n[backtest]\nmin_history = 200\n[[backtest.regimes]]\nname = \"tail\"\nstart = \"{s}\"\nend = \"{e}\"\n[[forecasters]]\nkind = \"arma_aparch\"\norder = [1, 0]\nstarts = 2\n[[forecasters]]\nkind = \"copula\"\nsamples = 2000\n",
            data.file_name().unwrap().to_str().unwrap()
        ),
    )
    .unwrap();
    let run = |out: &str| {
        let o = bin(&["backtest", p(&cfg), "--refit-every", "25", "--output", out]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        o
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let o = run(p(&a));
    assert!(stdout(&o).contains("# override.refit_every = 25"));
    run(p(&b));
    assert_eq!(std::fs::read(a.join("forecasts.csv")).unwrap(), std::fs::read(b.join("forecasts.csv")).unwrap());
    let report = intervalcast::backtest::parse(&a).unwrap();
    assert!(report.header.contains(&("override.refit_every".to_string(), "25".to_string())));
    assert_eq!(report.refits.iter().filter(|r| r.forecaster == "ARMA-APARCH").count(), 2);
    assert_eq!(report.metric("ARMA-APARCH", "tail").unwrap().n, 50);
}

#[test]
fn backtest_fails_when_a_forecaster_produces_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "aparch a0=0.05 a1=0.7 a2=0.2 n=300", 7);
    let series = data::load_series(&data, &ColumnSpec::default()).unwrap();
    let (s, e) = (series.dates()[250], series.dates()[259]);
    let cfg = dir.path().join("run.toml");
    // Too little history for the requested network lags: every refit and forecast fails.
    std::fs::write(
        &cfg,
        format!(
            "data = \"{}\"\n[backtest]\nmin_history = 30\nwindow = \"moving\"\nmoving_length = 12\n[[backtest.regimes]]\nname = \"r\"\nstart = \"{s}\"\nend = \"{e}\"\n[[forecasters]]\nkind = \"mlp_pb\"\nsearch = {{ trials = 1, max_epochs = 5, lags = [12, 12] }}\n",
            data.file_name().unwrap().to_str().unwrap()
        ),
    )
    .unwrap();
    let o = bin(&["backtest", p(&cfg)]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("no forecasts"));
}
