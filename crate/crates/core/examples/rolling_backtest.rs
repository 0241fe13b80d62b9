//! Rolling one-step backtest of all four forecasters on the bundled fixture.

use std::path::Path;

use intervalcast::backtest::{self, ArmaAparchSpec, BacktestConfig, CopulaSpec, ForecasterSpec, MlpSpec, Regime};
use intervalcast::data::{load_series, ColumnSpec};
use intervalcast::neural::SearchSpace;

fn main() -> intervalcast::Result<()> {
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/synthetic_break.csv");
    let series = load_series(&fixture, &ColumnSpec::default())?;
    let date = |s: &str| s.parse().expect("valid date");
    let cfg = BacktestConfig {
        regimes: vec![
            Regime { name: "pre-break".into(), start: date("2016-06-01"), end: date("2016-09-02") },
            Regime { name: "post-break".into(), start: date("2022-06-01"), end: date("2022-08-26") },
        ],
        ..BacktestConfig::default()
    };
    let search = SearchSpace { trials: 3, max_epochs: 80, patience: 10, neurons: (4, 16), layers: (1, 2), batch_size: (32, 64), ..SearchSpace::default() };
    let specs = [
        ForecasterSpec::Copula(CopulaSpec { samples: 5000, ..CopulaSpec::default() }),
        ForecasterSpec::ArmaAparch(ArmaAparchSpec { p_max: 1, q_max: 1, ..ArmaAparchSpec::default() }),
        ForecasterSpec::MlpPb(MlpSpec { search: search.clone() }),
        ForecasterSpec::MlpQd(MlpSpec { search }),
    ];
    let mut forecasters = specs.iter().map(ForecasterSpec::build).collect::<intervalcast::Result<Vec<_>>>()?;
    let report = backtest::run(&series, &mut forecasters, &cfg)?;
    print!("{}", backtest::render_tables(&report));

    let out = std::env::temp_dir().join("intervalcast_rolling_backtest");
    let files = backtest::emit(&report, &out)?;
    println!("\nrows in {}, {} plot files under {}", files.forecasts.display(), files.plots.len(), out.join("plots").display());
    Ok(())
}
