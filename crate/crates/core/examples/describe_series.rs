//! Load a price file, difference it, and summarise each period.

use std::path::Path;

use intervalcast::cli::describe_periods;
use intervalcast::data::{difference_series, load_series, ColumnSpec};

fn main() -> intervalcast::Result<()> {
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/synthetic_break.csv");
    let series = load_series(&fixture, &ColumnSpec::default())?;
    let diffs = difference_series(&series, 1)?;
    println!("{} prices from {} to {}, {} first differences", series.len(), series.dates()[0], series.dates()[series.len() - 1], diffs.diffs.len());

    let split = "2016-09-05".parse().expect("valid date");
    print!("{}", describe_periods(&series, &[split], 1)?);
    Ok(())
}
