//! Generate a price series with a volatility break and check its true intervals.

use intervalcast::cli::{synthesize, SynthSpec};

fn main() -> intervalcast::Result<()> {
    let spec = SynthSpec::parse("aparch a0=0.05 a1=0.7 a2=0.2 phi=0.3 n=2000 break=0.5 factor=25")?;
    let out = synthesize(&spec, 9)?;
    let values = out.series.values();
    println!("{} rows, break at row {:?}", values.len(), spec.break_index().map(|b| b + 1));
    for (k, v) in out.truth.entries() {
        println!("  {k} = {v}");
    }
    if let Some(bands) = &out.true_intervals {
        let hits = bands.iter().enumerate().filter(|(t, (lo, hi))| *lo <= values[t + 1] && values[t + 1] <= *hi).count();
        println!("true 90% intervals cover {:.3} of the rows", hits as f64 / bands.len() as f64);
    }
    Ok(())
}
