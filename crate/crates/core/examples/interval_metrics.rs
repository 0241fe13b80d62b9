//! Scoring a batch of prediction intervals.

use intervalcast::metrics::{self, IntervalBatch, MetricReport, QdParams};

fn main() -> intervalcast::Result<()> {
    let y = [1.2, 0.4, 2.9, 1.0, 1.7];
    let batch = IntervalBatch::new(vec![0.5, 0.0, 1.0, 0.8, 1.5], vec![2.0, 1.0, 2.5, 1.4, 2.1], 0.1)?;

    let report = MetricReport::evaluate(&batch, &y)?;
    println!("PICP            {:.4}", report.picp);
    println!("PIAW            {:.4}", report.piaw);
    println!("interval score  {:.4}", report.interval_score);
    println!("PB low / high   {:.4} / {:.4}", report.pb_low, report.pb_high);

    println!("PIAW captured   {:.4}", metrics::piaw_capt(&batch, &y)?);
    for hard in [true, false] {
        let qd = metrics::qd_loss(&batch, &y, &QdParams { lambda: 1.0, softness: 160.0, hard })?;
        println!("{:<16}{qd:.4}", if hard { "QD hard" } else { "QD soft" });
    }
    Ok(())
}
