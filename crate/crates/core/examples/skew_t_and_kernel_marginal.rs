//! Skewed Student-t innovations and a kernel-smoothed empirical marginal.

use intervalcast::dists::{KernelMarginal, SkewT};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> intervalcast::Result<()> {
    let innov = SkewT::new(5.0, 1.3)?;
    for p in [0.05, 0.5, 0.95] {
        let q = innov.quantile(p)?;
        println!("skew-t q({p:.2}) = {q:+.4}  cdf back = {:.4}", innov.cdf(q));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let sample: Vec<f64> = (0..2000).map(|_| innov.sample(&mut rng)).collect();
    let kernel = KernelMarginal::fit(&sample)?;
    println!("kernel bandwidth {:.4}", kernel.bandwidth());
    for p in [0.05, 0.5, 0.95] {
        println!("kernel q({p:.2}) = {:+.4}", kernel.quantile(p)?);
    }
    let pits = kernel.pit(&sample[..5]);
    println!("first PITs {pits:.3?}");
    Ok(())
}
