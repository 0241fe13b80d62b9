//! Fit a t-copula Markov chain with a kernel marginal and forecast by simulation.

use intervalcast::copula::{self, CopulaParams};
use intervalcast::dists::KernelMarginal;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> intervalcast::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let base: Vec<f64> = (0..2000).map(|_| StandardNormal.sample(&mut rng)).collect();
    let truth = CopulaParams::new(5.0, vec![0.8], KernelMarginal::fit(&base)?)?;
    let xs = copula::simulate_chain(&truth, 3000, 7)?;

    let fit = copula::fit(&xs, 1)?;
    println!("nu {:.3}  rho {:.4}  loglik {:.2}", fit.params.nu, fit.params.rho[0], fit.loglik);
    println!("Kendall tau implied by rho: {:.4}", copula::kendall_tau(fit.params.rho[0]));

    let last = *xs.last().unwrap();
    let (lo, hi) = copula::forecast_interval(&fit.params, &xs, 0.1, copula::DEFAULT_SAMPLES, 11)?;
    println!("last value {last:.4}; next 90% interval [{lo:.4}, {hi:.4}]");

    let c = fit.params.conditional(&fit.params.marginal.pit(&[last]))?;
    println!("conditional t: dof {:.1}, location {:+.4}, scale {:.4}", c.dof, c.location, c.scale);
    Ok(())
}
