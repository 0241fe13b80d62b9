//! Two-headed quantile network on lagged values, tuned by random search.

use intervalcast::arma_aparch::{self, ArmaAparchParams};
use intervalcast::neural::{self, LossKind, SearchSpace};

fn main() -> intervalcast::Result<()> {
    let truth = ArmaAparchParams { mu: 0.0, phi: vec![0.3], theta: vec![], a0: 0.05, a1: 0.7, a2: 0.2, nu: 6.0, xi: 1.0 };
    let xs = arma_aparch::simulate(&truth, 2000, 5)?;

    let space = SearchSpace { trials: 6, max_epochs: 150, patience: 15, neurons: (4, 32), layers: (1, 2), ..SearchSpace::default() };
    for kind in [LossKind::Pinball, LossKind::Qd] {
        let out = neural::random_search(&space, kind, 0.1, &xs[..1800])?;
        let c = out.best_config();
        println!("{kind:?}: best trial {} of {}, lags {}, {}x{} neurons, lr {:.1e}", out.best_index, out.trials.len(), c.lags, c.layers, c.neurons, c.learning_rate);
        let held: Vec<(f64, f64)> = (1800..2000).map(|t| out.best.predict(&xs[..t])).collect::<intervalcast::Result<_>>()?;
        println!("  held-out coverage {:.3}", neural::coverage(&held, &xs[1800..]));
    }
    Ok(())
}
