//! Simulate an ARMA-APARCH path, select the order by AIC, and forecast.

use intervalcast::arma_aparch::{self, ArmaAparchParams, FitOptions};

fn main() -> intervalcast::Result<()> {
    let truth = ArmaAparchParams { mu: 0.0, phi: vec![0.3], theta: vec![], a0: 0.05, a1: 0.7, a2: 0.2, nu: 6.0, xi: 1.0 };
    let xs = arma_aparch::simulate(&truth, 3000, 42)?;

    let sel = arma_aparch::select_order(&xs, 1, 1, &FitOptions::default())?;
    for c in &sel.candidates {
        println!("ARMA({},{})  AIC {:.2}", c.p, c.q, c.aic);
    }
    let fit = &sel.fit;
    let se = arma_aparch::standard_errors(&fit.params, &xs)?;
    println!("\nselected ({}, {}), loglik {:.3}", sel.p, sel.q, fit.loglik);
    for ((name, v), s) in fit.params.names().iter().zip(fit.params.to_vec()).zip(se) {
        println!("{name:>6} {v:>9.4}  (se {s:.4})");
    }

    let f = arma_aparch::forecast_interval(&fit.params, &xs, 0.1)?;
    println!("\nnext 90% interval [{:.4}, {:.4}], sigma {:.4}", f.lower, f.upper, f.sigma_next);
    Ok(())
}
