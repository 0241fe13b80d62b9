//! Small derivative-free and quasi-Newton minimizers used by the maximum
//! likelihood fits. Objectives may return `f64::INFINITY` (or NaN) to reject
//! a point; both are treated as +inf.

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
    pub converged: bool,
}

#[inline]
fn sanitize(v: f64) -> f64 {
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NelderMeadOptions {
    pub max_evals: usize,
    /// Stop when the spread of simplex values drops below this.
    pub ftol: f64,
    pub initial_step: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            max_evals: 4000,
            ftol: 1e-10,
            initial_step: 0.25,
        }
    }
}

pub fn nelder_mead(f: &mut dyn FnMut(&[f64]) -> f64, x0: &[f64], opts: NelderMeadOptions) -> Minimum {
    let n = x0.len();
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        sanitize(f(x))
    };
    if n == 0 {
        let v = eval(x0, &mut evals);
        return Minimum { x: vec![], value: v, evaluations: evals, converged: true };
    }
    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    simplex.push(x0.to_vec());
    for i in 0..n {
        let mut p = x0.to_vec();
        p[i] += if p[i].abs() > 1e-8 { opts.initial_step * p[i].abs().max(1.0) } else { opts.initial_step };
        simplex.push(p);
    }
    let mut values: Vec<f64> = simplex.iter().map(|p| eval(p, &mut evals)).collect();
    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut converged = false;
    while evals < opts.max_evals {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();
        let spread = (values[n] - values[0]).abs();
        if values[0].is_finite() && spread <= opts.ftol * (1.0 + values[0].abs()) {
            converged = true;
            break;
        }
        let mut centroid = vec![0.0; n];
        for p in &simplex[..n] {
            for (c, v) in centroid.iter_mut().zip(p) {
                *c += v / n as f64;
            }
        }
        let towards = |coef: f64, worst: &[f64]| -> Vec<f64> {
            centroid.iter().zip(worst).map(|(c, w)| c + coef * (w - c)).collect()
        };
        let reflected = towards(-alpha, &simplex[n]);
        let fr = eval(&reflected, &mut evals);
        if fr < values[0] {
            let expanded = towards(-gamma, &simplex[n]);
            let fe = eval(&expanded, &mut evals);
            if fe < fr {
                simplex[n] = expanded;
                values[n] = fe;
            } else {
                simplex[n] = reflected;
                values[n] = fr;
            }
        } else if fr < values[n - 1] {
            simplex[n] = reflected;
            values[n] = fr;
        } else {
            let (contracted, fc) = if fr < values[n] {
                let c = towards(-rho, &simplex[n]);
                let fc = eval(&c, &mut evals);
                (c, fc)
            } else {
                let c = towards(rho, &simplex[n]);
                let fc = eval(&c, &mut evals);
                (c, fc)
            };
            if fc < values[n].min(fr) {
                simplex[n] = contracted;
                values[n] = fc;
            } else {
                let best = simplex[0].clone();
                for i in 1..=n {
                    simplex[i] = best.iter().zip(&simplex[i]).map(|(b, p)| b + sigma * (p - b)).collect();
                    values[i] = eval(&simplex[i], &mut evals);
                }
            }
        }
    }
    let best = (0..=n).min_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap_or(0);
    Minimum {
        x: simplex[best].clone(),
        value: values[best],
        evaluations: evals,
        converged,
    }
}

/// Central-difference gradient with a relative step.
pub fn numerical_gradient(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let h = step * x[i].abs().max(1.0);
        xp[i] = x[i] + h;
        let fp = sanitize(f(&xp));
        xp[i] = x[i] - h;
        let fm = sanitize(f(&xp));
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Central-difference Hessian, symmetrized.
pub fn numerical_hessian(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<Vec<f64>> {
    let n = x.len();
    let h: Vec<f64> = x.iter().map(|v| step * v.abs().max(1.0)).collect();
    let mut hess = vec![vec![0.0; n]; n];
    let mut xp = x.to_vec();
    let f0 = f(x);
    for i in 0..n {
        xp[i] = x[i] + h[i];
        let fp = f(&xp);
        xp[i] = x[i] - h[i];
        let fm = f(&xp);
        xp[i] = x[i];
        hess[i][i] = (fp - 2.0 * f0 + fm) / (h[i] * h[i]);
        for j in 0..i {
            let mut q = [0.0; 4];
            for (k, (si, sj)) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)].iter().enumerate() {
                xp[i] = x[i] + si * h[i];
                xp[j] = x[j] + sj * h[j];
                q[k] = f(&xp);
            }
            xp[i] = x[i];
            xp[j] = x[j];
            let v = (q[0] - q[1] - q[2] + q[3]) / (4.0 * h[i] * h[j]);
            hess[i][j] = v;
            hess[j][i] = v;
        }
    }
    hess
}

#[derive(Debug, Clone, Copy)]
pub struct BfgsOptions {
    pub max_iters: usize,
    pub gtol: f64,
    pub grad_step: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            max_iters: 200,
            gtol: 1e-6,
            grad_step: 1e-6,
        }
    }
}

/// BFGS with numerical gradients and a backtracking Armijo line search.
pub fn bfgs(f: &mut dyn FnMut(&[f64]) -> f64, x0: &[f64], opts: BfgsOptions) -> Minimum {
    let n = x0.len();
    let mut evals = 0usize;
    let mut x = x0.to_vec();
    let mut fx = sanitize(f(&x));
    evals += 1;
    if n == 0 || !fx.is_finite() {
        return Minimum { x, value: fx, evaluations: evals, converged: n == 0 };
    }
    let grad = |x: &[f64], evals: &mut usize, f: &mut dyn FnMut(&[f64]) -> f64| {
        *evals += 2 * n;
        numerical_gradient(f, x, opts.grad_step)
    };
    let mut g = grad(&x, &mut evals, f);
    let mut hinv = identity(n);
    let mut converged = false;
    for _ in 0..opts.max_iters {
        let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !gnorm.is_finite() {
            break;
        }
        if gnorm <= opts.gtol * (1.0 + fx.abs()) {
            converged = true;
            break;
        }
        let mut dir: Vec<f64> = (0..n).map(|i| -(0..n).map(|j| hinv[i][j] * g[j]).sum::<f64>()).collect();
        let mut slope: f64 = dir.iter().zip(&g).map(|(d, g)| d * g).sum();
        if !(slope < 0.0) {
            hinv = identity(n);
            dir = g.iter().map(|v| -v).collect();
            slope = -gnorm * gnorm;
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let xn: Vec<f64> = x.iter().zip(&dir).map(|(x, d)| x + t * d).collect();
            let fnew = sanitize(f(&xn));
            evals += 1;
            if fnew <= fx + 1e-4 * t * slope {
                accepted = Some((xn, fnew));
                break;
            }
            t *= 0.5;
        }
        let Some((xn, fnew)) = accepted else {
            converged = true;
            break;
        };
        let gn = grad(&xn, &mut evals, f);
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let improvement = fx - fnew;
        x = xn;
        fx = fnew;
        g = gn;
        if sy > 1e-12 {
            let hy: Vec<f64> = (0..n).map(|i| (0..n).map(|j| hinv[i][j] * y[j]).sum()).collect();
            let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
            for i in 0..n {
                for j in 0..n {
                    hinv[i][j] += ((sy + yhy) * s[i] * s[j]) / (sy * sy) - (hy[i] * s[j] + s[i] * hy[j]) / sy;
                }
            }
        }
        if improvement.abs() <= 1e-14 * (1.0 + fx.abs()) {
            converged = true;
            break;
        }
    }
    Minimum { x, value: fx, evaluations: evals, converged }
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

/// Nelder–Mead followed by a BFGS polish; returns the better of the two.
pub fn simplex_then_bfgs(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x0: &[f64],
    nm: NelderMeadOptions,
    qn: BfgsOptions,
) -> Minimum {
    let coarse = nelder_mead(f, x0, nm);
    let fine = bfgs(f, &coarse.x, qn);
    let evaluations = coarse.evaluations + fine.evaluations;
    if fine.value <= coarse.value {
        Minimum { evaluations, converged: fine.converged || coarse.converged, ..fine }
    } else {
        Minimum { evaluations, ..coarse }
    }
}

/// Brent's bounded scalar minimizer on `[a, b]`.
pub fn brent_bounded(f: &mut dyn FnMut(f64) -> f64, a: f64, b: f64, xtol: f64, max_iters: usize) -> (f64, f64) {
    let golden = 0.381_966_011_250_105_1;
    let (mut a, mut b) = (a, b);
    let mut x = a + golden * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = sanitize(f(x));
    let (mut fw, mut fv) = (fx, fx);
    let (mut d, mut e) = (0.0f64, 0.0f64);
    for _ in 0..max_iters {
        let m = 0.5 * (a + b);
        let tol = xtol * x.abs() + 1e-12;
        if (x - m).abs() <= 2.0 * tol - 0.5 * (b - a) {
            break;
        }
        let mut use_golden = true;
        if e.abs() > tol {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            if p.abs() < (0.5 * q * e).abs() && p > q * (a - x) && p < q * (b - x) {
                e = d;
                d = p / q;
                let u = x + d;
                if u - a < 2.0 * tol || b - u < 2.0 * tol {
                    d = if x < m { tol } else { -tol };
                }
                use_golden = false;
            }
        }
        if use_golden {
            e = if x < m { b - x } else { a - x };
            d = golden * e;
        }
        let u = if d.abs() >= tol { x + d } else if d > 0.0 { x + tol } else { x - tol };
        let fu = sanitize(f(u));
        if fu <= fx {
            if u < x {
                b = x;
            } else {
                a = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    (x, fx)
}

/// Maps unconstrained partial autocorrelations `tanh(u_k)` to the
/// coefficients of a stationary AR polynomial via Durbin–Levinson.
pub fn pacf_to_ar(pacf: &[f64]) -> Vec<f64> {
    let mut phi: Vec<f64> = Vec::with_capacity(pacf.len());
    for (k, &r) in pacf.iter().enumerate() {
        let prev = phi.clone();
        phi.push(r);
        for j in 0..k {
            phi[j] = prev[j] - r * prev[k - 1 - j];
        }
    }
    phi
}

/// Inverse of [`pacf_to_ar`]; `None` if the polynomial is not stationary.
pub fn ar_to_pacf(phi: &[f64]) -> Option<Vec<f64>> {
    let mut cur = phi.to_vec();
    let mut out = vec![0.0; phi.len()];
    for k in (0..phi.len()).rev() {
        let r = cur[k];
        if r.abs() >= 1.0 {
            return None;
        }
        out[k] = r;
        let denom = 1.0 - r * r;
        let prev: Vec<f64> = (0..k).map(|j| (cur[j] + r * cur[k - 1 - j]) / denom).collect();
        cur = prev;
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> f64 {
        (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2)
    }

    #[test]
    fn nelder_mead_rosenbrock() {
        let m = nelder_mead(&mut |x| rosenbrock(x), &[-1.2, 1.0], NelderMeadOptions { max_evals: 5000, ftol: 1e-14, initial_step: 0.5 });
        assert!((m.x[0] - 1.0).abs() < 1e-3 && (m.x[1] - 1.0).abs() < 1e-3, "{:?}", m.x);
    }

    #[test]
    fn bfgs_quadratic() {
        let f = |x: &[f64]| 3.0 * (x[0] - 2.0).powi(2) + (x[1] + 1.0).powi(2) + x[0] * x[1];
        let m = bfgs(&mut |x| f(x), &[0.0, 0.0], BfgsOptions::default());
        // Stationary point of the quadratic.
        let (a, b) = (26.0 / 11.0, -24.0 / 11.0);
        assert!((m.x[0] - a).abs() < 1e-5 && (m.x[1] - b).abs() < 1e-5, "{:?}", m.x);
    }

    #[test]
    fn hessian_of_quadratic() {
        let h = numerical_hessian(&mut |x: &[f64]| 3.0 * x[0] * x[0] + x[0] * x[1] + 0.5 * x[1] * x[1], &[0.3, -0.7], 1e-4);
        assert!((h[0][0] - 6.0).abs() < 1e-5);
        assert!((h[0][1] - 1.0).abs() < 1e-5);
        assert!((h[1][1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn brent_finds_minimum() {
        let (x, _) = brent_bounded(&mut |x| (x - 0.3).powi(2) + 1.0, -2.0, 5.0, 1e-10, 200);
        assert!((x - 0.3).abs() < 1e-7);
    }

    #[test]
    fn pacf_round_trip_is_stationary() {
        let pacf = [0.5, -0.3, 0.8];
        let phi = pacf_to_ar(&pacf);
        let back = ar_to_pacf(&phi).unwrap();
        for (a, b) in back.iter().zip(&pacf) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(pacf_to_ar(&[0.4]), vec![0.4]);
        assert!(ar_to_pacf(&[1.2]).is_none());
    }
}
