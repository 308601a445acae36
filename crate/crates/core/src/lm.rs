//! Dense Levenberg–Marquardt with Marquardt diagonal scaling.

use nalgebra::{DMatrix, DVector};

/// A least-squares problem `min ½‖r(x)‖²` over a parameter vector updated by
/// [`LeastSquares::retract`].
pub trait LeastSquares {
    fn residuals(&self, x: &DVector<f64>) -> DVector<f64>;

    /// Jacobian of the residuals with respect to the retraction increment.
    /// Defaults to central differences.
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        numeric_jacobian(self, x, 1e-6)
    }

    fn retract(&self, x: &DVector<f64>, delta: &DVector<f64>) -> DVector<f64> {
        x + delta
    }
}

/// Central differences through `retract`, with relative step `h·max(1, |xᵢ|)`.
pub fn numeric_jacobian<P: LeastSquares + ?Sized>(p: &P, x: &DVector<f64>, h: f64) -> DMatrix<f64> {
    let r0 = p.residuals(x);
    let mut j = DMatrix::zeros(r0.len(), x.len());
    for c in 0..x.len() {
        let step = h * x[c].abs().max(1.0);
        let mut d = DVector::zeros(x.len());
        d[c] = step;
        let plus = p.residuals(&p.retract(x, &d));
        d[c] = -step;
        let minus = p.residuals(&p.retract(x, &d));
        j.set_column(c, &((plus - minus) / (2.0 * step)));
    }
    j
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LmConfig {
    pub max_iters: usize,
    /// Stop when the relative cost decrease falls below this.
    pub rel_tol: f64,
    pub initial_lambda: f64,
    /// Damping increases tried before giving up on an iteration.
    pub max_retries: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self { max_iters: 100, rel_tol: 1e-10, initial_lambda: 1e-3, max_retries: 12 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    /// Relative cost change below tolerance, or zero cost.
    Converged,
    MaxIterations,
    /// No damping level reduced the cost.
    DampingExhausted,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmReport {
    pub x: DVector<f64>,
    pub initial_cost: f64,
    pub cost: f64,
    pub iterations: usize,
    pub termination: Termination,
    /// Cost after every accepted step, starting with the initial cost.
    pub history: Vec<f64>,
}

fn cost(r: &DVector<f64>) -> f64 {
    0.5 * r.norm_squared()
}

fn solve_damped(jtj: &DMatrix<f64>, g: &DVector<f64>, lambda: f64) -> Option<DVector<f64>> {
    let mut a = jtj.clone();
    for i in 0..a.nrows() {
        a[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
    }
    match a.clone().cholesky() {
        Some(ch) => Some(ch.solve(&-g)),
        None => a.lu().solve(&-g),
    }
}

/// Monotone LM: a step is accepted only if it lowers the cost, so the cost
/// history never increases.
pub fn levenberg_marquardt<P: LeastSquares + ?Sized>(p: &P, x0: DVector<f64>, cfg: &LmConfig) -> LmReport {
    let mut x = x0;
    let mut r = p.residuals(&x);
    let initial_cost = cost(&r);
    let mut c = initial_cost;
    let mut history = vec![c];
    let mut lambda = cfg.initial_lambda;
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        if c == 0.0 {
            termination = Termination::Converged;
            break;
        }
        iterations += 1;
        let j = p.jacobian(&x);
        let jtj = j.transpose() * &j;
        let g = j.transpose() * &r;
        let mut accepted = None;
        for _ in 0..=cfg.max_retries {
            if let Some(delta) = solve_damped(&jtj, &g, lambda) {
                let xn = p.retract(&x, &delta);
                let rn = p.residuals(&xn);
                let cn = cost(&rn);
                if cn.is_finite() && cn < c {
                    accepted = Some((xn, rn, cn));
                    lambda = (lambda / 3.0).max(1e-12);
                    break;
                }
            }
            lambda *= 10.0;
        }
        let Some((xn, rn, cn)) = accepted else {
            termination = Termination::DampingExhausted;
            break;
        };
        let rel = (c - cn) / c;
        x = xn;
        r = rn;
        c = cn;
        history.push(c);
        if rel < cfg.rel_tol {
            termination = Termination::Converged;
            break;
        }
    }
    LmReport { x, initial_cost, cost: c, iterations, termination, history }
}
