//! Limited-memory BFGS with a strong-Wolfe line search.

use std::collections::VecDeque;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LbfgsConfig {
    pub history: usize,
    pub max_iterations: usize,
    /// Step length tried first along each quasi-Newton direction.
    pub step_length: f64,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    pub max_line_search: usize,
    /// Stop when the gradient infinity norm falls below this.
    pub gradient_tol: f64,
    /// Stop when a step changes the value by less than this.
    pub value_tol: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            history: 10,
            max_iterations: 20,
            step_length: 1.0,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 25,
            gradient_tol: 1e-10,
            value_tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    MaxIterations,
    GradientTolerance,
    ValueTolerance,
    LineSearchFailed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsOutcome<T: Scalar> {
    pub x: DVector<T>,
    pub value: T,
    pub gradient: DVector<T>,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
}

struct Point<T: Scalar> {
    alpha: T,
    value: T,
    slope: T,
    x: DVector<T>,
    grad: DVector<T>,
}

struct Problem<'f, T: Scalar, F> {
    f: &'f mut F,
    evaluations: usize,
    _t: std::marker::PhantomData<T>,
}

impl<T: Scalar, F> Problem<'_, T, F>
where
    F: FnMut(&DVector<T>) -> Result<(T, DVector<T>)>,
{
    fn eval(&mut self, x: &DVector<T>) -> Result<(T, DVector<T>)> {
        self.evaluations += 1;
        let (v, g) = (self.f)(x)?;
        if !v.is_finite() || g.iter().any(|c| !c.is_finite()) {
            return Err(Error::DivergedObjective);
        }
        Ok((v, g))
    }

    /// Trial point; a non-finite value is treated as an infinitely bad step.
    fn at(&mut self, x0: &DVector<T>, d: &DVector<T>, alpha: T) -> Result<Point<T>> {
        let x = x0 + d * alpha;
        match self.eval(&x) {
            Ok((value, grad)) => {
                let slope = grad.dot(d);
                Ok(Point { alpha, value, slope, x, grad })
            }
            Err(Error::DivergedObjective) => {
                let inf = T::lit(f64::INFINITY);
                Ok(Point { alpha, value: inf, slope: inf, x, grad: DVector::zeros(0) })
            }
            Err(e) => Err(e),
        }
    }
}

/// Minimizer of the cubic through two points with known slopes, clamped
/// into the interval; bisection when the cubic is unusable.
fn interpolate<T: Scalar>(a: &Point<T>, b: &Point<T>) -> T {
    let (lo, hi) = if a.alpha < b.alpha { (a.alpha, b.alpha) } else { (b.alpha, a.alpha) };
    let d1 = a.slope + b.slope - T::lit(3.0) * (a.value - b.value) / (a.alpha - b.alpha);
    let disc = d1 * d1 - a.slope * b.slope;
    let mid = (lo + hi) / T::lit(2.0);
    if !(disc >= T::zero()) {
        return mid;
    }
    let d2 = disc.sqrt() * if b.alpha > a.alpha { T::one() } else { -T::one() };
    let den = b.slope - a.slope + T::lit(2.0) * d2;
    if den == T::zero() {
        return mid;
    }
    let t = b.alpha - (b.alpha - a.alpha) * (b.slope + d2 - d1) / den;
    let margin = (hi - lo) * T::lit(0.1);
    if !t.is_finite() || t < lo + margin || t > hi - margin {
        mid
    } else {
        t
    }
}

fn strong_wolfe<T: Scalar, F>(
    p: &mut Problem<'_, T, F>,
    x0: &DVector<T>,
    f0: T,
    g0: T,
    d: &DVector<T>,
    alpha0: T,
    cfg: &LbfgsConfig,
) -> Result<Option<Point<T>>>
where
    F: FnMut(&DVector<T>) -> Result<(T, DVector<T>)>,
{
    let (c1, c2) = (T::lit(cfg.c1), T::lit(cfg.c2));
    let armijo = |pt: &Point<T>| pt.value <= f0 + c1 * pt.alpha * g0;
    let curvature = |pt: &Point<T>| pt.slope.abs() <= -c2 * g0;
    let mut prev = Point { alpha: T::zero(), value: f0, slope: g0, x: x0.clone(), grad: DVector::zeros(0) };
    let mut alpha = alpha0;
    let mut evals = 0;
    let (lo, hi) = loop {
        if evals >= cfg.max_line_search {
            return Ok(None);
        }
        evals += 1;
        let cur = p.at(x0, d, alpha)?;
        if !armijo(&cur) || (evals > 1 && cur.value >= prev.value) {
            break (prev, cur);
        }
        if curvature(&cur) {
            return Ok(Some(cur));
        }
        if cur.slope >= T::zero() {
            break (cur, prev);
        }
        alpha = cur.alpha * T::lit(2.0);
        prev = cur;
    };
    let (mut lo, mut hi) = (lo, hi);
    while evals < cfg.max_line_search {
        evals += 1;
        let a = interpolate(&lo, &hi);
        if (a - lo.alpha).abs() <= T::lit(1e-14) * a.abs().max(T::one()) {
            break;
        }
        let cur = p.at(x0, d, a)?;
        if !armijo(&cur) || cur.value >= lo.value {
            hi = cur;
        } else {
            if curvature(&cur) {
                return Ok(Some(cur));
            }
            if cur.slope * (hi.alpha - lo.alpha) >= T::zero() {
                hi = lo;
            }
            lo = cur;
        }
    }
    // accept the best sufficient-decrease point found, if any
    if lo.alpha > T::zero() && lo.grad.len() == x0.len() {
        return Ok(Some(lo));
    }
    Ok(None)
}

/// Minimizes `f`, which returns the value and gradient at a point.
pub fn minimize<T, F>(mut f: F, x0: DVector<T>, cfg: &LbfgsConfig) -> Result<LbfgsOutcome<T>>
where
    T: Scalar,
    F: FnMut(&DVector<T>) -> Result<(T, DVector<T>)>,
{
    let mut p = Problem { f: &mut f, evaluations: 0, _t: std::marker::PhantomData };
    let (mut value, mut grad) = p.eval(&x0)?;
    let mut x = x0;
    let mut hist: VecDeque<(DVector<T>, DVector<T>, T)> = VecDeque::with_capacity(cfg.history);
    let gtol = T::lit(cfg.gradient_tol);
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        if grad.amax() <= gtol {
            termination = Termination::GradientTolerance;
            break;
        }
        // two-loop recursion
        let mut q = grad.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = *rho * s.dot(&q);
            q.axpy(-a, y, T::one());
            alphas.push(a);
        }
        if let Some((s, y, _)) = hist.back() {
            q *= s.dot(y) / y.dot(y);
        }
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = *rho * y.dot(&q);
            q.axpy(*a - b, s, T::one());
        }
        let mut d = -q;
        let mut g0 = grad.dot(&d);
        if !(g0 < T::zero()) {
            hist.clear();
            d = -grad.clone();
            g0 = grad.dot(&d);
        }
        let step = if hist.is_empty() {
            T::lit(cfg.step_length) * (T::one() / grad.lp_norm(1)).min(T::one())
        } else {
            T::lit(cfg.step_length)
        };
        let Some(pt) = strong_wolfe(&mut p, &x, value, g0, &d, step, cfg)? else {
            termination = Termination::LineSearchFailed;
            break;
        };
        iterations += 1;
        let s = &pt.x - &x;
        let y = &pt.grad - &grad;
        let sy = s.dot(&y);
        let decrease = value - pt.value;
        x = pt.x;
        value = pt.value;
        grad = pt.grad;
        if sy > T::lit(1e-16) * y.dot(&y) {
            if hist.len() == cfg.history {
                hist.pop_front();
            }
            hist.push_back((s, y, T::one() / sy));
        }
        if decrease.abs() <= T::lit(cfg.value_tol) {
            termination = Termination::ValueTolerance;
            break;
        }
    }
    Ok(LbfgsOutcome { x, value, gradient: grad, iterations, evaluations: p.evaluations, termination })
}
