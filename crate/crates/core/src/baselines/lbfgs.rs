//! Limited-memory BFGS with a strong-Wolfe line search.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub max_iterations: usize,
    /// Stop once `max_i |g_i|` falls to this value.
    pub gradient_tolerance: f64,
    /// Stop once the relative objective decrease of an iteration falls below this.
    pub function_tolerance: f64,
    pub c1: f64,
    pub c2: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iterations: 1000,
            gradient_tolerance: 1e-6,
            function_tolerance: 1e-13,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    GradientTolerance,
    FunctionTolerance,
    MaxIterations,
    /// The line search could not satisfy the Wolfe conditions; the best
    /// iterate found so far is returned.
    LineSearchFailure,
    NonFinite,
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub termination: Termination,
    /// Objective value after each accepted iterate, starting with `x0`.
    pub trace: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn axpy(x: &[f64], a: f64, d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(xi, di)| xi + a * di).collect()
}

struct Point {
    alpha: f64,
    value: f64,
    slope: f64,
    x: Vec<f64>,
    grad: Vec<f64>,
}

/// Minimizer of the cubic interpolating `(a, fa, da)` and `(b, fb, db)`,
/// safeguarded to stay inside the interval.
fn cubic_step(a: &Point, b: &Point) -> f64 {
    let (lo, hi) = if a.alpha < b.alpha { (a.alpha, b.alpha) } else { (b.alpha, a.alpha) };
    let width = hi - lo;
    let d1 = a.slope + b.slope - 3.0 * (a.value - b.value) / (a.alpha - b.alpha);
    let rad = d1 * d1 - a.slope * b.slope;
    let candidate = if rad >= 0.0 {
        let d2 = (b.alpha - a.alpha).signum() * rad.sqrt();
        b.alpha - (b.alpha - a.alpha) * (b.slope + d2 - d1) / (b.slope - a.slope + 2.0 * d2)
    } else {
        f64::NAN
    };
    if candidate.is_finite() && candidate > lo + 0.1 * width && candidate < hi - 0.1 * width {
        candidate
    } else {
        lo + 0.5 * width
    }
}

enum Search {
    Found(Point),
    Failed(Option<Point>),
}

fn line_search<F>(f: &mut F, x: &[f64], value: f64, grad: &[f64], dir: &[f64], init: f64, opts: &LbfgsOptions) -> Search
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let slope0 = dot(grad, dir);
    let mut evaluate = |alpha: f64| {
        let xn = axpy(x, alpha, dir);
        let mut g = vec![0.0; x.len()];
        let v = f(&xn, &mut g);
        Point {
            alpha,
            value: v,
            slope: dot(&g, dir),
            x: xn,
            grad: g,
        }
    };
    let sufficient = |p: &Point| p.value <= value + opts.c1 * p.alpha * slope0;
    let curvature = |p: &Point| p.slope.abs() <= -opts.c2 * slope0;
    let mut best: Option<Point> = None;
    let keep_best = |p: &Point, best: &mut Option<Point>| {
        if p.value.is_finite() && p.value < value && best.as_ref().is_none_or(|b| p.value < b.value) {
            *best = Some(Point {
                alpha: p.alpha,
                value: p.value,
                slope: p.slope,
                x: p.x.clone(),
                grad: p.grad.clone(),
            });
        }
    };

    let mut prev = Point {
        alpha: 0.0,
        value,
        slope: slope0,
        x: x.to_vec(),
        grad: grad.to_vec(),
    };
    let mut alpha = init;
    let mut evals = 0;
    let (mut lo, mut hi);
    loop {
        let p = evaluate(alpha);
        evals += 1;
        if !p.value.is_finite() {
            // step overshot into overflow; back off
            if evals >= opts.max_line_search {
                return Search::Failed(best);
            }
            alpha = 0.5 * (prev.alpha + alpha);
            continue;
        }
        keep_best(&p, &mut best);
        if !sufficient(&p) || (evals > 1 && p.value >= prev.value) {
            lo = prev;
            hi = p;
            break;
        }
        if curvature(&p) {
            return Search::Found(p);
        }
        if p.slope >= 0.0 {
            lo = p;
            hi = prev;
            break;
        }
        if evals >= opts.max_line_search {
            return Search::Failed(best);
        }
        alpha *= 2.0;
        prev = p;
    }

    // zoom: `lo` satisfies sufficient decrease and has the lower value
    while evals < opts.max_line_search {
        let alpha = cubic_step(&lo, &hi);
        if (hi.alpha - lo.alpha).abs() < 1e-16 * lo.alpha.abs().max(1.0) {
            break;
        }
        let p = evaluate(alpha);
        evals += 1;
        keep_best(&p, &mut best);
        if !p.value.is_finite() || !sufficient(&p) || p.value >= lo.value {
            hi = p;
        } else {
            if curvature(&p) {
                return Search::Found(p);
            }
            if p.slope * (hi.alpha - lo.alpha) >= 0.0 {
                hi = lo;
            }
            lo = p;
        }
    }
    Search::Failed(best)
}

/// Minimizes `f`, which returns the objective and writes the gradient into
/// its second argument.
pub fn minimize<F>(mut f: F, x0: Vec<f64>, opts: &LbfgsOptions) -> LbfgsResult
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0;
    let mut grad = vec![0.0; n];
    let mut value = f(&x, &mut grad);
    let mut trace = vec![value];
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut iterations = 0;

    let finish = |x: Vec<f64>, value: f64, grad: &[f64], iterations, termination, trace| LbfgsResult {
        x,
        value,
        gradient_norm: inf_norm(grad),
        iterations,
        termination,
        trace,
    };
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return finish(x, value, &grad, 0, Termination::NonFinite, trace);
    }

    loop {
        if inf_norm(&grad) <= opts.gradient_tolerance {
            return finish(x, value, &grad, iterations, Termination::GradientTolerance, trace);
        }
        if iterations >= opts.max_iterations {
            return finish(x, value, &grad, iterations, Termination::MaxIterations, trace);
        }

        // two-loop recursion
        let mut q: Vec<f64> = grad.iter().map(|g| -g).collect();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        if let Some((s, y, _)) = history.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|qi| *qi *= gamma);
        }
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir = q;
        if dot(&dir, &grad) >= 0.0 {
            history.clear();
            dir = grad.iter().map(|g| -g).collect();
        }
        let init = if history.is_empty() {
            (1.0 / dir.iter().map(|d| d.abs()).sum::<f64>()).min(1.0)
        } else {
            1.0
        };

        match line_search(&mut f, &x, value, &grad, &dir, init, opts) {
            Search::Found(p) => {
                iterations += 1;
                let s: Vec<f64> = p.x.iter().zip(&x).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = p.grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &y);
                if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
                    if history.len() == opts.memory {
                        history.pop_front();
                    }
                    history.push_back((s, y, 1.0 / sy));
                }
                let previous = value;
                x = p.x;
                grad = p.grad;
                value = p.value;
                trace.push(value);
                if (previous - value) <= opts.function_tolerance * previous.abs().max(value.abs()).max(1.0) {
                    return finish(x, value, &grad, iterations, Termination::FunctionTolerance, trace);
                }
            }
            Search::Failed(best) => {
                if let Some(p) = best {
                    iterations += 1;
                    x = p.x;
                    grad = p.grad;
                    value = p.value;
                    trace.push(value);
                }
                log::debug!("line search failed after {iterations} iterations");
                return finish(x, value, &grad, iterations, Termination::LineSearchFailure, trace);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64], g: &mut [f64]) -> f64 {
        let (a, b) = (x[0], x[1]);
        g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
        g[1] = 200.0 * (b - a * a);
        (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
    }

    #[test]
    fn solves_rosenbrock() {
        let r = minimize(rosenbrock, vec![-1.2, 1.0], &LbfgsOptions::default());
        assert!((r.x[0] - 1.0).abs() < 1e-5, "{:?}", r);
        assert!((r.x[1] - 1.0).abs() < 1e-5);
        assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn quadratic_in_few_iterations() {
        let diag = [1.0, 10.0, 100.0];
        let f = |x: &[f64], g: &mut [f64]| {
            let mut v = 0.0;
            for i in 0..3 {
                g[i] = diag[i] * (x[i] - 1.0);
                v += 0.5 * diag[i] * (x[i] - 1.0).powi(2);
            }
            v
        };
        let r = minimize(f, vec![0.0; 3], &LbfgsOptions::default());
        assert_eq!(r.termination, Termination::GradientTolerance);
        assert!(r.iterations < 30);
    }

    #[test]
    fn already_optimal_start() {
        let r = minimize(|x: &[f64], g: &mut [f64]| {
            g[0] = 2.0 * x[0];
            x[0] * x[0]
        }, vec![0.0], &LbfgsOptions::default());
        assert_eq!(r.iterations, 0);
        assert_eq!(r.termination, Termination::GradientTolerance);
    }
}
