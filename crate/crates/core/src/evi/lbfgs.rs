//! Limited-memory BFGS with a strong-Wolfe line search (cubic interpolation
//! and zoom), following the usual two-loop recursion.

use std::collections::VecDeque;

use crate::error::{GpError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsOptions {
    pub max_iter: usize,
    pub history: usize,
    pub c1: f64,
    pub c2: f64,
    /// Stop once the Euclidean gradient norm drops below this.
    pub grad_tol: f64,
    /// Smallest bracket width (in units of the largest direction entry) the
    /// line search will still split.
    pub change_tol: f64,
    pub max_line_search: usize,
    /// Size of the one-off plain gradient step tried after a failed line search.
    pub fallback_step: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            history: 50,
            c1: 1e-4,
            c2: 0.9,
            grad_tol: 1e-8,
            change_tol: 1e-9,
            max_line_search: 25,
            fallback_step: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    GradientTolerance,
    MaxIterations,
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub reason: StopReason,
    /// Objective after each accepted step, starting with `f(x0)`.
    pub trace: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

fn axpy(x: &[f64], t: f64, d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(a, b)| a + t * b).collect()
}

/// Minimiser of the cubic through two points with slopes, clamped to bounds.
fn cubic_interpolate(
    x1: f64,
    f1: f64,
    g1: f64,
    x2: f64,
    f2: f64,
    g2: f64,
    bounds: Option<(f64, f64)>,
) -> f64 {
    let (lo, hi) = bounds.unwrap_or(if x1 <= x2 { (x1, x2) } else { (x2, x1) });
    if ![f1, f2, g1, g2].iter().all(|v| v.is_finite()) {
        return 0.5 * (lo + hi);
    }
    let d1 = g1 + g2 - 3.0 * (f1 - f2) / (x1 - x2);
    let d2_sq = d1 * d1 - g1 * g2;
    if d2_sq >= 0.0 {
        let d2 = d2_sq.sqrt();
        let pos = if x1 <= x2 {
            x2 - (x2 - x1) * ((g2 + d2 - d1) / (g2 - g1 + 2.0 * d2))
        } else {
            x1 - (x1 - x2) * ((g1 + d2 - d1) / (g1 - g2 + 2.0 * d2))
        };
        if pos.is_finite() {
            return pos.max(lo).min(hi);
        }
    }
    0.5 * (lo + hi)
}

struct Eval {
    f: f64,
    g: Vec<f64>,
    gtd: f64,
}

struct Probe<'a, F> {
    func: &'a mut F,
    x: &'a [f64],
    d: &'a [f64],
    evals: usize,
}

impl<F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>> Probe<'_, F> {
    /// Failed or non-finite evaluations count as `+inf` so the search backs off.
    fn at(&mut self, t: f64) -> Eval {
        self.evals += 1;
        match (self.func)(&axpy(self.x, t, self.d)) {
            Ok((f, g)) if f.is_finite() && g.iter().all(|v| v.is_finite()) => {
                let gtd = dot(&g, self.d);
                Eval { f, g, gtd }
            }
            _ => Eval { f: f64::INFINITY, g: vec![f64::NAN; self.x.len()], gtd: f64::NAN },
        }
    }
}

/// Returns the accepted step, or `None` if no point improved on `f0`.
fn strong_wolfe<F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>>(
    probe: &mut Probe<F>,
    mut t: f64,
    f0: f64,
    g0: &[f64],
    gtd0: f64,
    opts: &LbfgsOptions,
) -> Option<(f64, Eval)> {
    let d_norm = max_abs(probe.d);
    let mut cur = probe.at(t);
    let mut t_prev = 0.0;
    let mut prev = Eval { f: f0, g: g0.to_vec(), gtd: gtd0 };
    let mut done = false;
    let mut iter = 0;
    let mut bracket: Vec<(f64, Eval)>;

    loop {
        if iter >= opts.max_line_search {
            bracket = vec![(0.0, Eval { f: f0, g: g0.to_vec(), gtd: gtd0 }), (t, cur)];
            break;
        }
        if cur.f > f0 + opts.c1 * t * gtd0 || (iter > 1 && cur.f >= prev.f) {
            bracket = vec![(t_prev, prev), (t, cur)];
            break;
        }
        if cur.gtd.abs() <= -opts.c2 * gtd0 {
            bracket = vec![(t, cur)];
            done = true;
            break;
        }
        if cur.gtd >= 0.0 {
            bracket = vec![(t_prev, prev), (t, cur)];
            break;
        }
        let min_step = t + 0.01 * (t - t_prev);
        let max_step = t * 10.0;
        let next = cubic_interpolate(t_prev, prev.f, prev.gtd, t, cur.f, cur.gtd, Some((min_step, max_step)));
        t_prev = t;
        t = next;
        prev = cur;
        cur = probe.at(t);
        iter += 1;
    }

    // zoom
    let mut insufficient = false;
    let order = |b: &[(f64, Eval)]| if b[0].1.f <= b[b.len() - 1].1.f { (0, 1) } else { (1, 0) };
    let (mut low, mut high) = if bracket.len() == 2 { order(&bracket) } else { (0, 0) };
    while !done && iter < opts.max_line_search {
        let (a, b) = (bracket[0].0, bracket[1].0);
        if (b - a).abs() * d_norm < opts.change_tol {
            break;
        }
        let (lo_t, hi_t) = (a.min(b), a.max(b));
        let mut tz = cubic_interpolate(
            a,
            bracket[0].1.f,
            bracket[0].1.gtd,
            b,
            bracket[1].1.f,
            bracket[1].1.gtd,
            None,
        );
        let eps = 0.1 * (hi_t - lo_t);
        if (hi_t - tz).min(tz - lo_t) < eps {
            if insufficient || tz >= hi_t || tz <= lo_t {
                tz = if (tz - hi_t).abs() < (tz - lo_t).abs() { hi_t - eps } else { lo_t + eps };
                insufficient = false;
            } else {
                insufficient = true;
            }
        } else {
            insufficient = false;
        }
        let e = probe.at(tz);
        iter += 1;
        if e.f > f0 + opts.c1 * tz * gtd0 || e.f >= bracket[low].1.f {
            bracket[high] = (tz, e);
            (low, high) = order(&bracket);
        } else {
            if e.gtd.abs() <= -opts.c2 * gtd0 {
                done = true;
            } else if e.gtd * (bracket[high].0 - bracket[low].0) >= 0.0 {
                let (tl, el) = (bracket[low].0, Eval { f: bracket[low].1.f, g: bracket[low].1.g.clone(), gtd: bracket[low].1.gtd });
                bracket[high] = (tl, el);
            }
            bracket[low] = (tz, e);
        }
    }
    let (t_best, best) = bracket.swap_remove(low);
    if t_best > 0.0 && best.f < f0 && best.f.is_finite() {
        Some((t_best, best))
    } else {
        None
    }
}

/// Minimises `func` from `x0`; the returned point is the best iterate seen.
pub fn lbfgs_minimize<F>(mut func: F, x0: &[f64], opts: &LbfgsOptions) -> Result<LbfgsResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (f_start, g_start) = func(x0)?;
    if !f_start.is_finite() || g_start.iter().any(|v| !v.is_finite()) {
        return Err(GpError::Numerical("objective is not finite at the starting point".into()));
    }
    let mut x = x0.to_vec();
    let mut f = f_start;
    let mut g = g_start;
    let mut evaluations = 1;
    let mut trace = vec![f];
    let mut s_hist: VecDeque<Vec<f64>> = VecDeque::new();
    let mut y_hist: VecDeque<Vec<f64>> = VecDeque::new();
    let mut rho: VecDeque<f64> = VecDeque::new();
    let mut h_diag = 1.0;
    let mut last_step: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut fallback_used = false;

    if norm(&g) < opts.grad_tol {
        return Ok(LbfgsResult { x, f, grad: g, iterations: 0, evaluations, reason: StopReason::GradientTolerance, trace });
    }

    let mut iterations = 0;
    let reason = loop {
        if iterations >= opts.max_iter {
            break StopReason::MaxIterations;
        }
        iterations += 1;

        if let Some((s, g_prev)) = last_step.take() {
            let y: Vec<f64> = g.iter().zip(&g_prev).map(|(a, b)| a - b).collect();
            let ys = dot(&y, &s);
            if ys > 1e-10 {
                if s_hist.len() == opts.history {
                    s_hist.pop_front();
                    y_hist.pop_front();
                    rho.pop_front();
                }
                h_diag = ys / dot(&y, &y);
                s_hist.push_back(s);
                y_hist.push_back(y);
                rho.push_back(1.0 / ys);
            }
        }

        // two-loop recursion
        let mut q: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut alpha = vec![0.0; s_hist.len()];
        for k in (0..s_hist.len()).rev() {
            alpha[k] = rho[k] * dot(&s_hist[k], &q);
            q.iter_mut().zip(&y_hist[k]).for_each(|(qi, yi)| *qi -= alpha[k] * yi);
        }
        q.iter_mut().for_each(|v| *v *= h_diag);
        for k in 0..s_hist.len() {
            let beta = rho[k] * dot(&y_hist[k], &q);
            q.iter_mut().zip(&s_hist[k]).for_each(|(qi, si)| *qi += si * (alpha[k] - beta));
        }
        let mut d = q;
        let mut gtd = dot(&g, &d);
        if !(gtd < 0.0) {
            // not a descent direction; restart from steepest descent
            s_hist.clear();
            y_hist.clear();
            rho.clear();
            h_diag = 1.0;
            d = g.iter().map(|v| -v).collect();
            gtd = dot(&g, &d);
            if !(gtd < 0.0) {
                break StopReason::GradientTolerance;
            }
        }

        let t0 = if s_hist.is_empty() {
            (1.0f64).min(1.0 / g.iter().map(|v| v.abs()).sum::<f64>())
        } else {
            1.0
        };
        let mut probe = Probe { func: &mut func, x: &x, d: &d, evals: 0 };
        let accepted = strong_wolfe(&mut probe, t0, f, &g, gtd, opts);
        evaluations += probe.evals;

        let (t, e) = match accepted {
            Some(step) => step,
            None => {
                if fallback_used {
                    break StopReason::LineSearchFailed;
                }
                fallback_used = true;
                let mut probe = Probe { func: &mut func, x: &x, d: &d, evals: 0 };
                let t = opts.fallback_step;
                let e = probe.at(t);
                evaluations += 1;
                if !(e.f < f) {
                    break StopReason::LineSearchFailed;
                }
                (t, e)
            }
        };

        let s: Vec<f64> = d.iter().map(|v| v * t).collect();
        x = axpy(&x, 1.0, &s);
        last_step = Some((s, std::mem::replace(&mut g, e.g)));
        f = e.f;
        trace.push(f);

        if norm(&g) < opts.grad_tol {
            break StopReason::GradientTolerance;
        }
    };
    Ok(LbfgsResult { x, f, grad: g, iterations, evaluations, reason, trace })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
        Ok((f, g))
    }

    #[test]
    fn quadratic_in_few_iterations() {
        let c = [1.5, -2.0, 0.25];
        for x0 in [[0.0, 0.0, 0.0], [10.0, -3.0, 7.0], [-0.1, 0.2, 100.0]] {
            let res = lbfgs_minimize(
                |x| {
                    let r: Vec<f64> = x.iter().zip(&c).map(|(a, b)| a - b).collect();
                    Ok((0.5 * dot(&r, &r), r))
                },
                &x0,
                &LbfgsOptions::default(),
            )
            .unwrap();
            assert!(res.iterations <= 3, "{} iterations", res.iterations);
            for (a, b) in res.x.iter().zip(&c) {
                assert!((a - b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn rosenbrock_converges() {
        let res = lbfgs_minimize(rosenbrock, &[-1.2, 1.0], &LbfgsOptions::default()).unwrap();
        assert!(res.f < 1e-8, "f = {} after {} iterations ({:?})", res.f, res.iterations, res.reason);
        assert!(res.iterations <= 100);
        assert!(res.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn never_worse_than_start() {
        // objective that fails away from a small region
        let res = lbfgs_minimize(
            |x: &[f64]| {
                if x[0].abs() > 2.0 {
                    Err(GpError::Numerical("outside".into()))
                } else {
                    Ok((x[0].powi(4) - x[0], vec![4.0 * x[0].powi(3) - 1.0]))
                }
            },
            &[1.9],
            &LbfgsOptions::default(),
        )
        .unwrap();
        assert!(res.f <= 1.9f64.powi(4) - 1.9);
        assert!((res.x[0] - 0.25f64.powf(1.0 / 3.0)).abs() < 1e-6);
    }

    #[test]
    fn start_errors_propagate() {
        let res = lbfgs_minimize(|_| Ok((f64::NAN, vec![0.0])), &[0.0], &LbfgsOptions::default());
        assert!(matches!(res, Err(GpError::Numerical(_))));
    }

    #[test]
    fn cubic_interpolation_of_quadratic_is_exact() {
        // f(t) = (t - 0.3)^2
        let f = |t: f64| (t - 0.3) * (t - 0.3);
        let g = |t: f64| 2.0 * (t - 0.3);
        let t = cubic_interpolate(0.0, f(0.0), g(0.0), 1.0, f(1.0), g(1.0), None);
        assert!((t - 0.3).abs() < 1e-15);
    }
}
