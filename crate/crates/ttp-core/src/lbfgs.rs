//! Limited-memory BFGS with a strong-Wolfe line search, for the small dense
//! pose subproblem. Two-loop recursion over a bounded history; cubic
//! interpolation inside the zoom phase.

use alloc::collections::VecDeque;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use crate::float::FloatExt;
use nalgebra::DVector;

/// Sufficient-decrease constant of the Wolfe conditions.
const C1: f64 = 1e-4;
/// Curvature constant of the Wolfe conditions.
const C2: f64 = 0.9;
const MAX_BRACKET_STEPS: usize = 20;
const MAX_ZOOM_STEPS: usize = 30;

/// Solver knobs: evaluation budget, gradient-norm stopping tolerance and
/// history size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsParams {
    pub max_evals: usize,
    pub gradient_tolerance: f64,
    pub history: usize,
}

impl Default for LbfgsParams {
    fn default() -> Self {
        Self {
            max_evals: 200,
            gradient_tolerance: 1e-9,
            history: 10,
        }
    }
}

/// Result of a minimization run. `x` is the best iterate seen, which is never
/// worse than the starting point.
#[derive(Debug, Clone)]
pub struct LbfgsOutcome {
    pub x: DVector<f64>,
    pub value: f64,
    pub gradient_norm: f64,
    pub evals: usize,
    /// Gradient norm fell below the tolerance.
    pub converged: bool,
    /// The line search could not satisfy the Wolfe conditions.
    pub line_search_failed: bool,
}

struct HistoryEntry {
    s: DVector<f64>,
    y: DVector<f64>,
    rho: f64,
}

/// One point probed by the line search.
struct Probe {
    alpha: f64,
    phi: f64,
    dphi: f64,
    grad: DVector<f64>,
    x: DVector<f64>,
}

/// Minimize `f` (value and gradient) from `x0`.
///
/// Terminates when the gradient norm drops below the tolerance, the
/// evaluation budget is exhausted, or the line search fails; the outcome
/// reports which. The line search is monotone, so the returned value never
/// exceeds the starting value.
pub fn minimize<F>(mut f: F, x0: DVector<f64>, params: &LbfgsParams) -> LbfgsOutcome
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    let mut evals = 0usize;
    let mut x = x0;
    let (mut fx, mut g) = {
        evals += 1;
        f(&x)
    };
    let mut best = (x.clone(), fx, g.norm());
    if g.norm() <= params.gradient_tolerance {
        return LbfgsOutcome {
            x,
            value: fx,
            gradient_norm: g.norm(),
            evals,
            converged: true,
            line_search_failed: false,
        };
    }

    let mut history: VecDeque<HistoryEntry> = VecDeque::with_capacity(params.history);
    let mut first_step = true;
    while evals < params.max_evals {
        let mut d = two_loop(&g, &history);
        d.neg_mut();
        let mut gtd = g.dot(&d);
        if !(gtd < 0.0) {
            // Not a descent direction; fall back to steepest descent.
            history.clear();
            d = -&g;
            gtd = -g.norm_squared();
        }
        let alpha0 = if first_step {
            (1.0 / g.norm()).min(1.0)
        } else {
            1.0
        };
        first_step = false;

        let ls = {
            let mut probe = |alpha: f64, evals: &mut usize| -> Probe {
                let xa = &x + &d * alpha;
                *evals += 1;
                let (phi, grad) = f(&xa);
                let dphi = grad.dot(&d);
                Probe {
                    alpha,
                    phi,
                    dphi,
                    grad,
                    x: xa,
                }
            };
            line_search(&mut probe, fx, gtd, alpha0, params.max_evals, &mut evals)
        };
        let accepted = match ls {
            Some(p) => p,
            None if !history.is_empty() => {
                // Retry the step as plain steepest descent before giving up;
                // a stale curvature model is the usual culprit.
                history.clear();
                continue;
            }
            None => {
                let (bx, bf, bg) = best;
                return LbfgsOutcome {
                    x: bx,
                    value: bf,
                    gradient_norm: bg,
                    evals,
                    converged: false,
                    line_search_failed: true,
                };
            }
        };
        let s = &accepted.x - &x;
        let y = &accepted.grad - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if history.len() == params.history {
                history.pop_front();
            }
            history.push_back(HistoryEntry {
                rho: 1.0 / sy,
                s,
                y,
            });
        }
        x = accepted.x;
        fx = accepted.phi;
        g = accepted.grad;
        if fx < best.1 {
            best = (x.clone(), fx, g.norm());
        }
        if g.norm() <= params.gradient_tolerance {
            return LbfgsOutcome {
                x,
                value: fx,
                gradient_norm: g.norm(),
                evals,
                converged: true,
                line_search_failed: false,
            };
        }
    }
    let (bx, bf, bg) = best;
    LbfgsOutcome {
        x: bx,
        value: bf,
        gradient_norm: bg,
        evals,
        converged: false,
        line_search_failed: false,
    }
}

/// Two-loop recursion: apply the inverse-Hessian approximation to `g`.
fn two_loop(g: &DVector<f64>, history: &VecDeque<HistoryEntry>) -> DVector<f64> {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(history.len());
    for entry in history.iter().rev() {
        let a = entry.rho * entry.s.dot(&q);
        q.axpy(-a, &entry.y, 1.0);
        alphas.push(a);
    }
    if let Some(last) = history.back() {
        let gamma = last.s.dot(&last.y) / last.y.norm_squared();
        q *= gamma;
    }
    for (entry, &a) in history.iter().zip(alphas.iter().rev()) {
        let b = entry.rho * entry.y.dot(&q);
        q.axpy(a - b, &entry.s, 1.0);
    }
    q
}

/// Bracketing phase of the strong-Wolfe search (Nocedal & Wright alg. 3.5).
fn line_search<P>(
    probe: &mut P,
    phi0: f64,
    dphi0: f64,
    alpha0: f64,
    max_evals: usize,
    evals: &mut usize,
) -> Option<Probe>
where
    P: FnMut(f64, &mut usize) -> Probe,
{
    debug_assert!(dphi0 < 0.0);
    if !alpha0.is_finite() || alpha0 <= 0.0 {
        return None;
    }
    let mut prev = (0.0, phi0, dphi0);
    let mut alpha = alpha0;
    for iter in 0..MAX_BRACKET_STEPS {
        if *evals >= max_evals {
            return None;
        }
        let p = probe(alpha, evals);
        if !p.phi.is_finite() {
            // Overshot into a bad region; bring the bracket in.
            alpha = 0.5 * (prev.0 + alpha);
            continue;
        }
        if p.phi > phi0 + C1 * p.alpha * dphi0 || (iter > 0 && p.phi >= prev.1) {
            return zoom(probe, phi0, dphi0, prev, (p.alpha, p.phi, p.dphi), Some(p), max_evals, evals);
        }
        if p.dphi.abs() <= -C2 * dphi0 {
            return Some(p);
        }
        if p.dphi >= 0.0 {
            let hi = prev;
            let lo = (p.alpha, p.phi, p.dphi);
            return zoom(probe, phi0, dphi0, lo, hi, Some(p), max_evals, evals);
        }
        prev = (p.alpha, p.phi, p.dphi);
        alpha *= 2.0;
    }
    None
}

/// Zoom phase (Nocedal & Wright alg. 3.6): shrink `[lo, hi]` around a point
/// satisfying both Wolfe conditions. `cached` is the probe at `lo` when the
/// caller already evaluated it.
#[allow(clippy::too_many_arguments)]
fn zoom<P>(
    probe: &mut P,
    phi0: f64,
    dphi0: f64,
    mut lo: (f64, f64, f64),
    mut hi: (f64, f64, f64),
    cached: Option<Probe>,
    max_evals: usize,
    evals: &mut usize,
) -> Option<Probe>
where
    P: FnMut(f64, &mut usize) -> Probe,
{
    let mut best = cached.filter(|p| p.alpha == lo.0 && p.phi <= phi0);
    for _ in 0..MAX_ZOOM_STEPS {
        if *evals >= max_evals {
            break;
        }
        let width = (hi.0 - lo.0).abs();
        if width < 1e-16 * lo.0.abs().max(1.0) {
            break;
        }
        let mut alpha = cubic_interpolate(lo, hi);
        // Keep the trial safely interior.
        let (a_min, a_max) = (lo.0.min(hi.0), lo.0.max(hi.0));
        let margin = 0.1 * width;
        if !alpha.is_finite() || alpha < a_min + margin || alpha > a_max - margin {
            alpha = 0.5 * (lo.0 + hi.0);
        }
        let p = probe(alpha, evals);
        if !p.phi.is_finite() || p.phi > phi0 + C1 * p.alpha * dphi0 || p.phi >= lo.1 {
            hi = (p.alpha, p.phi, p.dphi);
        } else {
            if p.dphi.abs() <= -C2 * dphi0 {
                return Some(p);
            }
            if p.dphi * (hi.0 - lo.0) >= 0.0 {
                hi = lo;
            }
            lo = (p.alpha, p.phi, p.dphi);
            if best.as_ref().is_none_or(|b| p.phi < b.phi) {
                best = Some(p);
            }
        }
    }
    // Wolfe was not satisfied, but a simple-decrease point still moves the
    // outer iteration forward monotonically.
    best.filter(|b| b.phi < phi0)
}

/// Minimizer of the cubic through two points with values and slopes,
/// restricted to the interval between them.
fn cubic_interpolate(a: (f64, f64, f64), b: (f64, f64, f64)) -> f64 {
    let (x1, f1, g1) = a;
    let (x2, f2, g2) = b;
    let d1 = g1 + g2 - 3.0 * (f1 - f2) / (x1 - x2);
    let d2sq = d1 * d1 - g1 * g2;
    if d2sq < 0.0 {
        return 0.5 * (x1 + x2);
    }
    let d2 = d2sq.sqrt();
    let min_pos = if x1 <= x2 {
        x2 - (x2 - x1) * ((g2 + d2 - d1) / (g2 - g1 + 2.0 * d2))
    } else {
        x1 - (x1 - x2) * ((g1 + d2 - d1) / (g1 - g2 + 2.0 * d2))
    };
    min_pos.clamp(x1.min(x2), x1.max(x2))
}
