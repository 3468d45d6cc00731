//! Limited-memory BFGS with a strong-Wolfe line search. The solver is a
//! plain sequential loop over a user closure; all parallelism lives inside
//! objective evaluations, so a given problem always replays the same trace.

use crate::error::{Error, Result};

/// Solver settings. `history` is the number of curvature pairs kept.
#[derive(Clone, Copy, Debug)]
pub struct SolverConfig {
    pub history: usize,
    pub c1: f64,
    pub c2: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub max_line_search_steps: usize,
}

impl SolverConfig {
    /// Stage-one profile: loose gradient tolerance, generous iteration cap.
    pub fn source_fit() -> Self {
        Self {
            history: 10,
            c1: 1e-4,
            c2: 0.9,
            max_iters: 300_000,
            grad_tol: 1e-2,
            max_line_search_steps: 30,
        }
    }

    /// Stage-two profile: tight gradient tolerance.
    pub fn lens_design() -> Self {
        Self { grad_tol: 1e-4, ..Self::source_fit() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.history == 0 {
            return Err(Error::Config("history must be at least 1".into()));
        }
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(Error::Config(format!(
                "Wolfe constants need 0 < c1 < c2 < 1, got c1 = {}, c2 = {}",
                self.c1, self.c2
            )));
        }
        if !(self.grad_tol > 0.0) {
            return Err(Error::Config(format!("grad_tol {} must be positive", self.grad_tol)));
        }
        if self.max_line_search_steps == 0 {
            return Err(Error::Config("line search needs at least one step".into()));
        }
        Ok(())
    }
}

/// Why the loop stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    /// Gradient norm fell below the tolerance.
    GradTol,
    /// Iteration budget exhausted.
    MaxIters,
    /// No strong-Wolfe point within the line-search budget.
    LineSearchFail,
    /// The objective stopped being finite; the last finite iterate stands.
    NonFinite,
}

/// One accepted iterate (iterate 0 is the starting point, step 0).
#[derive(Clone, Copy, Debug)]
pub struct TraceRow {
    pub iter: usize,
    pub energy: f64,
    pub grad_norm: f64,
    pub step: f64,
}

/// Outcome of [`minimize`]: the best (last accepted) iterate and the full
/// iterate trace.
#[derive(Clone, Debug)]
pub struct Minimization {
    pub x: Vec<f64>,
    pub energy: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub stop: StopReason,
    pub trace: Vec<TraceRow>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimize a smooth objective from `x0`. Accepted iterates decrease
/// strictly (Wolfe sufficient decrease); a failed line search or a
/// non-finite region leaves the last accepted iterate in place.
pub fn minimize<F>(mut objective: F, x0: &[f64], config: &SolverConfig) -> Result<Minimization>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    config.validate()?;
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut f, mut g) = objective(&x)?;
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("objective is not finite at the starting point".into()));
    }
    let mut trace =
        vec![TraceRow { iter: 0, energy: f, grad_norm: norm(&g), step: 0.0 }];

    // Curvature pairs, most recent last.
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut rho_hist: Vec<f64> = Vec::new();

    let mut stop = StopReason::MaxIters;
    let mut iterations = 0;
    for iter in 1..=config.max_iters {
        let gnorm = norm(&g);
        if gnorm < config.grad_tol {
            stop = StopReason::GradTol;
            break;
        }

        let mut d = two_loop_direction(&g, &s_hist, &y_hist, &rho_hist);
        let mut dphi0 = dot(&g, &d);
        if dphi0 >= 0.0 {
            // Numerically spoiled curvature; restart from steepest descent.
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            d = g.iter().map(|v| -v).collect();
            dphi0 = -gnorm * gnorm;
        }

        let alpha0 =
            if s_hist.is_empty() { (1.0 / gnorm.max(1.0)).min(1.0) } else { 1.0 };
        match line_search(&mut objective, &x, f, &g, &d, dphi0, alpha0, config)? {
            SearchOutcome::Accepted { alpha, x_new, f_new, g_new } => {
                let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
                let ys = dot(&y, &s);
                // Reject pairs too close to losing positive definiteness.
                if ys > 1e-10 * norm(&y) * norm(&s) {
                    s_hist.push(s);
                    y_hist.push(y);
                    rho_hist.push(1.0 / ys);
                    if s_hist.len() > config.history {
                        s_hist.remove(0);
                        y_hist.remove(0);
                        rho_hist.remove(0);
                    }
                }
                x = x_new;
                f = f_new;
                g = g_new;
                iterations = iter;
                trace.push(TraceRow { iter, energy: f, grad_norm: norm(&g), step: alpha });
            }
            SearchOutcome::Failed { saw_nonfinite } => {
                stop = if saw_nonfinite {
                    StopReason::NonFinite
                } else {
                    StopReason::LineSearchFail
                };
                break;
            }
        }
    }
    debug_assert_eq!(x.len(), n);
    Ok(Minimization { grad_norm: norm(&g), x, energy: f, iterations, stop, trace })
}

/// Two-loop recursion for d = -H g with the usual gamma-scaled diagonal
/// seed. With curvature pairs that span the space and are conjugate under
/// the Hessian, the result is the exact Newton step.
fn two_loop_direction(
    g: &[f64],
    s_hist: &[Vec<f64>],
    y_hist: &[Vec<f64>],
    rho_hist: &[f64],
) -> Vec<f64> {
    let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
    let mut alpha_coef = vec![0.0; s_hist.len()];
    for i in (0..s_hist.len()).rev() {
        let a = rho_hist[i] * dot(&s_hist[i], &d);
        alpha_coef[i] = a;
        for (dj, yj) in d.iter_mut().zip(&y_hist[i]) {
            *dj -= a * yj;
        }
    }
    if let (Some(s), Some(y)) = (s_hist.last(), y_hist.last()) {
        let gamma = dot(s, y) / dot(y, y);
        for dj in d.iter_mut() {
            *dj *= gamma;
        }
    }
    for i in 0..s_hist.len() {
        let b = rho_hist[i] * dot(&y_hist[i], &d);
        for (dj, sj) in d.iter_mut().zip(&s_hist[i]) {
            *dj += (alpha_coef[i] - b) * sj;
        }
    }
    d
}

enum SearchOutcome {
    Accepted { alpha: f64, x_new: Vec<f64>, f_new: f64, g_new: Vec<f64> },
    Failed { saw_nonfinite: bool },
}

struct ProbePoint {
    alpha: f64,
    phi: f64,
    dphi: f64,
}

/// Strong-Wolfe search along `d`: bracket by doubling, then shrink with
/// cubic interpolation. Non-finite probes are treated as "too far".
#[allow(clippy::too_many_arguments)]
fn line_search<F>(
    objective: &mut F,
    x: &[f64],
    phi0: f64,
    _g: &[f64],
    d: &[f64],
    dphi0: f64,
    alpha0: f64,
    config: &SolverConfig,
) -> Result<SearchOutcome>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut budget = config.max_line_search_steps;
    let mut saw_nonfinite = false;
    // Best sufficient-decrease point seen; accepted if the curvature
    // condition stays out of reach (kinks in the objective can make the
    // strong-Wolfe set empty along a descent direction).
    let mut best: Option<(f64, f64, Vec<f64>)> = None;
    let mut probe = |alpha: f64,
                     budget: &mut usize,
                     best: &mut Option<(f64, f64, Vec<f64>)>|
     -> Result<Option<(f64, Vec<f64>, f64)>> {
        *budget -= 1;
        let xt: Vec<f64> = x.iter().zip(d).map(|(xi, di)| xi + alpha * di).collect();
        let (ft, gt) = objective(&xt)?;
        if !ft.is_finite() || gt.iter().any(|v| !v.is_finite()) {
            return Ok(None);
        }
        if ft <= phi0 + config.c1 * alpha * dphi0 && best.as_ref().is_none_or(|b| ft < b.1) {
            *best = Some((alpha, ft, gt.clone()));
        }
        let dphi = dot(&gt, d);
        Ok(Some((ft, gt, dphi)))
    };

    let wolfe = |alpha: f64, phi: f64, dphi: f64| {
        phi <= phi0 + config.c1 * alpha * dphi0 && dphi.abs() <= -config.c2 * dphi0
    };

    // Bracketing phase.
    let mut prev = ProbePoint { alpha: 0.0, phi: phi0, dphi: dphi0 };
    let mut alpha = alpha0;
    let mut bracket: Option<(ProbePoint, ProbePoint)> = None;
    while budget > 0 {
        match probe(alpha, &mut budget, &mut best)? {
            None => {
                saw_nonfinite = true;
                bracket =
                    Some((prev, ProbePoint { alpha, phi: f64::INFINITY, dphi: f64::NAN }));
                break;
            }
            Some((ft, gt, dphi)) => {
                if ft > phi0 + config.c1 * alpha * dphi0 || (prev.alpha > 0.0 && ft >= prev.phi)
                {
                    bracket = Some((prev, ProbePoint { alpha, phi: ft, dphi }));
                    break;
                }
                if wolfe(alpha, ft, dphi) {
                    return Ok(SearchOutcome::Accepted { alpha, x_new: x.iter().zip(d).map(|(xi, di)| xi + alpha * di).collect(), f_new: ft, g_new: gt });
                }
                if dphi >= 0.0 {
                    bracket = Some((ProbePoint { alpha, phi: ft, dphi }, prev));
                    break;
                }
                prev = ProbePoint { alpha, phi: ft, dphi };
                alpha = (2.0 * alpha).min(1e10);
            }
        }
    }

    // Shrinking phase: `lo` always satisfies sufficient decrease with the
    // lowest phi seen; the Wolfe point lives between lo and hi.
    let fallback = |best: Option<(f64, f64, Vec<f64>)>, saw_nonfinite: bool| match best {
        Some((alpha, f_new, g_new)) => SearchOutcome::Accepted {
            alpha,
            x_new: x.iter().zip(d).map(|(xi, di)| xi + alpha * di).collect(),
            f_new,
            g_new,
        },
        None => SearchOutcome::Failed { saw_nonfinite },
    };
    let Some((mut lo, mut hi)) = bracket else {
        return Ok(fallback(best, saw_nonfinite));
    };
    while budget > 0 {
        let alpha = interpolate(&lo, &hi);
        match probe(alpha, &mut budget, &mut best)? {
            None => {
                saw_nonfinite = true;
                hi = ProbePoint { alpha, phi: f64::INFINITY, dphi: f64::NAN };
            }
            Some((ft, gt, dphi)) => {
                if ft > phi0 + config.c1 * alpha * dphi0 || ft >= lo.phi {
                    hi = ProbePoint { alpha, phi: ft, dphi };
                } else {
                    if wolfe(alpha, ft, dphi) {
                        return Ok(SearchOutcome::Accepted { alpha, x_new: x.iter().zip(d).map(|(xi, di)| xi + alpha * di).collect(), f_new: ft, g_new: gt });
                    }
                    if dphi * (hi.alpha - lo.alpha) >= 0.0 {
                        hi = ProbePoint { ..lo };
                    }
                    lo = ProbePoint { alpha, phi: ft, dphi };
                }
            }
        }
        if (hi.alpha - lo.alpha).abs() < 1e-16 * lo.alpha.abs().max(1.0) {
            break;
        }
    }
    Ok(fallback(best, saw_nonfinite))
}

/// Minimizer of the cubic fit through both probe points, safeguarded into
/// the inner fifth of the interval; bisection when the fit degenerates.
fn interpolate(lo: &ProbePoint, hi: &ProbePoint) -> f64 {
    let (a, b) = (lo.alpha, hi.alpha);
    let mid = 0.5 * (a + b);
    if !(hi.phi.is_finite() && hi.dphi.is_finite()) {
        return mid;
    }
    let d1 = lo.dphi + hi.dphi - 3.0 * (lo.phi - hi.phi) / (a - b);
    let disc = d1 * d1 - lo.dphi * hi.dphi;
    if disc < 0.0 {
        return mid;
    }
    let d2 = disc.sqrt().copysign(b - a);
    let alpha = b - (b - a) * (hi.dphi + d2 - d1) / (hi.dphi - lo.dphi + 2.0 * d2);
    let (min_a, max_a) = if a < b { (a, b) } else { (b, a) };
    let margin = 0.1 * (max_a - min_a);
    if !alpha.is_finite() || alpha < min_a + margin || alpha > max_a - margin {
        mid
    } else {
        alpha
    }
}
