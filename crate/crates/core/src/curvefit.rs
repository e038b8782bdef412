//! Trade-off curve fitting.
//!
//! A five-parameter logistic is fitted first; its high expressiveness can
//! produce non-concave shapes on sparse point sets, in which case the fit
//! falls back to the exponential family `y = -a e^(bx) + c`. Fitting is a
//! damped least-squares (Levenberg-Marquardt) loop with a numeric Jacobian
//! and multiple heuristic starts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CurveFamily {
    FiveParamLogistic,
    Exponential,
}

/// Accepted fit: family, parameters in family order, residual quality.
///
/// Parameter order is `(a, b, c, d, g)` for the logistic
/// `y = d + (a - d) / (1 + (x/c)^b)^g` and `(a, b, c)` for the exponential
/// `y = -a e^(bx) + c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveFit {
    pub family: CurveFamily,
    pub params: Vec<f64>,
    pub residual_rms: f64,
    pub concave: bool,
}

/// Evaluates a fitted family at `x`.
pub fn evaluate(family: CurveFamily, params: &[f64], x: f64) -> f64 {
    match family {
        CurveFamily::FiveParamLogistic => {
            let (a, b, c, d, g) = (params[0], params[1], params[2], params[3], params[4]);
            d + (a - d) / (1.0 + (x / c).powf(b)).powf(g)
        }
        CurveFamily::Exponential => {
            let (a, b, c) = (params[0], params[1], params[2]);
            -a * (b * x).exp() + c
        }
    }
}

const CONCAVITY_GRID: usize = 100;
const CONCAVITY_TOL: f64 = 1e-9;

/// Samples the fitted curve on a 100-point grid over `[lo, hi]` and checks
/// every second difference against the concavity tolerance.
fn is_concave(family: CurveFamily, params: &[f64], lo: f64, hi: f64) -> bool {
    let step = (hi - lo) / (CONCAVITY_GRID - 1) as f64;
    let ys: Vec<f64> = (0..CONCAVITY_GRID)
        .map(|i| evaluate(family, params, lo + step * i as f64))
        .collect();
    if ys.iter().any(|y| !y.is_finite()) {
        return false;
    }
    ys.windows(3).all(|w| w[2] - 2.0 * w[1] + w[0] <= CONCAVITY_TOL)
}

fn residual_rms(family: CurveFamily, params: &[f64], points: &[(f64, f64)]) -> f64 {
    let ss: f64 = points
        .iter()
        .map(|&(x, y)| {
            let r = evaluate(family, params, x) - y;
            r * r
        })
        .sum();
    (ss / points.len() as f64).sqrt()
}

/// Solves `A x = b` for a small dense system by Gaussian elimination with
/// partial pivoting. `A` is row-major `n x n`.
fn solve_dense(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Option<Vec<f64>> {
    for col in 0..n {
        let mut pivot = col;
        for row in (col + 1)..n {
            if a[row * n + col].abs() > a[pivot * n + col].abs() {
                pivot = row;
            }
        }
        if a[pivot * n + col].abs() < 1e-30 {
            return None;
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            b.swap(col, pivot);
        }
        let diag = a[col * n + col];
        for row in (col + 1)..n {
            let factor = a[row * n + col] / diag;
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                a[row * n + k] -= factor * a[col * n + k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in (row + 1)..n {
            acc -= a[row * n + k] * x[k];
        }
        x[row] = acc / a[row * n + row];
    }
    Some(x)
}

fn sum_squares(family: CurveFamily, params: &[f64], points: &[(f64, f64)]) -> f64 {
    let mut ss = 0.0;
    for &(x, y) in points {
        let r = evaluate(family, params, x) - y;
        if !r.is_finite() {
            return f64::INFINITY;
        }
        ss += r * r;
    }
    ss
}

/// Damped least-squares minimization from one start. Returns the refined
/// parameters and their sum of squares, or `None` when the start diverges.
fn levenberg_marquardt(
    family: CurveFamily,
    start: &[f64],
    points: &[(f64, f64)],
) -> Option<(Vec<f64>, f64)> {
    let n = start.len();
    let m = points.len();
    let mut params = start.to_vec();
    let mut ss = sum_squares(family, &params, points);
    if !ss.is_finite() {
        return None;
    }
    let mut mu = 1e-3;
    for _ in 0..200 {
        // Numeric Jacobian by central differences.
        let mut jac = vec![0.0; m * n];
        for j in 0..n {
            let h = 1e-6 * params[j].abs().max(1e-4);
            let mut plus = params.clone();
            plus[j] += h;
            let mut minus = params.clone();
            minus[j] -= h;
            for (i, &(x, _)) in points.iter().enumerate() {
                let fp = evaluate(family, &plus, x);
                let fm = evaluate(family, &minus, x);
                jac[i * n + j] = (fp - fm) / (2.0 * h);
            }
        }
        if jac.iter().any(|v| !v.is_finite()) {
            return None;
        }
        // Normal equations.
        let mut jtj = vec![0.0; n * n];
        let mut jtr = vec![0.0; n];
        for (i, &(x, y)) in points.iter().enumerate() {
            let r = evaluate(family, &params, x) - y;
            for j in 0..n {
                jtr[j] += jac[i * n + j] * r;
                for k in 0..n {
                    jtj[j * n + k] += jac[i * n + j] * jac[i * n + k];
                }
            }
        }

        let mut improved = false;
        for _ in 0..20 {
            let mut damped = jtj.clone();
            for j in 0..n {
                damped[j * n + j] += mu * jtj[j * n + j].max(1e-12);
            }
            let rhs: Vec<f64> = jtr.iter().map(|v| -v).collect();
            let Some(delta) = solve_dense(damped, rhs, n) else {
                mu *= 4.0;
                continue;
            };
            let candidate: Vec<f64> = params.iter().zip(&delta).map(|(p, d)| p + d).collect();
            let candidate_ss = sum_squares(family, &candidate, points);
            if candidate_ss < ss {
                let gain = ss - candidate_ss;
                params = candidate;
                ss = candidate_ss;
                mu = (mu / 3.0).max(1e-12);
                improved = true;
                if gain < 1e-14 * (1.0 + ss) {
                    return Some((params, ss));
                }
                break;
            }
            mu *= 4.0;
            if mu > 1e12 {
                return Some((params, ss));
            }
        }
        if !improved {
            return Some((params, ss));
        }
    }
    Some((params, ss))
}

fn fit_family(family: CurveFamily, starts: &[Vec<f64>], points: &[(f64, f64)]) -> Option<(Vec<f64>, f64)> {
    let mut best: Option<(Vec<f64>, f64)> = None;
    for start in starts {
        if let Some((p, ss)) = levenberg_marquardt(family, start, points) {
            if best.as_ref().is_none_or(|(_, b)| ss < *b) {
                best = Some((p, ss));
            }
        }
    }
    best
}

fn logistic_starts(points: &[(f64, f64)]) -> Vec<Vec<f64>> {
    let mut xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let first_y = points
        .iter()
        .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
        .map(|p| p.1)
        .unwrap_or(0.0);
    let last_y = points
        .iter()
        .max_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
        .map(|p| p.1)
        .unwrap_or(1.0);
    let c0 = xs[xs.len() / 2].max(1e-6);
    [0.5, 1.0, 2.0, 4.0]
        .iter()
        .flat_map(|&b| {
            [(first_y, last_y), (last_y, first_y)]
                .into_iter()
                .map(move |(a, d)| vec![a, b, c0, d, 1.0])
        })
        .collect()
}

fn exponential_starts(points: &[(f64, f64)]) -> Vec<Vec<f64>> {
    let min_y = points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let max_y = points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let spread = (max_y - min_y).max(1e-3);
    vec![
        vec![spread, -1.0, max_y],
        vec![spread, 0.5, max_y],
        vec![-spread, 1.0, min_y],
        vec![-spread, -0.5, min_y],
        vec![1.0, 1.0, 0.0],
        vec![1.0, -1.0, 1.0],
    ]
}

/// Fits the trade-off points: five-parameter logistic first, exponential
/// fallback when the logistic fit is not concave over the data range (or
/// cannot be fitted at all).
pub fn fit_tradeoff(points: &[(f64, f64)]) -> Result<CurveFit> {
    if points.len() < 3 {
        return Err(Error::Input(format!(
            "curve fitting needs at least 3 points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::Input("curve fitting points must be finite".into()));
    }
    let lo = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return Err(Error::Input("curve fitting needs at least two distinct x values".into()));
    }

    // The logistic needs a positive x domain and enough points for its five
    // parameters.
    let mut logistic_failure = String::from("skipped");
    if points.len() >= 5 && lo > 0.0 {
        match fit_family(CurveFamily::FiveParamLogistic, &logistic_starts(points), points) {
            Some((params, _)) => {
                if is_concave(CurveFamily::FiveParamLogistic, &params, lo, hi) {
                    let rms = residual_rms(CurveFamily::FiveParamLogistic, &params, points);
                    return Ok(CurveFit {
                        family: CurveFamily::FiveParamLogistic,
                        params,
                        residual_rms: rms,
                        concave: true,
                    });
                }
                logistic_failure = "fit not concave over the data range".into();
            }
            None => logistic_failure = "did not converge".into(),
        }
    }

    match fit_family(CurveFamily::Exponential, &exponential_starts(points), points) {
        Some((params, _)) => {
            let concave = is_concave(CurveFamily::Exponential, &params, lo, hi);
            let rms = residual_rms(CurveFamily::Exponential, &params, points);
            Ok(CurveFit { family: CurveFamily::Exponential, params, residual_rms: rms, concave })
        }
        None => Err(Error::Fit(format!(
            "no family converged: logistic {logistic_failure}; exponential did not converge"
        ))),
    }
}
