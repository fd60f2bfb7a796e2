//! Adaptive Simpson quadrature with a hard recursion-depth limit.

use crate::error::QuadratureError;

/// Default recursion limit for [`adaptive_simpson`].
pub const MAX_DEPTH: u32 = 60;

/// Integrates `f` over `[a, b]` to absolute tolerance `abs_tol`.
///
/// Uses the classical Lyness acceptance test `|S₂ − S₁| ≤ 15·tol` with
/// Richardson correction; the tolerance is halved on each bisection.
pub fn adaptive_simpson<F>(f: F, a: f64, b: f64, abs_tol: f64) -> Result<f64, QuadratureError>
where
    F: Fn(f64) -> f64,
{
    adaptive_simpson_depth(f, a, b, abs_tol, MAX_DEPTH)
}

pub fn adaptive_simpson_depth<F>(
    f: F,
    a: f64,
    b: f64,
    abs_tol: f64,
    max_depth: u32,
) -> Result<f64, QuadratureError>
where
    F: Fn(f64) -> f64,
{
    if a == b {
        return Ok(0.0);
    }
    if b < a {
        return adaptive_simpson_depth(f, b, a, abs_tol, max_depth).map(|v| -v);
    }
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    recurse(&f, a, b, fa, fm, fb, whole, abs_tol, max_depth, a, b)
}

#[allow(clippy::too_many_arguments)]
fn recurse<F>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth_left: u32,
    lo: f64,
    hi: f64,
) -> Result<f64, QuadratureError>
where
    F: Fn(f64) -> f64,
{
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if !delta.is_finite() {
        return Err(QuadratureError::NonFinite { a, b });
    }
    if delta.abs() <= 15.0 * tol {
        return Ok(left + right + delta / 15.0);
    }
    if depth_left == 0 || m <= a || m >= b {
        return Err(QuadratureError::NotConverged { a: lo, b: hi });
    }
    let l = recurse(
        f,
        a,
        m,
        fa,
        flm,
        fm,
        left,
        0.5 * tol,
        depth_left - 1,
        lo,
        hi,
    )?;
    let r = recurse(
        f,
        m,
        b,
        fm,
        frm,
        fb,
        right,
        0.5 * tol,
        depth_left - 1,
        lo,
        hi,
    )?;
    Ok(l + r)
}

/// Integrates over `[start, start + reach]` by splitting at
/// `start + width·{1, 2, 4, …}` so that slowly decaying tails get
/// geometrically growing panels. The tolerance is spread evenly.
pub fn integrate_geometric_panels<F>(
    f: F,
    start: f64,
    width: f64,
    reach: f64,
    abs_tol: f64,
) -> Result<f64, QuadratureError>
where
    F: Fn(f64) -> f64,
{
    let mut edges = vec![start];
    let mut w = width;
    while w < reach {
        edges.push(start + w);
        w *= 2.0;
    }
    edges.push(start + reach);
    let n = (edges.len() - 1) as f64;
    let mut total = 0.0;
    for pair in edges.windows(2) {
        total += adaptive_simpson(&f, pair[0], pair[1], abs_tol / n)?;
    }
    Ok(total)
}
