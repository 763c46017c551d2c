//! Template learning, window selection and the per-symbol Poisson profile fit.
//!
//! The mean model over the retained window is `μ(m) = a u(m) + b` (plus an
//! optional known offset used by decision feedback), fitted by minimising the
//! Poisson negative log-likelihood `Σ μ - y ln μ` subject to `a ≥ 0`, `b ≥ 0`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::ensure;
use crate::{lit, Error, Real, Result};

/// Positivity floor on the fitted offset.
pub const OFFSET_FLOOR: f64 = 1e-8;
const MAX_ITER: usize = 100;
const GRAD_TOL: f64 = 1e-10;
/// Below this coefficient of variation over the window, `[u, 1]` is treated
/// as rank-deficient and only the scale is fitted.
const DEGENERATE_CV: f64 = 1e-6;
/// Absorbs rounding in the cumulative energy when comparing to α and 1-β.
const ENERGY_EPS: f64 = 1e-12;

/// Normalised mean shape plus the retained window `m1..=m2` (1-based).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Template<T> {
    pub u: Vec<T>,
    pub m1: usize,
    pub m2: usize,
    pub alpha: T,
    pub beta: T,
}

impl<T: Real> Template<T> {
    /// Normalises `shape` to unit mean and selects the window from its
    /// cumulative energy.
    pub fn from_shape(shape: &[T], alpha: T, beta: T) -> Result<Self> {
        ensure(!shape.is_empty(), || Error::Contract("empty template shape".into()))?;
        ensure(alpha > T::zero() && alpha < T::one() && beta > T::zero() && beta < T::one(), || {
            Error::Param(format!("trim fractions must lie in (0, 1), got alpha={alpha} beta={beta}"))
        })?;
        ensure(shape.iter().all(|x| x.is_finite() && *x >= T::zero()), || {
            Error::Calibration("template shape must be finite and >= 0".into())
        })?;
        let total: T = shape.iter().copied().sum();
        ensure(total > T::zero(), || {
            Error::Calibration("calibration means are zero at every offset".into())
        })?;
        let mean = total / T::from_usize(shape.len()).unwrap();
        let u: Vec<T> = shape.iter().map(|&x| x / mean).collect();
        let (m1, m2) = select_window(&u, alpha, beta)?;
        Ok(Self { u, m1, m2, alpha, beta })
    }

    /// 0-based index range of the window.
    pub fn window(&self) -> Range<usize> {
        self.m1 - 1..self.m2
    }

    pub fn m_eff(&self) -> usize {
        self.m2 + 1 - self.m1
    }

    pub fn samples(&self) -> usize {
        self.u.len()
    }

    pub fn u_window(&self) -> &[T] {
        &self.u[self.window()]
    }

    /// `Ȳ_{k,J}`: the mean count over the window.
    pub fn windowed_mean(&self, counts: &[T]) -> T {
        let w = &counts[self.window()];
        w.iter().copied().sum::<T>() / T::from_usize(w.len()).unwrap()
    }

    /// Whether `[u, 1]` is numerically rank-deficient over the window.
    pub fn is_degenerate(&self) -> bool {
        let u = self.u_window();
        let n = T::from_usize(u.len()).unwrap();
        let mean = u.iter().copied().sum::<T>() / n;
        let var = u.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
        mean <= T::zero() || var.sqrt() / mean < lit(DEGENERATE_CV)
    }

    /// Number of mean-profile parameters fitted per symbol.
    pub fn parameters(&self) -> usize {
        if self.is_degenerate() {
            1
        } else {
            2
        }
    }
}

impl Template<f64> {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(text)?;
        ensure(t.m1 >= 1 && t.m1 <= t.m2 && t.m2 <= t.u.len(), || {
            Error::Window(format!("invalid stored window {}..={}", t.m1, t.m2))
        })?;
        Ok(t)
    }
}

/// `m1 = min{m : C(m) ≥ α}`, `m2 = max{m : C(m) ≤ 1 - β}` with
/// `C(m) = Σ_{j≤m} u(j) / Σ_j u(j)`, 1-based.
pub fn select_window<T: Real>(u: &[T], alpha: T, beta: T) -> Result<(usize, usize)> {
    let total: T = u.iter().copied().sum();
    let eps: T = lit(ENERGY_EPS);
    let mut acc = T::zero();
    let mut m1 = None;
    let mut m2 = None;
    for (i, &x) in u.iter().enumerate() {
        acc = acc + x;
        let c = acc / total;
        if m1.is_none() && c >= alpha - eps {
            m1 = Some(i + 1);
        }
        if c <= T::one() - beta + eps {
            m2 = Some(i + 1);
        }
    }
    let p = 2;
    match (m1, m2) {
        (Some(a), Some(b)) if b >= a + p => Ok((a, b)),
        _ => Err(Error::Window(format!(
            "energy trim alpha={alpha} beta={beta} leaves fewer than {} samples (m1={m1:?}, m2={m2:?})",
            p + 1
        ))),
    }
}

/// Learns the template from calibration count vectors (one per symbol).
pub fn learn_template<T: Real, C: AsRef<[T]>>(calibration: &[C], alpha: T, beta: T) -> Result<Template<T>> {
    ensure(calibration.len() >= 10, || {
        Error::Calibration(format!("need at least 10 calibration symbols, got {}", calibration.len()))
    })?;
    let m = calibration[0].as_ref().len();
    ensure(calibration.iter().all(|c| c.as_ref().len() == m), || {
        Error::Contract("calibration symbols have unequal lengths".into())
    })?;
    let n = T::from_usize(calibration.len()).unwrap();
    let means: Vec<T> = (0..m)
        .map(|j| calibration.iter().map(|c| c.as_ref()[j]).sum::<T>() / n)
        .collect();
    Template::from_shape(&means, alpha, beta)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileFit<T> {
    pub a_hat: T,
    pub b_hat: T,
    /// Fitted parameter count: 2, or 1 for a degenerate template.
    pub p: usize,
    pub converged: bool,
    /// Fitted mean over the window (including any offset).
    pub mu_hat: Vec<T>,
}

/// Fits `a u(m) + b` to one symbol's counts over the template window.
pub fn fit_profile<T: Real>(counts: &[T], template: &Template<T>) -> Result<ProfileFit<T>> {
    fit_profile_with_offset(counts, template, None)
}

/// As [`fit_profile`] with a known nonnegative per-sample offset added to the
/// mean model (full length `M`).
pub fn fit_profile_with_offset<T: Real>(
    counts: &[T],
    template: &Template<T>,
    offset: Option<&[T]>,
) -> Result<ProfileFit<T>> {
    ensure(counts.len() == template.samples(), || {
        Error::Contract(format!(
            "expected {} counts, got {}",
            template.samples(),
            counts.len()
        ))
    })?;
    ensure(counts.iter().all(|y| y.is_finite() && *y >= T::zero()), || {
        Error::Domain("counts must be finite and >= 0".into())
    })?;
    let win = template.window();
    let y = &counts[win.clone()];
    let u = template.u_window();
    let o: Vec<T> = match offset {
        Some(o) => {
            ensure(o.len() == template.samples() && o.iter().all(|x| *x >= T::zero()), || {
                Error::Contract("offset must have length M and be >= 0".into())
            })?;
            o[win].to_vec()
        }
        None => vec![T::zero(); y.len()],
    };
    let problem = Problem { y, u, o: &o };
    let floor: T = lit(OFFSET_FLOOR);

    let (a, b, p, converged) = if template.is_degenerate() {
        let (a, ok) = problem.solve_scale(T::zero());
        if a > T::zero() || problem.offset_positive() {
            (a, T::zero(), 1, ok)
        } else {
            (T::zero(), floor, 1, true)
        }
    } else if y.iter().all(|v| *v == T::zero()) {
        (T::zero(), floor, 2, true)
    } else {
        let (a, b, ok) = problem.solve(floor);
        (a, b, 2, ok)
    };
    let mu_hat = problem.mean(a, b);
    let converged = converged && mu_hat.iter().all(|m| m.is_finite() && *m > T::zero());
    Ok(ProfileFit { a_hat: a, b_hat: b, p, converged, mu_hat })
}

/// `Ỹ_m = Y_m - μ̂(m)` over the window.
pub fn residuals<T: Real>(counts: &[T], fit: &ProfileFit<T>, template: &Template<T>) -> Vec<T> {
    counts[template.window()]
        .iter()
        .zip(&fit.mu_hat)
        .map(|(&y, &mu)| y - mu)
        .collect()
}

/// Poisson negative log-likelihood `Σ μ - y ln μ` of `a u + b + o`.
pub fn profile_objective<T: Real>(counts: &[T], template: &Template<T>, a: T, b: T) -> T {
    let y = &counts[template.window()];
    let o = vec![T::zero(); y.len()];
    Problem { y, u: template.u_window(), o: &o }.objective(a, b)
}

struct Problem<'a, T> {
    y: &'a [T],
    u: &'a [T],
    o: &'a [T],
}

impl<T: Real> Problem<'_, T> {
    fn mean(&self, a: T, b: T) -> Vec<T> {
        self.u.iter().zip(self.o).map(|(&u, &o)| a * u + b + o).collect()
    }

    fn offset_positive(&self) -> bool {
        self.o.iter().all(|o| *o > T::zero())
    }

    fn objective(&self, a: T, b: T) -> T {
        let mut f = T::zero();
        for ((&y, &u), &o) in self.y.iter().zip(self.u).zip(self.o) {
            let mu = a * u + b + o;
            if y > T::zero() {
                if mu <= T::zero() {
                    return T::infinity();
                }
                f = f + mu - y * mu.ln();
            } else {
                f = f + mu;
            }
        }
        f
    }

    /// `(∂f/∂a, ∂f/∂b, ∂²f/∂a², ∂²f/∂a∂b, ∂²f/∂b²)`.
    fn derivatives(&self, a: T, b: T) -> [T; 5] {
        let mut d = [T::zero(); 5];
        for ((&y, &u), &o) in self.y.iter().zip(self.u).zip(self.o) {
            let mu = a * u + b + o;
            let r = T::one() - y / mu;
            let w = y / (mu * mu);
            d[0] = d[0] + r * u;
            d[1] = d[1] + r;
            d[2] = d[2] + w * u * u;
            d[3] = d[3] + w * u;
            d[4] = d[4] + w;
        }
        d
    }

    fn tolerance(&self) -> T {
        lit::<T>(GRAD_TOL) * self.y.iter().copied().sum::<T>().max(T::one())
    }

    /// Convex minimisation over `a ≥ 0`, `b ≥ floor`: Newton in `(ln a, ln b)`
    /// for the interior, 1-D solves on the two faces, lowest objective wins.
    fn solve(&self, floor: T) -> (T, T, bool) {
        let tol = self.tolerance();
        let mut best: Option<(T, T, T, bool)> = None;
        let mut consider = |a: T, b: T, ok: bool, f: T| {
            if f.is_finite() && best.is_none_or(|(_, _, fb, _)| f < fb) {
                best = Some((a, b, f, ok));
            }
        };
        if let Some((a, b)) = self.newton_log(floor) {
            consider(a, b, true, self.objective(a, b));
        }
        let (a_face, ok_a) = self.solve_scale(floor);
        let kkt = self.derivatives(a_face, floor)[1] >= -tol;
        consider(a_face, floor, ok_a && kkt, self.objective(a_face, floor));
        let (b_face, ok_b) = self.solve_offset(floor);
        let kkt = self.derivatives(T::zero(), b_face)[0] >= -tol;
        consider(T::zero(), b_face, ok_b && kkt, self.objective(T::zero(), b_face));
        match best {
            Some((a, b, _, ok)) => (a, b, ok),
            None => (T::zero(), floor, false),
        }
    }

    fn newton_log(&self, floor: T) -> Option<(T, T)> {
        let tol = self.tolerance();
        let n = T::from_usize(self.y.len()).unwrap();
        let ybar = self.y.iter().copied().sum::<T>() / n;
        let ubar = self.u.iter().copied().sum::<T>() / n;
        let half: T = lit(0.5);
        let mut th = [(half * ybar / ubar).max(floor).ln(), (half * ybar).max(floor).ln()];
        let ln_floor = floor.ln();
        let ln_tiny = (lit::<T>(1e-12) * ybar.max(T::one())).ln();
        for _ in 0..MAX_ITER {
            let (a, b) = (th[0].exp(), th[1].exp());
            let d = self.derivatives(a, b);
            let g = [a * d[0], b * d[1]];
            if g[0].abs() <= tol && g[1].abs() <= tol {
                return Some((a, b));
            }
            let h11 = a * a * d[2] + g[0];
            let h12 = a * b * d[3];
            let h22 = b * b * d[4] + g[1];
            let det = h11 * h22 - h12 * h12;
            let step = if h11 > T::zero() && det > T::zero() {
                [-(h22 * g[0] - h12 * g[1]) / det, -(h11 * g[1] - h12 * g[0]) / det]
            } else {
                // Coordinate descent on the diagonal curvature.
                let c = |gi: T, hi: T| if hi > T::zero() { -gi / hi } else { -gi.signum() };
                [c(g[0], h11), c(g[1], h22)]
            };
            let f0 = self.objective(a, b);
            let slope = g[0] * step[0] + g[1] * step[1];
            let pd = h11 > T::zero() && det > T::zero();
            if pd && -slope <= lit::<T>(1e-10) * f0.abs().max(T::one()) {
                // Inside the quadratic region the objective no longer resolves
                // the decrease; take the full Newton step.
                th = [th[0] + step[0], th[1] + step[1]];
                continue;
            }
            let mut t = T::one();
            let mut moved = false;
            for _ in 0..60 {
                let cand = [th[0] + t * step[0], th[1] + t * step[1]];
                let f1 = self.objective(cand[0].exp(), cand[1].exp());
                if f1 <= f0 + lit::<T>(1e-4) * t * slope {
                    th = cand;
                    moved = true;
                    break;
                }
                t = t * half;
            }
            if !moved {
                return None;
            }
            if th[1] < ln_floor || th[0] < ln_tiny {
                return None;
            }
        }
        None
    }

    /// Minimises over `a ≥ 0` with `b` fixed.
    fn solve_scale(&self, b: T) -> (T, bool) {
        let grad = |a: T| -> (T, T) {
            let d = self.derivatives(a, b);
            (d[0], d[2])
        };
        let total_y: T = self.y.iter().copied().sum();
        let total_u: T = self.u.iter().copied().sum();
        if b == T::zero() && !self.offset_positive() {
            // Closed form: stationarity of Σ a u - y ln(a u).
            return (total_y / total_u, true);
        }
        solve_monotone(grad, (total_y / total_u).max(T::one()), self.tolerance())
    }

    /// Minimises over `b ≥ floor` with `a = 0`.
    fn solve_offset(&self, floor: T) -> (T, bool) {
        let grad = |b: T| -> (T, T) {
            let d = self.derivatives(T::zero(), b);
            (d[1], d[4])
        };
        let (g0, _) = grad(floor);
        if g0 >= T::zero() {
            return (floor, true);
        }
        let n = T::from_usize(self.y.len()).unwrap();
        let start = (self.y.iter().copied().sum::<T>() / n).max(T::one());
        let (b, ok) = solve_monotone(|b| grad(b + floor), start, self.tolerance());
        (b + floor, ok)
    }
}

/// Root of an increasing derivative on `x ≥ 0` (or `0` if it is already
/// nonnegative there): bracketing plus safeguarded Newton.
fn solve_monotone<T: Real>(grad: impl Fn(T) -> (T, T), start: T, tol: T) -> (T, bool) {
    let (g_lo, _) = grad(T::zero());
    if g_lo.is_finite() && g_lo >= T::zero() {
        return (T::zero(), true);
    }
    let two: T = lit(2.0);
    let mut lo = T::zero();
    let mut hi = start;
    let mut expand = 0;
    while grad(hi).0 < T::zero() {
        lo = hi;
        hi = hi * two;
        expand += 1;
        if expand > 200 {
            return (hi, false);
        }
    }
    let mut x = (lo + hi) / two;
    for _ in 0..200 {
        let (g, h) = grad(x);
        if g.abs() <= tol {
            return (x, true);
        }
        if g < T::zero() {
            lo = x;
        } else {
            hi = x;
        }
        let newton = x - g / h;
        x = if h > T::zero() && newton > lo && newton < hi {
            newton
        } else {
            (lo + hi) / two
        };
        if hi - lo <= lit::<T>(1e-15) * hi {
            return (x, true);
        }
    }
    (x, false)
}
