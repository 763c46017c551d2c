//! The profiled excess-dispersion detector.
//!
//! Per symbol: gate on the windowed mean, fit `a u + b` over the window, form
//! `ψ_m = ((y - μ̂)² - y) / μ̂²` and average it with `M_eff - p` degrees of
//! freedom. Thresholds are empirical order statistics on calibration data.

use serde::{Deserialize, Serialize};

use crate::error::ensure;
use crate::profiling::{fit_profile_with_offset, ProfileFit, Template};
use crate::{Bit, Error, Real, Result};

/// Normalised excess-dispersion contribution `((y - μ)² - y) / μ²`.
pub fn psi_contribution<T: Real>(y: T, mu: T) -> Result<T> {
    ensure(mu > T::zero() && mu.is_finite(), || {
        Error::Domain(format!("fitted mean must be > 0, got {mu}"))
    })?;
    let d = y - mu;
    Ok((d * d - y) / (mu * mu))
}

/// `ψ̂` over the window for a converged fit.
pub fn psi_sequence<T: Real>(counts: &[T], fit: &ProfileFit<T>, template: &Template<T>) -> Result<Vec<T>> {
    ensure(fit.converged, || Error::Contract("profile fit did not converge".into()))?;
    counts[template.window()]
        .iter()
        .zip(&fit.mu_hat)
        .map(|(&y, &mu)| psi_contribution(y, mu))
        .collect()
}

/// `T = Σ_J ψ̂ / (M_eff - p)`.
pub fn t_delta<T: Real>(counts: &[T], fit: &ProfileFit<T>, template: &Template<T>) -> Result<T> {
    let m_eff = template.m_eff();
    ensure(m_eff > fit.p, || {
        Error::Contract(format!("window of {m_eff} samples leaves no residual degrees of freedom"))
    })?;
    let psi = psi_sequence(counts, fit, template)?;
    Ok(psi.into_iter().sum::<T>() / T::from_usize(m_eff - fit.p).unwrap())
}

/// 1-based order-statistic index `⌈q n⌉`.
pub fn order_index(q: f64, n: usize) -> usize {
    (q * n as f64 - 1e-9).ceil().max(0.0) as usize
}

/// Order statistic at `⌈q n⌉` of `values`, or `None` when that index is 0.
pub fn empirical_quantile<T: Real>(values: &[T], q: f64) -> Option<T> {
    let mut v: Vec<T> = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let k = order_index(q, v.len()).min(v.len());
    (k > 0).then(|| v[k - 1])
}

/// Activity gate: a symbol passes when `Ȳ_J > τ_Y`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateConfig<T> {
    pub tau_y: T,
    pub alpha_gate: f64,
}

impl<T: Real> GateConfig<T> {
    pub fn passes(&self, windowed_mean: T) -> bool {
        windowed_mean > self.tau_y
    }

    /// A gate that never closes on nonnegative data.
    pub fn open() -> Self {
        Self { tau_y: -T::one(), alpha_gate: 0.0 }
    }
}

/// Minimum number of symbols for gate calibration.
pub const MIN_GATE_SYMBOLS: usize = 100;

/// `τ_Y` as the `α_gate` order statistic of H0 windowed means.
pub fn calibrate_gate_from_means<T: Real>(means: &[T], alpha_gate: f64) -> Result<GateConfig<T>> {
    ensure((0.0..1.0).contains(&alpha_gate), || {
        Error::Param(format!("alpha_gate must lie in [0, 1), got {alpha_gate}"))
    })?;
    ensure(means.len() >= MIN_GATE_SYMBOLS, || {
        Error::Calibration(format!(
            "gate calibration needs at least {MIN_GATE_SYMBOLS} H0 symbols, got {}",
            means.len()
        ))
    })?;
    let tau_y = empirical_quantile(means, alpha_gate).unwrap_or_else(T::zero).max(T::zero());
    Ok(GateConfig { tau_y, alpha_gate })
}

/// Gate calibration from H0 count vectors.
pub fn calibrate_gate<T: Real, C: AsRef<[T]>>(
    h0_counts: &[C],
    alpha_gate: f64,
    template: &Template<T>,
) -> Result<GateConfig<T>> {
    let means: Vec<T> = h0_counts.iter().map(|c| template.windowed_mean(c.as_ref())).collect();
    calibrate_gate_from_means(&means, alpha_gate)
}

/// Decide 1 iff `κ T > κ τ_T`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DispersionThreshold<T> {
    pub tau_t: T,
    pub pfa_target: f64,
    pub kappa: i8,
}

impl<T: Real> DispersionThreshold<T> {
    pub fn decide(&self, statistic: T) -> Bit {
        let k = if self.kappa < 0 { -T::one() } else { T::one() };
        u8::from(k * statistic > k * self.tau_t)
    }
}

/// `τ_T` from gated H0 statistics: the `⌈(1 - P★) n⌉` order statistic of
/// `κ T`. `κ` is the sign of the H1-minus-H0 mean when H1 data is given,
/// else `+1`.
pub fn calibrate_threshold<T: Real>(
    h0_stats: &[T],
    pfa_target: f64,
    h1_stats: Option<&[T]>,
) -> Result<DispersionThreshold<T>> {
    ensure(pfa_target > 0.0 && pfa_target < 1.0, || {
        Error::Param(format!("target false-alarm rate must lie in (0, 1), got {pfa_target}"))
    })?;
    let need = (10.0 / pfa_target).ceil() as usize;
    ensure(h0_stats.len() >= need, || {
        Error::Calibration(format!(
            "threshold calibration at P_FA={pfa_target} needs {need} gated H0 statistics, got {}",
            h0_stats.len()
        ))
    })?;
    let kappa: i8 = match h1_stats {
        Some(h1) if !h1.is_empty() => {
            let mean = |v: &[T]| v.iter().copied().sum::<T>() / T::from_usize(v.len()).unwrap();
            if mean(h1) < mean(h0_stats) {
                -1
            } else {
                1
            }
        }
        _ => 1,
    };
    let k = if kappa < 0 { -T::one() } else { T::one() };
    let oriented: Vec<T> = h0_stats.iter().map(|&t| k * t).collect();
    let q = empirical_quantile(&oriented, 1.0 - pfa_target)
        .unwrap_or_else(|| oriented.iter().copied().fold(T::infinity(), T::min));
    Ok(DispersionThreshold { tau_t: k * q, pfa_target, kappa })
}

/// Which branch of the decision rule produced the verdict.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    GateClosed,
    FitFailed,
    Threshold,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorVerdict<T> {
    pub decision: Bit,
    /// Whether the activity gate passed.
    pub gated: bool,
    pub statistic: Option<T>,
    pub rule: Rule,
}

impl<T> DetectorVerdict<T> {
    pub fn gate_closed() -> Self {
        Self { decision: 0, gated: false, statistic: None, rule: Rule::GateClosed }
    }
}

/// The per-symbol decision rule. `gate = None` disables gating.
pub fn detect<T: Real>(
    counts: &[T],
    template: &Template<T>,
    gate: Option<&GateConfig<T>>,
    thr: &DispersionThreshold<T>,
) -> Result<DetectorVerdict<T>> {
    detect_with_offset(counts, template, gate, thr, None)
}

/// [`detect`] with a known offset in the mean model. The gate always sees
/// the raw windowed mean, the quantity it was calibrated on.
pub fn detect_with_offset<T: Real>(
    counts: &[T],
    template: &Template<T>,
    gate: Option<&GateConfig<T>>,
    thr: &DispersionThreshold<T>,
    offset: Option<&[T]>,
) -> Result<DetectorVerdict<T>> {
    if gate.is_some_and(|g| !g.passes(template.windowed_mean(counts))) {
        return Ok(DetectorVerdict::gate_closed());
    }
    let fit = fit_profile_with_offset(counts, template, offset)?;
    if !fit.converged || template.m_eff() <= fit.p {
        return Ok(DetectorVerdict { decision: 0, gated: true, statistic: None, rule: Rule::FitFailed });
    }
    let t = t_delta(counts, &fit, template)?;
    Ok(DetectorVerdict { decision: thr.decide(t), gated: true, statistic: Some(t), rule: Rule::Threshold })
}

/// Unconditional false-alarm probability `Pr(G | H0) · P_FA★`.
pub fn gate_integrated_pfa<T: Real>(gate_pass_rate_h0: T, pfa_conditional: T) -> Result<T> {
    let unit = |x: T| x >= T::zero() && x <= T::one();
    ensure(unit(gate_pass_rate_h0) && unit(pfa_conditional), || {
        Error::Domain("probabilities must lie in [0, 1]".into())
    })?;
    Ok(gate_pass_rate_h0 * pfa_conditional)
}

/// Statistic of one symbol without gating; `None` if the fit fails.
pub fn statistic<T: Real>(counts: &[T], template: &Template<T>) -> Result<Option<T>> {
    let fit = fit_profile_with_offset(counts, template, None)?;
    if !fit.converged || template.m_eff() <= fit.p {
        return Ok(None);
    }
    t_delta(counts, &fit, template).map(Some)
}

/// Half-width of a binomial confidence band: `z sqrt(p (1 - p) / n)`.
pub fn binomial_se(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n.max(1) as f64).sqrt()
}
