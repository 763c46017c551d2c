//! Gaussian working characterisation of the dispersion statistic, HAC
//! long-run variance, ROC/BER approximations, separability metrics and the
//! oracle/profiling diagnostics.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::counting::poisson;
use crate::error::ensure;
use crate::physics::{kernel_unchecked, ChannelParams};
use crate::profiling::Template;
use crate::{lit, Error, Real, Result};

/// Gaussian tail `Q(x) = P(Z > x)`.
pub fn q_function<T: Real>(x: T) -> T {
    lit(q64(x.to_f64().unwrap()))
}

fn q64(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

fn phi64(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Inverse tail `Q⁻¹(p)`: Acklam's rational approximation of the normal
/// quantile, refined by one Newton step on `Q`.
pub fn q_inv<T: Real>(p: T) -> Result<T> {
    let p = p.to_f64().unwrap();
    ensure(p > 0.0 && p < 1.0, || Error::Domain(format!("Q⁻¹ needs p in (0, 1), got {p}")))?;
    let mut x = -acklam(p);
    // Newton on Q(x) - p with Q' = -φ.
    let f = q64(x) - p;
    x += f / phi64(x);
    Ok(lit(x))
}

/// Lower-tail normal quantile (Acklam, relative error below 1.2e-9).
fn acklam(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;
    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    if p < P_LOW {
        tail((-2.0 * p.ln()).sqrt())
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    }
}

/// Bartlett-weighted long-run variance `γ(0) + 2 Σ_{ℓ≤L} (1 - ℓ/(L+1)) γ(ℓ)`.
pub fn bartlett_lrv<T: Real>(gamma: &[T], lag: usize) -> T {
    let l1 = T::from_usize(lag + 1).unwrap();
    let two: T = lit(2.0);
    (1..=lag.min(gamma.len().saturating_sub(1))).fold(gamma[0], |acc, l| {
        acc + two * (T::one() - T::from_usize(l).unwrap() / l1) * gamma[l]
    })
}

/// Consecutive sub-threshold autocorrelations required by the lag rule.
pub const LAG_RUN: usize = 3;
pub const DEFAULT_MAX_LAG: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrvEstimate<T> {
    /// `γ̂(ℓ)` for `ℓ = 0..` at least the selected lag.
    pub gamma: Vec<T>,
    /// Selected truncation lag `L_s`.
    pub lag: usize,
    pub omega2: T,
    /// `ω̂² / γ̂(0)` (unclipped).
    pub inflation: T,
    pub n_symbols: usize,
}

impl<T: Real> LrvEstimate<T> {
    /// Pools per-symbol centred sequences (all of length `M_eff`) with
    /// normalisation `|K| (M_eff - ℓ)` and applies the Bartlett kernel up to the
    /// lag chosen by the `2/sqrt(|K| M_eff)` rule, capped at `max_lag`.
    pub fn estimate<S: AsRef<[T]>>(sequences: &[S], max_lag: usize) -> Result<Self> {
        ensure(!sequences.is_empty(), || Error::Contract("no sequences".into()))?;
        let m_eff = sequences[0].as_ref().len();
        ensure(sequences.iter().all(|s| s.as_ref().len() == m_eff), || {
            Error::Contract("sequences must share the window length".into())
        })?;
        ensure(max_lag < m_eff, || {
            Error::Contract(format!("maximum lag {max_lag} must be below M_eff = {m_eff}"))
        })?;
        let top = (max_lag + LAG_RUN).min(m_eff - 1);
        let gamma = pooled_autocovariance(sequences, top);
        let n = sequences.len() * m_eff;
        let threshold: T = lit(2.0 / (n as f64).sqrt());
        let lag = select_lag(&gamma, threshold, max_lag);
        let omega2 = bartlett_lrv(&gamma, lag);
        let inflation = if gamma[0] > T::zero() { omega2 / gamma[0] } else { T::one() };
        Ok(Self { gamma, lag, omega2, inflation, n_symbols: sequences.len() })
    }

    pub fn autocorrelation(&self) -> Vec<T> {
        self.gamma.iter().map(|&g| g / self.gamma[0]).collect()
    }

    /// `Ω̂` clipped below at 1.
    pub fn clipped_inflation(&self) -> T {
        self.inflation.max(T::one())
    }
}

/// `γ̂(ℓ)` for `ℓ = 0..=top` of within-symbol centred sequences.
pub fn pooled_autocovariance<T: Real, S: AsRef<[T]>>(sequences: &[S], top: usize) -> Vec<T> {
    let m_eff = sequences[0].as_ref().len();
    let mut acc = vec![T::zero(); top + 1];
    let mut centred = vec![T::zero(); m_eff];
    for s in sequences {
        let s = s.as_ref();
        let mean = s.iter().copied().sum::<T>() / T::from_usize(m_eff).unwrap();
        for (c, &x) in centred.iter_mut().zip(s) {
            *c = x - mean;
        }
        for (l, slot) in acc.iter_mut().enumerate() {
            let mut sum = T::zero();
            for i in 0..m_eff - l {
                sum = sum + centred[i] * centred[i + l];
            }
            *slot = *slot + sum;
        }
    }
    let k = sequences.len();
    acc.iter()
        .enumerate()
        .map(|(l, &s)| s / T::from_usize(k * (m_eff - l)).unwrap())
        .collect()
}

/// Smallest lag after which `|ρ̂|` stays below `threshold` for
/// [`LAG_RUN`] consecutive lags, capped at `max_lag`.
pub fn select_lag<T: Real>(gamma: &[T], threshold: T, max_lag: usize) -> usize {
    if gamma[0] <= T::zero() {
        return 0;
    }
    let rho = |l: usize| (gamma[l] / gamma[0]).abs();
    for lag in 0..max_lag {
        let quiet = (lag + 1..=lag + LAG_RUN).all(|l| l >= gamma.len() || rho(l) < threshold);
        if quiet {
            return lag;
        }
    }
    max_lag
}

/// Per-hypothesis Gaussian model of the statistic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianWorkingModel<T> {
    /// Sample mean of the statistic per hypothesis.
    pub delta: [T; 2],
    /// Long-run variance of `ψ̂` per hypothesis.
    pub omega2: [T; 2],
    pub m_eff: usize,
    pub p: usize,
    pub mean_t: [T; 2],
    /// `M_eff / (M_eff - p)² · ω²`.
    pub var_t: [T; 2],
    pub n: [usize; 2],
    pub lrv: Option<[LrvEstimate<T>; 2]>,
}

pub const MIN_LABELED: usize = 200;

impl<T: Real> GaussianWorkingModel<T> {
    /// Fits means from labeled statistics and variances from the HAC LRV of
    /// the labeled `ψ̂` sequences.
    pub fn fit<S: AsRef<[T]>>(
        stats: [&[T]; 2],
        psi: [&[S]; 2],
        m_eff: usize,
        p: usize,
        max_lag: usize,
    ) -> Result<Self> {
        for s in 0..2 {
            ensure(stats[s].len() >= MIN_LABELED && psi[s].len() >= MIN_LABELED, || {
                Error::Calibration(format!(
                    "hypothesis {s} needs at least {MIN_LABELED} labeled symbols, got {}",
                    stats[s].len().min(psi[s].len())
                ))
            })?;
        }
        let lrv = [LrvEstimate::estimate(psi[0], max_lag)?, LrvEstimate::estimate(psi[1], max_lag)?];
        let mean = |v: &[T]| v.iter().copied().sum::<T>() / T::from_usize(v.len()).unwrap();
        let delta = [mean(stats[0]), mean(stats[1])];
        let omega2 = [lrv[0].omega2, lrv[1].omega2];
        let mut model = Self::from_parts(delta, omega2, m_eff, p)?;
        model.n = [stats[0].len(), stats[1].len()];
        model.lrv = Some(lrv);
        Ok(model)
    }

    pub fn from_parts(delta: [T; 2], omega2: [T; 2], m_eff: usize, p: usize) -> Result<Self> {
        ensure(m_eff > p, || Error::Contract(format!("M_eff = {m_eff} must exceed p = {p}")))?;
        ensure(omega2.iter().all(|w| *w > T::zero()), || {
            Error::Domain("long-run variances must be > 0".into())
        })?;
        let scale = variance_scale::<T>(m_eff, p);
        Ok(Self {
            delta,
            omega2,
            m_eff,
            p,
            mean_t: delta,
            var_t: [scale * omega2[0], scale * omega2[1]],
            n: [0, 0],
            lrv: None,
        })
    }

    /// `κ_T = sign(m1 - m0)`, `+1` on ties.
    pub fn kappa(&self) -> T {
        if self.mean_t[1] < self.mean_t[0] {
            -T::one()
        } else {
            T::one()
        }
    }

    /// The same model with the window length changed and `ω²` held fixed.
    pub fn with_m_eff(&self, m_eff: usize) -> Result<Self> {
        Self::from_parts(self.delta, self.omega2, m_eff, self.p)
    }
}

/// `M_eff / (M_eff - p)²`.
pub fn variance_scale<T: Real>(m_eff: usize, p: usize) -> T {
    let m = T::from_usize(m_eff).unwrap();
    let d = T::from_usize(m_eff - p).unwrap();
    m / (d * d)
}

/// Operating point selector for [`roc_ber`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Operating<T> {
    Threshold(T),
    /// Conditional (pre-gate) false-alarm target.
    FalseAlarm(T),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint<T> {
    pub pfa: T,
    pub pd: T,
    pub tau: T,
    pub ber: T,
}

/// Gaussian ROC/BER at one operating point. Gate pass rates multiply the
/// false-alarm and detection probabilities; a closed gate decides 0.
pub fn roc_ber<T: Real>(
    model: &GaussianWorkingModel<T>,
    operating: Operating<T>,
    gate_pass: Option<[T; 2]>,
) -> Result<RocPoint<T>> {
    ensure(model.var_t.iter().all(|v| *v > T::zero()), || {
        Error::Domain("model variances must be > 0".into())
    })?;
    let k = model.kappa();
    let s0 = model.var_t[0].sqrt();
    let s1 = model.var_t[1].sqrt();
    let tau = match operating {
        Operating::Threshold(t) => t,
        Operating::FalseAlarm(p) => model.mean_t[0] + k * s0 * q_inv(p)?,
    };
    let pfa = q_function(k * (tau - model.mean_t[0]) / s0);
    let pd = q_function(k * (tau - model.mean_t[1]) / s1);
    let [g0, g1] = gate_pass.unwrap_or([T::one(), T::one()]);
    let (pfa, pd) = (g0 * pfa, g1 * pd);
    let half: T = lit(0.5);
    Ok(RocPoint { pfa, pd, tau, ber: half * (pfa + T::one() - pd) })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityReport<T> {
    /// Chernoff information `max_a D(a)`.
    pub chernoff: T,
    pub chernoff_argmax: T,
    pub bhattacharyya: T,
    /// `(KL01 + KL10) / 2`.
    pub symmetric_kl: T,
    pub rho_isi: Option<T>,
}

/// `D(a) = ½ ln(v_a / (v0^a v1^(1-a))) + a(1-a)/2 · Δm² / v_a`,
/// `v_a = a v0 + (1-a) v1`.
pub fn chernoff_exponent<T: Real>(a: T, m: [T; 2], v: [T; 2]) -> T {
    let half: T = lit(0.5);
    let va = a * v[0] + (T::one() - a) * v[1];
    let dm = m[1] - m[0];
    half * (va.ln() - a * v[0].ln() - (T::one() - a) * v[1].ln())
        + half * a * (T::one() - a) * dm * dm / va
}

/// Separability of `N(m0, v0)` and `N(m1, v1)`, plus `ρ_ISI` when tap means
/// `h̄_ℓ` are given.
pub fn separability<T: Real>(m: [T; 2], v: [T; 2], isi_profile: Option<&[T]>) -> Result<SeparabilityReport<T>> {
    ensure(v[0] > T::zero() && v[1] > T::zero(), || Error::Domain("variances must be > 0".into()))?;
    let d = |a: T| chernoff_exponent(a, m, v);
    let (a_star, d_max) = golden_max(d, T::zero(), T::one(), lit(1e-10));
    let half: T = lit(0.5);
    let quarter: T = lit(0.25);
    let dm = m[1] - m[0];
    let bhattacharyya = half * ((v[0] + v[1]) / (lit::<T>(2.0) * (v[0] * v[1]).sqrt())).ln()
        + dm * dm / (lit::<T>(4.0) * (v[0] + v[1]));
    let symmetric_kl = quarter * (v[0] / v[1] + v[1] / v[0] - lit(2.0))
        + quarter * dm * dm * (T::one() / v[0] + T::one() / v[1]);
    // Golden section can stop a hair short of the true peak; D(½) is a floor.
    let (chernoff, chernoff_argmax) = if bhattacharyya > d_max { (bhattacharyya, half) } else { (d_max, a_star) };
    let rho_isi = match isi_profile {
        Some(h) => {
            ensure(!h.is_empty() && h[0] > T::zero(), || Error::Domain("h̄_0 must be > 0".into()))?;
            Some(h[1..].iter().copied().sum::<T>() / h[0])
        }
        None => None,
    };
    Ok(SeparabilityReport { chernoff, chernoff_argmax, bhattacharyya, symmetric_kl, rho_isi })
}

fn golden_max<T: Real>(f: impl Fn(T) -> T, mut lo: T, mut hi: T, tol: T) -> (T, T) {
    let g: T = lit((5f64.sqrt() - 1.0) / 2.0);
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while hi - lo > tol {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        }
    }
    let x = (lo + hi) / lit(2.0);
    (x, f(x))
}

/// Window-averaged tap responses `h̄_ℓ = mean_J h(r_ref, ℓ Tsym + t_m)` for
/// `ℓ = 0..L-1`.
pub fn isi_profile<T: Real>(channel: &ChannelParams<T>, template: &Template<T>, r_ref: T) -> Vec<T> {
    let r = r_ref.max(channel.r_min);
    let n = T::from_usize(template.m_eff()).unwrap();
    (0..channel.memory)
        .map(|ell| {
            let lag = T::from_usize(ell).unwrap() * channel.symbol_duration;
            template
                .window()
                .map(|m| kernel_unchecked(r, lag + channel.sample_offset(m), channel))
                .sum::<T>()
                / n
        })
        .collect()
}

/// `D_B` as the window length varies with `ω²` fixed, and the OLS slope of
/// `D_B` against `M_eff`.
pub fn meff_scaling_probe<T: Real>(model: &GaussianWorkingModel<T>, grid: &[usize]) -> Result<(Vec<(usize, T)>, T)> {
    let mut rows = Vec::with_capacity(grid.len());
    for &m in grid {
        let mm = model.with_m_eff(m)?;
        let rep = separability(mm.mean_t, mm.var_t, None)?;
        rows.push((m, rep.bhattacharyya));
    }
    let xs: Vec<f64> = rows.iter().map(|(m, _)| *m as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|(_, d)| d.to_f64().unwrap()).collect();
    Ok((rows, lit(ols_slope(&xs, &ys))))
}

pub fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationDiagnostics {
    /// Time at which `ρ̂` first falls to `e⁻¹` (linear interpolation), if it
    /// does within the computed lags.
    pub tau_psi: Option<f64>,
    /// Clipped inflation factor.
    pub omega: f64,
    /// `M_corr / M = 1 / max(Ω̂, 1)`.
    pub ratio: f64,
}

/// Correlation time and correlation-adjusted sample ratio of `ψ̂` sequences
/// sampled every `dt` seconds.
pub fn correlation_diagnostics<S: AsRef<[f64]>>(sequences: &[S], dt: f64, max_lag: usize) -> Result<CorrelationDiagnostics> {
    let pooled: usize = sequences.iter().map(|s| s.as_ref().len()).sum();
    ensure(pooled >= 1000, || {
        Error::Calibration(format!("correlation diagnostics need >= 1000 pooled samples, got {pooled}"))
    })?;
    let est = LrvEstimate::estimate(sequences, max_lag)?;
    let m_eff = sequences[0].as_ref().len();
    let rho = pooled_autocovariance(sequences, m_eff - 1);
    let target = (-1.0f64).exp();
    let tau_psi = (1..rho.len()).find(|&l| rho[l] / rho[0] < target).map(|l| {
        let (a, b) = (rho[l - 1] / rho[0], rho[l] / rho[0]);
        dt * ((l - 1) as f64 + (a - target) / (a - b))
    });
    let omega = est.clipped_inflation();
    Ok(CorrelationDiagnostics { tau_psi, omega, ratio: 1.0 / omega })
}

/// Model curve for `M_corr / M` when `ψ̂` decorrelates exponentially with
/// time constant `τ`: `Ω = (1 + ρ) / (1 - ρ)` with `ρ = exp(-Δt / τ)`.
pub fn exponential_mcorr_ratio(dt_over_tau: f64) -> f64 {
    let rho = (-dt_over_tau).exp();
    (1.0 - rho) / (1.0 + rho)
}

/// Cumulants `κ_2..κ_4` of a Gamma(shape `k`, scale `θ`) variable:
/// `κ_r = (r-1)! k θ^r`.
pub fn gamma_cumulants(shape: f64, scale: f64) -> [f64; 3] {
    [shape * scale.powi(2), 2.0 * shape * scale.powi(3), 6.0 * shape * scale.powi(4)]
}

/// `E[ψ°] = κ̃₂ / μ̃²`.
pub fn oracle_psi_mean(mu_tilde: f64, kappa2: f64) -> f64 {
    kappa2 / (mu_tilde * mu_tilde)
}

/// Exact lag-0 variance of `ψ°` given latent cumulants and `c Ψ`.
pub fn oracle_psi_variance(mu_tilde: f64, kappa: [f64; 3], c_psi: f64) -> f64 {
    let [k2, k3, k4] = kappa;
    (2.0 * k2 * k2 + k4 + 4.0 * (mu_tilde * k2 + k3) / c_psi + 2.0 * (mu_tilde * mu_tilde + k2) / (c_psi * c_psi))
        / mu_tilde.powi(4)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleMoments {
    pub mean: f64,
    pub variance: f64,
    /// Standard error of `mean`.
    pub se: f64,
    pub n: usize,
}

/// Monte-Carlo moments of `ψ° = ((Y - μ)² - Y) / μ²` with `μ = cΨ μ̃` and
/// `Y | Λ̃ ~ Poisson(cΨ Λ̃)`, one draw per latent sample.
pub fn oracle_psi_moments<R: Rng + ?Sized>(
    latent: &[f64],
    psi: f64,
    c_n: f64,
    mu_tilde: f64,
    rng: &mut R,
) -> Result<OracleMoments> {
    ensure(latent.len() >= 2, || Error::Contract("need at least two latent draws".into()))?;
    let scale = c_n * psi;
    let mu = scale * mu_tilde;
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    for &l in latent {
        let y = f64::from(poisson(scale * l, rng)?);
        let v = ((y - mu).powi(2) - y) / (mu * mu);
        sum += v;
        sum2 += v * v;
    }
    let n = latent.len() as f64;
    let mean = sum / n;
    let variance = (sum2 - n * mean * mean) / (n - 1.0);
    Ok(OracleMoments { mean, variance, se: (variance / n).sqrt(), n: latent.len() })
}

/// Mean-model design for the sensitivity diagnostic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProfileDesign {
    /// `x = u` (scale only).
    ScaleOnly,
    /// `x = [u, 1]`.
    ScaleOffset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleDiagnostics {
    pub a_n: Vec<Vec<f64>>,
    pub g_n: Vec<f64>,
    /// `‖g_nᵀ A_n⁻¹‖₂`; `None` when `A_n` is singular.
    pub sensitivity: Option<f64>,
    pub singular: bool,
}

/// `A_n = (1/n) Σ x xᵀ / μ`, `g_n = -(1/n) Σ (μ + 2v)/μ³ x` and
/// `‖g_nᵀ A_n⁻¹‖` over the window.
pub fn profiling_sensitivity(u: &[f64], mu: &[f64], v: &[f64], design: ProfileDesign) -> Result<OracleDiagnostics> {
    ensure(u.len() == mu.len() && mu.len() == v.len() && !u.is_empty(), || {
        Error::Contract("u, mu and v must share a nonzero length".into())
    })?;
    ensure(mu.iter().all(|m| *m > 0.0), || Error::Domain("means must be > 0".into()))?;
    let dim = match design {
        ProfileDesign::ScaleOnly => 1,
        ProfileDesign::ScaleOffset => 2,
    };
    let n = u.len() as f64;
    let mut a = vec![vec![0.0; dim]; dim];
    let mut g = vec![0.0; dim];
    for ((&ui, &mi), &vi) in u.iter().zip(mu).zip(v) {
        let x = [ui, 1.0];
        for r in 0..dim {
            for c in 0..dim {
                a[r][c] += x[r] * x[c] / mi / n;
            }
            g[r] -= (mi + 2.0 * vi) / mi.powi(3) * x[r] / n;
        }
    }
    let (inv, singular) = match dim {
        1 => (vec![vec![1.0 / a[0][0]]], a[0][0].abs() < 1e-300),
        _ => {
            let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
            let scale = a[0][0].abs().max(a[1][1].abs()).powi(2);
            let singular = det.abs() <= 1e-12 * scale;
            (
                vec![vec![a[1][1] / det, -a[0][1] / det], vec![-a[1][0] / det, a[0][0] / det]],
                singular,
            )
        }
    };
    let sensitivity = (!singular).then(|| {
        let row: Vec<f64> = (0..dim).map(|c| (0..dim).map(|r| g[r] * inv[r][c]).sum()).collect();
        row.iter().map(|x| x * x).sum::<f64>().sqrt()
    });
    Ok(OracleDiagnostics { a_n: a, g_n: g, sensitivity, singular })
}

/// Closed form of `g_n A_n⁻¹` for the scale-only design with
/// `μ = cΨ u`, `v = (cΨ)² ṽ`.
pub fn scale_only_sensitivity(u: &[f64], v_tilde: &[f64], c_psi: f64) -> f64 {
    let n = u.len() as f64;
    let ubar = u.iter().sum::<f64>() / n;
    let inv = u.iter().map(|x| 1.0 / x).sum::<f64>() / n;
    let vu = v_tilde.iter().zip(u).map(|(v, x)| v / (x * x)).sum::<f64>() / n;
    -(inv / c_psi) / ubar - 2.0 * vu / ubar
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand_distr::{Distribution, Gamma, StandardNormal};

    fn simpson_tail(x: f64) -> f64 {
        // ∫_x^{x+12} φ by composite Simpson.
        let n = 200_000;
        let h = 12.0 / n as f64;
        let mut s = phi64(x) + phi64(x + 12.0);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * phi64(x + i as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn q_inverse_at_five_percent() {
        let x: f64 = q_inv(0.05).unwrap();
        assert!((x - 1.6449).abs() < 1e-3);
        assert!((simpson_tail(x) - 0.05).abs() < 1e-10);
    }

    #[test]
    fn q_symmetry_and_inversion() {
        for i in -800..=800 {
            let x = i as f64 / 100.0;
            assert!((q_function(x) + q_function(-x) - 1.0).abs() < 1e-12);
        }
        for i in -500..=600 {
            let x = i as f64 / 100.0;
            let back: f64 = q_inv(q_function(x)).unwrap();
            assert!((back - x).abs() < 1e-9, "x={x} back={back}");
        }
    }

    #[test]
    fn q_inversion_deep_lower_tail_is_rounding_limited() {
        // Q(x) for x < -5 sits within 3e-7 of 1, so its double representation
        // fixes x only to about ε / φ(x).
        for i in -600..-500 {
            let x = i as f64 / 100.0;
            let back: f64 = q_inv(q_function(x)).unwrap();
            let limit = 4.0 * f64::EPSILON / phi64(x);
            assert!((back - x).abs() < limit.max(1e-9), "x={x}");
        }
    }

    #[test]
    fn bartlett_direct_formula() {
        assert!((bartlett_lrv(&[1.0f64, 0.5], 1) - 1.5).abs() < 1e-15);
        assert_eq!(bartlett_lrv(&[2.0f64, 0.5, 0.25], 0), 2.0);
        let w: f64 = bartlett_lrv(&[1.0, 0.5, 0.25], 2);
        assert!((w - (1.0 + 2.0 * (2.0 / 3.0) * 0.5 + 2.0 * (1.0 / 3.0) * 0.25)).abs() < 1e-15);
    }

    fn white(k: usize, m: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut r = stream(seed);
        (0..k).map(|_| (0..m).map(|_| r.sample(StandardNormal)).collect()).collect()
    }

    fn ar1(k: usize, m: usize, rho: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut r = stream(seed);
        let innov = (1.0 - rho * rho).sqrt();
        (0..k)
            .map(|_| {
                let mut x: f64 = r.sample(StandardNormal);
                (0..m)
                    .map(|_| {
                        let out = x;
                        let z: f64 = r.sample(StandardNormal);
                        x = rho * x + innov * z;
                        out
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn white_noise_has_unit_inflation() {
        // 1e5 pooled samples with |K| < 4 M_eff, so the -1/M_eff centring
        // offset sits under the lag threshold.
        let est = LrvEstimate::estimate(&white(200, 500, 1), 10).unwrap();
        assert!((est.inflation - 1.0).abs() < 0.05, "{est:?}");
        assert!(est.omega2 >= 0.0);
    }

    #[test]
    fn centring_offset_appears_in_short_windows() {
        // Per-symbol centring leaves γ̂(ℓ) ≈ -γ̂(0)/M_eff; with many short
        // windows the lag rule runs to the cap and Ω̂ ≈ 1 - L_max/M_eff.
        let est = LrvEstimate::estimate(&white(2500, 40, 1), 10).unwrap();
        assert_eq!(est.lag, 10);
        assert!((est.inflation - 0.75).abs() < 0.05, "{}", est.inflation);
        assert_eq!(est.clipped_inflation(), 1.0);
    }

    #[test]
    fn ar1_inflation_near_three() {
        let est = LrvEstimate::estimate(&ar1(1000, 4000, 0.5, 2), 10).unwrap();
        assert!((est.inflation / 3.0 - 1.0).abs() < 0.15, "{est:?}");
    }

    #[test]
    fn lag_rule_stops_early_on_white_noise() {
        let est = LrvEstimate::estimate(&white(100, 1000, 3), 10).unwrap();
        assert!(est.lag <= 2, "{}", est.lag);
        let est = LrvEstimate::estimate(&ar1(50, 200, 0.9, 4), 10).unwrap();
        assert_eq!(est.lag, 10);
        assert!(LrvEstimate::estimate(&white(5, 10, 5), 10).is_err());
    }

    #[test]
    fn bartlett_is_nonnegative() {
        let mut r = stream(6);
        for _ in 0..200 {
            let k = 1 + (r.random::<u32>() % 20) as usize;
            let m = 30 + (r.random::<u32>() % 60) as usize;
            let seqs: Vec<Vec<f64>> =
                (0..k).map(|_| (0..m).map(|_| r.random::<f64>() * 4.0 - 2.0).collect()).collect();
            let est = LrvEstimate::estimate(&seqs, 10).unwrap();
            assert!(est.omega2 >= 0.0, "{est:?}");
        }
        for (k, rho) in [(50, 0.9), (50, -0.9), (300, 0.0)] {
            let est = LrvEstimate::estimate(&ar1(k, 60, rho, 60 + k as u64), 10).unwrap();
            assert!(est.omega2 >= 0.0);
        }
    }

    #[test]
    fn variance_reduces_to_one_over_n() {
        // i.i.d. ψ̂ with variance σ², p = 0: var_T ≈ σ² / M_eff.
        let sigma2: f64 = 2.25;
        let m_eff = 200;
        let seqs: Vec<Vec<f64>> = white(400, m_eff, 7)
            .into_iter()
            .map(|s| s.into_iter().map(|x| x * sigma2.sqrt()).collect())
            .collect();
        let stats: Vec<f64> = seqs.iter().map(|s| s.iter().sum::<f64>() / m_eff as f64).collect();
        let model = GaussianWorkingModel::<f64>::fit([&stats, &stats], [&seqs, &seqs], m_eff, 0, 10).unwrap();
        let expect = sigma2 / m_eff as f64;
        assert!((model.var_t[0] / expect - 1.0).abs() < 0.05, "{} vs {expect}", model.var_t[0]);
        assert_eq!(model.var_t[0], variance_scale::<f64>(m_eff, 0) * model.omega2[0]);
    }

    #[test]
    fn equal_labels_give_no_contrast() {
        let seqs = white(4000, 30, 8);
        let stats: Vec<f64> = seqs.iter().map(|s| s.iter().sum::<f64>() / 30.0).collect();
        let (a, b) = stats.split_at(2000);
        let model = GaussianWorkingModel::<f64>::fit([a, b], [&seqs[..2000], &seqs[2000..]], 30, 2, 10).unwrap();
        let dm = model.mean_t[1] - model.mean_t[0];
        let se = (model.var_t[0] / 2000.0 + model.var_t[1] / 2000.0).sqrt();
        assert!(dm.abs() < 3.0 * se * 30.0 / 28.0 + 1e-12, "{dm} vs {se}");
        let p = model.p;
        assert!(model.var_t.iter().zip(model.omega2).all(|(v, w)| *v == variance_scale::<f64>(30, p) * w));
    }

    #[test]
    fn roc_examples() {
        let model = GaussianWorkingModel::<f64>::from_parts([0.0, 1.0], [1.0, 1.0], 10, 0).unwrap();
        let at_mean = roc_ber(&model, Operating::Threshold(0.0), None).unwrap();
        assert!((at_mean.pfa - 0.5).abs() < 1e-15);
        let pt = roc_ber(&model, Operating::FalseAlarm(0.05), None).unwrap();
        let sigma0 = model.var_t[0].sqrt();
        assert!((pt.tau - sigma0 * 1.6448536269514722).abs() < 1e-9);
        assert!((pt.pfa - 0.05).abs() < 1e-12);
        let same = GaussianWorkingModel::<f64>::from_parts([0.3, 0.3], [1.0, 1.0], 10, 0).unwrap();
        let b = roc_ber(&same, Operating::Threshold(0.3), None).unwrap();
        assert!((b.ber - 0.5).abs() < 1e-15);
    }

    #[test]
    fn roc_orientation_and_gating() {
        let up = GaussianWorkingModel::<f64>::from_parts([0.0, 1.0], [2.0, 3.0], 20, 2).unwrap();
        let down = GaussianWorkingModel::<f64>::from_parts([0.0, -1.0], [2.0, 3.0], 20, 2).unwrap();
        let a = roc_ber(&up, Operating::FalseAlarm(0.1), None).unwrap();
        let b = roc_ber(&down, Operating::FalseAlarm(0.1), None).unwrap();
        assert!((a.pd - b.pd).abs() < 1e-12 && (a.tau + b.tau).abs() < 1e-12);
        let g = roc_ber(&up, Operating::FalseAlarm(0.1), Some([0.95, 0.9])).unwrap();
        assert!((g.pfa - 0.095).abs() < 1e-12);
        assert!((g.pd - 0.9 * a.pd).abs() < 1e-12);
        assert!((g.ber - 0.5 * (g.pfa + 1.0 - g.pd)).abs() < 1e-15);
    }

    #[test]
    fn separability_equal_variance_closed_forms() {
        let rep = separability::<f64>([0.0, 1.0], [0.5, 0.5], None).unwrap();
        assert!((rep.bhattacharyya - 0.25).abs() < 1e-9);
        assert!((rep.chernoff - 0.25).abs() < 1e-9);
        assert!((rep.symmetric_kl - 1.0).abs() < 1e-9);
        assert!((rep.chernoff_argmax - 0.5).abs() < 1e-4);
        let zero = separability::<f64>([0.4, 0.4], [0.7, 0.7], None).unwrap();
        assert!(zero.chernoff.abs() < 1e-12 && zero.bhattacharyya.abs() < 1e-12 && zero.symmetric_kl.abs() < 1e-12);
        let isi = separability::<f64>([0.0, 1.0], [0.5, 0.5], Some(&[10.0, 2.0, 1.0])).unwrap();
        assert!((isi.rho_isi.unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn chernoff_matches_grid_and_dominates_bhattacharyya() {
        let mut r = stream(9);
        for _ in 0..50 {
            let m = [r.random::<f64>(), r.random::<f64>() * 3.0];
            let v = [0.05 + r.random::<f64>(), 0.05 + r.random::<f64>() * 4.0];
            let rep = separability::<f64>(m, v, None).unwrap();
            let grid = (0..=10_000)
                .map(|i| chernoff_exponent(i as f64 / 1e4, m, v))
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(rep.chernoff >= grid - 1e-9, "{} < {grid}", rep.chernoff);
            assert!(rep.chernoff >= rep.bhattacharyya);
            assert!(rep.bhattacharyya >= 0.0);
            assert!((rep.bhattacharyya - chernoff_exponent(0.5, m, v)).abs() < 1e-12);
        }
    }

    #[test]
    fn scaling_probe_is_linear_in_window_and_quadratic_in_contrast() {
        let base = GaussianWorkingModel::<f64>::from_parts([0.0, 0.05], [1.0, 1.0], 200, 2).unwrap();
        let (rows, slope) = meff_scaling_probe(&base, &[200, 400, 800, 1600]).unwrap();
        for w in rows.windows(2) {
            assert!((w[1].1 / w[0].1 / 2.0 - 1.0).abs() < 0.1);
        }
        assert!(slope > 0.0);
        let wide = GaussianWorkingModel::<f64>::from_parts([0.0, 0.1], [1.0, 1.0], 200, 2).unwrap();
        let (rows2, _) = meff_scaling_probe(&wide, &[200]).unwrap();
        assert!((rows2[0].1 / rows[0].1 / 4.0 - 1.0).abs() < 0.1);
        let flat = GaussianWorkingModel::<f64>::from_parts([0.1, 0.1], [1.0, 1.0], 200, 2).unwrap();
        let (rows3, s3) = meff_scaling_probe(&flat, &[200, 400]).unwrap();
        assert!(rows3.iter().all(|(_, d)| d.abs() < 1e-15) && s3.abs() < 1e-15);
    }

    #[test]
    fn correlation_diagnostics_white_and_ar1() {
        let w = correlation_diagnostics(&white(200, 500, 10), 0.05, 10).unwrap();
        assert!((w.ratio - 1.0).abs() < 0.05, "{w:?}");
        let seqs = ar1(1000, 4000, 0.5, 11);
        let a = correlation_diagnostics(&seqs, 0.05, 10).unwrap();
        // Bartlett truncation of ρ(ℓ) = 0.5^ℓ at the selected lag, not the
        // untruncated 3: the lag rule stops near 9 here, giving Ω ≈ 2.6.
        let lag = LrvEstimate::estimate(&seqs, 10).unwrap().lag;
        let truncated = 1.0 + 2.0 * (1..=lag).map(|l| (1.0 - l as f64 / (lag + 1) as f64) * 0.5f64.powi(l as i32)).sum::<f64>();
        assert!(lag >= 8, "{lag}");
        assert!((a.ratio * truncated - 1.0).abs() < 0.03, "{a:?} vs {truncated}");
        // ρ(ℓ) = 0.5^ℓ crosses e⁻¹ between lags 1 and 2.
        let tau = a.tau_psi.unwrap() / 0.05;
        assert!(tau > 1.0 && tau < 2.0, "{tau}");
    }

    #[test]
    fn exponential_model_curve_knee() {
        assert!((exponential_mcorr_ratio(1.0) - 0.49).abs() < 0.1);
        assert!(exponential_mcorr_ratio(20.0) > 0.999);
    }

    #[test]
    fn isi_profile_ratio() {
        let ch = ChannelParams::<f64> { memory: 3, ..ChannelParams::baseline() };
        let t = Template::from_shape(&[1.0; 40], 0.05, 0.05).unwrap();
        let h = isi_profile(&ch, &t, 10e-6);
        assert_eq!(h.len(), 3);
        assert!(h[0] > h[1] && h[1] > h[2] && h[2] > 0.0);
    }

    #[test]
    fn oracle_mean_is_gain_free() {
        let (k, theta) = (4.0, 0.5);
        let g = Gamma::new(k, theta).unwrap();
        let mu_tilde = k * theta;
        let [k2, _, _] = gamma_cumulants(k, theta);
        let expect = oracle_psi_mean(mu_tilde, k2);
        let mut r = stream(12);
        for psi in [0.5, 1.0, 2.0] {
            let latent: Vec<f64> = (0..200_000).map(|_| g.sample(&mut r)).collect();
            let m = oracle_psi_moments(&latent, psi, 10.0, mu_tilde, &mut r).unwrap();
            assert!((m.mean - expect).abs() < 3.0 * m.se, "psi={psi}: {} vs {expect}", m.mean);
        }
    }

    #[test]
    fn oracle_deterministic_latent_has_zero_mean() {
        let latent = vec![3.0; 200_000];
        let m = oracle_psi_moments(&latent, 1.0, 5.0, 3.0, &mut stream(13)).unwrap();
        assert!(m.mean.abs() < 3.0 * m.se);
    }

    #[test]
    fn oracle_variance_formula_matches_monte_carlo() {
        let (k, theta) = (4.0, 0.5);
        let g = Gamma::new(k, theta).unwrap();
        let kap = gamma_cumulants(k, theta);
        let mut r = stream(14);
        for c in [1e2, 1e4] {
            let latent: Vec<f64> = (0..400_000).map(|_| g.sample(&mut r)).collect();
            let m = oracle_psi_moments(&latent, 1.0, c, k * theta, &mut r).unwrap();
            let exact = oracle_psi_variance(k * theta, kap, c);
            assert!((m.variance / exact - 1.0).abs() < 0.05, "c={c}: {} vs {exact}", m.variance);
        }
        let limit = (2.0 * kap[0].powi(2) + kap[2]) / (k * theta).powi(4);
        assert!((oracle_psi_variance(k * theta, kap, 1e4) / limit - 1.0).abs() < 0.05);
    }

    #[test]
    fn sensitivity_matrix_matches_scalar_formula() {
        let n = 30;
        let u = vec![1.0; n];
        for (c, vt) in [(10.0, 0.05), (1e3, 0.2), (1e5, 0.01)] {
            let mu: Vec<f64> = u.iter().map(|x| c * x).collect();
            let v: Vec<f64> = u.iter().map(|_| c * c * vt).collect();
            let d = profiling_sensitivity(&u, &mu, &v, ProfileDesign::ScaleOnly).unwrap();
            let closed = scale_only_sensitivity(&u, &vec![vt; n], c);
            assert!((d.sensitivity.unwrap() - closed.abs()).abs() < 1e-10);
            assert!((closed.abs() - (1.0 / c + 2.0 * vt)).abs() < 1e-12);
        }
        let mu = vec![5.0; n];
        let d = profiling_sensitivity(&u, &mu, &vec![0.0; n], ProfileDesign::ScaleOffset).unwrap();
        assert!(d.singular && d.sensitivity.is_none());
    }

    #[test]
    fn sensitivity_nonconstant_template() {
        let u: Vec<f64> = (0..25).map(|i| 0.5 + i as f64 / 24.0).collect();
        let vt: Vec<f64> = u.iter().map(|x| 0.1 * x * x).collect();
        for c in [10.0, 1e3] {
            let mu: Vec<f64> = u.iter().map(|x| c * x).collect();
            let v: Vec<f64> = vt.iter().map(|x| c * c * x).collect();
            let d = profiling_sensitivity(&u, &mu, &v, ProfileDesign::ScaleOnly).unwrap();
            let closed = scale_only_sensitivity(&u, &vt, c);
            assert!((d.sensitivity.unwrap() - closed.abs()).abs() < 1e-10 * closed.abs());
            let two = profiling_sensitivity(&u, &mu, &v, ProfileDesign::ScaleOffset).unwrap();
            assert!(!two.singular);
        }
        // Zero overdispersion: sensitivity shrinks like 1 / c.
        let small = |c: f64| {
            let mu: Vec<f64> = u.iter().map(|x| c * x).collect();
            profiling_sensitivity(&u, &mu, &vec![0.0; 25], ProfileDesign::ScaleOffset).unwrap().sensitivity.unwrap()
        };
        assert!((small(1e2) / small(1e4) - 100.0).abs() < 1e-6);
    }
}
