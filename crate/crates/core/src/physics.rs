//! Deterministic channel quantities.
//!
//! All values are SI: metres, seconds, molecules. `g0` is the effective
//! receiver-volume gain that turns a concentration into an expected count.

use serde::{Deserialize, Serialize};

use crate::error::ensure;
use crate::{lit, Bit, Error, Real, Result};

/// Baseline physical parameters. Receiver radius 5 µm, molecular diffusion
/// 1e-10 m²/s, background 2 counts/sample and separation floor 0.8 µm.
pub mod baseline {
    pub const RECEIVER_RADIUS: f64 = 5e-6;
    pub const MOLECULAR_DIFFUSION: f64 = 1e-10;
    pub const BACKGROUND: f64 = 2.0;
    pub const SEPARATION_FLOOR: f64 = 0.8e-6;
    pub const INITIAL_SEPARATION: f64 = 10e-6;
}

/// Volume of a sphere of radius `a`, used as the default `g0`.
pub fn receiver_volume<T: Real>(radius: T) -> T {
    lit::<T>(4.0 / 3.0) * T::PI() * radius.powi(3)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams<T> {
    /// Effective receiver-volume gain (m³).
    pub g0: T,
    /// Molecular diffusion coefficient (m²/s).
    pub diffusion: T,
    /// ISI memory length in symbols.
    pub memory: usize,
    /// Symbol duration (s).
    pub symbol_duration: T,
    /// Samples per symbol.
    pub samples_per_symbol: usize,
    /// Release amplitudes for symbols 0 and 1 (molecules).
    pub amplitudes: [T; 2],
    /// Background rate (counts/sample).
    pub background: T,
    /// Separation floor (m).
    pub r_min: T,
}

impl<T: Real> ChannelParams<T> {
    /// Baseline channel with on-off keying (`A0 = 0`, `A1 = 1e5`), `L = 2`,
    /// `Tsym = 2 s` and `M = 40`.
    pub fn baseline() -> Self {
        Self {
            g0: receiver_volume(lit(baseline::RECEIVER_RADIUS)),
            diffusion: lit(baseline::MOLECULAR_DIFFUSION),
            memory: 2,
            symbol_duration: lit(2.0),
            samples_per_symbol: 40,
            amplitudes: [T::zero(), lit(1e5)],
            background: lit(baseline::BACKGROUND),
            r_min: lit(baseline::SEPARATION_FLOOR),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.g0,
            self.diffusion,
            self.symbol_duration,
            self.amplitudes[0],
            self.amplitudes[1],
            self.background,
            self.r_min,
        ]
        .iter()
        .all(|x| x.is_finite());
        ensure(finite, || Error::Param("channel parameters must be finite".into()))?;
        ensure(self.g0 > T::zero(), || Error::Param("g0 must be > 0".into()))?;
        ensure(self.diffusion > T::zero(), || {
            Error::Param("molecular diffusion must be > 0".into())
        })?;
        ensure(self.symbol_duration > T::zero(), || {
            Error::Param("symbol duration must be > 0".into())
        })?;
        ensure(self.memory >= 1, || Error::Param("ISI memory L must be >= 1".into()))?;
        ensure(self.samples_per_symbol >= 1, || {
            Error::Param("samples per symbol M must be >= 1".into())
        })?;
        ensure(self.r_min > T::zero(), || Error::Param("r_min must be > 0".into()))?;
        ensure(
            self.amplitudes.iter().all(|a| *a >= T::zero()) && self.background >= T::zero(),
            || Error::Param("amplitudes and background must be >= 0".into()),
        )
    }

    #[inline]
    pub fn amplitude(&self, bit: Bit) -> T {
        self.amplitudes[usize::from(bit != 0)]
    }

    /// Within-symbol sampling offset `t_m = (m + 1/2) Tsym / M` for 0-based `m`.
    #[inline]
    pub fn sample_offset(&self, m: usize) -> T {
        (T::from_usize(m).unwrap() + lit(0.5)) * self.symbol_duration
            / T::from_usize(self.samples_per_symbol).unwrap()
    }

    pub fn sample_offsets(&self) -> Vec<T> {
        (0..self.samples_per_symbol).map(|m| self.sample_offset(m)).collect()
    }

    /// Spacing between consecutive within-symbol samples.
    pub fn sample_step(&self) -> T {
        self.symbol_duration / T::from_usize(self.samples_per_symbol).unwrap()
    }
}

/// Packet-constant multiplicative geometry gain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainModel<T> {
    psi: T,
}

impl<T: Real> GainModel<T> {
    pub fn new(psi: T) -> Result<Self> {
        ensure(psi.is_finite() && psi > T::zero(), || {
            Error::Param(format!("geometry gain must be finite and > 0, got {psi}"))
        })?;
        Ok(Self { psi })
    }

    pub fn psi(&self) -> T {
        self.psi
    }
}

/// Free-space passive-receiver diffusion response
/// `g0 (4π Dm t)^(-3/2) exp(-r²/(4 Dm t))` for `t > 0`, zero otherwise.
pub fn kernel<T: Real>(r: T, t: T, params: &ChannelParams<T>) -> Result<T> {
    ensure(r.is_finite() && t.is_finite(), || {
        Error::Domain(format!("kernel arguments must be finite (r={r}, t={t})"))
    })?;
    Ok(kernel_unchecked(r, t, params))
}

#[inline]
pub(crate) fn kernel_unchecked<T: Real>(r: T, t: T, params: &ChannelParams<T>) -> T {
    if t <= T::zero() {
        return T::zero();
    }
    let four_dt = lit::<T>(4.0) * params.diffusion * t;
    params.g0 * (T::PI() * four_dt).powf(lit(-1.5)) * (-(r * r) / four_dt).exp()
}

/// Gain-normalised intensity of one symbol: the sum over ISI taps
/// `ℓ = 0..L-1` of `A(s_{k-ℓ}) h(max(r_m, r_min), ℓ Tsym + t_m)`.
///
/// `symbols[ℓ]` is `s_{k-ℓ}`; `separations` holds the `M` within-symbol
/// separations of the current symbol.
pub fn tap_superposition<T: Real>(
    symbols: &[Bit],
    separations: &[T],
    params: &ChannelParams<T>,
) -> Result<Vec<T>> {
    ensure(symbols.len() == params.memory, || {
        Error::Contract(format!(
            "expected {} symbols of ISI context, got {}",
            params.memory,
            symbols.len()
        ))
    })?;
    ensure(separations.len() == params.samples_per_symbol, || {
        Error::Contract(format!(
            "expected {} separations, got {}",
            params.samples_per_symbol,
            separations.len()
        ))
    })?;
    ensure(separations.iter().all(|r| r.is_finite()), || {
        Error::Domain("separations must be finite".into())
    })?;
    let mut out = vec![T::zero(); separations.len()];
    for (ell, &bit) in symbols.iter().enumerate() {
        let amp = params.amplitude(bit);
        if amp == T::zero() {
            continue;
        }
        let lag = T::from_usize(ell).unwrap() * params.symbol_duration;
        for (m, (slot, &r)) in out.iter_mut().zip(separations).enumerate() {
            let r = r.max(params.r_min);
            *slot = *slot + amp * kernel_unchecked(r, lag + params.sample_offset(m), params);
        }
    }
    Ok(out)
}

/// `Λ_m = λ_bg + Ψ Λ̃_m`; the gain scales the signal component only.
pub fn compose_intensity<T: Real>(
    tilde: &[T],
    gain: GainModel<T>,
    params: &ChannelParams<T>,
) -> Result<Vec<T>> {
    ensure(tilde.iter().all(|x| x.is_finite() && *x >= T::zero()), || {
        Error::Domain("gain-normalised intensity must be finite and >= 0".into())
    })?;
    Ok(tilde
        .iter()
        .map(|&x| params.background + gain.psi() * x)
        .collect())
}
