//! Symbol-dependent active-Brownian-particle (ABP) transmitter mobility.
//!
//! During symbol `k` the transmitter follows
//! `dX = v(s_k) n dt + sqrt(2 Dt) dW`, with `n` a unit orientation diffusing
//! on the sphere at rate `Dr(s_k)`. Integration is Euler–Maruyama; the
//! orientation takes a tangential Gaussian increment (per-axis variance
//! `2 Dr dt`, projected orthogonal to `n`) and is renormalised.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::ensure;
use crate::physics::{self, ChannelParams};
use crate::{rng, Bit, Error, Real, Result};

pub type Vec3 = [f64; 3];

/// How the transmitter state crosses symbol boundaries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SymbolAnchoring {
    /// Position and orientation carry over; only `(v, Dr)` switch.
    Continuous,
    /// Each symbol interval starts at `x0` with a fresh uniform orientation.
    #[default]
    Reanchored,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MobilityParams {
    /// Self-propulsion speed per symbol (m/s).
    pub speed: [f64; 2],
    /// Rotational diffusion per symbol (1/s).
    pub rot_diffusion: [f64; 2],
    /// Translational diffusion (m²/s).
    pub trans_diffusion: f64,
    /// Integrator step (s).
    pub dt: f64,
    /// Initial transmitter position (m).
    pub x0: Vec3,
    /// Receiver position (m).
    pub receiver: Vec3,
    pub anchoring: SymbolAnchoring,
}

impl MobilityParams {
    /// Baseline ABP parameters: `v = (0, 30) µm/s`, `Dr = (8, 0.8) 1/s`,
    /// `Dt = 2e-13 m²/s`, `dt = 1 ms`, 10 µm initial separation.
    pub fn baseline() -> Self {
        Self {
            speed: [0.0, 30e-6],
            rot_diffusion: [8.0, 0.8],
            trans_diffusion: 2e-13,
            dt: 1e-3,
            x0: [physics::baseline::INITIAL_SEPARATION, 0.0, 0.0],
            receiver: [0.0; 3],
            anchoring: SymbolAnchoring::Reanchored,
        }
    }

    /// Zero-mobility parameters: the transmitter never moves.
    pub fn frozen(&self) -> Self {
        Self {
            speed: [0.0; 2],
            trans_diffusion: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self
            .speed
            .iter()
            .chain(&self.rot_diffusion)
            .chain(&self.x0)
            .chain(&self.receiver)
            .chain([&self.trans_diffusion, &self.dt])
            .all(|x| x.is_finite());
        ensure(finite, || Error::Param("mobility parameters must be finite".into()))?;
        ensure(self.speed.iter().all(|v| *v >= 0.0), || {
            Error::Param("speeds must be >= 0".into())
        })?;
        ensure(self.rot_diffusion.iter().all(|d| *d > 0.0), || {
            Error::Param("rotational diffusion must be > 0".into())
        })?;
        ensure(self.trans_diffusion >= 0.0, || {
            Error::Param("translational diffusion must be >= 0".into())
        })?;
        ensure(self.dt > 0.0, || Error::Param("integrator step must be > 0".into()))
    }

    /// Checks that the integrator resolves every sampling offset.
    pub fn validate_against(&self, channel: &ChannelParams<f64>) -> Result<()> {
        self.validate()?;
        let spacing = channel.sample_step();
        ensure(self.dt <= spacing * (1.0 + 1e-12), || {
            Error::Param(format!(
                "integrator step {} s exceeds the sample spacing {} s",
                self.dt, spacing
            ))
        })
    }

    #[inline]
    fn state_for(&self, bit: Bit) -> (f64, f64) {
        let i = usize::from(bit != 0);
        (self.speed[i], self.rot_diffusion[i])
    }
}

/// Long-time effective diffusivity `Dt + v(s)² / (6 Dr(s))`.
pub fn effective_diffusivity<T: Real>(speed: T, rot_diffusion: T, trans_diffusion: T) -> Result<T> {
    ensure(rot_diffusion > T::zero(), || {
        Error::Domain(format!("rotational diffusion must be > 0, got {rot_diffusion}"))
    })?;
    Ok(trans_diffusion + speed * speed / (T::from_f64(6.0).unwrap() * rot_diffusion))
}

/// [`effective_diffusivity`] for one symbol of a parameter set.
pub fn symbol_diffusivity(bit: Bit, params: &MobilityParams) -> Result<f64> {
    let (v, dr) = params.state_for(bit);
    effective_diffusivity(v, dr, params.trans_diffusion)
}

/// Transmitter state: position, unit orientation and its random stream.
#[derive(Clone, Debug)]
pub struct TrajectoryState<R> {
    pub position: Vec3,
    pub orientation: Vec3,
    pub rng: R,
}

impl<R: Rng> TrajectoryState<R> {
    /// Starts at `position` with an orientation drawn uniformly on the sphere.
    pub fn new(position: Vec3, mut rng: R) -> Self {
        let orientation = random_unit(&mut rng);
        Self { position, orientation, rng }
    }

    /// One Euler–Maruyama step of length `params.dt`.
    pub fn step(&mut self, symbol: Bit, params: &MobilityParams) {
        self.advance_by(params.dt, symbol, params);
    }

    fn advance_by(&mut self, dt: f64, symbol: Bit, params: &MobilityParams) {
        let (v, dr) = params.state_for(symbol);
        let noise = (2.0 * params.trans_diffusion * dt).sqrt();
        let n = self.orientation;
        for i in 0..3 {
            let xi: f64 = self.rng.sample(StandardNormal);
            self.position[i] += v * n[i] * dt + noise * xi;
        }
        let rot = (2.0 * dr * dt).sqrt();
        let mut inc = [0.0; 3];
        for slot in &mut inc {
            let xi: f64 = self.rng.sample(StandardNormal);
            *slot = rot * xi;
        }
        let radial = dot(&inc, &n);
        let mut next = [0.0; 3];
        for i in 0..3 {
            next[i] = n[i] + inc[i] - radial * n[i];
        }
        self.orientation = normalized(next);
    }

    /// Integrates for `duration` seconds in steps of `params.dt`, with a
    /// shorter final step when `duration` is not a whole number of steps.
    pub fn advance(&mut self, duration: f64, symbol: Bit, params: &MobilityParams) {
        if duration <= 0.0 {
            return;
        }
        let ratio = duration / params.dt;
        let whole = (ratio + 1e-9).floor();
        for _ in 0..whole as u64 {
            self.step(symbol, params);
        }
        let rest = duration - whole * params.dt;
        if rest > 1e-9 * params.dt {
            self.advance_by(rest, symbol, params);
        }
    }

    pub fn distance_to(&self, point: &Vec3) -> f64 {
        let d = [
            self.position[0] - point[0],
            self.position[1] - point[1],
            self.position[2] - point[2],
        ];
        dot(&d, &d).sqrt()
    }
}

/// Free-function form of [`TrajectoryState::step`].
pub fn step_abp<R: Rng>(state: &mut TrajectoryState<R>, symbol: Bit, params: &MobilityParams) {
    state.step(symbol, params);
}

/// Per-symbol, per-offset separations `r_{k,m}`, stored row-major `K x M`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationSeries {
    pub symbols: usize,
    pub samples: usize,
    pub r: Vec<f64>,
}

impl SeparationSeries {
    pub fn row(&self, k: usize) -> &[f64] {
        &self.r[k * self.samples..(k + 1) * self.samples]
    }

    /// Diagnostic dump with columns `k,m,t_seconds,r_meters` (1-based k, m).
    pub fn write_csv<W: Write>(&self, channel: &ChannelParams<f64>, mut out: W) -> Result<()> {
        writeln!(out, "k,m,t_seconds,r_meters")?;
        for k in 0..self.symbols {
            for m in 0..self.samples {
                let t = k as f64 * channel.symbol_duration + channel.sample_offset(m);
                writeln!(out, "{},{},{:.16e},{:.16e}", k + 1, m + 1, t, self.row(k)[m])?;
            }
        }
        Ok(())
    }
}

/// Propagates the transmitter across a packet and records its distance to the
/// receiver at every within-symbol sampling offset.
pub fn simulate_packet_separations<R: Rng>(
    bits: &[Bit],
    params: &MobilityParams,
    channel: &ChannelParams<f64>,
    rng: &mut R,
) -> Result<SeparationSeries> {
    ensure(!bits.is_empty(), || Error::Contract("packet needs at least one symbol".into()))?;
    params.validate_against(channel)?;
    let offsets = channel.sample_offsets();
    let samples = offsets.len();
    let mut r = Vec::with_capacity(bits.len() * samples);
    let mut state = TrajectoryState::new(params.x0, &mut *rng);
    for &bit in bits {
        if params.anchoring == SymbolAnchoring::Reanchored {
            state.position = params.x0;
            state.orientation = random_unit(&mut state.rng);
        }
        let mut clock = 0.0;
        for &t in &offsets {
            state.advance(t - clock, bit, params);
            clock = t;
            r.push(state.distance_to(&params.receiver));
        }
        state.advance(channel.symbol_duration - clock, bit, params);
    }
    Ok(SeparationSeries { symbols: bits.len(), samples, r })
}

/// Separations of a single symbol started from `x0`; the path law used by the
/// likelihood receivers under reanchored mobility.
pub fn simulate_symbol_separations<R: Rng>(
    bit: Bit,
    params: &MobilityParams,
    channel: &ChannelParams<f64>,
    rng: &mut R,
) -> Vec<f64> {
    let mut state = TrajectoryState::new(params.x0, rng);
    let mut clock = 0.0;
    channel
        .sample_offsets()
        .into_iter()
        .map(|t| {
            state.advance(t - clock, bit, params);
            clock = t;
            state.distance_to(&params.receiver)
        })
        .collect()
}

/// Mean squared displacement from `x0` at each of `times` over `n`
/// independent continuous trajectories holding `bit` throughout.
pub fn mean_squared_displacement(
    bit: Bit,
    params: &MobilityParams,
    times: &[f64],
    n: usize,
    seed: u64,
) -> Vec<f64> {
    let mut acc = vec![0.0; times.len()];
    for i in 0..n {
        let mut state = TrajectoryState::new(params.x0, rng::stream(rng::derive_seed(seed, rng::domain::SYNTHETIC, i as u64)));
        let mut clock = 0.0;
        for (slot, &t) in acc.iter_mut().zip(times) {
            state.advance(t - clock, bit, params);
            clock = t;
            *slot += state.distance_to(&params.x0).powi(2);
        }
    }
    acc.iter_mut().for_each(|x| *x /= n as f64);
    acc
}

pub(crate) fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    loop {
        let v: Vec3 = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let n = dot(&v, &v).sqrt();
        if n > 1e-12 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

#[inline]
fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
fn normalized(v: Vec3) -> Vec3 {
    let n = dot(&v, &v).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}
