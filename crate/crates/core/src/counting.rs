//! Conditionally-Poisson counts and packet assembly.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::ensure;
use crate::mobility::{simulate_packet_separations, MobilityParams};
use crate::physics::{compose_intensity, kernel_unchecked, tap_superposition, ChannelParams, GainModel};
use crate::{rng, Bit, Error, Result};

/// Draws `Y_m ~ Poisson(Λ_m)` independently for each entry.
pub fn sample_counts<R: Rng + ?Sized>(intensity: &[f64], rng: &mut R) -> Result<Vec<u32>> {
    intensity.iter().map(|&lambda| poisson(lambda, rng)).collect()
}

pub(crate) fn poisson<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> Result<u32> {
    ensure(lambda.is_finite() && lambda >= 0.0, || {
        Error::Domain(format!("Poisson intensity must be finite and >= 0, got {lambda}"))
    })?;
    if lambda == 0.0 {
        return Ok(0);
    }
    let d = Poisson::new(lambda).map_err(|e| Error::Domain(e.to_string()))?;
    Ok(d.sample(rng) as u32)
}

/// How pre-packet ISI context is filled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Warmup {
    /// Symbols before the packet are silent (bit 0 with `A0` treated as zero).
    #[default]
    Silence,
    /// Symbols before the packet are fair coin flips.
    Random,
}

/// Ground truth carried alongside a symbol's counts. Receivers other than the
/// genie oracle and diagnostics must not read it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameTruth {
    /// `(s_k, s_{k-1}, ..., s_{k-L+1})`; `None` marks silent pre-packet slots.
    pub bits_context: Vec<Option<Bit>>,
    pub latent_intensity: Vec<f64>,
    pub separations: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymbolFrame {
    /// 0-based symbol index within the packet.
    pub k: usize,
    pub counts: Vec<u32>,
    pub truth: FrameTruth,
}

impl SymbolFrame {
    pub fn counts_f64(&self) -> Vec<f64> {
        self.counts.iter().map(|&y| f64::from(y)).collect()
    }
}

/// Everything needed to regenerate a packet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamsSnapshot {
    pub channel: ChannelParams<f64>,
    pub mobility: MobilityParams,
    pub warmup: Warmup,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PacketRecord {
    pub frames: Vec<SymbolFrame>,
    pub psi: f64,
    pub bits: Vec<Bit>,
    pub seed: u64,
    pub params: ParamsSnapshot,
}

impl PacketRecord {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Counts as a `K x M` matrix.
    pub fn counts(&self) -> Vec<Vec<u32>> {
        self.frames.iter().map(|f| f.counts.clone()).collect()
    }

    /// Writes the archive form: one JSON object per line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        let line = ArchiveLine {
            params: &self.params,
            psi: self.psi,
            bits: &self.bits,
            seed: self.seed,
            counts: self.frames.iter().map(|f| f.counts.as_slice()).collect(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
        Ok(())
    }

    /// `k,m,Y` rows (1-based `k`, `m`).
    pub fn write_counts_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "k,m,y")?;
        for f in &self.frames {
            for (m, y) in f.counts.iter().enumerate() {
                writeln!(out, "{},{},{}", f.k + 1, m + 1, y)?;
            }
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct ArchiveLine<'a> {
    params: &'a ParamsSnapshot,
    psi: f64,
    bits: &'a [Bit],
    seed: u64,
    counts: Vec<&'a [u32]>,
}

/// A packet as read back from an archive: counts only, no ground truth.
#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct ArchivedPacket {
    pub params: ParamsSnapshot,
    pub psi: f64,
    pub bits: Vec<Bit>,
    pub seed: u64,
    pub counts: Vec<Vec<u32>>,
}

impl From<&PacketRecord> for ArchivedPacket {
    fn from(p: &PacketRecord) -> Self {
        Self {
            params: p.params.clone(),
            psi: p.psi,
            bits: p.bits.clone(),
            seed: p.seed,
            counts: p.counts(),
        }
    }
}

pub fn read_archive<R: BufRead>(input: R) -> Result<Vec<ArchivedPacket>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Simulates one packet: trajectory, ISI superposition, gain and background,
/// then Poisson sampling. Deterministic in `seed`.
pub fn generate_packet(
    bits: &[Bit],
    psi: f64,
    channel: &ChannelParams<f64>,
    mobility: &MobilityParams,
    warmup: Warmup,
    seed: u64,
) -> Result<PacketRecord> {
    channel.validate()?;
    let gain = GainModel::new(psi)?;
    ensure(bits.iter().all(|&b| b <= 1), || Error::Param("bits must be 0 or 1".into()))?;
    let mut rng = rng::stream(seed);
    let memory = channel.memory;
    let pre: Vec<Option<Bit>> = (0..memory - 1)
        .map(|_| match warmup {
            Warmup::Silence => None,
            Warmup::Random => Some(rng.random_range(0..=1u8)),
        })
        .collect();
    let separations = simulate_packet_separations(bits, mobility, channel, &mut rng)?;
    let mut frames = Vec::with_capacity(bits.len());
    for (k, &bit) in bits.iter().enumerate() {
        let context = isi_context(bits, &pre, k, memory);
        let r = separations.row(k).to_vec();
        let latent = latent_intensity(&context, &r, gain, channel)?;
        let counts = sample_counts(&latent, &mut rng)?;
        debug_assert_eq!(context[0], Some(bit));
        frames.push(SymbolFrame {
            k,
            counts,
            truth: FrameTruth { bits_context: context, latent_intensity: latent, separations: r },
        });
    }
    Ok(PacketRecord {
        frames,
        psi,
        bits: bits.to_vec(),
        seed,
        params: ParamsSnapshot { channel: channel.clone(), mobility: mobility.clone(), warmup },
    })
}

/// `(s_k, ..., s_{k-L+1})`, reaching into `pre` (most recent last) before
/// the packet start.
fn isi_context(bits: &[Bit], pre: &[Option<Bit>], k: usize, memory: usize) -> Vec<Option<Bit>> {
    (0..memory)
        .map(|ell| {
            if ell <= k {
                Some(bits[k - ell])
            } else {
                pre[pre.len() - (ell - k)]
            }
        })
        .collect()
}

/// Recomputes `Λ_{k,·}` from a frame's ISI context and separations. Silent
/// slots contribute nothing; otherwise this matches [`tap_superposition`].
pub fn latent_intensity(
    context: &[Option<Bit>],
    separations: &[f64],
    gain: GainModel<f64>,
    channel: &ChannelParams<f64>,
) -> Result<Vec<f64>> {
    let tilde = if context.iter().all(Option::is_some) {
        let bits: Vec<Bit> = context.iter().map(|b| b.unwrap()).collect();
        tap_superposition(&bits, separations, channel)?
    } else {
        ensure(context.len() == channel.memory, || {
            Error::Contract("ISI context length must equal the memory".into())
        })?;
        let mut acc = vec![0.0; separations.len()];
        for (ell, bit) in context.iter().enumerate() {
            let Some(bit) = *bit else { continue };
            let amp = channel.amplitude(bit);
            if amp == 0.0 {
                continue;
            }
            let lag = ell as f64 * channel.symbol_duration;
            for (m, (slot, &r)) in acc.iter_mut().zip(separations).enumerate() {
                let r = r.max(channel.r_min);
                *slot += amp * kernel_unchecked(r, lag + channel.sample_offset(m), channel);
            }
        }
        acc
    };
    compose_intensity(&tilde, gain, channel)
}

/// Sample mean of `Y` and the excess `Var(Y) - mean(Y)` over replicated draws.
pub fn overdispersion_decomposition(samples: &[f64]) -> Result<(f64, f64)> {
    ensure(samples.len() >= 2, || Error::Contract("need at least two replicates".into()))?;
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, var - mean))
}
