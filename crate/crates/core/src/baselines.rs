//! Comparison receivers: windowed-mean threshold, genie-aided likelihood ratio,
//! gain/background-profiling GLRT and a two-pass decision-feedback wrapper.
//!
//! The likelihood receivers integrate the mobility randomness out by Monte
//! Carlo over reanchored symbol paths. Paths are shared between hypotheses
//! (common random numbers) and across every nuisance value evaluated.

use std::ops::Range;

use argmin::core::{CostFunction, Executor, State};
use argmin::solver::neldermead::NelderMead;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::detector::{calibrate_threshold, detect_with_offset, DetectorVerdict, DispersionThreshold, GateConfig, Rule};
use crate::error::ensure;
use crate::mobility::{simulate_symbol_separations, MobilityParams};
use crate::physics::{kernel_unchecked, ChannelParams};
use crate::profiling::Template;
use crate::{rng, Bit, Error, Result};

type Verdict = DetectorVerdict<f64>;

/// Threshold of the windowed-mean detector: the `1 - P★` order statistic of
/// H0 windowed means, with `κ = +1`.
pub fn calibrate_mean_threshold(h0_means: &[f64], pfa_target: f64) -> Result<DispersionThreshold<f64>> {
    calibrate_threshold(h0_means, pfa_target, None)
}

/// `ŝ = 1` iff the (offset-corrected) windowed mean exceeds `τ_Ȳ` (in the
/// threshold's orientation). The gate sees the raw windowed mean; gate
/// failures decide 0.
pub fn mean_detector(
    counts: &[f64],
    template: &Template<f64>,
    gate: Option<&GateConfig<f64>>,
    threshold: &DispersionThreshold<f64>,
    offset: Option<&[f64]>,
) -> Verdict {
    let raw = template.windowed_mean(counts);
    if gate.is_some_and(|g| !g.passes(raw)) {
        return Verdict::gate_closed();
    }
    let ybar = raw - offset.map_or(0.0, |o| template.windowed_mean(o));
    Verdict { decision: threshold.decide(ybar), gated: true, statistic: Some(ybar), rule: Rule::Threshold }
}

/// Nuisance parameters of one symbol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NuisanceVector {
    pub psi: f64,
    pub lambda_bg: f64,
    /// `(s_{k-1}, ..., s_{k-L+1})`; `None` marks a silent pre-packet slot.
    pub past_bits: Vec<Option<Bit>>,
}

impl NuisanceVector {
    fn validate(&self, memory: usize) -> Result<()> {
        ensure(self.psi > 0.0 && self.psi.is_finite(), || Error::Param("psi must be > 0".into()))?;
        ensure(self.lambda_bg >= 0.0, || Error::Param("background must be >= 0".into()))?;
        ensure(self.past_bits.len() + 1 == memory, || {
            Error::Contract(format!("expected {} past bits, got {}", memory - 1, self.past_bits.len()))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarginalLikelihoodConfig {
    pub n_paths: usize,
    pub common_seed: u64,
}

pub const DEFAULT_PATHS: usize = 512;
pub const MIN_PATHS: usize = 100;

impl Default for MarginalLikelihoodConfig {
    fn default() -> Self {
        Self { n_paths: DEFAULT_PATHS, common_seed: 0 }
    }
}

/// Per-path kernel values `h(r_p,j, ℓ Tsym + t_j)` over the window, for both
/// hypotheses' path laws.
#[derive(Clone, Debug)]
pub struct PathBank {
    memory: usize,
    window: Range<usize>,
    n_paths: usize,
    amplitudes: [f64; 2],
    // taps[s][(p * memory + ℓ) * m_eff + j]
    taps: [Vec<f64>; 2],
}

impl PathBank {
    pub fn new(
        channel: &ChannelParams<f64>,
        mobility: &MobilityParams,
        window: Range<usize>,
        cfg: &MarginalLikelihoodConfig,
    ) -> Result<Self> {
        channel.validate()?;
        mobility.validate_against(channel)?;
        ensure(cfg.n_paths >= MIN_PATHS, || {
            Error::Param(format!("need at least {MIN_PATHS} likelihood paths, got {}", cfg.n_paths))
        })?;
        ensure(window.end <= channel.samples_per_symbol && !window.is_empty(), || {
            Error::Contract("window must be a nonempty range of sample indices".into())
        })?;
        let memory = channel.memory;
        let build = |bit: Bit| -> Vec<f64> {
            (0..cfg.n_paths)
                .into_par_iter()
                .flat_map_iter(|p| {
                    let seed = rng::derive_seed(cfg.common_seed, rng::domain::PATHS, p as u64);
                    let r = simulate_symbol_separations(bit, mobility, channel, &mut rng::stream(seed));
                    let window = window.clone();
                    (0..memory).flat_map(move |ell| {
                        let lag = ell as f64 * channel.symbol_duration;
                        let r = r.clone();
                        window.clone().map(move |m| {
                            kernel_unchecked(r[m].max(channel.r_min), lag + channel.sample_offset(m), channel)
                        })
                    })
                })
                .collect()
        };
        let taps = [build(0), build(1)];
        Ok(Self { memory, window, n_paths: cfg.n_paths, amplitudes: channel.amplitudes, taps })
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn window(&self) -> Range<usize> {
        self.window.clone()
    }

    /// Gain-normalised intensities of every path under `bit` with the given
    /// past symbols.
    pub fn latent(&self, bit: Bit, past: &[Option<Bit>]) -> Result<LatentPaths> {
        ensure(past.len() + 1 == self.memory, || {
            Error::Contract(format!("expected {} past bits, got {}", self.memory - 1, past.len()))
        })?;
        let m_eff = self.window.len();
        let taps = &self.taps[usize::from(bit != 0)];
        let amps: Vec<f64> = std::iter::once(Some(bit))
            .chain(past.iter().copied())
            .map(|b| b.map_or(0.0, |b| self.amplitudes[usize::from(b != 0)]))
            .collect();
        let mut tilde = vec![0.0; self.n_paths * m_eff];
        for p in 0..self.n_paths {
            let row = &mut tilde[p * m_eff..(p + 1) * m_eff];
            for (ell, &a) in amps.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let h = &taps[(p * self.memory + ell) * m_eff..][..m_eff];
                for (slot, &x) in row.iter_mut().zip(h) {
                    *slot += a * x;
                }
            }
        }
        Ok(LatentPaths { m_eff, tilde })
    }
}

/// `Λ̃` of every path over the window.
#[derive(Clone, Debug)]
pub struct LatentPaths {
    m_eff: usize,
    tilde: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginalLikelihood {
    pub log_lik: f64,
    /// Every path had zero likelihood.
    pub underflow: bool,
}

impl LatentPaths {
    /// `log mean_p Π_j Pois(y_j; λ + Ψ Λ̃_pj)` by log-sum-exp.
    pub fn log_likelihood(&self, y: &[f64], psi: f64, lambda_bg: f64) -> MarginalLikelihood {
        let log_fact: f64 = y.iter().map(|&v| ln_gamma(v + 1.0)).sum();
        let per_path: Vec<f64> = self
            .tilde
            .chunks_exact(self.m_eff)
            .map(|row| {
                row.iter().zip(y).fold(0.0, |acc, (&l, &v)| {
                    let mu = lambda_bg + psi * l;
                    if mu > 0.0 {
                        acc + v * mu.ln() - mu
                    } else if v > 0.0 {
                        f64::NEG_INFINITY
                    } else {
                        acc
                    }
                })
            })
            .collect();
        let top = per_path.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if top == f64::NEG_INFINITY {
            return MarginalLikelihood { log_lik: f64::NEG_INFINITY, underflow: true };
        }
        let sum: f64 = per_path.iter().map(|&s| (s - top).exp()).sum();
        let log_lik = top + (sum / per_path.len() as f64).ln() - log_fact;
        MarginalLikelihood { log_lik, underflow: false }
    }

    pub fn mean_tilde(&self) -> f64 {
        self.tilde.iter().sum::<f64>() / self.tilde.len() as f64
    }
}

/// `log p(Y_J | H_s, ν)` estimated over the bank's paths. `counts` is the
/// full symbol; only the bank's window is used.
pub fn marginal_log_likelihood(
    counts: &[f64],
    bit: Bit,
    nuisance: &NuisanceVector,
    bank: &PathBank,
) -> Result<MarginalLikelihood> {
    nuisance.validate(bank.memory)?;
    let latent = bank.latent(bit, &nuisance.past_bits)?;
    Ok(latent.log_likelihood(&counts[bank.window()], nuisance.psi, nuisance.lambda_bg))
}

/// Genie-aided likelihood-ratio test with threshold `η = 1`.
pub fn oracle_lrt(
    counts: &[f64],
    truth: &NuisanceVector,
    bank: &PathBank,
    gate: Option<&GateConfig<f64>>,
) -> Result<Verdict> {
    if !gate_passes(counts, bank, gate) {
        return Ok(Verdict::gate_closed());
    }
    let l1 = marginal_log_likelihood(counts, 1, truth, bank)?;
    let l0 = marginal_log_likelihood(counts, 0, truth, bank)?;
    Ok(ratio_verdict(l1.log_lik, l0.log_lik))
}

fn gate_passes(counts: &[f64], bank: &PathBank, gate: Option<&GateConfig<f64>>) -> bool {
    let y = &counts[bank.window()];
    gate.is_none_or(|g| g.passes(y.iter().sum::<f64>() / y.len() as f64))
}

fn ratio_verdict(l1: f64, l0: f64) -> Verdict {
    if !l1.is_finite() && !l0.is_finite() {
        return Verdict { decision: 0, gated: true, statistic: None, rule: Rule::FitFailed };
    }
    let llr = l1 - l0;
    Verdict { decision: u8::from(llr > 0.0), gated: true, statistic: Some(llr), rule: Rule::Threshold }
}

/// Settings of the profiled-likelihood search.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlrtConfig {
    pub restarts: usize,
    pub max_evals: usize,
    /// `ε` in the `log(λ + ε)` parameterisation.
    pub epsilon: f64,
}

impl Default for GlrtConfig {
    fn default() -> Self {
        Self { restarts: 3, max_evals: 200, epsilon: 1e-3 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfiledLikelihood {
    pub psi: f64,
    pub lambda_bg: f64,
    pub log_lik: f64,
}

/// Maximises the marginal likelihood of one hypothesis over `Ψ > 0` and
/// `λ ≥ 0` by Nelder–Mead on `(log Ψ, log(λ + ε))`.
pub fn profile_likelihood(
    counts: &[f64],
    bit: Bit,
    past: &[Option<Bit>],
    bank: &PathBank,
    cfg: &GlrtConfig,
) -> Result<ProfiledLikelihood> {
    let latent = bank.latent(bit, past)?;
    let y = &counts[bank.window()];
    let ybar = y.iter().sum::<f64>() / y.len() as f64;
    let eps = cfg.epsilon;
    let unpack = |x: [f64; 2]| (x[0].exp(), (x[1].exp() - eps).max(0.0));
    let objective = |x: [f64; 2]| {
        let (psi, lambda) = unpack(x);
        let v = latent.log_likelihood(y, psi, lambda).log_lik;
        if v.is_nan() {
            f64::INFINITY
        } else {
            -v
        }
    };
    let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
    let lambda0 = (0.5 * (lo + ybar)).max(eps);
    let signal = latent.mean_tilde();
    let psi0 = if signal > 0.0 { ((ybar - lo).max(0.1 * ybar) / signal).max(1e-6) } else { 1.0 };
    let base = [psi0.ln(), (lambda0 + eps).ln()];
    let starts = [base, [base[0] + 1.0, base[1] - 1.0], [base[0] - 1.0, base[1] + 0.5]];
    let mut best: Option<([f64; 2], f64)> = None;
    for start in starts.iter().cycle().take(cfg.restarts.max(1)) {
        let (x, f) = nelder_mead(&objective, *start, 0.5, cfg.max_evals);
        if best.is_none_or(|(_, fb)| f < fb) {
            best = Some((x, f));
        }
    }
    let (x, f) = best.expect("at least one restart");
    let (psi, lambda_bg) = unpack(x);
    Ok(ProfiledLikelihood { psi, lambda_bg, log_lik: -f })
}

/// GLRT: each hypothesis' marginal likelihood maximised over `(Ψ, λ_bg)`,
/// compared at `η = 1`. `past` is the ISI side information.
pub fn glrt(
    counts: &[f64],
    past: &[Option<Bit>],
    bank: &PathBank,
    gate: Option<&GateConfig<f64>>,
    cfg: &GlrtConfig,
) -> Result<Verdict> {
    if !gate_passes(counts, bank, gate) {
        return Ok(Verdict::gate_closed());
    }
    if counts[bank.window()].iter().all(|&y| y == 0.0) {
        // Both suprema equal 1 (Ψ, λ → 0): an exact tie.
        return Ok(Verdict { decision: 0, gated: true, statistic: Some(0.0), rule: Rule::Threshold });
    }
    let l1 = profile_likelihood(counts, 1, past, bank, cfg)?;
    let l0 = profile_likelihood(counts, 0, past, bank, cfg)?;
    Ok(ratio_verdict(l1.log_lik, l0.log_lik))
}

struct Objective<F>(F);

impl<F: Fn([f64; 2]) -> f64> CostFunction for Objective<F> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, x: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        Ok((self.0)([x[0], x[1]]))
    }
}

/// Minimises `f` from `start` with an initial simplex edge `step`, using at
/// most `max_evals` evaluations of `f`.
fn nelder_mead(f: impl Fn([f64; 2]) -> f64, start: [f64; 2], step: f64, max_evals: usize) -> ([f64; 2], f64) {
    let simplex = vec![start.to_vec(), vec![start[0] + step, start[1]], vec![start[0], start[1] + step]];
    // Three evaluations set up the simplex; an iteration costs at most four.
    let iters = (max_evals.saturating_sub(3) / 4) as u64;
    let solver = NelderMead::new(simplex).with_sd_tolerance(1e-10).expect("positive tolerance");
    let run = Executor::new(Objective(&f), solver).configure(|s| s.max_iters(iters)).run();
    match run {
        Ok(res) => {
            let state = res.state();
            let x = state.get_best_param().expect("initialised simplex");
            ([x[0], x[1]], state.get_best_cost())
        }
        Err(_) => (start, f(start)),
    }
}

/// Side information handed to a per-symbol rule.
#[derive(Clone, Copy, Debug, Default)]
pub struct SideInfo<'a> {
    /// `(ŝ_{k-1}, ..., ŝ_{k-L+1})`; empty when unknown.
    pub past_bits: &'a [Option<Bit>],
    /// Predicted ISI tail over the full symbol, for receivers that cancel it
    /// in the mean model.
    pub isi_offset: Option<&'a [f64]>,
}

/// A per-symbol detection rule that [`dfe_wrap`] can drive.
pub trait SymbolDetector: Sync {
    fn detect_symbol(&self, counts: &[f64], side: &SideInfo<'_>) -> Result<Verdict>;
}

/// The profiled excess-dispersion detector.
#[derive(Clone, Debug)]
pub struct DispersionReceiver {
    pub template: Template<f64>,
    pub gate: Option<GateConfig<f64>>,
    pub threshold: DispersionThreshold<f64>,
}

impl SymbolDetector for DispersionReceiver {
    fn detect_symbol(&self, counts: &[f64], side: &SideInfo<'_>) -> Result<Verdict> {
        detect_with_offset(counts, &self.template, self.gate.as_ref(), &self.threshold, side.isi_offset)
    }
}

#[derive(Clone, Debug)]
pub struct MeanReceiver {
    pub template: Template<f64>,
    pub gate: Option<GateConfig<f64>>,
    pub threshold: DispersionThreshold<f64>,
}

impl SymbolDetector for MeanReceiver {
    fn detect_symbol(&self, counts: &[f64], side: &SideInfo<'_>) -> Result<Verdict> {
        Ok(mean_detector(counts, &self.template, self.gate.as_ref(), &self.threshold, side.isi_offset))
    }
}

/// GLRT conditioned on the side information's past bits (silent when unknown).
#[derive(Clone, Debug)]
pub struct GlrtReceiver {
    pub bank: PathBank,
    pub gate: Option<GateConfig<f64>>,
    pub cfg: GlrtConfig,
}

impl SymbolDetector for GlrtReceiver {
    fn detect_symbol(&self, counts: &[f64], side: &SideInfo<'_>) -> Result<Verdict> {
        let past = fill_past(side.past_bits, self.bank.memory);
        glrt(counts, &past, &self.bank, self.gate.as_ref(), &self.cfg)
    }
}

fn fill_past(known: &[Option<Bit>], memory: usize) -> Vec<Option<Bit>> {
    (0..memory - 1).map(|i| known.get(i).copied().flatten()).collect()
}

/// Least-squares ISI-tail predictor at a reference separation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsiPredictor {
    pub r_ref: f64,
    /// Count-scale gain `â_cal` fitted on labeled calibration symbols.
    pub gain: f64,
    pub amplitudes: [f64; 2],
    /// `h(r_ref, ℓ Tsym + t_m)` for `ℓ = 0..L-1`, row-major in `ℓ`.
    kernel: Vec<f64>,
    samples: usize,
}

impl IsiPredictor {
    /// Fits `y_m ≈ b + g₀ A(s_k) h(r_ref, t_m) + g Σ_{ℓ≥1} A(s_{k-ℓ}) h(r_ref, ℓ Tsym + t_m)`
    /// by ordinary least squares over calibration symbols with known ISI
    /// context (`contexts[k][ℓ] = s_{k-ℓ}`) and keeps the tail gain `g`. The
    /// current symbol gets its own gain because mobility moves its response
    /// away from the reference geometry.
    pub fn calibrate(
        channel: &ChannelParams<f64>,
        r_ref: f64,
        counts: &[Vec<f64>],
        contexts: &[Vec<Option<Bit>>],
    ) -> Result<Self> {
        ensure(counts.len() == contexts.len() && !counts.is_empty(), || {
            Error::Contract("need matching, nonempty counts and contexts".into())
        })?;
        let mut pred = Self::with_gain(channel, r_ref, 1.0);
        let mut xtx = [[0.0; 3]; 3];
        let mut xty = [0.0; 3];
        for (y, ctx) in counts.iter().zip(contexts) {
            let head = pred.superposition(&ctx[..1], 0);
            let tail = pred.superposition(ctx, 1);
            for ((h, t), yv) in head.iter().zip(&tail).zip(y) {
                let x = [1.0, *h, *t];
                for r in 0..3 {
                    xty[r] += x[r] * yv;
                    for c in 0..3 {
                        xtx[r][c] += x[r] * x[c];
                    }
                }
            }
        }
        pred.gain = solve3(xtx, xty).map_or(0.0, |beta| beta[2].max(0.0));
        Ok(pred)
    }

    pub fn with_gain(channel: &ChannelParams<f64>, r_ref: f64, gain: f64) -> Self {
        let r = r_ref.max(channel.r_min);
        let samples = channel.samples_per_symbol;
        let kernel = (0..channel.memory)
            .flat_map(|ell| {
                let lag = ell as f64 * channel.symbol_duration;
                (0..samples).map(move |m| kernel_unchecked(r, lag + channel.sample_offset(m), channel))
            })
            .collect();
        Self { r_ref, gain, amplitudes: channel.amplitudes, kernel, samples }
    }

    pub fn memory(&self) -> usize {
        self.kernel.len() / self.samples
    }

    /// `Σ_{ℓ ≥ from} A(s_{k-ℓ}) h(r_ref, ·)` with `context[ℓ] = s_{k-ℓ}`.
    fn superposition(&self, context: &[Option<Bit>], from: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.samples];
        for (ell, bit) in context.iter().enumerate().skip(from).take(self.memory().saturating_sub(from)) {
            let Some(b) = bit else { continue };
            let a = self.amplitudes[usize::from(*b != 0)];
            if a == 0.0 {
                continue;
            }
            for (o, h) in out.iter_mut().zip(&self.kernel[ell * self.samples..][..self.samples]) {
                *o += a * h;
            }
        }
        out
    }

    /// Predicted ISI tail in counts over the full symbol, from past symbols
    /// `(ŝ_{k-1}, ...)`. `None` when the prediction is identically zero.
    pub fn tail(&self, past: &[Option<Bit>]) -> Option<Vec<f64>> {
        let mut ctx = Vec::with_capacity(past.len() + 1);
        ctx.push(None);
        ctx.extend_from_slice(past);
        let x = self.superposition(&ctx, 1);
        let out: Vec<f64> = x.iter().map(|v| self.gain * v).collect();
        out.iter().any(|&v| v != 0.0).then_some(out)
    }
}

/// Gaussian elimination with partial pivoting; `None` if singular.
fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    let scale = a.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()));
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() <= 1e-12 * scale {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            for c in col..3 {
                a[row][c] -= f * a[col][c];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let s: f64 = (row + 1..3).map(|c| a[row][c] * x[c]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

/// Verdicts of both DFE passes.
#[derive(Clone, Debug, PartialEq)]
pub struct DfeOutput {
    pub tentative: Vec<Verdict>,
    pub cancelled: Vec<Verdict>,
}

/// `(b_{k-1}, ..., b_{k-L+1})` from a decision stream; slots before the
/// packet are `None`.
pub fn past_context(bits: &[Bit], k: usize, memory: usize) -> Vec<Option<Bit>> {
    (1..memory).map(|ell| (ell <= k).then(|| bits[k - ell])).collect()
}

/// Two-pass decision feedback. Pass 1 detects every symbol with no ISI side
/// information. Pass 2 re-detects each symbol conditioning on pass-1
/// decisions (or on `genie` bits when given): the past bits are handed to the
/// rule and, when a predictor is given, the predicted tail enters the mean
/// model as a known offset.
pub fn dfe_wrap<D: SymbolDetector + ?Sized>(
    detector: &D,
    counts: &[Vec<f64>],
    memory: usize,
    predictor: Option<&IsiPredictor>,
    genie: Option<&[Bit]>,
) -> Result<DfeOutput> {
    ensure(memory >= 1, || Error::Param("ISI memory must be >= 1".into()))?;
    if let Some(g) = genie {
        ensure(g.len() == counts.len(), || Error::Contract("genie bits must cover the packet".into()))?;
    }
    let tentative: Vec<Verdict> =
        counts.iter().map(|y| detector.detect_symbol(y, &SideInfo::default())).collect::<Result<_>>()?;
    if memory == 1 {
        return Ok(DfeOutput { cancelled: tentative.clone(), tentative });
    }
    let decided: Vec<Bit> = tentative.iter().map(|v| v.decision).collect();
    let feedback = genie.unwrap_or(&decided);
    let cancelled = counts
        .iter()
        .enumerate()
        .map(|(k, y)| {
            let past = past_context(feedback, k, memory);
            let offset = predictor.and_then(|p| p.tail(&past));
            detector.detect_symbol(y, &SideInfo { past_bits: &past, isi_offset: offset.as_deref() })
        })
        .collect::<Result<_>>()?;
    Ok(DfeOutput { tentative, cancelled })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::counting::{generate_packet, poisson, Warmup};
    use crate::detector::calibrate_gate_from_means;
    use crate::rng::stream;
    use rand::Rng;

    fn flat_template(m: usize) -> Template<f64> {
        Template::from_shape(&vec![1.0; m], 0.05, 0.05).unwrap()
    }

    #[test]
    fn mean_detector_examples() {
        let t = flat_template(10);
        let thr = DispersionThreshold { tau_t: 2.0, pfa_target: 0.05, kappa: 1 };
        let three = vec![3.0; 10];
        assert_eq!(mean_detector(&three, &t, None, &thr, None).decision, 1);
        let two = vec![2.0; 10];
        assert_eq!(mean_detector(&two, &t, None, &thr, None).decision, 0);
        let off = vec![1.0; 10];
        assert_eq!(mean_detector(&three, &t, None, &thr, Some(&off)).decision, 0);
    }

    #[test]
    fn mean_detector_false_alarm_rate() {
        let t = flat_template(20);
        let mut r = stream(1);
        let mut draw = |n: usize| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..20).map(|_| f64::from(poisson(4.0, &mut r).unwrap())).collect()).collect()
        };
        let cal: Vec<f64> = draw(4000).iter().map(|y| t.windowed_mean(y)).collect();
        let thr = calibrate_mean_threshold(&cal, 0.05).unwrap();
        let eval = draw(20_000);
        let n = eval.len();
        let fa = eval.iter().filter(|y| mean_detector(y, &t, None, &thr, None).decision == 1).count() as f64 / n as f64;
        // Lattice-valued means: the realised rate sits at or below the target.
        let se = (0.05 * 0.95 / n as f64).sqrt();
        assert!(fa <= 0.05 + 3.0 * se && fa > 0.02, "{fa}");
    }

    fn small_channel(memory: usize) -> ChannelParams<f64> {
        ChannelParams { memory, samples_per_symbol: 20, ..ChannelParams::baseline() }
    }

    fn window(ch: &ChannelParams<f64>) -> Range<usize> {
        2..ch.samples_per_symbol - 2
    }

    #[test]
    fn frozen_paths_give_exact_poisson_likelihood() {
        let ch = small_channel(2);
        let mob = MobilityParams::baseline().frozen();
        let bank = PathBank::new(&ch, &mob, window(&ch), &MarginalLikelihoodConfig { n_paths: 128, common_seed: 3 }).unwrap();
        let mut r = stream(4);
        let r0 = mob.x0[0];
        for _ in 0..20 {
            let y: Vec<f64> = (0..20).map(|_| f64::from(r.random_range(0..400u32))).collect();
            let nu = NuisanceVector { psi: 0.8, lambda_bg: 1.5, past_bits: vec![Some(1)] };
            for bit in [0u8, 1] {
                let got = marginal_log_likelihood(&y, bit, &nu, &bank).unwrap();
                let mut exact = 0.0;
                for m in window(&ch) {
                    let mut tilde = 0.0;
                    for (ell, b) in [bit, 1].iter().enumerate() {
                        let t = ell as f64 * ch.symbol_duration + ch.sample_offset(m);
                        tilde += ch.amplitudes[*b as usize] * kernel_unchecked(r0, t, &ch);
                    }
                    let mu = 1.5 + 0.8 * tilde;
                    exact += y[m] * mu.ln() - mu - ln_gamma(y[m] + 1.0);
                }
                assert!((got.log_lik - exact).abs() < 1e-9 * exact.abs().max(1.0), "{} vs {exact}", got.log_lik);
            }
        }
    }

    #[test]
    fn frozen_oracle_matches_closed_form_lrt() {
        let ch = small_channel(2);
        let mob = MobilityParams::baseline().frozen();
        let bank = PathBank::new(&ch, &mob, window(&ch), &MarginalLikelihoodConfig { n_paths: 100, common_seed: 5 }).unwrap();
        let bits: Vec<Bit> = (0..2000).map(|i| ((i * 7919) % 3 == 0) as u8).collect();
        let pkt = generate_packet(&bits, 1.0, &ch, &mob, Warmup::Silence, 6).unwrap();
        let r0 = mob.x0[0];
        let mut agree = 0;
        for f in &pkt.frames {
            let y = f.counts_f64();
            let past = f.truth.bits_context[1..].to_vec();
            let nu = NuisanceVector { psi: 1.0, lambda_bg: ch.background, past_bits: past.clone() };
            let v = oracle_lrt(&y, &nu, &bank, None).unwrap();
            let llr: f64 = window(&ch)
                .map(|m| {
                    let mean = |bit: Bit| {
                        let ctx = std::iter::once(Some(bit)).chain(past.iter().copied());
                        ch.background
                            + ctx
                                .enumerate()
                                .filter_map(|(ell, b)| b.map(|b| (ell, b)))
                                .map(|(ell, b)| {
                                    ch.amplitudes[b as usize]
                                        * kernel_unchecked(r0, ell as f64 * ch.symbol_duration + ch.sample_offset(m), &ch)
                                })
                                .sum::<f64>()
                    };
                    let (m1, m0) = (mean(1), mean(0));
                    y[m] * (m1 / m0).ln() - (m1 - m0)
                })
                .sum();
            agree += usize::from(v.decision == u8::from(llr > 0.0));
        }
        assert_eq!(agree, pkt.frames.len());
    }

    #[test]
    fn likelihood_prefers_generating_hypothesis() {
        let ch = small_channel(2);
        let mob = MobilityParams::baseline();
        let bank = PathBank::new(&ch, &mob, window(&ch), &MarginalLikelihoodConfig { n_paths: 256, common_seed: 7 }).unwrap();
        let bits: Vec<Bit> = (0..300).map(|i| (i % 2) as u8).collect();
        let pkt = generate_packet(&bits, 1.0, &ch, &mob, Warmup::Silence, 8).unwrap();
        let mut margin = 0.0;
        for f in &pkt.frames {
            let nu = NuisanceVector { psi: 1.0, lambda_bg: ch.background, past_bits: f.truth.bits_context[1..].to_vec() };
            let s = f.truth.bits_context[0].unwrap();
            let y = f.counts_f64();
            let right = marginal_log_likelihood(&y, s, &nu, &bank).unwrap().log_lik;
            let wrong = marginal_log_likelihood(&y, 1 - s, &nu, &bank).unwrap().log_lik;
            margin += right - wrong;
        }
        assert!(margin > 0.0);
    }

    #[test]
    fn estimator_variance_shrinks_with_paths() {
        let ch = small_channel(1);
        let mob = MobilityParams::baseline();
        let y: Vec<f64> = {
            let pkt = generate_packet(&[1], 1.0, &ch, &mob, Warmup::Silence, 9).unwrap();
            pkt.frames[0].counts_f64()
        };
        let nu = NuisanceVector { psi: 1.0, lambda_bg: 2.0, past_bits: vec![] };
        let spread = |n: usize| {
            let vals: Vec<f64> = (0..24)
                .map(|s| {
                    let bank = PathBank::new(&ch, &mob, window(&ch), &MarginalLikelihoodConfig { n_paths: n, common_seed: 100 + s }).unwrap();
                    // Likelihood itself, not its log: the mean of n i.i.d. path terms.
                    marginal_log_likelihood(&y, 0, &nu, &bank).unwrap().log_lik
                        + (marginal_log_likelihood(&y, 1, &nu, &bank).unwrap().log_lik
                            - marginal_log_likelihood(&y, 0, &nu, &bank).unwrap().log_lik)
                })
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (vals.len() - 1) as f64
        };
        let ratio = spread(128) / spread(512);
        assert!(ratio > 2.0 && ratio < 8.0, "{ratio}");
    }

    #[test]
    fn underflow_is_flagged() {
        let ch = small_channel(1);
        let bank = PathBank::new(&ch, &MobilityParams::baseline().frozen(), window(&ch), &MarginalLikelihoodConfig { n_paths: 100, common_seed: 1 }).unwrap();
        let y = vec![5.0; 20];
        let nu = NuisanceVector { psi: 1.0, lambda_bg: 0.0, past_bits: vec![] };
        let l = marginal_log_likelihood(&y, 0, &nu, &bank).unwrap();
        assert!(l.underflow && l.log_lik == f64::NEG_INFINITY);
        let bad = NuisanceVector { psi: 1.0, lambda_bg: 0.0, past_bits: vec![Some(0)] };
        assert!(marginal_log_likelihood(&y, 0, &bad, &bank).is_err());
    }

    #[test]
    fn identical_hypotheses_are_a_coin_flip_boundary() {
        let mut ch = small_channel(1);
        ch.amplitudes = [5e4, 5e4];
        let mut mob = MobilityParams::baseline();
        mob.speed = [10e-6, 10e-6];
        mob.rot_diffusion = [2.0, 2.0];
        let bank = PathBank::new(&ch, &mob, window(&ch), &MarginalLikelihoodConfig { n_paths: 100, common_seed: 2 }).unwrap();
        let pkt = generate_packet(&[1; 50], 1.0, &ch, &mob, Warmup::Silence, 3).unwrap();
        let nu = NuisanceVector { psi: 1.0, lambda_bg: 2.0, past_bits: vec![] };
        for f in &pkt.frames {
            let v = oracle_lrt(&f.counts_f64(), &nu, &bank, None).unwrap();
            assert!(v.statistic.unwrap().abs() < 1e-9);
        }
    }

    #[test]
    fn glrt_recovers_nuisance_at_high_counts() {
        // Background must be comparable to the signal tail to be identifiable.
        let ch = ChannelParams { amplitudes: [0.0, 2e5], background: 1000.0, ..small_channel(1) };
        let mob = MobilityParams::baseline().frozen();
        let bank = PathBank::new(&ch, &mob, window(&ch), &MarginalLikelihoodConfig { n_paths: 100, common_seed: 1 }).unwrap();
        for (psi, seed) in [(1.0, 11), (2.0, 12), (0.5, 13)] {
            let pkt = generate_packet(&[1], psi, &ch, &mob, Warmup::Silence, seed).unwrap();
            let y = pkt.frames[0].counts_f64();
            let fit = profile_likelihood(&y, 1, &[], &bank, &GlrtConfig::default()).unwrap();
            assert!((fit.psi / psi - 1.0).abs() < 0.2, "{fit:?}");
            assert!((fit.lambda_bg / 1000.0 - 1.0).abs() < 0.2, "{fit:?}");
            let truth = NuisanceVector { psi, lambda_bg: 1000.0, past_bits: vec![] };
            let at_truth = marginal_log_likelihood(&y, 1, &truth, &bank).unwrap().log_lik;
            assert!(fit.log_lik >= at_truth - 1e-6, "{} < {at_truth}", fit.log_lik);
        }
    }

    #[test]
    fn glrt_profiling_dominates_truth_under_mobility() {
        let ch = small_channel(2);
        let mob = MobilityParams::baseline();
        let bank = PathBank::new(&ch, &mob, window(&ch), &MarginalLikelihoodConfig { n_paths: 128, common_seed: 4 }).unwrap();
        let bits: Vec<Bit> = (0..30).map(|i| ((i / 2) % 2) as u8).collect();
        let pkt = generate_packet(&bits, 1.5, &ch, &mob, Warmup::Silence, 14).unwrap();
        for f in &pkt.frames {
            let y = f.counts_f64();
            let past = f.truth.bits_context[1..].to_vec();
            for bit in [0u8, 1] {
                let fit = profile_likelihood(&y, bit, &past, &bank, &GlrtConfig::default()).unwrap();
                let truth = NuisanceVector { psi: 1.5, lambda_bg: ch.background, past_bits: past.clone() };
                let at_truth = marginal_log_likelihood(&y, bit, &truth, &bank).unwrap().log_lik;
                assert!(fit.log_lik >= at_truth - 1e-3 * at_truth.abs().max(1.0), "bit {bit}: {} < {at_truth}", fit.log_lik);
            }
        }
    }

    #[test]
    fn glrt_zero_counts_tie_to_zero() {
        let ch = small_channel(1);
        let bank = PathBank::new(&ch, &MobilityParams::baseline(), window(&ch), &MarginalLikelihoodConfig { n_paths: 100, common_seed: 1 }).unwrap();
        let v = glrt(&[0.0; 20], &[], &bank, None, &GlrtConfig::default()).unwrap();
        assert_eq!((v.decision, v.statistic), (0, Some(0.0)));
    }

    #[test]
    fn glrt_scale_invariance() {
        let ch = small_channel(1);
        let mob = MobilityParams::baseline().frozen();
        let bank = PathBank::new(&ch, &mob, window(&ch), &MarginalLikelihoodConfig { n_paths: 100, common_seed: 1 }).unwrap();
        for seed in 20..25 {
            let a = generate_packet(&[1], 1.0, &ch, &mob, Warmup::Silence, seed).unwrap();
            let b = generate_packet(&[1], 3.0, &ch, &mob, Warmup::Silence, seed).unwrap();
            let fa = profile_likelihood(&a.frames[0].counts_f64(), 1, &[], &bank, &GlrtConfig::default()).unwrap();
            let fb = profile_likelihood(&b.frames[0].counts_f64(), 1, &[], &bank, &GlrtConfig::default()).unwrap();
            assert!((fb.psi / fa.psi / 3.0 - 1.0).abs() < 0.15, "{} {}", fa.psi, fb.psi);
        }
    }

    fn calibrated_receivers(ch: &ChannelParams<f64>) -> (DispersionReceiver, MeanReceiver, Template<f64>) {
        let mob = MobilityParams::baseline();
        let h1 = generate_packet(&[1; 300], 1.0, ch, &mob, Warmup::Silence, 30).unwrap();
        let h0 = generate_packet(&vec![0; 2500], 1.0, ch, &mob, Warmup::Silence, 31).unwrap();
        let template = crate::profiling::learn_template(&h1.frames.iter().map(|f| f.counts_f64()).collect::<Vec<_>>(), 0.05, 0.05).unwrap();
        let h0c: Vec<Vec<f64>> = h0.frames.iter().map(|f| f.counts_f64()).collect();
        let means: Vec<f64> = h0c.iter().map(|y| template.windowed_mean(y)).collect();
        let gate = calibrate_gate_from_means(&means, 0.05).unwrap();
        let stats: Vec<f64> = h0c
            .iter()
            .filter(|y| gate.passes(template.windowed_mean(y)))
            .filter_map(|y| crate::detector::statistic(y, &template).unwrap())
            .collect();
        let thr = calibrate_threshold(&stats, 0.05, None).unwrap();
        let gated: Vec<f64> = means.iter().copied().filter(|m| gate.passes(*m)).collect();
        let mthr = calibrate_mean_threshold(&gated, 0.05).unwrap();
        (
            DispersionReceiver { template: template.clone(), gate: Some(gate), threshold: thr },
            MeanReceiver { template: template.clone(), gate: Some(gate), threshold: mthr },
            template,
        )
    }

    #[test]
    fn dfe_is_identity_without_memory() {
        let ch = small_channel(1);
        let (t, m, _) = calibrated_receivers(&ch);
        let bits: Vec<Bit> = (0..200).map(|i| ((i * 31) % 7 < 3) as u8).collect();
        let pkt = generate_packet(&bits, 1.0, &ch, &MobilityParams::baseline(), Warmup::Silence, 32).unwrap();
        let counts: Vec<Vec<f64>> = pkt.frames.iter().map(|f| f.counts_f64()).collect();
        let pred = IsiPredictor::with_gain(&ch, 10e-6, 1.0);
        assert!(pred.tail(&[]).is_none());
        for det in [&t as &dyn SymbolDetector, &m] {
            let out = dfe_wrap(det, &counts, 1, Some(&pred), None).unwrap();
            assert_eq!(out.tentative, out.cancelled);
            let plain: Vec<Verdict> = counts.iter().map(|y| det.detect_symbol(y, &SideInfo::default()).unwrap()).collect();
            assert_eq!(plain, out.cancelled);
        }
    }

    #[test]
    fn predictor_recovers_count_scale() {
        let ch = small_channel(2);
        let mob = MobilityParams::baseline().frozen();
        let bits: Vec<Bit> = (0..400).map(|i| ((i * 13) % 5 < 2) as u8).collect();
        let pkt = generate_packet(&bits, 1.7, &ch, &mob, Warmup::Silence, 33).unwrap();
        let counts: Vec<Vec<f64>> = pkt.frames.iter().map(|f| f.counts_f64()).collect();
        let ctx: Vec<Vec<Option<Bit>>> = pkt.frames.iter().map(|f| f.truth.bits_context.clone()).collect();
        let pred = IsiPredictor::calibrate(&ch, mob.x0[0], &counts, &ctx).unwrap();
        assert!((pred.gain / 1.7 - 1.0).abs() < 0.02, "{}", pred.gain);
        let tail = pred.tail(&[Some(1)]).unwrap();
        let t0 = ch.symbol_duration + ch.sample_offset(0);
        assert!((tail[0] - pred.gain * 1e5 * kernel_unchecked(10e-6, t0, &ch)).abs() < 1e-9 * tail[0]);
        assert!(pred.tail(&[Some(0)]).is_none());
    }

    #[test]
    fn genie_feedback_no_worse_than_tentative() {
        let ch = ChannelParams { memory: 3, ..small_channel(3) };
        let (_, m, _) = calibrated_receivers(&ch);
        let mob = MobilityParams::baseline();
        let bits: Vec<Bit> = {
            let mut r = stream(34);
            (0..3000).map(|_| r.random_range(0..=1u8)).collect()
        };
        let pkt = generate_packet(&bits, 1.0, &ch, &mob, Warmup::Silence, 35).unwrap();
        let counts: Vec<Vec<f64>> = pkt.frames.iter().map(|f| f.counts_f64()).collect();
        let ctx: Vec<Vec<Option<Bit>>> = pkt.frames.iter().map(|f| f.truth.bits_context.clone()).collect();
        let pred = IsiPredictor::calibrate(&ch, 10e-6, &counts[..500], &ctx[..500]).unwrap();
        let ber = |v: &[Verdict]| v.iter().zip(&bits).filter(|(v, b)| v.decision != **b).count() as f64 / bits.len() as f64;
        let tent = dfe_wrap(&m, &counts, 3, Some(&pred), None).unwrap();
        let genie = dfe_wrap(&m, &counts, 3, Some(&pred), Some(&bits)).unwrap();
        let (bt, bg) = (ber(&tent.cancelled), ber(&genie.cancelled));
        let se = crate::detector::binomial_se(bt, bits.len()) * std::f64::consts::SQRT_2;
        assert!(bg <= bt + 2.0 * se, "{bg} vs {bt}");
        assert!(ber(&tent.cancelled) <= ber(&tent.tentative) + 2.0 * se);
    }

    #[test]
    fn past_context_pads_before_packet() {
        assert_eq!(past_context(&[1, 0, 1], 0, 3), vec![None, None]);
        assert_eq!(past_context(&[1, 0, 1], 2, 3), vec![Some(0), Some(1)]);
        assert!(past_context(&[1], 0, 1).is_empty());
    }
}
