//! Experiment configuration, orchestration and machine-readable output.
//!
//! Every random quantity is drawn from a stream keyed by
//! `(master_seed, domain, point, packet)`, so results do not depend on thread
//! scheduling. Calibration and pilot data come from their own domains and never
//! enter the reported metrics.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    correlation_diagnostics, isi_profile, roc_ber, separability, GaussianWorkingModel, Operating, SeparabilityReport,
    DEFAULT_MAX_LAG,
};
use crate::baselines::{
    calibrate_mean_threshold, dfe_wrap, oracle_lrt, past_context, DispersionReceiver,
    GlrtConfig, GlrtReceiver, IsiPredictor, MarginalLikelihoodConfig, NuisanceVector, PathBank, SymbolDetector,
};
use crate::counting::{generate_packet, Warmup};
use crate::detector::{
    binomial_se, calibrate_gate, calibrate_threshold, psi_sequence,
    t_delta, DetectorVerdict, DispersionThreshold, GateConfig, Rule,
};
use crate::error::ensure;
use crate::mobility::{effective_diffusivity, MobilityParams, SymbolAnchoring};
use crate::physics::{baseline, receiver_volume, ChannelParams};
use crate::profiling::{fit_profile_with_offset, learn_template, Template};
use crate::rng::{self, derive_seed, domain, mix64, stream};
use crate::{Bit, Error, Result};

const UM: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelSection {
    pub receiver_radius_um: f64,
    pub diffusion_m2_per_s: f64,
    pub memory: usize,
    pub symbol_duration_s: f64,
    pub samples_per_symbol: usize,
    /// Molecules released for symbols 0 and 1.
    pub amplitudes: [f64; 2],
    /// Counts per sample.
    pub background: f64,
    pub separation_floor_um: f64,
}

impl Default for ChannelSection {
    fn default() -> Self {
        let c = ChannelParams::<f64>::baseline();
        Self {
            receiver_radius_um: baseline::RECEIVER_RADIUS / UM,
            diffusion_m2_per_s: c.diffusion,
            memory: c.memory,
            symbol_duration_s: c.symbol_duration,
            samples_per_symbol: c.samples_per_symbol,
            amplitudes: c.amplitudes,
            background: c.background,
            separation_floor_um: c.r_min / UM,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MobilitySection {
    pub speed_um_per_s: [f64; 2],
    pub rot_diffusion_per_s: [f64; 2],
    pub trans_diffusion_m2_per_s: f64,
    pub dt_s: f64,
    pub initial_separation_um: f64,
    pub anchoring: SymbolAnchoring,
    pub warmup: Warmup,
}

impl Default for MobilitySection {
    fn default() -> Self {
        let m = MobilityParams::baseline();
        Self {
            speed_um_per_s: [m.speed[0] / UM, m.speed[1] / UM],
            rot_diffusion_per_s: m.rot_diffusion,
            trans_diffusion_m2_per_s: m.trans_diffusion,
            dt_s: m.dt,
            initial_separation_um: m.x0[0] / UM,
            anchoring: m.anchoring,
            warmup: Warmup::Silence,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSection {
    pub alpha: f64,
    pub beta: f64,
    pub pfa_target: f64,
    pub alpha_gate: f64,
    pub max_lag: usize,
    /// Packets reserved for calibration at each operating point.
    pub calibration_packets: usize,
}

impl Default for DetectorSection {
    fn default() -> Self {
        Self { alpha: 0.05, beta: 0.05, pfa_target: 0.05, alpha_gate: 0.05, max_lag: DEFAULT_MAX_LAG, calibration_packets: 200 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSection {
    pub n_paths: usize,
    pub glrt_restarts: usize,
    pub glrt_max_evals: usize,
    /// Symbols per sweep point scored by the GLRT (whole packets, in order).
    pub glrt_symbol_cap: usize,
    pub r_ref_um: f64,
    /// Fit the ISI tail gain to calibration counts instead of using the
    /// kernel at `r_ref` as is.
    pub fit_isi_gain: bool,
    /// Feed true past bits to the likelihood receivers and the DFE.
    pub genie_isi: bool,
    pub detectors: Vec<DetectorKind>,
}

impl Default for BaselineSection {
    fn default() -> Self {
        Self {
            n_paths: 512,
            glrt_restarts: 3,
            glrt_max_evals: 200,
            glrt_symbol_cap: 384,
            r_ref_um: baseline::INITIAL_SEPARATION / UM,
            fit_isi_gain: false,
            genie_isi: false,
            detectors: DetectorKind::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub psi_grid: Vec<f64>,
    pub h0_symbols_per_point: usize,
    /// Log-uniform range of the per-packet gain in the ROC experiment.
    pub psi_range: [f64; 2],
    pub roc_points: usize,
    /// `D_eff(1) / D_eff(0)` values of the mobility-contrast sweep.
    pub contrast_grid: Vec<f64>,
    /// Release amplitude of both symbols in the fixed-release arm.
    pub release_amplitude: f64,
    pub pilot_symbols: usize,
    pub pilot_tolerance: f64,
    pub samples_grid: Vec<usize>,
    pub memory_grid: Vec<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            psi_grid: vec![0.5, 0.75, 1.0, 1.5, 2.0],
            h0_symbols_per_point: 20_000,
            psi_range: [0.5, 2.0],
            roc_points: 41,
            contrast_grid: vec![1.0, 3.0, 10.0, 30.0, 100.0, 300.0],
            release_amplitude: 1e5,
            pilot_symbols: 2000,
            pilot_tolerance: 0.01,
            samples_grid: vec![10, 20, 40, 80, 160],
            memory_grid: vec![1, 2, 3, 4, 5],
        }
    }
}

/// Full experiment configuration. Lengths are in micrometres in the file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    /// Evaluation packets per sweep point.
    pub n_packets: usize,
    pub symbols_per_packet: usize,
    pub output_dir: String,
    pub channel: ChannelSection,
    pub mobility: MobilitySection,
    pub detector: DetectorSection,
    pub baselines: BaselineSection,
    pub sweep: SweepSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            master_seed: 1,
            n_packets: 500,
            symbols_per_packet: 64,
            output_dir: "out".into(),
            channel: ChannelSection::default(),
            mobility: MobilitySection::default(),
            detector: DetectorSection::default(),
            baselines: BaselineSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn channel_params(&self) -> ChannelParams<f64> {
        let c = &self.channel;
        ChannelParams {
            g0: receiver_volume(c.receiver_radius_um * UM),
            diffusion: c.diffusion_m2_per_s,
            memory: c.memory,
            symbol_duration: c.symbol_duration_s,
            samples_per_symbol: c.samples_per_symbol,
            amplitudes: c.amplitudes,
            background: c.background,
            r_min: c.separation_floor_um * UM,
        }
    }

    pub fn mobility_params(&self) -> MobilityParams {
        let m = &self.mobility;
        MobilityParams {
            speed: [m.speed_um_per_s[0] * UM, m.speed_um_per_s[1] * UM],
            rot_diffusion: m.rot_diffusion_per_s,
            trans_diffusion: m.trans_diffusion_m2_per_s,
            dt: m.dt_s,
            x0: [m.initial_separation_um * UM, 0.0, 0.0],
            receiver: [0.0; 3],
            anchoring: m.anchoring,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.channel_params().validate()?;
        self.mobility_params().validate_against(&self.channel_params())?;
        ensure(self.n_packets > 0 && self.symbols_per_packet > 0, || {
            Error::Config("n_packets and symbols_per_packet must be > 0".into())
        })?;
        let [lo, hi] = self.sweep.psi_range;
        ensure(lo > 0.0 && hi >= lo, || Error::Config("psi_range must satisfy 0 < lo <= hi".into()))
    }

    fn glrt_config(&self) -> GlrtConfig {
        GlrtConfig { restarts: self.baselines.glrt_restarts, max_evals: self.baselines.glrt_max_evals, ..GlrtConfig::default() }
    }

    fn wants(&self, kind: DetectorKind) -> bool {
        self.baselines.detectors.contains(&kind)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    Dispersion,
    Mean,
    Glrt,
    Oracle,
}

impl DetectorKind {
    pub const ALL: [DetectorKind; 4] = [Self::Dispersion, Self::Mean, Self::Glrt, Self::Oracle];

    pub fn name(self) -> &'static str {
        match self {
            Self::Dispersion => "dispersion",
            Self::Mean => "mean",
            Self::Glrt => "glrt",
            Self::Oracle => "oracle",
        }
    }
}

impl FromStr for DetectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown detector `{s}` (expected dispersion, mean, glrt or oracle)")))
    }
}

/// One reported number with its sample count and standard error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub arm: String,
    pub axis: f64,
    pub detector: String,
    pub metric: String,
    pub value: f64,
    pub n: usize,
    pub se: f64,
}

impl MetricRow {
    fn rate(arm: &str, axis: f64, detector: &str, metric: &str, hits: usize, n: usize) -> Self {
        let p = if n == 0 { f64::NAN } else { hits as f64 / n as f64 };
        Self { arm: arm.into(), axis, detector: detector.into(), metric: metric.into(), value: p, n, se: binomial_se(p, n) }
    }

    fn exact(arm: &str, axis: f64, detector: &str, metric: &str, value: f64, n: usize) -> Self {
        Self { arm: arm.into(), axis, detector: detector.into(), metric: metric.into(), value, n, se: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub experiment: String,
    pub axis: String,
    pub rows: Vec<MetricRow>,
    /// Points whose setup did not converge (for example pilot recalibration).
    pub flags: Vec<String>,
    pub config: ExperimentConfig,
}

impl SweepResult {
    fn new(experiment: &str, axis: &str, config: &ExperimentConfig) -> Self {
        Self { experiment: experiment.into(), axis: axis.into(), rows: Vec::new(), flags: Vec::new(), config: config.clone() }
    }

    /// Rows matching `(arm, detector, metric)` in insertion order.
    pub fn select<'a>(&'a self, arm: &'a str, detector: &'a str, metric: &'a str) -> impl Iterator<Item = &'a MetricRow> + 'a {
        self.rows.iter().filter(move |r| r.arm == arm && r.detector == detector && r.metric == metric)
    }

    /// CSV with the experiment name and the full configuration as `#` header
    /// lines; floats carry 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# experiment = {:?}", self.experiment)?;
        writeln!(out, "# axis = {:?}", self.axis)?;
        for f in &self.flags {
            writeln!(out, "# flag = {f:?}")?;
        }
        for line in self.config.to_toml()?.lines() {
            writeln!(out, "# {line}")?;
        }
        writeln!(out, "arm,axis,detector,metric,value,n,se")?;
        for r in &self.rows {
            writeln!(out, "{},{:.16e},{},{},{:.16e},{},{:.16e}", r.arm, r.axis, r.detector, r.metric, r.value, r.n, r.se)?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("CSV output is UTF-8"))
    }
}

/// Law of the per-packet gain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PsiLaw {
    Fixed(f64),
    LogUniform(f64, f64),
}

/// Flattened symbols of several packets with their labels.
#[derive(Clone, Debug, Default)]
pub struct LabeledSet {
    pub counts: Vec<Vec<f64>>,
    pub bits: Vec<Bit>,
    /// `(s_k, s_{k-1}, ...)` as generated.
    pub contexts: Vec<Vec<Option<Bit>>>,
    pub psi: Vec<f64>,
    /// Packet index of each symbol; symbols of a packet are contiguous.
    pub packet: Vec<usize>,
    /// Seed namespace of the coin used for gate rejections.
    pub coin_base: u64,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn indices(&self, bit: Bit) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.bits[i] == bit).collect()
    }

    /// Index ranges of whole packets.
    pub fn packet_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.len() {
            if i == self.len() || self.packet[i] != self.packet[start] {
                out.push(start..i);
                start = i;
            }
        }
        out
    }

    fn coin(&self, i: usize) -> Bit {
        stream(derive_seed(self.coin_base, domain::COIN, i as u64)).random_range(0..=1u8)
    }
}

/// Simulates `n_packets` random-bit packets. Packet `i` is seeded by
/// `derive_seed(base, dom, i)`; bits and the gain come from a stream derived
/// from that seed.
#[allow(clippy::too_many_arguments)]
pub fn simulate_set(
    channel: &ChannelParams<f64>,
    mobility: &MobilityParams,
    warmup: Warmup,
    n_packets: usize,
    symbols: usize,
    psi: PsiLaw,
    base: u64,
    dom: u64,
) -> Result<LabeledSet> {
    let packets: Vec<_> = (0..n_packets)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(base, dom, i as u64);
            let mut r = stream(mix64(seed));
            let bits: Vec<Bit> = (0..symbols).map(|_| r.random_range(0..=1u8)).collect();
            let gain = match psi {
                PsiLaw::Fixed(p) => p,
                PsiLaw::LogUniform(lo, hi) => (lo.ln() + r.random::<f64>() * (hi.ln() - lo.ln())).exp(),
            };
            generate_packet(&bits, gain, channel, mobility, warmup, seed)
        })
        .collect::<Result<_>>()?;
    let mut set = LabeledSet { coin_base: derive_seed(base, dom, u64::MAX), ..Default::default() };
    for (i, p) in packets.into_iter().enumerate() {
        for f in p.frames {
            set.counts.push(f.counts_f64());
            set.bits.push(f.truth.bits_context[0].expect("current symbol is known"));
            set.contexts.push(f.truth.bits_context);
            set.psi.push(p.psi);
            set.packet.push(i);
        }
    }
    Ok(set)
}

/// Template, gate and quantile thresholds from labeled calibration data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub template: Template<f64>,
    pub gate: Option<GateConfig<f64>>,
    pub dispersion: DispersionThreshold<f64>,
    pub mean: DispersionThreshold<f64>,
    /// Calibration gate pass rates under H0 and H1.
    pub gate_pass: [f64; 2],
}

/// Per-symbol scores of the profile-based receivers.
#[derive(Clone, Debug, Default)]
pub struct Scores {
    pub gated: Vec<bool>,
    /// Offset-corrected windowed mean.
    pub mean: Vec<f64>,
    pub statistic: Vec<Option<f64>>,
}

/// Gate, windowed mean and `T` of every symbol, with optional per-symbol
/// ISI offsets in the mean model. The gate always sees the raw mean.
pub fn score(set: &LabeledSet, template: &Template<f64>, gate: Option<&GateConfig<f64>>, offsets: Option<&[Option<Vec<f64>>]>) -> Scores {
    let rows: Vec<(bool, f64, Option<f64>)> = (0..set.len())
        .into_par_iter()
        .map(|i| {
            let y = &set.counts[i];
            let off = offsets.and_then(|o| o[i].as_deref());
            let raw = template.windowed_mean(y);
            let gated = gate.is_none_or(|g| g.passes(raw));
            let ybar = raw - off.map_or(0.0, |o| template.windowed_mean(o));
            let stat = fit_profile_with_offset(y, template, off)
                .ok()
                .filter(|f| f.converged && template.m_eff() > f.p)
                .and_then(|f| t_delta(y, &f, template).ok());
            (gated, ybar, stat)
        })
        .collect();
    let mut s = Scores::default();
    for (g, m, t) in rows {
        s.gated.push(g);
        s.mean.push(m);
        s.statistic.push(t);
    }
    s
}

/// Quantile calibration: template from H1 symbols, gate at `α_gate` on H0
/// windowed means, `τ_T` and `τ_Ȳ` at `1 - P★` over gated H0 symbols.
pub fn calibrate(set: &LabeledSet, det: &DetectorSection, gated: bool) -> Result<Calibration> {
    let h1: Vec<&Vec<f64>> = set.indices(1).into_iter().map(|i| &set.counts[i]).collect();
    let template = learn_template(&h1, det.alpha, det.beta)?;
    let h0 = set.indices(0);
    let gate = if gated {
        let h0c: Vec<&Vec<f64>> = h0.iter().map(|&i| &set.counts[i]).collect();
        Some(calibrate_gate(&h0c, det.alpha_gate, &template)?)
    } else {
        None
    };
    let sc = score(set, &template, gate.as_ref(), None);
    let pick = |bit: Bit| -> Vec<f64> {
        (0..set.len()).filter(|&i| set.bits[i] == bit && sc.gated[i]).filter_map(|i| sc.statistic[i]).collect()
    };
    let dispersion = calibrate_threshold(&pick(0), det.pfa_target, Some(&pick(1)))?;
    let gated_means: Vec<f64> = h0.iter().filter(|&&i| sc.gated[i]).map(|&i| sc.mean[i]).collect();
    let mean = calibrate_mean_threshold(&gated_means, det.pfa_target)?;
    Ok(Calibration { template, gate, dispersion, mean, gate_pass: pass_rates(set, &sc.gated) })
}

fn pass_rates(set: &LabeledSet, gated: &[bool]) -> [f64; 2] {
    [0u8, 1].map(|b| {
        let idx = set.indices(b);
        idx.iter().filter(|&&i| gated[i]).count() as f64 / idx.len().max(1) as f64
    })
}

/// Threshold and orientation minimising the balanced error
/// `(P_FA + P_miss) / 2` on labeled statistics; decide 1 iff `κ s > κ τ`.
pub fn balanced_threshold(h0: &[f64], h1: &[f64]) -> DispersionThreshold<f64> {
    let best = [1i8, -1].map(|k| {
        let kf = f64::from(k);
        let mut all: Vec<(f64, Bit)> = h0.iter().map(|&s| (kf * s, 0)).chain(h1.iter().map(|&s| (kf * s, 1))).collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (n0, n1) = (h0.len().max(1) as f64, h1.len().max(1) as f64);
        // τ below every value: everything decides 1.
        let (mut fa, mut miss) = (h0.len() as f64, 0.0);
        let mut best = (0.5 * (fa / n0 + miss / n1), all.first().map_or(0.0, |v| v.0 - 1.0));
        let mut i = 0;
        while i < all.len() {
            let v = all[i].0;
            while i < all.len() && all[i].0 == v {
                if all[i].1 == 0 {
                    fa -= 1.0;
                } else {
                    miss += 1.0;
                }
                i += 1;
            }
            let err = 0.5 * (fa / n0 + miss / n1);
            if err < best.0 {
                best = (err, v);
            }
        }
        (best.0, kf * best.1, k)
    });
    let (_, tau, kappa) = if best[1].0 < best[0].0 { best[1] } else { best[0] };
    DispersionThreshold { tau_t: tau, pfa_target: f64::NAN, kappa }
}

fn split<T: Copy>(set: &LabeledSet, mask: &[bool], vals: &[Option<T>]) -> [Vec<T>; 2] {
    let mut out = [Vec::new(), Vec::new()];
    for i in 0..set.len() {
        if mask[i] {
            if let Some(v) = vals[i] {
                out[usize::from(set.bits[i])].push(v);
            }
        }
    }
    out
}

/// How a closed gate turns into a decision.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateRejection {
    DecideZero,
    Coin,
}

fn ber_row(arm: &str, axis: f64, name: &str, set: &LabeledSet, decisions: &[(usize, Bit)]) -> MetricRow {
    let errors = decisions.iter().filter(|(i, d)| *d != set.bits[*i]).count();
    MetricRow::rate(arm, axis, name, "ber", errors, decisions.len())
}

fn threshold_decisions(
    set: &LabeledSet,
    gated: &[bool],
    stats: &[Option<f64>],
    thr: &DispersionThreshold<f64>,
    policy: GateRejection,
) -> Vec<(usize, Bit)> {
    (0..set.len())
        .map(|i| {
            let d = if !gated[i] {
                match policy {
                    GateRejection::DecideZero => 0,
                    GateRejection::Coin => set.coin(i),
                }
            } else {
                stats[i].map_or(0, |s| thr.decide(s))
            };
            (i, d)
        })
        .collect()
}

fn verdict_decisions(set: &LabeledSet, verdicts: &[(usize, DetectorVerdict<f64>)], policy: GateRejection) -> Vec<(usize, Bit)> {
    verdicts
        .iter()
        .map(|(i, v)| {
            let d = if v.rule == Rule::GateClosed && policy == GateRejection::Coin { set.coin(*i) } else { v.decision };
            (*i, d)
        })
        .collect()
}

/// Symbols of the first whole packets covering `cap` symbols.
fn capped_packets(set: &LabeledSet, cap: usize) -> Vec<std::ops::Range<usize>> {
    let mut taken = 0;
    set.packet_ranges()
        .into_iter()
        .take_while(|r| {
            let keep = taken < cap;
            taken += r.len();
            keep
        })
        .collect()
}

fn path_bank(cfg: &ExperimentConfig, ch: &ChannelParams<f64>, mob: &MobilityParams, template: &Template<f64>, point: u64) -> Result<PathBank> {
    let ml = MarginalLikelihoodConfig {
        n_paths: cfg.baselines.n_paths,
        common_seed: derive_seed(cfg.master_seed, domain::PATHS, point),
    };
    PathBank::new(ch, mob, template.window(), &ml)
}

/// Oracle verdicts for every symbol, with genie gain, background and past bits.
fn oracle_verdicts(set: &LabeledSet, bank: &PathBank, gate: Option<&GateConfig<f64>>, background: f64) -> Result<Vec<(usize, DetectorVerdict<f64>)>> {
    (0..set.len())
        .into_par_iter()
        .map(|i| {
            let truth = NuisanceVector { psi: set.psi[i], lambda_bg: background, past_bits: set.contexts[i][1..].to_vec() };
            oracle_lrt(&set.counts[i], &truth, bank, gate).map(|v| (i, v))
        })
        .collect()
}

/// GLRT over whole packets: pass 1 without side information, pass 2 with
/// tentative (or genie) past bits.
fn glrt_verdicts(
    set: &LabeledSet,
    ranges: &[std::ops::Range<usize>],
    receiver: &GlrtReceiver,
    memory: usize,
    genie: bool,
) -> Result<(Vec<(usize, DetectorVerdict<f64>)>, Vec<(usize, DetectorVerdict<f64>)>)> {
    let per_packet: Vec<_> = ranges
        .par_iter()
        .map(|r| {
            let counts = &set.counts[r.clone()];
            let truth: Vec<Bit> = set.bits[r.clone()].to_vec();
            let out = dfe_wrap(receiver, counts, memory, None, genie.then_some(truth.as_slice()))?;
            Ok((r.start, out))
        })
        .collect::<Result<_>>()?;
    let mut plain = Vec::new();
    let mut fed = Vec::new();
    for (start, out) in per_packet {
        plain.extend(out.tentative.into_iter().enumerate().map(|(j, v)| (start + j, v)));
        fed.extend(out.cancelled.into_iter().enumerate().map(|(j, v)| (start + j, v)));
    }
    Ok((plain, fed))
}

fn point_base(cfg: &ExperimentConfig, experiment: u64, point: usize) -> u64 {
    derive_seed(cfg.master_seed, experiment, point as u64)
}

/// Gate-integrated H0 false-alarm rates versus the gain `Ψ`, with every
/// threshold frozen from calibration at `Ψ = 1`.
pub fn run_gain_stability(cfg: &ExperimentConfig) -> Result<SweepResult> {
    cfg.validate()?;
    let ch = cfg.channel_params();
    let mob = cfg.mobility_params();
    let k = cfg.symbols_per_packet;
    let base = point_base(cfg, 101, 0);
    let cal_set = simulate_set(&ch, &mob, cfg.mobility.warmup, cfg.detector.calibration_packets, k, PsiLaw::Fixed(1.0), base, domain::CALIBRATION)?;
    let cal = calibrate(&cal_set, &cfg.detector, true)?;
    let gate = cal.gate.expect("gated calibration");
    let bank = if cfg.wants(DetectorKind::Glrt) { Some(path_bank(cfg, &ch, &mob, &cal.template, 0)?) } else { None };
    let mut res = SweepResult::new("gain", "psi", cfg);
    // Enough packets for the requested H0 count on average, plus slack.
    let n_packets = (2 * cfg.sweep.h0_symbols_per_point).div_ceil(k) + 8;
    for (pi, &psi) in cfg.sweep.psi_grid.iter().enumerate() {
        let set = simulate_set(&ch, &mob, cfg.mobility.warmup, n_packets, k, PsiLaw::Fixed(psi), point_base(cfg, 101, pi + 1), domain::EVALUATION)?;
        let h0: Vec<usize> = set.indices(0).into_iter().take(cfg.sweep.h0_symbols_per_point).collect();
        let sc = score(&set, &cal.template, Some(&gate), None);
        let n = h0.len();
        let passed = h0.iter().filter(|&&i| sc.gated[i]).count();
        res.rows.push(MetricRow::rate("h0", psi, "gate", "pass", passed, n));
        if cfg.wants(DetectorKind::Dispersion) {
            let fa = h0.iter().filter(|&&i| sc.gated[i] && sc.statistic[i].is_some_and(|t| cal.dispersion.decide(t) == 1)).count();
            res.rows.push(MetricRow::rate("h0", psi, "dispersion", "pfa", fa, n));
        }
        if cfg.wants(DetectorKind::Mean) {
            let fa = h0.iter().filter(|&&i| sc.gated[i] && cal.mean.decide(sc.mean[i]) == 1).count();
            res.rows.push(MetricRow::rate("h0", psi, "mean", "pfa", fa, n));
        }
        if let Some(bank) = &bank {
            let receiver = GlrtReceiver { bank: bank.clone(), gate: Some(gate), cfg: cfg.glrt_config() };
            let ranges = capped_packets(&set, cfg.baselines.glrt_symbol_cap);
            let (_, fed) = glrt_verdicts(&set, &ranges, &receiver, ch.memory, cfg.baselines.genie_isi)?;
            let h0v: Vec<_> = fed.iter().filter(|(i, _)| set.bits[*i] == 0).collect();
            let fa = h0v.iter().filter(|(_, v)| v.decision == 1).count();
            res.rows.push(MetricRow::rate("h0", psi, "glrt", "pfa", fa, h0v.len()));
        }
    }
    Ok(res)
}

/// Gate-integrated `(P_FA, P_D)` at threshold `tau` in orientation `kappa`.
fn roc_point(h0: &[f64], h1: &[f64], n0: usize, n1: usize, tau: f64, kappa: f64) -> (f64, f64) {
    let fa = h0.iter().filter(|&&s| kappa * s > kappa * tau).count() as f64 / n0.max(1) as f64;
    let pd = h1.iter().filter(|&&s| kappa * s > kappa * tau).count() as f64 / n1.max(1) as f64;
    (fa, pd)
}

/// Empirical ROC over every distinct statistic value, as `(P_FA, P_D)` points
/// from `(0, 0)` up to the gate-limited corner.
pub fn empirical_roc(h0: &[f64], h1: &[f64], n0: usize, n1: usize, kappa: f64) -> Vec<(f64, f64)> {
    let mut taus: Vec<f64> = h0.iter().chain(h1).map(|&s| kappa * s).collect();
    taus.sort_by(|a, b| b.total_cmp(a));
    taus.dedup();
    let mut pts = vec![(0.0, 0.0)];
    for t in taus {
        pts.push(roc_point(h0, h1, n0, n1, kappa * t, kappa));
    }
    pts.push((h0.len() as f64 / n0.max(1) as f64, h1.len() as f64 / n1.max(1) as f64));
    pts.dedup();
    pts
}

/// Trapezoid area under the ROC, closed with a straight segment to `(1, 1)`.
pub fn auc(points: &[(f64, f64)]) -> f64 {
    let mut pts = points.to_vec();
    pts.push((1.0, 1.0));
    pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
}

/// `P_D` at `P_FA = target` by linear interpolation along the ROC.
pub fn pd_at(points: &[(f64, f64)], target: f64) -> Option<f64> {
    points.windows(2).find(|w| w[0].0 <= target && target <= w[1].0).map(|w| {
        if w[1].0 == w[0].0 {
            w[1].1
        } else {
            w[0].1 + (w[1].1 - w[0].1) * (target - w[0].0) / (w[1].0 - w[0].0)
        }
    })
}

/// ROC under random per-packet gains for every detector, and the Gaussian
/// working-model prediction for `T` with the same gate.
pub fn run_roc(cfg: &ExperimentConfig) -> Result<SweepResult> {
    cfg.validate()?;
    let ch = cfg.channel_params();
    let mob = cfg.mobility_params();
    let [lo, hi] = cfg.sweep.psi_range;
    let law = PsiLaw::LogUniform(lo, hi);
    let k = cfg.symbols_per_packet;
    let cal_set = simulate_set(&ch, &mob, cfg.mobility.warmup, cfg.detector.calibration_packets, k, law, point_base(cfg, 102, 0), domain::CALIBRATION)?;
    let cal = calibrate(&cal_set, &cfg.detector, true)?;
    let gate = cal.gate.expect("gated calibration");
    let set = simulate_set(&ch, &mob, cfg.mobility.warmup, cfg.n_packets, k, law, point_base(cfg, 102, 1), domain::EVALUATION)?;
    let sc = score(&set, &cal.template, Some(&gate), None);
    let (n0, n1) = (set.indices(0).len(), set.indices(1).len());
    let mut res = SweepResult::new("roc", "threshold", cfg);
    let mut curves: Vec<(String, Vec<(f64, f64)>, usize)> = Vec::new();
    let all = vec![true; set.len()];
    let mut add = |name: &str, mask: &[bool], stats: &[Option<f64>], kappa: f64, counts: (usize, usize), res: &mut SweepResult| {
        let [h0, h1] = split(&set, mask, stats);
        let pts = empirical_roc(&h0, &h1, counts.0, counts.1, kappa);
        for (j, t) in roc_grid(&h0, &h1, cfg.sweep.roc_points).into_iter().enumerate() {
            let (fa, pd) = roc_point(&h0, &h1, counts.0, counts.1, t, kappa);
            res.rows.push(MetricRow::rate(name, t, name, "pfa", (fa * counts.0 as f64).round() as usize, counts.0));
            res.rows.push(MetricRow::rate(name, t, name, "pd", (pd * counts.1 as f64).round() as usize, counts.1));
            let _ = j;
        }
        curves.push((name.to_string(), pts, counts.0 + counts.1));
    };
    if cfg.wants(DetectorKind::Dispersion) {
        add("dispersion", &sc.gated, &sc.statistic, f64::from(cal.dispersion.kappa), (n0, n1), &mut res);
    }
    if cfg.wants(DetectorKind::Mean) {
        let means: Vec<Option<f64>> = sc.mean.iter().map(|&m| Some(m)).collect();
        add("mean", &sc.gated, &means, 1.0, (n0, n1), &mut res);
        add("mean_ungated", &all, &means, 1.0, (n0, n1), &mut res);
    }
    let needs_bank = cfg.wants(DetectorKind::Glrt) || cfg.wants(DetectorKind::Oracle);
    let bank = if needs_bank { Some(path_bank(cfg, &ch, &mob, &cal.template, 0)?) } else { None };
    if let (true, Some(bank)) = (cfg.wants(DetectorKind::Oracle), &bank) {
        let v = oracle_verdicts(&set, bank, Some(&gate), ch.background)?;
        let (mask, stats) = verdict_stats(&set, &v);
        add("oracle", &mask, &stats, 1.0, (n0, n1), &mut res);
    }
    if let (true, Some(bank)) = (cfg.wants(DetectorKind::Glrt), &bank) {
        let receiver = GlrtReceiver { bank: bank.clone(), gate: Some(gate), cfg: cfg.glrt_config() };
        let ranges = capped_packets(&set, cfg.baselines.glrt_symbol_cap);
        let (_, fed) = glrt_verdicts(&set, &ranges, &receiver, ch.memory, cfg.baselines.genie_isi)?;
        let (mask, stats) = verdict_stats(&set, &fed);
        let c0 = fed.iter().filter(|(i, _)| set.bits[*i] == 0).count();
        add("glrt", &mask, &stats, 1.0, (c0, fed.len() - c0), &mut res);
    }
    for (name, pts, n) in &curves {
        res.rows.push(MetricRow::exact(name, f64::NAN, name, "auc", auc(pts), *n));
        if let Some(pd) = pd_at(pts, 0.1) {
            res.rows.push(MetricRow::exact(name, 0.1, name, "pd_at_pfa", pd, *n));
        }
    }
    // Gaussian working model fitted on the labeled calibration symbols.
    let model = fit_working_model(&cal_set, &cal, cfg.detector.max_lag)?;
    let [g0, g1] = cal.gate_pass;
    for j in 1..cfg.sweep.roc_points.max(2) {
        let total = j as f64 / (cfg.sweep.roc_points.max(2) - 1) as f64 * g0;
        let cond = (total / g0).clamp(1e-9, 1.0 - 1e-9);
        let p = roc_ber(&model, Operating::FalseAlarm(cond), Some([g0, g1]))?;
        res.rows.push(MetricRow::exact("gaussian", p.tau, "gaussian", "pfa", p.pfa, model.n[0]));
        res.rows.push(MetricRow::exact("gaussian", p.tau, "gaussian", "pd", p.pd, model.n[1]));
    }
    if 0.1 < g0 {
        let p = roc_ber(&model, Operating::FalseAlarm(0.1 / g0), Some([g0, g1]))?;
        res.rows.push(MetricRow::exact("gaussian", 0.1, "gaussian", "pd_at_pfa", p.pd, model.n[1]));
    }
    Ok(res)
}

fn verdict_stats(set: &LabeledSet, v: &[(usize, DetectorVerdict<f64>)]) -> (Vec<bool>, Vec<Option<f64>>) {
    let mut mask = vec![false; set.len()];
    let mut stats = vec![None; set.len()];
    for (i, verdict) in v {
        mask[*i] = verdict.gated;
        stats[*i] = verdict.statistic;
    }
    (mask, stats)
}

/// `roc_points` thresholds at evenly spaced quantiles of the pooled statistics.
fn roc_grid(h0: &[f64], h1: &[f64], points: usize) -> Vec<f64> {
    let mut all: Vec<f64> = h0.iter().chain(h1).copied().collect();
    if all.is_empty() {
        return Vec::new();
    }
    all.sort_by(f64::total_cmp);
    let n = points.max(2);
    (0..n).map(|j| all[(j * (all.len() - 1)) / (n - 1)]).collect()
}

/// Gaussian model of `T` from gated, labeled symbols of `set`.
pub fn fit_working_model(set: &LabeledSet, cal: &Calibration, max_lag: usize) -> Result<GaussianWorkingModel<f64>> {
    let t = &cal.template;
    let rows: Vec<Option<(Bit, f64, Vec<f64>, usize)>> = (0..set.len())
        .into_par_iter()
        .map(|i| {
            let y = &set.counts[i];
            if cal.gate.is_some_and(|g| !g.passes(t.windowed_mean(y))) {
                return None;
            }
            let fit = fit_profile_with_offset(y, t, None).ok().filter(|f| f.converged && t.m_eff() > f.p)?;
            let stat = t_delta(y, &fit, t).ok()?;
            let psi = psi_sequence(y, &fit, t).ok()?;
            Some((set.bits[i], stat, psi, fit.p))
        })
        .collect();
    let mut stats = [Vec::new(), Vec::new()];
    let mut psi = [Vec::new(), Vec::new()];
    let mut p = 0;
    for (b, s, seq, fp) in rows.into_iter().flatten() {
        stats[usize::from(b)].push(s);
        psi[usize::from(b)].push(seq);
        p = p.max(fp);
    }
    GaussianWorkingModel::fit([&stats[0], &stats[1]], [&psi[0], &psi[1]], t.m_eff(), p, max_lag)
}

/// Result of the pilot amplitude search.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PilotOutcome {
    pub amplitude1: f64,
    /// `mean_1 / mean_0 - 1` over the window at the final amplitude.
    pub mismatch: f64,
    pub converged: bool,
}

/// Rescales `A1` until balanced pilot symbols give H1 and H0 windowed means
/// within `tolerance`. The pilot packets are fixed across iterations.
pub fn neutralize_amplitude(
    ch: &ChannelParams<f64>,
    mob: &MobilityParams,
    cfg: &ExperimentConfig,
    base: u64,
) -> Result<PilotOutcome> {
    let k = cfg.symbols_per_packet;
    let packets = cfg.sweep.pilot_symbols.div_ceil(k).max(2);
    let mut ch = ch.clone();
    let mut last = PilotOutcome { amplitude1: ch.amplitudes[1], mismatch: f64::INFINITY, converged: false };
    for _ in 0..12 {
        let set = simulate_set(&ch, mob, cfg.mobility.warmup, packets, k, PsiLaw::Fixed(1.0), base, domain::PILOT)?;
        let h1: Vec<&Vec<f64>> = set.indices(1).into_iter().map(|i| &set.counts[i]).collect();
        let template = learn_template(&h1, cfg.detector.alpha, cfg.detector.beta)?;
        let mean = |b: Bit| {
            let idx = set.indices(b);
            idx.iter().map(|&i| template.windowed_mean(&set.counts[i])).sum::<f64>() / idx.len().max(1) as f64
        };
        let (m0, m1) = (mean(0), mean(1));
        last = PilotOutcome { amplitude1: ch.amplitudes[1], mismatch: m1 / m0 - 1.0, converged: (m1 / m0 - 1.0).abs() < cfg.sweep.pilot_tolerance };
        if last.converged {
            break;
        }
        let bg = ch.background;
        ensure(m1 > bg, || Error::Calibration("pilot H1 mean does not exceed the background".into()))?;
        ch.amplitudes[1] *= ((m0 - bg) / (m1 - bg)).max(1e-3);
    }
    Ok(last)
}

/// `v(1)` giving `D_eff(1) = contrast · D_eff(0)`.
pub fn speed_for_contrast(mob: &MobilityParams, contrast: f64) -> Result<f64> {
    let d0 = effective_diffusivity(mob.speed[0], mob.rot_diffusion[0], mob.trans_diffusion)?;
    let excess = contrast * d0 - mob.trans_diffusion;
    ensure(excess >= 0.0, || {
        Error::Param(format!("contrast {contrast} is below the translational floor of symbol 1"))
    })?;
    Ok((excess * 6.0 * mob.rot_diffusion[1]).sqrt())
}

/// BER of every requested receiver at one operating point with split
/// thresholds: thresholds minimise balanced error on a calibration set and
/// are applied to a fresh evaluation set.
#[allow(clippy::too_many_arguments)]
fn ber_point(
    cfg: &ExperimentConfig,
    ch: &ChannelParams<f64>,
    mob: &MobilityParams,
    gated: bool,
    policy: GateRejection,
    with_dfe: bool,
    arm: &str,
    axis: f64,
    base: u64,
    point: u64,
    res: &mut SweepResult,
) -> Result<(Calibration, LabeledSet)> {
    let k = cfg.symbols_per_packet;
    let cal_set = simulate_set(ch, mob, cfg.mobility.warmup, cfg.detector.calibration_packets, k, PsiLaw::Fixed(1.0), base, domain::CALIBRATION)?;
    let cal = calibrate(&cal_set, &cfg.detector, gated)?;
    let set = simulate_set(ch, mob, cfg.mobility.warmup, cfg.n_packets, k, PsiLaw::Fixed(1.0), base, domain::EVALUATION)?;
    let gate = cal.gate;
    let cal_sc = score(&cal_set, &cal.template, gate.as_ref(), None);
    let sc = score(&set, &cal.template, gate.as_ref(), None);
    let means = |s: &Scores| s.mean.iter().map(|&m| Some(m)).collect::<Vec<_>>();
    let mut thresholds = Vec::new();
    for (kind, pick) in [(DetectorKind::Dispersion, 0), (DetectorKind::Mean, 1)] {
        if !cfg.wants(kind) {
            continue;
        }
        let (cal_stats, stats) = if pick == 0 { (cal_sc.statistic.clone(), sc.statistic.clone()) } else { (means(&cal_sc), means(&sc)) };
        let [h0, h1] = split(&cal_set, &cal_sc.gated, &cal_stats);
        let thr = balanced_threshold(&h0, &h1);
        let d = threshold_decisions(&set, &sc.gated, &stats, &thr, policy);
        res.rows.push(ber_row(arm, axis, kind.name(), &set, &d));
        thresholds.push((kind, thr));
    }
    if with_dfe && !thresholds.is_empty() {
        let predictor = isi_predictor(cfg, ch, &cal_set)?;
        // Pass 1 decisions drive the offsets; pass-2 statistics get their own
        // split threshold from the calibration set.
        let offsets_for = |s: &LabeledSet, sc: &Scores, thr: &DispersionThreshold<f64>, kind: DetectorKind, genie: bool| {
            let stats = if kind == DetectorKind::Dispersion { sc.statistic.clone() } else { means(sc) };
            let first = threshold_decisions(s, &sc.gated, &stats, thr, GateRejection::DecideZero);
            let decided: Vec<Bit> = first.iter().map(|(_, d)| *d).collect();
            let mut offs = vec![None; s.len()];
            for r in s.packet_ranges() {
                let fb = if genie { &s.bits[r.clone()] } else { &decided[r.clone()] };
                for (j, i) in r.clone().enumerate() {
                    offs[i] = predictor.tail(&past_context(fb, j, ch.memory));
                }
            }
            offs
        };
        for (kind, thr) in &thresholds {
            let cal_off = offsets_for(&cal_set, &cal_sc, thr, *kind, cfg.baselines.genie_isi);
            let off = offsets_for(&set, &sc, thr, *kind, cfg.baselines.genie_isi);
            let cal2 = score(&cal_set, &cal.template, gate.as_ref(), Some(&cal_off));
            let sc2 = score(&set, &cal.template, gate.as_ref(), Some(&off));
            let pick = |s: &Scores| if *kind == DetectorKind::Dispersion { s.statistic.clone() } else { means(s) };
            let [h0, h1] = split(&cal_set, &cal2.gated, &pick(&cal2));
            let thr2 = balanced_threshold(&h0, &h1);
            let d = threshold_decisions(&set, &sc2.gated, &pick(&sc2), &thr2, policy);
            res.rows.push(ber_row(arm, axis, &format!("{}_dfe", kind.name()), &set, &d));
        }
    }
    let needs_bank = cfg.wants(DetectorKind::Glrt) || cfg.wants(DetectorKind::Oracle);
    if needs_bank {
        let bank = path_bank(cfg, ch, mob, &cal.template, point)?;
        if cfg.wants(DetectorKind::Oracle) {
            let v = oracle_verdicts(&set, &bank, gate.as_ref(), ch.background)?;
            res.rows.push(ber_row(arm, axis, "oracle", &set, &verdict_decisions(&set, &v, policy)));
        }
        if cfg.wants(DetectorKind::Glrt) {
            let receiver = GlrtReceiver { bank, gate, cfg: cfg.glrt_config() };
            let ranges = capped_packets(&set, cfg.baselines.glrt_symbol_cap);
            let (plain, fed) = glrt_verdicts(&set, &ranges, &receiver, ch.memory, cfg.baselines.genie_isi)?;
            res.rows.push(ber_row(arm, axis, "glrt", &set, &verdict_decisions(&set, &plain, policy)));
            if with_dfe {
                res.rows.push(ber_row(arm, axis, "glrt_dfe", &set, &verdict_decisions(&set, &fed, policy)));
            }
        }
    }
    Ok((cal, set))
}

/// BER versus the mobility contrast `D_eff(1) / D_eff(0)`, in a
/// fixed-release arm (`A1 = A0`) and a mean-neutralised arm (`A1` tuned on
/// pilot symbols). The gate is disabled.
pub fn run_mobility_contrast(cfg: &ExperimentConfig) -> Result<SweepResult> {
    cfg.validate()?;
    let mut res = SweepResult::new("mobility", "contrast", cfg);
    let base_ch = cfg.channel_params();
    let base_mob = cfg.mobility_params();
    let amp = cfg.sweep.release_amplitude;
    for (pi, &contrast) in cfg.sweep.contrast_grid.iter().enumerate() {
        let mut mob = base_mob.clone();
        mob.speed[1] = speed_for_contrast(&base_mob, contrast)?;
        let fixed = ChannelParams { amplitudes: [amp, amp], ..base_ch.clone() };
        res.rows.push(MetricRow::exact("fixed", contrast, "setup", "speed1_um_per_s", mob.speed[1] / UM, 0));
        let base = point_base(cfg, 103, pi);
        ber_point(cfg, &fixed, &mob, false, GateRejection::DecideZero, false, "fixed", contrast, base, pi as u64, &mut res)?;
        let pilot = neutralize_amplitude(&fixed, &mob, cfg, derive_seed(base, domain::PILOT, 0))?;
        if !pilot.converged {
            res.flags.push(format!("contrast {contrast}: pilot mismatch {:.4} after recalibration", pilot.mismatch));
        }
        res.rows.push(MetricRow::exact("neutral", contrast, "setup", "amplitude1", pilot.amplitude1, 0));
        res.rows.push(MetricRow::exact("neutral", contrast, "setup", "pilot_mismatch", pilot.mismatch, cfg.sweep.pilot_symbols));
        let neutral = ChannelParams { amplitudes: [amp, pilot.amplitude1], ..base_ch.clone() };
        let base2 = point_base(cfg, 104, pi);
        ber_point(cfg, &neutral, &mob, false, GateRejection::DecideZero, false, "neutral", contrast, base2, 1000 + pi as u64, &mut res)?;
    }
    Ok(res)
}

/// Arm (a): correlation time of `ψ̂`, `M_corr / M` and gate-integrated BER
/// versus the sampling step (`M` varied at fixed `Tsym`); gate rejections are
/// fair coin flips.
pub fn run_sampling(cfg: &ExperimentConfig) -> Result<SweepResult> {
    cfg.validate()?;
    let mut res = SweepResult::new("sampling", "samples_per_symbol", cfg);
    let mob = cfg.mobility_params();
    for (pi, &m) in cfg.sweep.samples_grid.iter().enumerate() {
        let ch = ChannelParams { samples_per_symbol: m, ..cfg.channel_params() };
        mob.validate_against(&ch)?;
        let axis = m as f64;
        let (cal, _) = ber_point(cfg, &ch, &mob, true, GateRejection::Coin, false, "sampling", axis, point_base(cfg, 105, pi), 2000 + pi as u64, &mut res)?;
        // Correlation diagnostics on labeled H1 ψ̂ from a dedicated set.
        let diag_set = simulate_set(&ch, &mob, cfg.mobility.warmup, cfg.detector.calibration_packets, cfg.symbols_per_packet, PsiLaw::Fixed(1.0), point_base(cfg, 106, pi), domain::SYNTHETIC)?;
        let model = fit_working_model(&diag_set, &cal, cfg.detector.max_lag.min(cal.template.m_eff().saturating_sub(1)))?;
        let lrv = model.lrv.as_ref().expect("fitted model carries its LRV");
        let seqs = sequences_for(&diag_set, &cal, 1);
        let dt = ch.sample_step();
        let max_lag = cfg.detector.max_lag.min(cal.template.m_eff().saturating_sub(1));
        match correlation_diagnostics(&seqs, dt, max_lag) {
            Ok(d) => {
                let pooled = seqs.iter().map(Vec::len).sum();
                res.rows.push(MetricRow::exact("sampling", axis, "dispersion", "mcorr_ratio", d.ratio, pooled));
                res.rows.push(MetricRow::exact("sampling", axis, "dispersion", "omega_raw", lrv[1].inflation, pooled));
                if let Some(tau) = d.tau_psi {
                    res.rows.push(MetricRow::exact("sampling", axis, "dispersion", "tau_psi_s", tau, pooled));
                    res.rows.push(MetricRow::exact("sampling", axis, "dispersion", "dt_over_tau", dt / tau, pooled));
                }
            }
            Err(e) => res.flags.push(format!("M = {m}: {e}")),
        }
    }
    Ok(res)
}

fn sequences_for(set: &LabeledSet, cal: &Calibration, bit: Bit) -> Vec<Vec<f64>> {
    let t = &cal.template;
    set.indices(bit)
        .into_par_iter()
        .filter_map(|i| {
            let y = &set.counts[i];
            if cal.gate.is_some_and(|g| !g.passes(t.windowed_mean(y))) {
                return None;
            }
            let fit = fit_profile_with_offset(y, t, None).ok().filter(|f| f.converged)?;
            psi_sequence(y, &fit, t).ok()
        })
        .collect()
}

/// Arm (b): BER versus the ISI memory `L`, with and without decision
/// feedback; gate rejections are fair coin flips.
pub fn run_isi(cfg: &ExperimentConfig) -> Result<SweepResult> {
    cfg.validate()?;
    let mut res = SweepResult::new("isi", "memory", cfg);
    let mob = cfg.mobility_params();
    for (pi, &l) in cfg.sweep.memory_grid.iter().enumerate() {
        let ch = ChannelParams { memory: l, ..cfg.channel_params() };
        ber_point(cfg, &ch, &mob, true, GateRejection::Coin, true, "isi", l as f64, point_base(cfg, 107, pi), 3000 + pi as u64, &mut res)?;
    }
    Ok(res)
}

/// Both arms of the dependence/ISI experiment.
pub fn run_correlation_isi(cfg: &ExperimentConfig) -> Result<(SweepResult, SweepResult)> {
    Ok((run_sampling(cfg)?, run_isi(cfg)?))
}

/// The sweeps exposed on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepKind {
    Gain,
    Roc,
    Mobility,
    Sampling,
    Isi,
}

pub fn run_sweep(kind: SweepKind, cfg: &ExperimentConfig) -> Result<SweepResult> {
    match kind {
        SweepKind::Gain => run_gain_stability(cfg),
        SweepKind::Roc => run_roc(cfg),
        SweepKind::Mobility => run_mobility_contrast(cfg),
        SweepKind::Sampling => run_sampling(cfg),
        SweepKind::Isi => run_isi(cfg),
    }
}

/// Everything a receiver needs at run time, as written by `calibrate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBundle {
    pub calibration: Calibration,
    pub predictor: IsiPredictor,
    pub config: ExperimentConfig,
}

/// ISI predictor at `r_ref`, with the tail gain optionally fitted on `set`.
fn isi_predictor(cfg: &ExperimentConfig, ch: &ChannelParams<f64>, set: &LabeledSet) -> Result<IsiPredictor> {
    let r_ref = cfg.baselines.r_ref_um * UM;
    if cfg.baselines.fit_isi_gain {
        IsiPredictor::calibrate(ch, r_ref, &set.counts, &set.contexts)
    } else {
        Ok(IsiPredictor::with_gain(ch, r_ref, 1.0))
    }
}

/// Calibrates the default receivers at `Ψ = 1` from the configuration.
pub fn calibrate_from_config(cfg: &ExperimentConfig) -> Result<CalibrationBundle> {
    cfg.validate()?;
    let ch = cfg.channel_params();
    let set = simulate_set(&ch, &cfg.mobility_params(), cfg.mobility.warmup, cfg.detector.calibration_packets, cfg.symbols_per_packet, PsiLaw::Fixed(1.0), point_base(cfg, 108, 0), domain::CALIBRATION)?;
    let calibration = calibrate(&set, &cfg.detector, true)?;
    let predictor = isi_predictor(cfg, &ch, &set)?;
    Ok(CalibrationBundle { calibration, predictor, config: cfg.clone() })
}

/// Gaussian model and separability of the calibrated statistic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub model: GaussianWorkingModel<f64>,
    pub separability: SeparabilityReport<f64>,
    pub isi_profile: Vec<f64>,
    pub gate_pass: [f64; 2],
}

pub fn analyze_from_config(cfg: &ExperimentConfig) -> Result<AnalysisReport> {
    let bundle = calibrate_from_config(cfg)?;
    let ch = cfg.channel_params();
    let set = simulate_set(&ch, &cfg.mobility_params(), cfg.mobility.warmup, cfg.detector.calibration_packets, cfg.symbols_per_packet, PsiLaw::Fixed(1.0), point_base(cfg, 109, 0), domain::SYNTHETIC)?;
    let cal = &bundle.calibration;
    let model = fit_working_model(&set, cal, cfg.detector.max_lag)?;
    let profile = isi_profile(&ch, &cal.template, cfg.baselines.r_ref_um * UM);
    let separability = separability(model.mean_t, model.var_t, Some(&profile))?;
    Ok(AnalysisReport { model, separability, isi_profile: profile, gate_pass: cal.gate_pass })
}

/// One line of a verdict stream.
#[derive(Clone, Debug, PartialEq)]
pub struct VerdictRow {
    pub packet: usize,
    pub k: usize,
    pub detector: String,
    pub verdict: DetectorVerdict<f64>,
}

/// Runs the profile-based receivers (and their DFE variants) over packets.
pub fn detect_packets(bundle: &CalibrationBundle, packets: &[Vec<Vec<f64>>], kinds: &[DetectorKind], genie: Option<&[Vec<Bit>]>) -> Result<Vec<VerdictRow>> {
    let cal = &bundle.calibration;
    let memory = bundle.config.channel.memory;
    let disp = DispersionReceiver { template: cal.template.clone(), gate: cal.gate, threshold: cal.dispersion };
    let mean = crate::baselines::MeanReceiver { template: cal.template.clone(), gate: cal.gate, threshold: cal.mean };
    let mut rows = Vec::new();
    for (p, counts) in packets.iter().enumerate() {
        let g = genie.map(|g| g[p].as_slice());
        for kind in kinds {
            let det: &dyn SymbolDetector = match kind {
                DetectorKind::Dispersion => &disp,
                DetectorKind::Mean => &mean,
                _ => continue,
            };
            let out = dfe_wrap(det, counts, memory, Some(&bundle.predictor), g)?;
            for (k, v) in out.tentative.into_iter().enumerate() {
                rows.push(VerdictRow { packet: p, k, detector: kind.name().into(), verdict: v });
            }
            for (k, v) in out.cancelled.into_iter().enumerate() {
                rows.push(VerdictRow { packet: p, k, detector: format!("{}_dfe", kind.name()), verdict: v });
            }
        }
    }
    Ok(rows)
}

pub fn write_verdicts<W: Write>(rows: &[VerdictRow], mut out: W) -> Result<()> {
    writeln!(out, "packet,k,detector,decision,gated,statistic,rule")?;
    for r in rows {
        let stat = r.verdict.statistic.map_or_else(String::new, |s| format!("{s:.16e}"));
        let rule = match r.verdict.rule {
            Rule::GateClosed => "gate_closed",
            Rule::FitFailed => "fit_failed",
            Rule::Threshold => "threshold",
        };
        writeln!(out, "{},{},{},{},{},{},{}", r.packet, r.k, r.detector, r.verdict.decision, r.verdict.gated, stat, rule)?;
    }
    Ok(())
}

/// Outcome of one self-test oracle.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Fast property oracles over the numerical core.
pub fn selftest() -> Vec<Check> {
    let mut out = Vec::new();
    let mut check = |name: &'static str, passed: bool, detail: String| out.push(Check { name, passed, detail });

    let q: f64 = crate::analysis::q_inv(0.05).unwrap_or(f64::NAN);
    check("q_inverse", (q - 1.6448536269514722).abs() < 1e-9, format!("Q^-1(0.05) = {q}"));

    let w: f64 = crate::analysis::bartlett_lrv(&[1.0, 0.5], 1);
    check("bartlett", (w - 1.5).abs() < 1e-15, format!("omega^2 = {w}"));

    let d = effective_diffusivity(30e-6, 0.8, 2e-13).unwrap_or(f64::NAN);
    check("effective_diffusivity", (d / 1.877e-10 - 1.0).abs() < 1e-3, format!("D_eff(1) = {d:e}"));

    let sep = separability::<f64>([0.0, 1.0], [0.5, 0.5], None);
    let ok = sep.as_ref().is_ok_and(|s| (s.bhattacharyya - 0.25).abs() < 1e-9 && (s.chernoff - 0.25).abs() < 1e-9 && (s.symmetric_kl - 1.0).abs() < 1e-9);
    check("separability", ok, format!("{sep:?}"));

    // Mixed Poisson: Gamma(4, rate 2) latent gives Var(Y) = 3.
    let mut r = stream(derive_seed(7, domain::SYNTHETIC, 0));
    let g = rand_distr::Gamma::new(4.0, 0.5).expect("valid gamma");
    let ys: Vec<f64> = (0..200_000)
        .map(|_| {
            let l: f64 = rand_distr::Distribution::sample(&g, &mut r);
            f64::from(crate::counting::poisson(l, &mut r).unwrap_or(0))
        })
        .collect();
    let (m, excess) = crate::counting::overdispersion_decomposition(&ys).unwrap_or((f64::NAN, f64::NAN));
    check("mixed_poisson", (m + excess - 3.0).abs() < 0.05 && (excess - 1.0).abs() < 0.05, format!("var = {}, excess = {excess}", m + excess));

    // Profile fit against a dense grid on one synthetic symbol.
    let u: Vec<f64> = (0..30).map(|i| (-(i as f64) / 10.0).exp()).collect();
    let tpl = Template::from_shape(&u, 0.05, 0.05);
    let ok = tpl.as_ref().is_ok_and(|t| {
        let truth: Vec<f64> = u.iter().map(|x| 50.0 * x + 3.0).collect();
        let y: Vec<f64> = truth.iter().map(|x| x.round()).collect();
        crate::profiling::fit_profile(&y, t).is_ok_and(|f| {
            f.converged && f.mu_hat.iter().zip(&truth[t.window()]).all(|(m, x)| (m / x - 1.0).abs() < 0.05)
        })
    });
    check("profile_fit", ok, "fitted mean tracks a rounded noiseless symbol".into());

    let mut r = stream(derive_seed(7, domain::SYNTHETIC, 1));
    let flat = Template::from_shape(&[1.0; 40], 0.05, 0.05);
    let ok = flat.as_ref().is_ok_and(|t| {
        let ts: Vec<f64> = (0..2000)
            .filter_map(|_| {
                let y: Vec<f64> = (0..40).map(|_| f64::from(crate::counting::poisson(20.0, &mut r).unwrap_or(0))).collect();
                crate::detector::statistic(&y, t).ok().flatten()
            })
            .collect();
        let mean = ts.iter().sum::<f64>() / ts.len() as f64;
        let sd = (ts.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / ts.len() as f64).sqrt();
        // Refitting the mean costs one degree of freedom: E[T] ~ -1 / ((M - 1) λ).
        let expected = -1.0 / (39.0 * 20.0);
        (mean - expected).abs() < 4.0 * sd / (ts.len() as f64).sqrt()
    });
    check("poisson_null", ok, "T matches its Poisson-null mean".into());

    // Determinism of seeded streams.
    let a: u64 = stream(derive_seed(3, domain::EVALUATION, 9)).random();
    let b: u64 = stream(derive_seed(3, domain::EVALUATION, 9)).random();
    check("determinism", a == b, String::new());

    let _ = rng::StreamRng::clone;
    out
}

/// Writes `body` to `dir/name`, creating `dir`.
pub fn write_output(dir: &Path, name: &str, body: &[u8]) -> Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, body)?;
    Ok(path)
}

/// Human-readable one-line summary per row, for logs.
pub fn summarize(res: &SweepResult) -> String {
    let mut s = String::new();
    for r in &res.rows {
        let _ = writeln!(s, "{:>10} {:>12.4} {:>16} {:>16} {:>10.5} ± {:.5} (n={})", r.arm, r.axis, r.detector, r.metric, r.value, r.se, r.n);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.n_packets = 6;
        cfg.symbols_per_packet = 32;
        cfg.detector.calibration_packets = 40;
        cfg.baselines.n_paths = 100;
        cfg.baselines.glrt_symbol_cap = 8;
        cfg.baselines.glrt_max_evals = 40;
        cfg.sweep.h0_symbols_per_point = 300;
        cfg.sweep.psi_grid = vec![0.5, 1.0, 2.0];
        cfg
    }

    #[test]
    fn config_roundtrip_and_defaults() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(cfg.channel_params(), ChannelParams::baseline());
        assert_eq!(cfg.mobility_params(), MobilityParams::baseline());
        let partial = ExperimentConfig::from_toml("master_seed = 9\n[channel]\nmemory = 3\n").unwrap();
        assert_eq!((partial.master_seed, partial.channel.memory), (9, 3));
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn missing_config_names_path() {
        let err = ExperimentConfig::load(Path::new("/nonexistent/exp.toml")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/exp.toml"));
    }

    #[test]
    fn detector_names_parse() {
        for k in DetectorKind::ALL {
            assert_eq!(k.name().parse::<DetectorKind>().unwrap(), k);
        }
        assert!("viterbi".parse::<DetectorKind>().is_err());
    }

    #[test]
    fn balanced_threshold_examples() {
        let t = balanced_threshold(&[0.0, 1.0, 2.0], &[3.0, 4.0, 5.0]);
        assert_eq!(t.kappa, 1);
        assert!(t.tau_t >= 2.0 && t.tau_t < 3.0);
        assert_eq!([0.0, 2.0, 3.0, 5.0].map(|s| t.decide(s)), [0, 0, 1, 1]);
        let flipped = balanced_threshold(&[3.0, 4.0, 5.0], &[0.0, 1.0, 2.0]);
        assert_eq!(flipped.kappa, -1);
        assert_eq!([0.0, 2.0, 3.0, 5.0].map(|s| flipped.decide(s)), [1, 1, 0, 0]);
    }

    #[test]
    fn roc_helpers() {
        let pts = empirical_roc(&[0.0, 1.0], &[2.0, 3.0], 2, 2, 1.0);
        assert_eq!(pts.first(), Some(&(0.0, 0.0)));
        assert!((auc(&pts) - 1.0).abs() < 1e-12);
        let gated = empirical_roc(&[0.0], &[2.0], 2, 2, 1.0);
        assert_eq!(gated.last(), Some(&(0.5, 0.5)));
        let chance = [(0.0, 0.0), (1.0, 1.0)];
        assert!((auc(&chance) - 0.5).abs() < 1e-12);
        assert_eq!(pd_at(&chance, 0.1), Some(0.1));
    }

    #[test]
    fn contrast_speed_inverts_effective_diffusivity() {
        let mob = MobilityParams::baseline();
        for c in [1.0, 10.0, 938.0] {
            let v = speed_for_contrast(&mob, c).unwrap();
            let d1 = effective_diffusivity(v, mob.rot_diffusion[1], mob.trans_diffusion).unwrap();
            let d0 = effective_diffusivity(0.0, mob.rot_diffusion[0], mob.trans_diffusion).unwrap();
            assert!((d1 / d0 / c - 1.0).abs() < 1e-12);
        }
        assert!(speed_for_contrast(&mob, 0.5).is_err());
    }

    #[test]
    fn simulate_set_is_deterministic() {
        let cfg = tiny();
        let ch = cfg.channel_params();
        let mob = cfg.mobility_params();
        let a = simulate_set(&ch, &mob, Warmup::Silence, 3, 8, PsiLaw::LogUniform(0.5, 2.0), 5, domain::EVALUATION).unwrap();
        let b = simulate_set(&ch, &mob, Warmup::Silence, 3, 8, PsiLaw::LogUniform(0.5, 2.0), 5, domain::EVALUATION).unwrap();
        assert_eq!(a.counts, b.counts);
        assert_eq!(a.packet_ranges(), vec![0..8, 8..16, 16..24]);
        assert!(a.psi.iter().all(|p| (0.5..=2.0).contains(p)));
    }

    #[test]
    fn gain_sweep_shape_and_determinism() {
        let mut cfg = tiny();
        cfg.baselines.detectors = vec![DetectorKind::Dispersion, DetectorKind::Mean];
        let a = run_gain_stability(&cfg).unwrap();
        assert_eq!(a.rows.iter().filter(|r| r.metric == "pfa").count(), 3 * 2);
        assert!(a.rows.iter().all(|r| r.n > 0 && r.se.is_finite()));
        let b = run_gain_stability(&cfg).unwrap();
        assert_eq!(a.to_csv_string().unwrap(), b.to_csv_string().unwrap());
        let csv = a.to_csv_string().unwrap();
        assert!(csv.starts_with("# experiment = \"gain\""));
        assert!(csv.contains("# master_seed = 1"));
    }

    #[test]
    fn glrt_rows_present_in_gain_sweep() {
        let mut cfg = tiny();
        cfg.sweep.psi_grid = vec![1.0];
        let res = run_gain_stability(&cfg).unwrap();
        assert_eq!(res.select("h0", "glrt", "pfa").count(), 1);
    }

    #[test]
    fn isi_sweep_dfe_identity_at_unit_memory() {
        let mut cfg = tiny();
        cfg.sweep.memory_grid = vec![1, 2];
        cfg.baselines.detectors = vec![DetectorKind::Dispersion, DetectorKind::Mean];
        let res = run_isi(&cfg).unwrap();
        for d in ["dispersion", "mean"] {
            let plain: Vec<_> = res.select("isi", d, "ber").collect();
            let dfe: Vec<_> = res.select("isi", &format!("{d}_dfe"), "ber").map(|r| r.value).collect::<Vec<_>>().into_iter().collect();
            assert_eq!(plain.len(), 2);
            assert_eq!(plain[0].value, dfe[0]);
        }
    }

    #[test]
    fn mobility_sweep_flags_and_rows() {
        let mut cfg = tiny();
        cfg.sweep.contrast_grid = vec![1.0, 100.0];
        cfg.sweep.pilot_symbols = 600;
        cfg.baselines.detectors = vec![DetectorKind::Dispersion, DetectorKind::Mean];
        let res = run_mobility_contrast(&cfg).unwrap();
        assert_eq!(res.select("fixed", "mean", "ber").count(), 2);
        assert_eq!(res.select("neutral", "dispersion", "ber").count(), 2);
        let mism: Vec<f64> = res.select("neutral", "setup", "pilot_mismatch").map(|r| r.value).collect();
        for (m, f) in mism.iter().zip(&cfg.sweep.contrast_grid) {
            assert!(m.abs() < 0.01 || res.flags.iter().any(|s| s.contains(&format!("contrast {f}"))));
        }
    }

    #[test]
    fn selftest_passes() {
        for c in selftest() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
