use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mobidisp::harness::{
    analyze_from_config, calibrate_from_config, detect_packets, run_sweep, selftest, summarize, write_output,
    write_verdicts, CalibrationBundle, ExperimentConfig, SweepKind,
};
use mobidisp::rng::{derive_seed, domain, mix64, stream};
use mobidisp::{counting, Bit, Error, PacketRecord};
use rand::Rng;

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_ACCEPTANCE: u8 = 3;

#[derive(Parser)]
#[command(name = "mobidisp", version, about = "Dispersion-domain detection for mobile molecular links")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (TOML); defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `master_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated receivers: dispersion, mean, glrt, oracle.
    #[arg(long, value_delimiter = ',')]
    detectors: Option<Vec<String>>,
    /// Give the likelihood receivers and the DFE the true past bits.
    #[arg(long)]
    genie_isi: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate labeled packets at unit gain and write them as JSON lines.
    Simulate(Common),
    /// Learn the template, gate, thresholds and ISI predictor.
    Calibrate(Common),
    /// Run the calibrated dispersion and mean receivers (with DFE) over simulated packets.
    Detect {
        #[command(flatten)]
        common: Common,
        /// Bundle written by `calibrate`.
        #[arg(long)]
        calibration: PathBuf,
        /// Packets written by `simulate`.
        #[arg(long)]
        packets: PathBuf,
    },
    /// Fit the Gaussian working model and report separability.
    Analyze(Common),
    /// Run one experiment sweep and write its CSV.
    Sweep {
        #[arg(value_enum)]
        kind: SweepArg,
        #[command(flatten)]
        common: Common,
    },
    /// Run the built-in numerical oracles.
    Selftest,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepArg {
    Gain,
    Roc,
    Mobility,
    Sampling,
    Isi,
}

impl SweepArg {
    fn kind(self) -> SweepKind {
        match self {
            Self::Gain => SweepKind::Gain,
            Self::Roc => SweepKind::Roc,
            Self::Mobility => SweepKind::Mobility,
            Self::Sampling => SweepKind::Sampling,
            Self::Isi => SweepKind::Isi,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::Gain => "gain",
            Self::Roc => "roc",
            Self::Mobility => "mobility",
            Self::Sampling => "sampling",
            Self::Isi => "isi",
        }
    }
}

impl Common {
    fn config(&self) -> mobidisp::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.master_seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.display().to_string();
        }
        if let Some(d) = &self.detectors {
            cfg.baselines.detectors = d.iter().map(|s| s.parse()).collect::<mobidisp::Result<_>>()?;
        }
        cfg.baselines.genie_isi |= self.genie_isi;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, Error::Config(_)) { EXIT_USAGE } else { EXIT_RUNTIME })
        }
    }
}

fn run(cli: Cli) -> mobidisp::Result<u8> {
    match cli.command {
        Command::Simulate(c) => {
            let cfg = c.config()?;
            let path = simulate(&cfg)?;
            println!("wrote {}", path.display());
        }
        Command::Calibrate(c) => {
            let cfg = c.config()?;
            let bundle = calibrate_from_config(&cfg)?;
            let path = write_output(Path::new(&cfg.output_dir), "calibration.json", &to_json(&bundle)?)?;
            println!("wrote {}", path.display());
        }
        Command::Detect { common, calibration, packets } => {
            let cfg = common.config()?;
            let text = std::fs::read_to_string(&calibration)
                .map_err(|e| Error::Config(format!("cannot read calibration {}: {e}", calibration.display())))?;
            let bundle: CalibrationBundle = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", calibration.display())))?;
            let records = read_packets(&packets)?;
            let counts: Vec<Vec<Vec<f64>>> =
                records.iter().map(|p| p.frames.iter().map(|f| f.counts_f64()).collect()).collect();
            let truth: Vec<Vec<Bit>> = records.iter().map(|p| p.bits.clone()).collect();
            let genie = cfg.baselines.genie_isi.then_some(truth.as_slice());
            let rows = detect_packets(&bundle, &counts, &cfg.baselines.detectors, genie)?;
            let mut buf = Vec::new();
            write_verdicts(&rows, &mut buf)?;
            let path = write_output(Path::new(&cfg.output_dir), "verdicts.csv", &buf)?;
            println!("wrote {}", path.display());
        }
        Command::Analyze(c) => {
            let cfg = c.config()?;
            let report = analyze_from_config(&cfg)?;
            let path = write_output(Path::new(&cfg.output_dir), "analysis.json", &to_json(&report)?)?;
            println!("wrote {}", path.display());
        }
        Command::Sweep { kind, common } => {
            let cfg = common.config()?;
            let res = run_sweep(kind.kind(), &cfg)?;
            let path = write_output(Path::new(&cfg.output_dir), &format!("{}.csv", kind.name()), res.to_csv_string()?.as_bytes())?;
            print!("{}", summarize(&res));
            for f in &res.flags {
                eprintln!("flag: {f}");
            }
            println!("wrote {}", path.display());
        }
        Command::Selftest => {
            let checks = selftest();
            let mut ok = true;
            for c in &checks {
                println!("{} {} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                ok &= c.passed;
            }
            return Ok(if ok { 0 } else { EXIT_ACCEPTANCE });
        }
    }
    Ok(0)
}

fn to_json<T: serde::Serialize>(v: &T) -> mobidisp::Result<Vec<u8>> {
    serde_json::to_vec_pretty(v).map_err(|e| Error::Config(e.to_string()))
}

/// `n_packets` random-bit packets at unit gain, one JSON record per line.
fn simulate(cfg: &ExperimentConfig) -> mobidisp::Result<PathBuf> {
    let ch = cfg.channel_params();
    let mob = cfg.mobility_params();
    std::fs::create_dir_all(&cfg.output_dir)?;
    let path = Path::new(&cfg.output_dir).join("packets.jsonl");
    let mut out = BufWriter::new(File::create(&path)?);
    for i in 0..cfg.n_packets {
        let seed = derive_seed(cfg.master_seed, domain::EVALUATION, i as u64);
        let mut r = stream(mix64(seed));
        let bits: Vec<Bit> = (0..cfg.symbols_per_packet).map(|_| r.random_range(0..=1u8)).collect();
        let rec = counting::generate_packet(&bits, 1.0, &ch, &mob, cfg.mobility.warmup, seed)?;
        serde_json::to_writer(&mut out, &rec).map_err(|e| Error::Config(e.to_string()))?;
        writeln!(out)?;
    }
    out.flush()?;
    Ok(path)
}

fn read_packets(path: &Path) -> mobidisp::Result<Vec<PacketRecord>> {
    let file = File::open(path).map_err(|e| Error::Config(format!("cannot read packets {}: {e}", path.display())))?;
    BufReader::new(file)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
        .map(|l| {
            let l = l?;
            serde_json::from_str(&l).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
        })
        .collect()
}
