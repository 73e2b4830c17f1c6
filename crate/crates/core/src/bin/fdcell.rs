use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fdcell::config::{parse_doa_mode, parse_sic_mode, DoaMode, ScenarioConfig, SnrGrid};
use fdcell::harness::{
    beampattern, emit_results, run_ber, run_doa_experiment, run_spectral_efficiency, selftest,
    write_results, Direction, Format, Record,
};
use fdcell::impairments::SicMode;
use fdcell::numerics::{Purpose, RngStream};
use fdcell::channel::draw_channels;
use fdcell::slot::stream_key;
use fdcell::Result;

#[derive(Parser)]
#[command(name = "fdcell", version, about = "Full-duplex SC-FDMA cell simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// BER at the UEs for the full-duplex downlink.
    BerDownlink(Common),
    /// BER at the eNB for the full-duplex uplink.
    BerUplink(Common),
    /// Downlink spectral efficiency of FD, alternating-direction and HD-TDD.
    SpectralEfficiency(Common),
    /// Root-MUSIC accuracy and resulting null depth.
    Doa(Common),
    /// Trained beam patterns of every UE.
    Beampattern(Common),
    /// Quick end-to-end sanity checks.
    Selftest(Common),
}

#[derive(Args)]
struct Common {
    /// Scenario file of key = value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// SNR grid in dB, start:stop:step.
    #[arg(long, allow_hyphen_values = true)]
    snr: Option<SnrGrid>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_sic_mode)]
    sic_mode: Option<SicMode>,
    #[arg(long, value_parser = parse_doa_mode)]
    doa_mode: Option<DoaMode>,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "csv")]
    format: Format,
    /// Also write every trial's channel taps as CSV.
    #[arg(long)]
    dump_channels: bool,
}

impl Common {
    fn scenario(&self) -> Result<ScenarioConfig> {
        let mut cfg = match &self.config {
            Some(p) => ScenarioConfig::load(p)?,
            None => ScenarioConfig::default(),
        };
        if let Some(s) = self.snr {
            cfg.snr_db = s;
        }
        if let Some(t) = self.trials {
            cfg.trials = t;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = self.sic_mode {
            cfg.sic_mode = m;
        }
        if let Some(m) = self.doa_mode {
            cfg.doa_mode = m;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn emit<R: Record>(&self, records: &[R]) -> Result<()> {
        match &self.out {
            Some(p) => emit_results(records, p, self.format),
            None => write_results(records, std::io::stdout().lock(), self.format).map_err(|m| {
                fdcell::Error::Format {
                    path: PathBuf::from("<stdout>"),
                    message: m,
                }
            }),
        }
    }

    fn channel_dump_path(&self) -> PathBuf {
        match &self.out {
            Some(p) => p.with_extension("channels.csv"),
            None => PathBuf::from("channels.csv"),
        }
    }
}

fn dump_channels(cfg: &ScenarioConfig, path: &Path) -> Result<()> {
    let io = |e: std::io::Error| fdcell::Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let file = std::fs::File::create(path).map_err(io)?;
    let mut w = csv::Writer::from_writer(file);
    for t in 0..cfg.trials as u64 {
        let mut rng = RngStream::for_trial(cfg.seed, stream_key(t, 0), Purpose::Channel);
        draw_channels(&mut rng, cfg)?.dump_csv(&mut w, t)?;
    }
    w.flush().map_err(io)
}

fn run(cli: Cli) -> Result<bool> {
    let common = match &cli.command {
        Command::BerDownlink(c)
        | Command::BerUplink(c)
        | Command::SpectralEfficiency(c)
        | Command::Doa(c)
        | Command::Beampattern(c)
        | Command::Selftest(c) => c,
    };
    let cfg = common.scenario()?;
    if common.dump_channels {
        dump_channels(&cfg, &common.channel_dump_path())?;
    }
    match &cli.command {
        Command::BerDownlink(c) => c.emit(&run_ber(&cfg, Direction::Downlink)?)?,
        Command::BerUplink(c) => c.emit(&run_ber(&cfg, Direction::Uplink)?)?,
        Command::SpectralEfficiency(c) => c.emit(&run_spectral_efficiency(&cfg)?)?,
        Command::Doa(c) => {
            let s = run_doa_experiment(&cfg)?;
            for (l, r) in s.rmse_deg.iter().enumerate() {
                eprintln!("ue {l}: rmse {r:.4} deg");
            }
            eprintln!("estimation failures: {}", s.failures);
            c.emit(&s.records)?;
        }
        Command::Beampattern(c) => c.emit(&beampattern(&cfg)?)?,
        Command::Selftest(_) => {
            let checks = selftest(&cfg)?;
            for ch in &checks {
                println!("{} {}: {}", if ch.passed { "PASS" } else { "FAIL" }, ch.name, ch.detail);
            }
            return Ok(checks.iter().all(|c| c.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
