//! Monte Carlo experiments and result files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::antenna::{beam_pattern, clms_train, root_music_doa, simulate_snapshots, steering_matrix, steering_vector};
use crate::config::{sic_mode_name, ScenarioConfig};
use crate::error::{Error, Result};
use crate::numerics::{db_to_lin, lin_to_db, Purpose, RngStream};
use crate::slot::{
    associate, run_slot, true_directions, NoiseReference, SlotOutcome, SlotParams, SlotPlan,
    TrialContext,
};

/// Trials evaluated between early-stop checks. Fixed so results do not
/// depend on the thread count.
pub const TRIAL_BATCH: usize = 16;

const Z95: f64 = 1.959_963_984_540_054;

/// Wilson score interval at 95 % for `errors` out of `trials`.
pub fn wilson_interval(errors: u64, trials: u64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    if errors == 0 {
        return (0.0, Z95 * Z95 / (trials as f64 + Z95 * Z95));
    }
    let n = trials as f64;
    let p = errors as f64 / n;
    let z2 = Z95 * Z95;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = Z95 * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Downlink,
    Uplink,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::Downlink => "downlink",
            Direction::Uplink => "uplink",
        }
    }
}

/// Column layout of an emitted record type.
pub trait Record: Serialize + DeserializeOwned {
    const HEADER: &'static [&'static str];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BerRecord {
    pub experiment: String,
    pub snr_db: f64,
    pub ue: usize,
    pub ber: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub bits: u64,
    pub errors: u64,
    pub seed: u64,
}

impl Record for BerRecord {
    const HEADER: &'static [&'static str] = &[
        "experiment", "snr_db", "ue", "ber", "ci_lo", "ci_hi", "bits", "errors", "seed",
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeRecord {
    pub scheme: String,
    pub snr_db: f64,
    pub se_bps_hz: f64,
    pub seed: u64,
}

impl Record for SeRecord {
    const HEADER: &'static [&'static str] = &["scheme", "snr_db", "se_bps_hz", "seed"];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoaRecord {
    pub trial: u64,
    /// Observing UE.
    pub ue: usize,
    /// Index of the configured direction being estimated.
    pub source: usize,
    pub true_deg: f64,
    pub est_deg: f64,
    pub error_deg: f64,
    /// `|W^H α|²` of the observing UE's beam toward the true direction of
    /// the first other UE.
    pub null_depth_db: f64,
    pub seed: u64,
}

impl Record for DoaRecord {
    const HEADER: &'static [&'static str] = &[
        "trial", "ue", "source", "true_deg", "est_deg", "error_deg", "null_depth_db", "seed",
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternRecord {
    pub ue: usize,
    pub angle_deg: f64,
    pub gain_db: f64,
}

impl Record for PatternRecord {
    const HEADER: &'static [&'static str] = &["ue", "angle_deg", "gain_db"];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            _ => Err(format!("unknown format '{s}' (csv|json)")),
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn fmt_err(path: &Path, message: impl ToString) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

/// Write records to any sink; CSV always starts with the header.
pub fn write_results<R: Record, W: Write>(records: &[R], out: W, format: Format) -> std::result::Result<(), String> {
    match format {
        Format::Csv => {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
            w.write_record(R::HEADER).map_err(|e| e.to_string())?;
            for r in records {
                w.serialize(r).map_err(|e| e.to_string())?;
            }
            w.flush().map_err(|e| e.to_string())
        }
        Format::Json => {
            let mut out = out;
            serde_json::to_writer_pretty(&mut out, records).map_err(|e| e.to_string())?;
            out.write_all(b"\n").map_err(|e| e.to_string())
        }
    }
}

pub fn emit_results<R: Record>(records: &[R], path: &Path, format: Format) -> Result<()> {
    let f = File::create(path).map_err(|e| io_err(path, e))?;
    write_results(records, BufWriter::new(f), format).map_err(|m| fmt_err(path, m))
}

pub fn parse_results<R: Record>(path: &Path, format: Format) -> Result<Vec<R>> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    match format {
        Format::Csv => {
            let mut r = csv::Reader::from_reader(BufReader::new(f));
            let header = r.headers().map_err(|e| fmt_err(path, e))?.clone();
            if header.iter().ne(R::HEADER.iter().copied()) {
                return Err(fmt_err(path, format!("unexpected header {header:?}")));
            }
            r.deserialize()
                .collect::<std::result::Result<Vec<R>, _>>()
                .map_err(|e| fmt_err(path, e))
        }
        Format::Json => serde_json::from_reader(BufReader::new(f)).map_err(|e| fmt_err(path, e)),
    }
}

/// Run `f` over trials `0..trials` in fixed-size batches, in parallel within
/// a batch, stopping after the first batch where `done` holds.
fn run_batched<T, F, D>(trials: usize, f: F, mut done: D) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync,
    D: FnMut(&[T]) -> bool,
{
    let mut out = Vec::with_capacity(trials);
    let mut start = 0;
    while start < trials {
        let end = (start + TRIAL_BATCH).min(trials);
        let batch: Vec<T> = (start..end)
            .into_par_iter()
            .map(|t| f(t as u64))
            .collect::<Result<Vec<_>>>()?;
        out.extend(batch);
        if done(&out) {
            break;
        }
        start = end;
    }
    Ok(out)
}

fn ber_experiment_name(cfg: &ScenarioConfig, dir: Direction) -> String {
    let si = if cfg.si_enabled {
        sic_mode_name(cfg.sic_mode)
    } else {
        "no-si"
    };
    format!("ber-{}-{si}", dir.name())
}

/// BER per UE and SNR point for one direction of the full-duplex cell.
pub fn run_ber(cfg: &ScenarioConfig, dir: Direction) -> Result<Vec<BerRecord>> {
    cfg.validate()?;
    let experiment = ber_experiment_name(cfg, dir);
    let plan = SlotPlan::full_duplex(cfg.n_ue);
    let seed = cfg.seed;
    let mut records = Vec::new();
    for snr in cfg.snr_db.points() {
        let params = SlotParams::from_config(cfg, snr, NoiseReference::Received);
        let per_trial = run_batched(
            cfg.trials,
            |t| {
                let ctx = TrialContext::draw(cfg, seed, t)?;
                let out = run_slot(cfg, &ctx, &plan, &params, seed, t, 0)?;
                let links = match dir {
                    Direction::Downlink => out.downlink,
                    Direction::Uplink => out.uplink,
                };
                Ok(links
                    .into_iter()
                    .map(|r| (r.errors as u64, r.bits as u64))
                    .collect::<Vec<_>>())
            },
            |done| {
                cfg.early_stop_errors > 0
                    && (0..cfg.n_ue).all(|u| {
                        done.iter().map(|t| t[u].0).sum::<u64>() >= cfg.early_stop_errors
                    })
            },
        )?;
        for ue in 0..cfg.n_ue {
            let errors: u64 = per_trial.iter().map(|t| t[ue].0).sum();
            let bits: u64 = per_trial.iter().map(|t| t[ue].1).sum();
            let (ci_lo, ci_hi) = wilson_interval(errors, bits);
            records.push(BerRecord {
                experiment: experiment.clone(),
                snr_db: snr,
                ue,
                ber: if bits == 0 { 0.0 } else { errors as f64 / bits as f64 },
                ci_lo,
                ci_hi,
                bits,
                errors,
                seed,
            });
        }
    }
    Ok(records)
}

/// Downlink spectral efficiency of the cell, per scheme.
pub const SCHEMES: [&str; 3] = ["fd", "alt-dir", "hd-tdd"];

fn downlink_se(cfg: &ScenarioConfig, out: &SlotOutcome) -> f64 {
    let frac = cfg.n_alloc as f64 / cfg.n_subcarriers as f64;
    out.downlink
        .iter()
        .map(|r| frac * (1.0 + r.sinr).log2())
        .sum()
}

/// Per-trial downlink SE of `[fd, alt-dir, hd-tdd]`.
///
/// FD serves every UE in both directions each slot. Alternating-direction
/// serves one UE down and another up, swapping each slot. HD-TDD serves a
/// single UE and spends every other slot on the uplink, so its downlink SE
/// is half that of a lone downlink UE. Self-interference is taken as fully
/// cancelled.
pub fn trial_spectral_efficiency(cfg: &ScenarioConfig, snr_db: f64, trial: u64) -> Result<[f64; 3]> {
    let seed = cfg.seed;
    let ctx = TrialContext::draw(cfg, seed, trial)?;
    let mut params = SlotParams::from_config(cfg, snr_db, NoiseReference::Transmit);
    params.si_enabled = false;
    let k = cfg.n_ue;
    let fd = downlink_se(cfg, &run_slot(cfg, &ctx, &SlotPlan::full_duplex(k), &params, seed, trial, 0)?);
    let mut alt = 0.0;
    let mut hd = 0.0;
    for l in 0..k {
        let others: Vec<usize> = (0..k).filter(|&q| q != l).take(1).collect();
        let slot = 1 + l as u64 % 2;
        let a = SlotPlan {
            downlink: vec![l],
            uplink: others,
        };
        alt += downlink_se(cfg, &run_slot(cfg, &ctx, &a, &params, seed, trial, slot)?);
        let h = SlotPlan {
            downlink: vec![l],
            uplink: vec![],
        };
        hd += 0.5 * downlink_se(cfg, &run_slot(cfg, &ctx, &h, &params, seed, trial, 3)?);
    }
    Ok([fd, alt / k as f64, hd / k as f64])
}

pub fn run_spectral_efficiency(cfg: &ScenarioConfig) -> Result<Vec<SeRecord>> {
    cfg.validate()?;
    let wanted: Vec<usize> = match cfg.baseline {
        crate::config::Baseline::All => vec![0, 1, 2],
        crate::config::Baseline::Fd => vec![0],
        crate::config::Baseline::AltDir => vec![1],
        crate::config::Baseline::HdTdd => vec![2],
    };
    let mut records = Vec::new();
    for snr in cfg.snr_db.points() {
        let per_trial = run_batched(
            cfg.trials,
            |t| trial_spectral_efficiency(cfg, snr, t),
            |_| false,
        )?;
        for &s in &wanted {
            let mean = per_trial.iter().map(|v| v[s]).sum::<f64>() / per_trial.len().max(1) as f64;
            records.push(SeRecord {
                scheme: SCHEMES[s].to_string(),
                snr_db: snr,
                se_bps_hz: mean,
                seed: cfg.seed,
            });
        }
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DoaSummary {
    pub records: Vec<DoaRecord>,
    /// RMSE in degrees per configured direction, over every observing UE.
    pub rmse_deg: Vec<f64>,
    /// Estimation or training failures, counted per observing UE.
    pub failures: usize,
}

/// Root-MUSIC estimates at every UE, and the null depth of the CLMS beam
/// built from them.
pub fn run_doa_experiment(cfg: &ScenarioConfig) -> Result<DoaSummary> {
    cfg.validate()?;
    let seed = cfg.seed;
    let d = cfg.element_spacing_wl;
    let noise = db_to_lin(-cfg.snapshot_snr_db);
    let per_trial = run_batched(
        cfg.trials,
        |t| {
            let mut rng = RngStream::for_trial(seed, t, Purpose::Snapshots);
            let mut recs = Vec::new();
            let mut failures = 0;
            for l in 0..cfg.n_ue {
                let truth = true_directions(cfg, l);
                let y = simulate_snapshots(&mut rng, &truth, cfg.ue_antennas, d, noise, cfg.snapshots)?;
                let est = match root_music_doa(&y, truth.len(), d) {
                    Ok(e) => associate(&e, &truth),
                    Err(_) => {
                        failures += 1;
                        continue;
                    }
                };
                let c = steering_matrix(&est, cfg.ue_antennas, d);
                let depth = match clms_train(&c, &y, cfg.clms_mu, cfg.clms_iters) {
                    Ok(s) if truth.len() > 1 => {
                        let g = s.weights.dotc(&steering_vector(truth[1], cfg.ue_antennas, d));
                        lin_to_db(g.norm_sqr())
                    }
                    Ok(_) => f64::NEG_INFINITY,
                    Err(_) => {
                        failures += 1;
                        continue;
                    }
                };
                let sources: Vec<usize> = std::iter::once(l)
                    .chain((0..cfg.n_ue).filter(|&q| q != l))
                    .collect();
                for (i, &src) in sources.iter().enumerate() {
                    recs.push(DoaRecord {
                        trial: t,
                        ue: l,
                        source: src,
                        true_deg: truth[i].to_degrees(),
                        est_deg: est[i].to_degrees(),
                        error_deg: (est[i] - truth[i]).to_degrees(),
                        null_depth_db: depth,
                        seed,
                    });
                }
            }
            Ok((recs, failures))
        },
        |_| false,
    )?;
    let mut records = Vec::new();
    let mut failures = 0;
    for (r, f) in per_trial {
        records.extend(r);
        failures += f;
    }
    let rmse_deg = (0..cfg.n_ue)
        .map(|l| {
            let errs: Vec<f64> = records.iter().filter(|r| r.source == l).map(|r| r.error_deg).collect();
            (errs.iter().map(|e| e * e).sum::<f64>() / errs.len().max(1) as f64).sqrt()
        })
        .collect();
    Ok(DoaSummary {
        records,
        rmse_deg,
        failures,
    })
}

/// Beam pattern of every UE's trained beam in trial 0, on a 0.5° grid.
pub fn beampattern(cfg: &ScenarioConfig) -> Result<Vec<PatternRecord>> {
    cfg.validate()?;
    let ctx = TrialContext::draw(cfg, cfg.seed, 0)?;
    let grid: Vec<f64> = (-180..=180).map(|i| (i as f64 * 0.5).to_radians()).collect();
    let mut out = Vec::new();
    for l in 0..cfg.n_ue {
        let p = beam_pattern(ctx.weights(l), cfg.element_spacing_wl, &grid);
        for (a, g) in grid.iter().zip(p) {
            out.push(PatternRecord {
                ue: l,
                angle_deg: a.to_degrees(),
                gain_db: lin_to_db(g),
            });
        }
    }
    Ok(out)
}

/// Outcome of one built-in sanity check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Quick end-to-end checks on the configured scenario.
pub fn selftest(cfg: &ScenarioConfig) -> Result<Vec<Check>> {
    cfg.validate()?;
    let mut checks = Vec::new();
    let ideal = ScenarioConfig {
        pa_enabled: false,
        tx_noise_enabled: false,
        ..cfg.clone()
    };
    let params = SlotParams::from_config(&ideal, f64::INFINITY, NoiseReference::Received);
    let mut errors = 0;
    let mut leak: f64 = 0.0;
    for t in 0..4 {
        let ctx = TrialContext::draw(&ideal, cfg.seed, t)?;
        let out = run_slot(&ideal, &ctx, &SlotPlan::full_duplex(cfg.n_ue), &params, cfg.seed, t, 0)?;
        errors += out.downlink.iter().chain(&out.uplink).map(|r| r.errors).sum::<usize>();
        for (_, m) in &out.ue_meters {
            leak = leak.max(m.cross_link / m.desired);
        }
    }
    checks.push(Check {
        name: "noiseless full-duplex slot",
        passed: errors == 0,
        detail: format!("{errors} bit errors"),
    });
    checks.push(Check {
        name: "cross-UE leakage after beamforming",
        passed: leak < 1e-3,
        detail: format!("max ratio {leak:.3e}"),
    });
    let ctx = TrialContext::draw(cfg, cfg.seed, 0)?;
    let worst = ctx
        .beams
        .iter()
        .map(|b| b.constraint_residual())
        .fold(0.0, f64::max);
    checks.push(Check {
        name: "beam constraints",
        passed: worst < 1e-3,
        detail: format!("max residual {worst:.3e}"),
    });
    let none = ScenarioConfig {
        sic_mode: crate::impairments::SicMode::None,
        si_enabled: true,
        ..cfg.clone()
    };
    let p = SlotParams::from_config(&none, 30.0, NoiseReference::Received);
    let out = run_slot(&none, &ctx, &SlotPlan::full_duplex(cfg.n_ue), &p, cfg.seed, 0, 0)?;
    let worst_ber = out
        .downlink
        .iter()
        .chain(&out.uplink)
        .map(|r| r.errors as f64 / r.bits as f64)
        .fold(1.0, f64::min);
    checks.push(Check {
        name: "uncancelled self-interference",
        passed: worst_ber > 0.3,
        detail: format!("min BER {worst_ber:.3}"),
    });
    Ok(checks)
}

/// SNR (dB) where a BER curve first crosses `target`, by interpolation of
/// log10(BER) between grid points.
pub fn snr_at_ber(points: &[(f64, f64)], target: f64) -> Option<f64> {
    let lt = target.log10();
    for w in points.windows(2) {
        let (s0, b0) = w[0];
        let (s1, b1) = w[1];
        if b0 >= target && b1 < target {
            if b1 <= 0.0 {
                return Some(s1);
            }
            let (l0, l1) = (b0.log10(), b1.log10());
            return Some(s0 + (lt - l0) / (l1 - l0) * (s1 - s0));
        }
    }
    None
}
