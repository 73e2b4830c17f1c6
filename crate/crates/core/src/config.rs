//! Scenario configuration and its flat `key = value` file format.
//!
//! ```text
//! # comments start with '#'
//! n_subcarriers = 256
//! enb_doa_deg = 10, 60
//! snr_db = 0:30:5
//! sic_mode = full
//! ```
//!
//! Unknown keys are rejected. Every field has a default matching the reference
//! scenario (256/180 tones, Ne = Nr = 4, K = 2, L = 10, 16-QAM).

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::downlink::PowerPolicy;
use crate::error::{Error, Result};
use crate::impairments::SicMode;
use crate::modem::AllocationStyle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DoaMode {
    /// Beamformer constraints use the true angles.
    Oracle,
    /// Beamformer constraints use Root-MUSIC estimates.
    Estimated,
}

/// Which scheduling schemes the spectral-efficiency experiment evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    All,
    Fd,
    HdTdd,
    AltDir,
}

/// SNR sweep in dB, inclusive of `stop` when it lands on the grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnrGrid {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl SnrGrid {
    pub fn points(&self) -> Vec<f64> {
        if self.step <= 0.0 {
            return vec![self.start];
        }
        let n = ((self.stop - self.start) / self.step + 1e-9).floor() as i64;
        (0..=n.max(0)).map(|i| self.start + i as f64 * self.step).collect()
    }
}

impl FromStr for SnrGrid {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(':').map(str::trim).collect();
        let num = |p: &str| p.parse::<f64>().map_err(|_| format!("bad number '{p}' in SNR grid"));
        match parts.as_slice() {
            [single] => {
                let v = num(single)?;
                Ok(Self { start: v, stop: v, step: 1.0 })
            }
            [a, b, c] => {
                let grid = Self { start: num(a)?, stop: num(b)?, step: num(c)? };
                if grid.step <= 0.0 || grid.stop < grid.start {
                    return Err(format!("SNR grid '{s}' needs start <= stop and step > 0"));
                }
                Ok(grid)
            }
            _ => Err(format!("SNR grid '{s}' must be start:stop:step")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub n_subcarriers: usize,
    pub n_alloc: usize,
    pub n_ue: usize,
    pub enb_antennas: usize,
    pub ue_antennas: usize,
    pub channel_taps: usize,
    pub cp_len: usize,
    pub mod_order: usize,
    /// Direction of the eNB seen from each UE, degrees from the array normal.
    /// UE `q` is taken to appear to every other UE at its own `enb_doa_deg[q]`,
    /// which places each UE in the other's null.
    pub enb_doa_deg: Vec<f64>,
    pub element_spacing_wl: f64,
    pub snr_db: SnrGrid,
    pub trials: usize,
    pub seed: u64,
    pub sic_mode: SicMode,
    pub si_enabled: bool,
    pub power_policy: PowerPolicy,
    pub ue_xlink_gain_db: f64,
    pub ue_corr_rho: f64,
    pub doa_mode: DoaMode,
    pub baseline: Baseline,
    pub allocation: AllocationStyle,
    pub clms_mu: f64,
    pub clms_iters: usize,
    pub snapshots: usize,
    pub snapshot_snr_db: f64,
    pub pa_enabled: bool,
    pub pa_backoff_db: f64,
    pub pa_am: [f64; 4],
    pub pa_pm: [f64; 4],
    pub tx_noise_enabled: bool,
    pub tx_evm_db: f64,
    pub si_to_signal_db: f64,
    pub si_cross_rel_db: f64,
    pub si_taps: usize,
    pub sic_floor_db: f64,
    pub early_stop_errors: u64,
    pub genie_sic: bool,
    pub sample_rate_hz: f64,
    pub noise_temp_k: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_subcarriers: 256,
            n_alloc: 180,
            n_ue: 2,
            enb_antennas: 4,
            ue_antennas: 4,
            channel_taps: 10,
            cp_len: 18,
            mod_order: 16,
            enb_doa_deg: vec![10.0, 60.0],
            element_spacing_wl: 0.45,
            snr_db: SnrGrid { start: 0.0, stop: 30.0, step: 5.0 },
            trials: 200,
            seed: 1,
            sic_mode: SicMode::Full,
            si_enabled: true,
            power_policy: PowerPolicy::Equal,
            ue_xlink_gain_db: 0.0,
            ue_corr_rho: 1.0,
            doa_mode: DoaMode::Oracle,
            baseline: Baseline::All,
            allocation: AllocationStyle::Localized,
            clms_mu: 0.01,
            clms_iters: 500,
            snapshots: 200,
            snapshot_snr_db: 20.0,
            pa_enabled: true,
            pa_backoff_db: crate::impairments::DEFAULT_PA_BACKOFF_DB,
            pa_am: crate::impairments::GHORBANI_AM,
            pa_pm: crate::impairments::GHORBANI_PM,
            tx_noise_enabled: true,
            tx_evm_db: -30.0,
            si_to_signal_db: 60.0,
            si_cross_rel_db: -10.0,
            si_taps: 3,
            sic_floor_db: -30.0,
            early_stop_errors: 400,
            genie_sic: false,
            sample_rate_hz: 3.84e6,
            noise_temp_k: 290.0,
        }
    }
}

/// Number of UEs that can share one subcarrier. UEs count as single-antenna
/// (their correlated arrays give no spatial degrees of freedom).
pub fn sharing_capacity(enb_antennas: usize, ue_effective_antennas: usize, n_ue: usize) -> usize {
    if enb_antennas > ue_effective_antennas {
        (enb_antennas / ue_effective_antennas.max(1)).min(n_ue)
    } else {
        1
    }
}

fn parse_list(v: &str) -> std::result::Result<Vec<f64>, String> {
    v.split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| format!("bad number '{}'", p.trim())))
        .collect()
}

fn parse_four(v: &str) -> std::result::Result<[f64; 4], String> {
    let list = parse_list(v)?;
    list.try_into()
        .map_err(|l: Vec<f64>| format!("expected 4 values, got {}", l.len()))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(format!("bad boolean '{v}'")),
    }
}

fn parse_num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse::<T>().map_err(|_| format!("bad value '{v}'"))
}

pub fn parse_sic_mode(v: &str) -> std::result::Result<SicMode, String> {
    match v {
        "none" => Ok(SicMode::None),
        "linear" | "linear-only" => Ok(SicMode::LinearOnly),
        "nl-no-ctc" => Ok(SicMode::NlNoCtc),
        "full" => Ok(SicMode::Full),
        _ => Err(format!("unknown SIC mode '{v}' (none|linear|nl-no-ctc|full)")),
    }
}

pub fn sic_mode_name(m: SicMode) -> &'static str {
    match m {
        SicMode::None => "none",
        SicMode::LinearOnly => "linear",
        SicMode::NlNoCtc => "nl-no-ctc",
        SicMode::Full => "full",
    }
}

pub fn parse_doa_mode(v: &str) -> std::result::Result<DoaMode, String> {
    match v {
        "oracle" => Ok(DoaMode::Oracle),
        "estimated" => Ok(DoaMode::Estimated),
        _ => Err(format!("unknown DoA mode '{v}' (oracle|estimated)")),
    }
}

impl ScenarioConfig {
    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "n_subcarriers" => self.n_subcarriers = parse_num(v)?,
            "n_alloc" => self.n_alloc = parse_num(v)?,
            "n_ue" => self.n_ue = parse_num(v)?,
            "enb_antennas" => self.enb_antennas = parse_num(v)?,
            "ue_antennas" => self.ue_antennas = parse_num(v)?,
            "channel_taps" => self.channel_taps = parse_num(v)?,
            "cp_len" => self.cp_len = parse_num(v)?,
            "mod_order" => self.mod_order = parse_num(v)?,
            "enb_doa_deg" => self.enb_doa_deg = parse_list(v)?,
            "element_spacing_wl" => self.element_spacing_wl = parse_num(v)?,
            "snr_db" => self.snr_db = v.parse()?,
            "trials" => self.trials = parse_num(v)?,
            "seed" => self.seed = parse_num(v)?,
            "sic_mode" => self.sic_mode = parse_sic_mode(v)?,
            "si_enabled" => self.si_enabled = parse_bool(v)?,
            "power_policy" => {
                self.power_policy = match v {
                    "equal" => PowerPolicy::Equal,
                    "water-filling" | "waterfilling" => PowerPolicy::WaterFilling,
                    _ => return Err(format!("unknown power policy '{v}' (equal|water-filling)")),
                }
            }
            "ue_xlink_gain_db" => self.ue_xlink_gain_db = parse_num(v)?,
            "ue_corr_rho" => self.ue_corr_rho = parse_num(v)?,
            "doa_mode" => self.doa_mode = parse_doa_mode(v)?,
            "baseline" => {
                self.baseline = match v {
                    "all" => Baseline::All,
                    "fd" => Baseline::Fd,
                    "hd-tdd" => Baseline::HdTdd,
                    "alt-dir" => Baseline::AltDir,
                    _ => return Err(format!("unknown baseline '{v}' (all|fd|hd-tdd|alt-dir)")),
                }
            }
            "allocation" => {
                self.allocation = match v {
                    "localized" => AllocationStyle::Localized,
                    "interleaved" => AllocationStyle::Interleaved,
                    _ => return Err(format!("unknown allocation '{v}' (localized|interleaved)")),
                }
            }
            "clms_mu" => self.clms_mu = parse_num(v)?,
            "clms_iters" => self.clms_iters = parse_num(v)?,
            "snapshots" => self.snapshots = parse_num(v)?,
            "snapshot_snr_db" => self.snapshot_snr_db = parse_num(v)?,
            "pa_enabled" => self.pa_enabled = parse_bool(v)?,
            "pa_backoff_db" => self.pa_backoff_db = parse_num(v)?,
            "pa_am" => self.pa_am = parse_four(v)?,
            "pa_pm" => self.pa_pm = parse_four(v)?,
            "tx_noise_enabled" => self.tx_noise_enabled = parse_bool(v)?,
            "tx_evm_db" => self.tx_evm_db = parse_num(v)?,
            "si_to_signal_db" => self.si_to_signal_db = parse_num(v)?,
            "si_cross_rel_db" => self.si_cross_rel_db = parse_num(v)?,
            "si_taps" => self.si_taps = parse_num(v)?,
            "sic_floor_db" => self.sic_floor_db = parse_num(v)?,
            "early_stop_errors" => self.early_stop_errors = parse_num(v)?,
            "genie_sic" => self.genie_sic = parse_bool(v)?,
            "sample_rate_hz" => self.sample_rate_hz = parse_num(v)?,
            "noise_temp_k" => self.noise_temp_k = parse_num(v)?,
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    /// Parse the `key = value` format on top of the defaults. All problems are
    /// collected and reported together.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut problems = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                problems.push(format!("line {}: expected key = value", lineno + 1));
                continue;
            };
            if let Err(e) = cfg.set(key.trim(), value.trim()) {
                problems.push(format!("line {}: {e}", lineno + 1));
            }
        }
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Serialize to the `key = value` format; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ");
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("n_subcarriers", self.n_subcarriers.to_string());
        kv("n_alloc", self.n_alloc.to_string());
        kv("n_ue", self.n_ue.to_string());
        kv("enb_antennas", self.enb_antennas.to_string());
        kv("ue_antennas", self.ue_antennas.to_string());
        kv("channel_taps", self.channel_taps.to_string());
        kv("cp_len", self.cp_len.to_string());
        kv("mod_order", self.mod_order.to_string());
        kv("enb_doa_deg", list(&self.enb_doa_deg));
        kv("element_spacing_wl", self.element_spacing_wl.to_string());
        kv(
            "snr_db",
            format!("{}:{}:{}", self.snr_db.start, self.snr_db.stop, self.snr_db.step),
        );
        kv("trials", self.trials.to_string());
        kv("seed", self.seed.to_string());
        kv("sic_mode", sic_mode_name(self.sic_mode).into());
        kv("si_enabled", self.si_enabled.to_string());
        kv(
            "power_policy",
            match self.power_policy {
                PowerPolicy::Equal => "equal",
                PowerPolicy::WaterFilling => "water-filling",
            }
            .into(),
        );
        kv("ue_xlink_gain_db", self.ue_xlink_gain_db.to_string());
        kv("ue_corr_rho", self.ue_corr_rho.to_string());
        kv(
            "doa_mode",
            match self.doa_mode {
                DoaMode::Oracle => "oracle",
                DoaMode::Estimated => "estimated",
            }
            .into(),
        );
        kv(
            "baseline",
            match self.baseline {
                Baseline::All => "all",
                Baseline::Fd => "fd",
                Baseline::HdTdd => "hd-tdd",
                Baseline::AltDir => "alt-dir",
            }
            .into(),
        );
        kv(
            "allocation",
            match self.allocation {
                AllocationStyle::Localized => "localized",
                AllocationStyle::Interleaved => "interleaved",
            }
            .into(),
        );
        kv("clms_mu", self.clms_mu.to_string());
        kv("clms_iters", self.clms_iters.to_string());
        kv("snapshots", self.snapshots.to_string());
        kv("snapshot_snr_db", self.snapshot_snr_db.to_string());
        kv("pa_enabled", self.pa_enabled.to_string());
        kv("pa_backoff_db", self.pa_backoff_db.to_string());
        kv("pa_am", list(&self.pa_am));
        kv("pa_pm", list(&self.pa_pm));
        kv("tx_noise_enabled", self.tx_noise_enabled.to_string());
        kv("tx_evm_db", self.tx_evm_db.to_string());
        kv("si_to_signal_db", self.si_to_signal_db.to_string());
        kv("si_cross_rel_db", self.si_cross_rel_db.to_string());
        kv("si_taps", self.si_taps.to_string());
        kv("sic_floor_db", self.sic_floor_db.to_string());
        kv("early_stop_errors", self.early_stop_errors.to_string());
        kv("genie_sic", self.genie_sic.to_string());
        kv("sample_rate_hz", self.sample_rate_hz.to_string());
        kv("noise_temp_k", self.noise_temp_k.to_string());
        s
    }

    /// Every violated constraint, or `Ok` when the scenario can run.
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if self.n_subcarriers == 0 {
            p.push("n_subcarriers must be positive".to_string());
        }
        if self.n_alloc == 0 || self.n_alloc > self.n_subcarriers {
            p.push(format!(
                "n_alloc = {} must be in 1..={}",
                self.n_alloc, self.n_subcarriers
            ));
        }
        if self.n_ue == 0 {
            p.push("n_ue must be positive".into());
        }
        if self.enb_antennas == 0 || self.ue_antennas == 0 {
            p.push("antenna counts must be positive".into());
        }
        let k_hat = sharing_capacity(self.enb_antennas, 1, self.n_ue);
        if self.n_ue > k_hat {
            p.push(format!(
                "n_ue = {} exceeds the {} UEs that {} eNB antennas can separate per subcarrier",
                self.n_ue, k_hat, self.enb_antennas
            ));
        }
        if self.channel_taps == 0 || self.channel_taps > self.n_subcarriers {
            p.push(format!(
                "channel_taps = {} must be in 1..={}",
                self.channel_taps, self.n_subcarriers
            ));
        }
        if self.cp_len + 1 < self.channel_taps {
            p.push(format!(
                "cp_len = {} is shorter than channel memory {}",
                self.cp_len,
                self.channel_taps.saturating_sub(1)
            ));
        }
        if self.cp_len > self.n_subcarriers {
            p.push("cp_len longer than the symbol".into());
        }
        if ![4, 16, 64].contains(&self.mod_order) {
            p.push(format!("mod_order = {} not in {{4, 16, 64}}", self.mod_order));
        }
        if self.enb_doa_deg.len() != self.n_ue {
            p.push(format!(
                "enb_doa_deg has {} angles for {} UEs",
                self.enb_doa_deg.len(),
                self.n_ue
            ));
        }
        if self.enb_doa_deg.iter().any(|a| !(a.abs() < 90.0)) {
            p.push("DoAs must lie strictly inside (-90, 90) degrees".into());
        }
        if self.n_ue > self.ue_antennas {
            p.push(format!(
                "{} beam constraints do not fit a {}-element UE array",
                self.n_ue, self.ue_antennas
            ));
        }
        if !(self.element_spacing_wl > 0.0) {
            p.push("element_spacing_wl must be positive".into());
        }
        if self.trials == 0 {
            p.push("trials must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.ue_corr_rho) {
            p.push(format!("ue_corr_rho = {} must be in [0, 1]", self.ue_corr_rho));
        }
        if !(self.clms_mu >= 0.0) {
            p.push("clms_mu must be non-negative".into());
        }
        if self.snapshots < self.ue_antennas {
            p.push(format!(
                "snapshots = {} must be at least ue_antennas = {}",
                self.snapshots, self.ue_antennas
            ));
        }
        if self.si_taps == 0 {
            p.push("si_taps must be positive".into());
        }
        if self.si_cross_rel_db > 0.0 {
            p.push("cross-talk must not exceed self-talk (si_cross_rel_db <= 0)".into());
        }
        if !(self.sample_rate_hz > 0.0) || !(self.noise_temp_k > 0.0) {
            p.push("sample_rate_hz and noise_temp_k must be positive".into());
        }
        if self.pa_enabled {
            if let Err(e) = crate::impairments::PaModel::new(self.pa_am, self.pa_pm, self.pa_backoff_db) {
                p.push(e.to_string());
            }
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    pub fn bits_per_symbol(&self) -> usize {
        match self.mod_order {
            4 => 2,
            16 => 4,
            64 => 6,
            _ => 0,
        }
    }

    pub fn bits_per_ue(&self) -> usize {
        self.n_alloc * self.bits_per_symbol()
    }
}
