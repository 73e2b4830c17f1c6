//! Multipath Rayleigh channels for every link of the cell.
//!
//! Each eNB↔UE link and each UE↔UE pair is stored once, so uplink and
//! downlink read the same taps. Taps are i.i.d. CN(0, 1/L) (uniform power
//! delay profile). Array steering phases are not part of the taps; they are
//! applied by the slot model from the geometry.
//!
//! Frequency responses use the plain sum `H(m) = Σ_b h[b] e^{-j2πbm/N}`. With
//! the modem's unitary transforms this gives `DFT(h ⊛ IDFT(d)) = H ⊙ d`.

use std::io::Write;

use crate::config::ScenarioConfig;
use crate::error::{ensure_len, Error, Result};
use crate::modem::TimeSlotSignal;
use crate::numerics::{complex_gaussian, db_to_lin, dft, RngStream, C64, ZERO};

pub type Taps = Vec<C64>;

/// Frequency responses on the full N-point grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FreqChannelSet {
    n: usize,
    /// `[l][j][r][m]`: eNB antenna `j` to antenna `r` of UE `l`.
    enb_ue: Vec<Vec<Vec<Vec<C64>>>>,
    /// `[pair][k][x][m]`: antenna `k` of the lower UE to antenna `x` of the higher.
    ue_ue: Vec<Vec<Vec<Vec<C64>>>>,
    n_ue: usize,
}

/// Taps of one trial. Immutable after [`draw_channels`].
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    n_ue: usize,
    enb_antennas: usize,
    ue_antennas: usize,
    taps: usize,
    enb_ue: Vec<Vec<Vec<Taps>>>,
    ue_ue: Vec<Vec<Vec<Taps>>>,
    freq: FreqChannelSet,
}

fn pair_index(a: usize, b: usize, n_ue: usize) -> usize {
    let (q, l) = if a < b { (a, b) } else { (b, a) };
    // Row-major upper triangle without the diagonal.
    q * (2 * n_ue - q - 1) / 2 + (l - q - 1)
}

fn n_pairs(n_ue: usize) -> usize {
    n_ue * n_ue.saturating_sub(1) / 2
}

/// Non-unitary N-point transform of zero-padded taps.
pub fn taps_response(h: &[C64], n: usize) -> Result<Vec<C64>> {
    if h.len() > n {
        return Err(Error::InvalidParameter(format!(
            "{} taps do not fit a {n}-point grid",
            h.len()
        )));
    }
    let mut padded = vec![ZERO; n];
    padded[..h.len()].copy_from_slice(h);
    let scale = (n as f64).sqrt();
    Ok(dft(&padded, n)?.into_iter().map(|v| v * scale).collect())
}

fn correlated_taps(
    rng: &mut RngStream,
    common: &[C64],
    rho: f64,
    variance: f64,
) -> Result<Taps> {
    if rho >= 1.0 {
        return Ok(common.to_vec());
    }
    let own = complex_gaussian(rng, common.len(), variance)?;
    let a = (1.0 - rho * rho).sqrt();
    Ok(common.iter().zip(own).map(|(&c, u)| c * rho + u * a).collect())
}

/// Draw one realization for every link of the scenario.
pub fn draw_channels(rng: &mut RngStream, cfg: &ScenarioConfig) -> Result<ChannelRealization> {
    let l_taps = cfg.channel_taps;
    let n = cfg.n_subcarriers;
    if l_taps == 0 || n < l_taps {
        return Err(Error::InvalidParameter(format!(
            "need 1 <= L <= N, got L = {l_taps}, N = {n}"
        )));
    }
    if cfg.n_ue == 0 || cfg.enb_antennas == 0 || cfg.ue_antennas == 0 {
        return Err(Error::InvalidParameter("empty antenna or UE set".into()));
    }
    let rho = cfg.ue_corr_rho;
    let var = 1.0 / l_taps as f64;
    let mut enb_ue = Vec::with_capacity(cfg.n_ue);
    for _ in 0..cfg.n_ue {
        let mut per_enb = Vec::with_capacity(cfg.enb_antennas);
        for _ in 0..cfg.enb_antennas {
            let common = complex_gaussian(rng, l_taps, var)?;
            let per_ue_ant = (0..cfg.ue_antennas)
                .map(|_| correlated_taps(rng, &common, rho, var))
                .collect::<Result<Vec<_>>>()?;
            per_enb.push(per_ue_ant);
        }
        enb_ue.push(per_enb);
    }
    let xvar = var * db_to_lin(cfg.ue_xlink_gain_db);
    let mut ue_ue = Vec::with_capacity(n_pairs(cfg.n_ue));
    for _ in 0..n_pairs(cfg.n_ue) {
        let common = complex_gaussian(rng, l_taps, xvar)?;
        let mut grid = Vec::with_capacity(cfg.ue_antennas);
        for _ in 0..cfg.ue_antennas {
            let row = (0..cfg.ue_antennas)
                .map(|_| correlated_taps(rng, &common, rho, xvar))
                .collect::<Result<Vec<_>>>()?;
            grid.push(row);
        }
        ue_ue.push(grid);
    }
    ChannelRealization::from_taps(enb_ue, ue_ue, n)
}

impl ChannelRealization {
    /// Build from explicit taps: `enb_ue[l][j][r]` and `ue_ue[pair][k][x]`
    /// (pairs in upper-triangle order).
    pub fn from_taps(
        enb_ue: Vec<Vec<Vec<Taps>>>,
        ue_ue: Vec<Vec<Vec<Taps>>>,
        n: usize,
    ) -> Result<Self> {
        let n_ue = enb_ue.len();
        let enb_antennas = enb_ue.first().map_or(0, Vec::len);
        let ue_antennas = enb_ue
            .first()
            .and_then(|v| v.first())
            .map_or(0, Vec::len);
        let taps = enb_ue
            .first()
            .and_then(|v| v.first())
            .and_then(|v| v.first())
            .map_or(0, Vec::len);
        for per_enb in &enb_ue {
            ensure_len("eNB antennas per UE", enb_antennas, per_enb.len())?;
            for per_ant in per_enb {
                ensure_len("UE antennas", ue_antennas, per_ant.len())?;
                for t in per_ant {
                    ensure_len("taps", taps, t.len())?;
                }
            }
        }
        ensure_len("UE pairs", n_pairs(n_ue), ue_ue.len())?;
        for grid in &ue_ue {
            ensure_len("UE-UE rows", ue_antennas, grid.len())?;
            for row in grid {
                ensure_len("UE-UE columns", ue_antennas, row.len())?;
                for t in row {
                    ensure_len("taps", taps, t.len())?;
                }
            }
        }
        let resp = |t: &Taps| taps_response(t, n);
        let freq = FreqChannelSet {
            n,
            n_ue,
            enb_ue: enb_ue
                .iter()
                .map(|a| {
                    a.iter()
                        .map(|b| b.iter().map(resp).collect::<Result<Vec<_>>>())
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?,
            ue_ue: ue_ue
                .iter()
                .map(|a| {
                    a.iter()
                        .map(|b| b.iter().map(resp).collect::<Result<Vec<_>>>())
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?,
        };
        Ok(Self {
            n_ue,
            enb_antennas,
            ue_antennas,
            taps,
            enb_ue,
            ue_ue,
            freq,
        })
    }

    pub fn n_ue(&self) -> usize {
        self.n_ue
    }

    pub fn enb_antennas(&self) -> usize {
        self.enb_antennas
    }

    pub fn ue_antennas(&self) -> usize {
        self.ue_antennas
    }

    pub fn taps_len(&self) -> usize {
        self.taps
    }

    /// Taps between eNB antenna `j` and antenna `r` of UE `l`, either direction.
    pub fn enb_ue_taps(&self, l: usize, j: usize, r: usize) -> &[C64] {
        &self.enb_ue[l][j][r]
    }

    /// Taps from antenna `k` of UE `from` to antenna `x` of UE `to`.
    pub fn ue_ue_taps(&self, from: usize, k: usize, to: usize, x: usize) -> &[C64] {
        assert_ne!(from, to, "no UE-UE link from a UE to itself");
        let p = pair_index(from, to, self.n_ue);
        if from < to {
            &self.ue_ue[p][k][x]
        } else {
            &self.ue_ue[p][x][k]
        }
    }

    pub fn freq(&self) -> &FreqChannelSet {
        &self.freq
    }

    /// CSV rows `trial,link,tap,re,im` for every stored link.
    pub fn dump_csv<W: Write>(&self, out: &mut csv::Writer<W>, trial: u64) -> Result<()> {
        let mut row = |link: String, t: &Taps| -> csv::Result<()> {
            for (b, v) in t.iter().enumerate() {
                out.write_record(&[
                    trial.to_string(),
                    link.clone(),
                    b.to_string(),
                    format!("{:e}", v.re),
                    format!("{:e}", v.im),
                ])?;
            }
            Ok(())
        };
        let wrap = |e: csv::Error| Error::InvalidParameter(format!("channel dump: {e}"));
        for (l, per_enb) in self.enb_ue.iter().enumerate() {
            for (j, per_ant) in per_enb.iter().enumerate() {
                for (r, t) in per_ant.iter().enumerate() {
                    row(format!("enb{j}-ue{l}.{r}"), t).map_err(wrap)?;
                }
            }
        }
        for q in 0..self.n_ue {
            for l in q + 1..self.n_ue {
                let grid = &self.ue_ue[pair_index(q, l, self.n_ue)];
                for (k, r) in grid.iter().enumerate() {
                    for (x, t) in r.iter().enumerate() {
                        row(format!("ue{q}.{k}-ue{l}.{x}"), t).map_err(wrap)?;
                    }
                }
            }
        }
        Ok(())
    }
}

impl FreqChannelSet {
    pub fn grid(&self) -> usize {
        self.n
    }

    /// `H(m)` between eNB antenna `j` and antenna `r` of UE `l`.
    pub fn enb_ue(&self, l: usize, j: usize, r: usize, m: usize) -> C64 {
        self.enb_ue[l][j][r][m]
    }

    /// Downlink row `H^d_l(m)` (1 × Ne) seen by antenna `r` of UE `l`.
    pub fn downlink_row(&self, l: usize, r: usize, m: usize) -> Vec<C64> {
        self.enb_ue[l].iter().map(|per| per[r][m]).collect()
    }

    /// Uplink column `H^u_l(m)` (Ne × 1) from antenna `r` of UE `l`.
    /// Same entries as [`Self::downlink_row`] by reciprocity.
    pub fn uplink_col(&self, l: usize, r: usize, m: usize) -> Vec<C64> {
        self.downlink_row(l, r, m)
    }

    /// `H(m)` from antenna `k` of UE `from` to antenna `x` of UE `to`.
    pub fn ue_ue(&self, from: usize, k: usize, to: usize, x: usize, m: usize) -> C64 {
        let p = pair_index(from, to, self.n_ue);
        if from < to {
            self.ue_ue[p][k][x][m]
        } else {
            self.ue_ue[p][x][k][m]
        }
    }
}

/// Accumulate `gain · (h * s)` into `acc`, linear convolution truncated to
/// the length of `s`.
pub fn convolve_into(acc: &mut [C64], s: &[C64], h: &[C64], gain: C64) {
    debug_assert_eq!(acc.len(), s.len());
    for (b, &hb) in h.iter().enumerate() {
        if hb == ZERO {
            continue;
        }
        let g = hb * gain;
        for t in b..s.len() {
            acc[t] += g * s[t - b];
        }
    }
}

/// Add CN(0, n0) noise to every sample.
pub fn add_noise(sig: &mut TimeSlotSignal, rng: &mut RngStream, n0: f64) -> Result<()> {
    if n0 == 0.0 {
        return Ok(());
    }
    let noise = complex_gaussian(rng, sig.len(), n0)?;
    for (s, w) in sig.samples.iter_mut().zip(noise) {
        *s += w;
    }
    Ok(())
}

/// `y = h * s + n` over the CP-extended symbol.
pub fn apply_channel(
    sig: &TimeSlotSignal,
    h: &[C64],
    rng: &mut RngStream,
    n0: f64,
) -> Result<TimeSlotSignal> {
    let memory = h.len().saturating_sub(1);
    if sig.cp_len < memory {
        return Err(Error::CyclicPrefixTooShort {
            cp_len: sig.cp_len,
            memory,
        });
    }
    let mut out = TimeSlotSignal::zeros(sig.body_len(), sig.cp_len);
    convolve_into(&mut out.samples, &sig.samples, h, C64::new(1.0, 0.0));
    add_noise(&mut out, rng, n0)?;
    Ok(out)
}

/// Frequency responses of a realization.
pub fn freq_response(h: &ChannelRealization) -> &FreqChannelSet {
    h.freq()
}
