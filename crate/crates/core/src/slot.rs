//! One SC-FDMA slot of the full-duplex cell, simulated in the time domain.
//!
//! Every transmitter (the eNB for the downlink set, each UE in the uplink set)
//! builds its SC-FDMA symbol with cyclic prefix, passes its power amplifier
//! and adds transmit noise. Each receiver sees the multipath sum of all
//! signals that reach it plus its own residual self-interference, and decodes
//! its stream. Signal components are tracked separately for metering.
//!
//! Geometry: UE `l` sees the eNB at `ψ_l`. Another UE `q` appears to `l` at
//! `ψ_q`, and `q` radiates toward `l` at `ψ_l`. Each UE's beam has unit gain at
//! its own `ψ` and nulls at the others, so UE-to-UE paths are nulled on both
//! ends.

use crate::antenna::{
    clms_train, root_music_doa, simulate_snapshots, steering_matrix, steering_vector,
    BeamformerState,
};
use crate::channel::{add_noise, convolve_into, draw_channels, ChannelRealization};
use crate::config::{DoaMode, ScenarioConfig};
use crate::downlink::{
    build_precoders, mmse_bias, mmse_equalize_diag, precode_and_superpose, ue_post_process,
    PrecoderSet,
};
use crate::error::{Error, Result};
use crate::impairments::{add_self_interference, pa_apply, tx_noise, PaModel, SiChannel, SicMode, TxChain};
use crate::modem::{
    dft_despread, dft_spread, map_subcarriers, qam_demap_hard, qam_map, strip_cp_and_dft,
    to_time_with_cp, Allocation, Qam, TimeSlotSignal,
};
use crate::numerics::{db_to_lin, mean_power, CVector, Purpose, RngStream, C64};
use crate::uplink::{mmse_detect_tone, ssic_oo_detect, UplinkTone};

use rand::Rng;

/// Slots per trial reserved in the stream key space.
const SLOTS_PER_TRIAL: u64 = 4;

/// Stream index of `slot` within `trial`.
pub fn stream_key(trial: u64, slot: u64) -> u64 {
    trial * SLOTS_PER_TRIAL + slot
}

/// Post-equalizer SINR of an estimate: `x̂ = μx + e`, SINR = |μ|²‖x‖²/‖e‖².
pub fn post_equalizer_sinr(xhat: &[C64], x: &[C64]) -> f64 {
    let px: f64 = x.iter().map(|v| v.norm_sqr()).sum();
    if px == 0.0 {
        return 0.0;
    }
    let mu: C64 = xhat.iter().zip(x).map(|(a, b)| a * b.conj()).sum::<C64>() / px;
    let err: f64 = xhat.iter().zip(x).map(|(a, b)| (a - mu * b).norm_sqr()).sum();
    let sig = mu.norm_sqr() * px;
    if err == 0.0 {
        if sig == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        sig / err
    }
}

/// Everything drawn once per Monte Carlo trial and shared by its slots.
#[derive(Debug, Clone)]
pub struct TrialContext {
    pub channels: ChannelRealization,
    pub beams: Vec<BeamformerState>,
    /// Angles the beams were built from (true or estimated), per UE:
    /// `[look, nulls…]` in UE order.
    pub beam_angles: Vec<Vec<f64>>,
    pub enb_si: SiChannel,
    pub ue_si: Vec<SiChannel>,
}

impl TrialContext {
    pub fn draw(cfg: &ScenarioConfig, seed: u64, trial: u64) -> Result<Self> {
        let key = stream_key(trial, 0);
        let mut ch_rng = RngStream::for_trial(seed, key, Purpose::Channel);
        let channels = draw_channels(&mut ch_rng, cfg)?;
        let mut snap_rng = RngStream::for_trial(seed, key, Purpose::Snapshots);
        let mut beams = Vec::with_capacity(cfg.n_ue);
        let mut beam_angles = Vec::with_capacity(cfg.n_ue);
        for l in 0..cfg.n_ue {
            let (state, angles) = train_ue_beam(cfg, l, &mut snap_rng)?;
            beams.push(state);
            beam_angles.push(angles);
        }
        let mut si_rng = RngStream::for_trial(seed, key, Purpose::SiChannel);
        let enb_si = SiChannel::draw(
            &mut si_rng,
            cfg.enb_antennas,
            cfg.si_taps,
            cfg.si_cross_rel_db,
            cfg.si_to_signal_db,
        )?;
        let ue_si = (0..cfg.n_ue)
            .map(|_| {
                SiChannel::draw(
                    &mut si_rng,
                    cfg.ue_antennas,
                    cfg.si_taps,
                    cfg.si_cross_rel_db,
                    cfg.si_to_signal_db,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            channels,
            beams,
            beam_angles,
            enb_si,
            ue_si,
        })
    }

    pub fn weights(&self, l: usize) -> &CVector {
        &self.beams[l].weights
    }
}

/// True directions for UE `l`: the eNB first, then every other UE.
pub fn true_directions(cfg: &ScenarioConfig, l: usize) -> Vec<f64> {
    let mut a = vec![cfg.enb_doa_deg[l].to_radians()];
    a.extend(
        (0..cfg.n_ue)
            .filter(|&q| q != l)
            .map(|q| cfg.enb_doa_deg[q].to_radians()),
    );
    a
}

/// Match estimated angles to the nominal directions, nearest first.
pub fn associate(estimates: &[f64], nominal: &[f64]) -> Vec<f64> {
    let mut free: Vec<f64> = estimates.to_vec();
    let mut out = Vec::with_capacity(nominal.len());
    for &n in nominal {
        let (i, _) = free
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - n).abs().total_cmp(&(b.1 - n).abs()))
            .expect("as many estimates as directions");
        out.push(free.remove(i));
    }
    out
}

/// Train UE `l`'s beam on a snapshot record of the eNB and the other UEs.
/// Returns the state and the constraint angles used.
pub fn train_ue_beam(
    cfg: &ScenarioConfig,
    l: usize,
    rng: &mut RngStream,
) -> Result<(BeamformerState, Vec<f64>)> {
    let truth = true_directions(cfg, l);
    let noise = db_to_lin(-cfg.snapshot_snr_db);
    let y = simulate_snapshots(
        rng,
        &truth,
        cfg.ue_antennas,
        cfg.element_spacing_wl,
        noise,
        cfg.snapshots,
    )?;
    let angles = match cfg.doa_mode {
        DoaMode::Oracle => truth,
        DoaMode::Estimated => {
            let est = root_music_doa(&y, truth.len(), cfg.element_spacing_wl)?;
            associate(&est, &truth)
        }
    };
    let c = steering_matrix(&angles, cfg.ue_antennas, cfg.element_spacing_wl);
    let state = clms_train(&c, &y, cfg.clms_mu, cfg.clms_iters)?;
    Ok((state, angles))
}

/// Which UEs receive and which transmit in a slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotPlan {
    pub downlink: Vec<usize>,
    pub uplink: Vec<usize>,
}

impl SlotPlan {
    pub fn full_duplex(k: usize) -> Self {
        Self {
            downlink: (0..k).collect(),
            uplink: (0..k).collect(),
        }
    }
}

/// How `snr_db` maps to noise levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseReference {
    /// Per receiver and slot: mean received symbol energy per subcarrier
    /// (after precoder and beam gains) over N0.
    Received,
    /// `N0 = 1/snr` everywhere: unit transmit power per subcarrier over N0
    /// for unit-power channels.
    Transmit,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotParams {
    /// `f64::INFINITY` gives a noiseless slot.
    pub snr_db: f64,
    pub reference: NoiseReference,
    pub sic_mode: SicMode,
    pub si_enabled: bool,
    pub genie_sic: bool,
}

impl SlotParams {
    pub fn from_config(cfg: &ScenarioConfig, snr_db: f64, reference: NoiseReference) -> Self {
        Self {
            snr_db,
            reference,
            sic_mode: cfg.sic_mode,
            si_enabled: cfg.si_enabled,
            genie_sic: cfg.genie_sic,
        }
    }

    fn inv_snr(&self) -> f64 {
        if self.snr_db == f64::INFINITY {
            0.0
        } else {
            db_to_lin(-self.snr_db)
        }
    }
}

/// Per-UE decoding result.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkResult {
    pub ue: usize,
    pub bits: usize,
    pub errors: usize,
    pub sinr: f64,
    pub n0: f64,
}

/// Mean powers per sample of the signal components at a receiver (after
/// combining at a UE, per antenna at the eNB).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Meter {
    pub desired: f64,
    pub cross_link: f64,
    pub self_interference: f64,
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlotOutcome {
    pub downlink: Vec<LinkResult>,
    pub uplink: Vec<LinkResult>,
    pub ue_meters: Vec<(usize, Meter)>,
    pub enb_meter: Option<Meter>,
    pub singular_tones: usize,
}

struct Modem {
    qam: Qam,
    alloc: Allocation,
}

impl Modem {
    fn new(cfg: &ScenarioConfig) -> Result<Self> {
        Ok(Self {
            qam: Qam::new(cfg.mod_order)?,
            alloc: Allocation::with_style(cfg.n_subcarriers, cfg.n_alloc, cfg.allocation)?,
        })
    }
}

struct UeTx {
    symbols: Vec<C64>,
    spread: Vec<C64>,
    bits: Vec<bool>,
    chains: Vec<TxChain>,
}

fn random_bits(rng: &mut RngStream, n: usize) -> Vec<bool> {
    (0..n).map(|_| rng.random()).collect()
}

fn transmit_chain(
    linear: TimeSlotSignal,
    pa: Option<&PaModel>,
    noise: Option<(&mut RngStream, f64)>,
) -> Result<TxChain> {
    let mut chain = TxChain::ideal(linear);
    if let Some(pa) = pa {
        let mut nl = pa_apply(&chain.linear, pa);
        for (a, b) in nl.samples.iter_mut().zip(&chain.linear.samples) {
            *a -= b;
        }
        chain.nonlinear = nl;
    }
    if let Some((rng, evm_db)) = noise {
        chain.noise = tx_noise(rng, &chain.linear, evm_db)?;
    }
    Ok(chain)
}

/// Effective downlink row of UE `l` on grid tone `m`: the eNB-to-combiner
/// response `Σ_x w_x* α_x(ψ_l) H_{j,l,x}(m)` per eNB antenna `j`. By
/// reciprocity this is also UE `l`'s effective uplink column.
pub fn effective_row(cfg: &ScenarioConfig, ctx: &TrialContext, l: usize, m: usize) -> Vec<C64> {
    let f = ctx.channels.freq();
    let w = ctx.weights(l);
    let a = steering_vector(
        cfg.enb_doa_deg[l].to_radians(),
        cfg.ue_antennas,
        cfg.element_spacing_wl,
    );
    (0..cfg.enb_antennas)
        .map(|j| {
            (0..cfg.ue_antennas)
                .map(|x| w[x].conj() * a[x] * f.enb_ue(l, j, x, m))
                .sum()
        })
        .collect()
}

fn slice_block(qam: &Qam, xhat: &[C64]) -> Vec<C64> {
    xhat.iter().map(|&v| qam.slice(v)).collect()
}

fn count_errors(a: &[bool], b: &[bool]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

fn combine_into(acc: &mut TimeSlotSignal, per_antenna: &[TimeSlotSignal], w: &CVector) {
    for (y, wk) in per_antenna.iter().zip(w.iter()) {
        let g = wk.conj();
        for (o, &v) in acc.samples.iter_mut().zip(&y.samples) {
            *o += g * v;
        }
    }
}

/// Simulate one slot. Downlink UEs decode the eNB's precoded streams; the
/// eNB decodes the uplink UEs with SSIC-OO.
pub fn run_slot(
    cfg: &ScenarioConfig,
    ctx: &TrialContext,
    plan: &SlotPlan,
    params: &SlotParams,
    seed: u64,
    trial: u64,
    slot: u64,
) -> Result<SlotOutcome> {
    let modem = Modem::new(cfg)?;
    let n = cfg.n_subcarriers;
    let cp = cfg.cp_len;
    let key = stream_key(trial, slot);
    let mut dl_bits_rng = RngStream::for_trial(seed, key, Purpose::DownlinkBits);
    let mut ul_bits_rng = RngStream::for_trial(seed, key, Purpose::UplinkBits);
    let mut ue_noise_rng = RngStream::for_trial(seed, key, Purpose::UeNoise);
    let mut enb_noise_rng = RngStream::for_trial(seed, key, Purpose::EnbNoise);
    let mut tx_noise_rng = RngStream::for_trial(seed, key, Purpose::TxNoise);
    let pa = if cfg.pa_enabled {
        Some(PaModel::new(cfg.pa_am, cfg.pa_pm, cfg.pa_backoff_db)?)
    } else {
        None
    };
    let evm = cfg.tx_noise_enabled.then_some(cfg.tx_evm_db);
    let bits_per_ue = cfg.n_alloc * modem.qam.bits_per_symbol();
    let inv_snr = params.inv_snr();
    let d = cfg.element_spacing_wl;
    let nr = cfg.ue_antennas;
    let ne = cfg.enb_antennas;
    let psi: Vec<f64> = cfg.enb_doa_deg.iter().map(|a| a.to_radians()).collect();
    for &l in plan.downlink.iter().chain(&plan.uplink) {
        if l >= cfg.n_ue {
            return Err(Error::IndexOutOfRange { index: l, len: cfg.n_ue });
        }
    }

    // eNB transmitter.
    let mut dl_symbols = Vec::new();
    let mut dl_bits = Vec::new();
    let mut precoders: Option<PrecoderSet> = None;
    let mut enb_chains: Vec<TxChain> = Vec::new();
    if !plan.downlink.is_empty() {
        let allocs = vec![modem.alloc.clone(); plan.downlink.len()];
        let pre = build_precoders(
            &allocs,
            |c, m| effective_row(cfg, ctx, plan.downlink[c], m),
            cfg.power_policy,
            1.0,
            inv_snr,
        )?;
        let mut spread = Vec::with_capacity(plan.downlink.len());
        for _ in &plan.downlink {
            let b = random_bits(&mut dl_bits_rng, bits_per_ue);
            let x = qam_map(&b, &modem.qam)?;
            spread.push(dft_spread(&x));
            dl_symbols.push(x);
            dl_bits.push(b);
        }
        let grids = precode_and_superpose(&spread, &pre, &allocs, ne)?;
        for g in grids {
            let s = to_time_with_cp(&g, cp, cfg.channel_taps)?;
            let noise = evm.map(|e| (&mut tx_noise_rng, e));
            enb_chains.push(transmit_chain(s, pa.as_ref(), noise)?);
        }
        precoders = Some(pre);
    }

    // UE transmitters.
    let mut ue_tx: Vec<Option<UeTx>> = (0..cfg.n_ue).map(|_| None).collect();
    for &i in &plan.uplink {
        let b = random_bits(&mut ul_bits_rng, bits_per_ue);
        let x = qam_map(&b, &modem.qam)?;
        let spread = dft_spread(&x);
        let grid = map_subcarriers(&spread, &modem.alloc)?;
        let s = to_time_with_cp(&grid, cp, cfg.channel_taps)?;
        let distorted = match &pa {
            Some(pa) => pa_apply(&s, pa),
            None => s.clone(),
        };
        let w = ctx.weights(i);
        let mut chains = Vec::with_capacity(nr);
        for k in 0..nr {
            let g = w[k].conj();
            let linear = s.scaled(g);
            let mut nonlinear = distorted.scaled(g);
            for (a, b) in nonlinear.samples.iter_mut().zip(&linear.samples) {
                *a -= b;
            }
            let noise = match evm {
                Some(e) => tx_noise(&mut tx_noise_rng, &linear, e)?,
                None => TimeSlotSignal::zeros(s.body_len(), cp),
            };
            chains.push(TxChain {
                linear,
                nonlinear,
                noise,
            });
        }
        ue_tx[i] = Some(UeTx {
            symbols: x,
            spread,
            bits: b,
            chains,
        });
    }

    let len = n + cp;
    let zeros = || TimeSlotSignal::zeros(n, cp);

    // Downlink receivers.
    let mut downlink = Vec::new();
    let mut ue_meters = Vec::new();
    if let Some(pre) = &precoders {
        let radiated: Vec<TimeSlotSignal> = enb_chains.iter().map(TxChain::radiated).collect();
        for (c, &l) in plan.downlink.iter().enumerate() {
            let w = ctx.weights(l);
            let a_enb = steering_vector(psi[l], nr, d);
            let mut desired = vec![zeros(); nr];
            let mut xlink = vec![zeros(); nr];
            for x in 0..nr {
                for (j, s) in radiated.iter().enumerate() {
                    convolve_into(
                        &mut desired[x].samples,
                        &s.samples,
                        ctx.channels.enb_ue_taps(l, j, x),
                        a_enb[x],
                    );
                }
            }
            for &q in &plan.uplink {
                if q == l {
                    continue;
                }
                let tx = ue_tx[q].as_ref().expect("uplink UE transmitted");
                let a_arr = steering_vector(psi[q], nr, d);
                let a_dep = steering_vector(psi[l], nr, d);
                for x in 0..nr {
                    for (k, ch) in tx.chains.iter().enumerate() {
                        let r = ch.radiated();
                        convolve_into(
                            &mut xlink[x].samples,
                            &r.samples,
                            ctx.channels.ue_ue_taps(q, k, l, x),
                            a_arr[x] * a_dep[k],
                        );
                    }
                }
            }
            let mut si = vec![zeros(); nr];
            let n0 = match params.reference {
                NoiseReference::Received => {
                    let mean_e2 = modem
                        .alloc
                        .indices()
                        .iter()
                        .map(|&m| pre.effective_gain(c, m).powi(2))
                        .sum::<f64>()
                        / cfg.n_alloc as f64;
                    mean_e2 * inv_snr
                }
                NoiseReference::Transmit => inv_snr,
            };
            if params.si_enabled {
                if let Some(tx) = ue_tx[l].as_ref() {
                    let mut rx: Vec<TimeSlotSignal> = (0..nr)
                        .map(|x| {
                            let mut s = desired[x].clone();
                            s.add_assign(&xlink[x]);
                            s
                        })
                        .collect();
                    let before = rx.clone();
                    add_self_interference(
                        &mut rx,
                        &tx.chains,
                        &ctx.ue_si[l],
                        params.sic_mode,
                        n0 * db_to_lin(cfg.sic_floor_db),
                    )?;
                    for x in 0..nr {
                        for t in 0..len {
                            si[x].samples[t] = rx[x].samples[t] - before[x].samples[t];
                        }
                    }
                }
            }
            let mut comb_desired = zeros();
            combine_into(&mut comb_desired, &desired, w);
            let mut comb_xlink = zeros();
            combine_into(&mut comb_xlink, &xlink, w);
            let mut comb_si = zeros();
            combine_into(&mut comb_si, &si, w);
            let mut noise = zeros();
            add_noise(&mut noise, &mut ue_noise_rng, n0)?;
            ue_meters.push((
                l,
                Meter {
                    desired: mean_power(&comb_desired.samples),
                    cross_link: mean_power(&comb_xlink.samples),
                    self_interference: mean_power(&comb_si.samples),
                    noise: mean_power(&noise.samples),
                },
            ));
            let mut y = comb_desired;
            y.add_assign(&comb_xlink);
            y.add_assign(&comb_si);
            y.add_assign(&noise);

            let yf = strip_cp_and_dft(&y, n)?;
            let ybar: Vec<C64> = modem.alloc.indices().iter().map(|&m| yf[m]).collect();
            let u: Vec<C64> = modem.alloc.indices().iter().map(|&m| pre.u(c, m)).collect();
            let e: Vec<C64> = modem
                .alloc
                .indices()
                .iter()
                .map(|&m| C64::new(pre.effective_gain(c, m), 0.0))
                .collect();
            let yhat = ue_post_process(&ybar, &u)?;
            let eq = mmse_equalize_diag(&yhat, &e, n0)?;
            let bias = mmse_bias(&e, n0);
            let gamma = bias.iter().sum::<f64>() / bias.len() as f64;
            let scaled: Vec<C64> = if gamma > 0.0 {
                eq.iter().map(|v| v / gamma).collect()
            } else {
                eq
            };
            let xhat = dft_despread(&scaled);
            let rx_bits = qam_demap_hard(&xhat, &modem.qam);
            downlink.push(LinkResult {
                ue: l,
                bits: bits_per_ue,
                errors: count_errors(&rx_bits, &dl_bits[c]),
                sinr: post_equalizer_sinr(&xhat, &dl_symbols[c]),
                n0,
            });
        }
    }

    // Uplink receiver at the eNB.
    let mut uplink = Vec::new();
    let mut enb_meter = None;
    if !plan.uplink.is_empty() {
        let k = plan.uplink.len();
        let idx = modem.alloc.indices();
        // h_cols[c][t]: effective column of uplink UE c on allocated tone t.
        let h_cols: Vec<Vec<CVector>> = plan
            .uplink
            .iter()
            .map(|&i| {
                idx.iter()
                    .map(|&m| CVector::from_vec(effective_row(cfg, ctx, i, m)))
                    .collect()
            })
            .collect();
        let n0 = match params.reference {
            NoiseReference::Received => {
                let e: f64 = h_cols
                    .iter()
                    .flat_map(|c| c.iter().map(|h| h.norm_squared()))
                    .sum();
                e / (k * idx.len() * ne) as f64 * inv_snr
            }
            NoiseReference::Transmit => inv_snr,
        };
        let mut desired = vec![zeros(); ne];
        for j in 0..ne {
            for &i in &plan.uplink {
                let tx = ue_tx[i].as_ref().expect("uplink UE transmitted");
                let a_dep = steering_vector(psi[i], nr, d);
                for (kk, ch) in tx.chains.iter().enumerate() {
                    let r = ch.radiated();
                    convolve_into(
                        &mut desired[j].samples,
                        &r.samples,
                        ctx.channels.enb_ue_taps(i, j, kk),
                        a_dep[kk],
                    );
                }
            }
        }
        let mut rx = desired.clone();
        let mut si_power = 0.0;
        if params.si_enabled && !enb_chains.is_empty() {
            add_self_interference(
                &mut rx,
                &enb_chains,
                &ctx.enb_si,
                params.sic_mode,
                n0 * db_to_lin(cfg.sic_floor_db),
            )?;
            si_power = rx
                .iter()
                .zip(&desired)
                .map(|(a, b)| {
                    let diff: Vec<C64> =
                        a.samples.iter().zip(&b.samples).map(|(p, q)| p - q).collect();
                    mean_power(&diff)
                })
                .sum::<f64>()
                / ne as f64;
        }
        let mut noise_power = 0.0;
        for r in rx.iter_mut() {
            let before = r.clone();
            add_noise(r, &mut enb_noise_rng, n0)?;
            let diff: Vec<C64> = r
                .samples
                .iter()
                .zip(&before.samples)
                .map(|(p, q)| p - q)
                .collect();
            noise_power += mean_power(&diff) / ne as f64;
        }
        enb_meter = Some(Meter {
            desired: desired.iter().map(|s| mean_power(&s.samples)).sum::<f64>() / ne as f64,
            cross_link: 0.0,
            self_interference: si_power,
            noise: noise_power,
        });

        let freq: Vec<Vec<C64>> = rx
            .iter()
            .map(|r| strip_cp_and_dft(r, n))
            .collect::<Result<Vec<_>>>()?;
        let tones: Vec<UplinkTone> = idx
            .iter()
            .enumerate()
            .map(|(t, &m)| UplinkTone {
                y: CVector::from_iterator(ne, freq.iter().map(|f| f[m])),
                h: h_cols.iter().map(|c| c[t].clone()).collect(),
                n0,
            })
            .collect();

        // Block decisions used for cancellation: one MMSE pass over all
        // tones, despread, slice, and re-spread.
        let decisions: Vec<Vec<C64>> = if params.genie_sic {
            plan.uplink
                .iter()
                .map(|&i| ue_tx[i].as_ref().expect("tx").spread.clone())
                .collect()
        } else {
            (0..k)
                .map(|c| {
                    let dets = tones
                        .iter()
                        .map(|t| mmse_detect_tone(t, c))
                        .collect::<Result<Vec<_>>>()?;
                    let block = unbias(&dets.iter().map(|d| (d.estimate, d.gain)).collect::<Vec<_>>());
                    let sliced = slice_block(&modem.qam, &dft_despread(&block));
                    Ok(dft_spread(&sliced))
                })
                .collect::<Result<Vec<_>>>()?
        };

        let mut per_ue: Vec<Vec<(C64, f64)>> = vec![Vec::with_capacity(idx.len()); k];
        for (t, tone) in tones.iter().enumerate() {
            let out = ssic_oo_detect(tone, |c, _| decisions[c][t])?;
            for (c, d) in out.detections.iter().enumerate() {
                per_ue[c].push((d.estimate, d.gain));
            }
        }
        for (c, &i) in plan.uplink.iter().enumerate() {
            let tx = ue_tx[i].as_ref().expect("tx");
            let xhat = dft_despread(&unbias(&per_ue[c]));
            let rx_bits = qam_demap_hard(&xhat, &modem.qam);
            uplink.push(LinkResult {
                ue: i,
                bits: bits_per_ue,
                errors: count_errors(&rx_bits, &tx.bits),
                sinr: post_equalizer_sinr(&xhat, &tx.symbols),
                n0,
            });
        }
    }

    Ok(SlotOutcome {
        downlink,
        uplink,
        ue_meters,
        enb_meter,
        singular_tones: precoders.as_ref().map_or(0, PrecoderSet::singular_tones),
    })
}

/// Divide per-tone estimates by their mean MMSE gain.
fn unbias(est: &[(C64, f64)]) -> Vec<C64> {
    let gamma = est.iter().map(|e| e.1).sum::<f64>() / est.len().max(1) as f64;
    if gamma > 0.0 {
        est.iter().map(|e| e.0 / gamma).collect()
    } else {
        est.iter().map(|e| e.0).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ideal_cfg() -> ScenarioConfig {
        ScenarioConfig {
            pa_enabled: false,
            tx_noise_enabled: false,
            ..Default::default()
        }
    }

    fn noiseless() -> SlotParams {
        SlotParams {
            snr_db: f64::INFINITY,
            reference: NoiseReference::Received,
            sic_mode: SicMode::Full,
            si_enabled: true,
            genie_sic: false,
        }
    }

    #[test]
    fn sinr_measurement() {
        let x = vec![C64::new(1.0, 0.0), C64::new(-1.0, 0.0)];
        assert_eq!(post_equalizer_sinr(&x, &x), f64::INFINITY);
        let y = vec![C64::new(1.5, 0.5), C64::new(-1.5, 0.5)];
        // μ = 1.5, error power 0.5 over signal 4.5.
        assert!((post_equalizer_sinr(&y, &x) - 9.0).abs() < 1e-12);
    }

    #[test]
    fn association_nearest_first() {
        let est = vec![0.9, 0.2, -0.5];
        assert_eq!(associate(&est, &[0.18, 1.0, -0.4]), vec![0.2, 0.9, -0.5]);
    }

    #[test]
    fn noiseless_full_duplex_slot_is_error_free() {
        let cfg = ideal_cfg();
        let ctx = TrialContext::draw(&cfg, 7, 0).unwrap();
        let out = run_slot(&cfg, &ctx, &SlotPlan::full_duplex(2), &noiseless(), 7, 0, 0).unwrap();
        assert_eq!(out.downlink.len(), 2);
        assert_eq!(out.uplink.len(), 2);
        for r in out.downlink.iter().chain(&out.uplink) {
            assert_eq!(r.errors, 0, "{r:?}");
            assert!(r.sinr > 1e8, "{r:?}");
        }
        for (_, m) in &out.ue_meters {
            assert!(m.cross_link < 1e-3 * m.desired, "{m:?}");
            assert_eq!(m.self_interference, 0.0);
        }
    }

    #[test]
    fn no_cancellation_destroys_both_links() {
        let cfg = ScenarioConfig {
            sic_mode: SicMode::None,
            ..Default::default()
        };
        let ctx = TrialContext::draw(&cfg, 9, 1).unwrap();
        let params = SlotParams::from_config(&cfg, 30.0, NoiseReference::Received);
        let out = run_slot(&cfg, &ctx, &SlotPlan::full_duplex(2), &params, 9, 1, 0).unwrap();
        for r in out.downlink.iter().chain(&out.uplink) {
            let ber = r.errors as f64 / r.bits as f64;
            assert!(ber > 0.3, "{r:?}");
        }
    }

    #[test]
    fn half_duplex_plan_has_no_self_interference() {
        let cfg = ScenarioConfig::default();
        let ctx = TrialContext::draw(&cfg, 3, 0).unwrap();
        let plan = SlotPlan {
            downlink: vec![0],
            uplink: vec![],
        };
        let params = SlotParams::from_config(&cfg, 20.0, NoiseReference::Received);
        let out = run_slot(&cfg, &ctx, &plan, &params, 3, 0, 0).unwrap();
        assert!(out.uplink.is_empty() && out.enb_meter.is_none());
        assert_eq!(out.ue_meters[0].1.self_interference, 0.0);
        assert_eq!(out.ue_meters[0].1.cross_link, 0.0);
    }

    #[test]
    fn slots_are_deterministic() {
        let cfg = ScenarioConfig::default();
        let ctx = TrialContext::draw(&cfg, 5, 2).unwrap();
        let params = SlotParams::from_config(&cfg, 10.0, NoiseReference::Received);
        let a = run_slot(&cfg, &ctx, &SlotPlan::full_duplex(2), &params, 5, 2, 1).unwrap();
        let b = run_slot(&cfg, &ctx, &SlotPlan::full_duplex(2), &params, 5, 2, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lone_downlink_ue_is_served() {
        let cfg = ideal_cfg();
        let ctx = TrialContext::draw(&cfg, 4, 0).unwrap();
        let plan = SlotPlan {
            downlink: vec![1],
            uplink: vec![0],
        };
        let out = run_slot(&cfg, &ctx, &plan, &noiseless(), 4, 0, 0).unwrap();
        assert_eq!(out.downlink[0].ue, 1);
        assert_eq!(out.downlink[0].errors, 0);
        assert!(out.downlink[0].sinr > 1e8);
    }

    #[test]
    fn bad_plan_rejected() {
        let cfg = ideal_cfg();
        let ctx = TrialContext::draw(&cfg, 1, 0).unwrap();
        let plan = SlotPlan {
            downlink: vec![5],
            uplink: vec![],
        };
        assert!(run_slot(&cfg, &ctx, &plan, &noiseless(), 1, 0, 0).is_err());
    }
}
