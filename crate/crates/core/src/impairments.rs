//! Transmitter and full-duplex impairments.
//!
//! The power amplifier follows the four-parameter Ghorbani AM/AM and AM/PM
//! curves. Its output is normalized so that its linear (Bussgang) part equals
//! the input, which keeps the desired-signal scale fixed and leaves the
//! distortion as an additive term.
//!
//! Self-interference at each receive chain has a self-talk part (the transmit
//! chain sharing the antenna) and cross-talk parts (the other transmit chains),
//! each carrying the linear, nonlinear and transmit-noise components of the
//! transmitted signal.

use serde::{Deserialize, Serialize};

use crate::channel::{convolve_into, Taps};
use crate::error::{ensure_len, Error, Result};
use crate::modem::TimeSlotSignal;
use crate::numerics::{complex_gaussian, db_to_lin, mean_power, RngStream, C64, ZERO};

pub const BOLTZMANN: f64 = 1.380649e-23;

pub const GHORBANI_AM: [f64; 4] = [8.1081, 1.5413, 6.5202, -0.0718];
pub const GHORBANI_PM: [f64; 4] = [4.6645, 2.0965, 10.88, -0.003];

/// Input back-off from the AM/AM peak. Chosen near the minimum of the
/// output EVM for SC-FDMA symbols under the default curves.
pub const DEFAULT_PA_BACKOFF_DB: f64 = 19.5;

/// `k_B · T · B` in watts.
pub fn thermal_noise_power(bandwidth_hz: f64, temp_k: f64) -> f64 {
    BOLTZMANN * temp_k * bandwidth_hz
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SicMode {
    None,
    LinearOnly,
    NlNoCtc,
    Full,
}

impl SicMode {
    pub const ALL: [SicMode; 4] = [
        SicMode::None,
        SicMode::LinearOnly,
        SicMode::NlNoCtc,
        SicMode::Full,
    ];

    fn cancels(self, c: Component) -> bool {
        use Component::*;
        match self {
            SicMode::None => false,
            SicMode::LinearOnly => matches!(c, SelfLinear | CrossLinear),
            SicMode::NlNoCtc => matches!(c, SelfLinear | CrossLinear | SelfNonlinear),
            SicMode::Full => true,
        }
    }
}

fn ghorbani(p: &[f64; 4], r: f64) -> f64 {
    let t = r.powf(p[1]);
    p[0] * t / (1.0 + p[2] * t) + p[3] * r
}

#[derive(Debug, Clone, PartialEq)]
pub struct PaModel {
    am: [f64; 4],
    pm: [f64; 4],
    backoff_db: f64,
    r_ref: f64,
}

impl PaModel {
    /// Validates that AM/AM rises monotonically up to its reference amplitude
    /// (the AM/AM peak, or 1 when the curve keeps rising up to 100).
    pub fn new(am: [f64; 4], pm: [f64; 4], backoff_db: f64) -> Result<Self> {
        if am.iter().chain(&pm).chain([&backoff_db]).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("PaModel::new"));
        }
        if am[1] <= 0.0 || pm[1] <= 0.0 {
            return Err(Error::InvalidParameter(
                "Ghorbani exponents must be positive".into(),
            ));
        }
        const STEPS: usize = 20_000;
        const R_MAX: f64 = 100.0;
        let grid = |i: usize| R_MAX * (i as f64 / STEPS as f64).powi(2);
        let (i_max, _) = (0..=STEPS)
            .map(|i| (i, ghorbani(&am, grid(i))))
            .fold((0, f64::NEG_INFINITY), |best, (i, a)| if a > best.1 { (i, a) } else { best });
        let r_ref = if i_max == STEPS { 1.0 } else { grid(i_max) };
        // Operating range: 40 dB below the reference amplitude up to it.
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=1000 {
            let r = r_ref * (0.01 + 0.99 * i as f64 / 1000.0);
            let a = ghorbani(&am, r);
            if !(a > prev) || r_ref <= 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "PA AM/AM is not increasing over [{:.4}, {r_ref:.4}]",
                    0.01 * r_ref
                )));
            }
            prev = a;
        }
        Ok(Self {
            am,
            pm,
            backoff_db,
            r_ref,
        })
    }

    pub fn ghorbani_default(backoff_db: f64) -> Self {
        Self::new(GHORBANI_AM, GHORBANI_PM, backoff_db).expect("default curves are valid")
    }

    pub fn am(&self, r: f64) -> f64 {
        ghorbani(&self.am, r)
    }

    pub fn pm(&self, r: f64) -> f64 {
        ghorbani(&self.pm, r)
    }

    pub fn backoff_db(&self) -> f64 {
        self.backoff_db
    }

    /// Input amplitude the back-off is measured from.
    pub fn reference_amplitude(&self) -> f64 {
        self.r_ref
    }
}

/// Raw curve output for samples already at the PA's input scale.
pub fn pa_curve(x: &[C64], pa: &PaModel) -> Vec<C64> {
    x.iter()
        .map(|&u| {
            let r = u.norm();
            if r == 0.0 {
                return ZERO;
            }
            C64::from_polar(pa.am(r), u.arg() + pa.pm(r))
        })
        .collect()
}

/// Drive the PA at `backoff_db` below its reference amplitude (RMS input) and
/// return the output rescaled so that its linear part equals `s`.
pub fn pa_apply(s: &TimeSlotSignal, pa: &PaModel) -> TimeSlotSignal {
    let p = mean_power(&s.samples);
    if p == 0.0 {
        return s.clone();
    }
    let g_in = pa.r_ref * db_to_lin(-pa.backoff_db).sqrt() / p.sqrt();
    let u: Vec<C64> = s.samples.iter().map(|&v| v * g_in).collect();
    let out = pa_curve(&u, pa);
    let num: C64 = out.iter().zip(&u).map(|(o, x)| o * x.conj()).sum();
    let den: f64 = u.iter().map(|x| x.norm_sqr()).sum();
    let c = num / den;
    if c.norm() == 0.0 {
        return TimeSlotSignal::zeros(s.body_len(), s.cp_len);
    }
    let k = 1.0 / (c * g_in);
    TimeSlotSignal {
        samples: out.into_iter().map(|v| v * k).collect(),
        cp_len: s.cp_len,
    }
}

/// White transmit noise at `evm_db` relative to the mean power of `s`.
pub fn tx_noise(rng: &mut RngStream, s: &TimeSlotSignal, evm_db: f64) -> Result<TimeSlotSignal> {
    let var = mean_power(&s.samples) * db_to_lin(evm_db);
    Ok(TimeSlotSignal {
        samples: complex_gaussian(rng, s.len(), var)?,
        cp_len: s.cp_len,
    })
}

/// Transmitted signal of one chain split into its components.
#[derive(Debug, Clone, PartialEq)]
pub struct TxChain {
    pub linear: TimeSlotSignal,
    pub nonlinear: TimeSlotSignal,
    pub noise: TimeSlotSignal,
}

impl TxChain {
    pub fn ideal(linear: TimeSlotSignal) -> Self {
        let z = TimeSlotSignal::zeros(linear.body_len(), linear.cp_len);
        Self {
            linear,
            nonlinear: z.clone(),
            noise: z,
        }
    }

    /// What leaves the antenna.
    pub fn radiated(&self) -> TimeSlotSignal {
        let mut s = self.linear.clone();
        s.add_assign(&self.nonlinear);
        s.add_assign(&self.noise);
        s
    }

    pub fn scaled(&self, g: C64) -> Self {
        Self {
            linear: self.linear.scaled(g),
            nonlinear: self.nonlinear.scaled(g),
            noise: self.noise.scaled(g),
        }
    }
}

/// Coupling between the transmit and receive chains of one transceiver.
#[derive(Debug, Clone, PartialEq)]
pub struct SiChannel {
    /// `[i]`: tx chain `i` to rx chain `i`.
    pub self_talk: Vec<Taps>,
    /// `[j][i]`: tx chain `j` to rx chain `i`; the diagonal is unused.
    pub cross_talk: Vec<Vec<Taps>>,
    pub si_to_signal_db: f64,
}

impl SiChannel {
    /// Rayleigh coupling taps; self-talk has unit average power and
    /// cross-talk sits `cross_rel_db` below it.
    pub fn draw(
        rng: &mut RngStream,
        chains: usize,
        taps: usize,
        cross_rel_db: f64,
        si_to_signal_db: f64,
    ) -> Result<Self> {
        if chains == 0 || taps == 0 {
            return Err(Error::InvalidParameter("empty SI channel".into()));
        }
        if cross_rel_db > 0.0 {
            return Err(Error::InvalidParameter(
                "cross-talk must not exceed self-talk".into(),
            ));
        }
        let var = 1.0 / taps as f64;
        let self_talk = (0..chains)
            .map(|_| complex_gaussian(rng, taps, var))
            .collect::<Result<Vec<_>>>()?;
        let cvar = var * db_to_lin(cross_rel_db);
        let cross_talk = (0..chains)
            .map(|j| {
                (0..chains)
                    .map(|i| {
                        if i == j {
                            Ok(vec![ZERO; taps])
                        } else {
                            complex_gaussian(rng, taps, cvar)
                        }
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            self_talk,
            cross_talk,
            si_to_signal_db,
        })
    }

    pub fn chains(&self) -> usize {
        self.self_talk.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Component {
    SelfLinear,
    SelfNonlinear,
    SelfNoise,
    CrossLinear,
    CrossNonlinear,
    CrossNoise,
}

const COMPONENTS: [Component; 6] = [
    Component::SelfLinear,
    Component::SelfNonlinear,
    Component::SelfNoise,
    Component::CrossLinear,
    Component::CrossNonlinear,
    Component::CrossNoise,
];

/// Received SI power per stage, averaged over receive chains.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SiReport {
    pub before: f64,
    pub residual: f64,
}

/// Add the residual self-interference left by `mode` to each receive chain.
///
/// Coupling is scaled so the linear SI power is `si_to_signal_db` above the
/// mean power already in `rx`. Whatever the mode cancels is suppressed to a
/// combined residual of `floor_power` per sample.
pub fn add_self_interference(
    rx: &mut [TimeSlotSignal],
    own_tx: &[TxChain],
    si: &SiChannel,
    mode: SicMode,
    floor_power: f64,
) -> Result<SiReport> {
    let n = si.chains();
    ensure_len("add_self_interference rx chains", n, rx.len())?;
    ensure_len("add_self_interference tx chains", n, own_tx.len())?;
    let len = rx[0].len();
    let cp = rx[0].cp_len;
    for c in rx.iter().chain(own_tx.iter().flat_map(|t| [&t.linear, &t.nonlinear, &t.noise])) {
        ensure_len("add_self_interference samples", len, c.len())?;
    }

    let one = C64::new(1.0, 0.0);
    // comps[i][c]: component c at rx chain i.
    let mut comps = vec![vec![vec![ZERO; len]; COMPONENTS.len()]; n];
    for (i, per_rx) in comps.iter_mut().enumerate() {
        for (j, tx) in own_tx.iter().enumerate() {
            let (h, base) = if i == j {
                (&si.self_talk[i], 0)
            } else {
                (&si.cross_talk[j][i], 3)
            };
            convolve_into(&mut per_rx[base], &tx.linear.samples, h, one);
            convolve_into(&mut per_rx[base + 1], &tx.nonlinear.samples, h, one);
            convolve_into(&mut per_rx[base + 2], &tx.noise.samples, h, one);
        }
    }

    let desired: f64 = rx.iter().map(|r| mean_power(&r.samples)).sum::<f64>() / n as f64;
    let linear: f64 = comps
        .iter()
        .map(|c| {
            let both: Vec<C64> = c[0].iter().zip(&c[3]).map(|(a, b)| a + b).collect();
            mean_power(&both)
        })
        .sum::<f64>()
        / n as f64;
    if linear == 0.0 || desired == 0.0 {
        return Ok(SiReport::default());
    }
    let gain = (db_to_lin(si.si_to_signal_db) * desired / linear).sqrt();

    let mut report = SiReport::default();
    for (r, per_rx) in rx.iter_mut().zip(&comps) {
        let mut kept = vec![ZERO; len];
        let mut cancelled = vec![ZERO; len];
        let mut any_cancelled = false;
        for (c, comp) in COMPONENTS.iter().zip(per_rx) {
            let dst = if mode.cancels(*c) {
                any_cancelled = true;
                &mut cancelled
            } else {
                &mut kept
            };
            for (d, v) in dst.iter_mut().zip(comp) {
                *d += v * gain;
            }
        }
        let total: Vec<C64> = kept.iter().zip(&cancelled).map(|(a, b)| a + b).collect();
        report.before += mean_power(&total) / n as f64;
        let pc = mean_power(&cancelled);
        let k = if any_cancelled && pc > 0.0 {
            (floor_power / pc).sqrt()
        } else {
            0.0
        };
        let residual: Vec<C64> = kept.iter().zip(&cancelled).map(|(a, b)| a + b * k).collect();
        report.residual += mean_power(&residual) / n as f64;
        for (s, v) in r.samples.iter_mut().zip(residual) {
            *s += v;
        }
    }
    debug_assert_eq!(rx[0].cp_len, cp);
    Ok(report)
}
