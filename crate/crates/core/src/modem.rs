//! SC-FDMA transmit/receive processing shared by both link directions.
//!
//! Chain: Gray-mapped QAM -> M-point DFT spreading -> subcarrier mapping ->
//! N-point IDFT -> cyclic prefix, and the mirror image on receive.
//!
//! Gray table (per quadrature axis, MSB first). For 16-QAM the first two bits
//! select the in-phase level and the last two the quadrature level:
//!
//! | bits | level |
//! |------|-------|
//! | 00   | -3    |
//! | 01   | -1    |
//! | 11   | +1    |
//! | 10   | +3    |
//!
//! Symbols are scaled by `1/sqrt(10)` (16-QAM), `1/sqrt(2)` (QPSK) or
//! `1/sqrt(42)` (64-QAM) for unit average energy.

use crate::error::{ensure_len, Error, Result};
use crate::numerics::{dft, idft, C64, ZERO};

/// Square Gray-mapped QAM constellation with unit average energy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Qam {
    order: usize,
    bits_per_axis: usize,
    levels: usize,
    scale: f64,
}

impl Qam {
    pub fn new(order: usize) -> Result<Self> {
        let bits_per_axis = match order {
            4 => 1,
            16 => 2,
            64 => 3,
            _ => {
                return Err(Error::InvalidParameter(format!(
                    "modulation order {order} not in {{4, 16, 64}}"
                )))
            }
        };
        let levels = 1 << bits_per_axis;
        let scale = (2.0 * (order as f64 - 1.0) / 3.0).sqrt().recip();
        Ok(Self {
            order,
            bits_per_axis,
            levels,
            scale,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn bits_per_symbol(&self) -> usize {
        2 * self.bits_per_axis
    }

    fn level(&self, bits: &[bool]) -> f64 {
        let gray = bits.iter().fold(0usize, |acc, &b| (acc << 1) | b as usize);
        // inverse Gray code
        let mut idx = gray;
        let mut shift = gray >> 1;
        while shift != 0 {
            idx ^= shift;
            shift >>= 1;
        }
        (2 * idx) as f64 - (self.levels - 1) as f64
    }

    fn axis_bits(&self, amplitude: f64, out: &mut Vec<bool>) {
        let max = (self.levels - 1) as f64;
        let idx = ((amplitude / self.scale + max) / 2.0).round().clamp(0.0, max) as usize;
        let gray = idx ^ (idx >> 1);
        for b in (0..self.bits_per_axis).rev() {
            out.push((gray >> b) & 1 == 1);
        }
    }

    /// All constellation points in bit-label order.
    pub fn points(&self) -> Vec<C64> {
        let nb = self.bits_per_symbol();
        (0..self.order)
            .map(|label| {
                let bits: Vec<bool> = (0..nb).rev().map(|b| (label >> b) & 1 == 1).collect();
                self.map_one(&bits)
            })
            .collect()
    }

    fn map_one(&self, bits: &[bool]) -> C64 {
        let (i_bits, q_bits) = bits.split_at(self.bits_per_axis);
        C64::new(self.level(i_bits), self.level(q_bits)) * self.scale
    }

    /// Nearest constellation point.
    pub fn slice(&self, y: C64) -> C64 {
        let mut bits = Vec::with_capacity(self.bits_per_symbol());
        self.axis_bits(y.re, &mut bits);
        self.axis_bits(y.im, &mut bits);
        self.map_one(&bits)
    }
}

pub fn qam_map(bits: &[bool], qam: &Qam) -> Result<Vec<C64>> {
    let nb = qam.bits_per_symbol();
    if bits.len() % nb != 0 {
        return Err(Error::InvalidParameter(format!(
            "{} bits is not a multiple of {nb} bits per symbol",
            bits.len()
        )));
    }
    Ok(bits.chunks(nb).map(|c| qam.map_one(c)).collect())
}

/// Minimum-distance hard decisions. For a square Gray constellation the
/// per-axis slicer is the exact nearest-point rule.
pub fn qam_demap_hard(y: &[C64], qam: &Qam) -> Vec<bool> {
    let mut out = Vec::with_capacity(y.len() * qam.bits_per_symbol());
    for s in y {
        qam.axis_bits(s.re, &mut out);
        qam.axis_bits(s.im, &mut out);
    }
    out
}

/// M-point unitary DFT spreading.
pub fn dft_spread(x: &[C64]) -> Vec<C64> {
    dft(x, x.len()).expect("length matches by construction")
}

/// Inverse of [`dft_spread`].
pub fn dft_despread(x: &[C64]) -> Vec<C64> {
    idft(x, x.len()).expect("length matches by construction")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum AllocationStyle {
    /// Contiguous block centred in the grid.
    Localized,
    /// Evenly spread tones across the grid.
    Interleaved,
}

/// Subcarrier allocation for one UE: data tone `m` is placed on grid tone
/// `indices[m]`. Equivalent to an N x M 0/1 matrix with exactly one 1 per
/// column and at most one per row; its transpose is the deallocation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Allocation {
    grid: usize,
    indices: Vec<usize>,
}

impl Allocation {
    pub fn new(grid: usize, indices: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; grid];
        for &i in &indices {
            if i >= grid {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    len: grid,
                });
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidParameter(format!(
                    "grid tone {i} allocated twice"
                )));
            }
        }
        Ok(Self { grid, indices })
    }

    pub fn with_style(grid: usize, tones: usize, style: AllocationStyle) -> Result<Self> {
        if tones > grid {
            return Err(Error::InvalidParameter(format!(
                "cannot allocate {tones} tones in a {grid}-tone grid"
            )));
        }
        let indices = match style {
            AllocationStyle::Localized => {
                let start = (grid - tones) / 2;
                (start..start + tones).collect()
            }
            AllocationStyle::Interleaved => (0..tones).map(|m| m * grid / tones.max(1)).collect(),
        };
        Self::new(grid, indices)
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn tones(&self) -> usize {
        self.indices.len()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// Dense N x M form, mainly for tests.
    pub fn matrix(&self) -> Vec<Vec<u8>> {
        let mut a = vec![vec![0u8; self.tones()]; self.grid];
        for (m, &g) in self.indices.iter().enumerate() {
            a[g][m] = 1;
        }
        a
    }
}

/// Scatter `M` spread symbols onto the `N`-tone grid; unselected tones are zero.
pub fn map_subcarriers(x: &[C64], alloc: &Allocation) -> Result<Vec<C64>> {
    ensure_len("map_subcarriers", alloc.tones(), x.len())?;
    let mut d = vec![ZERO; alloc.grid];
    for (&g, &v) in alloc.indices.iter().zip(x) {
        d[g] = v;
    }
    Ok(d)
}

/// Gather the allocated tones back out of an `N`-tone grid.
pub fn demap_subcarriers(y: &[C64], alloc: &Allocation) -> Result<Vec<C64>> {
    ensure_len("demap_subcarriers", alloc.grid, y.len())?;
    Ok(alloc.indices.iter().map(|&g| y[g]).collect())
}

/// One SC-FDMA symbol in time, cyclic prefix included.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSlotSignal {
    pub samples: Vec<C64>,
    pub cp_len: usize,
}

impl TimeSlotSignal {
    pub fn zeros(body_len: usize, cp_len: usize) -> Self {
        Self {
            samples: vec![ZERO; body_len + cp_len],
            cp_len,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn body_len(&self) -> usize {
        self.samples.len() - self.cp_len
    }

    pub fn body(&self) -> &[C64] {
        &self.samples[self.cp_len..]
    }

    pub fn scaled(&self, g: C64) -> Self {
        Self {
            samples: self.samples.iter().map(|&s| s * g).collect(),
            cp_len: self.cp_len,
        }
    }

    pub fn add_assign(&mut self, other: &TimeSlotSignal) {
        debug_assert_eq!(self.samples.len(), other.samples.len());
        for (a, b) in self.samples.iter_mut().zip(&other.samples) {
            *a += b;
        }
    }
}

/// N-point IDFT of the grid followed by a cyclic prefix of `cp_len` samples.
/// `channel_taps` is the channel length the prefix has to absorb.
pub fn to_time_with_cp(d: &[C64], cp_len: usize, channel_taps: usize) -> Result<TimeSlotSignal> {
    let memory = channel_taps.saturating_sub(1);
    if cp_len < memory {
        return Err(Error::CyclicPrefixTooShort { cp_len, memory });
    }
    let n = d.len();
    if cp_len > n {
        return Err(Error::InvalidParameter(format!(
            "cyclic prefix {cp_len} longer than symbol {n}"
        )));
    }
    let body = idft(d, n)?;
    let mut samples = Vec::with_capacity(n + cp_len);
    samples.extend_from_slice(&body[n - cp_len..]);
    samples.extend_from_slice(&body);
    Ok(TimeSlotSignal { samples, cp_len })
}

/// Drop the cyclic prefix and return the N-point DFT of the body.
pub fn strip_cp_and_dft(y: &TimeSlotSignal, n: usize) -> Result<Vec<C64>> {
    ensure_len("strip_cp_and_dft", n + y.cp_len, y.samples.len())?;
    dft(y.body(), n)
}
