//! eNB-side multi-user detection on one subcarrier.
//!
//! The received tone is `ȳ = Σ_i H_i x̄_i + n̄` with unit-power symbols. The
//! MMSE estimate of UE `l` treats the other UEs as coloured noise with
//! covariance `R = Σ_{i≠l} H_i H_i^H + N0 I`.

use crate::error::{ensure_len, Error, Result};
use crate::numerics::{solve, CMatrix, CVector, C64, ZERO};

/// One received subcarrier and the channels of the UEs sharing it.
#[derive(Debug, Clone, PartialEq)]
pub struct UplinkTone {
    pub y: CVector,
    /// Column `H_i(m)` per UE.
    pub h: Vec<CVector>,
    pub n0: f64,
}

impl UplinkTone {
    pub fn antennas(&self) -> usize {
        self.y.len()
    }

    pub fn users(&self) -> usize {
        self.h.len()
    }
}

/// `ȳ = Σ_i H_i x̄_i + n̄`.
pub fn assemble_tone(h: Vec<CVector>, x: &[C64], noise: &CVector, n0: f64) -> Result<UplinkTone> {
    ensure_len("assemble_tone symbols", h.len(), x.len())?;
    let mut y = noise.clone();
    for (hi, &xi) in h.iter().zip(x) {
        ensure_len("assemble_tone antennas", y.len(), hi.len())?;
        y += hi * xi;
    }
    Ok(UplinkTone { y, h, n0 })
}

/// Output of one linear detection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    /// Unbiased only after dividing by `gain`.
    pub estimate: C64,
    /// `h^H R^{-1} h / (1 + h^H R^{-1} h)`, the response to the UE's own symbol.
    pub gain: f64,
    /// The UE channels were linearly dependent at zero noise and the system
    /// was regularized with `1e-12` of its mean diagonal.
    pub regularized: bool,
}

fn interference_covariance(t: &UplinkTone, l: usize) -> (CMatrix, bool) {
    let ne = t.antennas();
    let mut r = CMatrix::identity(ne, ne) * C64::new(t.n0, 0.0);
    for (i, h) in t.h.iter().enumerate() {
        if i != l {
            r += h * h.adjoint();
        }
    }
    let scale = t.h.iter().map(|h| h.norm_squared()).sum::<f64>() / ne as f64;
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let regularize = t.n0 < 1e-12 * scale && t.users() - 1 < ne;
    if regularize {
        r += CMatrix::identity(ne, ne) * C64::new(1e-12 * scale, 0.0);
    }
    (r, regularize)
}

/// MMSE detection of `l` among the `active` UEs.
///
/// Evaluated through the push-through identity
/// `h_l^H R^{-1} ȳ / (1 + h_l^H R^{-1} h_l) = [(H^H H + N0 I)^{-1} H^H ȳ]_l`,
/// whose K × K system stays well conditioned as `N0 → 0`.
fn detect_among(t: &UplinkTone, y: &CVector, l: usize, active: &[usize]) -> Result<Detection> {
    let cols: Vec<CVector> = active.iter().map(|&i| t.h[i].clone()).collect();
    let h = CMatrix::from_columns(&cols);
    let k = active.len();
    let pos = active
        .iter()
        .position(|&i| i == l)
        .ok_or(Error::IndexOutOfRange { index: l, len: t.users() })?;
    let gram = h.adjoint() * &h;
    let scale = gram.diagonal().iter().map(|v| v.re).sum::<f64>() / k as f64;
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let mut g = &gram + CMatrix::identity(k, k) * C64::new(t.n0, 0.0);
    let mut regularized = false;
    let gi = match g.clone().try_inverse() {
        Some(gi) if t.n0 > 0.0 || svd_min_ratio(&gram) > 1e-12 => gi,
        _ => {
            regularized = true;
            g += CMatrix::identity(k, k) * C64::new(1e-12 * scale, 0.0);
            g.try_inverse()
                .ok_or_else(|| Error::InvalidParameter("singular uplink Gram matrix".into()))?
        }
    };
    let z = h.adjoint() * y;
    let estimate = (gi.row(pos) * z)[(0, 0)];
    let gain = (gi.row(pos) * gram.column(pos))[(0, 0)].re;
    Ok(Detection {
        estimate,
        gain,
        regularized,
    })
}

fn svd_min_ratio(g: &CMatrix) -> f64 {
    let s = g.singular_values();
    let max = s.max();
    if max == 0.0 {
        0.0
    } else {
        s.min() / max
    }
}

/// Linear MMSE estimate of UE `l` with every other UE as interference.
pub fn mmse_detect_tone(t: &UplinkTone, l: usize) -> Result<Detection> {
    if l >= t.users() {
        return Err(Error::IndexOutOfRange { index: l, len: t.users() });
    }
    let all: Vec<usize> = (0..t.users()).collect();
    detect_among(t, &t.y, l, &all)
}

/// `h^H R^{-1} ȳ` without the `1/(1 + h^H R^{-1} h)` scaling.
pub fn mmse_detect_tone_unscaled(t: &UplinkTone, l: usize) -> Result<C64> {
    if l >= t.users() {
        return Err(Error::IndexOutOfRange { index: l, len: t.users() });
    }
    let (r, _) = interference_covariance(t, l);
    let rih = solve(&r, &t.h[l])?;
    Ok(rih.dotc(&t.y))
}

/// `h^H ȳ / (‖h‖² + N0)` for a UE alone on the tone.
pub fn mrc_detect(h: &CVector, y: &CVector, n0: f64) -> Detection {
    let p = h.norm_squared();
    let d = p + n0;
    if d == 0.0 {
        return Detection { estimate: ZERO, gain: 0.0, regularized: false };
    }
    Detection {
        estimate: h.dotc(y) / d,
        gain: p / d,
        regularized: false,
    }
}

/// Per-UE results of successive cancellation on one tone.
#[derive(Debug, Clone, PartialEq)]
pub struct SsicOutput {
    pub detections: Vec<Detection>,
    /// UEs in detection order.
    pub order: Vec<usize>,
}

/// Successive interference cancellation with optimal ordering.
///
/// Each pass detects the remaining UE with the largest `‖H_i‖²` by MMSE,
/// asks `decide(l, detection)` for the symbol to cancel, and subtracts
/// `H_l · decision`. The last UE is detected by MRC.
pub fn ssic_oo_detect<F>(t: &UplinkTone, mut decide: F) -> Result<SsicOutput>
where
    F: FnMut(usize, &Detection) -> C64,
{
    let k = t.users();
    if k == 0 {
        return Err(Error::InvalidParameter("SSIC on a tone without UEs".into()));
    }
    let mut remaining: Vec<usize> = (0..k).collect();
    let mut y = t.y.clone();
    let mut detections = vec![
        Detection { estimate: ZERO, gain: 0.0, regularized: false };
        k
    ];
    let mut order = Vec::with_capacity(k);
    while remaining.len() > 1 {
        let (pos, &l) = remaining
            .iter()
            .enumerate()
            .max_by(|a, b| t.h[*a.1].norm_squared().total_cmp(&t.h[*b.1].norm_squared()))
            .expect("non-empty");
        let det = detect_among(t, &y, l, &remaining)?;
        let symbol = decide(l, &det);
        y -= &t.h[l] * symbol;
        detections[l] = det;
        order.push(l);
        remaining.remove(pos);
    }
    let last = remaining[0];
    detections[last] = mrc_detect(&t.h[last], &y, t.n0);
    order.push(last);
    Ok(SsicOutput { detections, order })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modem::Qam;
    use crate::numerics::{complex_gaussian, Purpose, RngStream};

    fn random_h(rng: &mut RngStream, k: usize, ne: usize) -> Vec<CVector> {
        (0..k)
            .map(|_| CVector::from_vec(complex_gaussian(rng, ne, 1.0).unwrap()))
            .collect()
    }

    #[test]
    fn assemble_cases() {
        let mut rng = RngStream::new(1, Purpose::Test as u64);
        let h = random_h(&mut rng, 1, 4);
        let x = [C64::new(0.3, -0.2)];
        let t = assemble_tone(h.clone(), &x, &CVector::zeros(4), 0.0).unwrap();
        assert_eq!(t.y, &h[0] * x[0]);
        let n = CVector::from_vec(complex_gaussian(&mut rng, 4, 1.0).unwrap());
        let t = assemble_tone(random_h(&mut rng, 2, 4), &[ZERO, ZERO], &n, 1.0).unwrap();
        assert_eq!(t.y, n);
        assert!(assemble_tone(h, &[ZERO, ZERO], &n, 1.0).is_err());
    }

    #[test]
    fn single_user_mmse_is_scaled_mrc() {
        let mut rng = RngStream::new(2, Purpose::Test as u64);
        let h = random_h(&mut rng, 1, 4);
        let n = CVector::from_vec(complex_gaussian(&mut rng, 4, 0.3).unwrap());
        let t = assemble_tone(h.clone(), &[C64::new(1.0, 1.0)], &n, 0.3).unwrap();
        let d = mmse_detect_tone(&t, 0).unwrap();
        let m = mrc_detect(&h[0], &t.y, 0.3);
        assert!((d.estimate - m.estimate).norm() < 1e-12);
        assert!((d.gain - m.gain).abs() < 1e-12);
    }

    #[test]
    fn zero_noise_limit_is_zero_forcing() {
        let mut rng = RngStream::new(3, Purpose::Test as u64);
        for n0 in [0.0, 1e-10] {
            let h = random_h(&mut rng, 2, 4);
            // Response to UE 1's symbol alone.
            let t = assemble_tone(h.clone(), &[ZERO, C64::new(1.0, 0.0)], &CVector::zeros(4), n0).unwrap();
            let d = mmse_detect_tone(&t, 0).unwrap();
            assert!(d.estimate.norm() < 1e-6, "{n0}: {}", d.estimate);
            assert!(!d.regularized);
            let t = assemble_tone(h, &[C64::new(1.0, 0.0), ZERO], &CVector::zeros(4), n0).unwrap();
            let d = mmse_detect_tone(&t, 0).unwrap();
            assert!((d.estimate - C64::new(1.0, 0.0)).norm() < 1e-6);
        }
    }

    #[test]
    fn colinear_users_at_zero_noise_are_regularized() {
        let mut rng = RngStream::new(10, Purpose::Test as u64);
        let h = random_h(&mut rng, 1, 4);
        let h2 = vec![h[0].clone(), &h[0] * C64::new(0.0, 2.0)];
        let t = assemble_tone(h2, &[C64::new(1.0, 0.0), ZERO], &CVector::zeros(4), 0.0).unwrap();
        let d = mmse_detect_tone(&t, 0).unwrap();
        assert!(d.regularized);
        assert!(d.estimate.re.is_finite() && d.estimate.im.is_finite());
    }

    #[test]
    fn matches_joint_covariance_oracle() {
        let mut rng = RngStream::new(4, Purpose::Test as u64);
        for _ in 0..50 {
            let k = 3;
            let ne = 4;
            let h = random_h(&mut rng, k, ne);
            let x = complex_gaussian(&mut rng, k, 1.0).unwrap();
            let n0 = 0.2;
            let n = CVector::from_vec(complex_gaussian(&mut rng, ne, n0).unwrap());
            let t = assemble_tone(h.clone(), &x, &n, n0).unwrap();
            // Generic LMMSE: x̂ = H^H (H H^H + N0 I)^{-1} y.
            let hm = CMatrix::from_columns(&h);
            let cov = &hm * hm.adjoint() + CMatrix::identity(ne, ne) * C64::new(n0, 0.0);
            let oracle = hm.adjoint() * cov.try_inverse().unwrap() * &t.y;
            for l in 0..k {
                let d = mmse_detect_tone(&t, l).unwrap();
                assert!((d.estimate - oracle[l]).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn unscaled_variant_differs_by_scale_only() {
        let mut rng = RngStream::new(5, Purpose::Test as u64);
        let h = random_h(&mut rng, 2, 4);
        let n = CVector::from_vec(complex_gaussian(&mut rng, 4, 0.1).unwrap());
        let t = assemble_tone(h, &[C64::new(1.0, 0.0), C64::new(0.0, -1.0)], &n, 0.1).unwrap();
        let d = mmse_detect_tone(&t, 1).unwrap();
        let u = mmse_detect_tone_unscaled(&t, 1).unwrap();
        let ratio = d.estimate / u;
        assert!(ratio.im.abs() < 1e-12 && ratio.re > 0.0 && ratio.re < 1.0);
        assert!((ratio.re - (1.0 - d.gain)).abs() < 1e-12);
    }

    #[test]
    fn ssic_single_user_is_mrc() {
        let mut rng = RngStream::new(6, Purpose::Test as u64);
        let h = random_h(&mut rng, 1, 4);
        let n = CVector::from_vec(complex_gaussian(&mut rng, 4, 0.1).unwrap());
        let t = assemble_tone(h.clone(), &[C64::new(1.0, 0.0)], &n, 0.1).unwrap();
        let out = ssic_oo_detect(&t, |_, _| unreachable!()).unwrap();
        assert_eq!(out.detections[0], mrc_detect(&h[0], &t.y, 0.1));
        assert_eq!(out.order, vec![0]);
    }

    #[test]
    fn ssic_detects_strongest_first() {
        let mut rng = RngStream::new(7, Purpose::Test as u64);
        let mut h = random_h(&mut rng, 2, 4);
        h[1] *= C64::new(3.0, 0.0);
        let t = assemble_tone(h.clone(), &[ZERO, ZERO], &CVector::zeros(4), 0.1).unwrap();
        let out = ssic_oo_detect(&t, |_, d| d.estimate).unwrap();
        assert_eq!(out.order, vec![1, 0]);
        // Common scaling keeps the order.
        let scaled: Vec<CVector> = h.iter().map(|v| v * C64::new(0.01, 0.0)).collect();
        let t = assemble_tone(scaled, &[ZERO, ZERO], &CVector::zeros(4), 0.1).unwrap();
        assert_eq!(ssic_oo_detect(&t, |_, d| d.estimate).unwrap().order, vec![1, 0]);
    }

    #[test]
    fn cancellation_leaves_reduced_system() {
        let mut rng = RngStream::new(8, Purpose::Test as u64);
        let mut h = random_h(&mut rng, 2, 4);
        h[0] *= C64::new(2.0, 0.0);
        let x = [C64::new(1.0, -1.0), C64::new(-1.0, 0.5)];
        let n = CVector::from_vec(complex_gaussian(&mut rng, 4, 0.05).unwrap());
        let t = assemble_tone(h.clone(), &x, &n, 0.05).unwrap();
        let out = ssic_oo_detect(&t, |l, _| x[l]).unwrap();
        let reduced = assemble_tone(vec![h[1].clone()], &[x[1]], &n, 0.05).unwrap();
        let want = mrc_detect(&h[1], &reduced.y, 0.05);
        assert!((out.detections[1].estimate - want.estimate).norm() < 1e-12);
    }

    #[test]
    fn noiseless_ssic_recovers_qam() {
        let q = Qam::new(16).unwrap();
        let pts = q.points();
        let mut rng = RngStream::new(9, Purpose::Test as u64);
        for i in 0..500 {
            let h = random_h(&mut rng, 2, 4);
            let x = [pts[i % 16], pts[(i * 7 + 3) % 16]];
            let t = assemble_tone(h, &x, &CVector::zeros(4), 0.0).unwrap();
            let out = ssic_oo_detect(&t, |_, d| q.slice(d.estimate / d.gain)).unwrap();
            for l in 0..2 {
                let d = out.detections[l];
                assert_eq!(q.slice(d.estimate / d.gain), x[l]);
            }
        }
    }
}
