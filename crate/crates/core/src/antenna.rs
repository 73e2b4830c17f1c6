//! UE array processing: steering vectors, Root-MUSIC, constrained LMS
//! beamforming and application of the weights on receive and transmit.
//!
//! Steering entries are `α_x(ψ) = exp(−j2π·x·d·sinψ)` for element `x`, with
//! `d` the spacing in wavelengths and `ψ` measured from the array normal.
//! Weights act through their Hermitian: the array response toward `ψ` is
//! `W^H α(ψ)`, on receive and on transmit alike.

use std::f64::consts::PI;

use nalgebra::DMatrix;

use crate::error::{ensure_len, Error, Result};
use crate::modem::TimeSlotSignal;
use crate::numerics::{
    complex_gaussian, hermitian_eig, poly_roots, CMatrix, CVector, RngStream, C64, ONE, ZERO,
};

pub fn steering_vector(psi: f64, n_r: usize, spacing_wl: f64) -> CVector {
    let phase = -2.0 * PI * spacing_wl * psi.sin();
    CVector::from_iterator(n_r, (0..n_r).map(|x| C64::from_polar(1.0, phase * x as f64)))
}

/// Columns `α(ψ_1) … α(ψ_K)`.
pub fn steering_matrix(angles: &[f64], n_r: usize, spacing_wl: f64) -> CMatrix {
    let cols: Vec<CVector> = angles
        .iter()
        .map(|&a| steering_vector(a, n_r, spacing_wl))
        .collect();
    if cols.is_empty() {
        return CMatrix::zeros(n_r, 0);
    }
    CMatrix::from_columns(&cols)
}

/// `T` narrowband snapshots of unit-power Gaussian sources at `angles` plus
/// white noise of variance `noise_var` per element.
pub fn simulate_snapshots(
    rng: &mut RngStream,
    angles: &[f64],
    n_r: usize,
    spacing_wl: f64,
    noise_var: f64,
    t: usize,
) -> Result<CMatrix> {
    let a = steering_matrix(angles, n_r, spacing_wl);
    let s = CMatrix::from_vec(angles.len(), t, complex_gaussian(rng, angles.len() * t, 1.0)?);
    let n = CMatrix::from_vec(n_r, t, complex_gaussian(rng, n_r * t, noise_var)?);
    Ok(a * s + n)
}

fn sample_covariance(y: &CMatrix) -> CMatrix {
    let t = y.ncols() as f64;
    (y * y.adjoint()).map(|v| v / t)
}

/// Root-MUSIC estimates of `n_sources` arrival angles (radians, ascending).
pub fn root_music_doa(snapshots: &CMatrix, n_sources: usize, spacing_wl: f64) -> Result<Vec<f64>> {
    let n_r = snapshots.nrows();
    if n_sources == 0 || n_sources >= n_r {
        return Err(Error::InvalidParameter(format!(
            "Root-MUSIC needs 1 <= sources < {n_r} elements, got {n_sources}"
        )));
    }
    if snapshots.ncols() < n_r {
        return Err(Error::Estimation(format!(
            "{} snapshots cannot give a full-rank covariance for {n_r} elements",
            snapshots.ncols()
        )));
    }
    if !(spacing_wl > 0.0) {
        return Err(Error::InvalidParameter("element spacing must be positive".into()));
    }
    let r = sample_covariance(snapshots);
    let (_, vecs) = hermitian_eig(&r)?;
    let noise = vecs.columns(0, n_r - n_sources);
    let c = &noise * noise.adjoint();

    // a^H C a = Σ_k b_k z^k with b_k the sum of the k-th diagonal of C.
    let deg = 2 * (n_r - 1);
    let mut coeffs = vec![ZERO; deg + 1];
    for x in 0..n_r {
        for y in 0..n_r {
            coeffs[y + n_r - 1 - x] += c[(x, y)];
        }
    }
    let mut roots = poly_roots(&coeffs)?;
    roots.sort_by(|a, b| {
        (a.norm() - 1.0)
            .abs()
            .total_cmp(&(b.norm() - 1.0).abs())
    });

    // Roots come in pairs z, 1/z* sharing an argument; keep one per pair.
    let mut chosen: Vec<f64> = Vec::with_capacity(n_sources);
    for z in roots {
        if chosen.len() == n_sources {
            break;
        }
        let arg = z.arg();
        if chosen.iter().any(|&a| {
            let d = (a - arg).abs();
            d.min(2.0 * PI - d) < 1e-5
        }) {
            continue;
        }
        chosen.push(arg);
    }
    if chosen.len() < n_sources {
        return Err(Error::Estimation("too few distinct polynomial roots".into()));
    }
    let mut angles = Vec::with_capacity(n_sources);
    for arg in chosen {
        let s = -arg / (2.0 * PI * spacing_wl);
        if s.abs() > 1.0 {
            return Err(Error::Estimation(format!(
                "root maps to sin(psi) = {s:.4}, outside the visible region"
            )));
        }
        angles.push(s.asin());
    }
    angles.sort_by(f64::total_cmp);
    Ok(angles)
}

/// Weights of one constrained-LMS beamformer and its constraint set.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamformerState {
    pub weights: CVector,
    pub mu: f64,
    pub iterations: usize,
    pub constraints: CMatrix,
    pub response: CVector,
}

impl BeamformerState {
    /// `max_i |c_i^H W − f_i|`.
    pub fn constraint_residual(&self) -> f64 {
        let r = self.constraints.adjoint() * &self.weights - &self.response;
        r.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }
}

/// Unit gain on the first constraint column, nulls on the rest.
pub fn unit_response(n_constraints: usize) -> CVector {
    let mut f = CVector::zeros(n_constraints);
    if n_constraints > 0 {
        f[0] = ONE;
    }
    f
}

fn constraint_gram_inverse(c: &CMatrix) -> Result<CMatrix> {
    let g = c.adjoint() * c;
    g.try_inverse().ok_or_else(|| {
        Error::InvalidParameter("beam constraints are linearly dependent".into())
    })
}

/// Minimum-norm weight meeting `C^H W = f`: `C (C^H C)^{-1} f`.
pub fn quiescent_weights(c: &CMatrix, f: &CVector) -> Result<CVector> {
    ensure_len("quiescent_weights", c.ncols(), f.len())?;
    Ok(c * constraint_gram_inverse(c)? * f)
}

/// Frost constrained LMS over the snapshot columns (cycled).
///
/// `W ← Pr[W − μ·y·z*] + F` with output `z = W^H y`, projector
/// `Pr = I − C(C^H C)^{-1}C^H` and `F` the quiescent weight. The iteration
/// starts at `F`, so `C^H W = f` holds at every step.
pub fn clms_train(
    constraints: &CMatrix,
    snapshots: &CMatrix,
    mu: f64,
    iters: usize,
) -> Result<BeamformerState> {
    let n_r = constraints.nrows();
    ensure_len("clms_train snapshots", n_r, snapshots.nrows())?;
    if constraints.ncols() == 0 || constraints.ncols() > n_r {
        return Err(Error::InvalidParameter(format!(
            "{} constraints for a {n_r}-element array",
            constraints.ncols()
        )));
    }
    if !(mu >= 0.0) {
        return Err(Error::InvalidParameter(format!("step size {mu} must be >= 0")));
    }
    if snapshots.ncols() == 0 && iters > 0 {
        return Err(Error::InvalidParameter("no snapshots to train on".into()));
    }
    let f = unit_response(constraints.ncols());
    let gi = constraint_gram_inverse(constraints)?;
    let quiescent = constraints * &gi * &f;
    let proj = CMatrix::identity(n_r, n_r) - constraints * &gi * constraints.adjoint();

    if snapshots.ncols() > 0 {
        let trace: f64 = sample_covariance(snapshots).diagonal().iter().map(|v| v.re).sum();
        let bound = 1.0 / (3.0 * trace);
        if mu >= bound {
            return Err(Error::UnstableStepSize { mu, bound });
        }
    }

    let mut w = quiescent.clone();
    for p in 0..iters {
        let y = snapshots.column(p % snapshots.ncols());
        let z = w.dotc(&y);
        let step = &w - y * (z.conj() * mu);
        w = &proj * step + &quiescent;
    }
    let state = BeamformerState {
        weights: w,
        mu,
        iterations: iters,
        constraints: constraints.clone(),
        response: f,
    };
    let residual = state.constraint_residual();
    if !(residual < 1e-6) {
        return Err(Error::NotConverged { iters, residual });
    }
    Ok(state)
}

/// `|W^H α(ψ)|²` on each grid angle.
pub fn beam_pattern(w: &CVector, spacing_wl: f64, grid: &[f64]) -> Vec<f64> {
    grid.iter()
        .map(|&psi| w.dotc(&steering_vector(psi, w.len(), spacing_wl)).norm_sqr())
        .collect()
}

/// Combined output `Σ_k w_k* y_k`.
pub fn rx_combine(y_per_antenna: &[TimeSlotSignal], w: &CVector) -> Result<TimeSlotSignal> {
    ensure_len("rx_combine", w.len(), y_per_antenna.len())?;
    let first = y_per_antenna
        .first()
        .ok_or_else(|| Error::InvalidParameter("no antennas".into()))?;
    let mut out = TimeSlotSignal::zeros(first.body_len(), first.cp_len);
    for (y, wk) in y_per_antenna.iter().zip(w.iter()) {
        ensure_len("rx_combine samples", out.len(), y.len())?;
        let g = wk.conj();
        for (o, &v) in out.samples.iter_mut().zip(&y.samples) {
            *o += g * v;
        }
    }
    Ok(out)
}

/// Per-antenna transmit streams `α_k(ψ) w_k* s`; their sum is the composite
/// radiated toward `ψ`, with gain `W^H α(ψ)`.
pub fn tx_steer(s: &TimeSlotSignal, w: &CVector, alpha_look: &CVector) -> Result<Vec<TimeSlotSignal>> {
    ensure_len("tx_steer", w.len(), alpha_look.len())?;
    Ok(w.iter()
        .zip(alpha_look.iter())
        .map(|(wk, ak)| s.scaled(ak * wk.conj()))
        .collect())
}

/// Composite of per-antenna streams as a plain sum.
pub fn composite(rows: &[TimeSlotSignal]) -> Option<TimeSlotSignal> {
    let mut it = rows.iter();
    let mut acc = it.next()?.clone();
    for r in it {
        acc.add_assign(r);
    }
    Some(acc)
}

/// Columns of a matrix as plain vectors, used by the snapshot model.
pub fn columns(m: &DMatrix<C64>) -> Vec<CVector> {
    m.column_iter().map(|c| c.into_owned()).collect()
}
