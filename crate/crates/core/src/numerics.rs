//! Complex linear algebra, unitary DFTs and reproducible random streams.
//!
//! Every transform here is unitary (scaled by `1/sqrt(n)` in both directions),
//! so power bookkeeping through the transmit and receive chains is exact.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{Fft, FftPlanner};

use crate::error::{ensure_len, Error, Result};

pub use num_complex::Complex64 as C64;

pub type CVector = DVector<C64>;
pub type CMatrix = DMatrix<C64>;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);

/// Deterministic random stream keyed by `(seed, stream)`.
///
/// Two streams with the same key produce bit-identical draws regardless of
/// which thread owns them or in which order trials run.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha12Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    /// Stream for one purpose inside one Monte Carlo trial.
    pub fn for_trial(seed: u64, trial: u64, purpose: Purpose) -> Self {
        Self::new(seed, (trial << 8) | purpose as u64)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Independent sub-streams used within a trial. Keeping them separate means
/// toggling one impairment never shifts the draws of another.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Purpose {
    Channel = 1,
    DownlinkBits = 2,
    UplinkBits = 3,
    UeNoise = 4,
    EnbNoise = 5,
    CrossLinkNoise = 6,
    Snapshots = 7,
    SiChannel = 8,
    TxNoise = 9,
    Test = 200,
}

/// `n` i.i.d. circularly-symmetric complex Gaussian samples with total variance
/// `variance` (each quadrature carries `variance / 2`).
pub fn complex_gaussian<R: RngCore + ?Sized>(
    rng: &mut R,
    n: usize,
    variance: f64,
) -> Result<Vec<C64>> {
    if !(variance >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "noise variance must be non-negative, got {variance}"
        )));
    }
    if variance == 0.0 {
        return Ok(vec![ZERO; n]);
    }
    let sigma = (variance / 2.0).sqrt();
    Ok((0..n)
        .map(|_| {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            C64::new(sigma * re, sigma * im)
        })
        .collect())
}

type PlanKey = (usize, bool);

thread_local! {
    static PLANS: RefCell<(FftPlanner<f64>, HashMap<PlanKey, Arc<dyn Fft<f64>>>)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

fn plan(size: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANS.with(|cell| {
        let mut guard = cell.borrow_mut();
        let (planner, cache) = &mut *guard;
        cache
            .entry((size, inverse))
            .or_insert_with(|| {
                if inverse {
                    planner.plan_fft_inverse(size)
                } else {
                    planner.plan_fft_forward(size)
                }
            })
            .clone()
    })
}

fn unitary_transform(x: &[C64], size: usize, inverse: bool) -> Result<Vec<C64>> {
    ensure_len(if inverse { "idft" } else { "dft" }, size, x.len())?;
    if size == 0 {
        return Ok(Vec::new());
    }
    let mut buf = x.to_vec();
    plan(size, inverse).process(&mut buf);
    let scale = 1.0 / (size as f64).sqrt();
    buf.iter_mut().for_each(|v| *v *= scale);
    Ok(buf)
}

/// Unitary forward DFT: `X[k] = n^{-1/2} sum_t x[t] e^{-j2 pi k t / n}`.
pub fn dft(x: &[C64], size: usize) -> Result<Vec<C64>> {
    unitary_transform(x, size, false)
}

/// Unitary inverse DFT, the exact inverse of [`dft`].
pub fn idft(x: &[C64], size: usize) -> Result<Vec<C64>> {
    unitary_transform(x, size, true)
}

/// Thin singular value decomposition `H = U diag(S) V^H`.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: CMatrix,
    /// Non-negative, descending.
    pub s: Vec<f64>,
    pub v: CMatrix,
}

fn ensure_finite(op: &'static str, m: &CMatrix) -> Result<()> {
    if m.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

pub fn svd(h: &CMatrix) -> Result<Svd> {
    ensure_finite("svd", h)?;
    if h.nrows() == 1 {
        return Ok(svd_row(h.row(0).iter().copied().collect::<Vec<_>>().as_slice()));
    }
    let (rows, cols) = h.shape();
    let rank = rows.min(cols);
    if rank == 0 {
        return Ok(Svd {
            u: CMatrix::zeros(rows, 0),
            s: Vec::new(),
            v: CMatrix::zeros(cols, 0),
        });
    }
    let dec = nalgebra::SVD::new(h.clone(), true, true);
    let u = dec.u.expect("U requested");
    let v_t = dec.v_t.expect("V^H requested");
    let mut order: Vec<usize> = (0..rank).collect();
    order.sort_by(|&a, &b| dec.singular_values[b].total_cmp(&dec.singular_values[a]));
    let s = order.iter().map(|&i| dec.singular_values[i]).collect();
    let u = CMatrix::from_fn(rows, rank, |r, c| u[(r, order[c])]);
    let v = CMatrix::from_fn(cols, rank, |r, c| v_t[(order[c], r)].conj());
    Ok(Svd { u, s, v })
}

/// Analytic SVD of a single row `h` (1 x n): `h = 1 * ||h|| * (h^H / ||h||)^H`.
pub fn svd_row(h: &[C64]) -> Svd {
    let norm = h.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    let v = if norm > 0.0 {
        CMatrix::from_fn(h.len(), 1, |r, _| h[r].conj() / norm)
    } else {
        let mut v = CMatrix::zeros(h.len(), 1);
        if !h.is_empty() {
            v[(0, 0)] = ONE;
        }
        v
    };
    Svd {
        u: CMatrix::from_element(1, 1, ONE),
        s: vec![norm],
        v,
    }
}

/// Moore-Penrose pseudo-inverse via the SVD, truncating singular values below
/// `max(rows, cols) * eps * s_max`.
pub fn pinv(a: &CMatrix) -> Result<CMatrix> {
    let (rows, cols) = a.shape();
    let dec = svd(a)?;
    let smax = dec.s.first().copied().unwrap_or(0.0);
    let tol = rows.max(cols) as f64 * f64::EPSILON * smax;
    let mut out = CMatrix::zeros(cols, rows);
    for (i, &s) in dec.s.iter().enumerate() {
        if s <= tol || s == 0.0 {
            continue;
        }
        let vi = dec.v.column(i);
        let ui = dec.u.column(i);
        out += (vi * ui.adjoint()) / C64::from(s);
    }
    Ok(out)
}

/// Eigen-decomposition of a Hermitian matrix, eigenvalues in ascending order.
pub fn hermitian_eig(r: &CMatrix) -> Result<(Vec<f64>, CMatrix)> {
    ensure_finite("hermitian_eig", r)?;
    ensure_len("hermitian_eig", r.nrows(), r.ncols())?;
    let eig = nalgebra::SymmetricEigen::new(r.clone());
    let n = r.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = CMatrix::from_fn(n, n, |row, c| eig.eigenvectors[(row, order[c])]);
    Ok((values, vectors))
}

/// Solve `A x = b` for a square system.
pub fn solve(a: &CMatrix, b: &CVector) -> Result<CVector> {
    ensure_len("solve", a.nrows(), a.ncols())?;
    ensure_len("solve", a.nrows(), b.len())?;
    a.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| Error::InvalidParameter("singular system".into()))
}

/// Roots of `sum_k coeffs[k] z^k` (lowest order first) from the eigenvalues of
/// the companion matrix.
pub fn poly_roots(coeffs: &[C64]) -> Result<Vec<C64>> {
    let mut deg = coeffs.len();
    while deg > 0 && coeffs[deg - 1] == ZERO {
        deg -= 1;
    }
    if deg <= 1 {
        return Ok(Vec::new());
    }
    let n = deg - 1;
    let lead = coeffs[n];
    let mut companion = CMatrix::zeros(n, n);
    for i in 1..n {
        companion[(i, i - 1)] = ONE;
    }
    for i in 0..n {
        companion[(i, n - 1)] = -coeffs[i] / lead;
    }
    ensure_finite("poly_roots", &companion)?;
    let schur = nalgebra::Schur::new(companion);
    let (_, t) = schur.unpack();
    Ok((0..n).map(|i| t[(i, i)]).collect())
}

pub fn energy(x: &[C64]) -> f64 {
    x.iter().map(|z| z.norm_sqr()).sum()
}

pub fn mean_power(x: &[C64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        energy(x) / x.len() as f64
    }
}

pub fn db_to_lin(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn lin_to_db(lin: f64) -> f64 {
    10.0 * lin.log10()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_vec(rng: &mut RngStream, n: usize) -> Vec<C64> {
        complex_gaussian(rng, n, 1.0).unwrap()
    }

    fn random_matrix(rng: &mut RngStream, r: usize, c: usize) -> CMatrix {
        CMatrix::from_vec(r, c, random_vec(rng, r * c))
    }

    fn dft_matrix(n: usize) -> CMatrix {
        let s = 1.0 / (n as f64).sqrt();
        CMatrix::from_fn(n, n, |k, t| {
            C64::from_polar(s, -2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64)
        })
    }

    #[test]
    fn dft_of_single_point_is_identity() {
        let c = C64::new(0.3, -1.7);
        assert_eq!(dft(&[c], 1).unwrap(), vec![c]);
    }

    #[test]
    fn impulse_gives_flat_spectrum() {
        let mut x = vec![ZERO; 4];
        x[0] = ONE;
        for v in dft(&x, 4).unwrap() {
            assert!((v - C64::new(0.5, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn constant_gives_scaled_impulse() {
        let x = vec![ONE; 16];
        let y = idft(&x, 16).unwrap();
        assert!((y[0] - C64::new(4.0, 0.0)).norm() < 1e-12);
        assert!(y[1..].iter().all(|v| v.norm() < 1e-12));
    }

    #[test]
    fn dft_matches_matrix_oracle() {
        let mut rng = RngStream::new(1, 0);
        let x = random_vec(&mut rng, 256);
        let f = dft_matrix(256);
        let expect = &f * CVector::from_vec(x.clone());
        let got = dft(&x, 256).unwrap();
        let inv_expect = f.adjoint() * CVector::from_vec(x.clone());
        let inv_got = idft(&x, 256).unwrap();
        for k in 0..256 {
            assert!((expect[k] - got[k]).norm() < 1e-10);
            assert!((inv_expect[k] - inv_got[k]).norm() < 1e-10);
        }
    }

    #[test]
    fn dft_round_trip() {
        let mut rng = RngStream::new(2, 0);
        let x = random_vec(&mut rng, 256);
        let back = idft(&dft(&x, 256).unwrap(), 256).unwrap();
        let err = x
            .iter()
            .zip(&back)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(err < 1e-12, "round trip error {err}");
    }

    #[test]
    fn dft_rejects_size_mismatch() {
        assert!(matches!(
            dft(&[ONE; 3], 4),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(idft(&[ONE; 5], 4).is_err());
    }

    #[test]
    fn svd_of_identity() {
        let d = svd(&CMatrix::identity(2, 2)).unwrap();
        assert!((d.s[0] - 1.0).abs() < 1e-14 && (d.s[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn svd_of_row_is_rank_one() {
        let h = vec![
            C64::new(1.0, 2.0),
            C64::new(-0.5, 0.1),
            C64::new(0.0, -1.0),
            C64::new(3.0, 0.0),
        ];
        let d = svd(&CMatrix::from_row_slice(1, 4, &h)).unwrap();
        let norm = energy(&h).sqrt();
        assert!((d.s[0] - norm).abs() < 1e-14);
        // V column equals h^H / ||h|| up to a common phase
        let phase = d.v[(0, 0)] / (h[0].conj() / norm);
        assert!((phase.norm() - 1.0).abs() < 1e-12);
        for j in 0..4 {
            assert!((d.v[(j, 0)] - phase * h[j].conj() / norm).norm() < 1e-12);
        }
    }

    #[test]
    fn svd_rejects_non_finite() {
        let mut m = CMatrix::identity(2, 2);
        m[(0, 1)] = C64::new(f64::NAN, 0.0);
        assert!(matches!(svd(&m), Err(Error::NonFinite(_))));
        assert!(pinv(&m).is_err());
    }

    #[test]
    fn pinv_of_invertible_is_inverse() {
        let mut rng = RngStream::new(3, 0);
        let a = random_matrix(&mut rng, 3, 3);
        let inv = a.clone().try_inverse().unwrap();
        assert!((pinv(&a).unwrap() - inv).norm() < 1e-9);
    }

    #[test]
    fn pinv_of_zero_is_zero_transposed() {
        let p = pinv(&CMatrix::zeros(2, 5)).unwrap();
        assert_eq!(p.shape(), (5, 2));
        assert!(p.norm() == 0.0);
    }

    #[test]
    fn pinv_full_row_rank_matches_right_inverse() {
        let mut rng = RngStream::new(4, 0);
        let a = random_matrix(&mut rng, 2, 4);
        let right = a.adjoint() * (&a * a.adjoint()).try_inverse().unwrap();
        assert!((pinv(&a).unwrap() - right).norm() < 1e-9);
    }

    #[test]
    fn gaussian_zero_variance_and_errors() {
        let mut rng = RngStream::new(5, 0);
        assert!(complex_gaussian(&mut rng, 8, 0.0)
            .unwrap()
            .iter()
            .all(|z| *z == ZERO));
        assert!(complex_gaussian(&mut rng, 8, -1.0).is_err());
    }

    #[test]
    fn gaussian_moments() {
        let mut rng = RngStream::new(6, 0);
        let x = complex_gaussian(&mut rng, 1_000_000, 1.0).unwrap();
        let mean: C64 = x.iter().sum::<C64>() / x.len() as f64;
        let var = mean_power(&x);
        assert!(mean.norm() < 5e-3);
        assert!((0.995..=1.005).contains(&var), "variance {var}");
        let re_var = x.iter().map(|z| z.re * z.re).sum::<f64>() / x.len() as f64;
        assert!((re_var - 0.5).abs() < 5e-3);
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = {
            let mut r = RngStream::new(42, 7);
            (0..8).map(|_| r.random()).collect()
        };
        let b: Vec<u64> = {
            let mut r = RngStream::new(42, 7);
            (0..8).map(|_| r.random()).collect()
        };
        let c: Vec<u64> = {
            let mut r = RngStream::new(42, 8);
            (0..8).map(|_| r.random()).collect()
        };
        assert_eq!(a, b);
        assert_ne!(a, c);
        let g1 = complex_gaussian(&mut RngStream::for_trial(9, 3, Purpose::Channel), 4, 1.0);
        let g2 = complex_gaussian(&mut RngStream::for_trial(9, 3, Purpose::Channel), 4, 1.0);
        assert_eq!(g1.unwrap(), g2.unwrap());
    }

    #[test]
    fn poly_roots_recovers_known_roots() {
        // (z - 1)(z - j)(z + 0.5) expanded
        let r = [ONE, C64::new(0.0, 1.0), C64::new(-0.5, 0.0)];
        let c0 = -r[0] * r[1] * r[2];
        let c1 = r[0] * r[1] + r[0] * r[2] + r[1] * r[2];
        let c2 = -(r[0] + r[1] + r[2]);
        let roots = poly_roots(&[c0, c1, c2, ONE]).unwrap();
        for want in r {
            assert!(roots.iter().any(|z| (z - want).norm() < 1e-10));
        }
    }

    #[test]
    fn hermitian_eig_sorted_and_reconstructs() {
        let mut rng = RngStream::new(10, 0);
        let a = random_matrix(&mut rng, 4, 4);
        let r = &a * a.adjoint();
        let (vals, vecs) = hermitian_eig(&r).unwrap();
        assert!(vals.windows(2).all(|w| w[0] <= w[1]));
        let d = CMatrix::from_diagonal(&CVector::from_iterator(4, vals.iter().map(|&v| C64::from(v))));
        assert!((&vecs * d * vecs.adjoint() - r).norm() < 1e-10);
    }

    #[test]
    fn random_draws_use_whole_range() {
        let mut r = RngStream::new(11, 1);
        let x: f64 = r.random();
        assert!((0.0..1.0).contains(&x));
    }
}
