//! Multi-user SVD precoding at the eNB and UE-side post-processing.
//!
//! Each UE row `h_l(m)` (1 × Ne) has the rank-1 SVD `U = 1`, `E = ‖h‖`,
//! `V = h^H/‖h‖`. Stacking `V` over the UEs sharing a tone and precoding with
//! `P = pinv(V^H)·diag(β)` gives `V^H P = diag(β)`, so UE `l` sees only its own
//! stream through the scalar gain `Ẽ_l = E_l β_l`.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::modem::Allocation;
use crate::numerics::{pinv, svd, svd_row, CMatrix, C64, ZERO};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PowerPolicy {
    /// Each UE's precoder column carries `P_tone / K`.
    Equal,
    /// Water-filling over the effective gains `E_l² / ‖pinv column‖²`.
    WaterFilling,
}

/// Precoder of one subcarrier.
#[derive(Debug, Clone, PartialEq)]
pub struct TonePrecoder {
    /// UEs sharing this tone, in column order.
    pub ues: Vec<usize>,
    pub u: Vec<C64>,
    pub e: Vec<f64>,
    /// Ne × K stack of right singular vectors.
    pub v: CMatrix,
    /// Ne × K precoder, β included.
    pub p: CMatrix,
    pub beta: Vec<f64>,
    /// `V^H` was rank deficient and the pseudo-inverse was truncated.
    pub singular: bool,
}

impl TonePrecoder {
    /// `Ẽ` of the UE in column `col`.
    pub fn effective_gain(&self, col: usize) -> f64 {
        self.e[col] * self.beta[col]
    }

    /// `U E V^H P`, which is diagonal when interference is nulled.
    pub fn effective_matrix(&self) -> CMatrix {
        let k = self.ues.len();
        let mut ue = CMatrix::zeros(k, k);
        for i in 0..k {
            ue[(i, i)] = self.u[i] * self.e[i];
        }
        ue * self.v.adjoint() * &self.p
    }

    pub fn transmit_power(&self) -> f64 {
        self.p.norm_squared()
    }
}

/// Precoders on every grid subcarrier that carries at least one UE.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecoderSet {
    tones: Vec<Option<TonePrecoder>>,
}

impl PrecoderSet {
    pub fn tone(&self, m: usize) -> Option<&TonePrecoder> {
        self.tones.get(m).and_then(Option::as_ref)
    }

    pub fn grid(&self) -> usize {
        self.tones.len()
    }

    pub fn singular_tones(&self) -> usize {
        self.tones.iter().flatten().filter(|t| t.singular).count()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &TonePrecoder)> {
        self.tones
            .iter()
            .enumerate()
            .filter_map(|(m, t)| t.as_ref().map(|t| (m, t)))
    }

    /// `Ẽ` for UE `l` on grid tone `m`, zero where `l` is not served.
    pub fn effective_gain(&self, l: usize, m: usize) -> f64 {
        self.tone(m)
            .and_then(|t| t.ues.iter().position(|&u| u == l).map(|c| t.effective_gain(c)))
            .unwrap_or(0.0)
    }

    pub fn u(&self, l: usize, m: usize) -> C64 {
        self.tone(m)
            .and_then(|t| t.ues.iter().position(|&u| u == l).map(|c| t.u[c]))
            .unwrap_or(C64::new(1.0, 0.0))
    }
}

fn water_fill(gains: &[f64], total: f64, n0: f64) -> Vec<f64> {
    let k = gains.len();
    if n0 <= 0.0 {
        return vec![total / k as f64; k];
    }
    let mut order: Vec<usize> = (0..k).filter(|&i| gains[i] > 0.0).collect();
    order.sort_by(|&a, &b| gains[b].total_cmp(&gains[a]));
    let mut p = vec![0.0; k];
    for active in (1..=order.len()).rev() {
        let set = &order[..active];
        let inv: f64 = set.iter().map(|&i| n0 / gains[i]).sum();
        let level = (total + inv) / active as f64;
        if level > n0 / gains[set[active - 1]] {
            for &i in set {
                p[i] = level - n0 / gains[i];
            }
            break;
        }
    }
    p
}

/// Precoder for the UEs whose rows are given, with per-tone budget `p_tone`.
pub fn build_tone_precoder(
    ues: Vec<usize>,
    rows: &[Vec<C64>],
    policy: PowerPolicy,
    p_tone: f64,
    n0: f64,
) -> Result<TonePrecoder> {
    let k = rows.len();
    ensure_len("build_tone_precoder UEs", ues.len(), k)?;
    if k == 0 {
        return Err(Error::InvalidParameter("tone without UEs".into()));
    }
    let ne = rows[0].len();
    if k > ne {
        return Err(Error::InvalidParameter(format!(
            "{k} UEs cannot share a tone with {ne} eNB antennas"
        )));
    }
    let mut u = Vec::with_capacity(k);
    let mut e = Vec::with_capacity(k);
    let mut v = CMatrix::zeros(ne, k);
    for (c, row) in rows.iter().enumerate() {
        ensure_len("build_tone_precoder row", ne, row.len())?;
        let d = svd_row(row);
        u.push(d.u[(0, 0)]);
        e.push(d.s[0]);
        v.set_column(c, &d.v.column(0));
    }
    let vh = v.adjoint();
    let sv = svd(&vh)?.s;
    let singular = sv.last().copied().unwrap_or(0.0) <= 1e-9 * sv[0].max(f64::MIN_POSITIVE);
    let q = pinv(&vh)?;
    let col_norms: Vec<f64> = (0..k).map(|c| q.column(c).norm()).collect();
    let powers = match policy {
        PowerPolicy::Equal => vec![p_tone / k as f64; k],
        PowerPolicy::WaterFilling => {
            let gains: Vec<f64> = (0..k)
                .map(|c| {
                    if col_norms[c] > 0.0 {
                        e[c] * e[c] / (col_norms[c] * col_norms[c])
                    } else {
                        0.0
                    }
                })
                .collect();
            water_fill(&gains, p_tone, n0)
        }
    };
    let beta: Vec<f64> = (0..k)
        .map(|c| {
            if col_norms[c] > 0.0 && e[c] > 0.0 {
                powers[c].sqrt() / col_norms[c]
            } else {
                0.0
            }
        })
        .collect();
    let mut p = q;
    for (c, b) in beta.iter().enumerate() {
        p.column_mut(c).scale_mut(*b);
    }
    Ok(TonePrecoder {
        ues,
        u,
        e,
        v,
        p,
        beta,
        singular,
    })
}

/// Precoders for every grid tone used by any allocation. `row(l, m)` returns
/// the (effective) downlink row of UE `l` on grid tone `m`.
pub fn build_precoders<F>(
    allocs: &[Allocation],
    row: F,
    policy: PowerPolicy,
    p_tone: f64,
    n0: f64,
) -> Result<PrecoderSet>
where
    F: Fn(usize, usize) -> Vec<C64>,
{
    let grid = allocs
        .first()
        .map(Allocation::grid)
        .ok_or_else(|| Error::InvalidParameter("no UEs to precode".into()))?;
    let mut users: Vec<Vec<usize>> = vec![Vec::new(); grid];
    for (l, a) in allocs.iter().enumerate() {
        ensure_len("build_precoders grid", grid, a.grid())?;
        for &m in a.indices() {
            users[m].push(l);
        }
    }
    let tones = users
        .into_iter()
        .enumerate()
        .map(|(m, ues)| {
            if ues.is_empty() {
                return Ok(None);
            }
            let rows: Vec<Vec<C64>> = ues.iter().map(|&l| row(l, m)).collect();
            build_tone_precoder(ues, &rows, policy, p_tone, n0).map(Some)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PrecoderSet { tones })
}

/// Per-eNB-antenna frequency grids `e_j = Σ_i A^i z_{i,j}` with
/// `z_i(m) = P^i_m x̄_i(m)`.
pub fn precode_and_superpose(
    xbar: &[Vec<C64>],
    pre: &PrecoderSet,
    allocs: &[Allocation],
    ne: usize,
) -> Result<Vec<Vec<C64>>> {
    ensure_len("precode_and_superpose UEs", allocs.len(), xbar.len())?;
    let mut out = vec![vec![ZERO; pre.grid()]; ne];
    for (l, (x, a)) in xbar.iter().zip(allocs).enumerate() {
        ensure_len("precode_and_superpose tones", a.tones(), x.len())?;
        for (&m, &sym) in a.indices().iter().zip(x) {
            let t = pre
                .tone(m)
                .ok_or(Error::IndexOutOfRange { index: m, len: pre.grid() })?;
            ensure_len("precode_and_superpose antennas", ne, t.p.nrows())?;
            let c = t
                .ues
                .iter()
                .position(|&u| u == l)
                .ok_or(Error::IndexOutOfRange { index: l, len: t.ues.len() })?;
            for j in 0..ne {
                out[j][m] += t.p[(j, c)] * sym;
            }
        }
    }
    Ok(out)
}

/// `ŷ(m) = U(m)^* ȳ(m)`.
pub fn ue_post_process(ybar: &[C64], u: &[C64]) -> Result<Vec<C64>> {
    ensure_len("ue_post_process", ybar.len(), u.len())?;
    Ok(ybar.iter().zip(u).map(|(y, u)| u.conj() * y).collect())
}

/// Scalar per-tone MMSE `Ẽ* ŷ / (|Ẽ|² + N0)`.
pub fn mmse_equalize_diag(yhat: &[C64], e: &[C64], n0: f64) -> Result<Vec<C64>> {
    ensure_len("mmse_equalize_diag", yhat.len(), e.len())?;
    Ok(yhat
        .iter()
        .zip(e)
        .map(|(y, g)| {
            let d = g.norm_sqr() + n0;
            if d == 0.0 {
                ZERO
            } else {
                g.conj() * y / d
            }
        })
        .collect())
}

/// Per-tone MMSE gain `|Ẽ|²/(|Ẽ|² + N0)`, the bias left on each tone.
pub fn mmse_bias(e: &[C64], n0: f64) -> Vec<f64> {
    e.iter()
        .map(|g| {
            let p = g.norm_sqr();
            if p + n0 == 0.0 {
                0.0
            } else {
                p / (p + n0)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modem::AllocationStyle;
    use crate::numerics::{complex_gaussian, CVector, Purpose, RngStream, ONE};

    fn rows(seed: u64, k: usize, ne: usize) -> Vec<Vec<C64>> {
        let mut rng = RngStream::new(seed, Purpose::Test as u64);
        (0..k).map(|_| complex_gaussian(&mut rng, ne, 1.0).unwrap()).collect()
    }

    fn row_vec(r: &[C64]) -> CMatrix {
        CMatrix::from_row_slice(1, r.len(), r)
    }

    #[test]
    fn single_user_is_matched_filter() {
        let h = rows(1, 1, 4);
        let t = build_tone_precoder(vec![0], &h, PowerPolicy::Equal, 1.0, 0.0).unwrap();
        let dir = CVector::from_iterator(4, h[0].iter().map(|v| v.conj()));
        let dir = dir.unscale(dir.norm());
        assert!((t.p.column(0) - &dir * C64::new(t.beta[0], 0.0)).norm() < 1e-12);
        let g = (row_vec(&h[0]) * &t.p)[(0, 0)];
        assert!((g - C64::new(t.effective_gain(0), 0.0)).norm() < 1e-12);
        assert!((t.effective_gain(0) - t.e[0]).abs() < 1e-12);
    }

    #[test]
    fn interference_is_nulled() {
        for seed in 0..200 {
            let h = rows(seed, 2, 4);
            let t = build_tone_precoder(vec![0, 1], &h, PowerPolicy::Equal, 1.0, 0.0).unwrap();
            let vhp = t.v.adjoint() * &t.p;
            for i in 0..2 {
                for j in 0..2 {
                    let want = if i == j { t.beta[i] } else { 0.0 };
                    assert!((vhp[(i, j)] - C64::new(want, 0.0)).norm() < 1e-9);
                }
            }
            let eff = t.effective_matrix();
            assert!(eff[(0, 1)].norm() < 1e-9 && eff[(1, 0)].norm() < 1e-9);
            // Through the true channel rows as well.
            for (l, r) in h.iter().enumerate() {
                let g = row_vec(r) * &t.p;
                assert!(g[(0, 1 - l)].norm() < 1e-9);
                assert!((g[(0, l)] - C64::new(t.effective_gain(l), 0.0)).norm() < 1e-9);
            }
            assert!((t.transmit_power() - 1.0).abs() < 1e-9);
            assert!(t.u.iter().all(|u| (u.norm() - 1.0).abs() < 1e-12));
            assert!(!t.singular);
        }
    }

    #[test]
    fn orthogonal_users_cost_nothing() {
        let h = vec![
            vec![ONE, ZERO, ZERO, ZERO],
            vec![ZERO, C64::new(0.0, 2.0), ZERO, ZERO],
        ];
        let t = build_tone_precoder(vec![0, 1], &h, PowerPolicy::Equal, 1.0, 0.0).unwrap();
        for c in 0..2 {
            let pc = t.p.column(c);
            let vc = t.v.column(c);
            let ratio = pc.dotc(&vc) / vc.norm_squared();
            assert!((pc - vc * ratio).norm() < 1e-12);
            assert!((t.beta[c] - (0.5f64).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn colinear_users_flagged() {
        let a = rows(3, 1, 4).remove(0);
        let b: Vec<C64> = a.iter().map(|v| v * C64::new(0.0, 2.0)).collect();
        let t = build_tone_precoder(vec![0, 1], &[a, b], PowerPolicy::Equal, 1.0, 0.0).unwrap();
        assert!(t.singular);
        assert!(t.p.iter().all(|v| v.re.is_finite() && v.im.is_finite()));
    }

    #[test]
    fn too_many_users_rejected() {
        let h = rows(4, 3, 2);
        assert!(build_tone_precoder(vec![0, 1, 2], &h, PowerPolicy::Equal, 1.0, 0.0).is_err());
    }

    #[test]
    fn water_filling_budget_and_order() {
        let p = water_fill(&[4.0, 1.0], 1.0, 1.0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p[0] > p[1]);
        // Weak user switched off at low power.
        let p = water_fill(&[100.0, 0.1], 0.5, 1.0);
        assert_eq!(p[1], 0.0);
        assert!((p[0] - 0.5).abs() < 1e-12);
        let h = rows(5, 2, 4);
        let t = build_tone_precoder(vec![0, 1], &h, PowerPolicy::WaterFilling, 1.0, 0.1).unwrap();
        assert!((t.transmit_power() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn superposition_single_antenna_path() {
        let alloc = Allocation::with_style(8, 4, AllocationStyle::Localized).unwrap();
        let e1 = vec![ONE, ZERO, ZERO];
        let pre = build_precoders(
            std::slice::from_ref(&alloc),
            |_, _| e1.clone(),
            PowerPolicy::Equal,
            1.0,
            0.0,
        )
        .unwrap();
        let x: Vec<C64> = (0..4).map(|i| C64::new(i as f64, 1.0)).collect();
        let grids = precode_and_superpose(std::slice::from_ref(&x), &pre, &[alloc.clone()], 3).unwrap();
        assert_eq!(demap(&grids[0], &alloc), x);
        assert!(grids[1].iter().chain(&grids[2]).all(|v| *v == ZERO));
    }

    fn demap(g: &[C64], a: &Allocation) -> Vec<C64> {
        a.indices().iter().map(|&m| g[m]).collect()
    }

    #[test]
    fn disjoint_allocations_do_not_mix() {
        let a0 = Allocation::new(8, vec![0, 1, 2]).unwrap();
        let a1 = Allocation::new(8, vec![4, 5, 6]).unwrap();
        let h = rows(6, 2, 4);
        let pre = build_precoders(&[a0.clone(), a1.clone()], |l, _| h[l].clone(), PowerPolicy::Equal, 1.0, 0.0)
            .unwrap();
        for (m, t) in pre.iter() {
            assert_eq!(t.ues.len(), 1, "tone {m}");
        }
        let x0 = vec![ONE; 3];
        let x1 = vec![C64::new(0.0, 1.0); 3];
        let g = precode_and_superpose(&[x0, x1], &pre, &[a0, a1], 4).unwrap();
        assert!(g.iter().all(|ant| ant[3] == ZERO && ant[7] == ZERO));
    }

    #[test]
    fn power_audit() {
        let alloc = Allocation::with_style(16, 12, AllocationStyle::Localized).unwrap();
        let h = rows(7, 2, 4);
        let pre = build_precoders(&[alloc.clone(), alloc.clone()], |l, _| h[l].clone(), PowerPolicy::Equal, 1.0, 0.0)
            .unwrap();
        let x: Vec<C64> = (0..12)
            .map(|i| C64::from_polar(1.0, i as f64))
            .collect();
        let y: Vec<C64> = (0..12)
            .map(|i| C64::from_polar(1.0, -2.0 * i as f64))
            .collect();
        let g = precode_and_superpose(&[x, y], &pre, &[alloc.clone(), alloc.clone()], 4).unwrap();
        // Unit-modulus symbols: expected power is Σ‖P column‖² = budget, exact
        // up to cross terms between the two columns.
        let t = pre.tone(alloc.indices()[0]).unwrap();
        let beta_sq: f64 = t.beta.iter().zip(t.v.column_iter()).map(|(b, _)| b * b).sum();
        assert!(beta_sq <= 1.0 + 1e-12);
        let mean: f64 = alloc
            .indices()
            .iter()
            .map(|&m| g.iter().map(|a| a[m].norm_sqr()).sum::<f64>())
            .sum::<f64>()
            / 12.0;
        assert!((mean - 1.0).abs() < 0.5, "{mean}");
    }

    #[test]
    fn post_process_cases() {
        let y = vec![C64::new(1.0, 2.0), C64::new(-3.0, 0.5)];
        assert_eq!(ue_post_process(&y, &[ONE, ONE]).unwrap(), y);
        let u = vec![C64::from_polar(1.0, 0.3), C64::from_polar(1.0, -2.0)];
        let z = ue_post_process(&y, &u).unwrap();
        for (a, b) in z.iter().zip(&y) {
            assert!((a.norm() - b.norm()).abs() < 1e-12);
        }
        assert!(ue_post_process(&y, &u[..1]).is_err());
    }

    #[test]
    fn noiseless_post_process_recovers_gain() {
        let h = rows(8, 2, 4);
        let t = build_tone_precoder(vec![0, 1], &h, PowerPolicy::Equal, 1.0, 0.0).unwrap();
        let x = [C64::new(0.3, -0.9), C64::new(-1.0, 0.1)];
        let tx = &t.p * CVector::from_column_slice(&x);
        for l in 0..2 {
            let ybar = (row_vec(&h[l]) * &tx)[(0, 0)];
            let yhat = ue_post_process(&[ybar], &[t.u[l]]).unwrap()[0];
            let g = yhat / x[l];
            assert!(g.im.abs() < 1e-9 && g.re > 0.0);
            assert!((g.re - t.effective_gain(l)).abs() < 1e-9);
        }
    }

    #[test]
    fn mmse_diag_cases() {
        let y = vec![C64::new(2.0, -4.0)];
        assert_eq!(mmse_equalize_diag(&y, &[ONE], 1.0).unwrap()[0], y[0] / 2.0);
        let e = C64::new(0.5, 0.5);
        let zf = mmse_equalize_diag(&y, &[e], 0.0).unwrap()[0];
        assert!((zf - y[0] / e).norm() < 1e-12);

        // Matrix form (E^H E + N0 I)^{-1} E^H y on a diagonal E.
        let mut rng = RngStream::new(9, Purpose::Test as u64);
        let gains = complex_gaussian(&mut rng, 6, 1.0).unwrap();
        let yv = complex_gaussian(&mut rng, 6, 1.0).unwrap();
        let em = CMatrix::from_diagonal(&CVector::from_column_slice(&gains));
        let n0 = 0.37;
        let lhs = em.adjoint() * &em + CMatrix::identity(6, 6) * C64::new(n0, 0.0);
        let oracle = lhs.try_inverse().unwrap() * em.adjoint() * CVector::from_column_slice(&yv);
        let got = mmse_equalize_diag(&yv, &gains, n0).unwrap();
        for (a, b) in got.iter().zip(oracle.iter()) {
            assert!((a - b).norm() < 1e-12);
        }
    }
}
