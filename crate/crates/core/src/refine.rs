//! Channel reconstruction from estimated locations, per-UE gain correction
//! and the non-parametric LS / R-LS baselines.
//!
//! The correction model stacks the `L` pilot transmissions:
//! `q_R = A_Ds alpha + w`, where block row `l` of `A_Ds` is
//! `A_hat diag(s[l])`. The least-squares `alpha` rescales and rotates every
//! estimated column to best explain the received samples.

use nalgebra::linalg::{Cholesky, SVD};
use num_complex::Complex64 as C64;

use crate::channel::{array_response, ChannelMatrix, ColumnKind};
use crate::error::{Error, Result};
use crate::geometry::{ArrayGeometry, PolarLocation};
use crate::music::{two_step_estimate, TwoStepConfig, TwoStepEstimate};
use crate::signal::SnapshotBlock;
use crate::{CMatrix, CVector};

/// Largest condition number accepted for the normal matrix `A_Ds^H A_Ds`.
pub const MAX_NORMAL_CONDITION: f64 = 1e12;

/// Channel matrix whose column `k` is the full near-field response at
/// `locs[k]`.
pub fn reconstruct_channels(locs: &[PolarLocation], g: &ArrayGeometry) -> ChannelMatrix {
    let mut entries = CMatrix::zeros(g.n_antennas(), locs.len());
    for (k, p) in locs.iter().enumerate() {
        entries.set_column(k, &array_response(g, &p.to_cartesian()));
    }
    ChannelMatrix::new(entries, ColumnKind::Estimated).expect("finite responses")
}

/// Stacked least-squares problem for the gain correctors.
#[derive(Debug, Clone)]
pub struct CorrectionProblem {
    /// `N x K` parametric estimate.
    pub estimate: CMatrix,
    /// `K x L` pilots.
    pub pilots: CMatrix,
    /// `LN x K`; block row `l` is `estimate * diag(pilots[:, l])`.
    pub stacked: CMatrix,
    /// Columns of `Q_R` stacked in time order.
    pub received: CVector,
}

/// Per-UE complex gains.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectorVector(pub CVector);

impl CorrectorVector {
    pub fn ones(k: usize) -> Self {
        Self(CVector::from_element(k, C64::new(1.0, 0.0)))
    }
}

pub fn build_stacked(estimate: &CMatrix, pilots: &CMatrix, received: &CMatrix) -> Result<CorrectionProblem> {
    let (n, k) = estimate.shape();
    let l = pilots.ncols();
    if pilots.nrows() != k {
        return Err(Error::mismatch("build_stacked pilot rows", k, pilots.nrows()));
    }
    if received.shape() != (n, l) {
        return Err(Error::mismatch(
            "build_stacked received shape",
            format!("{n}x{l}"),
            format!("{}x{}", received.nrows(), received.ncols()),
        ));
    }
    let mut stacked = CMatrix::zeros(l * n, k);
    for t in 0..l {
        for col in 0..k {
            let s = pilots[(col, t)];
            for row in 0..n {
                stacked[(t * n + row, col)] = estimate[(row, col)] * s;
            }
        }
    }
    let received = CVector::from_iterator(l * n, received.iter().copied());
    Ok(CorrectionProblem {
        estimate: estimate.clone(),
        pilots: pilots.clone(),
        stacked,
        received,
    })
}

/// Least-squares `alpha` for the stacked model, solved by QR. Fails when
/// the normal matrix condition number reaches [`MAX_NORMAL_CONDITION`].
pub fn estimate_correctors(p: &CorrectionProblem) -> Result<CorrectorVector> {
    let k = p.stacked.ncols();
    if k == 0 {
        return Ok(CorrectorVector(CVector::zeros(0)));
    }
    let condition = normal_condition(&p.stacked);
    if !(condition < MAX_NORMAL_CONDITION) {
        return Err(Error::IllConditioned { condition });
    }
    Ok(CorrectorVector(qr_solve(&p.stacked, &p.received)?))
}

/// `cond(A^H A) = cond(A)^2` from the singular values of `A`.
fn normal_condition(a: &CMatrix) -> f64 {
    let sv = SVD::new(a.clone(), false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        (max / min).powi(2)
    }
}

/// Least-squares solution of a full-column-rank system by Householder QR.
fn qr_solve(a: &CMatrix, b: &CVector) -> Result<CVector> {
    let qr = a.clone().qr();
    let rhs = qr.q().adjoint() * b;
    qr.r().solve_upper_triangular(&rhs).ok_or(Error::IllConditioned {
        condition: f64::INFINITY,
    })
}

/// Scales column `k` of the estimate by `alpha[k]`.
pub fn apply_correction(estimate: &ChannelMatrix, alpha: &CorrectorVector) -> Result<ChannelMatrix> {
    if alpha.0.len() != estimate.n_users() {
        return Err(Error::mismatch(
            "apply_correction corrector length",
            estimate.n_users(),
            alpha.0.len(),
        ));
    }
    let mut entries = estimate.entries().clone();
    for (mut col, a) in entries.column_iter_mut().zip(alpha.0.iter()) {
        col *= *a;
    }
    ChannelMatrix::new(entries, ColumnKind::Estimated)
}

/// Moore-Penrose pseudo-inverse. Full-rank inputs go through a thin QR
/// factorization; rank-deficient ones fall back to the SVD.
pub fn pseudo_inverse(s: &CMatrix) -> Result<CMatrix> {
    if s.iter().all(|z| *z == C64::new(0.0, 0.0)) {
        return Err(Error::invalid("pseudo-inverse of a zero matrix"));
    }
    let tall = s.nrows() >= s.ncols();
    let base = if tall { s.clone() } else { s.adjoint() };
    let qr = base.qr();
    let r = qr.r();
    let diag: Vec<f64> = r.diagonal().iter().map(|z| z.norm()).collect();
    let max = diag.iter().cloned().fold(0.0, f64::max);
    let full_rank = diag.iter().all(|&d| d > 1e-12 * max);
    if full_rank {
        let eye = CMatrix::identity(r.nrows(), r.ncols());
        if let Some(r_inv) = r.solve_upper_triangular(&eye) {
            // tall: S = QR, S+ = R^-1 Q^H; wide: S^H = QR, S+ = Q R^-H
            return Ok(if tall {
                r_inv * qr.q().adjoint()
            } else {
                qr.q() * r_inv.adjoint()
            });
        }
    }
    SVD::new(s.clone(), true, true)
        .pseudo_inverse(1e-12 * max)
        .map_err(|e| Error::invalid(e.to_string()))
}

/// LS baseline `Q_R S^+`.
pub fn ls_baseline(received: &CMatrix, pilots: &CMatrix) -> Result<ChannelMatrix> {
    if received.ncols() != pilots.ncols() {
        return Err(Error::mismatch(
            "ls_baseline snapshot count",
            pilots.ncols(),
            received.ncols(),
        ));
    }
    ChannelMatrix::new(received * pseudo_inverse(pilots)?, ColumnKind::Estimated)
}

/// R-LS baseline `Q_R (S^H S + sigma^2 I_L)^-1 S^H`.
pub fn rls_baseline(received: &CMatrix, pilots: &CMatrix, noise_var: f64) -> Result<ChannelMatrix> {
    if received.ncols() != pilots.ncols() {
        return Err(Error::mismatch(
            "rls_baseline snapshot count",
            pilots.ncols(),
            received.ncols(),
        ));
    }
    if !(noise_var >= 0.0) {
        return Err(Error::invalid(format!("noise variance must be >= 0, got {noise_var}")));
    }
    let l = pilots.ncols();
    let gram = pilots.adjoint() * pilots + CMatrix::identity(l, l) * C64::new(noise_var, 0.0);
    let chol = Cholesky::new(gram).ok_or(Error::IllConditioned {
        condition: f64::INFINITY,
    })?;
    let weights = chol.solve(&pilots.adjoint());
    ChannelMatrix::new(received * weights, ColumnKind::Estimated)
}

/// Two-step location estimate and the channels reconstructed from it.
/// Columns follow peak order and carry no UE label; pair them with pilot
/// rows before calling [`correct_with_pilots`].
#[derive(Debug, Clone)]
pub struct ParametricEstimate {
    pub locations: TwoStepEstimate,
    pub uncorrected: ChannelMatrix,
}

pub fn parametric_estimate(
    block: &SnapshotBlock,
    k: usize,
    c_r: usize,
    cfg: &TwoStepConfig,
    g: &ArrayGeometry,
) -> Result<ParametricEstimate> {
    let locations = two_step_estimate(block, k, c_r, cfg, g)?;
    let uncorrected = reconstruct_channels(&locations.locations, g);
    Ok(ParametricEstimate { locations, uncorrected })
}

/// Fits the correctors for `uncorrected`, whose column `j` was transmitted
/// with pilot row `pilots[j]`, and applies them.
pub fn correct_with_pilots(
    uncorrected: &ChannelMatrix,
    pilots: &CMatrix,
    received: &CMatrix,
) -> Result<(ChannelMatrix, CorrectorVector)> {
    let problem = build_stacked(uncorrected.entries(), pilots, received)?;
    let alpha = estimate_correctors(&problem)?;
    Ok((apply_correction(uncorrected, &alpha)?, alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::UeLocation;
    use crate::signal::gen_pilots;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn geometry() -> ArrayGeometry {
        ArrayGeometry::new(100, 0.1 / std::f64::consts::SQRT_2, 0.1).unwrap()
    }

    fn four_locs() -> Vec<PolarLocation> {
        vec![
            PolarLocation::new(0.3, 0.1, 2.0).unwrap(),
            PolarLocation::new(-0.5, 0.2, 3.0).unwrap(),
            PolarLocation::new(0.1, -0.6, 5.0).unwrap(),
            PolarLocation::new(0.9, 0.4, 8.0).unwrap(),
        ]
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> CMatrix {
        gen_pilots(rows, cols, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn rel_err(a: &CMatrix, b: &CMatrix) -> f64 {
        (a - b).norm() / b.norm()
    }

    #[test]
    fn reconstruction_from_true_locations_matches_channel() {
        let g = geometry();
        let locs = four_locs();
        let cart: Vec<UeLocation> = locs.iter().map(|p| p.to_cartesian()).collect();
        let truth = ChannelMatrix::from_locations(&g, &cart);
        let rec = reconstruct_channels(&locs, &g);
        assert_eq!(rec.entries().shape(), (100, 4));
        assert!(rel_err(rec.entries(), truth.entries()) < 1e-12);
        assert!(rec.kinds().iter().all(|k| *k == ColumnKind::Estimated));
    }

    #[test]
    fn broadside_single_user_reconstruction() {
        let g = geometry();
        let rec = reconstruct_channels(&[PolarLocation::new(0.0, 0.0, 2.0).unwrap()], &g);
        let loc = UeLocation::new(0.0, 0.0, 2.0).unwrap();
        for n in 0..g.side() {
            for m in 0..g.side() {
                let want = crate::channel::channel_coefficient(&g, &loc, n, m);
                assert!((rec.entries()[(g.index(n, m), 0)] - want).norm() < 1e-15);
            }
        }
    }

    #[test]
    fn one_centimetre_range_error_correlation() {
        // frozen from an independent numpy evaluation of the closed form
        let g = geometry();
        let p = PolarLocation::new(0.3, 0.1, 2.0).unwrap();
        let c = p.to_cartesian();
        let a = array_response(&g, &c);
        let b = array_response(&g, &UeLocation::new(c.x, c.y, c.z + 0.01).unwrap());
        let rho = a.dotc(&b).norm() / (a.norm() * b.norm());
        assert!((rho - 0.999_915_122_188_004_8).abs() < 1e-12, "rho {rho}");
    }

    #[test]
    fn stacked_matrix_matches_index_formula() {
        for &(n, k, l) in &[(3, 2, 2), (3, 2, 1), (5, 1, 3)] {
            let a = random_matrix(n, k, 1);
            let s = random_matrix(k, l, 2);
            let q = random_matrix(n, l, 3);
            let p = build_stacked(&a, &s, &q).unwrap();
            assert_eq!(p.stacked.shape(), (l * n, k));
            for t in 0..l {
                for i in 0..n {
                    for j in 0..k {
                        assert_eq!(p.stacked[(t * n + i, j)], a[(i, j)] * s[(j, t)]);
                    }
                    assert_eq!(p.received[t * n + i], q[(i, t)]);
                }
            }
        }
    }

    #[test]
    fn stacked_rejects_bad_shapes() {
        let a = random_matrix(4, 2, 1);
        assert!(build_stacked(&a, &random_matrix(3, 2, 2), &random_matrix(4, 2, 3)).is_err());
        assert!(build_stacked(&a, &random_matrix(2, 2, 2), &random_matrix(4, 3, 3)).is_err());
    }

    #[test]
    fn exact_estimate_gives_unit_correctors() {
        let g = geometry();
        let a = reconstruct_channels(&four_locs(), &g);
        let s = random_matrix(4, 3, 5);
        let q = a.entries() * &s;
        let (corrected, alpha) = correct_with_pilots(&a, &s, &q).unwrap();
        for z in alpha.0.iter() {
            assert!((z - C64::new(1.0, 0.0)).norm() < 1e-9, "alpha {z}");
        }
        assert!(rel_err(corrected.entries(), a.entries()) < 1e-9);
    }

    #[test]
    fn per_column_gains_are_recovered() {
        let g = geometry();
        let truth = reconstruct_channels(&four_locs(), &g);
        let gains = [
            C64::new(2.0, 0.0),
            C64::new(0.0, -1.5),
            C64::new(0.3, 0.4),
            C64::new(-1.0, 1.0),
        ];
        let mut scaled = truth.entries().clone();
        for (j, c) in gains.iter().enumerate() {
            let mut col = scaled.column_mut(j);
            col /= *c;
        }
        let scaled = ChannelMatrix::new(scaled, ColumnKind::Estimated).unwrap();
        let s = random_matrix(4, 3, 6);
        let q = truth.entries() * &s;
        let (corrected, alpha) = correct_with_pilots(&scaled, &s, &q).unwrap();
        for (a, c) in alpha.0.iter().zip(gains.iter()) {
            assert!((a - c).norm() < 1e-9);
        }
        assert!(rel_err(corrected.entries(), truth.entries()) < 1e-9);
    }

    #[test]
    fn corrector_minimises_stacked_residual() {
        let a = random_matrix(12, 3, 7);
        let s = random_matrix(3, 2, 8);
        let q = random_matrix(12, 2, 9);
        let p = build_stacked(&a, &s, &q).unwrap();
        let alpha = estimate_correctors(&p).unwrap();
        let residual = |v: &CVector| (&p.received - &p.stacked * v).norm();
        let best = residual(&alpha.0);
        assert!(best <= residual(&CorrectorVector::ones(3).0) + 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..100 {
            let v = alpha.0.clone() + gen_pilots(3, 1, &mut rng).column(0) * C64::new(0.1, 0.0);
            assert!(best <= residual(&v) + 1e-12);
        }
    }

    #[test]
    fn duplicate_columns_are_ill_conditioned() {
        let col = random_matrix(8, 1, 11);
        let a = CMatrix::from_fn(8, 2, |i, _| col[(i, 0)]);
        // identical pilots make the two stacked columns identical too
        let s = CMatrix::from_element(2, 2, C64::new(1.0, 0.0));
        let q = random_matrix(8, 2, 12);
        let p = build_stacked(&a, &s, &q).unwrap();
        assert!(matches!(estimate_correctors(&p), Err(Error::IllConditioned { .. })));
    }

    #[test]
    fn apply_correction_scales_columns() {
        let a = ChannelMatrix::new(random_matrix(6, 2, 13), ColumnKind::Estimated).unwrap();
        let same = apply_correction(&a, &CorrectorVector::ones(2)).unwrap();
        assert_eq!(same.entries(), a.entries());
        let two = CorrectorVector(CVector::from_element(2, C64::new(2.0, 0.0)));
        let doubled = apply_correction(&a, &two).unwrap();
        assert_eq!(doubled.entries(), &(a.entries() * C64::new(2.0, 0.0)));
        assert!(apply_correction(&a, &CorrectorVector::ones(3)).is_err());
    }

    fn assert_penrose(s: &CMatrix, p: &CMatrix) {
        let tol = 1e-10;
        assert!((s * p * s - s).norm() < tol * s.norm());
        assert!((p * s * p - p).norm() < tol * p.norm());
        let sp = s * p;
        let ps = p * s;
        assert!((&sp - sp.adjoint()).norm() < tol * sp.norm());
        assert!((&ps - ps.adjoint()).norm() < tol * ps.norm());
    }

    #[test]
    fn pseudo_inverse_satisfies_penrose_conditions() {
        for &(r, c) in &[(4, 3), (3, 4), (4, 4), (1, 5)] {
            let s = random_matrix(r, c, 14 + r as u64 * 10 + c as u64);
            assert_penrose(&s, &pseudo_inverse(&s).unwrap());
        }
        // rank one, takes the SVD route
        let u = random_matrix(4, 1, 30);
        let v = random_matrix(1, 3, 31);
        let s = &u * &v;
        assert_penrose(&s, &pseudo_inverse(&s).unwrap());
        assert!(pseudo_inverse(&CMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn ls_is_exact_for_square_noiseless_pilots() {
        let g = geometry();
        let a = reconstruct_channels(&four_locs(), &g);
        let s = random_matrix(4, 4, 15);
        let q = a.entries() * &s;
        let est = ls_baseline(&q, &s).unwrap();
        assert!(rel_err(est.entries(), a.entries()) < 1e-10);
    }

    #[test]
    fn underdetermined_ls_residual_is_projection_residual() {
        // L = 3 < K = 4: Q_R S^+ S projects each row of Q_R onto the row space
        // of S. Oracle: Gram-Schmidt basis of that row space.
        let s = random_matrix(4, 3, 16);
        let q = random_matrix(10, 3, 17);
        let est = ls_baseline(&q, &s).unwrap();
        let fitted = est.entries() * &s;

        let mut basis: Vec<CVector> = Vec::new();
        for i in 0..s.nrows() {
            let mut v: CVector = s.row(i).transpose().map(|z| z.conj());
            for b in &basis {
                let c = b.dotc(&v);
                v -= b * c;
            }
            if v.norm() > 1e-10 {
                basis.push(v.normalize());
            }
        }
        for i in 0..q.nrows() {
            let row: CVector = q.row(i).transpose().map(|z| z.conj());
            let mut proj = CVector::zeros(row.len());
            for b in &basis {
                proj += b * b.dotc(&row);
            }
            let want = (&row - &proj).norm();
            let got = (q.row(i) - fitted.row(i)).norm();
            assert!((want - got).abs() < 1e-10, "row {i}: {want} vs {got}");
        }
    }

    #[test]
    fn rls_with_zero_noise_equals_ls() {
        // needs S^H S invertible, i.e. L <= K
        let s = random_matrix(4, 3, 18);
        let q = random_matrix(9, 3, 19);
        let ls = ls_baseline(&q, &s).unwrap();
        let rls = rls_baseline(&q, &s, 0.0).unwrap();
        assert!(rel_err(rls.entries(), ls.entries()) < 1e-10);
    }

    #[test]
    fn rls_shrinks_to_zero_for_large_noise() {
        let s = random_matrix(4, 3, 20);
        let q = random_matrix(9, 3, 21);
        let rls = rls_baseline(&q, &s, 1e12).unwrap();
        assert!(rls.entries().norm() < 1e-9 * q.norm());
        assert!(rls_baseline(&q, &s, -1.0).is_err());
    }

    #[test]
    fn rls_matches_explicit_inverse() {
        let s = random_matrix(4, 3, 22);
        let q = random_matrix(9, 3, 23);
        let sigma2 = 0.37;
        let gram = s.adjoint() * &s + CMatrix::identity(3, 3) * C64::new(sigma2, 0.0);
        let want = &q * gram.try_inverse().unwrap() * s.adjoint();
        let got = rls_baseline(&q, &s, sigma2).unwrap();
        assert!(rel_err(got.entries(), &want) < 1e-10);
    }

    #[test]
    fn ls_matches_explicit_normal_equations() {
        let s = random_matrix(3, 5, 24);
        let q = random_matrix(9, 5, 25);
        let want = &q * s.adjoint() * (&s * s.adjoint()).try_inverse().unwrap();
        let got = ls_baseline(&q, &s).unwrap();
        assert!(rel_err(got.entries(), &want) < 1e-10);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn baselines_are_linear_in_received(seed in any::<u64>(), re in -3.0f64..3.0, im in -3.0f64..3.0) {
            let s = random_matrix(3, 4, seed);
            let q1 = random_matrix(6, 4, seed.wrapping_add(1));
            let q2 = random_matrix(6, 4, seed.wrapping_add(2));
            let c = C64::new(re, im);
            let combo = &q1 * c + &q2;
            for f in [
                |q: &CMatrix, s: &CMatrix| ls_baseline(q, s).unwrap().into_entries(),
                |q: &CMatrix, s: &CMatrix| rls_baseline(q, s, 0.2).unwrap().into_entries(),
            ] {
                let lhs = f(&combo, &s);
                let rhs = f(&q1, &s) * c + f(&q2, &s);
                prop_assert!((&lhs - &rhs).norm() <= 1e-10 * (1.0 + rhs.norm()));
            }
        }

        #[test]
        fn correctors_recover_random_gains(seed in any::<u64>(), re in 0.1f64..3.0, im in -3.0f64..3.0) {
            let a = random_matrix(16, 2, seed);
            let s = random_matrix(2, 3, seed.wrapping_add(7));
            let gain = C64::new(re, im);
            let q = &a * &s * gain;
            let est = ChannelMatrix::new(a, ColumnKind::Estimated).unwrap();
            let (_, alpha) = correct_with_pilots(&est, &s, &q).unwrap();
            for z in alpha.0.iter() {
                prop_assert!((z - gain).norm() < 1e-9 * gain.norm());
            }
        }
    }
}
