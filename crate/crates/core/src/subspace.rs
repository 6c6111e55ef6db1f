//! Covariance estimation, spatial smoothing and the noise subspace.
//!
//! Spatial smoothing reshapes each received snapshot into its `side x side`
//! element grid and slides an `N_d x N_d` window (`N_d = side - c_r`) over
//! all `T^2` offsets (`T = c_r + 1`). Every window is one extra snapshot, so
//! the smoothed covariance averages `L T^2` outer products.

use nalgebra::linalg::SymmetricEigen;
use num_complex::Complex64 as C64;

use crate::error::{Error, Result};
use crate::signal::SnapshotBlock;
use crate::{CMatrix, CVector};

/// Subarray layout used by a smoothed covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Smoothing {
    pub c_r: usize,
    /// Window offsets per axis, `c_r + 1`.
    pub t: usize,
    /// Window side, `side - c_r`.
    pub n_d: usize,
}

impl Smoothing {
    pub fn new(side: usize, c_r: usize) -> Result<Self> {
        if c_r >= side {
            return Err(Error::invalid(format!(
                "smoothing parameter c_r = {c_r} must be below the array side {side}"
            )));
        }
        Ok(Self {
            c_r,
            t: c_r + 1,
            n_d: side - c_r,
        })
    }

    pub fn subarrays(&self) -> usize {
        self.t * self.t
    }

    pub fn subarray_len(&self) -> usize {
        self.n_d * self.n_d
    }
}

/// Hermitian sample covariance and the number of snapshots behind it.
#[derive(Debug, Clone)]
pub struct CovarianceEstimate {
    pub matrix: CMatrix,
    pub snapshot_count: usize,
    pub smoothing: Option<Smoothing>,
}

impl CovarianceEstimate {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }
}

/// Eigenpairs of a Hermitian matrix, eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct HermitianEigen {
    pub values: Vec<f64>,
    /// Unitary matrix whose column `i` pairs with `values[i]`.
    pub vectors: CMatrix,
}

/// Noise and signal eigenvectors of a covariance for `sources` emitters.
#[derive(Debug, Clone)]
pub struct NoiseSubspace {
    /// `M x (M - K)`, eigenvectors of the `M - K` smallest eigenvalues.
    pub noise: CMatrix,
    /// `M x K`, the remaining eigenvectors.
    pub signal: CMatrix,
    pub eigenvalues: Vec<f64>,
    pub sources: usize,
}

impl NoiseSubspace {
    pub fn dim(&self) -> usize {
        self.noise.nrows()
    }

    /// `a^H U_n U_n^H a`. Evaluated through whichever basis is narrower;
    /// since `[U_n U_s]` is unitary, `||U_n^H a||^2 = ||a||^2 - ||U_s^H a||^2`.
    pub fn projection_energy(&self, a: &[C64]) -> f64 {
        debug_assert_eq!(a.len(), self.dim());
        if self.signal.ncols() <= self.noise.ncols() {
            let total: f64 = a.iter().map(|z| z.norm_sqr()).sum();
            (total - basis_energy(&self.signal, a)).max(0.0)
        } else {
            basis_energy(&self.noise, a)
        }
    }
}

/// `||B^H a||^2` for a column-major basis `B`.
#[inline]
fn basis_energy(basis: &CMatrix, a: &[C64]) -> f64 {
    basis
        .column_iter()
        .map(|col| {
            col.iter()
                .zip(a)
                .fold(C64::new(0.0, 0.0), |acc, (u, x)| acc + u.conj() * x)
                .norm_sqr()
        })
        .sum()
}

/// `(1 / count) sum q q^H` over equal-length snapshots.
pub fn sample_covariance(snapshots: &[CVector]) -> Result<CovarianceEstimate> {
    let first = snapshots.first().ok_or(Error::EmptyInput {
        context: "sample_covariance",
    })?;
    let m = first.len();
    let mut data = CMatrix::zeros(m, snapshots.len());
    for (j, q) in snapshots.iter().enumerate() {
        if q.len() != m {
            return Err(Error::mismatch("sample_covariance snapshot length", m, q.len()));
        }
        data.set_column(j, q);
    }
    Ok(covariance_of_columns(&data, None))
}

fn covariance_of_columns(data: &CMatrix, smoothing: Option<Smoothing>) -> CovarianceEstimate {
    let count = data.ncols();
    let mut r = data * data.adjoint();
    r /= C64::new(count as f64, 0.0);
    symmetrize(&mut r);
    CovarianceEstimate {
        matrix: r,
        snapshot_count: count,
        smoothing,
    }
}

fn symmetrize(r: &mut CMatrix) {
    let n = r.nrows();
    for i in 0..n {
        r[(i, i)] = C64::new(r[(i, i)].re, 0.0);
        for j in (i + 1)..n {
            let v = (r[(i, j)] + r[(j, i)].conj()) * 0.5;
            r[(i, j)] = v;
            r[(j, i)] = v.conj();
        }
    }
}

/// Reshapes a length-`side^2` snapshot into its `side x side` element grid,
/// `Q[(n, m)] = q[n * side + m]`.
pub fn reshape_snapshot(q: &[C64], side: usize) -> Result<CMatrix> {
    if q.len() != side * side {
        return Err(Error::mismatch("reshape_snapshot", side * side, q.len()));
    }
    Ok(CMatrix::from_fn(side, side, |n, m| q[n * side + m]))
}

/// All `T^2` vectorized `N_d x N_d` windows of the element grid `q`, window
/// offset `t_x` outer and `t_y` inner, each window read row-major.
pub fn extract_subarrays(q: &CMatrix, c_r: usize) -> Result<Vec<CVector>> {
    if q.nrows() != q.ncols() {
        return Err(Error::mismatch(
            "extract_subarrays square grid",
            format!("{0}x{0}", q.nrows()),
            format!("{}x{}", q.nrows(), q.ncols()),
        ));
    }
    let s = Smoothing::new(q.nrows(), c_r)?;
    let mut out = Vec::with_capacity(s.subarrays());
    for tx in 0..s.t {
        for ty in 0..s.t {
            out.push(CVector::from_iterator(
                s.subarray_len(),
                (0..s.n_d).flat_map(|i| (0..s.n_d).map(move |j| q[(tx + i, ty + j)])),
            ));
        }
    }
    Ok(out)
}

/// Spatially smoothed covariance `R_{L,T}` of a snapshot block.
pub fn smoothed_covariance(block: &SnapshotBlock, c_r: usize) -> Result<CovarianceEstimate> {
    let n = block.n_antennas();
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n {
        return Err(Error::invalid(format!("{n} antennas do not form a square grid")));
    }
    let s = Smoothing::new(side, c_r)?;
    let l = block.n_snapshots();
    if l == 0 {
        return Err(Error::EmptyInput {
            context: "smoothed_covariance",
        });
    }
    let mut data = CMatrix::zeros(s.subarray_len(), l * s.subarrays());
    for snap in 0..l {
        let q = reshape_snapshot(block.received.column(snap).as_slice(), side)?;
        for (t, v) in extract_subarrays(&q, c_r)?.into_iter().enumerate() {
            data.set_column(snap * s.subarrays() + t, &v);
        }
    }
    Ok(covariance_of_columns(&data, Some(s)))
}

/// Eigendecomposition of a Hermitian matrix.
pub fn hermitian_eig(r: &CMatrix) -> Result<HermitianEigen> {
    if r.nrows() != r.ncols() {
        return Err(Error::mismatch("hermitian_eig square matrix", r.nrows(), r.ncols()));
    }
    let scale = r.norm();
    let deviation = (r - r.adjoint()).norm();
    if deviation > 1e-10 * scale {
        return Err(Error::NotHermitian {
            deviation: deviation / scale,
        });
    }
    let mut herm = r.clone();
    symmetrize(&mut herm);
    let eig = SymmetricEigen::new(herm);
    let mut order: Vec<usize> = (0..r.nrows()).collect();
    // stable: equal eigenvalues keep their solver order
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = CMatrix::from_fn(r.nrows(), r.ncols(), |row, col| eig.eigenvectors[(row, order[col])]);
    Ok(HermitianEigen { values, vectors })
}

/// Eigenvectors of the `M - K` smallest eigenvalues of `r`.
pub fn noise_subspace(r: &CovarianceEstimate, sources: usize) -> Result<NoiseSubspace> {
    let m = r.dim();
    if sources >= m {
        return Err(Error::invalid(format!(
            "source count {sources} must be below the covariance dimension {m}"
        )));
    }
    let eig = hermitian_eig(&r.matrix)?;
    let split = m - sources;
    Ok(NoiseSubspace {
        noise: eig.vectors.columns(0, split).into_owned(),
        signal: eig.vectors.columns(split, sources).into_owned(),
        eigenvalues: eig.values,
        sources,
    })
}
