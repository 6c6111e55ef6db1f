//! Line-of-sight channel model and array response vectors.
//!
//! Three response families are used:
//!
//! - [`array_response`]: the closed-form near-field channel of each element,
//!   amplitude and spherical phase, evaluated at the element center.
//! - [`farfield_response`]: unit-modulus plane-wave steering vector in
//!   `(azimuth, elevation)`.
//! - [`polar_response`]: unit-modulus vector whose phase follows the Fresnel
//!   distance for a given `(azimuth, elevation, distance)`.
//!
//! [`channel_exact_integral`] integrates the incident field over an element
//! aperture and is only used to validate the closed form.

use num_complex::Complex64 as C64;

use crate::error::{Error, Result};
use crate::geometry::{fresnel_distance, ArrayGeometry, PolarLocation, UeLocation};
use crate::quadrature::gauss_legendre;
use crate::{CMatrix, CVector};

/// Whether a channel column is a ground-truth response or an estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnKind {
    True,
    Estimated,
}

/// `N x K` channel matrix, one column per UE.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMatrix {
    entries: CMatrix,
    kinds: Vec<ColumnKind>,
}

impl ChannelMatrix {
    pub fn new(entries: CMatrix, kind: ColumnKind) -> Result<Self> {
        if entries.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::invalid("channel matrix has non-finite entries"));
        }
        let kinds = vec![kind; entries.ncols()];
        Ok(Self { entries, kinds })
    }

    /// True channels of every UE.
    pub fn from_locations(g: &ArrayGeometry, locs: &[UeLocation]) -> Self {
        let mut entries = CMatrix::zeros(g.n_antennas(), locs.len());
        for (k, loc) in locs.iter().enumerate() {
            entries.set_column(k, &array_response(g, loc));
        }
        Self {
            entries,
            kinds: vec![ColumnKind::True; locs.len()],
        }
    }

    pub fn entries(&self) -> &CMatrix {
        &self.entries
    }

    pub fn into_entries(self) -> CMatrix {
        self.entries
    }

    pub fn kinds(&self) -> &[ColumnKind] {
        &self.kinds
    }

    pub fn n_antennas(&self) -> usize {
        self.entries.nrows()
    }

    pub fn n_users(&self) -> usize {
        self.entries.ncols()
    }

    pub fn column(&self, k: usize) -> CVector {
        self.entries.column(k).into_owned()
    }
}

/// Closed-form channel from `loc` to element `(n, m)`:
/// `D / sqrt(8 pi) * sqrt(z ((x_n - x)^2 + z^2)) / r^(5/2) * exp(-i 2 pi r / lambda)`.
pub fn channel_coefficient(g: &ArrayGeometry, loc: &UeLocation, n: usize, m: usize) -> C64 {
    let c = g.center(n, m);
    coefficient_at(g, loc, c.x, loc.distance_to(c))
}

#[inline]
fn coefficient_at(g: &ArrayGeometry, loc: &UeLocation, xc: f64, r: f64) -> C64 {
    let dx = xc - loc.x;
    let amp = g.element_diag() / (8.0 * std::f64::consts::PI).sqrt() * (loc.z * (dx * dx + loc.z * loc.z)).sqrt()
        / r.powf(2.5);
    C64::from_polar(amp, -g.wavenumber() * r)
}

/// Near-field array response `a(x, y, z)`, row-major over elements.
pub fn array_response(g: &ArrayGeometry, loc: &UeLocation) -> CVector {
    CVector::from_iterator(
        g.n_antennas(),
        g.centers()
            .iter()
            .map(|&c| coefficient_at(g, loc, c.x, loc.distance_to(c))),
    )
}

/// Plane-wave steering vector with entries
/// `exp(+i k (cos(el) sin(az) x_n + sin(el) y_m))`.
pub fn farfield_response(g: &ArrayGeometry, azimuth: f64, elevation: f64) -> CVector {
    let mut out = CVector::zeros(g.n_antennas());
    fill_farfield(g, &g.axis_coords(), azimuth, elevation, out.as_mut_slice());
    out
}

/// Writes the far-field response into `out`; the response factors into a row
/// term and a column term so only `2 * side` exponentials are needed.
pub(crate) fn fill_farfield(g: &ArrayGeometry, coords: &[f64], azimuth: f64, elevation: f64, out: &mut [C64]) {
    let k = g.wavenumber();
    let (sin_el, cos_el) = elevation.sin_cos();
    let ux = cos_el * azimuth.sin();
    let side = g.side();
    let col: Vec<C64> = coords.iter().map(|&y| C64::cis(k * sin_el * y)).collect();
    for (n, &x) in coords.iter().enumerate() {
        let row = C64::cis(k * ux * x);
        for (o, c) in out[n * side..(n + 1) * side].iter_mut().zip(&col) {
            *o = row * c;
        }
    }
}

/// Phase-only Fresnel response: entries `exp(-i k r_fresnel)` where
/// `r_fresnel` is [`fresnel_distance`] to each element. The common phase
/// `exp(-i k d)` is kept.
pub fn polar_response(g: &ArrayGeometry, p: &PolarLocation) -> CVector {
    let k = g.wavenumber();
    CVector::from_iterator(
        g.n_antennas(),
        g.centers().iter().map(|&c| C64::cis(-k * fresnel_distance(p, c))),
    )
}

/// Result of an aperture quadrature, with a flag telling whether doubling
/// the order moved the value by more than `1e-6` relative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureResult {
    pub value: C64,
    pub converged: bool,
}

/// Tensor Gauss-Legendre integral of `f(x, y)` over element `(n, m)`, scaled
/// by `sqrt(2 / D^2)`.
pub fn element_integral<F>(g: &ArrayGeometry, n: usize, m: usize, order: usize, f: F) -> C64
where
    F: Fn(f64, f64) -> C64,
{
    let (nodes, weights) = gauss_legendre(order);
    let c = g.center(n, m);
    let half = g.pitch() / 2.0;
    let mut acc = C64::new(0.0, 0.0);
    for (tx, wx) in nodes.iter().zip(&weights) {
        for (ty, wy) in nodes.iter().zip(&weights) {
            acc += f(c.x + half * tx, c.y + half * ty) * (wx * wy);
        }
    }
    acc * (half * half) * (2.0f64.sqrt() / g.element_diag())
}

/// Channel of element `(n, m)` obtained by integrating the normalized
/// incident field over the element aperture.
pub fn channel_exact_integral(
    g: &ArrayGeometry,
    loc: &UeLocation,
    n: usize,
    m: usize,
    order: usize,
) -> Result<QuadratureResult> {
    if order < 2 {
        return Err(Error::invalid(format!("quadrature order must be >= 2, got {order}")));
    }
    let k = g.wavenumber();
    let norm = 1.0 / (4.0 * std::f64::consts::PI).sqrt();
    let field = |x: f64, y: f64| {
        let dx = x - loc.x;
        let dy = y - loc.y;
        let r = (dx * dx + dy * dy + loc.z * loc.z).sqrt();
        let amp = norm * (loc.z * (dx * dx + loc.z * loc.z)).sqrt() / r.powf(2.5);
        C64::from_polar(amp, -k * r)
    };
    let value = element_integral(g, n, m, order, field);
    let refined = element_integral(g, n, m, 2 * order, field);
    let converged = (refined - value).norm() <= 1e-6 * refined.norm();
    Ok(QuadratureResult { value, converged })
}
