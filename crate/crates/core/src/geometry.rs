//! Uniform planar array layout and UE coordinates.
//!
//! Elements sit edge-to-edge on a square grid in the `xy`-plane, centered on
//! the origin. Element `(n, m)` (zero-based row and column) is stored at
//! linear index `n * side + m`; every vector in the crate uses this
//! row-major order.

use crate::error::{Error, Result};

/// Center of one array element. All elements lie in the `z = 0` plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElementCenter {
    pub x: f64,
    pub y: f64,
}

/// Square uniform planar array.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayGeometry {
    side: usize,
    element_diag: f64,
    wavelength: f64,
    centers: Vec<ElementCenter>,
}

/// Near-field region of an array: from `d_b = 2 D sqrt(N)` out to the
/// Fraunhofer array distance `d_fa = 2 (D sqrt(N))^2 / lambda`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NearFieldBounds {
    pub d_b: f64,
    pub d_fa: f64,
}

impl ArrayGeometry {
    /// Builds an array of `n_antennas` elements with diagonal `element_diag`
    /// (so the pitch is `element_diag / sqrt(2)`) at the given wavelength.
    pub fn new(n_antennas: usize, element_diag: f64, wavelength: f64) -> Result<Self> {
        let side = exact_sqrt(n_antennas)
            .ok_or_else(|| Error::invalid(format!("antenna count {n_antennas} is not a perfect square")))?;
        if side < 2 {
            return Err(Error::invalid(format!(
                "antenna count must be at least 4, got {n_antennas}"
            )));
        }
        Self::with_side(side, element_diag, wavelength)
    }

    fn with_side(side: usize, element_diag: f64, wavelength: f64) -> Result<Self> {
        if !(element_diag > 0.0 && element_diag.is_finite()) {
            return Err(Error::invalid(format!(
                "element diagonal must be positive, got {element_diag}"
            )));
        }
        if !(wavelength > 0.0 && wavelength.is_finite()) {
            return Err(Error::invalid(format!("wavelength must be positive, got {wavelength}")));
        }
        let pitch = element_diag / std::f64::consts::SQRT_2;
        let offset = (side as f64 - 1.0) / 2.0;
        let coord = |i: usize| (i as f64 - offset) * pitch;
        let centers = (0..side)
            .flat_map(|n| (0..side).map(move |m| (n, m)))
            .map(|(n, m)| ElementCenter {
                x: coord(n),
                y: coord(m),
            })
            .collect();
        Ok(Self {
            side,
            element_diag,
            wavelength,
            centers,
        })
    }

    /// The centered `(side - c_r) x (side - c_r)` subarray used after spatial
    /// smoothing. Sharing the parent's center keeps estimated locations in the
    /// parent's coordinate frame.
    pub fn subarray(&self, c_r: usize) -> Result<Self> {
        if c_r >= self.side {
            return Err(Error::invalid(format!(
                "smoothing parameter {c_r} must be below the array side {}",
                self.side
            )));
        }
        Self::with_side(self.side - c_r, self.element_diag, self.wavelength)
    }

    pub fn n_antennas(&self) -> usize {
        self.side * self.side
    }

    /// Elements per row (`sqrt(N)`).
    pub fn side(&self) -> usize {
        self.side
    }

    pub fn element_diag(&self) -> f64 {
        self.element_diag
    }

    /// Center-to-center spacing along either axis.
    pub fn pitch(&self) -> f64 {
        self.element_diag / std::f64::consts::SQRT_2
    }

    pub fn wavelength(&self) -> f64 {
        self.wavelength
    }

    pub fn wavenumber(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.wavelength
    }

    pub fn centers(&self) -> &[ElementCenter] {
        &self.centers
    }

    /// Linear index of element `(n, m)`, zero-based.
    #[inline]
    pub fn index(&self, n: usize, m: usize) -> usize {
        n * self.side + m
    }

    #[inline]
    pub fn center(&self, n: usize, m: usize) -> ElementCenter {
        self.centers[self.index(n, m)]
    }

    /// Per-axis center coordinates; `axis_coords()[n]` is both the `x` of row
    /// `n` and the `y` of column `n`.
    pub fn axis_coords(&self) -> Vec<f64> {
        (0..self.side).map(|n| self.centers[self.index(n, 0)].x).collect()
    }

    pub fn near_field_bounds(&self) -> NearFieldBounds {
        let aperture = self.element_diag * (self.n_antennas() as f64).sqrt();
        NearFieldBounds {
            d_b: 2.0 * aperture,
            d_fa: 2.0 * aperture * aperture / self.wavelength,
        }
    }
}

fn exact_sqrt(n: usize) -> Option<usize> {
    let r = (n as f64).sqrt().round() as usize;
    (r * r == n).then_some(r)
}

/// Cartesian UE position in meters, in front of the array (`z > 0`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UeLocation {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

/// UE position as azimuth, elevation (radians) and range (meters):
/// `x = d cos(el) sin(az)`, `y = d sin(el)`, `z = d cos(el) cos(az)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolarLocation {
    pub azimuth: f64,
    pub elevation: f64,
    pub distance: f64,
}

impl UeLocation {
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self> {
        if !(z > 0.0) || !x.is_finite() || !y.is_finite() || !z.is_finite() {
            return Err(Error::invalid(format!(
                "UE must be in front of the array with finite coordinates, got ({x}, {y}, {z})"
            )));
        }
        Ok(Self { x, y, z })
    }

    pub fn distance_to(&self, c: ElementCenter) -> f64 {
        let dx = c.x - self.x;
        let dy = c.y - self.y;
        (dx * dx + dy * dy + self.z * self.z).sqrt()
    }

    pub fn to_polar(&self) -> PolarLocation {
        let d = (self.x * self.x + self.y * self.y + self.z * self.z).sqrt();
        PolarLocation {
            azimuth: self.x.atan2(self.z),
            elevation: (self.y / d).asin(),
            distance: d,
        }
    }
}

impl PolarLocation {
    pub fn new(azimuth: f64, elevation: f64, distance: f64) -> Result<Self> {
        let half_pi = std::f64::consts::FRAC_PI_2;
        if !(distance > 0.0 && distance.is_finite()) {
            return Err(Error::invalid(format!("distance must be positive, got {distance}")));
        }
        if !(azimuth.abs() < half_pi) || !(elevation.abs() < half_pi) {
            return Err(Error::invalid(format!(
                "angles must lie in (-pi/2, pi/2), got azimuth {azimuth}, elevation {elevation}"
            )));
        }
        Ok(Self {
            azimuth,
            elevation,
            distance,
        })
    }

    /// Direction cosines `(cos(el) sin(az), sin(el))` along `x` and `y`.
    #[inline]
    pub fn direction_xy(&self) -> (f64, f64) {
        let (sin_el, cos_el) = self.elevation.sin_cos();
        (cos_el * self.azimuth.sin(), sin_el)
    }

    pub fn to_cartesian(&self) -> UeLocation {
        let (sin_el, cos_el) = self.elevation.sin_cos();
        let (sin_az, cos_az) = self.azimuth.sin_cos();
        UeLocation {
            x: self.distance * cos_el * sin_az,
            y: self.distance * sin_el,
            z: self.distance * cos_el * cos_az,
        }
    }
}

/// Fresnel (first-order Taylor) approximation of the distance from `p` to an
/// element center.
#[inline]
pub fn fresnel_distance(p: &PolarLocation, center: ElementCenter) -> f64 {
    let (ux, uy) = p.direction_xy();
    p.distance + (center.x * center.x + center.y * center.y) / (2.0 * p.distance) - ux * center.x - uy * center.y
}
