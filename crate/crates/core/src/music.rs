//! MUSIC spectra and the two-step location search.
//!
//! Every spectrum value is `1 / (a^H U_n U_n^H a + eps)` with
//! `eps = 1e-15 ||a||^2`, where `a` is the steering vector for one grid
//! point (unit-normalized in the joint 3D search). The two-step search evaluates one angular spectrum with the
//! plane-wave response, takes the `K` tallest strict local maxima, then for
//! each of them scans a distance axis with the Fresnel-phase response. With
//! `A` angular points and `D` distance points that is `A + K D` evaluations
//! instead of the `A D` of a joint search.

use std::io::Write;

use num_complex::Complex64 as C64;
use rayon::prelude::*;

use crate::channel::{array_response, fill_farfield, polar_response};
use crate::error::{Error, Result};
use crate::geometry::{ArrayGeometry, PolarLocation, UeLocation};
use crate::numfmt::format_float;
use crate::signal::SnapshotBlock;
use crate::subspace::{noise_subspace, smoothed_covariance, NoiseSubspace};

const EPS_GUARD: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AxisKind {
    X,
    Y,
    Z,
    Azimuth,
    Elevation,
    Distance,
}

impl AxisKind {
    fn is_length(self) -> bool {
        matches!(self, AxisKind::Z | AxisKind::Distance)
    }
}

/// How points are laid out between `min` and `max`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Spacing {
    #[default]
    Uniform,
    /// Uniform in `1 / value`; denser at short range.
    InverseDistance,
}

impl std::str::FromStr for Spacing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Spacing::Uniform),
            "inverse" | "inverse_distance" => Ok(Spacing::InverseDistance),
            other => Err(Error::Config(format!(
                "spacing must be `uniform` or `inverse`, got `{other}`"
            ))),
        }
    }
}

/// One sampled search axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    pub kind: AxisKind,
    pub min: f64,
    pub max: f64,
    pub points: usize,
    pub spacing: Spacing,
}

impl Axis {
    pub fn new(kind: AxisKind, min: f64, max: f64, points: usize, spacing: Spacing) -> Result<Self> {
        if points < 2 || !(min < max) || !min.is_finite() || !max.is_finite() {
            return Err(Error::invalid(format!(
                "axis {kind:?} needs at least 2 points and min < max, got {points} on [{min}, {max}]"
            )));
        }
        if (kind.is_length() || spacing == Spacing::InverseDistance) && min <= 0.0 {
            return Err(Error::invalid(format!(
                "axis {kind:?} must be strictly positive, got min {min}"
            )));
        }
        Ok(Self {
            kind,
            min,
            max,
            points,
            spacing,
        })
    }

    pub fn uniform(kind: AxisKind, min: f64, max: f64, points: usize) -> Result<Self> {
        Self::new(kind, min, max, points, Spacing::Uniform)
    }

    /// A single-point axis, used to take a planar slice of a 3D grid. It has
    /// no neighbors, so it never constrains peak detection.
    pub fn fixed(kind: AxisKind, value: f64) -> Self {
        Self {
            kind,
            min: value,
            max: value,
            points: 1,
            spacing: Spacing::Uniform,
        }
    }

    pub fn value(&self, i: usize) -> f64 {
        if self.points == 1 {
            return self.min;
        }
        if i == 0 {
            return self.min;
        }
        if i + 1 == self.points {
            return self.max;
        }
        let frac = i as f64 / (self.points - 1) as f64;
        match self.spacing {
            Spacing::Uniform => self.min + frac * (self.max - self.min),
            Spacing::InverseDistance => {
                let (near, far) = (1.0 / self.min, 1.0 / self.max);
                1.0 / (near - frac * (near - far))
            }
        }
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.points).map(|i| self.value(i)).collect()
    }
}

/// Cartesian product of axes; linear index is row-major (first axis outer).
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub axes: Vec<Axis>,
}

impl GridSpec {
    pub fn new(axes: Vec<Axis>) -> Result<Self> {
        if axes.is_empty() || axes.len() > 3 {
            return Err(Error::invalid(format!("grids have 1 to 3 axes, got {}", axes.len())));
        }
        Ok(Self { axes })
    }

    pub fn angular(azimuth: Axis, elevation: Axis) -> Result<Self> {
        Self::new(vec![azimuth, elevation])
    }

    pub fn cartesian(x: Axis, y: Axis, z: Axis) -> Result<Self> {
        Self::new(vec![x, y, z])
    }

    pub fn shape(&self) -> Vec<usize> {
        self.axes.iter().map(|a| a.points).collect()
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.points).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-axis indices of a linear index.
    pub fn unravel(&self, mut linear: usize) -> Vec<usize> {
        let mut idx = vec![0; self.axes.len()];
        for (slot, axis) in idx.iter_mut().zip(&self.axes).rev() {
            *slot = linear % axis.points;
            linear /= axis.points;
        }
        idx
    }

    pub fn coords(&self, linear: usize) -> Vec<f64> {
        self.unravel(linear)
            .into_iter()
            .zip(&self.axes)
            .map(|(i, a)| a.value(i))
            .collect()
    }

    fn expect_kinds(&self, kinds: &[AxisKind], context: &'static str) -> Result<()> {
        let actual: Vec<AxisKind> = self.axes.iter().map(|a| a.kind).collect();
        if actual != kinds {
            return Err(Error::mismatch(context, format!("{kinds:?}"), format!("{actual:?}")));
        }
        Ok(())
    }
}

/// Sampled MUSIC spectrum.
#[derive(Debug, Clone)]
pub struct SpectrumGrid {
    pub grid: GridSpec,
    /// One strictly positive value per grid point, row-major.
    pub values: Vec<f64>,
    /// Number of quotient evaluations spent producing `values`.
    pub evaluations: u64,
}

impl SpectrumGrid {
    pub fn dimensionality(&self) -> usize {
        self.grid.axes.len()
    }

    pub fn argmax(&self) -> usize {
        // first index wins ties
        self.values
            .iter()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |best, (i, &v)| if v > best.1 { (i, v) } else { best },
            )
            .0
    }

    /// Writes `axis,value`, `axis1,axis2,value` or `axis1,axis2,axis3,value`
    /// rows over the non-singleton axes. Angles in radians, lengths in meters.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let live: Vec<usize> = (0..self.grid.axes.len())
            .filter(|&i| self.grid.axes[i].points > 1)
            .collect();
        let header = match live.len() {
            0 | 1 => "axis,value".to_string(),
            n => {
                let names: Vec<String> = (1..=n).map(|i| format!("axis{i}")).collect();
                format!("{},value", names.join(","))
            }
        };
        writeln!(w, "{header}")?;
        for (linear, value) in self.values.iter().enumerate() {
            let coords = self.grid.coords(linear);
            let mut row: Vec<String> = live.iter().map(|&i| format_float(coords[i])).collect();
            if live.is_empty() {
                row.push(format_float(coords[0]));
            }
            row.push(format_float(*value));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// One detected peak.
#[derive(Debug, Clone, PartialEq)]
pub struct Peak {
    pub linear: usize,
    pub coords: Vec<f64>,
    pub value: f64,
}

/// Up to `requested` peaks, tallest first.
#[derive(Debug, Clone, PartialEq)]
pub struct PeakSet {
    pub peaks: Vec<Peak>,
    pub requested: usize,
}

impl PeakSet {
    pub fn found(&self) -> usize {
        self.peaks.len()
    }

    /// Fewer strict local maxima than requested.
    pub fn shortfall(&self) -> bool {
        self.peaks.len() < self.requested
    }
}

#[inline]
fn quotient(un: &NoiseSubspace, a: &[C64]) -> f64 {
    let norm: f64 = a.iter().map(|z| z.norm_sqr()).sum();
    1.0 / (un.projection_energy(a) + EPS_GUARD * norm)
}

fn check_dim(un: &NoiseSubspace, g: &ArrayGeometry, context: &'static str) -> Result<()> {
    if un.dim() != g.n_antennas() {
        return Err(Error::mismatch(context, g.n_antennas(), un.dim()));
    }
    Ok(())
}

fn evaluate<F>(grid: &GridSpec, m: usize, fill: F) -> Vec<f64>
where
    F: Fn(&[f64], &mut [C64]) -> f64 + Sync,
{
    (0..grid.len())
        .into_par_iter()
        .map_init(|| vec![C64::new(0.0, 0.0); m], |buf, i| fill(&grid.coords(i), buf))
        .collect()
}

/// Joint spectrum over a Cartesian `x, y, z` grid using the full near-field
/// array response. The response is normalized to unit norm first, so values
/// read as `1 / (fraction of steering energy outside the signal subspace)`
/// and do not drift with the `1/d` amplitude.
pub fn spectrum_3d(un: &NoiseSubspace, grid: &GridSpec, g: &ArrayGeometry) -> Result<SpectrumGrid> {
    check_dim(un, g, "spectrum_3d noise subspace")?;
    grid.expect_kinds(&[AxisKind::X, AxisKind::Y, AxisKind::Z], "spectrum_3d grid axes")?;
    if !(grid.axes[2].min > 0.0) {
        return Err(Error::invalid("spectrum_3d z axis must be positive"));
    }
    let values = evaluate(grid, g.n_antennas(), |c, buf| {
        let loc = UeLocation {
            x: c[0],
            y: c[1],
            z: c[2],
        };
        let a = array_response(g, &loc);
        let scale = 1.0 / a.norm();
        for (b, z) in buf.iter_mut().zip(a.iter()) {
            *b = z * scale;
        }
        quotient(un, buf)
    });
    Ok(SpectrumGrid {
        grid: grid.clone(),
        values,
        evaluations: grid.len() as u64,
    })
}

/// Angular spectrum over `azimuth x elevation` with the plane-wave response.
/// `g` is the (sub)array the noise subspace was estimated on.
pub fn spectrum_2d_angular(un: &NoiseSubspace, grid: &GridSpec, g: &ArrayGeometry) -> Result<SpectrumGrid> {
    check_dim(un, g, "spectrum_2d_angular noise subspace")?;
    grid.expect_kinds(
        &[AxisKind::Azimuth, AxisKind::Elevation],
        "spectrum_2d_angular grid axes",
    )?;
    let coords = g.axis_coords();
    let values = evaluate(grid, g.n_antennas(), |c, buf| {
        fill_farfield(g, &coords, c[0], c[1], buf);
        quotient(un, buf)
    });
    Ok(SpectrumGrid {
        grid: grid.clone(),
        values,
        evaluations: grid.len() as u64,
    })
}

/// Range spectrum at fixed angles with the Fresnel-phase response.
pub fn spectrum_1d_distance(
    un: &NoiseSubspace,
    azimuth: f64,
    elevation: f64,
    axis: &Axis,
    g: &ArrayGeometry,
) -> Result<SpectrumGrid> {
    check_dim(un, g, "spectrum_1d_distance noise subspace")?;
    if axis.kind != AxisKind::Distance {
        return Err(Error::mismatch(
            "spectrum_1d_distance axis",
            "Distance",
            format!("{:?}", axis.kind),
        ));
    }
    let grid = GridSpec::new(vec![axis.clone()])?;
    let values = evaluate(&grid, g.n_antennas(), |c, buf| {
        let p = PolarLocation {
            azimuth,
            elevation,
            distance: c[0],
        };
        buf.copy_from_slice(polar_response(g, &p).as_slice());
        quotient(un, buf)
    });
    Ok(SpectrumGrid {
        grid,
        values,
        evaluations: axis.points as u64,
    })
}

/// Strict local maxima over the interior of the grid, tallest `k` first;
/// ties go to the lower linear index. A peak must exceed all `3^d - 1`
/// neighbours, diagonals included. Axes with a single point are ignored.
pub fn find_peaks(s: &SpectrumGrid, k: usize) -> PeakSet {
    let shape = s.grid.shape();
    let mut strides = vec![1isize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1] as isize;
    }
    let live: Vec<usize> = (0..shape.len()).filter(|&d| shape[d] > 1).collect();
    let mut offsets: Vec<isize> = vec![0];
    for &d in &live {
        offsets = offsets
            .iter()
            .flat_map(|&o| [o - strides[d], o, o + strides[d]])
            .collect();
    }
    offsets.retain(|&o| o != 0);

    let mut peaks: Vec<Peak> = Vec::new();
    for (linear, &v) in s.values.iter().enumerate() {
        let idx = s.grid.unravel(linear);
        if live.iter().any(|&d| idx[d] == 0 || idx[d] + 1 == shape[d]) {
            continue;
        }
        if offsets.iter().all(|&o| v > s.values[(linear as isize + o) as usize]) {
            peaks.push(Peak {
                linear,
                coords: s.grid.coords(linear),
                value: v,
            });
        }
    }
    peaks.sort_by(|a, b| b.value.total_cmp(&a.value).then(a.linear.cmp(&b.linear)));
    peaks.truncate(k);
    PeakSet { peaks, requested: k }
}

/// Topographic prominence of every grid point: for the highest point of
/// each basin, the drop from its value to the highest saddle leading to a
/// taller point (or to the spectrum minimum for the global maximum); zero
/// elsewhere. Connectivity is the same `3^d - 1` neighbourhood as
/// [`find_peaks`]. Equal values are ordered by lower linear index first.
pub fn prominences(s: &SpectrumGrid) -> Vec<f64> {
    let n = s.values.len();
    let shape = s.grid.shape();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| s.values[b].total_cmp(&s.values[a]).then(a.cmp(&b)));

    let mut parent = vec![usize::MAX; n];
    // component root -> its highest point
    let mut summit = vec![usize::MAX; n];
    let mut prom = vec![0.0; n];
    fn root(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }

    let mut roots: Vec<usize> = Vec::new();
    for &i in &order {
        let v = s.values[i];
        parent[i] = i;
        summit[i] = i;
        roots.clear();
        let idx = s.grid.unravel(i);
        for_each_neighbour(&shape, &idx, |j| {
            if parent[j] != usize::MAX {
                let r = root(&mut parent, j);
                if !roots.contains(&r) {
                    roots.push(r);
                }
            }
        });
        if roots.is_empty() {
            continue;
        }
        // tallest summit wins, ties to the lower index
        let winner = *roots
            .iter()
            .min_by(|&&a, &&b| {
                let (pa, pb) = (summit[a], summit[b]);
                s.values[pb].total_cmp(&s.values[pa]).then(pa.cmp(&pb))
            })
            .expect("non-empty");
        for &r in &roots {
            if r != winner {
                prom[summit[r]] = s.values[summit[r]] - v;
                parent[r] = winner;
            }
        }
        parent[i] = winner;
    }
    let min = s.values.iter().cloned().fold(f64::INFINITY, f64::min);
    for i in 0..n {
        if parent[i] == i {
            prom[summit[i]] = s.values[summit[i]] - min;
        }
    }
    prom
}

fn for_each_neighbour(shape: &[usize], idx: &[usize], mut f: impl FnMut(usize)) {
    let d = shape.len();
    let total = 3usize.pow(d as u32);
    'offsets: for code in 0..total {
        let mut c = code;
        let mut linear = 0usize;
        let mut moved = false;
        for axis in 0..d {
            let step = (c % 3) as isize - 1;
            c /= 3;
            let pos = idx[axis] as isize + step;
            if pos < 0 || pos >= shape[axis] as isize {
                continue 'offsets;
            }
            moved |= step != 0;
            linear = linear * shape[axis] + pos as usize;
        }
        if moved {
            f(linear);
        }
    }
}

/// Search grids for the two-step estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoStepConfig {
    pub angular: GridSpec,
    pub distance: Axis,
    /// Recompute the angular spectrum once per UE and take the `k`-th
    /// tallest peak. Same estimates, `K` times the angular cost.
    pub per_ue_angular_rescan: bool,
    /// Keep the spectra in the result for dumping.
    pub keep_spectra: bool,
}

impl TwoStepConfig {
    /// 180 x 120 angular points over azimuth `[-4pi/9, 4pi/9]` and elevation
    /// `[-pi/3, pi/3]`; 100 inverse-spaced distances over `[d_B, d_FA]`.
    pub fn default_for(g: &ArrayGeometry) -> Self {
        let b = g.near_field_bounds();
        let pi = std::f64::consts::PI;
        Self {
            angular: GridSpec::angular(
                Axis::uniform(AxisKind::Azimuth, -4.0 * pi / 9.0, 4.0 * pi / 9.0, 180).unwrap(),
                Axis::uniform(AxisKind::Elevation, -pi / 3.0, pi / 3.0, 120).unwrap(),
            )
            .unwrap(),
            distance: Axis::new(AxisKind::Distance, b.d_b, b.d_fa, 100, Spacing::InverseDistance).unwrap(),
            per_ue_angular_rescan: false,
            keep_spectra: false,
        }
    }
}

/// Output of [`two_step_estimate`].
#[derive(Debug, Clone)]
pub struct TwoStepEstimate {
    /// One location per angular peak found, in peak order (tallest first).
    pub locations: Vec<PolarLocation>,
    pub angular_peaks: PeakSet,
    /// Spectrum value at each chosen distance.
    pub distance_peak_values: Vec<f64>,
    /// UEs whose range spectrum had no interior maximum; the global argmax
    /// (possibly a boundary point) was used instead.
    pub distance_fallbacks: usize,
    /// Quotient evaluations over both steps.
    pub evaluations: u64,
    /// Snapshots behind the covariance, `L T^2`.
    pub snapshot_count: usize,
    /// `L T^2 < K`: the covariance cannot hold a rank-`K` signal subspace.
    pub rank_warning: bool,
    pub angular_spectrum: Option<SpectrumGrid>,
    pub distance_spectra: Vec<SpectrumGrid>,
}

impl TwoStepEstimate {
    pub fn shortfall(&self) -> bool {
        self.angular_peaks.shortfall()
    }
}

/// Locates `k` UEs from a snapshot block: smoothed covariance, noise
/// subspace, one angular spectrum, then one range scan per angular peak.
pub fn two_step_estimate(
    block: &SnapshotBlock,
    k: usize,
    c_r: usize,
    cfg: &TwoStepConfig,
    g: &ArrayGeometry,
) -> Result<TwoStepEstimate> {
    if block.n_antennas() != g.n_antennas() {
        return Err(Error::mismatch(
            "two_step_estimate block rows",
            g.n_antennas(),
            block.n_antennas(),
        ));
    }
    if k == 0 {
        return Err(Error::invalid("source count must be positive"));
    }
    let sub = g.subarray(c_r)?;
    if sub.n_antennas() < k {
        return Err(Error::invalid(format!(
            "subarray of {} elements cannot resolve {k} sources",
            sub.n_antennas()
        )));
    }
    let cov = smoothed_covariance(block, c_r)?;
    let rank_warning = cov.snapshot_count < k;
    if rank_warning {
        log::warn!(
            "{} effective snapshots for {k} sources; covariance is rank deficient",
            cov.snapshot_count
        );
    }
    let un = noise_subspace(&cov, k)?;

    let mut evaluations = 0u64;
    let angular = spectrum_2d_angular(&un, &cfg.angular, &sub)?;
    evaluations += angular.evaluations;
    let angular_peaks = find_peaks(&angular, k);
    if angular_peaks.shortfall() {
        log::debug!("found {} of {k} angular peaks", angular_peaks.found());
    }

    let mut locations = Vec::with_capacity(angular_peaks.found());
    let mut distance_peak_values = Vec::with_capacity(angular_peaks.found());
    let mut distance_spectra = Vec::new();
    let mut distance_fallbacks = 0;
    for (i, peak) in angular_peaks.peaks.iter().enumerate() {
        let (az, el) = if cfg.per_ue_angular_rescan && i > 0 {
            let rescan = spectrum_2d_angular(&un, &cfg.angular, &sub)?;
            evaluations += rescan.evaluations;
            let p = &find_peaks(&rescan, k).peaks[i];
            (p.coords[0], p.coords[1])
        } else {
            (peak.coords[0], peak.coords[1])
        };
        let range = spectrum_1d_distance(&un, az, el, &cfg.distance, &sub)?;
        evaluations += range.evaluations;
        let best = match find_peaks(&range, 1).peaks.first() {
            Some(p) => p.linear,
            None => {
                distance_fallbacks += 1;
                range.argmax()
            }
        };
        locations.push(PolarLocation {
            azimuth: az,
            elevation: el,
            distance: cfg.distance.value(best),
        });
        distance_peak_values.push(range.values[best]);
        if cfg.keep_spectra {
            distance_spectra.push(range);
        }
    }

    Ok(TwoStepEstimate {
        locations,
        angular_peaks,
        distance_peak_values,
        distance_fallbacks,
        evaluations,
        snapshot_count: cov.snapshot_count,
        rank_warning,
        angular_spectrum: cfg.keep_spectra.then_some(angular),
        distance_spectra,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::ChannelMatrix;
    use crate::signal::{gen_pilots, received_block};
    use crate::subspace::sample_covariance;
    use crate::{CMatrix, CVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{PI, SQRT_2};

    fn reference_array() -> ArrayGeometry {
        ArrayGeometry::new(100, 0.1 / SQRT_2, 0.1).unwrap()
    }

    fn spectrum_from(values: Vec<f64>, shape: &[usize]) -> SpectrumGrid {
        let kinds = [AxisKind::X, AxisKind::Y, AxisKind::Z];
        let axes = shape
            .iter()
            .zip(kinds)
            .map(|(&n, kind)| Axis::uniform(kind, 1.0, n as f64, n).unwrap())
            .collect();
        SpectrumGrid {
            grid: GridSpec::new(axes).unwrap(),
            values,
            evaluations: 0,
        }
    }

    fn noiseless_subspace(g: &ArrayGeometry, locs: &[UeLocation], l: usize, seed: u64) -> NoiseSubspace {
        let a = ChannelMatrix::from_locations(g, locs);
        let s = gen_pilots(locs.len(), l, &mut ChaCha8Rng::seed_from_u64(seed));
        let b = received_block(&a, s, f64::INFINITY, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let cols: Vec<CVector> = b.received.column_iter().map(|c| c.into_owned()).collect();
        noise_subspace(&sample_covariance(&cols).unwrap(), locs.len()).unwrap()
    }

    #[test]
    fn inverse_axis_is_uniform_in_reciprocal() {
        let ax = Axis::new(AxisKind::Distance, 1.0, 10.0, 4, Spacing::InverseDistance).unwrap();
        let v = ax.values();
        assert_eq!(v[0], 1.0);
        assert_eq!(v[3], 10.0);
        let recip: Vec<f64> = v.iter().map(|d| 1.0 / d).collect();
        assert!((recip[0] - recip[1] - (recip[1] - recip[2])).abs() < 1e-15);
        assert!(Axis::new(AxisKind::Distance, 0.0, 1.0, 4, Spacing::Uniform).is_err());
        assert!(Axis::uniform(AxisKind::X, 1.0, 1.0, 4).is_err());
        assert!(Axis::uniform(AxisKind::X, 0.0, 1.0, 1).is_err());
    }

    #[test]
    fn unravel_round_trip() {
        let grid = GridSpec::new(vec![
            Axis::uniform(AxisKind::X, 0.0, 1.0, 3).unwrap(),
            Axis::uniform(AxisKind::Y, 0.0, 1.0, 4).unwrap(),
            Axis::uniform(AxisKind::Z, 1.0, 2.0, 5).unwrap(),
        ])
        .unwrap();
        assert_eq!(grid.unravel(0), vec![0, 0, 0]);
        assert_eq!(grid.unravel(1), vec![0, 0, 1]);
        assert_eq!(grid.unravel(5 * 4 + 5 + 2), vec![1, 1, 2]);
        assert_eq!(grid.len(), 60);
    }

    #[test]
    fn ramp_has_no_peaks() {
        let s = spectrum_from((0..50).map(|i| i as f64 + 1.0).collect(), &[50]);
        assert_eq!(find_peaks(&s, 3).found(), 0);
        let s2 = spectrum_from((0..100).map(|i| (i % 10 + i / 10) as f64 + 1.0).collect(), &[10, 10]);
        assert_eq!(find_peaks(&s2, 3).found(), 0);
    }

    #[test]
    fn single_spike() {
        let mut v = vec![1.0; 49];
        v[3 * 7 + 4] = 5.0;
        let p = find_peaks(&spectrum_from(v, &[7, 7]), 2);
        assert_eq!(p.found(), 1);
        assert!(p.shortfall());
        assert_eq!(p.peaks[0].linear, 25);
        assert_eq!(p.peaks[0].coords, vec![4.0, 5.0]);
    }

    #[test]
    fn boundary_and_plateau_are_not_peaks() {
        let mut v = vec![1.0; 25];
        v[0] = 9.0; // corner
        v[2] = 9.0; // edge
        v[11] = 4.0; // plateau pair
        v[12] = 4.0;
        assert_eq!(find_peaks(&spectrum_from(v, &[5, 5]), 5).found(), 0);
    }

    // Planted maxima checked against an independent brute-force scan.
    #[test]
    fn planted_maxima_tallest_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (nx, ny) = (12, 9);
        let mut v: Vec<f64> = (0..nx * ny).map(|_| 1.0 + 0.01 * rng.random::<f64>()).collect();
        let planted = [(2, 2, 7.0), (5, 6, 3.0), (9, 3, 9.0), (4, 4, 5.0), (10, 7, 2.0)];
        for &(i, j, h) in &planted {
            v[i * ny + j] = h;
        }
        let brute: Vec<usize> = {
            let mut out = Vec::new();
            for i in 1..nx - 1 {
                for j in 1..ny - 1 {
                    let c = v[i * ny + j];
                    let mut nb = Vec::new();
                    for di in [i - 1, i, i + 1] {
                        for dj in [j - 1, j, j + 1] {
                            if (di, dj) != (i, j) {
                                nb.push(v[di * ny + dj]);
                            }
                        }
                    }
                    if nb.iter().all(|&x| c > x) {
                        out.push(i * ny + j);
                    }
                }
            }
            out.sort_by(|&a, &b| v[b].total_cmp(&v[a]));
            out
        };
        let peaks = find_peaks(&spectrum_from(v.clone(), &[nx, ny]), 3);
        let got: Vec<usize> = peaks.peaks.iter().map(|p| p.linear).collect();
        assert_eq!(got, brute[..3].to_vec());
        assert_eq!(got, vec![9 * ny + 3, 2 * ny + 2, 4 * ny + 4]);
        assert!(peaks.peaks.windows(2).all(|w| w[0].value >= w[1].value));
    }

    #[test]
    fn diagonal_ridge_has_one_peak() {
        // rises along the anti-diagonal towards (6, 6); axis-only tests
        // would flag every ridge cell
        let n = 12;
        let v: Vec<f64> = (0..n * n)
            .map(|l| {
                let (i, j) = ((l / n) as f64, (l % n) as f64);
                let across = (i - j).abs();
                let along = (i + j - 12.0).abs();
                10.0 - 3.0 * across - 0.1 * along
            })
            .collect();
        let p = find_peaks(&spectrum_from(v, &[n, n]), 10);
        assert_eq!(p.found(), 1);
        assert_eq!(p.peaks[0].linear, 6 * n + 6);
    }

    #[test]
    fn diagonal_neighbour_blocks_peak() {
        let mut v = vec![1.0; 25];
        v[12] = 2.0;
        v[18] = 3.0; // (3, 3), diagonal to the centre
        let p = find_peaks(&spectrum_from(v, &[5, 5]), 5);
        assert_eq!(p.peaks.iter().map(|p| p.linear).collect::<Vec<_>>(), vec![18]);
    }

    // Independent oracle: flood-fill the superlevel set of each peak at
    // decreasing thresholds until it reaches a taller point.
    fn brute_prominence(v: &[f64], shape: &[usize], p: usize) -> f64 {
        let grid = GridSpec::new(
            shape
                .iter()
                .map(|&n| Axis::uniform(AxisKind::X, 0.0, 1.0, n.max(2)).unwrap())
                .collect(),
        )
        .unwrap();
        let taller = |j: usize| v[j] > v[p] || (v[j] == v[p] && j < p);
        let mut levels: Vec<f64> = v.iter().cloned().filter(|&x| x <= v[p]).collect();
        levels.sort_by(|a, b| b.total_cmp(a));
        levels.dedup();
        for &t in &levels {
            let mut seen = vec![false; v.len()];
            let mut stack = vec![p];
            seen[p] = true;
            while let Some(i) = stack.pop() {
                if taller(i) {
                    return v[p] - t;
                }
                let idx = grid.unravel(i);
                for_each_neighbour(shape, &idx, |j| {
                    if !seen[j] && v[j] >= t {
                        seen[j] = true;
                        stack.push(j);
                    }
                });
            }
        }
        v[p] - levels.last().copied().unwrap_or(v[p])
    }

    #[test]
    fn prominence_matches_flood_fill_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for shape in [vec![40], vec![9, 11], vec![4, 5, 6]] {
            let n: usize = shape.iter().product();
            let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let s = spectrum_from(v.clone(), &shape);
            let prom = prominences(&s);
            for p in find_peaks(&s, usize::MAX).peaks {
                let want = brute_prominence(&v, &shape, p.linear);
                assert!((prom[p.linear] - want).abs() < 1e-15, "{shape:?} at {}", p.linear);
            }
        }
    }

    #[test]
    fn ridge_ripples_have_small_prominence() {
        let v = vec![0.0, 5.0, 4.9, 5.1, 4.8, 5.05, 1.0, 3.0, 0.5];
        let prom = prominences(&spectrum_from(v, &[9]));
        assert!((prom[3] - 5.1).abs() < 1e-15);
        assert!((prom[1] - 0.1).abs() < 1e-12);
        assert!((prom[5] - 0.25).abs() < 1e-12);
        assert!((prom[7] - 2.0).abs() < 1e-12);
        assert_eq!(prom[2], 0.0);
    }

    #[test]
    fn three_dimensional_neighbourhood() {
        let mut v = vec![1.0; 27];
        v[13] = 2.0; // the single interior point of a 3x3x3 grid
        assert_eq!(find_peaks(&spectrum_from(v.clone(), &[3, 3, 3]), 1).found(), 1);
        v[13 + 9] = 3.0; // taller neighbour along the first axis
        assert_eq!(find_peaks(&spectrum_from(v, &[3, 3, 3]), 1).found(), 0);
    }

    #[test]
    fn singleton_axis_is_ignored() {
        let grid = GridSpec::new(vec![
            Axis::uniform(AxisKind::X, 0.0, 1.0, 5).unwrap(),
            Axis::fixed(AxisKind::Y, 0.0),
            Axis::uniform(AxisKind::Z, 1.0, 2.0, 5).unwrap(),
        ])
        .unwrap();
        let mut values = vec![1.0; 25];
        values[2 * 5 + 2] = 3.0;
        let s = SpectrumGrid {
            grid,
            values,
            evaluations: 0,
        };
        assert_eq!(find_peaks(&s, 1).peaks[0].linear, 12);
    }

    #[test]
    fn spectra_are_positive() {
        let g = ArrayGeometry::new(36, 0.07, 0.1).unwrap();
        let un = noiseless_subspace(&g, &[UeLocation::new(0.3, 0.1, 1.5).unwrap()], 1, 1);
        let cfg = TwoStepConfig::default_for(&g);
        let s = spectrum_2d_angular(&un, &cfg.angular, &g).unwrap();
        assert!(s.values.iter().all(|v| *v > 0.0 && v.is_finite()));
        let d = spectrum_1d_distance(&un, 0.1, 0.0, &cfg.distance, &g).unwrap();
        assert!(d.values.iter().all(|v| *v > 0.0 && v.is_finite()));
    }

    #[test]
    fn joint_spectrum_peaks_at_on_grid_source() {
        let g = ArrayGeometry::new(36, 0.1 / SQRT_2, 0.1).unwrap();
        let grid = GridSpec::cartesian(
            Axis::uniform(AxisKind::X, -1.0, 1.0, 21).unwrap(),
            Axis::uniform(AxisKind::Y, -0.5, 0.5, 11).unwrap(),
            Axis::uniform(AxisKind::Z, 0.5, 2.5, 21).unwrap(),
        )
        .unwrap();
        let truth = grid.coords(7 * 11 * 21 + 4 * 21 + 9);
        let loc = UeLocation::new(truth[0], truth[1], truth[2]).unwrap();
        let un = noiseless_subspace(&g, &[loc], 1, 2);
        let s = spectrum_3d(&un, &grid, &g).unwrap();
        assert_eq!(s.evaluations, grid.len() as u64);
        assert_eq!(s.grid.coords(s.argmax()), truth);
    }

    #[test]
    fn far_source_angles_within_a_cell() {
        let g = ArrayGeometry::new(64, 0.1 / SQRT_2, 0.1).unwrap();
        let far = 100.0 * g.near_field_bounds().d_fa;
        let p = PolarLocation::new(0.37, -0.21, far).unwrap();
        let un = noiseless_subspace(&g, &[p.to_cartesian()], 1, 3);
        let cfg = TwoStepConfig::default_for(&g);
        let s = spectrum_2d_angular(&un, &cfg.angular, &g).unwrap();
        let best = s.grid.coords(find_peaks(&s, 1).peaks[0].linear);
        let step_az = 8.0 * PI / 9.0 / 179.0;
        let step_el = 2.0 * PI / 3.0 / 119.0;
        assert!((best[0] - p.azimuth).abs() <= step_az);
        assert!((best[1] - p.elevation).abs() <= step_el);
    }

    #[test]
    fn angular_spectrum_invariant_to_basis_rotation() {
        let g = ArrayGeometry::new(36, 0.07, 0.1).unwrap();
        let un = noiseless_subspace(
            &g,
            &[
                UeLocation::new(0.3, 0.1, 1.5).unwrap(),
                UeLocation::new(-0.4, 0.2, 2.0).unwrap(),
            ],
            3,
            4,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dim = un.noise.ncols();
        let rot = CMatrix::from_fn(dim, dim, |_, _| {
            C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
        })
        .qr()
        .q();
        let mut rotated = un.clone();
        rotated.noise = &un.noise * rot;
        // force the explicit noise-basis route on both
        rotated.signal = CMatrix::zeros(dim + 2, dim + 1);
        let mut direct = un.clone();
        direct.signal = CMatrix::zeros(dim + 2, dim + 1);
        let grid = GridSpec::angular(
            Axis::uniform(AxisKind::Azimuth, -1.0, 1.0, 15).unwrap(),
            Axis::uniform(AxisKind::Elevation, -0.8, 0.8, 11).unwrap(),
        )
        .unwrap();
        let a = spectrum_2d_angular(&direct, &grid, &g).unwrap();
        let b = spectrum_2d_angular(&rotated, &grid, &g).unwrap();
        let c = spectrum_2d_angular(&un, &grid, &g).unwrap();
        for ((x, y), z) in a.values.iter().zip(&b.values).zip(&c.values) {
            assert!((x - y).abs() <= 1e-9 * x);
            assert!((x - z).abs() <= 1e-9 * x);
        }
    }

    #[test]
    fn range_spectrum_peaks_at_true_distance() {
        let g = ArrayGeometry::new(100, 0.1 / SQRT_2, 0.1).unwrap();
        let cfg = TwoStepConfig::default_for(&g);
        let d = cfg.distance.value(30);
        let p = PolarLocation::new(0.2, 0.1, d).unwrap();
        let a = polar_response(&g, &p);
        let un = noise_subspace(&sample_covariance(std::slice::from_ref(&a)).unwrap(), 1).unwrap();
        let s = spectrum_1d_distance(&un, 0.2, 0.1, &cfg.distance, &g).unwrap();
        assert_eq!(find_peaks(&s, 1).peaks[0].linear, 30);
        // a unit-modulus rescaling of the data leaves the spectrum unchanged
        let rotated = &a * C64::cis(1.234);
        let un2 = noise_subspace(&sample_covariance(&[rotated]).unwrap(), 1).unwrap();
        let s2 = spectrum_1d_distance(&un2, 0.2, 0.1, &cfg.distance, &g).unwrap();
        assert_eq!(s2.argmax(), 30);
    }

    #[test]
    fn dimension_mismatches() {
        let g = ArrayGeometry::new(36, 0.07, 0.1).unwrap();
        let other = ArrayGeometry::new(16, 0.07, 0.1).unwrap();
        let un = noiseless_subspace(&g, &[UeLocation::new(0.3, 0.1, 1.5).unwrap()], 1, 1);
        let cfg = TwoStepConfig::default_for(&g);
        assert!(spectrum_2d_angular(&un, &cfg.angular, &other).is_err());
        let wrong_axes = GridSpec::new(vec![cfg.distance.clone()]).unwrap();
        assert!(spectrum_2d_angular(&un, &wrong_axes, &g).is_err());
        assert!(spectrum_3d(&un, &cfg.angular, &g).is_err());
    }

    fn on_grid(cfg: &TwoStepConfig, ia: usize, ie: usize, id: usize) -> PolarLocation {
        PolarLocation::new(
            cfg.angular.axes[0].value(ia),
            cfg.angular.axes[1].value(ie),
            cfg.distance.value(id),
        )
        .unwrap()
    }

    #[test]
    fn noiseless_two_sources_recovered_on_grid() {
        // Without smoothing the noiseless signal subspace is span(A) whatever
        // the pilots. Angles land on the true grid points; the range scan fits
        // Fresnel phases to exact spherical wavefronts and is biased outwards.
        // Range indices 23 and 49 come from an independent numpy evaluation.
        let g = reference_array();
        let cfg = TwoStepConfig::default_for(&g);
        let truth = [on_grid(&cfg, 100, 70, 20), on_grid(&cfg, 60, 45, 40)];
        let locs: Vec<UeLocation> = truth.iter().map(|p| p.to_cartesian()).collect();
        let a = ChannelMatrix::from_locations(&g, &locs);
        let s = gen_pilots(2, 2, &mut ChaCha8Rng::seed_from_u64(8));
        let b = received_block(&a, s, f64::INFINITY, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let est = two_step_estimate(&b, 2, 0, &cfg, &g).unwrap();
        assert_eq!(est.snapshot_count, 2);
        assert!(!est.rank_warning);
        let mut got = est.locations.clone();
        got.sort_by(|a, b| b.azimuth.total_cmp(&a.azimuth));
        for ((e, t), id) in got.iter().zip(&truth).zip([23, 49]) {
            assert_eq!(e.azimuth, t.azimuth);
            assert_eq!(e.elevation, t.elevation);
            assert_eq!(e.distance, cfg.distance.value(id));
        }
    }

    #[test]
    fn smoothed_two_sources_keep_angles() {
        let g = reference_array();
        let cfg = TwoStepConfig::default_for(&g);
        let truth = [on_grid(&cfg, 100, 70, 20), on_grid(&cfg, 60, 45, 40)];
        let locs: Vec<UeLocation> = truth.iter().map(|p| p.to_cartesian()).collect();
        let a = ChannelMatrix::from_locations(&g, &locs);
        let s = gen_pilots(2, 1, &mut ChaCha8Rng::seed_from_u64(8));
        let b = received_block(&a, s, f64::INFINITY, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let est = two_step_estimate(&b, 2, 1, &cfg, &g).unwrap();
        assert_eq!(est.snapshot_count, 4);
        let mut got = est.locations.clone();
        got.sort_by(|a, b| b.azimuth.total_cmp(&a.azimuth));
        for (e, t) in got.iter().zip(&truth) {
            assert_eq!(e.azimuth, t.azimuth);
            assert_eq!(e.elevation, t.elevation);
            assert!((e.distance / t.distance - 1.0).abs() < 0.3);
        }
    }

    #[test]
    fn evaluation_count_is_quadratic_plus_linear() {
        let g = ArrayGeometry::new(36, 0.1 / SQRT_2, 0.1).unwrap();
        let mut cfg = TwoStepConfig::default_for(&g);
        let locs = [
            UeLocation::new(0.3, 0.1, 1.5).unwrap(),
            UeLocation::new(-0.6, -0.2, 2.5).unwrap(),
        ];
        let a = ChannelMatrix::from_locations(&g, &locs);
        let s = gen_pilots(2, 2, &mut ChaCha8Rng::seed_from_u64(1));
        let b = received_block(&a, s, 30.0, 1e-5, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let est = two_step_estimate(&b, 2, 0, &cfg, &g).unwrap();
        let found = est.angular_peaks.found() as u64;
        assert_eq!(est.evaluations, 180 * 120 + found * 100);

        cfg.per_ue_angular_rescan = true;
        let rescan = two_step_estimate(&b, 2, 0, &cfg, &g).unwrap();
        assert_eq!(rescan.evaluations, found * (180 * 120 + 100));
        assert_eq!(rescan.locations, est.locations);
    }

    #[test]
    fn snapshot_scaling_keeps_peak_locations() {
        let g = reference_array();
        let cfg = TwoStepConfig::default_for(&g);
        let locs = [
            PolarLocation::new(0.4, 0.1, 2.5).unwrap().to_cartesian(),
            PolarLocation::new(-0.5, -0.3, 4.0).unwrap().to_cartesian(),
        ];
        let a = ChannelMatrix::from_locations(&g, &locs);
        let s = gen_pilots(2, 2, &mut ChaCha8Rng::seed_from_u64(11));
        let noise_ref = crate::signal::SnrReference::Relative.noise_reference(&a);
        let b = received_block(&a, s, 15.0, noise_ref, &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
        let mut scaled = b.clone();
        scaled.received *= C64::new(-3.0, 7.5);
        let e1 = two_step_estimate(&b, 2, 1, &cfg, &g).unwrap();
        let e2 = two_step_estimate(&scaled, 2, 1, &cfg, &g).unwrap();
        assert_eq!(e1.locations, e2.locations);
    }

    #[test]
    fn rank_warning_without_smoothing() {
        let g = reference_array();
        let cfg = TwoStepConfig::default_for(&g);
        let locs: Vec<UeLocation> = (0..4)
            .map(|i| {
                PolarLocation::new(-0.6 + 0.4 * i as f64, 0.1, 3.0)
                    .unwrap()
                    .to_cartesian()
            })
            .collect();
        let a = ChannelMatrix::from_locations(&g, &locs);
        let s = gen_pilots(4, 3, &mut ChaCha8Rng::seed_from_u64(13));
        let b = received_block(&a, s, 20.0, 1e-5, &mut ChaCha8Rng::seed_from_u64(14)).unwrap();
        assert!(two_step_estimate(&b, 4, 0, &cfg, &g).unwrap().rank_warning);
        assert!(!two_step_estimate(&b, 4, 1, &cfg, &g).unwrap().rank_warning);
    }

    #[test]
    fn csv_dump_layout() {
        let grid = GridSpec::angular(
            Axis::uniform(AxisKind::Azimuth, -0.5, 0.5, 2).unwrap(),
            Axis::uniform(AxisKind::Elevation, 0.0, 1.0, 3).unwrap(),
        )
        .unwrap();
        let s = SpectrumGrid {
            grid,
            values: vec![1.0, 2.0, 3.0, 4.0, 5.0, 1.0 / 3.0],
            evaluations: 6,
        };
        let mut out = Vec::new();
        s.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "axis1,axis2,value");
        assert_eq!(lines[1], "-0.5,0,1");
        assert_eq!(lines[6], "0.5,1,0.333333333");

        let d = SpectrumGrid {
            grid: GridSpec::new(vec![Axis::uniform(AxisKind::Distance, 1.0, 2.0, 2).unwrap()]).unwrap(),
            values: vec![7.0, 8.0],
            evaluations: 2,
        };
        let mut out = Vec::new();
        d.write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "axis,value\n1,7\n2,8\n");
    }
}
