//! Experiment configuration and its flat `key = value` file format.
//!
//! ```text
//! # comment
//! k_ues = 4
//! snr_db_list = 0, 10, 20
//! azimuth_range = -80deg, 80deg
//! methods = proposed, ls, rls
//! ```
//!
//! Keys are the [`ExperimentConfig`] field names. Angles are radians unless
//! suffixed with `deg`. Unknown or repeated keys are errors.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::ArrayGeometry;
use crate::music::{Axis, AxisKind, GridSpec, Spacing, TwoStepConfig};
use crate::signal::SnrReference;

/// Estimators compared by the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    /// Two-step MUSIC, reconstruction and gain correction.
    Proposed,
    /// Two-step MUSIC and reconstruction only.
    ProposedNoCorrect,
    Ls,
    Rls,
    /// Joint Cartesian MUSIC on the unsmoothed covariance, then correction.
    Music3d,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Proposed,
        Method::ProposedNoCorrect,
        Method::Ls,
        Method::Rls,
        Method::Music3d,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Proposed => "proposed",
            Method::ProposedNoCorrect => "proposed_nocorrect",
            Method::Ls => "ls",
            Method::Rls => "rls",
            Method::Music3d => "music3d",
        }
    }

    pub fn is_parametric(self) -> bool {
        matches!(self, Method::Proposed | Method::ProposedNoCorrect | Method::Music3d)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub n_antennas: usize,
    pub k_ues: usize,
    pub l_pilots: usize,
    /// Smoothing reduction per axis. `None` picks the smallest value with
    /// `L (c_r + 1)^2 >= K`.
    pub c_r: Option<usize>,
    pub wavelength: f64,
    /// Element diagonal `D`; `None` means `wavelength / sqrt(2)`.
    pub element_diag: Option<f64>,
    pub snr_db_list: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    pub azimuth_range: (f64, f64),
    pub elevation_range: (f64, f64),
    /// Every UE pair differs by at least this much in azimuth or elevation.
    pub min_angular_separation: f64,
    /// `None` means `[d_B, d_FA]` of the array.
    pub distance_range: Option<(f64, f64)>,
    pub azimuth_points: usize,
    pub elevation_points: usize,
    pub distance_points: usize,
    pub distance_spacing: Spacing,
    /// Points per axis of the Cartesian grid used by `music3d`.
    pub grid3d_points: usize,
    pub methods: Vec<Method>,
    pub snr_ref: SnrReference,
    pub out_dir: PathBuf,
    pub per_ue_angular_rescan: bool,
    pub fig1_l_high: usize,
    pub fig1_l_low: usize,
    pub fig1_snr_db: f64,
    pub fig1_x_points: usize,
    pub fig1_z_points: usize,
    /// A local maximum counts as a distinct peak when it exceeds this
    /// multiple of the spectrum median.
    pub fig1_peak_ratio: f64,
    /// Minimum prominence of a distinct peak, as a fraction of its height.
    pub fig1_min_prominence: f64,
    /// Angular tolerance for calling a UE resolved.
    pub resolve_angle_tol: f64,
    /// Relative range tolerance for calling a UE resolved.
    pub resolve_dist_tol: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_antennas: 100,
            k_ues: 4,
            l_pilots: 3,
            c_r: None,
            wavelength: 0.1,
            element_diag: None,
            snr_db_list: vec![0.0, 5.0, 10.0, 15.0, 20.0],
            trials: 200,
            seed: 1,
            azimuth_range: (-4.0 * PI / 9.0, 4.0 * PI / 9.0),
            elevation_range: (-PI / 3.0, PI / 3.0),
            min_angular_separation: PI / 100.0,
            distance_range: None,
            azimuth_points: 180,
            elevation_points: 120,
            distance_points: 100,
            distance_spacing: Spacing::InverseDistance,
            grid3d_points: 40,
            methods: vec![Method::Proposed, Method::ProposedNoCorrect, Method::Ls, Method::Rls],
            snr_ref: SnrReference::Relative,
            out_dir: PathBuf::from("out"),
            per_ue_angular_rescan: false,
            fig1_l_high: 10,
            fig1_l_low: 3,
            fig1_snr_db: 20.0,
            fig1_x_points: 481,
            fig1_z_points: 241,
            fig1_peak_ratio: 10.0,
            fig1_min_prominence: 0.5,
            resolve_angle_tol: 2f64.to_radians(),
            resolve_dist_tol: 0.15,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_angle(key: &str, v: &str) -> Result<f64> {
    let v = v.trim();
    match v.strip_suffix("deg") {
        Some(d) => Ok(parse_num::<f64>(key, d)?.to_radians()),
        None => parse_num(key, v),
    }
}

fn parse_list<T>(key: &str, v: &str, item: impl Fn(&str, &str) -> Result<T>) -> Result<Vec<T>> {
    v.split(',').map(|s| item(key, s.trim())).collect()
}

fn parse_pair<T>(key: &str, v: &str, item: impl Fn(&str, &str) -> Result<T>) -> Result<(T, T)> {
    let mut items = parse_list(key, v, item)?;
    if items.len() != 2 {
        return Err(Error::Config(format!("`{key}` needs exactly two values, got `{v}`")));
    }
    let hi = items.pop().expect("two items");
    let lo = items.pop().expect("two items");
    Ok((lo, hi))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::Config(format!("`{key}` must be true or false, got `{other}`"))),
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Parses config text on top of the defaults and validates the result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
            cfg.set(key, value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "n_antennas" => self.n_antennas = parse_num(key, v)?,
            "k_ues" => self.k_ues = parse_num(key, v)?,
            "l_pilots" => self.l_pilots = parse_num(key, v)?,
            "c_r" => self.c_r = Some(parse_num(key, v)?),
            "wavelength" => self.wavelength = parse_num(key, v)?,
            "element_diag" => self.element_diag = Some(parse_num(key, v)?),
            "snr_db_list" => self.snr_db_list = parse_list(key, v, parse_num)?,
            "trials" => self.trials = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "azimuth_range" => self.azimuth_range = parse_pair(key, v, parse_angle)?,
            "elevation_range" => self.elevation_range = parse_pair(key, v, parse_angle)?,
            "min_angular_separation" => self.min_angular_separation = parse_angle(key, v)?,
            "distance_range" => self.distance_range = Some(parse_pair(key, v, parse_num)?),
            "azimuth_points" => self.azimuth_points = parse_num(key, v)?,
            "elevation_points" => self.elevation_points = parse_num(key, v)?,
            "distance_points" => self.distance_points = parse_num(key, v)?,
            "distance_spacing" => self.distance_spacing = v.parse()?,
            "grid3d_points" => self.grid3d_points = parse_num(key, v)?,
            "methods" => self.methods = parse_list(key, v, |_, s| s.parse())?,
            "snr_ref" => self.snr_ref = v.parse()?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "per_ue_angular_rescan" => self.per_ue_angular_rescan = parse_bool(key, v)?,
            "fig1_l_high" => self.fig1_l_high = parse_num(key, v)?,
            "fig1_l_low" => self.fig1_l_low = parse_num(key, v)?,
            "fig1_snr_db" => self.fig1_snr_db = parse_num(key, v)?,
            "fig1_x_points" => self.fig1_x_points = parse_num(key, v)?,
            "fig1_z_points" => self.fig1_z_points = parse_num(key, v)?,
            "fig1_peak_ratio" => self.fig1_peak_ratio = parse_num(key, v)?,
            "fig1_min_prominence" => self.fig1_min_prominence = parse_num(key, v)?,
            "resolve_angle_tol" => self.resolve_angle_tol = parse_angle(key, v)?,
            "resolve_dist_tol" => self.resolve_dist_tol = parse_num(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn geometry(&self) -> Result<ArrayGeometry> {
        let diag = self.element_diag.unwrap_or(self.wavelength / std::f64::consts::SQRT_2);
        ArrayGeometry::new(self.n_antennas, diag, self.wavelength)
    }

    pub fn smoothing(&self) -> usize {
        self.c_r.unwrap_or_else(|| {
            (0..)
                .find(|c: &usize| self.l_pilots * (c + 1) * (c + 1) >= self.k_ues)
                .expect("unbounded search")
        })
    }

    pub fn distance_bounds(&self) -> Result<(f64, f64)> {
        match self.distance_range {
            Some(r) => Ok(r),
            None => {
                let b = self.geometry()?.near_field_bounds();
                Ok((b.d_b, b.d_fa))
            }
        }
    }

    pub fn two_step(&self) -> Result<TwoStepConfig> {
        let (d_min, d_max) = self.distance_bounds()?;
        Ok(TwoStepConfig {
            angular: GridSpec::angular(
                Axis::uniform(
                    AxisKind::Azimuth,
                    self.azimuth_range.0,
                    self.azimuth_range.1,
                    self.azimuth_points,
                )?,
                Axis::uniform(
                    AxisKind::Elevation,
                    self.elevation_range.0,
                    self.elevation_range.1,
                    self.elevation_points,
                )?,
            )?,
            distance: Axis::new(
                AxisKind::Distance,
                d_min,
                d_max,
                self.distance_points,
                self.distance_spacing,
            )?,
            per_ue_angular_rescan: self.per_ue_angular_rescan,
            keep_spectra: false,
        })
    }

    /// Cartesian box covering the placement region, `grid3d_points` per axis.
    pub fn grid3d(&self) -> Result<GridSpec> {
        let (d_min, d_max) = self.distance_bounds()?;
        let (az, el) = (self.azimuth_range, self.elevation_range);
        let az_abs = az.0.abs().max(az.1.abs());
        let el_abs = el.0.abs().max(el.1.abs());
        let p = self.grid3d_points;
        GridSpec::cartesian(
            Axis::uniform(AxisKind::X, d_max * az.0.sin(), d_max * az.1.sin(), p)?,
            Axis::uniform(AxisKind::Y, d_max * el.0.sin(), d_max * el.1.sin(), p)?,
            Axis::uniform(AxisKind::Z, d_min * az_abs.cos() * el_abs.cos(), d_max, p)?,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let g = self.geometry()?;
        if self.k_ues == 0 || self.l_pilots == 0 || self.trials == 0 {
            return bad("k_ues, l_pilots and trials must be positive".into());
        }
        let c_r = self.smoothing();
        if c_r >= g.side() {
            return bad(format!("c_r = {c_r} leaves no subarray on a {}-wide array", g.side()));
        }
        if (g.side() - c_r).pow(2) <= self.k_ues {
            return bad(format!(
                "subarray of {} elements cannot separate {} UEs",
                (g.side() - c_r).pow(2),
                self.k_ues
            ));
        }
        if self.snr_db_list.is_empty() || self.snr_db_list.iter().any(|s| s.is_nan()) {
            return bad("snr_db_list must hold at least one number".into());
        }
        let half_pi = PI / 2.0;
        for (name, (lo, hi)) in [
            ("azimuth_range", self.azimuth_range),
            ("elevation_range", self.elevation_range),
        ] {
            if !(lo <= hi && lo > -half_pi && hi < half_pi) {
                return bad(format!("{name} must satisfy -pi/2 < min <= max < pi/2"));
            }
        }
        if !(self.min_angular_separation >= 0.0) {
            return bad("min_angular_separation must be >= 0".into());
        }
        let (d_min, d_max) = self.distance_bounds()?;
        if !(d_min > 0.0 && d_min < d_max) {
            return bad(format!(
                "distance_range must satisfy 0 < min < max, got [{d_min}, {d_max}]"
            ));
        }
        let d_b = g.near_field_bounds().d_b;
        if d_min < d_b {
            log::warn!("distance_range starts at {d_min} m, inside d_B = {d_b} m");
        }
        if self.methods.is_empty() {
            return bad("methods must not be empty".into());
        }
        let unique: HashSet<_> = self.methods.iter().collect();
        if unique.len() != self.methods.len() {
            return bad("methods contains duplicates".into());
        }
        if self.fig1_l_high == 0 || self.fig1_l_low == 0 {
            return bad("fig1 pilot counts must be positive".into());
        }
        if !(self.fig1_peak_ratio >= 1.0) {
            return bad("fig1_peak_ratio must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.fig1_min_prominence) {
            return bad("fig1_min_prominence must lie in [0, 1]".into());
        }
        if !(self.resolve_angle_tol > 0.0 && self.resolve_dist_tol > 0.0) {
            return bad("resolve tolerances must be positive".into());
        }
        self.two_step()?;
        if self.methods.contains(&Method::Music3d) {
            self.grid3d()?;
        }
        Ok(())
    }
}
