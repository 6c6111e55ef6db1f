//! Joint Cartesian MUSIC with every UE at zero elevation, searched over the
//! `y = 0` plane with and without enough pilots.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::channel::ChannelMatrix;
use crate::error::Result;
use crate::geometry::{PolarLocation, UeLocation};
use crate::metrics::{location_cost, match_estimates, median};
use crate::music::{find_peaks, prominences, spectrum_3d, Axis, AxisKind, GridSpec, Peak, SpectrumGrid};
use crate::numfmt::format_float;
use crate::signal::{gen_pilots, received_block, stream_rng, StreamRole};
use crate::subspace::{noise_subspace, sample_covariance};
use crate::CVector;

use super::config::ExperimentConfig;
use super::experiment::place_ues;

/// One pilot budget of the scenario.
#[derive(Debug, Clone)]
pub struct Fig1Run {
    pub l_pilots: usize,
    pub spectrum: SpectrumGrid,
    /// Local maxima above `fig1_peak_ratio` times the spectrum median whose
    /// prominence is at least `fig1_min_prominence` of their height.
    pub distinct: Vec<Peak>,
    /// UEs with a distinct peak inside the resolve tolerances.
    pub resolved: usize,
}

#[derive(Debug, Clone)]
pub struct Fig1Outcome {
    pub truth: Vec<UeLocation>,
    pub high: Fig1Run,
    pub low: Fig1Run,
}

/// `x` over the azimuth span at full range, `y = 0`, `z` from the nearest
/// reachable depth out to the far range bound.
pub fn fig1_grid(cfg: &ExperimentConfig) -> Result<GridSpec> {
    let (d_min, d_max) = cfg.distance_bounds()?;
    let (az0, az1) = cfg.azimuth_range;
    let z_min = d_min * az0.abs().max(az1.abs()).cos();
    GridSpec::cartesian(
        Axis::uniform(AxisKind::X, d_max * az0.sin(), d_max * az1.sin(), cfg.fig1_x_points)?,
        Axis::fixed(AxisKind::Y, 0.0),
        Axis::uniform(AxisKind::Z, z_min, d_max, cfg.fig1_z_points)?,
    )
}

/// Local maxima clearing `ratio` times the median that also stand out from
/// their ridge: a ripple along a sampled ridge has almost no prominence.
pub fn distinct_peaks(s: &SpectrumGrid, ratio: f64, min_prominence: f64) -> Vec<Peak> {
    let floor = ratio * median(&s.values);
    let prom = prominences(s);
    find_peaks(s, usize::MAX)
        .peaks
        .into_iter()
        .filter(|p| p.value > floor && prom[p.linear] >= min_prominence * p.value)
        .collect()
}

/// Number of true UEs paired (minimum-cost assignment) with an estimate
/// within `angle_tol` and `dist_tol * d_true`.
pub fn resolved_count(
    truth: &[PolarLocation],
    est: &[PolarLocation],
    angle_tol: f64,
    dist_tol: f64,
    distance_scale: f64,
) -> Result<usize> {
    let m = match_estimates(truth, est, distance_scale)?;
    Ok(m.assignment
        .iter()
        .enumerate()
        .filter(|(k, j)| {
            j.is_some_and(|j| {
                let (t, e) = (&truth[*k], &est[j]);
                location_cost(
                    t,
                    &PolarLocation {
                        distance: t.distance,
                        ..*e
                    },
                    1.0,
                ) < angle_tol
                    && (e.distance - t.distance).abs() < dist_tol * t.distance
            })
        })
        .count())
}

fn peak_location(p: &Peak) -> PolarLocation {
    UeLocation {
        x: p.coords[0],
        y: p.coords[1],
        z: p.coords[2],
    }
    .to_polar()
}

/// Places `k_ues` UEs at zero elevation, sends `fig1_l_high` pilots at
/// `fig1_snr_db`, and runs the unsmoothed 3D search on all of them and on
/// the first `fig1_l_low`.
pub fn scenario_fig1(cfg: &ExperimentConfig) -> Result<Fig1Outcome> {
    cfg.validate()?;
    let g = cfg.geometry()?;
    let flat = ExperimentConfig {
        elevation_range: (0.0, 0.0),
        ..cfg.clone()
    };
    let truth = place_ues(&flat, &mut stream_rng(cfg.seed, None, 0, StreamRole::Placement))?;
    let truth_polar: Vec<PolarLocation> = truth.iter().map(UeLocation::to_polar).collect();
    let channel = ChannelMatrix::from_locations(&g, &truth);
    let l_max = cfg.fig1_l_high.max(cfg.fig1_l_low);
    let pilots = gen_pilots(cfg.k_ues, l_max, &mut stream_rng(cfg.seed, None, 0, StreamRole::Pilots));
    let block = received_block(
        &channel,
        pilots,
        cfg.fig1_snr_db,
        cfg.snr_ref.noise_reference(&channel),
        &mut stream_rng(cfg.seed, Some(0), 0, StreamRole::Noise),
    )?;
    let grid = fig1_grid(cfg)?;
    let (_, d_max) = cfg.distance_bounds()?;

    let run = |l: usize| -> Result<Fig1Run> {
        let snapshots: Vec<CVector> = block
            .received
            .columns(0, l)
            .column_iter()
            .map(|c| c.into_owned())
            .collect();
        let un = noise_subspace(&sample_covariance(&snapshots)?, cfg.k_ues)?;
        let spectrum = spectrum_3d(&un, &grid, &g)?;
        let distinct = distinct_peaks(&spectrum, cfg.fig1_peak_ratio, cfg.fig1_min_prominence);
        let est: Vec<PolarLocation> = distinct.iter().map(peak_location).collect();
        let resolved = resolved_count(&truth_polar, &est, cfg.resolve_angle_tol, cfg.resolve_dist_tol, d_max)?;
        Ok(Fig1Run {
            l_pilots: l,
            spectrum,
            distinct,
            resolved,
        })
    };

    Ok(Fig1Outcome {
        high: run(cfg.fig1_l_high)?,
        low: run(cfg.fig1_l_low)?,
        truth,
    })
}

/// Writes `fig1_l<L>.csv` per run, `fig1_peaks.csv` and `fig1_truth.csv`.
pub fn write_fig1(out: &Fig1Outcome, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for run in [&out.high, &out.low] {
        let path = dir.join(format!("fig1_l{}.csv", run.l_pilots));
        let mut w = BufWriter::new(File::create(&path)?);
        run.spectrum.write_csv(&mut w)?;
        w.flush()?;
        written.push(path);
    }

    let path = dir.join("fig1_peaks.csv");
    let mut w = BufWriter::new(File::create(&path)?);
    writeln!(w, "l_pilots,rank,x_m,z_m,value")?;
    for run in [&out.high, &out.low] {
        for (i, p) in run.distinct.iter().enumerate() {
            writeln!(
                w,
                "{},{i},{},{},{}",
                run.l_pilots,
                format_float(p.coords[0]),
                format_float(p.coords[2]),
                format_float(p.value)
            )?;
        }
    }
    w.flush()?;
    written.push(path);

    let path = dir.join("fig1_truth.csv");
    let mut w = BufWriter::new(File::create(&path)?);
    writeln!(w, "ue,x_m,z_m")?;
    for (k, t) in out.truth.iter().enumerate() {
        writeln!(w, "{k},{},{}", format_float(t.x), format_float(t.z))?;
    }
    w.flush()?;
    written.push(path);
    Ok(written)
}
