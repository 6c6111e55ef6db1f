//! Monte-Carlo sweep over SNR points and trials, scoring, CSV output.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;

use crate::channel::ChannelMatrix;
use crate::error::{Error, Result};
use crate::geometry::{ArrayGeometry, PolarLocation, UeLocation};
use crate::metrics::{aggregate, beamforming_gain, match_estimates, nmse, MetricReport, TrialRecord, UeScore};
use crate::music::{find_peaks, spectrum_3d, two_step_estimate};
use crate::numfmt::format_float;
use crate::refine::{correct_with_pilots, ls_baseline, reconstruct_channels, rls_baseline};
use crate::signal::{gen_pilots, received_block, stream_rng, SnapshotBlock, StreamRole};
use crate::subspace::{noise_subspace, sample_covariance};
use crate::{CMatrix, CVector};

use super::config::{ExperimentConfig, Method};

/// Placement attempts before giving up.
pub const PLACEMENT_BUDGET: usize = 100_000;

const RUNTIME_BUDGET_SECS: f64 = 600.0;

pub const TRIALS_HEADER: &str = "method,snr_db,trial,ue,nmse,bf_gain,az_err_rad,el_err_rad,dist_err_m,peaks_found";
pub const AGGREGATE_HEADER: &str = "method,snr_db,mean_nmse,median_nmse,mean_bf_gain,trials_ok,trials_failed";
pub const FAILURES_HEADER: &str = "method,snr_db,trial,error";

/// Every UE pair differs by at least `sep` in azimuth or in elevation.
pub fn well_separated(locs: &[PolarLocation], sep: f64) -> bool {
    locs.iter().enumerate().all(|(i, a)| {
        locs[i + 1..]
            .iter()
            .all(|b| (a.azimuth - b.azimuth).abs() >= sep || (a.elevation - b.elevation).abs() >= sep)
    })
}

/// Rejection-samples `k_ues` locations uniform in azimuth, elevation and
/// distance over the configured ranges.
pub fn place_ues<R: Rng + ?Sized>(cfg: &ExperimentConfig, rng: &mut R) -> Result<Vec<UeLocation>> {
    let (d_min, d_max) = cfg.distance_bounds()?;
    let (az, el) = (cfg.azimuth_range, cfg.elevation_range);
    let mut placed: Vec<PolarLocation> = Vec::with_capacity(cfg.k_ues);
    let mut attempts = 0;
    while placed.len() < cfg.k_ues {
        if attempts == PLACEMENT_BUDGET {
            return Err(Error::PlacementBudget { attempts });
        }
        attempts += 1;
        let cand = PolarLocation {
            azimuth: rng.random_range(az.0..=az.1),
            elevation: rng.random_range(el.0..=el.1),
            distance: rng.random_range(d_min..=d_max),
        };
        placed.push(cand);
        if !well_separated(&placed, cfg.min_angular_separation) {
            placed.pop();
        }
    }
    Ok(placed.iter().map(PolarLocation::to_cartesian).collect())
}

/// Ground truth and received samples of one trial.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub truth: Vec<UeLocation>,
    pub channel: ChannelMatrix,
    pub block: SnapshotBlock,
}

/// Draws one trial. Placement and pilots depend on `(seed, trial)` only, so
/// every SNR point sees the same UEs and pilots; the noise stream also
/// depends on the SNR index.
pub fn build_scenario(
    cfg: &ExperimentConfig,
    g: &ArrayGeometry,
    snr_index: usize,
    trial: usize,
    l_pilots: usize,
) -> Result<Scenario> {
    let snr_db = *cfg
        .snr_db_list
        .get(snr_index)
        .ok_or_else(|| Error::invalid(format!("SNR index {snr_index} out of range")))?;
    let truth = place_ues(cfg, &mut stream_rng(cfg.seed, None, trial, StreamRole::Placement))?;
    let channel = ChannelMatrix::from_locations(g, &truth);
    let pilots = gen_pilots(
        cfg.k_ues,
        l_pilots,
        &mut stream_rng(cfg.seed, None, trial, StreamRole::Pilots),
    );
    let noise_ref = cfg.snr_ref.noise_reference(&channel);
    let mut block = received_block(
        &channel,
        pilots,
        snr_db,
        noise_ref,
        &mut stream_rng(cfg.seed, Some(snr_index), trial, StreamRole::Noise),
    )?;
    block.seed = Some(cfg.seed);
    Ok(Scenario { truth, channel, block })
}

fn select_columns(m: &CMatrix, cols: &[usize]) -> CMatrix {
    CMatrix::from_fn(m.nrows(), cols.len(), |i, j| m[(i, cols[j])])
}

fn select_rows(m: &CMatrix, rows: &[usize]) -> CMatrix {
    CMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

/// Matches estimated locations to the truth, optionally corrects the
/// matched columns with the matching pilot rows, and scores every UE.
/// UEs without an estimate score `nmse = 1`, `bf_gain = 0`.
pub fn score_parametric(
    sc: &Scenario,
    estimates: &[PolarLocation],
    g: &ArrayGeometry,
    correct: bool,
    distance_scale: f64,
) -> Result<Vec<UeScore>> {
    let truth: Vec<PolarLocation> = sc.truth.iter().map(UeLocation::to_polar).collect();
    let matching = match_estimates(&truth, estimates, distance_scale)?;
    let pairs: Vec<(usize, usize)> = matching
        .assignment
        .iter()
        .enumerate()
        .filter_map(|(k, j)| j.map(|j| (k, j)))
        .collect();
    let ues: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let est_cols: Vec<usize> = pairs.iter().map(|p| p.1).collect();

    let uncorrected = reconstruct_channels(estimates, g);
    let matched = ChannelMatrix::new(
        select_columns(uncorrected.entries(), &est_cols),
        crate::channel::ColumnKind::Estimated,
    )?;
    let matched = if correct && !pairs.is_empty() {
        let pilots = select_rows(&sc.block.pilots, &ues);
        correct_with_pilots(&matched, &pilots, &sc.block.received)?.0
    } else {
        matched
    };

    let mut scores = Vec::with_capacity(truth.len());
    for (k, t) in truth.iter().enumerate() {
        let a_true = sc.channel.column(k);
        let score = match ues.iter().position(|&u| u == k) {
            Some(i) => {
                let a_hat = matched.column(i);
                let e = &estimates[pairs[i].1];
                UeScore {
                    nmse: nmse(&a_true, &a_hat)?,
                    bf_gain: beamforming_gain(&a_true, &a_hat)?,
                    az_err: Some((e.azimuth - t.azimuth).abs()),
                    el_err: Some((e.elevation - t.elevation).abs()),
                    dist_err: Some((e.distance - t.distance).abs()),
                }
            }
            None => UeScore {
                nmse: 1.0,
                bf_gain: 0.0,
                az_err: None,
                el_err: None,
                dist_err: None,
            },
        };
        scores.push(score);
    }
    Ok(scores)
}

fn score_columns(sc: &Scenario, est: &ChannelMatrix) -> Result<Vec<UeScore>> {
    (0..sc.channel.n_users())
        .map(|k| {
            let a_true = sc.channel.column(k);
            let a_hat = est.column(k);
            Ok(UeScore {
                nmse: nmse(&a_true, &a_hat)?,
                bf_gain: beamforming_gain(&a_true, &a_hat)?,
                az_err: None,
                el_err: None,
                dist_err: None,
            })
        })
        .collect()
}

/// Joint Cartesian MUSIC on the unsmoothed sample covariance.
pub fn music3d_locations(
    cfg: &ExperimentConfig,
    block: &SnapshotBlock,
    g: &ArrayGeometry,
) -> Result<(Vec<PolarLocation>, usize)> {
    let snapshots: Vec<CVector> = block.received.column_iter().map(|c| c.into_owned()).collect();
    let cov = sample_covariance(&snapshots)?;
    let un = noise_subspace(&cov, cfg.k_ues)?;
    let spectrum = spectrum_3d(&un, &cfg.grid3d()?, g)?;
    let peaks = find_peaks(&spectrum, cfg.k_ues);
    let locs = peaks
        .peaks
        .iter()
        .map(|p| {
            UeLocation {
                x: p.coords[0],
                y: p.coords[1],
                z: p.coords[2],
            }
            .to_polar()
        })
        .collect();
    Ok((locs, peaks.found()))
}

/// Runs every configured method on one `(snr, trial)` cell.
pub fn run_trial(cfg: &ExperimentConfig, g: &ArrayGeometry, snr_index: usize, trial: usize) -> Vec<TrialRecord> {
    let snr_db = cfg.snr_db_list[snr_index];
    let record = |method, outcome: Result<Vec<UeScore>>, peaks_found| {
        let outcome = outcome.map_err(|e| {
            log::warn!("{method} failed at {snr_db} dB, trial {trial}: {e}");
            e.to_string()
        });
        TrialRecord {
            method,
            snr_db,
            trial,
            outcome,
            peaks_found,
        }
    };
    let sc = match build_scenario(cfg, g, snr_index, trial, cfg.l_pilots) {
        Ok(sc) => sc,
        Err(e) => {
            let msg = e.to_string();
            return cfg
                .methods
                .iter()
                .map(|&m| record(m, Err(Error::invalid(msg.clone())), None))
                .collect();
        }
    };
    let (_, d_max) = cfg.distance_bounds().expect("validated config");

    let needs_two_step = cfg
        .methods
        .iter()
        .any(|m| matches!(m, Method::Proposed | Method::ProposedNoCorrect));
    let two_step = needs_two_step.then(|| {
        let ts = cfg.two_step()?;
        two_step_estimate(&sc.block, cfg.k_ues, cfg.smoothing(), &ts, g)
    });

    cfg.methods
        .iter()
        .map(|&method| match method {
            Method::Proposed | Method::ProposedNoCorrect => {
                let est = two_step.as_ref().expect("computed above");
                match est {
                    Ok(est) => record(
                        method,
                        score_parametric(&sc, &est.locations, g, method == Method::Proposed, d_max),
                        Some(est.angular_peaks.found()),
                    ),
                    Err(e) => record(method, Err(Error::invalid(e.to_string())), None),
                }
            }
            Method::Ls => record(
                method,
                ls_baseline(&sc.block.received, &sc.block.pilots).and_then(|a| score_columns(&sc, &a)),
                None,
            ),
            Method::Rls => record(
                method,
                rls_baseline(&sc.block.received, &sc.block.pilots, sc.block.noise_var)
                    .and_then(|a| score_columns(&sc, &a)),
                None,
            ),
            Method::Music3d => match music3d_locations(cfg, &sc.block, g) {
                Ok((locs, found)) => record(method, score_parametric(&sc, &locs, g, true, d_max), Some(found)),
                Err(e) => record(method, Err(e), None),
            },
        })
        .collect()
}

/// Full sweep. Records are ordered by SNR point, trial, then configured
/// method order, whatever the thread count.
pub fn run_experiment(cfg: &ExperimentConfig, threads: Option<usize>) -> Result<MetricReport> {
    cfg.validate()?;
    let g = cfg.geometry()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let cells: Vec<(usize, usize)> = (0..cfg.snr_db_list.len())
        .flat_map(|s| (0..cfg.trials).map(move |t| (s, t)))
        .collect();
    let start = Instant::now();
    let per_cell: Vec<Vec<TrialRecord>> =
        pool.install(|| cells.par_iter().map(|&(s, t)| run_trial(cfg, &g, s, t)).collect());
    let elapsed = start.elapsed().as_secs_f64();
    log::info!("{} trial cells in {elapsed:.1} s", cells.len());
    if elapsed > RUNTIME_BUDGET_SECS {
        log::warn!("sweep took {elapsed:.0} s, over the {RUNTIME_BUDGET_SECS:.0} s budget");
    }

    let mut trials: Vec<TrialRecord> = per_cell.into_iter().flatten().collect();
    // aggregate rows come out method-major
    trials.sort_by_key(|t| {
        (
            cfg.methods.iter().position(|m| *m == t.method),
            cfg.snr_db_list.iter().position(|s| *s == t.snr_db),
            t.trial,
        )
    });
    let aggregates = aggregate(&trials);
    let failed: usize = aggregates.iter().map(|a| a.trials_failed).sum();
    if failed > 0 {
        log::warn!("{failed} method-trials failed and were excluded from the aggregates");
    }
    Ok(MetricReport { trials, aggregates })
}

fn opt_float(x: Option<f64>) -> String {
    x.map(format_float).unwrap_or_default()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn write_trials_csv<W: Write>(report: &MetricReport, mut w: W) -> std::io::Result<()> {
    writeln!(w, "{TRIALS_HEADER}")?;
    for t in &report.trials {
        let peaks = t.peaks_found.map(|p| p.to_string()).unwrap_or_default();
        let prefix = format!("{},{},{}", t.method, format_float(t.snr_db), t.trial);
        match &t.outcome {
            Ok(scores) => {
                for (k, s) in scores.iter().enumerate() {
                    writeln!(
                        w,
                        "{prefix},{k},{},{},{},{},{},{peaks}",
                        format_float(s.nmse),
                        format_float(s.bf_gain),
                        opt_float(s.az_err),
                        opt_float(s.el_err),
                        opt_float(s.dist_err),
                    )?;
                }
            }
            // a failed trial keeps one row with empty scores
            Err(_) => writeln!(w, "{prefix},,,,,,,{peaks}")?,
        }
    }
    Ok(())
}

pub fn write_aggregate_csv<W: Write>(report: &MetricReport, mut w: W) -> std::io::Result<()> {
    writeln!(w, "{AGGREGATE_HEADER}")?;
    for a in &report.aggregates {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            a.method,
            format_float(a.snr_db),
            format_float(a.mean_nmse),
            format_float(a.median_nmse),
            format_float(a.mean_bf_gain),
            a.trials_ok,
            a.trials_failed
        )?;
    }
    Ok(())
}

pub fn write_failures_csv<W: Write>(report: &MetricReport, mut w: W) -> std::io::Result<()> {
    writeln!(w, "{FAILURES_HEADER}")?;
    for (method, snr_db, trial, err) in report.failures() {
        writeln!(w, "{method},{},{trial},{}", format_float(snr_db), csv_field(err))?;
    }
    Ok(())
}

type CsvWriter = fn(&MetricReport, &mut BufWriter<File>) -> std::io::Result<()>;

/// Writes `trials.csv`, `aggregate.csv` and `failures.csv` into `dir`.
pub fn write_report(report: &MetricReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let writers: [(&str, CsvWriter); 3] = [
        ("trials.csv", |r, w| write_trials_csv(r, w)),
        ("aggregate.csv", |r, w| write_aggregate_csv(r, w)),
        ("failures.csv", |r, w| write_failures_csv(r, w)),
    ];
    for (name, write) in writers {
        let path = dir.join(name);
        let mut w = BufWriter::new(File::create(&path)?);
        write(report, &mut w)?;
        w.flush()?;
        written.push(path);
    }
    Ok(written)
}

/// Runs the two-step estimator on one trial and dumps its spectra:
/// `angular.csv`, `distance_<i>.csv` per angular peak, and `truth.csv`.
pub fn dump_spectrum(cfg: &ExperimentConfig, snr_index: usize, trial: usize, dir: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let g = cfg.geometry()?;
    let sc = build_scenario(cfg, &g, snr_index, trial, cfg.l_pilots)?;
    let mut ts = cfg.two_step()?;
    ts.keep_spectra = true;
    let est = two_step_estimate(&sc.block, cfg.k_ues, cfg.smoothing(), &ts, &g)?;
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    if let Some(s) = &est.angular_spectrum {
        let path = dir.join("angular.csv");
        s.write_csv(BufWriter::new(File::create(&path)?))?;
        written.push(path);
    }
    for (i, s) in est.distance_spectra.iter().enumerate() {
        let path = dir.join(format!("distance_{i}.csv"));
        s.write_csv(BufWriter::new(File::create(&path)?))?;
        written.push(path);
    }
    let path = dir.join("truth.csv");
    write_locations(&sc.truth, &est.locations, BufWriter::new(File::create(&path)?))?;
    written.push(path);
    Ok(written)
}

fn write_locations<W: Write>(truth: &[UeLocation], est: &[PolarLocation], mut w: W) -> std::io::Result<()> {
    writeln!(w, "kind,index,azimuth_rad,elevation_rad,distance_m")?;
    let rows = truth
        .iter()
        .map(|t| ("truth", t.to_polar()))
        .chain(est.iter().map(|e| ("estimate", *e)));
    let mut counters = [0usize; 2];
    for (kind, p) in rows {
        let c = &mut counters[usize::from(kind == "estimate")];
        writeln!(
            w,
            "{kind},{c},{},{},{}",
            format_float(p.azimuth),
            format_float(p.elevation),
            format_float(p.distance)
        )?;
        *c += 1;
    }
    w.flush()
}
