//! Experiment runner: configuration, UE placement, Monte-Carlo sweeps,
//! the zero-elevation 3D MUSIC scenario and CSV output.

mod config;
mod experiment;
mod fig1;

pub use crate::numfmt::format_float;
pub use config::{ExperimentConfig, Method};
pub use experiment::{
    build_scenario, dump_spectrum, music3d_locations, place_ues, run_experiment, run_trial, score_parametric,
    well_separated, write_aggregate_csv, write_failures_csv, write_report, write_trials_csv, Scenario,
    AGGREGATE_HEADER, FAILURES_HEADER, PLACEMENT_BUDGET, TRIALS_HEADER,
};
pub use fig1::{distinct_peaks, fig1_grid, resolved_count, scenario_fig1, write_fig1, Fig1Outcome, Fig1Run};
