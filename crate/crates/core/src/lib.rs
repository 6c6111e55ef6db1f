//! Parametric near-field channel estimation for uniform planar arrays.
//!
//! The crate synthesizes line-of-sight uplink channels from users located in
//! the radiative near-field of a square array and estimates them with a
//! two-step MUSIC search (angles first, then distance) on a spatially
//! smoothed covariance, followed by a stacked least-squares correction of
//! the per-user complex gains. Pseudo-inverse LS and regularized LS
//! estimators are provided as baselines, together with a Monte-Carlo
//! harness that scores every method by NMSE and normalized beamforming gain.
//!
//! Module map:
//!
//! - [`geometry`]: element layout, polar/Cartesian conversion, Fresnel distance.
//! - [`channel`]: exact, far-field and Fresnel-polar array responses, plus an
//!   aperture quadrature oracle.
//! - [`signal`]: pilots, noise, received snapshot blocks and RNG streams.
//! - [`subspace`]: covariance estimation, spatial smoothing, eigendecomposition.
//! - [`music`]: grids, spectra, peak search and the two-step estimator.
//! - [`refine`]: channel reconstruction, gain correction, LS / R-LS baselines.
//! - [`metrics`]: NMSE, beamforming gain, estimate-to-truth assignment.
//! - [`harness`]: experiment configuration, Monte-Carlo runner, CSV output.

// `!(x >= 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod metrics;
pub mod music;
pub mod refine;
pub mod signal;
pub mod subspace;

mod numfmt;
mod quadrature;

pub use num_complex::Complex64 as C64;

/// Dense complex matrix used throughout the crate.
pub type CMatrix = nalgebra::DMatrix<C64>;
/// Dense complex column vector.
pub type CVector = nalgebra::DVector<C64>;

pub use channel::{ChannelMatrix, ColumnKind};
pub use error::{Error, Result};
pub use geometry::{ArrayGeometry, NearFieldBounds, PolarLocation, UeLocation};
pub use harness::{ExperimentConfig, Method};
pub use metrics::{beamforming_gain, nmse};
pub use music::{GridSpec, PeakSet, SpectrumGrid};
pub use signal::SnapshotBlock;
pub use subspace::{CovarianceEstimate, NoiseSubspace};
