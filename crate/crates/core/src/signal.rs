//! Uplink forward model: random pilots, additive noise and the received
//! snapshot block `Q_R = A S + W`.

use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::channel::ChannelMatrix;
use crate::error::{Error, Result};
use crate::CMatrix;

/// Pilots and received samples of one coherence block.
#[derive(Debug, Clone)]
pub struct SnapshotBlock {
    /// `K x L` pilot matrix `S`.
    pub pilots: CMatrix,
    /// `N x L` received matrix `Q_R`.
    pub received: CMatrix,
    /// Per-entry noise variance `sigma^2` actually applied.
    pub noise_var: f64,
    pub snr_db: f64,
    pub seed: Option<u64>,
}

impl SnapshotBlock {
    pub fn n_antennas(&self) -> usize {
        self.received.nrows()
    }

    pub fn n_snapshots(&self) -> usize {
        self.received.ncols()
    }
}

/// What "signal power" means when converting an SNR into `sigma^2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SnrReference {
    /// `sigma^2 = (||A||_F^2 / N) / SNR`: mean received power per antenna.
    #[default]
    Relative,
    /// `sigma^2 = 1 / SNR`.
    Absolute,
}

impl SnrReference {
    pub fn noise_reference(self, a: &ChannelMatrix) -> f64 {
        match self {
            SnrReference::Relative => a.entries().norm_squared() / a.n_antennas().max(1) as f64,
            SnrReference::Absolute => 1.0,
        }
    }
}

impl std::str::FromStr for SnrReference {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relative" => Ok(SnrReference::Relative),
            "absolute" => Ok(SnrReference::Absolute),
            other => Err(Error::Config(format!(
                "snr_ref must be `relative` or `absolute`, got `{other}`"
            ))),
        }
    }
}

impl std::fmt::Display for SnrReference {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SnrReference::Relative => "relative",
            SnrReference::Absolute => "absolute",
        })
    }
}

/// Independent random streams used by one trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamRole {
    Placement = 1,
    Pilots = 2,
    Noise = 3,
}

/// Counter-based stream for `(seed, snr point, trial, role)`. The keystream
/// position is fixed by the arguments alone, so trials can run in any order
/// on any number of threads.
pub fn stream_rng(seed: u64, snr_index: Option<usize>, trial: usize, role: StreamRole) -> ChaCha8Rng {
    let snr_tag = snr_index.map_or(0, |i| i as u64 + 1);
    let stream = (snr_tag << 40) | ((trial as u64) << 8) | role as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `rows x cols` matrix of i.i.d. circularly-symmetric complex Gaussians
/// with variance `var`.
pub fn complex_gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, var: f64, rng: &mut R) -> CMatrix {
    let scale = (var / 2.0).sqrt();
    // column-major fill keeps the draw order independent of nalgebra internals
    let data: Vec<C64> = (0..rows * cols)
        .map(|_| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            C64::new(re * scale, im * scale)
        })
        .collect();
    CMatrix::from_vec(rows, cols, data)
}

/// Unit-variance complex Gaussian pilots, `K x L`.
pub fn gen_pilots<R: Rng + ?Sized>(k: usize, l: usize, rng: &mut R) -> CMatrix {
    complex_gaussian(k, l, 1.0, rng)
}

/// Synthesizes `Q_R = A S + W` with `W ~ CN(0, noise_ref / 10^(snr_db/10))`.
/// An infinite `snr_db` gives a noiseless block and draws nothing from `rng`.
pub fn received_block<R: Rng + ?Sized>(
    a: &ChannelMatrix,
    pilots: CMatrix,
    snr_db: f64,
    noise_ref: f64,
    rng: &mut R,
) -> Result<SnapshotBlock> {
    if pilots.nrows() != a.n_users() {
        return Err(Error::mismatch(
            "received_block pilots rows",
            a.n_users(),
            pilots.nrows(),
        ));
    }
    if pilots.ncols() == 0 {
        return Err(Error::EmptyInput {
            context: "received_block pilots",
        });
    }
    if !(noise_ref >= 0.0) || snr_db.is_nan() {
        return Err(Error::invalid(format!(
            "noise reference {noise_ref} and SNR {snr_db} dB must be non-negative and defined"
        )));
    }
    let mut received = a.entries() * &pilots;
    let noise_var = if snr_db == f64::INFINITY {
        0.0
    } else {
        noise_ref / 10f64.powf(snr_db / 10.0)
    };
    if noise_var > 0.0 {
        received += complex_gaussian(received.nrows(), received.ncols(), noise_var, rng);
    }
    Ok(SnapshotBlock {
        pilots,
        received,
        noise_var,
        snr_db,
        seed: None,
    })
}
