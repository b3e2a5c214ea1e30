//! Fourier data mixing and class-balanced pseudo-label re-weighting for
//! unsupervised synthetic-to-real part segmentation.
//!
//! The crate is organised bottom-up:
//!
//! * [`spectral`]: 2D DFT, amplitude/phase decomposition and amplitude alignment.
//! * [`mixing`]: ClassMix masks and cross-domain image/label mixing.
//! * [`classbalance`]: pixel statistics, rare class sampling, CB weight maps and
//!   the weighted cross-entropy that carries them into training.
//! * [`metrics`]: confusion matrices, IoU, precision and recall.
//! * [`toybench`]: a procedural quadruped benchmark with a synthetic and a
//!   "real" texture domain.
//! * [`trainer`]: a tiny segmentation network and the mean-teacher loop.
//! * [`io`]: PNG and manifest I/O.

pub mod classbalance;
pub mod error;
pub mod io;
pub mod metrics;
pub mod mixing;
pub mod spectral;
pub mod tensor;
pub mod toybench;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{ImageTensor, LabelMap, ScoreMap, IGNORE_LABEL};

/// Number of classes in the quadruped part catalog (background + 4 parts).
pub const NUM_CLASSES: usize = 5;

/// Class names indexed by class id.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["bg", "head", "torso", "leg", "tail"];

pub const BACKGROUND: u8 = 0;
pub const HEAD: u8 = 1;
pub const TORSO: u8 = 2;
pub const LEG: u8 = 3;
pub const TAIL: u8 = 4;

/// SplitMix64 finalizer; used to derive independent per-item seeds from a run seed.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for item `index` of a batch or split drawn under `run_seed`.
pub fn derive_seed(run_seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(run_seed) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03))
}
