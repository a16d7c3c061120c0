//! Design, simulation and evaluation of engineered point-spread-function
//! pairs for dense 3D emitter localization.
//!
//! The crate is organised along the processing chain:
//!
//! - [`optics`]: scalar Fourier-optics forward model (pupil, defocus with
//!   refractive-index mismatch, lateral shift, blur) and its adjoint.
//! - [`noise`]: Poisson + Gaussian read-noise camera model and likelihoods.
//! - [`scene`]: dual-channel scene synthesis and dataset generation.
//! - [`edof`]: extended-depth-of-field mask design by phase retrieval.
//! - [`crlb`]: Fisher information, Cramér-Rao bounds and pair optimization.
//! - [`localize`]: template-matching baseline decoder with MLE refinement.
//! - [`eval`]: matching, Jaccard, RMSE and volume metrics.
//! - [`calibration`]: affine channel registration, warping, axial ground truth.
//! - [`tracking`]: density-based linking and mean-square displacement.

pub mod calibration;
pub mod crlb;
pub mod edof;
pub mod error;
pub mod eval;
mod fft;
pub mod io;
pub mod localize;
pub mod noise;
pub mod optics;
pub mod optim;
pub mod rng;
pub mod scene;
pub mod tracking;

pub use error::{PsfError, Result};
