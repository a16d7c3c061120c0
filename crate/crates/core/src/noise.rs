//! Camera measurement model: Poisson shot noise plus Gaussian read noise,
//! its reparameterized Gaussian approximation, and log-likelihoods.

use ndarray::{Array2, Zip};
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{PsfError, Result};
use crate::optics::Image;
use crate::rng::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    #[default]
    ExactPoisson,
    /// `V + B + √(V + B)·ε` with `ε ~ N(0, 1)`.
    GaussianApprox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseParams {
    /// Camera baseline (offset) in counts.
    pub baseline: f64,
    pub read_sigma: f64,
    pub mode: NoiseMode,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            baseline: 100.0,
            read_sigma: 1.0,
            mode: NoiseMode::ExactPoisson,
        }
    }
}

impl NoiseParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.read_sigma >= 0.0 && self.read_sigma.is_finite() && self.baseline.is_finite()) {
            return Err(PsfError::InvalidConfig("read_sigma must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Likelihood family used for log-likelihoods and Fisher information.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    #[default]
    Poisson,
    /// Gaussian approximation of Poisson + read noise.
    Mixed,
}

/// Per-pixel expected background photons.
#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundImage {
    pub pixels: Array2<f64>,
}

impl BackgroundImage {
    pub fn new(pixels: Array2<f64>) -> Result<Self> {
        if pixels.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(PsfError::InvalidArgument("background must be finite and >= 0".into()));
        }
        Ok(Self { pixels })
    }

    pub fn constant(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            pixels: Array2::from_elem((rows, cols), value),
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::constant(rows, cols, 0.0)
    }
}

fn check_shapes(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(PsfError::InvalidArgument(format!("shape mismatch {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Draw one noisy camera frame. Row `r` uses counter stream `r` of `seed`,
/// so the output is independent of evaluation order.
pub fn sample_measurement(
    model: &Image,
    background: &BackgroundImage,
    noise: &NoiseParams,
    seed: u64,
) -> Result<Image> {
    check_shapes(model.shape(), background.pixels.dim())?;
    noise.validate()?;
    let (rows, cols) = model.shape();
    let mut out = Array2::zeros((rows, cols));
    for r in 0..rows {
        let mut rng = stream_rng(seed, r as u64);
        for c in 0..cols {
            let mean = model.pixels[[r, c]] + background.pixels[[r, c]];
            let shot = match noise.mode {
                NoiseMode::ExactPoisson => poisson(&mut rng, mean),
                NoiseMode::GaussianApprox => {
                    let eps: f64 = rng.sample(StandardNormal);
                    mean + mean.max(0.0).sqrt() * eps
                }
            };
            let read: f64 = rng.sample(StandardNormal);
            out[[r, c]] = shot + noise.baseline + noise.read_sigma * read;
        }
    }
    Ok(Image {
        pixels: out,
        pitch_um: model.pitch_um,
    })
}

fn poisson<R: Rng>(rng: &mut R, mean: f64) -> f64 {
    if mean <= 0.0 {
        return 0.0;
    }
    match Poisson::new(mean) {
        Ok(d) => d.sample(rng),
        Err(_) => 0.0,
    }
}

/// Reparameterized Gaussian-approximation sample for a fixed noise draw
/// `eps`; differentiable in `model` wherever `model + background > 0`.
pub fn reparameterized(model: &Image, background: &BackgroundImage, eps: &Array2<f64>) -> Result<Image> {
    check_shapes(model.shape(), background.pixels.dim())?;
    check_shapes(model.shape(), eps.dim())?;
    let mut out = Array2::zeros(model.shape());
    Zip::from(&mut out)
        .and(&model.pixels)
        .and(&background.pixels)
        .and(eps)
        .for_each(|o, &v, &b, &e| {
            let m = v + b;
            *o = m + m.max(0.0).sqrt() * e;
        });
    Ok(Image {
        pixels: out,
        pitch_um: model.pitch_um,
    })
}

/// Clamp negative counts to zero. Sampling never clips on its own.
pub fn clip_nonnegative(img: &Image) -> Image {
    Image {
        pixels: img.pixels.mapv(|v| v.max(0.0)),
        pitch_um: img.pitch_um,
    }
}

/// Log-likelihood of `measured` given expected signal `model` and
/// `background`, up to data-only constants.
///
/// - Poisson: `Σ (I − µ)·ln(P + B) − (P + B)`.
/// - Mixed: `−½ Σ [ln q + (I − µ − P − B)² / q]`, `q = P + B + σ²`.
pub fn log_likelihood(
    measured: &Image,
    model: &Image,
    background: &BackgroundImage,
    noise: &NoiseParams,
    family: Family,
) -> Result<f64> {
    check_shapes(measured.shape(), model.shape())?;
    check_shapes(model.shape(), background.pixels.dim())?;
    let mut total = 0.0;
    for ((idx, &i), &p) in measured.pixels.indexed_iter().zip(model.pixels.iter()) {
        let expected = p + background.pixels[idx];
        let counts = i - noise.baseline;
        match family {
            Family::Poisson => {
                if !(expected > 0.0) {
                    return Err(PsfError::Domain(format!(
                        "model + background = {expected} at pixel {idx:?}"
                    )));
                }
                total += counts * expected.ln() - expected;
            }
            Family::Mixed => {
                let q = expected + noise.read_sigma * noise.read_sigma;
                if !(q > 0.0) {
                    return Err(PsfError::Domain(format!("variance {q} at pixel {idx:?}")));
                }
                total -= 0.5 * (q.ln() + (counts - expected).powi(2) / q);
            }
        }
    }
    Ok(total)
}
