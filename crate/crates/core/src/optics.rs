//! Scalar-diffraction forward model.
//!
//! A point emitter at `(x0, y0, z0)` is imaged through a pupil carrying a
//! programmable phase mask. The pupil field is
//!
//! ```text
//! E(ρ, φ) = A(ρ) · exp(j [M(ρ, φ) + k·c·(x0 ρcosφ + y0 ρsinφ) + Φz(z0, f)])
//! Φz      = k·z0·n2·√(1 − (n1/n2)²ρ²) − k·f·n1·√(1 − ρ²)
//! ```
//!
//! with `k = 2π/λ`, `c = M·NA/√(M² − NA²)` and `A` the binary aperture
//! `ρ ≤ n2/n1`. The PSF is `|FFT(E)|²`, scaled to the emitter's photon count
//! and blurred with a Gaussian transfer function.
//!
//! Discretization: the `n × n` pupil grid is embedded in an `N = n·fft_pad`
//! FFT. The pupil sampling step is chosen so one FFT bin is exactly
//! `pixel_um / oversample` in sample space, with `oversample` the smallest
//! integer that keeps the unit pupil disk inside the `n × n` grid.

use std::f64::consts::PI;

use ndarray::Array2;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PsfError, Result};
use crate::fft::{signed_bin, Fft2};

/// Scalar optical constants of the microscope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OpticalConfig {
    pub wavelength_um: f64,
    pub na: f64,
    pub magnification: f64,
    pub n_immersion: f64,
    pub n_sample: f64,
    /// Camera pixel pitch projected to sample space.
    pub pixel_um: f64,
    pub blur_sigma_um: f64,
    /// Focal-plane setting, measured from the coverslip.
    pub focus_um: f64,
}

impl Default for OpticalConfig {
    fn default() -> Self {
        Self {
            wavelength_um: 0.6,
            na: 1.49,
            magnification: 100.0,
            n_immersion: 1.518,
            n_sample: 1.33,
            pixel_um: 0.11,
            blur_sigma_um: 0.07,
            focus_um: 0.0,
        }
    }
}

impl OpticalConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.wavelength_um,
            self.na,
            self.magnification,
            self.n_immersion,
            self.n_sample,
            self.pixel_um,
            self.blur_sigma_um,
            self.focus_um,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(PsfError::InvalidConfig("non-finite optical constant".into()));
        }
        if !(self.na > 0.0 && self.na < self.n_immersion) {
            return Err(PsfError::InvalidConfig(format!(
                "need 0 < na < n_immersion, got na = {}, n_immersion = {}",
                self.na, self.n_immersion
            )));
        }
        if !(self.n_sample > 0.0 && self.n_sample <= self.n_immersion) {
            return Err(PsfError::InvalidConfig(format!(
                "need 0 < n_sample <= n_immersion, got {}",
                self.n_sample
            )));
        }
        if self.wavelength_um <= 0.0 || self.pixel_um <= 0.0 || self.blur_sigma_um <= 0.0 {
            return Err(PsfError::InvalidConfig(
                "wavelength_um, pixel_um and blur_sigma_um must be positive".into(),
            ));
        }
        if self.magnification <= self.na {
            return Err(PsfError::InvalidConfig("magnification must exceed na".into()));
        }
        Ok(())
    }

    /// Coefficient of the lateral phase ramp, `M·NA/√(M² − NA²)`.
    pub fn lateral_coefficient(&self) -> f64 {
        let m = self.magnification;
        m * self.na / (m * m - self.na * self.na).sqrt()
    }

    /// Aperture cutoff in normalized pupil radius.
    pub fn aperture_cutoff(&self) -> f64 {
        self.n_sample / self.n_immersion
    }

    /// Effective numerical aperture set by the aperture cutoff.
    pub fn effective_na(&self) -> f64 {
        self.aperture_cutoff() * self.lateral_coefficient()
    }

    pub fn wavenumber(&self) -> f64 {
        2.0 * PI / self.wavelength_um
    }
}

/// Discretized pupil plane.
#[derive(Debug, Clone)]
pub struct PupilGrid {
    pub n: usize,
    pub fft_pad: usize,
    /// Integer number of FFT bins per camera pixel.
    pub oversample: usize,
    /// Pupil sample spacing in normalized radius.
    pub rho_step: f64,
    /// FFT bin pitch in sample space (`pixel_um / oversample`).
    pub bin_um: f64,
    pub rho: Array2<f64>,
    pub phi: Array2<f64>,
    pub aperture: Array2<bool>,
}

impl PupilGrid {
    pub fn fft_len(&self) -> usize {
        self.n * self.fft_pad
    }

    pub fn aperture_count(&self) -> usize {
        self.aperture.iter().filter(|&&a| a).count()
    }

    /// Normalized pupil coordinates `(ρx, ρy)` of mask pixel `(row, col)`.
    pub fn coords(&self, row: usize, col: usize) -> (f64, f64) {
        let c = (self.n / 2) as f64;
        ((col as f64 - c) * self.rho_step, (row as f64 - c) * self.rho_step)
    }
}

/// Build the pupil grid for `config`.
pub fn make_pupil_grid(config: &OpticalConfig, n: usize, fft_pad: usize) -> Result<PupilGrid> {
    config.validate()?;
    if n < 16 {
        return Err(PsfError::InvalidConfig(format!("pupil grid n = {n} < 16")));
    }
    if fft_pad < 1 {
        return Err(PsfError::InvalidConfig("fft_pad must be >= 1".into()));
    }
    let big_n = n * fft_pad;
    let coef = config.lateral_coefficient();
    let needed = 2.0 * fft_pad as f64 * coef * config.pixel_um / config.wavelength_um;
    let oversample = ((needed - 1e-9).ceil() as usize).max(1);
    let rho_step = config.wavelength_um * oversample as f64 / (big_n as f64 * coef * config.pixel_um);
    let cutoff = config.aperture_cutoff();
    let diameter_px = 2.0 * cutoff / rho_step;
    if diameter_px < 8.0 {
        return Err(PsfError::InvalidConfig(format!(
            "aperture spans only {diameter_px:.1} pupil pixels (need >= 8); increase n"
        )));
    }
    let center = (n / 2) as f64;
    let mut rho = Array2::zeros((n, n));
    let mut phi = Array2::zeros((n, n));
    let mut aperture = Array2::from_elem((n, n), false);
    for r in 0..n {
        for c in 0..n {
            let px = (c as f64 - center) * rho_step;
            let py = (r as f64 - center) * rho_step;
            let rr = px.hypot(py);
            rho[[r, c]] = rr;
            phi[[r, c]] = py.atan2(px);
            aperture[[r, c]] = rr <= cutoff;
        }
    }
    Ok(PupilGrid {
        n,
        fft_pad,
        oversample,
        rho_step,
        bin_um: config.pixel_um / oversample as f64,
        rho,
        phi,
        aperture,
    })
}

/// Real-valued phase surface on the pupil grid, in radians.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseMask {
    pub values: Array2<f64>,
}

impl PhaseMask {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.nrows() != values.ncols() {
            return Err(PsfError::InvalidArgument("phase mask must be square".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(PsfError::InvalidArgument("phase mask has non-finite values".into()));
        }
        Ok(Self { values })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            values: Array2::zeros((n, n)),
        }
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }
}

/// A point emitter. `z_um` is measured from the coverslip into the sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Emitter {
    pub x_um: f64,
    pub y_um: f64,
    pub z_um: f64,
    pub photons: f64,
}

impl Emitter {
    pub fn new(x_um: f64, y_um: f64, z_um: f64, photons: f64) -> Self {
        Self {
            x_um,
            y_um,
            z_um,
            photons,
        }
    }

    pub fn on_axis(z_um: f64, photons: f64) -> Self {
        Self::new(0.0, 0.0, z_um, photons)
    }
}

/// 2D image of expected (or measured) photon counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub pixels: Array2<f64>,
    pub pitch_um: f64,
}

impl Image {
    pub fn zeros(rows: usize, cols: usize, pitch_um: f64) -> Self {
        Self {
            pixels: Array2::zeros((rows, cols)),
            pitch_um,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.pixels.dim()
    }

    pub fn sum(&self) -> f64 {
        self.pixels.sum()
    }
}

/// Defocus phase `k·[z·n2·√(1 − (n1/n2)²ρ²) − f·n1·√(1 − ρ²)]` inside the
/// aperture, zero outside.
pub fn defocus_phase(config: &OpticalConfig, grid: &PupilGrid, z_um: f64, focus_um: f64) -> Array2<f64> {
    let k = config.wavenumber();
    let ratio = config.n_immersion / config.n_sample;
    Array2::from_shape_fn((grid.n, grid.n), |(r, c)| {
        if !grid.aperture[[r, c]] {
            return 0.0;
        }
        let rho2 = grid.rho[[r, c]].powi(2);
        let water = (1.0 - ratio * ratio * rho2).max(0.0).sqrt();
        let oil = (1.0 - rho2).max(0.0).sqrt();
        k * (z_um * config.n_sample * water - focus_um * config.n_immersion * oil)
    })
}

/// Linear phase ramp that shifts the PSF laterally by `(x_um, y_um)`.
pub fn lateral_phase(config: &OpticalConfig, grid: &PupilGrid, x_um: f64, y_um: f64) -> Array2<f64> {
    let kc = config.wavenumber() * config.lateral_coefficient();
    Array2::from_shape_fn((grid.n, grid.n), |(r, c)| {
        let (px, py) = grid.coords(r, c);
        kc * (x_um * px + y_um * py)
    })
}

#[derive(Debug, Clone, Copy)]
struct PupilSample {
    mask_idx: (usize, usize),
    fft_idx: usize,
    kx: f64,
    ky: f64,
    water: f64,
    oil: f64,
}

/// Cached forward state of one PSF evaluation, needed by the adjoint.
#[derive(Debug, Clone)]
pub(crate) struct Forward {
    pupil: Vec<Complex64>,
    field: Vec<Complex64>,
    /// Blurred, scaled intensity on the full `N × N` grid (wrapped order).
    pub(crate) intensity: Vec<f64>,
    scale: f64,
}

/// Precomputed PSF engine for one optical configuration and pupil grid.
///
/// Cheap to share across threads; every evaluation owns its FFT buffers.
#[derive(Debug, Clone)]
pub struct PsfModel {
    config: OpticalConfig,
    grid: PupilGrid,
    fft: Fft2,
    samples: Vec<PupilSample>,
    otf: Vec<f64>,
    scale_per_photon: f64,
}

impl PsfModel {
    pub fn new(config: OpticalConfig, n: usize, fft_pad: usize) -> Result<Self> {
        let grid = make_pupil_grid(&config, n, fft_pad)?;
        Ok(Self::from_grid(config, grid))
    }

    pub fn from_grid(config: OpticalConfig, grid: PupilGrid) -> Self {
        let big_n = grid.fft_len();
        let k = config.wavenumber();
        let kc = k * config.lateral_coefficient();
        let ratio = config.n_immersion / config.n_sample;
        let half = (grid.n / 2) as i64;
        let mut samples = Vec::new();
        for r in 0..grid.n {
            for c in 0..grid.n {
                if !grid.aperture[[r, c]] {
                    continue;
                }
                let (px, py) = grid.coords(r, c);
                let rho2 = grid.rho[[r, c]].powi(2);
                let wr = (r as i64 - half).rem_euclid(big_n as i64) as usize;
                let wc = (c as i64 - half).rem_euclid(big_n as i64) as usize;
                samples.push(PupilSample {
                    mask_idx: (r, c),
                    fft_idx: wr * big_n + wc,
                    kx: kc * px,
                    ky: kc * py,
                    water: k * config.n_sample * (1.0 - ratio * ratio * rho2).max(0.0).sqrt(),
                    oil: k * config.n_immersion * (1.0 - rho2).max(0.0).sqrt(),
                });
            }
        }
        let sigma = config.blur_sigma_um;
        let df = 1.0 / (big_n as f64 * grid.bin_um);
        let mut otf = vec![0.0; big_n * big_n];
        for r in 0..big_n {
            let fy = signed_bin(r, big_n) as f64 * df;
            for c in 0..big_n {
                let fx = signed_bin(c, big_n) as f64 * df;
                otf[r * big_n + c] = (-2.0 * PI * PI * sigma * sigma * (fx * fx + fy * fy)).exp();
            }
        }
        let scale_per_photon = 1.0 / ((big_n * big_n) as f64 * samples.len() as f64);
        Self {
            config,
            fft: Fft2::new(big_n),
            grid,
            samples,
            otf,
            scale_per_photon,
        }
    }

    pub fn config(&self) -> &OpticalConfig {
        &self.config
    }

    pub fn grid(&self) -> &PupilGrid {
        &self.grid
    }

    pub fn fft_len(&self) -> usize {
        self.fft.len()
    }

    /// Sample-space pitch of PSF pixels.
    pub fn pitch_um(&self) -> f64 {
        self.grid.bin_um
    }

    /// Largest odd window that fits the FFT grid.
    pub fn max_window(&self) -> usize {
        let n = self.fft_len();
        if n % 2 == 1 {
            n
        } else {
            n - 1
        }
    }

    pub(crate) fn check_window(&self, window_px: usize) -> Result<()> {
        if window_px % 2 == 0 || window_px == 0 {
            return Err(PsfError::InvalidArgument(format!("window_px = {window_px} must be odd")));
        }
        if window_px > self.fft_len() {
            return Err(PsfError::InvalidArgument(format!(
                "window_px = {window_px} exceeds FFT grid {}",
                self.fft_len()
            )));
        }
        Ok(())
    }

    pub(crate) fn check_mask(&self, mask: &PhaseMask) -> Result<()> {
        if mask.n() != self.grid.n {
            return Err(PsfError::InvalidArgument(format!(
                "mask is {}x{}, grid is {}x{}",
                mask.n(),
                mask.n(),
                self.grid.n,
                self.grid.n
            )));
        }
        Ok(())
    }

    /// PSF cropped to `window_px` around the optical axis.
    pub fn psf(&self, mask: &PhaseMask, emitter: &Emitter, window_px: usize) -> Result<Image> {
        self.check_mask(mask)?;
        self.check_window(window_px)?;
        let fwd = self.forward(mask, emitter.x_um, emitter.y_um, emitter.z_um.max(0.0), emitter.photons);
        Ok(self.crop(&fwd.intensity, window_px))
    }

    /// Blurred PSF over the whole padded FFT grid, optical axis at `(N/2, N/2)`.
    pub fn psf_full(&self, mask: &PhaseMask, emitter: &Emitter) -> Result<Image> {
        self.check_mask(mask)?;
        let fwd = self.forward(mask, emitter.x_um, emitter.y_um, emitter.z_um.max(0.0), emitter.photons);
        let n = self.fft_len();
        let h = (n / 2) as i64;
        let pixels = Array2::from_shape_fn((n, n), |(r, c)| {
            let wr = (r as i64 - h).rem_euclid(n as i64) as usize;
            let wc = (c as i64 - h).rem_euclid(n as i64) as usize;
            fwd.intensity[wr * n + wc]
        });
        Ok(Image {
            pixels,
            pitch_um: self.pitch_um(),
        })
    }

    /// Unblurred `|FFT(E)|²` summed over the full grid (before any blur).
    pub fn raw_energy(&self, mask: &PhaseMask, emitter: &Emitter) -> Result<f64> {
        self.check_mask(mask)?;
        let (_, field) = self.field(&mask.values, emitter.x_um, emitter.y_um, emitter.z_um.max(0.0));
        let scale = emitter.photons * self.scale_per_photon;
        Ok(field.iter().map(|u| u.norm_sqr()).sum::<f64>() * scale)
    }

    fn field(&self, mask: &Array2<f64>, x: f64, y: f64, z: f64) -> (Vec<Complex64>, Vec<Complex64>) {
        let n = self.fft_len();
        let f = self.config.focus_um;
        let mut field = vec![Complex64::default(); n * n];
        let mut pupil = Vec::with_capacity(self.samples.len());
        for s in &self.samples {
            let psi = mask[s.mask_idx] + s.kx * x + s.ky * y + s.water * z - s.oil * f;
            let e = Complex64::from_polar(1.0, psi);
            pupil.push(e);
            field[s.fft_idx] = e;
        }
        self.fft.forward(&mut field);
        (pupil, field)
    }

    /// Forward evaluation without clamping `z` (derivative probes may cross
    /// the coverslip).
    pub(crate) fn forward(&self, mask: &PhaseMask, x: f64, y: f64, z: f64, photons: f64) -> Forward {
        self.forward_values(&mask.values, x, y, z, photons)
    }

    pub(crate) fn forward_values(&self, mask: &Array2<f64>, x: f64, y: f64, z: f64, photons: f64) -> Forward {
        let n = self.fft_len();
        let (pupil, field) = self.field(mask, x, y, z);
        let scale = photons * self.scale_per_photon;
        let mut buf: Vec<Complex64> = field.iter().map(|u| Complex64::new(u.norm_sqr() * scale, 0.0)).collect();
        self.blur_in_place(&mut buf);
        let intensity = buf.iter().map(|v| v.re.max(0.0)).collect();
        let _ = n;
        Forward {
            pupil,
            field,
            intensity,
            scale,
        }
    }

    /// Circular convolution with the Gaussian blur kernel (self-adjoint).
    fn blur_in_place(&self, buf: &mut [Complex64]) {
        let n = self.fft_len();
        self.fft.forward(buf);
        let norm = 1.0 / (n * n) as f64;
        for (v, h) in buf.iter_mut().zip(&self.otf) {
            *v *= h * norm;
        }
        self.fft.inverse(buf);
    }

    pub(crate) fn crop(&self, full: &[f64], window_px: usize) -> Image {
        let n = self.fft_len() as i64;
        let h = (window_px / 2) as i64;
        let pixels = Array2::from_shape_fn((window_px, window_px), |(r, c)| {
            let wr = (r as i64 - h).rem_euclid(n) as usize;
            let wc = (c as i64 - h).rem_euclid(n) as usize;
            full[wr * n as usize + wc]
        });
        Image {
            pixels,
            pitch_um: self.pitch_um(),
        }
    }

    /// Accumulate into `grad` the gradient of a scalar loss with respect to
    /// the mask, given `d loss / d PSF` on the cropped window of `fwd`.
    pub(crate) fn backprop(&self, fwd: &Forward, window_grad: &Array2<f64>, grad: &mut Array2<f64>) {
        let n = self.fft_len();
        let w = window_grad.nrows();
        let h = (w / 2) as i64;
        let mut buf = vec![Complex64::default(); n * n];
        for ((r, c), g) in window_grad.indexed_iter() {
            let wr = (r as i64 - h).rem_euclid(n as i64) as usize;
            let wc = (c as i64 - h).rem_euclid(n as i64) as usize;
            buf[wr * n + wc].re += g;
        }
        self.blur_in_place(&mut buf);
        for (b, u) in buf.iter_mut().zip(&fwd.field) {
            *b = Complex64::new(b.re, 0.0) * u.conj();
        }
        self.fft.forward(&mut buf);
        for (s, e) in self.samples.iter().zip(&fwd.pupil) {
            grad[s.mask_idx] += -2.0 * fwd.scale * (e * buf[s.fft_idx]).im;
        }
    }
}

/// Convenience wrapper: build a model and render one PSF.
pub fn compute_psf(
    config: &OpticalConfig,
    grid: &PupilGrid,
    mask: &PhaseMask,
    emitter: &Emitter,
    window_px: usize,
) -> Result<Image> {
    PsfModel::from_grid(*config, grid.clone()).psf(mask, emitter, window_px)
}

/// PSFs of an on-axis emitter at each depth of `z_list`.
pub fn psf_zstack(
    model: &PsfModel,
    mask: &PhaseMask,
    z_list: &[f64],
    photons: f64,
    window_px: usize,
) -> Result<Vec<Image>> {
    if z_list.is_empty() {
        return Err(PsfError::InvalidArgument("empty z list".into()));
    }
    if let Some(z) = z_list.iter().find(|z| **z < 0.0 || !z.is_finite()) {
        return Err(PsfError::InvalidArgument(format!("invalid depth {z}")));
    }
    z_list
        .par_iter()
        .map(|&z| model.psf(mask, &Emitter::on_axis(z, photons), window_px))
        .collect()
}

/// Intensity-weighted centroid `(x, y)` of an image in sample coordinates
/// relative to the center pixel.
pub fn centroid(img: &Image) -> (f64, f64) {
    let (rows, cols) = img.shape();
    let (cr, cc) = ((rows / 2) as f64, (cols / 2) as f64);
    let mut s = 0.0;
    let mut sx = 0.0;
    let mut sy = 0.0;
    for ((r, c), v) in img.pixels.indexed_iter() {
        s += v;
        sx += v * (c as f64 - cc);
        sy += v * (r as f64 - cr);
    }
    (sx / s * img.pitch_um, sy / s * img.pitch_um)
}

/// Centroid `(x, y)` of a full periodic FFT-grid image, from the phase of its
/// first Fourier harmonic along each axis, relative to the center pixel.
///
/// Unlike [`centroid`] this is unbiased by tails wrapping around the grid
/// and recovers fractional shifts of band-limited intensity exactly.
pub fn circular_centroid(img: &Image) -> (f64, f64) {
    let (rows, cols) = img.shape();
    let axis = |len: usize, marginal: &dyn Fn(usize) -> f64| {
        let mut acc = Complex64::default();
        for k in 0..len {
            let t = -2.0 * PI * k as f64 / len as f64;
            acc += Complex64::from_polar(marginal(k), t);
        }
        let pos = -acc.arg() * len as f64 / (2.0 * PI);
        let center = (len / 2) as f64;
        // wrap into (−len/2, len/2] around the center pixel
        let d = pos - center;
        d - (d / len as f64).round() * len as f64
    };
    let x = axis(cols, &|c| img.pixels.column(c).sum());
    let y = axis(rows, &|r| img.pixels.row(r).sum());
    (x * img.pitch_um, y * img.pitch_um)
}

/// Fraction of `total` contained within `radius_um` of the image center.
pub fn encircled_energy(img: &Image, radius_um: f64, total: f64) -> f64 {
    let (rows, cols) = img.shape();
    let (cr, cc) = ((rows / 2) as f64, (cols / 2) as f64);
    let r2 = (radius_um / img.pitch_um).powi(2);
    img.pixels
        .indexed_iter()
        .filter(|((r, c), _)| (*r as f64 - cr).powi(2) + (*c as f64 - cc).powi(2) <= r2)
        .map(|(_, v)| v)
        .sum::<f64>()
        / total
}
