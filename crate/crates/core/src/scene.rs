//! Dense dual-channel scene synthesis and labeled dataset generation.
//!
//! Scene coordinates are micrometers on the camera canvas: pixel `(r, c)`
//! has its center at `((c + 0.5)·pitch, (r + 0.5)·pitch)`.

use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::AffineTransform;
use crate::error::{PsfError, Result};
use crate::io::{self, MaskMeta};
use crate::noise::{sample_measurement, BackgroundImage, NoiseParams};
use crate::optics::{Emitter, Image, OpticalConfig, PhaseMask, PsfModel};
use crate::rng::{derive_seed, seeded};

/// Super-Gaussian background `A1·exp(−½·qᵖ) + A2` with `q` the Mahalanobis
/// form of the pixel offset from `mu_px` (column, row).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackgroundParams {
    pub a1: f64,
    pub a2: f64,
    pub mu_px: [f64; 2],
    pub cov: [[f64; 2]; 2],
    pub p: f64,
}

impl Default for BackgroundParams {
    fn default() -> Self {
        Self {
            a1: 0.0,
            a2: 500.0,
            mu_px: [0.0, 0.0],
            cov: [[1.0, 0.0], [0.0, 1.0]],
            p: 1.0,
        }
    }
}

impl BackgroundParams {
    pub fn constant(value: f64) -> Self {
        Self {
            a2: value,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [[a, b], [b2, d]] = self.cov;
        let finite = [self.a1, self.a2, self.p, a, b, b2, d, self.mu_px[0], self.mu_px[1]]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.a1 < 0.0 || self.a2 < 0.0 || self.p <= 0.0 {
            return Err(PsfError::InvalidArgument(
                "background needs finite a1, a2 >= 0 and p > 0".into(),
            ));
        }
        if (b - b2).abs() > 1e-12 * (a.abs() + d.abs()) || !(a > 0.0 && a * d - b * b > 0.0) {
            return Err(PsfError::InvalidArgument(format!(
                "background covariance {:?} is not symmetric positive definite",
                self.cov
            )));
        }
        Ok(())
    }
}

pub fn super_gaussian_background(params: &BackgroundParams, shape: (usize, usize)) -> Result<BackgroundImage> {
    params.validate()?;
    let [[a, b], [_, d]] = params.cov;
    let det = a * d - b * b;
    let (ia, ib, id) = (d / det, -b / det, a / det);
    let pixels = Array2::from_shape_fn(shape, |(r, c)| {
        let dx = c as f64 - params.mu_px[0];
        let dy = r as f64 - params.mu_px[1];
        let q = ia * dx * dx + 2.0 * ib * dx * dy + id * dy * dy;
        params.a1 * (-0.5 * q.powf(params.p)).exp() + params.a2
    });
    BackgroundImage::new(pixels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub emitters: Vec<Emitter>,
    /// Applied identically to both channels at sampling time.
    pub background: BackgroundParams,
    /// Fraction of each emitter's photons sent to channel 1.
    pub split: f64,
}

impl Scene {
    pub fn new(emitters: Vec<Emitter>, background: BackgroundParams, split: f64) -> Result<Self> {
        let s = Self {
            emitters,
            background,
            split,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.split) {
            return Err(PsfError::InvalidArgument(format!("split {} outside [0, 1]", self.split)));
        }
        if let Some(e) = self.emitters.iter().find(|e| !(e.z_um >= 0.0 && e.photons >= 0.0)) {
            return Err(PsfError::InvalidArgument(format!("invalid emitter {e:?}")));
        }
        self.background.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub ch1: Image,
    pub ch2: Image,
    /// Maps channel-2 coordinates onto channel 1, if not yet applied.
    pub transform: Option<AffineTransform>,
}

impl ImagePair {
    pub fn new(ch1: Image, ch2: Image) -> Result<Self> {
        if ch1.shape() != ch2.shape() || (ch1.pitch_um - ch2.pitch_um).abs() > 1e-12 {
            return Err(PsfError::InvalidArgument("channels differ in shape or pitch".into()));
        }
        Ok(Self {
            ch1,
            ch2,
            transform: None,
        })
    }
}

/// Nearest canvas pixel to a scene coordinate and the residual offset.
pub(crate) fn anchor(pos_um: f64, pitch: f64) -> (i64, f64) {
    let idx = (pos_um / pitch - 0.5).round() as i64;
    (idx, pos_um - (idx as f64 + 0.5) * pitch)
}

/// Add `psf` (odd window centered on its middle pixel) into `canvas` with the
/// window center at `(row, col)`, dropping what falls outside.
pub(crate) fn splat(canvas: &mut Array2<f64>, psf: &Array2<f64>, row: i64, col: i64) {
    let h = (psf.nrows() / 2) as i64;
    let (rows, cols) = canvas.dim();
    for ((r, c), v) in psf.indexed_iter() {
        let rr = row + r as i64 - h;
        let cc = col + c as i64 - h;
        if rr >= 0 && cc >= 0 && (rr as usize) < rows && (cc as usize) < cols {
            canvas[[rr as usize, cc as usize]] += v;
        }
    }
}

/// Noiseless signal images of both channels on a `shape` canvas.
pub fn render_scene(
    model: &PsfModel,
    mask1: &PhaseMask,
    mask2: &PhaseMask,
    scene: &Scene,
    shape: (usize, usize),
    window_px: usize,
) -> Result<ImagePair> {
    scene.validate()?;
    model.check_mask(mask1)?;
    model.check_mask(mask2)?;
    model.check_window(window_px)?;
    let pitch = model.pitch_um();
    let (h_um, w_um) = (shape.0 as f64 * pitch, shape.1 as f64 * pitch);
    let reach = (window_px / 2) as f64 * pitch;
    let rendered: Vec<_> = scene
        .emitters
        .par_iter()
        .map(|e| {
            if e.x_um < -reach || e.y_um < -reach || e.x_um > w_um + reach || e.y_um > h_um + reach {
                log::warn!("emitter at ({}, {}) um lies outside the field of view", e.x_um, e.y_um);
            }
            let (col, dx) = anchor(e.x_um, pitch);
            let (row, dy) = anchor(e.y_um, pitch);
            let p1 = model.psf(mask1, &Emitter::new(dx, dy, e.z_um, e.photons * scene.split), window_px)?;
            let p2 = model.psf(mask2, &Emitter::new(dx, dy, e.z_um, e.photons * (1.0 - scene.split)), window_px)?;
            Ok((row, col, p1, p2))
        })
        .collect::<Result<_>>()?;
    let mut ch1 = Array2::zeros(shape);
    let mut ch2 = Array2::zeros(shape);
    for (row, col, p1, p2) in &rendered {
        splat(&mut ch1, &p1.pixels, *row, *col);
        splat(&mut ch2, &p2.pixels, *row, *col);
    }
    ImagePair::new(Image { pixels: ch1, pitch_um: pitch }, Image { pixels: ch2, pitch_um: pitch })
}

/// Parameters of random scene generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneParams {
    pub density_per_um2: f64,
    /// Side of the square region emitters are drawn in.
    pub fov_um: f64,
    /// Empty border added around the emitter region on the canvas.
    pub margin_um: f64,
    pub z_range_um: [f64; 2],
    pub photons_range: [f64; 2],
    pub background: BackgroundParams,
    pub split: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            density_per_um2: 0.02,
            fov_um: 12.0,
            margin_um: 0.0,
            z_range_um: [0.0, 4.0],
            photons_range: [10_000.0, 20_000.0],
            background: BackgroundParams::constant(500.0),
            split: 0.5,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.density_per_um2 >= 0.0
            && self.fov_um > 0.0
            && self.margin_um >= 0.0
            && self.z_range_um[0] >= 0.0
            && self.z_range_um[0] <= self.z_range_um[1]
            && self.photons_range[0] >= 0.0
            && self.photons_range[0] <= self.photons_range[1]
            && (0.0..=1.0).contains(&self.split);
        if !ok {
            return Err(PsfError::InvalidConfig(format!("invalid scene parameters {self:?}")));
        }
        self.background.validate()
    }

    /// Canvas shape in pixels of pitch `pitch_um`.
    pub fn canvas_shape(&self, pitch_um: f64) -> (usize, usize) {
        let side = ((self.fov_um + 2.0 * self.margin_um) / pitch_um).round() as usize;
        (side, side)
    }
}

/// Random emitters: count ~ Poisson(density·fov²), positions and photons
/// uniform, inside the emitter region offset by the margin.
pub fn sample_scene(params: &SceneParams, seed: u64) -> Result<Scene> {
    params.validate()?;
    let mut rng = seeded(seed);
    let mean = params.density_per_um2 * params.fov_um * params.fov_um;
    let count = if mean > 0.0 {
        Poisson::new(mean)
            .map_err(|e| PsfError::InvalidArgument(e.to_string()))?
            .sample(&mut rng) as usize
    } else {
        0
    };
    let uniform = |rng: &mut rand_chacha::ChaCha8Rng, [lo, hi]: [f64; 2]| {
        if hi > lo {
            rng.random_range(lo..hi)
        } else {
            lo
        }
    };
    let lo = params.margin_um;
    let region = [lo, lo + params.fov_um];
    let emitters = (0..count)
        .map(|_| {
            let x = uniform(&mut rng, region);
            let y = uniform(&mut rng, region);
            let z = uniform(&mut rng, params.z_range_um);
            let n = uniform(&mut rng, params.photons_range);
            Emitter::new(x, y, z, n)
        })
        .collect();
    Scene::new(emitters, params.background, params.split)
}

/// Render a scene and draw one noisy frame per channel.
pub fn simulate_pair(
    model: &PsfModel,
    masks: (&PhaseMask, &PhaseMask),
    scene: &Scene,
    shape: (usize, usize),
    window_px: usize,
    noise: &NoiseParams,
    seed: u64,
) -> Result<ImagePair> {
    let clean = render_scene(model, masks.0, masks.1, scene, shape, window_px)?;
    let bg = super_gaussian_background(&scene.background, shape)?;
    let ch1 = sample_measurement(&clean.ch1, &bg, noise, derive_seed(seed, 1))?;
    let ch2 = sample_measurement(&clean.ch2, &bg, noise, derive_seed(seed, 2))?;
    ImagePair::new(ch1, ch2)
}

/// One row of a labels CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Label {
    pub example_id: usize,
    pub x_um: f64,
    pub y_um: f64,
    pub z_um: f64,
    pub photons: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileChecksum {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub optical: OpticalConfig,
    pub mask1: MaskMeta,
    pub mask2: MaskMeta,
    pub mask1_sha256: String,
    pub mask2_sha256: String,
    pub window_px: usize,
    pub scene: SceneParams,
    pub noise: NoiseParams,
    pub seed: u64,
    pub n_examples: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub example_seeds: Vec<u64>,
    pub files: Vec<FileChecksum>,
}

pub(crate) fn mask_checksum(mask: &PhaseMask) -> String {
    let bytes: Vec<u8> = mask.values.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
    io::sha256_bytes(&bytes)
}

/// Dataset layout options.
#[derive(Debug, Clone, Copy)]
pub struct DatasetSpec {
    pub n_examples: usize,
    pub window_px: usize,
    pub seed: u64,
    /// Fraction of examples assigned to training.
    pub train_fraction: f64,
}

/// Write `n_examples` noisy image pairs, `labels.csv` and `manifest.json`.
/// Example `i` uses seed `derive_seed(seed, i)`, so any subset can be
/// regenerated independently.
pub fn generate_dataset(
    model: &PsfModel,
    masks: (&PhaseMask, &PhaseMask),
    params: &SceneParams,
    noise: &NoiseParams,
    spec: &DatasetSpec,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    params.validate()?;
    noise.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| PsfError::io(out_dir, e))?;
    let shape = params.canvas_shape(model.pitch_um());
    let seeds: Vec<u64> = (0..spec.n_examples).map(|i| derive_seed(spec.seed, i as u64)).collect();
    let examples: Vec<(Scene, ImagePair)> = seeds
        .par_iter()
        .map(|&s| {
            let scene = sample_scene(params, derive_seed(s, 0))?;
            let pair = simulate_pair(model, masks, &scene, shape, spec.window_px, noise, s)?;
            Ok((scene, pair))
        })
        .collect::<Result<_>>()?;

    let mut files = Vec::new();
    let mut labels = Vec::new();
    for (i, (scene, pair)) in examples.iter().enumerate() {
        for (tag, img) in [("ch1", &pair.ch1), ("ch2", &pair.ch2)] {
            let name = format!("example_{i:05}_{tag}.f32");
            let path = out_dir.join(&name);
            io::write_image(&path, img)?;
            files.push(FileChecksum {
                sha256: io::sha256_file(&path)?,
                path: name,
            });
        }
        labels.extend(scene.emitters.iter().map(|e| Label {
            example_id: i,
            x_um: e.x_um,
            y_um: e.y_um,
            z_um: e.z_um,
            photons: e.photons,
        }));
    }
    let labels_path = out_dir.join("labels.csv");
    io::write_csv_with_header(&labels_path, &["example_id", "x_um", "y_um", "z_um", "photons"], &labels)?;
    files.push(FileChecksum {
        path: "labels.csv".into(),
        sha256: io::sha256_file(&labels_path)?,
    });
    let n_train = (spec.n_examples as f64 * spec.train_fraction).round() as usize;
    let n = model.grid().n;
    let pad = model.grid().fft_pad;
    let manifest = DatasetManifest {
        optical: *model.config(),
        mask1: MaskMeta::new(model.config(), n, pad),
        mask2: MaskMeta::new(model.config(), n, pad),
        mask1_sha256: mask_checksum(masks.0),
        mask2_sha256: mask_checksum(masks.1),
        window_px: spec.window_px,
        scene: *params,
        noise: *noise,
        seed: spec.seed,
        n_examples: spec.n_examples,
        n_train,
        n_test: spec.n_examples - n_train,
        example_seeds: seeds,
        files,
    };
    io::save_json(&out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}
