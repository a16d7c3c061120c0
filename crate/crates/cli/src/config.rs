//! Run configuration: one strict JSON document shared by every subcommand.

use std::path::Path;

use psfforge_core::calibration::RansacOptions;
use psfforge_core::crlb::{CrlbEvalSpec, PairOptions};
use psfforge_core::edof::EdofOptions;
use psfforge_core::localize::LocalizeParams;
use psfforge_core::noise::NoiseParams;
use psfforge_core::optics::{OpticalConfig, PsfModel};
use psfforge_core::scene::SceneParams;
use psfforge_core::tracking::{LinkParams, NucleusParams};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub n: usize,
    pub fft_pad: usize,
    /// Rendering window for scenes and PSF outputs.
    pub window_px: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            n: 64,
            fft_pad: 1,
            window_px: 31,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EdofConfig {
    pub range_um: f64,
    /// Target window; `None` uses the largest the grid allows.
    pub window_px: Option<usize>,
    pub ee_radius_um: f64,
    pub ee_depth_step_um: f64,
    pub options: EdofOptions,
}

impl Default for EdofConfig {
    fn default() -> Self {
        Self {
            range_um: 4.0,
            window_px: None,
            ee_radius_um: 0.3,
            ee_depth_step_um: 0.5,
            options: EdofOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairConfig {
    pub init_astigmatism_rad: f64,
    pub init_noise_rad: f64,
    pub options: PairOptions,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            init_astigmatism_rad: 1.0,
            init_noise_rad: 0.3,
            options: PairOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_examples: usize,
    pub train_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_examples: 10,
            train_fraction: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchConfig {
    pub threshold_um: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self { threshold_um: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackingConfig {
    pub link: LinkParams,
    pub max_lag: usize,
    /// Used by `track --synthetic`.
    pub nucleus: NucleusParams,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        Self {
            link: LinkParams::default(),
            max_lag: 20,
            nucleus: NucleusParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub densities_per_um2: Vec<f64>,
    pub n_images: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            densities_per_um2: vec![0.05, 0.1, 0.2, 0.3, 0.4, 0.5],
            n_images: 100,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed. Every component seed is derived from it.
    pub seed: u64,
    pub optical: OpticalConfig,
    pub grid: GridConfig,
    pub noise: NoiseParams,
    pub eval: CrlbEvalSpec,
    pub edof: EdofConfig,
    pub pair: PairConfig,
    pub scene: SceneParams,
    pub dataset: DatasetConfig,
    pub localize: LocalizeParams,
    pub matching: MatchConfig,
    pub ransac: RansacOptions,
    pub tracking: TrackingConfig,
    pub sweep: SweepConfig,
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn check(ok: bool, msg: &str) -> Result<(), CliError> {
    if ok {
        Ok(())
    } else {
        Err(invalid(msg))
    }
}

impl RunConfig {
    /// Parse a config, or the `config` member of a run manifest.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| invalid(e.to_string()))?;
        let value = match value.get("tool").and_then(|t| t.as_str()) {
            Some("psfforge") => value.get("config").cloned().ok_or_else(|| invalid("manifest has no config"))?,
            _ => value,
        };
        serde_json::from_value(value).map_err(|e| invalid(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Copy the master seed into every component that takes its own.
    pub fn propagate_seed(&mut self) {
        self.edof.options.seed = self.seed;
        self.ransac.seed = self.seed;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let tag = |e: psfforge_core::PsfError| invalid(e.to_string());
        self.optical.validate().map_err(tag)?;
        self.noise.validate().map_err(tag)?;
        self.eval.validate().map_err(tag)?;
        self.scene.validate().map_err(tag)?;
        let g = &self.grid;
        check(g.n >= 8 && g.fft_pad >= 1, "grid.n must be >= 8 and grid.fft_pad >= 1")?;
        check(g.window_px % 2 == 1, "grid.window_px must be odd")?;
        let model = self.model()?;
        check(g.window_px <= model.max_window(), "grid.window_px exceeds the grid")?;
        let e = &self.edof;
        check(e.range_um > 0.0 && e.range_um.is_finite(), "edof.range_um must be positive")?;
        check(e.ee_radius_um > 0.0 && e.ee_depth_step_um > 0.0, "edof encircled-energy radius and step must be positive")?;
        check(e.options.lr > 0.0 && e.options.checkpoint_every > 0, "edof.options needs lr > 0 and checkpoint_every > 0")?;
        if let Some(w) = e.window_px {
            check(w % 2 == 1 && w <= model.max_window(), "edof.window_px must be odd and fit the grid")?;
        }
        let p = &self.pair;
        check(p.options.lr > 0.0 && p.options.tikhonov >= 0.0, "pair.options needs lr > 0 and tikhonov >= 0")?;
        check(p.init_noise_rad >= 0.0, "pair.init_noise_rad must be >= 0")?;
        let d = &self.dataset;
        check((0.0..=1.0).contains(&d.train_fraction), "dataset.train_fraction outside [0, 1]")?;
        let l = &self.localize;
        check(l.bank.z_step_um > 0.0, "localize.bank.z_step_um must be positive")?;
        check(
            l.bank.z_range_um[0] >= 0.0 && l.bank.z_range_um[0] <= l.bank.z_range_um[1],
            "localize.bank.z_range_um must be ordered and >= 0",
        )?;
        check(l.bank.window_px % 2 == 1 && l.bank.window_px <= model.max_window(), "localize.bank.window_px must be odd and fit the grid")?;
        check(
            l.refine_opts.window_px % 2 == 1 && l.refine_opts.window_px <= model.max_window(),
            "localize.refine_opts.window_px must be odd and fit the grid",
        )?;
        check((0.0..=l.w_max).contains(&l.threshold), "localize.threshold outside [0, w_max]")?;
        check(l.voxel_xy_um > 0.0 && l.voxel_z_um > 0.0 && l.radius_um > 0.0, "localize voxel sizes and radius must be positive")?;
        check(self.matching.threshold_um > 0.0, "matching.threshold_um must be positive")?;
        let r = &self.ransac;
        check(r.min_sample >= 3 && r.inlier_um > 0.0 && r.iters > 0, "ransac needs min_sample >= 3, inlier_um > 0, iters > 0")?;
        let t = &self.tracking;
        check(t.link.eps_um > 0.0 && t.link.min_pts >= 1, "tracking.link needs eps_um > 0 and min_pts >= 1")?;
        check(t.max_lag >= 1, "tracking.max_lag must be >= 1")?;
        let s = &self.sweep;
        check(!s.densities_per_um2.is_empty() && s.densities_per_um2.iter().all(|d| *d >= 0.0), "sweep.densities_per_um2 must be nonempty and >= 0")?;
        check(s.n_images >= 1, "sweep.n_images must be >= 1")?;
        Ok(())
    }

    pub fn model(&self) -> Result<PsfModel, CliError> {
        PsfModel::new(self.optical, self.grid.n, self.grid.fft_pad).map_err(|e| invalid(e.to_string()))
    }
}
