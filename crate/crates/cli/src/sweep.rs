//! Pooled detection metrics and the density sweep.

use psfforge_core::eval::{match_hungarian, Point3};
use psfforge_core::localize::{localize_frame, LocalizeParams, TemplateBank};
use psfforge_core::noise::NoiseParams;
use psfforge_core::optics::{PhaseMask, PsfModel};
use psfforge_core::rng::derive_seed;
use psfforge_core::scene::{sample_scene, simulate_pair, SceneParams};
use psfforge_core::Result;
use rayon::prelude::*;
use serde::Serialize;

/// Match counts and squared errors summed over frames.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Score {
    pub n_tp: usize,
    pub n_fp: usize,
    pub n_fn: usize,
    pub sum_lateral2_um2: f64,
    pub sum_axial2_um2: f64,
}

impl Score {
    pub fn add_frame(&mut self, pred: &[Point3], gt: &[Point3], threshold_um: f64) -> Result<()> {
        let m = match_hungarian(pred, gt, threshold_um)?;
        self.n_tp += m.n_tp;
        self.n_fp += m.n_fp;
        self.n_fn += m.n_fn;
        for p in &m.pairs {
            self.sum_lateral2_um2 += p.lateral_um * p.lateral_um;
            self.sum_axial2_um2 += p.axial_um * p.axial_um;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Score) {
        self.n_tp += other.n_tp;
        self.n_fp += other.n_fp;
        self.n_fn += other.n_fn;
        self.sum_lateral2_um2 += other.sum_lateral2_um2;
        self.sum_axial2_um2 += other.sum_axial2_um2;
    }

    pub fn jaccard(&self) -> f64 {
        let d = self.n_tp + self.n_fp + self.n_fn;
        if d == 0 {
            1.0
        } else {
            self.n_tp as f64 / d as f64
        }
    }

    /// Lateral and axial RMSE in nm; `None` without matches.
    pub fn rmse_nm(&self) -> Option<(f64, f64)> {
        (self.n_tp > 0).then(|| {
            let n = self.n_tp as f64;
            (1e3 * (self.sum_lateral2_um2 / n).sqrt(), 1e3 * (self.sum_axial2_um2 / n).sqrt())
        })
    }
}

/// Everything a density point needs besides the density itself.
pub struct SweepSetup<'a> {
    pub model: &'a PsfModel,
    pub masks: (&'a PhaseMask, &'a PhaseMask),
    pub bank: &'a TemplateBank,
    pub scene: SceneParams,
    pub noise: NoiseParams,
    pub localize: LocalizeParams,
    /// Rendering window of the simulated frames.
    pub window_px: usize,
    pub threshold_um: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub density_per_um2: f64,
    pub n_images: usize,
    pub n_emitters: usize,
    pub n_tp: usize,
    pub n_fp: usize,
    pub n_fn: usize,
    pub jaccard: f64,
    pub rmse_lateral_nm: Option<f64>,
    pub rmse_axial_nm: Option<f64>,
}

/// Simulate `n_images` frames at `density`, localize them and pool the
/// metrics. Image `i` uses seed `derive_seed(seed, i)` as in datasets.
pub fn density_point(setup: &SweepSetup, density: f64, n_images: usize, seed: u64) -> Result<SweepRow> {
    let scene_params = SceneParams {
        density_per_um2: density,
        ..setup.scene
    };
    let shape = scene_params.canvas_shape(setup.model.pitch_um());
    let per_image: Vec<(usize, Score)> = (0..n_images)
        .into_par_iter()
        .map(|i| {
            let s = derive_seed(seed, i as u64);
            let scene = sample_scene(&scene_params, derive_seed(s, 0))?;
            let pair = simulate_pair(setup.model, setup.masks, &scene, shape, setup.window_px, &setup.noise, s)?;
            let locs = localize_frame(&pair, setup.bank, setup.model, setup.masks, &setup.noise, &setup.localize, i)?;
            let pred: Vec<Point3> = locs.iter().map(|l| l.position()).collect();
            let gt: Vec<Point3> = scene.emitters.iter().map(|e| [e.x_um, e.y_um, e.z_um]).collect();
            let mut score = Score::default();
            score.add_frame(&pred, &gt, setup.threshold_um)?;
            Ok((gt.len(), score))
        })
        .collect::<Result<_>>()?;
    let mut total = Score::default();
    let mut n_emitters = 0;
    for (n, s) in &per_image {
        n_emitters += n;
        total.merge(s);
    }
    let rmse = total.rmse_nm();
    Ok(SweepRow {
        density_per_um2: density,
        n_images,
        n_emitters,
        n_tp: total.n_tp,
        n_fp: total.n_fp,
        n_fn: total.n_fn,
        jaccard: total.jaccard(),
        rmse_lateral_nm: rmse.map(|r| r.0),
        rmse_axial_nm: rmse.map(|r| r.1),
    })
}
