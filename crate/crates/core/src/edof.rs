//! Extended-depth-of-field mask design by weighted phase retrieval.
//!
//! The target is a Gaussian fitted to the main lobe of the in-focus Airy
//! pattern. Each step descends the weighted misfit on the three depths
//! whose PSFs correlate worst with the target, each jittered continuously.

use nalgebra::{Matrix4, Vector4};
use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PsfError, Result};
use crate::optics::{Emitter, Image, OpticalConfig, PhaseMask, PsfModel};
use crate::optim::{AdamParams, OptimizerState};
use crate::rng::seeded;

/// Isotropic 2D Gaussian `A·exp(−((x−x0)² + (y−y0)²)/(2σ²))`, positions in
/// micrometers relative to the window center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit {
    pub amplitude: f64,
    pub x0_um: f64,
    pub y0_um: f64,
    pub sigma_um: f64,
    /// Largest absolute misfit on the fitted pixels relative to the peak.
    pub max_residual: f64,
}

impl GaussianFit {
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let r2 = (x - self.x0_um).powi(2) + (y - self.y0_um).powi(2);
        self.amplitude * (-r2 / (2.0 * self.sigma_um * self.sigma_um)).exp()
    }
}

fn pixel_xy(r: usize, c: usize, w: usize, pitch: f64) -> (f64, f64) {
    let h = (w / 2) as f64;
    ((c as f64 - h) * pitch, (r as f64 - h) * pitch)
}

/// Levenberg-Marquardt fit of an isotropic Gaussian to the pixels of `img`
/// within `radius_um` of the center.
pub fn fit_gaussian(img: &Image, radius_um: f64) -> Result<GaussianFit> {
    let w = img.pixels.nrows();
    let pitch = img.pitch_um;
    let pts: Vec<(f64, f64, f64)> = img
        .pixels
        .indexed_iter()
        .filter_map(|((r, c), v)| {
            let (x, y) = pixel_xy(r, c, w, pitch);
            (x.hypot(y) <= radius_um).then_some((x, y, *v))
        })
        .collect();
    if pts.len() < 5 {
        return Err(PsfError::FitFailed(format!("only {} pixels inside the main lobe", pts.len())));
    }
    let peak = pts.iter().map(|p| p.2).fold(f64::NEG_INFINITY, f64::max);
    let mass: f64 = pts.iter().map(|p| p.2).sum();
    let mx = pts.iter().map(|p| p.0 * p.2).sum::<f64>() / mass;
    let my = pts.iter().map(|p| p.1 * p.2).sum::<f64>() / mass;
    let var = pts.iter().map(|p| ((p.0 - mx).powi(2) + (p.1 - my).powi(2)) * p.2).sum::<f64>() / (2.0 * mass);
    let mut th = Vector4::new(peak, mx, my, var.sqrt().max(pitch));
    let cost = |th: &Vector4<f64>| -> f64 {
        pts.iter()
            .map(|&(x, y, v)| {
                let g = GaussianFit {
                    amplitude: th[0],
                    x0_um: th[1],
                    y0_um: th[2],
                    sigma_um: th[3],
                    max_residual: 0.0,
                };
                (g.eval(x, y) - v).powi(2)
            })
            .sum()
    };
    let mut lambda = 1e-3;
    let mut cur = cost(&th);
    for _ in 0..200 {
        let mut jtj = Matrix4::zeros();
        let mut jtr = Vector4::zeros();
        for &(x, y, v) in &pts {
            let (a, x0, y0, s) = (th[0], th[1], th[2], th[3]);
            let dx = x - x0;
            let dy = y - y0;
            let e = (-(dx * dx + dy * dy) / (2.0 * s * s)).exp();
            let g = a * e;
            let j = Vector4::new(e, g * dx / (s * s), g * dy / (s * s), g * (dx * dx + dy * dy) / (s * s * s));
            jtj += j * j.transpose();
            jtr += j * (g - v);
        }
        let mut improved = false;
        for _ in 0..20 {
            let mut damped = jtj;
            for k in 0..4 {
                damped[(k, k)] *= 1.0 + lambda;
            }
            let Some(step) = damped.try_inverse().map(|m| m * jtr) else {
                lambda *= 10.0;
                continue;
            };
            let cand = th - step;
            let c = cost(&cand);
            if cand[3] > 0.0 && c.is_finite() && c <= cur {
                let rel = (cur - c) / cur.max(f64::MIN_POSITIVE);
                th = cand;
                cur = c;
                lambda = (lambda * 0.3).max(1e-12);
                improved = rel > 1e-14;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    if !th.iter().all(|v| v.is_finite()) || th[3] <= 0.0 {
        return Err(PsfError::FitFailed(format!("Gaussian fit diverged at {th:?}")));
    }
    let mut fit = GaussianFit {
        amplitude: th[0],
        x0_um: th[1],
        y0_um: th[2],
        sigma_um: th[3],
        max_residual: 0.0,
    };
    fit.max_residual = pts.iter().map(|&(x, y, v)| (fit.eval(x, y) - v).abs()).fold(0.0, f64::max) / peak;
    Ok(fit)
}

/// Radius of the first Airy zero, `0.61·λ/NA_eff`.
pub fn airy_radius(config: &OpticalConfig) -> f64 {
    0.61 * config.wavelength_um / config.effective_na()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdofTarget {
    pub image: Image,
    pub weight: Array2<f64>,
    pub fit: GaussianFit,
    pub d_um: f64,
    pub alpha: f64,
    pub z_knots: Vec<f64>,
    /// Photon budget shared by the target and every rendered PSF.
    pub photons: f64,
}

impl EdofTarget {
    pub fn window(&self) -> usize {
        self.image.pixels.nrows()
    }
}

/// Weight `1` within `d_um` of the center, `alpha·r` (r in µm) beyond.
pub fn edof_weight(window: usize, pitch_um: f64, d_um: f64, alpha: f64) -> Array2<f64> {
    Array2::from_shape_fn((window, window), |(r, c)| {
        let (x, y) = pixel_xy(r, c, window, pitch_um);
        let rr = x.hypot(y);
        if rr <= d_um {
            1.0
        } else {
            alpha * rr
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetParams {
    pub d_um: f64,
    pub alpha: f64,
    pub knot_step_um: f64,
    pub photons: f64,
}

impl Default for TargetParams {
    fn default() -> Self {
        Self {
            d_um: 0.15,
            alpha: 25.0,
            knot_step_um: 0.2,
            photons: 1000.0,
        }
    }
}

/// Target for a design over depths `[0, delta_z_um]`. The main lobe is taken
/// from the zero-mask PSF with the focal plane at the coverslip.
pub fn build_edof_target(model: &PsfModel, delta_z_um: f64, params: &TargetParams, window_px: usize) -> Result<EdofTarget> {
    if !(delta_z_um > 0.0) || !(params.knot_step_um > 0.0) {
        return Err(PsfError::InvalidArgument("depth range and knot step must be positive".into()));
    }
    model.check_window(window_px)?;
    let in_focus_cfg = OpticalConfig {
        focus_um: 0.0,
        ..*model.config()
    };
    let focus_model = PsfModel::from_grid(in_focus_cfg, model.grid().clone());
    let airy = focus_model.psf(
        &PhaseMask::zeros(model.grid().n),
        &Emitter::on_axis(0.0, params.photons),
        window_px,
    )?;
    let fit = fit_gaussian(&airy, airy_radius(model.config()))?;
    let pitch = model.pitch_um();
    let image = Image {
        pixels: Array2::from_shape_fn((window_px, window_px), |(r, c)| {
            let (x, y) = pixel_xy(r, c, window_px, pitch);
            fit.eval(x, y)
        }),
        pitch_um: pitch,
    };
    let n = (delta_z_um / params.knot_step_um - 1e-9).ceil() as usize;
    let z_knots = (0..=n).map(|k| (k as f64 * params.knot_step_um).min(delta_z_um)).collect();
    Ok(EdofTarget {
        image,
        weight: edof_weight(window_px, pitch, params.d_um, params.alpha),
        fit,
        d_um: params.d_um,
        alpha: params.alpha,
        z_knots,
        photons: params.photons,
    })
}

fn slice_loss(model: &PsfModel, mask: &Array2<f64>, target: &EdofTarget, z: f64) -> (f64, crate::optics::Forward) {
    let fwd = model.forward_values(mask, 0.0, 0.0, z.max(0.0), target.photons);
    let img = model.crop(&fwd.intensity, target.window());
    let mut loss = 0.0;
    for ((p, a), s) in img.pixels.iter().zip(target.image.pixels.iter()).zip(target.weight.iter()) {
        loss += ((p - a) * s).powi(2);
    }
    (loss, fwd)
}

/// `Σ_z ‖(PSF(z) − A)·S‖²`.
pub fn edof_loss(model: &PsfModel, mask: &PhaseMask, target: &EdofTarget, z_subset: &[f64]) -> Result<f64> {
    model.check_mask(mask)?;
    model.check_window(target.window())?;
    let parts: Vec<f64> = z_subset
        .par_iter()
        .map(|&z| slice_loss(model, &mask.values, target, z).0)
        .collect();
    Ok(parts.iter().sum())
}

fn loss_and_gradient(model: &PsfModel, mask: &Array2<f64>, target: &EdofTarget, z_subset: &[f64]) -> (f64, Array2<f64>) {
    let n = mask.nrows();
    let parts: Vec<(f64, Array2<f64>)> = z_subset
        .par_iter()
        .map(|&z| {
            let (loss, fwd) = slice_loss(model, mask, target, z);
            let img = model.crop(&fwd.intensity, target.window());
            let mut wg = &img.pixels - &target.image.pixels;
            wg.zip_mut_with(&target.weight, |g, s| *g *= 2.0 * s * s);
            let mut grad = Array2::zeros((n, n));
            model.backprop(&fwd, &wg, &mut grad);
            (loss, grad)
        })
        .collect();
    let mut grad = Array2::zeros((n, n));
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        grad += &g;
    }
    (loss, grad)
}

pub fn edof_loss_gradient(model: &PsfModel, mask: &PhaseMask, target: &EdofTarget, z_subset: &[f64]) -> Result<Array2<f64>> {
    model.check_mask(mask)?;
    model.check_window(target.window())?;
    Ok(loss_and_gradient(model, &mask.values, target, z_subset).1)
}

/// Indices of the `k` smallest correlations, ties broken by position.
pub fn lowest_correlations(corr: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..corr.len()).collect();
    idx.sort_by(|&a, &b| corr[a].total_cmp(&corr[b]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// `⟨A, PSF(z)⟩` for every knot.
pub fn knot_correlations(model: &PsfModel, mask: &Array2<f64>, target: &EdofTarget) -> Vec<f64> {
    target
        .z_knots
        .par_iter()
        .map(|&z| {
            let fwd = model.forward_values(mask, 0.0, 0.0, z.max(0.0), target.photons);
            let img = model.crop(&fwd.intensity, target.window());
            img.pixels.iter().zip(target.image.pixels.iter()).map(|(p, a)| p * a).sum()
        })
        .collect()
}

fn jitter<R: Rng>(rng: &mut R, knots: &[f64], base: &[usize], half_width: f64) -> Vec<f64> {
    let lo = knots.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = knots.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    base.iter()
        .map(|&i| (knots[i] + rng.random_range(-half_width..=half_width)).clamp(lo, hi))
        .collect()
}

/// The `count` worst-correlated knots, each shifted by `U[−0.1, 0.1]` µm and
/// clipped to the knot range.
pub fn select_slices(model: &PsfModel, mask: &PhaseMask, target: &EdofTarget, count: usize, seed: u64) -> Result<Vec<f64>> {
    if target.z_knots.len() < count {
        return Err(PsfError::InvalidArgument(format!("need at least {count} knots")));
    }
    model.check_mask(mask)?;
    let corr = knot_correlations(model, &mask.values, target);
    let base = lowest_correlations(&corr, count);
    Ok(jitter(&mut seeded(seed), &target.z_knots, &base, 0.1))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EdofOptions {
    pub iterations: usize,
    pub lr: f64,
    pub seed: u64,
    pub slices_per_step: usize,
    pub checkpoint_every: usize,
    /// Stop when the checkpoint loss improved by less than this fraction
    /// over `stagnation_window` iterations.
    pub stagnation_tol: f64,
    pub stagnation_window: usize,
    pub target: TargetParams,
}

impl Default for EdofOptions {
    fn default() -> Self {
        Self {
            iterations: 400,
            lr: 5e-3,
            seed: 0,
            slices_per_step: 3,
            checkpoint_every: 20,
            stagnation_tol: 1e-3,
            stagnation_window: 50,
            target: TargetParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub iteration: usize,
    /// Loss over all knots.
    pub loss: f64,
    pub best_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdofDesign {
    pub mask: PhaseMask,
    pub target: EdofTarget,
    pub checkpoints: Vec<Checkpoint>,
    pub iterations_run: usize,
    pub stagnated: bool,
}

impl EdofDesign {
    pub fn initial_loss(&self) -> f64 {
        self.checkpoints[0].loss
    }

    pub fn best_loss(&self) -> f64 {
        self.checkpoints.last().map_or(f64::NAN, |c| c.best_loss)
    }
}

/// Design from a zero mask; returns the best checkpoint iterate.
pub fn design_edof(model: &PsfModel, delta_z_um: f64, window_px: usize, opts: &EdofOptions) -> Result<EdofDesign> {
    let target = build_edof_target(model, delta_z_um, &opts.target, window_px)?;
    if target.z_knots.len() < opts.slices_per_step || opts.checkpoint_every == 0 {
        return Err(PsfError::InvalidArgument("too few knots or zero checkpoint interval".into()));
    }
    let n = model.grid().n;
    let mut mask = Array2::zeros((n, n));
    let mut state = OptimizerState::new(
        AdamParams {
            step_size: opts.lr,
            ..AdamParams::default()
        },
        (n, n),
    );
    let mut rng = seeded(opts.seed);
    let full = |m: &Array2<f64>| -> f64 {
        // collect before summing so the result does not depend on the thread count
        let parts: Vec<f64> = target.z_knots.par_iter().map(|&z| slice_loss(model, m, &target, z).0).collect();
        parts.iter().sum()
    };
    let first = full(&mask);
    if !first.is_finite() {
        return Err(PsfError::NonFinite { iteration: 0 });
    }
    let mut checkpoints = vec![Checkpoint {
        iteration: 0,
        loss: first,
        best_loss: first,
    }];
    let mut best = mask.clone();
    let mut stagnated = false;
    let mut it = 0;
    while it < opts.iterations {
        let corr = knot_correlations(model, &mask, &target);
        let base = lowest_correlations(&corr, opts.slices_per_step);
        let zs = jitter(&mut rng, &target.z_knots, &base, 0.1);
        let (loss, grad) = loss_and_gradient(model, &mask, &target, &zs);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(PsfError::NonFinite { iteration: it });
        }
        state.step(&mut mask, &grad);
        it += 1;
        if it % opts.checkpoint_every == 0 || it == opts.iterations {
            let l = full(&mask);
            if !l.is_finite() {
                return Err(PsfError::NonFinite { iteration: it });
            }
            let prev_best = checkpoints.last().unwrap().best_loss;
            if l < prev_best {
                best = mask.clone();
            }
            checkpoints.push(Checkpoint {
                iteration: it,
                loss: l,
                best_loss: l.min(prev_best),
            });
            log::debug!("edof iteration {it}: full loss {l:.6e}");
            let cur = checkpoints.last().unwrap().best_loss;
            if let Some(old) = checkpoints.iter().rev().find(|c| c.iteration + opts.stagnation_window <= it) {
                if old.best_loss - cur < opts.stagnation_tol * old.best_loss {
                    stagnated = true;
                    break;
                }
            }
        }
    }
    Ok(EdofDesign {
        mask: PhaseMask::new(best)?,
        target,
        checkpoints,
        iterations_run: it,
        stagnated,
    })
}

/// Encircled energy within `radius_um` relative to the zero mask, per depth.
pub fn encircled_energy_gain(
    model: &PsfModel,
    mask: &PhaseMask,
    depths: &[f64],
    radius_um: f64,
    window_px: usize,
) -> Result<Vec<(f64, f64, f64)>> {
    let zero = PhaseMask::zeros(model.grid().n);
    depths
        .par_iter()
        .map(|&z| {
            let e = Emitter::on_axis(z, 1.0);
            let a = crate::optics::encircled_energy(&model.psf(mask, &e, window_px)?, radius_um, 1.0);
            let b = crate::optics::encircled_energy(&model.psf(&zero, &e, window_px)?, radius_um, 1.0);
            Ok((z, a, b))
        })
        .collect()
}
