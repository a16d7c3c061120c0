//! Matched-filter baseline decoder.
//!
//! Both channels are correlated (zero-mean normalized cross-correlation)
//! against a bank of on-axis templates. The channel average fills a voxel
//! grid of confidences in `[0, w_max]`, which is thresholded, reduced to
//! local maxima and centroided. Candidates can then be refined by
//! Levenberg-Marquardt ascent of the Poisson likelihood of both channels.

use nalgebra::{Matrix6, Vector6};
use ndarray::{Array2, Array3};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crlb::{psf_derivatives, DEFAULT_STEPS};
use crate::error::{PsfError, Result};
use crate::eval::VoxelGrid;
use crate::fft::Fft2;
use crate::noise::NoiseParams;
use crate::optics::{Emitter, Image, PhaseMask, PsfModel};
use crate::scene::ImagePair;

/// Unit-norm on-axis templates of both channels at each depth knot.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateBank {
    pub templates: [Vec<Image>; 2],
    pub z_knots: Vec<f64>,
    pub window_px: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BankSpec {
    pub z_step_um: f64,
    pub z_range_um: [f64; 2],
    pub window_px: usize,
}

impl Default for BankSpec {
    fn default() -> Self {
        Self {
            z_step_um: 0.1,
            z_range_um: [0.0, 4.0],
            window_px: 21,
        }
    }
}

pub fn build_template_bank(
    model: &PsfModel,
    mask1: &PhaseMask,
    mask2: &PhaseMask,
    z_step_um: f64,
    range_um: [f64; 2],
    window_px: usize,
) -> Result<TemplateBank> {
    if !(z_step_um > 0.0) || !(range_um[1] >= range_um[0]) || range_um[0] < 0.0 {
        return Err(PsfError::InvalidArgument(format!(
            "bad template depths: step {z_step_um}, range {range_um:?}"
        )));
    }
    model.check_window(window_px)?;
    let n = ((range_um[1] - range_um[0]) / z_step_um + 1e-9).floor() as usize;
    let z_knots: Vec<f64> = (0..=n).map(|k| range_um[0] + k as f64 * z_step_um).collect();
    let render = |mask: &PhaseMask| -> Result<Vec<Image>> {
        z_knots
            .par_iter()
            .map(|&z| {
                let mut img = model.psf(mask, &Emitter::on_axis(z, 1.0), window_px)?;
                let norm = img.pixels.iter().map(|v| v * v).sum::<f64>().sqrt();
                if !(norm > 0.0) {
                    return Err(PsfError::Domain(format!("empty template at z = {z}")));
                }
                img.pixels /= norm;
                Ok(img)
            })
            .collect()
    };
    Ok(TemplateBank {
        templates: [render(mask1)?, render(mask2)?],
        z_knots,
        window_px,
    })
}

/// Voxel confidences of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryGrid {
    pub geometry: VoxelGrid,
    /// Indexed `(z, y, x)`, each in `[0, w_max]`.
    pub values: Array3<f32>,
    pub w_max: f64,
}

impl RecoveryGrid {
    pub fn new(geometry: VoxelGrid, w_max: f64) -> Self {
        let [nz, ny, nx] = geometry.shape;
        Self {
            geometry,
            values: Array3::zeros((nz, ny, nx)),
            w_max,
        }
    }

    /// Grid covering a `rows × cols` canvas laterally (origin at its corner)
    /// with voxel centers at `z_range[0] + k·voxel_z` axially.
    pub fn for_canvas(
        shape: (usize, usize),
        pitch_um: f64,
        z_range_um: [f64; 2],
        voxel_xy_um: f64,
        voxel_z_um: f64,
        w_max: f64,
    ) -> Result<Self> {
        if !(voxel_xy_um > 0.0 && voxel_z_um > 0.0 && w_max > 0.0) || z_range_um[1] < z_range_um[0] {
            return Err(PsfError::InvalidArgument("voxel sizes and w_max must be positive".into()));
        }
        let nx = (shape.1 as f64 * pitch_um / voxel_xy_um).round() as usize;
        let ny = (shape.0 as f64 * pitch_um / voxel_xy_um).round() as usize;
        let nz = ((z_range_um[1] - z_range_um[0]) / voxel_z_um + 1e-9).floor() as usize + 1;
        Ok(Self::new(
            VoxelGrid {
                shape: [nz, ny, nx],
                voxel_xy_um,
                voxel_z_um,
                origin_um: [0.0, 0.0, z_range_um[0] - 0.5 * voxel_z_um],
            },
            w_max,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub frame: usize,
    pub x_um: f64,
    pub y_um: f64,
    pub z_um: f64,
    pub photons: Option<f64>,
    pub confidence: f64,
}

impl Localization {
    pub fn position(&self) -> [f64; 3] {
        [self.x_um, self.y_um, self.z_um]
    }
}

fn mirror(i: i64, n: usize) -> usize {
    let n = n as i64;
    let m = i.rem_euclid(2 * n);
    (if m < n { m } else { 2 * n - 1 - m }) as usize
}

/// Zero-mean normalized cross-correlation of `img` with each template, one
/// map per template with the window centered on each pixel. The image is
/// mirrored across its border.
fn ncc_maps(img: &Array2<f64>, templates: &[Image]) -> Vec<Array2<f64>> {
    let (rows, cols) = img.dim();
    let w = templates[0].pixels.nrows();
    let h = (w / 2) as i64;
    let s = rows.max(cols) + w - 1;
    let fft = Fft2::new(s);
    let mut spec = vec![Complex64::default(); s * s];
    // integral images of the padded frame
    let (pr, pc) = (rows + w - 1, cols + w - 1);
    let mut s1 = Array2::<f64>::zeros((pr + 1, pc + 1));
    let mut s2 = Array2::<f64>::zeros((pr + 1, pc + 1));
    for r in 0..pr {
        for c in 0..pc {
            let v = img[[mirror(r as i64 - h, rows), mirror(c as i64 - h, cols)]];
            spec[r * s + c].re = v;
            s1[[r + 1, c + 1]] = v + s1[[r, c + 1]] + s1[[r + 1, c]] - s1[[r, c]];
            s2[[r + 1, c + 1]] = v * v + s2[[r, c + 1]] + s2[[r + 1, c]] - s2[[r, c]];
        }
    }
    fft.forward(&mut spec);
    let npx = (w * w) as f64;
    let denom = Array2::from_shape_fn((rows, cols), |(r, c)| {
        let b = |a: &Array2<f64>| a[[r + w, c + w]] - a[[r, c + w]] - a[[r + w, c]] + a[[r, c]];
        let (a1, a2) = (b(&s1), b(&s2));
        (a2 - a1 * a1 / npx).max(0.0).sqrt()
    });
    let floor = 1e-12 * denom.iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    templates
        .par_iter()
        .map(|t| {
            let mean = t.pixels.mean().unwrap_or(0.0);
            let centered = t.pixels.mapv(|v| v - mean);
            let norm = centered.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            let mut buf = vec![Complex64::default(); s * s];
            for ((r, c), v) in centered.indexed_iter() {
                buf[r * s + c].re = v / norm;
            }
            fft.forward(&mut buf);
            for (b, x) in buf.iter_mut().zip(spec.iter()) {
                *b = x * b.conj();
            }
            fft.inverse(&mut buf);
            let scale = 1.0 / (s * s) as f64;
            Array2::from_shape_fn((rows, cols), |(r, c)| {
                let d = denom[[r, c]];
                if d > floor {
                    (buf[r * s + c].re * scale / d).clamp(-1.0, 1.0)
                } else {
                    0.0
                }
            })
        })
        .collect()
}

/// Linear interpolation weights of coordinate `u` on `0..n` samples.
fn lerp_index(u: f64, n: usize) -> (usize, usize, f64) {
    if n == 1 || u <= 0.0 {
        return (0, 0, 0.0);
    }
    let last = (n - 1) as f64;
    if u >= last {
        return (n - 1, n - 1, 0.0);
    }
    let i = u.floor() as usize;
    (i, i + 1, u - i as f64)
}

/// Fill `grid` with `w_max·max(0, ncc)`, the correlation averaged over both
/// channels and interpolated linearly from pixel centers and depth knots.
pub fn detect(pair: &ImagePair, bank: &TemplateBank, grid: &mut RecoveryGrid) -> Result<()> {
    if pair.transform.is_some() {
        return Err(PsfError::InvalidArgument("channel 2 must be registered before detection".into()));
    }
    if pair.ch1.shape() != pair.ch2.shape() {
        return Err(PsfError::InvalidArgument("channel shapes differ".into()));
    }
    let (rows, cols) = pair.ch1.shape();
    if bank.window_px > 2 * rows.min(cols) {
        return Err(PsfError::InvalidArgument("template window larger than twice the frame".into()));
    }
    let pitch = pair.ch1.pitch_um;
    let m1 = ncc_maps(&pair.ch1.pixels, &bank.templates[0]);
    let m2 = ncc_maps(&pair.ch2.pixels, &bank.templates[1]);
    let combined: Vec<Array2<f64>> = m1.iter().zip(&m2).map(|(a, b)| (a + b) * 0.5).collect();
    let g = grid.geometry;
    let [nz, ny, nx] = g.shape;
    let nk = bank.z_knots.len();
    let dz = if nk > 1 { bank.z_knots[1] - bank.z_knots[0] } else { 1.0 };
    let cols_w: Vec<_> = (0..nx).map(|j| lerp_index(g.center(0, 0, j)[0] / pitch - 0.5, cols)).collect();
    let rows_w: Vec<_> = (0..ny).map(|i| lerp_index(g.center(0, i, 0)[1] / pitch - 0.5, rows)).collect();
    let w_max = grid.w_max;
    let mut flat = vec![0f32; nz * ny * nx];
    flat.par_chunks_mut(ny * nx).enumerate().for_each(|(k, slab)| {
        let (k0, k1, fz) = lerp_index((g.center(k, 0, 0)[2] - bank.z_knots[0]) / dz, nk);
        for (i, &(r0, r1, fr)) in rows_w.iter().enumerate() {
            for (j, &(c0, c1, fc)) in cols_w.iter().enumerate() {
                let at = |m: &Array2<f64>| {
                    let top = m[[r0, c0]] * (1.0 - fc) + m[[r0, c1]] * fc;
                    let bot = m[[r1, c0]] * (1.0 - fc) + m[[r1, c1]] * fc;
                    top * (1.0 - fr) + bot * fr
                };
                let v = at(&combined[k0]) * (1.0 - fz) + at(&combined[k1]) * fz;
                slab[i * nx + j] = (w_max * v.max(0.0)).min(w_max) as f32;
            }
        }
    });
    grid.values = Array3::from_shape_vec((nz, ny, nx), flat).expect("slab layout");
    Ok(())
}

/// Threshold, keep voxels that beat every other voxel within `radius_um`
/// (ties go to the smaller `(z, y, x)` index) and place each at the
/// confidence-weighted centroid of its above-threshold neighborhood.
pub fn grid_postprocess(grid: &RecoveryGrid, threshold: f64, radius_um: f64, frame: usize) -> Result<Vec<Localization>> {
    if !(0.0..=grid.w_max).contains(&threshold) || !(radius_um >= 0.0) {
        return Err(PsfError::InvalidArgument(format!("threshold {threshold} or radius {radius_um} out of range")));
    }
    let g = grid.geometry;
    let [nz, ny, nx] = g.shape;
    let rxy = (radius_um / g.voxel_xy_um + 1e-9).floor() as i64;
    let rz = (radius_um / g.voxel_z_um + 1e-9).floor() as i64;
    let mut offsets = Vec::new();
    for dk in -rz..=rz {
        for di in -rxy..=rxy {
            for dj in -rxy..=rxy {
                let d2 = ((di * di + dj * dj) as f64) * g.voxel_xy_um.powi(2) + ((dk * dk) as f64) * g.voxel_z_um.powi(2);
                if d2 <= radius_um * radius_um * (1.0 + 1e-12) && (dk, di, dj) != (0, 0, 0) {
                    offsets.push((dk, di, dj));
                }
            }
        }
    }
    let v = &grid.values;
    let thr = threshold as f32;
    let neighbors = |k: usize, i: usize, j: usize| {
        offsets.iter().filter_map(move |&(dk, di, dj)| {
            let (kk, ii, jj) = (k as i64 + dk, i as i64 + di, j as i64 + dj);
            (kk >= 0 && ii >= 0 && jj >= 0 && (kk as usize) < nz && (ii as usize) < ny && (jj as usize) < nx)
                .then_some((kk as usize, ii as usize, jj as usize))
        })
    };
    let found: Vec<Vec<Localization>> = (0..nz)
        .into_par_iter()
        .map(|k| {
            let mut out = Vec::new();
            for i in 0..ny {
                for j in 0..nx {
                    let here = v[[k, i, j]];
                    if here < thr {
                        continue;
                    }
                    let beaten = neighbors(k, i, j).any(|n| {
                        let o = v[[n.0, n.1, n.2]];
                        o > here || (o == here && n < (k, i, j))
                    });
                    if beaten {
                        continue;
                    }
                    let mut acc = [0.0; 3];
                    let mut wsum = 0.0;
                    for n in std::iter::once((k, i, j)).chain(neighbors(k, i, j)) {
                        let o = v[[n.0, n.1, n.2]];
                        if o >= thr {
                            let c = g.center(n.0, n.1, n.2);
                            for a in 0..3 {
                                acc[a] += o as f64 * c[a];
                            }
                            wsum += o as f64;
                        }
                    }
                    out.push(Localization {
                        frame,
                        x_um: acc[0] / wsum,
                        y_um: acc[1] / wsum,
                        z_um: acc[2] / wsum,
                        photons: None,
                        confidence: here as f64,
                    });
                }
            }
            out
        })
        .collect();
    Ok(found.into_iter().flatten().collect())
}

/// Options of the likelihood refinement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineOptions {
    pub max_iter: usize,
    pub window_px: usize,
    /// Fraction of the signal in channel 1.
    pub split: f64,
    /// Allowed depth interval of the fit.
    pub z_range_um: [f64; 2],
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            max_iter: 30,
            window_px: 31,
            split: 0.5,
            z_range_um: [0.0, 4.0],
        }
    }
}

/// Refined localization with its likelihood before and after.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Refinement {
    pub loc: Localization,
    pub initial_log_likelihood: f64,
    pub final_log_likelihood: f64,
    /// Fitted background per channel, photons per pixel.
    pub background: [f64; 2],
    pub iterations: usize,
    /// The fit could not be evaluated; the candidate is returned as is.
    pub diverged: bool,
}

struct Patch {
    counts: [Array2<f64>; 2],
    inside: Array2<bool>,
    /// Center of the patch's middle pixel in frame coordinates.
    center_um: (f64, f64),
}

fn extract_patch(pair: &ImagePair, x_um: f64, y_um: f64, w: usize, baseline: f64) -> Patch {
    let pitch = pair.ch1.pitch_um;
    let (rows, cols) = pair.ch1.shape();
    let col = (x_um / pitch - 0.5).round() as i64;
    let row = (y_um / pitch - 0.5).round() as i64;
    let h = (w / 2) as i64;
    let mut counts = [Array2::zeros((w, w)), Array2::zeros((w, w))];
    let mut inside = Array2::from_elem((w, w), false);
    for r in 0..w {
        for c in 0..w {
            let (rr, cc) = (row + r as i64 - h, col + c as i64 - h);
            if rr >= 0 && cc >= 0 && (rr as usize) < rows && (cc as usize) < cols {
                inside[[r, c]] = true;
                counts[0][[r, c]] = pair.ch1.pixels[[rr as usize, cc as usize]] - baseline;
                counts[1][[r, c]] = pair.ch2.pixels[[rr as usize, cc as usize]] - baseline;
            }
        }
    }
    Patch {
        counts,
        inside,
        center_um: ((col as f64 + 0.5) * pitch, (row as f64 + 0.5) * pitch),
    }
}

fn border_median(a: &Array2<f64>, inside: &Array2<bool>) -> f64 {
    let w = a.nrows();
    let mut v: Vec<f64> = a
        .indexed_iter()
        .filter(|((r, c), _)| (*r == 0 || *c == 0 || *r == w - 1 || *c == w - 1) && inside[[*r, *c]])
        .map(|(_, x)| *x)
        .collect();
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

struct Fit<'a> {
    model: &'a PsfModel,
    masks: [&'a PhaseMask; 2],
    patch: Patch,
    share: [f64; 2],
    w: usize,
}

const MIN_LEVEL: f64 = 1e-3;

impl Fit<'_> {
    fn psfs(&self, t: &Vector6<f64>) -> Result<[Image; 2]> {
        let e = Emitter::new(t[0], t[1], t[2], 1.0);
        Ok([self.model.psf(self.masks[0], &e, self.w)?, self.model.psf(self.masks[1], &e, self.w)?])
    }

    fn log_likelihood(&self, t: &Vector6<f64>) -> Result<f64> {
        let p = self.psfs(t)?;
        let mut ll = 0.0;
        for ch in 0..2 {
            for ((idx, &n), &c) in p[ch].pixels.indexed_iter().zip(self.patch.counts[ch].iter()) {
                if self.patch.inside[idx] {
                    let mu = t[3] * self.share[ch] * n + t[4 + ch];
                    ll += c * mu.max(MIN_LEVEL).ln() - mu;
                }
            }
        }
        Ok(ll)
    }

    /// Log-likelihood, its gradient and the expected information.
    fn linearize(&self, t: &Vector6<f64>) -> Result<(f64, Vector6<f64>, Matrix6<f64>)> {
        let e = Emitter::new(t[0], t[1], t[2], 1.0);
        let mut ll = 0.0;
        let mut g = Vector6::zeros();
        let mut h = Matrix6::zeros();
        for ch in 0..2 {
            let d = psf_derivatives(self.model, self.masks[ch], &e, self.w, DEFAULT_STEPS)?;
            let s = self.share[ch];
            for (idx, &n) in d.value.pixels.indexed_iter() {
                if !self.patch.inside[idx] {
                    continue;
                }
                let mu = (t[3] * s * n + t[4 + ch]).max(MIN_LEVEL);
                let c = self.patch.counts[ch][idx];
                ll += c * mu.ln() - mu;
                let mut j = Vector6::zeros();
                for a in 0..3 {
                    j[a] = t[3] * s * d.d[a].pixels[idx];
                }
                j[3] = s * n;
                j[4 + ch] = 1.0;
                g += j * (c / mu - 1.0);
                h += j * j.transpose() / mu;
            }
        }
        Ok((ll, g, h))
    }

    fn clamp(&self, t: &mut Vector6<f64>, z_range: [f64; 2]) {
        // stay on the patch; the lateral phase is periodic on the pupil grid
        let reach = (self.w / 2) as f64 * self.model.pitch_um();
        t[0] = t[0].clamp(-reach, reach);
        t[1] = t[1].clamp(-reach, reach);
        t[2] = t[2].clamp(z_range[0], z_range[1]);
        t[3] = t[3].max(1.0);
        t[4] = t[4].max(MIN_LEVEL);
        t[5] = t[5].max(MIN_LEVEL);
    }
}

/// Least-squares amplitude and border-median backgrounds for a candidate.
fn initial_guess(fit: &Fit, x: f64, y: f64, z: f64) -> Result<Vector6<f64>> {
    let b = [0, 1].map(|ch| border_median(&fit.patch.counts[ch], &fit.patch.inside).max(MIN_LEVEL));
    let mut t = Vector6::new(x, y, z, 1.0, b[0], b[1]);
    let p = fit.psfs(&t)?;
    let (mut num, mut den) = (0.0, 0.0);
    for ch in 0..2 {
        for ((idx, &n), &c) in p[ch].pixels.indexed_iter().zip(fit.patch.counts[ch].iter()) {
            if fit.patch.inside[idx] {
                let m = fit.share[ch] * n;
                num += m * (c - b[ch]);
                den += m * m;
            }
        }
    }
    t[3] = if den > 0.0 { (num / den).max(1.0) } else { 1.0 };
    Ok(t)
}

fn refine_one(
    pair: &ImagePair,
    cand: &Localization,
    model: &PsfModel,
    masks: [&PhaseMask; 2],
    noise: &NoiseParams,
    opts: &RefineOptions,
) -> Result<Refinement> {
    let patch = extract_patch(pair, cand.x_um, cand.y_um, opts.window_px, noise.baseline);
    let (cx, cy) = patch.center_um;
    let fit = Fit {
        model,
        masks,
        patch,
        share: [opts.split, 1.0 - opts.split],
        w: opts.window_px,
    };
    let mut t = initial_guess(&fit, cand.x_um - cx, cand.y_um - cy, cand.z_um)?;
    fit.clamp(&mut t, opts.z_range_um);
    let to_loc = |t: &Vector6<f64>| Localization {
        x_um: t[0] + cx,
        y_um: t[1] + cy,
        z_um: t[2],
        photons: Some(t[3]),
        ..*cand
    };
    if opts.max_iter == 0 {
        let ll = fit.log_likelihood(&t)?;
        return Ok(Refinement {
            loc: Localization { photons: Some(t[3]), ..*cand },
            initial_log_likelihood: ll,
            final_log_likelihood: ll,
            background: [t[4], t[5]],
            iterations: 0,
            diverged: false,
        });
    }
    // the candidate position with fitted amplitude is the reference point
    let (mut ll, mut g, mut h) = fit.linearize(&t)?;
    let initial = ll;
    let mut lambda = 1e-3;
    let mut it = 0;
    while it < opts.max_iter {
        it += 1;
        let mut a = h;
        for k in 0..6 {
            a[(k, k)] *= 1.0 + lambda;
            a[(k, k)] += 1e-12;
        }
        let Some(step) = a.cholesky().map(|c| c.solve(&g)) else {
            lambda *= 10.0;
            continue;
        };
        let mut trial = t + step;
        fit.clamp(&mut trial, opts.z_range_um);
        let ll_trial = fit.log_likelihood(&trial)?;
        if ll_trial.is_finite() && ll_trial > ll {
            let moved = (trial - t).fixed_rows::<3>(0).norm();
            t = trial;
            (ll, g, h) = fit.linearize(&t)?;
            lambda = (lambda * 0.1).max(1e-9);
            if moved < 1e-4 {
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e9 {
                break;
            }
        }
    }
    Ok(Refinement {
        loc: to_loc(&t),
        initial_log_likelihood: initial,
        final_log_likelihood: ll,
        background: [t[4], t[5]],
        iterations: it,
        diverged: false,
    })
}

/// Maximum-likelihood refinement of each candidate over
/// `(x, y, z, photons, b1, b2)` on a window around it; steps that lower
/// the likelihood are rejected.
pub fn refine_mle(
    pair: &ImagePair,
    candidates: &[Localization],
    model: &PsfModel,
    masks: (&PhaseMask, &PhaseMask),
    noise: &NoiseParams,
    opts: &RefineOptions,
) -> Result<Vec<Refinement>> {
    if !(0.0..=1.0).contains(&opts.split) || opts.window_px % 2 == 0 {
        return Err(PsfError::InvalidArgument("split outside [0, 1] or even fit window".into()));
    }
    model.check_window(opts.window_px)?;
    candidates
        .par_iter()
        .map(|c| match refine_one(pair, c, model, [masks.0, masks.1], noise, opts) {
            Ok(r) => Ok(r),
            Err(PsfError::Domain(msg)) => {
                log::warn!("refinement of candidate at ({}, {}, {}) failed: {msg}", c.x_um, c.y_um, c.z_um);
                Ok(Refinement {
                    loc: *c,
                    initial_log_likelihood: f64::NAN,
                    final_log_likelihood: f64::NAN,
                    background: [f64::NAN; 2],
                    iterations: 0,
                    diverged: true,
                })
            }
            Err(e) => Err(e),
        })
        .collect()
}

/// Signal of one refined emitter on its fit window, per channel.
fn rendered_signal(
    model: &PsfModel,
    masks: [&PhaseMask; 2],
    r: &Refinement,
    share: [f64; 2],
    w: usize,
) -> Result<(i64, i64, [Array2<f64>; 2])> {
    let pitch = model.pitch_um();
    let col = (r.loc.x_um / pitch - 0.5).round() as i64;
    let row = (r.loc.y_um / pitch - 0.5).round() as i64;
    let dx = r.loc.x_um - (col as f64 + 0.5) * pitch;
    let dy = r.loc.y_um - (row as f64 + 0.5) * pitch;
    let n = r.loc.photons.unwrap_or(0.0);
    let e = |s: f64| Emitter::new(dx, dy, r.loc.z_um, n * s);
    Ok((
        row,
        col,
        [
            model.psf(masks[0], &e(share[0]), w)?.pixels,
            model.psf(masks[1], &e(share[1]), w)?.pixels,
        ],
    ))
}

/// Greedy explain-away selection. Refinements are visited by decreasing
/// likelihood gain over their own background; each is kept only if adding
/// its signal to the emitters already kept still raises the Poisson
/// likelihood of its window by more than `min_gain`. Removes duplicates
/// and correlation side lobes of bright emitters.
pub fn prune_explained(
    pair: &ImagePair,
    refinements: &[Refinement],
    model: &PsfModel,
    masks: (&PhaseMask, &PhaseMask),
    noise: &NoiseParams,
    opts: &RefineOptions,
    min_gain: f64,
) -> Result<Vec<Localization>> {
    let masks = [masks.0, masks.1];
    let share = [opts.split, 1.0 - opts.split];
    let w = opts.window_px;
    let h = (w / 2) as i64;
    let (rows, cols) = pair.ch1.shape();
    let frames = [&pair.ch1.pixels, &pair.ch2.pixels];
    let usable: Vec<&Refinement> = refinements
        .iter()
        .filter(|r| !r.diverged && r.loc.photons.is_some_and(|n| n > 0.0))
        .collect();
    let rendered: Vec<_> = usable
        .par_iter()
        .map(|r| rendered_signal(model, masks, r, share, w))
        .collect::<Result<_>>()?;
    let mut accepted = [Array2::<f64>::zeros((rows, cols)), Array2::<f64>::zeros((rows, cols))];
    let gain = |k: usize, accepted: &[Array2<f64>; 2]| -> f64 {
        let (row, col, sig) = &rendered[k];
        let mut g = 0.0;
        for ch in 0..2 {
            let b = usable[k].background[ch];
            for ((r, c), s) in sig[ch].indexed_iter() {
                let (rr, cc) = (row + r as i64 - h, col + c as i64 - h);
                if rr < 0 || cc < 0 || rr as usize >= rows || cc as usize >= cols {
                    continue;
                }
                let (rr, cc) = (rr as usize, cc as usize);
                let counts = frames[ch][[rr, cc]] - noise.baseline;
                let base = (b + accepted[ch][[rr, cc]]).max(MIN_LEVEL);
                let with = base + s;
                g += counts * (with / base).ln() - s;
            }
        }
        g
    };
    let solo: Vec<f64> = (0..usable.len()).into_par_iter().map(|k| gain(k, &accepted)).collect();
    let mut order: Vec<usize> = (0..usable.len()).collect();
    order.sort_by(|&a, &b| solo[b].total_cmp(&solo[a]).then(a.cmp(&b)));
    let mut kept = Vec::new();
    for k in order {
        if gain(k, &accepted) <= min_gain {
            continue;
        }
        let (row, col, sig) = &rendered[k];
        for ch in 0..2 {
            for ((r, c), s) in sig[ch].indexed_iter() {
                let (rr, cc) = (row + r as i64 - h, col + c as i64 - h);
                if rr >= 0 && cc >= 0 && (rr as usize) < rows && (cc as usize) < cols {
                    accepted[ch][[rr as usize, cc as usize]] += s;
                }
            }
        }
        kept.push(usable[k].loc);
    }
    Ok(kept)
}

/// Parameters of the full single-frame pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalizeParams {
    pub bank: BankSpec,
    pub voxel_xy_um: f64,
    pub voxel_z_um: f64,
    pub w_max: f64,
    pub threshold: f64,
    pub radius_um: f64,
    pub refine: bool,
    pub refine_opts: RefineOptions,
    /// Smallest log-likelihood gain for a refined emitter to be kept.
    pub min_gain: f64,
}

impl Default for LocalizeParams {
    fn default() -> Self {
        Self {
            bank: BankSpec::default(),
            voxel_xy_um: 0.0275,
            voxel_z_um: 0.05,
            w_max: 800.0,
            threshold: 80.0,
            radius_um: 0.1,
            refine: true,
            refine_opts: RefineOptions::default(),
            min_gain: 25.0,
        }
    }
}

/// Detect, post-process and optionally refine one frame.
pub fn localize_frame(
    pair: &ImagePair,
    bank: &TemplateBank,
    model: &PsfModel,
    masks: (&PhaseMask, &PhaseMask),
    noise: &NoiseParams,
    params: &LocalizeParams,
    frame: usize,
) -> Result<Vec<Localization>> {
    let z_range = [bank.z_knots[0], *bank.z_knots.last().unwrap_or(&bank.z_knots[0])];
    let mut grid = RecoveryGrid::for_canvas(
        pair.ch1.shape(),
        pair.ch1.pitch_um,
        z_range,
        params.voxel_xy_um,
        params.voxel_z_um,
        params.w_max,
    )?;
    detect(pair, bank, &mut grid)?;
    let cands = grid_postprocess(&grid, params.threshold, params.radius_um, frame)?;
    let opts = RefineOptions {
        max_iter: if params.refine { params.refine_opts.max_iter } else { 0 },
        z_range_um: z_range,
        ..params.refine_opts
    };
    if !params.refine {
        return Ok(refine_mle(pair, &cands, model, masks, noise, &opts)?.into_iter().map(|r| r.loc).collect());
    }
    // explain-away on the unrefined candidates first: side lobes of bright
    // emitters are dropped before they cost a full fit
    let screen = RefineOptions { max_iter: 0, ..opts };
    let initial = refine_mle(pair, &cands, model, masks, noise, &screen)?;
    let survivors = prune_explained(pair, &initial, model, masks, noise, &screen, params.min_gain)?;
    let refined = refine_mle(pair, &survivors, model, masks, noise, &opts)?;
    prune_explained(pair, &refined, model, masks, noise, &opts, params.min_gain)
}
