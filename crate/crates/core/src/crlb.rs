//! Fisher information, Cramér-Rao bounds and CRLB-optimal mask pairs.
//!
//! Position derivatives of the PSF are central finite differences of the
//! forward model. The objective gradient with respect to both masks is
//! propagated by hand through the inverse, the Fisher sums, the difference
//! stencil and the optical adjoint.

use nalgebra::{Matrix3, SymmetricEigen};
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PsfError, Result};
use crate::noise::Family;
use crate::optics::{Emitter, Image, PhaseMask, PsfModel, PupilGrid};
use crate::optim::{AdamParams, OptimizerState};
use crate::rng::stream_rng;

/// Difference steps `(x, y, z)` in micrometers.
pub const DEFAULT_STEPS: [f64; 3] = [0.005, 0.005, 0.010];

/// Largest Fisher window used unless the grid is smaller.
pub const FISHER_WINDOW: usize = 121;

/// Condition number above which a Fisher matrix counts as singular.
pub const MAX_CONDITION: f64 = 1e12;

/// 3×3 Fisher information in (x, y, z) order, photons/µm².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FisherMatrix {
    pub m: [[f64; 3]; 3],
}

impl FisherMatrix {
    pub fn zeros() -> Self {
        Self { m: [[0.0; 3]; 3] }
    }

    pub fn from_diagonal(d: [f64; 3]) -> Self {
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            m[i][i] = d[i];
        }
        Self { m }
    }

    fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.m[i][j])
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut m = self.m;
        m.iter_mut().flatten().for_each(|v| *v *= c);
        Self { m }
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut a: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                a = a.max((self.m[i][j] - self.m[j][i]).abs());
            }
        }
        a
    }
}

pub fn fisher_joint(f1: &FisherMatrix, f2: &FisherMatrix) -> FisherMatrix {
    let mut m = f1.m;
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] += f2.m[i][j];
        }
    }
    FisherMatrix { m }
}

/// Standard deviations `√[F⁻¹]ᵢᵢ` in micrometers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrlbTriple {
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub sigma_z: f64,
}

impl CrlbTriple {
    pub fn as_array(&self) -> [f64; 3] {
        [self.sigma_x, self.sigma_y, self.sigma_z]
    }

    pub fn sum(&self) -> f64 {
        self.sigma_x + self.sigma_y + self.sigma_z
    }
}

fn singular(f: &FisherMatrix, z_um: Option<f64>) -> Option<PsfError> {
    let eig = SymmetricEigen::new(f.matrix());
    let (mut lo, mut hi) = (0, 0);
    for k in 0..3 {
        if eig.eigenvalues[k] < eig.eigenvalues[lo] {
            lo = k;
        }
        if eig.eigenvalues[k] > eig.eigenvalues[hi] {
            hi = k;
        }
    }
    let (lmin, lmax) = (eig.eigenvalues[lo], eig.eigenvalues[hi]);
    let condition = if lmin > 0.0 { lmax / lmin } else { f64::INFINITY };
    if lmax > 0.0 && condition < MAX_CONDITION && condition.is_finite() {
        return None;
    }
    let v = eig.eigenvectors.column(lo);
    // sign convention: largest component positive
    let k = (0..3).max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs())).unwrap();
    let s = if v[k] < 0.0 { -1.0 } else { 1.0 };
    Some(PsfError::Unidentifiable {
        null_direction: [s * v[0], s * v[1], s * v[2]],
        condition,
        z_um,
    })
}

/// Bounds from an unregularized Fisher matrix.
pub fn crlb(f: &FisherMatrix) -> Result<CrlbTriple> {
    crlb_at(f, None)
}

fn crlb_at(f: &FisherMatrix, z_um: Option<f64>) -> Result<CrlbTriple> {
    if let Some(e) = singular(f, z_um) {
        return Err(e);
    }
    let c = f.matrix().try_inverse().ok_or_else(|| singular_fallback(z_um))?;
    Ok(CrlbTriple {
        sigma_x: c[(0, 0)].sqrt(),
        sigma_y: c[(1, 1)].sqrt(),
        sigma_z: c[(2, 2)].sqrt(),
    })
}

fn singular_fallback(z_um: Option<f64>) -> PsfError {
    PsfError::Unidentifiable {
        null_direction: [0.0, 0.0, 1.0],
        condition: f64::INFINITY,
        z_um,
    }
}

/// PSF at `theta` and its position derivatives on a window.
#[derive(Debug, Clone, PartialEq)]
pub struct Derivatives {
    pub value: Image,
    /// `∂P/∂x, ∂P/∂y, ∂P/∂z`.
    pub d: [Image; 3],
    pub steps: [f64; 3],
    /// The `z − h` probe lies above the coverslip (evaluated by analytic
    /// continuation of the defocus phase).
    pub crosses_coverslip: bool,
}

const OFFSETS: [[f64; 3]; 7] = [
    [0.0, 0.0, 0.0],
    [1.0, 0.0, 0.0],
    [-1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, -1.0, 0.0],
    [0.0, 0.0, 1.0],
    [0.0, 0.0, -1.0],
];

fn probes(
    model: &PsfModel,
    mask: &Array2<f64>,
    theta: &Emitter,
    steps: [f64; 3],
) -> Vec<crate::optics::Forward> {
    OFFSETS
        .iter()
        .map(|o| {
            model.forward_values(
                mask,
                theta.x_um + o[0] * steps[0],
                theta.y_um + o[1] * steps[1],
                theta.z_um + o[2] * steps[2],
                theta.photons,
            )
        })
        .collect()
}

fn check_theta(theta: &Emitter, steps: [f64; 3]) -> Result<()> {
    let ok = [theta.x_um, theta.y_um, theta.z_um, theta.photons].iter().all(|v| v.is_finite())
        && theta.photons >= 0.0
        && steps.iter().all(|h| *h > 0.0);
    if !ok {
        return Err(PsfError::InvalidArgument(format!("invalid emitter {theta:?} or steps {steps:?}")));
    }
    Ok(())
}

pub fn psf_derivatives(
    model: &PsfModel,
    mask: &PhaseMask,
    theta: &Emitter,
    window_px: usize,
    steps: [f64; 3],
) -> Result<Derivatives> {
    model.check_mask(mask)?;
    model.check_window(window_px)?;
    check_theta(theta, steps)?;
    let f = probes(model, &mask.values, theta, steps);
    let img = |k: usize| model.crop(&f[k].intensity, window_px);
    let value = img(0);
    let d = [0, 1, 2].map(|i| {
        let plus = img(1 + 2 * i);
        let minus = img(2 + 2 * i);
        Image {
            pixels: (&plus.pixels - &minus.pixels) / (2.0 * steps[i]),
            pitch_um: value.pitch_um,
        }
    });
    Ok(Derivatives {
        value,
        d,
        steps,
        crosses_coverslip: theta.z_um - steps[2] < 0.0,
    })
}

/// Per-pixel Fisher weight `w(q)` and its derivative.
fn weight(q: f64, family: Family) -> (f64, f64) {
    match family {
        Family::Poisson => (1.0 / q, -1.0 / (q * q)),
        Family::Mixed => (1.0 / q + 0.5 / (q * q), -1.0 / (q * q) - 1.0 / (q * q * q)),
    }
}

fn variance_offset(read_sigma: f64, family: Family) -> f64 {
    match family {
        Family::Poisson => 0.0,
        Family::Mixed => read_sigma * read_sigma,
    }
}

/// Fisher information of one channel from precomputed derivatives.
pub fn fisher_from_derivatives(
    der: &Derivatives,
    background_per_px: f64,
    read_sigma: f64,
    family: Family,
) -> Result<FisherMatrix> {
    let off = background_per_px + variance_offset(read_sigma, family);
    let mut m = [[0.0; 3]; 3];
    let scale = der.d.iter().map(|d| d.pixels.iter().fold(0.0f64, |a, v| a.max(v.abs()))).fold(0.0, f64::max);
    for (idx, &p) in der.value.pixels.indexed_iter() {
        let q = p + off;
        let d = [der.d[0].pixels[idx], der.d[1].pixels[idx], der.d[2].pixels[idx]];
        if !(q > 0.0) {
            if d.iter().all(|v| v.abs() <= 1e-12 * scale.max(f64::MIN_POSITIVE)) {
                continue;
            }
            return Err(PsfError::Domain(format!("expected counts {q} with nonzero gradient at pixel {idx:?}")));
        }
        let (w, _) = weight(q, family);
        for i in 0..3 {
            for j in i..3 {
                m[i][j] += d[i] * d[j] * w;
            }
        }
    }
    for i in 0..3 {
        for j in 0..i {
            m[i][j] = m[j][i];
        }
    }
    Ok(FisherMatrix { m })
}

/// Fisher information of one channel for emitter `theta` (its photons are
/// the channel's signal).
#[allow(clippy::too_many_arguments)]
pub fn fisher(
    model: &PsfModel,
    mask: &PhaseMask,
    theta: &Emitter,
    background_per_px: f64,
    read_sigma: f64,
    family: Family,
    window_px: usize,
) -> Result<FisherMatrix> {
    let der = psf_derivatives(model, mask, theta, window_px, DEFAULT_STEPS)?;
    fisher_from_derivatives(&der, background_per_px, read_sigma, family)
}

/// Largest relative change of any Fisher entry when all steps are halved,
/// entries measured against `√(FᵢᵢFⱼⱼ)`.
#[allow(clippy::too_many_arguments)]
pub fn richardson_drift(
    model: &PsfModel,
    mask: &PhaseMask,
    theta: &Emitter,
    background_per_px: f64,
    read_sigma: f64,
    family: Family,
    window_px: usize,
    steps: [f64; 3],
) -> Result<f64> {
    let full = psf_derivatives(model, mask, theta, window_px, steps)?;
    let half = psf_derivatives(model, mask, theta, window_px, steps.map(|h| 0.5 * h))?;
    let a = fisher_from_derivatives(&full, background_per_px, read_sigma, family)?;
    let b = fisher_from_derivatives(&half, background_per_px, read_sigma, family)?;
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let s = (a.m[i][i] * a.m[j][j]).sqrt();
            if s > 0.0 {
                worst = worst.max((a.m[i][j] - b.m[i][j]).abs() / s);
            }
        }
    }
    Ok(worst)
}

/// Evaluation protocol of the pair objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrlbEvalSpec {
    pub z_grid: Vec<f64>,
    /// Emitter photons before the channel split.
    pub signal_photons: f64,
    /// Expected background per pixel in each channel.
    pub background_per_px: f64,
    pub read_sigma: f64,
    pub family: Family,
    /// Fraction of the signal sent to channel 1.
    pub split: f64,
    pub window_px: usize,
}

impl Default for CrlbEvalSpec {
    fn default() -> Self {
        Self {
            z_grid: Self::grid(0.0, 4.0, 0.25),
            signal_photons: 2000.0,
            background_per_px: 15.0,
            read_sigma: 0.0,
            family: Family::Poisson,
            split: 0.5,
            window_px: FISHER_WINDOW,
        }
    }
}

impl CrlbEvalSpec {
    /// `lo, lo + step, …` up to `hi` inclusive.
    pub fn grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
        let n = ((hi - lo) / step + 1e-9).floor() as usize;
        (0..=n).map(|k| lo + k as f64 * step).collect()
    }

    pub fn over_range(lo: f64, hi: f64) -> Self {
        Self {
            z_grid: Self::grid(lo, hi, 0.25),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.z_grid.is_empty() || self.z_grid.iter().any(|z| !z.is_finite() || *z < 0.0) {
            return Err(PsfError::InvalidConfig("z_grid must be nonempty with depths >= 0".into()));
        }
        if !(self.signal_photons > 0.0 && self.background_per_px >= 0.0 && self.read_sigma >= 0.0) {
            return Err(PsfError::InvalidConfig("need signal > 0, background >= 0, read_sigma >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.split) {
            return Err(PsfError::InvalidConfig("split outside [0, 1]".into()));
        }
        if self.window_px % 2 == 0 {
            return Err(PsfError::InvalidConfig("window_px must be odd".into()));
        }
        Ok(())
    }

    /// Window actually used on `model` (capped by the grid).
    pub fn window_for(&self, model: &PsfModel) -> usize {
        self.window_px.min(model.max_window())
    }

    fn channel_photons(&self) -> [f64; 2] {
        [self.signal_photons * self.split, self.signal_photons * (1.0 - self.split)]
    }
}

/// Per-depth bounds of each channel and of the pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CrlbRow {
    pub z_um: f64,
    pub ch1: Result<CrlbTriple, String>,
    pub ch2: Result<CrlbTriple, String>,
    pub joint: Result<CrlbTriple, String>,
    pub fisher: [FisherMatrix; 3],
}

pub fn crlb_curve(model: &PsfModel, mask1: &PhaseMask, mask2: &PhaseMask, spec: &CrlbEvalSpec) -> Result<Vec<CrlbRow>> {
    spec.validate()?;
    let w = spec.window_for(model);
    let [n1, n2] = spec.channel_photons();
    spec.z_grid
        .par_iter()
        .map(|&z| {
            let f = |mask: &PhaseMask, n: f64| {
                fisher(model, mask, &Emitter::on_axis(z, n), spec.background_per_px, spec.read_sigma, spec.family, w)
            };
            let f1 = f(mask1, n1)?;
            let f2 = f(mask2, n2)?;
            let fj = fisher_joint(&f1, &f2);
            let b = |f: &FisherMatrix| crlb_at(f, Some(z)).map_err(|e| e.to_string());
            Ok(CrlbRow {
                z_um: z,
                ch1: b(&f1),
                ch2: b(&f2),
                joint: b(&fj),
                fisher: [f1, f2, fj],
            })
        })
        .collect()
}

/// Objective value and, optionally, its gradient for both masks.
struct Evaluation {
    value: f64,
    grads: Option<[Array2<f64>; 2]>,
}

fn evaluate_pair(
    model: &PsfModel,
    masks: [&Array2<f64>; 2],
    spec: &CrlbEvalSpec,
    tikhonov: Option<f64>,
    with_grad: bool,
) -> Result<Evaluation> {
    let w = spec.window_for(model);
    let n = model.grid().n;
    let photons = spec.channel_photons();
    let off = spec.background_per_px + variance_offset(spec.read_sigma, spec.family);
    let steps = DEFAULT_STEPS;
    let per_z: Vec<Result<(f64, Option<[Array2<f64>; 2]>)>> = spec
        .z_grid
        .par_iter()
        .map(|&z| {
            let mut chans = Vec::with_capacity(2);
            let mut fsum: Matrix3<f64> = Matrix3::zeros();
            for ch in 0..2 {
                let theta = Emitter::on_axis(z, photons[ch]);
                let fwd = probes(model, masks[ch], &theta, steps);
                let win: Vec<Vec<f64>> = fwd.iter().map(|f| model.crop(&f.intensity, w).pixels.into_raw_vec_and_offset().0).collect();
                let p = win[0].clone();
                let d: [Vec<f64>; 3] = [0, 1, 2].map(|i| {
                    win[1 + 2 * i].iter().zip(&win[2 + 2 * i]).map(|(a, b)| (a - b) / (2.0 * steps[i])).collect()
                });
                for u in 0..p.len() {
                    let q = p[u] + off;
                    if !(q > 0.0) {
                        return Err(PsfError::Domain(format!("expected counts {q} at z = {z} um")));
                    }
                    let (wt, _) = weight(q, spec.family);
                    for i in 0..3 {
                        for j in 0..3 {
                            fsum[(i, j)] += d[i][u] * d[j][u] * wt;
                        }
                    }
                }
                chans.push((fwd, p, d));
            }
            let f = match tikhonov {
                Some(eps) => fsum + Matrix3::identity() * (eps * fsum.trace() / 3.0).max(f64::MIN_POSITIVE),
                None => {
                    let fm = FisherMatrix {
                        m: [0, 1, 2].map(|i| [0, 1, 2].map(|j| fsum[(i, j)])),
                    };
                    if let Some(e) = singular(&fm, Some(z)) {
                        return Err(e);
                    }
                    fsum
                }
            };
            let c = f.try_inverse().ok_or_else(|| singular_fallback(Some(z)))?;
            let sig: [f64; 3] = [0, 1, 2].map(|i| c[(i, i)].max(0.0).sqrt());
            let value: f64 = sig.iter().sum();
            if !with_grad {
                return Ok((value, None));
            }
            // d value / d F = −C·diag(1/(2σᵢ))·C
            let dsig = Matrix3::from_diagonal(&nalgebra::Vector3::from_fn(|i, _| 0.5 / sig[i]));
            let g = -(c * dsig * c);
            let mut grads = [Array2::zeros((n, n)), Array2::zeros((n, n))];
            for (ch, (fwd, p, d)) in chans.iter().enumerate() {
                let mut wg: Vec<Array2<f64>> = (0..7).map(|_| Array2::zeros((w, w))).collect();
                for u in 0..p.len() {
                    let (r, cc) = (u / w, u % w);
                    let (wt, dwt) = weight(p[u] + off, spec.family);
                    let du = [d[0][u], d[1][u], d[2][u]];
                    let mut dq = 0.0;
                    for i in 0..3 {
                        let mut gd = 0.0;
                        for j in 0..3 {
                            gd += g[(i, j)] * du[j];
                            dq += g[(i, j)] * du[i] * du[j];
                        }
                        let dd = 2.0 * gd * wt / (2.0 * steps[i]);
                        wg[1 + 2 * i][[r, cc]] += dd;
                        wg[2 + 2 * i][[r, cc]] -= dd;
                    }
                    wg[0][[r, cc]] += dq * dwt;
                }
                for (k, f) in fwd.iter().enumerate() {
                    model.backprop(f, &wg[k], &mut grads[ch]);
                }
            }
            Ok((value, Some(grads)))
        })
        .collect();
    let mut value = 0.0;
    let mut grads: Option<[Array2<f64>; 2]> = with_grad.then(|| [Array2::zeros((n, n)), Array2::zeros((n, n))]);
    for r in per_z {
        let (v, g) = r?;
        value += v;
        if let (Some(acc), Some(g)) = (grads.as_mut(), g) {
            acc[0] += &g[0];
            acc[1] += &g[1];
        }
    }
    Ok(Evaluation { value, grads })
}

fn check_pair(model: &PsfModel, mask1: &PhaseMask, mask2: &PhaseMask, spec: &CrlbEvalSpec) -> Result<()> {
    spec.validate()?;
    model.check_mask(mask1)?;
    model.check_mask(mask2)
}

/// `Σ_z Σ_{x,y,z} √CRLB` of the pair, without regularization.
pub fn crlb_objective(model: &PsfModel, mask1: &PhaseMask, mask2: &PhaseMask, spec: &CrlbEvalSpec) -> Result<f64> {
    check_pair(model, mask1, mask2, spec)?;
    Ok(evaluate_pair(model, [&mask1.values, &mask2.values], spec, None, false)?.value)
}

/// Objective with Tikhonov floor `eps·tr(F)/3` and its gradient for both masks.
pub fn crlb_objective_gradient(
    model: &PsfModel,
    mask1: &PhaseMask,
    mask2: &PhaseMask,
    spec: &CrlbEvalSpec,
    eps: f64,
) -> Result<(f64, [Array2<f64>; 2])> {
    check_pair(model, mask1, mask2, spec)?;
    let e = evaluate_pair(model, [&mask1.values, &mask2.values], spec, Some(eps), true)?;
    Ok((e.value, e.grads.expect("gradient requested")))
}

/// Regularized objective (the quantity optimized).
pub fn crlb_objective_regularized(
    model: &PsfModel,
    mask1: &PhaseMask,
    mask2: &PhaseMask,
    spec: &CrlbEvalSpec,
    eps: f64,
) -> Result<f64> {
    check_pair(model, mask1, mask2, spec)?;
    Ok(evaluate_pair(model, [&mask1.values, &mask2.values], spec, Some(eps), false)?.value)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairOptions {
    pub iterations: usize,
    pub lr: f64,
    pub tikhonov: f64,
}

impl Default for PairOptions {
    fn default() -> Self {
        Self {
            iterations: 200,
            lr: 0.05,
            tikhonov: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairDesign {
    pub mask1: PhaseMask,
    pub mask2: PhaseMask,
    /// Regularized objective of every iterate, starting with the input pair.
    pub trace: Vec<f64>,
    pub best_iteration: usize,
}

impl PairDesign {
    pub fn initial_objective(&self) -> f64 {
        self.trace[0]
    }

    pub fn best_objective(&self) -> f64 {
        self.trace[self.best_iteration]
    }

    /// Best-so-far objective after each iterate.
    pub fn best_so_far(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.trace
            .iter()
            .map(|v| {
                best = best.min(*v);
                best
            })
            .collect()
    }
}

/// Adam descent on the pair objective; returns the best iterate.
pub fn optimize_pair(
    model: &PsfModel,
    init1: &PhaseMask,
    init2: &PhaseMask,
    spec: &CrlbEvalSpec,
    opts: &PairOptions,
) -> Result<PairDesign> {
    check_pair(model, init1, init2, spec)?;
    let n = model.grid().n;
    let params = AdamParams {
        step_size: opts.lr,
        ..AdamParams::default()
    };
    let mut states = [OptimizerState::new(params, (n, n)), OptimizerState::new(params, (n, n))];
    let mut cur = [init1.values.clone(), init2.values.clone()];
    let mut best = cur.clone();
    let mut trace = Vec::with_capacity(opts.iterations + 1);
    let mut best_iteration = 0;
    for it in 0..=opts.iterations {
        let with_grad = it < opts.iterations;
        let e = evaluate_pair(model, [&cur[0], &cur[1]], spec, Some(opts.tikhonov), with_grad)?;
        if !e.value.is_finite() {
            return Err(PsfError::NonFinite { iteration: it });
        }
        trace.push(e.value);
        if e.value < trace[best_iteration] || it == 0 {
            best_iteration = it;
            best = cur.clone();
        }
        log::debug!("crlb pair iteration {it}: objective {:.6}", e.value);
        if let Some(g) = e.grads {
            if g.iter().any(|a| a.iter().any(|v| !v.is_finite())) {
                return Err(PsfError::NonFinite { iteration: it });
            }
            for ch in 0..2 {
                states[ch].step(&mut cur[ch], &g[ch]);
            }
        }
    }
    let [m1, m2] = best;
    Ok(PairDesign {
        mask1: PhaseMask::new(m1)?,
        mask2: PhaseMask::new(m2)?,
        trace,
        best_iteration,
    })
}

/// Smooth random phase: white noise low-passed with a Gaussian of
/// `corr_px` pupil pixels, then set to zero mean and `std_rad` deviation
/// over the aperture. Zero outside the aperture.
pub fn smooth_random_phase(grid: &PupilGrid, std_rad: f64, corr_px: f64, seed: u64) -> PhaseMask {
    let n = grid.n;
    let mut rng = stream_rng(seed, 0);
    let white: Array2<f64> = Array2::from_shape_simple_fn((n, n), || rng.sample(StandardNormal));
    let r = (3.0 * corr_px).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-0.5 * (i as f64 / corr_px).powi(2)).exp()).collect();
    let conv = |src: &Array2<f64>, along_rows: bool| {
        Array2::from_shape_fn((n, n), |(a, b)| {
            let mut s = 0.0;
            for (t, w) in k.iter().enumerate() {
                let o = t as i64 - r;
                let (ra, cb) = if along_rows { (a as i64 + o, b as i64) } else { (a as i64, b as i64 + o) };
                if ra >= 0 && cb >= 0 && (ra as usize) < n && (cb as usize) < n {
                    s += w * src[[ra as usize, cb as usize]];
                }
            }
            s
        })
    };
    let smooth = conv(&conv(&white, true), false);
    let inside: Vec<f64> = smooth.iter().zip(grid.aperture.iter()).filter(|(_, a)| **a).map(|(v, _)| *v).collect();
    let mean = inside.iter().sum::<f64>() / inside.len() as f64;
    let sd = (inside.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / inside.len() as f64).sqrt();
    let values = Array2::from_shape_fn((n, n), |idx| {
        if grid.aperture[idx] && sd > 0.0 {
            (smooth[idx] - mean) / sd * std_rad
        } else {
            0.0
        }
    });
    PhaseMask { values }
}

/// Astigmatism `a·(ρ/ρc)²·cos(2(φ − angle))` over the aperture.
pub fn astigmatism(grid: &PupilGrid, amplitude_rad: f64, angle: f64, cutoff: f64) -> PhaseMask {
    let values = Array2::from_shape_fn((grid.n, grid.n), |idx| {
        if grid.aperture[idx] {
            amplitude_rad * (grid.rho[idx] / cutoff).powi(2) * (2.0 * (grid.phi[idx] - angle)).cos()
        } else {
            0.0
        }
    });
    PhaseMask { values }
}

/// Default pair initialization: orthogonal astigmatism seeds plus
/// independent smooth noise on each mask.
pub fn seeded_pair(model: &PsfModel, amplitude_rad: f64, noise_std_rad: f64, seed: u64) -> (PhaseMask, PhaseMask) {
    let grid = model.grid();
    let cutoff = model.config().aperture_cutoff();
    let corr = grid.n as f64 / 16.0;
    let mk = |angle: f64, stream: u64| {
        let a = astigmatism(grid, amplitude_rad, angle, cutoff);
        let s = smooth_random_phase(grid, noise_std_rad, corr, crate::rng::derive_seed(seed, stream));
        PhaseMask {
            values: a.values + s.values,
        }
    };
    (mk(0.0, 1), mk(std::f64::consts::FRAC_PI_4, 2))
}

/// Resample an external pupil phase sampled on a square covering
/// `[−rho_max, rho_max]²` of normalized pupil radius onto `grid`
/// (bilinear; zero outside the input support or the aperture).
pub fn import_pupil_phase(values: &Array2<f64>, rho_max: f64, grid: &PupilGrid) -> Result<PhaseMask> {
    let (h, w) = values.dim();
    if h < 2 || w < 2 || !(rho_max > 0.0) {
        return Err(PsfError::InvalidArgument("imported phase needs >= 2x2 samples and rho_max > 0".into()));
    }
    let out = Array2::from_shape_fn((grid.n, grid.n), |(r, c)| {
        if !grid.aperture[[r, c]] {
            return 0.0;
        }
        let (px, py) = grid.coords(r, c);
        let fx = (px + rho_max) / (2.0 * rho_max) * (w - 1) as f64;
        let fy = (py + rho_max) / (2.0 * rho_max) * (h - 1) as f64;
        if fx < 0.0 || fy < 0.0 || fx > (w - 1) as f64 || fy > (h - 1) as f64 {
            return 0.0;
        }
        let (x0, y0) = ((fx.floor() as usize).min(w - 2), (fy.floor() as usize).min(h - 2));
        let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
        values[[y0, x0]] * (1.0 - tx) * (1.0 - ty)
            + values[[y0, x0 + 1]] * tx * (1.0 - ty)
            + values[[y0 + 1, x0]] * (1.0 - tx) * ty
            + values[[y0 + 1, x0 + 1]] * tx * ty
    });
    PhaseMask::new(out)
}
