//! Dual-channel registration and scan-based axial ground truth.
//!
//! Coordinates are micrometers with pixel `(r, c)` centered at
//! `((c + 0.5)·pitch, (r + 0.5)·pitch)`, as in [`crate::scene`].

use nalgebra::{DMatrix, Matrix3, Vector3};
use ndarray::Array2;
use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PsfError, Result};
use crate::optics::{Emitter, Image};
use crate::rng::stream_rng;

/// `p ↦ a·p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub a: [[f64; 2]; 2],
    pub t: [f64; 2],
}

impl AffineTransform {
    pub fn identity() -> Self {
        Self {
            a: [[1.0, 0.0], [0.0, 1.0]],
            t: [0.0, 0.0],
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            t: [tx, ty],
            ..Self::identity()
        }
    }

    pub fn det(&self) -> f64 {
        self.a[0][0] * self.a[1][1] - self.a[0][1] * self.a[1][0]
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.a[0][0] * p[0] + self.a[0][1] * p[1] + self.t[0],
            self.a[1][0] * p[0] + self.a[1][1] * p[1] + self.t[1],
        ]
    }

    pub fn inverse(&self) -> Result<Self> {
        let d = self.det();
        if !(d.abs() > 1e-14) || !d.is_finite() {
            return Err(PsfError::InvalidArgument("affine transform is not invertible".into()));
        }
        let [[p, q], [r, s]] = self.a;
        let a = [[s / d, -q / d], [-r / d, p / d]];
        let t = [
            -(a[0][0] * self.t[0] + a[0][1] * self.t[1]),
            -(a[1][0] * self.t[0] + a[1][1] * self.t[1]),
        ];
        Ok(Self { a, t })
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        let m = |i: usize, j: usize| self.a[i][0] * other.a[0][j] + self.a[i][1] * other.a[1][j];
        Self {
            a: [[m(0, 0), m(0, 1)], [m(1, 0), m(1, 1)]],
            t: self.apply(other.t),
        }
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Least-squares affine with `T(src) ≈ dst` over `idx`.
fn fit_affine(src: &[[f64; 2]], dst: &[[f64; 2]], idx: &[usize]) -> Option<AffineTransform> {
    let n = idx.len();
    if n < 3 {
        return None;
    }
    // center for conditioning
    let mean = |pts: &[[f64; 2]]| {
        let mut m = [0.0; 2];
        for &i in idx {
            m[0] += pts[i][0] / n as f64;
            m[1] += pts[i][1] / n as f64;
        }
        m
    };
    let (ms, md) = (mean(src), mean(dst));
    let design = DMatrix::from_fn(n, 2, |r, c| src[idx[r]][c] - ms[c]);
    let rhs = DMatrix::from_fn(n, 2, |r, c| dst[idx[r]][c] - md[c]);
    let svd = design.svd(true, true);
    let (smax, smin) = (svd.singular_values.max(), svd.singular_values.min());
    if !(smin > 1e-9 * smax.max(1e-300)) {
        return None;
    }
    let sol = svd.solve(&rhs, 0.0).ok()?;
    // sol is 2×2 with dst_c = Σ_k src_k·sol[k, c]
    let a = [[sol[(0, 0)], sol[(1, 0)]], [sol[(0, 1)], sol[(1, 1)]]];
    let t = [
        md[0] - a[0][0] * ms[0] - a[0][1] * ms[1],
        md[1] - a[1][0] * ms[0] - a[1][1] * ms[1],
    ];
    let tf = AffineTransform { a, t };
    (tf.det().abs() > 1e-14 && tf.det().is_finite()).then_some(tf)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RansacOptions {
    pub iters: usize,
    pub inlier_um: f64,
    pub min_sample: usize,
    pub seed: u64,
}

impl Default for RansacOptions {
    fn default() -> Self {
        Self {
            iters: 1000,
            inlier_um: 0.22,
            min_sample: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacFit {
    pub transform: AffineTransform,
    pub inliers: Vec<bool>,
    /// RMS transfer error over inliers.
    pub rms_um: f64,
}

fn consensus(tf: &AffineTransform, src: &[[f64; 2]], dst: &[[f64; 2]], tol: f64) -> (Vec<usize>, f64) {
    let mut inl = Vec::new();
    let mut sq = 0.0;
    for (i, (s, d)) in src.iter().zip(dst).enumerate() {
        let e = dist(tf.apply(*s), *d);
        if e <= tol {
            inl.push(i);
            sq += e * e;
        }
    }
    let rms = if inl.is_empty() { f64::INFINITY } else { (sq / inl.len() as f64).sqrt() };
    (inl, rms)
}

/// Robust affine `T` with `T(pts2) ≈ pts1`.
///
/// Hypothesis `i` draws its minimal sample from stream `i` of the seed, so
/// the result does not depend on how hypotheses are scheduled.
pub fn estimate_affine_ransac(pts1: &[[f64; 2]], pts2: &[[f64; 2]], opts: &RansacOptions) -> Result<RansacFit> {
    if pts1.len() != pts2.len() {
        return Err(PsfError::InvalidArgument("point lists differ in length".into()));
    }
    if pts1.len() < 3 || opts.min_sample < 3 || opts.min_sample > pts1.len() {
        return Err(PsfError::InvalidArgument(format!(
            "need at least 3 correspondences and 3 <= min_sample <= n, got n = {}, min_sample = {}",
            pts1.len(),
            opts.min_sample
        )));
    }
    if !(opts.inlier_um > 0.0) {
        return Err(PsfError::InvalidArgument("inlier_um must be positive".into()));
    }
    let n = pts1.len();
    let best = (0..opts.iters)
        .into_par_iter()
        .filter_map(|i| {
            let mut rng = stream_rng(opts.seed, i as u64);
            let idx = sample(&mut rng, n, opts.min_sample).into_vec();
            let tf = fit_affine(pts2, pts1, &idx)?;
            let (inl, rms) = consensus(&tf, pts2, pts1, opts.inlier_um);
            Some((inl.len(), rms, i, tf))
        })
        .reduce_with(|a, b| {
            let better = b.0 > a.0 || (b.0 == a.0 && (b.1 < a.1 || (b.1 == a.1 && b.2 < a.2)));
            if better {
                b
            } else {
                a
            }
        });
    let Some((count, _, _, mut tf)) = best else {
        return Err(PsfError::EstimationFailed("every RANSAC sample was degenerate".into()));
    };
    if count < 3 {
        return Err(PsfError::EstimationFailed(format!(
            "no consensus after {} iterations (best support {count})",
            opts.iters
        )));
    }
    let (mut inl, mut rms) = consensus(&tf, pts2, pts1, opts.inlier_um);
    for _ in 0..10 {
        let Some(refit) = fit_affine(pts2, pts1, &inl) else { break };
        let (inl2, rms2) = consensus(&refit, pts2, pts1, opts.inlier_um);
        if inl2.len() < 3 {
            break;
        }
        let done = inl2 == inl;
        tf = refit;
        inl = inl2;
        rms = rms2;
        if done {
            break;
        }
    }
    let mut mask = vec![false; n];
    for i in inl {
        mask[i] = true;
    }
    Ok(RansacFit {
        transform: tf,
        inliers: mask,
        rms_um: rms,
    })
}

/// Cubic B-spline coefficients of a 1D signal, mirror boundary.
fn prefilter_line(c: &mut [f64]) {
    let n = c.len();
    if n < 2 {
        return;
    }
    let z = 3f64.sqrt() - 2.0;
    for v in c.iter_mut() {
        *v *= 6.0;
    }
    // exact causal initialization for the mirror-symmetric extension
    let mut zn = z;
    let iz = 1.0 / z;
    let mut z2n = z.powi(n as i32 - 1);
    let mut sum = c[0] + z2n * c[n - 1];
    z2n *= z2n * iz;
    for v in c.iter().take(n - 1).skip(1) {
        sum += (zn + z2n) * v;
        zn *= z;
        z2n *= iz;
    }
    c[0] = sum / (1.0 - zn * zn);
    for k in 1..n {
        c[k] += z * c[k - 1];
    }
    c[n - 1] = (z / (z * z - 1.0)) * (c[n - 1] + z * c[n - 2]);
    for k in (0..n - 1).rev() {
        c[k] = z * (c[k + 1] - c[k]);
    }
}

fn spline_coefficients(img: &Array2<f64>) -> Array2<f64> {
    let mut c = img.clone();
    for mut row in c.rows_mut() {
        let mut line = row.to_vec();
        prefilter_line(&mut line);
        row.assign(&ndarray::ArrayView1::from(&line));
    }
    for mut col in c.columns_mut() {
        let mut line = col.to_vec();
        prefilter_line(&mut line);
        col.assign(&ndarray::ArrayView1::from(&line));
    }
    c
}

fn bspline3(t: f64) -> f64 {
    let a = t.abs();
    if a < 1.0 {
        2.0 / 3.0 - a * a + 0.5 * a * a * a
    } else if a < 2.0 {
        (2.0 - a).powi(3) / 6.0
    } else {
        0.0
    }
}

fn mirror(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let mut k = i.rem_euclid(period);
    if k >= n as i64 {
        k = period - k;
    }
    k as usize
}

fn interpolate(coef: &Array2<f64>, row: f64, col: f64) -> f64 {
    let (rows, cols) = coef.dim();
    let (r0, c0) = (row.floor() as i64, col.floor() as i64);
    let mut acc = 0.0;
    for dr in -1..=2 {
        let wr = bspline3(row - (r0 + dr) as f64);
        if wr == 0.0 {
            continue;
        }
        let rr = mirror(r0 + dr, rows);
        for dc in -1..=2 {
            let wc = bspline3(col - (c0 + dc) as f64);
            acc += wr * wc * coef[[rr, mirror(c0 + dc, cols)]];
        }
    }
    acc
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarpedImage {
    pub image: Image,
    /// False where the source location fell outside the input image.
    pub valid: Array2<bool>,
}

/// Resample `img` so that output position `p` holds the input at `T⁻¹(p)`.
pub fn warp_image(img: &Image, transform: &AffineTransform) -> Result<WarpedImage> {
    let inv = transform.inverse()?;
    let coef = spline_coefficients(&img.pixels);
    let (rows, cols) = img.shape();
    let pitch = img.pitch_um;
    let tol = 1e-9;
    let lines: Vec<(Vec<f64>, Vec<bool>)> = (0..rows)
        .into_par_iter()
        .map(|r| {
            let mut vals = vec![0.0; cols];
            let mut ok = vec![false; cols];
            for c in 0..cols {
                let p = [(c as f64 + 0.5) * pitch, (r as f64 + 0.5) * pitch];
                let s = inv.apply(p);
                let (sc, sr) = (s[0] / pitch - 0.5, s[1] / pitch - 0.5);
                let inside = sc >= -tol && sr >= -tol && sc <= cols as f64 - 1.0 + tol && sr <= rows as f64 - 1.0 + tol;
                if inside {
                    vals[c] = interpolate(&coef, sr, sc);
                    ok[c] = true;
                }
            }
            (vals, ok)
        })
        .collect();
    let out = Array2::from_shape_fn((rows, cols), |(r, c)| lines[r].0[c]);
    let valid = Array2::from_shape_fn((rows, cols), |(r, c)| lines[r].1[c]);
    Ok(WarpedImage {
        image: Image { pixels: out, pitch_um: pitch },
        valid,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AxialGtResult {
    pub emitters: Vec<Emitter>,
    /// Detection index and reason for every excluded detection.
    pub excluded: Vec<(usize, String)>,
}

/// Mean of the 5×5 block centered on the pixel nearest `(x_um, y_um)`,
/// clipped at the image border.
fn block_mean(img: &Image, x_um: f64, y_um: f64) -> f64 {
    let (rows, cols) = img.shape();
    let c0 = (x_um / img.pitch_um - 0.5).round() as i64;
    let r0 = (y_um / img.pitch_um - 0.5).round() as i64;
    let mut s = 0.0;
    let mut k = 0usize;
    for r in r0 - 2..=r0 + 2 {
        for c in c0 - 2..=c0 + 2 {
            if r >= 0 && c >= 0 && (r as usize) < rows && (c as usize) < cols {
                s += img.pixels[[r as usize, c as usize]];
                k += 1;
            }
        }
    }
    if k == 0 {
        f64::NAN
    } else {
        s / k as f64
    }
}

/// Quadratic least-squares vertex of `values` sampled every `step` from 0,
/// using slices within ±`half` of the maximum.
pub(crate) fn quadratic_vertex(values: &[f64], step: f64, half: usize) -> std::result::Result<f64, String> {
    let n = values.len();
    let (m, _) = values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    if m == 0 || m == n - 1 {
        return Err(format!("intensity peaks at scan boundary (slice {m})"));
    }
    let lo = m.saturating_sub(half);
    let hi = (m + half).min(n - 1);
    let mut ata = Matrix3::zeros();
    let mut atb = Vector3::zeros();
    for (i, v) in values.iter().enumerate().take(hi + 1).skip(lo) {
        let u = (i as f64 - m as f64) * step;
        let row = Vector3::new(1.0, u, u * u);
        ata += row * row.transpose();
        atb += row * *v;
    }
    let coef = ata
        .try_inverse()
        .map(|inv| inv * atb)
        .ok_or_else(|| "singular quadratic fit".to_string())?;
    if !(coef[2] < 0.0) {
        return Err("quadratic fit does not open downward".into());
    }
    let vertex = m as f64 * step - coef[1] / (2.0 * coef[2]);
    if vertex < 0.0 || vertex > (n - 1) as f64 * step {
        return Err(format!("vertex {vertex} um outside the scan range"));
    }
    Ok(vertex)
}

/// In-focus depth of each detection from a focal scan: slice `i` is at
/// `i·scan_step_um`; the reported depth is `correction × vertex`.
pub fn axial_gt_fit(
    zstack: &[Image],
    detections: &[(f64, f64)],
    scan_step_um: f64,
    correction: f64,
) -> Result<AxialGtResult> {
    if zstack.len() < 3 {
        return Err(PsfError::InvalidArgument(format!("need >= 3 scan slices, got {}", zstack.len())));
    }
    if !(scan_step_um > 0.0) {
        return Err(PsfError::InvalidArgument("scan step must be positive".into()));
    }
    let mut emitters = Vec::new();
    let mut excluded = Vec::new();
    for (k, &(x, y)) in detections.iter().enumerate() {
        let profile: Vec<f64> = zstack.iter().map(|img| block_mean(img, x, y)).collect();
        if profile.iter().any(|v| !v.is_finite()) {
            excluded.push((k, "detection outside the image".to_string()));
            continue;
        }
        match quadratic_vertex(&profile, scan_step_um, 5) {
            Ok(v) => {
                let peak = profile.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                emitters.push(Emitter::new(x, y, correction * v, 25.0 * peak));
            }
            Err(msg) => excluded.push((k, msg)),
        }
    }
    Ok(AxialGtResult { emitters, excluded })
}
