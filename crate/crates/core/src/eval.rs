//! Matching of predicted against ground-truth emitters and volume metrics.

use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{PsfError, Result};

pub type Point3 = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub pred: usize,
    pub gt: usize,
    pub distance_um: f64,
    pub lateral_um: f64,
    pub axial_um: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub pairs: Vec<MatchPair>,
    pub n_tp: usize,
    pub n_fp: usize,
    pub n_fn: usize,
    pub threshold_um: f64,
}

impl MatchResult {
    /// Σ matched distances + threshold × (unmatched predictions and truths),
    /// the quantity the matcher minimizes.
    pub fn augmented_cost(&self) -> f64 {
        let mut d: Vec<f64> = self.pairs.iter().map(|p| p.distance_um).collect();
        d.sort_by(f64::total_cmp);
        d.iter().sum::<f64>() + self.threshold_um * (self.n_fp + self.n_fn) as f64
    }
}

fn distance(a: &Point3, b: &Point3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Minimum-cost perfect assignment on a square matrix (shortest augmenting
/// paths with dual potentials). Returns the column assigned to each row.
pub fn solve_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // 1-based arrays; index 0 is the virtual root column
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    assign
}

/// Optimal one-to-one matching within `threshold_um` (3D distance).
///
/// The cost matrix is augmented with one dummy partner per point at cost
/// `threshold_um`; pairs farther apart than the threshold are forbidden.
pub fn match_hungarian(pred: &[Point3], gt: &[Point3], threshold_um: f64) -> Result<MatchResult> {
    if !(threshold_um > 0.0) {
        return Err(PsfError::InvalidArgument("matching threshold must be positive".into()));
    }
    let (np, ng) = (pred.len(), gt.len());
    let n = np + ng;
    let forbidden = 2.0 * threshold_um * (n as f64 + 1.0) + 1.0;
    let mut cost = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            cost[i][j] = match (i < np, j < ng) {
                (true, true) => {
                    let d = distance(&pred[i], &gt[j]);
                    if d <= threshold_um {
                        d
                    } else {
                        forbidden
                    }
                }
                (true, false) => {
                    if j - ng == i {
                        threshold_um
                    } else {
                        forbidden
                    }
                }
                (false, true) => {
                    if i - np == j {
                        threshold_um
                    } else {
                        forbidden
                    }
                }
                (false, false) => 0.0,
            };
        }
    }
    let assign = solve_assignment(&cost);
    let mut pairs = Vec::new();
    for (i, &j) in assign.iter().enumerate().take(np) {
        if j < ng {
            let d = distance(&pred[i], &gt[j]);
            if d <= threshold_um {
                pairs.push(MatchPair {
                    pred: i,
                    gt: j,
                    distance_um: d,
                    lateral_um: (pred[i][0] - gt[j][0]).hypot(pred[i][1] - gt[j][1]),
                    axial_um: (pred[i][2] - gt[j][2]).abs(),
                });
            }
        }
    }
    let tp = pairs.len();
    Ok(MatchResult {
        pairs,
        n_tp: tp,
        n_fp: np - tp,
        n_fn: ng - tp,
        threshold_um,
    })
}

/// `TP / (TP + FP + FN)`, with two empty sets scoring 1.
pub fn jaccard(m: &MatchResult) -> f64 {
    let denom = m.n_tp + m.n_fp + m.n_fn;
    if denom == 0 {
        1.0
    } else {
        m.n_tp as f64 / denom as f64
    }
}

/// Lateral and axial RMSE over matched pairs.
pub fn rmse(m: &MatchResult) -> Result<(f64, f64)> {
    if m.n_tp == 0 {
        return Err(PsfError::UndefinedMetric("RMSE needs at least one match".into()));
    }
    let n = m.pairs.len() as f64;
    let lat = m.pairs.iter().map(|p| p.lateral_um.powi(2)).sum::<f64>() / n;
    let ax = m.pairs.iter().map(|p| p.axial_um.powi(2)).sum::<f64>() / n;
    Ok((lat.sqrt(), ax.sqrt()))
}

/// Recovery-grid geometry; voxel `(k, i, j)` covers
/// `origin + [j, i, k]·voxel .. + voxel` in (x, y, z).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoxelGrid {
    /// (nz, ny, nx)
    pub shape: [usize; 3],
    pub voxel_xy_um: f64,
    pub voxel_z_um: f64,
    pub origin_um: [f64; 3],
}

impl VoxelGrid {
    pub fn center(&self, k: usize, i: usize, j: usize) -> Point3 {
        [
            self.origin_um[0] + (j as f64 + 0.5) * self.voxel_xy_um,
            self.origin_um[1] + (i as f64 + 0.5) * self.voxel_xy_um,
            self.origin_um[2] + (k as f64 + 0.5) * self.voxel_z_um,
        ]
    }

    pub fn index_of(&self, p: &Point3) -> Option<(usize, usize, usize)> {
        let f = |v: f64, o: f64, s: f64, n: usize| {
            let t = ((v - o) / s).floor();
            (t >= 0.0 && t < n as f64).then_some(t as usize)
        };
        Some((
            f(p[2], self.origin_um[2], self.voxel_z_um, self.shape[0])?,
            f(p[1], self.origin_um[1], self.voxel_xy_um, self.shape[1])?,
            f(p[0], self.origin_um[0], self.voxel_xy_um, self.shape[2])?,
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Voxelized {
    pub volume: Array3<f64>,
    /// Points outside the grid.
    pub dropped: usize,
    /// Voxels that received more than one point.
    pub collisions: Vec<(usize, usize, usize)>,
}

pub fn voxelize(locs: &[Point3], grid: &VoxelGrid, w: f64) -> Voxelized {
    let [nz, ny, nx] = grid.shape;
    let mut volume = Array3::zeros((nz, ny, nx));
    let mut dropped = 0;
    let mut collisions = Vec::new();
    for p in locs {
        match grid.index_of(p) {
            Some(idx) => {
                if volume[idx] != 0.0 && !collisions.contains(&idx) {
                    collisions.push(idx);
                }
                volume[idx] = w;
            }
            None => dropped += 1,
        }
    }
    Voxelized {
        volume,
        dropped,
        collisions,
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian smoothing with zero boundary.
fn smooth(vol: &Array3<f64>, sigma: f64) -> Array3<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let mut cur = vol.clone();
    for ax in 0..3 {
        let mut next = Array3::zeros(cur.dim());
        for (src, mut dst) in cur.lanes(Axis(ax)).into_iter().zip(next.lanes_mut(Axis(ax))) {
            let n = src.len() as i64;
            for i in 0..n {
                let mut acc = 0.0;
                for (t, w) in k.iter().enumerate() {
                    let j = i + t as i64 - r;
                    if j >= 0 && j < n {
                        acc += w * src[j as usize];
                    }
                }
                dst[i as usize] = acc;
            }
        }
        cur = next;
    }
    cur
}

/// `‖G ∗ a − G ∗ b‖²` with a 3D Gaussian of `sigma_vox` voxels.
pub fn heatmap_loss(a: &Array3<f64>, b: &Array3<f64>, sigma_vox: f64) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(PsfError::InvalidArgument(format!("volume shapes {:?} vs {:?}", a.dim(), b.dim())));
    }
    if !(sigma_vox > 0.0) {
        return Err(PsfError::InvalidArgument("sigma_vox must be positive".into()));
    }
    let diff = smooth(&(a - b), sigma_vox);
    Ok(diff.iter().map(|v| v * v).sum())
}

/// `1 − 2Σ(x·x̂) / (Σ(x·x̂) + Σx)` with `x` the truth and `x̂` the prediction.
pub fn overlap_loss(pred: &Array3<f64>, gt: &Array3<f64>) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(PsfError::InvalidArgument(format!("volume shapes {:?} vs {:?}", pred.dim(), gt.dim())));
    }
    let sx: f64 = gt.sum();
    if gt.iter().all(|v| *v == 0.0) {
        return Err(PsfError::UndefinedMetric("ground-truth volume is empty".into()));
    }
    let sxy: f64 = gt.iter().zip(pred.iter()).map(|(x, y)| x * y).sum();
    Ok(1.0 - 2.0 * sxy / (sxy + sx))
}
