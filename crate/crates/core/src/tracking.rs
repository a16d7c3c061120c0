//! Track linking by density-based clustering of pooled 3D localizations,
//! and mean-square-displacement analysis.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{PsfError, Result};
use crate::rng::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub frame: usize,
    pub x_um: f64,
    pub y_um: f64,
    pub z_um: f64,
}

impl TrackPoint {
    pub fn new(frame: usize, x_um: f64, y_um: f64, z_um: f64) -> Self {
        Self { frame, x_um, y_um, z_um }
    }

    fn pos(&self) -> [f64; 3] {
        [self.x_um, self.y_um, self.z_um]
    }

    /// Total order used for every tie-break, so results never depend on
    /// input order.
    fn canonical_cmp(&self, other: &Self) -> Ordering {
        self.frame
            .cmp(&other.frame)
            .then(self.x_um.total_cmp(&other.x_um))
            .then(self.y_um.total_cmp(&other.y_um))
            .then(self.z_um.total_cmp(&other.z_um))
    }
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub id: usize,
    pub points: Vec<TrackPoint>,
    /// Frames between the first and last point without a localization.
    pub n_missing: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RejectedCluster {
    pub points: Vec<usize>,
    pub duplicate_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkResult {
    pub tracks: Vec<Track>,
    /// Input indices not belonging to any cluster.
    pub noise: Vec<usize>,
    /// Input indices discarded as second localizations in a frame.
    pub duplicates: Vec<usize>,
    /// Clusters whose per-frame duplicate rate exceeded the limit.
    pub rejected: Vec<RejectedCluster>,
}

impl LinkResult {
    /// Number of input localizations not present in any track.
    pub fn n_dropped(&self) -> usize {
        self.noise.len() + self.duplicates.len() + self.rejected.iter().map(|c| c.points.len()).sum::<usize>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkParams {
    pub eps_um: f64,
    pub min_pts: usize,
    pub max_duplicate_rate: f64,
}

impl Default for LinkParams {
    fn default() -> Self {
        Self {
            eps_um: 0.25,
            min_pts: 25,
            max_duplicate_rate: 0.05,
        }
    }
}

struct GridIndex {
    cell: f64,
    cells: HashMap<(i64, i64, i64), Vec<usize>>,
}

impl GridIndex {
    fn new(pts: &[TrackPoint], cell: f64) -> Self {
        let mut cells: HashMap<_, Vec<usize>> = HashMap::new();
        for (i, p) in pts.iter().enumerate() {
            cells.entry(Self::key(p.pos(), cell)).or_default().push(i);
        }
        Self { cell, cells }
    }

    fn key(p: [f64; 3], cell: f64) -> (i64, i64, i64) {
        (
            (p[0] / cell).floor() as i64,
            (p[1] / cell).floor() as i64,
            (p[2] / cell).floor() as i64,
        )
    }

    fn neighbors(&self, pts: &[TrackPoint], i: usize, eps: f64) -> Vec<usize> {
        let p = pts[i].pos();
        let (a, b, c) = Self::key(p, self.cell);
        let mut out = Vec::new();
        for da in -1..=1 {
            for db in -1..=1 {
                for dc in -1..=1 {
                    if let Some(v) = self.cells.get(&(a + da, b + db, c + dc)) {
                        out.extend(v.iter().copied().filter(|&j| dist2(p, pts[j].pos()) <= eps * eps));
                    }
                }
            }
        }
        out
    }
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// DBSCAN cluster labels; `None` marks noise. Core points need `min_pts`
/// neighbors within `eps` counting themselves. Border points join the
/// cluster of their nearest core neighbor. Labels are numbered by each
/// cluster's canonically smallest member.
pub fn dbscan(pts: &[TrackPoint], eps: f64, min_pts: usize) -> Result<Vec<Option<usize>>> {
    if !(eps > 0.0) || min_pts == 0 {
        return Err(PsfError::InvalidArgument("need eps > 0 and min_pts >= 1".into()));
    }
    let n = pts.len();
    let index = GridIndex::new(pts, eps);
    let neighbors: Vec<Vec<usize>> = (0..n).map(|i| index.neighbors(pts, i, eps)).collect();
    let core: Vec<bool> = neighbors.iter().map(|v| v.len() >= min_pts).collect();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        if !core[i] {
            continue;
        }
        for &j in &neighbors[i] {
            if core[j] {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    let mut root_of: Vec<Option<usize>> = vec![None; n];
    for i in 0..n {
        if core[i] {
            root_of[i] = Some(find(&mut parent, i));
        } else {
            let nearest = neighbors[i].iter().filter(|&&j| core[j]).min_by(|&&a, &&b| {
                dist2(pts[i].pos(), pts[a].pos())
                    .total_cmp(&dist2(pts[i].pos(), pts[b].pos()))
                    .then(pts[a].canonical_cmp(&pts[b]))
            });
            root_of[i] = nearest.map(|&j| find(&mut parent, j));
        }
    }
    // canonical cluster numbering
    let mut first: HashMap<usize, usize> = HashMap::new();
    for i in 0..n {
        if let Some(r) = root_of[i] {
            let e = first.entry(r).or_insert(i);
            if pts[i].canonical_cmp(&pts[*e]) == Ordering::Less {
                *e = i;
            }
        }
    }
    let mut roots: Vec<(usize, usize)> = first.into_iter().collect();
    roots.sort_by(|a, b| pts[a.1].canonical_cmp(&pts[b.1]));
    let label: HashMap<usize, usize> = roots.iter().enumerate().map(|(k, (r, _))| (*r, k)).collect();
    Ok(root_of.into_iter().map(|r| r.map(|r| label[&r])).collect())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Cluster pooled localizations into tracks, one point per frame (the one
/// nearest the cluster's component-wise median).
pub fn link_dbscan(pts: &[TrackPoint], params: &LinkParams) -> Result<LinkResult> {
    let labels = dbscan(pts, params.eps_um, params.min_pts)?;
    let n_clusters = labels.iter().flatten().max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_clusters];
    let mut noise = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        match l {
            Some(k) => members[*k].push(i),
            None => noise.push(i),
        }
    }
    let mut tracks = Vec::new();
    let mut duplicates = Vec::new();
    let mut rejected = Vec::new();
    for idx in members {
        let med = [
            median(idx.iter().map(|&i| pts[i].x_um).collect()),
            median(idx.iter().map(|&i| pts[i].y_um).collect()),
            median(idx.iter().map(|&i| pts[i].z_um).collect()),
        ];
        let mut by_frame: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &i in &idx {
            by_frame.entry(pts[i].frame).or_default().push(i);
        }
        let mut keep = Vec::new();
        let mut dups = Vec::new();
        for (_, mut v) in by_frame {
            v.sort_by(|&a, &b| {
                dist2(pts[a].pos(), med)
                    .total_cmp(&dist2(pts[b].pos(), med))
                    .then(pts[a].canonical_cmp(&pts[b]))
            });
            keep.push(v[0]);
            dups.extend_from_slice(&v[1..]);
        }
        let rate = dups.len() as f64 / idx.len() as f64;
        if rate > params.max_duplicate_rate {
            log::warn!(
                "rejecting cluster of {} points: {:.1}% duplicate frames; use a frame-to-frame tracker",
                idx.len(),
                100.0 * rate
            );
            rejected.push(RejectedCluster {
                points: idx,
                duplicate_rate: rate,
            });
            continue;
        }
        duplicates.extend(dups);
        let points: Vec<TrackPoint> = keep.iter().map(|&i| pts[i]).collect();
        let span = points.last().unwrap().frame - points[0].frame + 1;
        tracks.push(Track {
            id: tracks.len(),
            n_missing: span - points.len(),
            points,
        });
    }
    duplicates.sort_unstable();
    Ok(LinkResult {
        tracks,
        noise,
        duplicates,
        rejected,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MsdPoint {
    pub lag: usize,
    pub msd_um2: f64,
    /// Number of displacements averaged.
    pub count: usize,
}

/// `MSD(τ)` for `τ = 0..=max_lag` over frame pairs exactly `τ` apart; lags
/// with no such pair are omitted.
pub fn msd(track: &Track, max_lag: usize) -> Result<Vec<MsdPoint>> {
    let pts = &track.points;
    if pts.len() < 2 {
        return Err(PsfError::InvalidArgument("MSD needs a track with at least 2 points".into()));
    }
    if pts.windows(2).any(|w| w[1].frame <= w[0].frame) {
        return Err(PsfError::InvalidArgument("track frames must be strictly increasing".into()));
    }
    let f0 = pts[0].frame;
    let span = pts.last().unwrap().frame - f0 + 1;
    let mut slot: Vec<Option<usize>> = vec![None; span];
    for (i, p) in pts.iter().enumerate() {
        slot[p.frame - f0] = Some(i);
    }
    let mut out = vec![MsdPoint {
        lag: 0,
        msd_um2: 0.0,
        count: pts.len(),
    }];
    for lag in 1..=max_lag.min(span - 1) {
        let mut sum = 0.0;
        let mut count = 0;
        for t in 0..span - lag {
            if let (Some(a), Some(b)) = (slot[t], slot[t + lag]) {
                sum += dist2(pts[a].pos(), pts[b].pos());
                count += 1;
            }
        }
        if count > 0 {
            out.push(MsdPoint {
                lag,
                msd_um2: sum / count as f64,
                count,
            });
        }
    }
    Ok(out)
}

/// Displacement-count-weighted average of per-track MSD curves.
pub fn ensemble_msd(tracks: &[Track], max_lag: usize) -> Result<Vec<MsdPoint>> {
    if tracks.is_empty() {
        return Err(PsfError::InvalidArgument("ensemble MSD needs at least one track".into()));
    }
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for t in tracks {
        for p in msd(t, max_lag)? {
            let e = acc.entry(p.lag).or_insert((0.0, 0));
            e.0 += p.msd_um2 * p.count as f64;
            e.1 += p.count;
        }
    }
    Ok(acc
        .into_iter()
        .map(|(lag, (s, c))| MsdPoint {
            lag,
            msd_um2: s / c as f64,
            count: c,
        })
        .collect())
}

/// Least-squares slope of MSD against lag through the origin, over lags
/// `1..=max_lag`.
pub fn msd_slope(curve: &[MsdPoint], max_lag: usize) -> f64 {
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for p in curve.iter().filter(|p| p.lag >= 1 && p.lag <= max_lag) {
        sxy += p.lag as f64 * p.msd_um2;
        sxx += (p.lag * p.lag) as f64;
    }
    sxy / sxx
}

/// 3D Brownian track of `n_frames` points starting at `start`, with
/// per-axis step variance `2·D·Δt`.
pub fn simulate_brownian(n_frames: usize, d_um2_per_frame: f64, start: [f64; 3], seed: u64) -> Result<Track> {
    if !(d_um2_per_frame >= 0.0) || n_frames == 0 {
        return Err(PsfError::InvalidArgument("need D >= 0 and at least one frame".into()));
    }
    let step = Normal::new(0.0, (2.0 * d_um2_per_frame).sqrt()).map_err(|e| PsfError::InvalidArgument(e.to_string()))?;
    let mut rng = stream_rng(seed, 0);
    let mut p = start;
    let points = (0..n_frames)
        .map(|f| {
            if f > 0 {
                for v in &mut p {
                    *v += step.sample(&mut rng);
                }
            }
            TrackPoint::new(f, p[0], p[1], p[2])
        })
        .collect();
    Ok(Track {
        id: 0,
        points,
        n_missing: 0,
    })
}

/// Synthetic nucleus: slowly diffusing emitters tethered to fixed anchor
/// points, observed with localization noise, missed detections and
/// uniformly scattered false positives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NucleusParams {
    pub n_emitters: usize,
    pub n_frames: usize,
    /// Semi-axes of the ellipsoid the anchors are drawn in.
    pub semi_axes_um: [f64; 3],
    pub min_separation_um: f64,
    pub d_um2_per_frame: f64,
    /// Spring constant pulling each emitter back to its anchor, per frame.
    pub tether: f64,
    pub sigma_xy_um: f64,
    pub sigma_z_um: f64,
    pub detection_prob: f64,
    /// False positives as a fraction of true localizations.
    pub false_rate: f64,
}

impl Default for NucleusParams {
    fn default() -> Self {
        Self {
            n_emitters: 61,
            n_frames: 500,
            semi_axes_um: [6.0, 5.0, 2.0],
            min_separation_um: 1.0,
            d_um2_per_frame: 2e-5,
            tether: 0.05,
            sigma_xy_um: 0.03,
            sigma_z_um: 0.05,
            detection_prob: 0.98,
            false_rate: 0.003,
        }
    }
}

/// Pooled localizations of a synthetic nucleus and the number of them that
/// are false positives (appended at the end).
pub fn simulate_nucleus(params: &NucleusParams, seed: u64) -> Result<(Vec<TrackPoint>, usize)> {
    let p = params;
    if p.semi_axes_um.iter().any(|a| !(*a > 0.0)) || !(0.0..=1.0).contains(&p.detection_prob) || p.false_rate < 0.0 {
        return Err(PsfError::InvalidArgument(format!("invalid nucleus parameters {p:?}")));
    }
    let mut rng = stream_rng(seed, 0);
    let mut anchors: Vec<[f64; 3]> = Vec::new();
    let mut tries = 0;
    while anchors.len() < p.n_emitters {
        tries += 1;
        if tries > 100_000 {
            return Err(PsfError::InvalidArgument("cannot place emitters at the requested separation".into()));
        }
        let u = [0, 1, 2].map(|_| rng.random_range(-1.0..1.0));
        if u.iter().map(|v| v * v).sum::<f64>() > 1.0 {
            continue;
        }
        let a = [0, 1, 2].map(|k| u[k] * p.semi_axes_um[k]);
        if anchors.iter().all(|b| dist2(a, *b) >= p.min_separation_um.powi(2)) {
            anchors.push(a);
        }
    }
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let step = (2.0 * p.d_um2_per_frame).sqrt();
    let mut out = Vec::new();
    for (k, a) in anchors.iter().enumerate() {
        let mut rng = stream_rng(seed, 1 + k as u64);
        let mut x = *a;
        for f in 0..p.n_frames {
            for i in 0..3 {
                x[i] += -p.tether * (x[i] - a[i]) + step * unit.sample(&mut rng);
            }
            if rng.random::<f64>() < p.detection_prob {
                out.push(TrackPoint::new(
                    f,
                    x[0] + p.sigma_xy_um * unit.sample(&mut rng),
                    x[1] + p.sigma_xy_um * unit.sample(&mut rng),
                    x[2] + p.sigma_z_um * unit.sample(&mut rng),
                ));
            }
        }
    }
    let n_false = (p.false_rate * out.len() as f64).round() as usize;
    let mut rng = stream_rng(seed, u64::MAX);
    for _ in 0..n_false {
        let f = rng.random_range(0..p.n_frames.max(1));
        let u = [0, 1, 2].map(|k| rng.random_range(-1.0..1.0) * p.semi_axes_um[k]);
        out.push(TrackPoint::new(f, u[0], u[1], u[2]));
    }
    Ok((out, n_false))
}
