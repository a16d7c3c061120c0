//! Subcommand implementations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use psfforge_core::calibration::{estimate_affine_ransac, warp_image, AffineTransform};
use psfforge_core::crlb::{crlb_curve, optimize_pair, seeded_pair, CrlbRow, FisherMatrix};
use psfforge_core::edof::{design_edof, encircled_energy_gain};
use psfforge_core::eval::{match_hungarian, Point3};
use psfforge_core::io::{self, MaskMeta};
use psfforge_core::localize::{build_template_bank, localize_frame, BankSpec, Localization, TemplateBank};
use psfforge_core::optics::{Image, PhaseMask, PsfModel};
use psfforge_core::rng::derive_seed;
use psfforge_core::scene::{generate_dataset, DatasetManifest, DatasetSpec, ImagePair, Label};
use psfforge_core::tracking::{ensemble_msd, link_dbscan, msd, msd_slope, simulate_nucleus, Track, TrackPoint};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::sweep::{density_point, Score, SweepSetup};
use crate::{CliError, Command, Run, Tagged};

/// Masks and bank parameters for the localizer, written by
/// `design-crlb-pair`. Mask paths are relative to the bank file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankFile {
    pub mask1: String,
    pub mask2: String,
    pub mask1_sha256: String,
    pub mask2_sha256: String,
    pub spec: BankSpec,
}

pub fn execute(cmd: &Command, cfg: &RunConfig, run: &mut Run) -> Result<(), CliError> {
    let model = cfg.model()?;
    match cmd {
        Command::DesignEdof { .. } => design_edof_cmd(cfg, &model, run),
        Command::DesignCrlbPair { mask1, mask2, .. } => {
            let init = match (mask1, mask2) {
                (Some(a), Some(b)) => Some((load_mask(run, cfg, a)?, load_mask(run, cfg, b)?)),
                _ => None,
            };
            design_pair_cmd(cfg, &model, init, run)
        }
        Command::Crlb { mask1, mask2, .. } => {
            let (a, b) = match (mask1, mask2) {
                (Some(a), Some(b)) => (load_mask(run, cfg, a)?, load_mask(run, cfg, b)?),
                _ => (PhaseMask::zeros(cfg.grid.n), PhaseMask::zeros(cfg.grid.n)),
            };
            let rows = crlb_curve(&model, &a, &b, &cfg.eval).tag("crlb-engine")?;
            run.csv("crlb.csv", CRLB_HEADER, &crlb_rows(&rows))
        }
        Command::Simulate { mask1, mask2, .. } => {
            let a = load_mask(run, cfg, mask1)?;
            let b = load_mask(run, cfg, mask2)?;
            simulate_cmd(cfg, &model, (&a, &b), run)
        }
        Command::Localize {
            pair,
            dataset,
            bank,
            mask1,
            mask2,
        } => {
            let (a, b, spec) = masks_and_bank(run, cfg, bank, mask1, mask2, "localize")?;
            let frames = match dataset {
                Some(dir) => dataset_frames(run, dir)?,
                None if pair.is_empty() => {
                    return Err(CliError::Config("localize needs --pair or --dataset".into()));
                }
                None => pair.chunks(2).map(|c| (c[0].clone(), c[1].clone())).collect(),
            };
            localize_cmd(cfg, &model, (&a, &b), &spec, &frames, run)
        }
        Command::Evaluate { pred, gt, .. } => evaluate_cmd(cfg, pred, gt, run),
        Command::Register { locs1, locs2 } => register_cmd(cfg, locs1, locs2, run),
        Command::Warp { image, transform } => warp_cmd(image, transform, run),
        Command::Track { locs, .. } => track_cmd(cfg, locs.as_deref(), run),
        Command::Msd { tracks } => msd_cmd(cfg, tracks, run),
        Command::SweepDensity { bank, mask1, mask2, .. } => {
            let (a, b, spec) = masks_and_bank(run, cfg, bank, mask1, mask2, "sweep-density")?;
            sweep_cmd(cfg, &model, (&a, &b), &spec, run)
        }
    }
}

fn load_mask(run: &mut Run, cfg: &RunConfig, path: &Path) -> Result<PhaseMask, CliError> {
    run.input(path)?;
    let (mask, meta) = io::read_mask(path).tag("io")?;
    if !meta.compatible(&cfg.optical, cfg.grid.n) {
        return Err(CliError::Runtime {
            module: "optics-core",
            message: format!("mask {} was made for different optics or grid: {meta:?}", path.display()),
        });
    }
    Ok(mask)
}

fn mask_meta(cfg: &RunConfig) -> MaskMeta {
    MaskMeta::new(&cfg.optical, cfg.grid.n, cfg.grid.fft_pad)
}

fn write_mask(run: &mut Run, cfg: &RunConfig, name: &str, mask: &PhaseMask) -> Result<(), CliError> {
    io::write_mask(&run.path(name), mask, &mask_meta(cfg)).tag("io")?;
    run.output_array(name)
}

fn write_image(run: &mut Run, name: &str, img: &Image) -> Result<(), CliError> {
    io::write_image(&run.path(name), img).tag("io")?;
    run.output_array(name)
}

fn masks_and_bank(
    run: &mut Run,
    cfg: &RunConfig,
    bank: &Option<PathBuf>,
    mask1: &Option<PathBuf>,
    mask2: &Option<PathBuf>,
    who: &str,
) -> Result<(PhaseMask, PhaseMask, BankSpec), CliError> {
    match (bank, mask1, mask2) {
        (Some(path), _, _) => {
            run.input(path)?;
            let file: BankFile = io::load_json(path).tag("io")?;
            let dir = path.parent().unwrap_or(Path::new("."));
            let mut load = |name: &str, sha: &str| -> Result<PhaseMask, CliError> {
                let p = dir.join(name);
                let mask = load_mask(run, cfg, &p)?;
                if io::sha256_file(&p).tag("io")? != sha {
                    return Err(CliError::Runtime {
                        module: "localize-baseline",
                        message: format!("{} does not match the checksum in the bank file", p.display()),
                    });
                }
                Ok(mask)
            };
            let a = load(&file.mask1, &file.mask1_sha256)?;
            let b = load(&file.mask2, &file.mask2_sha256)?;
            Ok((a, b, file.spec))
        }
        (None, Some(a), Some(b)) => Ok((load_mask(run, cfg, a)?, load_mask(run, cfg, b)?, cfg.localize.bank)),
        _ => Err(CliError::Config(format!("{who} needs --bank or --mask1/--mask2"))),
    }
}

fn bank(model: &PsfModel, masks: (&PhaseMask, &PhaseMask), spec: &BankSpec) -> Result<TemplateBank, CliError> {
    build_template_bank(model, masks.0, masks.1, spec.z_step_um, spec.z_range_um, spec.window_px).tag("localize-baseline")
}

#[derive(Serialize)]
struct TraceRow {
    iteration: usize,
    loss: f64,
    best_loss: f64,
}

#[derive(Serialize)]
struct GainRow {
    z_um: f64,
    ee_mask: f64,
    ee_zero: f64,
    ratio: f64,
}

fn design_edof_cmd(cfg: &RunConfig, model: &PsfModel, run: &mut Run) -> Result<(), CliError> {
    let e = &cfg.edof;
    let window = e.window_px.unwrap_or(model.max_window());
    let d = design_edof(model, e.range_um, window, &e.options).tag("edof-designer")?;
    write_mask(run, cfg, "mask.f32", &d.mask)?;
    let trace: Vec<TraceRow> = d
        .checkpoints
        .iter()
        .map(|c| TraceRow {
            iteration: c.iteration,
            loss: c.loss,
            best_loss: c.best_loss,
        })
        .collect();
    run.csv("loss_trace.csv", &["iteration", "loss", "best_loss"], &trace)?;
    let depths = psfforge_core::crlb::CrlbEvalSpec::grid(0.0, e.range_um, e.ee_depth_step_um);
    let gain = encircled_energy_gain(model, &d.mask, &depths, e.ee_radius_um, window).tag("edof-designer")?;
    let rows: Vec<GainRow> = gain
        .into_iter()
        .map(|(z, a, b)| GainRow {
            z_um: z,
            ee_mask: a,
            ee_zero: b,
            ratio: a / b,
        })
        .collect();
    run.csv("ee_gain.csv", &["z_um", "ee_mask", "ee_zero", "ratio"], &rows)?;
    run.json(
        "summary.json",
        &serde_json::json!({
            "iterations_run": d.iterations_run,
            "stagnated": d.stagnated,
            "initial_loss": d.initial_loss(),
            "best_loss": d.best_loss(),
            "window_px": window,
        }),
    )
}

#[derive(Serialize)]
struct ObjectiveRow {
    iteration: usize,
    objective: f64,
    best_objective: f64,
}

fn design_pair_cmd(
    cfg: &RunConfig,
    model: &PsfModel,
    init: Option<(PhaseMask, PhaseMask)>,
    run: &mut Run,
) -> Result<(), CliError> {
    let p = &cfg.pair;
    let (a, b) = init.unwrap_or_else(|| seeded_pair(model, p.init_astigmatism_rad, p.init_noise_rad, cfg.seed));
    let d = optimize_pair(model, &a, &b, &cfg.eval, &p.options).tag("crlb-engine")?;
    write_mask(run, cfg, "mask1.f32", &d.mask1)?;
    write_mask(run, cfg, "mask2.f32", &d.mask2)?;
    let trace: Vec<ObjectiveRow> = d
        .trace
        .iter()
        .zip(d.best_so_far())
        .enumerate()
        .map(|(i, (v, b))| ObjectiveRow {
            iteration: i,
            objective: *v,
            best_objective: b,
        })
        .collect();
    run.csv("trace.csv", &["iteration", "objective", "best_objective"], &trace)?;
    let rows = crlb_curve(model, &d.mask1, &d.mask2, &cfg.eval).tag("crlb-engine")?;
    run.csv("crlb.csv", CRLB_HEADER, &crlb_rows(&rows))?;
    let bank = BankFile {
        mask1: "mask1.f32".into(),
        mask2: "mask2.f32".into(),
        mask1_sha256: io::sha256_file(&run.path("mask1.f32")).tag("io")?,
        mask2_sha256: io::sha256_file(&run.path("mask2.f32")).tag("io")?,
        spec: cfg.localize.bank,
    };
    run.json("bank.json", &bank)?;
    run.json(
        "summary.json",
        &serde_json::json!({
            "initial_objective": d.initial_objective(),
            "best_objective": d.best_objective(),
            "best_iteration": d.best_iteration,
            "relative_reduction": 1.0 - d.best_objective() / d.initial_objective(),
        }),
    )
}

const CRLB_HEADER: &[&str] = &["z_um", "channel", "sigma_x_um", "sigma_y_um", "sigma_z_um", "status"];

#[derive(Serialize)]
struct CrlbCsvRow {
    z_um: f64,
    channel: &'static str,
    sigma_x_um: Option<f64>,
    sigma_y_um: Option<f64>,
    sigma_z_um: Option<f64>,
    status: String,
}

/// Lateral bounds from the (x, y) block alone, for depths where z is not
/// identifiable.
fn lateral_only(f: &FisherMatrix) -> Option<(f64, f64)> {
    let (a, b, d) = (f.m[0][0], f.m[0][1], f.m[1][1]);
    let det = a * d - b * b;
    (a > 0.0 && d > 0.0 && det > 1e-12 * a * d).then(|| ((d / det).sqrt(), (a / det).sqrt()))
}

fn crlb_rows(rows: &[CrlbRow]) -> Vec<CrlbCsvRow> {
    let mut out = Vec::new();
    for r in rows {
        let chans = [("ch1", &r.ch1), ("ch2", &r.ch2), ("joint", &r.joint)];
        for (k, (name, res)) in chans.into_iter().enumerate() {
            out.push(match res {
                Ok(t) => CrlbCsvRow {
                    z_um: r.z_um,
                    channel: name,
                    sigma_x_um: Some(t.sigma_x),
                    sigma_y_um: Some(t.sigma_y),
                    sigma_z_um: Some(t.sigma_z),
                    status: "ok".into(),
                },
                Err(msg) => {
                    let lat = lateral_only(&r.fisher[k]);
                    CrlbCsvRow {
                        z_um: r.z_um,
                        channel: name,
                        sigma_x_um: lat.map(|l| l.0),
                        sigma_y_um: lat.map(|l| l.1),
                        sigma_z_um: None,
                        status: msg.clone(),
                    }
                }
            });
        }
    }
    out
}

fn simulate_cmd(cfg: &RunConfig, model: &PsfModel, masks: (&PhaseMask, &PhaseMask), run: &mut Run) -> Result<(), CliError> {
    let spec = DatasetSpec {
        n_examples: cfg.dataset.n_examples,
        window_px: cfg.grid.window_px,
        seed: cfg.seed,
        train_fraction: cfg.dataset.train_fraction,
    };
    let dir = run.path("dataset");
    let man = generate_dataset(model, masks, &cfg.scene, &cfg.noise, &spec, &dir).tag("scene-sim")?;
    for f in &man.files {
        run.output(&format!("dataset/{}", f.path))?;
        if f.path.ends_with(".f32") {
            run.output(&format!("dataset/{}.json", f.path))?;
        }
    }
    run.output("dataset/manifest.json")
}

fn dataset_frames(run: &mut Run, dir: &Path) -> Result<Vec<(PathBuf, PathBuf)>, CliError> {
    let path = dir.join("manifest.json");
    run.input(&path)?;
    let man: DatasetManifest = io::load_json(&path).tag("io")?;
    Ok((0..man.n_examples)
        .map(|i| {
            (
                dir.join(format!("example_{i:05}_ch1.f32")),
                dir.join(format!("example_{i:05}_ch2.f32")),
            )
        })
        .collect())
}

const LOCS_HEADER: &[&str] = &["frame", "x_um", "y_um", "z_um", "photons", "confidence"];

fn localize_cmd(
    cfg: &RunConfig,
    model: &PsfModel,
    masks: (&PhaseMask, &PhaseMask),
    spec: &BankSpec,
    frames: &[(PathBuf, PathBuf)],
    run: &mut Run,
) -> Result<(), CliError> {
    let bank = bank(model, masks, spec)?;
    let params = psfforge_core::localize::LocalizeParams { bank: *spec, ..cfg.localize };
    let mut locs: Vec<Localization> = Vec::new();
    for (k, (p1, p2)) in frames.iter().enumerate() {
        run.input(p1)?;
        run.input(p2)?;
        let ch1 = io::read_image(p1).tag("io")?;
        let ch2 = io::read_image(p2).tag("io")?;
        let pair = ImagePair::new(ch1, ch2).tag("localize-baseline")?;
        log::info!("localizing frame {k}");
        let found = localize_frame(&pair, &bank, model, masks, &cfg.noise, &params, k).tag("localize-baseline")?;
        locs.extend(found);
    }
    run.csv("locs.csv", LOCS_HEADER, &locs)
}

#[derive(Deserialize)]
struct PredRow {
    frame: usize,
    x_um: f64,
    y_um: f64,
    z_um: f64,
}

#[derive(Serialize)]
struct MatchRow {
    frame: usize,
    pred_row: usize,
    gt_row: usize,
    distance_nm: f64,
    lateral_nm: f64,
    axial_nm: f64,
}

fn evaluate_cmd(cfg: &RunConfig, pred: &Path, gt: &Path, run: &mut Run) -> Result<(), CliError> {
    run.input(pred)?;
    run.input(gt)?;
    let pred: Vec<PredRow> = io::read_csv(pred).tag("io")?;
    let gt: Vec<Label> = io::read_csv(gt).tag("io")?;
    // frame -> (prediction rows, truth rows)
    let mut frames: BTreeMap<usize, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, p) in pred.iter().enumerate() {
        frames.entry(p.frame).or_default().0.push(i);
    }
    for (i, g) in gt.iter().enumerate() {
        frames.entry(g.example_id).or_default().1.push(i);
    }
    let thr = cfg.matching.threshold_um;
    let mut score = Score::default();
    let mut matches = Vec::new();
    for (frame, (pi, gi)) in &frames {
        let pp: Vec<Point3> = pi.iter().map(|&i| [pred[i].x_um, pred[i].y_um, pred[i].z_um]).collect();
        let gp: Vec<Point3> = gi.iter().map(|&i| [gt[i].x_um, gt[i].y_um, gt[i].z_um]).collect();
        score.add_frame(&pp, &gp, thr).tag("eval-match")?;
        let m = match_hungarian(&pp, &gp, thr).tag("eval-match")?;
        matches.extend(m.pairs.iter().map(|p| MatchRow {
            frame: *frame,
            pred_row: pi[p.pred],
            gt_row: gi[p.gt],
            distance_nm: 1e3 * p.distance_um,
            lateral_nm: 1e3 * p.lateral_um,
            axial_nm: 1e3 * p.axial_um,
        }));
    }
    run.csv(
        "matches.csv",
        &["frame", "pred_row", "gt_row", "distance_nm", "lateral_nm", "axial_nm"],
        &matches,
    )?;
    let rmse = score.rmse_nm();
    run.json(
        "metrics.json",
        &serde_json::json!({
            "threshold_nm": 1e3 * thr,
            "n_frames": frames.len(),
            "n_tp": score.n_tp,
            "n_fp": score.n_fp,
            "n_fn": score.n_fn,
            "jaccard": score.jaccard(),
            "rmse_lateral_nm": rmse.map(|r| r.0),
            "rmse_axial_nm": rmse.map(|r| r.1),
        }),
    )
}

#[derive(Deserialize)]
struct XyRow {
    x_um: f64,
    y_um: f64,
}

#[derive(Serialize)]
struct TransformFile {
    a: [[f64; 2]; 2],
    t: [f64; 2],
    inliers: usize,
    rms_um: f64,
}

fn register_cmd(cfg: &RunConfig, locs1: &Path, locs2: &Path, run: &mut Run) -> Result<(), CliError> {
    run.input(locs1)?;
    run.input(locs2)?;
    let read = |p: &Path| -> Result<Vec<[f64; 2]>, CliError> {
        Ok(io::read_csv::<XyRow>(p).tag("io")?.iter().map(|r| [r.x_um, r.y_um]).collect())
    };
    let (p1, p2) = (read(locs1)?, read(locs2)?);
    let fit = estimate_affine_ransac(&p1, &p2, &cfg.ransac).tag("calibration")?;
    let flags: Vec<(usize, bool)> = fit.inliers.iter().copied().enumerate().collect();
    run.csv("inliers.csv", &["row", "inlier"], &flags)?;
    run.json(
        "transform.json",
        &TransformFile {
            a: fit.transform.a,
            t: fit.transform.t,
            inliers: fit.inliers.iter().filter(|b| **b).count(),
            rms_um: fit.rms_um,
        },
    )
}

fn warp_cmd(image: &Path, transform: &Path, run: &mut Run) -> Result<(), CliError> {
    run.input(image)?;
    run.input(transform)?;
    let img = io::read_image(image).tag("io")?;
    let tf: AffineTransform = io::load_json(transform).tag("io")?;
    let w = warp_image(&img, &tf).tag("calibration")?;
    write_image(run, "warped.f32", &w.image)?;
    let valid = Image {
        pixels: w.valid.mapv(|v| if v { 1.0 } else { 0.0 }),
        pitch_um: img.pitch_um,
    };
    write_image(run, "valid.f32", &valid)
}

#[derive(Serialize, Deserialize)]
struct TrackRow {
    track_id: usize,
    frame: usize,
    x_um: f64,
    y_um: f64,
    z_um: f64,
}

const POINT_HEADER: &[&str] = &["frame", "x_um", "y_um", "z_um"];

fn track_cmd(cfg: &RunConfig, locs: Option<&Path>, run: &mut Run) -> Result<(), CliError> {
    let pts: Vec<TrackPoint> = match locs {
        Some(p) => {
            run.input(p)?;
            io::read_csv(p).tag("io")?
        }
        None => {
            let (pts, _) = simulate_nucleus(&cfg.tracking.nucleus, cfg.seed).tag("tracking")?;
            run.csv("input_locs.csv", POINT_HEADER, &pts)?;
            pts
        }
    };
    let res = link_dbscan(&pts, &cfg.tracking.link).tag("tracking")?;
    let rows: Vec<TrackRow> = res
        .tracks
        .iter()
        .flat_map(|t| {
            t.points.iter().map(move |p| TrackRow {
                track_id: t.id,
                frame: p.frame,
                x_um: p.x_um,
                y_um: p.y_um,
                z_um: p.z_um,
            })
        })
        .collect();
    run.csv("tracks.csv", &["track_id", "frame", "x_um", "y_um", "z_um"], &rows)?;
    let noise: Vec<TrackPoint> = res.noise.iter().map(|&i| pts[i]).collect();
    run.csv("noise.csv", POINT_HEADER, &noise)?;
    run.json(
        "summary.json",
        &serde_json::json!({
            "n_input": pts.len(),
            "n_tracks": res.tracks.len(),
            "n_noise": res.noise.len(),
            "n_duplicates": res.duplicates.len(),
            "n_rejected_clusters": res.rejected.len(),
            "n_dropped": res.n_dropped(),
            "dropped_fraction": if pts.is_empty() { 0.0 } else { res.n_dropped() as f64 / pts.len() as f64 },
        }),
    )
}

#[derive(Serialize)]
struct MsdRow {
    track_id: String,
    lag: usize,
    msd_um2: f64,
}

fn msd_cmd(cfg: &RunConfig, tracks: &Path, run: &mut Run) -> Result<(), CliError> {
    run.input(tracks)?;
    let rows: Vec<TrackRow> = io::read_csv(tracks).tag("io")?;
    let mut by_id: BTreeMap<usize, Vec<TrackPoint>> = BTreeMap::new();
    for r in rows {
        by_id
            .entry(r.track_id)
            .or_default()
            .push(TrackPoint::new(r.frame, r.x_um, r.y_um, r.z_um));
    }
    let tracks: Vec<Track> = by_id
        .into_iter()
        .map(|(id, mut points)| {
            points.sort_by_key(|p| p.frame);
            let span = points.last().map_or(0, |l| l.frame - points[0].frame + 1);
            Track {
                id,
                n_missing: span - points.len(),
                points,
            }
        })
        .collect();
    let max_lag = cfg.tracking.max_lag;
    let mut out = Vec::new();
    for t in &tracks {
        for p in msd(t, max_lag).tag("tracking")? {
            out.push(MsdRow {
                track_id: t.id.to_string(),
                lag: p.lag,
                msd_um2: p.msd_um2,
            });
        }
    }
    let ens = ensemble_msd(&tracks, max_lag).tag("tracking")?;
    out.extend(ens.iter().map(|p| MsdRow {
        track_id: "ensemble".into(),
        lag: p.lag,
        msd_um2: p.msd_um2,
    }));
    run.csv("msd.csv", &["track_id", "lag", "msd_um2"], &out)?;
    let slope = msd_slope(&ens, max_lag);
    run.json(
        "msd_fit.json",
        &serde_json::json!({
            "max_lag": max_lag,
            "ensemble_slope_um2_per_frame": slope,
            "diffusion_um2_per_frame": slope / 6.0,
        }),
    )
}

fn sweep_cmd(
    cfg: &RunConfig,
    model: &PsfModel,
    masks: (&PhaseMask, &PhaseMask),
    spec: &BankSpec,
    run: &mut Run,
) -> Result<(), CliError> {
    let bank = bank(model, masks, spec)?;
    let setup = SweepSetup {
        model,
        masks,
        bank: &bank,
        scene: cfg.scene,
        noise: cfg.noise,
        localize: psfforge_core::localize::LocalizeParams { bank: *spec, ..cfg.localize },
        window_px: cfg.grid.window_px,
        threshold_um: cfg.matching.threshold_um,
    };
    let mut rows = Vec::new();
    for (k, &d) in cfg.sweep.densities_per_um2.iter().enumerate() {
        log::info!("density {d} per um2");
        rows.push(density_point(&setup, d, cfg.sweep.n_images, derive_seed(cfg.seed, k as u64)).tag("localize-baseline")?);
    }
    run.csv(
        "sweep.csv",
        &[
            "density_per_um2",
            "n_images",
            "n_emitters",
            "n_tp",
            "n_fp",
            "n_fn",
            "jaccard",
            "rmse_lateral_nm",
            "rmse_axial_nm",
        ],
        &rows,
    )
}
