use psfforge_core::crlb::seeded_pair;
use psfforge_core::eval::VoxelGrid;
use psfforge_core::localize::*;
use psfforge_core::noise::NoiseParams;
use psfforge_core::optics::{Emitter, Image, OpticalConfig, PhaseMask, PsfModel};
use psfforge_core::scene::{render_scene, BackgroundParams, ImagePair, Scene};

fn model() -> PsfModel {
    PsfModel::new(OpticalConfig::default(), 64, 1).unwrap()
}

/// Noiseless frame: expected counts plus background and camera baseline.
fn noiseless(model: &PsfModel, masks: (&PhaseMask, &PhaseMask), emitters: Vec<Emitter>, shape: (usize, usize)) -> ImagePair {
    let scene = Scene::new(emitters, BackgroundParams::constant(500.0), 0.5).unwrap();
    let mut pair = render_scene(model, masks.0, masks.1, &scene, shape, 63).unwrap();
    pair.ch1.pixels += 600.0;
    pair.ch2.pixels += 600.0;
    pair
}

fn grid(shape: [usize; 3]) -> RecoveryGrid {
    RecoveryGrid::new(
        VoxelGrid {
            shape,
            voxel_xy_um: 0.0275,
            voxel_z_um: 0.05,
            origin_um: [0.0; 3],
        },
        800.0,
    )
}

#[test]
fn bank_has_one_unit_template_per_knot() {
    let m = model();
    let z = PhaseMask::zeros(64);
    let bank = build_template_bank(&m, &z, &z, 0.5, [0.0, 4.0], 21).unwrap();
    assert_eq!(bank.z_knots.len(), 9);
    for ch in &bank.templates {
        assert_eq!(ch.len(), 9);
        for t in ch {
            let n: f64 = t.pixels.iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn in_focus_template_matches_a_rendered_emitter() {
    let m = model();
    let z = PhaseMask::zeros(64);
    let bank = build_template_bank(&m, &z, &z, 0.5, [0.0, 1.0], 21).unwrap();
    let img = m.psf(&z, &Emitter::on_axis(0.0, 5000.0), 21).unwrap();
    let norm = img.pixels.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dot: f64 = img.pixels.iter().zip(bank.templates[0][0].pixels.iter()).map(|(a, b)| a * b).sum();
    assert!(dot / norm > 0.99);
}

#[test]
fn blank_frames_give_an_empty_grid() {
    let m = model();
    let z = PhaseMask::zeros(64);
    let bank = build_template_bank(&m, &z, &z, 0.5, [0.0, 1.0], 21).unwrap();
    let blank = Image::zeros(30, 30, m.pitch_um());
    let pair = ImagePair::new(blank.clone(), blank).unwrap();
    let mut g = RecoveryGrid::for_canvas((30, 30), m.pitch_um(), [0.0, 1.0], 0.0275, 0.05, 800.0).unwrap();
    detect(&pair, &bank, &mut g).unwrap();
    assert!(g.values.iter().all(|v| *v == 0.0));
    assert!(grid_postprocess(&g, 80.0, 0.1, 0).unwrap().is_empty());
}

#[test]
fn bright_emitter_at_a_knot_peaks_within_one_voxel() {
    let m = model();
    let (a, b) = seeded_pair(&m, 1.0, 0.3, 7);
    let bank = build_template_bank(&m, &a, &b, 0.1, [0.0, 2.0], 21).unwrap();
    let p = m.pitch_um();
    let truth = [20.5 * p, 18.5 * p, 1.2];
    let pair = noiseless(&m, (&a, &b), vec![Emitter::new(truth[0], truth[1], truth[2], 15000.0)], (40, 40));
    let mut g = RecoveryGrid::for_canvas((40, 40), p, [0.0, 2.0], 0.0275, 0.05, 800.0).unwrap();
    detect(&pair, &bank, &mut g).unwrap();
    let (mut best, mut at) = (f32::MIN, (0, 0, 0));
    for (idx, v) in g.values.indexed_iter() {
        if *v > best {
            best = *v;
            at = idx;
        }
    }
    let c = g.geometry.center(at.0, at.1, at.2);
    assert!((c[0] - truth[0]).abs() <= 0.0275 && (c[1] - truth[1]).abs() <= 0.0275, "{c:?}");
    assert!((c[2] - truth[2]).abs() <= 0.05 + 1e-9, "{c:?}");
}

#[test]
fn emitters_two_microns_apart_give_two_maxima() {
    let m = model();
    let (a, b) = seeded_pair(&m, 1.0, 0.3, 7);
    let bank = build_template_bank(&m, &a, &b, 0.1, [0.0, 2.0], 21).unwrap();
    let p = m.pitch_um();
    let e = [Emitter::new(2.0, 3.0, 0.8, 15000.0), Emitter::new(4.0, 3.0, 1.4, 15000.0)];
    let pair = noiseless(&m, (&a, &b), e.to_vec(), (55, 55));
    let mut g = RecoveryGrid::for_canvas((55, 55), p, [0.0, 2.0], 0.0275, 0.05, 800.0).unwrap();
    detect(&pair, &bank, &mut g).unwrap();
    let locs = grid_postprocess(&g, 80.0, 0.1, 0).unwrap();
    for t in &e {
        assert!(locs.iter().any(|l| (l.x_um - t.x_um).hypot(l.y_um - t.y_um) < 0.1), "{t:?} {:?}", locs.iter().map(|l| (l.x_um, l.y_um, l.z_um, l.confidence)).collect::<Vec<_>>());
    }
}

#[test]
fn single_voxel_becomes_one_localization_at_its_center() {
    let mut g = grid([5, 20, 20]);
    g.values[[2, 7, 11]] = 800.0;
    let locs = grid_postprocess(&g, 80.0, 0.1, 3).unwrap();
    assert_eq!(locs.len(), 1);
    let c = g.geometry.center(2, 7, 11);
    assert_eq!(locs[0].position(), c);
    assert_eq!(locs[0].frame, 3);
    assert_eq!(locs[0].confidence, 800.0);
}

#[test]
fn sub_threshold_grid_is_empty() {
    let mut g = grid([4, 10, 10]);
    g.values.fill(79.0);
    assert!(grid_postprocess(&g, 80.0, 0.1, 0).unwrap().is_empty());
}

#[test]
fn nearby_weaker_maximum_is_absorbed() {
    let mut g = grid([3, 20, 20]);
    // 0.055 um apart laterally
    g.values[[1, 10, 10]] = 500.0;
    g.values[[1, 10, 12]] = 400.0;
    let locs = grid_postprocess(&g, 80.0, 0.1, 0).unwrap();
    assert_eq!(locs.len(), 1);
    assert_eq!(locs[0].confidence, 500.0);
}

#[test]
fn equal_maxima_keep_the_smaller_index() {
    let mut g = grid([3, 20, 20]);
    g.values[[1, 10, 10]] = 500.0;
    g.values[[1, 10, 11]] = 500.0;
    let locs = grid_postprocess(&g, 80.0, 0.1, 0).unwrap();
    assert_eq!(locs.len(), 1);
}

#[test]
fn postprocessing_is_idempotent() {
    let mut g = grid([6, 30, 30]);
    for (k, i, j, v) in [(1, 5, 5, 300.0), (4, 20, 8, 650.0), (2, 12, 25, 90.0)] {
        g.values[[k, i, j]] = v;
    }
    let first = grid_postprocess(&g, 80.0, 0.1, 0).unwrap();
    let mut again = grid([6, 30, 30]);
    for l in &first {
        let (k, i, j) = again.geometry.index_of(&l.position()).unwrap();
        again.values[[k, i, j]] = l.confidence as f32;
    }
    assert_eq!(grid_postprocess(&again, 80.0, 0.1, 0).unwrap(), first);
}

#[test]
fn detection_follows_a_one_pixel_shift() {
    let m = model();
    let (a, b) = seeded_pair(&m, 1.0, 0.3, 7);
    let bank = build_template_bank(&m, &a, &b, 0.1, [0.0, 2.0], 21).unwrap();
    let p = m.pitch_um();
    let run = |dx: f64| {
        let pair = noiseless(&m, (&a, &b), vec![Emitter::new(2.31 + dx, 2.47, 0.93, 15000.0)], (45, 45));
        let mut g = RecoveryGrid::for_canvas((45, 45), p, [0.0, 2.0], 0.0275, 0.05, 800.0).unwrap();
        detect(&pair, &bank, &mut g).unwrap();
        grid_postprocess(&g, 80.0, 0.1, 0).unwrap()
    };
    // away from the mirrored border
    let side = 45.0 * p;
    let interior = |v: &Vec<Localization>, dx: f64| -> Vec<Localization> {
        v.iter()
            .filter(|l| l.x_um - dx > 1.2 && l.x_um - dx < side - p - 1.2 && l.y_um > 1.2 && l.y_um < side - 1.2)
            .copied()
            .collect()
    };
    let (l0, l1) = (interior(&run(0.0), 0.0), interior(&run(p), p));
    assert!(!l0.is_empty());
    assert_eq!(l0.len(), l1.len());
    for (u, v) in l0.iter().zip(&l1) {
        assert!((v.x_um - u.x_um - p).abs() < 1e-6 && (v.y_um - u.y_um).abs() < 1e-6 && (v.z_um - u.z_um).abs() < 1e-6);
    }
}

#[test]
fn refinement_stays_at_the_truth_on_noiseless_data() {
    let m = model();
    let (a, b) = seeded_pair(&m, 1.0, 0.3, 7);
    let truth = Emitter::new(2.013, 1.987, 1.1, 15000.0);
    let pair = noiseless(&m, (&a, &b), vec![truth], (36, 36));
    let cand = Localization {
        frame: 0,
        x_um: truth.x_um,
        y_um: truth.y_um,
        z_um: truth.z_um,
        photons: None,
        confidence: 500.0,
    };
    let noise = NoiseParams::default();
    let opts = RefineOptions {
        z_range_um: [0.0, 2.0],
        ..RefineOptions::default()
    };
    let r = refine_mle(&pair, &[cand], &m, (&a, &b), &noise, &opts).unwrap();
    let l = r[0].loc;
    let moved = ((l.x_um - truth.x_um).powi(2) + (l.y_um - truth.y_um).powi(2) + (l.z_um - truth.z_um).powi(2)).sqrt();
    assert!(moved < 1e-3, "{moved}");
    assert!(r[0].final_log_likelihood >= r[0].initial_log_likelihood);
    assert!((l.photons.unwrap() - 15000.0).abs() < 15.0);
}

#[test]
fn refinement_raises_the_likelihood_and_zero_iterations_change_nothing() {
    let m = model();
    let (a, b) = seeded_pair(&m, 1.0, 0.3, 7);
    let truth = Emitter::new(2.0, 2.0, 0.7, 15000.0);
    let pair = noiseless(&m, (&a, &b), vec![truth], (36, 36));
    let cand = Localization {
        frame: 0,
        x_um: 2.04,
        y_um: 1.97,
        z_um: 0.8,
        photons: None,
        confidence: 300.0,
    };
    let noise = NoiseParams::default();
    let opts = RefineOptions {
        z_range_um: [0.0, 2.0],
        ..RefineOptions::default()
    };
    let r = refine_mle(&pair, &[cand], &m, (&a, &b), &noise, &opts).unwrap()[0];
    assert!(r.final_log_likelihood > r.initial_log_likelihood);
    assert!((r.loc.x_um - 2.0).abs() < 0.005 && (r.loc.z_um - 0.7).abs() < 0.01);
    let none = RefineOptions { max_iter: 0, ..opts };
    let r0 = refine_mle(&pair, &[cand], &m, (&a, &b), &noise, &none).unwrap()[0];
    assert_eq!(r0.loc.position(), cand.position());
}

#[test]
fn pruning_drops_a_duplicate_of_an_explained_emitter() {
    let m = model();
    let (a, b) = seeded_pair(&m, 1.0, 0.3, 7);
    let truth = Emitter::new(2.0, 2.0, 0.7, 15000.0);
    let pair = noiseless(&m, (&a, &b), vec![truth], (36, 36));
    let loc = Localization {
        frame: 0,
        x_um: 2.0,
        y_um: 2.0,
        z_um: 0.7,
        photons: Some(15000.0),
        confidence: 400.0,
    };
    let r = Refinement {
        loc,
        initial_log_likelihood: 0.0,
        final_log_likelihood: 0.0,
        background: [500.0, 500.0],
        iterations: 1,
        diverged: false,
    };
    let dup = Refinement {
        loc: Localization { x_um: 2.01, ..loc },
        ..r
    };
    let kept = prune_explained(&pair, &[r, dup], &m, (&a, &b), &NoiseParams::default(), &RefineOptions::default(), 25.0).unwrap();
    assert_eq!(kept.len(), 1);
    assert_eq!(kept[0].x_um, 2.0);
}

#[test]
fn unregistered_pairs_are_rejected() {
    let m = model();
    let z = PhaseMask::zeros(64);
    let bank = build_template_bank(&m, &z, &z, 0.5, [0.0, 1.0], 21).unwrap();
    let blank = Image::zeros(30, 30, m.pitch_um());
    let mut pair = ImagePair::new(blank.clone(), blank).unwrap();
    pair.transform = Some(psfforge_core::calibration::AffineTransform::identity());
    let mut g = RecoveryGrid::for_canvas((30, 30), m.pitch_um(), [0.0, 1.0], 0.0275, 0.05, 800.0).unwrap();
    assert!(detect(&pair, &bank, &mut g).is_err());
}
