use ndarray::Array2;
use psfforge_core::crlb::{crlb_objective_gradient, crlb_objective_regularized, seeded_pair, CrlbEvalSpec};
use psfforge_core::edof::{build_edof_target, edof_loss, edof_loss_gradient, TargetParams};
use psfforge_core::optics::{OpticalConfig, PhaseMask, PsfModel};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn aperture_pixels(model: &PsfModel, count: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut px: Vec<(usize, usize)> =
        model.grid().aperture.indexed_iter().filter(|(_, a)| **a).map(|(i, _)| i).collect();
    px.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    px.truncate(count);
    px
}

fn with(mask: &PhaseMask, idx: (usize, usize), delta: f64) -> PhaseMask {
    let mut v = mask.values.clone();
    v[idx] += delta;
    PhaseMask::new(v).unwrap()
}

fn random_mask(n: usize, seed: u64) -> PhaseMask {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PhaseMask::new(Array2::from_shape_fn((n, n), |_| rng.random_range(-1.0..1.0))).unwrap()
}

#[test]
fn edof_gradient_matches_central_differences() {
    let model = PsfModel::new(OpticalConfig::default(), 64, 1).unwrap();
    let target = build_edof_target(&model, 4.0, &TargetParams::default(), 63).unwrap();
    let zs = [0.3, 1.7, 3.9];
    for mask in [PhaseMask::zeros(64), random_mask(64, 9)] {
        let grad = edof_loss_gradient(&model, &mask, &target, &zs).unwrap();
        let h = 1e-5;
        for idx in aperture_pixels(&model, 30, 1) {
            let fd = (edof_loss(&model, &with(&mask, idx, h), &target, &zs).unwrap()
                - edof_loss(&model, &with(&mask, idx, -h), &target, &zs).unwrap())
                / (2.0 * h);
            let diff = (grad[idx] - fd).abs();
            assert!(diff < 1e-6 || diff / fd.abs() < 1e-4, "pixel {idx:?}: {} vs {fd}", grad[idx]);
        }
    }
}

#[test]
fn crlb_gradient_matches_central_differences() {
    let model = PsfModel::new(OpticalConfig::default(), 64, 1).unwrap();
    let spec = CrlbEvalSpec::over_range(0.0, 2.0);
    let (m1, m2) = seeded_pair(&model, 1.0, 0.3, 7);
    let (_, grads) = crlb_objective_gradient(&model, &m1, &m2, &spec, 1e-9).unwrap();
    let h = 1e-4;
    for (ch, idx) in aperture_pixels(&model, 30, 2).into_iter().enumerate().map(|(k, i)| (k % 2, i)) {
        let f = |d: f64| {
            let (a, b) = if ch == 0 { (with(&m1, idx, d), m2.clone()) } else { (m1.clone(), with(&m2, idx, d)) };
            crlb_objective_regularized(&model, &a, &b, &spec, 1e-9).unwrap()
        };
        let fd = (f(h) - f(-h)) / (2.0 * h);
        let g = grads[ch][idx];
        assert!((g - fd).abs() <= 1e-3 * fd.abs(), "channel {ch} pixel {idx:?}: {g} vs {fd}");
    }
}

#[test]
fn edof_gradient_vanishes_outside_aperture_and_is_linear_in_slices() {
    let model = PsfModel::new(OpticalConfig::default(), 64, 1).unwrap();
    let target = build_edof_target(&model, 4.0, &TargetParams::default(), 63).unwrap();
    let mask = random_mask(64, 3);
    let g1 = edof_loss_gradient(&model, &mask, &target, &[0.4]).unwrap();
    let g2 = edof_loss_gradient(&model, &mask, &target, &[2.2]).unwrap();
    let g12 = edof_loss_gradient(&model, &mask, &target, &[0.4, 2.2]).unwrap();
    for ((idx, &inside), &g) in model.grid().aperture.indexed_iter().zip(g12.iter()) {
        if !inside {
            assert_eq!(g, 0.0);
        }
        assert!((g - g1[idx] - g2[idx]).abs() <= 1e-9 * (1.0 + g.abs()));
    }
}
