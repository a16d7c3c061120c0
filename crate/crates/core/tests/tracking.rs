use proptest::prelude::*;
use psfforge_core::tracking::*;

#[test]
fn brownian_slope_is_six_d() {
    let d = 0.004;
    for seed in 0..4 {
        let tracks: Vec<Track> = (0..5)
            .map(|k| simulate_brownian(1000, d, [0.0; 3], seed * 100 + k).unwrap())
            .collect();
        let curve = ensemble_msd(&tracks, 10).unwrap();
        let slope = msd_slope(&curve, 10);
        assert!((slope / (6.0 * d) - 1.0).abs() < 0.15, "seed {seed}: slope {slope}");
    }
}

#[test]
fn single_long_track_also_recovers_the_slope() {
    let d = 0.01;
    let t = simulate_brownian(1000, d, [1.0, 2.0, 3.0], 42).unwrap();
    let slope = msd_slope(&msd(&t, 10).unwrap(), 10);
    assert!((slope / (6.0 * d) - 1.0).abs() < 0.15, "{slope}");
}

#[test]
fn mixed_population_lies_between_its_parts() {
    let slow: Vec<Track> = (0..3).map(|k| simulate_brownian(400, 0.001, [0.0; 3], k).unwrap()).collect();
    let fast: Vec<Track> = (0..3).map(|k| simulate_brownian(400, 0.01, [0.0; 3], 10 + k).unwrap()).collect();
    let both: Vec<Track> = slow.iter().chain(&fast).cloned().collect();
    let (s, f, m) = (
        ensemble_msd(&slow, 20).unwrap(),
        ensemble_msd(&fast, 20).unwrap(),
        ensemble_msd(&both, 20).unwrap(),
    );
    for k in 1..=20 {
        assert!(s[k].msd_um2 <= m[k].msd_um2 && m[k].msd_um2 <= f[k].msd_um2);
    }
}

#[test]
fn nucleus_clustering_drops_under_one_percent() {
    let (pts, n_false) = simulate_nucleus(&NucleusParams::default(), 7).unwrap();
    let res = link_dbscan(&pts, &LinkParams::default()).unwrap();
    assert_eq!(res.tracks.len(), 61);
    let frac = res.n_dropped() as f64 / pts.len() as f64;
    assert!(frac < 0.01, "dropped {} of {}", res.n_dropped(), pts.len());
    // only injected false positives are ever classified as noise
    let first_false = pts.len() - n_false;
    assert!(res.noise.iter().all(|&i| i >= first_false));
    assert!(res.noise.len() > n_false / 2);
    assert!(res.rejected.is_empty());
}

#[test]
fn dense_bridge_chains_two_blobs_into_one_cluster() {
    let mut pts = Vec::new();
    let mut f = 0;
    // 200 points every 0.05 um along x: each has ~11 neighbors within 0.25
    for k in 0..200 {
        pts.push(TrackPoint::new(f, k as f64 * 0.05, 0.0, 0.0));
        f += 1;
    }
    let labels = dbscan(&pts, 0.25, 10).unwrap();
    assert!(labels.iter().all(|l| *l == Some(0)));
    // a 1 um gap splits it
    for p in pts.iter_mut().skip(100) {
        p.x_um += 1.0;
    }
    let labels = dbscan(&pts, 0.25, 10).unwrap();
    assert_eq!(labels.iter().flatten().max(), Some(&1));
}

fn cloud() -> impl Strategy<Value = Vec<TrackPoint>> {
    prop::collection::vec(
        (0usize..50, 0usize..3, prop::array::uniform3(-0.3..0.3f64)),
        10..120,
    )
    .prop_map(|v| {
        v.into_iter()
            .map(|(f, c, d)| TrackPoint::new(f, 2.0 * c as f64 + d[0], d[1], d[2]))
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn labels_do_not_depend_on_input_order(pts in cloud(), perm_seed in any::<u64>(), min_pts in 1usize..8) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut order: Vec<usize> = (0..pts.len()).collect();
        order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed));
        let shuffled: Vec<TrackPoint> = order.iter().map(|&i| pts[i]).collect();
        let a = dbscan(&pts, 0.25, min_pts).unwrap();
        let b = dbscan(&shuffled, 0.25, min_pts).unwrap();
        for (k, &i) in order.iter().enumerate() {
            prop_assert_eq!(a[i], b[k]);
        }
        let la = link_dbscan(&pts, &LinkParams { min_pts, ..LinkParams::default() }).unwrap();
        let lb = link_dbscan(&shuffled, &LinkParams { min_pts, ..LinkParams::default() }).unwrap();
        prop_assert_eq!(la.tracks, lb.tracks);
    }

    #[test]
    fn msd_is_nonnegative_and_zero_at_lag_zero(seed in any::<u64>(), d in 0.0..0.05f64) {
        let t = simulate_brownian(50, d, [0.0; 3], seed).unwrap();
        let curve = msd(&t, 20).unwrap();
        prop_assert_eq!(curve[0].msd_um2, 0.0);
        prop_assert!(curve.iter().all(|p| p.msd_um2 >= 0.0));
    }

    #[test]
    fn tracks_have_strictly_increasing_frames(pts in cloud()) {
        let res = link_dbscan(&pts, &LinkParams { min_pts: 3, max_duplicate_rate: 1.0, ..LinkParams::default() }).unwrap();
        for t in &res.tracks {
            prop_assert!(t.points.windows(2).all(|w| w[0].frame < w[1].frame));
        }
        let kept: usize = res.tracks.iter().map(|t| t.points.len()).sum();
        prop_assert_eq!(kept + res.n_dropped(), pts.len());
    }
}
