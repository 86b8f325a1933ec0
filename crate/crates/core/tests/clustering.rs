use std::collections::HashSet;
use std::sync::Arc;

use orewatch::cluster::{extract_confident, kmeans, kmeans_cube, split_train_val, ClusterModel, KMeansConfig};
use orewatch::spectral::{HyperspectralCube, WavelengthGrid};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn brute_force_inertia(points: &[f32], dim: usize, k: usize) -> f64 {
    let n = points.len() / dim;
    let mut best = f64::INFINITY;
    for code in 0..k.pow(n as u32) {
        let assign: Vec<usize> = (0..n).map(|i| code / k.pow(i as u32) % k).collect();
        if (0..k).any(|c| !assign.contains(&c)) {
            continue;
        }
        let mut total = 0.0;
        for c in 0..k {
            let members: Vec<usize> = (0..n).filter(|&i| assign[i] == c).collect();
            for j in 0..dim {
                let mean = members.iter().map(|&i| points[i * dim + j] as f64).sum::<f64>() / members.len() as f64;
                total += members.iter().map(|&i| (points[i * dim + j] as f64 - mean).powi(2)).sum::<f64>();
            }
        }
        best = best.min(total);
    }
    best
}

fn points_strategy() -> impl Strategy<Value = (Vec<f32>, usize, usize)> {
    (1usize..4, 2usize..40).prop_flat_map(|(dim, n)| {
        (
            proptest::collection::vec(-10.0f32..10.0, n * dim),
            Just(dim),
            1usize..=n.min(5),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn inertia_history_never_increases((points, dim, k) in points_strategy(), seed in 0u64..100) {
        let (model, _) = kmeans(&points, dim, &KMeansConfig { k, restarts: 3, seed, ..Default::default() }).unwrap();
        for w in model.inertia_history.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-9) + 1e-12);
        }
    }

    #[test]
    fn assignments_are_nearest_centroids((points, dim, k) in points_strategy(), seed in 0u64..100) {
        let (model, assign) = kmeans(&points, dim, &KMeansConfig { k, seed, ..Default::default() }).unwrap();
        let mut inertia = 0.0;
        for (i, p) in points.chunks_exact(dim).enumerate() {
            let (c, d) = model.nearest(p);
            inertia += d;
            let own: f64 = p.iter().zip(model.centroid(assign[i])).map(|(&x, &m)| (x as f64 - m).powi(2)).sum();
            prop_assert!(own <= d + 1e-9, "point {i} assigned to {} but {c} is nearer", assign[i]);
        }
        prop_assert!((inertia - model.inertia).abs() <= 1e-6 * inertia.max(1.0));
    }

    #[test]
    fn same_seed_same_clustering((points, dim, k) in points_strategy(), seed in 0u64..100) {
        let cfg = KMeansConfig { k, seed, ..Default::default() };
        let a = kmeans(&points, dim, &cfg).unwrap();
        let b = kmeans(&points, dim, &cfg).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn matches_exhaustive_optimum_on_tiny_instances() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(3..=7);
        let points: Vec<f32> = (0..n * 2).map(|_| rng.random_range(-3.0..3.0)).collect();
        for k in 1..=3 {
            let cfg = KMeansConfig {
                k,
                restarts: 500,
                seed,
                ..Default::default()
            };
            let (model, _) = kmeans(&points, 2, &cfg).unwrap();
            let opt = brute_force_inertia(&points, 2, k);
            assert!(
                (model.inertia - opt).abs() <= 1e-9 * opt.max(1.0),
                "seed {seed} k {k}: {} vs optimum {opt}",
                model.inertia
            );
        }
    }
}

#[test]
fn separated_blobs_are_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let centres = [[0.0f32, 0.0], [10.0, 0.0], [0.0, 10.0]];
    let mut points = Vec::new();
    let mut truth = Vec::new();
    for (c, centre) in centres.iter().enumerate() {
        for _ in 0..50 {
            points.push(centre[0] + rng.random_range(-1.0..1.0));
            points.push(centre[1] + rng.random_range(-1.0..1.0));
            truth.push(c);
        }
    }
    let (_, assign) = kmeans(&points, 2, &KMeansConfig::default()).unwrap();
    for c in 0..3 {
        let ids: HashSet<usize> = (0..truth.len()).filter(|&i| truth[i] == c).map(|i| assign[i]).collect();
        assert_eq!(ids.len(), 1, "blob {c} split across clusters");
    }
}

#[test]
fn centroids_round_trip_through_csv() {
    let points = [0.0f32, 0.0, 1.0, 1.0, 9.0, 9.0, 10.0, 10.0];
    let (model, _) = kmeans(&points, 2, &KMeansConfig { k: 2, ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("centroids.csv");
    model.write_centroids(&path).unwrap();
    let back = ClusterModel::read_centroids(&path).unwrap();
    assert_eq!((back.k, back.dim), (2, 2));
    assert_eq!(back.centroids, model.centroids);
}

/// A 1-band feature cube on a 6×10 grid with three well-separated value
/// groups; the spectra cube carries the pixel index in its only band.
fn toy_cubes() -> (HyperspectralCube, HyperspectralCube) {
    let (h, w) = (6, 10);
    let n = h * w;
    let features: Vec<f32> = (0..n).map(|p| (p % 3) as f32 * 100.0 + (p as f32) * 0.01).collect();
    let grid = Arc::new(WavelengthGrid::index(1).unwrap());
    let spectra: Vec<f32> = (0..n).map(|p| p as f32).collect();
    (
        HyperspectralCube::new(h, w, grid.clone(), features).unwrap(),
        HyperspectralCube::new(h, w, grid, spectra).unwrap(),
    )
}

#[test]
fn confident_set_takes_the_nearest_members() {
    let (features, spectra) = toy_cubes();
    let (model, assign) = kmeans_cube(&features, &KMeansConfig::default()).unwrap();
    let set = extract_confident(&features, &spectra, &model, &assign, 8).unwrap();
    assert_eq!(set.len(), 24);
    for c in 0..3 {
        let chosen: Vec<_> = set.of_class(c).collect();
        assert_eq!(chosen.len(), 8);
        assert!(chosen.windows(2).all(|w| w[0].distance <= w[1].distance));
        let cutoff = chosen.last().unwrap().distance;
        let picked: HashSet<usize> = chosen.iter().map(|e| e.row * 10 + e.col).collect();
        for p in (0..60).filter(|&p| assign[p] == c && !picked.contains(&p)) {
            let d = model.nearest(&features.pixel_values(p)).1.sqrt();
            assert!(d >= cutoff - 1e-9, "pixel {p} nearer than a chosen member");
        }
        // the stored spectrum is the one at (row, col)
        for e in &chosen {
            assert_eq!(e.spectrum, vec![(e.row * 10 + e.col) as f32]);
        }
    }
}

#[test]
fn too_few_members_is_an_error() {
    let (features, spectra) = toy_cubes();
    let (model, assign) = kmeans_cube(&features, &KMeansConfig::default()).unwrap();
    assert!(extract_confident(&features, &spectra, &model, &assign, 21).is_err());
}

#[test]
fn split_is_stratified_disjoint_and_seeded() {
    let (features, spectra) = toy_cubes();
    let (model, assign) = kmeans_cube(&features, &KMeansConfig::default()).unwrap();
    let set = extract_confident(&features, &spectra, &model, &assign, 10).unwrap();
    let (train, val) = split_train_val(&set, 7, 3, 5).unwrap();
    for c in 0..3 {
        assert_eq!(train.of_class(c).count(), 7);
        assert_eq!(val.of_class(c).count(), 3);
    }
    let key = |e: &orewatch::cluster::ConfidentEntry| (e.row, e.col);
    let a: HashSet<_> = train.entries.iter().map(key).collect();
    let b: HashSet<_> = val.entries.iter().map(key).collect();
    assert!(a.is_disjoint(&b));
    assert_eq!(split_train_val(&set, 7, 3, 5).unwrap(), (train, val));
    assert!(split_train_val(&set, 8, 3, 5).is_err());
}
