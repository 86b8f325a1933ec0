use std::sync::Arc;

use orewatch::cnn::{
    classify_cube, epoch_batches, pretrain_on_corpus, synthetic_corpus, train, transfer_init, CnnSpec, CnnState,
    CnnTrainConfig, CorpusSpec, LabelledSpectra, Preprocessor, PretrainedWeights, Selection, TrainLog,
};
use orewatch::illumination::{augment_batch, AtmosphereSamplerParams};
use orewatch::nn::Layer;
use orewatch::spectral::{HyperspectralCube, Spectrum, WavelengthGrid};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn native_grid() -> Arc<WavelengthGrid> {
    Arc::new(WavelengthGrid::linspace(400.0, 1000.0, 120).unwrap())
}

/// A small network on a coarse grid so training runs in seconds.
fn small_spec(classes: usize) -> CnnSpec {
    CnnSpec {
        kernels: vec![9, 5, 5],
        channels: vec![4, 4, 4],
        hidden: vec![12, 12],
        classes,
        grid: Arc::new(WavelengthGrid::linspace(430.0, 960.0, 60).unwrap()),
    }
}

fn corpus(classes: usize, per_class: usize, seed: u64) -> LabelledSpectra {
    let spec = CorpusSpec {
        classes,
        per_class,
        shaded_fraction: 0.0,
        seed,
        ..CorpusSpec::default()
    };
    synthetic_corpus(&native_grid(), &spec).unwrap()
}

fn halves(set: &LabelledSpectra) -> (LabelledSpectra, LabelledSpectra) {
    let (even, odd): (Vec<usize>, Vec<usize>) = (0..set.len()).partition(|i| i % 2 == 0);
    (set.subset(&even), set.subset(&odd))
}

#[test]
fn separable_classes_are_learned() {
    let (tr, val) = halves(&corpus(3, 80, 1));
    let cfg = CnnTrainConfig {
        epochs: 50,
        batch_size: 20,
        seed: 1,
        ..Default::default()
    };
    let init = CnnState::fresh(small_spec(3), 1).unwrap();
    let (_, log) = train(&init, &tr, &val, None, &cfg).unwrap();
    let best = log.records.iter().filter_map(|r| r.val_f1).fold(0.0, f64::max);
    assert!(best >= 0.99, "best validation F1 {best}");
}

#[test]
fn training_is_deterministic() {
    let (tr, val) = halves(&corpus(3, 20, 2));
    let cfg = CnnTrainConfig {
        epochs: 3,
        batch_size: 10,
        augment: true,
        n_variants: 2,
        seed: 5,
        ..Default::default()
    };
    let init = CnnState::fresh(small_spec(3), 5).unwrap();
    let a = train(&init, &tr, &val, Some(&val), &cfg).unwrap();
    let b = train(&init, &tr, &val, Some(&val), &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_epochs_return_the_initial_network() {
    let (tr, val) = halves(&corpus(3, 10, 3));
    let init = CnnState::fresh(small_spec(3), 3).unwrap();
    let cfg = CnnTrainConfig {
        epochs: 0,
        ..Default::default()
    };
    let (state, log) = train(&init, &tr, &val, None, &cfg).unwrap();
    assert_eq!(state, init);
    assert!(log.records.is_empty() && log.selected_epoch.is_none());
}

#[test]
fn last_selection_returns_the_final_epoch() {
    let (tr, val) = halves(&corpus(3, 10, 4));
    let cfg = CnnTrainConfig {
        epochs: 4,
        batch_size: 5,
        selection: Selection::Last,
        ..Default::default()
    };
    let (_, log) = train(&CnnState::fresh(small_spec(3), 4).unwrap(), &tr, &val, None, &cfg).unwrap();
    assert_eq!(log.selected_epoch, Some(log.records.last().unwrap().epoch));
}

#[test]
fn state_and_log_round_trip() {
    let (tr, val) = halves(&corpus(3, 10, 5));
    let cfg = CnnTrainConfig {
        epochs: 2,
        batch_size: 5,
        ..Default::default()
    };
    let (state, log) = train(&CnnState::fresh(small_spec(3), 5).unwrap(), &tr, &val, Some(&val), &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cnn.bin");
    state.save(&path).unwrap();
    assert_eq!(CnnState::load(&path).unwrap(), state);
    let csv = dir.path().join("log.csv");
    log.write_csv(&csv).unwrap();
    assert_eq!(TrainLog::read_csv(&csv).unwrap(), log);
}

#[test]
fn transfer_copies_everything_but_the_head() {
    let set = corpus(5, 10, 6);
    let cfg = CnnTrainConfig {
        epochs: 1,
        batch_size: 10,
        ..Default::default()
    };
    let (pre, _) = pretrain_on_corpus(&set, &small_spec(5), &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pretrained.bin");
    pre.save(&path).unwrap();
    let pre = PretrainedWeights::load(&path).unwrap();
    let state = transfer_init(&pre, 3, 9).unwrap();
    let (src, dst) = (pre.state.net.layers(), state.net.layers());
    assert_eq!(src.len(), dst.len());
    assert_eq!(src[..src.len() - 1], dst[..dst.len() - 1]);
    match dst.last().unwrap() {
        Layer::Dense(d) => assert_eq!(d.bias.len(), 3),
        other => panic!("head is {other:?}"),
    }
    assert_eq!(state.spec.classes, 3);
}

#[test]
fn augmented_batch_puts_variants_after_each_original() {
    let grid = native_grid();
    let batch: Vec<Spectrum> = (0..4)
        .map(|i| Spectrum::new(vec![0.1 + i as f32 * 0.1; grid.len()], grid.clone()).unwrap())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = augment_batch(&batch, &AtmosphereSamplerParams::default(), 3, &mut rng).unwrap();
    assert_eq!(out.len(), 16);
    for (i, s) in out.iter().enumerate() {
        let original = &batch[i / 4];
        if i % 4 == 0 {
            assert_eq!(s, original);
        } else {
            // relighting only removes light
            assert!(s.values().iter().zip(original.values()).all(|(v, o)| *v <= *o && *v >= 0.0));
            assert_ne!(s, original);
        }
    }
}

#[test]
fn batches_relight_natively_then_resample_and_offset() {
    let set = corpus(3, 10, 7);
    let spec = small_spec(3);
    let pre = Preprocessor::new(&set.grid, &spec).unwrap();
    let cfg = CnnTrainConfig {
        batch_size: 7,
        augment: true,
        n_variants: 2,
        ..Default::default()
    };
    let mut shuffle = ChaCha8Rng::seed_from_u64(1);
    let mut augment = ChaCha8Rng::seed_from_u64(2);
    let batches = epoch_batches(&set, &pre, &cfg, &mut shuffle, &mut augment).unwrap();
    assert_eq!(batches.iter().map(|b| b.native.len()).sum::<usize>(), set.len() * 3);
    for b in &batches {
        assert_eq!(b.labels.len(), b.native.len());
        assert!(b.native.iter().all(|s| s.grid().len() == set.bands()));
        let native: Vec<f32> = b.native.iter().flat_map(|s| s.values().to_vec()).collect();
        assert_eq!(b.input, pre.apply_rows(&native, set.bands()));
        for row in b.input.chunks_exact(pre.bands()) {
            let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / row.len() as f64;
            assert!(mean.abs() < 1e-5);
        }
    }
}

#[test]
fn classify_matches_per_pixel_prediction() {
    let grid = native_grid();
    let set = corpus(3, 4, 8);
    let cube = HyperspectralCube::from_pixels(3, 4, grid.clone(), &set.values).unwrap();
    let state = CnnState::fresh(small_spec(3), 8).unwrap();
    let map = classify_cube(&state, &cube).unwrap();
    let pre = Preprocessor::new(&grid, &state.spec).unwrap();
    let expected = state.predict(&pre.apply_rows(&set.values, grid.len()), set.len()).unwrap();
    assert_eq!(map.labels.labels(), expected.as_slice());
    for p in 0..12 {
        let sum: f32 = (0..3).map(|c| map.scores.value(p / 4, p % 4, c)).sum();
        assert!((sum - 1.0).abs() < 1e-5);
    }
}

#[test]
fn grid_not_covering_the_network_is_rejected() {
    let narrow = Arc::new(WavelengthGrid::linspace(500.0, 700.0, 50).unwrap());
    let cube = HyperspectralCube::new(2, 2, narrow, vec![0.1; 200]).unwrap();
    assert!(classify_cube(&CnnState::fresh(small_spec(3), 0).unwrap(), &cube).is_err());
}
