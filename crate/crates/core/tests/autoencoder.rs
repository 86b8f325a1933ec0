use orewatch::illumination::{relight_in_place, AtmosphereSamplerParams};
use orewatch::sae::{encode, finetune, pretrain_layerwise, AutoencoderSpec, EncoderState, SaeTrainConfig};
use orewatch::synth::{generate_scene, Scene, SceneSpec, TruthAtmosphere};
use proptest::prelude::*;

fn scene() -> Scene {
    let spec = SceneSpec {
        height: 24,
        width: 48,
        ..SceneSpec::default()
    };
    generate_scene(&spec, 2).unwrap()
}

fn quick() -> SaeTrainConfig {
    SaeTrainConfig {
        pretrain_epochs: 3,
        pretrain_max_samples: Some(500),
        finetune_samples: 300,
        finetune_epochs: 4,
        seed: 7,
        ..Default::default()
    }
}

fn trained(scene: &Scene) -> EncoderState {
    let cfg = quick();
    let state = pretrain_layerwise(&scene.cube, &AutoencoderSpec::default(), &cfg).unwrap();
    finetune(&state, &scene.cube, Some(&AtmosphereSamplerParams::default()), &cfg).unwrap()
}

#[test]
fn training_is_deterministic_and_logged() {
    let s = scene();
    let a = trained(&s);
    assert_eq!(a, trained(&s));
    assert_eq!(a.meta.pretrain_epochs, vec![3, 3, 3]);
    assert!(a.meta.finetune_epochs <= 4 && a.meta.finetune_epochs == a.meta.finetune_loss.len());
    assert!(a.meta.pretrain_loss.iter().flatten().all(|l| l.is_finite()));
}

#[test]
fn zero_epochs_keep_the_initial_weights() {
    let s = scene();
    let cfg = SaeTrainConfig {
        pretrain_epochs: 0,
        finetune_epochs: 0,
        ..quick()
    };
    let init = EncoderState::new(AutoencoderSpec::default(), cfg.seed).unwrap();
    let pre = pretrain_layerwise(&s.cube, &AutoencoderSpec::default(), &cfg).unwrap();
    assert_eq!(pre.encoder, init.encoder);
    let fine = finetune(&pre, &s.cube, None, &cfg).unwrap();
    assert_eq!(fine.encoder, init.encoder);
}

#[test]
fn weights_round_trip() {
    let s = scene();
    let state = trained(&s);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("encoder.bin");
    state.save(&path).unwrap();
    let back = EncoderState::load(&path).unwrap();
    assert_eq!(back.encoder, state.encoder);
    assert_eq!(encode(&back, &s.cube).unwrap(), encode(&state, &s.cube).unwrap());
}

#[test]
fn band_count_mismatch_is_rejected() {
    let s = scene();
    let spec = AutoencoderSpec {
        input_bands: 100,
        ..AutoencoderSpec::default()
    };
    assert!(pretrain_layerwise(&s.cube, &spec, &quick()).is_err());
}

#[test]
fn code_cube_has_code_bands() {
    let s = scene();
    let codes = encode(&trained(&s), &s.cube).unwrap();
    assert_eq!((codes.height(), codes.width(), codes.bands()), (24, 48, 30));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// With unit-norm input, a spectrally flat shadow factor cannot move the code.
    #[test]
    fn flat_shadow_factor_leaves_codes_unchanged(pixel in 0usize..24 * 48, k in 0.05f64..1.0, gamma in 0.0f64..1.0) {
        let s = scene();
        let state = EncoderState::new(AutoencoderSpec::default(), 1).unwrap();
        let lit = s.cube.pixel_values(pixel);
        let mut shaded = lit.clone();
        relight_in_place(&mut shaded, gamma, &vec![k; lit.len()]);
        let a = state.encode_pixels(&lit, 1).unwrap();
        let b = state.encode_pixels(&shaded, 1).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-5 * (1.0 + x.abs()), "{x} vs {y}");
        }
    }
}

#[test]
fn finetuning_with_relighting_pulls_shadowed_codes_towards_sunlit_ones() {
    let s = scene();
    let cfg = SaeTrainConfig {
        pretrain_epochs: 10,
        finetune_epochs: 30,
        pretrain_max_samples: Some(1000),
        ..quick()
    };
    let pre = pretrain_layerwise(&s.cube, &AutoencoderSpec::default(), &cfg).unwrap();
    let plain = finetune(&pre, &s.cube, None, &cfg).unwrap();
    let relit = finetune(&pre, &s.cube, Some(&AtmosphereSamplerParams::default()), &cfg).unwrap();
    let k = TruthAtmosphere::default().on(s.cube.grid()).unwrap().shadow_factor();
    let bands = s.cube.bands();
    let n = s.cube.pixel_count();
    let lit = s.sunlit.clone();
    let mut dark = lit.clone();
    for px in dark.chunks_exact_mut(bands) {
        relight_in_place(px, 0.0, &k);
    }
    let gap = |st: &EncoderState| -> f64 {
        let a = st.encode_pixels(&lit, n).unwrap();
        let b = st.encode_pixels(&dark, n).unwrap();
        let d = st.code_dim();
        let mut total = 0.0;
        for (x, y) in a.chunks_exact(d).zip(b.chunks_exact(d)) {
            let dot: f64 = x.iter().zip(y).map(|(&p, &q)| p as f64 * q as f64).sum();
            let nx: f64 = x.iter().map(|&p| (p as f64).powi(2)).sum::<f64>().sqrt();
            let ny: f64 = y.iter().map(|&q| (q as f64).powi(2)).sum::<f64>().sqrt();
            total += (dot / (nx * ny).max(1e-12)).clamp(-1.0, 1.0).acos();
        }
        total / n as f64
    };
    assert!(gap(&relit) < gap(&plain), "relit {} vs plain {}", gap(&relit), gap(&plain));
}
