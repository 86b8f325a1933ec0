use orewatch::illumination::relight_in_place;
use orewatch::synth::{generate_scene, SceneSpec, ShadowSpec, TruthAtmosphere, ORE, SHALE, SKY};
use proptest::prelude::*;

fn small(seed: u64) -> SceneSpec {
    SceneSpec {
        height: 32,
        width: 64,
        seed,
        ..SceneSpec::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn reflectance_is_finite_and_non_negative(seed in 0u64..1000) {
        let scene = generate_scene(&small(seed), seed).unwrap();
        prop_assert!(scene.cube.data().iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn shadow_darkens_every_face_class(seed in 0u64..1000) {
        let scene = generate_scene(&small(seed), seed).unwrap();
        let bands = scene.cube.bands();
        let labels = scene.labels.labels();
        for class in [ORE, SHALE] {
            let mean = |shadowed: bool| {
                let px: Vec<usize> = (0..labels.len())
                    .filter(|&p| labels[p] == class && scene.shadow_mask[p] == shadowed)
                    .collect();
                let total: f64 = px.iter().map(|&p| scene.cube.pixel_values(p).iter().map(|&v| v as f64).sum::<f64>()).sum();
                (px.len(), total / (px.len() * bands).max(1) as f64)
            };
            let (n_sun, sun) = mean(false);
            let (n_shade, shade) = mean(true);
            if n_sun > 0 && n_shade > 0 {
                prop_assert!(shade < sun, "class {class}: shade {shade} vs sun {sun}");
            }
        }
    }
}

#[test]
fn same_seed_same_scene() {
    let a = generate_scene(&small(3), 9).unwrap();
    let b = generate_scene(&small(3), 9).unwrap();
    assert_eq!(a, b);
    let c = generate_scene(&small(3), 10).unwrap();
    assert_eq!(a.labels, c.labels, "layout is owned by the spec seed");
    assert_ne!(a.cube, c.cube);
}

#[test]
fn sky_is_never_shadowed_and_coverage_is_near_target() {
    let scene = generate_scene(&SceneSpec::default(), 1).unwrap();
    let labels = scene.labels.labels();
    assert!((0..labels.len()).all(|p| labels[p] != SKY || !scene.shadow_mask[p]));
    assert!((scene.shadow_fraction() - 0.3).abs() < 0.05, "{}", scene.shadow_fraction());
}

#[test]
fn full_shadow_pixels_follow_the_relighting_model() {
    let spec = SceneSpec {
        noise_sigma: 0.0,
        sky_noise_sigma: 0.0,
        ..small(4)
    };
    let scene = generate_scene(&spec, 4).unwrap();
    let k = TruthAtmosphere::default().on(scene.cube.grid()).unwrap().shadow_factor();
    let bands = scene.cube.bands();
    let mut checked = 0;
    for p in 0..scene.gamma.len() {
        if !scene.shadow_mask[p] {
            continue;
        }
        let mut expected = scene.sunlit[p * bands..(p + 1) * bands].to_vec();
        relight_in_place(&mut expected, scene.gamma[p] as f64, &k);
        for (got, want) in scene.cube.pixel_values(p).iter().zip(&expected) {
            assert!((got - want).abs() <= 1e-6 + 1e-5 * want.abs(), "pixel {p}: {got} vs {want}");
        }
        checked += 1;
    }
    assert!(checked > 0);
}

#[test]
fn face_only_scene_has_no_sky() {
    let base = small(5);
    let spec = SceneSpec {
        sky_class: None,
        endmembers: base.endmembers[..2].to_vec(),
        shadow: ShadowSpec {
            coverage: 0.1,
            ..ShadowSpec::default()
        },
        ..base
    };
    let scene = generate_scene(&spec, 5).unwrap();
    assert!(scene.labels.labels().iter().all(|&l| l == ORE || l == SHALE));
    assert!(scene.face_mask().iter().all(|&f| f));
}

#[test]
fn invalid_specs_are_rejected() {
    let bad = SceneSpec {
        shadow: ShadowSpec {
            coverage: 1.5,
            ..ShadowSpec::default()
        },
        ..small(0)
    };
    assert!(generate_scene(&bad, 0).is_err());
    assert!(generate_scene(&SceneSpec { height: 0, ..small(0) }, 0).is_err());
}
