use agrimae_core::anomaly::{detect, plan_for, train, InferConfig, TrainConfig, TrainState};
use agrimae_core::data::{generate_samples, GenSpec};
use agrimae_core::masking::patch_mask;
use agrimae_core::models::Variant;
use agrimae_core::selftest::toy_model_config;
use agrimae_core::Model64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn patch_masks_hit_each_patch_at_the_ratio() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut hits = [0usize; 64];
    let draws = 10_000;
    for _ in 0..draws {
        let m = patch_mask(8, 8, 0.75, &mut rng).unwrap();
        for (h, &masked) in hits.iter_mut().zip(&m.masked) {
            *h += usize::from(masked);
        }
    }
    for h in hits {
        let f = h as f64 / draws as f64;
        assert!((f - 0.75).abs() < 0.02, "{f}");
    }
}

#[test]
fn planted_anomalies_get_lower_weight() {
    let cfg = toy_model_config(Variant::SwinMae);
    let spec = GenSpec {
        count: 12,
        size: cfg.image_size,
        bands: cfg.bands,
        anomaly_fraction: 1.0,
        blob_radius: (2.0, 4.0),
        seed: 6,
        ..GenSpec::default()
    };
    let samples = generate_samples(&spec).unwrap();
    let images: Vec<_> = samples.iter().map(|s| s.image.clone()).collect();
    let tc = TrainConfig {
        epochs: 21,
        batch_size: 4,
        warmup_epochs: Some(20),
        seed: 6,
        ..TrainConfig::default()
    };
    let state = train(TrainState::new(Model64::build(&cfg, 6).unwrap(), tc).unwrap(), &images).unwrap();
    let (mut inside, mut n_in, mut outside, mut n_out) = (0.0, 0, 0.0, 0);
    for (s, w) in samples.iter().zip(&state.weight_maps) {
        let w = w.as_ref().expect("weight map after warmup");
        assert_eq!(w.source_epoch, 20);
        for (&v, &l) in w.values.data().iter().zip(&s.label.as_ref().unwrap().values) {
            if l == 1 {
                inside += v;
                n_in += 1;
            } else {
                outside += v;
                n_out += 1;
            }
        }
    }
    let (a, b) = (inside / n_in as f64, outside / n_out as f64);
    assert!(a < b, "anomalous {a} vs normal {b}");
}

#[test]
fn detection_is_bit_reproducible() {
    let cfg = toy_model_config(Variant::VitMae);
    let spec = GenSpec {
        count: 3,
        size: cfg.image_size,
        bands: cfg.bands,
        anomaly_fraction: 1.0,
        seed: 7,
        ..GenSpec::default()
    };
    let samples = generate_samples(&spec).unwrap();
    let model = Model64::build(&cfg, 7).unwrap();
    let icfg = InferConfig {
        k: 6,
        ..InferConfig::default()
    };
    for (i, s) in samples.iter().enumerate() {
        let a = detect(&model, &s.image, &plan_for(&model, &icfg, i).unwrap()).unwrap();
        let b = detect(&model, &s.image, &plan_for(&model, &icfg, i).unwrap()).unwrap();
        assert_eq!(a.errors.values(), b.errors.values());
        assert_eq!(a.anomaly, b.anomaly);
        assert_eq!(a.threshold.theta.to_bits(), b.threshold.theta.to_bits());
    }
}
