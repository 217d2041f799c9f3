use daug_nn::Tensor4;
use daugnet::daug::*;
use daugnet::data::{assemble_patchset, crop, generate_synth_domains, preset_specs, registry_for, SynthLayout};
use daugnet::networks::Generator;
use daugnet::style::{DomainRegistry, DomainRole};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn registry(n: usize) -> DomainRegistry {
    let mut r = DomainRegistry::new();
    for i in 0..n {
        r.register(&format!("d{i}"), DomainRole::Source, i as u64).unwrap();
    }
    r
}

fn image(n: usize, side: usize, seed: u64) -> Tensor4 {
    Tensor4::from_vec([n, 3, side, side], daug_nn::gradcheck::pseudo_random(n * 3 * side * side, seed)).unwrap()
}

#[test]
fn augmentor_fires_at_its_rate_and_draws_all_domains() {
    let gen = Generator::init(1);
    let reg = registry(4);
    let batch = image(2, 4, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut fired = 0;
    let mut drawn = [0usize; 4];
    for _ in 0..1000 {
        let aug = augment_batch(&batch, &reg, &gen, &mut rng, 0.9).unwrap();
        match aug.styles {
            Some(styles) => {
                fired += 1;
                assert_eq!(styles.len(), 2);
                for s in styles {
                    drawn[s] += 1;
                }
                assert_eq!(aug.batch.shape(), batch.shape());
            }
            None => assert_eq!(aug.batch, batch),
        }
    }
    let rate = fired as f64 / 1000.0;
    assert!((rate - 0.9).abs() <= 0.03, "rate {rate}");
    assert!(drawn.iter().all(|&d| d > 300), "{drawn:?}");
}

#[test]
fn zero_probability_is_the_identity() {
    let gen = Generator::init(1);
    let reg = registry(2);
    let batch = image(3, 8, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let aug = augment_batch(&batch, &reg, &gen, &mut rng, 0.0).unwrap();
        assert_eq!(aug.styles, None);
        assert_eq!(aug.batch, batch);
    }
}

#[test]
fn augmented_patch_matches_single_stylization() {
    let gen = Generator::init(1);
    let reg = registry(3);
    let batch = image(2, 8, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let aug = augment_batch(&batch, &reg, &gen, &mut rng, 1.0).unwrap();
    let styles = aug.styles.unwrap();
    for (k, &s) in styles.iter().enumerate() {
        let single = gen.stylize(&batch.sample(k), &reg.get(s).unwrap().code).unwrap();
        let got = aug.batch.sample(k);
        let diff = got.zip_map(&single, |a, b| (a - b).abs()).unwrap().abs_max();
        assert!(diff < 1e-5, "patch {k}: {diff}");
    }
}

#[test]
fn single_tile_equals_a_full_forward() {
    let clf = Classifier::init(8);
    let x = image(1, 64, 9);
    let full = clf.forward(&x).unwrap();
    assert_eq!(predict_logits(&x, &clf, 64, 16).unwrap(), full);
}

#[test]
fn overlapping_tiles_average_their_logits() {
    let clf = Classifier::init(10);
    let x = image(1, 80, 11);
    let tiled = predict_logits(&x, &clf, 48, 16).unwrap();
    // anchors 0 and 32 on each axis
    let mut sum = Tensor4::zeros([1, 3, 80, 80]);
    let mut count = Tensor4::zeros([1, 1, 80, 80]);
    for y0 in [0, 32] {
        for x0 in [0, 32] {
            let logits = clf.forward(&crop(&x, x0, y0, 48, 48)).unwrap();
            for y in 0..48 {
                for xx in 0..48 {
                    for c in 0..3 {
                        let v = sum.at(0, c, y0 + y, x0 + xx) + logits.at(0, c, y, xx);
                        sum.set(0, c, y0 + y, x0 + xx, v);
                    }
                    count.set(0, 0, y0 + y, x0 + xx, count.at(0, 0, y0 + y, x0 + xx) + 1.0);
                }
            }
        }
    }
    let expected = Tensor4::from_fn([1, 3, 80, 80], |_, c, y, xx| sum.at(0, c, y, xx) / count.at(0, 0, y, xx));
    let diff = tiled.zip_map(&expected, |a, b| (a - b).abs()).unwrap().abs_max();
    assert!(diff < 1e-6, "{diff}");
}

#[test]
fn small_inputs_are_padded_and_cropped_back() {
    let clf = Classifier::init(12);
    let x = image(1, 20, 13);
    let y = predict_map(&x, &clf, 32, 8).unwrap();
    assert_eq!((y.shape().c, y.shape().h, y.shape().w), (3, 20, 20));
    assert!(y.data().iter().all(|&v| v == 0.0 || v == 1.0));
    assert!(predict_map(&x, &clf, 24, 8).is_err());
}

#[test]
fn classifier_training_is_seeded_and_learns() {
    let domains = generate_synth_domains(&SynthLayout { size: 64, ..SynthLayout::default() }, &preset_specs(), 2).unwrap();
    let reg = registry_for(&domains, 1).unwrap();
    let set = assemble_patchset(&domains, &reg, 32, 16).unwrap().labeled(&reg, DomainRole::Source);
    let gen = Generator::init(3);
    let cfg = DAugConfig {
        epochs: 1,
        batch_size: 2,
        steps_per_epoch: Some(30),
        seed: 4,
        ..DAugConfig::default()
    };
    let run = || train_daugnet(&set, &reg, &gen, &cfg, None, |_| {}).unwrap();
    let (a, log) = run();
    let (b, _) = run();
    assert_eq!(a.to_archive().unwrap().to_bytes(), b.to_archive().unwrap().to_bytes());
    assert!(log.iter().any(|s| s.diversified));
    let head: f64 = log[..5].iter().map(|s| s.loss).sum::<f64>() / 5.0;
    let tail: f64 = log[25..].iter().map(|s| s.loss).sum::<f64>() / 5.0;
    assert!(tail < head, "loss {head} -> {tail}");

    // fine-tuning resumes from the given state
    let more = DAugConfig { steps_per_epoch: Some(2), ..cfg.clone() };
    let (c, _) = train_daugnet(&set, &reg, &gen, &more, Some(a.clone()), |_| {}).unwrap();
    assert_eq!(c.epoch, 2);
    assert_eq!(c.opt.step_count(), a.opt.step_count() + 2);
}
