use std::collections::HashSet;

use modapter::data::dataset::{generate, sample_at};
use modapter::data::scene::{concept_exemplar, render_scene, Category, ProbeCategory, SceneSpec};
use modapter::data::{attribute_caption, gen_dataset, read_dataset, Color, Light, Shape, Texture, Tone};
use modapter::encoders::Vocabulary;
use modapter::eval::probe_image;
use modapter::modk::Container;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[test]
fn probes_recover_every_attribute_of_1000_random_specs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut wrong = Vec::new();
    for i in 0..1000u64 {
        let spec = SceneSpec::random(&mut rng);
        let r = probe_image(&render_scene(&spec, i)).unwrap();
        for cat in ProbeCategory::ALL {
            if r.word(cat) != cat.value_word(&spec) {
                wrong.push((i, cat, spec));
            }
        }
        if r.placement != spec.placement {
            wrong.push((i, ProbeCategory::Shape, spec));
        }
    }
    assert!(wrong.is_empty(), "{} misreads, first: {:?}", wrong.len(), &wrong[..wrong.len().min(5)]);
}

#[test]
fn concept_exemplars_probe_to_their_attribute() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..200u64 {
        let spec = SceneSpec::random(&mut rng);
        for cat in Category::ALL {
            let ex = concept_exemplar(&spec, cat, i);
            let r = probe_image(&render_scene(&ex, i)).unwrap();
            assert_eq!(r.word(cat.probe()), cat.attribute_word(&spec));
        }
    }
}

#[test]
fn all_scene_words_are_in_the_vocabulary() {
    let v = Vocabulary::default_words();
    let words = Shape::ALL.iter().map(|s| s.word())
        .chain(Color::ALL.iter().map(|c| c.word()))
        .chain(Texture::ALL.iter().map(|c| c.word()))
        .chain(Tone::ALL.iter().map(|c| c.word()))
        .chain(Light::ALL.iter().map(|c| c.word()));
    for w in words {
        assert!(v.contains(w), "{w}");
    }
    for s in generate(50, 1) {
        for w in &s.caption {
            assert!(v.contains(w), "{w}");
        }
    }
}

#[test]
fn annotations_point_at_their_concept_words() {
    for s in generate(100, 9) {
        for a in &s.concepts {
            assert_eq!(s.caption[a.token_index], a.concept_word);
            assert_eq!(s.caption.iter().filter(|w| **w == a.concept_word).count(), 1);
            let p = a.positive_prompt();
            assert!(p.contains(&a.concept_word));
            assert_eq!(p, attribute_caption(&s.spec, a.concept_word).unwrap());
            let extra: Vec<_> = p.iter().filter(|w| **w != a.concept_word).copied().collect();
            assert_eq!(extra, a.attribute_words);
        }
    }
}

#[test]
fn ten_sample_file_roundtrips_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.modk");
    let written = gen_dataset(10, 7, &path).unwrap();
    let read = read_dataset(&path).unwrap();
    assert_eq!(read.len(), 10);
    assert_eq!(read, written);
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(modapter::data::dataset::to_container(&read).to_bytes(), bytes);
    assert_eq!(Container::from_bytes(&bytes).unwrap().u64s("count").unwrap(), vec![10]);
}

#[test]
fn dataset_bytes_are_a_pure_function_of_n_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.modk"), dir.path().join("b.modk"));
    gen_dataset(20, 3, &a).unwrap();
    gen_dataset(20, 3, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn zero_samples_and_bad_paths_fail() {
    let dir = tempfile::tempdir().unwrap();
    assert!(gen_dataset(0, 1, &dir.path().join("x.modk")).is_err());
    assert!(gen_dataset(3, 1, &dir.path().join("missing/x.modk")).is_err());
}

#[test]
fn thousand_images_are_distinct() {
    let mut seen = HashSet::new();
    for i in 0..1000 {
        let s = sample_at(11, i);
        let mut h = Sha256::new();
        s.image.data().iter().for_each(|v| h.update(v.to_le_bytes()));
        let d: [u8; 32] = h.finalize().into();
        assert!(seen.insert(d), "duplicate image at {i}");
    }
}

#[test]
fn attribute_frequencies_pass_chi_square() {
    let samples = generate(2000, 17);
    let chi = ChiSquared::new(3.0).unwrap();
    for cat in ProbeCategory::ALL {
        let mut counts = [0f64; 4];
        for s in &samples {
            let w = cat.value_word(&s.spec);
            let idx = match cat {
                ProbeCategory::Shape => Shape::from_word(w).unwrap().index(),
                ProbeCategory::Color => Color::from_word(w).unwrap().index(),
                ProbeCategory::Texture => Texture::from_word(w).unwrap().index(),
                ProbeCategory::Tone => Tone::from_word(w).unwrap().index(),
                ProbeCategory::Light => Light::from_word(w).unwrap().index(),
            };
            counts[idx] += 1.0;
        }
        let e = samples.len() as f64 / 4.0;
        let stat: f64 = counts.iter().map(|c| (c - e).powi(2) / e).sum();
        let p = 1.0 - chi.cdf(stat);
        assert!(p > 0.01, "{cat:?}: counts {counts:?}, p = {p}");
    }
}
