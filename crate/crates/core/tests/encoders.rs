use modapter::data::scene::{Category, SceneSpec};
use modapter::encoders::{word_vector, EncoderConfig, Encoders, Vocabulary};
use modapter::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn enc() -> Encoders {
    Encoders::new(EncoderConfig::default(), Vocabulary::default_words())
}

fn cosine(a: &Tensor, b: &Tensor) -> f64 {
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    dot / (a.l2_norm() * b.l2_norm())
}

#[test]
fn shipped_vocabulary_is_nearly_orthogonal() {
    let e = enc();
    let words = e.vocab().words();
    let mut worst = 0.0f64;
    for i in 0..words.len() {
        for j in i + 1..words.len() {
            let c = cosine(e.text.encode_word(&words[i]).unwrap(), e.text.encode_word(&words[j]).unwrap());
            worst = worst.max(c.abs());
        }
    }
    assert!(worst < 0.5, "max |cos| = {worst}");
}

#[test]
fn word_norms_concentrate() {
    let e = enc();
    let d = e.text.dim() as f64;
    let (lo, hi) = (0.5 * d.sqrt() * e.text.sigma(), 1.5 * d.sqrt() * e.text.sigma());
    for w in e.vocab().words() {
        let n = e.text.encode_word(w).unwrap().l2_norm();
        assert!((lo..=hi).contains(&n), "{w}: {n}");
    }
}

#[test]
fn neutral_features_are_distinct() {
    let e = enc();
    let feats: Vec<Tensor> = e.vocab().words().iter().map(|w| e.neutral_feature(w).unwrap()).collect();
    for i in 0..feats.len() {
        for j in i + 1..feats.len() {
            assert!(feats[i].max_abs_diff(&feats[j]) > 0.0);
        }
    }
}

#[test]
fn modulation_differences_are_exactly_additive_for_every_concept() {
    let e = enc();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let spec = SceneSpec::random(&mut rng);
        for cat in Category::ALL {
            let p0 = [cat.concept_word(&spec)];
            let attrs = [cat.attribute_word(&spec)];
            let plus = [attrs[0], p0[0]];
            let lhs = e.prompt_feature(&plus).unwrap();
            let base = e.prompt_feature(&p0).unwrap();
            let rhs = e.prompt_feature(&attrs).unwrap();
            for k in 0..lhs.numel() {
                worst = worst.max((lhs.data()[k] - base.data()[k] - rhs.data()[k]).abs());
            }
        }
    }
    assert!(worst < 1e-12, "{worst}");
}

#[test]
fn frozen_buffers_are_reproducible() {
    assert_eq!(enc().content_hash(), enc().content_hash());
    let other = Encoders::new(
        EncoderConfig {
            seed: 1,
            ..EncoderConfig::default()
        },
        Vocabulary::default_words(),
    );
    assert_ne!(enc().content_hash(), other.content_hash());
}

proptest! {
    #[test]
    fn word_vectors_depend_only_on_word_and_seed(word in "[a-z]{1,10}", seed in any::<u64>()) {
        prop_assert_eq!(word_vector(&word, 16, seed), word_vector(&word, 16, seed));
    }
}
