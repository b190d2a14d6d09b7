use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use a2w::decoder::{decode, DecodeVocab, DecoderConfig};
use a2w::lm::NGramLm;

mod common;
use common::{exhaustive_decode, normalize_rows};

const CALL_LM: &str = "\\data\\
ngram 1=6
ngram 2=4

\\1-grams:
-1.0 </s>
-99 <s> -0.5
-1.5 <unk>
-0.9 $CONTACT -0.3
-0.7 call -0.3
-0.8 jon -0.3

\\2-grams:
-0.05 <s> call
-0.02 call $CONTACT
-0.3 $CONTACT </s>
-3.0 call jon

\\end\\
";

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

fn orths(v: &DecodeVocab, words: &[u32]) -> Vec<String> {
    words.iter().map(|&w| v.words[w as usize].orth.clone()).collect()
}

#[test]
fn larger_blank_divisor_never_emits_fewer_words() {
    let vocab = DecodeVocab::new(&strings(&["a", "b", "c"]), &[], None);
    // weak word evidence under a dominant blank
    let post = array![
        [0.90, 0.06, 0.02, 0.02],
        [0.60, 0.35, 0.03, 0.02],
        [0.95, 0.02, 0.02, 0.01],
        [0.70, 0.02, 0.26, 0.02],
        [0.85, 0.05, 0.05, 0.05],
        [0.55, 0.02, 0.03, 0.40],
        [0.97, 0.01, 0.01, 0.01],
        [0.80, 0.15, 0.03, 0.02],
        [0.75, 0.03, 0.20, 0.02],
        [0.99, 0.00, 0.01, 0.00],
    ];
    let mut counts = Vec::new();
    for d in [1.0, 2.0, 5.0, 10.0, 30.0, 100.0, 1000.0] {
        let cfg = DecoderConfig {
            lm_scale: 0.0,
            blank_divisor: d,
            ..Default::default()
        };
        counts.push(decode(post.view(), &vocab, None, &cfg).unwrap().words.len());
    }
    assert!(counts.windows(2).all(|w| w[0] <= w[1]), "{counts:?}");
    assert!(counts[0] < counts[counts.len() - 1], "{counts:?}");
}

#[test]
fn lm_pulls_contact_over_static_near_homophone() {
    let lm = NGramLm::from_arpa_str(CALL_LM).unwrap();
    let vocab = DecodeVocab::new(&strings(&["call", "jon"]), &strings(&["john", "mary"]), Some(&lm));
    // columns: blank, call, jon, john, mary
    let post = array![
        [0.1, 0.85, 0.02, 0.02, 0.01],
        [0.3, 0.65, 0.02, 0.02, 0.01],
        [0.8, 0.05, 0.07, 0.07, 0.01],
        [0.1, 0.01, 0.47, 0.41, 0.01],
        [0.1, 0.01, 0.47, 0.41, 0.01],
        [0.7, 0.01, 0.15, 0.13, 0.01],
    ];
    let run = |scale: f64| {
        let cfg = DecoderConfig {
            lm_scale: scale,
            beam_width: 64,
            ..Default::default()
        };
        let got = decode(post.view(), &vocab, Some(&lm), &cfg).unwrap();
        let (words, score) = exhaustive_decode(&post, &vocab, Some(&lm), &cfg);
        assert_eq!(got.words, words);
        assert!((got.score - score).abs() < 1e-9);
        orths(&vocab, &got.words)
    };
    assert_eq!(run(0.0), strings(&["call", "jon"]));
    assert_eq!(run(2.0), strings(&["call", "john"]));
}

#[test]
fn zero_lm_scale_ignores_the_lm() {
    let lm = NGramLm::from_arpa_str(CALL_LM).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let vocab = DecodeVocab::new(&strings(&["call", "jon", "x"]), &strings(&["john"]), Some(&lm));
    for _ in 0..50 {
        let post = normalize_rows(Array2::from_shape_fn((6, 5), |_| rng.random_range(0.01..1.0)));
        let cfg = DecoderConfig {
            lm_scale: 0.0,
            ..Default::default()
        };
        let with = decode(post.view(), &vocab, Some(&lm), &cfg).unwrap();
        let without = decode(post.view(), &vocab, None, &cfg).unwrap();
        assert_eq!(with, without);
    }
}

#[test]
fn exact_ties_go_to_the_lexicographically_smaller_prefix() {
    let vocab = DecodeVocab::new(&strings(&["zeta", "alpha"]), &[], None);
    let post = array![[0.2, 0.4, 0.4], [0.2, 0.4, 0.4]];
    let cfg = DecoderConfig {
        lm_scale: 0.0,
        ..Default::default()
    };
    let r = decode(post.view(), &vocab, None, &cfg).unwrap();
    assert_eq!(orths(&vocab, &r.words), strings(&["alpha"]));
}

#[test]
fn contact_without_class_symbol_is_a_data_error() {
    let lm = NGramLm::from_arpa_str("\\data\\\nngram 1=2\n\n\\1-grams:\n-0.5 a\n-0.5 </s>\n\n\\end\\\n").unwrap();
    let vocab = DecodeVocab::new(&strings(&["a"]), &strings(&["john"]), Some(&lm));
    let post = array![[0.1, 0.1, 0.8]];
    let cfg = DecoderConfig::default();
    assert!(matches!(decode(post.view(), &vocab, Some(&lm), &cfg), Err(a2w::Error::Data(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn permuting_labels_permutes_the_output(
        seed in any::<u64>(),
        n in 2usize..6,
        frames in 1usize..8,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
        let post = normalize_rows(Array2::from_shape_fn((frames, n + 1), |_| rng.random_range(0.01..1.0)));
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let pnames: Vec<String> = perm.iter().map(|&p| names[p].clone()).collect();
        let mut ppost = post.clone();
        for (i, &p) in perm.iter().enumerate() {
            ppost.column_mut(i + 1).assign(&post.column(p + 1));
        }
        let cfg = DecoderConfig { lm_scale: 0.0, blank_divisor: 3.0, ..Default::default() };
        let v = DecodeVocab::new(&names, &[], None);
        let pv = DecodeVocab::new(&pnames, &[], None);
        let a = decode(post.view(), &v, None, &cfg).unwrap();
        let b = decode(ppost.view(), &pv, None, &cfg).unwrap();
        prop_assert_eq!(orths(&v, &a.words), orths(&pv, &b.words));
        prop_assert!((a.score - b.score).abs() < 1e-12);
    }

    #[test]
    fn narrow_beam_never_beats_the_exhaustive_score(
        seed in any::<u64>(),
        n in 1usize..4,
        frames in 1usize..5,
        beam in 1usize..4,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
        let post = normalize_rows(Array2::from_shape_fn((frames, n + 1), |_| rng.random_range(0.01..1.0)));
        let v = DecodeVocab::new(&names, &[], None);
        let cfg = DecoderConfig { lm_scale: 0.0, beam_width: beam, ..Default::default() };
        let got = decode(post.view(), &v, None, &cfg).unwrap();
        let (_, best) = exhaustive_decode(&post, &v, None, &cfg);
        prop_assert!(got.score <= best + 1e-12);
    }
}
