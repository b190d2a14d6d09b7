use a2w::decoder::DecoderConfig;
use a2w::embed::CombineMode;
use a2w::lm::NGramLm;
use a2w::model::ModelConfig;
use a2w::pipeline::{self, Recognizer, TrainOutcome};
use a2w::pronlex::{TextEncoder, TextEncoderConfig, VocabMode};
use a2w::synth::{generate, Corpus, CorpusSpec};

fn small_corpus() -> Corpus {
    generate(&CorpusSpec {
        utterance_count: 300,
        test_utterance_count: 60,
        overlap_count: 5,
        ..Default::default()
    })
    .unwrap()
}

fn encoder(dim: usize, corpus: &Corpus) -> TextEncoder {
    TextEncoder::new(
        TextEncoderConfig {
            dim,
            ..Default::default()
        },
        corpus.lexicon.inventory().len(),
    )
    .unwrap()
}

fn config(k: usize, corpus: &Corpus) -> ModelConfig {
    ModelConfig {
        dim: 16,
        k,
        context: 2,
        hidden: 48,
        feature_dim: corpus.spec.feature_dim,
        learning_rate: 0.005,
        epochs: 3,
        subsample: 2,
        combine: CombineMode::LogSumExp,
        ..Default::default()
    }
}

fn train(corpus: &Corpus, mode: VocabMode, k: usize, jobs: usize) -> TrainOutcome {
    let enc = encoder(16, corpus);
    pipeline::train(&corpus.train, &corpus.lexicon, mode, &enc, &config(k, corpus), jobs).unwrap()
}

#[test]
fn parallel_training_matches_sequential() {
    let c = small_corpus();
    let a = train(&c, VocabMode::Pron, 2, 1);
    let b = train(&c, VocabMode::Pron, 2, 3);
    assert_eq!(a.report.epoch_losses, b.report.epoch_losses);
    let dir = tempfile::tempdir().unwrap();
    let (pa, pb) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
    a.model.save(&pa, &Default::default()).unwrap();
    b.model.save(&pb, &Default::default()).unwrap();
    assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap());
}

#[test]
fn decoding_is_job_count_independent_and_pruning_is_nearly_lossless() {
    let c = small_corpus();
    let out = train(&c, VocabMode::Pron, 1, 1);
    let enc = encoder(16, &c);
    let lm = NGramLm::from_arpa_str(&c.lm_arpa).unwrap();
    let rec = Recognizer {
        model: &out.model,
        lexicon: &c.lexicon,
        encoder: &enc,
        mode: VocabMode::Pron,
        vocab: &out.vocab,
        lm: Some(&lm),
    };
    let cfg = DecoderConfig {
        blank_divisor: 30.0,
        combine: CombineMode::LogSumExp,
        ..Default::default()
    };
    let seq = rec.decode_all(&c.test, &cfg, 1).unwrap();
    let par = rec.decode_all(&c.test, &cfg, 4).unwrap();
    assert_eq!(seq, par);

    let full = DecoderConfig {
        top_k_posteriors: usize::MAX,
        ..cfg.clone()
    };
    let unpruned = rec.decode_all(&c.test, &full, 1).unwrap();
    let same = seq.iter().zip(&unpruned).filter(|(a, b)| a.hyp_words == b.hyp_words).count();
    assert!(same as f64 >= 0.99 * seq.len() as f64, "{same}/{} agree", seq.len());
}

#[test]
fn utterances_without_contacts_decode_without_extension() {
    let c = generate(&CorpusSpec {
        utterance_count: 120,
        test_utterance_count: 20,
        overlap_count: 3,
        contacts_per_utterance: [0, 0],
        carrier_prob: 0.0,
        mid_carrier_prob: 0.0,
        ..Default::default()
    })
    .unwrap();
    let out = train(&c, VocabMode::Orth, 1, 1);
    let enc = encoder(16, &c);
    let rec = Recognizer {
        model: &out.model,
        lexicon: &c.lexicon,
        encoder: &enc,
        mode: VocabMode::Orth,
        vocab: &out.vocab,
        lm: None,
    };
    let ctx = rec.dynamic_context(&[]).unwrap();
    assert_eq!(ctx.vocab.dynamic_count(), 0);
    let cfg = DecoderConfig {
        lm_scale: 0.0,
        ..Default::default()
    };
    let hyps = rec.decode_all(&c.test, &cfg, 1).unwrap();
    assert!(hyps.iter().all(|h| h.error.is_none() && h.hyp_is_contact.iter().all(|c| !c)));
}

#[test]
fn contact_extension_leaves_static_posterior_scores_alone() {
    let c = small_corpus();
    let out = train(&c, VocabMode::Pron, 3, 1);
    let enc = encoder(16, &c);
    let rec = Recognizer {
        model: &out.model,
        lexicon: &c.lexicon,
        encoder: &enc,
        mode: VocabMode::Pron,
        vocab: &out.vocab,
        lm: None,
    };
    let u = c.test.iter().find(|u| !u.contacts.is_empty()).unwrap();
    let bare = rec.dynamic_context(&[]).unwrap();
    let ext = rec.dynamic_context(&u.contacts).unwrap();
    let scores_bare = out.model.frame_scores(u.frames.view(), &bare.vocab).unwrap();
    let scores_ext = out.model.frame_scores(u.frames.view(), &ext.vocab).unwrap();
    let n = bare.vocab.len() + 1;
    for (a, b) in scores_bare.outer_iter().zip(scores_ext.outer_iter()) {
        for i in 0..n {
            assert_eq!(a[i].to_bits(), b[i].to_bits());
        }
    }
    assert!(ext.vocab.len() > bare.vocab.len());
}

#[test]
fn overlap_check_reads_the_long_word_span() {
    let c = small_corpus();
    let out = train(&c, VocabMode::Pron, 1, 1);
    let enc = encoder(16, &c);
    let rec = Recognizer {
        model: &out.model,
        lexicon: &c.lexicon,
        encoder: &enc,
        mode: VocabMode::Pron,
        vocab: &out.vocab,
        lm: None,
    };
    for (u, &(long, _)) in c.overlap.iter().zip(&c.overlap_pairs) {
        assert_eq!(u.ref_words, vec![long]);
        // a threshold nothing reaches fails, one everything reaches passes
        assert!(!pipeline::overlap_check(&rec, u, 1.0).unwrap());
        assert!(pipeline::overlap_check(&rec, u, f64::NEG_INFINITY).unwrap());
    }
}
