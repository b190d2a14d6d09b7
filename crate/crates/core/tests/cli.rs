use std::path::Path;
use std::process::{Command, Output};

fn a2w(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_a2w"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = a2w(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Generates a tiny corpus and trains a model in `dir`.
fn setup(dir: &Path) {
    std::fs::write(
        dir.join("spec.toml"),
        "utterance_count = 60\ntest_utterance_count = 12\noverlap_count = 3\n",
    )
    .unwrap();
    std::fs::write(dir.join("model.toml"), "epochs = 1\nhidden = 16\ndim = 8\n").unwrap();
    ok(dir, &["gen-corpus", "--spec", "spec.toml", "--out", "c"]);
    ok(dir, &["train", "--corpus", "c", "--mode", "orth", "--config", "model.toml", "--out", "m.bin"]);
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(a2w(dir.path(), &["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(a2w(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(a2w(dir.path(), &["--jobs", "0", "gen-corpus", "--out", "x"]).status.code(), Some(1));
    std::fs::write(dir.path().join("bad.toml"), "no_such_field = 3\n").unwrap();
    assert_eq!(a2w(dir.path(), &["gen-corpus", "--spec", "bad.toml", "--out", "x"]).status.code(), Some(1));
    assert_eq!(a2w(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn missing_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = a2w(dir.path(), &["eval", "--ref", "nowhere", "--hyp", "h.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere"));
}

#[test]
fn end_to_end_commands() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    for f in ["train.jsonl", "test.jsonl", "overlap.jsonl", "lexicon.tsv", "contacts.tsv", "lm.arpa", "phonemes.txt", "manifest.json"] {
        assert!(d.join("c").join(f).exists(), "{f} missing");
    }
    assert!(d.join("m.bin.manifest.json").exists());

    ok(d, &["decode", "--model", "m.bin", "--corpus", "c", "--lm", "c/lm.arpa", "--out", "h1.jsonl"]);
    ok(d, &["decode", "--model", "m.bin", "--corpus", "c", "--lm", "c/lm.arpa", "--out", "h2.jsonl"]);
    assert_eq!(std::fs::read(d.join("h1.jsonl")).unwrap(), std::fs::read(d.join("h2.jsonl")).unwrap());
    let table = ok(d, &["eval", "--ref", "c", "--hyp", "h1.jsonl"]);
    assert!(table.contains("WER"));

    // references fed back as hypotheses score perfectly
    let refs: Vec<a2w::synth::Utterance> = a2w::synth::load_jsonl(&d.join("c/test.jsonl")).unwrap();
    let lex = a2w::pronlex::PronLexicon::load_tsv(&d.join("c/lexicon.tsv"), None).unwrap();
    let pool_text = std::fs::read_to_string(d.join("c/contacts.tsv")).unwrap();
    let pool = a2w::pronlex::PronLexicon::read_tsv(pool_text.as_bytes(), Some(lex.inventory().clone()), "contacts").unwrap();
    let hyps: Vec<a2w::decoder::HypRecord> = refs
        .iter()
        .map(|u| a2w::decoder::HypRecord {
            id: u.id.clone(),
            hyp_words: u.ref_words.iter().map(|&w| a2w::pipeline::ref_orthography(w, &lex, &pool).unwrap()).collect(),
            hyp_is_contact: u.is_contact_mask.clone(),
            score: 0.0,
            error: None,
        })
        .collect();
    a2w::cli::save_hyps(&d.join("perfect.jsonl"), &hyps).unwrap();
    ok(d, &["eval", "--ref", "c", "--hyp", "perfect.jsonl", "--json", "e.json"]);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("e.json")).unwrap()).unwrap();
    assert_eq!(report["wer"], 0.0);
    assert!(report["neer"].is_null() || report["neer"] == 0.0);

    let id = refs[0].id.clone();
    ok(d, &["score-grid", "--model", "m.bin", "--corpus", "c", "--utterance", &id, "--out", "g.csv"]);
    let csv = std::fs::read_to_string(d.join("g.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&header[..2], ["frame", "<blank>"]);
    let mut rows = 0;
    for line in lines {
        let vals: Vec<f64> = line.split(',').skip(1).map(|v| v.parse().unwrap()).collect();
        assert_eq!(vals.len(), header.len() - 1);
        let sum: f64 = vals.iter().map(|v| v.exp()).sum();
        assert!((sum - 1.0).abs() < 1e-6, "row sums to {sum}");
        rows += 1;
    }
    assert!(rows > 0);

    ok(d, &["score-grid", "--model", "m.bin", "--corpus", "c", "--utterance", &id, "--out", "gc.csv", "--clip", "-20"]);
    let clipped = std::fs::read_to_string(d.join("gc.csv")).unwrap();
    assert!(clipped
        .lines()
        .skip(1)
        .flat_map(|l| l.split(',').skip(1).map(|v| v.parse::<f64>().unwrap()).collect::<Vec<_>>())
        .all(|v| v >= -20.0));

    let out = a2w(d, &["score-grid", "--model", "m.bin", "--corpus", "c", "--utterance", "nope", "--out", "x.csv"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn decode_rejects_a_lexicon_that_does_not_match_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    std::fs::write(d.join("other.toml"), "seed = 99\nutterance_count = 60\ntest_utterance_count = 12\noverlap_count = 3\n").unwrap();
    ok(d, &["gen-corpus", "--spec", "other.toml", "--out", "c2"]);
    let out = a2w(d, &["decode", "--model", "m.bin", "--corpus", "c2", "--out", "h.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
}
