//! Command-line interface.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderConfig, HypRecord};
use crate::embed::CombineMode;
use crate::error::{Error, Result};
use crate::lm::NGramLm;
use crate::manifest::RunManifest;
use crate::model::{ModelConfig, ToyModel};
use crate::pipeline::{self, Recognizer, VocabSettings, HIGH_LOG_POSTERIOR};
use crate::pronlex::{build_vocab, PhonemeInventory, PronLexicon, TextEncoder, TextEncoderConfig, VocabMode};
use crate::synth::{self, CorpusSpec, Utterance};

#[derive(Parser, Debug)]
#[command(name = "a2w", version, about = "Embedding-matching acoustic-to-word recognition on synthetic speech")]
pub struct Cli {
    /// Overrides the seed of the corpus spec or model config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 1 is the reproducibility reference.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus directory.
    GenCorpus(GenCorpusArgs),
    /// Train an acoustic model against a frozen vocabulary matrix.
    Train(TrainArgs),
    /// Decode a corpus split to hypotheses JSONL.
    Decode(DecodeArgs),
    /// Score hypotheses against references.
    Eval(EvalArgs),
    /// Dump per-frame log posteriors of one utterance as CSV.
    ScoreGrid(ScoreGridArgs),
}

#[derive(Args, Debug)]
pub struct GenCorpusArgs {
    /// Flat `key = value` corpus spec; defaults apply to missing keys.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub mode: VocabMode,
    #[arg(long)]
    pub k: Option<usize>,
    /// Flat `key = value` model config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub combine: Option<CombineMode>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DecodeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Corpus directory.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub lm: Option<PathBuf>,
    #[arg(long)]
    pub lm_scale: Option<f64>,
    #[arg(long)]
    pub blank_div: Option<f64>,
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Flat `key = value` decoder config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Corpus directory holding the references.
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub hyp: PathBuf,
    /// Also write the report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ScoreGridArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub utterance: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Write values below this floor as the floor (the usual display uses -20).
    #[arg(long, allow_negative_numbers = true)]
    pub clip: Option<f64>,
    /// Report whether two distinct words score high at the same frame
    /// inside the first reference word.
    #[arg(long)]
    pub check_overlap: bool,
}

/// Settings accepted by `train --config`.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    #[serde(flatten)]
    pub model: ModelConfig,
    pub encoder_decay: Option<f64>,
    pub encoder_seed: Option<u64>,
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_flat<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    toml::from_str(&read_text(path)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// The files a corpus directory holds.
pub struct CorpusFiles {
    pub dir: PathBuf,
}

impl CorpusFiles {
    pub fn file(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn split(&self, split: &str) -> PathBuf {
        self.dir.join(format!("{split}.jsonl"))
    }

    pub fn inventory(&self) -> Result<PhonemeInventory> {
        let text = read_text(&self.file("phonemes.txt"))?;
        PhonemeInventory::new(text.lines().map(str::trim).filter(|l| !l.is_empty()))
    }

    pub fn lexicon(&self) -> Result<PronLexicon> {
        PronLexicon::load_tsv(&self.file("lexicon.tsv"), Some(self.inventory()?))
    }

    pub fn contacts(&self) -> Result<PronLexicon> {
        let path = self.file("contacts.tsv");
        let text = read_text(&path)?;
        if text.trim().is_empty() {
            return Ok(PronLexicon::new(self.inventory()?));
        }
        PronLexicon::read_tsv(text.as_bytes(), Some(self.inventory()?), &path.display().to_string())
    }

    pub fn utterances(&self, split: &str) -> Result<Vec<Utterance>> {
        synth::load_jsonl(&self.split(split))
    }
}

/// Writes every file of a generated corpus into `dir`; returns the paths.
pub fn write_corpus(corpus: &synth::Corpus, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut put = |name: &str, text: &str| -> Result<()> {
        let p = dir.join(name);
        write_text(&p, text)?;
        written.push(p);
        Ok(())
    };
    put("spec.toml", &corpus.spec.to_toml_string())?;
    let mut phon = corpus.lexicon.inventory().symbols().join("\n");
    phon.push('\n');
    put("phonemes.txt", &phon)?;
    let tsv = |lex: &PronLexicon| -> Result<String> {
        let mut buf = Vec::new();
        lex.write_tsv(&mut buf).map_err(|e| Error::io("<tsv>", e))?;
        Ok(String::from_utf8(buf).expect("utf-8 lexicon"))
    };
    put("lexicon.tsv", &tsv(&corpus.lexicon)?)?;
    put("contacts.tsv", &tsv(&corpus.contact_pool)?)?;
    put("lm.arpa", &corpus.lm_arpa)?;
    let mut pairs = String::new();
    for &(l, s) in &corpus.overlap_pairs {
        pairs.push_str(&format!("{}\t{}\n", corpus.lexicon.orthography(l), corpus.lexicon.orthography(s)));
    }
    put("overlap_pairs.tsv", &pairs)?;
    for (name, utts) in [("train", &corpus.train), ("test", &corpus.test), ("overlap", &corpus.overlap)] {
        let mut buf = Vec::new();
        synth::write_jsonl(&mut buf, utts)?;
        put(&format!("{name}.jsonl"), std::str::from_utf8(&buf).expect("utf-8 json"))?;
    }
    Ok(written)
}

fn gen_corpus(args: &GenCorpusArgs, cli: &Cli) -> Result<()> {
    let start = Instant::now();
    let mut spec = match &args.spec {
        Some(p) => CorpusSpec::from_toml_str(&read_text(p)?)?,
        None => CorpusSpec::default(),
    };
    if let Some(s) = cli.seed {
        spec.seed = s;
    }
    let mut manifest = RunManifest::new("gen-corpus", serde_json::to_value(&spec)?, Some(spec.seed), cli.jobs);
    if let Some(p) = &args.spec {
        manifest.add_input(p)?;
    }
    manifest.seal();
    let corpus = synth::generate(&spec)?;
    let written = write_corpus(&corpus, &args.out)?;
    for p in &written {
        manifest.add_output(p)?;
    }
    manifest.wall_clock_secs = start.elapsed().as_secs_f64();
    manifest.save(&args.out.join("manifest.json"))?;
    println!(
        "wrote {} train, {} test, {} overlap utterances to {}",
        corpus.train.len(),
        corpus.test.len(),
        corpus.overlap.len(),
        args.out.display()
    );
    Ok(())
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn train(args: &TrainArgs, cli: &Cli) -> Result<()> {
    let start = Instant::now();
    let files = CorpusFiles { dir: args.corpus.clone() };
    let mut settings: TrainSettings = match &args.config {
        Some(p) => parse_flat(p)?,
        None => TrainSettings::default(),
    };
    let cfg = &mut settings.model;
    if let Some(k) = args.k {
        cfg.k = k;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(c) = args.combine {
        cfg.combine = c;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let lexicon = files.lexicon()?;
    let train_utts = files.utterances("train")?;
    if let Some(u) = train_utts.first() {
        cfg.feature_dim = u.frames.ncols();
    }
    cfg.validate()?;
    let enc_cfg = TextEncoderConfig {
        dim: cfg.dim,
        decay: settings.encoder_decay.unwrap_or(TextEncoderConfig::default().decay),
        seed: settings.encoder_seed.unwrap_or(TextEncoderConfig::default().seed),
    };
    let encoder = TextEncoder::new(enc_cfg.clone(), lexicon.inventory().len())?;
    let vs = VocabSettings {
        mode: args.mode,
        encoder: enc_cfg,
    };

    let mut manifest = RunManifest::new(
        "train",
        serde_json::json!({ "model": cfg, "vocab": vs }),
        Some(cfg.seed),
        cli.jobs,
    );
    manifest.add_input(&files.file("lexicon.tsv"))?;
    manifest.add_input(&files.split("train"))?;
    let hash = manifest.seal();

    let out = pipeline::train(&train_utts, &lexicon, args.mode, &encoder, cfg, cli.jobs)?;
    let mut meta = BTreeMap::new();
    vs.to_meta(&mut meta);
    meta.insert("manifest".into(), hash);
    meta.insert("vocab.checksum".into(), out.vocab.checksum());
    out.model.save(&args.out, &meta)?;

    let mut csv = String::from("epoch,mean_loss\n");
    for (i, l) in out.report.epoch_losses.iter().enumerate() {
        csv.push_str(&format!("{},{}\n", i + 1, crate::fmt::fmt_g17(*l)));
    }
    let loss_path = sidecar(&args.out, ".losses.csv");
    write_text(&loss_path, &csv)?;
    manifest.add_output(&args.out)?;
    manifest.add_output(&loss_path)?;
    manifest.wall_clock_secs = start.elapsed().as_secs_f64();
    manifest.save(&sidecar(&args.out, ".manifest.json"))?;

    println!("parameters {}", out.model.parameter_count());
    for (name, shape) in out.model.parameter_shapes() {
        println!("  {name} {shape:?}");
    }
    println!("vocab columns {} ({} mode)", out.vocab.len(), args.mode);
    println!("G checksum before {}", out.report.vocab_checksum_before);
    println!("G checksum after  {}", out.report.vocab_checksum_after);
    if out.report.skipped > 0 {
        println!("skipped {} utterances too short for their labels", out.report.skipped);
    }
    if let (Some(first), Some(last)) = (out.report.epoch_losses.first(), out.report.epoch_losses.last()) {
        println!("loss {first:.4} -> {last:.4}");
    }
    Ok(())
}

/// A trained model with everything needed to rebuild its vocabulary.
pub struct LoadedModel {
    pub model: ToyModel,
    pub settings: VocabSettings,
    pub encoder: TextEncoder,
    pub lexicon: PronLexicon,
    pub vocab: crate::embed::VocabMatrix,
}

pub fn load_model(model_path: &Path, files: &CorpusFiles) -> Result<LoadedModel> {
    let (model, meta) = ToyModel::load(model_path)?;
    let settings = VocabSettings::from_meta(&meta)?;
    let lexicon = files.lexicon()?;
    let encoder = TextEncoder::new(settings.encoder.clone(), lexicon.inventory().len())?;
    let vocab = build_vocab(&lexicon, settings.mode, &encoder)?;
    if let Some(sum) = meta.get("vocab.checksum") {
        if *sum != vocab.checksum() {
            return Err(Error::Data(
                "the corpus lexicon does not reproduce the vocabulary the model was trained with".into(),
            ));
        }
    }
    Ok(LoadedModel {
        model,
        settings,
        encoder,
        lexicon,
        vocab,
    })
}

fn decode_cmd(args: &DecodeArgs, cli: &Cli) -> Result<()> {
    let start = Instant::now();
    let files = CorpusFiles { dir: args.corpus.clone() };
    let mut cfg: DecoderConfig = match &args.config {
        Some(p) => parse_flat(p)?,
        None => DecoderConfig::default(),
    };
    if let Some(v) = args.lm_scale {
        cfg.lm_scale = v;
    }
    if let Some(v) = args.blank_div {
        cfg.blank_divisor = v;
    }
    if let Some(v) = args.beam {
        cfg.beam_width = v;
    }
    if let Some(v) = args.top_k {
        cfg.top_k_posteriors = v;
    }
    cfg.validate()?;
    let loaded = load_model(&args.model, &files)?;
    cfg.combine = loaded.model.config().combine;
    let lm = match &args.lm {
        Some(p) => Some(NGramLm::load(p)?),
        None => None,
    };
    let utts = files.utterances(&args.split)?;

    let mut manifest = RunManifest::new("decode", serde_json::to_value(&cfg)?, None, cli.jobs);
    manifest.add_input(&args.model)?;
    manifest.add_input(&files.split(&args.split))?;
    manifest.add_input(&files.file("lexicon.tsv"))?;
    if let Some(p) = &args.lm {
        manifest.add_input(p)?;
    }
    manifest.seal();

    let rec = Recognizer {
        model: &loaded.model,
        lexicon: &loaded.lexicon,
        encoder: &loaded.encoder,
        mode: loaded.settings.mode,
        vocab: &loaded.vocab,
        lm: lm.as_ref(),
    };
    let hyps = rec.decode_all(&utts, &cfg, cli.jobs)?;
    save_hyps(&args.out, &hyps)?;
    manifest.add_output(&args.out)?;
    manifest.wall_clock_secs = start.elapsed().as_secs_f64();
    manifest.save(&sidecar(&args.out, ".manifest.json"))?;
    let failed = hyps.iter().filter(|h| h.error.is_some()).count();
    for h in hyps.iter().filter(|h| h.error.is_some()) {
        eprintln!("{}: {}", h.id, h.error.as_deref().unwrap_or_default());
    }
    println!("decoded {} utterances ({failed} failed) to {}", hyps.len(), args.out.display());
    Ok(())
}

pub fn save_hyps(path: &Path, hyps: &[HypRecord]) -> Result<()> {
    let mut text = String::new();
    for h in hyps {
        text.push_str(&serde_json::to_string(h)?);
        text.push('\n');
    }
    write_text(path, &text)
}

pub fn load_hyps(path: &Path) -> Result<Vec<HypRecord>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| Error::parse(path.display(), i + 1, e.to_string()))?);
    }
    Ok(out)
}

fn eval_cmd(args: &EvalArgs, cli: &Cli) -> Result<()> {
    let start = Instant::now();
    let files = CorpusFiles { dir: args.reference.clone() };
    let refs = files.utterances(&args.split)?;
    let hyps = load_hyps(&args.hyp)?;
    let report = pipeline::evaluate(&refs, &hyps, &files.lexicon()?, &files.contacts()?)?;
    print!("{}", report.table());
    let mut manifest = RunManifest::new("eval", serde_json::json!({ "split": args.split }), None, cli.jobs);
    manifest.add_input(&files.split(&args.split))?;
    manifest.add_input(&args.hyp)?;
    let hash = manifest.seal();
    let mut json = serde_json::to_value(&report)?;
    json["manifest"] = serde_json::Value::String(hash);
    let text = serde_json::to_string_pretty(&json)?;
    println!("{text}");
    if let Some(p) = &args.json {
        write_text(p, &(text + "\n"))?;
        manifest.add_output(p)?;
        manifest.wall_clock_secs = start.elapsed().as_secs_f64();
        manifest.save(&sidecar(p, ".manifest.json"))?;
    }
    Ok(())
}

fn score_grid(args: &ScoreGridArgs, cli: &Cli) -> Result<()> {
    let start = Instant::now();
    let files = CorpusFiles { dir: args.corpus.clone() };
    let loaded = load_model(&args.model, &files)?;
    let utts = files.utterances(&args.split)?;
    let u = utts
        .iter()
        .find(|u| u.id == args.utterance)
        .ok_or_else(|| Error::Data(format!("utterance `{}` not found in {}", args.utterance, args.split)))?;
    let rec = Recognizer {
        model: &loaded.model,
        lexicon: &loaded.lexicon,
        encoder: &loaded.encoder,
        mode: loaded.settings.mode,
        vocab: &loaded.vocab,
        lm: None,
    };
    let ctx = rec.dynamic_context(&u.contacts)?;
    let grid = rec.column_log_posteriors(u.frames.view(), &ctx)?;
    let names = rec.column_names(&ctx);

    let mut manifest = RunManifest::new(
        "score-grid",
        serde_json::json!({ "utterance": args.utterance, "split": args.split, "clip": args.clip }),
        None,
        cli.jobs,
    );
    manifest.add_input(&args.model)?;
    manifest.add_input(&files.split(&args.split))?;
    manifest.seal();
    write_text(&args.out, &pipeline::grid_csv(&names, grid.view(), args.clip))?;
    manifest.add_output(&args.out)?;
    manifest.wall_clock_secs = start.elapsed().as_secs_f64();
    manifest.save(&sidecar(&args.out, ".manifest.json"))?;
    println!("{} frames x {} columns to {}", grid.nrows(), grid.ncols(), args.out.display());

    if args.check_overlap {
        let pass = pipeline::overlap_check(&rec, u, HIGH_LOG_POSTERIOR)?;
        let span = u.word_spans.first().copied().unwrap_or((0, 0));
        let sub = pipeline::subsampled_span(span, loaded.model.config().subsample);
        let words = pipeline::high_words_in_span(grid.view(), &pipeline::column_words(&ctx, rec.mode), sub, HIGH_LOG_POSTERIOR);
        let orths: Vec<&str> = words.iter().map(|&w| ctx.lexicon.orthography(w)).collect();
        println!("high-scoring words in span: {}", orths.join(" "));
        println!("overlap check: {}", if pass { "pass" } else { "fail" });
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    if cli.jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    match &cli.command {
        Command::GenCorpus(a) => gen_corpus(a, cli),
        Command::Train(a) => train(a, cli),
        Command::Decode(a) => decode_cmd(a, cli),
        Command::Eval(a) => eval_cmd(a, cli),
        Command::ScoreGrid(a) => score_grid(a, cli),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => {
            let _ = std::io::stdout().flush();
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
