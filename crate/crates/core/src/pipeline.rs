//! Glue between the corpus, the model, the decoder and the scorer.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctc::log_softmax_rows;
use crate::decoder::{decode, DecodeVocab, DecoderConfig, HypRecord};
use crate::embed::{LabelId, VocabMatrix};
use crate::error::{Error, Result};
use crate::eval::{EvalReport, Scorer};
use crate::lm::NGramLm;
use crate::model::{Example, ModelConfig, ToyModel, TrainReport};
use crate::pronlex::{
    build_vocab, collapse_slice, vocab_entries, PhonemeId, PronLexicon, TextEncoder, TextEncoderConfig, VocabMode,
    WordId,
};
use crate::synth::Utterance;

/// Log posterior at or above which a word counts as high-scoring in the
/// overlap check.
pub const HIGH_LOG_POSTERIOR: f64 = -1.0;

/// Training labels of an utterance for `mode`.
pub fn labels_for(u: &Utterance, mode: VocabMode) -> Vec<LabelId> {
    match mode {
        VocabMode::Orth => u.ref_words.clone(),
        VocabMode::Pron => u.ref_prons.clone(),
    }
}

pub struct TrainOutcome {
    pub model: ToyModel,
    pub report: TrainReport,
    pub vocab: VocabMatrix,
}

/// Builds `G` from the static lexicon and trains a fresh model against it.
pub fn train(
    train: &[Utterance],
    lexicon: &PronLexicon,
    mode: VocabMode,
    encoder: &TextEncoder,
    cfg: &ModelConfig,
    jobs: usize,
) -> Result<TrainOutcome> {
    if encoder.config().dim != cfg.dim {
        return Err(Error::Config(format!(
            "encoder dim {} differs from model dim {}",
            encoder.config().dim,
            cfg.dim
        )));
    }
    let vocab = build_vocab(lexicon, mode, encoder)?;
    if let Some(u) = train.iter().find(|u| u.is_contact_mask.iter().any(|&m| m)) {
        return Err(Error::Data(format!("training utterance `{}` mentions a dynamic contact", u.id)));
    }
    let examples: Vec<Example<'_>> = train
        .iter()
        .map(|u| Example {
            frames: u.frames.view(),
            labels: labels_for(u, mode),
        })
        .collect();
    let mut model = ToyModel::new(cfg.clone())?;
    let report = model.train(&examples, &vocab, jobs)?;
    Ok(TrainOutcome { model, report, vocab })
}

/// Per-utterance view of the vocabulary: the static lexicon plus the
/// utterance's contacts, and the matching `G`.
pub struct DynamicContext {
    pub lexicon: PronLexicon,
    pub vocab: VocabMatrix,
    pub contact_orths: Vec<String>,
}

/// Everything needed to turn frames into word posteriors and hypotheses.
pub struct Recognizer<'a> {
    pub model: &'a ToyModel,
    pub lexicon: &'a PronLexicon,
    pub encoder: &'a TextEncoder,
    pub mode: VocabMode,
    pub vocab: &'a VocabMatrix,
    pub lm: Option<&'a NGramLm>,
}

impl Recognizer<'_> {
    pub fn dynamic_context(&self, contacts: &[(String, String)]) -> Result<DynamicContext> {
        let inv = self.lexicon.inventory();
        let mut parsed: Vec<(String, Vec<PhonemeId>)> = Vec::with_capacity(contacts.len());
        for (orth, pron) in contacts {
            let phones = inv
                .parse_pron(pron)
                .map_err(|e| Error::Data(format!("contact `{orth}`: {e}")))?;
            if !parsed.iter().any(|(o, p)| o == orth && *p == phones) {
                parsed.push((orth.clone(), phones));
            }
        }
        let lexicon = self
            .lexicon
            .extended(parsed.iter().map(|(o, p)| (o.as_str(), p.as_slice())))?;
        let entries = vocab_entries(
            &lexicon,
            self.mode,
            self.encoder,
            self.lexicon.word_count(),
            self.lexicon.pron_count(),
        )?;
        let vocab = if entries.is_empty() {
            self.vocab.clone()
        } else {
            self.vocab.extend_dynamic(entries)?
        };
        let contact_orths = (self.lexicon.word_count()..lexicon.word_count())
            .map(|w| lexicon.orthography(w as WordId).to_string())
            .collect();
        Ok(DynamicContext {
            lexicon,
            vocab,
            contact_orths,
        })
    }

    /// Log posteriors over `[blank] ∪ columns of G` per output frame.
    pub fn column_log_posteriors(&self, frames: ArrayView2<f64>, ctx: &DynamicContext) -> Result<Array2<f64>> {
        let scores = self.model.frame_scores(frames, &ctx.vocab)?;
        Ok(log_softmax_rows(scores.view()))
    }

    /// Word posteriors (probabilities) over `[blank] ∪ words`, collapsed by
    /// max over prons in pron mode. Not renormalized.
    pub fn word_posteriors(&self, frames: ArrayView2<f64>, ctx: &DynamicContext) -> Result<Array2<f64>> {
        let lp = self.column_log_posteriors(frames, ctx)?;
        let probs = lp.mapv(f64::exp);
        match self.mode {
            VocabMode::Orth => Ok(probs),
            VocabMode::Pron => {
                let mut out = Array2::zeros((probs.nrows(), ctx.lexicon.word_count() + 1));
                for (src, mut dst) in probs.outer_iter().zip(out.outer_iter_mut()) {
                    collapse_slice(
                        src.as_slice().expect("contiguous"),
                        &ctx.lexicon,
                        dst.as_slice_mut().expect("contiguous"),
                    )?;
                }
                Ok(out)
            }
        }
    }

    fn static_orths(&self) -> Vec<String> {
        (0..self.lexicon.word_count())
            .map(|w| self.lexicon.orthography(w as WordId).to_string())
            .collect()
    }

    pub fn decode_utterance(&self, u: &Utterance, cfg: &DecoderConfig) -> Result<HypRecord> {
        let ctx = self.dynamic_context(&u.contacts)?;
        let post = self.word_posteriors(u.frames.view(), &ctx)?;
        let vocab = DecodeVocab::new(&self.static_orths(), &ctx.contact_orths, self.lm);
        let r = decode(post.view(), &vocab, self.lm, cfg)?;
        Ok(HypRecord::from_result(&u.id, &r, &vocab))
    }

    /// Decodes every utterance; failures become error records.
    pub fn decode_all(&self, utts: &[Utterance], cfg: &DecoderConfig, jobs: usize) -> Result<Vec<HypRecord>> {
        cfg.validate()?;
        let one = |u: &Utterance| {
            self.decode_utterance(u, cfg).unwrap_or_else(|e| HypRecord {
                id: u.id.clone(),
                hyp_words: Vec::new(),
                hyp_is_contact: Vec::new(),
                score: 0.0,
                error: Some(e.to_string()),
            })
        };
        if jobs <= 1 {
            return Ok(utts.iter().map(one).collect());
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Internal(e.to_string()))?;
        Ok(pool.install(|| utts.par_iter().map(one).collect()))
    }

    /// Column labels for a grid: the orthography of each `G` column, plus
    /// the pronunciation in pron mode.
    pub fn column_names(&self, ctx: &DynamicContext) -> Vec<String> {
        (0..ctx.vocab.len())
            .map(|c| {
                let label = ctx.vocab.label(c);
                match self.mode {
                    VocabMode::Orth => ctx.lexicon.orthography(label).to_string(),
                    VocabMode::Pron => {
                        let words: Vec<&str> =
                            ctx.lexicon.words_of(label).iter().map(|&w| ctx.lexicon.orthography(w)).collect();
                        let pron = ctx.lexicon.inventory().format_pron(&ctx.lexicon.pron(label).phonemes);
                        format!("{} /{}/", words.join("|"), pron)
                    }
                }
            })
            .collect()
    }
}

/// Orthography of a reference word id (static or contact-pool).
pub fn ref_orthography(id: WordId, lexicon: &PronLexicon, pool: &PronLexicon) -> Result<String> {
    let n = lexicon.word_count() as WordId;
    if id < n {
        return Ok(lexicon.orthography(id).to_string());
    }
    let c = id - n;
    if (c as usize) < pool.word_count() {
        Ok(pool.orthography(c).to_string())
    } else {
        Err(Error::Data(format!("reference word id {id} is in neither lexicon")))
    }
}

/// Scores hypotheses against references by orthography. Missing
/// hypotheses count as empty.
pub fn evaluate(refs: &[Utterance], hyps: &[HypRecord], lexicon: &PronLexicon, pool: &PronLexicon) -> Result<EvalReport> {
    let by_id: BTreeMap<&str, &HypRecord> = hyps.iter().map(|h| (h.id.as_str(), h)).collect();
    let mut scorer = Scorer::default();
    for u in refs {
        let reference: Vec<String> = u
            .ref_words
            .iter()
            .map(|&w| ref_orthography(w, lexicon, pool))
            .collect::<Result<_>>()?;
        let hyp: &[String] = by_id.get(u.id.as_str()).map_or(&[], |h| &h.hyp_words);
        scorer.add(&reference, hyp, &u.is_contact_mask);
    }
    Ok(scorer.finish())
}

/// Output frames covering input frames `[start, end)` after subsampling.
pub fn subsampled_span(span: (usize, usize), subsample: usize) -> (usize, usize) {
    (span.0.div_ceil(subsample), span.1.div_ceil(subsample))
}

/// Distinct words that are high-scoring somewhere in `span`.
pub fn high_words_in_span(grid: ArrayView2<f64>, column_words: &[WordId], span: (usize, usize), threshold: f64) -> Vec<WordId> {
    let end = span.1.min(grid.nrows());
    let mut out: Vec<WordId> = (span.0..end)
        .flat_map(|t| {
            grid.row(t)
                .iter()
                .enumerate()
                .skip(1)
                .filter(|(_, &v)| v >= threshold)
                .map(|(c, _)| column_words[c - 1])
                .collect::<Vec<_>>()
        })
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Word owning each column of `G` (first word for shared prons).
pub fn column_words(ctx: &DynamicContext, mode: VocabMode) -> Vec<WordId> {
    (0..ctx.vocab.len())
        .map(|c| {
            let label = ctx.vocab.label(c);
            match mode {
                VocabMode::Orth => label,
                VocabMode::Pron => ctx.lexicon.words_of(label)[0],
            }
        })
        .collect()
}

/// Segment-count check on one utterance: passes when at least two distinct
/// words reach `threshold` somewhere inside the span of its first reference
/// word.
pub fn overlap_check(rec: &Recognizer<'_>, u: &Utterance, threshold: f64) -> Result<bool> {
    let span = *u
        .word_spans
        .first()
        .ok_or_else(|| Error::Data(format!("utterance `{}` has no word spans", u.id)))?;
    let ctx = rec.dynamic_context(&u.contacts)?;
    let grid = rec.column_log_posteriors(u.frames.view(), &ctx)?;
    let cols = column_words(&ctx, rec.mode);
    let sub = rec.model.config().subsample;
    Ok(high_words_in_span(grid.view(), &cols, subsampled_span(span, sub), threshold).len() >= 2)
}

/// Writes a score grid as CSV: a header of column names, then one row per
/// frame, values formatted with 17 significant digits. Values below
/// `clip` are written as `clip` when it is set.
pub fn grid_csv(names: &[String], grid: ArrayView2<f64>, clip: Option<f64>) -> String {
    let mut s = String::from("frame,<blank>");
    for n in names {
        s.push(',');
        s.push_str(n);
    }
    s.push('\n');
    for (t, row) in grid.outer_iter().enumerate() {
        s.push_str(&t.to_string());
        for &v in row {
            let v = match clip {
                Some(c) if v < c => c,
                _ => v,
            };
            s.push(',');
            s.push_str(&crate::fmt::fmt_g17(v));
        }
        s.push('\n');
    }
    s
}

/// Encoder and vocabulary settings persisted with a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabSettings {
    pub mode: VocabMode,
    pub encoder: TextEncoderConfig,
}

impl VocabSettings {
    pub fn to_meta(&self, meta: &mut BTreeMap<String, String>) {
        meta.insert("mode".into(), self.mode.to_string());
        meta.insert("encoder.dim".into(), self.encoder.dim.to_string());
        meta.insert("encoder.decay".into(), crate::fmt::fmt_g17(self.encoder.decay));
        meta.insert("encoder.seed".into(), self.encoder.seed.to_string());
    }

    pub fn from_meta(meta: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            meta.get(k)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks `{k}` metadata")))
        };
        let bad = |k: &str| Error::Data(format!("checkpoint metadata `{k}` is malformed"));
        Ok(VocabSettings {
            mode: get("mode")?.parse()?,
            encoder: TextEncoderConfig {
                dim: get("encoder.dim")?.parse().map_err(|_| bad("encoder.dim"))?,
                decay: get("encoder.decay")?.parse().map_err(|_| bad("encoder.decay"))?,
                seed: get("encoder.seed")?.parse().map_err(|_| bad("encoder.seed"))?,
            },
        })
    }
}
