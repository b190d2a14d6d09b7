//! CTC prefix beam search over per-frame word posteriors with shallow
//! class-LM fusion at word boundaries.

use std::cmp::Ordering;
use std::collections::HashMap;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::embed::CombineMode;
use crate::error::{Error, Result};
use crate::lm::{LmState, NGramLm, TokenId};
use crate::math::log_add_exp;

const LN_10: f64 = std::f64::consts::LN_10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub beam_width: usize,
    pub top_k_posteriors: usize,
    pub lm_scale: f64,
    pub blank_divisor: f64,
    pub combine: CombineMode,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            beam_width: 16,
            top_k_posteriors: 48,
            lm_scale: 1.0,
            blank_divisor: 1.0,
            combine: CombineMode::Sum,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 || self.top_k_posteriors == 0 {
            return Err(Error::Config("beam_width and top_k_posteriors must be at least 1".into()));
        }
        check_divisor(self.blank_divisor)?;
        if !(self.lm_scale >= 0.0 && self.lm_scale.is_finite()) {
            return Err(Error::Config("lm_scale must be finite and non-negative".into()));
        }
        Ok(())
    }
}

fn check_divisor(d: f64) -> Result<()> {
    if !(d >= 1.0 && d.is_finite()) {
        return Err(Error::Config(format!("blank divisor must be finite and ≥ 1, got {d}")));
    }
    Ok(())
}

/// Divides the blank probability (entry 0) by `divisor` and leaves the
/// word entries as they are. The result is not renormalized.
pub fn apply_blank_heuristic(probs: &[f64], divisor: f64) -> Result<Vec<f64>> {
    check_divisor(divisor)?;
    let mut out = probs.to_vec();
    if let Some(b) = out.first_mut() {
        *b /= divisor;
    }
    Ok(out)
}

/// Keeps the blank and the `k` most probable words as `(column, prob)`
/// pairs in column order; ties at the cut go to the lower column.
pub fn top_k_prune(probs: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut words: Vec<usize> = (1..probs.len()).collect();
    if words.len() > k {
        words.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        words.truncate(k);
        words.sort_unstable();
    }
    let mut out = Vec::with_capacity(words.len() + 1);
    if !probs.is_empty() {
        out.push((0, probs[0]));
    }
    out.extend(words.into_iter().map(|c| (c, probs[c])));
    out
}

/// A decodable word: column `i + 1` of the posterior matrix is word `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeWord {
    pub orth: String,
    /// LM token for static words; `None` maps to `<unk>` or the floor.
    pub lm_token: Option<TokenId>,
    pub dynamic: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeVocab {
    pub words: Vec<DecodeWord>,
    /// Number of distinct contacts sharing the class probability.
    pub contacts_count: usize,
}

impl DecodeVocab {
    /// Vocabulary whose static words are looked up in `lm` by orthography.
    pub fn new(static_words: &[String], contacts: &[String], lm: Option<&NGramLm>) -> Self {
        let mut words: Vec<DecodeWord> = static_words
            .iter()
            .map(|o| DecodeWord {
                orth: o.clone(),
                lm_token: lm.and_then(|lm| lm.static_token(o)),
                dynamic: false,
            })
            .collect();
        words.extend(contacts.iter().map(|o| DecodeWord {
            orth: o.clone(),
            lm_token: None,
            dynamic: true,
        }));
        DecodeVocab {
            words,
            contacts_count: contacts.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    /// Word indices into the vocabulary.
    pub prefix: Vec<u32>,
    pub p_blank: f64,
    pub p_nonblank: f64,
    pub lm_state: LmState,
    /// Accumulated `lm_scale · ln P_LM` in natural-log units.
    pub lm_logprob: f64,
}

impl BeamHypothesis {
    fn acoustic(&self) -> f64 {
        log_add_exp(self.p_blank, self.p_nonblank)
    }

    fn total(&self) -> f64 {
        self.acoustic() + self.lm_logprob
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    pub words: Vec<u32>,
    pub score: f64,
}

/// Orders by descending score, then lexicographically by orthography.
fn rank(a_score: f64, a: &[u32], b_score: f64, b: &[u32], vocab: &DecodeVocab) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| {
        let ao = a.iter().map(|&w| vocab.words[w as usize].orth.as_str());
        let bo = b.iter().map(|&w| vocab.words[w as usize].orth.as_str());
        ao.cmp(bo)
    })
}

struct LmScorer<'a> {
    lm: Option<&'a NGramLm>,
    scale: f64,
    contacts: usize,
}

impl LmScorer<'_> {
    fn start(&self) -> LmState {
        self.lm.map(NGramLm::start).unwrap_or_default()
    }

    fn word(&self, state: &LmState, w: &DecodeWord) -> Result<(f64, LmState)> {
        match self.lm {
            Some(lm) if self.scale > 0.0 => {
                let (lp, next) = lm.score(state, w.lm_token, w.dynamic, self.contacts)?;
                Ok((self.scale * LN_10 * lp, next))
            }
            _ => Ok((0.0, state.clone())),
        }
    }

    fn end(&self, state: &LmState) -> f64 {
        match self.lm {
            Some(lm) if self.scale > 0.0 => self.scale * LN_10 * lm.end_score(state),
            _ => 0.0,
        }
    }
}

/// Decodes a `T × (1 + n)` matrix of word posteriors (column 0 is blank).
pub fn decode(
    posteriors: ArrayView2<f64>,
    vocab: &DecodeVocab,
    lm: Option<&NGramLm>,
    cfg: &DecoderConfig,
) -> Result<DecodeResult> {
    cfg.validate()?;
    let (frames, cols) = posteriors.dim();
    if frames == 0 {
        return Ok(DecodeResult {
            words: Vec::new(),
            score: 0.0,
        });
    }
    if cols != vocab.words.len() + 1 {
        return Err(Error::Config(format!(
            "posteriors have {cols} columns but the vocabulary has {} words",
            vocab.words.len()
        )));
    }
    let scorer = LmScorer {
        lm,
        scale: cfg.lm_scale,
        contacts: vocab.contacts_count,
    };
    let ninf = f64::NEG_INFINITY;
    let mut beam = vec![BeamHypothesis {
        prefix: Vec::new(),
        p_blank: 0.0,
        p_nonblank: ninf,
        lm_state: scorer.start(),
        lm_logprob: 0.0,
    }];

    for row in posteriors.outer_iter() {
        let row = row.to_vec();
        if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Input("posteriors must be finite and non-negative".into()));
        }
        let adjusted = apply_blank_heuristic(&row, cfg.blank_divisor)?;
        let entries: Vec<(usize, f64)> = top_k_prune(&adjusted, cfg.top_k_posteriors)
            .into_iter()
            .map(|(c, p)| (c, p.ln()))
            .collect();
        let lp_blank = entries[0].1;

        let mut next: HashMap<Vec<u32>, BeamHypothesis> = HashMap::new();
        let mut order: Vec<Vec<u32>> = Vec::new();
        let mut touch = |prefix: Vec<u32>,
                         make: &dyn Fn() -> Result<(f64, LmState)>,
                         next: &mut HashMap<Vec<u32>, BeamHypothesis>|
         -> Result<Vec<u32>> {
            if !next.contains_key(&prefix) {
                let (lm_logprob, lm_state) = make()?;
                order.push(prefix.clone());
                next.insert(
                    prefix.clone(),
                    BeamHypothesis {
                        prefix: prefix.clone(),
                        p_blank: ninf,
                        p_nonblank: ninf,
                        lm_state,
                        lm_logprob,
                    },
                );
            }
            Ok(prefix)
        };

        for h in &beam {
            let total = h.acoustic();
            let key = touch(h.prefix.clone(), &|| Ok((h.lm_logprob, h.lm_state.clone())), &mut next)?;
            let e = next.get_mut(&key).expect("inserted");
            e.p_blank = log_add_exp(e.p_blank, total + lp_blank);

            for &(c, lp) in &entries[1..] {
                if lp == ninf {
                    continue;
                }
                let w = (c - 1) as u32;
                if h.prefix.last() == Some(&w) {
                    let e = next.get_mut(&h.prefix).expect("inserted");
                    e.p_nonblank = log_add_exp(e.p_nonblank, h.p_nonblank + lp);
                }
                let mut ext = h.prefix.clone();
                ext.push(w);
                let word = &vocab.words[w as usize];
                let key = touch(
                    ext,
                    &|| {
                        let (l, s) = scorer.word(&h.lm_state, word)?;
                        Ok((h.lm_logprob + l, s))
                    },
                    &mut next,
                )?;
                let from = if h.prefix.last() == Some(&w) { h.p_blank } else { total };
                let e = next.get_mut(&key).expect("inserted");
                e.p_nonblank = log_add_exp(e.p_nonblank, from + lp);
            }
        }

        let mut cands: Vec<BeamHypothesis> = order.into_iter().map(|k| next.remove(&k).expect("present")).collect();
        cands.retain(|h| h.acoustic() > ninf);
        cands.sort_by(|a, b| rank(a.total(), &a.prefix, b.total(), &b.prefix, vocab));
        cands.truncate(cfg.beam_width);
        if cands.is_empty() {
            return Err(Error::Input("every hypothesis has zero probability".into()));
        }
        beam = cands;
    }

    let mut best: Option<(f64, Vec<u32>)> = None;
    for h in beam {
        let s = h.total() + scorer.end(&h.lm_state);
        let better = match &best {
            None => true,
            Some((bs, bp)) => rank(s, &h.prefix, *bs, bp, vocab) == Ordering::Less,
        };
        if better {
            best = Some((s, h.prefix));
        }
    }
    let (score, words) = best.expect("beam is non-empty");
    Ok(DecodeResult { words, score })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypRecord {
    pub id: String,
    pub hyp_words: Vec<String>,
    pub hyp_is_contact: Vec<bool>,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl HypRecord {
    pub fn from_result(id: &str, r: &DecodeResult, vocab: &DecodeVocab) -> Self {
        HypRecord {
            id: id.to_string(),
            hyp_words: r.words.iter().map(|&w| vocab.words[w as usize].orth.clone()).collect(),
            hyp_is_contact: r.words.iter().map(|&w| vocab.words[w as usize].dynamic).collect(),
            score: r.score,
            error: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn vocab(words: &[&str]) -> DecodeVocab {
        let w: Vec<String> = words.iter().map(|s| s.to_string()).collect();
        DecodeVocab::new(&w, &[], None)
    }

    fn no_lm() -> DecoderConfig {
        DecoderConfig {
            lm_scale: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn blank_heuristic_examples() {
        assert_eq!(apply_blank_heuristic(&[0.8, 0.1, 0.1], 1.0).unwrap(), vec![0.8, 0.1, 0.1]);
        assert_eq!(apply_blank_heuristic(&[0.8, 0.1, 0.1], 4.0).unwrap(), vec![0.2, 0.1, 0.1]);
        assert!(matches!(apply_blank_heuristic(&[0.8], 0.5), Err(Error::Config(_))));
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k_prune(&[0.2, 0.5, 0.3], 1), vec![(0, 0.2), (1, 0.5)]);
        assert_eq!(top_k_prune(&[0.2, 0.5, 0.3], 5), vec![(0, 0.2), (1, 0.5), (2, 0.3)]);
        assert_eq!(top_k_prune(&[0.1, 0.3, 0.3, 0.3], 2), vec![(0, 0.1), (1, 0.3), (2, 0.3)]);
    }

    #[test]
    fn dominant_label() {
        let p = array![[0.1, 0.9], [0.1, 0.9], [0.1, 0.9]];
        let r = decode(p.view(), &vocab(&["a"]), None, &no_lm()).unwrap();
        assert_eq!(r.words, vec![0]);
    }

    #[test]
    fn empty_input() {
        let p = Array2::<f64>::zeros((0, 2));
        let r = decode(p.view(), &vocab(&["a"]), None, &no_lm()).unwrap();
        assert!(r.words.is_empty());
        assert_eq!(r.score, 0.0);
    }

    #[test]
    fn repeated_word_needs_blank() {
        let p = array![[0.0, 1.0], [1.0, 0.0], [0.0, 1.0]];
        let r = decode(p.view(), &vocab(&["a"]), None, &no_lm()).unwrap();
        assert_eq!(r.words, vec![0, 0]);
        let p = array![[0.0, 1.0], [0.0, 1.0]];
        let r = decode(p.view(), &vocab(&["a"]), None, &no_lm()).unwrap();
        assert_eq!(r.words, vec![0]);
    }
}
