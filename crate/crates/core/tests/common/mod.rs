//! Shared test oracles.

use std::collections::HashMap;

use a2w::decoder::{DecodeVocab, DecoderConfig};
use a2w::lm::NGramLm;
use ndarray::Array2;

/// Best word sequence over every CTC path, with the LM applied to whole
/// sequences. Returns the word indices and the score.
pub fn exhaustive_decode(
    post: &Array2<f64>,
    vocab: &DecodeVocab,
    lm: Option<&NGramLm>,
    cfg: &DecoderConfig,
) -> (Vec<u32>, f64) {
    let (frames, classes) = post.dim();
    let mut seqs: HashMap<Vec<u32>, f64> = HashMap::new();
    let mut path = vec![0usize; frames];
    for mut code in 0..classes.pow(frames as u32) {
        for p in path.iter_mut() {
            *p = code % classes;
            code /= classes;
        }
        let mut words = Vec::new();
        let mut prev = usize::MAX;
        let mut logp = 0.0;
        for (t, &c) in path.iter().enumerate() {
            let v = if c == 0 { post[[t, 0]] / cfg.blank_divisor } else { post[[t, c]] };
            logp += v.ln();
            if c != prev && c != 0 {
                words.push((c - 1) as u32);
            }
            prev = c;
        }
        *seqs.entry(words).or_insert(0.0) += logp.exp();
    }
    let orth = |ws: &[u32]| ws.iter().map(|&w| vocab.words[w as usize].orth.clone()).collect::<Vec<_>>();
    let mut best: Option<(Vec<u32>, f64)> = None;
    for (words, p) in seqs {
        let mut score = p.ln();
        if let (Some(lm), true) = (lm, cfg.lm_scale > 0.0) {
            let mut state = lm.start();
            let mut lp = 0.0;
            for &w in &words {
                let dw = &vocab.words[w as usize];
                let (l, next) = lm.score(&state, dw.lm_token, dw.dynamic, vocab.contacts_count).unwrap();
                lp += l;
                state = next;
            }
            lp += lm.end_score(&state);
            score += cfg.lm_scale * std::f64::consts::LN_10 * lp;
        }
        let better = match &best {
            None => true,
            Some((bw, bs)) => score > *bs || (score == *bs && orth(&words) < orth(bw)),
        };
        if better {
            best = Some((words, score));
        }
    }
    best.expect("at least one path")
}

/// Rows scaled to sum to one.
pub fn normalize_rows(m: Array2<f64>) -> Array2<f64> {
    let sums = m.sum_axis(ndarray::Axis(1)).insert_axis(ndarray::Axis(1));
    &m / &sums
}
