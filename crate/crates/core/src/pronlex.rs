//! Phoneme inventory, pronunciation lexicon, the toy text encoder that
//! populates `G`, and the pron-to-word posterior collapse.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embed::{EmbeddingVector, FramePosteriors, LabelId, VocabMatrix};
use crate::error::{Error, Result};

pub type PhonemeId = u16;
pub type PronId = u32;
pub type WordId = u32;

/// Ordered set of phoneme symbols; ids are positions.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PhonemeInventory {
    symbols: Vec<String>,
    index: HashMap<String, PhonemeId>,
}

impl PhonemeInventory {
    pub fn new<I, S>(symbols: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut inv = PhonemeInventory::default();
        for s in symbols {
            let s = s.into();
            if inv.index.contains_key(&s) {
                return Err(Error::Input(format!("duplicate phoneme symbol `{s}`")));
            }
            inv.intern(&s);
        }
        Ok(inv)
    }

    fn intern(&mut self, symbol: &str) -> PhonemeId {
        if let Some(&id) = self.index.get(symbol) {
            return id;
        }
        let id = self.symbols.len() as PhonemeId;
        self.symbols.push(symbol.to_string());
        self.index.insert(symbol.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id(&self, symbol: &str) -> Option<PhonemeId> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, id: PhonemeId) -> &str {
        &self.symbols[id as usize]
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn parse_pron(&self, text: &str) -> Result<Vec<PhonemeId>> {
        let ids = text
            .split_whitespace()
            .map(|s| {
                self.id(s)
                    .ok_or_else(|| Error::Input(format!("unknown phoneme `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        if ids.is_empty() {
            return Err(Error::Input("empty pronunciation".into()));
        }
        Ok(ids)
    }

    pub fn format_pron(&self, phonemes: &[PhonemeId]) -> String {
        phonemes
            .iter()
            .map(|&p| self.symbol(p))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// One pronunciation `r_j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pron {
    pub id: PronId,
    pub phonemes: Vec<PhonemeId>,
}

/// Words, their pronunciations, and both directions of the word/pron map.
#[derive(Clone, Debug, PartialEq)]
pub struct PronLexicon {
    inventory: PhonemeInventory,
    words: Vec<String>,
    prons: Vec<Pron>,
    word_to_prons: Vec<Vec<PronId>>,
    pron_to_words: Vec<Vec<WordId>>,
    word_index: HashMap<String, WordId>,
    pron_index: HashMap<Vec<PhonemeId>, PronId>,
}

impl PronLexicon {
    pub fn new(inventory: PhonemeInventory) -> Self {
        PronLexicon {
            inventory,
            words: Vec::new(),
            prons: Vec::new(),
            word_to_prons: Vec::new(),
            pron_to_words: Vec::new(),
            word_index: HashMap::new(),
            pron_index: HashMap::new(),
        }
    }

    /// Adds one (word, pron) pair. A new orthography gets the next word id;
    /// a new phoneme sequence gets the next pron id. Returns both ids.
    pub fn add(&mut self, orthography: &str, phonemes: &[PhonemeId]) -> Result<(WordId, PronId)> {
        if phonemes.is_empty() {
            return Err(Error::Input(format!("empty pronunciation for `{orthography}`")));
        }
        if orthography.is_empty() || orthography.contains(char::is_whitespace) {
            return Err(Error::Input(format!("invalid orthography `{orthography}`")));
        }
        if let Some(&p) = phonemes.iter().find(|&&p| p as usize >= self.inventory.len()) {
            return Err(Error::Input(format!("unknown phoneme id {p}")));
        }
        let word = match self.word_index.get(orthography) {
            Some(&w) => w,
            None => {
                let w = self.words.len() as WordId;
                self.words.push(orthography.to_string());
                self.word_to_prons.push(Vec::new());
                self.word_index.insert(orthography.to_string(), w);
                w
            }
        };
        let pron = match self.pron_index.get(phonemes) {
            Some(&p) => p,
            None => {
                let p = self.prons.len() as PronId;
                self.prons.push(Pron {
                    id: p,
                    phonemes: phonemes.to_vec(),
                });
                self.pron_to_words.push(Vec::new());
                self.pron_index.insert(phonemes.to_vec(), p);
                p
            }
        };
        if self.word_to_prons[word as usize].contains(&pron) {
            return Err(Error::Input(format!(
                "duplicate pronunciation `{}` for `{orthography}`",
                self.inventory.format_pron(phonemes)
            )));
        }
        self.word_to_prons[word as usize].push(pron);
        self.pron_to_words[pron as usize].push(word);
        Ok((word, pron))
    }

    pub fn inventory(&self) -> &PhonemeInventory {
        &self.inventory
    }

    pub fn word_count(&self) -> usize {
        self.words.len()
    }

    pub fn pron_count(&self) -> usize {
        self.prons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn orthography(&self, word: WordId) -> &str {
        &self.words[word as usize]
    }

    pub fn word_id(&self, orthography: &str) -> Option<WordId> {
        self.word_index.get(orthography).copied()
    }

    pub fn pron_id(&self, phonemes: &[PhonemeId]) -> Option<PronId> {
        self.pron_index.get(phonemes).copied()
    }

    pub fn pron(&self, id: PronId) -> &Pron {
        &self.prons[id as usize]
    }

    pub fn prons(&self) -> &[Pron] {
        &self.prons
    }

    /// `R_i`: pron ids of `word`, in insertion order.
    pub fn prons_of(&self, word: WordId) -> &[PronId] {
        &self.word_to_prons[word as usize]
    }

    pub fn words_of(&self, pron: PronId) -> &[WordId] {
        &self.pron_to_words[pron as usize]
    }

    /// Checks the structural invariants; used after loading and in tests.
    pub fn validate(&self) -> Result<()> {
        for (w, prons) in self.word_to_prons.iter().enumerate() {
            if prons.is_empty() {
                return Err(Error::Data(format!("word `{}` has no pronunciation", self.words[w])));
            }
            for &p in prons {
                if !self.pron_to_words[p as usize].contains(&(w as WordId)) {
                    return Err(Error::Internal("pron/word maps disagree".into()));
                }
            }
        }
        for (p, words) in self.pron_to_words.iter().enumerate() {
            if words.is_empty() {
                return Err(Error::Data(format!("pron {p} belongs to no word")));
            }
            for &w in words {
                if !self.word_to_prons[w as usize].contains(&(p as PronId)) {
                    return Err(Error::Internal("pron/word maps disagree".into()));
                }
            }
        }
        Ok(())
    }

    /// A copy with `extra` (orthography, phonemes) pairs appended.
    pub fn extended<'a, I>(&self, extra: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a [PhonemeId])>,
    {
        let mut lex = self.clone();
        for (orth, phones) in extra {
            lex.add(orth, phones)?;
        }
        Ok(lex)
    }

    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (word, orth) in self.words.iter().enumerate() {
            for &p in &self.word_to_prons[word] {
                writeln!(w, "{orth}\t{}", self.inventory.format_pron(&self.prons[p as usize].phonemes))?;
            }
        }
        Ok(())
    }

    pub fn save_tsv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_tsv(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Parses `<orthography>\t<phoneme> <phoneme> …` lines. With an
    /// inventory, unknown symbols are errors; without one, the inventory is
    /// built in order of first appearance.
    pub fn read_tsv<R: BufRead>(r: R, inventory: Option<PhonemeInventory>, source: &str) -> Result<Self> {
        let fixed = inventory.is_some();
        let mut lex = PronLexicon::new(inventory.unwrap_or_default());
        for (i, line) in r.lines().enumerate() {
            let lineno = i + 1;
            let line = line.map_err(|e| Error::io(source, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let (orth, pron) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(source, lineno, "expected `<word>\\t<phonemes>`"))?;
            let mut phones = Vec::new();
            for sym in pron.split_whitespace() {
                let id = match lex.inventory.id(sym) {
                    Some(id) => id,
                    None if !fixed => lex.inventory.intern(sym),
                    None => {
                        return Err(Error::parse(source, lineno, format!("unknown phoneme `{sym}`")))
                    }
                };
                phones.push(id);
            }
            lex.add(orth, &phones)
                .map_err(|e| Error::parse(source, lineno, e.to_string()))?;
        }
        Ok(lex)
    }

    pub fn load_tsv(path: &Path, inventory: Option<PhonemeInventory>) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        PronLexicon::read_tsv(std::io::BufReader::new(file), inventory, &path.display().to_string())
    }
}

/// Settings of the positional-decay text encoder.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub dim: usize,
    pub decay: f64,
    pub seed: u64,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        TextEncoderConfig {
            dim: 40,
            decay: 0.7,
            seed: 0x5eed,
        }
    }
}

/// Toy stand-in for a trained text encoder `g(·)`.
///
/// Each phoneme owns a fixed unit-normal random vector `E[ph]`; a pron is
/// encoded as `Σ_l decay^l · E[ph_l]`, so earlier phonemes weigh more.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    cfg: TextEncoderConfig,
    table: Vec<Vec<f64>>,
}

impl TextEncoder {
    pub fn new(cfg: TextEncoderConfig, phoneme_count: usize) -> Result<Self> {
        if cfg.dim == 0 {
            return Err(Error::Config("encoder dimension must be positive".into()));
        }
        if !(cfg.decay > 0.0 && cfg.decay < 1.0) {
            return Err(Error::Config(format!("decay {} outside (0, 1)", cfg.decay)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let table = (0..phoneme_count)
            .map(|_| (0..cfg.dim).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        Ok(TextEncoder { cfg, table })
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.cfg
    }

    pub fn encode(&self, phonemes: &[PhonemeId]) -> Result<EmbeddingVector> {
        let mut out = vec![0.0; self.cfg.dim];
        let mut weight = 1.0;
        for &p in phonemes {
            let row = self
                .table
                .get(p as usize)
                .ok_or_else(|| Error::Input(format!("unknown phoneme id {p}")))?;
            for (o, e) in out.iter_mut().zip(row) {
                *o += weight * e;
            }
            weight *= self.cfg.decay;
        }
        EmbeddingVector::new(out)
    }

    pub fn encode_pron(&self, pron: &Pron) -> Result<EmbeddingVector> {
        self.encode(&pron.phonemes)
    }
}

/// Whether `G` holds one column per word or one per pronunciation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VocabMode {
    Orth,
    Pron,
}

impl fmt::Display for VocabMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VocabMode::Orth => "orth",
            VocabMode::Pron => "pron",
        })
    }
}

impl FromStr for VocabMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "orth" => Ok(VocabMode::Orth),
            "pron" => Ok(VocabMode::Pron),
            other => Err(Error::Config(format!("unknown vocabulary mode `{other}`"))),
        }
    }
}

/// Column entries for words `words_from..` (orth) or prons `prons_from..`
/// (pron). Orth mode encodes each word by its first listed pron.
pub fn vocab_entries(
    lex: &PronLexicon,
    mode: VocabMode,
    encoder: &TextEncoder,
    words_from: usize,
    prons_from: usize,
) -> Result<Vec<(LabelId, EmbeddingVector)>> {
    match mode {
        VocabMode::Pron => (prons_from..lex.pron_count())
            .map(|p| Ok((p as LabelId, encoder.encode_pron(lex.pron(p as PronId))?)))
            .collect(),
        VocabMode::Orth => (words_from..lex.word_count())
            .map(|w| {
                let first = *lex
                    .prons_of(w as WordId)
                    .first()
                    .ok_or_else(|| Error::Data(format!("word `{}` has no pronunciation", lex.orthography(w as WordId))))?;
                Ok((w as LabelId, encoder.encode_pron(lex.pron(first))?))
            })
            .collect(),
    }
}

/// Builds the static `G` for a lexicon.
pub fn build_vocab(lex: &PronLexicon, mode: VocabMode, encoder: &TextEncoder) -> Result<VocabMatrix> {
    if lex.is_empty() {
        return Err(Error::Config("cannot build a vocabulary from an empty lexicon".into()));
    }
    VocabMatrix::new(encoder.config().dim, vocab_entries(lex, mode, encoder, 0, 0)?)
}

/// Word scores from pron scores: each word takes the max over its prons;
/// index 0 (blank) is copied. Works on probabilities or log-probabilities
/// alike since max commutes with `ln`. `out` must hold `1 + word_count`.
pub fn collapse_slice(pron_scores: &[f64], lex: &PronLexicon, out: &mut [f64]) -> Result<()> {
    if pron_scores.len() != lex.pron_count() + 1 || out.len() != lex.word_count() + 1 {
        return Err(Error::Config(format!(
            "collapse expects {} pron scores and {} word slots, got {} and {}",
            lex.pron_count() + 1,
            lex.word_count() + 1,
            pron_scores.len(),
            out.len()
        )));
    }
    out[0] = pron_scores[0];
    for (w, slot) in out[1..].iter_mut().enumerate() {
        let prons = &lex.word_to_prons[w];
        if prons.is_empty() {
            return Err(Error::Data(format!("word `{}` has no pronunciation", lex.words[w])));
        }
        *slot = prons
            .iter()
            .map(|&p| pron_scores[p as usize + 1])
            .fold(f64::NEG_INFINITY, f64::max);
    }
    Ok(())
}

/// Converts pron posteriors to (unnormalized) word posteriors.
pub fn collapse_to_words(pron_posteriors: &FramePosteriors, lex: &PronLexicon) -> Result<FramePosteriors> {
    let mut probs = vec![0.0; lex.word_count() + 1];
    collapse_slice(&pron_posteriors.probs, lex, &mut probs)?;
    Ok(FramePosteriors { probs })
}

/// Smallest pairwise L2 distance among all pron embeddings of `lex`.
pub fn min_pairwise_distance(lex: &PronLexicon, encoder: &TextEncoder) -> Result<f64> {
    let embs: Vec<EmbeddingVector> = lex.prons().iter().map(|p| encoder.encode_pron(p)).collect::<Result<_>>()?;
    let mut best = f64::INFINITY;
    for i in 0..embs.len() {
        for j in (i + 1)..embs.len() {
            let d: f64 = embs[i]
                .as_slice()
                .iter()
                .zip(embs[j].as_slice())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            best = best.min(d.sqrt());
        }
    }
    Ok(best)
}

/// Set of orthographies, for disjointness checks.
pub fn orthographies(lex: &PronLexicon) -> BTreeSet<&str> {
    lex.words.iter().map(String::as_str).collect()
}
