//! Synthetic "speech" corpora.
//!
//! Every phoneme owns a random prototype feature vector. An utterance is a
//! word sequence sampled from a sparse bigram process; its frames are the
//! prototypes of the realized pronunciations, each held for a random number
//! of frames, plus Gaussian noise. Utterances opened by a carrier word
//! ("call", "text", …) put a name in the following slot: a static training
//! name in the training set, an out-of-vocabulary contact in the test set.
//!
//! Some static words are compounds whose pronunciation is the concatenation
//! of two other static words, and the bigram process can emit both the
//! compound and the split pair. The frames are then identical and only the
//! language model can tell them apart.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pronlex::{PhonemeId, PhonemeInventory, PronId, PronLexicon, WordId};

/// LM token for the contact-name class.
pub const CONTACT_CLASS: &str = "$CONTACT";

const ARPABET: [&str; 39] = [
    "aa", "ae", "ah", "ao", "aw", "ay", "b", "ch", "d", "dh", "eh", "er", "ey", "f", "g", "hh", "ih",
    "iy", "jh", "k", "l", "m", "n", "ng", "ow", "oy", "p", "r", "s", "sh", "t", "th", "uh", "uw", "v",
    "w", "y", "z", "zh",
];

const CARRIERS: [&str; 6] = ["call", "text", "message", "email", "phone", "ping"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub seed: u64,
    pub phoneme_count: usize,
    pub feature_dim: usize,
    /// Inclusive range of frames each phoneme occupies.
    pub frames_per_phoneme: [usize; 2],
    pub noise_sigma: f64,
    /// Inclusive range of phonemes per base word.
    pub pron_len: [usize; 2],
    /// Number of base (non-compound, non-name) words.
    pub vocab_size: usize,
    /// Fraction of base words and names given a second pronunciation.
    pub multi_pron_fraction: f64,
    pub homophone_pairs: usize,
    /// Static words whose pron concatenates two base words.
    pub compound_count: usize,
    pub carrier_count: usize,
    /// Static names used to fill the name slot of training sentences.
    pub train_name_count: usize,
    pub contact_pool_size: usize,
    /// Fraction of names built by concatenating two base-word prons.
    pub name_compound_fraction: f64,
    /// Inclusive range of contact-list sizes for test utterances.
    pub contacts_per_utterance: [usize; 2],
    pub utterance_count: usize,
    pub test_utterance_count: usize,
    /// Number of single-word utterances of prefix-ambiguous words.
    pub overlap_count: usize,
    /// Probability that a sentence opens with a carrier word.
    pub carrier_prob: f64,
    pub end_prob: f64,
    /// Mass of carrier words after a regular word or a name.
    pub mid_carrier_prob: f64,
    /// Probability that a compound's first part is followed by its second.
    pub compound_split_prob: f64,
    pub max_words: usize,
    pub fanout: usize,
    /// Bigram mass reserved for backoff in the emitted ARPA model.
    pub backoff_mass: f64,
    /// Silence frames before and after each utterance.
    pub edge_silence: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            seed: 7,
            phoneme_count: 24,
            feature_dim: 12,
            frames_per_phoneme: [1, 2],
            noise_sigma: 0.3,
            pron_len: [2, 3],
            vocab_size: 80,
            multi_pron_fraction: 0.3,
            homophone_pairs: 4,
            compound_count: 20,
            carrier_count: 4,
            train_name_count: 30,
            contact_pool_size: 200,
            name_compound_fraction: 0.5,
            contacts_per_utterance: [5, 15],
            utterance_count: 2000,
            test_utterance_count: 400,
            overlap_count: 40,
            carrier_prob: 0.45,
            end_prob: 0.12,
            mid_carrier_prob: 0.08,
            compound_split_prob: 0.4,
            max_words: 10,
            fanout: 6,
            backoff_mass: 0.05,
            edge_silence: 1,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.phoneme_count < 2 || self.phoneme_count > 99 {
            return bad("phoneme_count must be in 2..=99");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive");
        }
        for (name, [lo, hi]) in [
            ("frames_per_phoneme", self.frames_per_phoneme),
            ("pron_len", self.pron_len),
            ("contacts_per_utterance", self.contacts_per_utterance),
        ] {
            if lo > hi {
                return Err(Error::Config(format!("{name} range is empty")));
            }
        }
        if self.frames_per_phoneme[0] == 0 || self.pron_len[0] == 0 {
            return bad("frames_per_phoneme and pron_len must start at 1 or more");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be non-negative");
        }
        for (name, p) in [
            ("multi_pron_fraction", self.multi_pron_fraction),
            ("name_compound_fraction", self.name_compound_fraction),
            ("carrier_prob", self.carrier_prob),
            ("end_prob", self.end_prob),
            ("mid_carrier_prob", self.mid_carrier_prob),
            ("compound_split_prob", self.compound_split_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.end_prob + self.mid_carrier_prob + self.compound_split_prob >= 1.0 {
            return bad("end_prob + mid_carrier_prob + compound_split_prob must stay below 1");
        }
        if !(self.backoff_mass > 0.0 && self.backoff_mass < 1.0) {
            return bad("backoff_mass must lie in (0, 1)");
        }
        if self.vocab_size == 0 || self.max_words == 0 || self.fanout == 0 {
            return bad("vocab_size, max_words and fanout must be positive");
        }
        if self.carrier_count > CARRIERS.len() {
            return Err(Error::Config(format!("at most {} carriers", CARRIERS.len())));
        }
        if self.carrier_prob > 0.0 && (self.carrier_count == 0 || self.train_name_count == 0) {
            return bad("carrier sentences need carriers and training names");
        }
        Ok(())
    }

    /// Reads a flat `key = value` file.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: CorpusSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }
}

/// One synthetic utterance. Word ids below the static word count index the
/// static lexicon; larger ids are `static_words + contact pool index`.
/// Pron ids follow the same scheme.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    #[serde(with = "frames_serde")]
    pub frames: Array2<f64>,
    pub ref_words: Vec<WordId>,
    pub ref_prons: Vec<PronId>,
    /// Dynamic vocabulary: (orthography, space-separated phonemes) pairs.
    pub contacts: Vec<(String, String)>,
    pub is_contact_mask: Vec<bool>,
    /// Half-open frame range of every reference word.
    #[serde(default)]
    pub word_spans: Vec<(usize, usize)>,
}

mod frames_serde {
    use ndarray::Array2;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(a: &Array2<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = a.outer_iter().map(|r| r.to_vec()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array2<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(serde::de::Error::custom("ragged frame matrix"));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        let t = if width == 0 { 0 } else { flat.len() / width };
        Array2::from_shape_vec((t, width), flat).map_err(serde::de::Error::custom)
    }
}

/// A generated corpus with its lexica and language model.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub lexicon: PronLexicon,
    pub contact_pool: PronLexicon,
    pub train: Vec<Utterance>,
    pub test: Vec<Utterance>,
    /// Single-word utterances of prefix-ambiguous words.
    pub overlap: Vec<Utterance>,
    pub overlap_pairs: Vec<(WordId, WordId)>,
    /// Bigram model of the sentence process in ARPA text form.
    pub lm_arpa: String,
    pub prototypes: Array2<f64>,
}

/// Role of a static word in the sentence process.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Role {
    Carrier,
    Regular,
    Name,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
enum Token {
    Start,
    End,
    Word(WordId),
    Contact,
}

struct Grammar {
    /// Successor distributions over tokens, keyed by history.
    succ: BTreeMap<Token, Vec<(Token, f64)>>,
}

impl Grammar {
    fn sample(&self, from: &Token, rng: &mut ChaCha8Rng) -> Token {
        let dist = &self.succ[from];
        let mut u: f64 = rng.random();
        for (tok, p) in dist {
            if u < *p {
                return tok.clone();
            }
            u -= p;
        }
        dist.last().expect("non-empty distribution").0.clone()
    }
}

fn phoneme_symbols(count: usize) -> Vec<String> {
    if count <= ARPABET.len() {
        ARPABET[..count].iter().map(|s| s.to_string()).collect()
    } else {
        (0..count).map(|i| format!("p{i:02}")).collect()
    }
}

fn random_pron(rng: &mut ChaCha8Rng, phonemes: usize, len: [usize; 2]) -> Vec<PhonemeId> {
    let n = rng.random_range(len[0]..=len[1]);
    (0..n).map(|_| rng.random_range(0..phonemes) as PhonemeId).collect()
}

fn orth_of(inv: &PhonemeInventory, pron: &[PhonemeId]) -> String {
    pron.iter().map(|&p| inv.symbol(p)).collect()
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

/// Registry of used prons and orthographies across static and contact words.
#[derive(Default)]
struct Used {
    prons: HashSet<Vec<PhonemeId>>,
    orths: HashSet<String>,
}

impl Used {
    fn fresh_pron(&self, p: &[PhonemeId]) -> bool {
        !self.prons.contains(p)
    }

    /// Claims `orth`, appending a letter suffix until it is unused.
    fn claim_orth(&mut self, base: &str) -> String {
        let mut orth = base.to_string();
        let mut i = 0u8;
        while self.orths.contains(&orth) {
            orth = format!("{base}{}", (b'a' + i % 26) as char);
            i += 1;
        }
        self.orths.insert(orth.clone());
        orth
    }
}

fn variant_pron(rng: &mut ChaCha8Rng, base: &[PhonemeId], phonemes: usize, used: &Used) -> Option<Vec<PhonemeId>> {
    for _ in 0..50 {
        let mut v = base.to_vec();
        let pos = rng.random_range(0..v.len());
        let new = rng.random_range(0..phonemes) as PhonemeId;
        if new == v[pos] {
            continue;
        }
        v[pos] = new;
        if used.fresh_pron(&v) {
            return Some(v);
        }
    }
    None
}

struct NameSpec {
    orth: String,
    prons: Vec<Vec<PhonemeId>>,
}

fn make_names(
    rng: &mut ChaCha8Rng,
    count: usize,
    spec: &CorpusSpec,
    inv: &PhonemeInventory,
    base_prons: &[Vec<PhonemeId>],
    used: &mut Used,
) -> Result<Vec<NameSpec>> {
    let mut names = Vec::with_capacity(count);
    let mut attempts = 0;
    while names.len() < count {
        attempts += 1;
        if attempts > count * 200 + 1000 {
            return Err(Error::Generation(format!(
                "could only create {} of {count} distinct names",
                names.len()
            )));
        }
        let pron: Vec<PhonemeId> = if base_prons.len() >= 2 && rng.random_bool(spec.name_compound_fraction) {
            let a = base_prons.choose(rng).expect("non-empty");
            let b = base_prons.choose(rng).expect("non-empty");
            a.iter().chain(b).copied().collect()
        } else {
            random_pron(rng, spec.phoneme_count, [spec.pron_len[1], spec.pron_len[1] + 2])
        };
        if !used.fresh_pron(&pron) {
            continue;
        }
        used.prons.insert(pron.clone());
        let mut prons = vec![pron.clone()];
        if rng.random_bool(spec.multi_pron_fraction) {
            if let Some(v) = variant_pron(rng, &pron, spec.phoneme_count, used) {
                used.prons.insert(v.clone());
                prons.push(v);
            }
        }
        let orth = used.claim_orth(&capitalize(&orth_of(inv, &pron)));
        names.push(NameSpec { orth, prons });
    }
    Ok(names)
}

/// Pairs `(w_long, w_short)` where some pron of `w_short` is a strict prefix
/// of some pron of `w_long`. Returns at most `count` pairs in word-id order
/// and whether `count` were found.
pub fn make_ambiguous_pairs(lex: &PronLexicon, count: usize) -> (Vec<(WordId, WordId)>, bool) {
    let mut by_pron: BTreeMap<&[PhonemeId], Vec<WordId>> = BTreeMap::new();
    for p in lex.prons() {
        by_pron.insert(&p.phonemes, lex.words_of(p.id).to_vec());
    }
    let mut pairs = BTreeSet::new();
    for long in lex.prons() {
        for cut in 1..long.phonemes.len() {
            if let Some(shorts) = by_pron.get(&long.phonemes[..cut]) {
                for &wl in lex.words_of(long.id) {
                    for &ws in shorts {
                        if wl != ws {
                            pairs.insert((wl, ws));
                        }
                    }
                }
            }
        }
    }
    let all: Vec<_> = pairs.into_iter().collect();
    let complete = all.len() >= count;
    (all.into_iter().take(count).collect(), complete)
}

/// True when every pron of `long` … of `short` is a strict prefix of one of
/// `long`'s prons.
pub fn is_prefix_pair(lex: &PronLexicon, long: WordId, short: WordId) -> bool {
    lex.prons_of(long).iter().any(|&pl| {
        let l = &lex.pron(pl).phonemes;
        lex.prons_of(short).iter().any(|&ps| {
            let s = &lex.pron(ps).phonemes;
            s.len() < l.len() && l.starts_with(s)
        })
    })
}

struct Renderer<'a> {
    spec: &'a CorpusSpec,
    prototypes: &'a Array2<f64>,
    silence: Vec<f64>,
    noise: Normal<f64>,
}

impl Renderer<'_> {
    /// Frames for a sequence of prons, with per-word spans.
    fn render(&self, prons: &[&[PhonemeId]], rng: &mut ChaCha8Rng) -> (Array2<f64>, Vec<(usize, usize)>) {
        let f = self.spec.feature_dim;
        let mut rows: Vec<f64> = Vec::new();
        let mut t = 0;
        let mut spans = Vec::with_capacity(prons.len());
        let push = |row: &[f64], rows: &mut Vec<f64>, rng: &mut ChaCha8Rng| {
            for v in row {
                let x = v + self.noise.sample(rng);
                rows.push(round6(x));
            }
        };
        for _ in 0..self.spec.edge_silence {
            push(&self.silence, &mut rows, rng);
            t += 1;
        }
        for pron in prons {
            let start = t;
            for &ph in *pron {
                let d = rng.random_range(self.spec.frames_per_phoneme[0]..=self.spec.frames_per_phoneme[1]);
                let proto = self.prototypes.row(ph as usize).to_vec();
                for _ in 0..d {
                    push(&proto, &mut rows, rng);
                    t += 1;
                }
            }
            spans.push((start, t));
        }
        for _ in 0..self.spec.edge_silence {
            push(&self.silence, &mut rows, rng);
            t += 1;
        }
        (Array2::from_shape_vec((t, f), rows).expect("row-major frames"), spans)
    }
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

/// Generates the full corpus deterministically from `spec`.
pub fn generate(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let inv = PhonemeInventory::new(phoneme_symbols(spec.phoneme_count))?;
    let mut used = Used::default();

    // base words
    let mut base: Vec<Vec<PhonemeId>> = Vec::with_capacity(spec.vocab_size);
    let mut attempts = 0;
    while base.len() < spec.vocab_size {
        attempts += 1;
        if attempts > spec.vocab_size * 200 + 1000 {
            return Err(Error::Generation(format!(
                "vocab_size {} exceeds the distinct prons available with {} phonemes and lengths {:?}",
                spec.vocab_size, spec.phoneme_count, spec.pron_len
            )));
        }
        let p = random_pron(&mut rng, spec.phoneme_count, spec.pron_len);
        if used.fresh_pron(&p) {
            used.prons.insert(p.clone());
            base.push(p);
        }
    }

    let mut lex = PronLexicon::new(inv.clone());
    let mut roles: Vec<Role> = Vec::new();
    let add_word = |lex: &mut PronLexicon, roles: &mut Vec<Role>, orth: &str, prons: &[Vec<PhonemeId>], role: Role| -> Result<WordId> {
        let mut id = 0;
        for p in prons {
            id = lex.add(orth, p)?.0;
        }
        if id as usize == roles.len() {
            roles.push(role);
        }
        Ok(id)
    };

    for c in CARRIERS.iter().take(spec.carrier_count) {
        let pron = loop {
            let p = random_pron(&mut rng, spec.phoneme_count, spec.pron_len);
            if used.fresh_pron(&p) {
                break p;
            }
        };
        used.prons.insert(pron.clone());
        used.orths.insert(c.to_string());
        add_word(&mut lex, &mut roles, c, &[pron], Role::Carrier)?;
    }

    let mut base_ids = Vec::with_capacity(base.len());
    for p in &base {
        let mut prons = vec![p.clone()];
        if rng.random_bool(spec.multi_pron_fraction) {
            if let Some(v) = variant_pron(&mut rng, p, spec.phoneme_count, &used) {
                used.prons.insert(v.clone());
                prons.push(v);
            }
        }
        let orth = used.claim_orth(&orth_of(&inv, p));
        base_ids.push(add_word(&mut lex, &mut roles, &orth, &prons, Role::Regular)?);
    }

    // homophone twins: a new spelling of an existing single-pron base word
    let single: Vec<usize> = (0..base.len())
        .filter(|&i| lex.prons_of(base_ids[i]).len() == 1)
        .collect();
    for &i in single.choose_multiple(&mut rng, spec.homophone_pairs.min(single.len())) {
        let orth = used.claim_orth(&format!("{}e", orth_of(&inv, &base[i])));
        add_word(&mut lex, &mut roles, &orth, &[base[i].clone()], Role::Regular)?;
    }

    // compounds of two base words
    let mut compound_parts: Vec<(WordId, WordId, WordId)> = Vec::new();
    let mut tries = 0;
    while compound_parts.len() < spec.compound_count {
        tries += 1;
        if tries > spec.compound_count * 200 + 1000 {
            return Err(Error::Generation("could not create enough distinct compounds".into()));
        }
        let a = rng.random_range(0..base.len());
        let b = rng.random_range(0..base.len());
        let pron: Vec<PhonemeId> = base[a].iter().chain(&base[b]).copied().collect();
        if !used.fresh_pron(&pron) {
            continue;
        }
        used.prons.insert(pron.clone());
        let orth = used.claim_orth(&format!("{}{}", lex.orthography(base_ids[a]), lex.orthography(base_ids[b])));
        let id = add_word(&mut lex, &mut roles, &orth, &[pron], Role::Regular)?;
        compound_parts.push((id, base_ids[a], base_ids[b]));
    }

    let train_names = make_names(&mut rng, spec.train_name_count, spec, &inv, &base, &mut used)?;
    let mut name_ids = Vec::with_capacity(train_names.len());
    for n in &train_names {
        name_ids.push(add_word(&mut lex, &mut roles, &n.orth, &n.prons, Role::Name)?);
    }

    let contacts = make_names(&mut rng, spec.contact_pool_size, spec, &inv, &base, &mut used)?;
    let mut pool = PronLexicon::new(inv.clone());
    for n in &contacts {
        for p in &n.prons {
            pool.add(&n.orth, p)?;
        }
    }
    lex.validate()?;
    pool.validate()?;

    // sentence process
    let regular: Vec<WordId> = (0..lex.word_count() as WordId)
        .filter(|&w| roles[w as usize] == Role::Regular)
        .collect();
    let carriers: Vec<WordId> = (0..lex.word_count() as WordId)
        .filter(|&w| roles[w as usize] == Role::Carrier)
        .collect();
    let successors = |rng: &mut ChaCha8Rng, extra: &[WordId], fanout: usize| -> Vec<(Token, f64)> {
        let mut picks: BTreeSet<WordId> = extra.iter().copied().collect();
        for &w in regular.choose_multiple(rng, fanout) {
            picks.insert(w);
        }
        picks
            .into_iter()
            .map(|w| (Token::Word(w), rng.random_range(0.2..1.0)))
            .collect()
    };
    let normalize = |mut v: Vec<(Token, f64)>, fixed: Vec<(Token, f64)>| -> Vec<(Token, f64)> {
        let fixed_mass: f64 = fixed.iter().map(|(_, p)| p).sum();
        let z: f64 = v.iter().map(|(_, p)| p).sum();
        let mut out = fixed;
        if z == 0.0 {
            out.iter_mut().for_each(|(_, p)| *p /= fixed_mass);
            return out;
        }
        for (_, p) in &mut v {
            *p *= (1.0 - fixed_mass) / z;
        }
        out.extend(v);
        out
    };
    let mut succ: BTreeMap<Token, Vec<(Token, f64)>> = BTreeMap::new();
    let carrier_mass = if carriers.is_empty() { 0.0 } else { spec.carrier_prob };
    let start_fixed: Vec<(Token, f64)> = carriers
        .iter()
        .map(|&c| (Token::Word(c), carrier_mass / carriers.len() as f64))
        .collect();
    // sentences may open with any regular word
    let s = successors(&mut rng, &[], regular.len());
    succ.insert(Token::Start, normalize(s, start_fixed));
    for &c in &carriers {
        let s = successors(&mut rng, &[], spec.fanout);
        succ.insert(Token::Word(c), normalize(s, vec![(Token::Contact, 0.9)]));
    }
    let mid_fixed = |end: f64| -> Vec<(Token, f64)> {
        let mut fixed = vec![(Token::End, end)];
        let share = if carriers.is_empty() { 0.0 } else { spec.mid_carrier_prob / carriers.len() as f64 };
        fixed.extend(carriers.iter().map(|&c| (Token::Word(c), share)));
        fixed
    };
    let s = successors(&mut rng, &[], spec.fanout);
    succ.insert(Token::Contact, normalize(s, mid_fixed(spec.end_prob)));
    for &w in &regular {
        // a compound's first part is often followed by its second part,
        // which makes the split reading acoustically identical to the compound
        let mut parts: Vec<WordId> = compound_parts
            .iter()
            .filter(|(_, a, _)| *a == w)
            .map(|(_, _, b)| *b)
            .collect();
        parts.sort_unstable();
        parts.dedup();
        let s = successors(&mut rng, &[], spec.fanout);
        let s: Vec<(Token, f64)> = s.into_iter().filter(|(t, _)| !matches!(t, Token::Word(x) if parts.contains(x))).collect();
        let mut fixed = mid_fixed(spec.end_prob);
        fixed.extend(parts.iter().map(|&b| (Token::Word(b), spec.compound_split_prob / parts.len() as f64)));
        succ.insert(Token::Word(w), normalize(s, fixed));
    }
    let grammar = Grammar { succ };

    let mut prototypes = Array2::<f64>::zeros((spec.phoneme_count, spec.feature_dim));
    prototypes.mapv_inplace(|_| round6(StandardNormal.sample(&mut rng)));
    let renderer = Renderer {
        spec,
        prototypes: &prototypes,
        silence: vec![0.0; spec.feature_dim],
        noise: Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?,
    };

    let static_words = lex.word_count() as WordId;
    let static_prons = lex.pron_count() as PronId;
    let sample_sentence = |rng: &mut ChaCha8Rng| -> Vec<Token> {
        let mut out = Vec::new();
        let mut cur = Token::Start;
        loop {
            let mut next = grammar.sample(&cur, rng);
            if out.len() == spec.max_words {
                next = Token::End;
            }
            if next == Token::End {
                if out.is_empty() {
                    cur = Token::Start;
                    continue;
                }
                break;
            }
            out.push(next.clone());
            cur = next;
        }
        out
    };

    let realize = |rng: &mut ChaCha8Rng, id: String, tokens: &[Token], test: bool| -> Utterance {
        let mut ref_words = Vec::new();
        let mut ref_prons = Vec::new();
        let mut mask = Vec::new();
        let mut phones: Vec<Vec<PhonemeId>> = Vec::new();
        for tok in tokens {
            let (word, pron_ids, is_contact) = match tok {
                Token::Word(w) => (*w, lex.prons_of(*w).to_vec(), false),
                Token::Contact if test => {
                    let c = rng.random_range(0..pool.word_count()) as WordId;
                    (c, pool.prons_of(c).to_vec(), true)
                }
                Token::Contact => {
                    let n = *name_ids.choose(rng).expect("training names exist");
                    (n, lex.prons_of(n).to_vec(), false)
                }
                Token::Start | Token::End => unreachable!("sentences hold only words"),
            };
            let p = *pron_ids.choose(rng).expect("word has a pron");
            if is_contact {
                ref_words.push(static_words + word);
                ref_prons.push(static_prons + p);
                phones.push(pool.pron(p).phonemes.clone());
            } else {
                ref_words.push(word);
                ref_prons.push(p);
                phones.push(lex.pron(p).phonemes.clone());
            }
            mask.push(is_contact);
        }
        let refs: Vec<&[PhonemeId]> = phones.iter().map(Vec::as_slice).collect();
        let (frames, word_spans) = renderer.render(&refs, rng);
        Utterance {
            id,
            frames,
            ref_words,
            ref_prons,
            contacts: Vec::new(),
            is_contact_mask: mask,
            word_spans,
        }
    };

    let mut train = Vec::with_capacity(spec.utterance_count);
    for i in 0..spec.utterance_count {
        let toks = sample_sentence(&mut rng);
        train.push(realize(&mut rng, format!("train-{i:05}"), &toks, false));
    }
    let mut test = Vec::with_capacity(spec.test_utterance_count);
    for i in 0..spec.test_utterance_count {
        let toks = sample_sentence(&mut rng);
        test.push(realize(&mut rng, format!("test-{i:05}"), &toks, true));
    }
    split_contacts(&mut test, &lex, &pool, spec.contacts_per_utterance, &mut rng)?;

    let (pairs, complete) = make_ambiguous_pairs(&lex, spec.overlap_count);
    if !complete {
        log::warn!("only {} prefix-ambiguous pairs available", pairs.len());
    }
    let mut overlap = Vec::with_capacity(pairs.len());
    for (i, &(long, _)) in pairs.iter().enumerate() {
        let mut u = realize(&mut rng, format!("overlap-{i:05}"), &[Token::Word(long)], false);
        u.contacts.clear();
        overlap.push(u);
    }

    let lm_arpa = write_arpa(&grammar, &lex, spec.backoff_mass);
    Ok(Corpus {
        spec: spec.clone(),
        lexicon: lex,
        contact_pool: pool,
        train,
        test,
        overlap,
        overlap_pairs: pairs,
        lm_arpa,
        prototypes,
    })
}

/// Assigns each utterance its contact list: the contacts it mentions plus
/// random distractors from `pool`, up to a size drawn from `per_utterance`.
///
/// Fails if any pool orthography or pron also belongs to the static lexicon.
pub fn split_contacts(
    utterances: &mut [Utterance],
    lexicon: &PronLexicon,
    pool: &PronLexicon,
    per_utterance: [usize; 2],
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    for w in 0..pool.word_count() as WordId {
        let orth = pool.orthography(w);
        if lexicon.word_id(orth).is_some() {
            return Err(Error::Generation(format!("contact `{orth}` is also a static word")));
        }
        for &p in pool.prons_of(w) {
            if lexicon.pron_id(&pool.pron(p).phonemes).is_some() {
                return Err(Error::Generation(format!(
                    "contact `{orth}` shares a pronunciation with the static vocabulary"
                )));
            }
        }
    }
    let static_words = lexicon.word_count() as WordId;
    let inv = pool.inventory();
    for u in utterances.iter_mut() {
        let mut chosen: Vec<WordId> = Vec::new();
        for (&w, &is_contact) in u.ref_words.iter().zip(&u.is_contact_mask) {
            if is_contact && !chosen.contains(&(w - static_words)) {
                chosen.push(w - static_words);
            }
        }
        let target = rng.random_range(per_utterance[0]..=per_utterance[1]).max(chosen.len());
        let target = target.min(pool.word_count());
        let mut others: Vec<WordId> = (0..pool.word_count() as WordId).filter(|w| !chosen.contains(w)).collect();
        others.shuffle(rng);
        chosen.extend(others.into_iter().take(target - chosen.len()));
        chosen.shuffle(rng);
        u.contacts = chosen
            .iter()
            .flat_map(|&c| {
                pool.prons_of(c)
                    .iter()
                    .map(move |&p| (pool.orthography(c).to_string(), inv.format_pron(&pool.pron(p).phonemes)))
            })
            .collect();
    }
    Ok(())
}

fn token_name(t: &Token, lex: &PronLexicon) -> String {
    match t {
        Token::Start => "<s>".into(),
        Token::End => "</s>".into(),
        Token::Contact => CONTACT_CLASS.into(),
        Token::Word(w) => lex.orthography(*w).to_string(),
    }
}

/// Bigram ARPA model of the sentence process with a uniform unigram
/// backoff distribution.
fn write_arpa(grammar: &Grammar, lex: &PronLexicon, backoff_mass: f64) -> String {
    let mut unigrams: Vec<String> = vec!["</s>".into(), "<s>".into(), "<unk>".into(), CONTACT_CLASS.into()];
    unigrams.extend((0..lex.word_count() as WordId).map(|w| lex.orthography(w).to_string()));
    // <s> is never predicted
    let predicted = (unigrams.len() - 1) as f64;
    let uni_lp = (1.0 / predicted).log10();

    let mut bigrams: Vec<(String, String, f64)> = Vec::new();
    let mut backoff: BTreeMap<String, f64> = BTreeMap::new();
    for (hist, dist) in &grammar.succ {
        let h = token_name(hist, lex);
        let listed_uni: f64 = dist.iter().map(|_| 1.0 / predicted).sum();
        let alpha = backoff_mass / (1.0 - listed_uni);
        backoff.insert(h.clone(), alpha.log10());
        for (tok, p) in dist {
            bigrams.push((h.clone(), token_name(tok, lex), ((1.0 - backoff_mass) * p).log10()));
        }
    }

    let mut out = String::new();
    out.push_str("\\data\\\n");
    out.push_str(&format!("ngram 1={}\n", unigrams.len()));
    out.push_str(&format!("ngram 2={}\n\n", bigrams.len()));
    out.push_str("\\1-grams:\n");
    for u in &unigrams {
        let lp = if u == "<s>" { -99.0 } else { uni_lp };
        match backoff.get(u) {
            Some(b) => out.push_str(&format!("{lp:.6}\t{u}\t{b:.6}\n")),
            None => out.push_str(&format!("{lp:.6}\t{u}\n")),
        }
    }
    out.push_str("\n\\2-grams:\n");
    for (h, w, lp) in &bigrams {
        out.push_str(&format!("{lp:.6}\t{h} {w}\n"));
    }
    out.push_str("\n\\end\\\n");
    out
}

pub fn write_jsonl<W: Write>(mut w: W, utterances: &[Utterance]) -> Result<()> {
    for u in utterances {
        serde_json::to_writer(&mut w, u)?;
        w.write_all(b"\n").map_err(|e| Error::io("<jsonl>", e))?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R, source: &str) -> Result<Vec<Utterance>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let u: Utterance = serde_json::from_str(&line).map_err(|e| Error::parse(source, i + 1, e.to_string()))?;
        if u.ref_words.len() != u.ref_prons.len() || u.ref_words.len() != u.is_contact_mask.len() {
            return Err(Error::parse(source, i + 1, "reference fields differ in length"));
        }
        out.push(u);
    }
    Ok(out)
}

pub fn load_jsonl(path: &Path) -> Result<Vec<Utterance>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_jsonl(std::io::BufReader::new(file), &path.display().to_string())
}

pub fn save_jsonl(path: &Path, utterances: &[Utterance]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_jsonl(&mut w, utterances)?;
    w.flush().map_err(|e| Error::io(path, e))
}
