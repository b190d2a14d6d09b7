//! Back-off n-gram language model read from ARPA text, with a single class
//! token standing in for every contact name.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const CLASS_SYMBOL: &str = "$CONTACT";
pub const UNK: &str = "<unk>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";

/// Floor used when neither the word nor `<unk>` has a unigram.
const UNSEEN_LOG10: f64 = -99.0;

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    log10_prob: f64,
    backoff: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct NGramLm {
    order: usize,
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    /// One table per order, keyed by the full n-gram; `keys` keeps file order.
    tables: Vec<HashMap<Vec<TokenId>, Entry>>,
    keys: Vec<Vec<Vec<TokenId>>>,
}

/// The last `order − 1` tokens, after class mapping.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct LmState {
    pub history: Vec<TokenId>,
}

impl NGramLm {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn token(&self, orth: &str) -> Option<TokenId> {
        self.index.get(orth).copied()
    }

    pub fn token_name(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    /// Token id for a static word; unknown words map to `<unk>` when the
    /// model has one.
    pub fn static_token(&self, orth: &str) -> Option<TokenId> {
        self.token(orth).or_else(|| self.token(UNK))
    }

    pub fn class_token(&self) -> Option<TokenId> {
        self.token(CLASS_SYMBOL)
    }

    /// State after `<s>`.
    pub fn start(&self) -> LmState {
        let mut s = LmState::default();
        if let Some(b) = self.token(BOS) {
            self.push(&mut s, b);
        }
        s
    }

    fn push(&self, s: &mut LmState, tok: TokenId) {
        s.history.push(tok);
        let keep = self.order - 1;
        if s.history.len() > keep {
            s.history.drain(..s.history.len() - keep);
        }
    }

    fn lookup(&self, ngram: &[TokenId]) -> Option<&Entry> {
        self.tables.get(ngram.len() - 1)?.get(ngram)
    }

    /// Katz back-off log₁₀ P(tok | history).
    pub fn log10_prob(&self, history: &[TokenId], tok: TokenId) -> f64 {
        let mut key: Vec<TokenId> = history.to_vec();
        key.push(tok);
        if let Some(e) = self.lookup(&key) {
            return e.log10_prob;
        }
        if history.is_empty() {
            return match self.token(UNK).and_then(|u| self.lookup(&[u])) {
                Some(e) if self.token_name(tok) != UNK => e.log10_prob,
                _ => UNSEEN_LOG10,
            };
        }
        let bo = self.lookup(history).and_then(|e| e.backoff).unwrap_or(0.0);
        bo + self.log10_prob(&history[1..], tok)
    }

    /// Scores one word. Dynamic words are scored as the class symbol plus a
    /// uniform in-class penalty of `−log₁₀(contacts_count)`.
    pub fn score(
        &self,
        state: &LmState,
        tok: Option<TokenId>,
        is_dynamic: bool,
        contacts_count: usize,
    ) -> Result<(f64, LmState)> {
        let (tok, penalty) = if is_dynamic {
            if contacts_count == 0 {
                return Err(Error::Input("dynamic word scored with an empty contact list".into()));
            }
            let class = self
                .class_token()
                .ok_or_else(|| Error::Data(format!("language model lacks {CLASS_SYMBOL}")))?;
            (Some(class), -(contacts_count as f64).log10())
        } else {
            (tok, 0.0)
        };
        let mut next = state.clone();
        let lp = match tok {
            Some(t) => {
                let lp = self.log10_prob(&state.history, t);
                self.push(&mut next, t);
                lp
            }
            None => {
                next.history.clear();
                UNSEEN_LOG10
            }
        };
        Ok((lp + penalty, next))
    }

    /// log₁₀ P(`</s>` | state), or 0 when the model has no end token.
    pub fn end_score(&self, state: &LmState) -> f64 {
        match self.token(EOS) {
            Some(e) => self.log10_prob(&state.history, e),
            None => 0.0,
        }
    }

    pub fn dump(&self) -> String {
        let mut out = String::from("\\data\\\n");
        for (n, keys) in self.keys.iter().enumerate() {
            out.push_str(&format!("ngram {}={}\n", n + 1, keys.len()));
        }
        for (n, keys) in self.keys.iter().enumerate() {
            out.push_str(&format!("\n\\{}-grams:\n", n + 1));
            for key in keys {
                let e = &self.tables[n][key];
                let words: Vec<&str> = key.iter().map(|&t| self.token_name(t)).collect();
                out.push_str(&format!("{:.6}\t{}", e.log10_prob, words.join(" ")));
                if let Some(b) = e.backoff {
                    out.push_str(&format!("\t{b:.6}"));
                }
                out.push('\n');
            }
        }
        out.push_str("\n\\end\\\n");
        out
    }

    pub fn parse<R: BufRead>(r: R, source: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::parse(source, line, msg);
        let mut counts: Vec<usize> = Vec::new();
        let mut lm = NGramLm {
            order: 0,
            tokens: Vec::new(),
            index: HashMap::new(),
            tables: Vec::new(),
            keys: Vec::new(),
        };
        #[derive(PartialEq)]
        enum Sec {
            Start,
            Data,
            Grams(usize),
            End,
        }
        let mut sec = Sec::Start;
        let mut last_line = 0;
        let check_count = |lm: &NGramLm, counts: &[usize], n: usize, line: usize| -> Result<()> {
            let got = lm.keys[n - 1].len();
            if got != counts[n - 1] {
                return Err(err(
                    line,
                    format!("\\{n}-grams: section has {got} entries but the header declares {}", counts[n - 1]),
                ));
            }
            Ok(())
        };
        for (i, line) in r.lines().enumerate() {
            let ln = i + 1;
            last_line = ln;
            let line = line.map_err(|e| Error::io(source, e))?;
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            if t == "\\data\\" {
                if sec != Sec::Start {
                    return Err(err(ln, "repeated \\data\\ header".into()));
                }
                sec = Sec::Data;
                continue;
            }
            if t == "\\end\\" {
                match sec {
                    Sec::Grams(n) => {
                        check_count(&lm, &counts, n, ln)?;
                        if n != counts.len() {
                            return Err(err(ln, format!("missing \\{}-grams: section", n + 1)));
                        }
                    }
                    _ => return Err(err(ln, "\\end\\ before any n-gram section".into())),
                }
                sec = Sec::End;
                continue;
            }
            if let Some(rest) = t.strip_prefix('\\') {
                let n: usize = rest
                    .strip_suffix("-grams:")
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| err(ln, format!("malformed section header `{t}`")))?;
                let expected = match sec {
                    Sec::Data => 1,
                    Sec::Grams(m) => {
                        check_count(&lm, &counts, m, ln)?;
                        m + 1
                    }
                    _ => return Err(err(ln, format!("unexpected section header `{t}`"))),
                };
                if n != expected || n > counts.len() {
                    return Err(err(ln, format!("unexpected section header `{t}`")));
                }
                sec = Sec::Grams(n);
                continue;
            }
            match sec {
                Sec::Start => return Err(err(ln, "text before \\data\\".into())),
                Sec::End => return Err(err(ln, "text after \\end\\".into())),
                Sec::Data => {
                    let spec = t
                        .strip_prefix("ngram ")
                        .ok_or_else(|| err(ln, format!("expected `ngram N=count`, found `{t}`")))?;
                    let (n, c) = spec
                        .split_once('=')
                        .and_then(|(n, c)| Some((n.trim().parse::<usize>().ok()?, c.trim().parse::<usize>().ok()?)))
                        .ok_or_else(|| err(ln, format!("malformed count line `{t}`")))?;
                    if n != counts.len() + 1 {
                        return Err(err(ln, format!("ngram orders out of sequence at `{t}`")));
                    }
                    if n > 3 {
                        return Err(err(ln, format!("order {n} exceeds the supported maximum of 3")));
                    }
                    counts.push(c);
                    lm.tables.push(HashMap::new());
                    lm.keys.push(Vec::new());
                }
                Sec::Grams(n) => {
                    let fields: Vec<&str> = t.split_whitespace().collect();
                    if fields.len() != n + 1 && fields.len() != n + 2 {
                        return Err(err(ln, format!("expected {} or {} fields, found {}", n + 1, n + 2, fields.len())));
                    }
                    let num = |s: &str| -> Result<f64> {
                        s.parse::<f64>()
                            .ok()
                            .filter(|v| !v.is_nan())
                            .ok_or_else(|| err(ln, format!("bad number `{s}`")))
                    };
                    let lp = num(fields[0])?;
                    let backoff = if fields.len() == n + 2 { Some(num(fields[n + 1])?) } else { None };
                    let mut key = Vec::with_capacity(n);
                    for w in &fields[1..=n] {
                        let id = match lm.index.get(*w) {
                            Some(&id) => id,
                            None if n == 1 => {
                                let id = lm.tokens.len() as TokenId;
                                lm.tokens.push(w.to_string());
                                lm.index.insert(w.to_string(), id);
                                id
                            }
                            None => return Err(err(ln, format!("`{w}` has no unigram entry"))),
                        };
                        key.push(id);
                    }
                    if lm.tables[n - 1].insert(key.clone(), Entry { log10_prob: lp, backoff }).is_some() {
                        return Err(err(ln, format!("duplicate n-gram `{}`", fields[1..=n].join(" "))));
                    }
                    lm.keys[n - 1].push(key);
                }
            }
        }
        if sec != Sec::End {
            return Err(err(last_line, "missing \\end\\".into()));
        }
        lm.order = counts.len();
        if lm.order == 0 {
            return Err(err(last_line, "no n-gram orders declared".into()));
        }
        Ok(lm)
    }

    pub fn from_arpa_str(text: &str) -> Result<Self> {
        Self::parse(text.as_bytes(), "<arpa>")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::parse(std::io::BufReader::new(f), &path.display().to_string())
    }

    /// Sum of explicit probabilities listed under `history` (each at most
    /// 1 for a well-formed model).
    pub fn listed_mass(&self, history: &[TokenId]) -> f64 {
        let n = history.len() + 1;
        match self.keys.get(n - 1) {
            Some(keys) => keys
                .iter()
                .filter(|k| k[..n - 1] == *history)
                .map(|k| 10f64.powf(self.tables[n - 1][k].log10_prob))
                .sum(),
            None => 0.0,
        }
    }
}
