//! Word error rate and named-entity error rate.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RefOp {
    /// Reference word matched by hypothesis word `h`.
    Hit(usize),
    Sub(usize),
    Del,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alignment {
    /// One entry per reference word.
    pub ref_ops: Vec<RefOp>,
    /// Hypothesis positions not aligned to any reference word.
    pub insertions: Vec<usize>,
}

impl Alignment {
    pub fn hits(&self) -> usize {
        self.ref_ops.iter().filter(|o| matches!(o, RefOp::Hit(_))).count()
    }

    pub fn substitutions(&self) -> usize {
        self.ref_ops.iter().filter(|o| matches!(o, RefOp::Sub(_))).count()
    }

    pub fn deletions(&self) -> usize {
        self.ref_ops.iter().filter(|o| matches!(o, RefOp::Del)).count()
    }

    pub fn cost(&self) -> usize {
        self.substitutions() + self.deletions() + self.insertions.len()
    }
}

/// Unit-cost Levenshtein alignment.
///
/// The backtrace runs from the end and, among equal-cost moves, takes the
/// diagonal (hit or substitution) first, then a deletion, then an insertion.
pub fn align<T: PartialEq>(reference: &[T], hyp: &[T]) -> Alignment {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = diag.min(del).min(ins);
        }
    }
    let mut ref_ops = vec![RefOp::Del; n];
    let mut insertions = Vec::new();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hyp[j - 1];
            if d[(i - 1) * w + j - 1] + usize::from(!same) == here {
                ref_ops[i - 1] = if same { RefOp::Hit(j - 1) } else { RefOp::Sub(j - 1) };
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            i -= 1;
            continue;
        }
        insertions.push(j - 1);
        j -= 1;
    }
    insertions.reverse();
    Alignment { ref_ops, insertions }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Percent; absent when the references hold no words.
    pub wer: Option<f64>,
    /// Percent over reference contact words; absent when there are none.
    pub neer: Option<f64>,
    pub hits: usize,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_words: usize,
    pub contact_words: usize,
    pub contact_errors: usize,
    pub utterances: usize,
}

/// Accumulates per-utterance alignments into an [`EvalReport`].
#[derive(Clone, Debug, Default)]
pub struct Scorer {
    report: EvalReport,
}

impl Scorer {
    pub fn add<T: PartialEq>(&mut self, reference: &[T], hyp: &[T], contact_mask: &[bool]) {
        let a = align(reference, hyp);
        let r = &mut self.report;
        r.utterances += 1;
        r.hits += a.hits();
        r.substitutions += a.substitutions();
        r.deletions += a.deletions();
        r.insertions += a.insertions.len();
        r.ref_words += reference.len();
        for (op, &is_contact) in a.ref_ops.iter().zip(contact_mask) {
            if is_contact {
                r.contact_words += 1;
                if !matches!(op, RefOp::Hit(_)) {
                    r.contact_errors += 1;
                }
            }
        }
    }

    pub fn finish(mut self) -> EvalReport {
        let r = &mut self.report;
        let errors = r.substitutions + r.deletions + r.insertions;
        r.wer = (r.ref_words > 0).then(|| errors as f64 / r.ref_words as f64 * 100.0);
        r.neer = (r.contact_words > 0).then(|| r.contact_errors as f64 / r.contact_words as f64 * 100.0);
        self.report
    }
}

impl EvalReport {
    pub fn table(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.2}%"));
        let mut s = String::new();
        s.push_str(&format!("{:<14}{:>12}\n", "metric", "value"));
        s.push_str(&format!("{:<14}{:>12}\n", "WER", pct(self.wer)));
        s.push_str(&format!("{:<14}{:>12}\n", "NEER", pct(self.neer)));
        for (k, v) in [
            ("utterances", self.utterances),
            ("ref words", self.ref_words),
            ("hits", self.hits),
            ("substitutions", self.substitutions),
            ("deletions", self.deletions),
            ("insertions", self.insertions),
            ("contact words", self.contact_words),
            ("contact errors", self.contact_errors),
        ] {
            s.push_str(&format!("{k:<14}{v:>12}\n"));
        }
        s
    }
}
