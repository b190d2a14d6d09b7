//! Embedding vectors, the frozen vocabulary matrix and frame scoring.
//!
//! Every vocabulary entry is a column `g_i` of the matrix `G`. At each frame
//! the acoustic model proposes one or more embeddings `f_{t,k}`; each is scored
//! against every column by negative squared Euclidean distance, computed in the
//! expanded form `2 gᵢᵀf − gᵢᵀgᵢ − fᵀf` with the column norms cached. The blank
//! label is scored separately as `−b²` and prepended before the softmax.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fmt::fmt_g17;
use crate::math::{log_sum_exp, softmax};

/// Identifier of a vocabulary column (a word id in orth mode, a pron id in
/// pron mode).
pub type LabelId = u32;

/// A point in the shared acoustic embedding space.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!(
                "embedding entry {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(EmbeddingVector(values))
    }

    pub fn zeros(dim: usize) -> Self {
        EmbeddingVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn sq_norm(&self) -> f64 {
        dot(&self.0, &self.0)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// How the K per-embedding score arrays of one frame are merged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CombineMode {
    /// Elementwise sum of raw scores.
    #[default]
    Sum,
    /// Elementwise `ln Σ_k exp(s_k)`.
    LogSumExp,
}

impl fmt::Display for CombineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CombineMode::Sum => f.write_str("sum"),
            CombineMode::LogSumExp => f.write_str("log-sum-exp"),
        }
    }
}

impl FromStr for CombineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(CombineMode::Sum),
            "log-sum-exp" | "lse" => Ok(CombineMode::LogSumExp),
            other => Err(Error::Config(format!("unknown combination mode `{other}`"))),
        }
    }
}

/// A contiguous run of columns with cached squared norms.
#[derive(Clone, Debug, PartialEq)]
struct Block {
    labels: Vec<LabelId>,
    /// One row per column of `G`.
    rows: Array2<f64>,
    sq_norms: Vec<f64>,
}

impl Block {
    fn empty(dim: usize) -> Self {
        Block {
            labels: Vec::new(),
            rows: Array2::zeros((0, dim)),
            sq_norms: Vec::new(),
        }
    }

    fn from_entries(dim: usize, entries: &[(LabelId, EmbeddingVector)]) -> Result<Self> {
        let mut rows = Array2::zeros((entries.len(), dim));
        let mut labels = Vec::with_capacity(entries.len());
        let mut sq_norms = Vec::with_capacity(entries.len());
        for (i, (label, v)) in entries.iter().enumerate() {
            if v.dim() != dim {
                return Err(Error::Config(format!(
                    "embedding for label {label} has dimension {}, matrix has {dim}",
                    v.dim()
                )));
            }
            rows.row_mut(i).assign(&ndarray::ArrayView1::from(v.as_slice()));
            labels.push(*label);
            sq_norms.push(v.sq_norm());
        }
        Ok(Block {
            labels,
            rows,
            sq_norms,
        })
    }

    fn len(&self) -> usize {
        self.labels.len()
    }

    fn score_into(&self, f: &[f64], f_sq: f64, out: &mut Vec<f64>) {
        for (row, g_sq) in self.rows.outer_iter().zip(&self.sq_norms) {
            let g = row.as_slice().expect("rows are contiguous");
            out.push(2.0 * dot(g, f) - g_sq - f_sq);
        }
    }

    /// `out[t, i] = 2 g_iᵀf_t − g_i' − f_t'` for a batch of embeddings.
    fn score_batch(&self, fs: ArrayView2<f64>, f_sq: &[f64]) -> Array2<f64> {
        let mut s = fs.dot(&self.rows.t());
        for (mut row, fsq) in s.outer_iter_mut().zip(f_sq) {
            for (v, g_sq) in row.iter_mut().zip(&self.sq_norms) {
                *v = 2.0 * *v - g_sq - fsq;
            }
        }
        s
    }
}

/// The frozen prediction matrix `G`: a shared static region followed by an
/// optional per-utterance dynamic region.
///
/// The static region sits behind an `Arc`, so extending with dynamic
/// entries copies only the new columns.
#[derive(Clone, Debug)]
pub struct VocabMatrix {
    dim: usize,
    static_block: Arc<Block>,
    dynamic_block: Block,
    index: Arc<HashMap<LabelId, usize>>,
}

impl PartialEq for VocabMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.static_block == other.static_block
            && self.dynamic_block == other.dynamic_block
    }
}

impl VocabMatrix {
    /// Builds a matrix whose columns all belong to the static region.
    pub fn new(dim: usize, entries: Vec<(LabelId, EmbeddingVector)>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        let mut index = HashMap::with_capacity(entries.len());
        for (i, (label, _)) in entries.iter().enumerate() {
            if index.insert(*label, i).is_some() {
                return Err(Error::Input(format!("duplicate label id {label}")));
            }
        }
        let block = Block::from_entries(dim, &entries)?;
        Ok(VocabMatrix {
            dim,
            static_block: Arc::new(block),
            dynamic_block: Block::empty(dim),
            index: Arc::new(index),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Total number of columns `n`.
    pub fn len(&self) -> usize {
        self.static_block.len() + self.dynamic_block.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn static_count(&self) -> usize {
        self.static_block.len()
    }

    pub fn dynamic_count(&self) -> usize {
        self.dynamic_block.len()
    }

    pub fn is_dynamic(&self, column: usize) -> bool {
        column >= self.static_count()
    }

    pub fn label(&self, column: usize) -> LabelId {
        let s = self.static_count();
        if column < s {
            self.static_block.labels[column]
        } else {
            self.dynamic_block.labels[column - s]
        }
    }

    pub fn labels(&self) -> impl Iterator<Item = LabelId> + '_ {
        self.static_block
            .labels
            .iter()
            .chain(&self.dynamic_block.labels)
            .copied()
    }

    pub fn column_of(&self, label: LabelId) -> Option<usize> {
        self.index.get(&label).copied()
    }

    pub fn column(&self, column: usize) -> &[f64] {
        let s = self.static_count();
        let row = if column < s {
            self.static_block.rows.row(column)
        } else {
            self.dynamic_block.rows.row(column - s)
        };
        row.to_slice().expect("rows are contiguous")
    }

    pub fn sq_norm(&self, column: usize) -> f64 {
        let s = self.static_count();
        if column < s {
            self.static_block.sq_norms[column]
        } else {
            self.dynamic_block.sq_norms[column - s]
        }
    }

    /// All columns as an `n × D` array (static rows first).
    pub fn to_rows(&self) -> Array2<f64> {
        ndarray::concatenate(
            Axis(0),
            &[self.static_block.rows.view(), self.dynamic_block.rows.view()],
        )
        .expect("blocks share the embedding dimension")
    }

    /// Appends per-utterance columns after the existing ones.
    pub fn extend_dynamic(&self, entries: Vec<(LabelId, EmbeddingVector)>) -> Result<Self> {
        if entries.is_empty() {
            return Ok(self.clone());
        }
        let mut index = (*self.index).clone();
        let base = self.len();
        for (i, (label, _)) in entries.iter().enumerate() {
            if index.insert(*label, base + i).is_some() {
                return Err(Error::Input(format!(
                    "dynamic label id {label} already present in the vocabulary"
                )));
            }
        }
        let mut all: Vec<(LabelId, EmbeddingVector)> = Vec::new();
        for (label, row) in self.dynamic_block.labels.iter().zip(self.dynamic_block.rows.outer_iter()) {
            all.push((*label, EmbeddingVector(row.to_vec())));
        }
        all.extend(entries);
        let dynamic_block = Block::from_entries(self.dim, &all)?;
        Ok(VocabMatrix {
            dim: self.dim,
            static_block: Arc::clone(&self.static_block),
            dynamic_block,
            index: Arc::new(index),
        })
    }

    /// Drops the dynamic region, restoring the static matrix.
    pub fn clear_dynamic(&self) -> Self {
        let mut index = (*self.index).clone();
        for label in &self.dynamic_block.labels {
            index.remove(label);
        }
        VocabMatrix {
            dim: self.dim,
            static_block: Arc::clone(&self.static_block),
            dynamic_block: Block::empty(self.dim),
            index: Arc::new(index),
        }
    }

    /// Negative squared distance from `f` to every column.
    pub fn score_against(&self, f: &EmbeddingVector) -> Result<Vec<f64>> {
        score_against(f, self)
    }

    /// Scores a `T × D` batch of embeddings, returning `T × n`.
    ///
    /// Each region is multiplied separately so static-column scores do not
    /// depend on the dynamic region.
    pub fn score_batch(&self, fs: ArrayView2<f64>) -> Result<Array2<f64>> {
        if fs.ncols() != self.dim {
            return Err(Error::Config(format!(
                "embedding batch has dimension {}, matrix has {}",
                fs.ncols(),
                self.dim
            )));
        }
        let f_sq: Vec<f64> = fs.outer_iter().map(|r| r.dot(&r)).collect();
        let s = self.static_block.score_batch(fs, &f_sq);
        if self.dynamic_block.len() == 0 {
            return Ok(s);
        }
        let d = self.dynamic_block.score_batch(fs, &f_sq);
        Ok(ndarray::concatenate(Axis(1), &[s.view(), d.view()]).expect("same row count"))
    }

    /// Hex SHA-256 over dimension, labels and the raw bits of every value.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.dim as u64).to_le_bytes());
        h.update((self.static_count() as u64).to_le_bytes());
        for c in 0..self.len() {
            h.update(self.label(c).to_le_bytes());
            for v in self.column(c) {
                h.update(v.to_le_bytes());
            }
            h.update(self.sq_norm(c).to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Writes the `a2w-emb v1` TSV format. Dynamic columns are written too.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "a2w-emb v1 dim={}", self.dim)?;
        for c in 0..self.len() {
            write!(w, "{}", self.label(c))?;
            for v in self.column(c) {
                write!(w, "\t{}", fmt_g17(*v))?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn save_tsv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_tsv(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads the `a2w-emb v1` TSV format into a static-only matrix.
    pub fn read_tsv<R: BufRead>(r: R, source: &str) -> Result<Self> {
        let mut lines = r.lines();
        let header = match lines.next() {
            Some(l) => l.map_err(|e| Error::io(source, e))?,
            None => return Err(Error::parse(source, 1, "missing header")),
        };
        let dim = header
            .strip_prefix("a2w-emb v1 dim=")
            .and_then(|d| d.trim().parse::<usize>().ok())
            .ok_or_else(|| Error::parse(source, 1, format!("bad header `{header}`")))?;
        let mut entries = Vec::new();
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let line = line.map_err(|e| Error::io(source, e))?;
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split('\t');
            let label: LabelId = fields
                .next()
                .and_then(|l| l.parse().ok())
                .ok_or_else(|| Error::parse(source, lineno, "bad label"))?;
            let values = fields
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::parse(source, lineno, e.to_string()))?;
            if values.len() != dim {
                return Err(Error::parse(
                    source,
                    lineno,
                    format!("expected {dim} values, found {}", values.len()),
                ));
            }
            let v = EmbeddingVector::new(values)
                .map_err(|e| Error::parse(source, lineno, e.to_string()))?;
            entries.push((label, v));
        }
        VocabMatrix::new(dim, entries)
    }
}

/// Negative squared L2 distance between `f` and every column of `g`.
pub fn score_against(f: &EmbeddingVector, g: &VocabMatrix) -> Result<Vec<f64>> {
    if f.dim() != g.dim() {
        return Err(Error::Config(format!(
            "embedding has dimension {}, matrix has {}",
            f.dim(),
            g.dim()
        )));
    }
    let fs = f.as_slice();
    if fs.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("embedding contains a non-finite value".into()));
    }
    let f_sq = dot(fs, fs);
    let mut out = Vec::with_capacity(g.len());
    g.static_block.score_into(fs, f_sq, &mut out);
    g.dynamic_block.score_into(fs, f_sq, &mut out);
    Ok(out)
}

/// Merges K per-embedding score arrays into one.
pub fn combine_scores(per_embedding: &[Vec<f64>], mode: CombineMode) -> Result<Vec<f64>> {
    let first = per_embedding
        .first()
        .ok_or_else(|| Error::Internal("combine_scores needs at least one score array".into()))?;
    let n = first.len();
    if per_embedding.iter().any(|s| s.len() != n) {
        return Err(Error::Internal("score arrays differ in length".into()));
    }
    if per_embedding.len() == 1 {
        return Ok(first.clone());
    }
    let out = match mode {
        CombineMode::Sum => (0..n)
            .map(|i| per_embedding.iter().map(|s| s[i]).sum())
            .collect(),
        CombineMode::LogSumExp => {
            let mut col = vec![0.0; per_embedding.len()];
            (0..n)
                .map(|i| {
                    for (c, s) in col.iter_mut().zip(per_embedding) {
                        *c = s[i];
                    }
                    log_sum_exp(&col)
                })
                .collect()
        }
    };
    Ok(out)
}

/// Blank score `−b²`.
#[inline]
pub fn blank_score(b: f64) -> f64 {
    -(b * b)
}

/// Raw network output for one (subsampled) frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameOutput {
    pub blank_raw: f64,
    pub embeddings: Vec<EmbeddingVector>,
}

/// Pre-softmax scores of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVector {
    pub blank_score: f64,
    pub word_scores: Vec<f64>,
}

impl ScoreVector {
    /// `[blank, words…]` as one logit vector.
    pub fn logits(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.word_scores.len() + 1);
        v.push(self.blank_score);
        v.extend_from_slice(&self.word_scores);
        v
    }
}

/// Posterior distribution over `{blank} ∪ vocabulary`; index 0 is blank.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePosteriors {
    pub probs: Vec<f64>,
}

impl FramePosteriors {
    pub fn blank(&self) -> f64 {
        self.probs[0]
    }

    pub fn words(&self) -> &[f64] {
        &self.probs[1..]
    }
}

pub fn frame_scores(out: &FrameOutput, g: &VocabMatrix, mode: CombineMode) -> Result<ScoreVector> {
    if out.embeddings.is_empty() {
        return Err(Error::Config("frame output carries no embeddings".into()));
    }
    if !out.blank_raw.is_finite() {
        return Err(Error::Input("blank output is not finite".into()));
    }
    let per: Vec<Vec<f64>> = out
        .embeddings
        .iter()
        .map(|f| score_against(f, g))
        .collect::<Result<_>>()?;
    Ok(ScoreVector {
        blank_score: blank_score(out.blank_raw),
        word_scores: combine_scores(&per, mode)?,
    })
}

/// Softmax over `[−b², combined word scores]`.
pub fn frame_posteriors(
    out: &FrameOutput,
    g: &VocabMatrix,
    mode: CombineMode,
) -> Result<FramePosteriors> {
    if g.is_empty() {
        return Err(Error::Config("vocabulary matrix is empty".into()));
    }
    let scores = frame_scores(out, g, mode)?;
    Ok(FramePosteriors {
        probs: softmax(&scores.logits()),
    })
}
