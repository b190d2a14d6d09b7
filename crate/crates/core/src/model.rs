//! A small two-layer acoustic model trained with CTC against a frozen `G`.
//!
//! Stacked input frames pass through one `tanh` hidden layer and an affine
//! output layer of width `1 + K·D`: output 0 is the blank scalar `b`, the
//! rest are K embeddings. Only the output width depends on K.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctc::{ctc_loss_from_scores, min_frames};
use crate::embed::{blank_score, CombineMode, EmbeddingVector, FrameOutput, LabelId, VocabMatrix};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Embedding dimension `D`.
    pub dim: usize,
    /// Embeddings per frame.
    pub k: usize,
    /// Input frames stacked on each side of the centre frame.
    pub context: usize,
    pub hidden: usize,
    pub feature_dim: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Keep every `subsample`-th output frame.
    pub subsample: usize,
    pub combine: CombineMode,
    /// Per-utterance gradient norm cap; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 40,
            k: 1,
            context: 2,
            hidden: 128,
            feature_dim: 16,
            seed: 1,
            learning_rate: 0.002,
            epochs: 10,
            batch_size: 16,
            subsample: 1,
            combine: CombineMode::Sum,
            clip_norm: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("k", self.k),
            ("hidden", self.hidden),
            ("feature_dim", self.feature_dim),
            ("batch_size", self.batch_size),
            ("subsample", self.subsample),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::Config("clip_norm must be non-negative".into()));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        (2 * self.context + 1) * self.feature_dim
    }

    pub fn output_width(&self) -> usize {
        1 + self.k * self.dim
    }
}

/// Model parameters. Layout: `w1` is `hidden × input`, `w2` is
/// `output × hidden`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    cfg: ModelConfig,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
struct Gradients {
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
}

impl Gradients {
    fn zeros_like(m: &ToyModel) -> Self {
        Gradients {
            w1: Array2::zeros(m.w1.dim()),
            b1: Array1::zeros(m.b1.len()),
            w2: Array2::zeros(m.w2.dim()),
            b2: Array1::zeros(m.b2.len()),
        }
    }

    fn add_assign(&mut self, o: &Gradients) {
        self.w1 += &o.w1;
        self.b1 += &o.b1;
        self.w2 += &o.w2;
        self.b2 += &o.b2;
    }

    fn norm(&self) -> f64 {
        let sq = |a: f64, x: &f64| a + x * x;
        (self.w1.iter().fold(0.0, sq)
            + self.b1.iter().fold(0.0, sq)
            + self.w2.iter().fold(0.0, sq)
            + self.b2.iter().fold(0.0, sq))
        .sqrt()
    }

    fn scale(&mut self, c: f64) {
        self.w1 *= c;
        self.b1 *= c;
        self.w2 *= c;
        self.b2 *= c;
    }
}

/// Intermediate activations kept for backprop.
struct Activations {
    inputs: Array2<f64>,
    hidden: Array2<f64>,
    outputs: Array2<f64>,
}

/// One training utterance: input frames and reference column labels.
#[derive(Clone, Debug)]
pub struct Example<'a> {
    pub frames: ArrayView2<'a, f64>,
    pub labels: Vec<LabelId>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-utterance CTC loss of each epoch, measured during the pass.
    pub epoch_losses: Vec<f64>,
    /// Utterances too short for their reference after subsampling.
    pub skipped: usize,
    pub vocab_checksum_before: String,
    pub vocab_checksum_after: String,
}

/// Stacks `±context` neighbours (edge frames repeated) for every
/// `subsample`-th frame.
pub fn stack_frames(frames: ArrayView2<f64>, context: usize, subsample: usize) -> Array2<f64> {
    let (t_len, f_dim) = frames.dim();
    let width = (2 * context + 1) * f_dim;
    let out_len = t_len.div_ceil(subsample);
    let mut out = Array2::zeros((out_len, width));
    for (row, t) in (0..t_len).step_by(subsample).enumerate() {
        for j in 0..(2 * context + 1) {
            let src = (t + j).saturating_sub(context).min(t_len - 1);
            out.slice_mut(s![row, j * f_dim..(j + 1) * f_dim])
                .assign(&frames.row(src));
        }
    }
    out
}

impl ToyModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (inp, hid, out) = (cfg.input_width(), cfg.hidden, cfg.output_width());
        let n1 = Normal::new(0.0, 1.0 / (inp as f64).sqrt()).expect("valid std");
        let n2 = Normal::new(0.0, 1.0 / (hid as f64).sqrt()).expect("valid std");
        let w1 = Array2::from_shape_fn((hid, inp), |_| n1.sample(&mut rng));
        let w2 = Array2::from_shape_fn((out, hid), |_| n2.sample(&mut rng));
        Ok(ToyModel {
            w1,
            b1: Array1::zeros(hid),
            w2,
            b2: Array1::zeros(out),
            cfg,
        })
    }

    /// A model whose every parameter is zero.
    pub fn zeroed(cfg: ModelConfig) -> Result<Self> {
        let mut m = ToyModel::new(cfg)?;
        m.w1.fill(0.0);
        m.w2.fill(0.0);
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn parameter_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// `(name, shape)` of every parameter tensor in checkpoint order.
    pub fn parameter_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        vec![
            ("w1", self.w1.shape().to_vec()),
            ("b1", self.b1.shape().to_vec()),
            ("w2", self.w2.shape().to_vec()),
            ("b2", self.b2.shape().to_vec()),
        ]
    }

    fn check_frames(&self, frames: &ArrayView2<f64>) -> Result<()> {
        if frames.ncols() != self.cfg.feature_dim {
            return Err(Error::Config(format!(
                "frames have {} features, model expects {}",
                frames.ncols(),
                self.cfg.feature_dim
            )));
        }
        if frames.nrows() == 0 {
            return Err(Error::Config("utterance has no frames".into()));
        }
        Ok(())
    }

    fn activations(&self, frames: ArrayView2<f64>) -> Result<Activations> {
        self.check_frames(&frames)?;
        let inputs = stack_frames(frames, self.cfg.context, self.cfg.subsample);
        let mut hidden = inputs.dot(&self.w1.t());
        hidden += &self.b1;
        hidden.mapv_inplace(f64::tanh);
        let mut outputs = hidden.dot(&self.w2.t());
        outputs += &self.b2;
        Ok(Activations {
            inputs,
            hidden,
            outputs,
        })
    }

    /// Raw `T' × (1 + K·D)` outputs.
    pub fn forward_raw(&self, frames: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.activations(frames)?.outputs)
    }

    pub fn forward(&self, frames: ArrayView2<f64>) -> Result<Vec<FrameOutput>> {
        let raw = self.forward_raw(frames)?;
        let d = self.cfg.dim;
        raw.outer_iter()
            .map(|row| {
                let embeddings = (0..self.cfg.k)
                    .map(|k| EmbeddingVector::new(row.slice(s![1 + k * d..1 + (k + 1) * d]).to_vec()))
                    .collect::<Result<Vec<_>>>()?;
                Ok(FrameOutput {
                    blank_raw: row[0],
                    embeddings,
                })
            })
            .collect()
    }

    /// Pre-softmax `[−b², combined word scores]` for every output frame.
    pub fn frame_scores(&self, frames: ArrayView2<f64>, g: &VocabMatrix) -> Result<Array2<f64>> {
        let raw = self.forward_raw(frames)?;
        Ok(scores_from_outputs(raw.view(), g, self.cfg.k, self.cfg.combine)?.0)
    }

    /// CTC loss of one utterance and its parameter gradient.
    fn loss_and_grad(&self, frames: ArrayView2<f64>, labels: &[usize], g: &VocabMatrix) -> Result<(f64, Gradients)> {
        let act = self.activations(frames)?;
        let (scores, per_k) = scores_from_outputs(act.outputs.view(), g, self.cfg.k, self.cfg.combine)?;
        let ctc = ctc_loss_from_scores(scores.view(), labels)?;
        let d_out = backprop_scores(
            act.outputs.view(),
            &scores,
            &per_k,
            ctc.grad.view(),
            g,
            self.cfg.k,
            self.cfg.combine,
        );

        let w2 = d_out.t().dot(&act.hidden);
        let b2 = d_out.sum_axis(Axis(0));
        let mut d_hidden = d_out.dot(&self.w2);
        ndarray::Zip::from(&mut d_hidden)
            .and(&act.hidden)
            .for_each(|dh, &h| *dh *= 1.0 - h * h);
        let w1 = d_hidden.t().dot(&act.inputs);
        let b1 = d_hidden.sum_axis(Axis(0));
        Ok((ctc.neg_log_likelihood, Gradients { w1, b1, w2, b2 }))
    }

    /// CTC loss of `frames` against `labels` (column labels of `g`).
    pub fn loss(&self, frames: ArrayView2<f64>, labels: &[LabelId], g: &VocabMatrix) -> Result<f64> {
        let cols = label_columns(labels, g)?;
        let act = self.activations(frames)?;
        let (scores, _) = scores_from_outputs(act.outputs.view(), g, self.cfg.k, self.cfg.combine)?;
        Ok(ctc_loss_from_scores(scores.view(), &cols)?.neg_log_likelihood)
    }

    fn apply(&mut self, grad: &Gradients, step: f64) {
        self.w1.scaled_add(-step, &grad.w1);
        self.b1.scaled_add(-step, &grad.b1);
        self.w2.scaled_add(-step, &grad.w2);
        self.b2.scaled_add(-step, &grad.b2);
    }

    /// Plain minibatch SGD. `g` is only read. With `jobs > 1` the
    /// per-utterance gradients of a batch are computed in parallel and
    /// summed in utterance order, so results match `jobs = 1` exactly.
    pub fn train(&mut self, examples: &[Example<'_>], g: &VocabMatrix, jobs: usize) -> Result<TrainReport> {
        let before = g.checksum();
        let mut report = TrainReport {
            vocab_checksum_before: before,
            ..Default::default()
        };
        let mut prepared = Vec::with_capacity(examples.len());
        for ex in examples {
            self.check_frames(&ex.frames)?;
            let cols = label_columns(&ex.labels, g)?;
            let out_frames = ex.frames.nrows().div_ceil(self.cfg.subsample);
            if out_frames < min_frames(&cols).max(1) {
                report.skipped += 1;
                continue;
            }
            prepared.push((ex.frames, cols));
        }
        if prepared.is_empty() {
            return Err(Error::Data("no trainable utterances".into()));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build()
            .map_err(|e| Error::Internal(e.to_string()))?;
        for _epoch in 0..self.cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for batch in order.chunks(self.cfg.batch_size) {
                let results: Vec<Result<(f64, Gradients)>> = pool.install(|| {
                    batch
                        .par_iter()
                        .map(|&i| {
                            let (frames, cols) = &prepared[i];
                            self.loss_and_grad(*frames, cols, g)
                        })
                        .collect()
                });
                let mut sum = Gradients::zeros_like(self);
                for r in results {
                    let (loss, mut grad) = r?;
                    if self.cfg.clip_norm > 0.0 {
                        let n = grad.norm();
                        if n > self.cfg.clip_norm {
                            grad.scale(self.cfg.clip_norm / n);
                        }
                    }
                    total += loss;
                    sum.add_assign(&grad);
                }
                self.apply(&sum, self.cfg.learning_rate / batch.len() as f64);
            }
            let mean = total / prepared.len() as f64;
            log::info!("epoch {} mean loss {mean:.4}", report.epoch_losses.len() + 1);
            report.epoch_losses.push(mean);
        }
        report.vocab_checksum_after = g.checksum();
        Ok(report)
    }

    /// Writes the checkpoint: a text header with the config and `extra`
    /// metadata, then `w1, b1, w2, b2` as little-endian f64, row-major.
    pub fn write_checkpoint<W: Write>(&self, mut w: W, extra: &BTreeMap<String, String>) -> Result<()> {
        let io = |e| Error::io("<checkpoint>", e);
        let mut header = String::from("a2w-model v1\n");
        let cfg = serde_json::to_value(&self.cfg)?;
        let mut keys: BTreeMap<String, String> = BTreeMap::new();
        if let serde_json::Value::Object(map) = cfg {
            for (k, v) in map {
                let v = match v {
                    serde_json::Value::String(s) => s,
                    other => other.to_string(),
                };
                keys.insert(k, v);
            }
        }
        for (k, v) in &keys {
            header.push_str(&format!("{k}={v}\n"));
        }
        for (k, v) in extra {
            if k.contains('=') || k.contains('\n') || v.contains('\n') {
                return Err(Error::Input(format!("bad checkpoint metadata key `{k}`")));
            }
            header.push_str(&format!("meta.{k}={v}\n"));
        }
        header.push_str("end\n");
        w.write_all(header.as_bytes()).map_err(io)?;
        let tensors = [
            self.w1.as_slice().expect("contiguous"),
            self.b1.as_slice().expect("contiguous"),
            self.w2.as_slice().expect("contiguous"),
            self.b2.as_slice().expect("contiguous"),
        ];
        for t in tensors {
            for v in t {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, extra: &BTreeMap<String, String>) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_checkpoint(&mut w, extra)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_checkpoint<R: Read>(mut r: R, source: &str) -> Result<(Self, BTreeMap<String, String>)> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| Error::io(source, e))?;
        let mut pos = 0;
        let mut lines = Vec::new();
        loop {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::parse(source, lines.len() + 1, "truncated header"))?;
            let line = std::str::from_utf8(&bytes[pos..pos + end])
                .map_err(|_| Error::parse(source, lines.len() + 1, "header is not UTF-8"))?
                .to_string();
            pos += end + 1;
            if line == "end" {
                break;
            }
            lines.push(line);
        }
        if lines.first().map(String::as_str) != Some("a2w-model v1") {
            return Err(Error::parse(source, 1, "not an a2w-model v1 checkpoint"));
        }
        let mut cfg_map = serde_json::Map::new();
        let mut extra = BTreeMap::new();
        for (i, line) in lines.iter().enumerate().skip(1) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(source, i + 1, "expected key=value"))?;
            if let Some(meta) = k.strip_prefix("meta.") {
                extra.insert(meta.to_string(), v.to_string());
            } else {
                let value = serde_json::from_str(v).unwrap_or_else(|_| serde_json::Value::String(v.to_string()));
                cfg_map.insert(k.to_string(), value);
            }
        }
        let cfg: ModelConfig = serde_json::from_value(serde_json::Value::Object(cfg_map))?;
        let mut model = ToyModel::zeroed(cfg)?;
        let body = &bytes[pos..];
        let expected = model.parameter_count() * 8;
        if body.len() != expected {
            return Err(Error::Data(format!(
                "{source}: checkpoint body has {} bytes, expected {expected}",
                body.len()
            )));
        }
        let mut values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        for t in [
            model.w1.as_slice_mut().expect("contiguous"),
            model.b1.as_slice_mut().expect("contiguous"),
            model.w2.as_slice_mut().expect("contiguous"),
            model.b2.as_slice_mut().expect("contiguous"),
        ] {
            for v in t.iter_mut() {
                *v = values.next().expect("length checked");
            }
        }
        Ok((model, extra))
    }

    pub fn load(path: &Path) -> Result<(Self, BTreeMap<String, String>)> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        ToyModel::read_checkpoint(std::io::BufReader::new(file), &path.display().to_string())
    }
}

/// Maps reference labels to CTC class indices (`1 + column`).
pub fn label_columns(labels: &[LabelId], g: &VocabMatrix) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|&l| {
            g.column_of(l)
                .map(|c| c + 1)
                .ok_or_else(|| Error::Data(format!("label {l} is not a column of the vocabulary matrix")))
        })
        .collect()
}

/// Scores `T' × (1+n)` from raw outputs, plus the per-embedding score
/// matrices needed for backprop.
pub fn scores_from_outputs(
    outputs: ArrayView2<f64>,
    g: &VocabMatrix,
    k: usize,
    mode: CombineMode,
) -> Result<(Array2<f64>, Vec<Array2<f64>>)> {
    let d = g.dim();
    if outputs.ncols() != 1 + k * d {
        return Err(Error::Config(format!(
            "outputs have width {}, expected {}",
            outputs.ncols(),
            1 + k * d
        )));
    }
    if outputs.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("model outputs are not finite".into()));
    }
    let t_len = outputs.nrows();
    let n = g.len();
    let per_k: Vec<Array2<f64>> = (0..k)
        .map(|kk| g.score_batch(outputs.slice(s![.., 1 + kk * d..1 + (kk + 1) * d])))
        .collect::<Result<_>>()?;
    let mut scores = Array2::zeros((t_len, n + 1));
    for t in 0..t_len {
        scores[[t, 0]] = blank_score(outputs[[t, 0]]);
    }
    {
        let mut words = scores.slice_mut(s![.., 1..]);
        if k == 1 {
            words.assign(&per_k[0]);
        } else {
            match mode {
                CombineMode::Sum => {
                    for p in &per_k {
                        words += p;
                    }
                }
                CombineMode::LogSumExp => {
                    ndarray::Zip::indexed(&mut words).for_each(|(t, i), w| {
                        let m = per_k.iter().map(|p| p[[t, i]]).fold(f64::NEG_INFINITY, f64::max);
                        *w = m + per_k.iter().map(|p| (p[[t, i]] - m).exp()).sum::<f64>().ln();
                    });
                }
            }
        }
    }
    Ok((scores, per_k))
}

/// Chain rule from `∂loss/∂scores` back to `∂loss/∂outputs` through the
/// blank square, the K-way combination, and the distance scores.
///
/// `∂(−b²)/∂b = −2b`; `∂s_i/∂f = 2(g_i − f)`; the sum node copies the
/// upstream gradient to every branch, log-sum-exp weights it by each
/// branch's share.
pub fn backprop_scores(
    outputs: ArrayView2<f64>,
    scores: &Array2<f64>,
    per_k: &[Array2<f64>],
    d_scores: ArrayView2<f64>,
    g: &VocabMatrix,
    k: usize,
    mode: CombineMode,
) -> Array2<f64> {
    let d = g.dim();
    let t_len = outputs.nrows();
    let mut d_out = Array2::zeros(outputs.dim());
    for t in 0..t_len {
        d_out[[t, 0]] = d_scores[[t, 0]] * (-2.0 * outputs[[t, 0]]);
    }
    let d_words = d_scores.slice(s![.., 1..]);
    let rows = g.to_rows();
    for (kk, s_k) in per_k.iter().enumerate() {
        let d_sk = if k == 1 || mode == CombineMode::Sum {
            d_words.to_owned()
        } else {
            let combined = scores.slice(s![.., 1..]);
            let mut w = s_k - &combined;
            w.mapv_inplace(f64::exp);
            w * &d_words
        };
        let f = outputs.slice(s![.., 1 + kk * d..1 + (kk + 1) * d]);
        let row_sums = d_sk.sum_axis(Axis(1));
        let mut d_f = d_sk.dot(&rows);
        for (mut row, (f_row, r)) in d_f.outer_iter_mut().zip(f.outer_iter().zip(&row_sums)) {
            row.scaled_add(-r, &f_row);
        }
        d_f *= 2.0;
        d_out.slice_mut(s![.., 1 + kk * d..1 + (kk + 1) * d]).assign(&d_f);
    }
    d_out
}
