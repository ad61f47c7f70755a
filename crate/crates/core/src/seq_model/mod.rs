//! Attention-based next-waarneming predictor.
//!
//! One transformer block: multi-head self-attention and a position-wise
//! feed-forward network, each wrapped in a residual addition (no layer
//! normalization), followed by a softmax output head. Tokens are embedded
//! through a learned embedding table plus learned positional embeddings; the
//! embedding rows are scaled by `sqrt(d_model)` before the positional rows are
//! added.
//!
//! Inference ([`next_distribution`]) runs plain, unmasked attention over
//! `BOS + prefix` and reads the final position. Training evaluates every
//! prefix of a sequence in one pass with a causal mask; with a single block
//! the masked row `p` is exactly the unmasked computation on the prefix
//! ending at `p`, so both routes produce the same distribution.

mod backward;
pub mod checkpoint;
mod train;

use std::collections::HashMap;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event_model::{EventCode, EventTaxonomy, ParcelRecord};

pub use backward::{sequence_loss_and_grad, TargetLoss};
pub(crate) use train::{AdamW, BatchSampler};
pub use train::{evaluate_loss, moving_average, train, AdamWConfig, LossTrace, Schedule, TrainConfig, TrainingSequence};

pub type Matrix = Array2<f64>;
pub type Vector = Array1<f64>;

#[derive(Debug, Error)]
pub enum SeqModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("code {0} is not in the vocabulary")]
    UnknownCode(EventCode),
    #[error("empty input sequence")]
    EmptySequence,
    #[error("target index {index} out of range for vocabulary of {size}")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SeqModelError>;

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const PAD: usize = 2;
const N_SPECIALS: usize = 3;

/// Bijection between codes and indices; indices 0..3 are BOS, EOS, PAD.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    codes: Vec<EventCode>,
    index: HashMap<EventCode, usize>,
}

impl Vocabulary {
    /// Codes are assigned indices in ascending order after deduplication.
    pub fn from_codes(codes: impl IntoIterator<Item = EventCode>) -> Self {
        let mut codes: Vec<EventCode> = codes.into_iter().collect();
        codes.sort();
        codes.dedup();
        let index = codes.iter().enumerate().map(|(i, c)| (*c, i + N_SPECIALS)).collect();
        Self { codes, index }
    }

    pub fn from_taxonomy(taxonomy: &EventTaxonomy) -> Self {
        Self::from_codes(taxonomy.codes())
    }

    /// Total size including the special tokens.
    pub fn size(&self) -> usize {
        self.codes.len() + N_SPECIALS
    }

    pub fn index_of(&self, code: EventCode) -> Option<usize> {
        self.index.get(&code).copied()
    }

    pub fn encode(&self, code: EventCode) -> Result<usize> {
        self.index_of(code).ok_or(SeqModelError::UnknownCode(code))
    }

    pub fn code_at(&self, index: usize) -> Option<EventCode> {
        index.checked_sub(N_SPECIALS).and_then(|i| self.codes.get(i)).copied()
    }

    pub fn is_special(index: usize) -> bool {
        index < N_SPECIALS
    }

    pub fn codes(&self) -> &[EventCode] {
        &self.codes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_positions: usize,
}

impl ModelDims {
    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(SeqModelError::InvalidConfig(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.vocab_size <= N_SPECIALS || self.d_ff == 0 || self.max_positions < 2 {
            return Err(SeqModelError::InvalidConfig(format!("degenerate dims {self:?}")));
        }
        Ok(())
    }

    pub fn embed_scale(&self) -> f64 {
        (self.d_model as f64).sqrt()
    }
}

/// All learnable weights of the predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub dims: ModelDims,
    /// `V_total x d_model`
    pub embedding: Matrix,
    /// `max_positions x d_model`
    pub positions: Matrix,
    /// Per head, `d_model x d_k`.
    pub w_q: Vec<Matrix>,
    pub w_k: Vec<Matrix>,
    pub w_v: Vec<Matrix>,
    /// `h*d_k x d_model`
    pub w_o: Matrix,
    pub w_1: Matrix,
    pub b_1: Vector,
    pub w_2: Matrix,
    pub b_2: Vector,
    /// `d_model x V_total`
    pub w_out: Matrix,
    pub b_out: Vector,
}

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Self {
        let d = dims.d_model;
        let dk = dims.d_k();
        let heads = |_| Matrix::zeros((d, dk));
        Self {
            dims,
            embedding: Matrix::zeros((dims.vocab_size, d)),
            positions: Matrix::zeros((dims.max_positions, d)),
            w_q: (0..dims.heads).map(heads).collect(),
            w_k: (0..dims.heads).map(heads).collect(),
            w_v: (0..dims.heads).map(heads).collect(),
            w_o: Matrix::zeros((dims.heads * dk, d)),
            w_1: Matrix::zeros((d, dims.d_ff)),
            b_1: Vector::zeros(dims.d_ff),
            w_2: Matrix::zeros((dims.d_ff, d)),
            b_2: Vector::zeros(d),
            w_out: Matrix::zeros((d, dims.vocab_size)),
            b_out: Vector::zeros(dims.vocab_size),
        }
    }

    /// Weight matrices ~ uniform(-scale, scale); biases start at zero.
    pub fn init_uniform<R: Rng>(dims: ModelDims, scale: f64, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let mut p = Self::zeros(dims);
        for (name, values) in p.tensors_mut() {
            if !is_bias(&name) {
                for v in values.iter_mut() {
                    *v = rng.gen_range(-scale..scale);
                }
            }
        }
        Ok(p)
    }

    /// Every tensor as a flat row-major slice, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        out.push(("embedding".into(), slice(&self.embedding)));
        out.push(("positions".into(), slice(&self.positions)));
        for (h, m) in self.w_q.iter().enumerate() {
            out.push((format!("w_q.{h}"), slice(m)));
        }
        for (h, m) in self.w_k.iter().enumerate() {
            out.push((format!("w_k.{h}"), slice(m)));
        }
        for (h, m) in self.w_v.iter().enumerate() {
            out.push((format!("w_v.{h}"), slice(m)));
        }
        out.push(("w_o".into(), slice(&self.w_o)));
        out.push(("w_1".into(), slice(&self.w_1)));
        out.push(("b_1".into(), self.b_1.as_slice().expect("contiguous")));
        out.push(("w_2".into(), slice(&self.w_2)));
        out.push(("b_2".into(), self.b_2.as_slice().expect("contiguous")));
        out.push(("w_out".into(), slice(&self.w_out)));
        out.push(("b_out".into(), self.b_out.as_slice().expect("contiguous")));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        out.push(("embedding".into(), slice_mut(&mut self.embedding)));
        out.push(("positions".into(), slice_mut(&mut self.positions)));
        for (h, m) in self.w_q.iter_mut().enumerate() {
            out.push((format!("w_q.{h}"), slice_mut(m)));
        }
        for (h, m) in self.w_k.iter_mut().enumerate() {
            out.push((format!("w_k.{h}"), slice_mut(m)));
        }
        for (h, m) in self.w_v.iter_mut().enumerate() {
            out.push((format!("w_v.{h}"), slice_mut(m)));
        }
        out.push(("w_o".into(), slice_mut(&mut self.w_o)));
        out.push(("w_1".into(), slice_mut(&mut self.w_1)));
        out.push(("b_1".into(), self.b_1.as_slice_mut().expect("contiguous")));
        out.push(("w_2".into(), slice_mut(&mut self.w_2)));
        out.push(("b_2".into(), self.b_2.as_slice_mut().expect("contiguous")));
        out.push(("w_out".into(), slice_mut(&mut self.w_out)));
        out.push(("b_out".into(), self.b_out.as_slice_mut().expect("contiguous")));
        out
    }

    /// Named weight matrices (biases excluded).
    pub fn matrices(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![("embedding".to_string(), &self.embedding), ("positions".to_string(), &self.positions)];
        for (h, m) in self.w_q.iter().enumerate() {
            out.push((format!("w_q.{h}"), m));
        }
        for (h, m) in self.w_k.iter().enumerate() {
            out.push((format!("w_k.{h}"), m));
        }
        for (h, m) in self.w_v.iter().enumerate() {
            out.push((format!("w_v.{h}"), m));
        }
        out.push(("w_o".into(), &self.w_o));
        out.push(("w_1".into(), &self.w_1));
        out.push(("w_2".into(), &self.w_2));
        out.push(("w_out".into(), &self.w_out));
        out
    }

    pub fn matrix_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        let head = |prefix: &str| name.strip_prefix(prefix).and_then(|h| h.parse::<usize>().ok());
        match name {
            "embedding" => Some(&mut self.embedding),
            "positions" => Some(&mut self.positions),
            "w_o" => Some(&mut self.w_o),
            "w_1" => Some(&mut self.w_1),
            "w_2" => Some(&mut self.w_2),
            "w_out" => Some(&mut self.w_out),
            _ => {
                if let Some(h) = head("w_q.") {
                    self.w_q.get_mut(h)
                } else if let Some(h) = head("w_k.") {
                    self.w_k.get_mut(h)
                } else if let Some(h) = head("w_v.") {
                    self.w_v.get_mut(h)
                } else {
                    None
                }
            }
        }
    }

    pub fn matrix(&self, name: &str) -> Option<&Matrix> {
        self.matrices().into_iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Checks that every tensor matches `dims`.
    pub fn validate(&self) -> Result<()> {
        let reference = Self::zeros(self.dims);
        self.dims.validate()?;
        let mine = self.tensors();
        let want = reference.tensors();
        if mine.len() != want.len() {
            return Err(SeqModelError::ShapeMismatch("head count differs from dims".into()));
        }
        for ((n, a), (_, b)) in mine.iter().zip(want.iter()) {
            if a.len() != b.len() {
                return Err(SeqModelError::ShapeMismatch(format!("{n}: {} values, expected {}", a.len(), b.len())));
            }
        }
        let shapes_ok = self.embedding.dim() == reference.embedding.dim()
            && self.positions.dim() == reference.positions.dim()
            && self.w_o.dim() == reference.w_o.dim()
            && self.w_1.dim() == reference.w_1.dim()
            && self.w_2.dim() == reference.w_2.dim()
            && self.w_out.dim() == reference.w_out.dim()
            && self.w_q.iter().chain(&self.w_k).chain(&self.w_v).all(|m| m.dim() == reference.w_q[0].dim());
        if !shapes_ok {
            return Err(SeqModelError::ShapeMismatch("tensor shapes inconsistent with dims".into()));
        }
        Ok(())
    }
}

pub(crate) fn is_bias(name: &str) -> bool {
    name.starts_with("b_")
}

fn slice(m: &Matrix) -> &[f64] {
    m.as_slice().expect("parameters are stored in standard layout")
}

fn slice_mut(m: &mut Matrix) -> &mut [f64] {
    m.as_slice_mut().expect("parameters are stored in standard layout")
}

/// Probability per vocabulary index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution(pub Vec<f64>);

impl Distribution {
    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    /// Highest-probability index; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax_where(&self.0, |_| true)
    }

    pub fn argmax_where(&self, allowed: impl Fn(usize) -> bool) -> usize {
        argmax_where(&self.0, allowed)
    }
}

fn argmax_where(values: &[f64], allowed: impl Fn(usize) -> bool) -> usize {
    let mut best = usize::MAX;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in values.iter().enumerate() {
        if allowed(i) && (best == usize::MAX || v > best_v) {
            best = i;
            best_v = v;
        }
    }
    best
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise softmax; the result is always in standard (row-major) layout.
pub(crate) fn softmax_rows(m: Matrix) -> Matrix {
    let mut m = if m.is_standard_layout() { m } else { m.as_standard_layout().into_owned() };
    for mut row in m.rows_mut() {
        softmax_in_place(row.as_slice_mut().expect("standard layout rows are contiguous"));
    }
    m
}

/// `softmax(Q K^T / sqrt(d_k)) V`, every query attending to every key.
pub fn attention(q: ArrayView2<f64>, k: ArrayView2<f64>, v: ArrayView2<f64>) -> Result<Matrix> {
    let (n, dk) = q.dim();
    if dk == 0 {
        return Err(SeqModelError::ShapeMismatch("d_k must be at least 1".into()));
    }
    if k.ncols() != dk || k.nrows() != v.nrows() || k.nrows() == 0 || n == 0 {
        return Err(SeqModelError::ShapeMismatch(format!(
            "Q {:?}, K {:?}, V {:?}",
            q.dim(),
            k.dim(),
            v.dim()
        )));
    }
    let weights = attention_weights(q, k, false);
    Ok(weights.dot(&v))
}

/// Row-softmaxed scaled scores; with `causal`, row `i` only sees keys `0..=i`.
pub(crate) fn attention_weights(q: ArrayView2<f64>, k: ArrayView2<f64>, causal: bool) -> Matrix {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut scores = q.dot(&k.t()) * scale;
    if causal {
        for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
            for v in row.iter_mut().skip(i + 1) {
                *v = f64::NEG_INFINITY;
            }
        }
    }
    softmax_rows(scores)
}

/// Concatenated heads projected through `W_O`.
pub fn multi_head(x: ArrayView2<f64>, params: &ModelParams) -> Result<Matrix> {
    check_model_input(x, params)?;
    Ok(multi_head_impl(x, params, false))
}

pub(crate) fn multi_head_impl(x: ArrayView2<f64>, params: &ModelParams, causal: bool) -> Matrix {
    let dk = params.dims.d_k();
    let mut concat = Matrix::zeros((x.nrows(), params.dims.heads * dk));
    for h in 0..params.dims.heads {
        let q = x.dot(&params.w_q[h]);
        let k = x.dot(&params.w_k[h]);
        let v = x.dot(&params.w_v[h]);
        let out = attention_weights(q.view(), k.view(), causal).dot(&v);
        concat.slice_mut(s![.., h * dk..(h + 1) * dk]).assign(&out);
    }
    concat.dot(&params.w_o)
}

/// `max(0, X W_1 + b_1) W_2 + b_2`, row by row.
pub fn ffn(x: ArrayView2<f64>, params: &ModelParams) -> Result<Matrix> {
    check_model_input(x, params)?;
    if params.w_1.dim() != (params.dims.d_model, params.b_1.len()) || params.w_2.dim() != (params.b_1.len(), params.b_2.len()) {
        return Err(SeqModelError::ShapeMismatch("feed-forward weights inconsistent".into()));
    }
    Ok(ffn_impl(x, params))
}

pub(crate) fn ffn_impl(x: ArrayView2<f64>, params: &ModelParams) -> Matrix {
    let hidden = (x.dot(&params.w_1) + &params.b_1).mapv(|v| v.max(0.0));
    hidden.dot(&params.w_2) + &params.b_2
}

fn check_model_input(x: ArrayView2<f64>, params: &ModelParams) -> Result<()> {
    let d = params.dims.d_model;
    if x.ncols() != d || x.nrows() == 0 {
        return Err(SeqModelError::ShapeMismatch(format!("input {:?}, d_model {d}", x.dim())));
    }
    if params.dims.heads * params.dims.d_k() != d {
        return Err(SeqModelError::ShapeMismatch("d_model is not heads * d_k".into()));
    }
    Ok(())
}

/// Token ids for `BOS + codes`, keeping the most recent codes when the
/// sequence exceeds the positional table.
pub fn encode_prefix(sequence: &[EventCode], vocab: &Vocabulary, max_positions: usize) -> Result<Vec<usize>> {
    if sequence.is_empty() {
        return Err(SeqModelError::EmptySequence);
    }
    let keep = sequence.len().min(max_positions - 1);
    let mut tokens = Vec::with_capacity(keep + 1);
    tokens.push(BOS);
    for code in &sequence[sequence.len() - keep..] {
        tokens.push(vocab.encode(*code)?);
    }
    Ok(tokens)
}

/// Input rows: scaled token embedding plus positional embedding.
pub(crate) fn embed(tokens: &[usize], params: &ModelParams) -> Matrix {
    let scale = params.dims.embed_scale();
    let mut x = Matrix::zeros((tokens.len(), params.dims.d_model));
    for (p, &t) in tokens.iter().enumerate() {
        let mut row = x.row_mut(p);
        row.scaled_add(scale, &params.embedding.row(t));
        row += &params.positions.row(p);
    }
    x
}

/// Final hidden state of the block for every position.
pub(crate) fn block(x: &Matrix, params: &ModelParams, causal: bool) -> Matrix {
    let h1 = x + &multi_head_impl(x.view(), params, causal);
    let f = ffn_impl(h1.view(), params);
    h1 + f
}

/// `P(x_{n+1} | x_1..x_n) = softmax(h_n W_out + b_out)`.
pub fn next_distribution(sequence: &[EventCode], params: &ModelParams, vocab: &Vocabulary) -> Result<Distribution> {
    if vocab.size() != params.dims.vocab_size {
        return Err(SeqModelError::ShapeMismatch(format!(
            "vocabulary has {} entries, model expects {}",
            vocab.size(),
            params.dims.vocab_size
        )));
    }
    let tokens = encode_prefix(sequence, vocab, params.dims.max_positions)?;
    Ok(distribution_for_tokens(&tokens, params))
}

pub(crate) fn distribution_for_tokens(tokens: &[usize], params: &ModelParams) -> Distribution {
    let x = embed(tokens, params);
    let h = block(&x, params, false);
    let last = h.row(h.nrows() - 1);
    let mut logits = last.dot(&params.w_out) + &params.b_out;
    softmax_in_place(logits.as_slice_mut().expect("contiguous"));
    Distribution(logits.to_vec())
}

/// Next-code distributions for every prefix of `codes` in one causal pass.
/// Row `i` conditions on `codes[..=i]`.
pub fn all_prefix_distributions(codes: &[EventCode], params: &ModelParams, vocab: &Vocabulary) -> Result<Matrix> {
    if codes.is_empty() {
        return Err(SeqModelError::EmptySequence);
    }
    let mut tokens = vec![BOS];
    for c in codes.iter().take(params.dims.max_positions - 1) {
        tokens.push(vocab.encode(*c)?);
    }
    let x = embed(&tokens, params);
    let h = block(&x, params, true);
    let logits = h.slice(s![1.., ..]).dot(&params.w_out) + &params.b_out;
    Ok(softmax_rows(logits))
}

/// Greedy continuation of a sequence; always flagged as a prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictedSuffix {
    pub codes: Vec<EventCode>,
    pub is_prediction: bool,
}

/// Appends argmax codes (ties to the lowest index) until a terminal-category
/// code, EOS, or `max_len` codes.
pub fn complete_sequence(
    sequence: &[EventCode],
    params: &ModelParams,
    vocab: &Vocabulary,
    taxonomy: &EventTaxonomy,
    max_len: usize,
) -> Result<PredictedSuffix> {
    if sequence.is_empty() {
        return Err(SeqModelError::EmptySequence);
    }
    for c in sequence {
        vocab.encode(*c)?;
    }
    let is_terminal = |c: EventCode| taxonomy.category_of(c).is_some_and(|cat| cat.is_terminal());
    let mut suffix = Vec::new();
    let mut current = sequence.to_vec();
    if is_terminal(*current.last().expect("non-empty")) {
        return Ok(PredictedSuffix { codes: suffix, is_prediction: true });
    }
    while suffix.len() < max_len {
        let dist = next_distribution(&current, params, vocab)?;
        let next = dist.argmax_where(|i| i == EOS || !Vocabulary::is_special(i));
        if next == EOS {
            break;
        }
        let code = vocab.code_at(next).expect("non-special index maps to a code");
        suffix.push(code);
        current.push(code);
        if is_terminal(code) {
            break;
        }
    }
    Ok(PredictedSuffix { codes: suffix, is_prediction: true })
}

/// `-ln pred[target]`.
pub fn cross_entropy(pred: &Distribution, target_index: usize) -> Result<f64> {
    let p = pred
        .0
        .get(target_index)
        .ok_or(SeqModelError::IndexOutOfRange { index: target_index, size: pred.0.len() })?;
    Ok(-p.ln())
}

/// Mean cross-entropy over a batch of `(prediction, target)` samples.
pub fn batch_cross_entropy<'a>(samples: impl IntoIterator<Item = (&'a Distribution, usize)>) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (pred, target) in samples {
        total += cross_entropy(pred, target)?;
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

/// Training sequences derived from parcel records.
pub fn sequences_from_records(records: &[ParcelRecord]) -> Vec<TrainingSequence> {
    records.iter().map(TrainingSequence::from).collect()
}

/// Rows of `m` as plain vectors; handy for comparisons in tests and reports.
pub fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.axis_iter(Axis(0)).map(|r| r.to_vec()).collect()
}
