//! The three character-level architectures and their truncated-BPTT
//! backward passes.
//!
//! All models share the Elman recurrence `h_t = σ(A c_t + R h_{t-1})`.
//! They differ in what is added to the pre-activation (the mixed model adds
//! `Q z_t` from a word-level RNN) and in which output matrix reads `h_t`
//! (the conditional model selects one per step by longest n-gram match).
//!
//! Embedding matrices are stored one row per input symbol, i.e. as the
//! transpose of `A`, so that looking up `A c_t` is a contiguous row read.
//!
//! A forward pass over a window records a [`StepTrace`]; `backward_into`
//! turns it into exact gradients of the window objective with the carried-in
//! hidden state held constant.

mod cond;
mod mixed;
mod plain;

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use cond::{CondGrads, CondRnn};
pub use mixed::{MixedGrads, MixedRnn};
pub use plain::{CharRnn, CharRnnGrads};

use crate::corpus::{CharVocab, EncodedStream, WordVocab};
use crate::error::{Error, Result};
use crate::tensor::{sample_categorical, sigmoid_in_place, softmax_in_place, Matrix, Rng, Vector};

/// Half-width of the uniform initialization interval.
pub const INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Plain,
    Mixed,
    Cond,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Plain => "plain",
            ModelKind::Mixed => "mixed",
            ModelKind::Cond => "cond",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(ModelKind::Plain),
            "mixed" => Ok(ModelKind::Mixed),
            "cond" => Ok(ModelKind::Cond),
            other => Err(Error::Config(format!("unknown model kind {other:?}"))),
        }
    }
}

/// Input embedding plus recurrent matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Recurrence {
    /// One row per input symbol.
    pub embed: Matrix,
    pub recur: Matrix,
    /// Rows at or past this index are never updated.
    trainable_rows: usize,
}

impl Recurrence {
    pub fn new(embed: Matrix, recur: Matrix, trainable_rows: usize) -> Result<Self> {
        let m = recur.rows();
        if recur.cols() != m || embed.cols() != m {
            return Err(Error::Shape(format!(
                "embedding {:?} and recurrent {:?} disagree on hidden size",
                embed.shape(),
                recur.shape()
            )));
        }
        if trainable_rows > embed.rows() {
            return Err(Error::Shape("trainable rows exceed embedding rows".into()));
        }
        Ok(Recurrence {
            embed,
            recur,
            trainable_rows,
        })
    }

    pub fn init(symbols: usize, trainable_rows: usize, hidden: usize, rng: &mut Rng) -> Self {
        let embed = Matrix::uniform(symbols, hidden, -INIT_SCALE, INIT_SCALE, rng);
        let recur = Matrix::uniform(hidden, hidden, -INIT_SCALE, INIT_SCALE, rng);
        Recurrence {
            embed,
            recur,
            trainable_rows,
        }
    }

    pub fn hidden(&self) -> usize {
        self.recur.rows()
    }

    pub fn symbols(&self) -> usize {
        self.embed.rows()
    }

    pub fn trainable_rows(&self) -> usize {
        self.trainable_rows
    }

    /// `out = A x + R h_prev` (pre-activation).
    #[inline]
    pub(crate) fn pre_activation(&self, input: u32, h_prev: &[f64], out: &mut [f64]) {
        out.copy_from_slice(self.embed.row(input as usize));
        self.recur.mul_vec_acc(h_prev, out);
    }

    pub(crate) fn check_input(&self, input: u32, what: &'static str) -> Result<()> {
        if input as usize >= self.embed.rows() {
            return Err(Error::Index {
                what,
                index: input as usize,
                limit: self.embed.rows(),
            });
        }
        Ok(())
    }

    /// Checked single step `σ(A x + R h_prev)`.
    pub fn step(&self, input: u32, h_prev: &[f64]) -> Result<Vector> {
        self.check_input(input, "input symbol")?;
        check_dim(h_prev.len(), self.hidden(), "previous hidden state")?;
        let mut h = Vector::zeros(self.hidden());
        self.pre_activation(input, h_prev, &mut h);
        sigmoid_in_place(&mut h);
        Ok(h)
    }

    fn apply(&mut self, g: &RecurrenceGrads, lr: f64, tau: f64) {
        for (&row, grad) in &g.embed.rows {
            if row < self.trainable_rows {
                crate::tensor::sgd_step_slice(self.embed.row_mut(row), grad, lr, tau);
            }
        }
        self.recur.sgd_step(&g.recur, lr, tau);
    }
}

pub(crate) fn check_dim(got: usize, want: usize, what: &str) -> Result<()> {
    if got != want {
        return Err(Error::Shape(format!("{what}: dimension {got}, expected {want}")));
    }
    Ok(())
}

/// Gradient rows for an embedding, keyed by input symbol.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseRows {
    pub width: usize,
    pub rows: BTreeMap<usize, Vec<f64>>,
}

impl SparseRows {
    pub fn new(width: usize) -> Self {
        SparseRows {
            width,
            rows: BTreeMap::new(),
        }
    }

    pub fn row_mut(&mut self, row: usize) -> &mut [f64] {
        let width = self.width;
        self.rows.entry(row).or_insert_with(|| vec![0.0; width])
    }

    pub fn to_dense(&self, rows: usize) -> Matrix {
        let mut m = Matrix::zeros(rows, self.width);
        for (&r, v) in &self.rows {
            m.row_mut(r).copy_from_slice(v);
        }
        m
    }

    pub fn clear(&mut self) {
        self.rows.clear();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecurrenceGrads {
    pub embed: SparseRows,
    pub recur: Matrix,
}

impl RecurrenceGrads {
    pub fn new(hidden: usize) -> Self {
        RecurrenceGrads {
            embed: SparseRows::new(hidden),
            recur: Matrix::zeros(hidden, hidden),
        }
    }

    pub fn clear(&mut self) {
        self.embed.clear();
        self.recur.fill(0.0);
    }

    fn named_dense(&self, prefix: &str, rows: usize) -> Vec<(String, Matrix)> {
        vec![
            (format!("{prefix}embed"), self.embed.to_dense(rows)),
            (format!("{prefix}recur"), self.recur.clone()),
        ]
    }
}

/// Hidden state carried from one window to the next.
#[derive(Debug, Clone, PartialEq)]
pub struct Carry {
    pub h: Vec<f64>,
    /// Word-level state of the mixed model: `g` after the latest completed
    /// word, which is the context `z` for the next character. Empty for the
    /// other models.
    pub g: Vec<f64>,
}

/// Running loss totals in nats. Steps are added one at a time in stream
/// order so that any split of a stream into windows sums identically.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossAcc {
    pub char_nats: f64,
    pub char_count: usize,
    pub word_nats: f64,
    pub word_count: usize,
    /// Targets that are outside the training alphabet; not scored.
    pub unseen_targets: usize,
    /// Skip the word-level softmax when nothing needs it (evaluation).
    pub chars_only: bool,
}

impl LossAcc {
    pub fn new() -> Self {
        LossAcc::default()
    }

    pub fn chars_only() -> Self {
        LossAcc {
            chars_only: true,
            ..LossAcc::default()
        }
    }

    pub fn char_bits_per_symbol(&self) -> f64 {
        if self.char_count == 0 {
            0.0
        } else {
            self.char_nats / (self.char_count as f64 * std::f64::consts::LN_2)
        }
    }
}

/// Word-RNN update recorded inside a window (mixed model only).
#[derive(Debug, Clone, PartialEq)]
pub struct WordTick {
    /// Window step after which the tick happened.
    pub step: usize,
    pub input: u32,
    pub g: Vec<f64>,
    /// Output distribution over the restricted vocabulary; empty when the
    /// word has no successor.
    pub probs: Vec<f64>,
    pub target: Option<u32>,
}

/// Everything the backward pass needs from one forward window.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepTrace {
    pub hidden_size: usize,
    pub h0: Vec<f64>,
    pub inputs: Vec<u32>,
    /// Post-activation hidden states, `len × m`.
    pub hidden: Vec<f64>,
    /// Output distributions, `len × d`; rows without a target are left zero.
    pub probs: Vec<f64>,
    pub targets: Vec<Option<u32>>,
    pub contexts: Vec<u32>,
    /// Mixed model: `z_t` per step (`len × g`), carried-in word state and ticks.
    pub z: Vec<f64>,
    pub g0: Vec<f64>,
    pub ticks: Vec<WordTick>,
}

impl StepTrace {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn hidden_at(&self, i: usize) -> &[f64] {
        &self.hidden[i * self.hidden_size..(i + 1) * self.hidden_size]
    }

    fn reset(&mut self, h0: &[f64]) {
        self.hidden_size = h0.len();
        self.h0.clear();
        self.h0.extend_from_slice(h0);
        self.inputs.clear();
        self.hidden.clear();
        self.probs.clear();
        self.targets.clear();
        self.contexts.clear();
        self.z.clear();
        self.g0.clear();
        self.ticks.clear();
    }
}

/// Target for the prediction made at `t`, if it can be scored.
#[inline]
pub(crate) fn target_at(chars: &[u32], t: usize, alphabet: usize, acc: &mut LossAcc) -> Option<u32> {
    let next = *chars.get(t + 1)?;
    if (next as usize) < alphabet {
        Some(next)
    } else {
        acc.unseen_targets += 1;
        None
    }
}

/// Softmax over `out · h` into `probs`; returns `-ln probs[target]`.
#[inline]
pub(crate) fn output_nll(out: &Matrix, h: &[f64], target: u32, probs: &mut [f64]) -> f64 {
    out.mul_vec_into(h, probs);
    let logit = probs[target as usize];
    let log_z = softmax_in_place(probs);
    log_z - logit
}

/// Softmax gradient for one step: `d = scale · (y - onehot(target))`,
/// `grad_out += d hᵀ`, `dh += outᵀ d`.
#[inline]
pub(crate) fn output_backward(
    out: &Matrix,
    grad_out: &mut Matrix,
    probs: &[f64],
    target: u32,
    scale: f64,
    h: &[f64],
    dh: &mut [f64],
    scratch: &mut Vec<f64>,
) {
    scratch.clear();
    scratch.extend(probs.iter().map(|p| scale * p));
    scratch[target as usize] -= scale;
    grad_out.add_outer(1.0, scratch, h);
    out.mul_vec_transpose_acc(scratch, dh);
}

/// `da = dh ⊙ h ⊙ (1 - h)`.
#[inline]
pub(crate) fn sigmoid_backward(dh: &[f64], h: &[f64], da: &mut [f64]) {
    for ((a, &d), &y) in da.iter_mut().zip(dh).zip(h) {
        *a = d * y * (1.0 - y);
    }
}

/// Negative log-likelihood in nats of `targets` under `predictions`.
pub fn nll_char(predictions: &[Vector], targets: &[u32]) -> Result<f64> {
    check_dim(targets.len(), predictions.len(), "targets")?;
    let mut total = 0.0;
    for (y, &t) in predictions.iter().zip(targets) {
        let p = *y.get(t as usize).ok_or(Error::Index {
            what: "target",
            index: t as usize,
            limit: y.dim(),
        })?;
        total -= p.ln();
    }
    Ok(total)
}

/// `λ · char + (1 − λ) · word`.
pub fn nll_mixed(char_nats: f64, word_nats: f64, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::Param(format!("interpolation weight must be in (0,1), got {lambda}")));
    }
    Ok(lambda * char_nats + (1.0 - lambda) * word_nats)
}

/// Any of the three architectures.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Plain(CharRnn),
    Mixed(MixedRnn),
    Cond(CondRnn),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Gradients {
    Plain(CharRnnGrads),
    Mixed(MixedGrads),
    Cond(CondGrads),
}

impl Gradients {
    pub fn clear(&mut self) {
        match self {
            Gradients::Plain(g) => g.clear(),
            Gradients::Mixed(g) => g.clear(),
            Gradients::Cond(g) => g.clear(),
        }
    }
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Plain(_) => ModelKind::Plain,
            Model::Mixed(_) => ModelKind::Mixed,
            Model::Cond(_) => ModelKind::Cond,
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.core().hidden()
    }

    /// Output alphabet size `d`.
    pub fn alphabet(&self) -> usize {
        match self {
            Model::Plain(p) => p.alphabet(),
            Model::Mixed(p) => p.alphabet(),
            Model::Cond(p) => p.alphabet(),
        }
    }

    pub fn core(&self) -> &Recurrence {
        match self {
            Model::Plain(p) => &p.core,
            Model::Mixed(p) => &p.core,
            Model::Cond(p) => &p.core,
        }
    }

    pub fn new_carry(&self) -> Carry {
        let g = match self {
            Model::Mixed(p) => p.word_hidden(),
            _ => 0,
        };
        Carry {
            h: vec![0.0; self.hidden_size()],
            g: vec![0.0; g],
        }
    }

    pub fn new_grads(&self) -> Gradients {
        match self {
            Model::Plain(p) => Gradients::Plain(p.new_grads()),
            Model::Mixed(p) => Gradients::Mixed(p.new_grads()),
            Model::Cond(p) => Gradients::Cond(p.new_grads()),
        }
    }

    /// Rejects streams whose ids the model cannot consume.
    pub fn check_stream(&self, stream: &EncodedStream) -> Result<()> {
        let symbols = self.core().symbols();
        if let Some(&bad) = stream.chars.iter().find(|&&c| c as usize >= symbols) {
            return Err(Error::Config(format!(
                "character id {bad} outside the model alphabet of {}",
                self.alphabet()
            )));
        }
        if let Model::Mixed(p) = self {
            if !stream.has_words() {
                return Err(Error::Config("the mixed model needs a stream with word alignment".into()));
            }
            let k = p.word.symbols();
            if let Some(&bad) = stream.words.iter().find(|&&w| w as usize >= k) {
                return Err(Error::Config(format!(
                    "word id {bad} outside the model vocabulary of {k}"
                )));
            }
        }
        Ok(())
    }

    /// Runs positions `range` of `stream`, updating `carry` and adding the
    /// losses to `acc`. Position `t` consumes `chars[t]` and predicts
    /// `chars[t + 1]` when there is one.
    pub fn forward(
        &self,
        stream: &EncodedStream,
        range: Range<usize>,
        carry: &mut Carry,
        acc: &mut LossAcc,
        trace: Option<&mut StepTrace>,
    ) {
        match self {
            Model::Plain(p) => p.forward(&stream.chars, range, carry, acc, trace),
            Model::Cond(p) => p.forward(&stream.chars, range, carry, acc, trace),
            Model::Mixed(p) => p.forward(stream, range, carry, acc, trace),
        }
    }

    /// Gradients of the window objective recorded in `trace`, written into
    /// `grads` (which is cleared first).
    pub fn backward_into(&self, trace: &StepTrace, grads: &mut Gradients) {
        grads.clear();
        match (self, grads) {
            (Model::Plain(p), Gradients::Plain(g)) => p.backward_into(trace, g),
            (Model::Mixed(p), Gradients::Mixed(g)) => p.backward_into(trace, g),
            (Model::Cond(p), Gradients::Cond(g)) => p.backward_into(trace, g),
            _ => panic!("gradient bundle does not match model kind"),
        }
    }

    pub fn backward(&self, trace: &StepTrace) -> Gradients {
        let mut g = self.new_grads();
        self.backward_into(trace, &mut g);
        g
    }

    /// Per-entry clip to `[-tau, tau]`, then `θ ← θ − lr · g`.
    pub fn apply(&mut self, grads: &Gradients, lr: f64, tau: f64) {
        match (self, grads) {
            (Model::Plain(p), Gradients::Plain(g)) => p.apply(g, lr, tau),
            (Model::Mixed(p), Gradients::Mixed(g)) => p.apply(g, lr, tau),
            (Model::Cond(p), Gradients::Cond(g)) => p.apply(g, lr, tau),
            _ => panic!("gradient bundle does not match model kind"),
        }
    }

    /// The window objective the gradients differentiate.
    pub fn objective(&self, acc: &LossAcc) -> f64 {
        match self {
            Model::Mixed(p) => p.lambda * acc.char_nats + (1.0 - p.lambda) * acc.word_nats,
            _ => acc.char_nats,
        }
    }

    /// Parameter matrices in a fixed order; this order is the checkpoint
    /// layout.
    pub fn matrices(&self) -> Vec<(&'static str, &Matrix)> {
        match self {
            Model::Plain(p) => p.matrices(),
            Model::Mixed(p) => p.matrices(),
            Model::Cond(p) => p.matrices(),
        }
    }

    pub fn matrices_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        match self {
            Model::Plain(p) => p.matrices_mut(),
            Model::Mixed(p) => p.matrices_mut(),
            Model::Cond(p) => p.matrices_mut(),
        }
    }

    /// Gradients expanded to dense matrices, in the order of [`Self::matrices`].
    pub fn dense_grads(&self, grads: &Gradients) -> Vec<(String, Matrix)> {
        match (self, grads) {
            (Model::Plain(p), Gradients::Plain(g)) => g.to_dense(p),
            (Model::Mixed(p), Gradients::Mixed(g)) => g.to_dense(p),
            (Model::Cond(p), Gradients::Cond(g)) => g.to_dense(p),
            _ => panic!("gradient bundle does not match model kind"),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.matrices().iter().all(|(_, m)| m.is_finite())
    }
}

/// Autoregressive sampling of `length` characters.
///
/// The network is primed with one character that is not emitted: newline
/// if the alphabet has one, else space, else id 0. Each sampled character
/// is fed back as the next input; the conditional model recomputes its
/// context from the generated history and the mixed model ticks its word
/// RNN whenever a new token starts.
pub fn sample_text(
    model: &Model,
    cv: &CharVocab,
    wv: Option<&WordVocab>,
    rng: &mut Rng,
    length: usize,
    temperature: f64,
) -> Result<String> {
    if !(temperature > 0.0) {
        return Err(Error::Param(format!("temperature must be positive, got {temperature}")));
    }
    if cv.len() != model.alphabet() {
        return Err(Error::Config(format!(
            "vocabulary has {} characters, model has {}",
            cv.len(),
            model.alphabet()
        )));
    }
    let wv = match model {
        Model::Mixed(_) => Some(wv.ok_or_else(|| {
            Error::Config("the mixed model needs a word vocabulary to sample".into())
        })?),
        _ => None,
    };
    let prime = ['\n', ' ']
        .iter()
        .find_map(|&c| cv.id(c))
        .unwrap_or(0);

    let m = model.hidden_size();
    let d = model.alphabet();
    let mut carry = model.new_carry();
    let mut h = vec![0.0; m];
    let mut logits = vec![0.0; d];
    let mut history: Vec<u32> = vec![prime];
    let mut out = String::with_capacity(length);
    let mut word = String::new();
    let mut prev_ws = cv.char_of(prime).is_none_or(char::is_whitespace);

    for _ in 0..length {
        let input = *history.last().expect("primed");
        match model {
            Model::Plain(p) => {
                p.core.pre_activation(input, &carry.h, &mut h);
                sigmoid_in_place(&mut h);
                p.out.mul_vec_into(&h, &mut logits);
            }
            Model::Cond(p) => {
                p.core.pre_activation(input, &carry.h, &mut h);
                sigmoid_in_place(&mut h);
                let ctx = p.index.context_at(&history, history.len() - 1);
                p.bank[ctx.index()].mul_vec_into(&h, &mut logits);
            }
            Model::Mixed(p) => {
                p.core.pre_activation(input, &carry.h, &mut h);
                p.cond.mul_vec_acc(&carry.g, &mut h);
                sigmoid_in_place(&mut h);
                p.out.mul_vec_into(&h, &mut logits);
            }
        }
        carry.h.copy_from_slice(&h);
        logits.iter_mut().for_each(|v| *v /= temperature);
        softmax_in_place(&mut logits);
        let next = sample_categorical(&logits, rng)? as u32;
        let c = cv.char_of(next).expect("sampled id inside alphabet");
        out.push(c);

        if let (Model::Mixed(p), Some(wv)) = (model, wv) {
            let ws = c.is_whitespace();
            if !ws && prev_ws && !word.is_empty() {
                let mut g = vec![0.0; p.word_hidden()];
                p.word.pre_activation(wv.id(&word), &carry.g, &mut g);
                sigmoid_in_place(&mut g);
                carry.g = g;
                word.clear();
            }
            if !ws {
                word.push(c);
            }
            prev_ws = ws;
        }
        history.push(next);
    }
    Ok(out)
}
