//! Sequential SGD with truncated BPTT and a validation-driven learning-rate
//! schedule.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::EncodedStream;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::model::{CharRnn, CondRnn, Gradients, LossAcc, MixedRnn, Model, ModelKind, StepTrace};
use crate::ngram::NGramIndex;
use crate::tensor::{streams, Rng, RngState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub hidden: usize,
    pub word_hidden: usize,
    /// Word vocabulary size, `<UNK>` included.
    pub word_topk: usize,
    /// Restricted word output vocabulary, `<UNK>` included.
    pub word_out: usize,
    pub lambda: f64,
    /// Minimum training count for an n-gram context.
    pub theta: u64,
    pub n_max: usize,
    pub bits: bool,
    pub gamma: f64,
    pub alpha: f64,
    pub tau: f64,
    pub bptt: usize,
    pub max_epochs: usize,
    /// Training stops once the learning rate has been divided this many times.
    pub max_decays: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelKind::Plain,
            hidden: 100,
            word_hidden: 200,
            word_topk: 10_000,
            word_out: 5_000,
            lambda: 0.5,
            theta: 1_000,
            n_max: 8,
            bits: false,
            gamma: 0.1,
            alpha: 1.5,
            tau: 15.0,
            bptt: 32,
            max_epochs: 50,
            max_decays: 8,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.gamma));
        }
        if !(self.alpha > 1.0 && self.alpha.is_finite()) {
            return bad(format!("decay factor must exceed 1, got {}", self.alpha));
        }
        if !(self.tau > 0.0) {
            return bad(format!("clip bound must be positive, got {}", self.tau));
        }
        if self.bptt == 0 {
            return bad("BPTT window must be at least 1".into());
        }
        if self.hidden == 0 {
            return bad("hidden size must be at least 1".into());
        }
        if self.model == ModelKind::Mixed {
            if !(self.lambda > 0.0 && self.lambda < 1.0) {
                return bad(format!("interpolation weight must be in (0,1), got {}", self.lambda));
            }
            if self.word_hidden == 0 {
                return bad("word hidden size must be at least 1".into());
            }
            if self.word_out == 0 || self.word_out > self.word_topk {
                return bad(format!(
                    "word output vocabulary {} must be in 1..={}",
                    self.word_out, self.word_topk
                ));
            }
            if self.bits {
                return bad("the mixed model needs words and cannot run in bit mode".into());
            }
        }
        if self.model == ModelKind::Cond && (self.n_max == 0 || self.theta == 0) {
            return bad("n-gram order and cutoff must be at least 1".into());
        }
        Ok(())
    }
}

/// Progress of the schedule; checkpointed with the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    /// Learning rate for the next epoch.
    pub lr: f64,
    pub best_valid: Option<f64>,
    pub decay_active: bool,
    pub decays: usize,
    pub rng: RngState,
}

impl TrainState {
    pub fn new(config: &TrainConfig, rng: &Rng) -> Self {
        TrainState {
            epoch: 0,
            lr: config.gamma,
            best_valid: None,
            decay_active: false,
            decays: 0,
            rng: rng.state(),
        }
    }
}

/// Fresh parameters drawn from the `INIT` stream of `config.seed`.
///
/// `words` is the word vocabulary size (mixed model) and `index` the n-gram
/// index (conditional model).
pub fn init_model(
    config: &TrainConfig,
    alphabet: usize,
    words: Option<usize>,
    index: Option<NGramIndex>,
) -> Result<(Model, Rng)> {
    config.validate()?;
    if alphabet == 0 {
        return Err(Error::Config("empty character vocabulary".into()));
    }
    let mut rng = Rng::derive(config.seed, streams::INIT);
    let model = match config.model {
        ModelKind::Plain => Model::Plain(CharRnn::init(alphabet, config.hidden, &mut rng)),
        ModelKind::Cond => {
            let index = index.ok_or_else(|| Error::Config("the conditional model needs an n-gram index".into()))?;
            Model::Cond(CondRnn::init(alphabet, config.hidden, index, &mut rng))
        }
        ModelKind::Mixed => {
            let k = words.ok_or_else(|| Error::Config("the mixed model needs a word vocabulary".into()))?;
            if config.word_out > k {
                return Err(Error::Config(format!(
                    "word output vocabulary {} exceeds the word vocabulary {k}",
                    config.word_out
                )));
            }
            Model::Mixed(MixedRnn::init(
                alphabet,
                config.hidden,
                k,
                config.word_hidden,
                config.word_out,
                config.lambda,
                &mut rng,
            )?)
        }
    };
    Ok((model, rng))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    /// Training entropy per symbol measured on the fly, before each
    /// window's update.
    pub bpc: f64,
    pub acc: LossAcc,
    pub seconds: f64,
}

/// Reusable buffers for [`train_epoch`].
pub struct Workspace {
    grads: Gradients,
    trace: StepTrace,
}

impl Workspace {
    pub fn new(model: &Model) -> Self {
        Workspace {
            grads: model.new_grads(),
            trace: StepTrace::default(),
        }
    }
}

/// One sequential pass. For each window of `bptt` positions: forward with a
/// trace, backward, per-entry clip to `tau`, then `θ ← θ − lr · g`. The
/// hidden state is carried across windows.
pub fn train_epoch(
    model: &mut Model,
    stream: &EncodedStream,
    config: &TrainConfig,
    lr: f64,
    work: &mut Workspace,
) -> Result<EpochStats> {
    if stream.is_empty() {
        return Err(Error::Input("empty training stream".into()));
    }
    model.check_stream(stream)?;
    let start = Instant::now();
    let mut carry = model.new_carry();
    let mut total = LossAcc::new();
    let mut pos = 0;
    while pos < stream.len() {
        let end = (pos + config.bptt).min(stream.len());
        let mut acc = LossAcc::new();
        model.forward(stream, pos..end, &mut carry, &mut acc, Some(&mut work.trace));
        if !model.objective(&acc).is_finite() {
            return Err(Error::Diverged { step: pos });
        }
        model.backward_into(&work.trace, &mut work.grads);
        model.apply(&work.grads, lr, config.tau);
        total.char_nats += acc.char_nats;
        total.char_count += acc.char_count;
        total.word_nats += acc.word_nats;
        total.word_count += acc.word_count;
        total.unseen_targets += acc.unseen_targets;
        pos = end;
    }
    if !model.is_finite() {
        return Err(Error::Diverged { step: stream.len() });
    }
    Ok(EpochStats {
        bpc: total.char_bits_per_symbol(),
        acc: total,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Once validation entropy exceeds the best so far, the rate is divided by
/// `alpha` after this and every later epoch.
pub fn lr_schedule(state: &mut TrainState, valid: f64, alpha: f64) {
    if state.best_valid.is_some_and(|best| valid > best) {
        state.decay_active = true;
    }
    if state.decay_active {
        state.lr /= alpha;
        state.decays += 1;
    }
    if state.best_valid.is_none_or(|best| valid < best) {
        state.best_valid = Some(valid);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_bpc: f64,
    pub valid_bpc: f64,
    pub seconds: f64,
}

pub const LOG_HEADER: &str = "epoch\tlr\ttrain_bpc\tvalid_bpc\tseconds";

impl EpochLog {
    /// Floats use their shortest round-trip representation.
    pub fn to_tsv_row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.epoch, self.lr, self.train_bpc, self.valid_bpc, self.seconds
        )
    }
}

pub fn log_to_tsv(log: &[EpochLog]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for row in log {
        s.push_str(&row.to_tsv_row());
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Parameters with the lowest validation entropy (the initial model
    /// when no epoch ran).
    pub best: Model,
    /// Schedule state right after the best epoch.
    pub best_state: TrainState,
    pub log: Vec<EpochLog>,
}

/// Divergence or other failure mid-run, with everything up to the last
/// completed epoch.
#[derive(Debug)]
pub struct FitError {
    pub error: Error,
    pub outcome: FitOutcome,
}

impl std::fmt::Display for FitError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} after {} epochs", self.error, self.outcome.log.len())
    }
}

impl std::error::Error for FitError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Trains until `max_epochs` or until the rate has been decayed
/// `max_decays` times. In bit mode entropies are scaled by 8 so the log
/// stays in bits per character. `on_epoch` sees every log row as it is
/// produced.
pub fn fit(
    config: &TrainConfig,
    mut model: Model,
    rng: &Rng,
    train: &EncodedStream,
    valid: &EncodedStream,
    mut on_epoch: impl FnMut(&EpochLog),
) -> std::result::Result<FitOutcome, FitError> {
    let mut state = TrainState::new(config, rng);
    let mut outcome = FitOutcome {
        best: model.clone(),
        best_state: state.clone(),
        log: Vec::new(),
    };
    if let Err(error) = config.validate() {
        return Err(FitError { error, outcome });
    }
    let scale = if config.bits { crate::corpus::BITS_PER_CHAR as f64 } else { 1.0 };
    let mut work = Workspace::new(&model);
    while state.epoch < config.max_epochs && state.decays < config.max_decays {
        let lr = state.lr;
        let stats = match train_epoch(&mut model, train, config, lr, &mut work) {
            Ok(s) => s,
            Err(error) => return Err(FitError { error, outcome }),
        };
        let report = match evaluate(&model, valid) {
            Ok(r) => r,
            Err(error) => return Err(FitError { error, outcome }),
        };
        if !report.bpc.is_finite() {
            let error = Error::Diverged { step: train.len() };
            return Err(FitError { error, outcome });
        }
        state.epoch += 1;
        let improved = state.best_valid.is_none_or(|b| report.bpc < b);
        lr_schedule(&mut state, report.bpc, config.alpha);
        let row = EpochLog {
            epoch: state.epoch,
            lr,
            train_bpc: stats.bpc * scale,
            valid_bpc: report.bpc * scale,
            seconds: stats.seconds,
        };
        on_epoch(&row);
        outcome.log.push(row);
        if improved {
            outcome.best = model.clone();
            outcome.best_state = state.clone();
        }
    }
    // later epochs still advance the schedule
    outcome.best_state.epoch = state.epoch;
    Ok(outcome)
}
