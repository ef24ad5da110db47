mod support;

use ccrnn::corpus::{CharVocab, EncodedStream};
use ccrnn::eval::{evaluate, evaluate_sharded};
use ccrnn::model::{nll_char, nll_mixed, sample_text, CharRnn, CondRnn, LossAcc, Model, StepTrace};
use ccrnn::ngram::{IndexEntry, NGramIndex};
use ccrnn::tensor::{Matrix, Rng, Vector};
use ccrnn::trainer::{fit, lr_schedule, train_epoch, EpochStats, TrainConfig, TrainState, Workspace};
use ccrnn::Experiment;

fn plain(d: usize, m: usize, seed: u64) -> Model {
    Model::Plain(CharRnn::init(d, m, &mut Rng::new(seed)))
}

fn random_stream(rng: &mut Rng, len: usize, d: u32) -> EncodedStream {
    EncodedStream::from_chars((0..len).map(|_| rng.below(d as u64) as u32).collect())
}

fn config(bptt: usize, tau: f64) -> TrainConfig {
    TrainConfig { bptt, tau, ..TrainConfig::default() }
}

fn assert_close(a: &Matrix, b: &Matrix, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() <= tol, "{x} vs {y}");
    }
}

fn epoch(model: &mut Model, stream: &EncodedStream, config: &TrainConfig, lr: f64) -> ccrnn::Result<EpochStats> {
    let mut work = Workspace::new(model);
    train_epoch(model, stream, config, lr, &mut work)
}

fn sgd(p: &Matrix, g: &Matrix, lr: f64, tau: f64) -> Matrix {
    let data = p.data().iter().zip(g.data()).map(|(w, d)| w - lr * d.clamp(-tau, tau)).collect();
    Matrix::from_vec(p.rows(), p.cols(), data).unwrap()
}

#[test]
fn single_window_step_matches_scalar_oracle() {
    let mut rng = Rng::new(11);
    for tau in [15.0, 0.05] {
        let stream = random_stream(&mut rng, 9, 4);
        let mut model = plain(4, 5, rng.next_u64());
        let Model::Plain(before) = model.clone() else { unreachable!() };
        let (de, dr, du) = support::plain_window_grads(&before, &stream.chars, &[0.0; 5]);
        epoch(&mut model, &stream, &config(32, tau), 0.3).unwrap();
        let Model::Plain(after) = model else { unreachable!() };
        // the unseen row is never trained
        let mut de = de;
        de.row_mut(4).fill(0.0);
        assert_close(&after.core.embed, &sgd(&before.core.embed, &de, 0.3, tau), 1e-12);
        assert_close(&after.core.recur, &sgd(&before.core.recur, &dr, 0.3, tau), 1e-12);
        assert_close(&after.out, &sgd(&before.out, &du, 0.3, tau), 1e-12);
    }
}

#[test]
fn updates_never_exceed_lr_times_tau() {
    let mut rng = Rng::new(5);
    let stream = random_stream(&mut rng, 10, 6);
    let mut model = plain(6, 7, 2);
    for (_, m) in model.matrices_mut() {
        for v in m.data_mut() {
            *v = rng.uniform_range(-3.0, 3.0);
        }
    }
    let before = model.clone();
    let (lr, tau) = (0.8, 0.01);
    epoch(&mut model, &stream, &config(32, tau), lr).unwrap();
    let mut moved = false;
    for ((_, a), (_, b)) in before.matrices().iter().zip(model.matrices()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= lr * tau + 1e-15);
            moved |= x != y;
        }
    }
    assert!(moved);
}

#[test]
fn zero_rate_is_a_no_op_and_matches_evaluation() {
    let mut rng = Rng::new(3);
    let stream = random_stream(&mut rng, 200, 5);
    let mut model = plain(5, 6, 9);
    let before = model.clone();
    let stats = epoch(&mut model, &stream, &config(32, 15.0), 0.0).unwrap();
    assert_eq!(model, before);
    let report = evaluate(&model, &stream).unwrap();
    assert!((stats.bpc - report.bpc).abs() < 1e-12);
    assert_eq!(stats.acc.char_count, 199);
}

#[test]
fn empty_window_has_zero_gradients() {
    let mut rng = Rng::new(8);
    let stream = random_stream(&mut rng, 20, 4);
    let model = plain(4, 3, 1);
    let mut carry = model.new_carry();
    let mut trace = StepTrace::default();
    let mut acc = LossAcc::new();
    model.forward(&stream, 5..5, &mut carry, &mut acc, Some(&mut trace));
    assert_eq!(acc.char_count, 0);
    let grads = model.backward(&trace);
    for (_, g) in model.dense_grads(&grads) {
        assert!(g.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn conditional_gradients_touch_only_seen_contexts() {
    let entries = vec![
        IndexEntry { ngram: vec![], count: 0 },
        IndexEntry { ngram: vec![0], count: 5 },
        IndexEntry { ngram: vec![1], count: 5 },
        IndexEntry { ngram: vec![2], count: 5 },
        IndexEntry { ngram: vec![2, 2], count: 5 },
    ];
    let index = NGramIndex::from_entries(entries, 2, 1).unwrap();
    let model = Model::Cond(CondRnn::init(3, 4, index, &mut Rng::new(4)));
    let stream = EncodedStream::from_chars(vec![0, 1, 0, 1, 0]);
    let mut carry = model.new_carry();
    let mut trace = StepTrace::default();
    model.forward(&stream, 0..5, &mut carry, &mut LossAcc::new(), Some(&mut trace));
    let ccrnn::model::Gradients::Cond(g) = model.backward(&trace) else { unreachable!() };
    assert_eq!(g.bank.keys().copied().collect::<Vec<_>>(), vec![1, 2]);
}

#[test]
fn evaluation_matches_scalar_oracle() {
    let mut rng = Rng::new(21);
    let mut stream = random_stream(&mut rng, 300, 6);
    stream.chars[17] = 6;
    let model = plain(6, 5, 13);
    let report = evaluate(&model, &stream).unwrap();
    let nats = support::char_nats(&model, &stream, 0..300, &[0.0; 5], None);
    assert!((report.nats - nats).abs() < 1e-10);
    assert_eq!(report.unseen, 1);
    assert_eq!(report.tokens, 298);
    assert!((report.bpc - nats / (298.0 * std::f64::consts::LN_2)).abs() < 1e-12);
}

#[test]
fn sharded_evaluation_sums_independent_pieces() {
    let mut rng = Rng::new(2);
    let stream = random_stream(&mut rng, 101, 4);
    let model = plain(4, 5, 7);
    assert_eq!(evaluate_sharded(&model, &stream, 1).unwrap(), evaluate(&model, &stream).unwrap());
    let report = evaluate_sharded(&model, &stream, 4).unwrap();
    let bounds = [0, 25, 50, 75, 101];
    let nats: f64 = bounds
        .windows(2)
        .map(|b| support::char_nats(&model, &stream, b[0]..b[1], &[0.0; 5], None))
        .sum();
    assert!((report.nats - nats).abs() < 1e-10);
    assert!(evaluate_sharded(&model, &stream, 0).is_err());
}

#[test]
fn nll_examples() {
    let certain = Vector::from(vec![0.0, 1.0]);
    assert_eq!(nll_char(&[certain], &[1]).unwrap(), 0.0);
    let uniform = Vector::from(vec![0.25; 4]);
    let n = nll_char(&[uniform.clone(), uniform], &[0, 3]).unwrap();
    assert!((n - 2.0 * 4f64.ln()).abs() < 1e-15);
    assert_eq!(nll_mixed(4.0, 2.0, 0.5).unwrap(), 3.0);
    assert!((nll_mixed(4.0, 2.0, 1.0 - 1e-9).unwrap() - 4.0).abs() < 1e-8);
    assert!(nll_mixed(4.0, 2.0, 0.0).is_err());
    assert!(nll_mixed(4.0, 2.0, 1.0).is_err());
}

#[test]
fn schedule_holds_then_decays_every_epoch() {
    let config = TrainConfig::default();
    let mut state = TrainState::new(&config, &Rng::new(1));
    let mut rates = Vec::new();
    for valid in [3.0, 2.5, 2.6, 2.4, 2.3] {
        lr_schedule(&mut state, valid, 1.5);
        rates.push(state.lr);
    }
    assert_eq!(&rates[..2], &[0.1, 0.1]);
    for w in rates[2..].windows(2) {
        assert!((w[1] - w[0] / 1.5).abs() < 1e-15);
    }
    assert_eq!(state.decays, 3);
    assert_eq!(state.best_valid, Some(2.3));
}

#[test]
fn alternating_text_is_learned() {
    let text = "ab".repeat(200);
    let config = TrainConfig { hidden: 4, max_epochs: 50, ..TrainConfig::default() };
    let exp = Experiment::from_training_text(config.clone(), &text).unwrap();
    let (model, rng) = exp.init_model().unwrap();
    let stream = exp.encode(&text).unwrap();
    let out = fit(&config, model, &rng, &stream, &stream, |_| {}).unwrap();
    let best = out.log.iter().map(|r| r.valid_bpc).fold(f64::INFINITY, f64::min);
    assert!(best < 0.2, "best {best}");
    assert!(out.log.len() <= 50);
}

#[test]
fn sampling_is_deterministic_and_stays_in_alphabet() {
    let cv = CharVocab::build("hello world\n").unwrap();
    let model = plain(cv.len(), 6, 3);
    let a = sample_text(&model, &cv, None, &mut Rng::new(9), 200, 1.0).unwrap();
    let b = sample_text(&model, &cv, None, &mut Rng::new(9), 200, 1.0).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.chars().count(), 200);
    assert!(a.chars().all(|c| cv.id(c).is_some()));
    assert_eq!(sample_text(&model, &cv, None, &mut Rng::new(9), 0, 1.0).unwrap(), "");
    assert!(sample_text(&model, &cv, None, &mut Rng::new(9), 5, 0.0).is_err());
}
