use std::ops::Range;

use super::plain::{char_backward, check_char_shapes};
use super::{
    check_dim, output_backward, output_nll, sigmoid_backward, target_at, Carry, LossAcc,
    Recurrence, RecurrenceGrads, StepTrace, WordTick, INIT_SCALE,
};
use crate::corpus::{EncodedStream, WordVocab};
use crate::error::{Error, Result};
use crate::tensor::{axpy, sigmoid_in_place, softmax_in_place, Matrix, Rng, Vector};

/// Character RNN conditioned on a word-level RNN:
/// `h_t = σ(A c_t + R h_{t-1} + Q z_t)` with `z_t = g_{p-1}` for a character
/// of word `p`, and `g_p = σ(A_w w_p + R_w g_{p-1})`.
///
/// The word RNN ticks once per word, right after the word's last character
/// (trailing whitespace included) has been consumed. Its output
/// `v_p = softmax(U_w g_p)` predicts the next word over the restricted
/// vocabulary made of the first `k_out` word ids; other words are scored as
/// `<UNK>`.
///
/// Training minimizes `λ · char NLL + (1 − λ) · word NLL`. Inside a BPTT
/// window `z_t` is a constant for the character loss, so the word RNN only
/// learns from its own loss.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedRnn {
    pub core: Recurrence,
    /// `d × m`.
    pub out: Matrix,
    /// `Q`, `m × g`.
    pub cond: Matrix,
    /// `k` embedding rows of width `g`, `g × g` recurrence.
    pub word: Recurrence,
    /// `k_out × g`.
    pub word_out: Matrix,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedGrads {
    pub core: RecurrenceGrads,
    pub out: Matrix,
    pub cond: Matrix,
    pub word: RecurrenceGrads,
    pub word_out: Matrix,
}

impl MixedGrads {
    pub fn clear(&mut self) {
        self.core.clear();
        self.out.fill(0.0);
        self.cond.fill(0.0);
        self.word.clear();
        self.word_out.fill(0.0);
    }

    pub(crate) fn to_dense(&self, model: &MixedRnn) -> Vec<(String, Matrix)> {
        let mut v = self.core.named_dense("", model.core.symbols());
        v.push(("out".into(), self.out.clone()));
        v.push(("cond".into(), self.cond.clone()));
        v.extend(self.word.named_dense("word_", model.word.symbols()));
        v.push(("word_out".into(), self.word_out.clone()));
        v
    }
}

impl MixedRnn {
    pub fn new(
        core: Recurrence,
        out: Matrix,
        cond: Matrix,
        word: Recurrence,
        word_out: Matrix,
        lambda: f64,
    ) -> Result<Self> {
        check_char_shapes(&core, &out)?;
        let g = word.hidden();
        if cond.shape() != (core.hidden(), g) {
            return Err(Error::Shape(format!(
                "conditioning matrix {:?}, expected {:?}",
                cond.shape(),
                (core.hidden(), g)
            )));
        }
        if word_out.cols() != g || word_out.rows() > word.symbols() || word_out.rows() == 0 {
            return Err(Error::Shape(format!(
                "word output {:?} for {} words of width {g}",
                word_out.shape(),
                word.symbols()
            )));
        }
        if !(lambda > 0.0 && lambda < 1.0) {
            return Err(Error::Param(format!("interpolation weight must be in (0,1), got {lambda}")));
        }
        Ok(MixedRnn {
            core,
            out,
            cond,
            word,
            word_out,
            lambda,
        })
    }

    pub fn init(
        alphabet: usize,
        hidden: usize,
        words: usize,
        word_hidden: usize,
        word_out: usize,
        lambda: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if word_out == 0 || word_out > words {
            return Err(Error::Config(format!(
                "restricted word vocabulary {word_out} must be in 1..={words}"
            )));
        }
        let core = Recurrence::init(alphabet + 1, alphabet, hidden, rng);
        let out = Matrix::uniform(alphabet, hidden, -INIT_SCALE, INIT_SCALE, rng);
        let cond = Matrix::uniform(hidden, word_hidden, -INIT_SCALE, INIT_SCALE, rng);
        let word = Recurrence::init(words, words, word_hidden, rng);
        let word_out = Matrix::uniform(word_out, word_hidden, -INIT_SCALE, INIT_SCALE, rng);
        MixedRnn::new(core, out, cond, word, word_out, lambda)
    }

    pub fn alphabet(&self) -> usize {
        self.out.rows()
    }

    pub fn hidden(&self) -> usize {
        self.core.hidden()
    }

    pub fn word_hidden(&self) -> usize {
        self.word.hidden()
    }

    /// Size of the restricted output vocabulary, `<UNK>` included.
    pub fn restricted_vocab(&self) -> usize {
        self.word_out.rows()
    }

    /// Maps a word id to its restricted-output id.
    #[inline]
    pub fn out_target(&self, word: u32) -> u32 {
        if (word as usize) < self.restricted_vocab() {
            word
        } else {
            WordVocab::UNK_ID
        }
    }

    /// `σ(A c + R h_prev + Q z)`.
    pub fn step(&self, c: u32, h_prev: &[f64], z: &[f64]) -> Result<Vector> {
        self.core.check_input(c, "character id")?;
        check_dim(h_prev.len(), self.hidden(), "previous hidden state")?;
        check_dim(z.len(), self.word_hidden(), "word context")?;
        let mut h = Vector::zeros(self.hidden());
        self.core.pre_activation(c, h_prev, &mut h);
        self.cond.mul_vec_acc(z, &mut h);
        sigmoid_in_place(&mut h);
        Ok(h)
    }

    /// `σ(A_w w + R_w g_prev)`.
    pub fn word_step(&self, w: u32, g_prev: &[f64]) -> Result<Vector> {
        self.word.step(w, g_prev)
    }

    /// `softmax(U_w g)` over the restricted vocabulary.
    pub fn word_output(&self, g: &[f64]) -> Result<Vector> {
        check_dim(g.len(), self.word_hidden(), "word hidden state")?;
        let mut v = Vector::zeros(self.restricted_vocab());
        self.word_out.mul_vec_into(g, &mut v);
        softmax_in_place(&mut v);
        Ok(v)
    }

    /// `softmax(U h)`.
    pub fn output(&self, h: &[f64]) -> Result<Vector> {
        check_dim(h.len(), self.hidden(), "hidden state")?;
        let mut y = Vector::zeros(self.alphabet());
        self.out.mul_vec_into(h, &mut y);
        softmax_in_place(&mut y);
        Ok(y)
    }

    pub(crate) fn new_grads(&self) -> MixedGrads {
        let (m, g) = (self.hidden(), self.word_hidden());
        MixedGrads {
            core: RecurrenceGrads::new(m),
            out: Matrix::zeros(self.alphabet(), m),
            cond: Matrix::zeros(m, g),
            word: RecurrenceGrads::new(g),
            word_out: Matrix::zeros(self.restricted_vocab(), g),
        }
    }

    pub(crate) fn forward(
        &self,
        stream: &EncodedStream,
        range: Range<usize>,
        carry: &mut Carry,
        acc: &mut LossAcc,
        mut trace: Option<&mut StepTrace>,
    ) {
        let d = self.alphabet();
        let chars = &stream.chars;
        let mut h = vec![0.0; self.hidden()];
        let mut g = vec![0.0; self.word_hidden()];
        let mut probs = vec![0.0; d];
        let mut word_probs = vec![0.0; self.restricted_vocab()];
        if let Some(tr) = trace.as_deref_mut() {
            tr.reset(&carry.h);
            tr.g0.extend_from_slice(&carry.g);
        }
        let score_words = trace.is_some() || !acc.chars_only;
        for (i, t) in range.enumerate() {
            self.core.pre_activation(chars[t], &carry.h, &mut h);
            self.cond.mul_vec_acc(&carry.g, &mut h);
            sigmoid_in_place(&mut h);
            let target = target_at(chars, t, d, acc);
            if let Some(y) = target {
                acc.char_nats += output_nll(&self.out, &h, y, &mut probs);
                acc.char_count += 1;
            }
            carry.h.copy_from_slice(&h);
            if let Some(tr) = trace.as_deref_mut() {
                tr.inputs.push(chars[t]);
                tr.hidden.extend_from_slice(&h);
                if target.is_some() {
                    tr.probs.extend_from_slice(&probs);
                } else {
                    tr.probs.extend(std::iter::repeat_n(0.0, d));
                }
                tr.targets.push(target);
                tr.contexts.push(0);
                tr.z.extend_from_slice(&carry.g);
            }

            if !stream.is_word_end(t) {
                continue;
            }
            let p = stream.word_of_char[t] as usize;
            let w = stream.words[p];
            self.word.pre_activation(w, &carry.g, &mut g);
            sigmoid_in_place(&mut g);
            let word_target = stream
                .words
                .get(p + 1)
                .filter(|_| score_words)
                .map(|&next| self.out_target(next));
            if let Some(y) = word_target {
                acc.word_nats += output_nll(&self.word_out, &g, y, &mut word_probs);
                acc.word_count += 1;
            }
            carry.g.copy_from_slice(&g);
            if let Some(tr) = trace.as_deref_mut() {
                tr.ticks.push(WordTick {
                    step: i,
                    input: w,
                    g: g.clone(),
                    probs: if word_target.is_some() {
                        word_probs.clone()
                    } else {
                        Vec::new()
                    },
                    target: word_target,
                });
            }
        }
    }

    pub(crate) fn backward_into(&self, trace: &StepTrace, grads: &mut MixedGrads) {
        let gdim = self.word_hidden();
        char_backward(
            &self.core,
            self.alphabet(),
            trace,
            |_| &self.out,
            &mut grads.out,
            &mut grads.core,
            self.lambda,
            Some((&mut grads.cond, gdim)),
        );

        let word_scale = 1.0 - self.lambda;
        let mut dg = vec![0.0; gdim];
        let mut dg_next = vec![0.0; gdim];
        let mut da = vec![0.0; gdim];
        let mut scratch = Vec::with_capacity(self.restricted_vocab());
        for j in (0..trace.ticks.len()).rev() {
            let tick = &trace.ticks[j];
            dg.copy_from_slice(&dg_next);
            if let Some(y) = tick.target {
                output_backward(
                    &self.word_out,
                    &mut grads.word_out,
                    &tick.probs,
                    y,
                    word_scale,
                    &tick.g,
                    &mut dg,
                    &mut scratch,
                );
            }
            sigmoid_backward(&dg, &tick.g, &mut da);
            axpy(1.0, &da, grads.word.embed.row_mut(tick.input as usize));
            let g_prev = if j == 0 { &trace.g0 } else { &trace.ticks[j - 1].g };
            grads.word.recur.add_outer(1.0, &da, g_prev);
            dg_next.fill(0.0);
            self.word.recur.mul_vec_transpose_acc(&da, &mut dg_next);
        }
    }

    pub(crate) fn apply(&mut self, g: &MixedGrads, lr: f64, tau: f64) {
        self.core.apply(&g.core, lr, tau);
        self.out.sgd_step(&g.out, lr, tau);
        self.cond.sgd_step(&g.cond, lr, tau);
        self.word.apply(&g.word, lr, tau);
        self.word_out.sgd_step(&g.word_out, lr, tau);
    }

    pub(crate) fn matrices(&self) -> Vec<(&'static str, &Matrix)> {
        vec![
            ("embed", &self.core.embed),
            ("recur", &self.core.recur),
            ("out", &self.out),
            ("cond", &self.cond),
            ("word_embed", &self.word.embed),
            ("word_recur", &self.word.recur),
            ("word_out", &self.word_out),
        ]
    }

    pub(crate) fn matrices_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        vec![
            ("embed", &mut self.core.embed),
            ("recur", &mut self.core.recur),
            ("out", &mut self.out),
            ("cond", &mut self.cond),
            ("word_embed", &mut self.word.embed),
            ("word_recur", &mut self.word.recur),
            ("word_out", &mut self.word_out),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{encode_stream, CharVocab};
    use crate::model::{CharRnn, Model};

    fn tiny(seed: u64) -> MixedRnn {
        MixedRnn::init(4, 3, 5, 2, 3, 0.5, &mut Rng::new(seed)).unwrap()
    }

    #[test]
    fn zero_conditioning_reduces_to_plain() {
        let mut p = tiny(1);
        let plain = CharRnn::new(p.core.clone(), p.out.clone()).unwrap();
        let h_prev = [0.3, 0.6, 0.1];
        let z = [0.8, 0.2];
        // z = 0
        assert_eq!(p.step(2, &h_prev, &[0.0, 0.0]).unwrap(), plain.step(2, &h_prev).unwrap());
        // Q = 0
        p.cond.fill(0.0);
        assert_eq!(p.step(2, &h_prev, &z).unwrap(), plain.step(2, &h_prev).unwrap());
    }

    #[test]
    fn step_matches_scalar_loop() {
        let p = tiny(2);
        let h_prev = [0.3, 0.6, 0.1];
        let z = [0.8, 0.2];
        let h = p.step(1, &h_prev, &z).unwrap();
        for i in 0..3 {
            let mut a = p.core.embed.get(1, i);
            for j in 0..3 {
                a += p.core.recur.get(i, j) * h_prev[j];
            }
            for j in 0..2 {
                a += p.cond.get(i, j) * z[j];
            }
            assert!((h[i] - 1.0 / (1.0 + (-a).exp())).abs() < 1e-12);
        }
        assert!(matches!(p.step(1, &h_prev, &[0.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn word_step_examples() {
        let mut p = tiny(3);
        let g = p.word_step(4, &[0.9, 0.1]).unwrap();
        for i in 0..2 {
            let a = p.word.embed.get(4, i) + p.word.recur.get(i, 0) * 0.9 + p.word.recur.get(i, 1) * 0.1;
            assert!((g[i] - 1.0 / (1.0 + (-a).exp())).abs() < 1e-12);
        }
        let g0 = p.word_step(2, &[0.0, 0.0]).unwrap();
        assert_eq!(g0[1], 1.0 / (1.0 + (-p.word.embed.get(2, 1)).exp()));
        assert!(matches!(p.word_step(5, &[0.0, 0.0]), Err(Error::Index { .. })));
        p.word.embed.fill(0.0);
        p.word.recur.fill(0.0);
        assert_eq!(&*p.word_step(1, &[0.4, 0.4]).unwrap(), &[0.5, 0.5]);
    }

    #[test]
    fn word_output_examples() {
        let mut p = tiny(4);
        let v = p.word_output(&[0.2, 0.7]).unwrap();
        assert_eq!(v.dim(), 3);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        p.word_out.fill(0.0);
        let v = p.word_output(&[0.2, 0.7]).unwrap();
        assert!(v.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        // two words: U_w g = (ln 3, 0) → (0.75, 0.25)
        let mut two = MixedRnn::init(2, 2, 3, 1, 2, 0.5, &mut Rng::new(0)).unwrap();
        two.word_out = Matrix::from_rows(&[&[3f64.ln()], &[0.0]]).unwrap();
        let v = two.word_output(&[1.0]).unwrap();
        assert!((v[0] - 0.75).abs() < 1e-12 && (v[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn restricted_targets_map_to_unk() {
        let p = tiny(5);
        assert_eq!(p.out_target(2), 2);
        assert_eq!(p.out_target(3), WordVocab::UNK_ID);
    }

    #[test]
    fn word_rnn_ticks_once_per_word() {
        let text = "the cat  sat on the mat\n";
        let cv = CharVocab::build(text).unwrap();
        let wv = WordVocab::build(text, 4).unwrap();
        let stream = encode_stream(text, &cv, &wv);
        let p = MixedRnn::init(cv.len(), 3, wv.len(), 2, 3, 0.5, &mut Rng::new(6)).unwrap();
        let model = Model::Mixed(p);
        let mut carry = model.new_carry();
        let mut trace = StepTrace::default();
        let mut acc = LossAcc::new();
        model.forward(&stream, 0..stream.len(), &mut carry, &mut acc, Some(&mut trace));
        assert_eq!(trace.ticks.len(), stream.words.len());
        assert_eq!(acc.word_count, stream.words.len() - 1);

        let g = 2;
        for t in 1..stream.len() {
            let changed = trace.z[t * g..(t + 1) * g] != trace.z[(t - 1) * g..t * g];
            let boundary = stream.word_of_char[t] != stream.word_of_char[t - 1];
            if changed {
                assert!(boundary, "z changed inside a word at {t}");
            }
            if boundary {
                assert!(changed, "z did not change at word start {t}");
            }
        }
    }

    #[test]
    fn rejects_bad_lambda_and_vocab() {
        assert!(MixedRnn::init(2, 2, 3, 2, 2, 1.0, &mut Rng::new(0)).is_err());
        assert!(MixedRnn::init(2, 2, 3, 2, 4, 0.5, &mut Rng::new(0)).is_err());
    }
}
