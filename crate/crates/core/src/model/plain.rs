use std::collections::BTreeMap;
use std::ops::Range;

use super::{
    check_dim, output_backward, output_nll, sigmoid_backward, target_at, Carry, LossAcc,
    Recurrence, RecurrenceGrads, StepTrace, INIT_SCALE,
};
use crate::error::{Error, Result};
use crate::tensor::{axpy, sigmoid_in_place, softmax_in_place, Matrix, Rng, Vector};

/// Plain character RNN: `h_t = σ(A c_t + R h_{t-1})`, `y_t = softmax(U h_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CharRnn {
    /// `d + 1` embedding rows; the last one stands for unseen characters.
    pub core: Recurrence,
    /// `d × m`.
    pub out: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CharRnnGrads {
    pub core: RecurrenceGrads,
    pub out: Matrix,
}

impl CharRnnGrads {
    pub fn clear(&mut self) {
        self.core.clear();
        self.out.fill(0.0);
    }

    pub(crate) fn to_dense(&self, model: &CharRnn) -> Vec<(String, Matrix)> {
        let mut v = self.core.named_dense("", model.core.symbols());
        v.push(("out".into(), self.out.clone()));
        v
    }
}

impl CharRnn {
    pub fn new(core: Recurrence, out: Matrix) -> Result<Self> {
        check_char_shapes(&core, &out)?;
        Ok(CharRnn { core, out })
    }

    pub fn init(alphabet: usize, hidden: usize, rng: &mut Rng) -> Self {
        let core = Recurrence::init(alphabet + 1, alphabet, hidden, rng);
        let out = Matrix::uniform(alphabet, hidden, -INIT_SCALE, INIT_SCALE, rng);
        CharRnn { core, out }
    }

    pub fn alphabet(&self) -> usize {
        self.out.rows()
    }

    pub fn hidden(&self) -> usize {
        self.core.hidden()
    }

    /// `σ(A c + R h_prev)`.
    pub fn step(&self, c: u32, h_prev: &[f64]) -> Result<Vector> {
        self.core.step(c, h_prev)
    }

    /// `softmax(U h)`.
    pub fn output(&self, h: &[f64]) -> Result<Vector> {
        check_dim(h.len(), self.hidden(), "hidden state")?;
        let mut y = Vector::zeros(self.alphabet());
        self.out.mul_vec_into(h, &mut y);
        softmax_in_place(&mut y);
        Ok(y)
    }

    pub(crate) fn new_grads(&self) -> CharRnnGrads {
        CharRnnGrads {
            core: RecurrenceGrads::new(self.hidden()),
            out: Matrix::zeros(self.alphabet(), self.hidden()),
        }
    }

    pub(crate) fn forward(
        &self,
        chars: &[u32],
        range: Range<usize>,
        carry: &mut Carry,
        acc: &mut LossAcc,
        trace: Option<&mut StepTrace>,
    ) {
        char_forward(
            &self.core,
            self.alphabet(),
            |_, _| (0, &self.out),
            chars,
            range,
            carry,
            acc,
            trace,
        );
    }

    pub(crate) fn backward_into(&self, trace: &StepTrace, grads: &mut CharRnnGrads) {
        char_backward(
            &self.core,
            self.alphabet(),
            trace,
            |_| &self.out,
            &mut grads.out,
            &mut grads.core,
            1.0,
            None,
        );
    }

    pub(crate) fn apply(&mut self, g: &CharRnnGrads, lr: f64, tau: f64) {
        self.core.apply(&g.core, lr, tau);
        self.out.sgd_step(&g.out, lr, tau);
    }

    pub(crate) fn matrices(&self) -> Vec<(&'static str, &Matrix)> {
        vec![
            ("embed", &self.core.embed),
            ("recur", &self.core.recur),
            ("out", &self.out),
        ]
    }

    pub(crate) fn matrices_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        vec![
            ("embed", &mut self.core.embed),
            ("recur", &mut self.core.recur),
            ("out", &mut self.out),
        ]
    }
}

pub(crate) fn check_char_shapes(core: &Recurrence, out: &Matrix) -> Result<()> {
    let d = out.rows();
    if out.cols() != core.hidden() {
        return Err(Error::Shape(format!(
            "output matrix {:?} does not read a {}-dim hidden state",
            out.shape(),
            core.hidden()
        )));
    }
    if core.symbols() != d + 1 || core.trainable_rows() != d {
        return Err(Error::Shape(format!(
            "embedding has {} rows, expected {} (alphabet plus unseen)",
            core.symbols(),
            d + 1
        )));
    }
    Ok(())
}

/// Where output-matrix gradients go, per context id.
pub(crate) trait OutputGrads {
    fn slot(&mut self, ctx: u32) -> &mut Matrix;
}

impl OutputGrads for Matrix {
    fn slot(&mut self, _: u32) -> &mut Matrix {
        self
    }
}

pub(crate) struct BankGrads<'a> {
    pub blocks: &'a mut BTreeMap<u32, Matrix>,
    pub shape: (usize, usize),
}

impl OutputGrads for BankGrads<'_> {
    fn slot(&mut self, ctx: u32) -> &mut Matrix {
        let (r, c) = self.shape;
        self.blocks.entry(ctx).or_insert_with(|| Matrix::zeros(r, c))
    }
}

/// Forward pass shared by the plain and conditional models. `select`
/// returns the context id and output matrix for the prediction at `t`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn char_forward<'a>(
    core: &Recurrence,
    alphabet: usize,
    select: impl Fn(&[u32], usize) -> (u32, &'a Matrix),
    chars: &[u32],
    range: Range<usize>,
    carry: &mut Carry,
    acc: &mut LossAcc,
    mut trace: Option<&mut StepTrace>,
) {
    let mut h = vec![0.0; core.hidden()];
    let mut probs = vec![0.0; alphabet];
    if let Some(tr) = trace.as_deref_mut() {
        tr.reset(&carry.h);
    }
    for t in range {
        core.pre_activation(chars[t], &carry.h, &mut h);
        sigmoid_in_place(&mut h);
        let target = target_at(chars, t, alphabet, acc);
        let mut ctx = 0;
        if let Some(y) = target {
            let (c, out) = select(chars, t);
            ctx = c;
            acc.char_nats += output_nll(out, &h, y, &mut probs);
            acc.char_count += 1;
        }
        carry.h.copy_from_slice(&h);
        if let Some(tr) = trace.as_deref_mut() {
            tr.inputs.push(chars[t]);
            tr.hidden.extend_from_slice(&h);
            if target.is_some() {
                tr.probs.extend_from_slice(&probs);
            } else {
                tr.probs.extend(std::iter::repeat_n(0.0, alphabet));
            }
            tr.targets.push(target);
            tr.contexts.push(ctx);
        }
    }
}

/// Backward pass over the character recurrence. Output gradients are
/// scaled by `scale`; with `extra = Some((Q, dQ, g))` the pre-activation
/// also had `Q z_t` added and `dQ` receives `da z_tᵀ` (z taken from the
/// trace and treated as constant).
#[allow(clippy::too_many_arguments)]
pub(crate) fn char_backward<'a>(
    core: &Recurrence,
    alphabet: usize,
    trace: &StepTrace,
    out_for: impl Fn(u32) -> &'a Matrix,
    out_grads: &mut impl OutputGrads,
    core_grads: &mut RecurrenceGrads,
    scale: f64,
    mut extra: Option<(&mut Matrix, usize)>,
) {
    let m = core.hidden();
    let mut dh = vec![0.0; m];
    let mut dh_next = vec![0.0; m];
    let mut da = vec![0.0; m];
    let mut scratch = Vec::with_capacity(alphabet);
    for i in (0..trace.len()).rev() {
        dh.copy_from_slice(&dh_next);
        let h = trace.hidden_at(i);
        if let Some(y) = trace.targets[i] {
            let ctx = trace.contexts[i];
            output_backward(
                out_for(ctx),
                out_grads.slot(ctx),
                &trace.probs[i * alphabet..(i + 1) * alphabet],
                y,
                scale,
                h,
                &mut dh,
                &mut scratch,
            );
        }
        sigmoid_backward(&dh, h, &mut da);
        axpy(1.0, &da, core_grads.embed.row_mut(trace.inputs[i] as usize));
        let h_prev = if i == 0 { &trace.h0[..] } else { trace.hidden_at(i - 1) };
        core_grads.recur.add_outer(1.0, &da, h_prev);
        if let Some((dq, g)) = extra.as_mut() {
            dq.add_outer(1.0, &da, &trace.z[i * *g..(i + 1) * *g]);
        }
        dh_next.fill(0.0);
        core.recur.mul_vec_transpose_acc(&da, &mut dh_next);
    }
}
