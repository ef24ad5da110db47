use std::collections::BTreeMap;
use std::ops::Range;

use super::plain::{char_backward, char_forward, check_char_shapes, BankGrads};
use super::{check_dim, Carry, LossAcc, Recurrence, RecurrenceGrads, StepTrace, INIT_SCALE};
use crate::error::{Error, Result};
use crate::ngram::{ContextId, NGramIndex};
use crate::tensor::{softmax_in_place, Matrix, Rng, Vector};

/// Character RNN whose output matrix is picked per step by the longest
/// retained n-gram ending at the current character:
/// `y_t = softmax(bank[ctx_t] · h_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CondRnn {
    pub core: Recurrence,
    /// One `d × m` matrix per context id.
    pub bank: Vec<Matrix>,
    pub index: NGramIndex,
}

/// Only contexts that occurred in the window carry a block.
#[derive(Debug, Clone, PartialEq)]
pub struct CondGrads {
    pub core: RecurrenceGrads,
    pub bank: BTreeMap<u32, Matrix>,
    shape: (usize, usize),
}

impl CondGrads {
    pub fn clear(&mut self) {
        self.core.clear();
        self.bank.clear();
    }

    pub(crate) fn to_dense(&self, model: &CondRnn) -> Vec<(String, Matrix)> {
        let mut v = self.core.named_dense("", model.core.symbols());
        for ctx in 0..model.bank.len() as u32 {
            let block = self
                .bank
                .get(&ctx)
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(self.shape.0, self.shape.1));
            v.push((format!("bank[{ctx}]"), block));
        }
        v
    }
}

impl CondRnn {
    pub fn new(core: Recurrence, bank: Vec<Matrix>, index: NGramIndex) -> Result<Self> {
        if bank.len() != index.len() {
            return Err(Error::Shape(format!(
                "{} output matrices for {} contexts",
                bank.len(),
                index.len()
            )));
        }
        for out in &bank {
            check_char_shapes(&core, out)?;
            if out.shape() != bank[0].shape() {
                return Err(Error::Shape("output bank matrices differ in shape".into()));
            }
        }
        Ok(CondRnn { core, bank, index })
    }

    pub fn init(alphabet: usize, hidden: usize, index: NGramIndex, rng: &mut Rng) -> Self {
        let core = Recurrence::init(alphabet + 1, alphabet, hidden, rng);
        let bank = (0..index.len())
            .map(|_| Matrix::uniform(alphabet, hidden, -INIT_SCALE, INIT_SCALE, rng))
            .collect();
        CondRnn { core, bank, index }
    }

    pub fn alphabet(&self) -> usize {
        self.bank[0].rows()
    }

    pub fn hidden(&self) -> usize {
        self.core.hidden()
    }

    pub fn step(&self, c: u32, h_prev: &[f64]) -> Result<Vector> {
        self.core.step(c, h_prev)
    }

    /// `softmax(bank[ctx] · h)`.
    pub fn output(&self, h: &[f64], ctx: ContextId) -> Result<Vector> {
        let out = self.bank.get(ctx.index()).ok_or(Error::Index {
            what: "context id",
            index: ctx.index(),
            limit: self.bank.len(),
        })?;
        check_dim(h.len(), self.hidden(), "hidden state")?;
        let mut y = Vector::zeros(self.alphabet());
        out.mul_vec_into(h, &mut y);
        softmax_in_place(&mut y);
        Ok(y)
    }

    pub(crate) fn new_grads(&self) -> CondGrads {
        CondGrads {
            core: RecurrenceGrads::new(self.hidden()),
            bank: BTreeMap::new(),
            shape: (self.alphabet(), self.hidden()),
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
            |chars, t| {
                let ctx = self.index.context_at(chars, t);
                (ctx.0, &self.bank[ctx.index()])
            },
            chars,
            range,
            carry,
            acc,
            trace,
        );
    }

    pub(crate) fn backward_into(&self, trace: &StepTrace, grads: &mut CondGrads) {
        let mut out = BankGrads {
            blocks: &mut grads.bank,
            shape: grads.shape,
        };
        char_backward(
            &self.core,
            self.alphabet(),
            trace,
            |ctx| &self.bank[ctx as usize],
            &mut out,
            &mut grads.core,
            1.0,
            None,
        );
    }

    pub(crate) fn apply(&mut self, g: &CondGrads, lr: f64, tau: f64) {
        self.core.apply(&g.core, lr, tau);
        for (&ctx, block) in &g.bank {
            self.bank[ctx as usize].sgd_step(block, lr, tau);
        }
    }

    pub(crate) fn matrices(&self) -> Vec<(&'static str, &Matrix)> {
        let mut v = vec![("embed", &self.core.embed), ("recur", &self.core.recur)];
        v.extend(self.bank.iter().map(|b| ("bank", b)));
        v
    }

    pub(crate) fn matrices_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        let mut v = vec![
            ("embed", &mut self.core.embed),
            ("recur", &mut self.core.recur),
        ];
        v.extend(self.bank.iter_mut().map(|b| ("bank", b)));
        v
    }
}
