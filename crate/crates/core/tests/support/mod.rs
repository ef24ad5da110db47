//! Naive reference implementations used as test oracles. Everything here is
//! written with scalar loops over the public parameter matrices and shares
//! no code with the library's forward or backward passes.

#![allow(dead_code)]

use std::collections::HashMap;

use ccrnn::corpus::EncodedStream;
use ccrnn::model::{Model, MixedRnn};
use ccrnn::ngram::NGramIndex;
use ccrnn::tensor::{Matrix, Rng};

pub fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `ln softmax(M h)[y]`, computed directly.
pub fn log_prob(m: &Matrix, h: &[f64], y: usize) -> f64 {
    let logits: Vec<f64> = (0..m.rows())
        .map(|i| (0..m.cols()).map(|j| m.get(i, j) * h[j]).sum())
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    logits[y] - max - z.ln()
}

/// Full distribution `softmax(M h)`.
pub fn probs(m: &Matrix, h: &[f64]) -> Vec<f64> {
    (0..m.rows()).map(|i| log_prob(m, h, i).exp()).collect()
}

/// `σ(E[input] + R h + Q z)` with embeddings stored one row per symbol.
pub fn cell(embed: &Matrix, recur: &Matrix, input: usize, h: &[f64], q: Option<(&Matrix, &[f64])>) -> Vec<f64> {
    (0..recur.rows())
        .map(|i| {
            let mut a = embed.get(input, i);
            for j in 0..recur.cols() {
                a += recur.get(i, j) * h[j];
            }
            if let Some((q, z)) = q {
                for j in 0..q.cols() {
                    a += q.get(i, j) * z[j];
                }
            }
            sig(a)
        })
        .collect()
}

/// Longest retained suffix of `chars[..=t]`, by scanning every entry.
pub fn brute_context(index: &NGramIndex, chars: &[u32], t: usize) -> usize {
    let longest = index.n_max().min(t + 1);
    for len in (1..=longest).rev() {
        let suffix = &chars[t + 1 - len..=t];
        if let Some(id) = index.entries().iter().position(|e| e.ngram == suffix) {
            return id;
        }
    }
    0
}

fn word_end(stream: &EncodedStream, t: usize) -> bool {
    t + 1 == stream.word_of_char.len() || stream.word_of_char[t + 1] != stream.word_of_char[t]
}

/// Word-side walk of the mixed model over `range`: returns the word NLL and
/// the context vector `z_t` seen by every character.
pub fn mixed_word_side(p: &MixedRnn, stream: &EncodedStream, range: std::ops::Range<usize>, g0: &[f64]) -> (f64, Vec<Vec<f64>>) {
    let k_out = p.word_out.rows();
    let mut g = g0.to_vec();
    let mut nats = 0.0;
    let mut zs = Vec::new();
    for t in range {
        zs.push(g.clone());
        if word_end(stream, t) {
            let w = stream.word_of_char[t] as usize;
            g = cell(&p.word.embed, &p.word.recur, stream.words[w] as usize, &g, None);
            if let Some(&next) = stream.words.get(w + 1) {
                let y = if (next as usize) < k_out { next as usize } else { 0 };
                nats -= log_prob(&p.word_out, &g, y);
            }
        }
    }
    (nats, zs)
}

/// Character NLL over `range` from carried state `h0`. For the mixed model
/// `zs` supplies the word context per step.
pub fn char_nats(model: &Model, stream: &EncodedStream, range: std::ops::Range<usize>, h0: &[f64], zs: Option<&[Vec<f64>]>) -> f64 {
    let chars = &stream.chars;
    let d = model.alphabet();
    let core = model.core();
    let mut h = h0.to_vec();
    let mut nats = 0.0;
    for (i, t) in range.enumerate() {
        let q = match (model, zs) {
            (Model::Mixed(p), Some(zs)) => Some((&p.cond, zs[i].as_slice())),
            _ => None,
        };
        h = cell(&core.embed, &core.recur, chars[t] as usize, &h, q);
        let Some(&next) = chars.get(t + 1) else { continue };
        if next as usize >= d {
            continue;
        }
        let out = match model {
            Model::Plain(p) => &p.out,
            Model::Mixed(p) => &p.out,
            Model::Cond(p) => &p.bank[brute_context(&p.index, chars, t)],
        };
        nats -= log_prob(out, &h, next as usize);
    }
    nats
}

/// Window objective with the truncation used in training: for the mixed
/// model the word contexts are computed from `frozen` (the unperturbed
/// model) for the character term.
pub fn objective(model: &Model, frozen: Option<&Model>, stream: &EncodedStream, range: std::ops::Range<usize>, h0: &[f64], g0: &[f64]) -> f64 {
    match model {
        Model::Mixed(p) => {
            let source = match frozen {
                Some(Model::Mixed(f)) => f,
                _ => p,
            };
            let (_, zs) = mixed_word_side(source, stream, range.clone(), g0);
            let (word, _) = mixed_word_side(p, stream, range.clone(), g0);
            p.lambda * char_nats(model, stream, range, h0, Some(&zs)) + (1.0 - p.lambda) * word
        }
        _ => char_nats(model, stream, range, h0, None),
    }
}

/// Every n-gram of length `1..=n_max` with its occurrence count.
pub fn brute_counts(s: &[u32], n_max: usize) -> HashMap<Vec<u32>, u64> {
    let mut counts = HashMap::new();
    for t in 0..s.len() {
        for len in 1..=n_max.min(t + 1) {
            *counts.entry(s[t + 1 - len..=t].to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

/// A random stream with word alignment: `words` are ids in `0..k` and each
/// word spans one to four characters.
pub fn random_word_stream(rng: &mut Rng, len: usize, d: u32, k: u32) -> EncodedStream {
    let chars: Vec<u32> = (0..len).map(|_| rng.below(d as u64) as u32).collect();
    let mut word_of_char = Vec::with_capacity(len);
    let mut words = vec![rng.below(k as u64) as u32];
    let mut left = 1 + rng.below(4);
    for _ in 0..len {
        if left == 0 {
            words.push(rng.below(k as u64) as u32);
            left = 1 + rng.below(4);
        }
        word_of_char.push(words.len() as u32 - 1);
        left -= 1;
    }
    EncodedStream {
        chars,
        words,
        word_of_char,
        unseen: 0,
    }
}

pub fn random_vec(rng: &mut Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.uniform_range(lo, hi)).collect()
}

/// Plain-model gradients over one window by scalar backpropagation:
/// `(embedding rows, recurrent, output)`.
pub fn plain_window_grads(p: &ccrnn::model::CharRnn, chars: &[u32], h0: &[f64]) -> (Matrix, Matrix, Matrix) {
    let (d, m) = (p.out.rows(), p.out.cols());
    let mut hs = vec![h0.to_vec()];
    for &c in chars {
        let next = cell(&p.core.embed, &p.core.recur, c as usize, hs.last().unwrap(), None);
        hs.push(next);
    }
    let mut de = Matrix::zeros(p.core.embed.rows(), m);
    let mut dr = Matrix::zeros(m, m);
    let mut du = Matrix::zeros(d, m);
    let mut carry = vec![0.0; m];
    for t in (0..chars.len()).rev() {
        let h = &hs[t + 1];
        let mut dh = carry.clone();
        if let Some(&y) = chars.get(t + 1).filter(|&&y| (y as usize) < d) {
            let y_hat = probs(&p.out, h);
            for k in 0..d {
                let delta = y_hat[k] - if k == y as usize { 1.0 } else { 0.0 };
                for j in 0..m {
                    du.set(k, j, du.get(k, j) + delta * h[j]);
                    dh[j] += delta * p.out.get(k, j);
                }
            }
        }
        let da: Vec<f64> = (0..m).map(|i| dh[i] * h[i] * (1.0 - h[i])).collect();
        for i in 0..m {
            let c = chars[t] as usize;
            de.set(c, i, de.get(c, i) + da[i]);
            for j in 0..m {
                dr.set(i, j, dr.get(i, j) + da[i] * hs[t][j]);
            }
        }
        carry = (0..m).map(|j| (0..m).map(|i| p.core.recur.get(i, j) * da[i]).sum()).collect();
    }
    (de, dr, du)
}
