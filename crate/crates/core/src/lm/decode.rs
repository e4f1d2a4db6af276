use alloc::vec::Vec;

use super::sequence::{Injections, MixedSequence};
use super::transformer::TransformerLm;
use super::vocab::TokenId;
use crate::error::{Error, Result};
use crate::ndgrad::{Scalar, Tape, Tensor};

/// Linear map from hidden states to vocabulary logits.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputHead<F = f32> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

impl<F: Scalar> OutputHead<F> {
    pub fn new(weight: Tensor<F>, bias: Tensor<F>) -> Result<Self> {
        if weight.shape().len() != 2 || bias.len() != weight.cols() {
            return Err(Error::Dimension {
                op: "output head",
                lhs: weight.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        Ok(Self { weight, bias })
    }

    /// Head tied to the transformer's token table.
    pub fn tied(lm: &TransformerLm<F>) -> Self {
        let table = lm.token_embedding();
        let (v, d) = (table.rows(), table.cols());
        let weight = Tensor::from_fn(&[d, v], |j| table.at(j % v, j / v));
        Self {
            weight,
            bias: Tensor::zeros(&[v]),
        }
    }

    pub fn logits(&self, hidden: &[F]) -> Vec<F> {
        let v = self.weight.cols();
        let mut out: Vec<F> = self.bias.data().to_vec();
        for (d, &h) in hidden.iter().enumerate() {
            let row = &self.weight.data()[d * v..(d + 1) * v];
            for (o, &w) in out.iter_mut().zip(row) {
                *o = *o + h * w;
            }
        }
        out
    }
}

/// Index of the largest value; ties go to the smaller index.
pub(crate) fn argmax<F: Scalar>(values: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Hidden states of `seq` without recording gradients anyone will read.
pub fn lm_forward<F: Scalar>(
    lm: &TransformerLm<F>,
    seq: &MixedSequence,
    injected: &[(super::Origin, &Tensor<F>)],
) -> Result<Tensor<F>> {
    let mut tape = Tape::<F>::new();
    let mut inj = Injections::new();
    for &(origin, m) in injected {
        let v = tape.leaf(m);
        inj.set(origin, v, None);
    }
    let h = lm.forward(&mut tape, seq, &inj)?;
    Ok(tape.to_tensor(h))
}

/// Greedy decoding: append the argmax token until `stop` or `max_new` tokens.
pub fn greedy_decode<F: Scalar>(
    lm: &TransformerLm<F>,
    prompt: &MixedSequence,
    injected: &[(super::Origin, &Tensor<F>)],
    max_new: usize,
    head: &OutputHead<F>,
    stop: Option<TokenId>,
) -> Result<Vec<TokenId>> {
    if prompt.len() + max_new > lm.max_len() {
        return Err(Error::Length {
            len: prompt.len() + max_new,
            max: lm.max_len(),
        });
    }
    let mut seq = prompt.clone();
    let mut out = Vec::with_capacity(max_new);
    for _ in 0..max_new {
        let hidden = lm_forward(lm, &seq, injected)?;
        let last = hidden.row(hidden.rows() - 1);
        let next = argmax(&head.logits(last)) as TokenId;
        out.push(next);
        if Some(next) == stop {
            break;
        }
        seq.push_token(next);
    }
    Ok(out)
}
