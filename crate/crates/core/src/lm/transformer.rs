//! Small decoder-only transformer used as the frozen language backbone.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use num_traits::Float;

use super::sequence::{Injections, MixedSequence, Slot};
use super::vocab::{TokenId, PAD};
use crate::checksum::Checksum;
use crate::error::{contract, Error, Result};
use crate::ndgrad::{AdamConfig, AdamState, Scalar, Tape, Tensor, Var};
use crate::rng::Rng;

const POSITION_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub depth: usize,
    pub heads: usize,
    pub max_len: usize,
    pub d_ff: usize,
}

impl LmConfig {
    pub fn new(
        vocab_size: usize,
        d_model: usize,
        depth: usize,
        heads: usize,
        max_len: usize,
    ) -> Self {
        Self {
            vocab_size,
            d_model,
            depth,
            heads,
            max_len,
            d_ff: 4 * d_model,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_model == 0 || self.max_len == 0 || self.heads == 0 {
            return Err(contract("language model extents must be positive"));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(contract(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block<F> {
    ln1_gain: Tensor<F>,
    ln1_bias: Tensor<F>,
    wq: Tensor<F>,
    bq: Tensor<F>,
    wk: Tensor<F>,
    bk: Tensor<F>,
    wv: Tensor<F>,
    bv: Tensor<F>,
    wo: Tensor<F>,
    bo: Tensor<F>,
    ln2_gain: Tensor<F>,
    ln2_bias: Tensor<F>,
    w1: Tensor<F>,
    b1: Tensor<F>,
    w2: Tensor<F>,
    b2: Tensor<F>,
}

const BLOCK_FIELDS: [&str; 16] = [
    "ln1.gain", "ln1.bias", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv",
    "attn.wo", "attn.bo", "ln2.gain", "ln2.bias", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
];

impl<F: Scalar> Block<F> {
    fn tensors(&self) -> [&Tensor<F>; 16] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<F>; 16] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

/// Decoder-only transformer (pre-norm, learned positions, GELU MLP).
/// Frozen by default: no weight requires a gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLm<F = f32> {
    config: LmConfig,
    token_embedding: Tensor<F>,
    position_embedding: Tensor<F>,
    blocks: Vec<Block<F>>,
    final_gain: Tensor<F>,
    final_bias: Tensor<F>,
}

/// Linear distance penalty of attention head `head`: geometric slopes from
/// `2^(-8/heads)` down to `2^-8`, so some heads look mostly at recent
/// positions and others almost uniformly.
fn recency_slope(head: usize, heads: usize) -> f64 {
    Float::powf(2.0, -8.0 * (head + 1) as f64 / heads as f64)
}

fn normal<F: Scalar>(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor<F> {
    Tensor::from_fn(shape, |_| F::of(rng.normal() * std))
}

fn filled<F: Scalar>(shape: &[usize], v: f64) -> Tensor<F> {
    Tensor::from_fn(shape, |_| F::of(v))
}

impl<F: Scalar> TransformerLm<F> {
    /// Seeded random initialization.
    pub fn init(config: LmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::stream(seed, "lm-init", 0);
        let d = config.d_model;
        let f = config.d_ff;
        let std_d = 1.0 / Float::sqrt(d as f64);
        let resid = 1.0 / Float::sqrt(2.0 * config.depth.max(1) as f64);
        let mut token_embedding: Tensor<F> = normal(&mut rng, &[config.vocab_size, d], 1.0);
        // PAD carries no content of its own, so answer positions read out
        // only what they attend to.
        token_embedding.data_mut()[PAD as usize * d..(PAD as usize + 1) * d].fill(F::zero());
        // Small position embeddings keep answer positions (all fed PAD) from
        // being dominated by where they sit rather than what they attend to.
        let position_embedding = normal(&mut rng, &[config.max_len, d], POSITION_STD);
        let blocks = (0..config.depth)
            .map(|_| Block {
                ln1_gain: filled(&[d], 1.0),
                ln1_bias: filled(&[d], 0.0),
                wq: normal(&mut rng, &[d, d], std_d),
                bq: filled(&[d], 0.0),
                wk: normal(&mut rng, &[d, d], std_d),
                bk: filled(&[d], 0.0),
                wv: normal(&mut rng, &[d, d], std_d),
                bv: filled(&[d], 0.0),
                wo: normal(&mut rng, &[d, d], std_d * resid),
                bo: filled(&[d], 0.0),
                ln2_gain: filled(&[d], 1.0),
                ln2_bias: filled(&[d], 0.0),
                w1: normal(&mut rng, &[d, f], std_d),
                b1: filled(&[f], 0.0),
                w2: normal(&mut rng, &[f, d], resid / Float::sqrt(f as f64)),
                b2: filled(&[d], 0.0),
            })
            .collect();
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            blocks,
            final_gain: filled(&[d], 1.0),
            final_bias: filled(&[d], 0.0),
        })
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn max_len(&self) -> usize {
        self.config.max_len
    }

    pub fn token_embedding(&self) -> &Tensor<F> {
        &self.token_embedding
    }

    /// All weights with stable names, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = vec![
            (String::from("lm.token_embedding"), &self.token_embedding),
            (
                String::from("lm.position_embedding"),
                &self.position_embedding,
            ),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            for (name, t) in BLOCK_FIELDS.iter().zip(b.tensors()) {
                out.push((format!("lm.block{l}.{name}"), t));
            }
        }
        out.push((String::from("lm.final.gain"), &self.final_gain));
        out.push((String::from("lm.final.bias"), &self.final_bias));
        out
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out = vec![
            (
                String::from("lm.token_embedding"),
                &mut self.token_embedding,
            ),
            (
                String::from("lm.position_embedding"),
                &mut self.position_embedding,
            ),
        ];
        for (l, b) in self.blocks.iter_mut().enumerate() {
            for (name, t) in BLOCK_FIELDS.iter().zip(b.tensors_mut()) {
                out.push((format!("lm.block{l}.{name}"), t));
            }
        }
        out.push((String::from("lm.final.gain"), &mut self.final_gain));
        out.push((String::from("lm.final.bias"), &mut self.final_bias));
        out
    }

    /// Rebuilds from named tensors, e.g. read from a checkpoint.
    pub fn from_named(
        config: LmConfig,
        mut lookup: impl FnMut(&str) -> Option<Tensor<F>>,
    ) -> Result<Self> {
        let mut lm = Self::init(config, 0)?;
        for (name, t) in lm.named_tensors_mut() {
            let loaded = lookup(&name).ok_or_else(|| contract(format!("missing tensor {name}")))?;
            if loaded.shape() != t.shape() {
                return Err(Error::Dimension {
                    op: "load language model",
                    lhs: t.shape().to_vec(),
                    rhs: loaded.shape().to_vec(),
                });
            }
            *t = loaded;
            t.set_requires_grad(false);
        }
        Ok(lm)
    }

    pub fn cast<G: Scalar>(&self) -> TransformerLm<G> {
        let c = |t: &Tensor<F>| t.cast::<G>();
        TransformerLm {
            config: self.config,
            token_embedding: c(&self.token_embedding),
            position_embedding: c(&self.position_embedding),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln1_gain: c(&b.ln1_gain),
                    ln1_bias: c(&b.ln1_bias),
                    wq: c(&b.wq),
                    bq: c(&b.bq),
                    wk: c(&b.wk),
                    bk: c(&b.bk),
                    wv: c(&b.wv),
                    bv: c(&b.bv),
                    wo: c(&b.wo),
                    bo: c(&b.bo),
                    ln2_gain: c(&b.ln2_gain),
                    ln2_bias: c(&b.ln2_bias),
                    w1: c(&b.w1),
                    b1: c(&b.b1),
                    w2: c(&b.w2),
                    b2: c(&b.b2),
                })
                .collect(),
            final_gain: c(&self.final_gain),
            final_bias: c(&self.final_bias),
        }
    }

    pub fn checksum(&self) -> String {
        let mut h = Checksum::new();
        for (name, t) in self.named_tensors() {
            h.update_bytes(name.as_bytes());
            let bits: Vec<f32> = t.data().iter().map(|&v| v.as_f64() as f32).collect();
            h.update_f32(&bits);
        }
        h.hex()
    }

    pub fn is_frozen(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| !t.requires_grad())
    }

    /// Records every weight on `tape` as a leaf.
    pub fn record(&self, tape: &mut Tape<F>) -> LmVars {
        LmVars {
            token_embedding: tape.leaf(&self.token_embedding),
            position_embedding: tape.leaf(&self.position_embedding),
            blocks: self
                .blocks
                .iter()
                .map(|b| {
                    let t = b.tensors();
                    core::array::from_fn(|j| tape.leaf(t[j]))
                })
                .collect(),
            final_gain: tape.leaf(&self.final_gain),
            final_bias: tape.leaf(&self.final_bias),
        }
    }

    /// Input rows for every slot: token-table rows for vocabulary tokens and
    /// supplied matrix rows for injected slots.
    pub fn embed(
        &self,
        tape: &mut Tape<F>,
        table: Var,
        seq: &MixedSequence,
        injections: &Injections,
    ) -> Result<Var> {
        if seq.is_empty() {
            return Err(Error::Empty("sequence"));
        }
        seq.check_length(self.config.max_len)?;
        let mut parts = Vec::new();
        let mut run_tokens: Vec<usize> = Vec::new();
        let mut run_injected: Option<(Var, Vec<usize>)> = None;
        for slot in seq.slots() {
            match *slot {
                Slot::Token(id) => {
                    if id as usize >= self.config.vocab_size {
                        return Err(Error::Index {
                            op: "token embedding",
                            row: parts.len(),
                            index: id as usize,
                            bound: self.config.vocab_size,
                        });
                    }
                    if let Some((m, rows)) = run_injected.take() {
                        parts.push(tape.gather_rows(m, &rows)?);
                    }
                    run_tokens.push(id as usize);
                }
                Slot::Injected { origin, row } => {
                    if !run_tokens.is_empty() {
                        parts.push(tape.gather_rows(table, &run_tokens)?);
                        run_tokens.clear();
                    }
                    let (m, local) = injections.resolve(origin, row)?;
                    match &mut run_injected {
                        Some((cur, rows)) if *cur == m => rows.push(local),
                        _ => {
                            if let Some((prev, rows)) = run_injected.take() {
                                parts.push(tape.gather_rows(prev, &rows)?);
                            }
                            run_injected = Some((m, vec![local]));
                        }
                    }
                }
            }
        }
        if !run_tokens.is_empty() {
            parts.push(tape.gather_rows(table, &run_tokens)?);
        }
        if let Some((m, rows)) = run_injected.take() {
            parts.push(tape.gather_rows(m, &rows)?);
        }
        let widths_ok = parts
            .iter()
            .all(|&p| tape.shape(p)[1] == self.config.d_model);
        if !widths_ok {
            let bad = parts
                .iter()
                .find(|&&p| tape.shape(p)[1] != self.config.d_model)
                .map(|&p| tape.shape(p).to_vec())
                .unwrap_or_default();
            return Err(Error::Dimension {
                op: "injected embedding width",
                lhs: bad,
                rhs: vec![self.config.d_model],
            });
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            tape.concat_rows(&parts)
        }
    }

    /// Last-layer hidden states, one row per slot.
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        seq: &MixedSequence,
        injections: &Injections,
    ) -> Result<Var> {
        let w = self.record(tape);
        self.forward_recorded(tape, &w, seq, injections)
    }

    /// As [`TransformerLm::forward`] with the weights already on the tape.
    pub fn forward_recorded(
        &self,
        tape: &mut Tape<F>,
        w: &LmVars,
        seq: &MixedSequence,
        injections: &Injections,
    ) -> Result<Var> {
        let x = self.embed(tape, w.token_embedding, seq, injections)?;
        self.decode_rows(tape, w, x)
    }

    /// Runs the decoder stack on input rows `x` (n × d_model).
    pub fn decode_rows(&self, tape: &mut Tape<F>, w: &LmVars, x: Var) -> Result<Var> {
        let n = tape.shape(x)[0];
        if n > self.config.max_len {
            return Err(Error::Length {
                len: n,
                max: self.config.max_len,
            });
        }
        let positions: Vec<usize> = (0..n).collect();
        let pos = tape.gather_rows(w.position_embedding, &positions)?;
        let mut h = tape.add(x, pos)?;
        let d = self.config.d_model;
        let heads = self.config.heads;
        let dh = d / heads;
        let inv = F::one() / F::of(dh as f64).sqrt();
        let biases = (0..heads)
            .map(|head| {
                let slope = recency_slope(head, heads);
                let data = (0..n * n)
                    .map(|j| {
                        let (r, c) = (j / n, j % n);
                        F::of(-slope * r.saturating_sub(c) as f64)
                    })
                    .collect();
                tape.constant(&[n, n], data)
            })
            .collect::<Result<Vec<Var>>>()?;
        for b in &w.blocks {
            let [ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2] = *b;
            let a = tape.layernorm(h, ln1_g, ln1_b)?;
            let q = linear(tape, a, wq, bq)?;
            let k = linear(tape, a, wk, bk)?;
            let v = linear(tape, a, wv, bv)?;
            let mut outs = Vec::with_capacity(heads);
            for (head, &bias) in biases.iter().enumerate() {
                let qh = tape.slice_cols(q, head * dh, dh)?;
                let kh = tape.slice_cols(k, head * dh, dh)?;
                let vh = tape.slice_cols(v, head * dh, dh)?;
                let s = tape.matmul_nt(qh, kh)?;
                let s = tape.scale(s, inv)?;
                let s = tape.add(s, bias)?;
                let p = tape.causal_softmax(s)?;
                outs.push(tape.matmul(p, vh)?);
            }
            let o = if heads == 1 {
                outs[0]
            } else {
                tape.concat_cols(&outs)?
            };
            let o = linear(tape, o, wo, bo)?;
            h = tape.add(h, o)?;
            let m = tape.layernorm(h, ln2_g, ln2_b)?;
            let m = linear(tape, m, w1, b1)?;
            let m = tape.gelu(m)?;
            let m = linear(tape, m, w2, b2)?;
            h = tape.add(h, m)?;
        }
        tape.layernorm(h, w.final_gain, w.final_bias)
    }

    /// Optional next-token pretraining over token sequences, with the output
    /// layer tied to the token table. All weights are frozen again afterwards.
    pub fn pretrain_next_token(
        &mut self,
        sequences: &[Vec<TokenId>],
        epochs: usize,
        lr: f64,
        seed: u64,
    ) -> Result<Vec<f64>> {
        let usable: Vec<&Vec<TokenId>> = sequences.iter().filter(|s| s.len() >= 2).collect();
        if usable.is_empty() {
            return Err(Error::Empty("pretraining sequences"));
        }
        for (_, t) in self.named_tensors_mut() {
            t.set_requires_grad(true);
        }
        let mut adam = AdamState::new(AdamConfig::with_lr(lr));
        let mut losses = Vec::with_capacity(epochs);
        let mut run = || -> Result<()> {
            for epoch in 0..epochs {
                let mut order: Vec<usize> = (0..usable.len()).collect();
                Rng::stream(seed, "lm-pretrain", epoch as u64).shuffle(&mut order);
                let mut total = 0.0;
                for &s in &order {
                    let ids = &usable[s][..usable[s].len().min(self.config.max_len + 1)];
                    let mut seq = MixedSequence::new();
                    seq.push_tokens(&ids[..ids.len() - 1]);
                    let targets: Vec<usize> = ids[1..].iter().map(|&t| t as usize).collect();
                    let mut tape = Tape::<F>::new();
                    let w = self.record(&mut tape);
                    let h = self.forward_recorded(&mut tape, &w, &seq, &Injections::new())?;
                    let logits = tape.matmul_nt(h, w.token_embedding)?;
                    let loss = tape.cross_entropy(logits, &targets)?;
                    total += tape.value(loss)[0].as_f64();
                    tape.backward(loss)?;
                    let vars = w.all();
                    let mut named = self.named_tensors_mut();
                    for ((_, t), &v) in named.iter_mut().zip(&vars) {
                        tape.write_grad(v, t)?;
                    }
                    let mut refs: Vec<(&str, &mut Tensor<F>)> = named
                        .iter_mut()
                        .map(|(n, t)| (n.as_str(), &mut **t))
                        .collect();
                    adam.step(&mut refs)?;
                }
                losses.push(total / usable.len() as f64);
            }
            Ok(())
        };
        let result = run();
        for (_, t) in self.named_tensors_mut() {
            t.set_requires_grad(false);
        }
        result.map(|_| losses)
    }
}

/// Tape handles of every transformer weight.
#[derive(Debug, Clone)]
pub struct LmVars {
    pub token_embedding: Var,
    pub position_embedding: Var,
    blocks: Vec<[Var; 16]>,
    final_gain: Var,
    final_bias: Var,
}

impl LmVars {
    /// Handles in the same order as [`TransformerLm::named_tensors`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.token_embedding, self.position_embedding];
        for b in &self.blocks {
            out.extend_from_slice(b);
        }
        out.push(self.final_gain);
        out.push(self.final_bias);
        out
    }
}

fn linear<F: Scalar>(tape: &mut Tape<F>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}
