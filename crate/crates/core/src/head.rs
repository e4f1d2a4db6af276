//! Item head: one logit per catalog item at every read-out position, the
//! first-k item loss and the three inference disciplines.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract, Error, Result};
use crate::lm::{lm_forward, MixedSequence, Origin, TransformerLm};
use crate::ndgrad::{Scalar, Tape, Tensor, Var};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct GllmHead<F = f32> {
    /// `d_model × |I|`
    pub weight: Tensor<F>,
    /// `|I|`
    pub bias: Tensor<F>,
}

impl<F: Scalar> GllmHead<F> {
    pub const INIT_STD: f64 = 0.01;

    pub fn init(d_model: usize, num_items: usize, seed: u64) -> Self {
        let mut rng = Rng::stream(seed, "head-init", 0);
        let w = rng.normal_vec(d_model * num_items, Self::INIT_STD);
        Self {
            weight: Tensor::new(&[d_model, num_items], w.into_iter().map(F::of).collect())
                .expect("positive extents")
                .into_param(),
            bias: Tensor::zeros(&[num_items]).into_param(),
        }
    }

    pub fn new(weight: Tensor<F>, bias: Tensor<F>) -> Result<Self> {
        if weight.shape().len() != 2 || bias.shape() != [weight.cols()] {
            return Err(Error::Dimension {
                op: "item head",
                lhs: weight.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        Ok(Self { weight, bias })
    }

    pub fn d_model(&self) -> usize {
        self.weight.rows()
    }

    pub fn num_items(&self) -> usize {
        self.weight.cols()
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.weight.set_requires_grad(on);
        self.bias.set_requires_grad(on);
    }

    /// Records the weights and returns `H·W_z + b_z` for hidden rows `h`.
    pub fn logits_on(&self, tape: &mut Tape<F>, h: Var) -> Result<(Var, HeadVars)> {
        let vars = HeadVars {
            weight: tape.leaf(&self.weight),
            bias: tape.leaf(&self.bias),
        };
        let z = tape.matmul(h, vars.weight)?;
        let z = tape.add_row(z, vars.bias)?;
        Ok((z, vars))
    }

    /// Moves gradients of a backward pass into the weights.
    pub fn collect_grads(&mut self, tape: &Tape<F>, vars: &HeadVars) -> Result<()> {
        tape.write_grad(vars.weight, &mut self.weight)?;
        tape.write_grad(vars.bias, &mut self.bias)
    }
}

/// Tape handles of the head weights.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub weight: Var,
    pub bias: Var,
}

/// Item logits, one row per read-out position and one column per item.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsMatrix<F = f32> {
    z: Tensor<F>,
}

impl<F: Scalar> LogitsMatrix<F> {
    pub fn new(z: Tensor<F>) -> Result<Self> {
        if z.shape().len() != 2 {
            return Err(contract("logits must be a matrix"));
        }
        Ok(Self { z })
    }

    pub fn rows(&self) -> usize {
        self.z.rows()
    }

    pub fn num_items(&self) -> usize {
        self.z.cols()
    }

    pub fn row(&self, t: usize) -> &[F] {
        self.z.row(t)
    }

    pub fn tensor(&self) -> &Tensor<F> {
        &self.z
    }
}

/// `Z = H·W_z + b_z`.
pub fn compute_item_logits<F: Scalar>(
    hidden: &Tensor<F>,
    head: &GllmHead<F>,
) -> Result<LogitsMatrix<F>> {
    if hidden.shape().len() != 2 || hidden.cols() != head.d_model() {
        return Err(Error::Dimension {
            op: "compute_item_logits",
            lhs: hidden.shape().to_vec(),
            rhs: head.weight.shape().to_vec(),
        });
    }
    let n = head.num_items();
    let w = head.weight.data();
    let mut out = Vec::with_capacity(hidden.rows() * n);
    for r in 0..hidden.rows() {
        let mut row = head.bias.data().to_vec();
        for (d, &h) in hidden.row(r).iter().enumerate() {
            if h == F::zero() {
                continue;
            }
            for (o, &wv) in row.iter_mut().zip(&w[d * n..(d + 1) * n]) {
                *o = *o + h * wv;
            }
        }
        out.extend(row);
    }
    LogitsMatrix::new(Tensor::new(&[hidden.rows(), n], out)?)
}

/// Mean cross-entropy over the first `k` supervised `(row, item)` pairs of
/// the logits `z` (rows × |I|). Other rows do not enter the loss.
pub fn gllm_loss<F: Scalar>(
    tape: &mut Tape<F>,
    z: Var,
    targets: &[(usize, usize)],
    k: usize,
) -> Result<Var> {
    let used = &targets[..k.min(targets.len())];
    if used.is_empty() {
        return Err(Error::Empty("supervised positions"));
    }
    let rows: Vec<usize> = used.iter().map(|&(t, _)| t).collect();
    let items: Vec<usize> = used.iter().map(|&(_, y)| y).collect();
    let picked = tape.gather_rows(z, &rows)?;
    tape.cross_entropy(picked, &items)
}

/// How a ranked list is read off the item logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InferenceMode {
    /// Rank `t` from the logits at answer position `t`.
    FirstK,
    /// All ranks from the first answer position.
    FirstLogit,
    /// One item at a time, each fed back into the prompt.
    Autoregressive,
}

impl InferenceMode {
    pub const ALL: [InferenceMode; 3] = [
        InferenceMode::FirstK,
        InferenceMode::FirstLogit,
        InferenceMode::Autoregressive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InferenceMode::FirstK => "firstk",
            InferenceMode::FirstLogit => "fl",
            InferenceMode::Autoregressive => "ar",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// A ranked item list. `shortfall` counts ranks that could not be filled
/// because too few candidates were left.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Ranking {
    pub items: Vec<usize>,
    pub shortfall: usize,
}

impl Ranking {
    fn finish(items: Vec<usize>, k: usize, what: &str) -> Self {
        let shortfall = k - items.len();
        if shortfall > 0 {
            log::warn!(
                "{what}: only {} candidates for {k} ranks",
                items.len()
            );
        }
        Self { items, shortfall }
    }
}

/// Index of the best allowed entry; ties go to the smaller index.
fn masked_argmax<F: Scalar>(row: &[F], blocked: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in row.iter().enumerate() {
        if blocked[i] {
            continue;
        }
        match best {
            Some(b) if row[b] >= v => {}
            _ => best = Some(i),
        }
    }
    best
}

fn check_mask(n: usize, mask: &[bool]) -> Result<()> {
    if mask.len() != n {
        return Err(Error::Dimension {
            op: "exclusion mask",
            lhs: vec![mask.len()],
            rhs: vec![n],
        });
    }
    Ok(())
}

/// Top `k` allowed entries of `scores`, descending, ties by smaller index.
pub fn top_k_masked<F: Scalar>(scores: &[F], mask: &[bool], k: usize) -> Vec<usize> {
    let mut cand: Vec<usize> = (0..scores.len()).filter(|&i| !mask[i]).collect();
    cand.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b)));
    cand.truncate(k);
    cand
}

/// Rank `t` is the best item of row `t` that is neither excluded nor
/// already picked.
pub fn infer_first_k<F: Scalar>(z: &LogitsMatrix<F>, k: usize, mask: &[bool]) -> Result<Ranking> {
    check_mask(z.num_items(), mask)?;
    if k > z.rows() {
        return Err(contract(alloc::format!(
            "first-k inference needs {k} logit rows, found {}",
            z.rows()
        )));
    }
    let mut blocked = mask.to_vec();
    let mut items = Vec::with_capacity(k);
    for t in 0..k {
        match masked_argmax(z.row(t), &blocked) {
            Some(i) => {
                blocked[i] = true;
                items.push(i);
            }
            None => break,
        }
    }
    Ok(Ranking::finish(items, k, "first-k inference"))
}

/// Top `k` allowed items of the first row.
pub fn infer_first_logit<F: Scalar>(
    z: &LogitsMatrix<F>,
    k: usize,
    mask: &[bool],
) -> Result<Ranking> {
    check_mask(z.num_items(), mask)?;
    if z.rows() == 0 {
        return Err(Error::Empty("logit rows"));
    }
    let items = top_k_masked(z.row(0), mask, k);
    Ok(Ranking::finish(items, k, "first-logit inference"))
}

/// Feeds each chosen item back into the prompt as its projected token and
/// reads the next pick from the final position.
///
/// `injected` must hold full matrices indexed by the row ids used in the
/// prompt; the [`Origin::ItemNode`] matrix has one row per item.
pub fn infer_autoregressive<F: Scalar>(
    lm: &TransformerLm<F>,
    prompt: &MixedSequence,
    injected: &[(Origin, &Tensor<F>)],
    head: &GllmHead<F>,
    k: usize,
    mask: &[bool],
) -> Result<Ranking> {
    check_mask(head.num_items(), mask)?;
    let has_items = injected.iter().any(|(o, m)| {
        *o == Origin::ItemNode && m.rows() == head.num_items()
    });
    if !has_items {
        return Err(contract(
            "autoregressive inference needs the full projected item matrix",
        ));
    }
    if prompt.len() + k.saturating_sub(1) > lm.max_len() {
        return Err(Error::Length {
            len: prompt.len() + k.saturating_sub(1),
            max: lm.max_len(),
        });
    }
    let mut seq = prompt.clone();
    let mut blocked = mask.to_vec();
    let mut items = Vec::with_capacity(k);
    for step in 0..k {
        let hidden = lm_forward(lm, &seq, injected)?;
        let last = Tensor::new(&[1, hidden.cols()], hidden.row(hidden.rows() - 1).to_vec())?;
        let z = compute_item_logits(&last, head)?;
        let Some(i) = masked_argmax(z.row(0), &blocked) else {
            break;
        };
        blocked[i] = true;
        items.push(i);
        if step + 1 < k {
            seq.push_injected(Origin::ItemNode, i);
        }
    }
    Ok(Ranking::finish(items, k, "autoregressive inference"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn z(rows: &[&[f64]]) -> LogitsMatrix<f64> {
        let c = rows[0].len();
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        LogitsMatrix::new(Tensor::new(&[rows.len(), c], data).unwrap()).unwrap()
    }

    #[test]
    fn first_k_examples() {
        let m = z(&[&[5.0, 1.0, 0.0], &[0.0, 1.0, 4.0]]);
        assert_eq!(infer_first_k(&m, 2, &[false; 3]).unwrap().items, [0, 2]);
        assert_eq!(
            infer_first_k(&m, 2, &[true, false, false]).unwrap().items,
            [1, 2]
        );
        let tie = z(&[&[0.0, 3.0, 3.0]]);
        assert_eq!(infer_first_k(&tie, 1, &[false; 3]).unwrap().items, [1]);
    }

    #[test]
    fn first_k_deduplicates_and_reports_shortfall() {
        let m = z(&[&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]]);
        let r = infer_first_k(&m, 3, &[false, true, false]).unwrap();
        assert_eq!(r.items, [0, 2]);
        assert_eq!(r.shortfall, 1);
    }

    #[test]
    fn first_logit_examples() {
        let m = z(&[&[3.0, 9.0, 1.0]]);
        assert_eq!(infer_first_logit(&m, 2, &[false; 3]).unwrap().items, [1, 0]);
        assert_eq!(
            infer_first_logit(&m, 2, &[false, true, false]).unwrap().items,
            [0, 2]
        );
    }

    #[test]
    fn logits_of_zero_and_one_hot_hidden() {
        let head = GllmHead::<f64>::new(
            Tensor::new(&[2, 3], alloc::vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
            Tensor::new(&[3], alloc::vec![0.5, -0.5, 0.0]).unwrap(),
        )
        .unwrap();
        let h = Tensor::new(&[2, 2], alloc::vec![0.0, 0.0, 0.0, 1.0]).unwrap();
        let m = compute_item_logits(&h, &head).unwrap();
        assert_eq!(m.row(0), &[0.5, -0.5, 0.0]);
        assert_eq!(m.row(1), &[4.5, 4.5, 6.0]);
        let bad = Tensor::<f64>::zeros(&[1, 3]);
        assert!(compute_item_logits(&bad, &head).is_err());
    }

    #[test]
    fn loss_of_zero_logits_is_log_item_count() {
        let mut tape = Tape::<f64>::new();
        let zv = tape.constant(&[4, 7], alloc::vec![0.0; 28]).unwrap();
        let l = gllm_loss(&mut tape, zv, &[(0, 3), (1, 6), (2, 0)], 10).unwrap();
        assert!((tape.value(l)[0] - 7f64.ln()).abs() < 1e-12);
        let bad = gllm_loss(&mut tape, zv, &[(0, 7)], 1);
        assert!(matches!(bad, Err(Error::Index { .. })));
    }
}
