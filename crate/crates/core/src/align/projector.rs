use num_traits::Float;

use crate::error::{contract, Error, Result};
use crate::ndgrad::{Scalar, Tape, Tensor, Var};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectorKind {
    Item,
    User,
}

impl ProjectorKind {
    pub fn name(self) -> &'static str {
        match self {
            ProjectorKind::Item => "item_projector",
            ProjectorKind::User => "user_projector",
        }
    }
}

/// Affine map from graph embeddings (width `d_graph`) into token space
/// (width `d_model`): `V = E·W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector<F = f32> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
    kind: ProjectorKind,
}

/// Tape handles of a recorded projector.
#[derive(Debug, Clone, Copy)]
pub struct ProjectorVars {
    pub weight: Var,
    pub bias: Var,
}

impl<F: Scalar> Projector<F> {
    pub fn new(kind: ProjectorKind, weight: Tensor<F>, bias: Tensor<F>) -> Result<Self> {
        if weight.shape().len() != 2 || bias.shape() != [weight.cols()] {
            return Err(Error::Dimension {
                op: kind.name(),
                lhs: weight.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        Ok(Self { weight, bias, kind })
    }

    /// Random trainable projector. Weights are scaled so projected rows of
    /// `e` have roughly unit entries, the scale of the token table.
    pub fn init(kind: ProjectorKind, e: &Tensor<f32>, d_model: usize, seed: u64) -> Self {
        let d_graph = e.cols();
        let rms = if e.is_empty() {
            1.0
        } else {
            let ss: f64 = e.data().iter().map(|&v| (v as f64) * (v as f64)).sum();
            Float::sqrt(ss / e.len() as f64)
        };
        let rms = if rms > 1e-8 { rms } else { 1.0 };
        let std = 1.0 / (Float::sqrt(d_graph as f64) * rms);
        let mut rng = Rng::stream(seed, kind.name(), 0);
        let w = rng.normal_vec(d_graph * d_model, std);
        Self {
            weight: Tensor::new(&[d_graph, d_model], w.into_iter().map(F::of).collect())
                .expect("positive extents")
                .into_param(),
            bias: Tensor::zeros(&[d_model]).into_param(),
            kind,
        }
    }

    pub fn kind(&self) -> ProjectorKind {
        self.kind
    }

    pub fn d_graph(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_model(&self) -> usize {
        self.weight.cols()
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.weight.set_requires_grad(on);
        self.bias.set_requires_grad(on);
    }

    pub fn is_trainable(&self) -> bool {
        self.weight.requires_grad()
    }

    pub fn apply(&self, e: &Tensor<F>) -> Result<Tensor<F>> {
        if e.shape().len() != 2 || e.cols() != self.d_graph() {
            return Err(Error::Dimension {
                op: self.kind.name(),
                lhs: e.shape().to_vec(),
                rhs: self.weight.shape().to_vec(),
            });
        }
        let (n, d) = (self.d_graph(), self.d_model());
        let w = self.weight.data();
        let mut out = alloc::vec::Vec::with_capacity(e.rows() * d);
        for r in 0..e.rows() {
            let mut row = self.bias.data().to_vec();
            for (j, &x) in e.row(r).iter().enumerate().take(n) {
                for (o, &wv) in row.iter_mut().zip(&w[j * d..(j + 1) * d]) {
                    *o = *o + x * wv;
                }
            }
            out.extend(row);
        }
        Tensor::new(&[e.rows(), d], out)
    }

    pub fn record(&self, tape: &mut Tape<F>) -> ProjectorVars {
        ProjectorVars {
            weight: tape.leaf(&self.weight),
            bias: tape.leaf(&self.bias),
        }
    }

    /// `rows·W + b` on the tape.
    pub fn apply_on(tape: &mut Tape<F>, vars: ProjectorVars, rows: Var) -> Result<Var> {
        let x = tape.matmul(rows, vars.weight)?;
        tape.add_row(x, vars.bias)
    }

    pub fn collect_grads(&mut self, tape: &Tape<F>, vars: ProjectorVars) -> Result<()> {
        tape.write_grad(vars.weight, &mut self.weight)?;
        tape.write_grad(vars.bias, &mut self.bias)
    }
}

/// `V_i = E_i·W_i + b_i`.
pub fn project_items<F: Scalar>(e_i: &Tensor<F>, projector: &Projector<F>) -> Result<Tensor<F>> {
    if projector.kind() != ProjectorKind::Item {
        return Err(contract("project_items needs an item projector"));
    }
    projector.apply(e_i)
}

/// `V_u = E_u·W_u + b_u`.
pub fn project_users<F: Scalar>(e_u: &Tensor<F>, projector: &Projector<F>) -> Result<Tensor<F>> {
    if projector.kind() != ProjectorKind::User {
        return Err(contract("project_users needs a user projector"));
    }
    projector.apply(e_u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn constant_and_identity_maps() {
        let e = Tensor::<f64>::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let zero = Projector::new(
            ProjectorKind::Item,
            Tensor::zeros(&[2, 3]),
            Tensor::new(&[3], vec![7.0, 8.0, 9.0]).unwrap(),
        )
        .unwrap();
        let v = project_items(&e, &zero).unwrap();
        assert_eq!(v.row(0), &[7.0, 8.0, 9.0]);
        assert_eq!(v.row(1), &[7.0, 8.0, 9.0]);

        let id = Projector::new(
            ProjectorKind::User,
            Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            Tensor::zeros(&[2]),
        )
        .unwrap();
        assert_eq!(project_users(&e, &id).unwrap(), e);
        assert!(project_items(&e, &id).is_err());
        assert!(project_users(&Tensor::zeros(&[1, 3]), &id).is_err());
    }
}
