use std::sync::Arc;

use glta_core::head::gllm_loss;
use glta_core::lm::{Injections, LmConfig, MixedSequence, Origin, TransformerLm};
use glta_core::ndgrad::{gradient_check, SparseMatrix, Tape, Tensor, Var};
use glta_core::rng::Rng;
use glta_core::Result;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const INSTANCES: u64 = 5;

fn rand_t(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, rng.normal_vec(n, std)).unwrap()
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let t = rand_t(rng, shape, 1.0);
    Tensor::from_fn(shape, |i| {
        let v = t.data()[i];
        v + 0.1 * v.signum()
    })
}

fn dims(rng: &mut Rng) -> (usize, usize, usize) {
    (1 + rng.below(4), 1 + rng.below(4), 1 + rng.below(4))
}

/// `Σ out ∘ R` for a fixed random `R`, so every output entry is probed.
fn probe(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let n = shape.iter().product();
    let r = Rng::stream(seed, "probe", 0).normal_vec(n, 1.0);
    let c = tape.constant(&shape, r)?;
    let m = tape.mul(out, c)?;
    tape.sum(m)
}

fn check(
    name: &str,
    mut make: impl FnMut(&mut Rng) -> Vec<Tensor<f64>>,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Copy,
) {
    let mut worst = 0.0f64;
    for seed in 0..INSTANCES {
        let mut rng = Rng::stream(seed, name, 0);
        let inputs = make(&mut rng);
        let report = gradient_check(&inputs, f, H).unwrap();
        assert!(report.entries > 0, "{name}");
        assert!(
            report.max_rel_error < TOL,
            "{name} instance {seed}: relative error {:.3e}",
            report.max_rel_error
        );
        worst = worst.max(report.max_rel_error);
    }
    println!("{name}: worst relative error {worst:.2e} over {INSTANCES} instances");
}

#[test]
fn linear_algebra_ops() {
    check(
        "matmul",
        |r| {
            let (m, k, n) = dims(r);
            vec![rand_t(r, &[m, k], 1.0), rand_t(r, &[k, n], 1.0)]
        },
        |t, v| {
            let o = t.matmul(v[0], v[1])?;
            probe(t, o, 1)
        },
    );
    check(
        "matmul_nt",
        |r| {
            let (m, k, n) = dims(r);
            vec![rand_t(r, &[m, k], 1.0), rand_t(r, &[n, k], 1.0)]
        },
        |t, v| {
            let o = t.matmul_nt(v[0], v[1])?;
            probe(t, o, 2)
        },
    );
    check(
        "transpose",
        |r| {
            let (m, n, _) = dims(r);
            vec![rand_t(r, &[m, n], 1.0)]
        },
        |t, v| {
            let o = t.transpose(v[0])?;
            probe(t, o, 3)
        },
    );
    check(
        "spmm",
        |r| {
            let (m, n, _) = dims(r);
            vec![rand_t(r, &[m + 2, n], 1.0)]
        },
        |t, v| {
            let rows = t.shape(v[0])[0];
            let trip: Vec<(usize, usize, f64)> = (0..rows)
                .flat_map(|i| [(i, (i + 1) % rows, 0.5), (i, (i * 3) % rows, -1.25)])
                .collect();
            let a = Arc::new(SparseMatrix::from_triplets(rows, rows, &trip));
            let o = t.spmm(&a, v[0])?;
            probe(t, o, 4)
        },
    );
}

#[test]
fn elementwise_ops() {
    let pair = |r: &mut Rng| {
        let (m, n, _) = dims(r);
        vec![rand_t(r, &[m, n], 1.0), rand_t(r, &[m, n], 1.0)]
    };
    check("add", pair, |t, v| {
        let o = t.add(v[0], v[1])?;
        probe(t, o, 5)
    });
    check("sub", pair, |t, v| {
        let o = t.sub(v[0], v[1])?;
        probe(t, o, 6)
    });
    check("mul", pair, |t, v| {
        let o = t.mul(v[0], v[1])?;
        probe(t, o, 7)
    });
    check(
        "add_row",
        |r| {
            let (m, n, _) = dims(r);
            vec![rand_t(r, &[m, n], 1.0), rand_t(r, &[n], 1.0)]
        },
        |t, v| {
            let o = t.add_row(v[0], v[1])?;
            probe(t, o, 8)
        },
    );
    check(
        "scale",
        |r| {
            let (m, n, _) = dims(r);
            vec![rand_t(r, &[m, n], 1.0)]
        },
        |t, v| {
            let o = t.scale(v[0], -1.7)?;
            probe(t, o, 9)
        },
    );
    check(
        "relu",
        |r| {
            let (m, n, _) = dims(r);
            vec![away_from_zero(r, &[m, n])]
        },
        |t, v| {
            let o = t.relu(v[0])?;
            probe(t, o, 10)
        },
    );
    check(
        "gelu",
        |r| {
            let (m, n, _) = dims(r);
            vec![rand_t(r, &[m, n], 1.5)]
        },
        |t, v| {
            let o = t.gelu(v[0])?;
            probe(t, o, 11)
        },
    );
    check(
        "log_sigmoid",
        |r| {
            let (m, n, _) = dims(r);
            vec![rand_t(r, &[m, n], 3.0)]
        },
        |t, v| {
            let o = t.log_sigmoid(v[0])?;
            probe(t, o, 12)
        },
    );
}

#[test]
fn gelu_at_fixed_points() {
    let x = Tensor::new(&[5], vec![-2.0, -0.5, 0.0, 0.5, 2.0]).unwrap();
    let report = gradient_check(
        &[x],
        |t, v| {
            let o = t.gelu(v[0])?;
            t.sum(o)
        },
        H,
    )
    .unwrap();
    assert!(report.max_rel_error < TOL, "{report:?}");
}

#[test]
fn normalization_ops() {
    check(
        "layernorm",
        |r| {
            let (m, _, _) = dims(r);
            let n = 2 + r.below(5);
            vec![
                rand_t(r, &[m, n], 1.0),
                rand_t(r, &[n], 1.0),
                rand_t(r, &[n], 1.0),
            ]
        },
        |t, v| {
            let o = t.layernorm(v[0], v[1], v[2])?;
            probe(t, o, 13)
        },
    );
    check(
        "softmax_rows",
        |r| {
            let (m, n, _) = dims(r);
            vec![rand_t(r, &[m, n + 1], 2.0)]
        },
        |t, v| {
            let o = t.softmax_rows(v[0])?;
            probe(t, o, 14)
        },
    );
    check(
        "causal_softmax",
        |r| {
            let n = 1 + r.below(5);
            vec![rand_t(r, &[n, n], 2.0)]
        },
        |t, v| {
            let o = t.causal_softmax(v[0])?;
            probe(t, o, 15)
        },
    );
    check(
        "cross_entropy",
        |r| {
            let (m, n, _) = dims(r);
            vec![rand_t(r, &[m, n + 1], 2.0)]
        },
        |t, v| {
            let shape = t.shape(v[0]).to_vec();
            let targets: Vec<usize> = (0..shape[0]).map(|i| (i * 7 + 1) % shape[1]).collect();
            t.cross_entropy(v[0], &targets)
        },
    );
}

#[test]
fn reduction_and_indexing_ops() {
    let one = |r: &mut Rng| {
        let (m, n, _) = dims(r);
        vec![rand_t(r, &[m + 1, n], 1.0)]
    };
    check("sum", one, |t, v| {
        let o = t.mul(v[0], v[0])?;
        t.sum(o)
    });
    check("mean", one, |t, v| {
        let o = t.mul(v[0], v[0])?;
        t.mean(o)
    });
    check("row_sums", one, |t, v| {
        let o = t.row_sums(v[0])?;
        probe(t, o, 16)
    });
    check("gather_rows", one, |t, v| {
        let rows = t.shape(v[0])[0];
        let idx: Vec<usize> = (0..5).map(|i| (i * 3) % rows).collect();
        let o = t.gather_rows(v[0], &idx)?;
        probe(t, o, 17)
    });
    check(
        "concat_rows",
        |r| {
            let (m, n, p) = dims(r);
            vec![rand_t(r, &[m, n], 1.0), rand_t(r, &[p, n], 1.0)]
        },
        |t, v| {
            let o = t.concat_rows(&[v[0], v[1], v[0]])?;
            probe(t, o, 18)
        },
    );
    check(
        "concat_cols",
        |r| {
            let (m, n, p) = dims(r);
            vec![rand_t(r, &[m, n], 1.0), rand_t(r, &[m, p], 1.0)]
        },
        |t, v| {
            let o = t.concat_cols(&[v[1], v[0]])?;
            probe(t, o, 19)
        },
    );
    check(
        "slice_cols",
        |r| {
            let (m, n, _) = dims(r);
            vec![rand_t(r, &[m, n + 2], 1.0)]
        },
        |t, v| {
            let cols = t.shape(v[0])[1];
            let o = t.slice_cols(v[0], 1, cols - 2)?;
            probe(t, o, 20)
        },
    );
}

fn small_lm(seed: u64) -> TransformerLm<f64> {
    TransformerLm::<f32>::init(LmConfig::new(12, 8, 2, 2, 32), seed)
        .unwrap()
        .cast::<f64>()
}

#[test]
fn transformer_stack_input_gradient() {
    for seed in 0..INSTANCES {
        let lm = small_lm(seed);
        let mut rng = Rng::stream(seed, "stack", 0);
        let n = 2 + rng.below(5);
        let x = rand_t(&mut rng, &[n, 8], 1.0);
        let report = gradient_check(
            &[x],
            |t, v| {
                let w = lm.record(t);
                let h = lm.decode_rows(t, &w, v[0])?;
                probe(t, h, seed)
            },
            H,
        )
        .unwrap();
        assert!(report.max_rel_error < TOL, "seed {seed}: {report:?}");
    }
}

#[test]
fn projector_backbone_head_loss_pipeline() {
    let (d_graph, d_model, items) = (4, 8, 6);
    for seed in 0..INSTANCES {
        let lm = small_lm(seed + 100);
        let mut rng = Rng::stream(seed, "pipeline", 0);
        let e_items = rand_t(&mut rng, &[items, d_graph], 1.0);
        let inputs = vec![
            rand_t(&mut rng, &[d_graph, d_model], 0.5),
            rand_t(&mut rng, &[d_model], 0.5),
            rand_t(&mut rng, &[d_model, items], 0.5),
            rand_t(&mut rng, &[items], 0.5),
        ];
        let mut seq = MixedSequence::new();
        seq.push_tokens(&[8, 9]);
        for i in [3, 0, 5] {
            seq.push_token(5).push_injected(Origin::ItemNode, i);
        }
        seq.push_tokens(&[10, 11]);
        for &y in &[2, 4, 1] {
            seq.push_supervised_answer(y);
        }
        let report = gradient_check(
            &inputs,
            |t, v| {
                let w = lm.record(t);
                let e = t.constant(&[items, d_graph], e_items.data().to_vec())?;
                let proj = t.matmul(e, v[0])?;
                let proj = t.add_row(proj, v[1])?;
                let inj = Injections::new().with(Origin::ItemNode, proj);
                let hidden = lm.forward_recorded(t, &w, &seq, &inj)?;
                let rows: Vec<usize> = seq.answers().to_vec();
                let h = t.gather_rows(hidden, &rows)?;
                let z = t.matmul(h, v[2])?;
                let z = t.add_row(z, v[3])?;
                let targets: Vec<(usize, usize)> =
                    seq.supervision().iter().enumerate().map(|(j, s)| (j, s.1)).collect();
                gllm_loss(t, z, &targets, 2)
            },
            H,
        )
        .unwrap();
        assert!(report.max_rel_error < TOL, "seed {seed}: {report:?}");
        println!("pipeline instance {seed}: {:.2e}", report.max_rel_error);
    }
}
