use glta_core::align::{Projector, ProjectorKind};
use glta_core::eval::{ndcg_at_k, precision_at_k};
use glta_core::graph::InteractionGraph;
use glta_core::head::gllm_loss;
use glta_core::lightgcn::lightgcn_propagate;
use glta_core::ndgrad::{Tape, Tensor};
use proptest::prelude::*;

fn vec_f64(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, n)
}

fn ranking() -> impl Strategy<Value = (Vec<usize>, Vec<usize>, usize)> {
    (
        Just((0..30usize).collect::<Vec<_>>()).prop_shuffle(),
        0usize..15,
        prop::collection::btree_set(0usize..30, 1..10),
        1usize..12,
    )
        .prop_map(|(order, n, rel, k)| (order[..n].to_vec(), rel.into_iter().collect(), k))
}

fn graph() -> impl Strategy<Value = InteractionGraph> {
    (1usize..6, 1usize..6)
        .prop_flat_map(|(u, i)| (Just(u), Just(i), prop::collection::vec(any::<bool>(), u * i)))
        .prop_map(|(u, i, bits)| {
            let edges = (0..u * i).filter(|&j| bits[j]).map(|j| (j / i, j % i));
            InteractionGraph::from_edges(u, i, edges).unwrap().0
        })
}

proptest! {
    #[test]
    fn metrics_stay_in_unit_interval((ranked, relevant, k) in ranking()) {
        let p = precision_at_k(&ranked, &relevant, k);
        let n = ndcg_at_k(&ranked, &relevant, k).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!((0.0..=1.0 + 1e-12).contains(&n));
        // Relevant items listed first form an ideal ranking.
        let mut ideal = relevant.clone();
        ideal.extend((100..120).take(k));
        prop_assert!((ndcg_at_k(&ideal, &relevant, k).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn loss_ignores_unsupervised_rows(
        z in vec_f64(5 * 4),
        noise in vec_f64(5 * 4),
        k in 1usize..4,
    ) {
        let targets = [(0usize, 2usize), (2, 1), (3, 0)];
        let used: Vec<usize> = targets[..k].iter().map(|t| t.0).collect();
        let perturbed: Vec<f64> = z
            .iter()
            .zip(&noise)
            .enumerate()
            .map(|(j, (v, n))| if used.contains(&(j / 4)) { *v } else { v + n })
            .collect();
        let run = |data: Vec<f64>| {
            let mut tape = Tape::<f64>::new();
            let zt = Tensor::new(&[5, 4], data).unwrap().into_param();
            let zv = tape.leaf(&zt);
            let loss = gllm_loss(&mut tape, zv, &targets, k).unwrap();
            tape.backward(loss).unwrap();
            (tape.value(loss)[0], tape.grad(zv).unwrap().to_vec())
        };
        let (l0, g0) = run(z);
        let (l1, g1) = run(perturbed);
        prop_assert_eq!(l0.to_bits(), l1.to_bits());
        for (j, (a, b)) in g0.iter().zip(&g1).enumerate() {
            prop_assert_eq!(a.to_bits(), b.to_bits());
            if !used.contains(&(j / 4)) {
                prop_assert_eq!(*a, 0.0);
            }
        }
    }

    #[test]
    fn projector_is_a_pure_rowwise_affine_map(
        w in vec_f64(3 * 4),
        b in vec_f64(4),
        e in vec_f64(5 * 3),
    ) {
        let p = Projector::new(
            ProjectorKind::Item,
            Tensor::new(&[3, 4], w).unwrap(),
            Tensor::new(&[4], b).unwrap(),
        ).unwrap();
        let before = p.clone();
        let et = Tensor::new(&[5, 3], e).unwrap();
        let all = p.apply(&et).unwrap();
        prop_assert_eq!(&p, &before);
        prop_assert_eq!(&all, &p.apply(&et).unwrap());
        for r in 0..5 {
            let one = p.apply(&Tensor::new(&[1, 3], et.row(r).to_vec()).unwrap()).unwrap();
            prop_assert_eq!(one.data(), all.row(r));
        }
        let mut tape = Tape::new();
        let vars = p.record(&mut tape);
        let x = tape.leaf(&et);
        let y = Projector::apply_on(&mut tape, vars, x).unwrap();
        for (a, b) in tape.value(y).iter().zip(all.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn propagation_is_linear(
        g in graph(),
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
        seed in vec_f64(2 * 10 * 2),
        layers in 0usize..4,
    ) {
        let (nu, ni) = (g.num_users(), g.num_items());
        let take = |off: usize, n: usize| Tensor::new(&[n, 2], seed[off..off + 2 * n].to_vec()).unwrap();
        let (xu, xi) = (take(0, nu), take(10, ni));
        let (yu, yi) = (take(20, nu), take(30, ni));
        let mix = |x: &Tensor<f64>, y: &Tensor<f64>| {
            Tensor::from_fn(x.shape(), |j| a * x.data()[j] + b * y.data()[j])
        };
        let (pu, pi) = lightgcn_propagate(&g, &mix(&xu, &yu), &mix(&xi, &yi), layers).unwrap();
        let (qu, qi) = lightgcn_propagate(&g, &xu, &xi, layers).unwrap();
        let (ru, ri) = lightgcn_propagate(&g, &yu, &yi, layers).unwrap();
        for (p, (q, r)) in pu.data().iter().chain(pi.data()).zip(
            qu.data().iter().chain(qi.data()).zip(ru.data().iter().chain(ri.data())),
        ) {
            prop_assert!((p - (a * q + b * r)).abs() < 1e-9);
        }
    }

    #[test]
    fn tape_runs_are_bitwise_deterministic(x in vec_f64(3 * 4), w in vec_f64(4 * 4)) {
        let run = || {
            let mut tape = Tape::<f64>::new();
            let xv = tape.leaf(&Tensor::new(&[3, 4], x.clone()).unwrap().into_param());
            let wv = tape.leaf(&Tensor::new(&[4, 4], w.clone()).unwrap().into_param());
            let h = tape.matmul(xv, wv).unwrap();
            let h = tape.gelu(h).unwrap();
            let a = tape.matmul_nt(h, h).unwrap();
            let s = tape.causal_softmax(a).unwrap();
            let s = tape.matmul(s, xv).unwrap();
            let l = tape.cross_entropy(s, &[0, 3, 1]).unwrap();
            tape.backward(l).unwrap();
            let mut bits: Vec<u64> = vec![tape.value(l)[0].to_bits()];
            bits.extend(tape.grad(xv).unwrap().iter().map(|v| v.to_bits()));
            bits.extend(tape.grad(wv).unwrap().iter().map(|v| v.to_bits()));
            bits
        };
        prop_assert_eq!(run(), run());
    }
}
