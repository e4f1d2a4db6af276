use glta::checkpoint::{Checkpoint, Stage};
use glta::Error;
use glta_core::ndgrad::Tensor;
use proptest::prelude::*;

fn sample() -> Checkpoint {
    let mut c = Checkpoint::new(Stage::ItemAlign, "[run]\nseed = 3\n".into());
    c.set_meta("epoch", 4);
    c.set_meta("complete", false);
    c.push("w", &Tensor::new(&[2, 3], vec![1.0, -2.5, 0.0, 3.25, f32::MIN_POSITIVE, -0.0]).unwrap());
    c.push("b", &Tensor::new(&[3], vec![0.5, 0.25, 0.125]).unwrap());
    c
}

fn array() -> impl Strategy<Value = (Vec<usize>, Vec<f32>)> {
    prop::collection::vec(1usize..4, 1..4).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        (Just(shape), prop::collection::vec(any::<f32>(), n))
    })
}

proptest! {
    #[test]
    fn bytes_round_trip_bitwise(
        arrays in prop::collection::vec(array(), 0..4),
        meta in prop::collection::btree_map("[a-z.]{1,8}", "[ -~]{0,12}", 0..4),
        config in "[ -~\n]{0,40}",
    ) {
        let mut c = Checkpoint::new(Stage::UserAlign, config);
        for (k, v) in &meta {
            c.set_meta(k, v);
        }
        for (j, (shape, data)) in arrays.iter().enumerate() {
            c.push(format!("a{j}"), &Tensor::new(shape, data.clone()).unwrap());
        }
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, "x".as_ref()).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(&back.meta, &c.meta);
        prop_assert_eq!(&back.config, &c.config);
        for ((n0, t0), (n1, t1)) in c.arrays.iter().zip(&back.arrays) {
            prop_assert_eq!(n0, n1);
            prop_assert_eq!(t0.shape(), t1.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(t0), bits(t1));
        }
    }
}

#[test]
fn wrong_stage_is_a_typed_error() {
    match sample().expect_stage(&[Stage::Graph]) {
        Err(Error::Stage { expected, found }) => {
            assert_eq!((expected.as_str(), found.as_str()), ("graph", "item-align"))
        }
        other => panic!("{other:?}"),
    }
    sample().expect_stage(&[Stage::Graph, Stage::ItemAlign]).unwrap();
}

#[test]
fn truncated_and_padded_files_are_rejected() {
    let bytes = sample().to_bytes();
    for cut in [0, 3, 8, 20, bytes.len() - 1] {
        assert!(
            matches!(Checkpoint::from_bytes(&bytes[..cut], "x".as_ref()), Err(Error::Checkpoint { .. })),
            "cut at {cut}"
        );
    }
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(Checkpoint::from_bytes(&long, "x".as_ref()), Err(Error::Checkpoint { .. })));
    let mut bad = bytes;
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad, "x".as_ref()), Err(Error::Checkpoint { .. })));
}

#[test]
fn existing_files_need_force() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/stage.ckpt");
    sample().save(&path, false).unwrap();
    assert!(matches!(sample().save(&path, false), Err(Error::Exists(_))));
    let mut other = sample();
    other.set_meta("epoch", 5);
    other.save(&path, true).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), other);
}
