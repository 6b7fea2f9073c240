use ndcore::{Bundle, Tensor};
use proptest::prelude::*;

fn name() -> impl Strategy<Value = String> {
    "[a-z][a-z0-9_.]{0,11}"
}

fn tensor() -> impl Strategy<Value = Tensor> {
    (1usize..5, 1usize..5).prop_flat_map(|(r, c)| {
        prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), r * c)
            .prop_map(move |data| Tensor::matrix(r, c, data))
    })
}

fn bundle() -> impl Strategy<Value = Bundle> {
    (
        prop::collection::btree_map(name(), "[ -~]{0,20}", 0..4),
        prop::collection::btree_map(name(), tensor(), 0..4),
        prop::collection::btree_map(name(), prop::collection::vec(any::<i32>(), 0..10), 0..3),
    )
        .prop_map(|(meta, tensors, ints)| {
            let mut b = Bundle::new();
            for (k, v) in meta {
                b.set_meta(&k, v);
            }
            for (n, t) in &tensors {
                b.put_tensor(n, t).unwrap();
            }
            for (n, v) in &ints {
                b.put_ints(n, v).unwrap();
            }
            b
        })
}

proptest! {
    #[test]
    fn bytes_round_trip_exactly(b in bundle()) {
        let bytes = b.to_bytes();
        let back = Bundle::from_reader(bytes.as_slice()).unwrap();
        prop_assert_eq!(&back, &b);
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn truncated_payloads_are_rejected(b in bundle(), cut in 1usize..9) {
        let bytes = b.to_bytes();
        let header = bytes.windows(4).position(|w| w == b"end\n").unwrap() + 4;
        prop_assume!(bytes.len() > header);
        let keep = bytes.len().saturating_sub(cut).max(header);
        prop_assume!(keep < bytes.len());
        prop_assert!(Bundle::from_reader(&bytes[..keep]).is_err());
    }
}

#[test]
fn save_and_load_through_the_filesystem() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let mut b = Bundle::new();
    b.set_meta("kind", "probe").set_meta("epochs", 3);
    b.put_tensor(
        "w",
        &Tensor::matrix(2, 2, vec![1.0, -0.0, 2.5, f64::MIN_POSITIVE]),
    )
    .unwrap();
    b.put_ints("labels", &[0, 3, -1]).unwrap();
    b.save(&path).unwrap();
    let back = Bundle::load(&path).unwrap();
    assert_eq!(back.meta_parse::<u32>("epochs").unwrap(), 3);
    assert_eq!(back.ints("labels").unwrap(), &[0, 3, -1]);
    assert_eq!(
        back.tensor("w").unwrap().data()[1].to_bits(),
        (-0.0f64).to_bits()
    );
    assert!(back.tensor("missing").is_err());
}

#[test]
fn bad_magic_and_bad_names_are_errors() {
    assert!(Bundle::from_reader(&b"ndcore-bundle=2\nend\n"[..]).is_err());
    let mut b = Bundle::new();
    assert!(b.put_tensor("has space", &Tensor::zeros(1, 1)).is_err());
    assert!(b.put_ints("a=b", &[1]).is_err());
}
