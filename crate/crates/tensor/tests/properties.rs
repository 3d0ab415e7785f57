use proptest::prelude::*;
use sot_tensor::{checkpoint, Graph, ParamStore, Tensor};

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..6, seed in any::<u64>()) {
        let mut s = seed;
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 20.0 - 10.0
            })
            .collect();
        let g = Graph::new();
        let y = g.leaf(Tensor::new(vec![rows, cols], data).unwrap()).softmax(1).unwrap();
        for r in 0..rows {
            let row = y.value().row(r);
            let total: f64 = row.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&p| p > 0.0 && p < 1.0 || cols == 1 && p == 1.0));
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact(
        values in proptest::collection::vec(-1e6f64..1e6, 1..40),
        hash in any::<u64>(),
    ) {
        let mut store = ParamStore::new();
        let n = values.len();
        store.insert_trainable("a.weight", Tensor::new(vec![n], values.clone()).unwrap()).unwrap();
        store.insert_buffer("a.running_var", Tensor::new(vec![1, n], values).unwrap()).unwrap();
        let bytes = checkpoint::encode(&store, hash);
        let (back, h) = checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(h, hash);
        prop_assert_eq!(checkpoint::encode(&back, h), bytes);
        let (again, _) = checkpoint::decode(&checkpoint::encode(&back, h)).unwrap();
        prop_assert_eq!(again, back);
    }
}

#[test]
fn checkpoint_file_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut store = ParamStore::new();
    store.insert_trainable("w", Tensor::new(vec![2, 2], vec![0.5, -1.25, 3.0, 1e-3]).unwrap()).unwrap();
    checkpoint::save(&path, &store, 99).unwrap();
    let (back, hash) = checkpoint::load(&path).unwrap();
    assert_eq!(hash, 99);
    let first = std::fs::read(&path).unwrap();
    checkpoint::save(&path, &back, hash).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);
}
