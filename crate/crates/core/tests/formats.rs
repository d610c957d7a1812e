//! Byte layouts decoded by hand, independently of the library readers.

use fedmem_core::data::Sample;
use fedmem_core::datastore::{Datastore, NeighborIndex, Policy};
use fedmem_core::nn::{Activation, LayerSpec, Model};

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn u64_at(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

fn f32_at(b: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

#[test]
fn model_layout() {
    let layers = vec![
        LayerSpec::new(2, 3, Activation::Relu),
        LayerSpec::new(3, 2, Activation::Identity),
    ];
    let params: Vec<f64> = (0..17).map(|i| i as f64 * 0.25 - 2.0).collect();
    let model = Model::from_params(layers, 0, params.clone()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.fmnn");
    std::fs::write(&path, model.to_bytes()).unwrap();
    let b = std::fs::read(&path).unwrap();

    assert_eq!(&b[..4], b"FMNN");
    assert_eq!(u32_at(&b, 4), 1);
    assert_eq!(u32_at(&b, 8), 2);
    // per layer: in u32, out u32, activation u8
    assert_eq!((u32_at(&b, 12), u32_at(&b, 16), b[20]), (2, 3, 1));
    assert_eq!((u32_at(&b, 21), u32_at(&b, 25), b[29]), (3, 2, 0));
    assert_eq!(b.len(), 30 + 17 * 4);
    for (i, p) in params.iter().enumerate() {
        assert_eq!(f32_at(&b, 30 + 4 * i), *p as f32);
    }
    let back = Model::from_bytes(&b).unwrap();
    assert_eq!(back.params(), &params[..]);
    assert_eq!(back.repr_index(), 0);
}

#[test]
fn datastore_layout() {
    let model = Model::mlp(&[2, 4, 3], 5).unwrap();
    let samples: Vec<Sample> = (0..6).map(|i| Sample::new(vec![i as f64, 1.0 - i as f64], i % 3)).collect();
    let store = Datastore::build(&model, &samples, 1.0, 0)
        .unwrap()
        .with_policy(Policy::Fifo, Some(4))
        .unwrap();
    let b = store.to_bytes();

    assert_eq!(&b[..4], b"FMDS");
    assert_eq!(u32_at(&b, 4), 1);
    assert_eq!(u32_at(&b, 8), 4); // p
    assert_eq!(u64_at(&b, 12), 4); // count after eviction
    assert_eq!(b[20], 1); // fifo
    assert_eq!(u64_at(&b, 21), 4); // capacity
    let entry = 8 + 4 + 4 * 4;
    assert_eq!(b.len(), 29 + 4 * entry);
    for (j, e) in store.entries().iter().enumerate() {
        let at = 29 + j * entry;
        assert_eq!(u64_at(&b, at), e.insert_seq);
        assert_eq!(u32_at(&b, at + 8) as usize, e.label);
        for d in 0..4 {
            assert_eq!(f32_at(&b, at + 12 + 4 * d), e.key[d]);
        }
    }
    // the two oldest entries were evicted
    assert_eq!(u64_at(&b, 29), 2);

    let back = Datastore::from_bytes(&b).unwrap();
    assert_eq!(back, store);
    let q = model.embed(&[0.5, 0.5]).unwrap();
    assert_eq!(back.knn_query(&q, 3, 1.0).unwrap(), store.knn_query(&q, 3, 1.0).unwrap());

    let unset = Datastore::build(&model, &samples, 1.0, 0).unwrap().to_bytes();
    assert_eq!((unset[20], u64_at(&unset, 21)), (0, 0));
}
