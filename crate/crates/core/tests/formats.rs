use std::time::Instant;

use cimdl::data::*;
use cimdl::model::{FeatureBatch, Hyperparameters};
use cimdl::optimizer::{init_model, resolve_hyperparameters, HyperOverrides, InitScheme};
use ndarray::Array2;

#[test]
fn million_entry_features_roundtrip_quickly() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("big.cimf");
    let x = FeatureBatch::new(Array2::from_shape_fn((2000, 500), |(i, j)| {
        (i as f64 - j as f64 * 1e-3).cos() * 1e-7
    }))
    .unwrap();
    let start = Instant::now();
    write_features(&path, &x).unwrap();
    let back = read_features(&path).unwrap();
    assert!(start.elapsed().as_secs_f64() < 5.0);
    assert!(x
        .as_array()
        .iter()
        .zip(back.as_array())
        .all(|(a, b)| a.to_bits() == b.to_bits()));
    assert_eq!(std::fs::metadata(&path).unwrap().len(), 16 + 8 * 1_000_000);
}

#[test]
fn model_file_layout() {
    let model = init_model(3, 2, InitScheme::SeededUniform, 9).unwrap();
    let hp: Hyperparameters = resolve_hyperparameters(3, 10, &HyperOverrides::default()).unwrap();
    let bytes = encode_model(&SavedModel::new(model.clone(), &hp)).unwrap();
    // header, four 3x3 projections, three 2x3 classifiers, weights, 14 settings
    assert_eq!(bytes.len(), 16 + 8 * (4 * 9 + 3 * 6 + 3 + 14));
    assert_eq!(&bytes[..4], MODEL_MAGIC);
    let first_v = f64::from_le_bytes(bytes[16..24].try_into().unwrap());
    assert_eq!(first_v.to_bits(), model.pairs[0].v[[0, 0]].to_bits());
    let back = decode_model(&bytes, "mem".as_ref()).unwrap();
    assert_eq!(back.model, model);
    assert_eq!(back.hyperparameters(&hp), hp);
}

#[test]
fn label_file_rejects_out_of_range_classes() {
    let mut bytes = encode_labels(&[0, 1, 2, 1], 3).unwrap();
    let last = bytes.len() - 4;
    bytes[last..].copy_from_slice(&7u32.to_le_bytes());
    let err = decode_labels(&bytes, "mem".as_ref(), None)
        .unwrap_err()
        .to_string();
    assert!(err.contains("record 3"), "{err}");
}
