//! File formats, synthetic data, feature preprocessing and depth encoding.

mod binary;
mod csv;
mod normals;
mod standardize;
mod synthetic;

pub use binary::{
    decode_features, decode_labels, decode_model, encode_features, encode_labels, encode_model,
    load_model, read_features, read_labels, save_model, write_features, write_labels, SavedModel,
    FEATURE_MAGIC, FORMAT_VERSION, LABEL_MAGIC, MODEL_MAGIC,
};
pub use csv::read_csv_features;
pub use normals::{
    depth_to_surface_normals, normal_to_rgb, read_pgm16, write_pgm16, write_ppm, DepthMap,
    NormalMap,
};
pub use standardize::{standardize, Standardization, VARIANCE_FLOOR};
pub use synthetic::{generate_synthetic, parse_ambiguity, SyntheticSpec};

use ndarray::Array2;

use crate::error::{CimdlError, Result};
use crate::model::{FeatureBatch, LabelMatrix};

/// Two aligned modalities with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x1: FeatureBatch,
    pub x2: FeatureBatch,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(
        x1: FeatureBatch,
        x2: FeatureBatch,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if x1.dim() != x2.dim() {
            return Err(CimdlError::shape(format!(
                "modalities have different feature dimensions: {} vs {}",
                x1.dim(),
                x2.dim()
            )));
        }
        if x1.samples() != x2.samples() || x1.samples() != labels.len() {
            return Err(CimdlError::shape(format!(
                "sample counts differ: X1 {}, X2 {}, labels {}",
                x1.samples(),
                x2.samples(),
                labels.len()
            )));
        }
        check_labels(&labels, num_classes)?;
        Ok(Dataset {
            x1,
            x2,
            labels,
            num_classes,
        })
    }

    pub fn samples(&self) -> usize {
        self.labels.len()
    }

    pub fn label_matrix(&self) -> LabelMatrix {
        one_hot(&self.labels, self.num_classes).expect("labels validated")
    }
}

pub(crate) fn check_labels(labels: &[usize], l: usize) -> Result<()> {
    if let Some((i, &k)) = labels.iter().enumerate().find(|(_, &k)| k >= l) {
        return Err(CimdlError::invalid(format!(
            "label record {i} has class {k}, but only {l} classes exist"
        )));
    }
    Ok(())
}

/// One-hot encodes class indices into an `l x N` matrix.
pub fn one_hot(labels: &[usize], l: usize) -> Result<LabelMatrix> {
    check_labels(labels, l)?;
    let mut m = Array2::zeros((l, labels.len()));
    for (n, &k) in labels.iter().enumerate() {
        m[[k, n]] = 1.0;
    }
    LabelMatrix::new(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Axis};
    use proptest::prelude::*;

    #[test]
    fn one_hot_cases() {
        assert_eq!(
            one_hot(&[0, 1], 2).unwrap().as_array(),
            &array![[1.0, 0.0], [0.0, 1.0]]
        );
        let same = one_hot(&[2, 2, 2], 3).unwrap();
        assert_eq!(same.as_array().row(2).to_vec(), vec![1.0; 3]);
        assert_eq!(same.as_array().row(0).sum(), 0.0);
        assert!(one_hot(&[0, 3], 3).is_err());
    }

    proptest! {
        #[test]
        fn one_hot_columns_sum_to_one(labels in proptest::collection::vec(0usize..5, 1..40)) {
            let m = one_hot(&labels, 5).unwrap();
            for s in m.as_array().sum_axis(Axis(0)) {
                prop_assert_eq!(s, 1.0);
            }
        }
    }
}
