use ndarray::{Array1, Array2, Axis};

use crate::error::{CimdlError, Result};
use crate::model::FeatureBatch;

pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Per-row affine map `x -> (x - mean) / sd` fitted on training data.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardization {
    pub mean: Array1<f64>,
    pub sd: Array1<f64>,
}

impl Standardization {
    /// Population statistics of each row; variances are floored at 1e-12.
    pub fn fit(x: &FeatureBatch) -> Result<Self> {
        if x.samples() < 2 {
            return Err(CimdlError::invalid(
                "standardization needs at least 2 samples",
            ));
        }
        let a = x.as_array();
        let mean = a.mean_axis(Axis(1)).expect("non-empty");
        let centered = a - &mean.view().insert_axis(Axis(1));
        let var = centered
            .mapv(|v| v * v)
            .mean_axis(Axis(1))
            .expect("non-empty");
        let sd = var.mapv(|v| v.max(VARIANCE_FLOOR).sqrt());
        Ok(Standardization { mean, sd })
    }

    pub fn apply(&self, x: &FeatureBatch) -> Result<FeatureBatch> {
        if x.dim() != self.mean.len() {
            return Err(CimdlError::shape(format!(
                "standardization fitted on {} rows, applied to {}",
                self.mean.len(),
                x.dim()
            )));
        }
        let mut out = x.as_array() - &self.mean.view().insert_axis(Axis(1));
        out /= &self.sd.view().insert_axis(Axis(1));
        FeatureBatch::new(out)
    }

    /// Mean and sd as a `2 x M` matrix, for storage next to a model.
    pub fn to_matrix(&self) -> Array2<f64> {
        ndarray::stack(Axis(0), &[self.mean.view(), self.sd.view()]).expect("same length")
    }

    pub fn from_matrix(m: &Array2<f64>) -> Result<Self> {
        if m.nrows() != 2 {
            return Err(CimdlError::shape(format!(
                "standardization record must have 2 rows, got {}",
                m.nrows()
            )));
        }
        Ok(Standardization {
            mean: m.row(0).to_owned(),
            sd: m.row(1).to_owned(),
        })
    }
}

/// Fits on `train` and applies the same map to `train` and every batch in `others`.
pub fn standardize(
    train: &FeatureBatch,
    others: &[&FeatureBatch],
) -> Result<(FeatureBatch, Vec<FeatureBatch>, Standardization)> {
    let stats = Standardization::fit(train)?;
    let t = stats.apply(train)?;
    let rest = others
        .iter()
        .map(|x| stats.apply(x))
        .collect::<Result<Vec<_>>>()?;
    Ok((t, rest, stats))
}
