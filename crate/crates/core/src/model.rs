//! Domain types of the fusion layer and its forward pass.
//!
//! Feature matrices are stored column-per-sample: an `M x N` matrix holds `N`
//! samples of dimension `M`. Each modality owns a [`ProjectionPair`] mapping
//! features into a correlated subspace (`V`) and an individual subspace
//! (`Q`). The fused activation stacks
//!
//! ```text
//! T = [ (V1 X1 + V2 X2) / 2 ;  Q1 X1 ;  Q2 X2 ]      (3M x N)
//! ```
//!
//! and the classifier scores it with `Z = c1 W1 Fc + c2 W2 F1 + c3 W3 F2`.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use crate::error::{CimdlError, Result};

/// Simplex tolerance for the adaptive weight vector.
pub const SIMPLEX_TOL: f64 = 1e-12;

/// One modality's features, `M` rows by `N` sample columns.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch(Array2<f64>);

impl FeatureBatch {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        let (m, n) = data.dim();
        if m == 0 || n == 0 {
            return Err(CimdlError::shape(format!(
                "feature batch must be non-empty, got {m}x{n}"
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(CimdlError::invalid(format!(
                "feature entry ({}, {}) is not finite",
                bad / n,
                bad % n
            )));
        }
        Ok(FeatureBatch(data))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn samples(&self) -> usize {
        self.0.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    /// Keeps only the listed sample columns, in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> FeatureBatch {
        FeatureBatch(self.0.select(Axis(1), cols))
    }
}

/// One-hot labels, `l` class rows by `N` sample columns.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix(Array2<f64>);

impl LabelMatrix {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        for (n, col) in data.axis_iter(Axis(1)).enumerate() {
            let mut ones = 0;
            for &v in col {
                if v == 1.0 {
                    ones += 1;
                } else if v != 0.0 {
                    return Err(CimdlError::invalid(format!(
                        "label column {n} has entry {v}, expected 0 or 1"
                    )));
                }
            }
            if ones != 1 {
                return Err(CimdlError::invalid(format!(
                    "label column {n} is not one-hot ({ones} ones)"
                )));
            }
        }
        Ok(LabelMatrix(data))
    }

    pub fn classes(&self) -> usize {
        self.0.nrows()
    }

    pub fn samples(&self) -> usize {
        self.0.ncols()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn select_columns(&self, cols: &[usize]) -> LabelMatrix {
        LabelMatrix(self.0.select(Axis(1), cols))
    }
}

/// Correlated map `V` and individual map `Q` for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionPair {
    pub v: Array2<f64>,
    pub q: Array2<f64>,
}

impl ProjectionPair {
    pub fn new(v: Array2<f64>, q: Array2<f64>) -> Result<Self> {
        let pair = ProjectionPair { v, q };
        pair.check()?;
        Ok(pair)
    }

    pub fn dim(&self) -> usize {
        self.v.nrows()
    }

    pub fn check(&self) -> Result<()> {
        let m = self.v.nrows();
        if self.v.dim() != (m, m) || self.q.dim() != (m, m) {
            return Err(CimdlError::shape(format!(
                "projection pair must be two equal square matrices, got V {:?} and Q {:?}",
                self.v.dim(),
                self.q.dim()
            )));
        }
        if self.v.iter().chain(self.q.iter()).any(|v| !v.is_finite()) {
            return Err(CimdlError::invalid(
                "projection pair has non-finite entries",
            ));
        }
        Ok(())
    }
}

/// Full learned state of the fusion layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    pub pairs: [ProjectionPair; 2],
    /// Classifier blocks for the correlated, modality-1 and modality-2 parts, each `l x M`.
    pub w: [Array2<f64>; 3],
    /// Block weights on the 3-simplex.
    pub c: [f64; 3],
}

impl FusionModel {
    pub fn new(pairs: [ProjectionPair; 2], w: [Array2<f64>; 3], c: [f64; 3]) -> Result<Self> {
        let model = FusionModel { pairs, w, c };
        model.check()?;
        Ok(model)
    }

    pub fn dim(&self) -> usize {
        self.pairs[0].dim()
    }

    pub fn classes(&self) -> usize {
        self.w[0].nrows()
    }

    pub fn check(&self) -> Result<()> {
        self.pairs[0].check()?;
        self.pairs[1].check()?;
        let m = self.dim();
        if self.pairs[1].dim() != m {
            return Err(CimdlError::shape(format!(
                "projection pairs disagree on dimension: {m} vs {}",
                self.pairs[1].dim()
            )));
        }
        let l = self.classes();
        for (i, w) in self.w.iter().enumerate() {
            if w.dim() != (l, m) {
                return Err(CimdlError::shape(format!(
                    "classifier block W{} is {:?}, expected ({l}, {m})",
                    i + 1,
                    w.dim()
                )));
            }
            if w.iter().any(|v| !v.is_finite()) {
                return Err(CimdlError::invalid(format!(
                    "classifier block W{} has non-finite entries",
                    i + 1
                )));
            }
        }
        check_simplex(&self.c)
    }

    /// The classifier blocks laid side by side, `l x 3M`.
    pub fn stacked_w(&self) -> Array2<f64> {
        ndarray::concatenate(
            Axis(1),
            &[self.w[0].view(), self.w[1].view(), self.w[2].view()],
        )
        .expect("blocks share row count")
    }

    /// Splits an `l x 3M` matrix back into the three classifier blocks.
    pub fn set_stacked_w(&mut self, stacked: &Array2<f64>) {
        let m = self.dim();
        for (i, block) in self.w.iter_mut().enumerate() {
            block.assign(&stacked.slice(s![.., i * m..(i + 1) * m]));
        }
    }
}

pub fn check_simplex(c: &[f64; 3]) -> Result<()> {
    let sum: f64 = c.iter().sum();
    if c.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(CimdlError::invalid(format!(
            "block weights {c:?} are not on the simplex"
        )));
    }
    Ok(())
}

/// How the block weights `c` evolve during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMode {
    /// Weight proportional to the block's residual.
    Paper,
    /// Weight proportional to the inverse residual.
    Inverse,
    /// Weights never change.
    Fixed,
}

impl WeightMode {
    pub fn as_str(self) -> &'static str {
        match self {
            WeightMode::Paper => "paper",
            WeightMode::Inverse => "inverse",
            WeightMode::Fixed => "fixed",
        }
    }
}

impl std::str::FromStr for WeightMode {
    type Err = CimdlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(WeightMode::Paper),
            "inverse" => Ok(WeightMode::Inverse),
            "fixed" => Ok(WeightMode::Fixed),
            other => Err(CimdlError::invalid(format!(
                "unknown weight mode {other:?} (expected paper, inverse or fixed)"
            ))),
        }
    }
}

/// Multipliers, penalties and optimizer controls.
///
/// Index 0 of each pair refers to modality 1, index 1 to modality 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparameters {
    /// Reconstruction multipliers.
    pub alpha: [f64; 2],
    /// Orthogonality multipliers.
    pub sigma: [f64; 2],
    /// Smooth-L1 weights on `V_i X_i`.
    pub delta: [f64; 2],
    /// Smooth-L1 weights on `Q_i X_i`.
    pub theta: [f64; 2],
    /// Softmax cross-entropy weight.
    pub mu: f64,
    /// L2,1 weight on the stacked classifier.
    pub eta: f64,
    pub lr_w: f64,
    pub lr_vq: f64,
    /// Exponent applied to the adaptive-weight residuals.
    pub p: f64,
    pub max_iters: usize,
    /// Relative objective change below which training stops.
    pub tol: f64,
    pub weight_mode: WeightMode,
    pub seed: u64,
}

/// Number of floating-point fields persisted with a model.
pub const HP_RECORD_LEN: usize = 14;

/// Order of the floating-point fields in [`Hyperparameters::to_record`].
pub const HP_RECORD_FIELDS: [&str; HP_RECORD_LEN] = [
    "alpha1", "alpha2", "sigma1", "sigma2", "delta1", "delta2", "theta1", "theta2", "mu", "eta",
    "lr_w", "lr_vq", "p", "tol",
];

impl Hyperparameters {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in HP_RECORD_FIELDS.iter().zip(self.to_record()) {
            if !value.is_finite() || value < 0.0 {
                return Err(CimdlError::invalid(format!(
                    "hyperparameter {name} must be finite and >= 0, got {value}"
                )));
            }
        }
        if !(self.tol > 0.0) {
            return Err(CimdlError::invalid(format!(
                "hyperparameter tol must be > 0, got {}",
                self.tol
            )));
        }
        Ok(())
    }

    pub fn to_record(&self) -> [f64; HP_RECORD_LEN] {
        [
            self.alpha[0],
            self.alpha[1],
            self.sigma[0],
            self.sigma[1],
            self.delta[0],
            self.delta[1],
            self.theta[0],
            self.theta[1],
            self.mu,
            self.eta,
            self.lr_w,
            self.lr_vq,
            self.p,
            self.tol,
        ]
    }

    /// Rebuilds from a persisted record; non-float controls come from `base`.
    pub fn from_record(r: &[f64; HP_RECORD_LEN], base: &Hyperparameters) -> Hyperparameters {
        Hyperparameters {
            alpha: [r[0], r[1]],
            sigma: [r[2], r[3]],
            delta: [r[4], r[5]],
            theta: [r[6], r[7]],
            mu: r[8],
            eta: r[9],
            lr_w: r[10],
            lr_vq: r[11],
            p: r[12],
            tol: r[13],
            ..base.clone()
        }
    }
}

/// The stacked `3M x N` activation fed to the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedActivation {
    data: Array2<f64>,
    dim: usize,
}

impl FusedActivation {
    pub fn from_blocks(fc: &Array2<f64>, f1: &Array2<f64>, f2: &Array2<f64>) -> Result<Self> {
        if fc.dim() != f1.dim() || fc.dim() != f2.dim() {
            return Err(CimdlError::shape(format!(
                "fused blocks differ in shape: {:?}, {:?}, {:?}",
                fc.dim(),
                f1.dim(),
                f2.dim()
            )));
        }
        let data = ndarray::concatenate(Axis(0), &[fc.view(), f1.view(), f2.view()])
            .expect("checked shapes");
        Ok(FusedActivation {
            data,
            dim: fc.nrows(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn samples(&self) -> usize {
        self.data.ncols()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.data
    }

    /// Block 0 is the correlated part, 1 and 2 the individual parts.
    pub fn block(&self, i: usize) -> ArrayView2<'_, f64> {
        assert!(i < 3, "fused activation has three blocks");
        self.data.slice(s![i * self.dim..(i + 1) * self.dim, ..])
    }
}

fn check_pair_input(pair: &ProjectionPair, x: &FeatureBatch) -> Result<()> {
    if pair.dim() != x.dim() {
        return Err(CimdlError::shape(format!(
            "projection dimension {} does not match feature dimension {}",
            pair.dim(),
            x.dim()
        )));
    }
    Ok(())
}

fn check_modalities(model: &FusionModel, x1: &FeatureBatch, x2: &FeatureBatch) -> Result<()> {
    check_pair_input(&model.pairs[0], x1)?;
    check_pair_input(&model.pairs[1], x2)?;
    if x1.samples() != x2.samples() {
        return Err(CimdlError::shape(format!(
            "modalities disagree on sample count: {} vs {}",
            x1.samples(),
            x2.samples()
        )));
    }
    Ok(())
}

/// Splits `X` into its correlated part `VᵀV X` and individual part `QᵀQ X`.
pub fn decompose(pair: &ProjectionPair, x: &FeatureBatch) -> Result<(Array2<f64>, Array2<f64>)> {
    check_pair_input(pair, x)?;
    let vx = pair.v.dot(x.as_array());
    let qx = pair.q.dot(x.as_array());
    Ok((pair.v.t().dot(&vx), pair.q.t().dot(&qx)))
}

pub fn fused_activation(
    model: &FusionModel,
    x1: &FeatureBatch,
    x2: &FeatureBatch,
) -> Result<FusedActivation> {
    check_modalities(model, x1, x2)?;
    let (fc, f1, f2) = fused_blocks(model, x1.as_array(), x2.as_array());
    FusedActivation::from_blocks(&fc, &f1, &f2)
}

/// `((V1 X1 + V2 X2) / 2, Q1 X1, Q2 X2)` without shape checks.
pub(crate) fn fused_blocks(
    model: &FusionModel,
    x1: &Array2<f64>,
    x2: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let [p1, p2] = &model.pairs;
    let fc = (p1.v.dot(x1) + p2.v.dot(x2)) * 0.5;
    (fc, p1.q.dot(x1), p2.q.dot(x2))
}

pub fn logits(model: &FusionModel, t: &FusedActivation) -> Result<Array2<f64>> {
    if t.dim() != model.dim() {
        return Err(CimdlError::shape(format!(
            "fused activation has block dimension {}, model expects {}",
            t.dim(),
            model.dim()
        )));
    }
    Ok(weighted_logits(model, [t.block(0), t.block(1), t.block(2)]))
}

pub(crate) fn weighted_logits(
    model: &FusionModel,
    blocks: [ArrayView2<'_, f64>; 3],
) -> Array2<f64> {
    let mut z = Array2::zeros((model.classes(), blocks[0].ncols()));
    for ((w, f), &c) in model.w.iter().zip(blocks).zip(&model.c) {
        ndarray::linalg::general_mat_mul(c, w, &f, 1.0, &mut z);
    }
    z
}

/// Column-wise softmax with a per-column max shift.
pub fn softmax_columns(z: &Array2<f64>) -> Array2<f64> {
    let mut p = z.clone();
    for mut col in p.axis_iter_mut(Axis(1)) {
        let max = col.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        col.mapv_inplace(|v| (v - max).exp());
        let sum = col.sum();
        col /= sum;
    }
    p
}

/// Row index of each column's maximum; ties go to the lowest index.
pub fn argmax_columns(z: &Array2<f64>) -> Vec<usize> {
    z.axis_iter(Axis(1))
        .map(|col| {
            let mut best = 0;
            for (k, &v) in col.iter().enumerate() {
                if v > col[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

pub fn predict(model: &FusionModel, x1: &FeatureBatch, x2: &FeatureBatch) -> Result<Vec<usize>> {
    let t = fused_activation(model, x1, x2)?;
    Ok(argmax_columns(&logits(model, &t)?))
}

/// Frobenius norm.
pub fn frobenius(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub(crate) fn column_norms(a: &Array2<f64>) -> Array1<f64> {
    a.map_axis(Axis(0), |col| col.iter().map(|v| v * v).sum::<f64>().sqrt())
}
