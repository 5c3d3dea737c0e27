//! Accuracy metrics, softmax-regression baselines and the fixed-weight sweep.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{CimdlError, Result};
use crate::model::{
    argmax_columns, predict, softmax_columns, FeatureBatch, FusionModel, Hyperparameters,
    LabelMatrix, WeightMode, HP_RECORD_FIELDS,
};
use crate::objective::{cross_entropy, l21_norm, L21_EPS};
use crate::optimizer::{train, TrainOptions};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
    pub n_samples: usize,
}

impl EvalReport {
    pub fn from_predictions(
        predicted: &[usize],
        truth: &[usize],
        num_classes: usize,
    ) -> Result<Self> {
        if predicted.len() != truth.len() {
            return Err(CimdlError::shape(format!(
                "{} predictions for {} labels",
                predicted.len(),
                truth.len()
            )));
        }
        let mut confusion = vec![vec![0u64; num_classes]; num_classes];
        for (&p, &t) in predicted.iter().zip(truth) {
            if p >= num_classes || t >= num_classes {
                return Err(CimdlError::invalid(format!(
                    "class index out of range: predicted {p}, true {t}, {num_classes} classes"
                )));
            }
            confusion[t][p] += 1;
        }
        let n = truth.len();
        let hits: u64 = (0..num_classes).map(|k| confusion[k][k]).sum();
        let per_class_accuracy = confusion
            .iter()
            .enumerate()
            .map(|(k, row)| {
                let total: u64 = row.iter().sum();
                if total == 0 {
                    0.0
                } else {
                    row[k] as f64 / total as f64
                }
            })
            .collect();
        Ok(EvalReport {
            accuracy: if n == 0 { 0.0 } else { hits as f64 / n as f64 },
            per_class_accuracy,
            confusion,
            n_samples: n,
        })
    }
}

pub fn evaluate(
    model: &FusionModel,
    x1: &FeatureBatch,
    x2: &FeatureBatch,
    labels: &[usize],
) -> Result<EvalReport> {
    if x1.samples() != labels.len() {
        return Err(CimdlError::shape(format!(
            "{} samples but {} labels",
            x1.samples(),
            labels.len()
        )));
    }
    let predicted = predict(model, x1, x2)?;
    EvalReport::from_predictions(&predicted, labels, model.classes())
}

/// Plain multinomial softmax regression `P = softmax(W X)`, trained on
/// `μ CE + η ‖W‖₂,₁` with the classifier learning rate and stopping rule.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxRegression {
    pub w: Array2<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl SoftmaxRegression {
    pub fn fit(x: &FeatureBatch, labels: &LabelMatrix, hp: &Hyperparameters) -> Result<Self> {
        if x.samples() != labels.samples() {
            return Err(CimdlError::shape(format!(
                "{} samples but {} label columns",
                x.samples(),
                labels.samples()
            )));
        }
        hp.validate()?;
        let xa = x.as_array();
        let objective = |w: &Array2<f64>| -> Result<f64> {
            let p = softmax_columns(&w.dot(xa));
            Ok(hp.mu * cross_entropy(&p, labels)? + hp.eta * l21_norm(w))
        };
        let mut w = Array2::zeros((labels.classes(), x.dim()));
        let mut previous = objective(&w)?;
        let mut iterations = 0;
        let mut converged = false;
        for it in 1..=hp.max_iters {
            let g = (softmax_columns(&w.dot(xa)) - labels.as_array()) * hp.mu;
            let mut grad = g.dot(&xa.t());
            let norms = w.map_axis(Axis(0), |c| c.dot(&c).sqrt());
            for ((mut gc, wc), n) in grad.columns_mut().into_iter().zip(w.columns()).zip(norms) {
                gc.scaled_add(2.0 * hp.eta / (2.0 * n + L21_EPS), &wc);
            }
            w.scaled_add(-hp.lr_w, &grad);
            let current = objective(&w)?;
            if !current.is_finite() {
                return Err(CimdlError::Diverged {
                    iteration: it,
                    value: current,
                });
            }
            iterations = it;
            let change = (current - previous).abs() / previous.abs().max(1.0);
            previous = current;
            if change < hp.tol {
                converged = true;
                break;
            }
        }
        Ok(SoftmaxRegression {
            w,
            iterations,
            converged,
        })
    }

    pub fn predict(&self, x: &FeatureBatch) -> Result<Vec<usize>> {
        if x.dim() != self.w.ncols() {
            return Err(CimdlError::shape(format!(
                "regression expects {} features, got {}",
                self.w.ncols(),
                x.dim()
            )));
        }
        Ok(argmax_columns(&self.w.dot(x.as_array())))
    }
}

/// Softmax regression on one modality's raw features.
pub fn baseline_single_modality(
    x_train: &FeatureBatch,
    labels_train: &LabelMatrix,
    x_test: &FeatureBatch,
    labels_test: &[usize],
    hp: &Hyperparameters,
) -> Result<EvalReport> {
    let reg = SoftmaxRegression::fit(x_train, labels_train, hp)?;
    EvalReport::from_predictions(&reg.predict(x_test)?, labels_test, labels_train.classes())
}

fn stack(x1: &FeatureBatch, x2: &FeatureBatch) -> Result<FeatureBatch> {
    let joined = ndarray::concatenate(Axis(0), &[x1.view(), x2.view()]).map_err(|_| {
        CimdlError::shape(format!(
            "cannot stack modalities with {} and {} samples",
            x1.samples(),
            x2.samples()
        ))
    })?;
    FeatureBatch::new(joined)
}

/// Softmax regression on the stacked features `[X1; X2]`.
pub fn baseline_concat(
    train: (&FeatureBatch, &FeatureBatch),
    labels_train: &LabelMatrix,
    test: (&FeatureBatch, &FeatureBatch),
    labels_test: &[usize],
    hp: &Hyperparameters,
) -> Result<EvalReport> {
    baseline_single_modality(
        &stack(train.0, train.1)?,
        labels_train,
        &stack(test.0, test.1)?,
        labels_test,
        hp,
    )
}

/// Outcome of one sweep grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub c1: f64,
    /// `None` when training failed at this point.
    pub accuracy: Option<f64>,
    pub error: Option<String>,
}

/// Block weights `(c1, (1 − c1)/2, (1 − c1)/2)`.
pub fn sweep_weights(c1: f64) -> [f64; 3] {
    let rest = (1.0 - c1) / 2.0;
    [c1, rest, 1.0 - c1 - rest]
}

/// Parses `"start:step:end"` (inclusive) or a comma list.
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let bad = || CimdlError::invalid(format!("bad grid {s:?}, expected start:step:end or a,b,c"));
    let grid: Vec<f64> = if s.contains(':') {
        let parts: Vec<f64> = s
            .split(':')
            .map(|t| t.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let [start, step, end] = parts[..] else {
            return Err(bad());
        };
        if !(step > 0.0) || end < start {
            return Err(bad());
        }
        let count = ((end - start) / step + 1e-9).floor() as usize;
        // values are rounded to 12 decimals so 0.1-steps land on 0.3, not 0.30000000000000004
        (0..=count)
            .map(|i| ((start + step * i as f64) * 1e12).round() / 1e12)
            .collect()
    } else {
        s.split(',')
            .map(|t| t.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?
    };
    if grid.is_empty() || grid.iter().any(|c| !(0.0..=1.0).contains(c)) {
        return Err(CimdlError::invalid(format!(
            "grid values must lie in [0, 1]: {s:?}"
        )));
    }
    Ok(grid)
}

/// Trains with fixed weights at every grid value of `c1` and records test accuracy.
pub fn weight_sweep(
    train_set: &Dataset,
    test_set: &Dataset,
    hp: &Hyperparameters,
    opts: &TrainOptions,
    grid: &[f64],
) -> Result<Vec<SweepPoint>> {
    if let Some(bad) = grid.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(CimdlError::invalid(format!(
            "grid value {bad} outside [0, 1]"
        )));
    }
    let labels = train_set.label_matrix();
    let fixed = Hyperparameters {
        weight_mode: WeightMode::Fixed,
        ..hp.clone()
    };
    let points = grid
        .par_iter()
        .map(|&c1| {
            let run_opts = TrainOptions {
                initial_weights: Some(sweep_weights(c1)),
                ..opts.clone()
            };
            let outcome =
                train(&train_set.x1, &train_set.x2, &labels, &fixed, &run_opts).and_then(|r| {
                    evaluate(&r.final_model, &test_set.x1, &test_set.x2, &test_set.labels)
                });
            match outcome {
                Ok(report) => SweepPoint {
                    c1,
                    accuracy: Some(report.accuracy),
                    error: None,
                },
                Err(e) => SweepPoint {
                    c1,
                    accuracy: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    Ok(points)
}

/// CSV with header `c1,accuracy`; failed points have an empty accuracy.
pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("c1,accuracy\n");
    for p in points {
        match p.accuracy {
            Some(a) => writeln!(out, "{},{}", p.c1, a).expect("string write"),
            None => writeln!(out, "{},", p.c1).expect("string write"),
        }
    }
    out
}

/// Where a report came from.
#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct Provenance {
    pub seed: Option<u64>,
    pub hyperparameters: BTreeMap<String, f64>,
    /// SHA-256 of each input file, keyed by role.
    pub files: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<u64>,
}

impl Provenance {
    pub fn with_hyperparameters(mut self, record: &[f64]) -> Self {
        self.hyperparameters = HP_RECORD_FIELDS
            .iter()
            .zip(record)
            .map(|(k, &v)| (k.to_string(), v))
            .collect();
        self
    }

    pub fn add_file(&mut self, role: &str, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| CimdlError::io(path, e))?;
        self.files.insert(role.to_string(), sha256_hex(&bytes));
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            write!(s, "{b:02x}").expect("string write");
            s
        })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportFile<'a> {
    pub accuracy: f64,
    pub per_class_accuracy: &'a [f64],
    pub confusion: &'a [Vec<u64>],
    pub n_samples: usize,
    pub provenance: &'a Provenance,
}

/// Pretty-printed JSON report with a trailing newline.
pub fn report_json(report: &EvalReport, provenance: &Provenance) -> String {
    let file = ReportFile {
        accuracy: report.accuracy,
        per_class_accuracy: &report.per_class_accuracy,
        confusion: &report.confusion,
        n_samples: report.n_samples,
        provenance,
    };
    let mut s = serde_json::to_string_pretty(&file).expect("report serializes");
    s.push('\n');
    s
}
