//! Alternating gradient descent over `V`, `Q`, `W` and the block weights `c`.
//!
//! One outer iteration runs, in order:
//!
//! 1. `V1, V2 <- V - lr_vq * dJ/dV` (both from the same snapshot)
//! 2. `Q1, Q2 <- Q - lr_vq * dJ/dQ` (gradients taken after step 1)
//! 3. `W <- W - lr_w * dJ/dW`
//! 4. `c` recomputed from per-block classification residuals, unless fixed
//!
//! after which the objective is evaluated once and recorded.

mod init;
mod params;

pub use init::{init_model, InitScheme, INIT_NOISE};
pub use params::{
    resolve_hyperparameters, HyperOverrides, DEFAULT_MAX_ITERS, DEFAULT_P, DEFAULT_TOL,
};

use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CimdlError, Result};
use crate::model::{
    check_simplex, fused_blocks, softmax_columns, FeatureBatch, FusionModel, Hyperparameters,
    LabelMatrix, WeightMode,
};
use crate::objective::{check_problem, gradients_unchecked, total_objective, ObjectiveBreakdown};

/// Offset in the inverse-residual weighting.
pub const INVERSE_EPS: f64 = 1e-12;

/// Applies the `V` update and then the `Q` update.
pub fn step_projections(
    model: &FusionModel,
    x1: &FeatureBatch,
    x2: &FeatureBatch,
    labels: &LabelMatrix,
    hp: &Hyperparameters,
) -> Result<FusionModel> {
    check_problem(model, x1, x2, labels)?;
    Ok(step_projections_unchecked(
        model,
        x1.as_array(),
        x2.as_array(),
        labels.as_array(),
        hp,
    ))
}

fn step_projections_unchecked(
    model: &FusionModel,
    x1: &Array2<f64>,
    x2: &Array2<f64>,
    l: &Array2<f64>,
    hp: &Hyperparameters,
) -> FusionModel {
    let mut next = model.clone();
    if hp.lr_vq == 0.0 {
        return next;
    }
    let g = gradients_unchecked(model, x1, x2, l, hp);
    for (pair, gv) in next.pairs.iter_mut().zip(&g.v) {
        pair.v.scaled_add(-hp.lr_vq, gv);
    }
    let g = gradients_unchecked(&next, x1, x2, l, hp);
    for (pair, gq) in next.pairs.iter_mut().zip(&g.q) {
        pair.q.scaled_add(-hp.lr_vq, gq);
    }
    next
}

/// Applies one gradient step to the classifier blocks.
pub fn step_classifier(
    model: &FusionModel,
    x1: &FeatureBatch,
    x2: &FeatureBatch,
    labels: &LabelMatrix,
    hp: &Hyperparameters,
) -> Result<FusionModel> {
    check_problem(model, x1, x2, labels)?;
    Ok(step_classifier_unchecked(
        model,
        x1.as_array(),
        x2.as_array(),
        labels.as_array(),
        hp,
    ))
}

fn step_classifier_unchecked(
    model: &FusionModel,
    x1: &Array2<f64>,
    x2: &Array2<f64>,
    l: &Array2<f64>,
    hp: &Hyperparameters,
) -> FusionModel {
    let mut next = model.clone();
    if hp.lr_w == 0.0 {
        return next;
    }
    let g = gradients_unchecked(model, x1, x2, l, hp);
    for (w, gw) in next.w.iter_mut().zip(&g.w) {
        w.scaled_add(-hp.lr_w, gw);
    }
    next
}

/// `‖softmax(W_k F_k) − L‖_F^p` for the correlated and both individual blocks.
pub fn block_residuals(
    model: &FusionModel,
    x1: &FeatureBatch,
    x2: &FeatureBatch,
    labels: &LabelMatrix,
    p: f64,
) -> Result<[f64; 3]> {
    check_problem(model, x1, x2, labels)?;
    Ok(block_residuals_unchecked(
        model,
        x1.as_array(),
        x2.as_array(),
        labels.as_array(),
        p,
    ))
}

fn block_residuals_unchecked(
    model: &FusionModel,
    x1: &Array2<f64>,
    x2: &Array2<f64>,
    l: &Array2<f64>,
    p: f64,
) -> [f64; 3] {
    let (fc, f1, f2) = fused_blocks(model, x1, x2);
    let residual = |w: &Array2<f64>, f: ArrayView2<'_, f64>| {
        let probs = softmax_columns(&w.dot(&f));
        let norm = (probs - l).iter().map(|v| v * v).sum::<f64>().sqrt();
        norm.powf(p)
    };
    [
        residual(&model.w[0], fc.view()),
        residual(&model.w[1], f1.view()),
        residual(&model.w[2], f2.view()),
    ]
}

/// Maps block residuals to simplex weights.
pub fn weights_from_residuals(r: [f64; 3], mode: WeightMode) -> Result<[f64; 3]> {
    let third = 1.0 / 3.0;
    let raw = match mode {
        WeightMode::Fixed => {
            return Err(CimdlError::invalid(
                "fixed weight mode has no adaptive update",
            ))
        }
        WeightMode::Paper => r,
        WeightMode::Inverse => r.map(|v| 1.0 / (v + INVERSE_EPS)),
    };
    if r.iter().all(|&v| v == 0.0) {
        return Ok([third; 3]);
    }
    let sum: f64 = raw.iter().sum();
    if !(sum > 0.0) || !sum.is_finite() {
        return Ok([third; 3]);
    }
    let c = raw.map(|v| v / sum);
    check_simplex(&c)?;
    Ok(c)
}

/// Recomputes `c` from the current per-block residuals.
pub fn update_adaptive_weights(
    model: &FusionModel,
    x1: &FeatureBatch,
    x2: &FeatureBatch,
    labels: &LabelMatrix,
    hp: &Hyperparameters,
) -> Result<FusionModel> {
    let r = block_residuals(model, x1, x2, labels, hp.p)?;
    let mut next = model.clone();
    next.c = weights_from_residuals(r, hp.weight_mode)?;
    Ok(next)
}

/// Settings of a training run that are not hyperparameters of the objective.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainOptions {
    pub init: InitScheme,
    pub seed: u64,
    /// Starting block weights; `(1/3, 1/3, 1/3)` when unset.
    pub initial_weights: Option<[f64; 3]>,
    /// Columns sampled per iteration; 0 uses the full batch.
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub iterations_run: usize,
    /// Objective at the initial model, before any update.
    pub initial_objective: ObjectiveBreakdown,
    /// Objective after each iteration.
    pub objective_trace: Vec<ObjectiveBreakdown>,
    /// Block weights after each iteration.
    pub weight_trace: Vec<[f64; 3]>,
    pub converged: bool,
    pub initial_model: FusionModel,
    pub final_model: FusionModel,
}

/// Initializes a model and runs the alternating loop.
pub fn train(
    x1: &FeatureBatch,
    x2: &FeatureBatch,
    labels: &LabelMatrix,
    hp: &Hyperparameters,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    let mut model = init_model(x1.dim(), labels.classes(), opts.init, opts.seed)?;
    if let Some(c) = opts.initial_weights {
        check_simplex(&c)?;
        model.c = c;
    }
    train_model(model, x1, x2, labels, hp, opts.batch_size, opts.seed)
}

/// Runs the alternating loop from a given model.
pub fn train_model(
    model: FusionModel,
    x1: &FeatureBatch,
    x2: &FeatureBatch,
    labels: &LabelMatrix,
    hp: &Hyperparameters,
    batch_size: usize,
    seed: u64,
) -> Result<TrainReport> {
    hp.validate()?;
    model.check()?;
    check_problem(&model, x1, x2, labels)?;

    let n = x1.samples();
    let initial_objective = total_objective(&model, x1, x2, labels, hp)?;
    let initial_model = model.clone();
    let mut report = TrainReport {
        iterations_run: 0,
        initial_objective,
        objective_trace: Vec::new(),
        weight_trace: Vec::new(),
        converged: false,
        initial_model,
        final_model: model,
    };
    if !initial_objective.total.is_finite() {
        return Err(CimdlError::Diverged {
            iteration: 0,
            value: initial_objective.total,
        });
    }

    let mut batch_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6261_7463_6865_7321);
    let mut previous = initial_objective.total;
    let mut model = report.final_model.clone();
    for iteration in 1..=hp.max_iters {
        let (bx1, bx2, bl);
        let (x1a, x2a, la) = if batch_size > 0 && batch_size < n {
            let mut cols = sample(&mut batch_rng, n, batch_size).into_vec();
            cols.sort_unstable();
            bx1 = x1.select_columns(&cols);
            bx2 = x2.select_columns(&cols);
            bl = labels.select_columns(&cols);
            (bx1.as_array(), bx2.as_array(), bl.as_array())
        } else {
            (x1.as_array(), x2.as_array(), labels.as_array())
        };

        model = step_projections_unchecked(&model, x1a, x2a, la, hp);
        model = step_classifier_unchecked(&model, x1a, x2a, la, hp);
        if hp.weight_mode != WeightMode::Fixed {
            let r = block_residuals_unchecked(&model, x1a, x2a, la, hp.p);
            model.c = weights_from_residuals(r, hp.weight_mode)?;
        }

        let obj = total_objective(&model, x1, x2, labels, hp)?;
        if !obj.total.is_finite() {
            return Err(CimdlError::Diverged {
                iteration,
                value: obj.total,
            });
        }
        report.objective_trace.push(obj);
        report.weight_trace.push(model.c);
        report.iterations_run = iteration;

        let change = (obj.total - previous).abs() / previous.abs().max(1.0);
        previous = obj.total;
        if change < hp.tol {
            report.converged = true;
            break;
        }
    }
    report.final_model = model;
    Ok(report)
}
