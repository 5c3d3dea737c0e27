//! Loss terms, the total training objective and its analytic gradients.
//!
//! The objective is
//!
//! ```text
//! J = ‖V1X1 − V2X2‖²
//!   + Σi αi ‖Xi − ViᵀViXi − QiᵀQiXi‖²
//!   + Σi σi ‖ViᵀQi‖²
//!   + Σi δi Σ g(ViXi) + θi Σ g(QiXi)          g(x) = log cosh x
//!   + μ CE(softmax(Z), L)
//!   + η ‖[W1 W2 W3]‖₂,₁
//! ```
//!
//! Gradients are derived from this exact expression and are checked against
//! central finite differences in the tests.

use ndarray::{s, Array2, Zip};

use crate::error::{CimdlError, Result};
use crate::model::{
    column_norms, fused_blocks, softmax_columns, weighted_logits, FeatureBatch, FusionModel,
    Hyperparameters, LabelMatrix, ProjectionPair,
};

/// Regularizer for the L2,1 reweighting `1 / (2‖w‖ + ε)`.
pub const L21_EPS: f64 = 1e-8;

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-300;

/// Every term of the objective at one model state.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ObjectiveBreakdown {
    pub correlation: f64,
    pub reconstruction: [f64; 2],
    pub orthogonality: [f64; 2],
    pub smooth_l1_corr: [f64; 2],
    pub smooth_l1_ind: [f64; 2],
    pub softmax_ce: f64,
    pub l21: f64,
    pub total: f64,
}

impl ObjectiveBreakdown {
    /// Recomputes the weighted total from the unweighted parts.
    pub fn weighted_sum(&self, hp: &Hyperparameters) -> f64 {
        let mut total = self.correlation;
        for i in 0..2 {
            total += hp.alpha[i] * self.reconstruction[i]
                + hp.sigma[i] * self.orthogonality[i]
                + hp.delta[i] * self.smooth_l1_corr[i]
                + hp.theta[i] * self.smooth_l1_ind[i];
        }
        total + hp.mu * self.softmax_ce + hp.eta * self.l21
    }
}

fn sq_norm(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum()
}

fn check_product(a: &Array2<f64>, x: &Array2<f64>, what: &str) -> Result<()> {
    if a.ncols() != x.nrows() {
        return Err(CimdlError::shape(format!(
            "{what}: {:?} times {:?} is not defined",
            a.dim(),
            x.dim()
        )));
    }
    Ok(())
}

/// `‖V1 X1 − V2 X2‖_F²`.
pub fn correlation_loss(
    v1: &Array2<f64>,
    x1: &Array2<f64>,
    v2: &Array2<f64>,
    x2: &Array2<f64>,
) -> Result<f64> {
    check_product(v1, x1, "correlation loss")?;
    check_product(v2, x2, "correlation loss")?;
    if v1.nrows() != v2.nrows() || x1.ncols() != x2.ncols() {
        return Err(CimdlError::shape(format!(
            "correlation loss: V1X1 is {}x{}, V2X2 is {}x{}",
            v1.nrows(),
            x1.ncols(),
            v2.nrows(),
            x2.ncols()
        )));
    }
    Ok(sq_norm(&(v1.dot(x1) - v2.dot(x2))))
}

fn residual(pair: &ProjectionPair, x: &Array2<f64>) -> Array2<f64> {
    let vx = pair.v.dot(x);
    let qx = pair.q.dot(x);
    x - &pair.v.t().dot(&vx) - &pair.q.t().dot(&qx)
}

/// `‖X − VᵀVX − QᵀQX‖_F²`.
pub fn reconstruction_residual(pair: &ProjectionPair, x: &FeatureBatch) -> Result<f64> {
    check_product(&pair.v, x.as_array(), "reconstruction residual")?;
    Ok(sq_norm(&residual(pair, x.as_array())))
}

/// `‖VᵀQ‖_F²`.
pub fn orthogonality_penalty(pair: &ProjectionPair) -> Result<f64> {
    pair.check()?;
    Ok(sq_norm(&pair.v.t().dot(&pair.q)))
}

/// `log(cosh(x))`, evaluated without overflow.
pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    x.tanh()
}

pub fn smooth_l1_sum(m: &Array2<f64>) -> f64 {
    m.iter().map(|&v| smooth_l1(v)).sum()
}

/// Sum of the Euclidean norms of the columns.
pub fn l21_norm(w: &Array2<f64>) -> f64 {
    column_norms(w).sum()
}

/// Summed (not averaged) cross-entropy between column probabilities and one-hot labels.
pub fn cross_entropy(p: &Array2<f64>, labels: &LabelMatrix) -> Result<f64> {
    let l = labels.as_array();
    if p.dim() != l.dim() {
        return Err(CimdlError::shape(format!(
            "cross entropy: probabilities {:?} vs labels {:?}",
            p.dim(),
            l.dim()
        )));
    }
    let mut acc = 0.0;
    Zip::from(p).and(l).for_each(|&pk, &lk| {
        if lk != 0.0 {
            acc -= lk * pk.max(PROB_FLOOR).ln();
        }
    });
    Ok(acc)
}

pub(crate) fn check_problem(
    model: &FusionModel,
    x1: &FeatureBatch,
    x2: &FeatureBatch,
    labels: &LabelMatrix,
) -> Result<()> {
    let m = model.dim();
    if x1.dim() != m || x2.dim() != m {
        return Err(CimdlError::shape(format!(
            "model dimension {m} does not match features ({} and {})",
            x1.dim(),
            x2.dim()
        )));
    }
    let n = x1.samples();
    if x2.samples() != n || labels.samples() != n {
        return Err(CimdlError::shape(format!(
            "sample counts differ: X1 {n}, X2 {}, labels {}",
            x2.samples(),
            labels.samples()
        )));
    }
    if labels.classes() != model.classes() {
        return Err(CimdlError::shape(format!(
            "label matrix has {} classes, model has {}",
            labels.classes(),
            model.classes()
        )));
    }
    Ok(())
}

pub fn total_objective(
    model: &FusionModel,
    x1: &FeatureBatch,
    x2: &FeatureBatch,
    labels: &LabelMatrix,
    hp: &Hyperparameters,
) -> Result<ObjectiveBreakdown> {
    check_problem(model, x1, x2, labels)?;
    let xs = [x1.as_array(), x2.as_array()];
    let mut b = ObjectiveBreakdown::default();

    let vx: Vec<Array2<f64>> = (0..2).map(|i| model.pairs[i].v.dot(xs[i])).collect();
    let qx: Vec<Array2<f64>> = (0..2).map(|i| model.pairs[i].q.dot(xs[i])).collect();
    b.correlation = sq_norm(&(&vx[0] - &vx[1]));
    for i in 0..2 {
        let pair = &model.pairs[i];
        let r = xs[i] - &pair.v.t().dot(&vx[i]) - &pair.q.t().dot(&qx[i]);
        b.reconstruction[i] = sq_norm(&r);
        b.orthogonality[i] = sq_norm(&pair.v.t().dot(&pair.q));
        b.smooth_l1_corr[i] = smooth_l1_sum(&vx[i]);
        b.smooth_l1_ind[i] = smooth_l1_sum(&qx[i]);
    }
    let fc = (&vx[0] + &vx[1]) * 0.5;
    let z = weighted_logits(model, [fc.view(), qx[0].view(), qx[1].view()]);
    b.softmax_ce = cross_entropy(&softmax_columns(&z), labels)?;
    b.l21 = model.w.iter().map(l21_norm).sum();
    b.total = b.weighted_sum(hp);
    Ok(b)
}

/// Analytic gradients for every parameter block at one model state.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub v: [Array2<f64>; 2],
    pub q: [Array2<f64>; 2],
    pub w: [Array2<f64>; 3],
}

impl Gradients {
    pub fn stacked_w(&self) -> Array2<f64> {
        ndarray::concatenate(
            ndarray::Axis(1),
            &[self.w[0].view(), self.w[1].view(), self.w[2].view()],
        )
        .expect("blocks share row count")
    }
}

/// Gradient of the total objective with respect to every block.
pub fn gradients(
    model: &FusionModel,
    x1: &FeatureBatch,
    x2: &FeatureBatch,
    labels: &LabelMatrix,
    hp: &Hyperparameters,
) -> Result<Gradients> {
    check_problem(model, x1, x2, labels)?;
    Ok(gradients_unchecked(
        model,
        x1.as_array(),
        x2.as_array(),
        labels.as_array(),
        hp,
    ))
}

pub(crate) fn gradients_unchecked(
    model: &FusionModel,
    x1: &Array2<f64>,
    x2: &Array2<f64>,
    l: &Array2<f64>,
    hp: &Hyperparameters,
) -> Gradients {
    let xs = [x1, x2];
    let c = model.c;
    let vx: Vec<Array2<f64>> = (0..2).map(|i| model.pairs[i].v.dot(xs[i])).collect();
    let qx: Vec<Array2<f64>> = (0..2).map(|i| model.pairs[i].q.dot(xs[i])).collect();

    // dJ/dZ for the cross-entropy term
    let (fc, f1, f2) = fused_blocks(model, x1, x2);
    let z = weighted_logits(model, [fc.view(), f1.view(), f2.view()]);
    let g = (softmax_columns(&z) - l) * hp.mu;

    let diff = &vx[0] - &vx[1];
    let mut gv: Vec<Array2<f64>> = Vec::with_capacity(2);
    let mut gq: Vec<Array2<f64>> = Vec::with_capacity(2);
    for i in 0..2 {
        let pair = &model.pairs[i];
        let x = xs[i];
        let xt = x.t();
        let r = x - &pair.v.t().dot(&vx[i]) - &pair.q.t().dot(&qx[i]);
        let rxt = r.dot(&xt);
        let xrt = x.dot(&r.t());

        let sign = if i == 0 { 2.0 } else { -2.0 };
        let mut dv = diff.dot(&xt) * sign;
        dv -= &((pair.v.dot(&xrt) + pair.v.dot(&rxt)) * (2.0 * hp.alpha[i]));
        dv += &(pair.q.dot(&pair.q.t()).dot(&pair.v) * (2.0 * hp.sigma[i]));
        dv += &(vx[i].mapv(smooth_l1_grad).dot(&xt) * hp.delta[i]);
        dv += &(model.w[0].t().dot(&g).dot(&xt) * (0.5 * c[0]));

        let mut dq = (pair.q.dot(&xrt) + pair.q.dot(&rxt)) * (-2.0 * hp.alpha[i]);
        dq += &(pair.v.dot(&pair.v.t()).dot(&pair.q) * (2.0 * hp.sigma[i]));
        dq += &(qx[i].mapv(smooth_l1_grad).dot(&xt) * hp.theta[i]);
        dq += &(model.w[i + 1].t().dot(&g).dot(&xt) * c[i + 1]);

        gv.push(dv);
        gq.push(dq);
    }

    let blocks = [&fc, &f1, &f2];
    let gw: Vec<Array2<f64>> = (0..3)
        .map(|k| {
            let mut dw = g.dot(&blocks[k].t()) * c[k];
            dw += &l21_gradient(&model.w[k], hp.eta);
            dw
        })
        .collect();

    let [v0, v1]: [Array2<f64>; 2] = gv.try_into().expect("two modalities");
    let [q0, q1]: [Array2<f64>; 2] = gq.try_into().expect("two modalities");
    let [w0, w1, w2]: [Array2<f64>; 3] = gw.try_into().expect("three blocks");
    Gradients {
        v: [v0, v1],
        q: [q0, q1],
        w: [w0, w1, w2],
    }
}

/// `2η E W` with `E = diag(1 / (2‖w_j‖ + ε))`.
fn l21_gradient(w: &Array2<f64>, eta: f64) -> Array2<f64> {
    let norms = column_norms(w);
    let mut out = w.clone();
    for (mut col, n) in out.columns_mut().into_iter().zip(norms) {
        col *= 2.0 * eta / (2.0 * n + L21_EPS);
    }
    out
}

fn check_modality(which: usize) -> Result<()> {
    if which > 1 {
        return Err(CimdlError::invalid(format!(
            "modality index must be 0 or 1, got {which}"
        )));
    }
    Ok(())
}

/// Gradient with respect to `V` of modality `which` (0 or 1).
pub fn grad_v(
    model: &FusionModel,
    x1: &FeatureBatch,
    x2: &FeatureBatch,
    labels: &LabelMatrix,
    hp: &Hyperparameters,
    which: usize,
) -> Result<Array2<f64>> {
    check_modality(which)?;
    let mut g = gradients(model, x1, x2, labels, hp)?;
    Ok(std::mem::take(&mut g.v[which]))
}

/// Gradient with respect to `Q` of modality `which` (0 or 1).
pub fn grad_q(
    model: &FusionModel,
    x1: &FeatureBatch,
    x2: &FeatureBatch,
    labels: &LabelMatrix,
    hp: &Hyperparameters,
    which: usize,
) -> Result<Array2<f64>> {
    check_modality(which)?;
    let mut g = gradients(model, x1, x2, labels, hp)?;
    Ok(std::mem::take(&mut g.q[which]))
}

/// Gradient with respect to the stacked classifier `[W1 W2 W3]` (`l x 3M`).
pub fn grad_w(
    model: &FusionModel,
    x1: &FeatureBatch,
    x2: &FeatureBatch,
    labels: &LabelMatrix,
    hp: &Hyperparameters,
) -> Result<Array2<f64>> {
    Ok(gradients(model, x1, x2, labels, hp)?.stacked_w())
}

/// Central differences `(f(θ + h e) − f(θ − h e)) / 2h` for every coordinate.
pub fn finite_difference_gradient<F>(f: F, theta: &Array2<f64>, h: f64) -> Array2<f64>
where
    F: Fn(&Array2<f64>) -> f64,
{
    assert!(h > 0.0, "step must be positive");
    let mut probe = theta.clone();
    let mut out = Array2::zeros(theta.dim());
    for idx in ndarray::indices(theta.dim()) {
        let orig = theta[idx];
        probe[idx] = orig + h;
        let plus = f(&probe);
        probe[idx] = orig - h;
        let minus = f(&probe);
        probe[idx] = orig;
        out[idx] = (plus - minus) / (2.0 * h);
    }
    out
}

/// A parameter block of the fusion model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    V(usize),
    Q(usize),
    W,
}

impl Block {
    pub const ALL: [Block; 5] = [Block::V(0), Block::V(1), Block::Q(0), Block::Q(1), Block::W];

    pub fn name(self) -> &'static str {
        match self {
            Block::V(0) => "V1",
            Block::V(_) => "V2",
            Block::Q(0) => "Q1",
            Block::Q(_) => "Q2",
            Block::W => "W",
        }
    }

    pub fn get(self, model: &FusionModel) -> Array2<f64> {
        match self {
            Block::V(i) => model.pairs[i].v.clone(),
            Block::Q(i) => model.pairs[i].q.clone(),
            Block::W => model.stacked_w(),
        }
    }

    pub fn set(self, model: &mut FusionModel, value: &Array2<f64>) {
        match self {
            Block::V(i) => model.pairs[i].v.assign(value),
            Block::Q(i) => model.pairs[i].q.assign(value),
            Block::W => model.set_stacked_w(value),
        }
    }

    pub fn gradient(self, g: &Gradients) -> Array2<f64> {
        match self {
            Block::V(i) => g.v[i].clone(),
            Block::Q(i) => g.q[i].clone(),
            Block::W => g.stacked_w(),
        }
    }
}

/// `max|a − b| / max(‖a‖∞, ‖b‖∞)`, or the absolute gap when both are ~0.
pub fn relative_max_error(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
    let gap = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(0.0, f64::max);
    if scale < 1e-12 {
        gap
    } else {
        gap / scale
    }
}

/// Finite-difference gradient of the total objective for one block.
pub fn numeric_block_gradient(
    model: &FusionModel,
    x1: &FeatureBatch,
    x2: &FeatureBatch,
    labels: &LabelMatrix,
    hp: &Hyperparameters,
    block: Block,
    h: f64,
) -> Result<Array2<f64>> {
    check_problem(model, x1, x2, labels)?;
    let theta = block.get(model);
    let mut probe = model.clone();
    let f = |value: &Array2<f64>| {
        let mut m = probe.clone();
        block.set(&mut m, value);
        total_objective(&m, x1, x2, labels, hp)
            .expect("shapes checked")
            .total
    };
    let out = finite_difference_gradient(f, &theta, h);
    block.set(&mut probe, &theta);
    Ok(out)
}

/// Analytic-vs-numeric relative error for each of the five blocks.
pub fn gradient_check(
    model: &FusionModel,
    x1: &FeatureBatch,
    x2: &FeatureBatch,
    labels: &LabelMatrix,
    hp: &Hyperparameters,
    h: f64,
) -> Result<Vec<(Block, f64)>> {
    let g = gradients(model, x1, x2, labels, hp)?;
    Block::ALL
        .iter()
        .map(|&b| {
            let numeric = numeric_block_gradient(model, x1, x2, labels, hp, b, h)?;
            Ok((b, relative_max_error(&b.gradient(&g), &numeric)))
        })
        .collect()
}

/// A random problem with every objective term active, for gradient checks.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckInstance {
    pub model: FusionModel,
    pub x1: FeatureBatch,
    pub x2: FeatureBatch,
    pub labels: LabelMatrix,
    pub hp: Hyperparameters,
}

impl CheckInstance {
    /// Entries of `V`, `Q`, `W`, `X` uniform in `[-1, 1]`, multipliers uniform
    /// in `[0.1, 1]`, block weights a random point of the simplex.
    pub fn random(m: usize, n: usize, l: usize, seed: u64) -> Result<Self> {
        use rand::{Rng, SeedableRng};

        if m == 0 || n == 0 || l < 2 {
            return Err(CimdlError::invalid(format!(
                "gradient check needs M >= 1, N >= 1, l >= 2 (got {m}, {n}, {l})"
            )));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut mat =
            |r: usize, c: usize| Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..=1.0));
        let pairs = [
            ProjectionPair::new(mat(m, m), mat(m, m))?,
            ProjectionPair::new(mat(m, m), mat(m, m))?,
        ];
        let w = [mat(l, m), mat(l, m), mat(l, m)];
        let x1 = FeatureBatch::new(mat(m, n))?;
        let x2 = FeatureBatch::new(mat(m, n))?;
        let raw: [f64; 3] = [0; 3].map(|_| rng.random_range(0.1..1.0));
        let sum: f64 = raw.iter().sum();
        let c = [raw[0] / sum, raw[1] / sum, raw[2] / sum];
        let mut lab = Array2::zeros((l, n));
        for j in 0..n {
            lab[[rng.random_range(0..l), j]] = 1.0;
        }
        let mut u = || rng.random_range(0.1..=1.0);
        let hp = Hyperparameters {
            alpha: [u(), u()],
            sigma: [u(), u()],
            delta: [u(), u()],
            theta: [u(), u()],
            mu: u(),
            eta: u(),
            lr_w: 0.0,
            lr_vq: 0.0,
            p: 1.0,
            max_iters: 0,
            tol: 1e-6,
            weight_mode: crate::model::WeightMode::Fixed,
            seed,
        };
        Ok(CheckInstance {
            model: FusionModel::new(pairs, w, c)?,
            x1,
            x2,
            labels: LabelMatrix::new(lab)?,
            hp,
        })
    }

    pub fn check(&self, h: f64) -> Result<Vec<(Block, f64)>> {
        gradient_check(&self.model, &self.x1, &self.x2, &self.labels, &self.hp, h)
    }
}

/// View of the correlated / modality-specific columns of a stacked classifier.
pub fn w_block(stacked: &Array2<f64>, m: usize, k: usize) -> Array2<f64> {
    stacked.slice(s![.., k * m..(k + 1) * m]).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ProjectionPair, WeightMode};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    fn zero_hp() -> Hyperparameters {
        Hyperparameters {
            alpha: [0.0; 2],
            sigma: [0.0; 2],
            delta: [0.0; 2],
            theta: [0.0; 2],
            mu: 0.0,
            eta: 0.0,
            lr_w: 0.0,
            lr_vq: 0.0,
            p: 1.0,
            max_iters: 0,
            tol: 1e-6,
            weight_mode: WeightMode::Fixed,
            seed: 0,
        }
    }

    fn random_hp(rng: &mut ChaCha8Rng) -> Hyperparameters {
        let mut u = || rng.random_range(0.1..1.0);
        Hyperparameters {
            alpha: [u(), u()],
            sigma: [u(), u()],
            delta: [u(), u()],
            theta: [u(), u()],
            mu: u(),
            eta: u(),
            ..zero_hp()
        }
    }

    struct Instance {
        model: FusionModel,
        x1: FeatureBatch,
        x2: FeatureBatch,
        labels: LabelMatrix,
    }

    fn instance(seed: u64, m: usize, n: usize, l: usize) -> Instance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs = [
            ProjectionPair::new(random(&mut rng, m, m), random(&mut rng, m, m)).unwrap(),
            ProjectionPair::new(random(&mut rng, m, m), random(&mut rng, m, m)).unwrap(),
        ];
        let w = [
            random(&mut rng, l, m),
            random(&mut rng, l, m),
            random(&mut rng, l, m),
        ];
        let raw = [
            rng.random_range(0.1..1.0),
            rng.random_range(0.1..1.0),
            rng.random_range(0.1..1.0),
        ];
        let s: f64 = raw.iter().sum();
        let c = [raw[0] / s, raw[1] / s, 1.0 - raw[0] / s - raw[1] / s];
        let model = FusionModel::new(pairs, w, c).unwrap();
        let mut lab = Array2::zeros((l, n));
        for j in 0..n {
            lab[[rng.random_range(0..l), j]] = 1.0;
        }
        Instance {
            model,
            x1: FeatureBatch::new(random(&mut rng, m, n)).unwrap(),
            x2: FeatureBatch::new(random(&mut rng, m, n)).unwrap(),
            labels: LabelMatrix::new(lab).unwrap(),
        }
    }

    #[test]
    fn correlation_loss_cases() {
        let x = array![[1.0, 2.0], [0.5, -1.0]];
        let i2 = Array2::eye(2);
        assert_eq!(correlation_loss(&i2, &x, &i2, &x).unwrap(), 0.0);
        let z = Array2::zeros((2, 2));
        assert_eq!(correlation_loss(&i2, &i2, &z, &i2).unwrap(), 2.0);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (v1, v2) = (random(&mut rng, 3, 3), random(&mut rng, 3, 3));
        let (x1, x2) = (random(&mut rng, 3, 4), random(&mut rng, 3, 4));
        let mut oracle = 0.0;
        for r in 0..3 {
            for n in 0..4 {
                let mut d = 0.0;
                for k in 0..3 {
                    d += v1[[r, k]] * x1[[k, n]] - v2[[r, k]] * x2[[k, n]];
                }
                oracle += d * d;
            }
        }
        let got = correlation_loss(&v1, &x1, &v2, &x2).unwrap();
        assert!((got - oracle).abs() < 1e-12 * oracle.max(1.0));
        assert!(correlation_loss(&v1, &random(&mut rng, 2, 4), &v2, &x2).is_err());
    }

    #[test]
    fn reconstruction_cases() {
        let x = FeatureBatch::new(array![[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let p = ProjectionPair::new(Array2::eye(2), Array2::zeros((2, 2))).unwrap();
        assert_eq!(reconstruction_residual(&p, &x).unwrap(), 0.0);

        let eye = FeatureBatch::new(Array2::eye(2)).unwrap();
        let p = ProjectionPair::new(Array2::zeros((2, 2)), Array2::zeros((2, 2))).unwrap();
        assert_eq!(reconstruction_residual(&p, &eye).unwrap(), 2.0);

        let p = ProjectionPair::new(
            array![[1.0, 0.0], [0.0, 0.0]],
            array![[0.0, 0.0], [0.0, 1.0]],
        )
        .unwrap();
        assert_eq!(reconstruction_residual(&p, &x).unwrap(), 0.0);
    }

    #[test]
    fn orthogonality_cases() {
        let p = ProjectionPair::new(
            array![[1.0, 0.0], [0.0, 0.0]],
            array![[0.0, 0.0], [0.0, 1.0]],
        )
        .unwrap();
        assert_eq!(orthogonality_penalty(&p).unwrap(), 0.0);
        let p = ProjectionPair::new(Array2::eye(2), Array2::eye(2)).unwrap();
        assert_eq!(orthogonality_penalty(&p).unwrap(), 2.0);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (v, q) = (random(&mut rng, 3, 3), random(&mut rng, 3, 3));
        let mut oracle = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| v[[k, i]] * q[[k, j]]).sum();
                oracle += d * d;
            }
        }
        let got = orthogonality_penalty(&ProjectionPair::new(v, q).unwrap()).unwrap();
        assert!((got - oracle).abs() < 1e-12);
    }

    #[test]
    fn smooth_l1_values() {
        assert_eq!(smooth_l1(0.0), 0.0);
        assert_eq!(smooth_l1_grad(0.0), 0.0);
        // log cosh 10 at 30 significant digits
        let g10 = 9.306_852_821_501_208_f64;
        assert!((smooth_l1(10.0) - g10).abs() < 1e-14);
        assert!((smooth_l1_sum(&array![[10.0]]) - g10).abs() < 1e-14);
        assert_eq!(smooth_l1_sum(&Array2::zeros((3, 3))), 0.0);
        for x in [0.1, 0.7, 2.5, 33.0, 800.0] {
            assert_eq!(smooth_l1(-x), smooth_l1(x));
            assert_eq!(smooth_l1_grad(-x), -smooth_l1_grad(x));
            assert!((smooth_l1(x) - x.cosh().ln()).abs() < 1e-12 || x > 700.0);
        }
        assert!(smooth_l1(800.0).is_finite());
    }

    #[test]
    fn smooth_l1_sum_is_entrywise() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = random(&mut rng, 3, 3) * 4.0;
        let manual: f64 = m.iter().map(|&v| smooth_l1(v)).sum();
        assert_eq!(smooth_l1_sum(&m), manual);
    }

    #[test]
    fn l21_cases() {
        assert_eq!(l21_norm(&Array2::zeros((2, 3))), 0.0);
        assert_eq!(l21_norm(&Array2::eye(2)), 2.0);
        assert_eq!(l21_norm(&array![[3.0], [4.0]]), 5.0);
    }

    #[test]
    fn cross_entropy_cases() {
        let l = LabelMatrix::new(array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert!(cross_entropy(l.as_array(), &l).unwrap().abs() < 1e-15);

        let l = LabelMatrix::new(array![
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0],
            [0.0, 0.0, 1.0]
        ])
        .unwrap();
        let p = Array2::from_elem((4, 3), 0.25);
        assert!((cross_entropy(&p, &l).unwrap() - 4.1588830833596715).abs() < 1e-12);

        let zero_p = Array2::zeros((4, 3));
        assert!(cross_entropy(&zero_p, &l).unwrap().is_finite());
        assert!(cross_entropy(&Array2::zeros((3, 3)), &l).is_err());
    }

    #[test]
    fn total_objective_zero_model_is_pure_ce() {
        let (m, n, l) = (3, 5, 2);
        let zero = || ProjectionPair::new(Array2::zeros((m, m)), Array2::zeros((m, m))).unwrap();
        let w = [
            Array2::zeros((l, m)),
            Array2::zeros((l, m)),
            Array2::zeros((l, m)),
        ];
        let model = FusionModel::new([zero(), zero()], w, [0.2, 0.3, 0.5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x1 = FeatureBatch::new(random(&mut rng, m, n)).unwrap();
        let x2 = FeatureBatch::new(random(&mut rng, m, n)).unwrap();
        let labels =
            LabelMatrix::new(array![[1.0, 0.0, 1.0, 1.0, 0.0], [0.0, 1.0, 0.0, 0.0, 1.0]]).unwrap();
        let hp = Hyperparameters {
            mu: 0.7,
            ..zero_hp()
        };
        let b = total_objective(&model, &x1, &x2, &labels, &hp).unwrap();
        assert!((b.total - 0.7 * 5.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn total_objective_split_identity_equal_inputs() {
        let m = 4;
        let mask = |lo: bool| {
            Array2::from_diag(&ndarray::Array1::from_shape_fn(m, |i| {
                if (i < 2) == lo {
                    1.0
                } else {
                    0.0
                }
            }))
        };
        let pair = || ProjectionPair::new(mask(true), mask(false)).unwrap();
        let w = [
            Array2::zeros((3, m)),
            Array2::zeros((3, m)),
            Array2::zeros((3, m)),
        ];
        let model =
            FusionModel::new([pair(), pair()], w, [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = FeatureBatch::new(random(&mut rng, m, 6)).unwrap();
        let mut lab = Array2::zeros((3, 6));
        for j in 0..6 {
            lab[[j % 3, j]] = 1.0;
        }
        let labels = LabelMatrix::new(lab).unwrap();
        let hp = random_hp(&mut rng);
        let b = total_objective(&model, &x, &x, &labels, &hp).unwrap();
        assert_eq!(b.reconstruction, [0.0, 0.0]);
        assert_eq!(b.correlation, 0.0);
        assert_eq!(b.orthogonality, [0.0, 0.0]);
    }

    #[test]
    fn total_objective_matches_scalar_oracle() {
        let inst = instance(21, 4, 6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let hp = random_hp(&mut rng);
        let b = total_objective(&inst.model, &inst.x1, &inst.x2, &inst.labels, &hp).unwrap();

        // Independent scalar re-implementation of every term.
        let (m, n, l) = (4, 6, 3);
        let mm = &inst.model;
        let xs = [inst.x1.as_array(), inst.x2.as_array()];
        let mul = |a: &Array2<f64>, b: &Array2<f64>| {
            Array2::from_shape_fn((a.nrows(), b.ncols()), |(i, j)| {
                (0..a.ncols()).map(|k| a[[i, k]] * b[[k, j]]).sum::<f64>()
            })
        };
        let tr =
            |a: &Array2<f64>| Array2::from_shape_fn((a.ncols(), a.nrows()), |(i, j)| a[[j, i]]);
        let sq = |a: &Array2<f64>| a.iter().map(|v| v * v).sum::<f64>();
        let lc = |x: f64| x.cosh().ln();
        let mut total = 0.0;
        let vx = [mul(&mm.pairs[0].v, xs[0]), mul(&mm.pairs[1].v, xs[1])];
        let qx = [mul(&mm.pairs[0].q, xs[0]), mul(&mm.pairs[1].q, xs[1])];
        for r in 0..m {
            for j in 0..n {
                total += (vx[0][[r, j]] - vx[1][[r, j]]).powi(2);
            }
        }
        for i in 0..2 {
            let v = &mm.pairs[i].v;
            let q = &mm.pairs[i].q;
            let rec = xs[i] - &mul(&tr(v), &vx[i]) - &mul(&tr(q), &qx[i]);
            total += hp.alpha[i] * sq(&rec);
            total += hp.sigma[i] * sq(&mul(&tr(v), q));
            total += hp.delta[i] * vx[i].iter().map(|&v| lc(v)).sum::<f64>();
            total += hp.theta[i] * qx[i].iter().map(|&v| lc(v)).sum::<f64>();
        }
        let blocks = [(&vx[0] + &vx[1]) / 2.0, qx[0].clone(), qx[1].clone()];
        for j in 0..n {
            let mut z = vec![0.0; l];
            for (k, zk) in z.iter_mut().enumerate() {
                for b in 0..3 {
                    for r in 0..m {
                        *zk += mm.c[b] * mm.w[b][[k, r]] * blocks[b][[r, j]];
                    }
                }
            }
            let denom: f64 = z.iter().map(|v| v.exp()).sum();
            let y = (0..l)
                .find(|&k| inst.labels.as_array()[[k, j]] == 1.0)
                .unwrap();
            total -= hp.mu * (z[y].exp() / denom).ln();
        }
        for b in 0..3 {
            for col in 0..m {
                total += hp.eta
                    * (0..l)
                        .map(|k| mm.w[b][[k, col]].powi(2))
                        .sum::<f64>()
                        .sqrt();
            }
        }
        assert!((b.total - total).abs() < 1e-10 * total.abs());
        assert!((b.weighted_sum(&hp) - b.total).abs() <= 1e-9 * b.total.abs());
    }

    #[test]
    fn doubling_alpha_adds_reconstruction() {
        let inst = instance(30, 3, 5, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let hp = random_hp(&mut rng);
        let base = total_objective(&inst.model, &inst.x1, &inst.x2, &inst.labels, &hp).unwrap();
        let doubled = Hyperparameters {
            alpha: [2.0 * hp.alpha[0], hp.alpha[1]],
            ..hp.clone()
        };
        let b2 = total_objective(&inst.model, &inst.x1, &inst.x2, &inst.labels, &doubled).unwrap();
        let expected = base.total + hp.alpha[0] * base.reconstruction[0];
        assert!((b2.total - expected).abs() < 1e-12 * expected.abs());
    }

    #[test]
    fn finite_difference_basics() {
        let theta = Array2::<f64>::eye(2);
        let g = finite_difference_gradient(|t| t.iter().map(|v| v * v).sum(), &theta, 1e-6);
        for (a, b) in g.iter().zip((&theta * 2.0).iter()) {
            assert!((a - b).abs() < 1e-8);
        }
        let g = finite_difference_gradient(|_| 3.5, &theta, 1e-6);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let mut seed = 100;
        for &m in &[3, 8] {
            for &n in &[5, 12] {
                for &l in &[2, 3] {
                    seed += 1;
                    let inst = instance(seed, m, n, l);
                    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
                    let hp = random_hp(&mut rng);
                    let errs =
                        gradient_check(&inst.model, &inst.x1, &inst.x2, &inst.labels, &hp, 1e-6)
                            .unwrap();
                    for (b, e) in errs {
                        assert!(e < 1e-5, "block {} seed {seed}: rel error {e}", b.name());
                    }
                }
            }
        }
    }

    #[test]
    fn correlation_only_gradients() {
        // V1X1 = V2X2 makes the correlation term stationary.
        let mut inst = instance(40, 3, 5, 2);
        inst.x2 = inst.x1.clone();
        inst.model.pairs[1].v = inst.model.pairs[0].v.clone();
        let hp = zero_hp();
        let g = gradients(&inst.model, &inst.x1, &inst.x2, &inst.labels, &hp).unwrap();
        assert!(g.v[0].iter().all(|v| v.abs() < 1e-14));
        assert!(g.v[1].iter().all(|v| v.abs() < 1e-14));

        // with X1 = X2 the two correlation gradients cancel
        let mut inst = instance(41, 3, 5, 2);
        inst.x2 = inst.x1.clone();
        let g = gradients(&inst.model, &inst.x1, &inst.x2, &inst.labels, &hp).unwrap();
        let sum = &g.v[0] + &g.v[1];
        assert!(sum.iter().all(|v| v.abs() < 1e-12));
        assert!(g.v[0].iter().any(|v| v.abs() > 1e-6));
    }

    #[test]
    fn q_gradient_zero_cases() {
        let mut inst = instance(50, 3, 5, 2);
        for p in inst.model.pairs.iter_mut() {
            p.v = Array2::eye(3);
            p.q = Array2::zeros((3, 3));
        }
        let hp = Hyperparameters {
            alpha: [0.8, 0.4],
            ..zero_hp()
        };
        let g = gradients(&inst.model, &inst.x1, &inst.x2, &inst.labels, &hp).unwrap();
        assert!(g.q[0].iter().chain(g.q[1].iter()).all(|v| v.abs() < 1e-14));

        let mut inst = instance(51, 3, 5, 2);
        for p in inst.model.pairs.iter_mut() {
            p.v = Array2::zeros((3, 3));
        }
        let hp = Hyperparameters {
            sigma: [0.8, 0.4],
            ..zero_hp()
        };
        let g = gradients(&inst.model, &inst.x1, &inst.x2, &inst.labels, &hp).unwrap();
        assert!(g.q[0].iter().chain(g.q[1].iter()).all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn w_gradient_at_zero_is_uniform_residual() {
        let mut inst = instance(60, 3, 6, 3);
        for w in inst.model.w.iter_mut() {
            w.fill(0.0);
        }
        let hp = Hyperparameters {
            mu: 0.9,
            ..zero_hp()
        };
        let gw = grad_w(&inst.model, &inst.x1, &inst.x2, &inst.labels, &hp).unwrap();
        let t = crate::model::fused_activation(&inst.model, &inst.x1, &inst.x2).unwrap();
        let resid = (Array2::from_elem((3, 6), 1.0 / 3.0) - inst.labels.as_array()) * 0.9;
        for k in 0..3 {
            let expected = resid.dot(&t.block(k).t()) * inst.model.c[k];
            let got = w_block(&gw, 3, k);
            assert!(got
                .iter()
                .zip(&expected)
                .all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn w_gradient_l21_unit_columns() {
        let mut inst = instance(61, 2, 4, 2);
        inst.model.w[0] = Array2::eye(2);
        inst.model.w[1] = array![[0.6, 0.0], [0.8, 1.0]];
        inst.model.w[2] = array![[0.0, -1.0], [1.0, 0.0]];
        let hp = Hyperparameters {
            eta: 0.5,
            ..zero_hp()
        };
        let gw = grad_w(&inst.model, &inst.x1, &inst.x2, &inst.labels, &hp).unwrap();
        let expected = inst.model.stacked_w() * 0.5;
        assert!(gw.iter().zip(&expected).all(|(a, b)| (a - b).abs() < 1e-8));
    }

    #[test]
    fn bad_modality_index() {
        let inst = instance(70, 3, 5, 2);
        assert!(grad_v(&inst.model, &inst.x1, &inst.x2, &inst.labels, &zero_hp(), 2).is_err());
        assert!(grad_q(&inst.model, &inst.x1, &inst.x2, &inst.labels, &zero_hp(), 0).is_ok());
    }
}
