use crate::error::{CimdlError, Result};
use crate::model::{Hyperparameters, WeightMode};

pub const DEFAULT_MAX_ITERS: usize = 500;
pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_P: f64 = 1.0;

/// Explicit hyperparameter values; `None` means "derive from the data size".
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HyperOverrides {
    pub alpha: [Option<f64>; 2],
    pub sigma: [Option<f64>; 2],
    pub delta: [Option<f64>; 2],
    pub theta: [Option<f64>; 2],
    pub mu: Option<f64>,
    pub eta: Option<f64>,
    pub lr_w: Option<f64>,
    pub lr_vq: Option<f64>,
    pub p: Option<f64>,
    pub max_iters: Option<usize>,
    pub tol: Option<f64>,
    pub weight_mode: Option<WeightMode>,
    pub seed: Option<u64>,
}

/// Fills every unset value with its data-size dependent default:
/// `α = 0.5/N`, `σ = 0.5/M`, `μ = 10/N`, `δ = θ = 0.005/N`, `η = 1`,
/// learning rates `1e-3` (W) and `1e-5` (V, Q).
pub fn resolve_hyperparameters(m: usize, n: usize, o: &HyperOverrides) -> Result<Hyperparameters> {
    if m == 0 || n == 0 {
        return Err(CimdlError::invalid(format!(
            "cannot derive hyperparameters for M={m}, N={n}"
        )));
    }
    let (m, n) = (m as f64, n as f64);
    let pick = |v: Option<f64>, default: f64| v.unwrap_or(default);
    let pair = |v: [Option<f64>; 2], default: f64| [pick(v[0], default), pick(v[1], default)];
    let hp = Hyperparameters {
        alpha: pair(o.alpha, 0.5 / n),
        sigma: pair(o.sigma, 0.5 / m),
        delta: pair(o.delta, 0.005 / n),
        theta: pair(o.theta, 0.005 / n),
        mu: pick(o.mu, 10.0 / n),
        eta: pick(o.eta, 1.0),
        lr_w: pick(o.lr_w, 1e-3),
        lr_vq: pick(o.lr_vq, 1e-5),
        p: pick(o.p, DEFAULT_P),
        max_iters: o.max_iters.unwrap_or(DEFAULT_MAX_ITERS),
        tol: pick(o.tol, DEFAULT_TOL),
        weight_mode: o.weight_mode.unwrap_or(WeightMode::Paper),
        seed: o.seed.unwrap_or(0),
    };
    hp.validate()?;
    Ok(hp)
}
