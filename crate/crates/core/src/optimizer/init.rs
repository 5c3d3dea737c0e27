use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CimdlError, Result};
use crate::model::{FusionModel, ProjectionPair};

/// Amplitude of the uniform perturbation added by the split-identity scheme.
pub const INIT_NOISE: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    /// `V = diag(1 on the first ⌈M/2⌉ coordinates)`, `Q` the complementary mask,
    /// optionally perturbed by uniform noise in `[-1e-2, 1e-2]`.
    SplitIdentity { noise: bool },
    /// Every `V`, `Q` entry uniform in `[-1/√M, 1/√M]`.
    SeededUniform,
}

impl InitScheme {
    pub fn as_str(self) -> &'static str {
        match self {
            InitScheme::SplitIdentity { noise: true } => "split-identity",
            InitScheme::SplitIdentity { noise: false } => "split-identity-exact",
            InitScheme::SeededUniform => "seeded-uniform",
        }
    }
}

impl Default for InitScheme {
    fn default() -> Self {
        InitScheme::SplitIdentity { noise: true }
    }
}

impl std::str::FromStr for InitScheme {
    type Err = CimdlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "split-identity" => Ok(InitScheme::SplitIdentity { noise: true }),
            "split-identity-exact" => Ok(InitScheme::SplitIdentity { noise: false }),
            "seeded-uniform" => Ok(InitScheme::SeededUniform),
            other => Err(CimdlError::invalid(format!(
                "unknown init scheme {other:?} (expected split-identity, split-identity-exact or seeded-uniform)"
            ))),
        }
    }
}

/// Classifier blocks start at zero and the block weights at `(1/3, 1/3, 1/3)`.
pub fn init_model(m: usize, l: usize, scheme: InitScheme, seed: u64) -> Result<FusionModel> {
    if m < 2 {
        return Err(CimdlError::invalid(format!(
            "feature dimension must be at least 2 to split, got {m}"
        )));
    }
    if l < 2 {
        return Err(CimdlError::invalid(format!(
            "need at least 2 classes, got {l}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pair = |rng: &mut ChaCha8Rng| match scheme {
        InitScheme::SplitIdentity { noise } => {
            let half = m.div_ceil(2);
            let mut v = Array2::zeros((m, m));
            let mut q = Array2::zeros((m, m));
            for i in 0..m {
                if i < half {
                    v[[i, i]] = 1.0;
                } else {
                    q[[i, i]] = 1.0;
                }
            }
            if noise {
                v.mapv_inplace(|x| x + rng.random_range(-INIT_NOISE..=INIT_NOISE));
                q.mapv_inplace(|x| x + rng.random_range(-INIT_NOISE..=INIT_NOISE));
            }
            ProjectionPair { v, q }
        }
        InitScheme::SeededUniform => {
            let b = 1.0 / (m as f64).sqrt();
            let v = Array2::from_shape_fn((m, m), |_| rng.random_range(-b..=b));
            let q = Array2::from_shape_fn((m, m), |_| rng.random_range(-b..=b));
            ProjectionPair { v, q }
        }
    };
    let p1 = pair(&mut rng);
    let p2 = pair(&mut rng);
    let third = 1.0 / 3.0;
    FusionModel::new(
        [p1, p2],
        [
            Array2::zeros((l, m)),
            Array2::zeros((l, m)),
            Array2::zeros((l, m)),
        ],
        [third, third, third],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{frobenius, FeatureBatch};
    use crate::objective::reconstruction_residual;

    #[test]
    fn exact_split_identity_reconstructs() {
        let model = init_model(4, 3, InitScheme::SplitIdentity { noise: false }, 1).unwrap();
        for pair in &model.pairs {
            let s = pair.v.t().dot(&pair.v) + pair.q.t().dot(&pair.q);
            assert_eq!(s, Array2::<f64>::eye(4));
        }
        let x = FeatureBatch::new(Array2::from_shape_fn((4, 5), |(i, j)| {
            (i * 7 + j) as f64 - 3.5
        }))
        .unwrap();
        assert_eq!(reconstruction_residual(&model.pairs[0], &x).unwrap(), 0.0);
    }

    #[test]
    fn odd_dimension_gives_larger_correlated_half() {
        let model = init_model(5, 2, InitScheme::SplitIdentity { noise: false }, 0).unwrap();
        assert_eq!(model.pairs[0].v.diag().sum(), 3.0);
        assert_eq!(model.pairs[0].q.diag().sum(), 2.0);
    }

    #[test]
    fn deterministic_per_seed() {
        for scheme in [InitScheme::default(), InitScheme::SeededUniform] {
            assert_eq!(
                init_model(6, 3, scheme, 9).unwrap(),
                init_model(6, 3, scheme, 9).unwrap()
            );
            assert_ne!(
                init_model(6, 3, scheme, 9).unwrap(),
                init_model(6, 3, scheme, 10).unwrap()
            );
        }
    }

    #[test]
    fn noisy_split_stays_nearly_orthogonal() {
        let m = 8;
        let model = init_model(m, 2, InitScheme::default(), 3).unwrap();
        for pair in &model.pairs {
            assert!(frobenius(&pair.v.t().dot(&pair.q)) <= 3e-2 * m as f64);
        }
    }

    #[test]
    fn seeded_uniform_bounds() {
        let model = init_model(9, 2, InitScheme::SeededUniform, 4).unwrap();
        let b = 1.0 / 3.0;
        assert!(model
            .pairs
            .iter()
            .all(|p| p.v.iter().chain(p.q.iter()).all(|x| x.abs() <= b)));
    }

    #[test]
    fn rejects_tiny_problems() {
        assert!(init_model(1, 3, InitScheme::default(), 0).is_err());
        assert!(init_model(4, 1, InitScheme::default(), 0).is_err());
    }
}
