//! Two-modality Gaussian class-mean benchmark with controlled overlap.
//!
//! Every sample of class `k` is built in a latent space
//!
//! ```text
//! [ shared (K dims) | specific_i (S dims) | zeros (M-K-S dims) ]
//! ```
//!
//! The shared block is `mu_shared[k] + noise_sd * z` with the *same* draw `z`
//! in both modalities. The specific block is `mu_i[k]`, different per
//! modality. Each modality then applies its own random rotation and adds
//! isotropic noise. A confusable pair `{a, b}` in modality `i` gives `a` and
//! `b` identical specific means in that modality and identical shared means
//! everywhere, so that modality alone cannot tell them apart.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Dataset;
use crate::error::{CimdlError, Result};
use crate::model::FeatureBatch;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub correlated_dim: usize,
    pub specific_dim: usize,
    pub noise_sd: f64,
    /// Spread of the class means.
    pub separation: f64,
    /// Confusable class pairs for modality 1 and modality 2.
    pub ambiguity: [Vec<(usize, usize)>; 2],
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 3,
            dim: 16,
            n_train: 300,
            n_test: 150,
            correlated_dim: 4,
            specific_dim: 4,
            noise_sd: 1.0,
            separation: 2.0,
            ambiguity: [vec![(0, 1)], vec![(1, 2)]],
            seed: 7,
        }
    }
}

/// Parses `"1:A,B;2:C,D"` into per-modality class pairs.
pub fn parse_ambiguity(s: &str) -> Result<[Vec<(usize, usize)>; 2]> {
    let mut out: [Vec<(usize, usize)>; 2] = [Vec::new(), Vec::new()];
    for item in s.split(';').map(str::trim).filter(|t| !t.is_empty()) {
        let bad = || CimdlError::invalid(format!("bad ambiguity entry {item:?}, expected M:A,B"));
        let (modality, pair) = item.split_once(':').ok_or_else(bad)?;
        let (a, b) = pair.split_once(',').ok_or_else(bad)?;
        let modality: usize = modality.trim().parse().map_err(|_| bad())?;
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim().parse().map_err(|_| bad())?;
        match modality {
            1 | 2 => out[modality - 1].push((a, b)),
            _ => {
                return Err(CimdlError::invalid(format!(
                    "modality must be 1 or 2 in {item:?}"
                )))
            }
        }
    }
    Ok(out)
}

/// Component representative of each class under the given pairs.
fn components(l: usize, pairs: &[(usize, usize)]) -> Vec<usize> {
    let mut parent: Vec<usize> = (0..l).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for &(a, b) in pairs {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        parent[ra.max(rb)] = ra.min(rb);
    }
    (0..l).map(|i| find(&mut parent, i)).collect()
}

fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

/// Random orthogonal matrix by Gram-Schmidt on a Gaussian matrix.
fn random_rotation(rng: &mut ChaCha8Rng, m: usize) -> Array2<f64> {
    let mut q = gaussian(rng, m, m, 1.0);
    for j in 0..m {
        for k in 0..j {
            let proj = q.column(j).dot(&q.column(k));
            let prev = q.column(k).to_owned();
            q.column_mut(j).scaled_add(-proj, &prev);
        }
        let norm = q.column(j).dot(&q.column(j)).sqrt();
        q.column_mut(j).mapv_inplace(|v| v / norm);
    }
    q
}

/// Class means with tied rows for classes in the same component.
fn tied_means(
    rng: &mut ChaCha8Rng,
    l: usize,
    dim: usize,
    sep: f64,
    comp: &[usize],
) -> Vec<Array1<f64>> {
    let draws: Vec<Array1<f64>> = (0..l)
        .map(|_| {
            Array1::from_shape_fn(dim, |_| {
                let z: f64 = StandardNormal.sample(&mut *rng);
                sep * z
            })
        })
        .collect();
    comp.iter().map(|&root| draws[root].clone()).collect()
}

struct Generator {
    rotations: [Array2<f64>; 2],
    shared_means: Vec<Array1<f64>>,
    specific_means: [Vec<Array1<f64>>; 2],
}

impl Generator {
    fn split(&self, spec: &SyntheticSpec, n: usize, rng: &mut ChaCha8Rng) -> Result<Dataset> {
        let (m, k, s, l) = (
            spec.dim,
            spec.correlated_dim,
            spec.specific_dim,
            spec.num_classes,
        );
        let mut labels: Vec<usize> = (0..n).map(|i| i % l).collect();
        labels.shuffle(rng);
        let shared_noise = gaussian(rng, k, n, spec.noise_sd);
        let mut xs = Vec::with_capacity(2);
        for i in 0..2 {
            let mut latent = Array2::zeros((m, n));
            for (j, &class) in labels.iter().enumerate() {
                for r in 0..k {
                    latent[[r, j]] = self.shared_means[class][r] + shared_noise[[r, j]];
                }
                for r in 0..s {
                    latent[[k + r, j]] = self.specific_means[i][class][r];
                }
            }
            let x = self.rotations[i].dot(&latent) + gaussian(rng, m, n, spec.noise_sd);
            xs.push(FeatureBatch::new(x)?);
        }
        let x2 = xs.pop().expect("two modalities");
        let x1 = xs.pop().expect("two modalities");
        Dataset::new(x1, x2, labels, l)
    }
}

/// Draws train and test splits from one set of generating parameters.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    let l = spec.num_classes;
    if l < 2 {
        return Err(CimdlError::invalid(format!(
            "need at least 2 classes, got {l}"
        )));
    }
    if spec.correlated_dim + spec.specific_dim > spec.dim {
        return Err(CimdlError::invalid(format!(
            "correlated_dim {} + specific_dim {} exceeds dim {}",
            spec.correlated_dim, spec.specific_dim, spec.dim
        )));
    }
    if spec.n_train < l || spec.n_test < l {
        return Err(CimdlError::invalid(format!(
            "every class needs a sample: {l} classes but {} train / {} test samples",
            spec.n_train, spec.n_test
        )));
    }
    if !(spec.noise_sd >= 0.0) || !(spec.separation >= 0.0) {
        return Err(CimdlError::invalid("noise_sd and separation must be >= 0"));
    }
    for &(a, b) in spec.ambiguity.iter().flatten() {
        if a >= l || b >= l {
            return Err(CimdlError::invalid(format!(
                "ambiguity pair ({a}, {b}) names a class outside 0..{l}"
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let rotations = [
        random_rotation(&mut rng, spec.dim),
        random_rotation(&mut rng, spec.dim),
    ];
    let all_pairs: Vec<(usize, usize)> = spec.ambiguity.iter().flatten().copied().collect();
    let shared_means = tied_means(
        &mut rng,
        l,
        spec.correlated_dim,
        spec.separation,
        &components(l, &all_pairs),
    );
    let specific_means = [
        tied_means(
            &mut rng,
            l,
            spec.specific_dim,
            spec.separation,
            &components(l, &spec.ambiguity[0]),
        ),
        tied_means(
            &mut rng,
            l,
            spec.specific_dim,
            spec.separation,
            &components(l, &spec.ambiguity[1]),
        ),
    ];
    let generator = Generator {
        rotations,
        shared_means,
        specific_means,
    };
    let train = generator.split(spec, spec.n_train, &mut rng)?;
    let test = generator.split(spec, spec.n_test, &mut rng)?;
    Ok((train, test))
}
