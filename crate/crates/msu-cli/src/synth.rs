//! Seeded synthetic datasets: Gaussian-blob classification and band-limited
//! textures for reconstruction tasks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use msu_core::nn::{Dataset, Targets};
use msu_core::tensor::DenseTensor;

/// Distance between class means in units of the per-coordinate noise sigma.
/// Noise is truncated at 3 sigma, so the worst-case margin along the
/// discriminant direction stays above (6 / sqrt(2)) - 3 > 1.
const MEAN_SEPARATION_SIGMA: f32 = 6.0;
const NOISE_TRUNCATION: f32 = 3.0;

/// Standard normal via Box-Muller, resampled into [-3, 3].
fn truncated_normal(rng: &mut ChaCha8Rng) -> f32 {
    loop {
        let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.random_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        let z = z as f32;
        if z.abs() <= NOISE_TRUNCATION {
            return z;
        }
    }
}

/// Gaussian blobs: class `c` is centered at `6 * e_c`; labels cycle round
/// robin so classes stay balanced. Pairwise mean distance is `6 * sqrt(2)`
/// sigma, keeping the classes linearly separable.
pub fn classify(seed: u64, classes: usize, dim: usize, n: usize) -> Dataset {
    assert!(classes >= 2 && dim >= classes, "need dim >= classes >= 2");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        for d in 0..dim {
            let mean = if d == class { MEAN_SEPARATION_SIGMA } else { 0.0 };
            data.push(mean + truncated_normal(&mut rng));
        }
        labels.push(class);
    }
    Dataset {
        inputs: DenseTensor::new(&[n, dim], data).expect("finite synthetic data"),
        targets: Targets::Labels(labels),
    }
}

/// Band-limited textures in [0, 1]: a few low-frequency sinusoids per image,
/// min-max normalized. Targets equal inputs (reconstruction task).
pub fn images(seed: u64, size: usize, n: usize) -> Dataset {
    assert!(size >= 2, "image size must be at least 2");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * size * size);
    for _ in 0..n {
        let mut image = vec![0.0f32; size * size];
        for _ in 0..4 {
            let amplitude: f32 = rng.random_range(0.3..1.0);
            let fx: f32 = rng.random_range(0.5..2.5);
            let fy: f32 = rng.random_range(0.5..2.5);
            let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
            for y in 0..size {
                for x in 0..size {
                    let arg = std::f32::consts::TAU
                        * (fx * x as f32 + fy * y as f32)
                        / size as f32
                        + phase;
                    image[y * size + x] += amplitude * arg.sin();
                }
            }
        }
        let min = image.iter().cloned().fold(f32::INFINITY, f32::min);
        let max = image.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let span = (max - min).max(1e-6);
        data.extend(image.iter().map(|v| (v - min) / span));
    }
    let inputs = DenseTensor::new(&[n, 1, size, size], data).expect("finite synthetic images");
    Dataset { inputs: inputs.clone(), targets: Targets::Tensors(inputs) }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bytes() {
        let a = classify(9, 3, 8, 64);
        let b = classify(9, 3, 8, 64);
        assert_eq!(a, b);
        let i = images(5, 8, 16);
        let j = images(5, 8, 16);
        assert_eq!(i, j);
    }

    #[test]
    fn least_squares_oracle_separates_classes() {
        // Fit one-vs-rest linear regressors on the class indicators by normal
        // equations (ridge-regularized); the blobs must be separable.
        let data = classify(3, 3, 8, 300);
        let n = data.len();
        let dim = 8usize;
        let x = |i: usize, d: usize| -> f64 {
            if d == dim { 1.0 } else { data.inputs.data()[i * dim + d] as f64 }
        };
        let labels = match &data.targets {
            Targets::Labels(l) => l.clone(),
            _ => unreachable!(),
        };
        let cols = dim + 1;
        let mut gram = vec![0.0f64; cols * cols];
        for i in 0..n {
            for a in 0..cols {
                for b in 0..cols {
                    gram[a * cols + b] += x(i, a) * x(i, b);
                }
            }
        }
        for a in 0..cols {
            gram[a * cols + a] += 1e-6;
        }
        let mut weights = Vec::new();
        for class in 0..3 {
            let mut rhs = vec![0.0f64; cols];
            for i in 0..n {
                let y = if labels[i] == class { 1.0 } else { 0.0 };
                for a in 0..cols {
                    rhs[a] += x(i, a) * y;
                }
            }
            weights.push(solve(&gram, &rhs, cols));
        }
        let mut correct = 0usize;
        for i in 0..n {
            let scores: Vec<f64> = weights
                .iter()
                .map(|w| (0..cols).map(|a| w[a] * x(i, a)).sum())
                .collect();
            let pred = scores
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if pred == labels[i] {
                correct += 1;
            }
        }
        assert!(correct as f64 / n as f64 >= 0.99, "linear oracle got {correct}/{n}");
    }

    fn solve(gram: &[f64], rhs: &[f64], n: usize) -> Vec<f64> {
        // Gaussian elimination with partial pivoting.
        let mut a = gram.to_vec();
        let mut b = rhs.to_vec();
        for col in 0..n {
            let pivot = (col..n).max_by(|&i, &j| {
                a[i * n + col].abs().partial_cmp(&a[j * n + col].abs()).unwrap()
            }).unwrap();
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            b.swap(col, pivot);
            for row in col + 1..n {
                let f = a[row * n + col] / a[col * n + col];
                for k in col..n {
                    a[row * n + k] -= f * a[col * n + k];
                }
                b[row] -= f * b[col];
            }
        }
        let mut x = vec![0.0f64; n];
        for row in (0..n).rev() {
            let mut acc = b[row];
            for k in row + 1..n {
                acc -= a[row * n + k] * x[k];
            }
            x[row] = acc / a[row * n + row];
        }
        x
    }

    #[test]
    fn images_stay_in_unit_range() {
        let data = images(11, 8, 10);
        assert!(data.inputs.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(data.inputs.shape(), &[10, 1, 8, 8]);
    }
}
