//! Small dense building blocks with hand-written gradients.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;

/// `y = W x + b`, with `W` stored row-major as `out_dim x in_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            in_dim,
            out_dim,
            weight: vec![T::zero(); in_dim * out_dim],
            bias: vec![T::zero(); out_dim],
        }
    }

    /// Glorot-uniform weights in `+-sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = (0..in_dim * out_dim)
            .map(|_| T::lit(rng.gen_range(-limit..=limit)))
            .collect();
        Linear {
            in_dim,
            out_dim,
            weight,
            bias: vec![T::zero(); out_dim],
        }
    }

    pub fn forward(&self, x: &[T]) -> Vec<T> {
        debug_assert_eq!(x.len(), self.in_dim);
        self.weight
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, &b)| row.iter().zip(x).fold(b, |acc, (&w, &xi)| acc + w * xi))
            .collect()
    }

    /// Accumulates `dW += dy x^T`, `db += dy` into `grad`.
    pub fn accumulate_grad(&self, x: &[T], dy: &[T], grad: &mut Linear<T>) {
        for ((row, &g), gb) in grad
            .weight
            .chunks_exact_mut(self.in_dim)
            .zip(dy)
            .zip(&mut grad.bias)
        {
            *gb += g;
            if g != T::zero() {
                for (w, &xi) in row.iter_mut().zip(x) {
                    *w += g * xi;
                }
            }
        }
    }

    /// `W^T dy`.
    pub fn backward_input(&self, dy: &[T]) -> Vec<T> {
        let mut dx = vec![T::zero(); self.in_dim];
        for (row, &g) in self.weight.chunks_exact(self.in_dim).zip(dy) {
            if g != T::zero() {
                for (d, &w) in dx.iter_mut().zip(row) {
                    *d += g * w;
                }
            }
        }
        dx
    }
}

/// Normalized activations and the statistics needed to differentiate them.
#[derive(Clone, Debug, PartialEq)]
pub struct NormCache<T> {
    pub normalized: Vec<T>,
    pub inv_std: T,
}

/// Per-instance layer normalization before gain and offset:
/// `(x - mean) / sqrt(var + eps)`, population variance.
pub fn layer_norm<T: Scalar>(x: &[T], eps: T) -> NormCache<T> {
    let n = T::from_usize_lossy(x.len());
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let inv_std = T::one() / (var + eps).sqrt();
    NormCache {
        normalized: x.iter().map(|&v| (v - mean) * inv_std).collect(),
        inv_std,
    }
}

/// Gradient through the normalization given the gradient w.r.t. its output.
pub fn layer_norm_backward<T: Scalar>(cache: &NormCache<T>, dnorm: &[T]) -> Vec<T> {
    let n = T::from_usize_lossy(dnorm.len());
    let mean_d = dnorm.iter().copied().sum::<T>() / n;
    let mean_dx = dnorm
        .iter()
        .zip(&cache.normalized)
        .map(|(&d, &x)| d * x)
        .sum::<T>()
        / n;
    dnorm
        .iter()
        .zip(&cache.normalized)
        .map(|(&d, &x)| cache.inv_std * (d - mean_d - x * mean_dx))
        .collect()
}

/// Identifies one dropout draw: the run seed, the optimizer step and the
/// position of the target within the batch. Masks are a pure function of
/// the key, so parallel forward passes reproduce the same masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DropoutKey {
    pub seed: u64,
    pub step: u64,
    pub item: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl DropoutKey {
    pub fn stream_seed(&self) -> u64 {
        splitmix(splitmix(splitmix(self.seed) ^ self.step) ^ self.item)
    }
}

/// Inverted-dropout multipliers: `0` for dropped units, `1 / (1 - rate)` otherwise.
pub fn dropout_mask<T: Scalar>(len: usize, rate: f64, key: DropoutKey) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(key.stream_seed());
    let keep = T::lit(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| {
            if rng.gen::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_forward_and_grads() {
        let lin = Linear {
            in_dim: 2,
            out_dim: 2,
            weight: vec![1.0, 2.0, 3.0, 4.0],
            bias: vec![0.5, -0.5],
        };
        assert_eq!(lin.forward(&[1.0, -1.0]), vec![-0.5, -1.5]);
        assert_eq!(lin.backward_input(&[1.0, 1.0]), vec![4.0, 6.0]);
        let mut g = Linear::zeros(2, 2);
        lin.accumulate_grad(&[1.0, 2.0], &[1.0, -1.0], &mut g);
        assert_eq!(g.weight, vec![1.0, 2.0, -1.0, -2.0]);
        assert_eq!(g.bias, vec![1.0, -1.0]);
    }

    #[test]
    fn layer_norm_statistics() {
        let x = [0.3f64, -0.7, 0.1, 0.9, -0.2];
        let eps = 1e-5;
        let c = layer_norm(&x, eps);
        let n = x.len() as f64;
        let mean: f64 = c.normalized.iter().sum::<f64>() / n;
        let var: f64 = c.normalized.iter().map(|v| v * v).sum::<f64>() / n;
        let raw_mean = x.iter().sum::<f64>() / n;
        let raw_var = x.iter().map(|v| (v - raw_mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-9);
        assert!((var - raw_var / (raw_var + eps)).abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn dropout_mask_is_keyed() {
        let key = DropoutKey {
            seed: 1,
            step: 2,
            item: 3,
        };
        let a: Vec<f64> = dropout_mask(64, 0.3, key);
        assert_eq!(a, dropout_mask::<f64>(64, 0.3, key));
        assert_ne!(
            a,
            dropout_mask::<f64>(64, 0.3, DropoutKey { item: 4, ..key })
        );
        assert!(a.iter().all(|&m| m == 0.0 || (m - 1.0 / 0.7).abs() < 1e-15));
        assert!(dropout_mask::<f64>(32, 0.0, key).iter().all(|&m| m == 1.0));
    }
}
