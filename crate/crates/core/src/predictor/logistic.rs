//! Logistic regression on standardized features, trained by stratified
//! mini-batch gradient descent on binary cross-entropy.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::{cast, Float};
use crate::seeds::stream;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

/// Class composition of one training batch, in the order batches ran.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub epoch: usize,
    pub positives: usize,
    pub negatives: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel<T> {
    pub mean: Vec<T>,
    pub scale: Vec<T>,
    pub weights: Vec<T>,
    pub bias: T,
}

fn sigmoid<T: Float>(z: T) -> T {
    // Split by sign so exp never overflows.
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

impl<T: Float> LogisticModel<T> {
    /// All-zero parameters with identity standardization; scores exactly 0.5.
    pub fn zero(dim: usize) -> Self {
        Self {
            mean: vec![T::zero(); dim],
            scale: vec![T::one(); dim],
            weights: vec![T::zero(); dim],
            bias: T::zero(),
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn logit(&self, x: &[f64]) -> T {
        assert_eq!(x.len(), self.dim(), "feature dimension");
        let mut z = self.bias;
        for i in 0..x.len() {
            let xi = (cast::<T>(x[i]) - self.mean[i]) / self.scale[i];
            z += self.weights[i] * xi;
        }
        z
    }

    pub fn predict(&self, x: &[f64]) -> T {
        let p = sigmoid(self.logit(x));
        // Guard against NaN from degenerate inputs; the range is [0, 1].
        if p.is_nan() {
            cast(0.5)
        } else {
            p.max(T::zero()).min(T::one())
        }
    }

    /// SHA-256 over the parameters' f64 bit patterns.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for v in self.mean.iter().chain(&self.scale).chain(&self.weights).chain(std::iter::once(&self.bias)) {
            h.update(v.to_f64_lossy().to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Trains on rows `x` with labels `y`. Every batch contains both classes.
    pub fn fit(x: &[Vec<f64>], y: &[bool], params: &TrainParams) -> Result<(Self, Vec<BatchRecord>)> {
        assert_eq!(x.len(), y.len(), "rows and labels");
        let pos: Vec<usize> = (0..y.len()).filter(|&i| y[i]).collect();
        let neg: Vec<usize> = (0..y.len()).filter(|&i| !y[i]).collect();
        if pos.is_empty() || neg.is_empty() {
            return Err(Error::SingleClassData);
        }
        let dim = x[0].len();
        let n = x.len();

        let mut model = Self::zero(dim);
        for j in 0..dim {
            let m = x.iter().map(|r| r[j]).sum::<f64>() / n as f64;
            let var = x.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n as f64;
            model.mean[j] = cast(m);
            model.scale[j] = cast(if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 });
        }
        let z: Vec<Vec<T>> = x
            .iter()
            .map(|r| (0..dim).map(|j| (cast::<T>(r[j]) - model.mean[j]) / model.scale[j]).collect())
            .collect();

        let n_batches = n
            .div_ceil(params.batch_size.max(2))
            .min(pos.len())
            .min(neg.len())
            .max(1);
        let lr: T = cast(params.learning_rate);
        let l2: T = cast(params.l2);
        let mut rng = stream(params.seed);
        let (mut pos, mut neg) = (pos, neg);
        let mut log = Vec::with_capacity(params.epochs * n_batches);
        let mut grad = vec![T::zero(); dim];

        for epoch in 0..params.epochs {
            pos.shuffle(&mut rng);
            neg.shuffle(&mut rng);
            for b in 0..n_batches {
                let chunk = |v: &[usize]| {
                    let (lo, hi) = (b * v.len() / n_batches, (b + 1) * v.len() / n_batches);
                    v[lo..hi].to_vec()
                };
                let (bp, bn) = (chunk(&pos), chunk(&neg));
                log.push(BatchRecord {
                    epoch,
                    positives: bp.len(),
                    negatives: bn.len(),
                });
                grad.fill(T::zero());
                let mut gb = T::zero();
                for &i in bp.iter().chain(&bn) {
                    let mut s = model.bias;
                    for j in 0..dim {
                        s += model.weights[j] * z[i][j];
                    }
                    let target = if y[i] { T::one() } else { T::zero() };
                    let err = sigmoid(s) - target;
                    for j in 0..dim {
                        grad[j] += err * z[i][j];
                    }
                    gb += err;
                }
                let m: T = cast((bp.len() + bn.len()) as f64);
                for j in 0..dim {
                    let g = grad[j] / m + l2 * model.weights[j];
                    model.weights[j] -= lr * g;
                }
                model.bias -= lr * gb / m;
            }
        }
        Ok((model, log))
    }
}
