//! Batch normalization, activations, global average pooling and dense layers.

use super::gemm::{gemm, View};
use super::tensor::{FeatureMap, Tensor};
use super::Mode;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization parameters and running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub scale: Tensor,
    pub shift: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    /// Number of training-mode batches folded into the running statistics.
    pub updates: u64,
}

/// What the backward pass needs from a training-mode batch-norm call.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub normalized: FeatureMap,
    pub inv_std: Vec<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            scale: Tensor::filled(&[channels], 1.0),
            shift: Tensor::zeros(&[channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            updates: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    fn check(&self, x: &FeatureMap) -> Result<()> {
        if x.channels != self.channels() {
            return Err(Error::shape(
                format!("{} channels", self.channels()),
                x.channels,
            ));
        }
        Ok(())
    }

    /// Training mode normalizes with batch statistics and folds them into the
    /// running estimates; inference mode uses the running estimates.
    pub fn forward(
        &mut self,
        x: &FeatureMap,
        mode: Mode,
    ) -> Result<(FeatureMap, Option<BatchNormCache>)> {
        match mode {
            Mode::Infer => Ok((self.infer(x)?, None)),
            Mode::Train => {
                let (y, cache) = self.forward_train(x)?;
                Ok((y, Some(cache)))
            }
        }
    }

    pub fn infer(&self, x: &FeatureMap) -> Result<FeatureMap> {
        self.check(x)?;
        if self.updates == 0 {
            return Err(Error::UntrainedBatchNorm);
        }
        let plane = x.plane();
        let mut y = x.clone();
        for sample in y.data.chunks_mut(x.sample_len()) {
            for (c, chunk) in sample.chunks_mut(plane).enumerate() {
                let inv = 1.0 / (self.running_var[c] + BN_EPS).sqrt();
                let (g, b, m) = (self.scale.data[c], self.shift.data[c], self.running_mean[c]);
                chunk.iter_mut().for_each(|v| *v = g * (*v - m) * inv + b);
            }
        }
        Ok(y)
    }

    pub fn forward_train(&mut self, x: &FeatureMap) -> Result<(FeatureMap, BatchNormCache)> {
        self.check(x)?;
        let plane = x.plane();
        let count = (x.batch * plane) as f64;
        let mut normalized = x.clone();
        let mut inv_std = vec![0.0; x.channels];
        for c in 0..x.channels {
            let mut mean = 0.0;
            for s in 0..x.batch {
                mean += x.sample(s)[c * plane..(c + 1) * plane].iter().sum::<f64>();
            }
            mean /= count;
            let mut var = 0.0;
            for s in 0..x.batch {
                var += x.sample(s)[c * plane..(c + 1) * plane]
                    .iter()
                    .map(|v| (v - mean) * (v - mean))
                    .sum::<f64>();
            }
            var /= count;
            let inv = 1.0 / (var + BN_EPS).sqrt();
            inv_std[c] = inv;
            for s in 0..x.batch {
                normalized.sample_mut(s)[c * plane..(c + 1) * plane]
                    .iter_mut()
                    .for_each(|v| *v = (*v - mean) * inv);
            }
            let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
            self.running_mean[c] = (1.0 - BN_MOMENTUM) * self.running_mean[c] + BN_MOMENTUM * mean;
            self.running_var[c] = (1.0 - BN_MOMENTUM) * self.running_var[c] + BN_MOMENTUM * unbiased;
        }
        self.updates += 1;
        let mut y = normalized.clone();
        for s in 0..x.batch {
            for (c, chunk) in y.sample_mut(s).chunks_mut(plane).enumerate() {
                let (g, b) = (self.scale.data[c], self.shift.data[c]);
                chunk.iter_mut().for_each(|v| *v = g * *v + b);
            }
        }
        Ok((y, BatchNormCache { normalized, inv_std }))
    }

    /// Gradient through the batch statistics; accumulates scale/shift grads.
    pub fn backward(&mut self, cache: &BatchNormCache, dy: &FeatureMap) -> Result<FeatureMap> {
        let xhat = &cache.normalized;
        if dy.shape() != xhat.shape() {
            return Err(Error::shape(xhat.shape(), dy.shape()));
        }
        let plane = dy.plane();
        let count = (dy.batch * plane) as f64;
        let mut dx = dy.zeros_like();
        for c in 0..dy.channels {
            let range = c * plane..(c + 1) * plane;
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for s in 0..dy.batch {
                for (g, h) in dy.sample(s)[range.clone()].iter().zip(&xhat.sample(s)[range.clone()]) {
                    sum_dy += g;
                    sum_dy_xhat += g * h;
                }
            }
            self.scale.grad[c] += sum_dy_xhat;
            self.shift.grad[c] += sum_dy;
            let k = self.scale.data[c] * cache.inv_std[c] / count;
            for s in 0..dy.batch {
                let g = &dy.sample(s)[range.clone()];
                let h = &xhat.sample(s)[range.clone()];
                for ((d, g), h) in dx.sample_mut(s)[range.clone()].iter_mut().zip(g).zip(h) {
                    *d = k * (count * g - sum_dy - h * sum_dy_xhat);
                }
            }
        }
        Ok(dx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            // NaN passes through so that corrupt inputs surface as a NaN loss
            Activation::Relu => {
                if v > 0.0 || v.is_nan() {
                    v
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => 1.0 / (1.0 + (-v).exp()),
        }
    }

    /// Derivative expressed through the activation's output `y`.
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
        }
    }

    pub fn forward(self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| self.apply(*v)).collect()
    }

    pub fn forward_in_place(self, x: &mut [f64]) {
        x.iter_mut().for_each(|v| *v = self.apply(*v));
    }

    /// `dx = dy·f'(x)`, using the stored forward output.
    pub fn backward(self, y: &[f64], dy: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(dy)
            .map(|(y, g)| g * self.derivative_from_output(*y))
            .collect()
    }
}

/// Channel means of one `C×H×W` sample.
pub fn global_avg_pool(x: &[f64], channels: usize) -> Vec<f64> {
    let plane = x.len() / channels;
    x.chunks(plane)
        .map(|c| c.iter().sum::<f64>() / plane as f64)
        .collect()
}

/// Spreads each channel gradient uniformly over its `plane` cells.
pub fn global_avg_pool_backward(d_pooled: &[f64], plane: usize) -> Vec<f64> {
    let mut dx = Vec::with_capacity(d_pooled.len() * plane);
    for g in d_pooled {
        dx.extend(std::iter::repeat_n(g / plane as f64, plane));
    }
    dx
}

/// Fully connected layer `y = W·x + b`, `W` stored `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize) -> Self {
        Dense {
            weight: Tensor::zeros(&[outputs, inputs]),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.inputs() {
            return Err(Error::shape(self.inputs(), x.len()));
        }
        let mut y = self.bias.data.clone();
        gemm(
            self.outputs(),
            self.inputs(),
            1,
            1.0,
            View::rows(&self.weight.data, self.inputs()),
            View::rows(x, 1),
            1.0,
            &mut y,
        );
        Ok(y)
    }

    /// Accumulates weight/bias gradients, returns `∂L/∂x`.
    pub fn backward(&mut self, x: &[f64], dy: &[f64]) -> Result<Vec<f64>> {
        let (n, m) = (self.inputs(), self.outputs());
        if x.len() != n || dy.len() != m {
            return Err(Error::shape((n, m), (x.len(), dy.len())));
        }
        for (o, g) in dy.iter().enumerate() {
            self.bias.grad[o] += g;
            for (wg, xi) in self.weight.grad[o * n..(o + 1) * n].iter_mut().zip(x) {
                *wg += g * xi;
            }
        }
        let mut dx = vec![0.0; n];
        gemm(
            n,
            m,
            1,
            1.0,
            View::transposed(&self.weight.data, n),
            View::rows(dy, 1),
            0.0,
            &mut dx,
        );
        Ok(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testing::{check_grad, random_map, random_tensor};

    #[test]
    fn constant_channel_collapses_to_shift() {
        let mut bn = BatchNorm::new(2);
        bn.shift.data = vec![0.25, -1.5];
        bn.scale.data = vec![3.0, 2.0];
        let mut x = random_map(3, 2, 2, 2, 4);
        for s in 0..3 {
            x.sample_mut(s)[..4].iter_mut().for_each(|v| *v = 7.0);
        }
        let (y, _) = bn.forward_train(&x).unwrap();
        for s in 0..3 {
            assert!(y.sample(s)[..4].iter().all(|v| (v - 0.25).abs() < 1e-12));
        }
    }

    #[test]
    fn standardized_input_stays_standardized() {
        let mut bn = BatchNorm::new(3);
        let (y, _) = bn.forward_train(&random_map(4, 3, 5, 5, 8)).unwrap();
        let plane = 25;
        for c in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|s| y.sample(s)[c * plane..(c + 1) * plane].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-6);
            // eps keeps the variance a hair below one
            assert!((var - 1.0).abs() < 1e-4, "{var}");
        }
    }

    #[test]
    fn running_statistics_and_inference() {
        let mut bn = BatchNorm::new(1);
        let x = FeatureMap::from_vec(2, 1, 1, 2, vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        assert!(matches!(bn.infer(&x), Err(Error::UntrainedBatchNorm)));
        bn.forward_train(&x).unwrap();
        assert_eq!(bn.updates, 1);
        assert!((bn.running_mean[0] - 0.4).abs() < 1e-12);
        // unbiased variance of [1,3,5,7] is 20/3
        assert!((bn.running_var[0] - (0.9 + 0.1 * 20.0 / 3.0)).abs() < 1e-12);
        let y = bn.infer(&x).unwrap();
        let expected = (1.0 - 0.4) / (bn.running_var[0] + BN_EPS).sqrt();
        assert!((y.data[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_gradients() {
        for seed in 0..5 {
            let x = random_map(2, 2, 3, 3, seed);
            let mut bn = BatchNorm::new(2);
            bn.scale = random_tensor(&[2], seed + 10);
            bn.shift = random_tensor(&[2], seed + 20);
            let probe = random_map(2, 2, 3, 3, seed + 30);
            let loss = |bn: &BatchNorm, x: &FeatureMap| -> f64 {
                let (y, _) = bn.clone().forward_train(x).unwrap();
                y.data.iter().zip(&probe.data).map(|(a, p)| a * p).sum()
            };
            let mut trained = bn.clone();
            let (_, cache) = trained.forward_train(&x).unwrap();
            let dx = trained.backward(&cache, &probe).unwrap();
            check_grad("bn x", &x.data, &dx.data, 1e-4, |i, h| {
                let mut xp = x.clone();
                xp.data[i] += h;
                loss(&bn, &xp)
            });
            check_grad("bn scale", &bn.scale.data, &trained.scale.grad, 1e-4, |i, h| {
                let mut p = bn.clone();
                p.scale.data[i] += h;
                loss(&p, &x)
            });
            check_grad("bn shift", &bn.shift.data, &trained.shift.grad, 1e-4, |i, h| {
                let mut p = bn.clone();
                p.shift.data[i] += h;
                loss(&p, &x)
            });
        }
    }

    #[test]
    fn activation_values() {
        assert_eq!(Activation::Relu.apply(-1.0), 0.0);
        assert_eq!(Activation::Relu.apply(2.0), 2.0);
        assert_eq!(Activation::Sigmoid.apply(0.0), 0.5);
        let h = 1e-5;
        let fd = (Activation::Sigmoid.apply(h) - Activation::Sigmoid.apply(-h)) / (2.0 * h);
        let analytic = Activation::Sigmoid.derivative_from_output(0.5);
        assert_eq!(analytic, 0.25);
        assert!((fd - analytic).abs() < 1e-6);
    }

    #[test]
    fn activation_gradients() {
        for seed in 0..5 {
            let x = random_tensor(&[12], seed).data;
            let probe = random_tensor(&[12], seed + 1).data;
            for act in [Activation::Relu, Activation::Sigmoid] {
                let y = act.forward(&x);
                let dx = act.backward(&y, &probe);
                check_grad("activation", &x, &dx, 1e-4, |i, h| {
                    let mut xp = x.clone();
                    xp[i] += h;
                    act.forward(&xp).iter().zip(&probe).map(|(a, p)| a * p).sum()
                });
            }
        }
    }

    #[test]
    fn pooling() {
        assert_eq!(global_avg_pool(&[7.0; 6], 1), vec![7.0]);
        assert_eq!(global_avg_pool(&[1.0, 3.0, 5.0, 7.0], 1), vec![4.0]);
        assert_eq!(global_avg_pool(&[1.0, 3.0, 5.0, 7.0], 2), vec![2.0, 6.0]);
        let dx = global_avg_pool_backward(&[1.0, 2.0], 4);
        assert_eq!(dx, vec![0.25, 0.25, 0.25, 0.25, 0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn dense_identity_and_bias() {
        let mut d = Dense::new(3, 3);
        for i in 0..3 {
            d.weight.data[i * 3 + i] = 1.0;
        }
        assert_eq!(d.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![1.0, -2.0, 3.0]);
        let mut d = Dense::new(3, 2);
        d.bias.data = vec![0.5, -0.5];
        assert_eq!(d.forward(&[1.0, 2.0, 3.0]).unwrap(), vec![0.5, -0.5]);
        assert!(d.forward(&[1.0]).is_err());
    }

    #[test]
    fn dense_gradients() {
        for seed in 0..5 {
            let mut d = Dense::new(3, 2);
            d.weight = random_tensor(&[2, 3], seed);
            d.bias = random_tensor(&[2], seed + 1);
            let x = random_tensor(&[3], seed + 2).data;
            let probe = random_tensor(&[2], seed + 3).data;
            let loss = |d: &Dense, x: &[f64]| -> f64 {
                d.forward(x).unwrap().iter().zip(&probe).map(|(a, p)| a * p).sum()
            };
            let mut g = d.clone();
            let dx = g.backward(&x, &probe).unwrap();
            check_grad("dense x", &x, &dx, 1e-5, |i, h| {
                let mut xp = x.clone();
                xp[i] += h;
                loss(&d, &xp)
            });
            check_grad("dense w", &d.weight.data, &g.weight.grad, 1e-5, |i, h| {
                let mut p = d.clone();
                p.weight.data[i] += h;
                loss(&p, &x)
            });
            check_grad("dense b", &d.bias.data, &g.bias.grad, 1e-5, |i, h| {
                let mut p = d.clone();
                p.bias.data[i] += h;
                loss(&p, &x)
            });
        }
    }
}
