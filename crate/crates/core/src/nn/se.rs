//! Squeeze-and-excitation channel weighting: `ω = sigmoid(W₂·relu(W₁·avgpool(x)))`,
//! output channel `c` is `ω_c·x_c`.

use super::layers::{global_avg_pool, global_avg_pool_backward, Activation, Dense};
use super::tensor::FeatureMap;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SeBlock {
    pub reduction: usize,
    /// `W₁`: `C → C/r`
    pub squeeze: Dense,
    /// `W₂`: `C/r → C`
    pub excite: Dense,
}

#[derive(Debug, Clone)]
pub struct SeCache {
    pooled: Vec<Vec<f64>>,
    hidden: Vec<Vec<f64>>,
    weights: Vec<Vec<f64>>,
}

impl SeCache {
    /// Channel weights `ω` of every sample in the batch.
    pub fn channel_weights(&self) -> &[Vec<f64>] {
        &self.weights
    }
}

impl SeBlock {
    pub fn new(channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::invalid(
                "SE block",
                format!("reduction {reduction} does not divide {channels} channels"),
            ));
        }
        let hidden = channels / reduction;
        Ok(SeBlock {
            reduction,
            squeeze: Dense::new(channels, hidden),
            excite: Dense::new(hidden, channels),
        })
    }

    pub fn channels(&self) -> usize {
        self.squeeze.inputs()
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<(FeatureMap, SeCache)> {
        if x.channels != self.channels() {
            return Err(Error::shape(format!("{} channels", self.channels()), x.channels));
        }
        let plane = x.plane();
        let mut y = x.clone();
        let mut cache = SeCache {
            pooled: Vec::with_capacity(x.batch),
            hidden: Vec::with_capacity(x.batch),
            weights: Vec::with_capacity(x.batch),
        };
        for s in 0..x.batch {
            let pooled = global_avg_pool(x.sample(s), x.channels);
            let mut hidden = self.squeeze.forward(&pooled)?;
            Activation::Relu.forward_in_place(&mut hidden);
            let mut weights = self.excite.forward(&hidden)?;
            Activation::Sigmoid.forward_in_place(&mut weights);
            for (c, chunk) in y.sample_mut(s).chunks_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v *= weights[c]);
            }
            cache.pooled.push(pooled);
            cache.hidden.push(hidden);
            cache.weights.push(weights);
        }
        Ok((y, cache))
    }

    /// Backward through both the direct path `ω_c·x_c` and the gating path.
    pub fn backward(&mut self, x: &FeatureMap, cache: &SeCache, dy: &FeatureMap) -> Result<FeatureMap> {
        if dy.shape() != x.shape() || cache.weights.len() != x.batch {
            return Err(Error::shape(x.shape(), dy.shape()));
        }
        let plane = x.plane();
        let mut dx = x.zeros_like();
        for s in 0..x.batch {
            let weights = &cache.weights[s];
            let xs = x.sample(s);
            let dys = dy.sample(s);
            let d_weights: Vec<f64> = xs
                .chunks(plane)
                .zip(dys.chunks(plane))
                .map(|(xc, gc)| xc.iter().zip(gc).map(|(a, b)| a * b).sum())
                .collect();
            let d_logits = Activation::Sigmoid.backward(weights, &d_weights);
            let d_hidden = self.excite.backward(&cache.hidden[s], &d_logits)?;
            let d_hidden_pre = Activation::Relu.backward(&cache.hidden[s], &d_hidden);
            let d_pooled = self.squeeze.backward(&cache.pooled[s], &d_hidden_pre)?;
            let d_from_pool = global_avg_pool_backward(&d_pooled, plane);
            let dxs = dx.sample_mut(s);
            for c in 0..x.channels {
                for p in c * plane..(c + 1) * plane {
                    dxs[p] = weights[c] * dys[p] + d_from_pool[p];
                }
            }
        }
        Ok(dx)
    }
}
