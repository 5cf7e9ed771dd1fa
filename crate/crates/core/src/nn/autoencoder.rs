//! The invariant-equivariant autoencoder: a shared lifted trunk feeding the
//! invariant encoder η and the group-action scorer μ, plus the decoder δ.

use super::backbone::{Backbone, BackboneCache, PreparedBackbone, StageSpec};
use super::layers::{Conv2d, FilterBasis, Linear};
use super::ops::{relu_backward_inplace, relu_inplace, sigmoid, upsample2, upsample2_backward};
use super::params::{Grads, ParamSet};

/// Shape parameters of the autoencoder.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct AeShape {
    pub image_size: usize,
    pub in_channels: usize,
    pub group_order: usize,
    pub stages: Vec<StageSpec>,
    pub d_inv: usize,
    pub mu_hidden: usize,
    pub decoder_channels: [usize; 3],
    pub basis: FilterBasis,
    pub rings: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct AutoEncoder {
    pub trunk: Backbone,
    eta: Linear,
    mu_hidden: Linear,
    mu_out: Linear,
    dec_fc: Linear,
    dec_conv: [Conv2d; 3],
    seed_size: usize,
    channels: [usize; 3],
}

/// Everything one forward pass produces.
#[derive(Debug, Clone)]
pub(crate) struct AeForward {
    pub z: Vec<f32>,
    pub scores: Vec<f32>,
    pub recon: Vec<f32>,
    cache: AeCache,
}

#[derive(Debug, Clone)]
struct AeCache {
    trunk: BackboneCache,
    pooled: Vec<f32>,
    group_mean: Vec<f32>,
    mu_hidden: Vec<Vec<f32>>,
    dec_seed: Vec<f32>,
    up1: Vec<f32>,
    act1: Vec<f32>,
    up2: Vec<f32>,
    act2: Vec<f32>,
}

impl AutoEncoder {
    pub fn new(params: &mut ParamSet, shape: &AeShape, seed: u64) -> Self {
        let trunk = Backbone::new(
            params,
            "trunk",
            shape.in_channels,
            shape.image_size,
            shape.group_order,
            &shape.stages,
            shape.basis,
            seed,
        )
        .with_rings(shape.rings);
        let c = trunk.pooled_width();
        let eta = Linear::new(params, "eta", c, shape.d_inv, seed);
        let mu_hidden = Linear::new(params, "mu.hidden", c, shape.mu_hidden, seed);
        let mu_out = Linear::new(params, "mu.out", shape.mu_hidden, 1, seed);
        let seed_size = shape.image_size / 4;
        let [c0, c1, c2] = shape.decoder_channels;
        let dec_fc = Linear::new(params, "dec.fc", shape.d_inv, c0 * seed_size * seed_size, seed);
        let dec_conv = [
            Conv2d::new(params, "dec.conv1", c0, c1, 3, seed),
            Conv2d::new(params, "dec.conv2", c1, c2, 3, seed),
            Conv2d::new(params, "dec.out", c2, shape.in_channels, 3, seed),
        ];
        Self {
            trunk,
            eta,
            mu_hidden,
            mu_out,
            dec_fc,
            dec_conv,
            seed_size,
            channels: shape.decoder_channels,
        }
    }

    pub fn group_order(&self) -> usize {
        self.trunk.group_order
    }

    pub fn forward(&self, params: &ParamSet, prep: &PreparedBackbone, x: &[f32]) -> AeForward {
        let (features, trunk) = self.trunk.forward(prep, x);
        let pooled = self.trunk.pool_spatial(&features);
        let k = self.group_order();
        let c = self.trunk.pooled_width();
        let mut group_mean = vec![0.0f32; c];
        for q in pooled.chunks_exact(c) {
            for (m, v) in group_mean.iter_mut().zip(q) {
                *m += v / k as f32;
            }
        }
        let z = self.eta.forward(params, &group_mean);
        let mut scores = Vec::with_capacity(k);
        let mut mu_hidden = Vec::with_capacity(k);
        for q in pooled.chunks_exact(c) {
            let mut h = self.mu_hidden.forward(params, q);
            relu_inplace(&mut h);
            scores.push(self.mu_out.forward(params, &h)[0]);
            mu_hidden.push(h);
        }
        let (recon, dec) = self.decode_cached(params, &z);
        AeForward {
            z,
            scores,
            recon,
            cache: AeCache {
                trunk,
                pooled,
                group_mean,
                mu_hidden,
                ..dec
            },
        }
    }

    /// δ alone.
    pub fn decode(&self, params: &ParamSet, z: &[f32]) -> Vec<f32> {
        self.decode_cached(params, z).0
    }

    fn decode_cached(&self, params: &ParamSet, z: &[f32]) -> (Vec<f32>, AeCache) {
        let [c0, c1, c2] = self.channels;
        let s0 = self.seed_size;
        let mut dec_seed = self.dec_fc.forward(params, z);
        relu_inplace(&mut dec_seed);
        let up1 = upsample2(&dec_seed, c0, s0, s0);
        let mut act1 = self.dec_conv[0].forward(params, &up1, 2 * s0, 2 * s0);
        relu_inplace(&mut act1);
        let up2 = upsample2(&act1, c1, 2 * s0, 2 * s0);
        let mut act2 = self.dec_conv[1].forward(params, &up2, 4 * s0, 4 * s0);
        relu_inplace(&mut act2);
        debug_assert_eq!(act2.len(), c2 * 16 * s0 * s0);
        let mut recon = self.dec_conv[2].forward(params, &act2, 4 * s0, 4 * s0);
        for v in &mut recon {
            *v = sigmoid(*v);
        }
        let cache = AeCache {
            trunk: BackboneCache::empty(),
            pooled: Vec::new(),
            group_mean: Vec::new(),
            mu_hidden: Vec::new(),
            dec_seed,
            up1,
            act1,
            up2,
            act2,
        };
        (recon, cache)
    }

    /// Backpropagates gradients with respect to the reconstruction and the
    /// scores through the whole network, adding into `grads`.
    pub fn backward(
        &self,
        params: &ParamSet,
        prep: &PreparedBackbone,
        fwd: &AeForward,
        d_recon: &[f32],
        d_scores: &[f32],
        grads: &mut Grads,
    ) {
        let cache = &fwd.cache;
        let [c0, c1, _] = self.channels;
        let s0 = self.seed_size;
        let big = 4 * s0;
        let d_logit: Vec<f32> = d_recon
            .iter()
            .zip(&fwd.recon)
            .map(|(g, y)| g * y * (1.0 - y))
            .collect();
        let mut d_act2 = self.dec_conv[2].backward(params, &cache.act2, big, big, &d_logit, grads);
        relu_backward_inplace(&cache.act2, &mut d_act2);
        let d_up2 = self.dec_conv[1].backward(params, &cache.up2, big, big, &d_act2, grads);
        let mut d_act1 = upsample2_backward(&d_up2, c1, 2 * s0, 2 * s0);
        relu_backward_inplace(&cache.act1, &mut d_act1);
        let d_up1 = self.dec_conv[0].backward(params, &cache.up1, 2 * s0, 2 * s0, &d_act1, grads);
        let mut d_seed = upsample2_backward(&d_up1, c0, s0, s0);
        relu_backward_inplace(&cache.dec_seed, &mut d_seed);
        let dz = self.dec_fc.backward(params, &fwd.z, &d_seed, grads);
        let d_mean = self.eta.backward(params, &cache.group_mean, &dz, grads);

        let k = self.group_order();
        let c = self.trunk.pooled_width();
        let mut d_pooled = vec![0.0f32; k * c];
        for (r, dq) in d_pooled.chunks_exact_mut(c).enumerate() {
            for (d, m) in dq.iter_mut().zip(&d_mean) {
                *d = m / k as f32;
            }
            if d_scores[r] != 0.0 {
                let mut dh = self.mu_out.backward(params, &cache.mu_hidden[r], &[d_scores[r]], grads);
                relu_backward_inplace(&cache.mu_hidden[r], &mut dh);
                let q = &cache.pooled[r * c..(r + 1) * c];
                let dq_mu = self.mu_hidden.backward(params, q, &dh, grads);
                for (d, v) in dq.iter_mut().zip(dq_mu) {
                    *d += v;
                }
            }
        }
        let d_features = self.trunk.pool_spatial_backward(&d_pooled);
        let mut acc = self.trunk.new_acc();
        self.trunk.backward(prep, &cache.trunk, d_features, &mut acc);
        self.trunk.finish_acc(&acc, grads);
    }
}
