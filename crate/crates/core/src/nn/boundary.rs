//! The boundary network Θ = ω∘φ: an invariant lifted backbone followed by
//! three fully connected layers.

use super::backbone::{Backbone, BackboneCache, PreparedBackbone, StageSpec};
use super::layers::{FilterBasis, Linear};
use super::ops::{relu_backward_inplace, relu_inplace};
use super::params::{Grads, ParamSet};

/// Number of cyclic orders the classification head distinguishes.
pub const CYCLIC_CLASSES: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct BoundaryShape {
    pub image_size: usize,
    pub in_channels: usize,
    pub group_order: usize,
    pub stages: Vec<StageSpec>,
    pub hidden: [usize; 2],
    pub outputs: usize,
    pub basis: FilterBasis,
    pub rings: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct BoundaryNet {
    pub trunk: Backbone,
    layers: [Linear; 3],
}

#[derive(Debug, Clone)]
pub(crate) struct BoundaryForward {
    /// Raw head outputs (one pre-activation, or the cyclic logits).
    pub outputs: Vec<f32>,
    trunk: BackboneCache,
    inputs: [Vec<f32>; 3],
}

impl BoundaryNet {
    pub fn new(params: &mut ParamSet, shape: &BoundaryShape, seed: u64) -> Self {
        let trunk = Backbone::new(
            params,
            "phi",
            shape.in_channels,
            shape.image_size,
            shape.group_order,
            &shape.stages,
            shape.basis,
            seed,
        )
        .with_rings(shape.rings);
        let c = trunk.pooled_width();
        let [h1, h2] = shape.hidden;
        let layers = [
            Linear::new(params, "omega.fc1", c, h1, seed),
            Linear::new(params, "omega.fc2", h1, h2, seed),
            Linear::new(params, "omega.out", h2, shape.outputs, seed),
        ];
        Self { trunk, layers }
    }

    pub fn forward(&self, params: &ParamSet, prep: &PreparedBackbone, x: &[f32]) -> BoundaryForward {
        let (features, trunk) = self.trunk.forward(prep, x);
        let pooled = self.trunk.pool_spatial(&features);
        let c = self.trunk.pooled_width();
        let k = self.trunk.group_order;
        let mut invariant = vec![0.0f32; c];
        for q in pooled.chunks_exact(c) {
            for (m, v) in invariant.iter_mut().zip(q) {
                *m += v / k as f32;
            }
        }
        let mut h1 = self.layers[0].forward(params, &invariant);
        relu_inplace(&mut h1);
        let mut h2 = self.layers[1].forward(params, &h1);
        relu_inplace(&mut h2);
        let outputs = self.layers[2].forward(params, &h2);
        BoundaryForward {
            outputs,
            trunk,
            inputs: [invariant, h1, h2],
        }
    }

    pub fn backward(
        &self,
        params: &ParamSet,
        prep: &PreparedBackbone,
        fwd: &BoundaryForward,
        d_outputs: &[f32],
        grads: &mut Grads,
    ) {
        let [invariant, h1, h2] = &fwd.inputs;
        let mut d = self.layers[2].backward(params, h2, d_outputs, grads);
        relu_backward_inplace(h2, &mut d);
        let mut d = self.layers[1].backward(params, h1, &d, grads);
        relu_backward_inplace(h1, &mut d);
        let d_inv = self.layers[0].backward(params, invariant, &d, grads);
        let k = self.trunk.group_order;
        let d_pooled: Vec<f32> = (0..k).flat_map(|_| d_inv.iter().map(|v| v / k as f32)).collect();
        let d_features = self.trunk.pool_spatial_backward(&d_pooled);
        let mut acc = self.trunk.new_acc();
        self.trunk.backward(prep, &fwd.trunk, d_features, &mut acc);
        self.trunk.finish_acc(&acc, grads);
    }
}
