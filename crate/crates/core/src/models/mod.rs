//! The three networks: the SR model, the downstream classifier, and the
//! frozen perceptual feature extractor, plus their on-disk weight format.

mod classifier;
mod featnet;
mod srnet;
mod weights;

pub use classifier::{ClassifierConfig, ClassifierModel};
pub use featnet::{FeatureExtractor, FEATNET_CHANNELS};
pub use srnet::{SrConfig, SrModel};
pub use weights::{
    load_weights, save_weights, LoadedModel, WeightFile, WEIGHT_MAGIC, WEIGHT_VERSION,
};

use crate::autodiff::{Gradients, Tensor, Var};
use crate::rng;

/// Ordered, named parameter storage shared by all networks.
pub trait Parameters {
    fn named_params(&self) -> Vec<(String, &Tensor)>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Toggles `requires_grad` on every parameter.
    fn set_trainable(&mut self, trainable: bool) {
        for p in self.params_mut() {
            p.set_requires_grad(trainable);
        }
    }

    /// Copies gradients for the tape handles returned by a forward pass
    /// into the parameters' `grad` buffers.
    fn absorb_grads(&mut self, vars: &[Var], grads: &Gradients) {
        for (p, v) in self.params_mut().into_iter().zip(vars) {
            grads.write_into(*v, p);
        }
    }
}

/// He-normal conv kernel `out x in x k x k` and a zero bias.
fn he_conv(seed: u64, layer: u64, out_c: usize, in_c: usize, k: usize) -> (Tensor, Tensor) {
    let fan_in = in_c * k * k;
    let mut r = rng::stream(&[seed, layer, 0xc0de]);
    let w = rng::normal_vec(&mut r, out_c * fan_in, (2.0 / fan_in as f64).sqrt());
    (
        Tensor::new(vec![out_c, in_c, k, k], w).expect("kernel shape"),
        Tensor::zeros(&[out_c]),
    )
}
