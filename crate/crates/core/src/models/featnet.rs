use super::{he_conv, Parameters};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Channel widths of the two tapped layers.
pub const FEATNET_CHANNELS: [usize; 2] = [8, 16];

const PARAM_NAMES: [&str; 4] = [
    "feat.conv1.weight",
    "feat.conv1.bias",
    "feat.conv2.weight",
    "feat.conv2.bias",
];

/// Frozen random-weight conv stack used as the perceptual feature space.
/// Features are read after each relu.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    params: Vec<Tensor>,
}

impl FeatureExtractor {
    pub fn build(seed: u64) -> Self {
        let (w1, b1) = he_conv(seed, 0, FEATNET_CHANNELS[0], 3, 3);
        let (w2, b2) = he_conv(seed, 1, FEATNET_CHANNELS[1], FEATNET_CHANNELS[0], 3);
        FeatureExtractor {
            params: vec![w1, b1, w2, b2],
        }
    }

    pub fn from_tensors(tensors: Vec<(String, Tensor)>) -> Result<Self> {
        if tensors.len() != 4 || tensors.iter().zip(PARAM_NAMES).any(|((n, _), e)| n != e) {
            return Err(Error::InvalidArgument(format!(
                "not a feature-extractor weight set: expected tensors {PARAM_NAMES:?}"
            )));
        }
        let reference = Self::build(0);
        let mut params = Vec::with_capacity(4);
        for ((_, mut t), want) in tensors.into_iter().zip(&reference.params) {
            if t.shape() != want.shape() {
                return Err(Error::shape(
                    "feature extractor weights",
                    want.shape(),
                    t.shape(),
                ));
            }
            t.set_requires_grad(false);
            params.push(t);
        }
        Ok(FeatureExtractor { params })
    }

    /// Tap activations for `images: N x 3 x H x W`, same spatial size.
    pub fn features(&self, tape: &mut Tape, images: Var) -> Result<Vec<Var>> {
        let pv: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.constant(p.clone()))
            .collect();
        let c1 = tape.conv2d(images, pv[0], pv[1], 1, 1)?;
        let f1 = tape.relu(c1);
        let c2 = tape.conv2d(f1, pv[2], pv[3], 1, 1)?;
        let f2 = tape.relu(c2);
        Ok(vec![f1, f2])
    }

    /// Tap activations as plain tensors.
    pub fn feature_maps(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let taps = self.features(&mut tape, x)?;
        Ok(taps.into_iter().map(|v| tape.value(v).clone()).collect())
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }
}

impl Parameters for FeatureExtractor {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        PARAM_NAMES
            .iter()
            .map(|n| n.to_string())
            .zip(&self.params)
            .collect()
    }

    /// The extractor is never trained; this exposes storage for loading only.
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.iter_mut().collect()
    }

    fn set_trainable(&mut self, _trainable: bool) {}
}
