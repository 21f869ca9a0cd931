use serde::{Deserialize, Serialize};

use super::{he_conv, Parameters};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Layer geometry of the three-conv SR network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SrConfig {
    pub kernels: [usize; 3],
    pub widths: [usize; 2],
}

impl Default for SrConfig {
    fn default() -> Self {
        SrConfig {
            kernels: [5, 3, 5],
            widths: [16, 8],
        }
    }
}

impl SrConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(k) = self.kernels.iter().find(|&&k| k % 2 == 0 || k == 0) {
            return Err(Error::InvalidArgument(format!(
                "SR kernel size {k} must be odd for size-preserving padding"
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::InvalidArgument(
                "SR layer widths must be >= 1".into(),
            ));
        }
        Ok(())
    }

    fn channels(&self) -> [(usize, usize); 3] {
        [
            (3, self.widths[0]),
            (self.widths[0], self.widths[1]),
            (self.widths[1], 3),
        ]
    }
}

/// SRCNN-style 2x super-resolution network: bicubic pre-upsampling followed
/// by conv-relu-conv-relu-conv. Output is unclamped.
#[derive(Debug, Clone, PartialEq)]
pub struct SrModel {
    config: SrConfig,
    /// `[w1, b1, w2, b2, w3, b3]`
    params: Vec<Tensor>,
}

/// Tape handles from one [`SrModel::forward`].
#[derive(Debug, Clone)]
pub struct SrForward {
    pub output: Var,
    pub params: Vec<Var>,
}

const PARAM_NAMES: [&str; 6] = [
    "sr.conv1.weight",
    "sr.conv1.bias",
    "sr.conv2.weight",
    "sr.conv2.bias",
    "sr.conv3.weight",
    "sr.conv3.bias",
];

impl SrModel {
    pub const SCALE: usize = 2;

    pub fn build(config: SrConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = Vec::with_capacity(6);
        for (i, ((cin, cout), k)) in config
            .channels()
            .into_iter()
            .zip(config.kernels)
            .enumerate()
        {
            let (w, b) = he_conv(seed, i as u64, cout, cin, k);
            params.push(w.with_grad());
            params.push(b.with_grad());
        }
        Ok(SrModel { config, params })
    }

    /// Rebuilds a model from named tensors, inferring the geometry.
    pub fn from_tensors(tensors: Vec<(String, Tensor)>) -> Result<Self> {
        if tensors.len() != 6 || tensors.iter().zip(PARAM_NAMES).any(|((n, _), e)| n != e) {
            return Err(Error::InvalidArgument(format!(
                "not an SR weight set: expected tensors {PARAM_NAMES:?}"
            )));
        }
        let params: Vec<Tensor> = tensors.into_iter().map(|(_, t)| t.with_grad()).collect();
        let dim = |i: usize, d: usize| params[i].shape().get(d).copied().unwrap_or(0);
        let config = SrConfig {
            kernels: [dim(0, 2), dim(2, 2), dim(4, 2)],
            widths: [dim(0, 0), dim(2, 0)],
        };
        config.validate()?;
        let expected = Self::build(config, 0)?;
        for (got, want) in params.iter().zip(&expected.params) {
            if got.shape() != want.shape() {
                return Err(Error::shape("sr weights", want.shape(), got.shape()));
            }
        }
        Ok(SrModel { config, params })
    }

    pub fn config(&self) -> SrConfig {
        self.config
    }

    /// Records `M(lr)` on the tape. `lr` is `N x 3 x H x W`.
    pub fn forward(&self, tape: &mut Tape, lr: Var) -> Result<SrForward> {
        let pv: Vec<Var> = self.params.iter().map(|p| tape.leaf(p)).collect();
        let output = self.forward_with(tape, lr, &pv)?;
        Ok(SrForward { output, params: pv })
    }

    /// Like [`SrModel::forward`], but with parameter handles already on the
    /// tape, in [`Parameters::named_params`] order.
    pub fn forward_with(&self, tape: &mut Tape, lr: Var, pv: &[Var]) -> Result<Var> {
        let shape = tape.value(lr).shape();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::invalid_shape(
                "sr_forward",
                format!("expected N x 3 x H x W input, got {shape:?}"),
            ));
        }
        if pv.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "sr_forward expects {} parameter handles, got {}",
                self.params.len(),
                pv.len()
            )));
        }
        let mut x = tape.bicubic_upsample2x(lr)?;
        for layer in 0..3 {
            let pad = self.config.kernels[layer] / 2;
            x = tape.conv2d(x, pv[2 * layer], pv[2 * layer + 1], 1, pad)?;
            if layer < 2 {
                x = tape.relu(x);
            }
        }
        Ok(x)
    }

    /// Forward pass without gradient bookkeeping.
    pub fn infer(&self, lr: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(lr.clone());
        let mut frozen = self.clone();
        frozen.set_trainable(false);
        let out = frozen.forward(&mut tape, x)?.output;
        Ok(tape.value(out).clone())
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }
}

impl Parameters for SrModel {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        PARAM_NAMES
            .iter()
            .map(|n| n.to_string())
            .zip(&self.params)
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.iter_mut().collect()
    }
}
