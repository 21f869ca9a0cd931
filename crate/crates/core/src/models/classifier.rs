use serde::{Deserialize, Serialize};

use super::{he_conv, Parameters};
use crate::autodiff::{softmax_rows, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub classes: usize,
    pub input_size: usize,
    pub widths: [usize; 2],
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            classes: 8,
            input_size: 48,
            widths: [16, 32],
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "classifier needs at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(4) {
            return Err(Error::InvalidArgument(format!(
                "classifier input size {} must be a positive multiple of 4",
                self.input_size
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::InvalidArgument(
                "classifier widths must be >= 1".into(),
            ));
        }
        Ok(())
    }

    fn flat_features(&self) -> usize {
        self.widths[1] * (self.input_size / 4) * (self.input_size / 4)
    }
}

/// Two conv blocks (3x3 conv, relu, 2x2 max pool) and a dense head.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    config: ClassifierConfig,
    /// `[w1, b1, w2, b2, dense_w, dense_b]`
    params: Vec<Tensor>,
}

const PARAM_NAMES: [&str; 6] = [
    "cls.conv1.weight",
    "cls.conv1.bias",
    "cls.conv2.weight",
    "cls.conv2.bias",
    "cls.head.weight",
    "cls.head.bias",
];

impl ClassifierModel {
    pub fn build(config: ClassifierConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (w1, b1) = he_conv(seed, 0, config.widths[0], 3, 3);
        let (w2, b2) = he_conv(seed, 1, config.widths[1], config.widths[0], 3);
        let d = config.flat_features();
        let mut r = rng::stream(&[seed, 2, 0xdea5e]);
        // Glorot-normal head keeps initial logits near zero.
        let std = (2.0 / (d + config.classes) as f64).sqrt();
        let wd = Tensor::new(
            vec![d, config.classes],
            rng::normal_vec(&mut r, d * config.classes, std),
        )?;
        let bd = Tensor::zeros(&[config.classes]);
        let params = [w1, b1, w2, b2, wd, bd]
            .into_iter()
            .map(Tensor::with_grad)
            .collect();
        Ok(ClassifierModel { config, params })
    }

    pub fn from_tensors(tensors: Vec<(String, Tensor)>) -> Result<Self> {
        if tensors.len() != 6 || tensors.iter().zip(PARAM_NAMES).any(|((n, _), e)| n != e) {
            return Err(Error::InvalidArgument(format!(
                "not a classifier weight set: expected tensors {PARAM_NAMES:?}"
            )));
        }
        let params: Vec<Tensor> = tensors.into_iter().map(|(_, t)| t.with_grad()).collect();
        let dim = |i: usize, d: usize| params[i].shape().get(d).copied().unwrap_or(0);
        let (w2, flat) = (dim(2, 0), dim(4, 0));
        let cells = flat.checked_div(w2).unwrap_or(0);
        let side = (cells as f64).sqrt().round() as usize;
        let config = ClassifierConfig {
            classes: dim(4, 1),
            input_size: side * 4,
            widths: [dim(0, 0), w2],
        };
        config.validate()?;
        let expected = Self::build(config, 0)?;
        for (got, want) in params.iter().zip(&expected.params) {
            if got.shape() != want.shape() {
                return Err(Error::shape(
                    "classifier weights",
                    want.shape(),
                    got.shape(),
                ));
            }
        }
        Ok(ClassifierModel { config, params })
    }

    pub fn config(&self) -> ClassifierConfig {
        self.config
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    /// Records logits `N x C` for `image: N x 3 x S x S`. Returns the logits
    /// handle and the parameter handles.
    pub fn forward(&self, tape: &mut Tape, image: Var) -> Result<(Var, Vec<Var>)> {
        let shape = tape.value(image).shape().to_vec();
        let s = self.config.input_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(Error::invalid_shape(
                "classifier_forward",
                format!("expected N x 3 x {s} x {s} input, got {shape:?}"),
            ));
        }
        let pv: Vec<Var> = self.params.iter().map(|p| tape.leaf(p)).collect();
        let mut x = image;
        for block in 0..2 {
            x = tape.conv2d(x, pv[2 * block], pv[2 * block + 1], 1, 1)?;
            x = tape.relu(x);
            x = tape.maxpool2x2(x)?;
        }
        let flat = tape.reshape(x, &[shape[0], self.config.flat_features()])?;
        let logits = tape.dense(flat, pv[4], pv[5])?;
        Ok((logits, pv))
    }

    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let mut frozen = self.clone();
        frozen.set_trainable(false);
        let (l, _) = frozen.forward(&mut tape, x)?;
        Ok(tape.value(l).clone())
    }

    pub fn probabilities(&self, images: &Tensor) -> Result<Tensor> {
        let l = self.logits(images)?;
        Tensor::new(
            l.shape().to_vec(),
            softmax_rows(l.data(), self.config.classes),
        )
    }

    /// Arg-max class per image; ties resolve to the lowest index.
    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        let l = self.logits(images)?;
        Ok(l.data()
            .chunks(self.config.classes)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                        if v > best.1 {
                            (i, v)
                        } else {
                            best
                        }
                    })
                    .0
            })
            .collect())
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }
}

impl Parameters for ClassifierModel {
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_deterministic_and_shapes() {
        let cfg = ClassifierConfig::default();
        let a = ClassifierModel::build(cfg, 3).unwrap();
        assert_eq!(a, ClassifierModel::build(cfg, 3).unwrap());
        let logits = a.logits(&Tensor::full(&[2, 3, 48, 48], 0.5)).unwrap();
        assert_eq!(logits.shape(), &[2, 8]);
    }

    #[test]
    fn config_errors() {
        let mut cfg = ClassifierConfig::default();
        cfg.classes = 1;
        assert!(ClassifierModel::build(cfg, 0).is_err());
        let mut cfg = ClassifierConfig::default();
        cfg.input_size = 50;
        assert!(ClassifierModel::build(cfg, 0).is_err());
        let m = ClassifierModel::build(ClassifierConfig::default(), 0).unwrap();
        assert!(m.logits(&Tensor::zeros(&[1, 3, 40, 40])).is_err());
    }

    #[test]
    fn frozen_params_still_pass_input_gradient() {
        let mut m = ClassifierModel::build(ClassifierConfig::default(), 4).unwrap();
        m.set_trainable(false);
        let before = m.clone();
        let mut r = rng::stream(&[9]);
        let img = Tensor::new(
            vec![1, 3, 48, 48],
            rng::normal_vec(&mut r, 3 * 48 * 48, 0.3),
        )
        .unwrap()
        .with_grad();
        let mut tape = Tape::new();
        let x = tape.leaf(&img);
        let (logits, pv) = m.forward(&mut tape, x).unwrap();
        let p = tape.softmax(logits).unwrap();
        let mut label = Tensor::zeros(&[1, 8]);
        label.data_mut()[2] = 1.0;
        let loss = tape.ce_soft_labels(p, &label).unwrap();
        let g = tape.backward(loss).unwrap();
        let gx = g.get(x).unwrap();
        assert!(gx.iter().any(|&v| v != 0.0));
        m.absorb_grads(&pv, &g);
        assert_eq!(m, before);
        assert!(m.params().iter().all(|p| p.grad.is_none()));
    }

    #[test]
    fn tensors_round_trip() {
        let m = ClassifierModel::build(ClassifierConfig::default(), 5).unwrap();
        let named = m
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        assert_eq!(ClassifierModel::from_tensors(named).unwrap(), m);
    }
}
