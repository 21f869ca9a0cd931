use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// How the blurred image is reduced to half resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decimation {
    /// Keep even-indexed rows and columns.
    Even,
    /// Average each 2x2 block.
    AvgPool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradeConfig {
    pub kernel_size: usize,
    pub sigma: f64,
    pub decimation: Decimation,
}

impl Default for DegradeConfig {
    fn default() -> Self {
        DegradeConfig {
            kernel_size: 9,
            sigma: 0.75,
            decimation: Decimation::Even,
        }
    }
}

impl DegradeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "blur kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "blur sigma must be positive, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

fn gaussian_1d(k: usize, sigma: f64) -> Vec<f64> {
    let c = (k / 2) as f64;
    let raw: Vec<f64> = (0..k)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / z).collect()
}

/// Row-major `k x k` Gaussian, the outer product of the normalised 1-D
/// kernel sampled at integer offsets.
pub fn gaussian_kernel(k: usize, sigma: f64) -> Result<Vec<f64>> {
    DegradeConfig {
        kernel_size: k,
        sigma,
        decimation: Decimation::Even,
    }
    .validate()?;
    let g = gaussian_1d(k, sigma);
    Ok(g.iter()
        .flat_map(|a| g.iter().map(move |b| a * b))
        .collect())
}

/// Mirror index into `0..len` without repeating the edge sample.
fn reflect(i: isize, len: usize) -> usize {
    let n = len as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

/// Blurs each channel of a `3 x H x W` image with the configured Gaussian
/// (reflect borders) and halves its resolution.
pub fn degrade(hr: &Tensor, cfg: &DegradeConfig) -> Result<Tensor> {
    cfg.validate()?;
    let shape = hr.shape();
    if shape.len() != 3 {
        return Err(Error::invalid_shape(
            "degrade",
            format!("expected C x H x W image, got {shape:?}"),
        ));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let k = cfg.kernel_size;
    if h % 2 != 0 || w % 2 != 0 || h <= k || w <= k {
        return Err(Error::invalid_shape(
            "degrade",
            format!("spatial dims must be even and larger than the {k}x{k} kernel, got {h}x{w}"),
        ));
    }
    let g = gaussian_1d(k, cfg.sigma);
    let half = (k / 2) as isize;
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut tmp = vec![0.0; h * w];
    let mut blurred = vec![0.0; h * w];
    for plane in hr.data().chunks(h * w) {
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = g
                    .iter()
                    .enumerate()
                    .map(|(j, wt)| wt * plane[y * w + reflect(x as isize + j as isize - half, w)])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                blurred[y * w + x] = g
                    .iter()
                    .enumerate()
                    .map(|(j, wt)| wt * tmp[reflect(y as isize + j as isize - half, h) * w + x])
                    .sum();
            }
        }
        for y in 0..ho {
            for x in 0..wo {
                let v = match cfg.decimation {
                    Decimation::Even => blurred[2 * y * w + 2 * x],
                    Decimation::AvgPool => {
                        let (a, b) = (2 * y * w + 2 * x, (2 * y + 1) * w + 2 * x);
                        0.25 * (blurred[a] + blurred[a + 1] + blurred[b] + blurred[b + 1])
                    }
                };
                out.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new(vec![c, ho, wo], out)
}
