use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::loss::AttackSpec;
use crate::models::FeatureExtractor;

pub const PSNR_CAP_DB: f64 = 100.0;
/// Below this MSE the PSNR is reported as the cap.
pub const PSNR_MSE_FLOOR: f64 = 1e-10;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    if a.numel() == 0 {
        return Err(Error::invalid_shape(op, "empty image"));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` for images in `[0, 1]`. Both inputs are clamped first.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("psnr", a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.clamp(0.0, 1.0) - y.clamp(0.0, 1.0);
            d * d
        })
        .sum::<f64>()
        / a.numel() as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < PSNR_MSE_FLOOR {
        PSNR_CAP_DB
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

fn ssim_taps() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter over valid positions only.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().zip(&src[x..x + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * rows[(y + i) * ow + x])
                .sum();
        }
    }
    out
}

/// Single-scale SSIM with dynamic range 1, averaged over valid window
/// positions and then over channels. The last two dimensions are spatial;
/// everything before them is treated as channels.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("ssim", a, b)?;
    let r = a.rank();
    if r < 2 {
        return Err(Error::invalid_shape("ssim", "need at least 2 dimensions"));
    }
    let (h, w) = (a.shape()[r - 2], a.shape()[r - 1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid_shape(
            "ssim",
            format!("image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let taps = ssim_taps();
    let planes = a.numel() / (h * w);
    let mut total = 0.0;
    for p in 0..planes {
        let pa = &a.data()[p * h * w..(p + 1) * h * w];
        let pb = &b.data()[p * h * w..(p + 1) * h * w];
        let prod = |f: fn(f64, f64) -> f64| -> Vec<f64> {
            pa.iter().zip(pb).map(|(&x, &y)| f(x, y)).collect()
        };
        let mu_a = filter_valid(pa, h, w, &taps);
        let mu_b = filter_valid(pb, h, w, &taps);
        let aa = filter_valid(&prod(|x, _| x * x), h, w, &taps);
        let bb = filter_valid(&prod(|_, y| y * y), h, w, &taps);
        let ab = filter_valid(&prod(|x, y| x * y), h, w, &taps);
        let mut acc = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += acc / mu_a.len() as f64;
    }
    Ok(total / planes as f64)
}

/// Per-sample perceptual distance for two `N x 3 x H x W` batches: the mean
/// absolute feature difference of each tap, averaged over taps.
pub fn perceptual_distances(
    a: &Tensor,
    b: &Tensor,
    featnet: &FeatureExtractor,
) -> Result<Vec<f64>> {
    same_shape("perceptual_distance", a, b)?;
    if a.rank() != 4 {
        return Err(Error::invalid_shape(
            "perceptual_distance",
            format!("expected N x 3 x H x W, got {:?}", a.shape()),
        ));
    }
    let n = a.shape()[0];
    let fa = featnet.feature_maps(a)?;
    let fb = featnet.feature_maps(b)?;
    let mut out = vec![0.0; n];
    for (ta, tb) in fa.iter().zip(&fb) {
        let per = ta.numel() / n;
        for (i, o) in out.iter_mut().enumerate() {
            let s = &ta.data()[i * per..(i + 1) * per];
            let t = &tb.data()[i * per..(i + 1) * per];
            let l1: f64 = s.iter().zip(t).map(|(x, y)| (x - y).abs()).sum();
            *o += l1 / per as f64;
        }
    }
    let taps = fa.len() as f64;
    Ok(out.into_iter().map(|v| v / taps).collect())
}

/// Perceptual distance between two single `3 x H x W` images.
pub fn perceptual_distance(a: &Tensor, b: &Tensor, featnet: &FeatureExtractor) -> Result<f64> {
    same_shape("perceptual_distance", a, b)?;
    let batch = |t: &Tensor| t.reshaped(&[&[1], t.shape()].concat());
    Ok(perceptual_distances(&batch(a)?, &batch(b)?, featnet)?[0])
}

/// Attack outcome over a labelled prediction set, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackStats {
    pub targeted_asr: f64,
    pub untargeted_asr: f64,
    pub nsa: f64,
    pub source_count: usize,
    pub non_source_count: usize,
}

impl AttackStats {
    /// ASR rates use source-class samples as the denominator, NSA uses the
    /// rest.
    fn from_tallies(
        to_target: usize,
        wrong: usize,
        source: usize,
        correct_rest: usize,
        rest: usize,
    ) -> Result<Self> {
        if source == 0 || rest == 0 {
            return Err(Error::InvalidArgument(format!(
                "attack metrics need source and non-source samples, got {source} and {rest}"
            )));
        }
        let pct = |k: usize, n: usize| 100.0 * k as f64 / n as f64;
        Ok(AttackStats {
            targeted_asr: pct(to_target, source),
            untargeted_asr: pct(wrong, source),
            nsa: pct(correct_rest, rest),
            source_count: source,
            non_source_count: rest,
        })
    }

    pub fn targeted_equals_untargeted(&self) -> bool {
        self.targeted_asr == self.untargeted_asr
    }
}

pub fn attack_metrics(
    predictions: &[usize],
    truths: &[usize],
    spec: &AttackSpec,
) -> Result<AttackStats> {
    if predictions.len() != truths.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            predictions.len(),
            truths.len()
        )));
    }
    let (mut to_target, mut wrong, mut source, mut correct_rest) = (0, 0, 0, 0);
    for (&p, &t) in predictions.iter().zip(truths) {
        if t == spec.source {
            source += 1;
            to_target += usize::from(p == spec.target);
            wrong += usize::from(p != spec.source);
        } else {
            correct_rest += usize::from(p == t);
        }
    }
    AttackStats::from_tallies(
        to_target,
        wrong,
        source,
        correct_rest,
        truths.len() - source,
    )
}

/// `counts[truth][pred]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn new(predictions: &[usize], truths: &[usize], classes: usize) -> Result<Self> {
        if predictions.len() != truths.len() {
            return Err(Error::InvalidArgument(format!(
                "{} predictions for {} labels",
                predictions.len(),
                truths.len()
            )));
        }
        let mut counts = vec![vec![0; classes]; classes];
        for (&p, &t) in predictions.iter().zip(truths) {
            if p >= classes || t >= classes {
                return Err(Error::InvalidArgument(format!(
                    "class id out of range for {classes} classes: truth {t}, prediction {p}"
                )));
            }
            counts[t][p] += 1;
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn row_sums(&self) -> Vec<usize> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    /// The attack statistics read off the matrix alone.
    pub fn attack_stats(&self, spec: &AttackSpec) -> Result<AttackStats> {
        if spec.classes != self.classes {
            return Err(Error::InvalidArgument(format!(
                "attack spec has {} classes, matrix has {}",
                spec.classes, self.classes
            )));
        }
        let s = spec.source;
        let source: usize = self.counts[s].iter().sum();
        let total: usize = self.row_sums().iter().sum();
        let diag_rest: usize = (0..self.classes)
            .filter(|&c| c != s)
            .map(|c| self.counts[c][c])
            .sum();
        AttackStats::from_tallies(
            self.counts[s][spec.target],
            source - self.counts[s][s],
            source,
            diag_rest,
            total - source,
        )
    }
}

/// Mean and sample standard deviation (`n - 1` divisor; 0 for one sample).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("statistics of an empty set".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Ok(MeanStd { mean, std })
    }
}
