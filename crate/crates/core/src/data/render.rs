use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const SHAPE_NAMES: [&str; 8] = [
    "disk", "square", "triangle", "cross", "ring", "star", "stripes", "checker",
];

/// Sub-pixel grid used for anti-aliased edge coverage.
const SUPERSAMPLE: usize = 4;
const BACKGROUND_NOISE: f64 = 0.03;

/// Whether the point `(x, y)`, in units of the shape radius with the shape
/// centred at the origin and `y` pointing up, lies inside the shape.
fn inside(class_id: usize, x: f64, y: f64) -> bool {
    let r = x.hypot(y);
    let box_ = x.abs().max(y.abs());
    match class_id {
        0 => r <= 1.0,
        1 => box_ <= 0.8,
        2 => {
            // Equilateral, apex up; edges at distance 1/2 from the centre.
            [PI / 2.0 + PI, PI / 6.0, 5.0 * PI / 6.0]
                .iter()
                .all(|a| x * a.cos() + y * a.sin() <= 0.5)
        }
        3 => {
            let w = 0.3;
            (x.abs() <= w && y.abs() <= 1.0) || (y.abs() <= w && x.abs() <= 1.0)
        }
        4 => (0.55..=1.0).contains(&r),
        5 => {
            let theta = y.atan2(x) - PI / 2.0;
            let lobe = (0.5 * (1.0 + (5.0 * theta).cos())).powi(2);
            r <= 0.42 + 0.58 * lobe
        }
        6 => box_ <= 0.85 && ((x + y) / 0.5).rem_euclid(1.0) < 0.5,
        7 => box_ <= 0.85 && ((x / 0.425).floor() + (y / 0.425).floor()).rem_euclid(2.0) == 0.0,
        _ => unreachable!("class id checked by caller"),
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector as u8 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Draws one `3 x size x size` image of shape class `class_id`.
///
/// The shape centre is offset by up to 25% of the frame, its diameter is
/// 30-60% of the frame, its colour has a random hue, and it sits on a dark
/// grey background with low-amplitude Gaussian noise. Saturation is kept
/// moderate so the shape is brighter than the background in every channel.
pub fn render_sample(class_id: usize, size: usize, rng: &mut impl Rng) -> Result<Tensor> {
    if class_id >= SHAPE_NAMES.len() {
        return Err(Error::InvalidArgument(format!(
            "class id {class_id} out of range (renderer knows {} shapes)",
            SHAPE_NAMES.len()
        )));
    }
    if size == 0 {
        return Err(Error::InvalidArgument("image size must be positive".into()));
    }
    let s = size as f64;
    let cx = s / 2.0 + rng.random_range(-0.25..=0.25) * s;
    let cy = s / 2.0 + rng.random_range(-0.25..=0.25) * s;
    let radius = rng.random_range(0.30..=0.60) * s / 2.0;
    let fg = hsv_to_rgb(
        rng.random::<f64>(),
        rng.random_range(0.25..=0.65),
        rng.random_range(0.75..=1.0),
    );
    let bg_level: f64 = rng.random_range(0.05..=0.2);
    let bg_tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.03..=0.03));

    let plane = size * size;
    let mut data = vec![0.0; 3 * plane];
    let step = 1.0 / SUPERSAMPLE as f64;
    for py in 0..size {
        for px in 0..size {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let ix = px as f64 + (sx as f64 + 0.5) * step - cx;
                    let iy = cy - (py as f64 + (sy as f64 + 0.5) * step);
                    hits += usize::from(inside(class_id, ix / radius, iy / radius));
                }
            }
            let cover = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
            for c in 0..3 {
                let noise = BACKGROUND_NOISE * rng.sample::<f64, _>(StandardNormal);
                let bg = bg_level + bg_tint[c] + noise;
                data[c * plane + py * size + px] =
                    (cover * fg[c] + (1.0 - cover) * bg).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(vec![3, size, size], data)
}
