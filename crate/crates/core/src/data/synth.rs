//! Seeded synthetic "cell" images: one ellipse per image whose size,
//! elongation, interior texture and colour depend on the class.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, LabeledSample};
use crate::error::{config_err, Result};
use crate::tensor::Tensor;

struct ClassStyle {
    radius: f64,
    axis_ratio: f64,
    rings: f64,
    colour: [f64; 3],
}

fn style(k: usize, num_classes: usize) -> ClassStyle {
    let t = if num_classes > 1 { k as f64 / (num_classes - 1) as f64 } else { 0.0 };
    let hue = TAU * k as f64 / num_classes as f64;
    ClassStyle {
        radius: 0.14 + 0.16 * t,
        axis_ratio: 1.0 - 0.45 * ((k as f64 * 0.618_034).fract()),
        rings: 1.5 + 1.2 * ((k * 3) % num_classes) as f64,
        colour: [0.0, 1.0, 2.0].map(|j| 0.55 + 0.25 * (hue + j * TAU / 3.0).cos()),
    }
}

fn render(k: usize, num_classes: usize, size: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let s = style(k, num_classes);
    let n = size as f64;
    let noise = Normal::new(0.0, 0.03).expect("valid sigma");

    let radius = s.radius * n * rng.random_range(0.88..1.12);
    let ratio = (s.axis_ratio * rng.random_range(0.92..1.08)).min(1.0);
    let (a, b) = (radius, radius * ratio);
    let theta = rng.random_range(0.0..PI);
    let (cos_t, sin_t) = (theta.cos(), theta.sin());
    let cx = n / 2.0 + rng.random_range(-n / 10.0..n / 10.0);
    let cy = n / 2.0 + rng.random_range(-n / 10.0..n / 10.0);
    let phase = rng.random_range(0.0..TAU);
    let colour = s.colour.map(|c| (c + rng.random_range(-0.06..0.06)).clamp(0.0, 1.0));
    let background = [0.84, 0.80, 0.82].map(|c: f64| c + rng.random_range(-0.04..0.04));
    let nucleus = 0.3 * rng.random_range(0.85..1.15);

    let plane = size * size;
    let mut data = vec![0.0; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let u = (dx * cos_t + dy * sin_t) / a;
            let v = (-dx * sin_t + dy * cos_t) / b;
            let rho = (u * u + v * v).sqrt();
            for ch in 0..3 {
                let value = if rho < nucleus {
                    0.2 + 0.1 * colour[ch]
                } else if rho < 1.0 {
                    colour[ch] * (1.0 + 0.18 * (TAU * s.rings * rho + phase).sin())
                } else {
                    background[ch]
                };
                data[ch * plane + y * size + x] = (value + noise.sample(rng)).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new([3, size, size], data).expect("consistent shape")
}

/// `n_per_class` images per class, class-major order. Bytes are a pure
/// function of the arguments.
pub fn synth_dataset(n_per_class: usize, num_classes: usize, image_size: usize, seed: u64) -> Result<Dataset> {
    if n_per_class < 1 || num_classes < 1 {
        return config_err("synthetic corpus needs n_per_class >= 1 and num_classes >= 1");
    }
    if image_size < 8 {
        return config_err(format!("synthetic image size {image_size} below 8"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n_per_class * num_classes);
    for k in 0..num_classes {
        for i in 0..n_per_class {
            samples.push(LabeledSample {
                pixels: render(k, num_classes, image_size, &mut rng),
                label: k,
                source_id: format!("synth/class_{k}/{i:05}"),
            });
        }
    }
    Ok(Dataset { samples, class_names: (0..num_classes).map(|k| format!("class_{k}")).collect() })
}
