//! Optional per-sample input transforms. Off unless requested.

use rand::Rng;

use crate::error::{config_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AugmentFlags {
    /// Horizontal flip with probability 1/2.
    pub flip: bool,
    /// Uniform rotation in ±15°, nearest neighbour.
    pub rotate: bool,
    /// Uniform integer shift in ±8 px per axis, edge padded.
    pub shift: bool,
}

impl AugmentFlags {
    pub fn any(self) -> bool {
        self.flip || self.rotate || self.shift
    }
}

pub const MAX_ROTATION_DEG: f64 = 15.0;
pub const MAX_SHIFT_PX: i64 = 8;

fn dims(img: &Tensor) -> Result<(usize, usize, usize)> {
    match *img.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => config_err(format!("expected a [C,H,W] image, got {s:?}")),
    }
}

/// Remaps every output pixel from `src(y, x)`, clamped to the image.
fn remap(img: &Tensor, src: impl Fn(usize, usize) -> (isize, isize)) -> Result<Tensor> {
    let (c, h, w) = dims(img)?;
    let d = img.data();
    let mut out = vec![0.0; d.len()];
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = src(y, x);
            let sy = sy.clamp(0, h as isize - 1) as usize;
            let sx = sx.clamp(0, w as isize - 1) as usize;
            for ch in 0..c {
                out[(ch * h + y) * w + x] = d[(ch * h + sy) * w + sx];
            }
        }
    }
    Tensor::new(img.shape().to_vec(), out)
}

pub fn flip_horizontal(img: &Tensor) -> Result<Tensor> {
    let (_, _, w) = dims(img)?;
    remap(img, |y, x| (y as isize, (w - 1 - x) as isize))
}

/// Rotation about the image centre; samples falling outside take the
/// nearest edge pixel.
pub fn rotate_nearest(img: &Tensor, degrees: f64) -> Result<Tensor> {
    let (_, h, w) = dims(img)?;
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    remap(img, |y, x| {
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        let sx = cos * dx + sin * dy + cx;
        let sy = -sin * dx + cos * dy + cy;
        (sy.round() as isize, sx.round() as isize)
    })
}

/// Moves content by `(dy, dx)` pixels, repeating edge pixels into the gap.
pub fn shift_edge(img: &Tensor, dy: isize, dx: isize) -> Result<Tensor> {
    remap(img, |y, x| (y as isize - dy, x as isize - dx))
}

/// Applies the enabled transforms independently to each image of a
/// `[N,C,H,W]` batch.
pub fn augment(batch: &Tensor, flags: AugmentFlags, rng: &mut impl Rng) -> Result<Tensor> {
    let &[n, c, h, w] = batch.shape() else {
        return config_err(format!("expected an [N,C,H,W] batch, got {:?}", batch.shape()));
    };
    if !flags.any() {
        return Ok(batch.clone());
    }
    let per = c * h * w;
    let mut out = Vec::with_capacity(batch.numel());
    for i in 0..n {
        let mut img = Tensor::new([c, h, w], batch.data()[i * per..(i + 1) * per].to_vec())?;
        if flags.flip && rng.random_bool(0.5) {
            img = flip_horizontal(&img)?;
        }
        if flags.rotate {
            img = rotate_nearest(&img, rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG))?;
        }
        if flags.shift {
            let dy = rng.random_range(-MAX_SHIFT_PX..=MAX_SHIFT_PX);
            let dx = rng.random_range(-MAX_SHIFT_PX..=MAX_SHIFT_PX);
            img = shift_edge(&img, dy as isize, dx as isize)?;
        }
        out.extend_from_slice(img.data());
    }
    Tensor::new(batch.shape().to_vec(), out)
}
