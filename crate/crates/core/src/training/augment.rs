use ndarray::Array2;
use rand::Rng;

use super::config::AugmentConfig;
use crate::scalar::Scalar;

/// One geometric transform, drawn once and applied to an image and all of its targets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform {
    pub flip: bool,
    pub degrees: f64,
}

impl Transform {
    pub const IDENTITY: Transform = Transform { flip: false, degrees: 0.0 };

    pub fn draw<R: Rng>(config: &AugmentConfig, rng: &mut R) -> Self {
        let flip = config.horizontal_flip && rng.random::<bool>();
        let (lo, hi) = config.rotation_degrees;
        let degrees = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        Self { flip, degrees }
    }

    /// Source coordinate for output pixel `(r, c)`: inverse rotation about the centre, then flip.
    fn source(&self, r: usize, c: usize, h: usize, w: usize) -> (f64, f64) {
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (y, x) = (r as f64 - cy, c as f64 - cx);
        let t = -self.degrees.to_radians();
        let (s, co) = t.sin_cos();
        let (sy, sx) = (co * y - s * x + cy, s * y + co * x + cx);
        let sx = if self.flip { w as f64 - 1.0 - sx } else { sx };
        (sy, sx)
    }

    /// Bilinear resampling with replicated borders.
    pub fn apply_image<T: Scalar>(&self, img: &Array2<T>) -> Array2<T> {
        if self.degrees == 0.0 {
            return self.flip_only(img);
        }
        let (h, w) = img.dim();
        let at = |r: isize, c: isize| img[[r.clamp(0, h as isize - 1) as usize, c.clamp(0, w as isize - 1) as usize]].as_f64();
        Array2::from_shape_fn((h, w), |(r, c)| {
            let (sy, sx) = self.source(r, c, h, w);
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            let (y0, x0) = (y0 as isize, x0 as isize);
            let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
            T::lit(v)
        })
    }

    /// Nearest-neighbour resampling with replicated borders, for label maps.
    pub fn apply_labels<L: Copy>(&self, labels: &Array2<L>) -> Array2<L> {
        if self.degrees == 0.0 {
            return self.flip_only(labels);
        }
        let (h, w) = labels.dim();
        Array2::from_shape_fn((h, w), |(r, c)| {
            let (sy, sx) = self.source(r, c, h, w);
            let y = (sy.round() as isize).clamp(0, h as isize - 1) as usize;
            let x = (sx.round() as isize).clamp(0, w as isize - 1) as usize;
            labels[[y, x]]
        })
    }

    fn flip_only<L: Copy>(&self, a: &Array2<L>) -> Array2<L> {
        if !self.flip {
            return a.clone();
        }
        let w = a.ncols();
        Array2::from_shape_fn(a.dim(), |(r, c)| a[[r, w - 1 - c]])
    }
}

/// A training example whose image and spatial targets can be transformed together.
pub trait Augment: Sized {
    fn transformed(&self, t: &Transform) -> Self;
    fn width(&self) -> usize;
    /// Columns `[x0, x0 + width)` of the image and every target.
    fn crop_columns(&self, x0: usize, width: usize) -> Self;
}

/// Draws one transform and applies it to the sample and its targets.
pub fn augment<S: Augment, R: Rng>(sample: &S, config: &AugmentConfig, rng: &mut R) -> S {
    sample.transformed(&Transform::draw(config, rng))
}
