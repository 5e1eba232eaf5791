use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oct::RegionMask;

/// Random vessel-like masks for inpainting training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskSampler {
    /// Stroke width range in pixels, inclusive.
    pub width_px: (usize, usize),
    /// Number of strokes per mask, inclusive.
    pub strokes: (usize, usize),
    /// Steps per stroke, inclusive.
    pub steps: (usize, usize),
    /// Largest allowed covered fraction.
    pub max_fraction: f64,
}

impl Default for MaskSampler {
    fn default() -> Self {
        Self { width_px: (3, 9), strokes: (1, 3), steps: (20, 60), max_fraction: 0.4 }
    }
}

const MAX_TRIES: usize = 100;

impl MaskSampler {
    pub fn validate(&self) -> Result<()> {
        let ok = self.width_px.0 >= 1
            && self.width_px.0 <= self.width_px.1
            && self.strokes.0 >= 1
            && self.strokes.0 <= self.strokes.1
            && self.steps.0 >= 1
            && self.steps.0 <= self.steps.1
            && self.max_fraction > 0.0
            && self.max_fraction <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config("deshadow.sampler", format!("invalid sampler {self:?}")))
        }
    }

    /// Random-walk strokes with a slowly turning heading, stamped with a disc of the stroke width.
    pub fn stroke_mask<R: Rng>(&self, dim: (usize, usize), rng: &mut R) -> Array2<bool> {
        let (h, w) = dim;
        let mut m = Array2::from_elem(dim, false);
        for _ in 0..rng.random_range(self.strokes.0..=self.strokes.1) {
            let width = rng.random_range(self.width_px.0..=self.width_px.1) as f64;
            let r = width / 2.0;
            let (mut y, mut x) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
            let mut heading: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            for _ in 0..rng.random_range(self.steps.0..=self.steps.1) {
                let (y0, y1) = ((y - r).floor().max(0.0) as usize, ((y + r).ceil() as usize).min(h));
                let (x0, x1) = ((x - r).floor().max(0.0) as usize, ((x + r).ceil() as usize).min(w));
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        let (dy, dx) = (yy as f64 + 0.5 - y, xx as f64 + 0.5 - x);
                        if dy * dy + dx * dx <= r * r {
                            m[[yy, xx]] = true;
                        }
                    }
                }
                heading += rng.random_range(-0.35..0.35);
                y = (y + 2.0 * heading.sin()).clamp(0.0, h as f64 - 1.0);
                x = (x + 2.0 * heading.cos()).clamp(0.0, w as f64 - 1.0);
            }
        }
        m
    }

    /// A mask with non-zero area not exceeding `max_fraction`; degenerate draws are rejected and redrawn.
    pub fn sample<R: Rng>(&self, dim: (usize, usize), rng: &mut R) -> Result<RegionMask> {
        self.validate()?;
        if dim.0 == 0 || dim.1 == 0 {
            return Err(Error::Data("cannot sample a mask for an empty image".into()));
        }
        let limit = (self.max_fraction * (dim.0 * dim.1) as f64) as usize;
        for _ in 0..MAX_TRIES {
            let m = self.stroke_mask(dim, rng);
            let n = m.iter().filter(|&&b| b).count();
            if n > 0 && n <= limit {
                return Ok(RegionMask::new(m));
            }
        }
        Err(Error::Data(format!("mask sampler found no acceptable mask for {dim:?} in {MAX_TRIES} draws")))
    }
}
