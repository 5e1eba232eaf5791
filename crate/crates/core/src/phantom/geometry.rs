//! Random but smooth anatomy shared by every frame of a phantom volume.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::oct::LAYER_COUNT;

/// Band-limited 2D field over `(frame, A-line)` with `|value| <= 1`.
#[derive(Debug, Clone)]
pub(crate) struct SmoothField {
    terms: Vec<(f64, f64, f64, f64)>,
    norm: f64,
}

impl SmoothField {
    pub fn new<R: Rng>(rng: &mut R, frame_extent: f64, width: f64) -> Self {
        let n = 4;
        let mut terms = Vec::with_capacity(n);
        for i in 0..n {
            let amp = 1.0 / (1.0 + i as f64);
            let ka = rng.random_range(0.3..2.5) / width;
            let kf = rng.random_range(0.0..1.5) / frame_extent;
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            terms.push((amp, kf, ka, phase));
        }
        let norm = terms.iter().map(|t| t.0).sum();
        Self { terms, norm }
    }

    pub fn at(&self, f: f64, a: f64) -> f64 {
        let s: f64 = self
            .terms
            .iter()
            .map(|&(amp, kf, ka, ph)| amp * (std::f64::consts::TAU * (kf * f + ka * a) + ph).sin())
            .sum();
        s / self.norm
    }
}

/// Layer boundary surfaces: `top(k, f, a)` is the first row of layer `k`.
#[derive(Debug, Clone)]
pub(crate) struct LayerSurfaces {
    base_tops: [f64; LAYER_COUNT],
    common: SmoothField,
    per_boundary: Vec<SmoothField>,
    amplitude: f64,
    height: f64,
}

impl LayerSurfaces {
    pub fn new<R: Rng>(
        rng: &mut R,
        mean_thicknesses: &[f64; LAYER_COUNT],
        choroid_scale: (f64, f64),
        amplitude: f64,
        height: usize,
        frame_extent: f64,
        width: f64,
    ) -> Self {
        let mut base_tops = [0.0; LAYER_COUNT];
        let mut acc = 0.0;
        for k in 0..LAYER_COUNT {
            base_tops[k] = acc;
            let scale = if k == crate::oct::Layer::Choroid as usize {
                rng.random_range(choroid_scale.0..=choroid_scale.1)
            } else {
                rng.random_range(0.85..=1.15)
            };
            acc += mean_thicknesses[k] * scale;
        }
        let overflow = acc - height as f64 + 1.0;
        if overflow > 0.0 {
            // trim the layers above the retina so the stack still fits
            let shrink = overflow.min(base_tops[1] - 1.0).max(0.0);
            for t in base_tops.iter_mut().skip(1) {
                *t -= shrink;
            }
        }
        let common = SmoothField::new(rng, frame_extent, width);
        let per_boundary = (0..LAYER_COUNT).map(|_| SmoothField::new(rng, frame_extent, width)).collect();
        Self { base_tops, common, per_boundary, amplitude, height: height as f64 }
    }

    /// Fractional top rows of all layers at one en-face position, non-decreasing in `k`.
    pub fn tops(&self, f: f64, a: f64) -> [f64; LAYER_COUNT] {
        let shift = self.amplitude * self.common.at(f, a);
        let mut tops = [0.0; LAYER_COUNT];
        for k in 1..LAYER_COUNT {
            let own = 0.5 * self.amplitude * self.per_boundary[k].at(f, a);
            let t = (self.base_tops[k] + shift + own).clamp(0.0, self.height);
            tops[k] = t.max(tops[k - 1]);
        }
        tops
    }
}

/// Smooth curve in the en-face plane with a constant radius.
#[derive(Debug, Clone)]
pub(crate) struct VesselPath {
    pub points: Vec<(f64, f64)>,
    pub radius: f64,
    /// Relative depth of the vessel centre inside its host band, in `[0, 1]`.
    pub depth_center: f64,
}

impl VesselPath {
    pub fn random<R: Rng>(rng: &mut R, frame_extent: f64, width: f64, radius: (f64, f64)) -> Self {
        let radius = if radius.1 > radius.0 { rng.random_range(radius.0..=radius.1) } else { radius.0 };
        let f = rng.random_range(0.0..frame_extent);
        let a = rng.random_range(0.0..width);
        let heading: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let turn = Normal::new(0.0, 0.06).expect("valid sigma");
        // walk both directions from the seed point so the curve crosses the domain
        let mut forward = Vec::new();
        let mut backward = Vec::new();
        let max_steps = (2.0 * (frame_extent + width)) as usize;
        let margin = radius + 2.0;
        for (dir, out) in [(1.0, &mut forward), (-1.0, &mut backward)] {
            let (mut pf, mut pa, mut h) = (f, a, heading);
            for _ in 0..max_steps {
                out.push((pf, pa));
                h += turn.sample(rng);
                pf += dir * h.sin();
                pa += dir * h.cos();
                if pf < -margin || pf > frame_extent + margin || pa < -margin || pa > width + margin {
                    break;
                }
            }
        }
        backward.reverse();
        backward.pop();
        backward.extend(forward);
        Self { points: backward, radius, depth_center: rng.random_range(0.4..=0.6) }
    }
}

/// Per-pixel normalized distance `d / r` to the nearest vessel (infinite where none).
#[derive(Debug, Clone)]
pub(crate) struct VesselField {
    pub width: usize,
    /// `(normalized distance, vessel index)` per en-face pixel.
    pub nearest: Vec<(f64, usize)>,
}

impl VesselField {
    pub fn rasterize(paths: &[VesselPath], frames: usize, width: usize) -> Self {
        let mut nearest = vec![(f64::INFINITY, usize::MAX); frames * width];
        for (vi, p) in paths.iter().enumerate() {
            let r = p.radius;
            let reach = r.ceil() as isize + 1;
            for &(pf, pa) in &p.points {
                let (cf, ca) = (pf.round() as isize, pa.round() as isize);
                for df in -reach..=reach {
                    let fi = cf + df;
                    if fi < 0 || fi >= frames as isize {
                        continue;
                    }
                    for da in -reach..=reach {
                        let ai = ca + da;
                        if ai < 0 || ai >= width as isize {
                            continue;
                        }
                        let d = ((fi as f64 - pf).powi(2) + (ai as f64 - pa).powi(2)).sqrt() / r;
                        let slot = &mut nearest[fi as usize * width + ai as usize];
                        if d < slot.0 {
                            *slot = (d, vi);
                        }
                    }
                }
            }
        }
        Self { width, nearest }
    }

    pub fn at(&self, f: usize, a: usize) -> (f64, usize) {
        self.nearest[f * self.width + a]
    }

    pub fn inside(&self, f: usize, a: usize) -> bool {
        self.at(f, a).0 < 1.0
    }
}

/// Flat-topped cross-section profile: 1 at the centre line, falling to 0 at the wall.
pub(crate) fn vessel_profile(normalized_distance: f64) -> f64 {
    if normalized_distance >= 1.0 {
        0.0
    } else {
        (1.0 - normalized_distance.powi(8)).powf(0.125)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn smooth_field_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = SmoothField::new(&mut rng, 64.0, 192.0);
        for i in 0..64 {
            for j in 0..192 {
                assert!(f.at(i as f64, j as f64).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn tops_are_ordered() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let th = [24.0, 10.0, 12.0, 9.0, 9.0, 7.0, 16.0, 9.0, 6.0, 36.0, 30.0, 14.0];
        let s = LayerSurfaces::new(&mut rng, &th, (0.7, 1.3), 6.0, 192, 64.0, 192.0);
        for a in 0..192 {
            let t = s.tops(3.0, a as f64);
            assert!(t.windows(2).all(|w| w[0] <= w[1]));
            assert!(t[11] <= 192.0);
        }
    }

    #[test]
    fn vessel_paths_cross_the_domain() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = VesselPath::random(&mut rng, 64.0, 192.0, (2.0, 4.0));
        assert!(p.points.len() > 30);
        let field = VesselField::rasterize(&[p], 64, 192);
        assert!(field.nearest.iter().any(|&(d, _)| d < 1.0));
        assert_eq!(vessel_profile(0.0), 1.0);
        assert_eq!(vessel_profile(1.0), 0.0);
    }
}
