//! Image-processing primitives: morphology, connected components, smoothing, Canny.

use std::collections::VecDeque;

use ndarray::Array2;

use crate::scalar::Scalar;

const CROSS: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
const RING8: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

fn neighbour(dim: (usize, usize), r: usize, c: usize, d: (isize, isize)) -> Option<(usize, usize)> {
    let (rr, cc) = (r as isize + d.0, c as isize + d.1);
    (rr >= 0 && cc >= 0 && (rr as usize) < dim.0 && (cc as usize) < dim.1).then_some((rr as usize, cc as usize))
}

/// One dilation with the 3x3 cross structuring element.
pub fn dilate_cross(mask: &Array2<bool>) -> Array2<bool> {
    let dim = mask.dim();
    Array2::from_shape_fn(dim, |(r, c)| {
        mask[[r, c]] || CROSS.iter().any(|&d| neighbour(dim, r, c, d).is_some_and(|(rr, cc)| mask[[rr, cc]]))
    })
}

/// One erosion with the 3x3 cross; pixels outside the image count as foreground.
pub fn erode_cross(mask: &Array2<bool>) -> Array2<bool> {
    let dim = mask.dim();
    Array2::from_shape_fn(dim, |(r, c)| {
        mask[[r, c]] && CROSS.iter().all(|&d| neighbour(dim, r, c, d).is_none_or(|(rr, cc)| mask[[rr, cc]]))
    })
}

pub fn dilate_n(mask: &Array2<bool>, n: usize) -> Array2<bool> {
    (0..n).fold(mask.clone(), |m, _| dilate_cross(&m))
}

pub fn erode_n(mask: &Array2<bool>, n: usize) -> Array2<bool> {
    (0..n).fold(mask.clone(), |m, _| erode_cross(&m))
}

/// 8-connected component labels (0 = background) and the size of each component.
pub fn label_components(mask: &Array2<bool>) -> (Array2<u32>, Vec<usize>) {
    let dim = mask.dim();
    let mut labels = Array2::<u32>::zeros(dim);
    let mut sizes = vec![0usize];
    let mut queue = VecDeque::new();
    for r in 0..dim.0 {
        for c in 0..dim.1 {
            if !mask[[r, c]] || labels[[r, c]] != 0 {
                continue;
            }
            let id = sizes.len() as u32;
            let mut size = 0;
            labels[[r, c]] = id;
            queue.push_back((r, c));
            while let Some((y, x)) = queue.pop_front() {
                size += 1;
                for &d in &RING8 {
                    if let Some((yy, xx)) = neighbour(dim, y, x, d) {
                        if mask[[yy, xx]] && labels[[yy, xx]] == 0 {
                            labels[[yy, xx]] = id;
                            queue.push_back((yy, xx));
                        }
                    }
                }
            }
            sizes.push(size);
        }
    }
    (labels, sizes)
}

/// Drops 8-connected components with fewer than `min_size` pixels.
pub fn remove_small_components(mask: &Array2<bool>, min_size: usize) -> Array2<bool> {
    let (labels, sizes) = label_components(mask);
    labels.mapv(|l| l != 0 && sizes[l as usize] >= min_size)
}

/// Keeps only the largest 8-connected component (ties go to the first found).
pub fn largest_component(mask: &Array2<bool>) -> Array2<bool> {
    let (labels, sizes) = label_components(mask);
    let Some((best, _)) = sizes.iter().enumerate().skip(1).max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0))) else {
        return mask.clone();
    };
    labels.mapv(|l| l as usize == best)
}

/// Mean over a `(2r+1)^2` window clipped to the image, via a summed-area table.
pub fn box_mean<T: Scalar>(img: &Array2<T>, radius: usize) -> Array2<T> {
    let (h, w) = img.dim();
    let mut sat = Array2::<f64>::zeros((h + 1, w + 1));
    for r in 0..h {
        let mut row = 0.0;
        for c in 0..w {
            row += img[[r, c]].as_f64();
            sat[[r + 1, c + 1]] = sat[[r, c + 1]] + row;
        }
    }
    Array2::from_shape_fn((h, w), |(r, c)| {
        let (r0, r1) = (r.saturating_sub(radius), (r + radius + 1).min(h));
        let (c0, c1) = (c.saturating_sub(radius), (c + radius + 1).min(w));
        let s = sat[[r1, c1]] - sat[[r0, c1]] - sat[[r1, c0]] + sat[[r0, c0]];
        T::lit(s / ((r1 - r0) * (c1 - c0)) as f64)
    })
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * n - 2;
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - j;
    }
    j as usize
}

pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let k: Vec<f64> = (-(radius as isize)..=radius as isize)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with reflected borders, truncated at 4 sigma.
pub fn gaussian_blur(img: &Array2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (4.0 * sigma).ceil() as usize;
    let k = gaussian_kernel(sigma, radius);
    let (h, w) = img.dim();
    let tmp = Array2::from_shape_fn((h, w), |(r, c)| {
        k.iter().enumerate().map(|(i, &kv)| kv * img[[r, reflect(c as isize + i as isize - radius as isize, w)]]).sum::<f64>()
    });
    Array2::from_shape_fn((h, w), |(r, c)| {
        k.iter().enumerate().map(|(i, &kv)| kv * tmp[[reflect(r as isize + i as isize - radius as isize, h), c]]).sum::<f64>()
    })
}

/// Sobel derivatives `(d/dcol, d/drow)` with reflected borders.
pub fn sobel(img: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let (h, w) = img.dim();
    let at = |r: isize, c: isize| img[[reflect(r, h), reflect(c, w)]];
    let gx = Array2::from_shape_fn((h, w), |(r, c)| {
        let (r, c) = (r as isize, c as isize);
        (at(r - 1, c + 1) + 2.0 * at(r, c + 1) + at(r + 1, c + 1)) - (at(r - 1, c - 1) + 2.0 * at(r, c - 1) + at(r + 1, c - 1))
    });
    let gy = Array2::from_shape_fn((h, w), |(r, c)| {
        let (r, c) = (r as isize, c as isize);
        (at(r + 1, c - 1) + 2.0 * at(r + 1, c) + at(r + 1, c + 1)) - (at(r - 1, c - 1) + 2.0 * at(r - 1, c) + at(r - 1, c + 1))
    });
    (gx, gy)
}

/// Canny parameters; thresholds are fractions of the gradient-magnitude range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CannyParams {
    pub sigma: f64,
    pub low: f64,
    pub high: f64,
}

impl Default for CannyParams {
    fn default() -> Self {
        Self { sigma: 1.5, low: 0.1, high: 0.2 }
    }
}

pub fn canny<T: Scalar>(img: &Array2<T>, params: CannyParams) -> Array2<bool> {
    let (h, w) = img.dim();
    let smooth = gaussian_blur(&img.mapv(|v| v.as_f64()), params.sigma);
    let (gx, gy) = sobel(&smooth);
    let mag = Array2::from_shape_fn((h, w), |(r, c)| gx[[r, c]].hypot(gy[[r, c]]));
    let (lo_m, hi_m) = mag.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &m| (a.min(m), b.max(m)));
    let range = hi_m - lo_m;
    if !(range > 1e-12) {
        return Array2::from_elem((h, w), false);
    }
    let at = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            0.0
        } else {
            mag[[r as usize, c as usize]]
        }
    };
    // non-maximum suppression: strictly above the "behind" neighbour, at least the "ahead" one
    let thin = Array2::from_shape_fn((h, w), |(r, c)| {
        let m = mag[[r, c]];
        if m <= 0.0 {
            return 0.0;
        }
        let angle = gy[[r, c]].atan2(gx[[r, c]]).to_degrees().rem_euclid(180.0);
        let (dr, dc) = if !(22.5..157.5).contains(&angle) {
            (0, 1)
        } else if angle < 67.5 {
            (1, 1)
        } else if angle < 112.5 {
            (1, 0)
        } else {
            (1, -1)
        };
        let (ri, ci) = (r as isize, c as isize);
        let behind = at(ri - dr, ci - dc);
        let ahead = at(ri + dr, ci + dc);
        if m > behind && m >= ahead {
            m
        } else {
            0.0
        }
    });
    let low = lo_m + params.low * range;
    let high = lo_m + params.high * range;
    let mut edges = Array2::from_elem((h, w), false);
    let mut queue = VecDeque::new();
    for ((r, c), &m) in thin.indexed_iter() {
        if m >= high {
            edges[[r, c]] = true;
            queue.push_back((r, c));
        }
    }
    while let Some((r, c)) = queue.pop_front() {
        for &d in &RING8 {
            if let Some((rr, cc)) = neighbour((h, w), r, c, d) {
                if !edges[[rr, cc]] && thin[[rr, cc]] >= low {
                    edges[[rr, cc]] = true;
                    queue.push_back((rr, cc));
                }
            }
        }
    }
    edges
}
