//! Convolution kernels via im2col and GEMM.

use super::Tensor;
use crate::scalar::Scalar;

/// Geometry of a 2D convolution; kernel size comes from the weight tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub dilation: (usize, usize),
}

impl ConvGeom {
    pub const fn same(k: usize) -> Self {
        Self { stride: (1, 1), pad: (k / 2, k / 2), dilation: (1, 1) }
    }

    pub const fn strided(stride: (usize, usize), pad: (usize, usize)) -> Self {
        Self { stride, pad, dilation: (1, 1) }
    }

    pub const fn dilated(k: usize, d: usize) -> Self {
        Self { stride: (1, 1), pad: (d * (k / 2), d * (k / 2)), dilation: (d, d) }
    }

    pub fn out_dim(&self, h: usize, w: usize, kh: usize, kw: usize) -> (usize, usize) {
        let eh = self.dilation.0 * (kh - 1) + 1;
        let ew = self.dilation.1 * (kw - 1) + 1;
        let oh = (h + 2 * self.pad.0).saturating_sub(eh) / self.stride.0 + 1;
        let ow = (w + 2 * self.pad.1).saturating_sub(ew) / self.stride.1 + 1;
        (oh, ow)
    }

    fn is_pointwise(&self, kh: usize, kw: usize) -> bool {
        kh == 1 && kw == 1 && self.stride == (1, 1) && self.pad == (0, 0)
    }
}

struct Dims {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

/// Output columns `[lo, hi)` whose input column `ox*stride + off` lies inside `0..w`.
fn valid_range(off: isize, stride: usize, w: usize, ow: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if off >= 0 { 0 } else { ((-off + s - 1) / s) as usize };
    let last = w as isize - 1 - off;
    let hi = if last < 0 { 0 } else { (last / s + 1) as usize };
    (lo.min(ow), hi.min(ow).max(lo.min(ow)))
}

/// Unfolds one sample `(cin, h, w)` into `(cin*kh*kw, oh*ow)` columns.
fn im2col<T: Scalar>(x: &[T], d: &Dims, g: &ConvGeom, cols: &mut [T]) {
    let p = d.oh * d.ow;
    for ci in 0..d.cin {
        let plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (ci * d.kh + ky) * d.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                let off_y = (ky * g.dilation.0) as isize - g.pad.0 as isize;
                let off_x = (kx * g.dilation.1) as isize - g.pad.1 as isize;
                let (lo, hi) = valid_range(off_x, g.stride.1, d.w, d.ow);
                for oy in 0..d.oh {
                    let iy = (oy * g.stride.0) as isize + off_y;
                    let out = &mut dst[oy * d.ow..(oy + 1) * d.ow];
                    if iy < 0 || iy >= d.h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    out[..lo].fill(T::zero());
                    out[hi..].fill(T::zero());
                    if g.stride.1 == 1 {
                        let start = (lo as isize + off_x) as usize;
                        out[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for (ox, o) in out[lo..hi].iter_mut().enumerate() {
                            *o = src[(((ox + lo) * g.stride.1) as isize + off_x) as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `dx`.
fn col2im<T: Scalar>(cols: &[T], d: &Dims, g: &ConvGeom, dx: &mut [T]) {
    let p = d.oh * d.ow;
    for ci in 0..d.cin {
        let plane = &mut dx[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (ci * d.kh + ky) * d.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                let off_y = (ky * g.dilation.0) as isize - g.pad.0 as isize;
                let off_x = (kx * g.dilation.1) as isize - g.pad.1 as isize;
                let (lo, hi) = valid_range(off_x, g.stride.1, d.w, d.ow);
                for oy in 0..d.oh {
                    let iy = (oy * g.stride.0) as isize + off_y;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    let seg = &src[oy * d.ow + lo..oy * d.ow + hi];
                    if g.stride.1 == 1 {
                        let start = (lo as isize + off_x) as usize;
                        for (o, &v) in dst[start..start + seg.len()].iter_mut().zip(seg) {
                            *o += v;
                        }
                    } else {
                        for (ox, &v) in seg.iter().enumerate() {
                            dst[(((ox + lo) * g.stride.1) as isize + off_x) as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn dims<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, g: &ConvGeom) -> Dims {
    let [_, cin, h, wd] = x.shape();
    let [_, wcin, kh, kw] = w.shape();
    assert_eq!(cin, wcin, "conv input channels {cin} != weight channels {wcin}");
    let (oh, ow) = g.out_dim(h, wd, kh, kw);
    Dims { cin, h, w: wd, kh, kw, oh, ow }
}

pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, g: &ConvGeom) -> Tensor<T> {
    let d = dims(x, w, g);
    let n = x.shape()[0];
    let cout = w.shape()[0];
    let k = d.cin * d.kh * d.kw;
    let p = d.oh * d.ow;
    let mut out = Tensor::zeros([n, cout, d.oh, d.ow]);
    let pointwise = g.is_pointwise(d.kh, d.kw);
    let scratch = if pointwise { 0 } else { k * p };
    T::with_scratch(0, scratch, |cols| {
        for s in 0..n {
            let src: &[T] = if pointwise {
                x.sample(s)
            } else {
                im2col(x.sample(s), &d, g, cols);
                cols
            };
            let dst = out.sample_mut(s);
            if let Some(b) = b {
                for (co, chunk) in dst.chunks_mut(p).enumerate() {
                    chunk.fill(b.data()[co]);
                }
            }
            let beta = if b.is_some() { T::one() } else { T::zero() };
            T::gemm(cout, k, p, T::one(), w.data(), k as isize, 1, src, p as isize, 1, beta, dst, p as isize, 1);
        }
    });
    out
}

/// Gradients of a convolution given the upstream gradient `dy`.
pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let d = dims(x, w, g);
    let n = x.shape()[0];
    let cout = w.shape()[0];
    let k = d.cin * d.kh * d.kw;
    let p = d.oh * d.ow;
    let pointwise = g.is_pointwise(d.kh, d.kw);
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(w.shape()));
    let mut db = need_db.then(|| Tensor::zeros([1, cout, 1, 1]));
    let cols_len = if pointwise || !need_dw { 0 } else { k * p };
    let dcols_len = if need_dx && !pointwise { k * p } else { 0 };
    T::with_scratch(0, cols_len, |cols| {
        T::with_scratch(1, dcols_len, |dcols| {
            for s in 0..n {
                let dys = dy.sample(s);
                if let Some(db) = db.as_mut() {
                    for (co, chunk) in dys.chunks(p).enumerate() {
                        db.data_mut()[co] += chunk.iter().copied().sum::<T>();
                    }
                }
                if let Some(dw) = dw.as_mut() {
                    let src: &[T] = if pointwise {
                        x.sample(s)
                    } else {
                        im2col(x.sample(s), &d, g, cols);
                        cols
                    };
                    // dw[cout, k] += dy[cout, p] * cols[k, p]^T
                    T::gemm(cout, p, k, T::one(), dys, p as isize, 1, src, 1, p as isize, T::one(), dw.data_mut(), k as isize, 1);
                }
                if let Some(dx) = dx.as_mut() {
                    if pointwise {
                        T::gemm(k, cout, p, T::one(), w.data(), 1, k as isize, dys, p as isize, 1, T::one(), dx.sample_mut(s), p as isize, 1);
                    } else {
                        // dcols[k, p] = w[cout, k]^T * dy[cout, p]
                        T::gemm(k, cout, p, T::one(), w.data(), 1, k as isize, dys, p as isize, 1, T::zero(), dcols, p as isize, 1);
                        col2im(dcols, &d, g, dx.sample_mut(s));
                    }
                }
            }
        })
    });
    ConvGrads { dx, dw, db }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, g: &ConvGeom) -> Tensor<f64> {
        let [n, cin, h, wd] = x.shape();
        let [cout, _, kh, kw] = w.shape();
        let (oh, ow) = g.out_dim(h, wd, kh, kw);
        Tensor::from_fn([n, cout, oh, ow], |[s, co, oy, ox]| {
            let mut acc = b.data()[co];
            for ci in 0..cin {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = (oy * g.stride.0 + ky * g.dilation.0) as isize - g.pad.0 as isize;
                        let ix = (ox * g.stride.1 + kx * g.dilation.1) as isize - g.pad.1 as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            acc += x.at([s, ci, iy as usize, ix as usize]) * w.at([co, ci, ky, kx]);
                        }
                    }
                }
            }
            acc
        })
    }

    fn pseudo(shape: [usize; 4], seed: f64) -> Tensor<f64> {
        let mut i = 0.0;
        Tensor::from_fn(shape, |_| {
            i += 1.0;
            ((i * 12.9898 + seed) * 43758.5453).sin()
        })
    }

    #[test]
    fn forward_matches_direct_sum_for_assorted_geometries() {
        let geoms = [
            ConvGeom::same(3),
            ConvGeom::strided((2, 2), (1, 1)),
            ConvGeom::strided((2, 1), (1, 1)),
            ConvGeom::dilated(3, 2),
            ConvGeom::strided((1, 1), (0, 0)),
        ];
        for (i, g) in geoms.iter().enumerate() {
            let k = if i == 4 { 1 } else if i == 1 { 4 } else { 3 };
            let x = pseudo([2, 3, 9, 7], i as f64);
            let w = pseudo([4, 3, k, k], 10.0 + i as f64);
            let b = pseudo([1, 4, 1, 1], 20.0 + i as f64);
            let got = conv2d_forward(&x, &w, Some(&b), g);
            let want = naive_conv(&x, &w, &b, g);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "geom {g:?}");
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x), dy> = <x, dx> and = <w, dw> for a bias-free convolution
        for g in [ConvGeom::same(3), ConvGeom::strided((2, 2), (1, 1)), ConvGeom::dilated(3, 2), ConvGeom::strided((1, 1), (0, 0))] {
            let k = if g.pad == (0, 0) { 1 } else if g.stride == (2, 2) { 4 } else { 3 };
            let x = pseudo([2, 2, 8, 6], 1.0);
            let w = pseudo([3, 2, k, k], 2.0);
            let y = conv2d_forward(&x, &w, None, &g);
            let dy = pseudo(y.shape(), 3.0);
            let grads = conv2d_backward(&x, &w, &dy, &g, true, true, true);
            let lhs: f64 = y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
            let via_x: f64 = x.data().iter().zip(grads.dx.unwrap().data()).map(|(a, b)| a * b).sum();
            let via_w: f64 = w.data().iter().zip(grads.dw.unwrap().data()).map(|(a, b)| a * b).sum();
            assert!((lhs - via_x).abs() < 1e-9 * (1.0 + lhs.abs()));
            assert!((lhs - via_w).abs() < 1e-9 * (1.0 + lhs.abs()));
            assert!((grads.db.unwrap().sum() - dy.sum()).abs() < 1e-9);
        }
    }
}
