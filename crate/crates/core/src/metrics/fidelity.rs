use ndarray::Array2;

use crate::error::{Error, Result};
use crate::imgproc::gaussian_kernel;
use crate::scalar::Scalar;

/// Value written to reports in place of an infinite PSNR.
pub const PSNR_CAP_DB: f64 = 99.0;

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fidelity<T> {
    pub ssim: T,
    /// Peak 1.0; `+inf` for identical images.
    pub psnr: T,
    pub mse: T,
}

impl<T: Scalar> Fidelity<T> {
    pub fn psnr_capped(&self) -> T {
        self.psnr.min(T::lit(PSNR_CAP_DB))
    }
}

/// Gaussian-weighted local statistics over windows fully inside the image.
fn filter_valid(img: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let n = k.len();
    let (h, w) = img.dim();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let tmp = Array2::from_shape_fn((h, ow), |(r, c)| (0..n).map(|i| k[i] * img[[r, c + i]]).sum::<f64>());
    Array2::from_shape_fn((oh, ow), |(r, c)| (0..n).map(|i| k[i] * tmp[[r + i, c]]).sum::<f64>())
}

fn ssim(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let (h, w) = a.dim();
    // shrink the window for images smaller than 11 px, keeping it odd
    let side = WINDOW.min(h).min(w);
    let side = if side % 2 == 0 { side - 1 } else { side };
    let k = gaussian_kernel(SIGMA, side / 2);
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let mu_a = filter_valid(a, &k);
    let mu_b = filter_valid(b, &k);
    let aa = filter_valid(&(a * a), &k);
    let bb = filter_valid(&(b * b), &k);
    let ab = filter_valid(&(a * b), &k);
    let mut total = 0.0;
    for (idx, &ma) in mu_a.indexed_iter() {
        let mb = mu_b[idx];
        let va = aa[idx] - ma * ma;
        let vb = bb[idx] - mb * mb;
        let cov = ab[idx] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / mu_a.len() as f64
}

pub fn image_fidelity<T: Scalar>(a: &Array2<T>, b: &Array2<T>) -> Result<Fidelity<T>> {
    if a.dim() != b.dim() {
        return Err(Error::shape(a.shape(), b.shape()));
    }
    if a.is_empty() {
        return Err(Error::Data("image_fidelity on an empty image".into()));
    }
    let a = a.mapv(|v| v.as_f64());
    let b = b.mapv(|v| v.as_f64());
    let mse = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    let psnr = if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() };
    Ok(Fidelity { ssim: T::lit(ssim(&a, &b)), psnr: T::lit(psnr), mse: T::lit(mse) })
}
