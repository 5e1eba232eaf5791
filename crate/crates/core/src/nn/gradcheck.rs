//! Central finite differences, used as an independent oracle for analytic gradients.

use super::Tensor;
use crate::scalar::Scalar;

/// Numerical gradient of `f` at `x` with step `h`.
pub fn finite_difference<T: Scalar>(x: &Tensor<T>, h: T, mut f: impl FnMut(&Tensor<T>) -> T) -> Tensor<T> {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    let two = T::lit(2.0);
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (two * h);
    }
    out
}

/// `||a - b|| / max(||a||, ||b||, tiny)` over all entries.
pub fn relative_error<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.data().iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.data().iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-30)
}
