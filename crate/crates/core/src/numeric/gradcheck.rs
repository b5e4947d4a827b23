use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Central-difference estimate `(f(x+he) − f(x−he)) / 2h` for every coordinate of `x`.
pub fn finite_difference_grad<F>(mut f: F, x: &Tensor, step: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::arg(format!("finite-difference step {step} must be positive")));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Central differences for the listed coordinates of `x` only.
pub fn finite_difference_at<F>(mut f: F, x: &Tensor, coords: &[usize], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::arg(format!("finite-difference step {step} must be positive")));
    }
    let mut probe = x.clone();
    coords
        .iter()
        .map(|&i| {
            if i >= x.numel() {
                return Err(Error::arg(format!("coordinate {i} outside {} elements", x.numel())));
            }
            let orig = x.data()[i];
            probe.data_mut()[i] = orig + step;
            let plus = f(&probe)?;
            probe.data_mut()[i] = orig - step;
            let minus = f(&probe)?;
            probe.data_mut()[i] = orig;
            Ok((plus - minus) / (2.0 * step))
        })
        .collect()
}

/// Largest relative error between two gradient vectors.
///
/// Each coordinate is compared as `|a − b| / max(|a|, |b|, floor)` so that
/// coordinates whose true gradient is near zero are judged on absolute error.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
