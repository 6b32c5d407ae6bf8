//! Central finite differences used as the independent oracle for every
//! analytic gradient in the crate.

use super::rng::SeededRng;
use super::tensor::Tensor;

/// Default step for 64-bit central differences.
pub const DEFAULT_STEP: f64 = 1e-5;

/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every element `i`.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    let mut out = vec![0.0; x.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        *o = (fp - fm) / (2.0 * h);
    }
    Tensor::new(x.shape(), out).expect("same shape")
}

/// Directional derivative `(f(x + h·u) − f(x − h·u)) / 2h`.
pub fn finite_diff_directional(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, dir: &Tensor, h: f64) -> f64 {
    let plus = x.zip_map(dir, |a, d| a + h * d).expect("same shape");
    let minus = x.zip_map(dir, |a, d| a - h * d).expect("same shape");
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    relative_error_with_floor(analytic, numeric, 1e-6)
}

pub fn relative_error_with_floor(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    let diff = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    diff / analytic.norm().max(numeric.norm()).max(floor)
}

pub fn scalar_relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Unit-norm random direction with the shape of `like`.
pub fn random_direction(like: &Tensor, rng: &mut SeededRng) -> Tensor {
    let mut d: Vec<f64> = (0..like.len()).map(|_| rng.normal()).collect();
    let n = d.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
    d.iter_mut().for_each(|v| *v /= n);
    Tensor::new(like.shape(), d).expect("same shape")
}
