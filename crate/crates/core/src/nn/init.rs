//! Seeded parameter initialization.

use ndarray::{Array1, Array2, Array4};
use rand::Rng;

use super::{c, Scalar};

/// Standard normal draw via Box-Muller; consumes two uniform draws.
pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>(); // (0, 1]
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// He-normal (fan-out) initialization for convolution kernels.
pub fn kaiming_conv<F: Scalar>(
    rng: &mut impl Rng,
    dim: (usize, usize, usize, usize),
) -> Array4<F> {
    let (cout, _cin, kh, kw) = dim;
    let fan_out = (cout * kh * kw) as f64;
    let std = (2.0 / fan_out).sqrt();
    let mut w = Array4::<F>::zeros(dim);
    for v in w.iter_mut() {
        *v = c(standard_normal(rng) * std);
    }
    w
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for linear weight and bias.
pub fn linear_uniform<F: Scalar>(
    rng: &mut impl Rng,
    out_features: usize,
    in_features: usize,
) -> (Array2<F>, Array1<F>) {
    let bound = 1.0 / (in_features as f64).sqrt();
    let mut w = Array2::<F>::zeros((out_features, in_features));
    for v in w.iter_mut() {
        *v = c((rng.random::<f64>() * 2.0 - 1.0) * bound);
    }
    let mut b = Array1::<F>::zeros(out_features);
    for v in b.iter_mut() {
        *v = c((rng.random::<f64>() * 2.0 - 1.0) * bound);
    }
    (w, b)
}
