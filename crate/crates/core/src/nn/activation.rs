//! Elementwise nonlinearities, generic over array dimension.

use ndarray::{Array, Dimension};

use super::{c, Scalar};

pub fn relu_forward<F: Scalar, D: Dimension>(x: &Array<F, D>) -> Array<F, D> {
    x.mapv(|v| if v > F::zero() { v } else { F::zero() })
}

/// `x` is the cached forward input.
pub fn relu_backward<F: Scalar, D: Dimension>(x: &Array<F, D>, dy: &Array<F, D>) -> Array<F, D> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &xv| {
        if xv <= F::zero() {
            *d = F::zero();
        }
    });
    dx
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

/// tanh-approximated GELU.
pub fn gelu_forward<F: Scalar, D: Dimension>(x: &Array<F, D>) -> Array<F, D> {
    x.mapv(|v| {
        let xf = v.to_f64().unwrap();
        let u = SQRT_2_OVER_PI * (xf + GELU_COEF * xf * xf * xf);
        c::<F>(0.5 * xf * (1.0 + u.tanh()))
    })
}

pub fn gelu_backward<F: Scalar, D: Dimension>(x: &Array<F, D>, dy: &Array<F, D>) -> Array<F, D> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &xv| {
        let xf = xv.to_f64().unwrap();
        let u = SQRT_2_OVER_PI * (xf + GELU_COEF * xf * xf * xf);
        let t = u.tanh();
        let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * xf * xf);
        let grad = 0.5 * (1.0 + t) + 0.5 * xf * (1.0 - t * t) * du;
        *d *= c::<F>(grad);
    });
    dx
}
