//! 2D convolution via im2col and GEMM.

use ndarray::parallel::prelude::*;
use ndarray::{s, Array1, Array2, Array4, ArrayView3, Axis};

use super::{c, join_name, Scalar, TensorKind, TensorMut, TensorRef};

/// Convolution over NCHW input with square kernel, uniform stride/padding.
#[derive(Debug, Clone)]
pub struct Conv2d<F> {
    /// (out_channels, in_channels, kh, kw)
    pub weight: Array4<F>,
    pub bias: Option<Array1<F>>,
    pub stride: usize,
    pub padding: usize,
}

impl<F: Scalar> Conv2d<F> {
    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let (_, _, kh, kw) = self.weight.dim();
        (
            (h + 2 * self.padding - kh) / self.stride + 1,
            (w + 2 * self.padding - kw) / self.stride + 1,
        )
    }

    /// Forward pass. The caller keeps `x` around as the backward cache.
    pub fn forward(&self, x: &Array4<F>) -> Array4<F> {
        let (n, cin, h, w) = x.dim();
        let (cout, cin_w, kh, kw) = self.weight.dim();
        assert_eq!(cin, cin_w, "conv input channels mismatch");
        let (oh, ow) = self.output_hw(h, w);
        let w2 = self
            .weight
            .view()
            .into_shape_with_order((cout, cin * kh * kw))
            .expect("conv weight contiguous");

        let mut y = Array4::<F>::zeros((n, cout, oh, ow));
        y.axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(x.axis_iter(Axis(0)).into_par_iter())
            .for_each(|(mut yi, xi)| {
                let cols = im2col(&xi, kh, kw, self.stride, self.padding);
                let out = w2.dot(&cols); // (cout, oh*ow)
                let mut yi2 = yi
                    .view_mut()
                    .into_shape_with_order((cout, oh * ow))
                    .expect("output contiguous");
                yi2.assign(&out);
                if let Some(b) = &self.bias {
                    for (mut row, &bc) in yi2.axis_iter_mut(Axis(0)).zip(b.iter()) {
                        row += bc;
                    }
                }
            });
        y
    }

    /// Backward pass from cached input; returns (dx, dweight, dbias).
    ///
    /// im2col is recomputed per sample rather than cached, trading a little
    /// compute for activation-sized memory. Weight-gradient partials are
    /// summed in sample order.
    pub fn backward(&self, x: &Array4<F>, dy: &Array4<F>) -> (Array4<F>, Array4<F>, Option<Array1<F>>) {
        let (n, cin, h, w) = x.dim();
        let (cout, _, kh, kw) = self.weight.dim();
        let (oh, ow) = self.output_hw(h, w);
        assert_eq!(dy.dim(), (n, cout, oh, ow), "conv grad shape mismatch");
        let w2 = self
            .weight
            .view()
            .into_shape_with_order((cout, cin * kh * kw))
            .expect("conv weight contiguous");

        let mut dx = Array4::<F>::zeros((n, cin, h, w));
        let partials: Vec<Array2<F>> = dx
            .axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(x.axis_iter(Axis(0)).into_par_iter())
            .zip(dy.axis_iter(Axis(0)).into_par_iter())
            .map(|((mut dxi, xi), dyi)| {
                let cols = im2col(&xi, kh, kw, self.stride, self.padding);
                let dy2 = dyi
                    .into_shape_with_order((cout, oh * ow))
                    .expect("grad contiguous");
                let dw_partial = dy2.dot(&cols.t()); // (cout, cin*kh*kw)
                let dcols = w2.t().dot(&dy2); // (cin*kh*kw, oh*ow)
                col2im(&dcols, &mut dxi.view_mut(), kh, kw, self.stride, self.padding);
                dw_partial
            })
            .collect();

        let mut dw2 = Array2::<F>::zeros((cout, cin * kh * kw));
        for p in partials {
            dw2 += &p;
        }
        let dw = dw2
            .into_shape_with_order((cout, cin, kh, kw))
            .expect("weight grad reshape");

        let db = self.bias.as_ref().map(|_| {
            let mut db = Array1::<F>::zeros(cout);
            for ni in 0..n {
                for co in 0..cout {
                    let mut s = c::<F>(0.0);
                    for v in dy.slice(s![ni, co, .., ..]).iter() {
                        s += *v;
                    }
                    db[co] += s;
                }
            }
            db
        });

        (dx, dw, db)
    }

    pub fn tensors(&self, prefix: &str) -> Vec<TensorRef<'_, F>> {
        let mut out = vec![TensorRef {
            name: join_name(prefix, "weight"),
            kind: TensorKind::Param,
            view: self.weight.view().into_dyn(),
        }];
        if let Some(b) = &self.bias {
            out.push(TensorRef {
                name: join_name(prefix, "bias"),
                kind: TensorKind::Param,
                view: b.view().into_dyn(),
            });
        }
        out
    }

    pub fn tensors_mut(&mut self, prefix: &str) -> Vec<TensorMut<'_, F>> {
        let mut out = vec![TensorMut {
            name: join_name(prefix, "weight"),
            kind: TensorKind::Param,
            view: self.weight.view_mut().into_dyn(),
        }];
        if let Some(b) = &mut self.bias {
            out.push(TensorMut {
                name: join_name(prefix, "bias"),
                kind: TensorKind::Param,
                view: b.view_mut().into_dyn(),
            });
        }
        out
    }
}

/// Unfold one (C, H, W) sample into (C*kh*kw, oh*ow) patch columns.
pub fn im2col<F: Scalar>(
    x: &ArrayView3<'_, F>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<F> {
    let (cin, h, w) = x.dim();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut cols = Array2::<F>::zeros((cin * kh * kw, oh * ow));
    let xs = x.to_slice().expect("sample view contiguous");
    let cs = cols.as_slice_mut().expect("cols contiguous");

    for ci in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row_base = ((ci * kh + ki) * kw + kj) * (oh * ow);
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let x_base = ci * h * w + ii as usize * w;
                    let o_base = row_base + oi * ow;
                    if stride == 1 {
                        // jj = oj + kj - pad, valid while 0 <= jj < w
                        let lo = pad.saturating_sub(kj);
                        let hi = (w + pad - kj).min(ow);
                        if lo < hi {
                            let src = x_base + lo + kj - pad;
                            cs[o_base + lo..o_base + hi]
                                .copy_from_slice(&xs[src..src + (hi - lo)]);
                        }
                    } else {
                        for oj in 0..ow {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            cs[o_base + oj] = xs[x_base + jj as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Fold (C*kh*kw, oh*ow) patch-column gradients back onto a (C, H, W) sample.
pub fn col2im<F: Scalar>(
    dcols: &Array2<F>,
    dx: &mut ndarray::ArrayViewMut3<'_, F>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) {
    let (cin, h, w) = dx.dim();
    let ow = (w + 2 * pad - kw) / stride + 1;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ds = dcols.as_slice().expect("cols contiguous");
    let xs = dx.as_slice_mut().expect("grad view contiguous");

    for ci in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row_base = ((ci * kh + ki) * kw + kj) * (oh * ow);
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let x_base = ci * h * w + ii as usize * w;
                    let o_base = row_base + oi * ow;
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        xs[x_base + jj as usize] += ds[o_base + oj];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    #[test]
    fn identity_kernel_reproduces_input() {
        // 1x1 kernel, single channel, identity weight
        let mut conv = Conv2d {
            weight: Array4::<f64>::zeros((1, 1, 1, 1)),
            bias: None,
            stride: 1,
            padding: 0,
        };
        conv.weight[(0, 0, 0, 0)] = 1.0;
        let x = Array::linspace(0.0, 1.0, 2 * 4 * 4)
            .into_shape_with_order((2, 1, 4, 4))
            .unwrap();
        let y = conv.forward(&x);
        assert_eq!(y, x);
    }

    #[test]
    fn forward_matches_direct_convolution() {
        // direct nested-loop oracle on a small case with padding and stride
        let mut rng = crate::rng::rng_for(&[11]);
        let x = init::rand_array4(&mut rng, (2, 3, 7, 6));
        let weight = init::rand_array4(&mut rng, (4, 3, 3, 3));
        let conv = Conv2d {
            weight: weight.clone(),
            bias: None,
            stride: 2,
            padding: 1,
        };
        let y = conv.forward(&x);
        let (oh, ow) = conv.output_hw(7, 6);
        for n in 0..2 {
            for co in 0..4 {
                for oi in 0..oh {
                    for oj in 0..ow {
                        let mut acc = 0.0f64;
                        for ci in 0..3 {
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    let ii = (oi * 2 + ki) as isize - 1;
                                    let jj = (oj * 2 + kj) as isize - 1;
                                    if (0..7).contains(&ii) && (0..6).contains(&jj) {
                                        acc += x[(n, ci, ii as usize, jj as usize)]
                                            * weight[(co, ci, ki, kj)];
                                    }
                                }
                            }
                        }
                        let got = y[(n, co, oi, oj)];
                        assert!((got - acc).abs() < 1e-12, "mismatch at {n},{co},{oi},{oj}");
                    }
                }
            }
        }
    }

    mod init {
        use ndarray::Array4;
        use rand::Rng;

        pub fn rand_array4(rng: &mut impl Rng, dim: (usize, usize, usize, usize)) -> Array4<f64> {
            let mut a = Array4::<f64>::zeros(dim);
            for v in a.iter_mut() {
                *v = rng.random::<f64>() * 2.0 - 1.0;
            }
            a
        }
    }
}
