//! Max pooling and global average pooling.

use ndarray::{Array2, Array4};

use super::{c, Scalar};

#[derive(Debug, Clone, Copy)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl MaxPool2d {
    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    /// Returns the pooled output and the flat (h*W + w) argmax index per cell.
    pub fn forward<F: Scalar>(&self, x: &Array4<F>) -> (Array4<F>, Array4<u32>) {
        let (n, ch, h, w) = x.dim();
        let (oh, ow) = self.output_hw(h, w);
        let mut y = Array4::<F>::zeros((n, ch, oh, ow));
        let mut arg = Array4::<u32>::zeros((n, ch, oh, ow));
        for ni in 0..n {
            for ci in 0..ch {
                for oi in 0..oh {
                    for oj in 0..ow {
                        let mut best = F::neg_infinity();
                        let mut best_idx = 0u32;
                        for ki in 0..self.kernel {
                            let ii = (oi * self.stride + ki) as isize - self.padding as isize;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            for kj in 0..self.kernel {
                                let jj = (oj * self.stride + kj) as isize - self.padding as isize;
                                if jj < 0 || jj >= w as isize {
                                    continue;
                                }
                                let v = x[(ni, ci, ii as usize, jj as usize)];
                                if v > best {
                                    best = v;
                                    best_idx = (ii as usize * w + jj as usize) as u32;
                                }
                            }
                        }
                        y[(ni, ci, oi, oj)] = best;
                        arg[(ni, ci, oi, oj)] = best_idx;
                    }
                }
            }
        }
        (y, arg)
    }

    pub fn backward<F: Scalar>(
        &self,
        input_hw: (usize, usize),
        argmax: &Array4<u32>,
        dy: &Array4<F>,
    ) -> Array4<F> {
        let (n, ch, oh, ow) = dy.dim();
        let (h, w) = input_hw;
        let mut dx = Array4::<F>::zeros((n, ch, h, w));
        for ni in 0..n {
            for ci in 0..ch {
                for oi in 0..oh {
                    for oj in 0..ow {
                        let flat = argmax[(ni, ci, oi, oj)] as usize;
                        dx[(ni, ci, flat / w, flat % w)] += dy[(ni, ci, oi, oj)];
                    }
                }
            }
        }
        dx
    }
}

/// (n, c, h, w) -> (n, c) mean over the spatial grid.
pub fn global_avg_pool<F: Scalar>(x: &Array4<F>) -> Array2<F> {
    let (n, ch, h, w) = x.dim();
    let scale = c::<F>(1.0 / (h * w) as f64);
    let mut y = Array2::<F>::zeros((n, ch));
    for ni in 0..n {
        for ci in 0..ch {
            let mut s = c::<F>(0.0);
            for oi in 0..h {
                for oj in 0..w {
                    s += x[(ni, ci, oi, oj)];
                }
            }
            y[(ni, ci)] = s * scale;
        }
    }
    y
}

pub fn global_avg_pool_backward<F: Scalar>(dy: &Array2<F>, hw: (usize, usize)) -> Array4<F> {
    let (n, ch) = dy.dim();
    let (h, w) = hw;
    let scale = c::<F>(1.0 / (h * w) as f64);
    let mut dx = Array4::<F>::zeros((n, ch, h, w));
    for ni in 0..n {
        for ci in 0..ch {
            let g = dy[(ni, ci)] * scale;
            dx.slice_mut(ndarray::s![ni, ci, .., ..]).fill(g);
        }
    }
    dx
}
