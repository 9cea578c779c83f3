//! Batch normalization over NCHW activations.

use ndarray::{Array1, Array4, Axis};

use super::{c, join_name, Scalar, TensorKind, TensorMut, TensorRef};

/// BatchNorm with affine parameters and running statistics.
///
/// Three forward paths:
/// - `forward_train(x, true)` — batch statistics, running stats updated
///   (student during pretraining, fine-tuning)
/// - `forward_train(x, false)` — batch statistics, running stats untouched
///   (teacher during pretraining: its stats only ever move via EMA)
/// - `forward_eval(x)` — running statistics, per-sample independent
#[derive(Debug, Clone)]
pub struct BatchNorm2d<F> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
    pub eps: f64,
    pub momentum: f64,
}

pub struct BnCache<F> {
    pub x: Array4<F>,
    pub mean: Array1<F>,
    pub inv_std: Array1<F>,
}

impl<F: Scalar> BatchNorm2d<F> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Array1::from_elem(channels, c(1.0)),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::from_elem(channels, c(1.0)),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward_train(&mut self, x: Array4<F>, update_running: bool) -> (Array4<F>, BnCache<F>) {
        let (n, ch, h, w) = x.dim();
        let m = (n * h * w) as f64;
        // per-channel accumulation in f64, per-sample partials combined in
        // index order so results don't depend on iteration scheduling
        let mut sums = vec![0.0f64; ch];
        let mut sqs = vec![0.0f64; ch];
        for ni in 0..n {
            for ci in 0..ch {
                let plane = x.index_axis(Axis(0), ni);
                let plane = plane.index_axis(Axis(0), ci);
                let sl = plane.to_slice().expect("contiguous");
                let mut s = 0.0f64;
                let mut q = 0.0f64;
                for &v in sl {
                    let vf = v.to_f64().unwrap();
                    s += vf;
                    q += vf * vf;
                }
                sums[ci] += s;
                sqs[ci] += q;
            }
        }
        let mut mean = Array1::<F>::zeros(ch);
        let mut inv_std = Array1::<F>::zeros(ch);
        let mut var_biased = vec![0.0f64; ch];
        for ci in 0..ch {
            let mu = sums[ci] / m;
            let var = (sqs[ci] / m - mu * mu).max(0.0);
            var_biased[ci] = var;
            mean[ci] = c(mu);
            inv_std[ci] = c(1.0 / (var + self.eps).sqrt());
        }

        if update_running {
            let mom = self.momentum;
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            for ci in 0..ch {
                let rm = self.running_mean[ci].to_f64().unwrap();
                let rv = self.running_var[ci].to_f64().unwrap();
                self.running_mean[ci] = c((1.0 - mom) * rm + mom * (sums[ci] / m));
                self.running_var[ci] = c((1.0 - mom) * rv + mom * var_biased[ci] * unbias);
            }
        }

        let mut y = x.clone();
        for ci in 0..ch {
            let g = self.gamma[ci] * inv_std[ci];
            let b = self.beta[ci] - self.gamma[ci] * inv_std[ci] * mean[ci];
            for ni in 0..n {
                let mut plane = y.index_axis_mut(Axis(0), ni);
                let mut plane = plane.index_axis_mut(Axis(0), ci);
                plane.mapv_inplace(|v| v * g + b);
            }
        }
        (y, BnCache { x, mean, inv_std })
    }

    pub fn forward_eval(&self, x: &Array4<F>) -> Array4<F> {
        let (n, ch, _, _) = x.dim();
        let mut y = x.clone();
        for ci in 0..ch {
            let rv = self.running_var[ci].to_f64().unwrap();
            let inv = c::<F>(1.0 / (rv + self.eps).sqrt());
            let g = self.gamma[ci] * inv;
            let b = self.beta[ci] - self.running_mean[ci] * g;
            for ni in 0..n {
                let mut plane = y.index_axis_mut(Axis(0), ni);
                let mut plane = plane.index_axis_mut(Axis(0), ci);
                plane.mapv_inplace(|v| v * g + b);
            }
        }
        y
    }

    /// Backward through batch-statistics normalization.
    pub fn backward(&self, cache: &BnCache<F>, dy: &Array4<F>) -> (Array4<F>, Array1<F>, Array1<F>) {
        let (n, ch, h, w) = cache.x.dim();
        let m = (n * h * w) as f64;
        let mut dgamma = Array1::<F>::zeros(ch);
        let mut dbeta = Array1::<F>::zeros(ch);
        // f64 channel accumulators, fixed iteration order
        let mut sum_dy = vec![0.0f64; ch];
        let mut sum_dy_xhat = vec![0.0f64; ch];
        for ni in 0..n {
            for ci in 0..ch {
                let mean = cache.mean[ci].to_f64().unwrap();
                let inv_std = cache.inv_std[ci].to_f64().unwrap();
                let xp = cache.x.index_axis(Axis(0), ni);
                let xp = xp.index_axis(Axis(0), ci);
                let dp = dy.index_axis(Axis(0), ni);
                let dp = dp.index_axis(Axis(0), ci);
                let xs = xp.to_slice().unwrap();
                let ds = dp.to_slice().unwrap();
                let mut s = 0.0f64;
                let mut sx = 0.0f64;
                for (&xv, &dv) in xs.iter().zip(ds.iter()) {
                    let xhat = (xv.to_f64().unwrap() - mean) * inv_std;
                    let d = dv.to_f64().unwrap();
                    s += d;
                    sx += d * xhat;
                }
                sum_dy[ci] += s;
                sum_dy_xhat[ci] += sx;
            }
        }
        for ci in 0..ch {
            dgamma[ci] = c(sum_dy_xhat[ci]);
            dbeta[ci] = c(sum_dy[ci]);
        }

        let mut dx = Array4::<F>::zeros((n, ch, h, w));
        for ni in 0..n {
            for ci in 0..ch {
                let mean = cache.mean[ci];
                let inv_std = cache.inv_std[ci];
                let g = self.gamma[ci];
                let mean_dy = c::<F>(sum_dy[ci] / m);
                let mean_dy_xhat = c::<F>(sum_dy_xhat[ci] / m);
                let xp = cache.x.index_axis(Axis(0), ni);
                let xp = xp.index_axis(Axis(0), ci);
                let dp = dy.index_axis(Axis(0), ni);
                let dp = dp.index_axis(Axis(0), ci);
                let mut op = dx.index_axis_mut(Axis(0), ni);
                let mut op = op.index_axis_mut(Axis(0), ci);
                let xs = xp.to_slice().unwrap();
                let ds = dp.to_slice().unwrap();
                let os = op.as_slice_mut().unwrap();
                for i in 0..os.len() {
                    let xhat = (xs[i] - mean) * inv_std;
                    os[i] = g * inv_std * (ds[i] - mean_dy - xhat * mean_dy_xhat);
                }
            }
        }
        (dx, dgamma, dbeta)
    }

    pub fn tensors(&self, prefix: &str) -> Vec<TensorRef<'_, F>> {
        vec![
            TensorRef {
                name: join_name(prefix, "gamma"),
                kind: TensorKind::Param,
                view: self.gamma.view().into_dyn(),
            },
            TensorRef {
                name: join_name(prefix, "beta"),
                kind: TensorKind::Param,
                view: self.beta.view().into_dyn(),
            },
            TensorRef {
                name: join_name(prefix, "running_mean"),
                kind: TensorKind::Stat,
                view: self.running_mean.view().into_dyn(),
            },
            TensorRef {
                name: join_name(prefix, "running_var"),
                kind: TensorKind::Stat,
                view: self.running_var.view().into_dyn(),
            },
        ]
    }

    pub fn tensors_mut(&mut self, prefix: &str) -> Vec<TensorMut<'_, F>> {
        vec![
            TensorMut {
                name: join_name(prefix, "gamma"),
                kind: TensorKind::Param,
                view: self.gamma.view_mut().into_dyn(),
            },
            TensorMut {
                name: join_name(prefix, "beta"),
                kind: TensorKind::Param,
                view: self.beta.view_mut().into_dyn(),
            },
            TensorMut {
                name: join_name(prefix, "running_mean"),
                kind: TensorKind::Stat,
                view: self.running_mean.view_mut().into_dyn(),
            },
            TensorMut {
                name: join_name(prefix, "running_var"),
                kind: TensorKind::Stat,
                view: self.running_var.view_mut().into_dyn(),
            },
        ]
    }
}
