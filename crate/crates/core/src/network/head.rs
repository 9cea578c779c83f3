//! MLP projection head: three linear layers with smooth nonlinearities.
//!
//! The default head is a plain MLP. The `dino_compat` variant L2-normalizes
//! the bottleneck and row-normalizes the final layer's weight (magnitude
//! fixed at 1), for parity studies against the artificial-augmentation arm.

use ndarray::{Array1, Array2, Axis};
use rand_chacha::ChaCha8Rng;

use crate::nn::{
    accumulate, c, gelu_backward, gelu_forward, init, join_name, GradMap, Linear, Scalar,
    TensorKind, TensorMut, TensorRef,
};

use super::HeadConfig;

#[derive(Debug, Clone)]
pub struct ProjectionHead<F> {
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
    pub fc3: Linear<F>,
    pub dino_compat: bool,
}

pub struct HeadCache<F> {
    x: Array2<F>,
    a1: Array2<F>, // fc1 output (gelu input)
    h1: Array2<F>, // gelu(a1), fc2 input
    a2: Array2<F>, // fc2 output
    h2: Array2<F>, // fc3 input (gelu or l2-normalized bottleneck)
    norms: Option<Array1<F>>,
}

impl<F: Scalar> ProjectionHead<F> {
    pub fn init(cfg: &HeadConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = &cfg.layer_dims;
        let (w1, b1) = init::linear_uniform(rng, d[1], d[0]);
        let (w2, b2) = init::linear_uniform(rng, d[2], d[1]);
        let (w3, b3) = init::linear_uniform(rng, d[3], d[2]);
        Self {
            fc1: Linear { weight: w1, bias: b1 },
            fc2: Linear { weight: w2, bias: b2 },
            fc3: Linear { weight: w3, bias: b3 },
            dino_compat: cfg.dino_compat,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.fc1.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.fc3.weight.nrows()
    }

    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        self.forward_cached(x.clone()).0
    }

    pub fn forward_cached(&self, x: Array2<F>) -> (Array2<F>, HeadCache<F>) {
        let a1 = self.fc1.forward(&x);
        let h1 = gelu_forward(&a1);
        let a2 = self.fc2.forward(&h1);
        let (h2, norms) = if self.dino_compat {
            let (n, normed) = l2_normalize_rows(&a2);
            (normed, Some(n))
        } else {
            (gelu_forward(&a2), None)
        };
        let y = if self.dino_compat {
            weight_normed_forward(&self.fc3.weight, &h2)
        } else {
            self.fc3.forward(&h2)
        };
        (
            y,
            HeadCache {
                x,
                a1,
                h1,
                a2,
                h2,
                norms,
            },
        )
    }

    /// Returns the gradient with respect to the head input.
    pub fn backward(
        &self,
        cache: &HeadCache<F>,
        dy: &Array2<F>,
        prefix: &str,
        grads: &mut GradMap<F>,
    ) -> Array2<F> {
        let (dh2, dw3, db3) = if self.dino_compat {
            let (dh2, dw3) = weight_normed_backward(&self.fc3.weight, &cache.h2, dy);
            (dh2, dw3, None)
        } else {
            let (dh2, dw3, db3) = self.fc3.backward(&cache.h2, dy);
            (dh2, dw3, Some(db3))
        };
        accumulate(grads, &join_name(prefix, "fc3.weight"), dw3.into_dyn());
        if let Some(db3) = db3 {
            accumulate(grads, &join_name(prefix, "fc3.bias"), db3.into_dyn());
        }

        let da2 = if self.dino_compat {
            let norms = cache.norms.as_ref().expect("compat cache has norms");
            l2_normalize_backward(&cache.a2, &cache.h2, norms, &dh2)
        } else {
            gelu_backward(&cache.a2, &dh2)
        };
        let (dh1, dw2, db2) = self.fc2.backward(&cache.h1, &da2);
        accumulate(grads, &join_name(prefix, "fc2.weight"), dw2.into_dyn());
        accumulate(grads, &join_name(prefix, "fc2.bias"), db2.into_dyn());

        let da1 = gelu_backward(&cache.a1, &dh1);
        let (dx, dw1, db1) = self.fc1.backward(&cache.x, &da1);
        accumulate(grads, &join_name(prefix, "fc1.weight"), dw1.into_dyn());
        accumulate(grads, &join_name(prefix, "fc1.bias"), db1.into_dyn());
        dx
    }

    pub fn tensors(&self, prefix: &str) -> Vec<TensorRef<'_, F>> {
        let mut out = self.fc1.tensors(&join_name(prefix, "fc1"));
        out.extend(self.fc2.tensors(&join_name(prefix, "fc2")));
        if self.dino_compat {
            // weight-normalized final layer: magnitude fixed, bias unused
            out.push(TensorRef {
                name: join_name(prefix, "fc3.weight"),
                kind: TensorKind::Param,
                view: self.fc3.weight.view().into_dyn(),
            });
        } else {
            out.extend(self.fc3.tensors(&join_name(prefix, "fc3")));
        }
        out
    }

    pub fn tensors_mut(&mut self, prefix: &str) -> Vec<TensorMut<'_, F>> {
        let mut out = self.fc1.tensors_mut(&join_name(prefix, "fc1"));
        out.extend(self.fc2.tensors_mut(&join_name(prefix, "fc2")));
        if self.dino_compat {
            out.push(TensorMut {
                name: join_name(prefix, "fc3.weight"),
                kind: TensorKind::Param,
                view: self.fc3.weight.view_mut().into_dyn(),
            });
        } else {
            out.extend(self.fc3.tensors_mut(&join_name(prefix, "fc3")));
        }
        out
    }
}

const NORM_FLOOR: f64 = 1e-12;

fn l2_normalize_rows<F: Scalar>(x: &Array2<F>) -> (Array1<F>, Array2<F>) {
    let mut norms = Array1::<F>::zeros(x.nrows());
    let mut y = x.clone();
    for (i, row) in x.outer_iter().enumerate() {
        let n = row.iter().map(|&v| v * v).fold(F::zero(), |a, b| a + b).sqrt();
        let n = n.max(c(NORM_FLOOR));
        norms[i] = n;
        let mut yr = y.row_mut(i);
        yr.mapv_inplace(|v| v / n);
    }
    (norms, y)
}

fn l2_normalize_backward<F: Scalar>(
    _x: &Array2<F>,
    y: &Array2<F>,
    norms: &Array1<F>,
    dy: &Array2<F>,
) -> Array2<F> {
    let mut dx = Array2::<F>::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let yi = y.row(i);
        let dyi = dy.row(i);
        let dot = yi
            .iter()
            .zip(dyi.iter())
            .map(|(&a, &b)| a * b)
            .fold(F::zero(), |a, b| a + b);
        let inv_n = F::one() / norms[i];
        let mut dxi = dx.row_mut(i);
        for k in 0..dyi.len() {
            dxi[k] = (dyi[k] - yi[k] * dot) * inv_n;
        }
    }
    dx
}

fn weight_normed_forward<F: Scalar>(weight: &Array2<F>, x: &Array2<F>) -> Array2<F> {
    let w_hat = normalize_weight_rows(weight);
    x.dot(&w_hat.t())
}

fn weight_normed_backward<F: Scalar>(
    weight: &Array2<F>,
    x: &Array2<F>,
    dy: &Array2<F>,
) -> (Array2<F>, Array2<F>) {
    let w_hat = normalize_weight_rows(weight);
    let dx = dy.dot(&w_hat);
    let dw_hat = dy.t().dot(x); // (out, in)
    let mut dw = Array2::<F>::zeros(weight.raw_dim());
    for k in 0..weight.nrows() {
        let wk = weight.row(k);
        let n = wk.iter().map(|&v| v * v).fold(F::zero(), |a, b| a + b).sqrt();
        let n = n.max(c(NORM_FLOOR));
        let whk = w_hat.row(k);
        let dwhk = dw_hat.row(k);
        let dot = whk
            .iter()
            .zip(dwhk.iter())
            .map(|(&a, &b)| a * b)
            .fold(F::zero(), |a, b| a + b);
        let mut dwk = dw.row_mut(k);
        for j in 0..wk.len() {
            dwk[j] = (dwhk[j] - whk[j] * dot) / n;
        }
    }
    (dx, dw)
}

fn normalize_weight_rows<F: Scalar>(weight: &Array2<F>) -> Array2<F> {
    let mut w = weight.clone();
    for mut row in w.axis_iter_mut(Axis(0)) {
        let n = row.iter().map(|&v| v * v).fold(F::zero(), |a, b| a + b).sqrt();
        let n = n.max(c(NORM_FLOOR));
        row.mapv_inplace(|v| v / n);
    }
    w
}
