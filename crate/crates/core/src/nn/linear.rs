//! Fully connected layer.

use ndarray::{Array1, Array2, Axis};

use super::{join_name, Scalar, TensorKind, TensorMut, TensorRef};

#[derive(Debug, Clone)]
pub struct Linear<F> {
    /// (out_features, in_features)
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Scalar> Linear<F> {
    /// x: (n, in) -> (n, out)
    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        let mut y = x.dot(&self.weight.t());
        for mut row in y.axis_iter_mut(Axis(0)) {
            row += &self.bias;
        }
        y
    }

    /// Returns (dx, dweight, dbias).
    pub fn backward(&self, x: &Array2<F>, dy: &Array2<F>) -> (Array2<F>, Array2<F>, Array1<F>) {
        let dx = dy.dot(&self.weight);
        let dw = dy.t().dot(x);
        let db = dy.sum_axis(Axis(0));
        (dx, dw, db)
    }

    pub fn tensors(&self, prefix: &str) -> Vec<TensorRef<'_, F>> {
        vec![
            TensorRef {
                name: join_name(prefix, "weight"),
                kind: TensorKind::Param,
                view: self.weight.view().into_dyn(),
            },
            TensorRef {
                name: join_name(prefix, "bias"),
                kind: TensorKind::Param,
                view: self.bias.view().into_dyn(),
            },
        ]
    }

    pub fn tensors_mut(&mut self, prefix: &str) -> Vec<TensorMut<'_, F>> {
        vec![
            TensorMut {
                name: join_name(prefix, "weight"),
                kind: TensorKind::Param,
                view: self.weight.view_mut().into_dyn(),
            },
            TensorMut {
                name: join_name(prefix, "bias"),
                kind: TensorKind::Param,
                view: self.bias.view_mut().into_dyn(),
            },
        ]
    }
}
