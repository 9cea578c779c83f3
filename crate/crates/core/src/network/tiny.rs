//! Four-block convolutional backbone for desk-scale tests.

use ndarray::{Array2, Array4};
use rand_chacha::ChaCha8Rng;

use crate::nn::{
    accumulate, global_avg_pool, global_avg_pool_backward, init, join_name, relu_backward,
    relu_forward, BatchNorm2d, BnCache, Conv2d, GradMap, Scalar, TensorMut, TensorRef,
};

pub const TINY_CHANNELS: [usize; 4] = [8, 16, 32, 64];
pub const TINY_FEATURE_DIM: usize = 64;

#[derive(Debug, Clone)]
pub struct TinyCnn<F> {
    blocks: Vec<(Conv2d<F>, BatchNorm2d<F>)>,
}

pub struct TinyBlockCache<F> {
    conv_in: Array4<F>,
    bn: BnCache<F>,
    bn_out: Array4<F>,
}

pub struct TinyCache<F> {
    blocks: Vec<TinyBlockCache<F>>,
    spatial: (usize, usize),
}

impl<F: Scalar> TinyCnn<F> {
    pub fn init(rng: &mut ChaCha8Rng) -> Self {
        let mut blocks = Vec::new();
        let mut cin = 3;
        for &cout in TINY_CHANNELS.iter() {
            let conv = Conv2d {
                weight: init::kaiming_conv(rng, (cout, cin, 3, 3)),
                bias: None,
                stride: 2,
                padding: 1,
            };
            blocks.push((conv, BatchNorm2d::new(cout)));
            cin = cout;
        }
        Self { blocks }
    }

    pub fn feature_dim(&self) -> usize {
        TINY_FEATURE_DIM
    }

    pub fn forward_train(
        &mut self,
        x: Array4<F>,
        update_running: bool,
    ) -> (Array2<F>, TinyCache<F>) {
        let mut cur = x;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (conv, bn) in self.blocks.iter_mut() {
            let y = conv.forward(&cur);
            let (bn_out, bn_cache) = bn.forward_train(y, update_running);
            let next = relu_forward(&bn_out);
            caches.push(TinyBlockCache {
                conv_in: cur,
                bn: bn_cache,
                bn_out,
            });
            cur = next;
        }
        let (_, _, h, w) = cur.dim();
        let feats = global_avg_pool(&cur);
        (
            feats,
            TinyCache {
                blocks: caches,
                spatial: (h, w),
            },
        )
    }

    pub fn forward_eval(&self, x: &Array4<F>) -> Array2<F> {
        let mut cur = x.clone();
        for (conv, bn) in self.blocks.iter() {
            let y = conv.forward(&cur);
            let y = bn.forward_eval(&y);
            cur = relu_forward(&y);
        }
        global_avg_pool(&cur)
    }

    pub fn backward(
        &self,
        cache: &TinyCache<F>,
        dfeats: &Array2<F>,
        prefix: &str,
        grads: &mut GradMap<F>,
    ) -> Array4<F> {
        let mut dcur = global_avg_pool_backward(dfeats, cache.spatial);
        for (i, ((conv, bn), bc)) in self
            .blocks
            .iter()
            .zip(cache.blocks.iter())
            .enumerate()
            .rev()
        {
            let drelu = relu_backward(&bc.bn_out, &dcur);
            let (dbn, dgamma, dbeta) = bn.backward(&bc.bn, &drelu);
            let name = format!("block{}", i + 1);
            accumulate(grads, &join_name(prefix, &format!("{name}.bn.gamma")), dgamma.into_dyn());
            accumulate(grads, &join_name(prefix, &format!("{name}.bn.beta")), dbeta.into_dyn());
            let (dx, dw, _) = conv.backward(&bc.conv_in, &dbn);
            accumulate(
                grads,
                &join_name(prefix, &format!("{name}.conv.weight")),
                dw.into_dyn(),
            );
            dcur = dx;
        }
        dcur
    }

    pub fn tensors(&self, prefix: &str) -> Vec<TensorRef<'_, F>> {
        let mut out = Vec::new();
        for (i, (conv, bn)) in self.blocks.iter().enumerate() {
            let name = format!("block{}", i + 1);
            out.extend(conv.tensors(&join_name(prefix, &format!("{name}.conv"))));
            out.extend(bn.tensors(&join_name(prefix, &format!("{name}.bn"))));
        }
        out
    }

    pub fn tensors_mut(&mut self, prefix: &str) -> Vec<TensorMut<'_, F>> {
        let mut out = Vec::new();
        for (i, (conv, bn)) in self.blocks.iter_mut().enumerate() {
            let name = format!("block{}", i + 1);
            out.extend(conv.tensors_mut(&join_name(prefix, &format!("{name}.conv"))));
            out.extend(bn.tensors_mut(&join_name(prefix, &format!("{name}.bn"))));
        }
        out
    }
}
