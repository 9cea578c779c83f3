//! ResNet-18 backbone: 7x7 stem, four stages of two basic blocks,
//! global average pooling to a 512-dim feature vector.

use ndarray::{Array2, Array4};
use rand_chacha::ChaCha8Rng;

use crate::nn::{
    accumulate, global_avg_pool, global_avg_pool_backward, init, join_name, relu_backward,
    relu_forward, BatchNorm2d, BnCache, Conv2d, GradMap, MaxPool2d, Scalar, TensorMut, TensorRef,
};

pub const RESNET18_FEATURE_DIM: usize = 512;

const STAGE_CHANNELS: [usize; 4] = [64, 128, 256, 512];

#[derive(Debug, Clone)]
pub struct BasicBlock<F> {
    conv1: Conv2d<F>,
    bn1: BatchNorm2d<F>,
    conv2: Conv2d<F>,
    bn2: BatchNorm2d<F>,
    down: Option<(Conv2d<F>, BatchNorm2d<F>)>,
}

pub struct BlockCache<F> {
    x: Array4<F>,
    bn1: BnCache<F>,
    bn1_out: Array4<F>,
    relu1_out: Array4<F>,
    bn2: BnCache<F>,
    pre: Array4<F>,
    down_bn: Option<BnCache<F>>,
}

impl<F: Scalar> BasicBlock<F> {
    fn init(rng: &mut ChaCha8Rng, cin: usize, cout: usize, stride: usize) -> Self {
        let conv1 = Conv2d {
            weight: init::kaiming_conv(rng, (cout, cin, 3, 3)),
            bias: None,
            stride,
            padding: 1,
        };
        let conv2 = Conv2d {
            weight: init::kaiming_conv(rng, (cout, cout, 3, 3)),
            bias: None,
            stride: 1,
            padding: 1,
        };
        let down = if stride != 1 || cin != cout {
            Some((
                Conv2d {
                    weight: init::kaiming_conv(rng, (cout, cin, 1, 1)),
                    bias: None,
                    stride,
                    padding: 0,
                },
                BatchNorm2d::new(cout),
            ))
        } else {
            None
        };
        Self {
            conv1,
            bn1: BatchNorm2d::new(cout),
            conv2,
            bn2: BatchNorm2d::new(cout),
            down,
        }
    }

    fn forward_train(&mut self, x: Array4<F>, update_running: bool) -> (Array4<F>, BlockCache<F>) {
        let c1 = self.conv1.forward(&x);
        let (bn1_out, bn1_cache) = self.bn1.forward_train(c1, update_running);
        let relu1_out = relu_forward(&bn1_out);
        let c2 = self.conv2.forward(&relu1_out);
        let (bn2_out, bn2_cache) = self.bn2.forward_train(c2, update_running);

        let (identity, down_bn) = match &mut self.down {
            Some((dconv, dbn)) => {
                let d = dconv.forward(&x);
                let (d, dcache) = dbn.forward_train(d, update_running);
                (d, Some(dcache))
            }
            None => (x.clone(), None),
        };

        let pre = bn2_out + &identity;
        let y = relu_forward(&pre);
        (
            y,
            BlockCache {
                x,
                bn1: bn1_cache,
                bn1_out,
                relu1_out,
                bn2: bn2_cache,
                pre,
                down_bn,
            },
        )
    }

    fn forward_eval(&self, x: &Array4<F>) -> Array4<F> {
        let c1 = self.conv1.forward(x);
        let bn1 = self.bn1.forward_eval(&c1);
        let r1 = relu_forward(&bn1);
        let c2 = self.conv2.forward(&r1);
        let bn2 = self.bn2.forward_eval(&c2);
        let identity = match &self.down {
            Some((dconv, dbn)) => dbn.forward_eval(&dconv.forward(x)),
            None => x.clone(),
        };
        relu_forward(&(bn2 + &identity))
    }

    fn backward(
        &self,
        cache: &BlockCache<F>,
        dy: &Array4<F>,
        prefix: &str,
        grads: &mut GradMap<F>,
    ) -> Array4<F> {
        let dpre = relu_backward(&cache.pre, dy);

        let (dbn2_in, dgamma2, dbeta2) = self.bn2.backward(&cache.bn2, &dpre);
        accumulate(grads, &join_name(prefix, "bn2.gamma"), dgamma2.into_dyn());
        accumulate(grads, &join_name(prefix, "bn2.beta"), dbeta2.into_dyn());
        let (drelu1, dw2, _) = self.conv2.backward(&cache.relu1_out, &dbn2_in);
        accumulate(grads, &join_name(prefix, "conv2.weight"), dw2.into_dyn());

        let dbn1_out = relu_backward(&cache.bn1_out, &drelu1);
        let (dconv1_in, dgamma1, dbeta1) = self.bn1.backward(&cache.bn1, &dbn1_out);
        accumulate(grads, &join_name(prefix, "bn1.gamma"), dgamma1.into_dyn());
        accumulate(grads, &join_name(prefix, "bn1.beta"), dbeta1.into_dyn());
        let (mut dx, dw1, _) = self.conv1.backward(&cache.x, &dconv1_in);
        accumulate(grads, &join_name(prefix, "conv1.weight"), dw1.into_dyn());

        match (&self.down, &cache.down_bn) {
            (Some((dconv, dbn)), Some(dcache)) => {
                let (ddown_in, dgamma, dbeta) = dbn.backward(dcache, &dpre);
                accumulate(grads, &join_name(prefix, "down.bn.gamma"), dgamma.into_dyn());
                accumulate(grads, &join_name(prefix, "down.bn.beta"), dbeta.into_dyn());
                let (dxd, dwd, _) = dconv.backward(&cache.x, &ddown_in);
                accumulate(grads, &join_name(prefix, "down.conv.weight"), dwd.into_dyn());
                dx += &dxd;
            }
            _ => {
                dx += &dpre;
            }
        }
        dx
    }

    fn tensors(&self, prefix: &str) -> Vec<TensorRef<'_, F>> {
        let mut out = self.conv1.tensors(&join_name(prefix, "conv1"));
        out.extend(self.bn1.tensors(&join_name(prefix, "bn1")));
        out.extend(self.conv2.tensors(&join_name(prefix, "conv2")));
        out.extend(self.bn2.tensors(&join_name(prefix, "bn2")));
        if let Some((dconv, dbn)) = &self.down {
            out.extend(dconv.tensors(&join_name(prefix, "down.conv")));
            out.extend(dbn.tensors(&join_name(prefix, "down.bn")));
        }
        out
    }

    fn tensors_mut(&mut self, prefix: &str) -> Vec<TensorMut<'_, F>> {
        let mut out = self.conv1.tensors_mut(&join_name(prefix, "conv1"));
        out.extend(self.bn1.tensors_mut(&join_name(prefix, "bn1")));
        out.extend(self.conv2.tensors_mut(&join_name(prefix, "conv2")));
        out.extend(self.bn2.tensors_mut(&join_name(prefix, "bn2")));
        if let Some((dconv, dbn)) = &mut self.down {
            out.extend(dconv.tensors_mut(&join_name(prefix, "down.conv")));
            out.extend(dbn.tensors_mut(&join_name(prefix, "down.bn")));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct ResNet18<F> {
    stem_conv: Conv2d<F>,
    stem_bn: BatchNorm2d<F>,
    pool: MaxPool2d,
    stages: Vec<Vec<BasicBlock<F>>>,
}

pub struct ResNetCache<F> {
    x: Array4<F>,
    stem_bn: BnCache<F>,
    stem_bn_out: Array4<F>,
    pool_argmax: Array4<u32>,
    pool_in_hw: (usize, usize),
    blocks: Vec<BlockCache<F>>,
    spatial: (usize, usize),
}

impl<F: Scalar> ResNet18<F> {
    pub fn init(rng: &mut ChaCha8Rng) -> Self {
        let stem_conv = Conv2d {
            weight: init::kaiming_conv(rng, (64, 3, 7, 7)),
            bias: None,
            stride: 2,
            padding: 3,
        };
        let mut stages = Vec::new();
        let mut cin = 64;
        for (si, &cout) in STAGE_CHANNELS.iter().enumerate() {
            let stride = if si == 0 { 1 } else { 2 };
            let b0 = BasicBlock::init(rng, cin, cout, stride);
            let b1 = BasicBlock::init(rng, cout, cout, 1);
            stages.push(vec![b0, b1]);
            cin = cout;
        }
        Self {
            stem_conv,
            stem_bn: BatchNorm2d::new(64),
            pool: MaxPool2d {
                kernel: 3,
                stride: 2,
                padding: 1,
            },
            stages,
        }
    }

    pub fn feature_dim(&self) -> usize {
        RESNET18_FEATURE_DIM
    }

    pub fn forward_train(
        &mut self,
        x: Array4<F>,
        update_running: bool,
    ) -> (Array2<F>, ResNetCache<F>) {
        let stem = self.stem_conv.forward(&x);
        let (stem_bn_out, stem_bn_cache) = self.stem_bn.forward_train(stem, update_running);
        let stem_relu_out = relu_forward(&stem_bn_out);
        let (_, _, ph, pw) = stem_relu_out.dim();
        let (pooled, argmax) = self.pool.forward(&stem_relu_out);

        let mut cur = pooled;
        let mut blocks = Vec::new();
        for stage in self.stages.iter_mut() {
            for block in stage.iter_mut() {
                let (y, cache) = block.forward_train(cur, update_running);
                blocks.push(cache);
                cur = y;
            }
        }
        let (_, _, h, w) = cur.dim();
        let feats = global_avg_pool(&cur);
        (
            feats,
            ResNetCache {
                x,
                stem_bn: stem_bn_cache,
                stem_bn_out,
                pool_argmax: argmax,
                pool_in_hw: (ph, pw),
                blocks,
                spatial: (h, w),
            },
        )
    }

    pub fn forward_eval(&self, x: &Array4<F>) -> Array2<F> {
        let stem = self.stem_conv.forward(x);
        let stem = self.stem_bn.forward_eval(&stem);
        let stem = relu_forward(&stem);
        let (mut cur, _) = self.pool.forward(&stem);
        for stage in self.stages.iter() {
            for block in stage.iter() {
                cur = block.forward_eval(&cur);
            }
        }
        global_avg_pool(&cur)
    }

    pub fn backward(
        &self,
        cache: &ResNetCache<F>,
        dfeats: &Array2<F>,
        prefix: &str,
        grads: &mut GradMap<F>,
    ) -> Array4<F> {
        let mut dcur = global_avg_pool_backward(dfeats, cache.spatial);
        let mut bi = cache.blocks.len();
        for (si, stage) in self.stages.iter().enumerate().rev() {
            for (li, block) in stage.iter().enumerate().rev() {
                bi -= 1;
                let name = join_name(prefix, &format!("layer{}.{li}", si + 1));
                dcur = block.backward(&cache.blocks[bi], &dcur, &name, grads);
            }
        }
        let dpool = self.pool.backward(cache.pool_in_hw, &cache.pool_argmax, &dcur);
        let dstem_bn_out = relu_backward(&cache.stem_bn_out, &dpool);
        let (dstem, dgamma, dbeta) = self.stem_bn.backward(&cache.stem_bn, &dstem_bn_out);
        accumulate(grads, &join_name(prefix, "stem.bn.gamma"), dgamma.into_dyn());
        accumulate(grads, &join_name(prefix, "stem.bn.beta"), dbeta.into_dyn());
        let (dx, dw, _) = self.stem_conv.backward(&cache.x, &dstem);
        accumulate(grads, &join_name(prefix, "stem.conv.weight"), dw.into_dyn());
        dx
    }

    pub fn tensors(&self, prefix: &str) -> Vec<TensorRef<'_, F>> {
        let mut out = self.stem_conv.tensors(&join_name(prefix, "stem.conv"));
        out.extend(self.stem_bn.tensors(&join_name(prefix, "stem.bn")));
        for (si, stage) in self.stages.iter().enumerate() {
            for (li, block) in stage.iter().enumerate() {
                out.extend(block.tensors(&join_name(prefix, &format!("layer{}.{li}", si + 1))));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self, prefix: &str) -> Vec<TensorMut<'_, F>> {
        let mut out = self.stem_conv.tensors_mut(&join_name(prefix, "stem.conv"));
        out.extend(self.stem_bn.tensors_mut(&join_name(prefix, "stem.bn")));
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for (li, block) in stage.iter_mut().enumerate() {
                out.extend(block.tensors_mut(&join_name(prefix, &format!("layer{}.{li}", si + 1))));
            }
        }
        out
    }
}
