//! Minimal neural-network layer stack with hand-written backward passes.
//!
//! Everything is generic over [`Scalar`] so training runs in `f32` while
//! gradient checks instantiate the same code in `f64`. Layers are plain
//! structs; the caller keeps each layer's forward cache and threads it into
//! `backward`. Parameter gradients accumulate into a [`GradMap`] keyed by the
//! same names the tensor visitors report, which is also the naming scheme
//! used by checkpoints, the optimizer, and the EMA update.
//!
//! Batch-parallel code paths reduce partial results in index order, so
//! outputs are identical regardless of worker count.

use std::collections::BTreeMap;

use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD, NdFloat};
use num_traits::{FromPrimitive, ToPrimitive};

pub mod activation;
pub mod adam;
pub mod batchnorm;
pub mod conv;
pub mod init;
pub mod linear;
pub mod pool;

pub use activation::{gelu_backward, gelu_forward, relu_backward, relu_forward};
pub use adam::{AdamConfig, AdamW};
pub use batchnorm::{BatchNorm2d, BnCache};
pub use conv::Conv2d;
pub use linear::Linear;
pub use pool::{global_avg_pool, global_avg_pool_backward, MaxPool2d};

/// Floating-point element type accepted by every layer.
pub trait Scalar: NdFloat + FromPrimitive + ToPrimitive {}
impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for converting literal constants into the generic scalar.
#[inline]
pub fn c<F: Scalar>(x: f64) -> F {
    F::from_f64(x).expect("constant representable in scalar type")
}

/// Gradients keyed by parameter name.
pub type GradMap<F> = BTreeMap<String, ArrayD<F>>;

/// Add `g` into `grads[name]`, creating the slot on first use.
pub fn accumulate<F: Scalar>(grads: &mut GradMap<F>, name: &str, g: ArrayD<F>) {
    match grads.get_mut(name) {
        Some(slot) => *slot += &g,
        None => {
            grads.insert(name.to_string(), g);
        }
    }
}

/// Distinguishes trainable parameters from running statistics.
///
/// The optimizer only touches `Param` entries; EMA updates and checkpoints
/// cover both kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Param,
    Stat,
}

/// Read-only named tensor exposed by a visitor.
pub struct TensorRef<'a, F> {
    pub name: String,
    pub kind: TensorKind,
    pub view: ArrayViewD<'a, F>,
}

/// Mutable named tensor exposed by a visitor.
pub struct TensorMut<'a, F> {
    pub name: String,
    pub kind: TensorKind,
    pub view: ArrayViewMutD<'a, F>,
}

/// Join a name prefix and a component, skipping the dot for empty prefixes.
pub fn join_name(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
