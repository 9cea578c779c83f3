//! Self-supervised pretraining on temporal satellite imagery.
//!
//! The library treats the temporal axis of co-registered satellite scenes as
//! a natural source of augmentation: global and local crops are sampled
//! across the temporal views of one geolocation and fed to a student/teacher
//! pair trained with a centered, temperature-sharpened cross-entropy
//! distillation loss. The teacher follows the student by exponential moving
//! average, and its backbone is the transfer artifact for downstream scene
//! classification (linear probing and fine-tuning).
//!
//! Module map:
//! - [`scene_store`] — temporal scene stacks on disk, labeled class-folder
//!   datasets, and a deterministic synthetic generator for desk-scale runs
//! - [`view_sampler`] — multi-crop sampling across temporal views
//! - [`nn`] — the minimal layer stack (conv, batch norm, linear, pooling)
//!   with hand-written backward passes, generic over `f32`/`f64`
//! - [`network`] — backbones, projection head, student/teacher pair
//! - [`distill`] — centering, sharpened softmaxes, the multi-view loss,
//!   and the EMA teacher update
//! - [`pretrain`] — the training loop, checkpointing, and exact resume
//! - [`eval`] — linear probing and fine-tuning with label-fraction sweeps

pub mod distill;
pub mod eval;
pub mod network;
pub mod nn;
pub mod pretrain;
pub mod rng;
pub mod scene_store;
pub mod tensor_file;
pub mod view_sampler;
