//! Contrastive training with a representation gradient cache.
//!
//! A batch-wise contrastive loss couples every example in a batch, so the
//! naive way to train with many in-batch negatives keeps activations for the
//! whole batch alive at once. This crate splits the backward pass in two:
//! gradients of the loss with respect to the *representations* are computed
//! from numerical embeddings alone and cached, and the encoders are then
//! back-propagated one sub-batch at a time using the cached vectors as
//! upstream gradients. The resulting parameter update is identical to a
//! direct large-batch update while activation memory depends only on the
//! sub-batch size.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! `*64` aliases below are what the tests and the bench driver use.

pub mod autodiff;
pub mod batch;
pub mod checkpoint;
pub mod deep;
pub mod encoder;
pub mod error;
pub mod gradcache;
pub mod grads;
pub mod loss;
pub mod memtrace;
pub mod multiworker;
pub mod optim;
pub mod profile;
pub mod scalar;
pub mod tensor;

pub use autodiff::Tape;
pub use batch::Batch;
pub use checkpoint::Checkpoint;
pub use deep::{DeepModel, DistanceGradientCache, DistanceHead};
pub use encoder::{Activation, DualEncoder, EncoderParams};
pub use error::{Error, Result};
pub use gradcache::{RepresentationGradientCache, SubBatchPlan};
pub use grads::ParamGrads;
pub use memtrace::{Category, MemCounter, Probe};
pub use optim::{OptimizerKind, OptimizerState};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = Tape<f64>;
pub type Tape32 = Tape<f32>;
pub type Batch64 = Batch<f64>;
pub type EncoderParams64 = EncoderParams<f64>;
pub type DualEncoder64 = DualEncoder<f64>;
pub type DistanceHead64 = DistanceHead<f64>;
pub type DeepModel64 = DeepModel<f64>;
pub type OptimizerState64 = OptimizerState<f64>;
pub type ParamGrads64 = ParamGrads<f64>;
