//! End-to-end model: frame sampling, input encoding, position encoding,
//! temporal aggregation, per-part heads, training, and retrieval evaluation.

pub mod eval;
pub mod model;
pub mod sampling;
pub mod spatial;
pub mod train;

pub use eval::{rank_eval, GalleryEntry, GalleryProbeResult};
pub use model::{ForwardOutput, FrameStage, ModelParams, PartHead, RunningNorm};
pub use sampling::{tsn_sample, SampleMode};
pub use spatial::{horizontal_pool, toy_spatial_encoder, SpatialEncoderParams};
pub use train::{train_toy, TrainOutcome};
