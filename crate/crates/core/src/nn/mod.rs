//! Minimal reverse-mode autodiff kernel: the tape, the layers the search
//! space needs, Adam, and the warmup/cosine schedule.

pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod tensor;

pub use gradcheck::{check_gradients, GradCheck};
pub use graph::{Graph, SeqLayout, Var, LAYER_NORM_EPS};
pub use layers::{glorot, multi_head_attention, AttentionParams, Dense, EncoderBlock, LayerNormParams};
pub use optim::{adam_step, lr_at, AdamState, ScheduleSpec};
pub use tensor::{ParamId, ParamStore, Tensor};
