//! Dense tensors, a reverse-mode tape, seeded streams and the optimizer.

pub mod gradcheck;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheck};
pub use params::{AdamW, Backprop, Binding, Ctx, ParamGroup, ParamId, ParamStore};
pub use rng::{gaussian, SeedStreams};
pub use tape::{cosine_sim, softmax, softmax_in_place, Gradients, SparseRows, Tape, Var};
pub use tensor::Tensor;
