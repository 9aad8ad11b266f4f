//! Numeric substrate: tensors, seeded streams, small networks with exact
//! backward passes, losses, the optimizer and a finite-difference checker.

pub mod grad;
pub mod gradcheck;
pub mod loss;
pub mod mlp;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use grad::GradVector;
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use loss::{loss_bce_logits, loss_cosine_distance, loss_mse, sigmoid};
pub use mlp::{mlp_backward, mlp_forward, Activation, GradRequest, Layer, LayerSpec, MlpCache, MlpGrads, MlpParams};
pub use optim::AdamW;
pub use rng::Rng;
pub use tensor::{cosine, dot, matmul, matmul_acc, matmul_nt, matmul_nt_acc, matmul_tn, matmul_tn_acc, norm, Tensor};
