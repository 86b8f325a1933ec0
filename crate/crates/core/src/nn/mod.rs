//! Small feed-forward network kernel: dense, 1D convolution, batch
//! normalisation and ReLU layers with explicit backward passes, the two
//! training losses, momentum SGD and a binary parameter container.

pub mod container;
pub mod gradcheck;
mod layer;
mod loss;
mod network;
mod optim;
mod tensor;

pub use layer::{BatchNorm, Cache, Conv1d, Dense, Layer, LayerSpec, Mode};
pub use loss::{cosine_sa_loss, softmax_cross_entropy};
pub use network::Sequential;
pub use optim::Sgd;
pub use tensor::{Scalar, Tensor};
