//! Dense tensors, masked softmax, small linear-algebra helpers, seeded
//! random streams and the tensor archive format.

pub mod archive;
pub mod linalg;
mod real;
pub mod rng;
pub mod softmax;
mod tensor;

pub use archive::{AnyTensor, Archive};
pub use linalg::{kmeans, pca_top, svd_top1, KMeans, Pca, Rank1};
pub use real::{gemm, DType, Real};
pub use rng::Rng;
pub use softmax::{column_masked_softmax, masked_row_softmax, row_softmax};
pub use tensor::Tensor;
