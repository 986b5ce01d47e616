//! Quantizers, sub-byte packing and integer kernels.

pub mod fake;
pub mod int_gemm;
pub mod pack;

pub use fake::{
    check_bits, fake_quantize, fake_quantize_backward, ste_bound_partials, QuantGrid,
    QuantizerState, Role, SearchMode, SUPPORTED_BITS,
};
pub use int_gemm::{int_linear, int_matmul, CodeMatrix};
pub use pack::PackedIntTensor;
