//! Learned image codec: convolutional analysis/synthesis transforms, a
//! factorized discretized-Gaussian entropy model, rate-distortion losses and
//! range-coded bitstreams.

mod bitstream;
mod loss;
mod model;
pub mod range_coder;

pub use bitstream::{
    channel_table, decode_bitstream, decode_symbols, encode_bitstream, encode_symbols,
    reconstruct_direct, Bitstream, BITSTREAM_MAGIC, PARAM_TOLERANCE, SYMBOL_BINS, SYMBOL_MAX,
    SYMBOL_MIN,
};
pub use loss::{
    crop, dequantize, latent_symbols, loss_human, loss_masked, loss_tl, noise_seed, padded_len,
    reflect_pad, relax_quantize, LossTerms, QuadraticTaskHead, QuantMode, DISTORTION_SCALE,
};
pub use model::{BoundLic, ConvLayer, LicConfig, LicModel, LIKELIHOOD_FLOOR};
