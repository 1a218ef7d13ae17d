//! Toy stand-ins for the frozen speech encoder and the frozen decoder.

pub mod decoder;
pub mod sfm;

pub use decoder::{
    pretrain_decoder, repeat_eval, Decoded, DecoderConfig, DecoderPretrainConfig, DecoderPretrainReport, ToyDecoder,
};
pub use sfm::{SynthSfm, SynthSfmConfig};
