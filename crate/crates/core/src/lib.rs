//! Periodic spatial GAN texture synthesis.
//!
//! A fully convolutional generator maps a structured noise tensor
//! `Z = [Z^l, Z^g, Z^p]` (local, global and plane-wave periodic channels) to
//! an image 2^depth times larger; a mirrored discriminator scores image
//! patches position by position. After training the generator renders
//! textures of any size, quilts of different textures, smooth morphs along
//! the learned manifold and tileable outputs.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod nn;
pub mod noise;
pub mod netspec;
pub mod optim;
pub mod sampler;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use netspec::{receptive_field, upsample_factor, Discriminator, Generator, NetSpec};
pub use noise::{
    assemble_noise, build_global, build_local, build_periodic_field, init_wavenumber_mlp,
    mlp_wavenumbers, sample_phases, GlobalField, GlobalMode, Grid, NoiseDraw, NoiseSpec,
    NoiseTensor, PeriodicField, WaveNumberMlp, WaveNumbers, WaveSource,
};
pub use tensor::Tensor;
