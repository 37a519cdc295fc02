//! Fixtures shared by the benchmarks.

use psgan_core::data::{synth_texture, ImageSource, SynthKind};
use psgan_core::trainer::{Checkpoint, Model, TrainConfig};
use psgan_core::{NetSpec, NoiseSpec};

/// An untrained model with local, global and periodic channels.
pub fn model(depth: usize, base_channels: usize) -> Model {
    let noise = NoiseSpec::new(4, 2, 2, 4, 4);
    let net = NetSpec {
        depth,
        base_channels,
        ..NetSpec::default()
    };
    Model::new(&noise, &net, 16, 1).expect("valid bench model")
}

/// Fresh training state for a depth-4 model on 64 pixel patches, plus a
/// stripe texture to draw them from.
pub fn training(minibatch: usize, base_channels: usize) -> (Checkpoint, ImageSource) {
    let noise = NoiseSpec::new(4, 0, 2, 4, 4);
    let net = NetSpec {
        depth: 4,
        base_channels,
        ..NetSpec::default()
    };
    let cfg = TrainConfig {
        minibatch,
        patch_size: 64,
        ..TrainConfig::default()
    };
    let state = Checkpoint::new(&noise, &net, &cfg).expect("valid bench config");
    let img = synth_texture(&SynthKind::Stripes { period: 16.0, angle: 0.0 }, 256, 256).expect("texture");
    (state, ImageSource::from_images(vec![img], 64).expect("source"))
}
