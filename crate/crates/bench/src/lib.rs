//! Shared inputs for the benchmarks in `benches/`.

use scp_core::data::{self, GenSpec, VideoClip};
use scp_core::model::{patchify, Batch, EncoderConfig, Model, ModelConfig, Nonlinearity, PromptMode, Task};
use scp_core::{RngStream, Tensor};

/// A textured `size × size × 3` frame.
pub fn frame(size: usize, seed: u64) -> Tensor {
    Tensor::uniform(&[size, size, 3], 0.0, 1.0, &mut RngStream::new(seed))
}

/// One clip from the default generator spec.
pub fn clip() -> VideoClip {
    let spec = GenSpec {
        train_clips: 1,
        val_clips: 0,
        ..GenSpec::default()
    };
    data::generate(&spec).expect("default spec is feasible").clips.remove(0)
}

/// The default-sized single-agent model (32×32 frames, 4 clips).
pub fn model(mode: PromptMode, patch_size: usize) -> Model {
    let config = ModelConfig {
        height: 32,
        width: 32,
        classes: 8,
        clips: 4,
        task: Task::Single,
        agents: 1,
        encoder: EncoderConfig {
            patch_size,
            prompt_mode: mode,
            ..EncoderConfig::default()
        },
        nonlinearity: Nonlinearity::Tanh,
    };
    Model::init(config, &RngStream::new(0)).expect("valid config")
}

/// `videos` random 8-frame videos cut into patches for `model`.
pub fn batch(model: &Model, videos: usize) -> Batch {
    let p = model.config.encoder.patch_size;
    let frames: Vec<Tensor> = (0..videos * 8)
        .map(|i| patchify(&frame(32, i as u64), p).expect("divisible"))
        .collect();
    Batch {
        patches: Tensor::stack(&frames).expect("same shapes"),
        videos,
        frames: 8,
        boxes: None,
    }
}
