//! Fixtures shared by the benchmarks.

use raf_core::data::gen_dataset;
use raf_core::federated::{ClientSpec, ClientState};
use raf_core::model::stack;
use raf_core::{LossCoeffs, ModelConfig, ModelParams, Optimizer, Resolution, Tensor};

/// A `[n, h, w, 1]` batch of synthetic images.
pub fn image_batch(n: usize, res: Resolution, seed: u64) -> Tensor {
    let samples = gen_dataset(n, res.h, res.w, 5, seed).expect("valid fixture");
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    stack(&images).expect("same-shape images")
}

/// A three-level client with 16 samples and one batch per epoch.
pub fn raf_client(config: &ModelConfig, seed: u64) -> ClientState {
    let levels = vec![Resolution::new(64, 48), Resolution::new(48, 36), Resolution::new(32, 24)];
    let spec = ClientSpec {
        client_id: 0,
        samples: gen_dataset(16, 64, 48, config.keypoints, seed).expect("valid fixture"),
        levels,
        coeffs: LossCoeffs::default(),
        epochs: 1,
        batch_size: 16,
        lr: 0.01,
        optimizer: Optimizer::Adamw,
    };
    ClientState::new(spec, config, ModelParams::init(config, seed)).expect("valid client")
}
