//! Shared inputs for the signal-chain benchmarks.

use fruitsense::channel_model::{sample_csi, ChannelPlan, CsiDataset, ErrorModel, GroundTruthChannel, ReflectedPath};
use fruitsense::DielectricSlab;

/// A fixed three-path room behind a mid-ripeness slab.
pub fn reference_truth() -> GroundTruthChannel {
    let slab = DielectricSlab::new(35.0, 9.0, 0.015).expect("valid slab");
    let mut truth = GroundTruthChannel::direct_only(5e-9, slab);
    truth.direct_path.gain = 2.0e4;
    truth.reflected_paths = vec![
        ReflectedPath { amplitude: 0.3, delay: 12e-9 },
        ReflectedPath { amplitude: 0.15, delay: 31e-9 },
    ];
    truth
}

/// Default plan, default error model, fixed seed.
pub fn reference_dataset() -> CsiDataset {
    let errors = ErrorModel {
        phi_s: 0.04,
        rng_seed: 11,
        ..Default::default()
    };
    sample_csi(&reference_truth(), &ChannelPlan::default_5ghz(), &errors).expect("reference dataset")
}
