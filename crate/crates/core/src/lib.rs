//! WiFi CSI signal chain for fruit ripeness sensing.
//!
//! Stages, in order:
//!
//! 1. [`channel_model`]: synthetic multi-channel CSI through a lossy slab,
//!    with realistic NIC phase and amplitude errors.
//! 2. [`calibration`]: packet averaging, sampling-offset slope estimation and
//!    constant-phase alignment across channels.
//! 3. [`delay_profile`]: sparse delay profile over the stitched non-uniform
//!    spectrum, direct-path isolation and its frequency response.
//! 4. [`features`]: MODWT coefficients of the direct-path amplitude.
//! 5. [`classify`]: per-level correlation against ripeness profiles.
//!
//! [`experiment`] wires the stages together and [`container`] stores every
//! intermediate artifact in one text format.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod channel_model;
pub mod classify;
pub mod container;
pub mod delay_profile;
pub mod error;
pub mod experiment;
pub mod features;
pub mod scenario;

pub use calibration::{calibrate, CalibratedSpectrum, CalibrationConfig};
pub use channel_model::{sample_csi, ChannelPlan, CsiDataset, DielectricSlab, ErrorModel, GroundTruthChannel};
pub use classify::{classify, ConfusionMatrix, ProfileLibrary, RipenessLabel, RipenessProfile};
pub use container::{Artifact, Container, PlannedProfile};
pub use delay_profile::{extract_direct_path, forward_ndft, inverse_ndft, DelayGrid, DelayProfile, DirectPathSpectrum};
pub use error::{Error, Result, Stage};
pub use experiment::{run_pipeline, ExperimentConfig, PipelineSettings};
pub use features::{build_features, imodwt, modwt, FeatureVector, ModwtConfig};
