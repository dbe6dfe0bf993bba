//! Synthetic ripeness classes and random rooms for Monte-Carlo runs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel_model::{
    attenuation_factor, ChannelPlan, DielectricSlab, DirectPath, GroundTruthChannel, ReflectedPath,
    SPEED_OF_LIGHT,
};
use crate::classify::RipenessLabel;
use crate::error::{Error, Result};

const CLASSES_TOML: &str = include_str!("../fixtures/classes.toml");

/// A labeled slab parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlabClass {
    pub label: RipenessLabel,
    pub epsilon_real: f64,
    pub epsilon_imag: f64,
    pub thickness: f64,
}

impl SlabClass {
    pub fn slab(&self) -> Result<DielectricSlab> {
        DielectricSlab::new(self.epsilon_real, self.epsilon_imag, self.thickness)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassFile {
    class: Vec<SlabClass>,
}

/// The four frozen classes from `fixtures/classes.toml`, least ripe first.
pub fn standard_classes() -> Vec<SlabClass> {
    let file: ClassFile = toml::from_str(CLASSES_TOML).expect("class fixture parses");
    file.class
}

/// Random room geometry. Reflection amplitudes are relative to a direct path
/// normalized to unit RMS over the plan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoomConfig {
    pub reflectors_min: usize,
    pub reflectors_max: usize,
    /// Additional reflectors on top of the static room, e.g. a walking person.
    pub extra_reflectors: usize,
    /// Excess delay of a reflection over the direct path, seconds.
    pub surplus_min: f64,
    pub surplus_max: f64,
    pub reflectivity_min: f64,
    pub reflectivity_max: f64,
    /// Path length at which spreading loss halves a reflection, metres.
    pub reference_distance: f64,
    pub direct_delay: f64,
    /// Relative uniform spread applied to both permittivity parts per sample.
    pub epsilon_jitter: f64,
}

impl Default for RoomConfig {
    fn default() -> Self {
        RoomConfig {
            reflectors_min: 3,
            reflectors_max: 6,
            extra_reflectors: 0,
            surplus_min: 3e-9,
            surplus_max: 40e-9,
            reflectivity_min: 0.2,
            reflectivity_max: 0.6,
            reference_distance: 1.0,
            direct_delay: 5e-9,
            epsilon_jitter: 0.0,
        }
    }
}

impl RoomConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.reflectors_min <= self.reflectors_max
            && 0.0 <= self.surplus_min
            && self.surplus_min <= self.surplus_max
            && 0.0 <= self.reflectivity_min
            && self.reflectivity_min <= self.reflectivity_max
            && self.reference_distance > 0.0
            && self.direct_delay >= 0.0
            && (0.0..1.0).contains(&self.epsilon_jitter);
        if ok {
            Ok(())
        } else {
            Err(Error::Config("inconsistent room parameters".into()))
        }
    }
}

/// Draw a room around `class`. Randomness is consumed in a fixed order
/// (jitter, static reflectors, extra reflectors), so two configs differing
/// only in `extra_reflectors` share the same static room for one seed.
pub fn random_room<R: Rng>(
    rng: &mut R,
    class: &SlabClass,
    plan: &ChannelPlan,
    cfg: &RoomConfig,
) -> Result<GroundTruthChannel> {
    cfg.validate()?;
    let mut ep = class.epsilon_real;
    let mut epp = class.epsilon_imag;
    if cfg.epsilon_jitter > 0.0 {
        ep *= 1.0 + rng.gen_range(-cfg.epsilon_jitter..=cfg.epsilon_jitter);
        epp *= 1.0 + rng.gen_range(-cfg.epsilon_jitter..=cfg.epsilon_jitter);
    }
    let slab = DielectricSlab::new(ep, epp, class.thickness)?;

    let mut sq = 0.0;
    for f in plan.frequencies() {
        sq += (-2.0 * attenuation_factor(&slab, f)? * slab.thickness).exp();
    }
    let gain = (plan.len() as f64 / sq).sqrt();

    let n = rng.gen_range(cfg.reflectors_min..=cfg.reflectors_max);
    let mut reflected_paths: Vec<ReflectedPath> = (0..n).map(|_| reflector(rng, cfg)).collect();
    reflected_paths.extend((0..cfg.extra_reflectors).map(|_| reflector(rng, cfg)));

    let truth = GroundTruthChannel {
        direct_path: DirectPath {
            delay: cfg.direct_delay,
            slab,
            gain,
        },
        reflected_paths,
    };
    truth.validate()?;
    Ok(truth)
}

fn reflector<R: Rng>(rng: &mut R, cfg: &RoomConfig) -> ReflectedPath {
    let surplus = rng.gen_range(cfg.surplus_min..=cfg.surplus_max);
    let gamma = rng.gen_range(cfg.reflectivity_min..=cfg.reflectivity_max);
    ReflectedPath {
        amplitude: gamma / (1.0 + surplus * SPEED_OF_LIGHT / cfg.reference_distance),
        delay: cfg.direct_delay + surplus,
    }
}
