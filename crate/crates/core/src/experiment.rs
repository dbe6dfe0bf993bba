//! End-to-end pipeline, experiment configuration and Monte-Carlo runs.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{calibrate_with_profile, CalibratedSpectrum, CalibrationConfig};
use crate::channel_model::{
    direct_path_cfr, sample_csi, ChannelPlan, CsiDataset, ErrorModel, GroundTruthChannel, DEFAULT_CENTERS_MHZ,
    HOP_INTERVAL, PACKETS_PER_CHANNEL, SUBCARRIERS_PER_CHANNEL, SUBCARRIER_SPACING,
};
use crate::classify::{build_profile, classify, Classification, ConfusionMatrix, ProfileLibrary, RipenessLabel};
use crate::delay_profile::{
    extract_direct_path, local_maxima, locate_direct_tap, refit_profile, solve_lasso, stitch, DelayProfile,
    DirectPathSpectrum, NdftOperator, RefitConfig,
};
use crate::error::{Error, Result};
use crate::features::{build_features_with, FeatureMode, FeatureVector, ModwtConfig, WaveletFamily};
use crate::scenario::{random_room, standard_classes, RoomConfig, SlabClass};

pub const REPORT_SCHEMA: &str = "fruitsense.report/1";
pub const BENCHMARK_SCHEMA: &str = "fruitsense.benchmark/1";

/// Seed streams for [`derive_seed`].
pub const STREAM_TRAIN: u64 = 1;
pub const STREAM_TEST: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanConfig {
    pub centers_mhz: Vec<f64>,
    pub subcarriers: usize,
    pub spacing: f64,
    pub hop_interval: f64,
    pub packets_per_channel: usize,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            centers_mhz: DEFAULT_CENTERS_MHZ.to_vec(),
            subcarriers: SUBCARRIERS_PER_CHANNEL,
            spacing: SUBCARRIER_SPACING,
            hop_interval: HOP_INTERVAL,
            packets_per_channel: PACKETS_PER_CHANNEL,
        }
    }
}

impl PlanConfig {
    pub fn build(&self) -> Result<ChannelPlan> {
        let centers: Vec<f64> = self.centers_mhz.iter().map(|m| m * 1e6).collect();
        ChannelPlan::from_centers(
            &centers,
            self.subcarriers,
            self.spacing,
            self.hop_interval,
            self.packets_per_channel,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub wavelet: WaveletFamily,
    pub levels: usize,
    pub mode: FeatureMode,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            wavelet: WaveletFamily::D4,
            levels: 4,
            mode: FeatureMode::Stitched,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub trials: usize,
    pub training_samples: usize,
    pub fruit_kind: String,
    /// Per-trial `phi_s` is drawn from `[-phi_s_range, phi_s_range]`;
    /// zero keeps `errors.phi_s`.
    pub phi_s_range: f64,
    pub plan: PlanConfig,
    pub errors: ErrorModel,
    pub room: RoomConfig,
    pub classes: Vec<SlabClass>,
    pub calibration: CalibrationConfig,
    pub refit: RefitConfig,
    pub features: FeatureConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 2024,
            trials: 200,
            training_samples: 10,
            fruit_kind: "generic".into(),
            phi_s_range: 0.1,
            plan: PlanConfig::default(),
            errors: ErrorModel::default(),
            room: RoomConfig::default(),
            classes: standard_classes(),
            calibration: CalibrationConfig::default(),
            refit: RefitConfig::default(),
            features: FeatureConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        self.plan.build().map_err(|e| Error::Config(e.to_string()))?;
        self.errors.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.room.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.modwt().validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.classes.is_empty() {
            return bad("at least one class is required");
        }
        if self.training_samples == 0 {
            return bad("training_samples must be positive");
        }
        if !(self.phi_s_range >= 0.0) {
            return bad("phi_s_range must be non-negative");
        }
        Ok(())
    }

    pub fn modwt(&self) -> ModwtConfig {
        ModwtConfig::new(self.features.wavelet, self.features.levels)
    }

    pub fn settings(&self) -> PipelineSettings {
        PipelineSettings {
            calibration: self.calibration,
            refit: self.refit,
            modwt: self.modwt(),
            feature_mode: self.features.mode,
        }
    }
}

/// Everything the chain needs after the dataset exists.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSettings {
    pub calibration: CalibrationConfig,
    pub refit: RefitConfig,
    pub modwt: ModwtConfig,
    pub feature_mode: FeatureMode,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        ExperimentConfig::default().settings()
    }
}

/// Wall-clock seconds per stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct StageTimings {
    pub calibrate: f64,
    pub pdp: f64,
    pub refit: f64,
    pub extract: f64,
    pub features: f64,
    pub classify: f64,
}

impl StageTimings {
    pub fn total(&self) -> f64 {
        self.calibrate + self.pdp + self.refit + self.extract + self.features + self.classify
    }

    pub fn rows(&self) -> [(&'static str, f64); 6] {
        [
            ("calibrate", self.calibrate),
            ("pdp", self.pdp),
            ("refit", self.refit),
            ("extract", self.extract),
            ("features", self.features),
            ("classify", self.classify),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub calibrated: CalibratedSpectrum,
    /// Lasso solution on the calibrated spectrum.
    pub lasso: DelayProfile,
    /// Refitted profile used for extraction.
    pub profile: DelayProfile,
    pub direct: DirectPathSpectrum,
    pub features: FeatureVector,
    pub classification: Option<Classification>,
    pub timings: StageTimings,
}

fn timed<T>(slot: &mut f64, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let t = Instant::now();
    let out = f();
    *slot = t.elapsed().as_secs_f64();
    out
}

/// Calibrate, solve, refit, extract and transform one dataset; classify it
/// when a library is given.
pub fn run_pipeline(
    dataset: &CsiDataset,
    settings: &PipelineSettings,
    library: Option<&ProfileLibrary>,
) -> Result<PipelineOutput> {
    let mut timings = StageTimings::default();
    let cal_cfg = &settings.calibration;
    let (calibrated, seed_profile) = timed(&mut timings.calibrate, || calibrate_with_profile(dataset, cal_cfg))?;
    let plan = &calibrated.plan;
    let y = stitch(&calibrated);
    let op = NdftOperator::new(&plan.frequencies(), cal_cfg.grid)?;
    let lasso = timed(&mut timings.pdp, || {
        let warm = seed_profile.as_ref().map(|p| p.taps.as_slice());
        solve_lasso(&op, &y, &cal_cfg.sparsity, warm)
    })?;
    let profile = timed(&mut timings.refit, || {
        refit_profile(&lasso, &op, &y, &cal_cfg.window, &settings.refit)
    })?;
    let direct = timed(&mut timings.extract, || extract_direct_path(&profile, plan, &cal_cfg.window))?;
    let features = timed(&mut timings.features, || {
        build_features_with(&direct, &settings.modwt, settings.feature_mode, plan.subcarrier_count_per_channel)
    })?;
    let classification = match library {
        Some(lib) => Some(timed(&mut timings.classify, || {
            lib.check_plan(&plan.fingerprint())?;
            classify(&features, lib)
        })?),
        None => None,
    };
    Ok(PipelineOutput {
        calibrated,
        lasso,
        profile,
        direct,
        features,
        classification,
        timings,
    })
}

/// Relative RMS error of the extracted amplitude response against the true
/// direct-path response.
pub fn direct_path_error(direct: &DirectPathSpectrum, truth: &GroundTruthChannel) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (f, h) in direct.frequencies.iter().zip(&direct.response) {
        let want = direct_path_cfr(truth, *f)?.norm();
        num += (h.norm() - want).powi(2);
        den += want * want;
    }
    Ok((num / den).sqrt())
}

/// Phase difference folded into `[-pi, pi)`.
pub fn phase_error(a: f64, b: f64) -> f64 {
    use std::f64::consts::PI;
    (a - b + PI).rem_euclid(2.0 * PI) - PI
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathRow {
    pub tap: usize,
    pub delay_ns: f64,
    pub magnitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthMetrics {
    pub phi_s_error: f64,
    pub direct_rms_error: f64,
}

/// Versioned summary of one pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub schema: String,
    pub plan_hash: String,
    pub coherence_warning: Option<String>,
    pub estimated_phi_s: f64,
    pub residual_report: Vec<f64>,
    pub solver_iterations: usize,
    pub objective_monotone: bool,
    pub lambda: f64,
    /// Local maxima of the refitted profile at or above 10% of its peak.
    pub paths: Vec<PathRow>,
    pub direct_tap: usize,
    pub kept_taps: Vec<usize>,
    pub feature_levels: usize,
    pub feature_len: usize,
    pub classification: Option<Classification>,
    pub truth: Option<TruthMetrics>,
    pub timings: StageTimings,
}

impl PipelineOutput {
    pub fn report(&self, dataset: &CsiDataset, settings: &PipelineSettings) -> Result<PipelineReport> {
        let plan = &self.calibrated.plan;
        let mags = self.profile.magnitudes();
        let paths = local_maxima(&mags, 0.1)
            .into_iter()
            .map(|tap| PathRow {
                tap,
                delay_ns: self.profile.grid.delay(tap) * 1e9,
                magnitude: mags[tap],
            })
            .collect();
        let truth = match (&dataset.truth, &dataset.injected) {
            (Some(t), Some(inj)) => Some(TruthMetrics {
                phi_s_error: phase_error(self.calibrated.estimated_phi_s, inj.phi_s),
                direct_rms_error: direct_path_error(&self.direct, t)?,
            }),
            _ => None,
        };
        let (feature_levels, feature_len) = self.features.shape();
        Ok(PipelineReport {
            schema: REPORT_SCHEMA.into(),
            plan_hash: plan.fingerprint(),
            coherence_warning: plan.coherence_warning(),
            estimated_phi_s: self.calibrated.estimated_phi_s,
            residual_report: self.calibrated.residual_report.clone(),
            solver_iterations: self.lasso.iterations(),
            objective_monotone: self.lasso.objective_monotone(),
            lambda: self.lasso.lambda,
            paths,
            direct_tap: locate_direct_tap(&self.profile, &settings.calibration.window)?,
            kept_taps: self.direct.kept_taps.clone(),
            feature_levels,
            feature_len,
            classification: self.classification.clone(),
            truth,
            timings: self.timings,
        })
    }
}

/// Independent seed for trial `index` of `stream`.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream((stream << 32) | index);
    rng.next_u64()
}

/// One synthetic measurement of `class` in a random room. The room and the
/// hardware errors come from separate streams of `seed`, so changing the
/// room (for example adding reflectors) leaves the error draw untouched.
pub fn simulate_trial(cfg: &ExperimentConfig, plan: &ChannelPlan, class: &SlabClass, seed: u64) -> Result<CsiDataset> {
    let mut room_rng = ChaCha8Rng::seed_from_u64(seed);
    room_rng.set_stream(0);
    let truth = random_room(&mut room_rng, class, plan, &cfg.room)?;
    let mut err_rng = ChaCha8Rng::seed_from_u64(seed);
    err_rng.set_stream(1);
    let phi_s = if cfg.phi_s_range > 0.0 {
        err_rng.gen_range(-cfg.phi_s_range..=cfg.phi_s_range)
    } else {
        cfg.errors.phi_s
    };
    let errors = ErrorModel {
        phi_s,
        rng_seed: err_rng.gen(),
        ..cfg.errors
    };
    sample_csi(&truth, plan, &errors)
}

/// Average the features of `training_samples` simulated measurements per class.
pub fn build_library(cfg: &ExperimentConfig) -> Result<ProfileLibrary> {
    cfg.validate()?;
    let plan = cfg.plan.build()?;
    let settings = cfg.settings();
    let n = cfg.training_samples;
    let jobs: Vec<(usize, usize)> = (0..cfg.classes.len()).flat_map(|c| (0..n).map(move |i| (c, i))).collect();
    let features = jobs
        .par_iter()
        .map(|&(c, i)| {
            let seed = derive_seed(cfg.seed, STREAM_TRAIN, (c * n + i) as u64);
            let ds = simulate_trial(cfg, &plan, &cfg.classes[c], seed)?;
            Ok(run_pipeline(&ds, &settings, None)?.features)
        })
        .collect::<Result<Vec<_>>>()?;
    let profiles = cfg
        .classes
        .iter()
        .enumerate()
        .map(|(c, class)| build_profile(&features[c * n..(c + 1) * n], class.label))
        .collect::<Result<Vec<_>>>()?;
    let lib = ProfileLibrary {
        profiles,
        fruit_kind: cfg.fruit_kind.clone(),
        plan_hash: plan.fingerprint(),
    };
    lib.validate()?;
    Ok(lib)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub index: usize,
    pub seed: u64,
    pub truth: RipenessLabel,
    pub predicted: RipenessLabel,
    pub tie: bool,
    pub phi_s_true: f64,
    pub phi_s_hat: f64,
    pub direct_rms_error: f64,
    pub objective_monotone: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub schema: String,
    pub seed: u64,
    pub trials: usize,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
    pub median_phi_s_error: f64,
    pub median_direct_rms_error: f64,
    pub max_trial_seconds: f64,
    pub outcomes: Vec<TrialOutcome>,
}

/// Median of a sample; NaN when empty.
pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

/// Linear-interpolated quantile of a sample; NaN when empty.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Classify `cfg.trials` fresh measurements, cycling through the classes.
pub fn run_benchmark(cfg: &ExperimentConfig, library: &ProfileLibrary) -> Result<BenchmarkReport> {
    cfg.validate()?;
    let plan = cfg.plan.build()?;
    library.check_plan(&plan.fingerprint())?;
    let settings = cfg.settings();
    let outcomes = (0..cfg.trials)
        .into_par_iter()
        .map(|index| {
            let class = &cfg.classes[index % cfg.classes.len()];
            let seed = derive_seed(cfg.seed, STREAM_TEST, index as u64);
            let start = Instant::now();
            let ds = simulate_trial(cfg, &plan, class, seed)?;
            let out = run_pipeline(&ds, &settings, Some(library))?;
            let seconds = start.elapsed().as_secs_f64();
            let c = out.classification.expect("library was given");
            let truth = ds.truth.as_ref().expect("simulated data carries truth");
            let phi_s_true = ds.injected.as_ref().map_or(0.0, |i| i.phi_s);
            Ok(TrialOutcome {
                index,
                seed,
                truth: class.label,
                predicted: c.label,
                tie: c.tie,
                phi_s_true,
                phi_s_hat: out.calibrated.estimated_phi_s,
                direct_rms_error: direct_path_error(&out.direct, truth)?,
                objective_monotone: out.lasso.objective_monotone(),
                seconds,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut labels: Vec<RipenessLabel> = cfg.classes.iter().map(|c| c.label).collect();
    labels.sort();
    labels.dedup();
    let mut confusion = ConfusionMatrix::new(labels);
    for o in &outcomes {
        confusion.record(o.truth, o.predicted);
    }
    let phi: Vec<f64> = outcomes.iter().map(|o| phase_error(o.phi_s_hat, o.phi_s_true).abs()).collect();
    let rms: Vec<f64> = outcomes.iter().map(|o| o.direct_rms_error).collect();
    Ok(BenchmarkReport {
        schema: BENCHMARK_SCHEMA.into(),
        seed: cfg.seed,
        trials: cfg.trials,
        accuracy: confusion.accuracy(),
        confusion,
        median_phi_s_error: median(&phi),
        median_direct_rms_error: median(&rms),
        max_trial_seconds: outcomes.iter().map(|o| o.seconds).fold(0.0, f64::max),
        outcomes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel_model::DielectricSlab;

    #[test]
    fn empty_config_is_the_default() {
        assert_eq!(ExperimentConfig::from_toml_str("").unwrap(), ExperimentConfig::default());
        let cfg = ExperimentConfig::from_toml_str("seed = 5\n[calibration.search]\nphi_max = 0.3\n").unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.calibration.search.phi_max, 0.3);
    }

    #[test]
    fn unknown_and_invalid_keys_are_rejected() {
        assert!(matches!(ExperimentConfig::from_toml_str("sed = 5"), Err(Error::Config(_))));
        assert!(ExperimentConfig::from_toml_str("[room]\nreflectors_min = 9\nreflectors_max = 2\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[plan]\ncenters_mhz = []\n").is_err());
        assert!(ExperimentConfig::from_toml_str("training_samples = 0").is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn seeds_are_distinct_and_stable() {
        let a: Vec<u64> = (0..50).map(|i| derive_seed(7, STREAM_TEST, i)).collect();
        let mut b = a.clone();
        b.sort();
        b.dedup();
        assert_eq!(b.len(), 50);
        assert_eq!(derive_seed(7, STREAM_TEST, 3), a[3]);
        assert_ne!(derive_seed(7, STREAM_TRAIN, 3), a[3]);
    }

    #[test]
    fn quantiles() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[1.0, 2.0, 3.0, 4.0]), 2.5);
        assert_eq!(quantile(&[0.0, 10.0], 0.95), 9.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn paired_trials_share_errors() {
        let cfg = ExperimentConfig::default();
        let plan = cfg.plan.build().unwrap();
        let mut more = cfg.clone();
        more.room.extra_reflectors = 2;
        let a = simulate_trial(&cfg, &plan, &cfg.classes[1], 99).unwrap();
        let b = simulate_trial(&more, &plan, &cfg.classes[1], 99).unwrap();
        assert_eq!(a.injected, b.injected);
        let (ta, tb) = (a.truth.unwrap(), b.truth.unwrap());
        assert_eq!(tb.reflected_paths.len(), ta.reflected_paths.len() + 2);
        assert_eq!(&tb.reflected_paths[..ta.reflected_paths.len()], &ta.reflected_paths[..]);
    }

    #[test]
    fn noise_free_line_of_sight_reports_one_path() {
        let plan = ChannelPlan::default_5ghz();
        let truth = GroundTruthChannel::direct_only(5e-9, DielectricSlab::new(35.0, 9.0, 0.015).unwrap());
        let ds = sample_csi(&truth, &plan, &ErrorModel::none()).unwrap();
        let settings = PipelineSettings::default();
        let out = run_pipeline(&ds, &settings, None).unwrap();
        let report = out.report(&ds, &settings).unwrap();
        assert_eq!(report.paths.len(), 1);
        assert_eq!(report.direct_tap, 10);
        assert!(report.objective_monotone);
        let t = report.truth.unwrap();
        assert!(t.phi_s_error.abs() < 1e-4, "{}", t.phi_s_error);
        assert!(t.direct_rms_error < 0.01, "{}", t.direct_rms_error);
        assert_eq!(report.schema, REPORT_SCHEMA);
    }

    #[test]
    fn small_benchmark_runs() {
        let cfg = ExperimentConfig {
            trials: 4,
            training_samples: 2,
            ..Default::default()
        };
        let lib = build_library(&cfg).unwrap();
        assert_eq!(lib.profiles.len(), 4);
        let report = run_benchmark(&cfg, &lib).unwrap();
        assert_eq!(report.outcomes.len(), 4);
        assert_eq!(report.confusion.total(), 4);
        assert!((0..4).all(|i| report.outcomes[i].index == i));
    }

    #[test]
    fn library_from_another_plan_is_refused() {
        let cfg = ExperimentConfig {
            trials: 1,
            training_samples: 1,
            ..Default::default()
        };
        let mut lib = build_library(&cfg).unwrap();
        lib.plan_hash = "0".repeat(64);
        assert!(run_benchmark(&cfg, &lib).is_err());
    }
}
