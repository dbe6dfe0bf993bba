//! Phase and amplitude error removal.
//!
//! Packets are averaged per channel, the common sampling-offset slope
//! `phi_s` is found by matching channel delay profiles, and the per-channel
//! constant phases are aligned to the lowest-frequency channel.
//!
//! Delay profiles cannot tell a common slope from a common delay shift, so
//! a cross-channel PDP comparison alone leaves `phi_s` undetermined up to a
//! shift of the whole room. The default [`SlopeObjective::Anchored`] resolves
//! this by pinning the direct path to a known reference delay: the slope
//! search matches every channel PDP against a single-path template at that
//! delay, and the channel phases are first aligned at that delay, then fitted
//! against a refitted sparse model of the stitched spectrum.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::channel_model::{ChannelPlan, CsiDataset};
use crate::delay_profile::{
    refit_profile, solve_lasso, DelayGrid, DelayProfile, NdftOperator, RefitConfig, SparsityConfig, TapWindowConfig,
};
use crate::error::{Error, Result};

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AveragingMode {
    /// Mean amplitude and mean unwrapped phase per subcarrier.
    #[default]
    UnwrappedPhase,
    ComplexMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SlopeObjective {
    /// Distance of each normalized channel PDP to a single-path template at
    /// the anchor delay; channel phases are then aligned at that delay.
    #[default]
    Anchored,
    /// Distance of each channel PDP to the cross-channel mean PDP.
    CrossChannelMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlopeSearchConfig {
    pub phi_max: f64,
    pub grid_points: usize,
    pub tol: f64,
    pub nfft: usize,
    pub objective: SlopeObjective,
    /// Direct-path delay the anchored objective pins the profile to, seconds.
    pub anchor_delay: f64,
}

impl Default for SlopeSearchConfig {
    fn default() -> Self {
        SlopeSearchConfig {
            phi_max: 0.5,
            grid_points: 2001,
            tol: 1e-5,
            nfft: 512,
            objective: SlopeObjective::Anchored,
            anchor_delay: 5e-9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    pub averaging: AveragingMode,
    pub search: SlopeSearchConfig,
    /// Alternations between the sparse model and per-channel phase fitting;
    /// zero keeps the plain constant-phase alignment.
    pub phase_rounds: usize,
    /// Stop once no channel rotates by more than this, radians.
    pub phase_tol: f64,
    pub grid: DelayGrid,
    pub sparsity: SparsityConfig,
    pub window: TapWindowConfig,
    /// Least-squares refit that turns each sparse solve into the phase model.
    pub refit: RefitConfig,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            averaging: AveragingMode::UnwrappedPhase,
            search: SlopeSearchConfig::default(),
            phase_rounds: 10,
            phase_tol: 1e-4,
            grid: DelayGrid::default(),
            sparsity: SparsityConfig::default(),
            window: TapWindowConfig::default(),
            refit: RefitConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedSpectrum {
    pub plan: ChannelPlan,
    pub per_channel: Vec<Vec<Complex64>>,
    pub estimated_phi_s: f64,
    /// Per-channel distance of the PDP to the cross-channel mean PDP.
    pub residual_report: Vec<f64>,
}

/// 1-D phase unwrap; a jump of exactly pi keeps its sign.
pub fn unwrap_phase(phases: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(phases.len());
    let mut offset = 0.0;
    for (i, &p) in phases.iter().enumerate() {
        if i > 0 {
            let d = p - phases[i - 1];
            let mut wrapped = (d + PI).rem_euclid(2.0 * PI) - PI;
            if wrapped == -PI && d > 0.0 {
                wrapped = PI;
            }
            offset += wrapped - d;
        }
        out.push(p + offset);
    }
    out
}

/// One averaged vector per channel.
pub fn average_packets(dataset: &CsiDataset, mode: AveragingMode) -> Result<Vec<Vec<Complex64>>> {
    let n_ch = dataset.plan.channel_count();
    let k = dataset.plan.subcarrier_count_per_channel;
    (0..n_ch)
        .map(|q| {
            let frames: Vec<&Vec<Complex64>> = dataset.frames.iter().filter_map(|p| p.get(q)).collect();
            if frames.is_empty() || frames.iter().any(|f| f.len() != k) {
                return Err(Error::Calibration(format!("channel {q} has no complete packets")));
            }
            let n = frames.len() as f64;
            Ok(match mode {
                AveragingMode::ComplexMean => (0..k)
                    .map(|i| frames.iter().map(|f| f[i]).sum::<Complex64>() / n)
                    .collect(),
                AveragingMode::UnwrappedPhase => {
                    let phases: Vec<Vec<f64>> = frames
                        .iter()
                        .map(|f| unwrap_phase(&f.iter().map(|v| v.arg()).collect::<Vec<_>>()))
                        .collect();
                    let reference = &phases[0];
                    let mut phase_sum = vec![0.0; k];
                    for ph in &phases {
                        // Put every packet on the 2 pi branch of the first one.
                        let shift = ph.iter().zip(reference).map(|(a, b)| a - b).sum::<f64>() / k as f64;
                        let turns = (shift / (2.0 * PI)).round() * 2.0 * PI;
                        for (s, p) in phase_sum.iter_mut().zip(ph) {
                            *s += p - turns;
                        }
                    }
                    (0..k)
                        .map(|i| {
                            let amp = frames.iter().map(|f| f[i].norm()).sum::<f64>() / n;
                            Complex64::from_polar(amp, phase_sum[i] / n)
                        })
                        .collect()
                }
            })
        })
        .collect()
}

/// Least-squares slope of unwrapped phase against frequency, rad/Hz.
fn phase_slope(v: &[Complex64], freqs: &[f64]) -> f64 {
    let ph = unwrap_phase(&v.iter().map(|x| x.arg()).collect::<Vec<_>>());
    let n = freqs.len() as f64;
    let fm = freqs.iter().sum::<f64>() / n;
    let pm = ph.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (f, p) in freqs.iter().zip(&ph) {
        sxy += (f - fm) * (p - pm);
        sxx += (f - fm) * (f - fm);
    }
    if sxx > 0.0 {
        sxy / sxx
    } else {
        0.0
    }
}

/// Rotate every channel onto the reference (first) channel's constant phase.
///
/// The alignment statistic is each channel's phase after removing a common
/// delay, estimated as the power-weighted mean of the per-channel phase
/// slopes. For a single-path channel this recovers the constant offsets
/// exactly.
pub fn align_constant_phase(per_channel: &[Vec<Complex64>], plan: &ChannelPlan) -> Vec<Vec<Complex64>> {
    if per_channel.len() < 2 {
        return per_channel.to_vec();
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (v, ch) in per_channel.iter().zip(&plan.channels) {
        let w: f64 = v.iter().map(|x| x.norm_sqr()).sum();
        num += w * phase_slope(v, &ch.subcarrier_frequencies);
        den += w;
    }
    let tau = if den > 0.0 { -num / den / (2.0 * PI) } else { 0.0 };
    let psi: Vec<f64> = per_channel
        .iter()
        .zip(&plan.channels)
        .map(|(v, ch)| {
            v.iter()
                .zip(&ch.subcarrier_frequencies)
                .map(|(x, &f)| x * Complex64::from_polar(1.0, 2.0 * PI * f * tau))
                .sum::<Complex64>()
                .arg()
        })
        .collect();
    per_channel
        .iter()
        .zip(&psi)
        .enumerate()
        .map(|(q, (v, &p))| {
            if q == 0 {
                return v.clone();
            }
            let rot = Complex64::from_polar(1.0, psi[0] - p);
            v.iter().map(|x| x * rot).collect()
        })
        .collect()
}

/// Rotate every channel so that its phase at delay `tau` matches the first
/// channel's. With the direct path at `tau` this removes the constant
/// offsets up to the multipath leaking into each channel's sum.
pub fn align_at_delay(per_channel: &[Vec<Complex64>], plan: &ChannelPlan, tau: f64) -> Vec<Vec<Complex64>> {
    let psi: Vec<f64> = per_channel
        .iter()
        .zip(&plan.channels)
        .map(|(v, ch)| {
            v.iter()
                .zip(&ch.subcarrier_frequencies)
                .map(|(x, &f)| x * Complex64::from_polar(1.0, 2.0 * PI * f * tau))
                .sum::<Complex64>()
                .arg()
        })
        .collect();
    per_channel
        .iter()
        .zip(&psi)
        .map(|(v, p)| {
            let rot = Complex64::from_polar(1.0, psi[0] - p);
            v.iter().map(|x| x * rot).collect()
        })
        .collect()
}

/// Multiply subcarrier `k` of every channel by `exp(-j k phi)`.
pub fn compensate(per_channel: &[Vec<Complex64>], phi: f64) -> Vec<Vec<Complex64>> {
    per_channel
        .iter()
        .map(|v| {
            v.iter()
                .enumerate()
                .map(|(k, x)| x * Complex64::from_polar(1.0, -(k as f64) * phi))
                .collect()
        })
        .collect()
}

/// Channel PDPs with a shared FFT plan.
struct PdpEngine {
    fft: Arc<dyn Fft<f64>>,
    nfft: usize,
}

impl PdpEngine {
    fn new(nfft: usize) -> Self {
        PdpEngine {
            fft: FftPlanner::new().plan_fft_inverse(nfft),
            nfft,
        }
    }

    /// Magnitude PDP of `v` compensated by slope `phi`.
    fn pdp(&self, v: &[Complex64], phi: f64) -> Vec<f64> {
        let ramp = ramp(v.len(), phi);
        let mut buf = vec![ZERO; self.nfft];
        self.pdp_into(v, &ramp, &mut buf)
    }

    /// As [`PdpEngine::pdp`] with a precomputed `exp(-j k phi)` ramp and a reusable buffer.
    fn pdp_into(&self, v: &[Complex64], ramp: &[Complex64], buf: &mut [Complex64]) -> Vec<f64> {
        buf.fill(ZERO);
        for ((b, x), r) in buf.iter_mut().zip(v).zip(ramp) {
            *b = x * r;
        }
        self.fft.process(buf);
        buf.iter().map(|x| x.norm() / self.nfft as f64).collect()
    }
}

fn ramp(len: usize, phi: f64) -> Vec<Complex64> {
    (0..len).map(|k| Complex64::from_polar(1.0, -(k as f64) * phi)).collect()
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// Per-channel distance of each PDP to the cross-channel mean PDP.
fn disparities(engine: &PdpEngine, per_channel: &[Vec<Complex64>], phi: f64) -> Vec<f64> {
    let pdps: Vec<Vec<f64>> = per_channel.iter().map(|v| engine.pdp(v, phi)).collect();
    let mut mean = vec![0.0; engine.nfft];
    for p in &pdps {
        for (m, x) in mean.iter_mut().zip(p) {
            *m += x / pdps.len() as f64;
        }
    }
    pdps.iter().map(|p| l2(p, &mean)).collect()
}

fn template(plan: &ChannelPlan, search: &SlopeSearchConfig, engine: &PdpEngine) -> Vec<f64> {
    let w = 2.0 * PI * plan.subcarrier_spacing() * search.anchor_delay;
    let v: Vec<Complex64> = (0..plan.subcarrier_count_per_channel)
        .map(|k| Complex64::from_polar(1.0, -w * k as f64))
        .collect();
    normalized(engine.pdp(&v, 0.0))
}

struct Objective<'a> {
    engine: PdpEngine,
    per_channel: &'a [Vec<Complex64>],
    template: Option<Vec<f64>>,
}

impl Objective<'_> {
    fn eval(&self, phi: f64) -> f64 {
        match &self.template {
            None => disparities(&self.engine, self.per_channel, phi).iter().sum(),
            Some(t) => {
                let len = self.per_channel.iter().map(Vec::len).max().unwrap_or(0);
                let ramp = ramp(len, phi);
                let mut buf = vec![ZERO; self.engine.nfft];
                self.per_channel
                    .iter()
                    .map(|v| l2(&normalized(self.engine.pdp_into(v, &ramp, &mut buf)), t))
                    .sum()
            }
        }
    }
}

fn objective<'a>(per_channel: &'a [Vec<Complex64>], plan: &ChannelPlan, search: &SlopeSearchConfig) -> Objective<'a> {
    let engine = PdpEngine::new(search.nfft.max(plan.subcarrier_count_per_channel));
    let template = match search.objective {
        SlopeObjective::Anchored => Some(template(plan, search, &engine)),
        SlopeObjective::CrossChannelMean => None,
    };
    Objective {
        engine,
        per_channel,
        template,
    }
}

/// Value of the slope-search objective at candidate slope `phi`.
pub fn slope_objective(
    per_channel: &[Vec<Complex64>],
    plan: &ChannelPlan,
    search: &SlopeSearchConfig,
    phi: f64,
) -> f64 {
    objective(per_channel, plan, search).eval(phi)
}

/// Slope minimizing the configured PDP objective: coarse grid, then golden section.
pub fn estimate_phi_s(per_channel: &[Vec<Complex64>], plan: &ChannelPlan, search: &SlopeSearchConfig) -> Result<f64> {
    if per_channel.len() < 2 {
        return Err(Error::Calibration("slope search needs at least 2 channels".into()));
    }
    if search.grid_points < 3 || !(search.phi_max > 0.0) || !(search.tol > 0.0) {
        return Err(Error::Calibration("invalid slope search settings".into()));
    }
    let obj = objective(per_channel, plan, search);
    let step = 2.0 * search.phi_max / (search.grid_points - 1) as f64;
    let candidate = |i: usize| -search.phi_max + i as f64 * step;
    let values: Vec<f64> = (0..search.grid_points)
        .into_par_iter()
        .map(|i| obj.eval(candidate(i)))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Calibration("slope objective is not finite".into()));
    }
    let best = (0..values.len()).fold(0, |b, i| if values[i] < values[b] { i } else { b });
    let mut a = candidate(best.saturating_sub(1));
    let mut b = candidate((best + 1).min(search.grid_points - 1));

    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - ratio * (b - a);
    let mut x2 = a + ratio * (b - a);
    let mut f1 = obj.eval(x1);
    let mut f2 = obj.eval(x2);
    while b - a > search.tol {
        if f1 < f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - ratio * (b - a);
            f1 = obj.eval(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + ratio * (b - a);
            f2 = obj.eval(x2);
        }
        if !f1.is_finite() || !f2.is_finite() {
            return Err(Error::Calibration("slope objective is not finite".into()));
        }
    }
    let mid = 0.5 * (a + b);
    Ok(if obj.eval(mid) <= values[best] { mid } else { candidate(best) })
}

/// Apply the slope correction and record per-channel disparities.
pub fn apply_compensation(
    per_channel: &[Vec<Complex64>],
    plan: &ChannelPlan,
    phi_s_hat: f64,
    nfft: usize,
) -> CalibratedSpectrum {
    let corrected = compensate(per_channel, phi_s_hat);
    let engine = PdpEngine::new(nfft.max(plan.subcarrier_count_per_channel));
    let residual_report = disparities(&engine, &corrected, 0.0);
    CalibratedSpectrum {
        plan: plan.clone(),
        per_channel: corrected,
        estimated_phi_s: phi_s_hat,
        residual_report,
    }
}

/// Alternate sparse solves with per-channel constant-phase fits against the
/// refitted stitched model; the first channel stays fixed. Returns the
/// rotated channels and the last lasso profile.
pub fn refine_constant_phase(
    per_channel: &[Vec<Complex64>],
    op: &NdftOperator,
    cfg: &CalibrationConfig,
    warm_start: Option<&[Complex64]>,
) -> Result<(Vec<Vec<Complex64>>, DelayProfile)> {
    let mut v = per_channel.to_vec();
    let mut warm = warm_start.map(|w| w.to_vec());
    for _ in 0..cfg.phase_rounds {
        let y: Vec<Complex64> = v.iter().flatten().copied().collect();
        let lasso = solve_lasso(op, &y, &cfg.sparsity, warm.as_deref())?;
        let model = op.apply(&refit_profile(&lasso, op, &y, &cfg.window, &cfg.refit)?.taps);
        let mut offset = 0;
        let mut rot = Vec::with_capacity(v.len());
        for ch in &v {
            let c: Complex64 = ch.iter().zip(&model[offset..]).map(|(x, m)| x * m.conj()).sum();
            rot.push(c.arg());
            offset += ch.len();
        }
        let r0 = rot[0];
        let mut worst: f64 = 0.0;
        for (ch, r) in v.iter_mut().zip(&rot) {
            let d = (r - r0 + PI).rem_euclid(2.0 * PI) - PI;
            worst = worst.max(d.abs());
            let u = Complex64::from_polar(1.0, -d);
            ch.iter_mut().for_each(|x| *x *= u);
        }
        warm = Some(lasso.taps);
        if worst < cfg.phase_tol {
            break;
        }
    }
    let y: Vec<Complex64> = v.iter().flatten().copied().collect();
    let profile = solve_lasso(op, &y, &cfg.sparsity, warm.as_deref())?;
    Ok((v, profile))
}

/// Full calibration chain on a dataset.
pub fn calibrate(dataset: &CsiDataset, cfg: &CalibrationConfig) -> Result<CalibratedSpectrum> {
    calibrate_with_profile(dataset, cfg).map(|(s, _)| s)
}

/// Calibration plus the last sparse profile computed during refinement, if any.
pub fn calibrate_with_profile(
    dataset: &CsiDataset,
    cfg: &CalibrationConfig,
) -> Result<(CalibratedSpectrum, Option<DelayProfile>)> {
    dataset.validate()?;
    let plan = &dataset.plan;
    let averaged = average_packets(dataset, cfg.averaging)?;
    let nfft = cfg.search.nfft;
    if plan.channel_count() == 1 {
        // No cross-channel reference: the slope is unobservable and left in place.
        return Ok((apply_compensation(&averaged, plan, 0.0, nfft), None));
    }
    let phi = estimate_phi_s(&averaged, plan, &cfg.search)?;
    let compensated = compensate(&averaged, phi);

    if cfg.search.objective != SlopeObjective::Anchored || cfg.phase_rounds == 0 {
        let mut spectrum = apply_compensation(&align_constant_phase(&compensated, plan), plan, 0.0, nfft);
        spectrum.estimated_phi_s = phi;
        return Ok((spectrum, None));
    }

    let op = NdftOperator::new(&plan.frequencies(), cfg.grid).map_err(|e| Error::Calibration(e.to_string()))?;
    let aligned = align_at_delay(&compensated, plan, cfg.search.anchor_delay);
    let (refined, profile) =
        refine_constant_phase(&aligned, &op, cfg, None).map_err(|e| Error::Calibration(e.to_string()))?;
    let mut spectrum = apply_compensation(&refined, plan, 0.0, nfft);
    spectrum.estimated_phi_s = phi;
    Ok((spectrum, Some(profile)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel_model::{
        plan_cfr, sample_csi, DielectricSlab, DriftMode, ErrorModel, GroundTruthChannel, ReflectedPath,
    };

    fn slab() -> DielectricSlab {
        DielectricSlab::new(35.0, 9.0, 0.015).unwrap()
    }

    fn los_room() -> GroundTruthChannel {
        let mut t = GroundTruthChannel::direct_only(5e-9, slab());
        t.direct_path.gain = 1.0 / crate::channel_model::direct_path_cfr(&t, 5.5e9).unwrap().norm();
        t.reflected_paths = vec![
            ReflectedPath { amplitude: 0.2, delay: 14e-9 },
            ReflectedPath { amplitude: 0.1, delay: 27e-9 },
        ];
        t
    }

    fn wrap(x: f64) -> f64 {
        (x + PI).rem_euclid(2.0 * PI) - PI
    }

    #[test]
    fn unwrap_removes_jumps() {
        let raw: Vec<f64> = (0..50).map(|k| wrap(0.9 * k as f64)).collect();
        let u = unwrap_phase(&raw);
        for (k, p) in u.iter().enumerate() {
            assert!((p - 0.9 * k as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn single_packet_average_is_identity() {
        let mut plan = ChannelPlan::default_5ghz();
        plan.packets_per_channel = 1;
        let ds = sample_csi(&los_room(), &plan, &ErrorModel { rng_seed: 2, ..Default::default() }).unwrap();
        let avg = average_packets(&ds, AveragingMode::UnwrappedPhase).unwrap();
        for (a, f) in avg.iter().zip(&ds.frames[0]) {
            for (x, y) in a.iter().zip(f) {
                assert!((x - y).norm() < 1e-12 * y.norm().max(1.0));
            }
        }
    }

    #[test]
    fn single_channel_plan_is_averaged_only() {
        let plan = ChannelPlan::from_centers(&[5.5e9], 56, 312.5e3, 1e-4, 4).unwrap();
        let ds = sample_csi(&los_room(), &plan, &ErrorModel::none()).unwrap();
        let cal = calibrate(&ds, &CalibrationConfig::default()).unwrap();
        assert_eq!(cal.estimated_phi_s, 0.0);
        let h = plan_cfr(&los_room(), &plan).unwrap();
        for (a, b) in cal.per_channel[0].iter().zip(&h[0]) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn noise_free_average_returns_cfr() {
        let plan = ChannelPlan::default_5ghz();
        let ds = sample_csi(&los_room(), &plan, &ErrorModel::none()).unwrap();
        let h = plan_cfr(&los_room(), &plan).unwrap();
        for mode in [AveragingMode::UnwrappedPhase, AveragingMode::ComplexMean] {
            let avg = average_packets(&ds, mode).unwrap();
            for (a, b) in avg.iter().flatten().zip(h.iter().flatten()) {
                assert!((a - b).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_channel_is_named() {
        let plan = ChannelPlan::default_5ghz();
        let mut ds = sample_csi(&los_room(), &plan, &ErrorModel::none()).unwrap();
        ds.frames.clear();
        let err = average_packets(&ds, AveragingMode::UnwrappedPhase).unwrap_err();
        assert!(err.to_string().contains("channel 0"));
    }

    #[test]
    fn alignment_identity_cases() {
        let plan = ChannelPlan::default_5ghz();
        let h = plan_cfr(&GroundTruthChannel::direct_only(5e-9, slab()), &plan).unwrap();
        let out = align_constant_phase(&h, &plan);
        for (a, b) in out.iter().flatten().zip(h.iter().flatten()) {
            assert!((a - b).norm() < 1e-12 * b.norm());
        }
        let single = align_constant_phase(&h[..1], &plan);
        assert_eq!(single, h[..1].to_vec());
    }

    #[test]
    fn alignment_recovers_injected_constants() {
        let plan = ChannelPlan::default_5ghz();
        let truth = GroundTruthChannel::direct_only(7e-9, slab());
        let errors = ErrorModel { phi_c: true, rng_seed: 11, ..ErrorModel::none() };
        let ds = sample_csi(&truth, &plan, &errors).unwrap();
        let injected = ds.injected.clone().unwrap().phi_c;
        let v = average_packets(&ds, AveragingMode::UnwrappedPhase).unwrap();
        let out = align_constant_phase(&v, &plan);
        for q in 0..plan.channel_count() {
            let removed = (v[q][0] / out[q][0]).arg();
            let want = wrap(injected[q] - injected[0]);
            assert!(wrap(removed - want).abs() < 1e-9, "channel {q}: {removed} vs {want}");
        }
    }

    #[test]
    fn alignment_preserves_amplitudes_and_pdps() {
        let plan = ChannelPlan::default_5ghz();
        let ds = sample_csi(&los_room(), &plan, &ErrorModel { rng_seed: 4, ..Default::default() }).unwrap();
        let v = average_packets(&ds, AveragingMode::UnwrappedPhase).unwrap();
        let out = align_constant_phase(&v, &plan);
        let engine = PdpEngine::new(512);
        for (a, b) in v.iter().zip(&out) {
            for (x, y) in a.iter().zip(b) {
                assert!((x.norm() - y.norm()).abs() < 1e-12);
            }
            let (pa, pb) = (engine.pdp(a, 0.0), engine.pdp(b, 0.0));
            assert!(pa.iter().zip(&pb).all(|(x, y)| (x - y).abs() < 1e-12));
        }
        let comp = apply_compensation(&v, &plan, 0.03, 512);
        for (a, b) in v.iter().flatten().zip(comp.per_channel.iter().flatten()) {
            assert!((a.norm() - b.norm()).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_compensation_is_identity() {
        let plan = ChannelPlan::default_5ghz();
        let h = plan_cfr(&los_room(), &plan).unwrap();
        let out = apply_compensation(&h, &plan, 0.0, 512);
        assert_eq!(out.per_channel, h);
        assert_eq!(out.residual_report.len(), 21);
    }

    fn search(objective: SlopeObjective) -> SlopeSearchConfig {
        SlopeSearchConfig { objective, ..Default::default() }
    }

    #[test]
    fn estimator_needs_two_channels() {
        let plan = ChannelPlan::default_5ghz();
        let h = plan_cfr(&los_room(), &plan).unwrap();
        assert!(estimate_phi_s(&h[..1], &plan, &SlopeSearchConfig::default()).is_err());
    }

    #[test]
    fn anchored_search_finds_zero_on_clean_data() {
        let plan = ChannelPlan::default_5ghz();
        let h = plan_cfr(&GroundTruthChannel::direct_only(5e-9, slab()), &plan).unwrap();
        let phi = estimate_phi_s(&h, &plan, &search(SlopeObjective::Anchored)).unwrap();
        assert!(phi.abs() < 1e-3, "{phi}");
    }

    #[test]
    fn anchored_search_matches_exhaustive_grid() {
        let plan = ChannelPlan::default_5ghz();
        let truth = GroundTruthChannel::direct_only(5e-9, slab());
        let errors = ErrorModel {
            phi_s: 0.02,
            amplitude_sigma: 0.0316,
            phi_d_sigma: 0.0,
            rng_seed: 6,
            ..Default::default()
        };
        let ds = sample_csi(&truth, &plan, &errors).unwrap();
        let v = average_packets(&ds, AveragingMode::UnwrappedPhase).unwrap();
        let cfg = search(SlopeObjective::Anchored);
        let phi = estimate_phi_s(&v, &plan, &cfg).unwrap();
        assert!((phi - 0.02).abs() < 1e-3, "{phi}");
        let obj = objective(&v, &plan, &cfg);
        let fine = (0..=2000)
            .map(|i| 0.01 + i as f64 * 1e-5)
            .min_by(|a, b| obj.eval(*a).total_cmp(&obj.eval(*b)))
            .unwrap();
        assert!((phi - fine).abs() < 2e-5, "{phi} vs {fine}");
    }

    #[test]
    fn cross_channel_objective_is_blind_to_a_common_slope() {
        let plan = ChannelPlan::default_5ghz();
        let h = plan_cfr(&los_room(), &plan).unwrap();
        let cfg = search(SlopeObjective::CrossChannelMean);
        let base = slope_objective(&h, &plan, &cfg, 0.0);
        for phi in [0.01, 0.05, 0.2] {
            let shifted = slope_objective(&h, &plan, &cfg, phi);
            assert!((shifted - base).abs() < 0.02 * base, "{phi}: {shifted} vs {base}");
        }
        // A single-path template is not.
        let anchored = search(SlopeObjective::Anchored);
        assert!(slope_objective(&h, &plan, &anchored, 0.2) > 2.0 * slope_objective(&h, &plan, &anchored, 0.0));
    }

    #[test]
    fn calibration_makes_the_earliest_tap_strongest() {
        let plan = ChannelPlan::default_5ghz();
        let truth = los_room();
        let errors = ErrorModel { phi_s: 0.08, rng_seed: 21, ..Default::default() };
        let ds = sample_csi(&truth, &plan, &errors).unwrap();
        let before = average_packets(&ds, AveragingMode::UnwrappedPhase).unwrap();
        let engine = PdpEngine::new(512);
        let raw = engine.pdp(&before[0], 0.0);
        let raw_peak = (0..512).max_by(|&a, &b| raw[a].total_cmp(&raw[b])).unwrap();
        // The slope pushes the peak far from the true direct-path bin.
        assert!(raw_peak >= 5, "raw peak at bin {raw_peak}");

        let cal = calibrate(&ds, &CalibrationConfig::default()).unwrap();
        assert!((cal.estimated_phi_s - 0.08).abs() < 5e-3, "{}", cal.estimated_phi_s);
        let pdp = engine.pdp(&cal.per_channel[0], 0.0);
        let peak = (0..256).max_by(|&a, &b| pdp[a].total_cmp(&pdp[b])).unwrap();
        assert!(peak <= 2, "peak at bin {peak}");
    }

    #[test]
    fn compensate_then_reestimate_is_near_zero() {
        let plan = ChannelPlan::default_5ghz();
        let truth = GroundTruthChannel::direct_only(5e-9, slab());
        let errors = ErrorModel { phi_s: -0.04, phi_c: false, phi_d_sigma: 0.0, amplitude_sigma: 0.0, rng_seed: 1, ..Default::default() };
        let ds = sample_csi(&truth, &plan, &errors).unwrap();
        let v = average_packets(&ds, AveragingMode::UnwrappedPhase).unwrap();
        let cfg = SlopeSearchConfig::default();
        let phi = estimate_phi_s(&v, &plan, &cfg).unwrap();
        let again = estimate_phi_s(&compensate(&v, phi), &plan, &cfg).unwrap();
        assert!(again.abs() < 2.0 * cfg.tol, "{again}");
    }

    #[test]
    fn calibrated_single_path_phases_lie_on_one_line() {
        let plan = ChannelPlan::default_5ghz();
        let truth = GroundTruthChannel::direct_only(5e-9, slab());
        let errors = ErrorModel {
            phi_s: 0.05,
            phi_d_mode: DriftMode::PerPacket,
            rng_seed: 33,
            ..Default::default()
        };
        let ds = sample_csi(&truth, &plan, &errors).unwrap();
        let cal = calibrate(&ds, &CalibrationConfig::default()).unwrap();
        let f = plan.frequencies();
        let v: Vec<Complex64> = cal.per_channel.iter().flatten().copied().collect();
        // Remove the anchor delay, then fit a line to what is left.
        let r: Vec<f64> = v
            .iter()
            .zip(&f)
            .map(|(x, &fm)| (x * Complex64::from_polar(1.0, 2.0 * PI * fm * 5e-9)).arg())
            .collect();
        let r = unwrap_phase(&r);
        let n = f.len() as f64;
        let fm = f.iter().sum::<f64>() / n;
        let rm = r.iter().sum::<f64>() / n;
        let slope = f.iter().zip(&r).map(|(a, b)| (a - fm) * (b - rm)).sum::<f64>()
            / f.iter().map(|a| (a - fm) * (a - fm)).sum::<f64>();
        let rms = (f.iter().zip(&r).map(|(a, b)| (b - rm - slope * (a - fm)).powi(2)).sum::<f64>() / n).sqrt();
        assert!(rms < 1e-2, "line-fit residual {rms}");
    }

    #[test]
    fn packet_averaging_shrinks_drift_error() {
        // Per-packet drift averages down roughly as sqrt(P).
        let plan1 = ChannelPlan::from_centers(&[5.5e9], 56, 312.5e3, 1e-4, 1).unwrap();
        let mut plan64 = plan1.clone();
        plan64.packets_per_channel = 64;
        let truth = GroundTruthChannel::direct_only(5e-9, DielectricSlab::new(1.0, 0.0, 0.01).unwrap());
        let freqs = &plan1.channels[0].subcarrier_frequencies;
        let true_slope = -2.0 * PI * 5e-9;
        let mut err = [0.0, 0.0];
        for seed in 0..100 {
            for (i, plan) in [&plan1, &plan64].iter().enumerate() {
                let errors = ErrorModel {
                    phi_d_sigma: 0.05,
                    phi_d_mode: DriftMode::PerPacket,
                    amplitude_sigma: 0.0,
                    phi_c: false,
                    rng_seed: seed,
                    ..Default::default()
                };
                let ds = sample_csi(&truth, plan, &errors).unwrap();
                let v = average_packets(&ds, AveragingMode::UnwrappedPhase).unwrap();
                let s = phase_slope(&v[0], freqs) * 312.5e3 - true_slope * 312.5e3;
                err[i] += s.abs() / 100.0;
            }
        }
        let ratio = err[0] / err[1];
        assert!(ratio > 5.0 && ratio < 12.0, "shrink ratio {ratio}");
    }
}
