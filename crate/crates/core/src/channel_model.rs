//! Synthetic CSI generation.
//!
//! A [`GroundTruthChannel`] is a tapped delay line whose first tap passes
//! through a lossy dielectric slab. [`sample_csi`] evaluates it on every
//! subcarrier of a [`ChannelPlan`] and injects the residual hardware errors
//! of a commodity NIC: a constant phase per channel (`phi_c`), a per-channel
//! boundary-detection slope (`phi_d`), a global sampling-offset slope
//! (`phi_s`) and multiplicative amplitude noise.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
/// 20 MHz / 64.
pub const SUBCARRIER_SPACING: f64 = 312.5e3;
pub const SUBCARRIERS_PER_CHANNEL: usize = 56;
pub const HOP_INTERVAL: f64 = 0.25e-3;
pub const PACKETS_PER_CHANNEL: usize = 10;
/// Typical indoor coherence time.
pub const COHERENCE_TIME: f64 = 0.3;

/// The 21 usable 20 MHz channels in four 5 GHz segments.
pub const DEFAULT_CENTERS_MHZ: [f64; 21] = [
    5180.0, 5200.0, 5220.0, 5240.0, 5260.0, 5280.0, 5300.0, 5320.0, // segment 1
    5500.0, 5520.0, 5540.0, 5560.0, 5580.0, // segment 2
    5660.0, 5680.0, 5700.0, // segment 3
    5745.0, 5765.0, 5785.0, 5805.0, 5825.0, // segment 4
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Channel {
    pub center_frequency: f64,
    pub subcarrier_frequencies: Vec<f64>,
}

impl Channel {
    /// `count` subcarriers spaced `spacing` apart, symmetric about `center`.
    pub fn centered(center: f64, count: usize, spacing: f64) -> Self {
        let mid = (count as f64 - 1.0) / 2.0;
        let subcarrier_frequencies = (0..count)
            .map(|k| center + (k as f64 - mid) * spacing)
            .collect();
        Channel {
            center_frequency: center,
            subcarrier_frequencies,
        }
    }
}

/// Probe frequencies: channels in hop order, each with `K` subcarriers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelPlan {
    pub channels: Vec<Channel>,
    pub subcarrier_count_per_channel: usize,
    pub hop_interval: f64,
    pub packets_per_channel: usize,
}

impl ChannelPlan {
    pub fn new(channels: Vec<Channel>, hop_interval: f64, packets_per_channel: usize) -> Result<Self> {
        let k = channels
            .first()
            .map(|c| c.subcarrier_frequencies.len())
            .unwrap_or(0);
        let plan = ChannelPlan {
            channels,
            subcarrier_count_per_channel: k,
            hop_interval,
            packets_per_channel,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn from_centers(
        centers: &[f64],
        subcarriers: usize,
        spacing: f64,
        hop_interval: f64,
        packets_per_channel: usize,
    ) -> Result<Self> {
        let channels = centers
            .iter()
            .map(|&c| Channel::centered(c, subcarriers, spacing))
            .collect();
        Self::new(channels, hop_interval, packets_per_channel)
    }

    pub fn default_5ghz() -> Self {
        let centers: Vec<f64> = DEFAULT_CENTERS_MHZ.iter().map(|m| m * 1e6).collect();
        Self::from_centers(
            &centers,
            SUBCARRIERS_PER_CHANNEL,
            SUBCARRIER_SPACING,
            HOP_INTERVAL,
            PACKETS_PER_CHANNEL,
        )
        .expect("default plan is valid")
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.subcarrier_count_per_channel;
        if self.channels.is_empty() {
            return Err(Error::Plan("no channels".into()));
        }
        if k < 2 {
            return Err(Error::Plan("need at least 2 subcarriers per channel".into()));
        }
        if !(self.hop_interval > 0.0) {
            return Err(Error::Plan("hop_interval must be positive".into()));
        }
        if self.packets_per_channel == 0 {
            return Err(Error::Plan("packets_per_channel must be at least 1".into()));
        }
        for (q, ch) in self.channels.iter().enumerate() {
            let f = &ch.subcarrier_frequencies;
            if f.len() != k {
                return Err(Error::Plan(format!("channel {q} has {} subcarriers, expected {k}", f.len())));
            }
            if !f.iter().all(|x| x.is_finite() && *x > 0.0) {
                return Err(Error::Plan(format!("channel {q} has a non-positive frequency")));
            }
            if f.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Plan(format!("channel {q} subcarriers not strictly increasing")));
            }
            if q > 0 {
                let prev = &self.channels[q - 1];
                if ch.center_frequency <= prev.center_frequency {
                    return Err(Error::Plan(format!("channel {q} not sorted by center frequency")));
                }
                if f[0] <= prev.subcarrier_frequencies[k - 1] {
                    return Err(Error::Plan(format!("channel {q} overlaps channel {}", q - 1)));
                }
            }
        }
        Ok(())
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    /// Total stitched measurement count.
    pub fn len(&self) -> usize {
        self.channels.len() * self.subcarrier_count_per_channel
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    /// All subcarrier frequencies in plan order.
    pub fn frequencies(&self) -> Vec<f64> {
        self.channels
            .iter()
            .flat_map(|c| c.subcarrier_frequencies.iter().copied())
            .collect()
    }

    pub fn min_frequency(&self) -> f64 {
        self.channels[0].subcarrier_frequencies[0]
    }

    pub fn max_frequency(&self) -> f64 {
        *self.channels[self.channels.len() - 1]
            .subcarrier_frequencies
            .last()
            .unwrap()
    }

    pub fn span(&self) -> f64 {
        self.max_frequency() - self.min_frequency()
    }

    pub fn subcarrier_spacing(&self) -> f64 {
        let f = &self.channels[0].subcarrier_frequencies;
        f[1] - f[0]
    }

    /// Time to collect every packet on every channel.
    pub fn sweep_duration(&self) -> f64 {
        self.hop_interval * (self.channels.len() * self.packets_per_channel) as f64
    }

    /// Warning text when a full sweep does not fit inside the coherence time.
    pub fn coherence_warning(&self) -> Option<String> {
        let sweep = self.sweep_duration();
        (sweep > COHERENCE_TIME).then(|| {
            format!(
                "sweep of {:.1} ms exceeds the {:.0} ms coherence time",
                sweep * 1e3,
                COHERENCE_TIME * 1e3
            )
        })
    }

    /// SHA-256 of the canonical JSON encoding, hex.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("plan serializes");
        Sha256::digest(bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Homogeneous lossy layer on the direct path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DielectricSlab {
    pub epsilon_real: f64,
    pub epsilon_imag: f64,
    pub thickness: f64,
    pub epsilon_r: f64,
}

impl DielectricSlab {
    /// Slab with `epsilon_r` taken equal to `epsilon_real`.
    pub fn new(epsilon_real: f64, epsilon_imag: f64, thickness: f64) -> Result<Self> {
        let slab = DielectricSlab {
            epsilon_real,
            epsilon_imag,
            thickness,
            epsilon_r: epsilon_real,
        };
        slab.validate()?;
        Ok(slab)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_real > 0.0) {
            return Err(Error::Domain("epsilon_real must be positive".into()));
        }
        if !(self.epsilon_imag >= 0.0) {
            return Err(Error::Domain("epsilon_imag must be non-negative".into()));
        }
        if !(self.thickness > 0.0) {
            return Err(Error::Domain("thickness must be positive".into()));
        }
        if !(self.epsilon_r > 0.0) {
            return Err(Error::Domain("epsilon_r must be positive".into()));
        }
        Ok(())
    }
}

/// alpha = (2 pi / lambda0) sqrt(eps_r) sqrt(1 + eps'' / eps'), in nepers per metre.
pub fn attenuation_factor(slab: &DielectricSlab, frequency: f64) -> Result<f64> {
    if !(frequency > 0.0) || !frequency.is_finite() {
        return Err(Error::Domain(format!("frequency must be positive, got {frequency}")));
    }
    if !(slab.epsilon_real > 0.0) {
        return Err(Error::Domain("epsilon_real must be positive".into()));
    }
    let lambda0 = SPEED_OF_LIGHT / frequency;
    Ok(2.0 * PI / lambda0 * slab.epsilon_r.sqrt() * (1.0 + slab.epsilon_imag / slab.epsilon_real).sqrt())
}

fn unit_gain() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectPath {
    pub delay: f64,
    pub slab: DielectricSlab,
    /// Receiver gain applied to the direct path; lets simulated rooms express
    /// reflection strength relative to a unit-power direct path.
    #[serde(default = "unit_gain")]
    pub gain: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReflectedPath {
    pub amplitude: f64,
    pub delay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthChannel {
    pub direct_path: DirectPath,
    pub reflected_paths: Vec<ReflectedPath>,
}

impl GroundTruthChannel {
    pub fn direct_only(delay: f64, slab: DielectricSlab) -> Self {
        GroundTruthChannel {
            direct_path: DirectPath { delay, slab, gain: 1.0 },
            reflected_paths: Vec::new(),
        }
    }

    /// Number of paths including the direct one.
    pub fn path_count(&self) -> usize {
        1 + self.reflected_paths.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.direct_path.slab.validate()?;
        let t0 = self.direct_path.delay;
        if !t0.is_finite() || !(self.direct_path.gain >= 0.0) {
            return Err(Error::Domain("direct path delay and gain must be finite, gain >= 0".into()));
        }
        for (l, p) in self.reflected_paths.iter().enumerate() {
            if !(p.amplitude >= 0.0) {
                return Err(Error::Domain(format!("reflected path {l} has negative amplitude")));
            }
            if !(p.delay >= t0) {
                return Err(Error::Domain(format!("reflected path {l} arrives before the direct path")));
            }
        }
        Ok(())
    }
}

fn phasor(frequency: f64, delay: f64) -> Complex64 {
    Complex64::from_polar(1.0, -2.0 * PI * frequency * delay)
}

/// Direct-path component of the CFR alone.
pub fn direct_path_cfr(truth: &GroundTruthChannel, frequency: f64) -> Result<Complex64> {
    let d = &truth.direct_path;
    let alpha = attenuation_factor(&d.slab, frequency)?;
    Ok(d.gain * (-alpha * d.slab.thickness).exp() * phasor(frequency, d.delay))
}

/// h(f) = sum over paths of a_l(f) exp(-j 2 pi f t_l).
pub fn synth_cfr(truth: &GroundTruthChannel, frequency: f64) -> Result<Complex64> {
    let mut h = direct_path_cfr(truth, frequency)?;
    for p in &truth.reflected_paths {
        h += p.amplitude * phasor(frequency, p.delay);
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DriftMode {
    /// One slope per channel, shared by all its packets.
    #[default]
    PerChannel,
    /// Fresh slope for every packet.
    PerPacket,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ErrorModel {
    /// Draw a constant phase per channel, uniform in (-pi, pi].
    pub phi_c: bool,
    pub phi_d_sigma: f64,
    pub phi_d_mode: DriftMode,
    pub phi_s: f64,
    pub amplitude_sigma: f64,
    pub rng_seed: u64,
}

impl Default for ErrorModel {
    fn default() -> Self {
        ErrorModel {
            phi_c: true,
            phi_d_sigma: 1e-3,
            phi_d_mode: DriftMode::PerChannel,
            phi_s: 0.0,
            amplitude_sigma: 0.03,
            rng_seed: 0,
        }
    }
}

impl ErrorModel {
    /// No errors at all.
    pub fn none() -> Self {
        ErrorModel {
            phi_c: false,
            phi_d_sigma: 0.0,
            phi_d_mode: DriftMode::PerChannel,
            phi_s: 0.0,
            amplitude_sigma: 0.0,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.phi_d_sigma >= 0.0) || !(self.amplitude_sigma >= 0.0) {
            return Err(Error::Domain("error sigmas must be non-negative".into()));
        }
        if !self.phi_s.is_finite() {
            return Err(Error::Domain("phi_s must be finite".into()));
        }
        Ok(())
    }
}

/// The error realisation actually drawn for a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectedErrors {
    pub phi_c: Vec<f64>,
    /// Indexed `[packet][channel]`.
    pub phi_d: Vec<Vec<f64>>,
    pub phi_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsiDataset {
    pub plan: ChannelPlan,
    /// Indexed `[packet][channel][subcarrier]`.
    pub frames: Vec<Vec<Vec<Complex64>>>,
    pub truth: Option<GroundTruthChannel>,
    pub error_model: Option<ErrorModel>,
    pub injected: Option<InjectedErrors>,
}

impl CsiDataset {
    pub fn packet_count(&self) -> usize {
        self.frames.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.plan.validate()?;
        let q = self.plan.channel_count();
        let k = self.plan.subcarrier_count_per_channel;
        for (p, packet) in self.frames.iter().enumerate() {
            if packet.len() != q {
                return Err(Error::Format(format!("packet {p} has {} channels, expected {q}", packet.len())));
            }
            if let Some(c) = packet.iter().position(|f| f.len() != k) {
                return Err(Error::Format(format!("frame ({p}, {c}) does not have {k} subcarriers")));
            }
        }
        Ok(())
    }
}

/// Noise-free CFR on every plan subcarrier, `[channel][subcarrier]`.
pub fn plan_cfr(truth: &GroundTruthChannel, plan: &ChannelPlan) -> Result<Vec<Vec<Complex64>>> {
    plan.channels
        .iter()
        .map(|ch| ch.subcarrier_frequencies.iter().map(|&f| synth_cfr(truth, f)).collect())
        .collect()
}

/// Sample `packets_per_channel` CSI frames per channel with injected errors.
pub fn sample_csi(truth: &GroundTruthChannel, plan: &ChannelPlan, errors: &ErrorModel) -> Result<CsiDataset> {
    plan.validate()?;
    truth.validate()?;
    errors.validate()?;
    let h = plan_cfr(truth, plan)?;
    let n_ch = plan.channel_count();
    let n_pk = plan.packets_per_channel;
    let mut rng = ChaCha8Rng::seed_from_u64(errors.rng_seed);

    let phi_c: Vec<f64> = (0..n_ch)
        .map(|_| if errors.phi_c { PI - 2.0 * PI * rng.gen::<f64>() } else { 0.0 })
        .collect();
    let drift = Normal::new(0.0, errors.phi_d_sigma).map_err(|e| Error::Domain(e.to_string()))?;
    let per_channel: Vec<f64> = (0..n_ch).map(|_| drift.sample(&mut rng)).collect();
    let phi_d: Vec<Vec<f64>> = (0..n_pk)
        .map(|_| match errors.phi_d_mode {
            DriftMode::PerChannel => per_channel.clone(),
            DriftMode::PerPacket => (0..n_ch).map(|_| drift.sample(&mut rng)).collect(),
        })
        .collect();
    let amp = Normal::new(0.0, errors.amplitude_sigma).map_err(|e| Error::Domain(e.to_string()))?;

    let frames = (0..n_pk)
        .map(|p| {
            (0..n_ch)
                .map(|q| {
                    h[q].iter()
                        .enumerate()
                        .map(|(k, &hk)| {
                            let n = amp.sample(&mut rng);
                            let phase = k as f64 * (phi_d[p][q] + errors.phi_s) + phi_c[q];
                            hk * (1.0 + n) * Complex64::from_polar(1.0, phase)
                        })
                        .collect()
                })
                .collect()
        })
        .collect();

    Ok(CsiDataset {
        plan: plan.clone(),
        frames,
        truth: Some(truth.clone()),
        error_model: Some(*errors),
        injected: Some(InjectedErrors {
            phi_c,
            phi_d,
            phi_s: errors.phi_s,
        }),
    })
}
