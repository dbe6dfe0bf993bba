//! Maximal overlap discrete wavelet transform features.
//!
//! Pyramid algorithm with circular filtering and no downsampling, so every
//! level has the input length and the transform commutes with circular
//! shifts.

use serde::{Deserialize, Serialize};

use crate::delay_profile::DirectPathSpectrum;
use crate::error::{Error, Result};

const WAVELETS_TOML: &str = include_str!("../fixtures/wavelets.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WaveletFamily {
    Haar,
    #[default]
    D4,
}

#[derive(Deserialize)]
struct FilterEntry {
    scaling: Vec<f64>,
}

#[derive(Deserialize)]
struct FilterFile {
    haar: FilterEntry,
    d4: FilterEntry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModwtConfig {
    pub levels: usize,
    /// MODWT wavelet (highpass) filter `h_l`.
    pub wavelet_filter: Vec<f64>,
    /// MODWT scaling (lowpass) filter `g_l`.
    pub scaling_filter: Vec<f64>,
}

impl Default for ModwtConfig {
    fn default() -> Self {
        ModwtConfig::new(WaveletFamily::D4, 4)
    }
}

impl ModwtConfig {
    /// MODWT filters for `family`, from the orthonormal fixture filters.
    pub fn new(family: WaveletFamily, levels: usize) -> Self {
        let file: FilterFile = toml::from_str(WAVELETS_TOML).expect("wavelet fixture parses");
        let ortho = match family {
            WaveletFamily::Haar => file.haar.scaling,
            WaveletFamily::D4 => file.d4.scaling,
        };
        let len = ortho.len();
        let scaling_filter: Vec<f64> = ortho.iter().map(|g| g / std::f64::consts::SQRT_2).collect();
        let wavelet_filter = (0..len)
            .map(|l| if l % 2 == 0 { 1.0 } else { -1.0 } * scaling_filter[len - 1 - l])
            .collect();
        ModwtConfig {
            levels,
            wavelet_filter,
            scaling_filter,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, g) = (&self.wavelet_filter, &self.scaling_filter);
        let len = g.len();
        if self.levels < 1 || len < 2 || h.len() != len {
            return Err(Error::Features("need J >= 1 and equal-length filters".into()));
        }
        for l in 0..len {
            let sign = if l % 2 == 0 { -1.0 } else { 1.0 };
            if (g[l] - sign * h[len - 1 - l]).abs() > 1e-12 {
                return Err(Error::Features("filters violate the quadrature-mirror relation".into()));
            }
        }
        if (g.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::Features("scaling filter must sum to 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    /// `W_1 .. W_J`.
    pub detail: Vec<Vec<f64>>,
    /// `V_J`.
    pub approx: Vec<f64>,
    pub source_len: usize,
}

impl FeatureVector {
    /// All `J + 1` coefficient vectors, details first.
    pub fn levels(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.detail.iter().chain(std::iter::once(&self.approx))
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.detail.len(), self.source_len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels().any(|v| v.len() != self.source_len) {
            return Err(Error::Features("coefficient vectors differ in length".into()));
        }
        if self.levels().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Features("non-finite coefficient".into()));
        }
        Ok(())
    }
}

fn check_length(n: usize, cfg: &ModwtConfig) -> Result<()> {
    cfg.validate()?;
    if cfg.levels >= usize::BITS as usize || n < (1usize << cfg.levels) {
        return Err(Error::Features(format!("signal length {n} is shorter than 2^{}", cfg.levels)));
    }
    Ok(())
}

/// Forward MODWT, `J = cfg.levels`.
pub fn modwt(signal: &[f64], cfg: &ModwtConfig) -> Result<FeatureVector> {
    let n = signal.len();
    check_length(n, cfg)?;
    let (h, g) = (&cfg.wavelet_filter, &cfg.scaling_filter);
    let mut v = signal.to_vec();
    let mut detail = Vec::with_capacity(cfg.levels);
    for j in 1..=cfg.levels {
        let stride = 1usize << (j - 1);
        let mut w_next = vec![0.0; n];
        let mut v_next = vec![0.0; n];
        for i in 0..n {
            let (mut w, mut s) = (0.0, 0.0);
            for l in 0..h.len() {
                let x = v[(i + n - (stride * l) % n) % n];
                w += h[l] * x;
                s += g[l] * x;
            }
            w_next[i] = w;
            v_next[i] = s;
        }
        detail.push(w_next);
        v = v_next;
    }
    Ok(FeatureVector {
        detail,
        approx: v,
        source_len: n,
    })
}

/// Inverse MODWT.
pub fn imodwt(fv: &FeatureVector, cfg: &ModwtConfig) -> Result<Vec<f64>> {
    let n = fv.source_len;
    if fv.detail.len() != cfg.levels {
        return Err(Error::Features(format!("{} detail levels, expected {}", fv.detail.len(), cfg.levels)));
    }
    if fv.levels().any(|x| x.len() != n) {
        return Err(Error::Features("coefficient vectors differ in length".into()));
    }
    check_length(n, cfg)?;
    let (h, g) = (&cfg.wavelet_filter, &cfg.scaling_filter);
    let mut v = fv.approx.clone();
    for j in (1..=cfg.levels).rev() {
        let stride = 1usize << (j - 1);
        let w = &fv.detail[j - 1];
        let mut prev = vec![0.0; n];
        for (i, out) in prev.iter_mut().enumerate() {
            let mut acc = 0.0;
            for l in 0..h.len() {
                let t = (i + stride * l) % n;
                acc += h[l] * w[t] + g[l] * v[t];
            }
            *out = acc;
        }
        v = prev;
    }
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// One transform over the stitched amplitude spectrum.
    #[default]
    Stitched,
    /// One transform per channel, levels concatenated in plan order.
    PerChannel,
}

fn demeaned(v: &[f64]) -> Vec<f64> {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - m).collect()
}

/// MODWT of the mean-removed amplitude spectrum.
pub fn build_features(spectrum: &DirectPathSpectrum, cfg: &ModwtConfig) -> Result<FeatureVector> {
    build_features_with(spectrum, cfg, FeatureMode::Stitched, 0)
}

/// As [`build_features`], optionally transforming each `channel_len`-long
/// channel on its own.
pub fn build_features_with(
    spectrum: &DirectPathSpectrum,
    cfg: &ModwtConfig,
    mode: FeatureMode,
    channel_len: usize,
) -> Result<FeatureVector> {
    if spectrum.response.is_empty() {
        return Err(Error::Features("empty spectrum".into()));
    }
    let amp: Vec<f64> = spectrum.response.iter().map(|v| v.norm()).collect();
    match mode {
        FeatureMode::Stitched => modwt(&demeaned(&amp), cfg),
        FeatureMode::PerChannel => {
            if channel_len == 0 || amp.len() % channel_len != 0 {
                return Err(Error::Features("spectrum length is not a multiple of the channel length".into()));
            }
            let parts = amp
                .chunks(channel_len)
                .map(|c| modwt(&demeaned(c), cfg))
                .collect::<Result<Vec<_>>>()?;
            let mut out = FeatureVector {
                detail: vec![Vec::with_capacity(amp.len()); cfg.levels],
                approx: Vec::with_capacity(amp.len()),
                source_len: amp.len(),
            };
            for p in parts {
                for (d, pd) in out.detail.iter_mut().zip(p.detail) {
                    d.extend(pd);
                }
                out.approx.extend(p.approx);
            }
            Ok(out)
        }
    }
}
