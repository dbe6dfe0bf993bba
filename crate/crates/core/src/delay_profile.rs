//! Sparse power-delay-profile recovery over a non-uniform channel plan.
//!
//! The stitched CSI of all channels is modeled as `y = F g` with
//! `F[m, n] = exp(-j 2 pi f_m t_n)` on a discrete delay grid, and `g` is
//! recovered by L1-regularized least squares with iterative shrinkage.
//! Frequencies are shifted to baseband before the solve; the shift is kept
//! on the profile so that forward transforms stay consistent.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::calibration::CalibratedSpectrum;
use crate::channel_model::ChannelPlan;
use crate::error::{Error, Result};

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DelayGrid {
    pub start: f64,
    pub step: f64,
    pub count: usize,
}

impl Default for DelayGrid {
    /// 0 to 100 ns in 0.5 ns steps.
    fn default() -> Self {
        DelayGrid {
            start: 0.0,
            step: 0.5e-9,
            count: 201,
        }
    }
}

impl DelayGrid {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) || self.count < 2 || !self.start.is_finite() {
            return Err(Error::Config("delay grid needs step > 0 and count >= 2".into()));
        }
        Ok(())
    }

    pub fn delay(&self, n: usize) -> f64 {
        self.start + n as f64 * self.step
    }

    pub fn delays(&self) -> Vec<f64> {
        (0..self.count).map(|n| self.delay(n)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayProfile {
    pub grid: DelayGrid,
    pub taps: Vec<Complex64>,
    pub objective_trace: Vec<f64>,
    /// Frequency subtracted from every probe frequency during the solve.
    pub frequency_offset: f64,
    pub lambda: f64,
}

impl DelayProfile {
    pub fn iterations(&self) -> usize {
        self.objective_trace.len().saturating_sub(1)
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.taps.iter().map(|t| t.norm()).collect()
    }

    /// Indices of taps whose magnitude is at least `ratio` of the largest.
    pub fn significant_taps(&self, ratio: f64) -> Vec<usize> {
        let m = self.magnitudes();
        let max = m.iter().cloned().fold(0.0, f64::max);
        (0..m.len()).filter(|&i| max > 0.0 && m[i] >= ratio * max).collect()
    }

    /// Whether every step of the recorded objective is non-increasing, up to
    /// rounding of `1e-12` times the initial objective.
    pub fn objective_monotone(&self) -> bool {
        let slack = 1e-12 * self.objective_trace.first().map_or(0.0, |v| v.abs());
        self.objective_trace.windows(2).all(|w| w[1] <= w[0] + slack)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectPathSpectrum {
    pub frequencies: Vec<f64>,
    pub response: Vec<Complex64>,
    pub kept_taps: Vec<usize>,
}

/// Lasso settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SparsityConfig {
    /// lambda as a fraction of max |F^H y|.
    pub lambda_ratio: f64,
    /// Absolute lambda; overrides `lambda_ratio` when set.
    pub lambda: Option<f64>,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub power_iters: usize,
}

impl Default for SparsityConfig {
    fn default() -> Self {
        SparsityConfig {
            lambda_ratio: 0.05,
            lambda: None,
            max_iters: 3000,
            rel_tol: 1e-8,
            power_iters: 100,
        }
    }
}

/// Direct-path window settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TapWindowConfig {
    /// A tap is significant when its magnitude is at least this fraction of the peak.
    pub ratio: f64,
    /// Half-width of the kept window, seconds.
    pub window: f64,
    /// Center the window on the strongest tap within two half-widths after
    /// the first significant one, instead of on the first significant tap.
    pub recenter: bool,
}

impl Default for TapWindowConfig {
    fn default() -> Self {
        TapWindowConfig {
            ratio: 0.1,
            window: 1.5e-9,
            recenter: true,
        }
    }
}

impl TapWindowConfig {
    pub fn half_width_taps(&self, grid: &DelayGrid) -> usize {
        (self.window / grid.step + 1e-9).floor() as usize
    }
}

/// Least-squares refit of the lasso support before extraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefitConfig {
    pub enabled: bool,
    /// Lasso taps at least this fraction of the peak seed the support.
    pub support_ratio: f64,
    /// Stop adding taps when the best residual correlation falls below this
    /// fraction of the largest refit tap.
    pub stop_ratio: f64,
    /// Ridge weight per measurement.
    pub ridge: f64,
    pub max_additions: usize,
}

impl Default for RefitConfig {
    fn default() -> Self {
        RefitConfig {
            enabled: true,
            support_ratio: 0.1,
            stop_ratio: 0.005,
            ridge: 1e-4,
            max_additions: 5,
        }
    }
}

/// Dense NDFT operator on fixed frequencies and grid, with its Toeplitz Gram
/// kernel and step-size estimate cached for repeated solves.
#[derive(Clone)]
pub struct NdftOperator {
    grid: DelayGrid,
    offset: f64,
    rows: usize,
    /// Row-major `rows x grid.count`.
    matrix: Vec<Complex64>,
    /// `(F^H F)[a, b]` for `a >= b` depends only on `a - b`.
    lag: Vec<Complex64>,
    /// Spectrum of the circulant embedding of `F^H F`.
    kernel: Vec<Complex64>,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for NdftOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NdftOperator")
            .field("grid", &self.grid)
            .field("offset", &self.offset)
            .field("rows", &self.rows)
            .finish_non_exhaustive()
    }
}

impl NdftOperator {
    /// Operator on `frequencies` shifted to baseband by their minimum.
    pub fn new(frequencies: &[f64], grid: DelayGrid) -> Result<Self> {
        let offset = frequencies.iter().cloned().fold(f64::INFINITY, f64::min);
        Self::with_offset(frequencies, grid, if offset.is_finite() { offset } else { 0.0 })
    }

    pub fn with_offset(frequencies: &[f64], grid: DelayGrid, offset: f64) -> Result<Self> {
        grid.validate()?;
        if frequencies.is_empty() {
            return Err(Error::Solver("empty spectrum".into()));
        }
        let n = grid.count;
        let base: Vec<f64> = frequencies.iter().map(|f| f - offset).collect();
        let delays = grid.delays();
        let mut matrix = Vec::with_capacity(base.len() * n);
        for &f in &base {
            matrix.extend(delays.iter().map(|&t| Complex64::from_polar(1.0, -2.0 * PI * f * t)));
        }
        // F^H F is Toeplitz on a uniform grid, so it embeds in a circulant
        // of length >= 2n and applies in O(n log n).
        let lag: Vec<Complex64> = (0..n)
            .map(|d| {
                base.iter()
                    .map(|&f| Complex64::from_polar(1.0, 2.0 * PI * f * d as f64 * grid.step))
                    .sum()
            })
            .collect();
        let m = (2 * n).next_power_of_two();
        let mut kernel = vec![ZERO; m];
        kernel[..n].copy_from_slice(&lag);
        for d in 1..n {
            kernel[m - d] = lag[d].conj();
        }
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(m);
        let ifft = planner.plan_fft_inverse(m);
        fft.process(&mut kernel);
        let scale = 1.0 / m as f64;
        kernel.iter_mut().for_each(|k| *k *= scale);
        Ok(NdftOperator {
            grid,
            offset,
            rows: base.len(),
            matrix,
            lag,
            kernel,
            fft,
            ifft,
        })
    }

    /// Entry `(a, b)` of `F^H F`.
    pub fn gram_entry(&self, a: usize, b: usize) -> Complex64 {
        if a >= b {
            self.lag[a - b]
        } else {
            self.lag[b - a].conj()
        }
    }

    pub fn grid(&self) -> DelayGrid {
        self.grid
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// `F g`.
    pub fn apply(&self, taps: &[Complex64]) -> Vec<Complex64> {
        self.matrix
            .chunks_exact(self.grid.count)
            .map(|row| row.iter().zip(taps).map(|(a, g)| a * g).sum())
            .collect()
    }

    /// `F^H y`.
    pub fn adjoint(&self, y: &[Complex64]) -> Vec<Complex64> {
        let mut out = vec![ZERO; self.grid.count];
        for (row, &ym) in self.matrix.chunks_exact(self.grid.count).zip(y) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a.conj() * ym;
            }
        }
        out
    }

    /// `F^H F g`.
    pub fn gram_apply(&self, taps: &[Complex64]) -> Vec<Complex64> {
        let n = self.grid.count;
        let mut buf = vec![ZERO; self.kernel.len()];
        buf[..n].copy_from_slice(&taps[..n]);
        self.fft.process(&mut buf);
        for (b, k) in buf.iter_mut().zip(&self.kernel) {
            *b *= k;
        }
        self.ifft.process(&mut buf);
        buf.truncate(n);
        buf
    }

    /// Power-iteration estimate of the largest eigenvalue of `F^H F`.
    pub fn lipschitz(&self, iters: usize) -> f64 {
        let n = self.grid.count;
        let mut x = vec![Complex64::new(1.0 / (n as f64).sqrt(), 0.0); n];
        let mut est = 0.0;
        for _ in 0..iters.max(1) {
            let y = self.gram_apply(&x);
            let norm = y.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            est = x.iter().zip(&y).map(|(a, b)| (a.conj() * b).re).sum();
            x = y.into_iter().map(|v| v / norm).collect();
        }
        let y = self.gram_apply(&x);
        est.max(x.iter().zip(&y).map(|(a, b)| (a.conj() * b).re).sum())
    }
}

/// `out[m] = sum_n taps[n] exp(-j 2 pi (f_m - offset) t_n)`, evaluated directly.
pub fn forward_ndft(profile: &DelayProfile, frequencies: &[f64]) -> Vec<Complex64> {
    let delays = profile.grid.delays();
    frequencies
        .iter()
        .map(|&f| {
            let fb = f - profile.frequency_offset;
            profile
                .taps
                .iter()
                .zip(&delays)
                .filter(|(g, _)| **g != ZERO)
                .map(|(g, &t)| g * Complex64::from_polar(1.0, -2.0 * PI * fb * t))
                .sum()
        })
        .collect()
}

/// Zero-padded inverse FFT magnitude of one channel, normalized by `nfft`.
pub fn single_channel_pdp(channel: &[Complex64], nfft: usize) -> Vec<f64> {
    let nfft = nfft.max(channel.len());
    let mut buf = vec![ZERO; nfft];
    buf[..channel.len()].copy_from_slice(channel);
    FftPlanner::new().plan_fft_inverse(nfft).process(&mut buf);
    buf.iter().map(|v| v.norm() / nfft as f64).collect()
}

/// Concatenate channels in plan order.
pub fn stitch(spectrum: &CalibratedSpectrum) -> Vec<Complex64> {
    spectrum.per_channel.iter().flatten().copied().collect()
}

/// Lasso over the stitched spectrum.
pub fn inverse_ndft(spectrum: &CalibratedSpectrum, grid: DelayGrid, reg: &SparsityConfig) -> Result<DelayProfile> {
    let y = stitch(spectrum);
    if y.is_empty() {
        return Err(Error::Solver("empty spectrum".into()));
    }
    let op = NdftOperator::new(&spectrum.plan.frequencies(), grid)?;
    solve_lasso(&op, &y, reg, None)
}

/// Proximal-gradient lasso `min ||y - F g||^2 + lambda ||g||_1`.
pub fn solve_lasso(
    op: &NdftOperator,
    y: &[Complex64],
    reg: &SparsityConfig,
    warm_start: Option<&[Complex64]>,
) -> Result<DelayProfile> {
    if y.is_empty() {
        return Err(Error::Solver("empty spectrum".into()));
    }
    if y.len() != op.rows() {
        return Err(Error::Solver(format!("{} measurements for an operator with {} rows", y.len(), op.rows())));
    }
    let n = op.grid().count;
    let b = op.adjoint(y);
    let lambda = reg
        .lambda
        .unwrap_or_else(|| reg.lambda_ratio * b.iter().map(|v| v.norm()).fold(0.0, f64::max));
    if !(lambda >= 0.0) {
        return Err(Error::Solver("lambda must be non-negative".into()));
    }
    let yy: f64 = y.iter().map(|v| v.norm_sqr()).sum();
    // The objective uses the same 2-norm scaling as the gradient F^H(Fg - y).
    let objective = |g: &[Complex64], gg: &[Complex64]| -> f64 {
        let mut lin = 0.0;
        let mut quad = 0.0;
        let mut l1 = 0.0;
        for i in 0..n {
            lin += (g[i].conj() * b[i]).re;
            quad += (g[i].conj() * gg[i]).re;
            l1 += g[i].norm();
        }
        0.5 * (yy - 2.0 * lin + quad) + lambda * l1
    };

    let lip = op.lipschitz(reg.power_iters);
    let mut g: Vec<Complex64> = match warm_start {
        Some(w) if w.len() == n => w.to_vec(),
        _ => vec![ZERO; n],
    };
    if lip == 0.0 {
        return Ok(DelayProfile {
            grid: op.grid(),
            taps: vec![ZERO; n],
            objective_trace: vec![0.5 * yy],
            frequency_offset: op.offset(),
            lambda,
        });
    }
    let step = 1.0 / lip;
    let thresh = lambda * step;
    let mut gg = op.gram_apply(&g);
    let mut obj = objective(&g, &gg);
    let mut trace = vec![obj];
    let mut rises = 0;
    for _ in 0..reg.max_iters {
        for i in 0..n {
            let z = g[i] - (gg[i] - b[i]) * step;
            let m = z.norm();
            g[i] = if m > thresh { z * (1.0 - thresh / m) } else { ZERO };
        }
        gg = op.gram_apply(&g);
        let next = objective(&g, &gg);
        if !next.is_finite() {
            return Err(Error::Solver("objective is not finite".into()));
        }
        trace.push(next);
        rises = if next > obj { rises + 1 } else { 0 };
        if rises >= 10 {
            return Err(Error::Solver("objective increased for 10 consecutive iterations".into()));
        }
        let done = (obj - next).abs() <= reg.rel_tol * obj.abs();
        obj = next;
        if done {
            break;
        }
    }
    Ok(DelayProfile {
        grid: op.grid(),
        taps: g,
        objective_trace: trace,
        frequency_offset: op.offset(),
        lambda,
    })
}

/// Index of the direct-path tap.
pub fn locate_direct_tap(profile: &DelayProfile, window: &TapWindowConfig) -> Result<usize> {
    let m = profile.magnitudes();
    let max = m.iter().cloned().fold(0.0, f64::max);
    if !(max > 0.0) || !max.is_finite() {
        return Err(Error::NoDirectPath);
    }
    let first = m.iter().position(|&v| v >= window.ratio * max).ok_or(Error::NoDirectPath)?;
    if !window.recenter {
        return Ok(first);
    }
    let end = (first + 2 * window.half_width_taps(&profile.grid)).min(m.len() - 1);
    let mut best = first;
    for i in first..=end {
        if m[i] > m[best] {
            best = i;
        }
    }
    Ok(best)
}

fn window_range(center: usize, half: usize, count: usize) -> std::ops::RangeInclusive<usize> {
    center.saturating_sub(half)..=(center + half).min(count - 1)
}

/// Power-weighted mean delay of the direct-path window.
pub fn direct_path_delay(profile: &DelayProfile, window: &TapWindowConfig) -> Result<f64> {
    let c = locate_direct_tap(profile, window)?;
    let half = window.half_width_taps(&profile.grid);
    let (mut num, mut den) = (0.0, 0.0);
    for i in window_range(c, half, profile.taps.len()) {
        let w = profile.taps[i].norm_sqr();
        num += w * profile.grid.delay(i);
        den += w;
    }
    Ok(num / den)
}

/// Ridge least-squares refit of the taps, seeded with the direct-path window
/// and the strong lasso taps, then grown greedily from residual correlations.
pub fn refit_profile(
    profile: &DelayProfile,
    op: &NdftOperator,
    y: &[Complex64],
    window: &TapWindowConfig,
    cfg: &RefitConfig,
) -> Result<DelayProfile> {
    if !cfg.enabled {
        return Ok(profile.clone());
    }
    let n = profile.taps.len();
    let rows = y.len() as f64;
    let center = locate_direct_tap(profile, window)?;
    let mut support: BTreeSet<usize> = window_range(center, window.half_width_taps(&profile.grid), n).collect();
    support.extend(profile.significant_taps(cfg.support_ratio));

    let b = op.adjoint(y);
    let ridge = cfg.ridge * rows;
    let solve = |s: &[usize]| -> Result<Vec<Complex64>> {
        let k = s.len();
        let a = DMatrix::from_fn(k, k, |i, j| {
            let g = op.gram_entry(s[i], s[j]);
            if i == j {
                g + ridge
            } else {
                g
            }
        });
        let rhs = DVector::from_iterator(k, s.iter().map(|&i| b[i]));
        let chol = a
            .cholesky()
            .ok_or_else(|| Error::Solver("refit system is not positive definite".into()))?;
        Ok(chol.solve(&rhs).iter().copied().collect())
    };

    let mut s: Vec<usize> = support.iter().copied().collect();
    let mut x = solve(&s)?;
    for _ in 0..cfg.max_additions {
        // F^H (y - F_S x) = b - G[:, S] x.
        let peak = x.iter().map(|v| v.norm()).fold(0.0, f64::max);
        let mut best = (0.0, usize::MAX);
        for (i, &bi) in b.iter().enumerate().take(n) {
            if support.contains(&i) {
                continue;
            }
            let mut c = bi;
            for (&j, xj) in s.iter().zip(&x) {
                c -= op.gram_entry(i, j) * xj;
            }
            let score = c.norm() / rows;
            if score > best.0 {
                best = (score, i);
            }
        }
        if best.1 == usize::MAX || best.0 < cfg.stop_ratio * peak {
            break;
        }
        support.insert(best.1);
        s = support.iter().copied().collect();
        x = solve(&s)?;
    }

    let mut taps = vec![ZERO; n];
    for (&i, v) in s.iter().zip(x) {
        taps[i] = v;
    }
    Ok(DelayProfile {
        taps,
        ..profile.clone()
    })
}

/// Keep only the direct-path window and transform it back to the plan's frequencies.
pub fn extract_direct_path(
    profile: &DelayProfile,
    plan: &ChannelPlan,
    window: &TapWindowConfig,
) -> Result<DirectPathSpectrum> {
    let center = locate_direct_tap(profile, window)?;
    let kept_taps: Vec<usize> =
        window_range(center, window.half_width_taps(&profile.grid), profile.taps.len()).collect();
    let mut trimmed = profile.clone();
    for (i, t) in trimmed.taps.iter_mut().enumerate() {
        if !kept_taps.contains(&i) {
            *t = ZERO;
        }
    }
    let frequencies = plan.frequencies();
    let response = forward_ndft(&trimmed, &frequencies);
    if response.iter().any(|v| !(v.norm() > 0.0)) {
        return Err(Error::NoDirectPath);
    }
    Ok(DirectPathSpectrum {
        frequencies,
        response,
        kept_taps,
    })
}

/// Local maxima of a magnitude sequence that reach `ratio` of its peak.
pub fn local_maxima(m: &[f64], ratio: f64) -> Vec<usize> {
    let max = m.iter().cloned().fold(0.0, f64::max);
    (0..m.len())
        .filter(|&i| {
            let left = i == 0 || m[i] > m[i - 1];
            let right = i + 1 == m.len() || m[i] >= m[i + 1];
            left && right && m[i] > 0.0 && m[i] >= ratio * max
        })
        .collect()
}
