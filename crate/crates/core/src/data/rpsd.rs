use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{DataError, EpochSet};

/// Half-open `[lo, hi)` bands in Hz: δ, θ, α, β, low-γ, mid-γ, high-γ.
pub const BANDS: [(f64, f64); 7] =
    [(1.0, 3.0), (4.0, 8.0), (8.0, 12.0), (12.0, 16.0), (16.0, 20.0), (20.0, 28.0), (30.0, 45.0)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RpsdParams {
    pub outer_s: f64,
    pub outer_overlap: f64,
    pub inner_s: f64,
    pub inner_overlap: f64,
}

impl Default for RpsdParams {
    fn default() -> Self {
        Self { outer_s: 20.0, outer_overlap: 0.8, inner_s: 2.0, inner_overlap: 0.75 }
    }
}

fn window(seconds: f64, overlap: f64, fs: f64) -> Result<(usize, usize), DataError> {
    if !(seconds > 0.0 && (0.0..1.0).contains(&overlap)) {
        return Err(DataError::InvalidSpec(format!("window {seconds} s with overlap {overlap}")));
    }
    let len = ((seconds * fs).round() as usize).max(1);
    let step = ((len as f64 * (1.0 - overlap)).round() as usize).max(1);
    Ok((len, step))
}

fn count(length: usize, len: usize, step: usize) -> Result<usize, DataError> {
    if len > length {
        return Err(DataError::WindowTooLong { window: len, length });
    }
    Ok((length - len) / step + 1)
}

/// Hann-windowed periodogram power summed over each band. The segment
/// mean is removed first.
pub fn band_powers(x: &[f64], fs: f64, fft: &mut FftPlanner<f64>) -> [f64; 7] {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex<f64>> = x
        .iter()
        .enumerate()
        .map(|(i, &v)| Complex::new((v - mean) * (0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()), 0.0))
        .collect();
    fft.plan_fft_forward(n).process(&mut buf);
    let mut out = [0.0; 7];
    for (k, c) in buf.iter().enumerate().take(n / 2 + 1) {
        let f = k as f64 * fs / n as f64;
        if let Some(b) = BANDS.iter().position(|&(lo, hi)| f >= lo && f < hi) {
            out[b] += c.norm_sqr();
        }
    }
    out
}

/// Band powers divided by their sum; uniform when the segment is silent.
pub fn relative_band_powers(x: &[f64], fs: f64, fft: &mut FftPlanner<f64>) -> [f64; 7] {
    let p = band_powers(x, fs, fft);
    let total: f64 = p.iter().sum();
    if total > 0.0 {
        p.map(|v| v / total)
    } else {
        [1.0 / 7.0; 7]
    }
}

/// Each outer segment becomes one output trial of shape
/// `[C, n_inner · 7]`, laid out sub-segment major, z-scored per channel.
pub fn rpsd_features(set: &EpochSet, params: &RpsdParams) -> Result<EpochSet, DataError> {
    let fs = set.fs();
    let (c, t) = (set.n_channels(), set.n_samples());
    let (outer, outer_step) = window(params.outer_s, params.outer_overlap, fs)?;
    let (inner, inner_step) = window(params.inner_s, params.inner_overlap, fs)?;
    let n_outer = count(t, outer, outer_step)?;
    let n_inner = count(outer, inner, inner_step)?;
    let width = n_inner * 7;
    let mut fft = FftPlanner::new();
    let mut data = Vec::with_capacity(set.n_trials() * n_outer * c * width);
    let (mut labels, mut subjects) = (Vec::new(), Vec::new());
    for i in 0..set.n_trials() {
        let trial = set.trial(i);
        for o in 0..n_outer {
            for ch in 0..c {
                let seg = &trial[ch * t + o * outer_step..ch * t + o * outer_step + outer];
                let mut row = Vec::with_capacity(width);
                for s in 0..n_inner {
                    row.extend(relative_band_powers(&seg[s * inner_step..s * inner_step + inner], fs, &mut fft));
                }
                let mean = row.iter().sum::<f64>() / width as f64;
                let sd = (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / width as f64).sqrt();
                data.extend(row.iter().map(|v| if sd > 0.0 { (v - mean) / sd } else { 0.0 }));
            }
            labels.push(set.labels()[i]);
            subjects.push(set.subjects()[i]);
        }
    }
    let mut out = EpochSet::new(data, c, width, labels, subjects, fs, set.n_classes())?;
    out.channel_names = set.channel_names.clone();
    out.provenance = if set.provenance.is_empty() { "rpsd".into() } else { format!("{}+rpsd", set.provenance) };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(f: f64, fs: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| (2.0 * PI * f * i as f64 / fs).sin()).collect()
    }

    #[test]
    fn alpha_sinusoid_peaks_in_alpha() {
        let mut fft = FftPlanner::new();
        let r = relative_band_powers(&sine(10.0, 128.0, 256), 128.0, &mut fft);
        let best = (0..7).max_by(|&a, &b| r[a].total_cmp(&r[b])).unwrap();
        assert_eq!(best, 2);
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn feature_layout_and_errors() {
        let fs = 64.0;
        let x: Vec<f64> = sine(10.0, fs, 256).into_iter().chain(sine(25.0, fs, 256)).collect();
        let set = EpochSet::new(x, 2, 256, vec![1], vec![0], fs, 2).unwrap();
        let p = RpsdParams { outer_s: 2.0, outer_overlap: 0.5, inner_s: 1.0, inner_overlap: 0.75 };
        let f = rpsd_features(&set, &p).unwrap();
        // 256 samples, outer 128 step 64 -> 3 segments; inner 64 step 16 -> 5.
        assert_eq!((f.n_trials(), f.n_channels(), f.n_samples()), (3, 2, 35));
        assert_eq!(f.labels(), &[1, 1, 1]);
        for i in 0..3 {
            for ch in 0..2 {
                let row = &f.trial(i)[ch * 35..(ch + 1) * 35];
                assert!(row.iter().sum::<f64>().abs() < 1e-9);
                assert!((row.iter().map(|v| v * v).sum::<f64>() / 35.0 - 1.0).abs() < 1e-9);
            }
        }
        let long = RpsdParams { outer_s: 5.0, ..p };
        assert!(matches!(rpsd_features(&set, &long), Err(DataError::WindowTooLong { window: 320, length: 256 })));
    }
}
