use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{DataError, EpochSet};
use crate::numeric::RngStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassRecipe {
    pub freq_hz: f64,
    pub channels: Vec<usize>,
    pub amplitude: f64,
}

/// Recipe for sinusoidal class signatures in pink plus white noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_subjects: usize,
    pub trials_per_subject: usize,
    pub n_channels: usize,
    pub n_samples: usize,
    pub fs: f64,
    pub classes: Vec<ClassRecipe>,
    /// Power-law exponent of the coloured component; 1 is pink.
    pub noise_exponent: f64,
    pub pink_sigma: f64,
    pub white_sigma: f64,
    /// Subject gains are drawn from `1 ± gain_spread`.
    pub gain_spread: f64,
    /// Subject carrier offsets are drawn from `± freq_jitter_hz`.
    pub freq_jitter_hz: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_subjects: 4,
            trials_per_subject: 50,
            n_channels: 8,
            n_samples: 512,
            fs: 128.0,
            classes: vec![
                ClassRecipe { freq_hz: 10.0, channels: vec![2, 3], amplitude: 1.0 },
                ClassRecipe { freq_hz: 22.0, channels: vec![5, 6], amplitude: 1.0 },
            ],
            noise_exponent: 1.0,
            pink_sigma: 1.0,
            white_sigma: 0.5,
            gain_spread: 0.2,
            freq_jitter_hz: 0.5,
        }
    }
}

impl SynthSpec {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidSpec(m));
        if self.n_subjects == 0 || self.trials_per_subject == 0 || self.n_channels == 0 || self.n_samples == 0 {
            return bad("subjects, trials, channels and samples must be positive".into());
        }
        if self.classes.is_empty() {
            return bad("at least one class recipe is required".into());
        }
        if !(self.fs.is_finite() && self.fs > 0.0) {
            return bad(format!("fs must be positive, got {}", self.fs));
        }
        for (k, c) in self.classes.iter().enumerate() {
            if !(c.freq_hz > 0.0 && c.freq_hz + self.freq_jitter_hz.abs() < self.fs / 2.0) {
                return bad(format!("class {k}: carrier {} Hz must lie below fs/2", c.freq_hz));
            }
            if let Some(&ch) = c.channels.iter().find(|&&ch| ch >= self.n_channels) {
                return bad(format!("class {k}: channel {ch} outside 0..{}", self.n_channels));
            }
            if !c.amplitude.is_finite() {
                return bad(format!("class {k}: amplitude must be finite"));
            }
        }
        let nonneg = [self.pink_sigma, self.white_sigma, self.gain_spread, self.freq_jitter_hz, self.noise_exponent];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("noise and jitter parameters must be finite and nonnegative".into());
        }
        if self.gain_spread >= 1.0 {
            return bad("gain_spread must be below 1".into());
        }
        Ok(())
    }
}

/// Unit-variance noise with power spectrum ∝ 1/f^exponent.
fn coloured_noise(rng: &mut RngStream, n: usize, exponent: f64, fft: &mut FftPlanner<f64>) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..n).map(|_| Complex::new(rng.normal(0.0, 1.0), 0.0)).collect();
    fft.plan_fft_forward(n).process(&mut buf);
    buf[0] = Complex::new(0.0, 0.0);
    for (k, v) in buf.iter_mut().enumerate().skip(1) {
        let f = k.min(n - k) as f64;
        *v *= f.powf(-exponent / 2.0);
    }
    fft.plan_fft_inverse(n).process(&mut buf);
    let x: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let sd = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    if sd > 0.0 {
        x.into_iter().map(|v| v / sd).collect()
    } else {
        x
    }
}

/// Trials alternate classes within each subject; subjects are contiguous.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<EpochSet, DataError> {
    spec.validate()?;
    let (c, t) = (spec.n_channels, spec.n_samples);
    let k = spec.n_classes();
    let n = spec.n_subjects * spec.trials_per_subject;
    let mut data = vec![0.0; n * c * t];
    let mut labels = Vec::with_capacity(n);
    let mut subjects = Vec::with_capacity(n);
    let mut fft = FftPlanner::new();
    for s in 0..spec.n_subjects {
        let mut subj = RngStream::named(seed, "synth-subject").fork(s as u64);
        let gain = 1.0 + spec.gain_spread * subj.uniform(-1.0, 1.0);
        let offset = spec.freq_jitter_hz * subj.uniform(-1.0, 1.0);
        for j in 0..spec.trials_per_subject {
            let i = s * spec.trials_per_subject + j;
            let label = j % k;
            labels.push(label);
            subjects.push(s);
            let mut rng = RngStream::named(seed, "synth-trial").fork(i as u64);
            let recipe = &spec.classes[label];
            let f = recipe.freq_hz + offset;
            let trial = &mut data[i * c * t..(i + 1) * c * t];
            for ch in 0..c {
                let row = &mut trial[ch * t..(ch + 1) * t];
                if recipe.channels.contains(&ch) {
                    let phase = rng.uniform(0.0, 2.0 * PI);
                    let a = gain * recipe.amplitude;
                    for (n, v) in row.iter_mut().enumerate() {
                        *v += a * (2.0 * PI * f * n as f64 / spec.fs + phase).sin();
                    }
                }
                if spec.pink_sigma > 0.0 {
                    let pink = coloured_noise(&mut rng, t, spec.noise_exponent, &mut fft);
                    row.iter_mut().zip(pink).for_each(|(v, p)| *v += spec.pink_sigma * p);
                }
                if spec.white_sigma > 0.0 {
                    row.iter_mut().for_each(|v| *v += spec.white_sigma * rng.normal(0.0, 1.0));
                }
            }
        }
    }
    let mut set = EpochSet::new(data, c, t, labels, subjects, spec.fs, k)?;
    set.channel_names = (0..c).map(|ch| format!("ch{ch}")).collect();
    set.provenance = format!("synthetic seed={seed}");
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let spec = SynthSpec { n_subjects: 2, trials_per_subject: 6, n_samples: 64, ..SynthSpec::default() };
        let a = synth_generate(&spec, 3).unwrap();
        assert_eq!(a, synth_generate(&spec, 3).unwrap());
        assert_ne!(a.data(), synth_generate(&spec, 4).unwrap().data());
        assert_eq!(a.labels(), &[0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1]);
        assert_eq!(a.subjects(), &[0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1]);
    }

    #[test]
    fn silent_channels_without_noise() {
        let spec = SynthSpec {
            n_subjects: 1,
            trials_per_subject: 2,
            classes: vec![ClassRecipe { freq_hz: 10.0, channels: vec![1], amplitude: 2.0 }],
            pink_sigma: 0.0,
            white_sigma: 0.0,
            ..SynthSpec::default()
        };
        let s = synth_generate(&spec, 0).unwrap();
        for i in 0..2 {
            let trial = s.trial(i);
            for ch in 0..8 {
                let row = &trial[ch * 512..(ch + 1) * 512];
                assert_eq!(ch == 1, row.iter().any(|&v| v != 0.0), "channel {ch}");
            }
        }
    }

    #[test]
    fn rejects_invalid_specs() {
        let mut s = SynthSpec::default();
        s.classes[0].freq_hz = 70.0;
        assert!(matches!(s.validate(), Err(DataError::InvalidSpec(_))));
        let mut s = SynthSpec::default();
        s.classes[1].channels.push(8);
        assert!(s.validate().is_err());
        assert!(SynthSpec { fs: 0.0, ..SynthSpec::default() }.validate().is_err());
    }

    #[test]
    fn pink_noise_is_unit_variance_and_low_heavy() {
        let mut rng = RngStream::new(1, 0);
        let mut fft = FftPlanner::new();
        let x = coloured_noise(&mut rng, 1024, 1.0, &mut fft);
        let var = x.iter().map(|v| v * v).sum::<f64>() / 1024.0;
        assert!((var - 1.0).abs() < 1e-12);
        let diff_var = x.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum::<f64>() / 1023.0;
        assert!(diff_var < 1.0, "white noise would give 2, got {diff_var}");
    }
}
