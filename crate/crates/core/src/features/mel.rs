use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{FeatureConfig, MelMatrix};
use crate::error::{Error, Result};

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular (peak 1) filters on the HTK mel scale over an FFT power spectrum.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    n_fft: usize,
    n_mels: usize,
    centers_hz: Vec<f64>,
    /// `n_mels × (n_fft/2 + 1)` row-major weights.
    weights: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(cfg: &FeatureConfig) -> Result<Self> {
        cfg.validate()?;
        let window = cfg.window_samples()?;
        let n_fft = window.next_power_of_two();
        let n_bins = n_fft / 2 + 1;
        let sr = cfg.sample_rate as f64;
        let f_max = cfg.f_max.unwrap_or(sr / 2.0);
        let (m_lo, m_hi) = (hz_to_mel(cfg.f_min), hz_to_mel(f_max));
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let mut weights = vec![0.0; cfg.n_mels * n_bins];
        for j in 0..cfg.n_mels {
            let (lo, c, hi) = (edges[j], edges[j + 1], edges[j + 2]);
            for b in 0..n_bins {
                let f = b as f64 * sr / n_fft as f64;
                let w = if f > lo && f <= c {
                    (f - lo) / (c - lo)
                } else if f > c && f < hi {
                    (hi - f) / (hi - c)
                } else {
                    0.0
                };
                weights[j * n_bins + b] = w;
            }
        }
        Ok(MelFilterbank {
            n_fft,
            n_mels: cfg.n_mels,
            centers_hz: edges[1..=cfg.n_mels].to_vec(),
            weights,
        })
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    /// Peak frequency of filter `j`.
    pub fn center_hz(&self, j: usize) -> f64 {
        self.centers_hz[j]
    }

    /// Weight of filter `j` at FFT bin `b`.
    pub fn weight(&self, j: usize, b: usize) -> f64 {
        self.weights[j * (self.n_fft / 2 + 1) + b]
    }

    fn apply(&self, power: &[f64], out: &mut [f64]) {
        let n_bins = self.n_fft / 2 + 1;
        for (j, o) in out.iter_mut().enumerate().take(self.n_mels) {
            let w = &self.weights[j * n_bins..(j + 1) * n_bins];
            *o = w.iter().zip(power).map(|(a, b)| a * b).sum();
        }
    }
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Log-mel spectrogram: `ln(eps_floor + filterbank energy)` per frame and band.
///
/// With `center` set, the waveform is zero-padded by `(window - shift) / 2`
/// samples on each side before framing, so a waveform of `T·shift` samples
/// yields exactly `T` frames.
pub fn mel_extract(waveform: &[f64], cfg: &FeatureConfig) -> Result<MelMatrix> {
    let bank = MelFilterbank::new(cfg)?;
    let window = cfg.window_samples()?;
    let shift = cfg.samples_per_frame()?;
    if waveform.len() < window {
        return Err(Error::data(format!(
            "waveform of {} samples is shorter than one {window}-sample window",
            waveform.len()
        )));
    }
    let (pad_l, pad_r) = if cfg.center {
        let p = window - shift;
        (p / 2, p - p / 2)
    } else {
        (0, 0)
    };
    let total = pad_l + waveform.len() + pad_r;
    let frames = (total - window) / shift + 1;
    let sample = |i: usize| -> f64 {
        if i < pad_l || i >= pad_l + waveform.len() {
            0.0
        } else {
            waveform[i - pad_l]
        }
    };

    let n_fft = bank.n_fft();
    let fft: Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_forward(n_fft);
    let win = hann(window);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut power = vec![0.0; n_fft / 2 + 1];
    let mut energies = vec![0.0; cfg.n_mels];
    let mut values = Vec::with_capacity(frames * cfg.n_mels);
    for t in 0..frames {
        let start = t * shift;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < window {
                Complex::new(sample(start + i) * win[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (p, b) in power.iter_mut().zip(&buf) {
            *p = b.norm_sqr();
        }
        bank.apply(&power, &mut energies);
        values.extend(energies.iter().map(|&e| (cfg.eps_floor + e).ln() as f32));
    }
    MelMatrix::new(frames, cfg.n_mels, values, cfg.shift_ms as f32, cfg.window_ms as f32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silence_gives_log_floor_everywhere() {
        let cfg = FeatureConfig::default();
        let w = cfg.window_samples().unwrap();
        let mel = mel_extract(&vec![0.0; 3 * w], &cfg).unwrap();
        let floor = cfg.eps_floor.ln() as f32;
        assert!(mel.values().iter().all(|&v| v == floor));
        assert_eq!(mel.frames(), 3 * w / cfg.samples_per_frame().unwrap());
    }

    #[test]
    fn short_waveform_rejected() {
        let cfg = FeatureConfig::default();
        assert!(matches!(mel_extract(&[0.0; 199], &cfg), Err(Error::Data(_))));
    }

    #[test]
    fn uncentered_frame_count() {
        let cfg = FeatureConfig {
            center: false,
            ..FeatureConfig::default()
        };
        // floor((1000 - 200) / 50) + 1
        assert_eq!(mel_extract(&vec![0.1; 1000], &cfg).unwrap().frames(), 17);
    }

    #[test]
    fn centered_frames_match_sample_blocks() {
        let cfg = FeatureConfig::default();
        assert_eq!(mel_extract(&vec![0.1; 50 * 11], &cfg).unwrap().frames(), 11);
    }

    #[test]
    fn deterministic() {
        let cfg = FeatureConfig::default();
        let x: Vec<f64> = (0..900).map(|i| (i as f64 * 0.37).sin() * 0.5).collect();
        assert_eq!(mel_extract(&x, &cfg).unwrap(), mel_extract(&x, &cfg).unwrap());
    }
}
