//! Corpus units and acoustic features: phoneme transcripts, log-mel
//! matrices, μ-law waveform codes, corpus I/O and the synthetic toy corpus.

mod corpus;
mod mel;
mod mulaw;
mod toy;

pub use corpus::{
    decode_codes, decode_mel, encode_codes, encode_mel, format_lab, load_corpus, parse_lab, read_codes_file,
    read_mel_file, read_phonemes, save_corpus, write_codes_file, write_mel_file, Corpus,
};
pub(crate) use corpus::{read_file, write_file, Reader};
pub use mel::{mel_extract, MelFilterbank};
pub use mulaw::{mu_law_decode, mu_law_encode};
pub use toy::{
    generate_toy_corpus, random_transcript, render_utterance, synthesize_waveform, toy_phoneme_symbols, ToyCorpusSpec,
    ToySpeaker,
};

use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Framing and filterbank configuration of the log-mel front end.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub window_ms: f64,
    pub shift_ms: f64,
    pub n_mels: usize,
    pub f_min: f64,
    /// Upper filterbank edge; `None` means Nyquist.
    pub f_max: Option<f64>,
    /// Added to filterbank energies before the logarithm.
    pub eps_floor: f64,
    /// Zero-pad `(window - shift) / 2` samples on each side so that frame `t`
    /// is centered on the samples `t·shift .. (t+1)·shift`.
    pub center: bool,
    /// μ-law resolution of stored waveforms.
    pub bits: u32,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            sample_rate: 4000,
            window_ms: 50.0,
            shift_ms: 12.5,
            n_mels: 16,
            f_min: 0.0,
            f_max: None,
            eps_floor: 1e-5,
            center: true,
            bits: 8,
        }
    }
}

impl FeatureConfig {
    /// Full-scale front end: 80 bands, 50 ms window, 12.5 ms shift, 10-bit μ-law.
    pub fn full_scale(sample_rate: u32) -> Self {
        FeatureConfig {
            sample_rate,
            n_mels: 80,
            bits: 10,
            ..FeatureConfig::default()
        }
    }

    fn ms_to_samples(&self, ms: f64, what: &str) -> Result<usize> {
        let s = ms * self.sample_rate as f64 / 1000.0;
        if s < 1.0 || (s - s.round()).abs() > 1e-9 {
            return Err(Error::config(format!(
                "{what} of {ms} ms is not a whole number of samples at {} Hz",
                self.sample_rate
            )));
        }
        Ok(s.round() as usize)
    }

    pub fn window_samples(&self) -> Result<usize> {
        self.ms_to_samples(self.window_ms, "window")
    }

    /// Hop size, which is also the number of waveform samples per mel frame.
    pub fn samples_per_frame(&self) -> Result<usize> {
        self.ms_to_samples(self.shift_ms, "shift")
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.window_samples()?;
        let s = self.samples_per_frame()?;
        if s > w {
            return Err(Error::config("shift longer than window"));
        }
        if self.n_mels == 0 {
            return Err(Error::config("n_mels must be positive"));
        }
        if !(2..=16).contains(&self.bits) {
            return Err(Error::config(format!("bits {} outside [2, 16]", self.bits)));
        }
        if !(self.eps_floor > 0.0) {
            return Err(Error::config("eps_floor must be positive"));
        }
        let nyq = self.sample_rate as f64 / 2.0;
        let f_max = self.f_max.unwrap_or(nyq);
        if !(self.f_min >= 0.0 && self.f_min < f_max && f_max <= nyq) {
            return Err(Error::config(
                "filterbank edges must satisfy 0 <= f_min < f_max <= Nyquist",
            ));
        }
        Ok(())
    }
}

/// Phoneme ids with per-phoneme frame durations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhonemeTranscript {
    ids: Vec<usize>,
    durations: Vec<usize>,
}

impl PhonemeTranscript {
    pub fn new(ids: Vec<usize>, durations: Vec<usize>) -> Result<Self> {
        if ids.len() != durations.len() {
            return Err(Error::data(format!(
                "{} phoneme ids but {} durations",
                ids.len(),
                durations.len()
            )));
        }
        if ids.is_empty() {
            return Err(Error::data("empty transcript"));
        }
        if durations.contains(&0) {
            return Err(Error::data("phoneme duration must be at least one frame"));
        }
        Ok(PhonemeTranscript { ids, durations })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn durations(&self) -> &[usize] {
        &self.durations
    }

    /// Total number of frames covered.
    pub fn frames(&self) -> usize {
        self.durations.iter().sum()
    }

    pub fn check_inventory(&self, n_phonemes: usize) -> Result<()> {
        match self.ids.iter().find(|&&i| i >= n_phonemes) {
            Some(bad) => Err(Error::data(format!(
                "phoneme id {bad} outside inventory of {n_phonemes}"
            ))),
            None => Ok(()),
        }
    }

    /// Frame-level labels: phoneme `i` fills its half-open span of frames.
    pub fn upsample(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.frames());
        for (&id, &d) in self.ids.iter().zip(&self.durations) {
            out.extend(std::iter::repeat_n(id, d));
        }
        out
    }
}

/// Frame-level label sequence of a transcript.
pub fn upsample_transcript(t: &PhonemeTranscript) -> Vec<usize> {
    t.upsample()
}

/// `T × D` log-mel energies stored on the `f32` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MelMatrix {
    frames: usize,
    dims: usize,
    values: Vec<f32>,
    pub frame_shift_ms: f32,
    pub window_ms: f32,
}

impl MelMatrix {
    pub fn new(frames: usize, dims: usize, values: Vec<f32>, frame_shift_ms: f32, window_ms: f32) -> Result<Self> {
        if frames == 0 || dims == 0 {
            return Err(Error::data("mel matrix must have at least one frame and one band"));
        }
        if values.len() != frames * dims {
            return Err(Error::data(format!(
                "mel data has {} values, expected {frames}x{dims}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("mel matrix contains non-finite values"));
        }
        Ok(MelMatrix {
            frames,
            dims,
            values,
            frame_shift_ms,
            window_ms,
        })
    }

    /// Rounds a network output onto the `f32` grid.
    pub fn from_mat(m: &Mat, frame_shift_ms: f32, window_ms: f32) -> Result<Self> {
        let values = m.data().iter().map(|&v| v as f32).collect();
        MelMatrix::new(m.rows(), m.cols(), values, frame_shift_ms, window_ms)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, t: usize, d: usize) -> f32 {
        self.values[t * self.dims + d]
    }

    pub fn to_mat(&self) -> Mat {
        Mat::from_vec(self.frames, self.dims, self.values.iter().map(|&v| v as f64).collect())
    }

    /// Mean absolute difference to another mel matrix of the same shape.
    pub fn mae(&self, other: &MelMatrix) -> Result<f64> {
        if self.frames != other.frames || self.dims != other.dims {
            return Err(Error::data(format!(
                "mel shapes differ: {}x{} vs {}x{}",
                self.frames, self.dims, other.frames, other.dims
            )));
        }
        let s: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .sum();
        Ok(s / self.values.len() as f64)
    }
}

/// μ-law class ids in `[0, q)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WaveCodes {
    codes: Vec<u16>,
    q: u32,
    pub sample_rate: u32,
}

impl WaveCodes {
    pub fn new(codes: Vec<u16>, q: u32, sample_rate: u32) -> Result<Self> {
        if !(4..=65536).contains(&q) || !q.is_power_of_two() {
            return Err(Error::data(format!(
                "class count {q} is not 2^bits with bits in [2,16]"
            )));
        }
        if let Some(bad) = codes.iter().find(|&&c| c as u32 >= q) {
            return Err(Error::data(format!("code {bad} >= class count {q}")));
        }
        Ok(WaveCodes { codes, q, sample_rate })
    }

    pub fn codes(&self) -> &[u16] {
        &self.codes
    }

    pub fn classes(&self) -> u32 {
        self.q
    }

    pub fn bits(&self) -> u32 {
        self.q.trailing_zeros()
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Samples `start..start + len`.
    pub fn slice(&self, start: usize, len: usize) -> WaveCodes {
        WaveCodes {
            codes: self.codes[start..start + len].to_vec(),
            q: self.q,
            sample_rate: self.sample_rate,
        }
    }
}

/// One corpus item.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceRecord {
    pub utterance_id: String,
    pub speaker_id: String,
    pub transcript: Option<PhonemeTranscript>,
    pub mel: MelMatrix,
    pub waveform: WaveCodes,
}

impl UtteranceRecord {
    /// Checks the frame/sample consistency invariants.
    pub fn validate(&self, n_phonemes: Option<usize>) -> Result<()> {
        let spf = self.mel.frame_shift_ms as f64 * self.waveform.sample_rate as f64 / 1000.0;
        if (spf - spf.round()).abs() > 1e-6 || spf < 1.0 {
            return Err(Error::data(format!(
                "{}: frame shift {} ms is not a whole number of samples",
                self.utterance_id, self.mel.frame_shift_ms
            )));
        }
        let spf = spf.round() as usize;
        if self.waveform.len() != self.mel.frames() * spf {
            return Err(Error::data(format!(
                "{}: {} waveform samples but {} frames x {spf} samples/frame",
                self.utterance_id,
                self.waveform.len(),
                self.mel.frames()
            )));
        }
        if let Some(t) = &self.transcript {
            if t.frames() != self.mel.frames() {
                return Err(Error::data(format!(
                    "{}: alignment covers {} frames but mel has {}",
                    self.utterance_id,
                    t.frames(),
                    self.mel.frames()
                )));
            }
            if let Some(p) = n_phonemes {
                t.check_inventory(p)?;
            }
        }
        Ok(())
    }

    pub fn samples_per_frame(&self) -> usize {
        self.waveform.len() / self.mel.frames()
    }

    /// Frame labels, if transcribed.
    pub fn labels(&self) -> Option<Vec<usize>> {
        self.transcript.as_ref().map(PhonemeTranscript::upsample)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_definition() {
        let t = PhonemeTranscript::new(vec![0, 1], vec![2, 3]).unwrap();
        assert_eq!(upsample_transcript(&t), vec![0, 0, 1, 1, 1]);
        let t = PhonemeTranscript::new(vec![4], vec![1]).unwrap();
        assert_eq!(upsample_transcript(&t), vec![4]);
    }

    #[test]
    fn transcript_invariants() {
        assert!(PhonemeTranscript::new(vec![0, 1], vec![2]).is_err());
        assert!(PhonemeTranscript::new(vec![0], vec![0]).is_err());
        let t = PhonemeTranscript::new(vec![0, 7], vec![1, 1]).unwrap();
        assert!(t.check_inventory(7).is_err());
        assert!(t.check_inventory(8).is_ok());
    }

    #[test]
    fn full_scale_front_end() {
        let c = FeatureConfig::full_scale(24000);
        assert_eq!(c.n_mels, 80);
        assert_eq!(c.window_ms, 50.0);
        assert_eq!(c.shift_ms, 12.5);
        assert_eq!(c.bits, 10);
        assert_eq!(c.window_samples().unwrap(), 1200);
        assert_eq!(c.samples_per_frame().unwrap(), 300);
    }

    #[test]
    fn default_toy_front_end() {
        let c = FeatureConfig::default();
        c.validate().unwrap();
        assert_eq!(c.samples_per_frame().unwrap(), 50);
        assert_eq!(c.window_samples().unwrap(), 200);
    }

    #[test]
    fn record_rejects_misaligned_transcript() {
        let mel = MelMatrix::new(3, 1, vec![0.0; 3], 12.5, 50.0).unwrap();
        let wav = WaveCodes::new(vec![0; 150], 256, 4000).unwrap();
        let rec = UtteranceRecord {
            utterance_id: "u".into(),
            speaker_id: "s".into(),
            transcript: Some(PhonemeTranscript::new(vec![0], vec![2]).unwrap()),
            mel,
            waveform: wav,
        };
        assert!(rec.validate(None).is_err());
    }
}
