//! Deterministic synthetic speech.
//!
//! Each phoneme is a two-formant spectral envelope sampled on a harmonic
//! stack at the speaker's pitch. Speakers differ in pitch, spectral tilt
//! and a vocal-tract scale applied to the formants. The mel matrix of every
//! utterance is computed from its own synthesized waveform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{mel_extract, mu_law_encode, Corpus, FeatureConfig, PhonemeTranscript, UtteranceRecord};
use crate::error::{Error, Result};

const ARPABET: [&str; 39] = [
    "aa", "ae", "ah", "ao", "aw", "ay", "b", "ch", "d", "dh", "eh", "er", "ey", "f", "g", "hh", "ih", "iy", "jh", "k",
    "l", "m", "n", "ng", "ow", "oy", "p", "r", "s", "sh", "t", "th", "uh", "uw", "v", "w", "y", "z", "zh",
];

/// Symbols of a toy inventory of `n` phonemes.
pub fn toy_phoneme_symbols(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| match ARPABET.get(i) {
            Some(s) => s.to_string(),
            None => format!("ph{i}"),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToySpeaker {
    pub id: String,
    pub f0_hz: f64,
    /// Exponent of the `(f / 500 Hz)^-tilt` spectral slope.
    pub tilt: f64,
    /// Multiplies every formant frequency.
    pub formant_scale: f64,
}

impl ToySpeaker {
    /// The `i`-th built-in voice.
    pub fn preset(i: usize) -> Self {
        const TABLE: [(f64, f64, f64); 6] = [
            (110.0, 0.4, 1.00),
            (210.0, 1.3, 1.07),
            (150.0, 0.9, 0.95),
            (180.0, 0.1, 1.03),
            (130.0, 1.0, 0.97),
            (230.0, 0.5, 1.05),
        ];
        let (f0, tilt, fs) = match TABLE.get(i) {
            Some(&row) => row,
            None => {
                let u = (i as f64 * 0.618_034).fract();
                let v = (i as f64 * 0.381_966 + 0.2).fract();
                (100.0 + 140.0 * u, 0.1 + 1.2 * v, 0.94 + 0.12 * u)
            }
        };
        ToySpeaker {
            id: format!("spk{i:02}"),
            f0_hz: f0,
            tilt,
            formant_scale: fs,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyCorpusSpec {
    pub n_phonemes: usize,
    pub speakers: Vec<ToySpeaker>,
    pub utterances_per_speaker: usize,
    /// Inclusive range of phonemes per utterance.
    pub phonemes_per_utterance: (usize, usize),
    /// Inclusive range of frames per phoneme.
    pub duration_frames: (usize, usize),
    pub features: FeatureConfig,
    /// Whether records carry their transcripts.
    pub transcribed: bool,
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        ToyCorpusSpec {
            n_phonemes: 10,
            speakers: (0..4).map(ToySpeaker::preset).collect(),
            utterances_per_speaker: 50,
            phonemes_per_utterance: (4, 7),
            duration_frames: (4, 8),
            features: FeatureConfig::default(),
            transcribed: true,
        }
    }
}

impl ToyCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_phonemes < 2 {
            return Err(Error::config("toy corpus needs at least two phonemes"));
        }
        if self.speakers.is_empty() {
            return Err(Error::config("toy corpus needs at least one speaker"));
        }
        let (a, b) = self.phonemes_per_utterance;
        let (c, d) = self.duration_frames;
        if a == 0 || a > b || c == 0 || c > d {
            return Err(Error::config("empty phoneme-count or duration range"));
        }
        self.features.validate()?;
        let nyq = self.features.sample_rate as f64 / 2.0;
        for s in &self.speakers {
            if !(s.f0_hz > 0.0 && s.f0_hz < nyq / 2.0) || s.formant_scale <= 0.0 {
                return Err(Error::config(format!("speaker {} has invalid voice parameters", s.id)));
            }
        }
        Ok(())
    }
}

/// Random transcript with adjacent phonemes distinct.
pub fn random_transcript(spec: &ToyCorpusSpec, rng: &mut impl Rng) -> PhonemeTranscript {
    let (a, b) = spec.phonemes_per_utterance;
    let (c, d) = spec.duration_frames;
    let n = rng.gen_range(a..=b);
    let mut ids: Vec<usize> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut id = rng.gen_range(0..spec.n_phonemes);
        while ids.last() == Some(&id) {
            id = rng.gen_range(0..spec.n_phonemes);
        }
        ids.push(id);
    }
    let durations = (0..n).map(|_| rng.gen_range(c..=d)).collect();
    PhonemeTranscript::new(ids, durations).expect("generated transcript is valid")
}

fn formants(p: usize) -> (f64, f64, f64) {
    let pf = p as f64;
    let f1 = 300.0 + 500.0 * (pf * 0.618_034).fract();
    let f2 = 1000.0 + 800.0 * (pf * 0.381_966 + 0.3).fract();
    let gain = 0.5 + 0.4 * (pf * 0.754_878).fract();
    (f1, f2, gain)
}

fn harmonic_amplitudes(p: usize, speaker: &ToySpeaker, f0: f64, n_harm: usize) -> Vec<f64> {
    let (f1, f2, gain) = formants(p);
    let (f1, f2) = (f1 * speaker.formant_scale, f2 * speaker.formant_scale);
    let env = |f: f64| {
        let a = (-((f - f1) / 100.0).powi(2)).exp();
        let b = 0.8 * (-((f - f2) / 150.0).powi(2)).exp();
        (a + b + 0.03) * (f / 500.0).powf(-speaker.tilt)
    };
    let raw: Vec<f64> = (1..=n_harm).map(|h| env(h as f64 * f0)).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|a| gain * a / sum).collect()
}

/// Synthesizes the real-valued waveform of `transcript` spoken by `speaker`
/// (`transcript.frames() × samples_per_frame` samples, peak ≤ 0.9).
pub fn synthesize_waveform(
    spec: &ToyCorpusSpec,
    speaker: &ToySpeaker,
    transcript: &PhonemeTranscript,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let spf = spec.features.samples_per_frame()?;
    let sr = spec.features.sample_rate as f64;
    let f0 = speaker.f0_hz * (1.0 + 0.03 * rng.gen_range(-1.0..=1.0));
    let decl = 0.05 * rng.gen_range(0.0..=1.0);
    let n_samples = transcript.frames() * spf;
    let f0_at = |n: usize| f0 * (1.0 + decl * (0.5 - n as f64 / n_samples as f64));
    let f0_max = f0 * (1.0 + decl * 0.5);
    let n_harm = (((sr / 2.0) * 0.95 / f0_max).floor() as usize).max(1);
    let mut phase: Vec<f64> = (0..n_harm).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
    let amps: Vec<Vec<f64>> = transcript
        .ids()
        .iter()
        .map(|&p| harmonic_amplitudes(p, speaker, f0, n_harm))
        .collect();
    let xfade = (spf / 2).max(1);
    let mut out = Vec::with_capacity(n_samples);
    let mut n = 0;
    for (i, &dur) in transcript.durations().iter().enumerate() {
        for k in 0..dur * spf {
            let fz = f0_at(n);
            let w = if i > 0 && k < xfade {
                k as f64 / xfade as f64
            } else {
                1.0
            };
            let mut s = 0.0;
            for h in 0..n_harm {
                let a = if w < 1.0 {
                    w * amps[i][h] + (1.0 - w) * amps[i - 1][h]
                } else {
                    amps[i][h]
                };
                s += a * phase[h].sin();
                phase[h] =
                    (phase[h] + std::f64::consts::TAU * (h + 1) as f64 * fz / sr).rem_euclid(std::f64::consts::TAU);
            }
            out.push(s);
            n += 1;
        }
    }
    Ok(out)
}

/// Renders one utterance record; `seed` fixes phases and pitch jitter.
pub fn render_utterance(
    spec: &ToyCorpusSpec,
    speaker: &ToySpeaker,
    transcript: &PhonemeTranscript,
    utterance_id: &str,
    seed: u64,
) -> Result<UtteranceRecord> {
    transcript.check_inventory(spec.n_phonemes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wave = synthesize_waveform(spec, speaker, transcript, &mut rng)?;
    let mel = mel_extract(&wave, &spec.features)?;
    let codes = mu_law_encode(&wave, spec.features.bits, spec.features.sample_rate)?;
    Ok(UtteranceRecord {
        utterance_id: utterance_id.to_string(),
        speaker_id: speaker.id.clone(),
        transcript: spec.transcribed.then(|| transcript.clone()),
        mel,
        waveform: codes,
    })
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x ^= x >> 33;
    x = x.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    x ^= x >> 33;
    x
}

/// Builds the whole corpus. A pure function of `(spec, seed)`.
pub fn generate_toy_corpus(spec: &ToyCorpusSpec, seed: u64) -> Result<Corpus> {
    spec.validate()?;
    let mut records = Vec::new();
    for (si, speaker) in spec.speakers.iter().enumerate() {
        for u in 0..spec.utterances_per_speaker {
            let s = mix_seed(seed, si as u64 + 1, u as u64 + 1);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let transcript = random_transcript(spec, &mut rng);
            let id = format!("{}_{u:04}", speaker.id);
            records.push(render_utterance(spec, speaker, &transcript, &id, s ^ 0x5EED)?);
        }
    }
    records.sort_by(|a, b| a.utterance_id.cmp(&b.utterance_id));
    Ok(Corpus {
        phonemes: toy_phoneme_symbols(spec.n_phonemes),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ToyCorpusSpec {
        ToyCorpusSpec {
            utterances_per_speaker: 3,
            speakers: (0..2).map(ToySpeaker::preset).collect(),
            ..ToyCorpusSpec::default()
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = generate_toy_corpus(&small(), 7).unwrap();
        let b = generate_toy_corpus(&small(), 7).unwrap();
        assert_eq!(a, b);
        let c = generate_toy_corpus(&small(), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn records_are_consistent() {
        let c = generate_toy_corpus(&small(), 1).unwrap();
        assert_eq!(c.records.len(), 6);
        for r in &c.records {
            r.validate(Some(10)).unwrap();
        }
    }

    #[test]
    fn mel_is_extracted_from_own_waveform() {
        let spec = small();
        let t = PhonemeTranscript::new(vec![1, 4, 2], vec![5, 4, 6]).unwrap();
        let rec = render_utterance(&spec, &spec.speakers[0], &t, "x", 99).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let wave = synthesize_waveform(&spec, &spec.speakers[0], &t, &mut rng).unwrap();
        assert_eq!(rec.mel, mel_extract(&wave, &spec.features).unwrap());
        assert!(wave.iter().all(|v| v.abs() <= 0.9));
    }

    #[test]
    fn speakers_share_labels_but_not_mel() {
        let spec = small();
        let t = PhonemeTranscript::new(vec![0, 3, 5], vec![4, 6, 5]).unwrap();
        let a = render_utterance(&spec, &spec.speakers[0], &t, "a", 5).unwrap();
        let b = render_utterance(&spec, &spec.speakers[1], &t, "b", 5).unwrap();
        assert_eq!(a.labels(), b.labels());
        assert_ne!(a.mel, b.mel);
    }

    #[test]
    fn invalid_spec_is_config_error() {
        let mut s = small();
        s.speakers.clear();
        assert!(matches!(generate_toy_corpus(&s, 0), Err(Error::Config(_))));
        let mut s = small();
        s.n_phonemes = 0;
        assert!(matches!(generate_toy_corpus(&s, 0), Err(Error::Config(_))));
    }
}
