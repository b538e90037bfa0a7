//! Analysis tools: training-curve logs, latent-sequence dumps and their
//! comparison, the frame-level phoneme error rate, and the ablation matrix.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::{read_file, write_file, MelMatrix, Reader, UtteranceRecord};
use crate::losses::{self, LossReport};
use crate::net::{
    speech_encoder_forward, text_decoder_forward, text_encoder_forward, LLEDistribution, LLESequence, ModelState,
};
use crate::pipeline::{
    clone_speaker, infer_tts_mel, infer_vc_mel, initialize, train_initial, AdaptMode, ExperimentConfig,
};
use crate::tensor::Mat;

/// Appends report lines to a sink, rejecting non-increasing step numbers.
pub struct CurveLog<W: Write> {
    sink: W,
    last_step: Option<u64>,
}

impl<W: Write> CurveLog<W> {
    pub fn new(sink: W) -> Self {
        CurveLog { sink, last_step: None }
    }

    pub fn into_inner(self) -> W {
        self.sink
    }
}

/// Writes one curve line for `report`.
pub fn curve_log<W: Write>(log: &mut CurveLog<W>, report: &LossReport) -> Result<()> {
    if let Some(last) = log.last_step {
        if report.step <= last {
            return Err(Error::data(format!(
                "curve step {} does not follow step {last}",
                report.step
            )));
        }
    }
    writeln!(log.sink, "{}", report.to_line()).map_err(|e| Error::io("<curve sink>", e))?;
    log.last_step = Some(report.step);
    Ok(())
}

/// Parses curve text, checking that steps increase.
pub fn parse_curves(text: &str) -> Result<Vec<LossReport>> {
    let mut out: Vec<LossReport> = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let r = LossReport::parse_line(line)?;
        if let Some(prev) = out.last() {
            if r.step <= prev.step {
                return Err(Error::data(format!(
                    "curve step {} does not follow step {}",
                    r.step, prev.step
                )));
            }
        }
        out.push(r);
    }
    Ok(out)
}

pub fn write_curves(path: &Path, reports: &[LossReport]) -> Result<()> {
    let mut log = CurveLog::new(Vec::new());
    for r in reports {
        curve_log(&mut log, r)?;
    }
    write_file(path, &log.into_inner())
}

pub fn read_curves(path: &Path) -> Result<Vec<LossReport>> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::data_file(path, "curve file is not utf-8"))?;
    parse_curves(&text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoder {
    Text,
    Speech,
}

impl Encoder {
    fn tag(self) -> u8 {
        match self {
            Encoder::Text => 0,
            Encoder::Speech => 1,
        }
    }
}

/// Latent distribution sequence of one utterance with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct LleDump {
    pub encoder: Encoder,
    /// Free-form label such as `supervised` or `unsupervised`.
    pub variant: String,
    pub speaker_id: String,
    pub utterance_id: String,
    pub dist: LLEDistribution,
}

fn round_f32(m: &Mat) -> Mat {
    let mut m = m.clone();
    m.round_to_f32();
    m
}

/// Encodes `utterance` with the chosen encoder. Values are rounded to
/// `f32` so that a saved dump loads back identically.
pub fn dump_lle(model: &ModelState, utterance: &UtteranceRecord, encoder: Encoder, variant: &str) -> Result<LleDump> {
    let dist = match encoder {
        Encoder::Text => {
            let t = utterance
                .transcript
                .as_ref()
                .ok_or_else(|| Error::data(format!("utterance {} has no transcript", utterance.utterance_id)))?;
            text_encoder_forward(model, t)?
        }
        Encoder::Speech => speech_encoder_forward(model, &utterance.mel)?,
    };
    Ok(LleDump {
        encoder,
        variant: variant.to_string(),
        speaker_id: utterance.speaker_id.clone(),
        utterance_id: utterance.utterance_id.clone(),
        dist: LLEDistribution::new(round_f32(&dist.mean), round_f32(&dist.std))?,
    })
}

const LLE_MAGIC: &[u8; 4] = b"LLED";

impl LleDump {
    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(LLE_MAGIC);
        b.extend_from_slice(&1u32.to_le_bytes());
        b.push(self.encoder.tag());
        for s in [&self.variant, &self.speaker_id, &self.utterance_id] {
            b.extend_from_slice(&(s.len() as u16).to_le_bytes());
            b.extend_from_slice(s.as_bytes());
        }
        b.extend_from_slice(&(self.dist.frames() as u32).to_le_bytes());
        b.extend_from_slice(&(self.dist.dims() as u32).to_le_bytes());
        for m in [&self.dist.mean, &self.dist.std] {
            for &v in m.data() {
                b.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        b
    }

    pub fn decode(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(path, bytes);
        if r.take(4)? != LLE_MAGIC {
            return Err(Error::data_file(path, "not an LLE dump (bad magic)"));
        }
        if r.u32()? != 1 {
            return Err(Error::data_file(path, "unsupported LLE dump version"));
        }
        let encoder = match r.u8()? {
            0 => Encoder::Text,
            1 => Encoder::Speech,
            t => return Err(Error::data_file(path, format!("unknown encoder tag {t}"))),
        };
        let mut strings = Vec::new();
        for _ in 0..3 {
            let n = r.u16()? as usize;
            let s = std::str::from_utf8(r.take(n)?).map_err(|_| Error::data_file(path, "metadata is not utf-8"))?;
            strings.push(s.to_string());
        }
        let t = r.u32()? as usize;
        let z = r.u32()? as usize;
        let read = |r: &mut Reader| -> Result<Mat> {
            let data = (0..t * z).map(|_| r.f32().map(f64::from)).collect::<Result<_>>()?;
            Ok(Mat::from_vec(t, z, data))
        };
        let mean = read(&mut r)?;
        let std = read(&mut r)?;
        r.expect_end()?;
        let dist = LLEDistribution::new(mean, std).map_err(|e| Error::data_file(path, e.to_string()))?;
        let mut it = strings.into_iter();
        Ok(LleDump {
            encoder,
            variant: it.next().unwrap_or_default(),
            speaker_id: it.next().unwrap_or_default(),
            utterance_id: it.next().unwrap_or_default(),
            dist,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        Self::decode(path, &bytes)
    }
}

/// Frame-wise and overall symmetrized KLD between two dumps.
#[derive(Debug, Clone, PartialEq)]
pub struct LleComparison {
    pub per_frame: Vec<f64>,
    /// Equal to the tied-latent loss of the two distributions.
    pub mean: f64,
}

pub fn lle_compare(a: &LleDump, b: &LleDump) -> Result<LleComparison> {
    let (x, y) = (&a.dist, &b.dist);
    if x.mean.shape() != y.mean.shape() {
        return Err(Error::data(format!(
            "dumps have shapes {:?} and {:?}",
            x.mean.shape(),
            y.mean.shape()
        )));
    }
    let z = x.dims();
    let per_frame = (0..x.frames())
        .map(|t| {
            let (mut f, mut b) = (0.0, 0.0);
            for c in 0..z {
                let (mp, sp, mq, sq) = (x.mean.get(t, c), x.std.get(t, c), y.mean.get(t, c), y.std.get(t, c));
                f += crate::graph::kld_scalar(mp, sp, mq, sq);
                b += crate::graph::kld_scalar(mq, sq, mp, sp);
            }
            0.5 * f / z as f64 + 0.5 * b / z as f64
        })
        .collect();
    let mean = losses::loss_tie(x, y).map_err(|e| Error::data(e.to_string()))?;
    Ok(LleComparison { per_frame, mean })
}

/// Fraction of frames whose most likely phoneme under the text decoder
/// (fed speech-encoder means) differs from the reference label.
pub fn frame_error_rate(judge: &ModelState, mel: &MelMatrix, labels: &[usize]) -> Result<(usize, usize)> {
    if mel.frames() != labels.len() {
        return Err(Error::data(format!(
            "{} frames but {} labels",
            mel.frames(),
            labels.len()
        )));
    }
    let dist = speech_encoder_forward(judge, mel)?;
    let post = text_decoder_forward(judge, &LLESequence { z: dist.mean })?;
    let wrong = labels
        .iter()
        .enumerate()
        .filter(|&(t, &l)| post.argmax_row(t) != l)
        .count();
    Ok((wrong, labels.len()))
}

/// Frame-level phoneme error rate of `model` on natural speech.
pub fn phoneme_error_rate(model: &ModelState, records: &[&UtteranceRecord]) -> Result<f64> {
    let (mut wrong, mut total) = (0, 0);
    for r in records {
        let labels = r
            .labels()
            .ok_or_else(|| Error::data(format!("utterance {} has no transcript", r.utterance_id)))?;
        let (w, n) = frame_error_rate(model, &r.mel, &labels)?;
        wrong += w;
        total += n;
    }
    if total == 0 {
        return Err(Error::data("no frames to score"));
    }
    Ok(wrong as f64 / total as f64)
}

/// The five ablation setups.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Setup {
    N,
    A,
    B,
    C,
    D,
}

impl Setup {
    pub const ALL: [Setup; 5] = [Setup::N, Setup::A, Setup::B, Setup::C, Setup::D];

    pub fn name(self) -> &'static str {
        match self {
            Setup::N => "N",
            Setup::A => "A",
            Setup::B => "B",
            Setup::C => "C",
            Setup::D => "D",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Setup::N => "full system",
            Setup::A => "N without welding",
            Setup::B => "N without the cycle term in adaptation",
            Setup::C => "N trained without the text decoder",
            Setup::D => "N without A, B and C",
        }
    }

    /// Configuration keys this setup changes relative to N.
    pub fn toggles(self) -> &'static [&'static str] {
        match self {
            Setup::N => &[],
            Setup::A => &["stage.weld_enabled"],
            Setup::B => &["stage.adapt_cycle"],
            Setup::C => &["arch.text_decoder"],
            Setup::D => &["stage.weld_enabled", "stage.adapt_cycle", "arch.text_decoder"],
        }
    }

    pub fn config(self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut c = base.clone();
        for key in self.toggles() {
            match *key {
                "stage.weld_enabled" => c.stage.weld_enabled = !base.stage.weld_enabled,
                "stage.adapt_cycle" => c.stage.adapt_cycle = !base.stage.adapt_cycle,
                "arch.text_decoder" => c.arch.text_decoder = !base.arch.text_decoder,
                _ => unreachable!("toggle list and config fields agree"),
            }
        }
        c
    }
}

/// Checks that every setup's configuration differs from N's in exactly its
/// declared keys.
pub fn audit_ablation(configs: &[(Setup, ExperimentConfig)]) -> Result<()> {
    let base = configs
        .iter()
        .find(|(s, _)| *s == Setup::N)
        .map(|(_, c)| c)
        .ok_or_else(|| Error::config("ablation matrix lacks setup N"))?;
    for (s, c) in configs {
        let mut diff = base.diff(c);
        let mut want: Vec<&str> = s.toggles().to_vec();
        diff.sort_unstable();
        want.sort_unstable();
        if diff != want {
            return Err(Error::config(format!(
                "setup {} differs from N in {diff:?}, expected {want:?}",
                s.name()
            )));
        }
    }
    Ok(())
}

/// Data of an ablation run.
pub struct AblationData<'a> {
    pub n_phonemes: usize,
    /// Transcribed multi-speaker training data.
    pub train: Vec<&'a UtteranceRecord>,
    /// Target-speaker adaptation slice (transcripts unused).
    pub adapt: Vec<&'a UtteranceRecord>,
    /// Transcribed target-speaker utterances outside the adaptation slice.
    pub eval: Vec<&'a UtteranceRecord>,
    /// Transcribed utterances of other speakers to convert.
    pub vc_sources: Vec<&'a UtteranceRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub setup: Setup,
    /// Judge-recognizer error on synthesized speech.
    pub per_tts: f64,
    /// Judge-recognizer error on converted speech.
    pub per_vc: f64,
    /// Mel MAE of synthesized speech against the target's own rendition.
    pub mel_mae: f64,
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub configs: Vec<(Setup, ExperimentConfig)>,
}

impl AblationTable {
    pub fn row(&self, s: Setup) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.setup == s)
    }

    /// Tab-separated table with a header row.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("setup\tdescription\tper_tts\tper_vc\tmel_mae\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}",
                r.setup.name(),
                r.setup.description(),
                r.per_tts,
                r.per_vc,
                r.mel_mae
            );
        }
        s
    }
}

/// Trains the two initial models (with and without text decoder), clones
/// the target speaker with every setup, and scores each result with one
/// shared recognizer: the text decoder and speech encoder of N's initial
/// model. `progress` receives a line per finished stage.
pub fn run_ablation_matrix(
    data: &AblationData<'_>,
    base: &ExperimentConfig,
    progress: &mut dyn FnMut(&str),
) -> Result<AblationTable> {
    if !base.arch.text_decoder || !base.stage.weld_enabled || !base.stage.adapt_cycle {
        return Err(Error::config(
            "the ablation base configuration must enable every component",
        ));
    }
    let configs: Vec<(Setup, ExperimentConfig)> = Setup::ALL.iter().map(|&s| (s, s.config(base))).collect();
    audit_ablation(&configs)?;

    let mut initial = Vec::new();
    for with_tdec in [true, false] {
        let cfg = if with_tdec { &configs[0].1 } else { &configs[3].1 };
        let (m, v) = initialize(&data.train, data.n_phonemes, cfg)?;
        let out = train_initial(&m, &v, &data.train, &cfg.weights, &cfg.stage)?;
        progress(&format!(
            "trained initial model ({} text decoder) for {} epochs",
            if with_tdec { "with" } else { "without" },
            out.curves.len()
        ));
        initial.push((with_tdec, out.model, out.vocoder));
    }
    let judge = initial[0].1.clone();

    let mut rows = Vec::new();
    for (setup, cfg) in &configs {
        let (_, model, vocoder) = initial
            .iter()
            .find(|(t, _, _)| *t == cfg.arch.text_decoder)
            .expect("both initial models exist");
        let cloned = clone_speaker(
            model,
            vocoder,
            &data.adapt,
            AdaptMode::Unsupervised,
            &cfg.weights,
            &cfg.stage,
        )?;
        let (mut wrong, mut total, mut mae_sum) = (0, 0, 0.0);
        for (i, r) in data.eval.iter().enumerate() {
            let t = r
                .transcript
                .as_ref()
                .ok_or_else(|| Error::data(format!("utterance {} has no transcript", r.utterance_id)))?;
            let mel = infer_tts_mel(&cloned.model, t, &cfg.stage, cfg.stage.seed.wrapping_add(i as u64))?;
            let (w, n) = frame_error_rate(&judge, &mel, &t.upsample())?;
            wrong += w;
            total += n;
            mae_sum += mel.mae(&r.mel)?;
        }
        let (mut vw, mut vn) = (0, 0);
        for r in &data.vc_sources {
            let labels = r
                .labels()
                .ok_or_else(|| Error::data(format!("utterance {} has no transcript", r.utterance_id)))?;
            let mel = infer_vc_mel(&cloned.model, &r.mel)?;
            let (w, n) = frame_error_rate(&judge, &mel, &labels)?;
            vw += w;
            vn += n;
        }
        let row = AblationRow {
            setup: *setup,
            per_tts: wrong as f64 / total.max(1) as f64,
            per_vc: vw as f64 / vn.max(1) as f64,
            mel_mae: mae_sum / data.eval.len().max(1) as f64,
        };
        progress(&format!(
            "setup {}: per_tts={:.4} per_vc={:.4} mel_mae={:.4}",
            setup.name(),
            row.per_tts,
            row.per_vc,
            row.mel_mae
        ));
        rows.push(row);
    }
    Ok(AblationTable { rows, configs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curve_log_rejects_repeated_steps() {
        let mut log = CurveLog::new(Vec::new());
        let mut r = LossReport::new(3);
        r.set("tts", 0.5);
        curve_log(&mut log, &r).unwrap();
        assert!(curve_log(&mut log, &r).is_err());
        r.step = 4;
        curve_log(&mut log, &r).unwrap();
        let text = String::from_utf8(log.into_inner()).unwrap();
        assert_eq!(parse_curves(&text).unwrap().len(), 2);
        assert!(parse_curves("step=2 a=1\nstep=1 a=1\n").is_err());
    }

    #[test]
    fn setup_d_combines_a_b_c() {
        let base = ExperimentConfig::default();
        let d = Setup::D.config(&base);
        let mut abc = Setup::A.config(&base);
        abc.stage.adapt_cycle = Setup::B.config(&base).stage.adapt_cycle;
        abc.arch.text_decoder = Setup::C.config(&base).arch.text_decoder;
        assert_eq!(d, abc);
        let configs: Vec<_> = Setup::ALL.iter().map(|&s| (s, s.config(&base))).collect();
        audit_ablation(&configs).unwrap();
        let mut bad = configs.clone();
        bad[1].1.stage.seed += 1;
        assert!(audit_ablation(&bad).is_err());
    }
}
