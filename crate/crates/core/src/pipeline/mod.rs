//! Training, cloning and synthesis stages.
//!
//! Initial multi-speaker training, the unsupervised and supervised step-1
//! adaptations, vocoder adaptation, welding, and TTS / VC inference. Every
//! stage is a deterministic function of its inputs and configuration.

pub mod config;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use config::{ArchOptions, ExperimentConfig, StageConfig, PRESETS};

use crate::error::{Error, Result};
use crate::features::{MelMatrix, PhonemeTranscript, UtteranceRecord, WaveCodes};
use crate::graph::{Graph, Trainable, Var};
use crate::losses::{self, LossReport, LossWeights};
use crate::net::{
    reparameterize, speech_decoder_forward, speech_decoder_graph, speech_encoder_forward, speech_encoder_graph,
    standard_normal, text_decoder_graph, text_encoder_forward, text_encoder_graph, ArchManifest, LLEDistribution,
    ModelDims, ModelState, Noise, Pass, PastMel, StageFlags,
};
use crate::optim::{Adam, GradAccumulator};
use crate::tensor::Mat;
use crate::vocoder::{
    adapt_vocoder, crop_loss_graph, vocoder_epoch, vocoder_generate, Crop, StageRngs, VocoderConfig, VocoderState,
    VocoderTrainOptions,
};

/// Parameter prefixes of the four text-speech networks.
pub const TEXT_ENCODER: &str = "tenc.";
pub const SPEECH_ENCODER: &str = "senc.";
pub const SPEECH_DECODER: &str = "sdec.";
pub const TEXT_DECODER: &str = "tdec.";
pub const VOCODER: &str = "voc.";

/// Per-band mean and standard deviation of every mel frame in `records`.
pub fn mel_statistics(records: &[&UtteranceRecord]) -> Result<(Vec<f64>, Vec<f64>)> {
    let first = records
        .first()
        .ok_or_else(|| Error::data("no records for mel statistics"))?;
    let d = first.mel.dims();
    let mut sum = vec![0.0; d];
    let mut sq = vec![0.0; d];
    let mut n = 0usize;
    for r in records {
        if r.mel.dims() != d {
            return Err(Error::data(format!(
                "{} has {} mel bands, expected {d}",
                r.utterance_id,
                r.mel.dims()
            )));
        }
        for t in 0..r.mel.frames() {
            for c in 0..d {
                let v = r.mel.get(t, c) as f64;
                sum[c] += v;
                sq[c] += v * v;
            }
        }
        n += r.mel.frames();
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / n as f64 - m * m).max(0.0).sqrt().max(1e-3))
        .collect();
    Ok((mean, std))
}

/// Sorted distinct speaker ids.
pub fn speaker_ids(records: &[&UtteranceRecord]) -> Vec<String> {
    let mut s: Vec<String> = records.iter().map(|r| r.speaker_id.clone()).collect();
    s.sort();
    s.dedup();
    s
}

/// Fresh text-speech model and vocoder sized for `records`, with
/// normalisation statistics taken from them.
pub fn initialize(
    records: &[&UtteranceRecord],
    n_phonemes: usize,
    cfg: &ExperimentConfig,
) -> Result<(ModelState, VocoderState)> {
    cfg.validate()?;
    let speakers = speaker_ids(records);
    let (mean, std) = mel_statistics(records)?;
    let dims = ModelDims {
        phonemes: n_phonemes,
        mel: cfg.features.n_mels,
        latent: cfg.arch.latent,
        channels: cfg.arch.channels,
        speakers: speakers.len(),
    };
    let mut manifest = ArchManifest::standard(dims);
    if !cfg.arch.text_decoder {
        manifest = manifest.without(TEXT_DECODER);
    }
    let mut model = ModelState::new(manifest, cfg.stage.seed)?;
    model.speakers = speakers.clone();
    model.frame_shift_ms = cfg.features.shift_ms as f32;
    model.window_ms = cfg.features.window_ms as f32;
    model.set_normalization(&mean, &std)?;

    let vcfg = VocoderConfig {
        mel_dims: cfg.features.n_mels,
        classes: 1 << cfg.features.bits,
        channels: cfg.arch.vocoder_channels,
        skip_channels: cfg.arch.vocoder_skip,
        dilations: cfg.arch.vocoder_dilations.clone(),
        speakers: speakers.len(),
        samples_per_frame: cfg.features.samples_per_frame()?,
        sample_rate: cfg.features.sample_rate,
    };
    let mut vocoder = VocoderState::new(vcfg, cfg.stage.seed.wrapping_add(1))?;
    vocoder.speakers = speakers;
    vocoder.set_normalization(&mean, &std)?;
    Ok((model, vocoder))
}

/// Splits each speaker's utterances: every `every`-th goes to validation.
pub fn split_validation<'a>(
    records: &[&'a UtteranceRecord],
    every: usize,
) -> (Vec<&'a UtteranceRecord>, Vec<&'a UtteranceRecord>) {
    let mut count: BTreeMap<&str, usize> = BTreeMap::new();
    let (mut train, mut valid) = (Vec::new(), Vec::new());
    for &r in records {
        let c = count.entry(r.speaker_id.as_str()).or_insert(0);
        *c += 1;
        if every > 0 && (*c).is_multiple_of(every) {
            valid.push(r);
        } else {
            train.push(r);
        }
    }
    (train, valid)
}

/// Vocoder training options of a stage configuration.
pub fn vocoder_options(cfg: &StageConfig) -> VocoderTrainOptions {
    VocoderTrainOptions {
        learning_rate: cfg.learning_rate,
        batch_size: cfg.batch_size,
        crop_frames: cfg.crop_frames,
        seed: cfg.seed,
    }
}

fn require(flags: StageFlags, needed: StageFlags, what: &str) -> Result<()> {
    if flags.contains(needed) {
        Ok(())
    } else {
        Err(Error::pipeline(format!(
            "{what} lacks the {} stage marker",
            needed.name()
        )))
    }
}

fn transcript_of(rec: &UtteranceRecord) -> Result<&PhonemeTranscript> {
    rec.transcript
        .as_ref()
        .ok_or_else(|| Error::data(format!("utterance {} has no transcript", rec.utterance_id)))
}

/// `μ + σ ⊙ ε` with ε drawn from `rng`, or the mean when `rng` is `None`.
fn sample_latent(g: &mut Graph, mu: Var, std: Var, rng: Option<&mut ChaCha8Rng>) -> Var {
    match rng {
        Some(rng) => {
            let (r, c) = g.shape(mu);
            let eps = g.constant(standard_normal(r, c, rng));
            let s = g.mul(std, eps);
            g.add(mu, s)
        }
        None => mu,
    }
}

fn constant_latent(dist: &LLEDistribution, rng: &mut ChaCha8Rng) -> Result<Mat> {
    let eps = standard_normal(dist.frames(), dist.dims(), rng);
    Ok(reparameterize(dist, Noise::Draw(&eps))?.z)
}

/// Builds the initial-training objective of one utterance. With `rngs`
/// the pass is stochastic (dropout, sampled latents); without, it is the
/// deterministic evaluation used for validation.
fn train_objective(
    g: &mut Graph,
    st: &ModelState,
    rec: &UtteranceRecord,
    w: &LossWeights,
    rngs: Option<(&mut ChaCha8Rng, &mut ChaCha8Rng)>,
) -> Result<(Var, LossReport)> {
    let t = transcript_of(rec)?;
    let labels = t.upsample();
    let speaker = st.speaker_index(&rec.speaker_id);
    let y = g.constant(rec.mel.to_mat());
    let (mut dropout, mut noise) = match rngs {
        Some((d, n)) => (Some(d), Some(n)),
        None => (None, None),
    };
    macro_rules! pass {
        () => {
            match dropout.as_deref_mut() {
                Some(r) => Pass::Train(r),
                None => Pass::Eval,
            }
        };
    }
    let (mu_t, sd_t) = text_encoder_graph(g, st, t, &mut pass!())?;
    let (mu_s, sd_s) = speech_encoder_graph(g, st, y, &mut pass!())?;
    let z_t = sample_latent(g, mu_t, sd_t, noise.as_deref_mut());
    let z_s = sample_latent(g, mu_s, sd_s, noise);
    let y_tts = speech_decoder_graph(g, st, z_t, speaker, y, &mut pass!())?;
    let tts = g.mae(y_tts, y);
    let y_sts = speech_decoder_graph(g, st, z_s, speaker, y, &mut pass!())?;
    let sts = g.mae(y_sts, y);
    let (stt, ttt) = if st.manifest.has_text_decoder() {
        let p = text_decoder_graph(g, st, z_s, &mut pass!())?;
        let stt = g.frame_ce(p, &labels);
        let p = text_decoder_graph(g, st, z_t, &mut pass!())?;
        (Some(stt), Some(g.frame_ce(p, &labels)))
    } else {
        (None, None)
    };
    let (tie, fwd, bwd) = losses::graph::symmetric_kld(g, (mu_t, sd_t), (mu_s, sd_s));
    let goals = losses::graph::goals(g, tts, sts, stt, w);
    let total = losses::graph::train(g, goals, tie, w);

    let mut r = LossReport::new(0);
    r.set("tts", g.value(tts).item());
    r.set("sts", g.value(sts).item());
    if let (Some(a), Some(b)) = (stt, ttt) {
        r.set("stt", g.value(a).item());
        r.set("ttt", g.value(b).item());
    }
    r.set("tie_fwd", g.value(fwd).item());
    r.set("tie_bwd", g.value(bwd).item());
    r.set("tie", g.value(tie).item());
    r.set("goals", g.value(goals).item());
    r.set("train", g.value(total).item());
    Ok((total, r))
}

/// Result of [`train_initial`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelState,
    pub vocoder: VocoderState,
    /// One report per epoch: mean training terms (including the unoptimised
    /// `ttt`) plus `valid`, the validation objective.
    pub curves: Vec<LossReport>,
    pub vocoder_curves: Vec<LossReport>,
    /// Epoch whose parameters were kept.
    pub best_epoch: u64,
}

/// Mean validation objective with dropout off and latents at their means.
pub fn validation_loss(st: &ModelState, records: &[&UtteranceRecord], w: &LossWeights) -> Result<f64> {
    let mut total = 0.0;
    for rec in records {
        let mut g = Graph::inference();
        let (l, _) = train_objective(&mut g, st, rec, w, None)?;
        total += g.value(l).item();
    }
    Ok(total / records.len().max(1) as f64)
}

/// Initial multi-speaker training of the text-speech networks on the joint
/// objective with early stopping on a held-out split, followed by separate
/// vocoder training on natural codes.
pub fn train_initial(
    model: &ModelState,
    vocoder: &VocoderState,
    records: &[&UtteranceRecord],
    w: &LossWeights,
    cfg: &StageConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    w.validate()?;
    if let Some(r) = records.iter().find(|r| r.transcript.is_none()) {
        return Err(Error::data(format!("utterance {} has no transcript", r.utterance_id)));
    }
    if speaker_ids(records).len() < 2 {
        return Err(Error::data("initial training needs at least two speakers"));
    }
    for r in records {
        if model.speaker_index(&r.speaker_id).is_none() {
            return Err(Error::data(format!(
                "speaker {} is not known to the model",
                r.speaker_id
            )));
        }
    }
    let (train, valid) = split_validation(records, cfg.validation_every);
    let mut st = model.clone();
    let mut rngs = StageRngs::new(cfg.seed);
    let mut opt = Adam::new(cfg.learning_rate);
    let mut curves = Vec::new();
    let mut best = (f64::INFINITY, st.params.clone(), 0u64);
    let mut since_best = 0;
    for epoch in 1..=cfg.train_epochs as u64 {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rngs.shuffle);
        let mut report = LossReport::new(epoch);
        for batch in order.chunks(cfg.batch_size) {
            let mut acc = GradAccumulator::new();
            for &i in batch {
                let mut g = Graph::new(Trainable::All);
                let (l, r) = train_objective(&mut g, &st, train[i], w, Some((&mut rngs.dropout, &mut rngs.noise)))?;
                report.accumulate(&r, 1.0 / train.len() as f64);
                acc.add(g.backward(l).into_params());
            }
            opt.step(&mut st.params, &acc.mean());
            st.step += 1;
        }
        if !report.is_finite() {
            return Err(Error::pipeline(format!("training diverged at epoch {epoch}")));
        }
        let score = if valid.is_empty() {
            report.get("train").unwrap_or(f64::INFINITY)
        } else {
            let v = validation_loss(&st, &valid, w)?;
            report.set("valid", v);
            v
        };
        curves.push(report);
        if score < best.0 {
            best = (score, st.params.clone(), epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.early_stop_patience {
                break;
            }
        }
    }
    if best.2 > 0 {
        st.params = best.1;
    }
    st.stages.insert(StageFlags::TRAINED);

    let mut voc = vocoder.clone();
    let mut vrngs = StageRngs::new(cfg.seed);
    let mut vopt = Adam::new(cfg.learning_rate);
    let opts = vocoder_options(cfg);
    let mut vocoder_curves = Vec::new();
    for epoch in 1..=cfg.vocoder_epochs as u64 {
        let v = vocoder_epoch(&mut voc, records, &opts, &mut vrngs, &mut vopt)?;
        let mut r = LossReport::new(epoch);
        r.set("voc", v);
        vocoder_curves.push(r);
    }
    voc.stages.insert(StageFlags::TRAINED);
    Ok(TrainOutcome {
        model: st,
        vocoder: voc,
        curves,
        vocoder_curves,
        best_epoch: best.2,
    })
}

/// Digests of the networks a stage must leave untouched.
fn digests(st: &ModelState, prefixes: &[&str]) -> Vec<[u8; 32]> {
    prefixes.iter().map(|p| st.params.digest(p)).collect()
}

fn check_frozen(before: &[[u8; 32]], after: &ModelState, prefixes: &[&str]) -> Result<()> {
    if digests(after, prefixes) != before {
        return Err(Error::pipeline(format!("a frozen network among {prefixes:?} changed")));
    }
    Ok(())
}

fn non_empty(slice: &[&UtteranceRecord], what: &str) -> Result<()> {
    if slice.is_empty() {
        return Err(Error::data(format!("{what} slice is empty")));
    }
    Ok(())
}

/// Unsupervised step 1: removes the speaker biases and fine-tunes the rest
/// of the speech decoder on reconstruction plus (optionally) the cycle
/// term. The speech encoder only supplies latents and re-encodes the
/// reconstruction; encoders and text decoder stay frozen.
pub fn clone_unsupervised_step1(
    model: &ModelState,
    slice: &[&UtteranceRecord],
    w: &LossWeights,
    cfg: &StageConfig,
) -> Result<(ModelState, Vec<LossReport>)> {
    cfg.validate()?;
    non_empty(slice, "adaptation")?;
    require(model.stages, StageFlags::TRAINED, "model")?;
    let frozen = [TEXT_ENCODER, SPEECH_ENCODER, TEXT_DECODER];
    let before = digests(model, &frozen);
    let mut st = model.clone();
    st.remove_speaker_biases();
    let natural: Vec<LLEDistribution> = slice
        .iter()
        .map(|r| speech_encoder_forward(&st, &r.mel))
        .collect::<Result<_>>()?;
    let mut rngs = StageRngs::new(cfg.seed);
    let mut opt = Adam::new(cfg.learning_rate);
    let mut reports = Vec::new();
    for epoch in 1..=cfg.adapt_acoustic_epochs as u64 {
        let mut order: Vec<usize> = (0..slice.len()).collect();
        order.shuffle(&mut rngs.shuffle);
        let mut report = LossReport::new(epoch);
        for batch in order.chunks(cfg.batch_size) {
            let mut acc = GradAccumulator::new();
            for &i in batch {
                let mut g = Graph::new(Trainable::prefixes(&[SPEECH_DECODER]));
                let y = g.constant(slice[i].mel.to_mat());
                let z = g.constant(constant_latent(&natural[i], &mut rngs.noise)?);
                let y_hat = speech_decoder_graph(&mut g, &st, z, None, y, &mut Pass::Train(&mut rngs.dropout))?;
                let sts = g.mae(y_hat, y);
                let mut r = LossReport::new(epoch);
                r.set("sts", g.value(sts).item());
                let total = if cfg.adapt_cycle {
                    let (mu_r, sd_r) = speech_encoder_graph(&mut g, &st, y_hat, &mut Pass::Eval)?;
                    let mu_n = g.constant(natural[i].mean.clone());
                    let sd_n = g.constant(natural[i].std.clone());
                    let (cycle, _, _) = losses::graph::symmetric_kld(&mut g, (mu_n, sd_n), (mu_r, sd_r));
                    r.set("cycle", g.value(cycle).item());
                    losses::graph::adapt_unsup(&mut g, sts, cycle, w)
                } else {
                    sts
                };
                r.set("adapt", g.value(total).item());
                report.accumulate(&r, 1.0 / slice.len() as f64);
                acc.add(g.backward(total).into_params());
            }
            opt.step(&mut st.params, &acc.mean());
            st.step += 1;
        }
        reports.push(report);
    }
    check_frozen(&before, &st, &frozen)?;
    st.stages.insert(StageFlags::ADAPTED_AC);
    Ok((st, reports))
}

/// Supervised step 1: removes the decoder's speaker biases and fine-tunes
/// the speech decoder and text encoder on transcribed target speech. The
/// speech encoder and text decoder stay frozen.
pub fn clone_supervised_step1(
    model: &ModelState,
    slice: &[&UtteranceRecord],
    w: &LossWeights,
    cfg: &StageConfig,
) -> Result<(ModelState, Vec<LossReport>)> {
    cfg.validate()?;
    non_empty(slice, "adaptation")?;
    require(model.stages, StageFlags::TRAINED, "model")?;
    for r in slice {
        transcript_of(r)?;
    }
    let frozen = [SPEECH_ENCODER, TEXT_DECODER];
    let before = digests(model, &frozen);
    let mut st = model.clone();
    st.remove_speaker_biases();
    let natural: Vec<LLEDistribution> = slice
        .iter()
        .map(|r| speech_encoder_forward(&st, &r.mel))
        .collect::<Result<_>>()?;
    let mut rngs = StageRngs::new(cfg.seed);
    let mut opt = Adam::new(cfg.learning_rate);
    let mut reports = Vec::new();
    for epoch in 1..=cfg.adapt_acoustic_epochs as u64 {
        let mut order: Vec<usize> = (0..slice.len()).collect();
        order.shuffle(&mut rngs.shuffle);
        let mut report = LossReport::new(epoch);
        for batch in order.chunks(cfg.batch_size) {
            let mut acc = GradAccumulator::new();
            for &i in batch {
                let rec = slice[i];
                let mut g = Graph::new(Trainable::prefixes(&[SPEECH_DECODER, TEXT_ENCODER]));
                let y = g.constant(rec.mel.to_mat());
                let (mu_t, sd_t) =
                    text_encoder_graph(&mut g, &st, transcript_of(rec)?, &mut Pass::Train(&mut rngs.dropout))?;
                let z_t = sample_latent(&mut g, mu_t, sd_t, Some(&mut rngs.noise));
                let z_s = g.constant(constant_latent(&natural[i], &mut rngs.noise)?);
                let y_tts = speech_decoder_graph(&mut g, &st, z_t, None, y, &mut Pass::Train(&mut rngs.dropout))?;
                let tts = g.mae(y_tts, y);
                let y_sts = speech_decoder_graph(&mut g, &st, z_s, None, y, &mut Pass::Train(&mut rngs.dropout))?;
                let sts = g.mae(y_sts, y);
                let mu_s = g.constant(natural[i].mean.clone());
                let sd_s = g.constant(natural[i].std.clone());
                let (tie, fwd, bwd) = losses::graph::symmetric_kld(&mut g, (mu_t, sd_t), (mu_s, sd_s));
                let total = losses::graph::adapt_sup(&mut g, tts, sts, tie, w);
                let mut r = LossReport::new(epoch);
                r.set("tts", g.value(tts).item());
                r.set("sts", g.value(sts).item());
                r.set("tie_fwd", g.value(fwd).item());
                r.set("tie_bwd", g.value(bwd).item());
                r.set("tie", g.value(tie).item());
                r.set("adapt", g.value(total).item());
                report.accumulate(&r, 1.0 / slice.len() as f64);
                acc.add(g.backward(total).into_params());
            }
            opt.step(&mut st.params, &acc.mean());
            st.step += 1;
        }
        reports.push(report);
    }
    check_frozen(&before, &st, &frozen)?;
    st.stages.insert(StageFlags::ADAPTED_AC);
    Ok((st, reports))
}

/// Vocoder half of step 1: bias removal and fine-tuning on natural data.
pub fn clone_vocoder_step1(
    vocoder: &VocoderState,
    slice: &[&UtteranceRecord],
    cfg: &StageConfig,
) -> Result<(VocoderState, Vec<LossReport>)> {
    cfg.validate()?;
    require(vocoder.stages, StageFlags::TRAINED, "vocoder")?;
    let (mut v, reports) = adapt_vocoder(vocoder, slice, cfg.adapt_vocoder_epochs, &vocoder_options(cfg))?;
    v.stages.insert(StageFlags::ADAPTED_VOC);
    Ok((v, reports))
}

/// Per-frame mix-in choices: `true` means the generated frame is used.
pub fn mixin_mask(frames: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    (0..frames).map(|_| rng.gen::<f64>() < rate).collect()
}

/// `generated` where the mask is set, `natural` elsewhere, as a graph node
/// through which gradients reach the generated frames only.
fn mix_frames(g: &mut Graph, generated: Var, natural: &Mat, mask: &[bool]) -> Var {
    let (t, d) = natural.shape();
    let keep = Mat::from_vec(t, d, (0..t * d).map(|i| if mask[i / d] { 1.0 } else { 0.0 }).collect());
    let nat = Mat::from_vec(
        t,
        d,
        natural
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * (1.0 - keep.data()[i]))
            .collect(),
    );
    let k = g.constant(keep);
    let gen = g.mul(generated, k);
    let n = g.constant(nat);
    g.add(gen, n)
}

/// Result of [`weld`].
#[derive(Debug, Clone)]
pub struct WeldOutcome {
    pub model: ModelState,
    pub vocoder: VocoderState,
    /// One report per epoch with mean `sts`, `voc` and `weld`.
    pub reports: Vec<LossReport>,
    /// Conditioning frames taken from the decoder output.
    pub generated_frames: usize,
    pub total_frames: usize,
}

/// Step 2: joint fine-tuning of speech decoder and vocoder. Latents are the
/// speech encoder's means; the decoder reconstructs the target mel and the
/// vocoder is conditioned on a per-frame mix of reconstructed and natural
/// frames. The vocoder consumes the shuffle and crop streams exactly like
/// [`adapt_vocoder`] with the same seed.
pub fn weld(
    model: &ModelState,
    vocoder: &VocoderState,
    slice: &[&UtteranceRecord],
    w: &LossWeights,
    cfg: &StageConfig,
) -> Result<WeldOutcome> {
    cfg.validate()?;
    require(model.stages, StageFlags::ADAPTED_AC, "model")?;
    require(vocoder.stages, StageFlags::ADAPTED_VOC, "vocoder")?;
    non_empty(slice, "welding")?;
    let frozen = [TEXT_ENCODER, SPEECH_ENCODER, TEXT_DECODER];
    let before = digests(model, &frozen);
    let mut st = model.clone();
    let mut voc = vocoder.clone();
    let latents: Vec<Mat> = slice
        .iter()
        .map(|r| Ok(speech_encoder_forward(&st, &r.mel)?.mean))
        .collect::<Result<_>>()?;
    let rf = voc.config.receptive_field();
    let spf = voc.config.samples_per_frame;
    let mut rngs = StageRngs::new(cfg.seed);
    let mut opt = Adam::new(cfg.learning_rate);
    let mut reports = Vec::new();
    let (mut generated, mut total_frames) = (0, 0);
    for epoch in 1..=cfg.weld_epochs as u64 {
        let mut order: Vec<usize> = (0..slice.len()).collect();
        order.shuffle(&mut rngs.shuffle);
        let (mut sts_sum, mut voc_sum, mut weld_sum) = (0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let mut acc = GradAccumulator::new();
            for &i in batch {
                let rec = slice[i];
                if rec.waveform.len() != rec.mel.frames() * spf {
                    return Err(Error::data(format!(
                        "{}: codes do not match mel frames",
                        rec.utterance_id
                    )));
                }
                let crop = Crop::pick(rec.mel.frames(), cfg.crop_frames, spf, rf, &mut rngs.crop);
                let mask = mixin_mask(rec.mel.frames(), cfg.mixin_rate, &mut rngs.mixin);
                generated += mask.iter().filter(|&&m| m).count();
                total_frames += mask.len();

                let mut g = Graph::new(Trainable::prefixes(&[SPEECH_DECODER, VOCODER]));
                let natural = rec.mel.to_mat();
                let y = g.constant(natural.clone());
                let z = g.constant(latents[i].clone());
                let y_hat = speech_decoder_graph(&mut g, &st, z, None, y, &mut Pass::Train(&mut rngs.dropout))?;
                let sts = g.mae(y_hat, y);
                let mixed = mix_frames(&mut g, y_hat, &natural, &mask);
                let vl = crop_loss_graph(&mut g, &voc, &rec.waveform, mixed, &crop, None)?;
                let total = losses::graph::weld(&mut g, sts, vl, w);
                sts_sum += g.value(sts).item();
                voc_sum += g.value(vl).item();
                weld_sum += g.value(total).item();
                acc.add(g.backward(total).into_params());
            }
            opt.step_stores(&mut [&mut st.params, &mut voc.params], &acc.mean());
            st.step += 1;
            voc.step += 1;
        }
        let n = slice.len() as f64;
        let mut r = LossReport::new(epoch);
        r.set("sts", sts_sum / n);
        r.set("voc", voc_sum / n);
        r.set("weld", weld_sum / n);
        reports.push(r);
    }
    check_frozen(&before, &st, &frozen)?;
    st.stages.insert(StageFlags::WELDED);
    voc.stages.insert(StageFlags::WELDED);
    Ok(WeldOutcome {
        model: st,
        vocoder: voc,
        reports,
        generated_frames: generated,
        total_frames,
    })
}

/// How the acoustic step 1 uses the target data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptMode {
    Unsupervised,
    Supervised,
}

/// Result of [`clone_speaker`].
#[derive(Debug, Clone)]
pub struct CloneOutcome {
    pub model: ModelState,
    pub vocoder: VocoderState,
    pub acoustic_reports: Vec<LossReport>,
    pub vocoder_reports: Vec<LossReport>,
    pub weld: Option<WeldOutcome>,
}

/// Step 1 for both networks followed by welding when enabled.
pub fn clone_speaker(
    model: &ModelState,
    vocoder: &VocoderState,
    slice: &[&UtteranceRecord],
    mode: AdaptMode,
    w: &LossWeights,
    cfg: &StageConfig,
) -> Result<CloneOutcome> {
    let (m, acoustic_reports) = match mode {
        AdaptMode::Unsupervised => clone_unsupervised_step1(model, slice, w, cfg)?,
        AdaptMode::Supervised => clone_supervised_step1(model, slice, w, cfg)?,
    };
    let (v, vocoder_reports) = clone_vocoder_step1(vocoder, slice, cfg)?;
    if cfg.weld_enabled {
        let out = weld(&m, &v, slice, w, cfg)?;
        Ok(CloneOutcome {
            model: out.model.clone(),
            vocoder: out.vocoder.clone(),
            acoustic_reports,
            vocoder_reports,
            weld: Some(out),
        })
    } else {
        Ok(CloneOutcome {
            model: m,
            vocoder: v,
            acoustic_reports,
            vocoder_reports,
            weld: None,
        })
    }
}

/// Text-to-mel: latents drawn from the text encoder with σ scaled by
/// `inference_std_scale`, then autoregressive decoding.
pub fn infer_tts_mel(
    model: &ModelState,
    transcript: &PhonemeTranscript,
    cfg: &StageConfig,
    seed: u64,
) -> Result<MelMatrix> {
    let dist = text_encoder_forward(model, transcript)?;
    let z = if cfg.inference_std_scale == 0.0 {
        reparameterize(&dist, Noise::Zero)?
    } else {
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let eps = standard_normal(dist.frames(), dist.dims(), &mut rng).map(|e| e * cfg.inference_std_scale);
        reparameterize(&dist, Noise::Draw(&eps))?
    };
    speech_decoder_forward(model, &z, None, PastMel::Autoregressive)
}

pub fn infer_tts(
    model: &ModelState,
    vocoder: &VocoderState,
    transcript: &PhonemeTranscript,
    cfg: &StageConfig,
    seed: u64,
) -> Result<(MelMatrix, WaveCodes)> {
    let mel = infer_tts_mel(model, transcript, cfg, seed)?;
    let codes = vocoder_generate(vocoder, &mel, None, seed, cfg.vocoder_mode)?;
    Ok((mel, codes))
}

/// Speech-to-mel conversion through the speech encoder's mean latents.
pub fn infer_vc_mel(model: &ModelState, source: &MelMatrix) -> Result<MelMatrix> {
    let dist = speech_encoder_forward(model, source)?;
    let z = reparameterize(&dist, Noise::Zero)?;
    speech_decoder_forward(model, &z, None, PastMel::Autoregressive)
}

pub fn infer_vc(
    model: &ModelState,
    vocoder: &VocoderState,
    source: &MelMatrix,
    cfg: &StageConfig,
) -> Result<(MelMatrix, WaveCodes)> {
    let mel = infer_vc_mel(model, source)?;
    let codes = vocoder_generate(vocoder, &mel, None, cfg.seed, cfg.vocoder_mode)?;
    Ok((mel, codes))
}
