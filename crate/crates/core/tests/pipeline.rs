mod common;

use common::rng;
use nautilus::features::{generate_toy_corpus, Corpus, ToyCorpusSpec, ToySpeaker, UtteranceRecord};
use nautilus::net::{ModelState, StageFlags};
use nautilus::pipeline::{
    clone_speaker, clone_unsupervised_step1, clone_vocoder_step1, infer_tts, infer_tts_mel, initialize, mixin_mask,
    train_initial, vocoder_options, weld, AdaptMode, ExperimentConfig, SPEECH_DECODER, SPEECH_ENCODER, TEXT_DECODER,
    TEXT_ENCODER, VOCODER,
};
use nautilus::vocoder::{adapt_vocoder, VocoderState};
use nautilus::Error;

fn corpus() -> Corpus {
    let spec = ToyCorpusSpec {
        speakers: (0..3).map(ToySpeaker::preset).collect(),
        utterances_per_speaker: 6,
        phonemes_per_utterance: (2, 3),
        duration_frames: (2, 4),
        ..Default::default()
    };
    generate_toy_corpus(&spec, 11).unwrap()
}

fn config() -> ExperimentConfig {
    let mut c = ExperimentConfig::preset("toy").unwrap();
    c.arch.channels = 8;
    c.arch.latent = 4;
    c.arch.vocoder_channels = 4;
    c.arch.vocoder_skip = 4;
    c.arch.vocoder_dilations = vec![1, 2, 4];
    c.stage.train_epochs = 3;
    c.stage.vocoder_epochs = 1;
    c.stage.adapt_acoustic_epochs = 2;
    c.stage.adapt_vocoder_epochs = 2;
    c.stage.weld_epochs = 2;
    c
}

fn train_set(c: &Corpus) -> Vec<&UtteranceRecord> {
    c.records.iter().filter(|r| r.speaker_id != "spk02").collect()
}

fn trained(c: &Corpus, cfg: &ExperimentConfig) -> (ModelState, VocoderState) {
    let train = train_set(c);
    let (m, v) = initialize(&train, c.phonemes.len(), cfg).unwrap();
    let out = train_initial(&m, &v, &train, &cfg.weights, &cfg.stage).unwrap();
    (out.model, out.vocoder)
}

#[test]
fn initial_training_is_deterministic_and_seed_dependent() {
    let c = corpus();
    let cfg = config();
    let (a, va) = trained(&c, &cfg);
    let (b, vb) = trained(&c, &cfg);
    assert_eq!(a.params, b.params);
    assert_eq!(va.params, vb.params);
    assert!(a.stages.contains(StageFlags::TRAINED) && va.stages.contains(StageFlags::TRAINED));
    let mut other = cfg.clone();
    other.stage.seed = 99;
    let (d, _) = trained(&c, &other);
    assert_ne!(a.params, d.params);
}

#[test]
fn early_stopping_keeps_the_best_validation_epoch() {
    let c = corpus();
    let mut cfg = config();
    cfg.stage.train_epochs = 6;
    cfg.stage.early_stop_patience = 2;
    cfg.stage.validation_every = 3;
    let train = train_set(&c);
    let (m, v) = initialize(&train, c.phonemes.len(), &cfg).unwrap();
    let out = train_initial(&m, &v, &train, &cfg.weights, &cfg.stage).unwrap();
    let valid: Vec<f64> = out.curves.iter().map(|r| r.get("valid").unwrap()).collect();
    let best = valid.iter().copied().fold(f64::INFINITY, f64::min);
    assert_eq!(valid[out.best_epoch as usize - 1], best);
    assert!(out
        .curves
        .iter()
        .all(|r| r.get("ttt").is_some() && r.get("tie").is_some()));
    assert_eq!(out.vocoder_curves.len(), cfg.stage.vocoder_epochs);
}

#[test]
fn initial_training_rejects_bad_data() {
    let c = corpus();
    let cfg = config();
    let train = train_set(&c);
    let (m, v) = initialize(&train, c.phonemes.len(), &cfg).unwrap();
    let one: Vec<&UtteranceRecord> = c.by_speaker("spk00");
    assert!(matches!(
        train_initial(&m, &v, &one, &cfg.weights, &cfg.stage),
        Err(Error::Data(_))
    ));
    let mut bare: Vec<UtteranceRecord> = train.iter().map(|r| (*r).clone()).collect();
    bare[0].transcript = None;
    let refs: Vec<&UtteranceRecord> = bare.iter().collect();
    assert!(train_initial(&m, &v, &refs, &cfg.weights, &cfg.stage).is_err());
}

#[test]
fn stages_enforce_their_order() {
    let c = corpus();
    let cfg = config();
    let train = train_set(&c);
    let (m, v) = initialize(&train, c.phonemes.len(), &cfg).unwrap();
    let slice = c.by_speaker("spk02");
    let e = clone_unsupervised_step1(&m, &slice, &cfg.weights, &cfg.stage).unwrap_err();
    assert!(e.to_string().contains("TRAINED"), "{e}");
    let (m, v2) = trained(&c, &cfg);
    let e = weld(&m, &v2, &slice, &cfg.weights, &cfg.stage).unwrap_err();
    assert!(e.to_string().contains("ADAPTED_AC"), "{e}");
    let (adapted, _) = clone_unsupervised_step1(&m, &slice, &cfg.weights, &cfg.stage).unwrap();
    let e = weld(&adapted, &v2, &slice, &cfg.weights, &cfg.stage).unwrap_err();
    assert!(e.to_string().contains("ADAPTED_VOC"), "{e}");
    assert!(clone_vocoder_step1(&v, &slice, &cfg.stage).is_err());
}

#[test]
fn cloning_freezes_declared_networks_and_removes_biases() {
    let c = corpus();
    let cfg = config();
    let (m, v) = trained(&c, &cfg);
    let slice = c.by_speaker("spk02");
    let out = clone_speaker(&m, &v, &slice, AdaptMode::Unsupervised, &cfg.weights, &cfg.stage).unwrap();
    for p in [TEXT_ENCODER, SPEECH_ENCODER, TEXT_DECODER] {
        assert_eq!(m.params.digest(p), out.model.params.digest(p), "{p} changed");
    }
    assert_ne!(m.params.digest(SPEECH_DECODER), out.model.params.digest(SPEECH_DECODER));
    assert_ne!(v.params.digest(VOCODER), out.vocoder.params.digest(VOCODER));
    assert!(!out.model.has_speaker_biases() && !out.vocoder.has_speaker_biases());
    assert!(out.model.stages.contains(StageFlags::WELDED));
    let w = out.weld.as_ref().unwrap();
    assert_eq!(w.reports.len(), cfg.stage.weld_epochs);

    let mut no_weld = cfg.clone();
    no_weld.stage.weld_enabled = false;
    let out = clone_speaker(&m, &v, &slice, AdaptMode::Supervised, &no_weld.weights, &no_weld.stage).unwrap();
    assert!(out.weld.is_none());
    assert!(!out.model.stages.contains(StageFlags::WELDED));
    assert_eq!(m.params.digest(SPEECH_ENCODER), out.model.params.digest(SPEECH_ENCODER));
    assert_ne!(m.params.digest(TEXT_ENCODER), out.model.params.digest(TEXT_ENCODER));
}

#[test]
fn vocoder_adaptation_with_no_epochs_only_removes_biases() {
    let c = corpus();
    let cfg = config();
    let (_, v) = trained(&c, &cfg);
    let slice = c.by_speaker("spk02");
    let (a, reports) = adapt_vocoder(&v, &slice, 0, &vocoder_options(&cfg.stage)).unwrap();
    assert!(reports.is_empty());
    let mut expected = v.clone();
    expected.remove_speaker_biases();
    assert_eq!(a.params, expected.params);
    assert!(adapt_vocoder(&v, &[], 1, &vocoder_options(&cfg.stage)).is_err());
}

#[test]
fn mixin_mask_extremes_and_rate() {
    let mut r = rng(1);
    assert!(mixin_mask(50, 0.0, &mut r).iter().all(|&m| !m));
    assert!(mixin_mask(50, 1.0, &mut r).iter().all(|&m| m));
    let m = mixin_mask(20_000, 0.3, &mut r);
    let frac = m.iter().filter(|&&x| x).count() as f64 / m.len() as f64;
    assert!((frac - 0.3).abs() < 0.02, "{frac}");
}

#[test]
fn weld_with_rate_zero_matches_vocoder_adaptation() {
    let c = corpus();
    let mut cfg = config();
    let (m, v) = trained(&c, &cfg);
    let slice = c.by_speaker("spk02");
    let (adapted, _) = clone_unsupervised_step1(&m, &slice, &cfg.weights, &cfg.stage).unwrap();
    let (v1, _) = clone_vocoder_step1(&v, &slice, &cfg.stage).unwrap();
    cfg.stage.mixin_rate = 0.0;
    cfg.stage.batch_size = slice.len();
    let w = weld(&adapted, &v1, &slice, &cfg.weights, &cfg.stage).unwrap();
    let (_, r) = adapt_vocoder(&v1, &slice, 1, &vocoder_options(&cfg.stage)).unwrap();
    assert_eq!(w.generated_frames, 0);
    assert_eq!(w.reports[0].get("voc"), r[0].get("voc"));
}

#[test]
fn tts_inference_is_seeded() {
    let c = corpus();
    let cfg = config();
    let (m, v) = trained(&c, &cfg);
    let slice = c.by_speaker("spk02");
    let out = clone_speaker(&m, &v, &slice, AdaptMode::Unsupervised, &cfg.weights, &cfg.stage).unwrap();
    let t = c.records[0].transcript.clone().unwrap();
    let a = infer_tts(&out.model, &out.vocoder, &t, &cfg.stage, 5).unwrap();
    let b = infer_tts(&out.model, &out.vocoder, &t, &cfg.stage, 5).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.0.frames(), t.frames());
    assert_eq!(a.1.len(), t.frames() * slice[0].samples_per_frame());
    let d = infer_tts_mel(&out.model, &t, &cfg.stage, 6).unwrap();
    assert_ne!(a.0, d);
    let mut exact = cfg.stage.clone();
    exact.inference_std_scale = 0.0;
    assert_eq!(
        infer_tts_mel(&out.model, &t, &exact, 1).unwrap(),
        infer_tts_mel(&out.model, &t, &exact, 2).unwrap()
    );
}

#[test]
fn ablation_toggles_reach_the_model() {
    let c = corpus();
    let mut cfg = config();
    cfg.arch.text_decoder = false;
    let train = train_set(&c);
    let (m, _) = initialize(&train, c.phonemes.len(), &cfg).unwrap();
    assert!(!m.has_block(TEXT_DECODER));
    assert!(m.has_block(TEXT_ENCODER));
}
