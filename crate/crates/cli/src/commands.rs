//! Command implementations. Each command reads earlier run directories,
//! writes into its own locked output directory and finishes with the manifest.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use nautilus::diagnostics::{
    dump_lle, lle_compare, phoneme_error_rate, read_curves, run_ablation_matrix, write_curves, AblationData, Encoder,
};
use nautilus::features::{
    generate_toy_corpus, load_corpus, mu_law_decode, parse_lab, read_mel_file, read_phonemes, save_corpus,
    write_codes_file, write_mel_file, Corpus, MelMatrix, UtteranceRecord, WaveCodes,
};
use nautilus::losses::LossReport;
use nautilus::net::{ArchManifest, ModelState, StageFlags};
use nautilus::pipeline::{
    self, clone_supervised_step1, clone_unsupervised_step1, clone_vocoder_step1, infer_tts, infer_vc, initialize,
    train_initial, ExperimentConfig,
};
use nautilus::vocoder::VocoderState;

use crate::rundir::{build_config, read_config, OutDir, CONFIG_FILE, MODEL_FILE, PHONEMES_FILE, VOCODER_FILE};
use crate::toyspec::parse_toy_spec;
use crate::{
    AdaptArgs, DiagnoseArgs, EpochPreset, Mode, PrepareArgs, TargetArgs, TrainArgs, TtsArgs, VcArgs, WeldArgs,
};

const ARCH_FILE: &str = "architecture.txt";

fn summary(corpus: &Corpus) -> String {
    format!(
        "{} speakers, {} utterances, {:.2} minutes",
        corpus.speakers().len(),
        corpus.records.len(),
        corpus.seconds() / 60.0
    )
}

pub fn prepare_data(a: PrepareArgs, seed: Option<u64>) -> Result<()> {
    if let Some(dir) = a.import {
        let corpus = load_corpus(&dir)?;
        if corpus.records.is_empty() {
            bail!("{} contains no utterances", dir.display());
        }
        println!("{}: {}", dir.display(), summary(&corpus));
        return Ok(());
    }
    let spec_arg = a.toy_spec.expect("clap enforces one source");
    let out = a.out.ok_or_else(|| anyhow!("--out is required with --toy-spec"))?;
    let text = if spec_arg == "default" {
        String::new()
    } else {
        fs::read_to_string(&spec_arg).with_context(|| format!("reading {spec_arg}"))?
    };
    let desc = parse_toy_spec(&text).with_context(|| format!("in toy spec {spec_arg}"))?;
    let seed = seed.or(desc.seed).unwrap_or(0);
    let corpus = generate_toy_corpus(&desc.spec, seed)?;
    let dir = OutDir::acquire(&out)?;
    save_corpus(&corpus, dir.root())?;
    dir.finish()?;
    println!("{}: {}", out.display(), summary(&corpus));
    Ok(())
}

fn load_nonempty(dir: &Path) -> Result<Corpus> {
    let c = load_corpus(dir).with_context(|| format!("loading corpus {}", dir.display()))?;
    if c.records.is_empty() {
        bail!("corpus {} is empty", dir.display());
    }
    Ok(c)
}

fn select<'a>(corpus: &'a Corpus, speakers: &[String]) -> Result<Vec<&'a UtteranceRecord>> {
    if speakers.is_empty() {
        return Ok(corpus.records.iter().collect());
    }
    let mut out = Vec::new();
    for s in speakers {
        let recs = corpus.by_speaker(s);
        if recs.is_empty() {
            bail!("speaker {s} has no utterances in the corpus");
        }
        out.extend(recs);
    }
    Ok(out)
}

fn save_curves(dir: &OutDir, name: &str, reports: &[LossReport]) -> Result<()> {
    write_curves(&dir.path(name), reports)?;
    Ok(())
}

fn save_run(
    dir: &OutDir,
    cfg: &ExperimentConfig,
    phonemes: &[String],
    model: &ModelState,
    voc: &VocoderState,
) -> Result<()> {
    dir.write(CONFIG_FILE, cfg.to_text().as_bytes())?;
    dir.write(ARCH_FILE, model.manifest.to_text().as_bytes())?;
    dir.write(PHONEMES_FILE, (phonemes.join("\n") + "\n").as_bytes())?;
    model.save(&dir.path(MODEL_FILE))?;
    voc.save(&dir.path(VOCODER_FILE))?;
    Ok(())
}

pub fn train(a: TrainArgs, seed: Option<u64>) -> Result<()> {
    let cfg = build_config(
        None,
        a.config.config.as_deref(),
        &a.config.preset,
        &a.config.overrides,
        seed,
    )?;
    let corpus = load_nonempty(&a.corpus)?;
    let main = select(&corpus, &a.speakers)?;
    let warmup_corpus = a.warmup_corpus.as_deref().map(load_nonempty).transpose()?;
    if let Some(w) = &warmup_corpus {
        if w.phonemes != corpus.phonemes {
            bail!("warm-up and main corpora use different phoneme inventories");
        }
    }
    let warmup: Vec<&UtteranceRecord> = warmup_corpus.iter().flat_map(|c| c.records.iter()).collect();
    let all: Vec<&UtteranceRecord> = warmup.iter().chain(main.iter()).copied().collect();
    let dir = OutDir::acquire(&a.out)?;
    let (mut model, mut voc) = initialize(&all, corpus.phonemes.len(), &cfg)?;
    if !warmup.is_empty() {
        let out = train_initial(&model, &voc, &warmup, &cfg.weights, &cfg.stage)?;
        eprintln!("warm-up: {} epochs, best {}", out.curves.len(), out.best_epoch);
        save_curves(&dir, "warmup_curves.txt", &out.curves)?;
        save_curves(&dir, "warmup_vocoder_curves.txt", &out.vocoder_curves)?;
        (model, voc) = (out.model, out.vocoder);
    }
    let out = train_initial(&model, &voc, &main, &cfg.weights, &cfg.stage)?;
    eprintln!("training: {} epochs, best {}", out.curves.len(), out.best_epoch);
    save_curves(&dir, "curves.txt", &out.curves)?;
    save_curves(&dir, "vocoder_curves.txt", &out.vocoder_curves)?;
    save_run(&dir, &cfg, &corpus.phonemes, &out.model, &out.vocoder)?;
    dir.finish()
}

/// A previous run directory.
struct Run {
    cfg: ExperimentConfig,
    phonemes: Vec<String>,
    model: ModelState,
    vocoder: VocoderState,
}

fn load_run(dir: &Path) -> Result<Run> {
    let cfg = read_config(dir)?;
    let arch_path = dir.join(ARCH_FILE);
    let arch_text = fs::read_to_string(&arch_path).with_context(|| format!("reading {}", arch_path.display()))?;
    let manifest = ArchManifest::parse(&arch_text).with_context(|| format!("in {}", arch_path.display()))?;
    let model = ModelState::load(&dir.join(MODEL_FILE), Some(&manifest))?;
    let vocoder = VocoderState::load(&dir.join(VOCODER_FILE), None)?;
    let phonemes = read_phonemes(&dir.join(PHONEMES_FILE))?;
    Ok(Run {
        cfg,
        phonemes,
        model,
        vocoder,
    })
}

fn require(stages: StageFlags, marker: StageFlags, what: &str) -> Result<()> {
    if !stages.contains(marker) {
        bail!("{what} lacks the {} stage marker (has: {stages})", marker.name());
    }
    Ok(())
}

fn target_slice<'a>(corpus: &'a Corpus, t: &TargetArgs) -> Result<Vec<&'a UtteranceRecord>> {
    let mut recs = corpus.by_speaker(&t.target);
    if recs.is_empty() {
        bail!(
            "target speaker {} has no utterances in {}",
            t.target,
            t.corpus.display()
        );
    }
    if let Some(n) = t.utterances {
        recs.truncate(n);
    }
    Ok(recs)
}

pub fn adapt(a: AdaptArgs, seed: Option<u64>) -> Result<()> {
    let run = load_run(&a.target.model)?;
    require(run.model.stages, StageFlags::TRAINED, "model")?;
    require(run.vocoder.stages, StageFlags::TRAINED, "vocoder")?;
    let mut cfg = build_config(Some(&a.target.model), None, "", &a.target.overrides, seed)?;
    if let Some(p) = a.epochs_preset {
        cfg.apply_epoch_preset(match p {
            EpochPreset::A => "A",
            EpochPreset::B => "B",
        })?;
    }
    let corpus = load_nonempty(&a.target.corpus)?;
    let slice = target_slice(&corpus, &a.target)?;
    let dir = OutDir::acquire(&a.target.out)?;
    let (model, reports) = match a.mode {
        Mode::Unsup => clone_unsupervised_step1(&run.model, &slice, &cfg.weights, &cfg.stage)?,
        Mode::Sup => clone_supervised_step1(&run.model, &slice, &cfg.weights, &cfg.stage)?,
    };
    let (voc, voc_reports) = clone_vocoder_step1(&run.vocoder, &slice, &cfg.stage)?;
    save_curves(&dir, "adapt_curves.txt", &reports)?;
    save_curves(&dir, "adapt_vocoder_curves.txt", &voc_reports)?;
    save_run(&dir, &cfg, &run.phonemes, &model, &voc)?;
    eprintln!("adapted to {} on {} utterances", a.target.target, slice.len());
    dir.finish()
}

pub fn weld(a: WeldArgs, seed: Option<u64>) -> Result<()> {
    let run = load_run(&a.target.model)?;
    require(run.model.stages, StageFlags::ADAPTED_AC, "model")?;
    require(run.vocoder.stages, StageFlags::ADAPTED_VOC, "vocoder")?;
    let cfg = build_config(Some(&a.target.model), None, "", &a.target.overrides, seed)?;
    let corpus = load_nonempty(&a.target.corpus)?;
    let slice = target_slice(&corpus, &a.target)?;
    let dir = OutDir::acquire(&a.target.out)?;
    let out = pipeline::weld(&run.model, &run.vocoder, &slice, &cfg.weights, &cfg.stage)?;
    save_curves(&dir, "weld_curves.txt", &out.reports)?;
    save_run(&dir, &cfg, &run.phonemes, &out.model, &out.vocoder)?;
    eprintln!(
        "welded: {} of {} conditioning frames generated",
        out.generated_frames, out.total_frames
    );
    dir.finish()
}

fn require_cloned(run: &Run) -> Result<()> {
    require(run.model.stages, StageFlags::ADAPTED_AC, "model")?;
    require(run.vocoder.stages, StageFlags::ADAPTED_VOC, "vocoder")?;
    if run.cfg.stage.weld_enabled {
        require(run.model.stages, StageFlags::WELDED, "model")?;
    }
    Ok(())
}

/// Writes mel, codes and a 16-bit PCM rendering of the codes.
fn write_outputs(dir: &OutDir, stem: &str, mel: &MelMatrix, codes: &WaveCodes) -> Result<()> {
    write_mel_file(&dir.path(&format!("{stem}.mel")), mel)?;
    write_codes_file(&dir.path(&format!("{stem}.wav.codes")), codes)?;
    let samples = mu_law_decode(codes)?;
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: codes.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let path = dir.path(&format!("{stem}.wav"));
    let mut w = hound::WavWriter::create(&path, spec).with_context(|| format!("writing {}", path.display()))?;
    for s in samples {
        w.write_sample((s.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16)?;
    }
    w.finalize()?;
    Ok(())
}

pub fn tts(a: TtsArgs, seed: Option<u64>) -> Result<()> {
    let run = load_run(&a.model)?;
    require_cloned(&run)?;
    let seed = seed.unwrap_or(run.cfg.stage.seed);
    let symbols: HashMap<&str, usize> = run.phonemes.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let text = fs::read_to_string(&a.transcript).with_context(|| format!("reading {}", a.transcript.display()))?;
    let transcript = parse_lab(&a.transcript, &text, &symbols)?;
    let dir = OutDir::acquire(&a.out)?;
    let (mel, codes) = infer_tts(&run.model, &run.vocoder, &transcript, &run.cfg.stage, seed)?;
    write_outputs(&dir, "tts", &mel, &codes)?;
    dir.finish()
}

pub fn vc(a: VcArgs, seed: Option<u64>) -> Result<()> {
    let run = load_run(&a.model)?;
    require_cloned(&run)?;
    let mut stage = run.cfg.stage.clone();
    if let Some(s) = seed {
        stage.seed = s;
    }
    let source = read_mel_file(&a.source)?;
    let dir = OutDir::acquire(&a.out)?;
    let (mel, codes) = infer_vc(&run.model, &run.vocoder, &source, &stage)?;
    write_outputs(&dir, "vc", &mel, &codes)?;
    dir.finish()
}

/// First, best and last value of every term in a curve file.
fn curve_summary(name: &str, reports: &[LossReport]) -> String {
    let mut s = format!("# {name}: {} entries\n", reports.len());
    let Some(first) = reports.first() else {
        return s;
    };
    for (k, v0) in first.entries() {
        let vals: Vec<f64> = reports.iter().filter_map(|r| r.get(k)).collect();
        let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let last = vals.last().copied().unwrap_or(f64::NAN);
        s.push_str(&format!("{k}\tfirst={v0:.6}\tmin={min:.6}\tlast={last:.6}\n"));
    }
    s
}

pub fn diagnose(a: DiagnoseArgs, seed: Option<u64>) -> Result<()> {
    if a.ablation {
        return ablation(&a, seed);
    }
    let model_dir = a.model.as_deref().ok_or_else(|| anyhow!("--model is required"))?;
    if a.curves {
        let mut names: Vec<String> = fs::read_dir(model_dir)
            .with_context(|| format!("listing {}", model_dir.display()))?
            .filter_map(|e| e.ok()?.file_name().into_string().ok())
            .filter(|n| n.ends_with("curves.txt"))
            .collect();
        names.sort();
        if names.is_empty() {
            bail!("{} has no curve files", model_dir.display());
        }
        let mut text = String::new();
        for n in names {
            text.push_str(&curve_summary(&n, &read_curves(&model_dir.join(&n))?));
        }
        let dir = OutDir::acquire(&a.out)?;
        dir.write("curves_summary.txt", text.as_bytes())?;
        print!("{text}");
        return dir.finish();
    }
    let run = load_run(model_dir)?;
    let corpus_dir = a.corpus.as_deref().ok_or_else(|| anyhow!("--corpus is required"))?;
    let corpus = load_nonempty(corpus_dir)?;
    if a.dump_lle {
        let utt = a
            .utterance
            .as_deref()
            .ok_or_else(|| anyhow!("--utterance is required with --dump-lle"))?;
        let rec = corpus
            .records
            .iter()
            .find(|r| r.utterance_id == utt)
            .ok_or_else(|| anyhow!("utterance {utt} is not in {}", corpus_dir.display()))?;
        let dir = OutDir::acquire(&a.out)?;
        let speech = dump_lle(&run.model, rec, Encoder::Speech, &a.variant)?;
        speech.save(&dir.path(&format!("{utt}.speech.lle")))?;
        if rec.transcript.is_some() {
            let text = dump_lle(&run.model, rec, Encoder::Text, &a.variant)?;
            text.save(&dir.path(&format!("{utt}.text.lle")))?;
            let cmp = lle_compare(&text, &speech)?;
            let mut s = format!("mean\t{:.6}\n", cmp.mean);
            for (t, v) in cmp.per_frame.iter().enumerate() {
                s.push_str(&format!("{t}\t{v:.6}\n"));
            }
            dir.write(&format!("{utt}.tie.txt"), s.as_bytes())?;
            println!("{utt}: text/speech latent divergence {:.6}", cmp.mean);
        }
        return dir.finish();
    }
    let recs: Vec<&UtteranceRecord> = select(&corpus, &a.speakers)?
        .into_iter()
        .filter(|r| r.transcript.is_some())
        .collect();
    if recs.is_empty() {
        bail!("no transcribed utterances to score");
    }
    let per = phoneme_error_rate(&run.model, &recs)?;
    let dir = OutDir::acquire(&a.out)?;
    dir.write(
        "per.txt",
        format!("utterances\t{}\nper\t{per:.6}\n", recs.len()).as_bytes(),
    )?;
    println!("PER {per:.4} over {} utterances", recs.len());
    dir.finish()
}

fn ablation(a: &DiagnoseArgs, seed: Option<u64>) -> Result<()> {
    let cfg = build_config(
        a.model.as_deref(),
        a.config.config.as_deref(),
        &a.config.preset,
        &a.config.overrides,
        seed,
    )?;
    let corpus_dir = a
        .corpus
        .as_deref()
        .ok_or_else(|| anyhow!("--corpus is required with --ablation"))?;
    let target = a
        .target
        .as_deref()
        .ok_or_else(|| anyhow!("--target is required with --ablation"))?;
    let corpus = load_nonempty(corpus_dir)?;
    let speakers: Vec<String> = if a.speakers.is_empty() {
        corpus.speakers().into_iter().filter(|s| s != target).collect()
    } else {
        a.speakers.clone()
    };
    let train = select(&corpus, &speakers)?;
    let target_recs = corpus.by_speaker(target);
    if target_recs.len() <= a.adapt_utterances {
        bail!(
            "target {target} has {} utterances; need more than the {} used for adaptation",
            target_recs.len(),
            a.adapt_utterances
        );
    }
    let (adapt, eval) = target_recs.split_at(a.adapt_utterances);
    let vc_sources: Vec<&UtteranceRecord> = train
        .iter()
        .step_by(cfg.stage.validation_every.max(1))
        .filter(|r| r.transcript.is_some())
        .take(eval.len())
        .copied()
        .collect();
    let data = AblationData {
        n_phonemes: corpus.phonemes.len(),
        train,
        adapt: adapt.to_vec(),
        eval: eval.iter().filter(|r| r.transcript.is_some()).copied().collect(),
        vc_sources,
    };
    let dir = OutDir::acquire(&a.out)?;
    let table = run_ablation_matrix(&data, &cfg, &mut |line| eprintln!("{line}"))?;
    for (s, c) in &table.configs {
        dir.write(&format!("config_{}.txt", s.name()), c.to_text().as_bytes())?;
    }
    let tsv = table.to_tsv();
    dir.write("ablation.tsv", tsv.as_bytes())?;
    print!("{tsv}");
    dir.finish()
}
