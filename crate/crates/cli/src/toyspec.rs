//! `key = value` description of a toy corpus.

use anyhow::{bail, Context, Result};
use nautilus::features::{FeatureConfig, ToyCorpusSpec, ToySpeaker};
use nautilus::pipeline::ExperimentConfig;

/// Parsed description plus the generation seed, if the text sets one.
pub struct ToyDescription {
    pub spec: ToyCorpusSpec,
    pub seed: Option<u64>,
}

fn range(key: &str, v: &str) -> Result<(usize, usize)> {
    let (a, b) = v.split_once(',').with_context(|| format!("{key} expects `min,max`"))?;
    Ok((a.trim().parse()?, b.trim().parse()?))
}

/// Keys are `toy.*` for the corpus shape and `feature.*` for the front end.
/// Lines starting with `#` are comments.
pub fn parse_toy_spec(text: &str) -> Result<ToyDescription> {
    let mut spec = ToyCorpusSpec::default();
    let mut seed = None;
    let mut features = ExperimentConfig::default();
    features.features = FeatureConfig::default();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .with_context(|| format!("line {}: expected `key = value`", n + 1))?;
        let (k, v) = (k.trim(), v.trim());
        let parsed: Result<()> = (|| {
            match k {
                "toy.n_phonemes" => spec.n_phonemes = v.parse()?,
                "toy.speakers" => spec.speakers = (0..v.parse::<usize>()?).map(ToySpeaker::preset).collect(),
                "toy.utterances_per_speaker" => spec.utterances_per_speaker = v.parse()?,
                "toy.phonemes_per_utterance" => spec.phonemes_per_utterance = range(k, v)?,
                "toy.duration_frames" => spec.duration_frames = range(k, v)?,
                "toy.transcribed" => spec.transcribed = v.parse()?,
                "toy.seed" => seed = Some(v.parse()?),
                _ if k.starts_with("feature.") => features.set(k, v)?,
                _ => bail!("unknown key `{k}`"),
            }
            Ok(())
        })();
        parsed.with_context(|| format!("line {}", n + 1))?;
    }
    spec.features = features.features;
    spec.validate()?;
    Ok(ToyDescription { spec, seed })
}
