//! Parameter container of the text-speech model and its persistence.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::layers::{init_layer, param_shapes, SpeakerBiases};
use super::manifest::{ArchManifest, LayerKind};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Mat;

pub const NORM_MEAN: &str = "norm.mel_mean";
pub const NORM_STD: &str = "norm.mel_std";

const META_STAGES: &str = "meta/stage_flags";
const META_SPEAKER: &str = "meta/speaker/";
const META_MANIFEST: &str = "meta/manifest";
const META_FRAMING: &str = "meta/framing";

/// Completion markers of the pipeline stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StageFlags(pub u32);

impl StageFlags {
    pub const TRAINED: StageFlags = StageFlags(1);
    pub const ADAPTED_AC: StageFlags = StageFlags(2);
    pub const ADAPTED_VOC: StageFlags = StageFlags(4);
    pub const WELDED: StageFlags = StageFlags(8);

    pub fn contains(self, other: StageFlags) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn insert(&mut self, other: StageFlags) {
        self.0 |= other.0;
    }

    pub fn name(self) -> &'static str {
        match self {
            StageFlags::TRAINED => "TRAINED",
            StageFlags::ADAPTED_AC => "ADAPTED_AC",
            StageFlags::ADAPTED_VOC => "ADAPTED_VOC",
            StageFlags::WELDED => "WELDED",
            _ => "MIXED",
        }
    }
}

impl fmt::Display for StageFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [Self::TRAINED, Self::ADAPTED_AC, Self::ADAPTED_VOC, Self::WELDED]
            .into_iter()
            .filter(|s| self.contains(*s))
            .map(StageFlags::name)
            .collect();
        if names.is_empty() {
            f.write_str("NONE")
        } else {
            f.write_str(&names.join("|"))
        }
    }
}

/// Per-layer speaker biases of every speaker-dependent layer.
pub type SpeakerBiasTable = BTreeMap<String, SpeakerBiases>;

/// Stores framing metadata, speaker names and stage markers as tensors next
/// to the parameters.
pub(crate) fn meta_tensors(
    stages: StageFlags,
    speakers: &[String],
    framing: (f32, f32),
    config_text: &str,
) -> Vec<(String, Mat)> {
    let mut v = vec![
        (META_STAGES.to_string(), Mat::scalar(stages.0 as f64)),
        (
            META_FRAMING.to_string(),
            Mat::from_vec(1, 2, vec![framing.0 as f64, framing.1 as f64]),
        ),
        (
            META_MANIFEST.to_string(),
            Mat::from_vec(1, config_text.len(), config_text.bytes().map(f64::from).collect()),
        ),
    ];
    for (k, s) in speakers.iter().enumerate() {
        v.push((format!("{META_SPEAKER}{s}"), Mat::scalar(k as f64)));
    }
    v
}

pub(crate) struct Meta {
    pub stages: StageFlags,
    pub speakers: Vec<String>,
    pub framing: (f32, f32),
    pub config_text: String,
    pub params: ParamStore,
}

pub(crate) fn split_meta(path: &Path, ck: Checkpoint) -> Result<Meta> {
    let mut stages = None;
    let mut framing = None;
    let mut text = None;
    let mut speakers: Vec<(usize, String)> = Vec::new();
    let mut params = ParamStore::new();
    for (name, m) in ck.tensors {
        if name == META_STAGES {
            stages = Some(StageFlags(m.item() as u32));
        } else if name == META_FRAMING {
            framing = Some((m.data()[0] as f32, m.data()[1] as f32));
        } else if name == META_MANIFEST {
            let bytes: Vec<u8> = m.data().iter().map(|&v| v as u8).collect();
            text = Some(String::from_utf8(bytes).map_err(|_| Error::data_file(path, "embedded config is not utf-8"))?);
        } else if let Some(id) = name.strip_prefix(META_SPEAKER) {
            speakers.push((m.item() as usize, id.to_string()));
        } else {
            params.insert(name, m);
        }
    }
    speakers.sort();
    if speakers.iter().enumerate().any(|(i, (k, _))| *k != i) {
        return Err(Error::data_file(path, "speaker indices are not contiguous"));
    }
    let missing = |what: &str| Error::data_file(path, format!("checkpoint lacks {what}"));
    Ok(Meta {
        stages: stages.ok_or_else(|| missing("stage flags"))?,
        speakers: speakers.into_iter().map(|(_, s)| s).collect(),
        framing: framing.ok_or_else(|| missing("framing metadata"))?,
        config_text: text.ok_or_else(|| missing("embedded configuration"))?,
        params,
    })
}

/// Parameters of the four text-speech networks plus bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub manifest: ArchManifest,
    pub params: ParamStore,
    pub step: u64,
    pub stages: StageFlags,
    /// Training speaker names; index = speaker bias row.
    pub speakers: Vec<String>,
    pub frame_shift_ms: f32,
    pub window_ms: f32,
}

impl ModelState {
    /// Randomly initialised state. Speaker names default to `spk<k>`.
    pub fn new(manifest: ArchManifest, seed: u64) -> Result<Self> {
        manifest.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let k = manifest.dims.speakers;
        for spec in &manifest.layers {
            init_layer(&mut params, spec, k, &mut rng);
        }
        let d = manifest.dims.mel;
        params.init_const(NORM_MEAN, 1, d, 0.0);
        params.init_const(NORM_STD, 1, d, 1.0);
        Ok(ModelState {
            manifest,
            params,
            step: 0,
            stages: StageFlags::default(),
            speakers: (0..k).map(|i| format!("spk{i}")).collect(),
            frame_shift_ms: 12.5,
            window_ms: 50.0,
        })
    }

    pub fn config_hash(&self) -> [u8; 32] {
        self.manifest.hash()
    }

    pub fn speaker_index(&self, id: &str) -> Option<usize> {
        self.speakers.iter().position(|s| s == id)
    }

    /// Sets the per-band normalisation applied at the mel boundaries.
    pub fn set_normalization(&mut self, mean: &[f64], std: &[f64]) -> Result<()> {
        let d = self.manifest.dims.mel;
        if mean.len() != d || std.len() != d || std.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::model("normalisation needs D means and D positive stds"));
        }
        self.params.insert(NORM_MEAN, Mat::from_vec(1, d, mean.to_vec()));
        self.params.insert(NORM_STD, Mat::from_vec(1, d, std.to_vec()));
        Ok(())
    }

    /// `(scale, shift)` mapping raw log-mel to the normalised domain.
    pub fn normalizer(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        normalizer(&self.params)
    }

    /// `(scale, shift)` mapping normalised values back to raw log-mel.
    pub fn denormalizer(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((
            self.params.get(NORM_STD)?.data().to_vec(),
            self.params.get(NORM_MEAN)?.data().to_vec(),
        ))
    }

    /// Names of every speaker-bias parameter currently present.
    pub fn speaker_bias_names(&self) -> Vec<String> {
        self.manifest
            .layers
            .iter()
            .filter(|l| l.speaker)
            .flat_map(|l| [format!("{}.spk_f", l.name), format!("{}.spk_g", l.name)])
            .filter(|n| self.params.contains(n))
            .collect()
    }

    pub fn has_speaker_biases(&self) -> bool {
        !self.speaker_bias_names().is_empty()
    }

    pub fn speaker_bias_table(&self) -> Result<SpeakerBiasTable> {
        let mut t = SpeakerBiasTable::new();
        for l in self.manifest.layers.iter().filter(|l| l.speaker) {
            let (nf, ng) = (format!("{}.spk_f", l.name), format!("{}.spk_g", l.name));
            if self.params.contains(&nf) {
                t.insert(
                    l.name.clone(),
                    SpeakerBiases {
                        bf: self.params.get(&nf)?.clone(),
                        bg: self.params.get(&ng)?.clone(),
                    },
                );
            }
        }
        Ok(t)
    }

    /// Drops every speaker-bias tensor; a no-op if already removed.
    pub fn remove_speaker_biases(&mut self) -> usize {
        let names = self.speaker_bias_names();
        for n in &names {
            self.params.remove(n);
        }
        names.len()
    }

    /// Checks that every manifest parameter exists with the expected shape.
    pub fn validate(&self) -> Result<()> {
        self.manifest.validate()?;
        let k = self.manifest.dims.speakers;
        let biases_present = self.has_speaker_biases();
        let mut expected = 2;
        for spec in &self.manifest.layers {
            for (name, r, c) in param_shapes(spec, k) {
                let is_bias = name.ends_with(".spk_f") || name.ends_with(".spk_g");
                if is_bias && !biases_present {
                    continue;
                }
                let m = self.params.get(&name)?;
                if m.shape() != (r, c) {
                    return Err(Error::model(format!(
                        "parameter {name} has shape {:?}, manifest expects ({r}, {c})",
                        m.shape()
                    )));
                }
                expected += 1;
            }
        }
        for n in [NORM_MEAN, NORM_STD] {
            if self.params.get(n)?.shape() != (1, self.manifest.dims.mel) {
                return Err(Error::model(format!("{n} has the wrong shape")));
            }
        }
        if self.params.len() != expected {
            return Err(Error::model(format!(
                "state holds {} tensors, manifest declares {expected}",
                self.params.len()
            )));
        }
        if self.speakers.len() != k {
            return Err(Error::model(format!(
                "{} speaker names for {k} speakers",
                self.speakers.len()
            )));
        }
        Ok(())
    }

    /// Whether a layer of this kind exists in the manifest under `prefix`.
    pub fn has_block(&self, prefix: &str) -> bool {
        self.manifest.layers.iter().any(|l| l.name.starts_with(prefix))
    }

    pub fn count_kind(&self, kind: LayerKind) -> usize {
        self.manifest.layers.iter().filter(|l| l.kind == kind).count()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors: Vec<(String, Mat)> = self.params.iter().map(|(n, m)| (n.to_string(), m.clone())).collect();
        tensors.extend(meta_tensors(
            self.stages,
            &self.speakers,
            (self.frame_shift_ms, self.window_ms),
            &self.manifest.to_text(),
        ));
        Checkpoint {
            config_hash: self.config_hash(),
            step: self.step,
            tensors,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    /// Loads a checkpoint; with `expected`, its configuration hash must match.
    pub fn load(path: &Path, expected: Option<&ArchManifest>) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let hash = ck.config_hash;
        let step = ck.step;
        let meta = split_meta(path, ck)?;
        let manifest = ArchManifest::parse(&meta.config_text)?;
        if manifest.hash() != hash {
            return Err(Error::data_file(
                path,
                "embedded manifest does not match the header hash",
            ));
        }
        if let Some(m) = expected {
            if m.hash() != hash {
                return Err(Error::model(format!(
                    "checkpoint {} was written for a different architecture",
                    path.display()
                )));
            }
        }
        let state = ModelState {
            manifest,
            params: meta.params,
            step,
            stages: meta.stages,
            speakers: meta.speakers,
            frame_shift_ms: meta.framing.0,
            window_ms: meta.framing.1,
        };
        state.validate().map_err(|e| Error::data_file(path, e.to_string()))?;
        Ok(state)
    }
}

pub(crate) fn normalizer(params: &ParamStore) -> Result<(Vec<f64>, Vec<f64>)> {
    let mean = params.get(NORM_MEAN)?.data();
    let std = params.get(NORM_STD)?.data();
    Ok((
        std.iter().map(|s| 1.0 / s).collect(),
        mean.iter().zip(std).map(|(m, s)| -m / s).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::manifest::ModelDims;

    fn state() -> ModelState {
        ModelState::new(
            ArchManifest::standard(ModelDims {
                phonemes: 6,
                mel: 5,
                latent: 3,
                channels: 4,
                speakers: 3,
            }),
            9,
        )
        .unwrap()
    }

    #[test]
    fn new_state_validates() {
        state().validate().unwrap();
    }

    #[test]
    fn removal_drops_exactly_the_bias_tensors() {
        let mut s = state();
        let before = s.params.scalar_count();
        let n_layers = s.manifest.layers.iter().filter(|l| l.speaker).count();
        let removed = s.remove_speaker_biases();
        assert_eq!(removed, 2 * n_layers);
        assert_eq!(before - s.params.scalar_count(), n_layers * 2 * 3 * 4);
        let snapshot = s.clone();
        assert_eq!(s.remove_speaker_biases(), 0);
        assert_eq!(s, snapshot);
        s.validate().unwrap();
    }

    #[test]
    fn stage_flag_display() {
        let mut f = StageFlags::TRAINED;
        f.insert(StageFlags::WELDED);
        assert_eq!(f.to_string(), "TRAINED|WELDED");
        assert!(f.contains(StageFlags::TRAINED));
        assert!(!f.contains(StageFlags::ADAPTED_AC));
    }

    #[test]
    fn save_load_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = state();
        s.stages.insert(StageFlags::TRAINED);
        s.step = 17;
        s.speakers = vec!["alice".into(), "bob".into(), "carol".into()];
        let p = dir.path().join("m.ckpt");
        s.save(&p).unwrap();
        let back = ModelState::load(&p, Some(&s.manifest)).unwrap();
        assert_eq!(back, s);
        let other = s.manifest.without("tdec.");
        assert!(ModelState::load(&p, Some(&other)).is_err());
    }
}
